//! Event streams and their dense encodings.
//!
//! Events are read from `t,x,y,p` CSV files, aligned to RGB frames through
//! linearly decaying time surfaces, and cropped into template/search
//! patches together with the RGB frames.

mod crop;
mod manifest;
mod stream;
mod surface;
mod synth;

pub use crop::{crop_patch, CropWindow, Modality, Patch, PatchKind};
pub use manifest::{load_sequence, write_sequence, CornerBox, Manifest, ManifestFrame, Sequence};
pub use stream::{parse_events, parse_events_str, write_events, Event, EventStream, Polarity, SensorSize};
pub use surface::{event_voxel, time_surface, FrameIndex, TimeSurface};
pub use synth::{synth_sequence, SimConfig};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stream::{parse_events, write_events, EventStream, SensorSize};
use super::surface::FrameIndex;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground-truth box as pixel corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<BBox> for CornerBox {
    fn from(b: BBox) -> Self {
        let [x1, y1, x2, y2] = b.corners();
        Self { x1, y1, x2, y2 }
    }
}

impl From<CornerBox> for BBox {
    fn from(c: CornerBox) -> Self {
        BBox::from_corners(c.x1, c.y1, c.x2, c.y2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub frame_id: u64,
    pub t_rgb: u64,
    pub exposure: u64,
    pub image: String,
    #[serde(default)]
    pub bbox: Option<CornerBox>,
}

/// On-disk sequence description. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sensor: SensorSize,
    pub events: String,
    pub frames: Vec<ManifestFrame>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        FrameIndex::validate_sequence(&m.frame_index())?;
        Ok(m)
    }

    pub fn frame_index(&self) -> Vec<FrameIndex> {
        self.frames
            .iter()
            .map(|f| FrameIndex {
                frame_id: f.frame_id,
                t_rgb: f.t_rgb,
                exposure: f.exposure,
                bbox_gt: f.bbox.map(BBox::from),
            })
            .collect()
    }
}

/// A sequence held in memory: RGB frames as `[3 × H × W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub sensor: SensorSize,
    pub frames: Vec<FrameIndex>,
    pub images: Vec<Tensor>,
    pub events: EventStream,
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_png(path: &Path, sensor: SensorSize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    if img.width() != sensor.width || img.height() != sensor.height {
        return Err(Error::Validation(format!(
            "{} is {}x{}, sensor is {}x{}",
            path.display(),
            img.width(),
            img.height(),
            sensor.width,
            sensor.height
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

/// Loads the manifest, its PNG frames and its event file.
pub fn load_sequence(manifest_path: &Path) -> Result<Sequence> {
    let m = Manifest::read(manifest_path)?;
    let dir = base_dir(manifest_path);
    let events = parse_events(&dir.join(&m.events), m.sensor)?;
    let images = m
        .frames
        .iter()
        .map(|f| read_png(&dir.join(&f.image), m.sensor))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        sensor: m.sensor,
        frames: m.frame_index(),
        images,
        events,
    })
}

/// Writes `manifest.json`, `events.csv` and one PNG per frame into `dir`.
/// Returns the manifest path.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_events(&dir.join("events.csv"), &seq.events)?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (f, img) in seq.frames.iter().zip(&seq.images) {
        let name = format!("frame_{:06}.png", f.frame_id);
        write_png(&dir.join(&name), img)?;
        frames.push(ManifestFrame {
            frame_id: f.frame_id,
            t_rgb: f.t_rgb,
            exposure: f.exposure,
            image: name,
            bbox: f.bbox_gt.map(CornerBox::from),
        });
    }
    let manifest = Manifest {
        sensor: seq.sensor,
        events: "events.csv".into(),
        frames,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::event::{event_voxel, FrameIndex, Sequence};
use crate::model::{FreqTrack, Template};
use crate::tensor::Tensor;

use super::metrics::SequenceResult;

/// One output row: box in image pixels plus confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub frame_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// A single-object tracker run one frame at a time.
pub trait Tracker {
    /// Starts on frame `k` with the given box.
    fn init(&mut self, seq: &Sequence, k: usize, bbox: &BBox) -> Result<()>;
    /// Box and confidence for frame `k`.
    fn track(&mut self, seq: &Sequence, k: usize) -> Result<(BBox, f64)>;
}

/// Replays the ground truth.
#[derive(Debug, Default)]
pub struct OracleTracker;

impl Tracker for OracleTracker {
    fn init(&mut self, _: &Sequence, _: usize, _: &BBox) -> Result<()> {
        Ok(())
    }

    fn track(&mut self, seq: &Sequence, k: usize) -> Result<(BBox, f64)> {
        let b = seq.frames[k]
            .bbox_gt
            .ok_or_else(|| Error::Contract(format!("frame {k} has no ground truth")))?;
        Ok((b, 1.0))
    }
}

/// Always answers with the same box.
#[derive(Debug)]
pub struct ConstantTracker(pub BBox);

impl Tracker for ConstantTracker {
    fn init(&mut self, _: &Sequence, _: usize, _: &BBox) -> Result<()> {
        Ok(())
    }

    fn track(&mut self, _: &Sequence, _: usize) -> Result<(BBox, f64)> {
        Ok((self.0, 0.0))
    }
}

/// The learned tracker: fixed template from the first frame, search window
/// centred on the previous prediction.
pub struct FreqTracker<'m> {
    model: &'m FreqTrack,
    template: Option<Template>,
    last: Option<BBox>,
}

impl<'m> FreqTracker<'m> {
    pub fn new(model: &'m FreqTrack) -> Self {
        Self {
            model,
            template: None,
            last: None,
        }
    }

    fn voxel(&self, seq: &Sequence, k: usize) -> Result<Tensor> {
        event_voxel(&seq.events, &seq.frames[k], seq.sensor, self.model.cfg.backbone.bins)
    }
}

impl Tracker for FreqTracker<'_> {
    fn init(&mut self, seq: &Sequence, k: usize, bbox: &BBox) -> Result<()> {
        let vox = self.voxel(seq, k)?;
        self.template = Some(self.model.template(&seq.images[k], &vox, bbox)?);
        self.last = Some(*bbox);
        Ok(())
    }

    fn track(&mut self, seq: &Sequence, k: usize) -> Result<(BBox, f64)> {
        let (Some(t), Some(last)) = (&self.template, self.last) else {
            return Err(Error::Contract("tracker used before init".into()));
        };
        let vox = self.voxel(seq, k)?;
        let s = self.model.search(&seq.images[k], &vox, &last)?;
        let (b, score) = self.model.predict(t, &s)?;
        self.last = Some(b);
        Ok((b, score))
    }
}

/// One-pass evaluation: initialize on the first frame's ground truth, then
/// track every later frame. Metrics cover frames with ground truth.
pub fn track_sequence<T: Tracker>(tracker: &mut T, seq: &Sequence) -> Result<(Vec<Prediction>, SequenceResult)> {
    let first = seq
        .frames
        .first()
        .and_then(|f| f.bbox_gt)
        .ok_or_else(|| Error::Contract("first frame needs a ground-truth box".into()))?;
    if seq.images.len() != seq.frames.len() {
        return Err(Error::dim("track_sequence", &[seq.images.len()], &[seq.frames.len()]));
    }
    tracker.init(seq, 0, &first)?;
    let mut preds = vec![Prediction {
        frame_id: seq.frames[0].frame_id,
        bbox: first,
        score: 1.0,
    }];
    for k in 1..seq.frames.len() {
        let (bbox, score) = tracker.track(seq, k)?;
        preds.push(Prediction {
            frame_id: seq.frames[k].frame_id,
            bbox,
            score,
        });
    }
    let result = evaluate(seq, &preds)?;
    Ok((preds, result))
}

/// Matches predictions to ground truth by frame id.
pub fn evaluate(seq: &Sequence, preds: &[Prediction]) -> Result<SequenceResult> {
    evaluate_frames(&seq.frames, preds)
}

/// [`evaluate`] against bare frame records, e.g. straight from a manifest.
pub fn evaluate_frames(frames: &[FrameIndex], preds: &[Prediction]) -> Result<SequenceResult> {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for f in frames {
        let Some(gt) = f.bbox_gt else { continue };
        let pred = preds
            .iter()
            .find(|x| x.frame_id == f.frame_id)
            .ok_or_else(|| Error::Validation(format!("no prediction for frame {}", f.frame_id)))?;
        p.push(pred.bbox);
        g.push(gt);
    }
    SequenceResult::new(&p, &g)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::from("frame_id,cx,cy,w,h,score\n");
    for p in preds {
        let b = p.bbox;
        writeln!(out, "{},{},{},{},{},{}", p.frame_id, b.cx, b.cy, b.w, b.h, p.score).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || (i == 0 && row.starts_with("frame_id")) {
            continue;
        }
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 6 fields, found {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad number {s:?}: {e}"),
            })
        };
        let frame_id = f[0].parse::<u64>().map_err(|e| Error::Parse {
            line,
            msg: format!("bad frame id {:?}: {e}", f[0]),
        })?;
        out.push(Prediction {
            frame_id,
            bbox: BBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?),
            score: num(f[5])?,
        });
    }
    Ok(out)
}

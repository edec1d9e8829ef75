use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchKind {
    Template,
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Event,
}

/// Square source region a patch was sampled from, in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_side: usize,
}

impl CropWindow {
    /// Window of side `scale·max(w, h)` centred on the box.
    pub fn around(bbox: &BBox, scale: f64, out_side: usize) -> Result<Self> {
        if !(bbox.w > 0.0 && bbox.h > 0.0) {
            return Err(Error::Validation(format!("degenerate crop box {bbox:?}")));
        }
        if !(scale > 0.0) || out_side == 0 {
            return Err(Error::Config(format!(
                "crop needs scale > 0 and out_side > 0, got {scale} and {out_side}"
            )));
        }
        let side = scale * bbox.w.max(bbox.h);
        Ok(Self {
            x0: bbox.cx - 0.5 * side,
            y0: bbox.cy - 0.5 * side,
            side,
            out_side,
        })
    }

    /// Pixels of source per pixel of patch.
    pub fn stride(&self) -> f64 {
        self.side / self.out_side as f64
    }

    pub fn to_image(&self, b: &BBox) -> BBox {
        let s = self.stride();
        BBox::new(self.x0 + b.cx * s, self.y0 + b.cy * s, b.w * s, b.h * s)
    }

    pub fn to_patch(&self, b: &BBox) -> BBox {
        let s = self.stride();
        BBox::new((b.cx - self.x0) / s, (b.cy - self.y0) / s, b.w / s, b.h / s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `[channels × out_side × out_side]`.
    pub data: Tensor,
    pub kind: PatchKind,
    pub modality: Modality,
    pub window: CropWindow,
}

/// Bilinear resampling of the crop window of a `[C × H × W]` (or `[H × W]`)
/// source. Pixel `(i, j)` is centred at `(j + 0.5, i + 0.5)`; samples
/// outside the source read zero.
pub fn crop_patch(source: &Tensor, bbox: &BBox, scale: f64, out_side: usize) -> Result<(Tensor, CropWindow)> {
    let window = CropWindow::around(bbox, scale, out_side)?;
    let (c, h, w) = match *source.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("crop_patch", source.shape(), &[0, 0, 0])),
    };
    let s = window.stride();
    let taps = |start: f64, limit: usize| -> Vec<[(usize, f64); 2]> {
        (0..out_side)
            .map(|u| {
                let p = start + (u as f64 + 0.5) * s - 0.5;
                let i0 = p.floor();
                let f = p - i0;
                let at = |i: f64, wgt: f64| {
                    if i >= 0.0 && (i as usize) < limit {
                        (i as usize, wgt)
                    } else {
                        (0, 0.0)
                    }
                };
                [at(i0, 1.0 - f), at(i0 + 1.0, f)]
            })
            .collect()
    };
    let xs = taps(window.x0, w);
    let ys = taps(window.y0, h);
    let src = source.data();
    let mut out = vec![0.0; c * out_side * out_side];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (v, yt) in ys.iter().enumerate() {
            for (u, xt) in xs.iter().enumerate() {
                let mut acc = 0.0;
                for &(yi, wy) in yt {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(xi, wx) in xt {
                        if wx != 0.0 {
                            acc += wy * wx * plane[yi * w + xi];
                        }
                    }
                }
                out[(ch * out_side + v) * out_side + u] = acc;
            }
        }
    }
    Ok((Tensor::new([c, out_side, out_side], out)?, window))
}

//! Centre-based box head and the tracking objective.
//!
//! Three branches (`3×3 conv → GELU → 1×1 conv`) read the search token grid
//! and predict a centre score map, a normalized box size and a sub-cell
//! centre offset. Training combines a Gaussian-target focal loss, an L1 term
//! on size and offset at the ground-truth cell, and a GIoU term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{giou_loss_and_grad, Tape, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.0,
            l1: 14.0,
            giou: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.focal, self.l1, self.giou].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Width of the hidden 3×3 conv.
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

#[derive(Debug, Clone)]
struct Branch {
    w3: ParamId,
    b3: ParamId,
    w1: ParamId,
    b1: ParamId,
}

impl Branch {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w3: store.add(format!("{prefix}.conv3.w"), trunc_normal(&[9 * dim, hidden], 0.02, rng)),
            b3: store.add(format!("{prefix}.conv3.b"), Tensor::zeros([hidden])),
            w1: store.add(format!("{prefix}.conv1.w"), trunc_normal(&[hidden, out], 0.02, rng)),
            b1: store.add(format!("{prefix}.conv1.b"), Tensor::zeros([out])),
        }
    }

    fn forward<'t>(&self, g: &Graph<'t, '_>, cols: Var<'t>) -> Result<Var<'t>> {
        cols.affine(g.param(self.w3), g.param(self.b3))?
            .gelu()
            .affine(g.param(self.w1), g.param(self.b1))
    }
}

/// Head outputs on the tape, one row per grid cell in row-major order.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs<'t> {
    /// `[G² × 1]`, in (0, 1).
    pub score: Var<'t>,
    /// `[G² × 2]` normalized `(w, h)`, in (0, 1).
    pub size: Var<'t>,
    /// `[G² × 2]` sub-cell `(δx, δy)`.
    pub offset: Var<'t>,
}

/// Plain-valued maps and the decoded box.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutputs {
    /// `[G × G]`.
    pub score: Tensor,
    /// `[2 × G × G]`.
    pub size: Tensor,
    /// `[2 × G × G]`.
    pub offset: Tensor,
    /// Search-patch pixels.
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub grid: usize,
    pub dim: usize,
    pub search_side: usize,
    score: Branch,
    size: Branch,
    offset: Branch,
}

/// Row-major `[G² × 9D]` neighbourhood matrix of a `[G² × D]` token grid,
/// zero-padded at the border.
fn im2col3<'t>(x: Var<'t>, grid: usize) -> Result<Var<'t>> {
    let g = grid as isize;
    let mut taps = Vec::with_capacity(9);
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            let idx = (0..g * g)
                .map(|k| {
                    let (r, c) = (k / g + dy, k % g + dx);
                    (r >= 0 && r < g && c >= 0 && c < g).then(|| (r * g + c) as usize)
                })
                .collect();
            taps.push(x.gather_rows(idx)?);
        }
    }
    Var::concat_cols(&taps)
}

impl Head {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        grid: usize,
        search_side: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if grid == 0 || cfg.hidden == 0 || search_side == 0 {
            return Err(Error::Config("head needs a non-empty grid and hidden width".into()));
        }
        Ok(Self {
            grid,
            dim,
            search_side,
            score: Branch::new(store, &format!("{prefix}.score"), dim, cfg.hidden, 1, rng),
            size: Branch::new(store, &format!("{prefix}.size"), dim, cfg.hidden, 2, rng),
            offset: Branch::new(store, &format!("{prefix}.offset"), dim, cfg.hidden, 2, rng),
        })
    }

    /// `feat` is the search grid as `[G² × D]` tokens.
    pub fn forward<'t>(&self, g: &Graph<'t, '_>, feat: Var<'t>) -> Result<HeadOutputs<'t>> {
        let want = [self.grid * self.grid, self.dim];
        if feat.shape() != want {
            return Err(Error::dim("head", &feat.shape(), &want));
        }
        let cols = im2col3(feat, self.grid)?;
        Ok(HeadOutputs {
            score: self.score.forward(g, cols)?.sigmoid(),
            size: self.size.forward(g, cols)?.sigmoid(),
            offset: self.offset.forward(g, cols)?,
        })
    }

    /// Zeroes the final 1×1 convs; scores become 0.5 everywhere.
    pub fn zero_final(&self, store: &mut ParamStore) -> Result<()> {
        for b in [&self.score, &self.size, &self.offset] {
            let (w, bias) = (store.get(b.w1).shape().to_vec(), store.get(b.b1).shape().to_vec());
            store.set(b.w1, Tensor::zeros(w))?;
            store.set(b.b1, Tensor::zeros(bias))?;
        }
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.score, &self.size, &self.offset]
            .iter()
            .flat_map(|b| [b.w3, b.b3, b.w1, b.b1])
            .collect()
    }

    pub fn outputs(&self, out: &HeadOutputs<'_>) -> Result<TrackOutputs> {
        let g = self.grid;
        let cm = |v: Var<'_>| -> Result<Tensor> {
            let t = v.value();
            let mut data = vec![0.0; 2 * g * g];
            for k in 0..g * g {
                data[k] = t.at2(k, 0);
                data[g * g + k] = t.at2(k, 1);
            }
            Tensor::new([2, g, g], data)
        };
        let score = (*out.score.value()).clone().reshape([g, g])?;
        let size = cm(out.size)?;
        let offset = cm(out.offset)?;
        let (bbox, confidence) = decode(&score, &size, &offset, self.search_side as f64)?;
        Ok(TrackOutputs {
            score,
            size,
            offset,
            bbox,
            confidence,
        })
    }
}

/// Box at the highest-scoring cell `(i, j)`:
/// `cx = (j + δx)/G·S`, `cy = (i + δy)/G·S`, `w = s_w·S`, `h = s_h·S`.
/// Offsets are clamped into `[0, 1)` and the box is clipped to the patch.
pub fn decode(score: &Tensor, size: &Tensor, offset: &Tensor, side: f64) -> Result<(BBox, f64)> {
    let &[gh, gw] = score.shape() else {
        return Err(Error::dim("decode", score.shape(), &[0, 0]));
    };
    if size.shape() != [2, gh, gw] || offset.shape() != [2, gh, gw] {
        return Err(Error::dim("decode", size.shape(), offset.shape()));
    }
    let (best, conf) = score
        .data()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
    let (i, j) = (best / gw, best % gw);
    let below_one = 1.0 - f64::EPSILON;
    let dx = offset.data()[best].clamp(0.0, below_one);
    let dy = offset.data()[gh * gw + best].clamp(0.0, below_one);
    let cx = (j as f64 + dx) / gw as f64 * side;
    let cy = (i as f64 + dy) / gh as f64 * side;
    let w = size.data()[best].clamp(f64::MIN_POSITIVE, 1.0) * side;
    let h = size.data()[gh * gw + best].clamp(f64::MIN_POSITIVE, 1.0) * side;
    let x1 = (cx - 0.5 * w).max(0.0);
    let y1 = (cy - 0.5 * h).max(0.0);
    let x2 = (cx + 0.5 * w).min(side);
    let y2 = (cy + 0.5 * h).min(side);
    Ok((BBox::from_corners(x1, y1, x2, y2), conf))
}

/// Grid cell `(row, col)` containing the box centre.
pub fn gt_cell(gt: &BBox, grid: usize, side: f64) -> Result<(usize, usize)> {
    if !(gt.cx >= 0.0 && gt.cx < side && gt.cy >= 0.0 && gt.cy < side) {
        return Err(Error::Validation(format!("box centre {gt:?} outside the {side} px patch")));
    }
    let cell = |v: f64| ((v / side * grid as f64) as usize).min(grid - 1);
    Ok((cell(gt.cy), cell(gt.cx)))
}

/// Gaussian heat map `[G² × 1]` peaking at exactly 1 on `cell`, with
/// `σ = (2r + 1)/6` for `r = max(1, min(w, h)/3)` in grid cells.
pub fn gaussian_target(gt: &BBox, grid: usize, side: f64) -> Result<Tensor> {
    gt.validate()?;
    let (ci, cj) = gt_cell(gt, grid, side)?;
    let cells = gt.w.min(gt.h) / side * grid as f64;
    let r = (cells / 3.0).max(1.0);
    let sigma = (2.0 * r + 1.0) / 6.0;
    let mut data = vec![0.0; grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
            data[i * grid + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    Tensor::new([grid * grid, 1], data)
}

/// Penalty-reduced focal loss of a score map against a heat map.
pub fn focal_loss(score: &Tensor, target: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(tape.constant(score.clone()).focal_loss(target, FOCAL_ALPHA, FOCAL_BETA)?.item())
}

/// `1 − GIoU`, in `[0, 2]`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    Ok(giou_loss_and_grad(&pred.to_array(), &gt.to_array()).0)
}

/// Correctly rounded `Σ w_i·x_i` for a handful of terms, via error-free
/// product and sum transforms.
fn dot_compensated(w: &[f64], x: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for (&a, &b) in w.iter().zip(x) {
        let p = a * b;
        let pe = a.mul_add(b, -p);
        let t = s + p;
        let z = t - s;
        let se = (s - (t - z)) + (p - z);
        s = t;
        c += pe + se;
    }
    s + c
}

/// `λ_focal·L_focal + λ_1·L_1 + λ_giou·L_giou`.
pub fn total_loss(focal: f64, l1: f64, giou: f64, w: &LossWeights) -> f64 {
    dot_compensated(&[w.focal, w.l1, w.giou], &[focal, l1, giou])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

/// Training objective for a ground-truth box in search-patch pixels.
pub fn head_loss<'t>(
    out: &HeadOutputs<'t>,
    gt: &BBox,
    grid: usize,
    side: f64,
    w: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    let target = gaussian_target(gt, grid, side)?;
    let (i, j) = gt_cell(gt, grid, side)?;
    let cell = i * grid + j;
    let tape = out.score.tape();

    let focal = out.score.focal_loss(&target, FOCAL_ALPHA, FOCAL_BETA)?;
    let size = out.size.gather_rows(vec![Some(cell)])?;
    let offset = out.offset.gather_rows(vec![Some(cell)])?;
    let gf = grid as f64;
    let want = Tensor::new(
        [1, 4],
        vec![gt.w / side, gt.h / side, gt.cx / side * gf - j as f64, gt.cy / side * gf - i as f64],
    )?;
    let l1 = Var::concat_cols(&[size, offset])?
        .sub(tape.constant(want))?
        .abs()
        .sum()
        .scale(0.25);
    let center = offset
        .scale(1.0 / gf)
        .add(tape.constant(Tensor::new([1, 2], vec![j as f64 / gf, i as f64 / gf])?))?;
    let giou = Var::concat_cols(&[center, size])?.giou_loss([gt.cx / side, gt.cy / side, gt.w / side, gt.h / side])?;

    let total = focal
        .scale(w.focal)
        .add(l1.scale(w.l1))?
        .add(giou.scale(w.giou))?;
    let parts = (focal.item(), l1.item(), giou.item());
    let breakdown = LossBreakdown {
        focal: parts.0,
        l1: parts.1,
        giou: parts.2,
        total: total_loss(parts.0, parts.1, parts.2, w),
    };
    Ok((total, breakdown))
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Sequence;
use super::stream::{Event, EventStream, Polarity, SensorSize};
use super::surface::FrameIndex;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Moving-square simulator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub target_size: f64,
    /// Initial centre; drawn from the seed when absent.
    pub start: Option<(f64, f64)>,
    /// Pixels per frame; drawn from the seed when absent.
    pub velocity: Option<(f64, f64)>,
    pub max_speed: f64,
    pub frame_interval_us: u64,
    pub exposure_us: u64,
    pub substeps: usize,
    pub contrast_threshold: f64,
    pub texture_cell: usize,
    pub background: (f64, f64),
    pub target_intensity: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            frames: 30,
            target_size: 32.0,
            start: None,
            velocity: None,
            max_speed: 4.0,
            frame_interval_us: 10_000,
            exposure_us: 10_000,
            substeps: 8,
            contrast_threshold: 0.15,
            texture_cell: 16,
            background: (0.1, 0.4),
            target_intensity: 0.9,
        }
    }
}

const CHANNEL_GAIN: [f64; 3] = [1.0, 0.9, 0.8];

impl SimConfig {
    fn validate(&self) -> Result<()> {
        let min_side = self.width.min(self.height) as f64;
        if self.frames == 0 || self.substeps == 0 || self.texture_cell == 0 {
            return Err(Error::Config("frames, substeps and texture_cell must be positive".into()));
        }
        if !(self.target_size > 0.0 && self.target_size < min_side) {
            return Err(Error::Config(format!(
                "target size {} must be in (0, {min_side})",
                self.target_size
            )));
        }
        if !(self.contrast_threshold > 0.0) || self.frame_interval_us == 0 || self.exposure_us == 0 {
            return Err(Error::Config("contrast threshold and timings must be positive".into()));
        }
        let (lo, hi) = self.background;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0 && self.target_intensity > 0.0) {
            return Err(Error::Config("intensities must be positive with lo ≤ hi ≤ 1".into()));
        }
        Ok(())
    }
}

/// Reflects `v` into `[lo, hi]`.
fn fold(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let r = (v - lo).rem_euclid(2.0 * span);
    lo + if r > span { 2.0 * span - r } else { r }
}

struct Scene {
    w: usize,
    h: usize,
    texture: Vec<f64>,
    size: f64,
    target: f64,
    start: (f64, f64),
    vel: (f64, f64),
}

impl Scene {
    /// Target centre at time `tau`, in frames.
    fn center(&self, tau: f64) -> (f64, f64) {
        let half = 0.5 * self.size;
        (
            fold(self.start.0 + self.vel.0 * tau, half, self.w as f64 - half),
            fold(self.start.1 + self.vel.1 * tau, half, self.h as f64 - half),
        )
    }

    /// Luminance with area-weighted target coverage.
    fn render(&self, tau: f64) -> Vec<f64> {
        let (cx, cy) = self.center(tau);
        let half = 0.5 * self.size;
        let cover = |lo: f64, hi: f64, i: usize| {
            let a = i as f64;
            (hi.min(a + 1.0) - lo.max(a)).clamp(0.0, 1.0)
        };
        let cov_x: Vec<f64> = (0..self.w).map(|x| cover(cx - half, cx + half, x)).collect();
        let mut out = self.texture.clone();
        for y in 0..self.h {
            let cy_ = cover(cy - half, cy + half, y);
            if cy_ == 0.0 {
                continue;
            }
            for x in 0..self.w {
                let c = cy_ * cov_x[x];
                if c > 0.0 {
                    let px = &mut out[y * self.w + x];
                    *px = *px * (1.0 - c) + self.target * c;
                }
            }
        }
        out
    }
}

fn texture(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let cell = cfg.texture_cell;
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let (lo, hi) = cfg.background;
    let knots: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(lo..=hi)).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let k = |i: usize, j: usize| knots[(y0 + i) * gw + x0 + j];
            out[y * w + x] = (1.0 - ty) * ((1.0 - tx) * k(0, 0) + tx * k(0, 1))
                + ty * ((1.0 - tx) * k(1, 0) + tx * k(1, 1));
        }
    }
    out
}

fn to_rgb(lum: &[f64], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * lum.len());
    for g in CHANNEL_GAIN {
        data.extend(lum.iter().map(|v| v * g));
    }
    Tensor::new([3, h, w], data).expect("rgb shape")
}

/// Renders a bright square moving over a smooth random texture. Events
/// fire whenever a pixel's log intensity drifts one contrast threshold
/// from its reference level; crossing times are interpolated linearly
/// between sub-frame renders.
pub fn synth_sequence(cfg: &SimConfig, seed: u64) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let tex = texture(cfg, &mut rng);
    let half = 0.5 * cfg.target_size;
    let start = cfg.start.unwrap_or_else(|| {
        (
            rng.random_range(half..w as f64 - half),
            rng.random_range(half..h as f64 - half),
        )
    });
    let vel = cfg.velocity.unwrap_or_else(|| {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let s = rng.random_range(0.25 * cfg.max_speed..=cfg.max_speed);
        (s * a.cos(), s * a.sin())
    });
    let scene = Scene {
        w,
        h,
        texture: tex,
        size: cfg.target_size,
        target: cfg.target_intensity,
        start,
        vel,
    };

    let sensor = SensorSize::new(cfg.width, cfg.height);
    let log = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x.ln()).collect() };
    let first = scene.render(0.0);
    let mut reference = log(&first);
    let mut prev = reference.clone();
    let mut images = vec![to_rgb(&first, h, w)];
    let mut events = Vec::new();
    let c = cfg.contrast_threshold;
    let dt_sub = cfg.frame_interval_us as f64 / cfg.substeps as f64;

    for f in 1..cfg.frames {
        for s in 1..=cfg.substeps {
            let tau = (f - 1) as f64 + s as f64 / cfg.substeps as f64;
            let lum = scene.render(tau);
            let cur = log(&lum);
            let t0 = ((f - 1) * cfg.substeps + s - 1) as f64 * dt_sub;
            for i in 0..w * h {
                let (a, b) = (prev[i], cur[i]);
                if a == b {
                    continue;
                }
                loop {
                    let (level, p) = if b - reference[i] >= c {
                        (reference[i] + c, Polarity::Positive)
                    } else if reference[i] - b >= c {
                        (reference[i] - c, Polarity::Negative)
                    } else {
                        break;
                    };
                    let frac = ((level - a) / (b - a)).clamp(0.0, 1.0);
                    events.push(Event {
                        x: (i % w) as u32,
                        y: (i / w) as u32,
                        t: (t0 + frac * dt_sub).round() as u64,
                        p,
                    });
                    reference[i] = level;
                }
            }
            prev = cur;
            if s == cfg.substeps {
                images.push(to_rgb(&lum, h, w));
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));

    let frames = (0..cfg.frames)
        .map(|f| {
            let (cx, cy) = scene.center(f as f64);
            FrameIndex {
                frame_id: f as u64,
                t_rgb: f as u64 * cfg.frame_interval_us,
                exposure: cfg.exposure_us,
                bbox_gt: Some(BBox::new(cx, cy, cfg.target_size, cfg.target_size)),
            }
        })
        .collect();
    Ok(Sequence {
        sensor,
        frames,
        images,
        events: EventStream::new(events, sensor)?,
    })
}

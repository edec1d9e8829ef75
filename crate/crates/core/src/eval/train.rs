use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::event::{event_voxel, synth_sequence, Sequence, SimConfig};
use crate::head::LossBreakdown;
use crate::model::{FreqTrack, ModelConfig, Search, Template};
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub steps: usize,
    pub lr: f64,
    /// (template, search) pairs drawn up front; every step averages the
    /// loss over all of them.
    pub pool: usize,
    /// Largest frame gap between template and search.
    pub max_gap: usize,
    /// Search-centre jitter as a fraction of the box size.
    pub jitter_shift: f64,
    /// Log-uniform search-scale jitter amplitude.
    pub jitter_scale: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            sim: SimConfig::default(),
            steps: 200,
            lr: 0.01,
            pool: 4,
            max_gap: 10,
            jitter_shift: 0.25,
            jitter_scale: 0.1,
            optimizer: Optimizer::Gd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if self.pool == 0 {
            return Err(Error::Config("pool must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training pair; `gt` in image pixels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub template: Template,
    pub search: Search,
    pub gt: BBox,
}

/// Draws `cfg.pool` jittered pairs from `seq`.
pub fn sample_pool(model: &FreqTrack, seq: &Sequence, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let n = seq.frames.len();
    let mut voxels: Vec<Option<Tensor>> = vec![None; n];
    let mut voxel = |k: usize| -> Result<Tensor> {
        if voxels[k].is_none() {
            voxels[k] = Some(event_voxel(&seq.events, &seq.frames[k], seq.sensor, model.cfg.backbone.bins)?);
        }
        Ok(voxels[k].clone().expect("cached"))
    };
    let gt = |k: usize| -> Result<BBox> {
        seq.frames[k]
            .bbox_gt
            .ok_or_else(|| Error::Contract(format!("training frame {k} has no ground truth")))
    };
    let mut pool = Vec::with_capacity(cfg.pool);
    for _ in 0..cfg.pool {
        let a = rng.random_range(0..n);
        let lo = a.saturating_sub(cfg.max_gap);
        let hi = (a + cfg.max_gap).min(n - 1);
        let b = rng.random_range(lo..=hi);
        let (ga, gb) = (gt(a)?, gt(b)?);
        let template = model.template(&seq.images[a], &voxel(a)?, &ga)?;
        let js = cfg.jitter_shift;
        let scale = (cfg.jitter_scale * rng.random_range(-1.0..=1.0)).exp();
        let center = BBox::new(
            gb.cx + gb.w * js * rng.random_range(-1.0..=1.0),
            gb.cy + gb.h * js * rng.random_range(-1.0..=1.0),
            gb.w * scale,
            gb.h * scale,
        );
        let search = model.search(&seq.images[b], &voxel(b)?, &center)?;
        pool.push(Sample { template, search, gt: gb });
    }
    Ok(pool)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn adamw_step(store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, opt: (f64, f64, f64, f64), st: &mut AdamState) {
    let (b1, b2, eps, wd) = opt;
    st.t += 1;
    let (c1, c2) = (1.0 - b1.powi(st.t), 1.0 - b2.powi(st.t));
    let ids: Vec<_> = store.ids().collect();
    for (i, (id, g)) in ids.into_iter().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut st.m[i], &mut st.v[i]);
        for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            *p -= lr * (upd + wd * *p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Pool-mean losses before each update.
    pub history: Vec<LossBreakdown>,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.history[0].total
    }

    /// Mean total over the last `window` steps.
    pub fn final_mean(&self, window: usize) -> f64 {
        let w = window.clamp(1, self.history.len());
        self.history[self.history.len() - w..].iter().map(|h| h.total).sum::<f64>() / w as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,total,focal,l1,giou\n");
        for (i, h) in self.history.iter().enumerate() {
            writeln!(out, "{i},{},{},{},{}", h.total, h.focal, h.l1, h.giou).expect("string write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Full-batch descent on the mean loss over `pool`. Aborts on the first
/// non-finite loss, naming the step.
pub fn train(model: &mut FreqTrack, pool: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Contract("training on an empty pool".into()));
    }
    let mut history = Vec::with_capacity(cfg.steps);
    let mut adam = AdamState {
        m: model.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        v: model.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        t: 0,
    };
    for step in 0..cfg.steps {
        let (grads, mean) = {
            let tape = Tape::new();
            let g = Graph::new(&tape, &model.store);
            let mut losses = Vec::with_capacity(pool.len());
            let mut parts = Vec::with_capacity(pool.len());
            for s in pool {
                let (l, b) = model.loss(&g, &s.template, &s.search, &s.gt)?;
                losses.push(l);
                parts.push(b);
            }
            let inv = 1.0 / pool.len() as f64;
            let total = losses
                .iter()
                .skip(1)
                .try_fold(losses[0], |acc, &l| acc.add(l))?
                .scale(inv);
            let value = total.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, value });
            }
            tape.backward(total)?;
            let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() * inv;
            let mean = LossBreakdown {
                focal: avg(|b| b.focal),
                l1: avg(|b| b.l1),
                giou: avg(|b| b.giou),
                total: value,
            };
            (g.grads(), mean)
        };
        history.push(mean);
        match cfg.optimizer {
            Optimizer::Gd => model.store.sgd_step(&grads, cfg.lr),
            Optimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => adamw_step(&mut model.store, &grads, cfg.lr, (beta1, beta2, eps, weight_decay), &mut adam),
        }
    }
    Ok(TrainReport { history })
}

/// Synthesizes the sequence for `seed`, initializes the model from the same
/// seed, draws the pair pool and trains.
pub fn train_toy(cfg: &TrainConfig, seed: u64) -> Result<(FreqTrack, TrainReport)> {
    cfg.validate()?;
    let seq = synth_sequence(&cfg.sim, seed)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.init_seed = seed;
    let mut model = FreqTrack::new(&model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let pool = sample_pool(&model, &seq, cfg, &mut rng)?;
    let report = train(&mut model, &pool, cfg)?;
    Ok((model, report))
}

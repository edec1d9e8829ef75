//! Finite-difference gradient checks for every learnable component, sized
//! to the tiny configuration (`D = 8`, 4 template and 16 search tokens).
//!
//! Parameters are jittered away from their structured initial values before
//! checking so that identity-like inits cannot hide a wrong backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Layer, TrackInputs};
use crate::bbox::BBox;
use crate::error::Result;
use crate::gradcheck::{grad_check_params, GradCheckConfig, GradCheckReport};
use crate::head::{head_loss, total_loss, Head, HeadConfig, LossWeights};
use crate::params::{ParamId, ParamStore};
use crate::spectral::{DffConfig, SpectralFilterBank};
use crate::tensor::Tensor;
use crate::wavelet::{dwt, idwt, DwfConfig, DwfParams, WaveletKernel, WerBlock, WerConfig};

/// Component groups selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteModule {
    All,
    Dff,
    Dwf,
    Set,
    Head,
}

impl std::str::FromStr for SuiteModule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "dff" => Ok(Self::Dff),
            "dwf" => Ok(Self::Dwf),
            "set" => Ok(Self::Set),
            "head" => Ok(Self::Head),
            other => Err(format!("unknown module `{other}` (all|dff|dwf|set|head)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

const DIM: usize = 8;
const HEADS: usize = 2;
const GRID: usize = 4;
/// `2·(4 + 16)` tokens.
const SEQ: usize = 40;
/// Event tokens of one template plus one search crop.
const EV_SEQ: usize = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Adds uniform noise in `±scale` to every listed parameter.
fn jitter(store: &mut ParamStore, ids: &[ParamId], scale: f64, rng: &mut ChaCha8Rng) {
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn dff_cfg() -> DffConfig {
    DffConfig {
        heads: HEADS,
        k: 4,
        router_hidden: 6,
    }
}

fn dwf_cfg() -> DwfConfig {
    DwfConfig {
        routed: true,
        k: 4,
        router_hidden: 6,
    }
}

/// Scalar read-out `Σ y ⊙ r` with a fixed random `r`.
fn probe(shape: &[usize], seed: u64) -> Tensor {
    random(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn check_dff(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut store = ParamStore::new();
    let bank = SpectralFilterBank::new(&mut store, "dff", DIM, SEQ, &dff_cfg(), &mut rng)?;
    let ids = bank.param_ids();
    jitter(&mut store, &ids, 0.2, &mut rng);
    let x = random(&[SEQ, DIM], &mut rng);
    let r = probe(&[SEQ, DIM], 102);
    grad_check_params(&store, &ids, &[x], |g, v| Ok(bank.forward(g, v[0])?.mul(g.constant(r.clone()))?.sum()), cfg)
}

pub fn check_dwf(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut store = ParamStore::new();
    let kernel = WaveletKernel::new(&mut store, "wav");
    let dwf = DwfParams::new(&mut store, "dwf", EV_SEQ, DIM, &dwf_cfg(), &mut rng)?;
    let mut ids = vec![kernel.lo, kernel.hi];
    ids.extend(dwf.param_ids());
    jitter(&mut store, &ids, 0.2, &mut rng);
    let x = random(&[EV_SEQ, DIM], &mut rng);
    let r = probe(&[EV_SEQ, DIM], 104);
    grad_check_params(
        &store,
        &ids,
        &[x],
        |g, v| {
            let state = dwt(g, v[0], &kernel)?;
            let filtered = dwf.apply(g, &state, v[0])?;
            Ok(idwt(g, &filtered, &kernel)?.mul(g.constant(r.clone()))?.sum())
        },
        cfg,
    )
}

pub fn check_wer(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut store = ParamStore::new();
    let wer_cfg = WerConfig { dwf: dwf_cfg() };
    let block = WerBlock::new(&mut store, "wer", EV_SEQ, DIM, &wer_cfg, &mut rng)?;
    let ids = block.param_ids();
    jitter(&mut store, &ids, 0.2, &mut rng);
    let x = random(&[EV_SEQ, DIM], &mut rng);
    let r = probe(&[EV_SEQ, DIM], 106);
    grad_check_params(&store, &ids, &[x], |g, v| Ok(block.forward(g, v[0])?.mul(g.constant(r.clone()))?.sum()), cfg)
}

fn check_layer(spectral: bool, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dff = dff_cfg();
    let layer = Layer::new(&mut store, "layer", DIM, HEADS, 4, spectral.then_some((&dff, SEQ)), &mut rng)?;
    let ids = layer.param_ids();
    jitter(&mut store, &ids, 0.1, &mut rng);
    let x = random(&[SEQ, DIM], &mut rng);
    let r = probe(&[SEQ, DIM], seed + 1);
    grad_check_params(&store, &ids, &[x], |g, v| Ok(layer.forward(g, v[0])?.mul(g.constant(r.clone()))?.sum()), cfg)
}

pub fn check_set_layer(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    check_layer(true, 107, cfg)
}

pub fn check_standard_layer(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    check_layer(false, 109, cfg)
}

fn sample_gt() -> BBox {
    BBox::new(21.0, 27.0, 14.0, 20.0)
}

/// Head parameters and search features through the composite loss.
pub fn check_head(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut store = ParamStore::new();
    let side = BackboneConfig::tiny().search_side;
    let head = Head::new(&mut store, "head", DIM, GRID, side, &HeadConfig { hidden: 8 }, &mut rng)?;
    let ids = head.param_ids();
    jitter(&mut store, &ids, 0.1, &mut rng);
    let x = random(&[GRID * GRID, DIM], &mut rng);
    let gt = sample_gt();
    grad_check_params(
        &store,
        &ids,
        &[x],
        |g, v| {
            let out = head.forward(g, v[0])?;
            Ok(head_loss(&out, &gt, GRID, side as f64, &LossWeights::default())?.0)
        },
        cfg,
    )
}

/// Every parameter of the tiny backbone and head, through the total loss.
/// Coordinates are sampled per tensor to keep the run short.
pub fn check_total_loss(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let bb_cfg = BackboneConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, "backbone", &bb_cfg, &mut rng)?;
    let head = Head::new(
        &mut store,
        "head",
        bb_cfg.dim,
        bb_cfg.grid_side(),
        bb_cfg.search_side,
        &HeadConfig { hidden: 8 },
        &mut rng,
    )?;
    let ids: Vec<ParamId> = store.ids().collect();
    jitter(&mut store, &ids, 0.05, &mut rng);
    let (t, s) = (bb_cfg.template_side, bb_cfg.search_side);
    let (et, es) = (bb_cfg.event_side(t), bb_cfg.event_side(s));
    let x = TrackInputs {
        rgb_t: random(&[3, t, t], &mut rng),
        ev_t: random(&[bb_cfg.bins, et, et], &mut rng),
        rgb_s: random(&[3, s, s], &mut rng),
        ev_s: random(&[bb_cfg.bins, es, es], &mut rng),
    };
    let gt = sample_gt();
    let sampled = GradCheckConfig {
        max_coords_per_input: Some(cfg.max_coords_per_input.unwrap_or(4)),
        ..cfg.clone()
    };
    grad_check_params(
        &store,
        &ids,
        &[],
        |g, _| {
            let out = backbone.forward(g, &x)?;
            let maps = head.forward(g, out.search)?;
            Ok(head_loss(&maps, &gt, bb_cfg.grid_side(), s as f64, &LossWeights::default())?.0)
        },
        &sampled,
    )
}

/// The scalar weighting itself, checked by central differences in each
/// argument at a generic point.
pub fn check_loss_weighting(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let w = LossWeights::default();
    let x = Tensor::new([3], vec![0.31, 0.07, 0.44])?;
    crate::gradcheck::grad_check(
        |_, v| {
            let f = v[0].index(0)?;
            let l1 = v[0].index(1)?;
            let gi = v[0].index(2)?;
            let out = f.scale(w.focal).add(l1.scale(w.l1))?.add(gi.scale(w.giou))?;
            let direct = total_loss(f.item(), l1.item(), gi.item(), &w);
            // the tape value and the compensated scalar sum must agree
            if (out.item() - direct).abs() > 1e-12 {
                return Err(crate::Error::Numerical(format!(
                    "weighted sum {} disagrees with total_loss {direct}",
                    out.item()
                )));
            }
            Ok(out)
        },
        &[x],
        cfg,
    )
}

/// Runs the checks selected by `module`.
pub fn run_suite(module: SuiteModule, cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    type Check = fn(&GradCheckConfig) -> Result<GradCheckReport>;
    let checks: &[(&'static str, SuiteModule, Check)] = &[
        ("dff", SuiteModule::Dff, check_dff),
        ("dwf", SuiteModule::Dwf, check_dwf),
        ("wer", SuiteModule::Dwf, check_wer),
        ("set_layer", SuiteModule::Set, check_set_layer),
        ("standard_layer", SuiteModule::Set, check_standard_layer),
        ("head", SuiteModule::Head, check_head),
        ("loss_weighting", SuiteModule::Head, check_loss_weighting),
        ("total_loss", SuiteModule::Head, check_total_loss),
    ];
    checks
        .iter()
        .filter(|(_, m, _)| module == SuiteModule::All || module == *m)
        .map(|(name, _, f)| Ok(SuiteEntry { name, report: f(cfg)? }))
        .collect()
}

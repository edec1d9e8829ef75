//! Token embedding, sequence assembly and the transformer stack.
//!
//! RGB patches are embedded with a 16×16 stride-16 projection and event
//! voxels, rendered at a quarter of the RGB resolution, with a 4×4 stride-4
//! projection, so both modalities yield the same token grid. The sequence
//! `[rgb_t; ev_t; rgb_s; ev_s]` then passes through spectral layers
//! followed by standard layers.

mod layer;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layer::Layer;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Graph, ParamId, ParamStore};
use crate::spectral::DffConfig;
use crate::tensor::Tensor;
use crate::wavelet::{WerBlock, WerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WerMode {
    /// One refinement of the event tokens before assembly.
    InputOnly,
    /// Additionally refine the event slices before every spectral layer.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub dim: usize,
    pub depth: usize,
    pub set_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rgb_patch: usize,
    pub ev_patch: usize,
    pub template_side: usize,
    pub search_side: usize,
    /// Temporal bins of the event voxel, i.e. event input channels.
    pub bins: usize,
    pub wer_mode: WerMode,
    pub dff: DffConfig,
    pub wer: WerConfig,
}

impl BackboneConfig {
    /// `D = 32`, 64 px template, 128 px search: 16 + 64 tokens per modality.
    pub fn toy() -> Self {
        Self {
            dim: 32,
            depth: 12,
            set_layers: 6,
            heads: 4,
            mlp_ratio: 4,
            rgb_patch: 16,
            ev_patch: 4,
            template_side: 64,
            search_side: 128,
            bins: 4,
            wer_mode: WerMode::PerLayer,
            dff: DffConfig {
                heads: 4,
                ..DffConfig::default()
            },
            wer: WerConfig::default(),
        }
    }

    /// `D = 8`, 4 template and 16 search tokens per modality.
    pub fn tiny() -> Self {
        Self {
            dim: 8,
            heads: 2,
            template_side: 32,
            search_side: 64,
            dff: DffConfig {
                heads: 2,
                ..DffConfig::default()
            },
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("{} heads do not divide width {}", self.heads, self.dim));
        }
        if self.set_layers > self.depth {
            return fail(format!("{} spectral layers exceed depth {}", self.set_layers, self.depth));
        }
        if self.ev_patch == 0 || self.rgb_patch == 0 || self.rgb_patch % self.ev_patch != 0 {
            return fail(format!(
                "event patch {} must divide RGB patch {}",
                self.ev_patch, self.rgb_patch
            ));
        }
        for side in [self.template_side, self.search_side] {
            if side == 0 || side % self.rgb_patch != 0 {
                return fail(format!("side {side} not divisible by patch {}", self.rgb_patch));
            }
        }
        if self.bins == 0 || self.mlp_ratio == 0 {
            return fail("bins and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn n_t(&self) -> usize {
        (self.template_side / self.rgb_patch).pow(2)
    }

    pub fn n_s(&self) -> usize {
        (self.search_side / self.rgb_patch).pow(2)
    }

    /// Side of the search token grid.
    pub fn grid_side(&self) -> usize {
        self.search_side / self.rgb_patch
    }

    pub fn seq_len(&self) -> usize {
        2 * (self.n_t() + self.n_s())
    }

    /// Event patch side for an RGB patch side.
    pub fn event_side(&self, rgb_side: usize) -> usize {
        rgb_side * self.ev_patch / self.rgb_patch
    }
}

/// Token ranges of the assembled sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceMap {
    pub rgb_t: Range<usize>,
    pub ev_t: Range<usize>,
    pub rgb_s: Range<usize>,
    pub ev_s: Range<usize>,
}

impl SliceMap {
    pub fn new(n_t: usize, n_s: usize) -> Self {
        Self {
            rgb_t: 0..n_t,
            ev_t: n_t..2 * n_t,
            rgb_s: 2 * n_t..2 * n_t + n_s,
            ev_s: 2 * n_t + n_s..2 * (n_t + n_s),
        }
    }

    pub fn len(&self) -> usize {
        self.ev_s.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lens(&self) -> [usize; 4] {
        [self.rgb_t.len(), self.ev_t.len(), self.rgb_s.len(), self.ev_s.len()]
    }
}

#[derive(Debug, Clone)]
pub struct AssembledSequence<'t> {
    pub h: Var<'t>,
    pub slices: SliceMap,
}

/// Template and search crops of both modalities, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackInputs {
    pub rgb_t: Tensor,
    pub ev_t: Tensor,
    pub rgb_s: Tensor,
    pub ev_s: Tensor,
}

/// Rearranges `[C × S × S]` into `[(S/p)² × C·p·p]`, one row per
/// non-overlapping patch in row-major grid order.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::dim("patchify", img.shape(), &[0, 0, 0]));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}x{w} patch not divisible by {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let cols = c * p * p;
    let src = img.data();
    let mut out = vec![0.0; gh * gw * cols];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * cols..][..cols];
            for ch in 0..c {
                for dy in 0..p {
                    let s = (ch * h + gy * p + dy) * w + gx * p;
                    row[(ch * p + dy) * p..][..p].copy_from_slice(&src[s..s + p]);
                }
            }
        }
    }
    Tensor::new([gh * gw, cols], out)
}

/// Non-overlapping patch projection.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, channels: usize, patch: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), trunc_normal(&[channels * patch * patch, dim], 0.02, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros([dim])),
            channels,
            patch,
        }
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, img: &Tensor) -> Result<Var<'t>> {
        if img.shape().first() != Some(&self.channels) {
            return Err(Error::dim("patch_embed", img.shape(), &[self.channels]));
        }
        g.constant(patchify(img, self.patch)?)
            .affine(g.param(self.w), g.param(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput<'t> {
    pub h0: Var<'t>,
    pub h: Var<'t>,
    /// Fused search tokens `[N_s × D]` in row-major grid order.
    pub search: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub slices: SliceMap,
    pub rgb_embed: PatchEmbed,
    pub ev_embed: PatchEmbed,
    pub pos_t: ParamId,
    pub pos_s: ParamId,
    pub input_wer: WerBlock,
    pub layer_wer: Vec<WerBlock>,
    pub layers: Vec<Layer>,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, n_t, n_s) = (cfg.dim, cfg.n_t(), cfg.n_s());
        let ev_len = n_t + n_s;
        let rgb_embed = PatchEmbed::new(store, &format!("{prefix}.rgb_embed"), 3, cfg.rgb_patch, d, rng);
        let ev_embed = PatchEmbed::new(store, &format!("{prefix}.ev_embed"), cfg.bins, cfg.ev_patch, d, rng);
        let pos_t = store.add(format!("{prefix}.pos_t"), trunc_normal(&[n_t, d], 0.02, rng));
        let pos_s = store.add(format!("{prefix}.pos_s"), trunc_normal(&[n_s, d], 0.02, rng));
        let input_wer = WerBlock::new(store, &format!("{prefix}.wer_in"), ev_len, d, &cfg.wer, rng)?;
        let layer_wer = match cfg.wer_mode {
            WerMode::InputOnly => Vec::new(),
            WerMode::PerLayer => (0..cfg.set_layers)
                .map(|l| WerBlock::new(store, &format!("{prefix}.wer{l}"), ev_len, d, &cfg.wer, rng))
                .collect::<Result<_>>()?,
        };
        let layers = (0..cfg.depth)
            .map(|l| {
                let dff = (l < cfg.set_layers).then_some((&cfg.dff, cfg.seq_len()));
                Layer::new(store, &format!("{prefix}.layer{l}"), d, cfg.heads, cfg.mlp_ratio, dff, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            slices: SliceMap::new(n_t, n_s),
            rgb_embed,
            ev_embed,
            pos_t,
            pos_s,
            input_wer,
            layer_wer,
            layers,
        })
    }

    /// Embeds the four crops and adds the shared position embeddings.
    /// Returns `[rgb_t, ev_t, rgb_s, ev_s]`.
    pub fn embed<'t>(&self, g: &Graph<'t, '_>, x: &TrackInputs) -> Result<[Var<'t>; 4]> {
        let (pt, ps) = (g.param(self.pos_t), g.param(self.pos_s));
        Ok([
            self.rgb_embed.forward(g, &x.rgb_t)?.add(pt)?,
            self.ev_embed.forward(g, &x.ev_t)?.add(pt)?,
            self.rgb_embed.forward(g, &x.rgb_s)?.add(ps)?,
            self.ev_embed.forward(g, &x.ev_s)?.add(ps)?,
        ])
    }

    /// Refines the event tokens and lays out `[rgb_t; ev_t; rgb_s; ev_s]`.
    pub fn assemble<'t>(&self, g: &Graph<'t, '_>, tokens: [Var<'t>; 4]) -> Result<AssembledSequence<'t>> {
        let [rgb_t, ev_t, rgb_s, ev_s] = tokens;
        for (v, want) in tokens.iter().zip(self.slices.lens()) {
            if v.shape() != [want, self.cfg.dim] {
                return Err(Error::dim("assemble", &v.shape(), &[want, self.cfg.dim]));
            }
        }
        let ev = self.input_wer.forward(g, Var::concat_rows(&[ev_t, ev_s])?)?;
        let parts = ev.split_rows(&[self.slices.ev_t.len(), self.slices.ev_s.len()])?;
        Ok(AssembledSequence {
            h: Var::concat_rows(&[rgb_t, parts[0], rgb_s, parts[1]])?,
            slices: self.slices.clone(),
        })
    }

    /// Passes the event slices of `h` through `wer` and writes them back.
    pub fn refine_event_slices<'t>(&self, g: &Graph<'t, '_>, wer: &WerBlock, h: Var<'t>) -> Result<Var<'t>> {
        let p = h.split_rows(&self.slices.lens())?;
        let ev = wer.forward(g, Var::concat_rows(&[p[1], p[3]])?)?;
        let e = ev.split_rows(&[self.slices.ev_t.len(), self.slices.ev_s.len()])?;
        Var::concat_rows(&[p[0], e[0], p[2], e[1]])
    }

    /// Runs the stack over an assembled sequence.
    pub fn run_layers<'t>(&self, g: &Graph<'t, '_>, h0: Var<'t>) -> Result<Var<'t>> {
        let mut h = h0;
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(wer) = self.layer_wer.get(l) {
                h = self.refine_event_slices(g, wer, h)?;
            }
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, x: &TrackInputs) -> Result<BackboneOutput<'t>> {
        let seq = self.assemble(g, self.embed(g, x)?)?;
        let h = self.run_layers(g, seq.h)?;
        let p = h.split_rows(&self.slices.lens())?;
        Ok(BackboneOutput {
            h0: seq.h,
            h,
            search: p[2].add(p[3])?.scale(0.5),
        })
    }

    /// Identity WER blocks and zeroed residual branches: `forward` then
    /// returns the plain concatenation of the embedded tokens.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        self.input_wer.set_identity(store)?;
        for w in &self.layer_wer {
            w.set_identity(store)?;
        }
        for l in &self.layers {
            l.zero_residual(store)?;
        }
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.rgb_embed.w, self.rgb_embed.b, self.ev_embed.w, self.ev_embed.b, self.pos_t, self.pos_s];
        ids.extend(self.input_wer.param_ids());
        for w in &self.layer_wer {
            ids.extend(w.param_ids());
        }
        for l in &self.layers {
            ids.extend(l.param_ids());
        }
        ids
    }
}

#[cfg(test)]
mod tests;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{trunc_normal, Graph, ParamId, ParamStore};
use crate::spectral::{DffConfig, SpectralFilterBank};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            g: store.add(format!("{prefix}.g"), Tensor::full([dim], 1.0)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros([dim])),
        }
    }

    fn apply<'t>(&self, g: &Graph<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(g.param(self.g), g.param(self.b))
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), trunc_normal(&[din, dout], 0.02, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros([dout])),
        }
    }

    fn apply<'t>(&self, g: &Graph<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.affine(g.param(self.w), g.param(self.b))
    }

    fn zero(&self, store: &mut ParamStore) -> Result<()> {
        let w = Tensor::zeros(store.get(self.w).shape().to_vec());
        let b = Tensor::zeros(store.get(self.b).shape().to_vec());
        store.set(self.w, w)?;
        store.set(self.b, b)
    }
}

/// Pre-norm transformer layer. With a filter bank it runs
/// `H + DFF(LN H)` before attention; without one it is a standard layer.
#[derive(Debug, Clone)]
pub struct Layer {
    dim: usize,
    heads: usize,
    spectral: Option<(Norm, SpectralFilterBank)>,
    norm_attn: Norm,
    qkv: Linear,
    attn_out: Linear,
    norm_mlp: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Layer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dff: Option<(&DffConfig, usize)>,
        rng: &mut R,
    ) -> Result<Self> {
        let spectral = match dff {
            Some((cfg, max_len)) => Some((
                Norm::new(store, &format!("{prefix}.norm_dff"), dim),
                SpectralFilterBank::new(store, &format!("{prefix}.dff"), dim, max_len, cfg, rng)?,
            )),
            None => None,
        };
        Ok(Self {
            dim,
            heads,
            spectral,
            norm_attn: Norm::new(store, &format!("{prefix}.norm_attn"), dim),
            qkv: Linear::new(store, &format!("{prefix}.qkv"), dim, 3 * dim, rng),
            attn_out: Linear::new(store, &format!("{prefix}.attn_out"), dim, dim, rng),
            norm_mlp: Norm::new(store, &format!("{prefix}.norm_mlp"), dim),
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, mlp_ratio * dim, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), mlp_ratio * dim, dim, rng),
        })
    }

    pub fn is_spectral(&self) -> bool {
        self.spectral.is_some()
    }

    pub fn filter_bank(&self) -> Option<&SpectralFilterBank> {
        self.spectral.as_ref().map(|(_, bank)| bank)
    }

    /// Full layer, including the spectral sub-block when present.
    pub fn forward<'t>(&self, g: &Graph<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        let h = match &self.spectral {
            Some((norm, bank)) => h.add(bank.forward(g, norm.apply(g, h)?)?)?,
            None => h,
        };
        self.forward_standard(g, h)
    }

    /// Attention and MLP sub-blocks only.
    pub fn forward_standard<'t>(&self, g: &Graph<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        let x = self.qkv.apply(g, self.norm_attn.apply(g, h)?)?;
        let d = self.dim;
        let attn = Var::attention(x.slice_cols(0, d)?, x.slice_cols(d, d)?, x.slice_cols(2 * d, d)?, self.heads)?;
        let h = h.add(self.attn_out.apply(g, attn)?)?;
        let m = self.fc1.apply(g, self.norm_mlp.apply(g, h)?)?.gelu();
        h.add(self.fc2.apply(g, m)?)
    }

    /// Zeroes every residual branch's output projection, making the layer
    /// the identity.
    pub fn zero_residual(&self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, bank)) = &self.spectral {
            store.set(bank.proj_out_w, Tensor::zeros([self.dim, self.dim]))?;
            store.set(bank.proj_out_b, Tensor::zeros([self.dim]))?;
        }
        self.attn_out.zero(store)?;
        self.fc2.zero(store)
    }

    /// Zeroes only the spectral branch output.
    pub fn silence_spectral(&self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, bank)) = &self.spectral {
            store.set(bank.proj_out_w, Tensor::zeros([self.dim, self.dim]))?;
            store.set(bank.proj_out_b, Tensor::zeros([self.dim]))?;
        }
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some((norm, bank)) = &self.spectral {
            ids.extend([norm.g, norm.b]);
            ids.extend(bank.param_ids());
        }
        for n in [&self.norm_attn, &self.norm_mlp] {
            ids.extend([n.g, n.b]);
        }
        for l in [&self.qkv, &self.attn_out, &self.fc1, &self.fc2] {
            ids.extend([l.w, l.b]);
        }
        ids
    }
}

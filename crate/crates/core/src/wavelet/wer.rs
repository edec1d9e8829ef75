use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dwf::{DwfConfig, DwfParams};
use super::haar::{dwt, idwt, WaveletKernel};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct WerConfig {
    pub dwf: DwfConfig,
}

/// Wavelet edge refinement over a concatenated event-token sequence:
/// DWT → band filtering → IDWT, then a residual post-block
/// `y + LN(dwconv₃(y))` whose norm scale and shift start at zero.
#[derive(Debug, Clone)]
pub struct WerBlock {
    pub kernel: WaveletKernel,
    pub dwf: DwfParams,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub len: usize,
    pub dim: usize,
}

impl WerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        len: usize,
        dim: usize,
        cfg: &WerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("WER over an empty sequence".into()));
        }
        let kernel = WaveletKernel::new(store, &format!("{prefix}.wavelet"));
        let dwf = DwfParams::new(store, &format!("{prefix}.dwf"), len, dim, &cfg.dwf, rng)?;
        Ok(Self {
            kernel,
            dwf,
            conv_w: store.add(format!("{prefix}.post.conv_w"), identity_taps(dim)),
            conv_b: store.add(format!("{prefix}.post.conv_b"), Tensor::zeros([dim])),
            norm_g: store.add(format!("{prefix}.post.norm_g"), Tensor::zeros([dim])),
            norm_b: store.add(format!("{prefix}.post.norm_b"), Tensor::zeros([dim])),
            len,
            dim,
        })
    }

    /// Refines `E: [L × D]` into a tensor of the same shape.
    pub fn forward<'t>(&self, g: &Graph<'t, '_>, e: Var<'t>) -> Result<Var<'t>> {
        let shape = e.shape();
        if shape != [self.len, self.dim] {
            return Err(Error::dim("wer", &shape, &[self.len, self.dim]));
        }
        let state = dwt(g, e, &self.kernel)?;
        let filtered = self.dwf.apply(g, &state, e)?;
        let y = idwt(g, &filtered, &self.kernel)?;
        let post = y
            .dwconv1d(g.param(self.conv_w), g.param(self.conv_b))?
            .layer_norm(g.param(self.norm_g), g.param(self.norm_b))?;
        y.add(post)
    }

    /// Haar kernel, all-ones band filters, zero post-block: `forward` is the
    /// identity.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        self.kernel.reset_haar(store)?;
        self.dwf.set_identity(store)?;
        store.set(self.conv_w, identity_taps(self.dim))?;
        store.set(self.conv_b, Tensor::zeros([self.dim]))?;
        store.set(self.norm_g, Tensor::zeros([self.dim]))?;
        store.set(self.norm_b, Tensor::zeros([self.dim]))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.kernel.lo, self.kernel.hi];
        ids.extend(self.dwf.param_ids());
        ids.extend([self.conv_w, self.conv_b, self.norm_g, self.norm_b]);
        ids
    }
}

fn identity_taps(dim: usize) -> Tensor {
    let mut t = Tensor::zeros([3, dim]);
    t.data_mut()[dim..2 * dim].fill(1.0);
    t
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::haar::WaveletState;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::spectral::dff::Router;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwfConfig {
    /// Mix `k` band filters with input-dependent weights; otherwise a
    /// single static filter per band.
    pub routed: bool,
    pub k: usize,
    pub router_hidden: usize,
}

impl Default for DwfConfig {
    fn default() -> Self {
        Self {
            routed: true,
            k: 4,
            router_hidden: 16,
        }
    }
}

/// Per-band element-wise filters on wavelet coefficients.
#[derive(Debug, Clone)]
pub struct DwfParams {
    pub ca_basis: ParamId,
    pub cd_basis: ParamId,
    pub router: Option<Router>,
    pub coeff_len: usize,
    pub dim: usize,
    pub k: usize,
}

impl DwfParams {
    /// Filters for signals of length `signal_len`, initialized to ones.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        signal_len: usize,
        dim: usize,
        cfg: &DwfConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let k = if cfg.routed { cfg.k } else { 1 };
        if k == 0 {
            return Err(Error::Config("DWF needs at least one filter".into()));
        }
        let len = signal_len.div_ceil(2);
        let router = cfg
            .routed
            .then(|| Router::new(store, &format!("{prefix}.router"), dim, cfg.router_hidden, k, rng));
        Ok(Self {
            ca_basis: store.add(format!("{prefix}.w_ca"), Tensor::full([k, len, dim], 1.0)),
            cd_basis: store.add(format!("{prefix}.w_cd"), Tensor::full([k, len, dim], 1.0)),
            router,
            coeff_len: len,
            dim,
            k,
        })
    }

    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let shape = [self.k, self.coeff_len, self.dim];
        store.set(self.ca_basis, Tensor::full(shape, 1.0))?;
        store.set(self.cd_basis, Tensor::full(shape, 1.0))
    }

    /// Mixed `(W_cA, W_cD)` filters, each `[L × D]`.
    pub fn filters<'t>(&self, g: &Graph<'t, '_>, route_input: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (k, l, d) = (self.k, self.coeff_len, self.dim);
        let alpha = match &self.router {
            Some(r) => r.forward(g, route_input)?,
            None => g.tape().constant_from(&[1, 1], vec![1.0])?,
        };
        let mix = |id: ParamId| -> Result<Var<'t>> {
            alpha.matmul(g.param(id).reshape(&[k, l * d])?)?.reshape(&[l, d])
        };
        Ok((mix(self.ca_basis)?, mix(self.cd_basis)?))
    }

    /// `cA ⊙ W_cA`, `cD ⊙ W_cD`. `route_input` feeds the router when routed.
    pub fn apply<'t>(
        &self,
        g: &Graph<'t, '_>,
        state: &WaveletState<'t>,
        route_input: Var<'t>,
    ) -> Result<WaveletState<'t>> {
        let shape = state.ca.shape();
        if shape != [self.coeff_len, self.dim] || state.cd.shape() != shape {
            return Err(Error::dim("dwf", &shape, &[self.coeff_len, self.dim]));
        }
        let (wa, wd) = self.filters(g, route_input)?;
        Ok(WaveletState {
            ca: state.ca.mul(wa)?,
            cd: state.cd.mul(wd)?,
            pad: state.pad,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ca_basis, self.cd_basis];
        if let Some(r) = &self.router {
            ids.extend([r.w1, r.b1, r.w2, r.b2]);
        }
        ids
    }
}

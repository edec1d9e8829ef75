//! Dynamic Fourier filtering.
//!
//! Tokens are projected, transformed along the token axis, multiplied bin by
//! bin with a complex filter, transformed back and projected again. The
//! filter is a convex mix of `K` learnable complex bases whose weights come
//! from a small router applied to the mean token:
//!
//! ```text
//! α      = softmax(MLP(mean_i H_i))
//! H'     = H·W₁ + b₁
//! H̃_freq = DFT(H') ⊙ Σ_k α_k W_k
//! out    = IDFT(H̃_freq)·W₂ + b₂
//! ```
//!
//! Each basis has shape `[F_max × D]`; head `h` owns the column block
//! `h·d_head .. (h+1)·d_head`, so every head filters its own channels while
//! sharing the routing weights. Sequences shorter than the configured
//! maximum use the leading `⌊N/2⌋ + 1` bins.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dft::{imaginary_residue, one_sided_len, RESIDUE_TOLERANCE};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Graph, ParamId, ParamStore};
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DffConfig {
    pub heads: usize,
    /// Number of basis filters.
    pub k: usize,
    pub router_hidden: usize,
}

impl Default for DffConfig {
    fn default() -> Self {
        Self {
            heads: 12,
            k: 4,
            router_hidden: 16,
        }
    }
}

/// Learnable parameters of one DFF block.
#[derive(Debug, Clone)]
pub struct SpectralFilterBank {
    pub cfg: DffConfig,
    pub dim: usize,
    pub max_len: usize,
    pub basis_re: ParamId,
    pub basis_im: ParamId,
    pub router: Router,
    pub proj_in_w: ParamId,
    pub proj_in_b: ParamId,
    pub proj_out_w: ParamId,
    pub proj_out_b: ParamId,
}

/// `affine → GELU → affine → softmax` over the mean token.
#[derive(Debug, Clone)]
pub struct Router {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub k: usize,
}

impl Router {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), trunc_normal(&[dim, hidden], 0.02, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([hidden])),
            w2: store.add(format!("{prefix}.w2"), trunc_normal(&[hidden, k], 0.02, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([k])),
            k,
        }
    }

    /// Routing weights `[1 × K]` for a token sequence `[N × D]`.
    pub fn forward<'t>(&self, g: &Graph<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        h.mean_rows()?
            .affine(g.param(self.w1), g.param(self.b1))?
            .gelu()
            .affine(g.param(self.w2), g.param(self.b2))?
            .softmax()
    }
}

impl SpectralFilterBank {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        max_len: usize,
        cfg: &DffConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::Config("DFF needs at least one basis filter".into()));
        }
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "{} filter heads do not divide width {dim}",
                cfg.heads
            )));
        }
        if max_len == 0 {
            return Err(Error::Config("DFF max length must be positive".into()));
        }
        let f = one_sided_len(max_len);
        let re = trunc_normal(&[cfg.k, f, dim], 0.02, rng).map(|v| v + 1.0);
        let im = trunc_normal(&[cfg.k, f, dim], 0.02, rng);
        Ok(Self {
            cfg: cfg.clone(),
            dim,
            max_len,
            basis_re: store.add(format!("{prefix}.basis_re"), re),
            basis_im: store.add(format!("{prefix}.basis_im"), im),
            router: Router::new(store, &format!("{prefix}.router"), dim, cfg.router_hidden, cfg.k, rng),
            proj_in_w: store.add(format!("{prefix}.proj_in.w"), trunc_normal(&[dim, dim], 0.02, rng)),
            proj_in_b: store.add(format!("{prefix}.proj_in.b"), Tensor::zeros([dim])),
            proj_out_w: store.add(format!("{prefix}.proj_out.w"), trunc_normal(&[dim, dim], 0.02, rng)),
            proj_out_b: store.add(format!("{prefix}.proj_out.b"), Tensor::zeros([dim])),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.cfg.heads
    }

    pub fn max_bins(&self) -> usize {
        one_sided_len(self.max_len)
    }

    /// `α = softmax(MLP(mean over tokens))`, shape `[1 × K]`.
    pub fn routing_weights<'t>(&self, g: &Graph<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&h.shape())?;
        self.router.forward(g, h)
    }

    /// `Σ_k α_k W_k` truncated to the bins of a length-`n` sequence, as
    /// `(re, im)` of shape `[F × D]`. Imaginary parts at DC and, for even
    /// `n`, Nyquist are zeroed so filtered spectra stay Hermitian.
    pub fn mixed_filter<'t>(&self, g: &Graph<'t, '_>, alpha: Var<'t>, n: usize) -> Result<(Var<'t>, Var<'t>)> {
        let f = one_sided_len(n);
        if n > self.max_len {
            return Err(Error::dim("dff_filter", &[n], &[self.max_len]));
        }
        let (k, d) = (self.cfg.k, self.dim);
        let fmax = self.max_bins();
        let mix = |id: ParamId| -> Result<Var<'t>> {
            g.param(id)
                .reshape(&[k, fmax * d])?
                .slice_cols(0, f * d)
                .and_then(|b| alpha.matmul(b))?
                .reshape(&[f, d])
        };
        let re = mix(self.basis_re)?;
        let mut mask = vec![1.0; f * d];
        mask[..d].fill(0.0);
        if n % 2 == 0 {
            mask[(f - 1) * d..].fill(0.0);
        }
        let im = mix(self.basis_im)?.mul(g.tape().constant_from(&[f, d], mask)?)?;
        Ok((re, im))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [n, d] if *d == self.dim && *n >= 1 && *n <= self.max_len => Ok(()),
            _ => Err(Error::dim("dff", shape, &[self.max_len, self.dim])),
        }
    }

    /// Filters a token sequence `[N × D]`, returning the same shape.
    pub fn forward<'t>(&self, g: &Graph<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        let shape = h.shape();
        self.check_input(&shape)?;
        let n = shape[0];
        let alpha = self.router.forward(g, h)?;
        let (m_re, m_im) = self.mixed_filter(g, alpha, n)?;
        let hp = h.affine(g.param(self.proj_in_w), g.param(self.proj_in_b))?;
        let (x_re, x_im) = (hp.rdft_re()?, hp.rdft_im()?);
        let y_re = x_re.mul(m_re)?.sub(x_im.mul(m_im)?)?;
        let y_im = x_re.mul(m_im)?.add(x_im.mul(m_re)?)?;
        let spec = ComplexTensor {
            re: (*y_re.value()).clone(),
            im: (*y_im.value()).clone(),
        };
        let residue = imaginary_residue(&spec, n);
        if residue > RESIDUE_TOLERANCE {
            return Err(Error::Numerical(format!(
                "filtered spectrum is not Hermitian (residue {residue:e})"
            )));
        }
        Var::irdft(y_re, y_im, n)?.affine(g.param(self.proj_out_w), g.param(self.proj_out_b))
    }

    /// All-ones basis, identity projections, zero biases: `forward` becomes
    /// the identity map.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let f = self.max_bins();
        store.set(self.basis_re, Tensor::full([self.cfg.k, f, self.dim], 1.0))?;
        store.set(self.basis_im, Tensor::zeros([self.cfg.k, f, self.dim]))?;
        store.set(self.proj_in_w, Tensor::identity(self.dim))?;
        store.set(self.proj_in_b, Tensor::zeros([self.dim]))?;
        store.set(self.proj_out_w, Tensor::identity(self.dim))?;
        store.set(self.proj_out_b, Tensor::zeros([self.dim]))
    }

    /// Every parameter id owned by this block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.basis_re,
            self.basis_im,
            self.router.w1,
            self.router.b1,
            self.router.w2,
            self.router.b2,
            self.proj_in_w,
            self.proj_in_b,
            self.proj_out_w,
            self.proj_out_b,
        ]
    }
}

use std::f64::consts::FRAC_1_SQRT_2;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Two-tap analysis filters. Synthesis uses the transpose of the analysis
/// matrix `[[lo₀, lo₁], [hi₀, hi₁]]`, recomputed from the current taps.
#[derive(Debug, Clone)]
pub struct WaveletKernel {
    pub lo: ParamId,
    pub hi: ParamId,
}

impl WaveletKernel {
    /// Haar initialization: `lo = [1, 1]/√2`, `hi = [1, −1]/√2`.
    pub fn new(store: &mut ParamStore, prefix: &str) -> Self {
        Self {
            lo: store.add(format!("{prefix}.lo"), Self::haar_lo()),
            hi: store.add(format!("{prefix}.hi"), Self::haar_hi()),
        }
    }

    pub fn haar_lo() -> Tensor {
        Tensor::new([2], vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2]).expect("shape")
    }

    pub fn haar_hi() -> Tensor {
        Tensor::new([2], vec![FRAC_1_SQRT_2, -FRAC_1_SQRT_2]).expect("shape")
    }

    /// Orthonormal pair rotated by `theta`; `theta = π/4` is Haar.
    pub fn rotated(theta: f64) -> (Tensor, Tensor) {
        let (s, c) = theta.sin_cos();
        (
            Tensor::new([2], vec![c, s]).expect("shape"),
            Tensor::new([2], vec![s, -c]).expect("shape"),
        )
    }

    pub fn reset_haar(&self, store: &mut ParamStore) -> Result<()> {
        store.set(self.lo, Self::haar_lo())?;
        store.set(self.hi, Self::haar_hi())
    }

    fn taps<'t>(&self, g: &Graph<'t, '_>) -> Result<[Var<'t>; 4]> {
        let (lo, hi) = (g.param(self.lo), g.param(self.hi));
        Ok([lo.index(0)?, lo.index(1)?, hi.index(0)?, hi.index(1)?])
    }
}

/// Approximation and detail coefficients of one decomposition level.
#[derive(Debug, Clone, Copy)]
pub struct WaveletState<'t> {
    pub ca: Var<'t>,
    pub cd: Var<'t>,
    /// The input had odd length and was right-padded by replicating its
    /// last token.
    pub pad: bool,
}

impl WaveletState<'_> {
    /// Length of the signal that was decomposed.
    pub fn signal_len(&self) -> usize {
        2 * self.ca.shape()[0] - usize::from(self.pad)
    }
}

/// `cA[k] = lo·(x[2k], x[2k+1])`, `cD[k] = hi·(x[2k], x[2k+1])` per channel.
pub fn dwt<'t>(g: &Graph<'t, '_>, x: Var<'t>, kernel: &WaveletKernel) -> Result<WaveletState<'t>> {
    let n = x.shape()[0];
    let half = n.div_ceil(2);
    let even: Vec<Option<usize>> = (0..half).map(|k| Some(2 * k)).collect();
    let odd: Vec<Option<usize>> = (0..half).map(|k| Some((2 * k + 1).min(n - 1))).collect();
    let (xe, xo) = (x.gather_rows(even)?, x.gather_rows(odd)?);
    let [l0, l1, h0, h1] = kernel.taps(g)?;
    let ca = xe.scale_by(l0)?.add(xo.scale_by(l1)?)?;
    let cd = xe.scale_by(h0)?.add(xo.scale_by(h1)?)?;
    Ok(WaveletState {
        ca,
        cd,
        pad: n % 2 == 1,
    })
}

/// Synthesis: `x[2k] = lo₀·cA + hi₀·cD`, `x[2k+1] = lo₁·cA + hi₁·cD`; the
/// padding token is dropped.
pub fn idwt<'t>(g: &Graph<'t, '_>, state: &WaveletState<'t>, kernel: &WaveletKernel) -> Result<Var<'t>> {
    let [l0, l1, h0, h1] = kernel.taps(g)?;
    let half = state.ca.shape()[0];
    let even = state.ca.scale_by(l0)?.add(state.cd.scale_by(h0)?)?;
    let odd = state.ca.scale_by(l1)?.add(state.cd.scale_by(h1)?)?;
    let n = state.signal_len();
    let order = (0..n)
        .map(|i| Some(if i % 2 == 0 { i / 2 } else { half + i / 2 }))
        .collect();
    Var::concat_rows(&[even, odd])?.gather_rows(order)
}

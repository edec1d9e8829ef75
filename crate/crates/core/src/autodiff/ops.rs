//! Forward constructors and vector-Jacobian products.

use super::{GradSink, Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::dft::{dft_1d, irdft_columns, one_sided_len, synth_columns};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};


const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Scale { x: usize, c: f64 },
    ScaleBy { x: usize, s: usize },
    Sum { x: usize },
    MeanRows { x: usize },
    Reshape { x: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    ConcatCols { parts: Vec<(usize, usize)> },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, index: Vec<Option<usize>> },
    Index { x: usize, i: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
    RdftRe { x: usize },
    RdftIm { x: usize },
    Irdft { re: usize, im: usize },
    DwConv1d { x: usize, w: usize, b: usize },
    Focal { p: usize, target: Vec<f64>, alpha: f64, beta: f64, npos: f64 },
    Giou { b: usize, gt: [f64; 4] },
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, shape, &[0, 0])),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(xs) {
            *oi = (xi - m).exp();
            s += *oi;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Corners `(x1, y1, x2, y2)` of a `(cx, cy, w, h)` box.
fn corners(b: &[f64]) -> [f64; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

/// `1 − GIoU` for two `(cx, cy, w, h)` boxes and its gradient w.r.t. `pred`.
pub(crate) fn giou_loss_and_grad(pred: &[f64], gt: &[f64]) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = corners(pred);
    let [gx1, gy1, gx2, gy2] = corners(gt);
    let ap = (x2 - x1) * (y2 - y1);
    let ag = (gx2 - gx1) * (gy2 - gy1);
    let iw = (x2.min(gx2) - x1.max(gx1)).max(0.0);
    let ih = (y2.min(gy2) - y1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = ap + ag - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let c = cw * ch;
    let loss = 2.0 - inter / union - union / c;

    let dl_di = -1.0 / union;
    let dl_du = inter / (union * union) - 1.0 / c;
    let dl_dc = union / (c * c);

    // d(iw)/d(x1, x2), d(ih)/d(y1, y2)
    let (diw_x1, diw_x2) = if iw > 0.0 {
        (
            if x1 > gx1 { -1.0 } else { 0.0 },
            if x2 < gx2 { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let (dih_y1, dih_y2) = if ih > 0.0 {
        (
            if y1 > gy1 { -1.0 } else { 0.0 },
            if y2 < gy2 { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let dcw_x1 = if x1 < gx1 { -1.0 } else { 0.0 };
    let dcw_x2 = if x2 > gx2 { 1.0 } else { 0.0 };
    let dch_y1 = if y1 < gy1 { -1.0 } else { 0.0 };
    let dch_y2 = if y2 > gy2 { 1.0 } else { 0.0 };

    let (w, h) = (x2 - x1, y2 - y1);
    let di = [diw_x1 * ih, dih_y1 * iw, diw_x2 * ih, dih_y2 * iw];
    let dap = [-h, -w, h, w];
    let dc = [dcw_x1 * ch, dch_y1 * cw, dcw_x2 * ch, dch_y2 * cw];
    let mut dcorner = [0.0; 4];
    for i in 0..4 {
        let du = dap[i] - di[i];
        dcorner[i] = dl_di * di[i] + dl_du * du + dl_dc * dc[i];
    }
    let grad = [
        dcorner[0] + dcorner[2],
        dcorner[1] + dcorner[3],
        0.5 * (dcorner[2] - dcorner[0]),
        0.5 * (dcorner[3] - dcorner[1]),
    ];
    (loss, grad)
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::dim(op, &a, &b));
        }
        Ok(())
    }

    /// `[m × k] · [k × n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let (m, k) = dims2("matmul", av.shape())?;
        let (k2, n) = dims2("matmul", bv.shape())?;
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let out = Tensor::new([m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        Ok(self.binary(other, out, Op::MatMul { a: self.id, b: other.id }))
    }

    fn zip_with(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, name)?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub { a: self.id, b: other.id }))
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul { a: self.id, b: other.id }))
    }

    /// Adds a length-`n` bias to every row of an `[m × n]` tensor.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (xv, bv) = (self.value(), bias.value());
        let (_, n) = dims2("add_bias", xv.shape())?;
        if bv.len() != n {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.binary(bias, out, Op::AddBias { x: self.id, b: bias.id }))
    }

    /// `x · W + b` with tokens as rows.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add_bias(b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale { x: self.id, c })
    }

    /// Multiplies by a one-element tensor.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::dim("scale_by", &self.shape(), sv.shape()));
        }
        let c = sv.data()[0];
        let v = self.value().map(|x| x * c);
        Ok(self.binary(s, v, Op::ScaleBy { x: self.id, s: s.id }))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum { x: self.id })
    }

    /// Column means, `[m × n] → [1 × n]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let xv = self.value();
        let (m, n) = dims2("mean_rows", xv.shape())?;
        if m == 0 {
            return Err(Error::Contract("mean over zero tokens".into()));
        }
        // summing each column in sorted order makes the result independent
        // of token order, bit for bit
        let d = xv.data();
        let mut col = vec![0.0; m];
        let out = (0..n)
            .map(|j| {
                col.iter_mut().enumerate().for_each(|(i, c)| *c = d[i * n + j]);
                col.sort_unstable_by(f64::total_cmp);
                col.iter().sum::<f64>() / m as f64
            })
            .collect();
        Ok(self.unary(Tensor::new([1, n], out)?, Op::MeanRows { x: self.id }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary(v, Op::Reshape { x: self.id }))
    }

    /// Stacks 2-D tensors with equal column counts along the token axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let (_, n) = dims2("concat_rows", &first.shape())?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            let v = p.value();
            let (m, c) = dims2("concat_rows", v.shape())?;
            if c != n {
                return Err(Error::dim("concat_rows", &first.shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += m;
            rg |= p.requires_grad();
        }
        let op = Op::ConcatRows {
            parts: parts.iter().map(|p| p.id).collect(),
        };
        Ok(tape.push(Tensor::new([rows, n], data)?, op, rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let (m, n) = dims2("slice_rows", xv.shape())?;
        if start + len > m {
            return Err(Error::dim("slice_rows", xv.shape(), &[start + len, n]));
        }
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        Ok(self.unary(Tensor::new([len, n], data)?, Op::SliceRows { x: self.id, start }))
    }

    /// Splits along the token axis into consecutive pieces of the given lengths.
    pub fn split_rows(self, lens: &[usize]) -> Result<Vec<Var<'t>>> {
        let total: usize = lens.iter().sum();
        let shape = self.shape();
        if shape.first() != Some(&total) {
            return Err(Error::dim("split_rows", &shape, &[total]));
        }
        let mut start = 0;
        lens.iter()
            .map(|&l| {
                let v = self.slice_rows(start, l);
                start += l;
                v
            })
            .collect()
    }

    /// Joins 2-D tensors with equal row counts along the channel axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let (m, _) = dims2("concat_cols", &first.shape())?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (r, c) = dims2("concat_cols", v.shape())?;
            if r != m {
                return Err(Error::dim("concat_cols", &first.shape(), v.shape()));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (v, &c) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::ConcatCols {
            parts: parts.iter().map(|p| p.id).zip(widths).collect(),
        };
        Ok(tape.push(Tensor::new([m, n], data)?, op, rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let (m, n) = dims2("slice_cols", xv.shape())?;
        if start + len > n {
            return Err(Error::dim("slice_cols", xv.shape(), &[m, start + len]));
        }
        let data = (0..m)
            .flat_map(|r| xv.data()[r * n + start..r * n + start + len].iter().copied())
            .collect();
        Ok(self.unary(Tensor::new([m, len], data)?, Op::SliceCols { x: self.id, start }))
    }

    /// Builds rows from `index`; `None` produces a zero row.
    pub fn gather_rows(self, index: Vec<Option<usize>>) -> Result<Var<'t>> {
        let xv = self.value();
        let (m, n) = dims2("gather_rows", xv.shape())?;
        let mut data = vec![0.0; index.len() * n];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= m {
                    return Err(Error::dim("gather_rows", xv.shape(), &[s + 1, n]));
                }
                data[r * n..(r + 1) * n].copy_from_slice(xv.row(s));
            }
        }
        let out = Tensor::new([index.len(), n], data)?;
        Ok(self.unary(out, Op::GatherRows { x: self.id, index }))
    }

    /// Element `i` of the flattened data as a one-element tensor.
    pub fn index(self, i: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let v = *xv
            .data()
            .get(i)
            .ok_or_else(|| Error::dim("index", xv.shape(), &[i]))?;
        Ok(self.unary(Tensor::scalar(v), Op::Index { x: self.id, i }))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma`/`beta`. The denominator is `sqrt(var + 1e-5)`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let (m, n) = dims2("layer_norm", xv.shape())?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != n || bv.len() != n {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = gv.data()[c] * h + bv.data()[c];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.tape.push(Tensor::new([m, n], out)?, op, rg))
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Result<Var<'t>> {
        let xv = self.value();
        let (m, n) = dims2("softmax", xv.shape())?;
        let out = Tensor::new([m, n], softmax_rows(xv.data(), m, n))?;
        Ok(self.unary(out, Op::Softmax { x: self.id }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu { x: self.id })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid { x: self.id })
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs { x: self.id })
    }

    /// Multi-head scaled dot-product attention, `softmax(QKᵀ/√d_head)·V` per
    /// head over column groups of width `D / heads`.
    pub fn attention(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (nq, d) = dims2("attention", qv.shape())?;
        let (nk, dk) = dims2("attention", kv.shape())?;
        if dk != d || kv.shape() != vv.shape() {
            return Err(Error::dim("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let qh = column_block(qv.data(), nq, d, h * dh, dh);
            let kh = column_block(kv.data(), nk, d, h * dh, dh);
            let vh = column_block(vv.data(), nk, d, h * dh, dh);
            let mut s = matmul_nt(&qh, &kh, nq, dh, nk);
            s.iter_mut().for_each(|x| *x *= scale);
            let p = softmax_rows(&s, nq, nk);
            let o = matmul_raw(&p, &vh, nq, nk, dh);
            for r in 0..nq {
                out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
            }
            probs[h * nq * nk..(h + 1) * nq * nk].copy_from_slice(&p);
        }
        let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
        let op = Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            heads,
            probs,
        };
        Ok(q.tape.push(Tensor::new([nq, d], out)?, op, rg))
    }

    /// Real part of the one-sided spectrum of each column.
    pub fn rdft_re(self) -> Result<Var<'t>> {
        let xv = self.value();
        dims2("rdft", xv.shape())?;
        let spec = dft_1d(&xv);
        Ok(self.unary(spec.re, Op::RdftRe { x: self.id }))
    }

    /// Imaginary part of the one-sided spectrum of each column.
    pub fn rdft_im(self) -> Result<Var<'t>> {
        let xv = self.value();
        dims2("rdft", xv.shape())?;
        let spec = dft_1d(&xv);
        Ok(self.unary(spec.im, Op::RdftIm { x: self.id }))
    }

    /// Real signal of length `n` from a one-sided spectrum. Imaginary parts
    /// at DC and Nyquist do not contribute.
    pub fn irdft(re: Var<'t>, im: Var<'t>, n: usize) -> Result<Var<'t>> {
        re.same_shape(im, "irdft")?;
        let (rv, iv) = (re.value(), im.value());
        let (f, _) = dims2("irdft", rv.shape())?;
        if n == 0 || f != one_sided_len(n) {
            return Err(Error::dim("irdft", rv.shape(), &[one_sided_len(n)]));
        }
        let out = irdft_columns(&rv, &iv, n);
        Ok(re.binary(im, out, Op::Irdft { re: re.id, im: im.id }))
    }

    /// Depthwise convolution along the token axis, kernel 3, zero padding.
    /// `w: [3 × D]`, `b: [D]`.
    pub fn dwconv1d(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (n, d) = dims2("dwconv1d", xv.shape())?;
        if wv.shape() != [3, d] || bv.len() != d {
            return Err(Error::dim("dwconv1d", xv.shape(), wv.shape()));
        }
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            for c in 0..d {
                let mut acc = bv.data()[c];
                for j in 0..3 {
                    if let Some(src) = (t + j).checked_sub(1).filter(|&s| s < n) {
                        acc += wv.data()[j * d + c] * xv.data()[src * d + c];
                    }
                }
                out[t * d + c] = acc;
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        let op = Op::DwConv1d {
            x: self.id,
            w: w.id,
            b: b.id,
        };
        Ok(self.tape.push(Tensor::new([n, d], out)?, op, rg))
    }

    /// Penalty-reduced focal loss of probabilities `self` against a heat map
    /// whose peaks are exactly 1, normalized by the peak count.
    pub fn focal_loss(self, target: &Tensor, alpha: f64, beta: f64) -> Result<Var<'t>> {
        let pv = self.value();
        if pv.len() != target.len() {
            return Err(Error::dim("focal_loss", pv.shape(), target.shape()));
        }
        let npos = target.data().iter().filter(|&&y| y == 1.0).count().max(1) as f64;
        let mut loss = 0.0;
        for (&p, &y) in pv.data().iter().zip(target.data()) {
            loss += focal_term(p, y, alpha, beta).0;
        }
        let op = Op::Focal {
            p: self.id,
            target: target.data().to_vec(),
            alpha,
            beta,
            npos,
        };
        Ok(self.unary(Tensor::scalar(-loss / npos), op))
    }

    /// `1 − GIoU` between a predicted `(cx, cy, w, h)` box and a fixed one.
    pub fn giou_loss(self, gt: [f64; 4]) -> Result<Var<'t>> {
        let bv = self.value();
        if bv.len() != 4 {
            return Err(Error::dim("giou_loss", bv.shape(), &[4]));
        }
        if bv.data()[2] <= 0.0 || bv.data()[3] <= 0.0 || gt[2] <= 0.0 || gt[3] <= 0.0 {
            return Err(Error::Validation("GIoU needs boxes with positive size".into()));
        }
        let (loss, _) = giou_loss_and_grad(bv.data(), &gt);
        Ok(self.unary(Tensor::scalar(loss), Op::Giou { b: self.id, gt }))
    }
}

const FOCAL_EPS: f64 = 1e-12;

/// Focal term (un-negated) and its derivative in `p`.
fn focal_term(p: f64, y: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    if y == 1.0 {
        let q = 1.0 - p;
        let v = q.powf(alpha) * p.ln();
        let d = -alpha * q.powf(alpha - 1.0) * p.ln() + q.powf(alpha) / p;
        (v, d)
    } else {
        let wgt = (1.0 - y).powf(beta);
        let v = wgt * p.powf(alpha) * (1.0 - p).ln();
        let d = wgt * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p));
        (v, d)
    }
}

fn column_block(x: &[f64], rows: usize, cols: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + width]);
    }
    out
}

impl Op {
    /// Pushes parent adjoints for a node with value `out` and adjoint `g`.
    pub(crate) fn vjp(&self, out: &Tensor, g: &[f64], s: &mut GradSink<'_>) {
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (s.value(*a).rows(), s.value(*a).cols());
                let n = s.value(*b).cols();
                if s.wants(*a) {
                    let ga = matmul_nt(g, s.value(*b).data(), m, n, k);
                    s.add(*a, ga);
                }
                if s.wants(*b) {
                    let gb = matmul_tn(s.value(*a).data(), g, m, k, n);
                    s.add(*b, gb);
                }
            }
            Op::Add { a, b } => {
                s.add(*a, g.to_vec());
                s.add(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                s.add(*a, g.to_vec());
                s.add(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                if s.wants(*a) {
                    let ga = g.iter().zip(s.value(*b).data()).map(|(g, y)| g * y).collect();
                    s.add(*a, ga);
                }
                if s.wants(*b) {
                    let gb = g.iter().zip(s.value(*a).data()).map(|(g, x)| g * x).collect();
                    s.add(*b, gb);
                }
            }
            Op::AddBias { x, b } => {
                s.add(*x, g.to_vec());
                if s.wants(*b) {
                    let n = s.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    s.add(*b, gb);
                }
            }
            Op::Scale { x, c } => s.add(*x, g.iter().map(|v| v * c).collect()),
            Op::ScaleBy { x, s: sc } => {
                let c = s.value(*sc).data()[0];
                if s.wants(*sc) {
                    let d: f64 = g.iter().zip(s.value(*x).data()).map(|(g, x)| g * x).sum();
                    s.add(*sc, vec![d]);
                }
                s.add(*x, g.iter().map(|v| v * c).collect());
            }
            Op::Sum { x } => {
                let n = s.value(*x).len();
                s.add(*x, vec![g[0]; n]);
            }
            Op::MeanRows { x } => {
                let (m, n) = (s.value(*x).rows(), s.value(*x).cols());
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend(g.iter().map(|v| v / m as f64));
                }
                s.add(*x, gx);
            }
            Op::Reshape { x } => s.add(*x, g.to_vec()),
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = s.value(p).len();
                    s.add_at(p, 0, &g[off..off + len]);
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = s.value(*x).cols();
                s.add_at(*x, start * n, g);
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let m = out.rows();
                let mut off = 0;
                for &(p, w) in parts {
                    if s.wants(p) {
                        let gp = (0..m)
                            .flat_map(|r| g[r * total + off..r * total + off + w].iter().copied())
                            .collect();
                        s.add(p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (s.value(*x).rows(), s.value(*x).cols());
                let w = out.cols();
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                s.add(*x, gx);
            }
            Op::GatherRows { x, index } => {
                let n = s.value(*x).cols();
                let mut gx = vec![0.0; s.value(*x).len()];
                for (r, src) in index.iter().enumerate() {
                    if let Some(src) = *src {
                        gx[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(o, v)| *o += v);
                    }
                }
                s.add(*x, gx);
            }
            Op::Index { x, i } => {
                let len = s.value(*x).len();
                let mut gx = vec![0.0; len];
                gx[*i] = g[0];
                s.add(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = s.value(*gamma).len();
                let m = rstd.len();
                if s.wants(*gamma) {
                    let mut gg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    s.add(*gamma, gg);
                }
                if s.wants(*beta) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    s.add(*beta, gb);
                }
                if s.wants(*x) {
                    let gam = s.value(*gamma).data().to_vec();
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let dxh: Vec<f64> = (0..n).map(|c| g[r * n + c] * gam[c]).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            (0..n).map(|c| dxh[c] * xhat[r * n + c]).sum::<f64>() / n as f64;
                        for c in 0..n {
                            gx[r * n + c] = rstd[r] * (dxh[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                    s.add(*x, gx);
                }
            }
            Op::Softmax { x } => {
                let n = out.cols();
                let mut gx = vec![0.0; out.len()];
                for (r, (yr, gr)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        gx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                s.add(*x, gx);
            }
            Op::Gelu { x } => {
                let gx = g
                    .iter()
                    .zip(s.value(*x).data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                s.add(*x, gx);
            }
            Op::Sigmoid { x } => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                s.add(*x, gx);
            }
            Op::Abs { x } => {
                let gx = g
                    .iter()
                    .zip(s.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                    .collect();
                s.add(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => attention_vjp(*q, *k, *v, *heads, probs, g, s),
            Op::RdftRe { x } | Op::RdftIm { x } => {
                let n = s.value(*x).rows();
                let zero = vec![0.0; g.len()];
                let gx = if matches!(self, Op::RdftRe { .. }) {
                    synth_columns(g, &zero, n, out.cols())
                } else {
                    synth_columns(&zero, g, n, out.cols())
                };
                s.add(*x, gx);
            }
            Op::Irdft { re, im } => {
                let n = out.rows();
                let c = out.cols();
                let gt = Tensor::new([n, c], g.to_vec()).expect("shape");
                let spec = dft_1d(&gt);
                let f = spec.re.rows();
                let mut gre = spec.re.into_data();
                let mut gim = spec.im.into_data();
                for k in 0..f {
                    let w = if k == 0 || 2 * k == n { 1.0 } else { 2.0 } / n as f64;
                    for ch in 0..c {
                        gre[k * c + ch] *= w;
                        gim[k * c + ch] *= w;
                    }
                }
                s.add(*re, gre);
                s.add(*im, gim);
            }
            Op::DwConv1d { x, w, b } => {
                let (n, d) = (out.rows(), out.cols());
                let xv = s.value(*x).data().to_vec();
                let wv = s.value(*w).data().to_vec();
                let mut gx = vec![0.0; n * d];
                let mut gw = vec![0.0; 3 * d];
                let mut gb = vec![0.0; d];
                for t in 0..n {
                    for c in 0..d {
                        let gv = g[t * d + c];
                        gb[c] += gv;
                        for j in 0..3 {
                            if let Some(src) = (t + j).checked_sub(1).filter(|&s| s < n) {
                                gw[j * d + c] += gv * xv[src * d + c];
                                gx[src * d + c] += gv * wv[j * d + c];
                            }
                        }
                    }
                }
                s.add(*x, gx);
                s.add(*w, gw);
                s.add(*b, gb);
            }
            Op::Focal {
                p,
                target,
                alpha,
                beta,
                npos,
            } => {
                let gp = s
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&pv, &y)| -g[0] * focal_term(pv, y, *alpha, *beta).1 / npos)
                    .collect();
                s.add(*p, gp);
            }
            Op::Giou { b, gt } => {
                let (_, d) = giou_loss_and_grad(s.value(*b).data(), gt);
                s.add(*b, d.iter().map(|v| v * g[0]).collect());
            }
        }
    }
}

fn attention_vjp(
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    probs: &[f64],
    g: &[f64],
    s: &mut GradSink<'_>,
) {
    let (nq, d) = (s.value(q).rows(), s.value(q).cols());
    let nk = s.value(k).rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; nq * d];
    let mut gk = vec![0.0; nk * d];
    let mut gv = vec![0.0; nk * d];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let go = column_block(g, nq, d, h * dh, dh);
        let qh = column_block(s.value(q).data(), nq, d, h * dh, dh);
        let kh = column_block(s.value(k).data(), nk, d, h * dh, dh);
        let vh = column_block(s.value(v).data(), nk, d, h * dh, dh);
        let dv = matmul_tn(p, &go, nq, nk, dh);
        let dp = matmul_nt(&go, &vh, nq, dh, nk);
        let mut ds = vec![0.0; nq * nk];
        for r in 0..nq {
            let pr = &p[r * nk..(r + 1) * nk];
            let dpr = &dp[r * nk..(r + 1) * nk];
            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for c in 0..nk {
                ds[r * nk + c] = pr[c] * (dpr[c] - dot) * scale;
            }
        }
        let dq = matmul_raw(&ds, &kh, nq, nk, dh);
        let dk = matmul_tn(&ds, &qh, nq, nk, dh);
        for r in 0..nq {
            gq[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&dq[r * dh..(r + 1) * dh]);
        }
        for r in 0..nk {
            gk[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&dk[r * dh..(r + 1) * dh]);
            gv[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&dv[r * dh..(r + 1) * dh]);
        }
    }
    s.add(q, gq);
    s.add(k, gk);
    s.add(v, gv);
}

impl Tape {
    /// Convenience: a constant with the given shape and data.
    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        Ok(self.constant(Tensor::new(shape.to_vec(), data)?))
    }
}

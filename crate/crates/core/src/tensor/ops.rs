//! The layer kernels the detector needs, each with a recording wrapper on
//! [`Graph`].

use super::graph::{Backward, Graph, Var};
use super::{gemm, MatView, Real, Tensor};
use crate::error::{ensure, Result};
use crate::par;

fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Checks shapes and returns `(c_in, h, w, c_out, k, h_out, w_out)`.
fn conv_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<[usize; 7]> {
    ensure!(input.rank() == 3, Dimension, "conv2d input must be [C,H,W], got {:?}", input.shape());
    ensure!(weight.rank() == 4, Dimension, "conv2d weight must be [O,C,k,k], got {:?}", weight.shape());
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, wc, k, k2) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    ensure!(k == k2, Dimension, "conv2d kernel must be square, got {k}x{k2}");
    ensure!(
        wc == c,
        Dimension,
        "conv2d weight expects {wc} input channels, input has {c}"
    );
    bias.expect_shape(&[o], "conv2d bias")?;
    ensure!(stride >= 1, Contract, "conv2d stride must be positive");
    ensure!(
        h + 2 * pad >= k && w + 2 * pad >= k,
        Dimension,
        "conv2d kernel {k} larger than padded input {h}x{w} (pad {pad})"
    );
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    Ok([c, h, w, o, k, ho, wo])
}

/// Unfolds `[C,H,W]` into `[C*k*k, Ho*Wo]` patch columns.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::ZERO; c * k * k * p];
    par::for_each_chunk_mut(&mut cols, k * k * p, |ch, block| {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut block[(ki * k + kj) * p..(ki * k + kj + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Folds patch-column gradients back onto `[C,H,W]`, summing overlaps.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let mut x = vec![T::ZERO; c * h * w];
    par::for_each_chunk_mut(&mut x, h * w, |ch, plane| {
        let block = &cols[ch * k * k * p..(ch + 1) * k * k * p];
        for ki in 0..k {
            for kj in 0..k {
                let row = &block[(ki * k + kj) * p..(ki * k + kj + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    });
    x
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// `out[o] = a_rows[o] * b + bias`, split over output rows.
fn rows_times<T: Real>(a: &[T], rows: usize, inner: usize, b: &[T], cols: usize, out: &mut [T]) {
    let per = rows.div_ceil(par::current_threads()).max(1);
    par::for_each_chunk_mut(out, per * cols, |chunk, dst| {
        let r0 = chunk * per;
        let nr = dst.len() / cols;
        gemm(
            MatView::row_major(&a[r0 * inner..(r0 + nr) * inner], nr, inner),
            MatView::row_major(b, inner, cols),
            T::ONE,
            dst,
            cols,
        );
    });
}

/// 2D cross-correlation of `input [C,H,W]` with `weight [O,C,k,k]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let [c, h, w, o, k, ho, wo] = conv_dims(input, weight, bias, stride, pad)?;
    let p = ho * wo;
    let mut out = vec![T::ZERO; o * p];
    for (oc, row) in out.chunks_mut(p.max(1)).enumerate() {
        row.fill(bias.data()[oc]);
    }
    let cols_owned;
    let cols: &[T] = if is_pointwise(k, stride, pad) {
        input.data()
    } else {
        cols_owned = im2col(input.data(), c, h, w, k, stride, pad, ho, wo);
        &cols_owned
    };
    rows_times(weight.data(), o, c * k * k, cols, p, &mut out);
    Tensor::new(&[o, ho, wo], out)?.check_finite("conv2d")
}

/// Gradients of [`conv2d`] as `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let bias = Tensor::zeros(&[weight.shape()[0]]);
    let [c, h, w, o, k, ho, wo] = conv_dims(input, weight, &bias, stride, pad)?;
    grad_out.expect_shape(&[o, ho, wo], "conv2d output gradient")?;
    let p = ho * wo;
    let q = c * k * k;
    let dy = grad_out.data();

    let d_bias: Vec<T> = (0..o).map(|oc| dy[oc * p..(oc + 1) * p].iter().copied().sum()).collect();

    let cols_owned;
    let cols: &[T] = if is_pointwise(k, stride, pad) {
        input.data()
    } else {
        cols_owned = im2col(input.data(), c, h, w, k, stride, pad, ho, wo);
        &cols_owned
    };
    // dW[o, q] = dY[o, :] . cols[q, :]
    let mut d_weight = vec![T::ZERO; o * q];
    let per = o.div_ceil(par::current_threads()).max(1);
    par::for_each_chunk_mut(&mut d_weight, per * q, |chunk, dst| {
        let r0 = chunk * per;
        let nr = dst.len() / q;
        gemm(
            MatView::row_major(&dy[r0 * p..(r0 + nr) * p], nr, p),
            MatView::row_major(cols, q, p).t(),
            T::ZERO,
            dst,
            q,
        );
    });

    let d_input = if want_input {
        // dcols[q, p] = W^T[q, o] dY[o, p]
        let mut dcols = vec![T::ZERO; q * p];
        let wt = MatView::row_major(weight.data(), o, q).t();
        let per = q.div_ceil(par::current_threads()).max(1);
        par::for_each_chunk_mut(&mut dcols, per * p, |chunk, dst| {
            let r0 = chunk * per;
            let nr = dst.len() / p;
            let a = MatView {
                data: &wt.data[r0..],
                rows: nr,
                cols: o,
                row_stride: wt.row_stride,
                col_stride: wt.col_stride,
            };
            gemm(a, MatView::row_major(dy, o, p), T::ZERO, dst, p);
        });
        let dx = if is_pointwise(k, stride, pad) {
            dcols
        } else {
            col2im(&dcols, c, h, w, k, stride, pad, ho, wo)
        };
        Some(Tensor::new(&[c, h, w], dx)?)
    } else {
        None
    };
    Ok((
        d_input,
        Tensor::new(weight.shape(), d_weight)?,
        Tensor::new(&[o], d_bias)?,
    ))
}

/// Per-group statistics saved by [`group_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub groups: usize,
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Group normalization over `[C,H,W]`, then a per-channel affine map.
pub fn group_norm<T: Real>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, GroupStats)> {
    ensure!(input.rank() == 3, Dimension, "group_norm input must be [C,H,W], got {:?}", input.shape());
    let c = input.shape()[0];
    let hw = input.shape()[1] * input.shape()[2];
    ensure!(groups > 0 && c.is_multiple_of(groups), Dimension, "{groups} groups do not divide {c} channels");
    ensure!(eps > 0.0, Contract, "group_norm eps must be positive");
    gamma.expect_shape(&[c], "group_norm gamma")?;
    beta.expect_shape(&[c], "group_norm beta")?;
    let cpg = c / groups;
    let n = (cpg * hw) as f64;
    let x = input.data();

    let stats: Vec<(f64, f64)> = par::map_range(groups, |g| {
        let slice = &x[g * cpg * hw..(g + 1) * cpg * hw];
        let mean = slice.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var = slice.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
        (mean, 1.0 / (var + eps).sqrt())
    });

    let mut out = vec![T::ZERO; x.len()];
    par::for_each_chunk_mut(&mut out, hw.max(1), |ch, dst| {
        let (mean, rstd) = stats[ch / cpg];
        let (g, b) = (gamma.data()[ch].to_f64(), beta.data()[ch].to_f64());
        for (d, &v) in dst.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            *d = T::from_f64((v.to_f64() - mean) * rstd * g + b);
        }
    });
    let stats = GroupStats {
        groups,
        mean: stats.iter().map(|s| s.0).collect(),
        rstd: stats.iter().map(|s| s.1).collect(),
    };
    Ok((Tensor::new(input.shape(), out)?.check_finite("group_norm")?, stats))
}

/// Gradients of [`group_norm`] as `(d_input, d_gamma, d_beta)`.
pub fn group_norm_backward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &GroupStats,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.expect_shape(input.shape(), "group_norm output gradient")?;
    let c = input.shape()[0];
    let hw = input.shape()[1] * input.shape()[2];
    let cpg = c / stats.groups;
    let n = (cpg * hw) as f64;
    let x = input.data();
    let dy = grad_out.data();

    let mut d_gamma = vec![T::ZERO; c];
    let mut d_beta = vec![T::ZERO; c];
    for ch in 0..c {
        let g = ch / cpg;
        let (mean, rstd) = (stats.mean[g], stats.rstd[g]);
        let mut sg = 0.0;
        let mut sb = 0.0;
        for (&v, &d) in x[ch * hw..(ch + 1) * hw].iter().zip(&dy[ch * hw..(ch + 1) * hw]) {
            sg += d.to_f64() * (v.to_f64() - mean) * rstd;
            sb += d.to_f64();
        }
        d_gamma[ch] = T::from_f64(sg);
        d_beta[ch] = T::from_f64(sb);
    }

    let mut dx = vec![T::ZERO; x.len()];
    par::for_each_chunk_mut(&mut dx, cpg * hw, |g, dst| {
        let (mean, rstd) = (stats.mean[g], stats.rstd[g]);
        let base = g * cpg * hw;
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..cpg * hw {
            let ch = g * cpg + i / hw;
            let xhat = (x[base + i].to_f64() - mean) * rstd;
            let dxhat = dy[base + i].to_f64() * gamma.data()[ch].to_f64();
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for (i, d) in dst.iter_mut().enumerate() {
            let ch = g * cpg + i / hw;
            let xhat = (x[base + i].to_f64() - mean) * rstd;
            let dxhat = dy[base + i].to_f64() * gamma.data()[ch].to_f64();
            *d = T::from_f64(rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
        }
    });
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(&[c], d_gamma)?,
        Tensor::new(&[c], d_beta)?,
    ))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Weighted L1 distance, summed: `sum(weight * |pred - target|)`.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weight: &Tensor<T>) -> Result<T> {
    ensure!(
        pred.same_shape(target) && pred.same_shape(weight),
        Dimension,
        "l1_loss shapes {:?}, {:?}, {:?}",
        pred.shape(),
        target.shape(),
        weight.shape()
    );
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weight.data())
        .map(|((&p, &t), &w)| w * (p - t).abs())
        .sum())
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl<T: Real> Backward<T> for Conv2dOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wanted: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (dx, dw, db) = conv2d_backward(inputs[0], inputs[1], grad, self.stride, self.pad, wanted[0])?;
        Ok(vec![dx, Some(dw), Some(db)])
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

struct GroupNormOp {
    stats: GroupStats,
}

impl<T: Real> Backward<T> for GroupNormOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (dx, dg, db) = group_norm_backward(inputs[0], inputs[1], &self.stats, grad)?;
        Ok(vec![Some(dx), Some(dg), Some(db)])
    }

    fn name(&self) -> &'static str {
        "group_norm"
    }
}

struct ReluOp;

impl<T: Real> Backward<T> for ReluOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.zip_map(inputs[0], |g, x| if x > T::ZERO { g } else { T::ZERO })?;
        Ok(vec![Some(g)])
    }

    fn name(&self) -> &'static str {
        "relu"
    }
}

struct SigmoidOp;

impl<T: Real> Backward<T> for SigmoidOp {
    fn backward(&self, _: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.zip_map(output, |g, y| g * y * (T::ONE - y))?;
        Ok(vec![Some(g)])
    }

    fn name(&self) -> &'static str {
        "sigmoid"
    }
}

struct AddOp;

impl<T: Real> Backward<T> for AddOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wanted: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(wanted.iter().map(|&w| w.then(|| grad.clone())).collect())
    }

    fn name(&self) -> &'static str {
        "add"
    }
}

struct ScaleOp<T>(T);

impl<T: Real> Backward<T> for ScaleOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let c = self.0;
        Ok(vec![Some(grad.map(|g| g * c))])
    }

    fn name(&self) -> &'static str {
        "scale"
    }
}

struct SumOp;

impl<T: Real> Backward<T> for SumOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))])
    }

    fn name(&self) -> &'static str {
        "sum"
    }
}

struct L1Op<T> {
    target: Tensor<T>,
    weight: Tensor<T>,
}

impl<T: Real> Backward<T> for L1Op<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data()[0];
        let data = inputs[0]
            .data()
            .iter()
            .zip(self.target.data())
            .zip(self.weight.data())
            .map(|((&p, &t), &w)| g * w * (p - t).signum_or_zero())
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), data)?)])
    }

    fn name(&self) -> &'static str {
        "l1_loss"
    }
}

impl<T: Real> Graph<T> {
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        Ok(self.record(out, &[input, weight, bias], Conv2dOp { stride, pad }))
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) = group_norm(self.value(input), groups, self.value(gamma), self.value(beta), eps)?;
        Ok(self.record(out, &[input, gamma, beta], GroupNormOp { stats }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = relu(self.value(input));
        self.record(out, &[input], ReluOp)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = sigmoid(self.value(input));
        self.record(out, &[input], SigmoidOp)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(out, &[a, b], AddOp))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        self.record(out, &[input], ScaleOp(factor))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.record(out, &[input], SumOp)
    }

    /// Weighted, summed L1 distance to a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: Tensor<T>, weight: Tensor<T>) -> Result<Var> {
        let value = l1_loss(self.value(pred), &target, &weight)?;
        Ok(self.record(Tensor::scalar(value), &[pred], L1Op { target, weight }))
    }

    /// Sums a non-empty list of same-shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| crate::Error::Contract("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }
}

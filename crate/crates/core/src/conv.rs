//! Convolution and resampling kernels on plain tensors.
//!
//! Convolutions lower to one im2col + GEMM over the whole batch. The autodiff
//! tape calls these for both passes; the feature embedder uses the forward
//! pass directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim("conv2d", format!("input must be [B,C,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be [F,C,kh,kw], got {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let (b, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(Error::dim(
                "conv2d",
                format!("channel axis: input has {c} channels, kernel expects {kc}"),
            ));
        }
        if bias != [f] {
            return Err(Error::dim("conv2d", format!("bias axis: expected [{f}], got {bias:?}")));
        }
        if kh > h + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("height axis: kernel {kh} exceeds padded height {}", h + 2 * pad),
            ));
        }
        if kw > w + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("width axis: kernel {kw} exceeds padded width {}", w + 2 * pad),
            ));
        }
        Ok(ConvGeometry {
            batch: b,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `lo..hi` whose input column `ow·s + kj − pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kj).div_ceil(s).min(self.out_w);
        let hi = (self.width + self.pad)
            .saturating_sub(kj)
            .div_ceil(s)
            .clamp(lo, self.out_w);
        (lo, hi)
    }

    /// Input row for output row `oh` and kernel row `ki`, if in bounds.
    fn input_row(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.stride + ki)
            .checked_sub(self.pad)
            .filter(|&ih| ih < self.height)
    }

    /// `cols[K, B·N]` for the whole batch (K = C·kh·kw, N = out_h·out_w);
    /// sample `b` owns columns `b·N..(b+1)·N`.
    fn unfold_batch(&self, input: &[f64]) -> Vec<f64> {
        let (hw, s, n) = (self.height * self.width, self.stride, self.out_pixels());
        let in_len = self.in_channels * hw;
        let mut cols = vec![0.0; self.patch_len() * self.batch * n];
        let mut row = 0;
        for c in 0..self.in_channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    if hi > lo {
                        let first = lo * s + kj - self.pad;
                        for b in 0..self.batch {
                            let plane = &input[b * in_len + c * hw..b * in_len + (c + 1) * hw];
                            let block = &mut cols[(row * self.batch + b) * n..(row * self.batch + b + 1) * n];
                            for oh in 0..self.out_h {
                                let Some(ih) = self.input_row(oh, ki) else { continue };
                                let src = &plane[ih * self.width + first..];
                                let dst = &mut block[oh * self.out_w + lo..oh * self.out_w + hi];
                                if s == 1 {
                                    dst.copy_from_slice(&src[..hi - lo]);
                                } else {
                                    for (i, d) in dst.iter_mut().enumerate() {
                                        *d = src[i * s];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    /// Fold `cols[K, B·N]` back onto a batch of images, accumulating overlaps.
    fn fold_batch(&self, cols: &[f64]) -> Vec<f64> {
        let (hw, s) = (self.height * self.width, self.stride);
        let in_len = self.in_channels * hw;
        let n = self.out_pixels();
        let mut image = vec![0.0; self.batch * in_len];
        let mut row = 0;
        for c in 0..self.in_channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kj);
                    for b in 0..self.batch {
                        let src = &cols[(row * self.batch + b) * n..(row * self.batch + b + 1) * n];
                        let plane = &mut image[b * in_len + c * hw..b * in_len + (c + 1) * hw];
                        for oh in 0..self.out_h {
                            let Some(ih) = self.input_row(oh, ki).filter(|_| hi > lo) else {
                                continue;
                            };
                            let dst = &mut plane[ih * self.width..(ih + 1) * self.width];
                            let line = &src[oh * self.out_w + lo..oh * self.out_w + hi];
                            let first = lo * s + kj - self.pad;
                            for (i, v) in line.iter().enumerate() {
                                dst[first + i * s] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        image
    }
}

/// Direct (loop) convolution for single-filter, stride-1 layers, where im2col
/// would expand the input K-fold only to feed a one-row GEMM.
impl ConvGeometry {
    fn use_direct(&self) -> bool {
        self.filters == 1 && self.stride == 1
    }

    /// Calls `f(oh, ih, lo, hi, first)` for every output row whose input row is in
    /// bounds under kernel offset `(u, v)`; output columns `lo..hi` read input
    /// columns `first..first + hi − lo`.
    fn for_rows(&self, u: usize, v: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (lo, hi) = self.valid_cols(v);
        if hi == lo {
            return;
        }
        let first = lo + v - self.pad;
        for oh in 0..self.out_h {
            if let Some(ih) = self.input_row(oh, u) {
                f(oh, ih, lo, hi, first);
            }
        }
    }

    fn direct_forward(&self, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let (hw, n) = (self.height * self.width, self.out_pixels());
        let mut out = Vec::with_capacity(self.batch * self.filters * n);
        for b in 0..self.batch {
            for f in 0..self.filters {
                let start = out.len();
                out.resize(start + n, bias[f]);
                let o = &mut out[start..];
                for c in 0..self.in_channels {
                    let plane = &input[(b * self.in_channels + c) * hw..(b * self.in_channels + c + 1) * hw];
                    for u in 0..self.kh {
                        for v in 0..self.kw {
                            let w = kernel[((f * self.in_channels + c) * self.kh + u) * self.kw + v];
                            self.for_rows(u, v, |oh, ih, lo, hi, first| {
                                let src = &plane[ih * self.width + first..ih * self.width + first + hi - lo];
                                for (d, x) in o[oh * self.out_w + lo..oh * self.out_w + hi].iter_mut().zip(src) {
                                    *d += w * x;
                                }
                            });
                        }
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn direct_backward(
        &self,
        input: &[f64],
        kernel: &[f64],
        grad_out: &[f64],
        need_input: bool,
        need_params: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let (hw, n) = (self.height * self.width, self.out_pixels());
        let mut d_in = need_input.then(|| vec![0.0; self.batch * self.in_channels * hw]);
        let mut d_k = need_params.then(|| vec![0.0; kernel.len()]);
        let mut d_b = need_params.then(|| vec![0.0; self.filters]);
        for b in 0..self.batch {
            for f in 0..self.filters {
                let go = &grad_out[(b * self.filters + f) * n..(b * self.filters + f + 1) * n];
                if let Some(db) = d_b.as_mut() {
                    db[f] += go.iter().sum::<f64>();
                }
                for c in 0..self.in_channels {
                    let base = (b * self.in_channels + c) * hw;
                    for u in 0..self.kh {
                        for v in 0..self.kw {
                            let ki = ((f * self.in_channels + c) * self.kh + u) * self.kw + v;
                            let w = kernel[ki];
                            let mut acc = 0.0;
                            self.for_rows(u, v, |oh, ih, lo, hi, first| {
                                let g = &go[oh * self.out_w + lo..oh * self.out_w + hi];
                                let at = base + ih * self.width + first;
                                if need_params {
                                    acc += g.iter().zip(&input[at..at + hi - lo]).map(|(a, x)| a * x).sum::<f64>();
                                }
                                if let Some(di) = d_in.as_mut() {
                                    for (d, a) in di[at..at + hi - lo].iter_mut().zip(g) {
                                        *d += w * a;
                                    }
                                }
                            });
                            if let Some(dk) = d_k.as_mut() {
                                dk[ki] += acc;
                            }
                        }
                    }
                }
            }
        }
        (d_in, d_k, d_b)
    }
}

/// Fresh row-major `c[m,n] = a[m,k]·b[k,n]` with explicit row/column strides for `a` and `b`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Vec<f64> {
    let reach = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    assert!(m * k == 0 || reach(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k * n == 0 || reach(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: the asserts above keep every strided read of `a` and `b` in
    // bounds. With beta = 0, dgemm writes every element of the m×n output
    // without reading it, so the spare capacity is fully initialised before
    // `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Cross-correlation with zero padding: `out[b,f,i,j] = bias[f] + Σ kernel[f,c,u,v]·in[b,c,i·s+u−p,j·s+v−p]`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    if g.use_direct() {
        return Tensor::new(
            vec![g.batch, g.filters, g.out_h, g.out_w],
            g.direct_forward(input.data(), kernel.data(), bias.data()),
        );
    }
    let (k, n) = (g.patch_len(), g.out_pixels());
    let bn = g.batch * n;
    let cols = g.unfold_batch(input.data());
    // prod[F, B·N] = kernel[F,K] · cols[K, B·N]
    let prod = gemm(
        g.filters,
        k,
        bn,
        kernel.data(),
        (k as isize, 1),
        &cols,
        (bn as isize, 1),
    );
    let mut out = Vec::with_capacity(g.batch * g.filters * n);
    for b in 0..g.batch {
        for (f, &bf) in bias.data().iter().enumerate() {
            out.extend(prod[f * bn + b * n..f * bn + (b + 1) * n].iter().map(|v| v + bf));
        }
    }
    Tensor::new(vec![g.batch, g.filters, g.out_h, g.out_w], out)
}

/// Gradients of a convolution; parameters that were not requested are `None`.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Vector-Jacobian product of [`conv2d_forward`] given the output adjoint.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads> {
    let f = kernel.shape()[0];
    let g = ConvGeometry::new(input.shape(), kernel.shape(), &[f], stride, pad)?;
    let (k, n) = (g.patch_len(), g.out_pixels());
    let bn = g.batch * n;
    let expected = [g.batch, g.filters, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::dim(
            "conv2d_backward",
            format!("output adjoint {:?} does not match {expected:?}", grad_out.shape()),
        ));
    }
    if g.use_direct() {
        let (d_in, d_k, d_b) = g.direct_backward(input.data(), kernel.data(), grad_out.data(), need_input, need_params);
        return Ok(ConvGrads {
            input: d_in.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
            kernel: d_k.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?,
            bias: d_b.map(|d| Tensor::new(vec![g.filters], d)).transpose()?,
        });
    }
    // dOut as [F, B·N], matching the column layout of the forward pass.
    let mut gmat = Vec::with_capacity(g.filters * bn);
    for fi in 0..g.filters {
        for b in 0..g.batch {
            gmat.extend_from_slice(&grad_out.data()[(b * g.filters + fi) * n..(b * g.filters + fi + 1) * n]);
        }
    }
    let (mut d_kernel, mut d_bias) = (None, None);
    if need_params {
        let cols = g.unfold_batch(input.data());
        // dK[F,K] = dOut[F,B·N] · colsᵀ[B·N,K]
        let dk = gemm(g.filters, bn, k, &gmat, (bn as isize, 1), &cols, (1, bn as isize));
        let db: Vec<f64> = gmat.chunks(bn).map(|row| row.iter().sum()).collect();
        d_kernel = Some(Tensor::new(kernel.shape().to_vec(), dk)?);
        d_bias = Some(Tensor::new(vec![g.filters], db)?);
    }
    let mut d_input = None;
    if need_input {
        // dcols[K, B·N] = Kᵀ[K,F] · dOut[F,B·N]
        let dcols = gemm(
            k,
            g.filters,
            bn,
            kernel.data(),
            (1, k as isize),
            &gmat,
            (bn as isize, 1),
        );
        d_input = Some(Tensor::new(input.shape().to_vec(), g.fold_batch(&dcols))?);
    }
    Ok(ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    })
}

/// Nearest-neighbour upsampling of the last two axes by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Config("upsample factor must be at least 1".into()));
    }
    let nd = input.ndim();
    if nd < 2 {
        return Err(Error::dim("upsample_nearest", "input needs at least two spatial axes"));
    }
    let (h, w) = (input.shape()[nd - 2], input.shape()[nd - 1]);
    let planes = input.numel() / (h * w);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / factor) * w + j / factor];
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::new(shape, out)
}

/// Adjoint of [`upsample_nearest`]: sums each `factor×factor` block.
pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    block_reduce(grad_out, factor, 1.0)
}

/// Mean over non-overlapping `factor×factor` blocks of the last two axes.
pub fn block_mean(input: &Tensor, factor: usize) -> Result<Tensor> {
    block_reduce(input, factor, 1.0 / (factor * factor) as f64)
}

fn block_reduce(input: &Tensor, factor: usize, scale: f64) -> Result<Tensor> {
    let nd = input.ndim();
    let (h, w) = (input.shape()[nd - 2], input.shape()[nd - 1]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(
            "block_reduce",
            format!("spatial size {h}x{w} not divisible by {factor}"),
        ));
    }
    let planes = input.numel() / (h * w);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                dst[(i / factor) * ow + j / factor] += src[i * w + j];
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    let mut shape = input.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, kept independent of im2col.
    fn reference_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let [b, c, h, w] = input.shape().try_into().unwrap();
        let [f, _, kh, kw] = kernel.shape().try_into().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let x = |bi: usize, ci: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                0.0
            } else {
                input.data()[((bi * c + ci) * h + i as usize) * w + j as usize]
            }
        };
        let mut out = Vec::new();
        for bi in 0..b {
            for fi in 0..f {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias.data()[fi];
                        for ci in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let kv = kernel.data()[((fi * c + ci) * kh + u) * kw + v];
                                    acc += kv
                                        * x(
                                            bi,
                                            ci,
                                            (i * stride + u) as isize - pad as isize,
                                            (j * stride + v) as isize - pad as isize,
                                        );
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 3.0);
        let out = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.data(), &[3.0; 4]);
    }

    #[test]
    fn ones_kernel_sums() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let out = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = Tensor::randn(&[1, 2, 6, 6], 0.0, 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, 3, 3], 0.0, 1.0, &mut rng);
            let b = Tensor::randn(&[3], 0.0, 1.0, &mut rng);
            let out = conv2d_forward(&x, &k, &b, stride, pad).unwrap();
            let reference = reference_conv(&x, &k, &b, stride, pad);
            assert_eq!(out.numel(), reference.len());
            for (a, r) in out.data().iter().zip(&reference) {
                assert!((a - r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn direct_and_gemm_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[3, 4, 7, 5], 0.0, 1.0, &mut rng);
        let k1 = Tensor::randn(&[1, 4, 3, 3], 0.0, 1.0, &mut rng);
        let b1 = Tensor::randn(&[1], 0.0, 1.0, &mut rng);
        let out = conv2d_forward(&x, &k1, &b1, 1, 1).unwrap();
        let reference = reference_conv(&x, &k1, &b1, 1, 1);
        for (a, r) in out.data().iter().zip(&reference) {
            assert!((a - r).abs() < 1e-10);
        }
        // Backward of the direct path against a two-filter GEMM run whose
        // second filter receives zero adjoint.
        let k2 = Tensor::stack(&[k1.index_first(0), Tensor::randn(&[4, 3, 3], 0.0, 1.0, &mut rng)]).unwrap();
        let go1 = Tensor::randn(out.shape(), 0.0, 1.0, &mut rng);
        let mut go2 = Tensor::zeros(&[3, 2, 7, 5]);
        for b in 0..3 {
            go2.data_mut()[b * 70..b * 70 + 35].copy_from_slice(&go1.data()[b * 35..(b + 1) * 35]);
        }
        let d1 = conv2d_backward(&x, &k1, &go1, 1, 1, true, true).unwrap();
        let d2 = conv2d_backward(&x, &k2, &go2, 1, 1, true, true).unwrap();
        assert!(d1.input.unwrap().max_abs_diff(&d2.input.unwrap()) < 1e-10);
        let (dk1, dk2) = (d1.kernel.unwrap(), d2.kernel.unwrap());
        for (a, b) in dk1.data().iter().zip(&dk2.data()[..36]) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((d1.bias.unwrap().item() - d2.bias.unwrap().data()[0]).abs() < 1e-10);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
        let k = Tensor::zeros(&[1, 2, 7, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("height axis"), "{err}");
    }

    #[test]
    fn upsample_examples() {
        let one = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(upsample_nearest(&one, 2).unwrap().data(), &[1.0; 4]);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        assert!(upsample_nearest(&x, 0).is_err());
    }
}

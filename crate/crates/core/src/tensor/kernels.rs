//! Raw compute kernels behind the tape primitives.
//!
//! Forward kernels are generic over [`Scalar`] so the gradient checker can
//! re-execute a recorded graph in f64. The hot f32 matmul is register-blocked
//! over four output rows and runtime-dispatched to AVX-512/AVX2 builds of the
//! same scalar body; since the body contains no fused multiply-adds, every
//! dispatch target produces bit-identical results.

/// Minimal float abstraction: just enough surface for the forward kernels.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxs(self, o: Self) -> Self;
    fn mins(self, o: Self) -> Self;
    fn is_finite_s(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maxs(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            #[inline]
            fn mins(self, o: Self) -> Self {
                if self < o {
                    self
                } else {
                    o
                }
            }
            #[inline]
            fn is_finite_s(self) -> bool {
                self.is_finite()
            }
        }
    };
}
impl_scalar!(f32);
impl_scalar!(f64);

const JT: usize = 512;

/// C = A * B for row-major A (m x k), B (k x n), C (m x n). Four output rows
/// share each streamed B row; a column tile keeps accumulators on the stack.
#[inline(always)]
fn matmul_nn_body(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let mut jb = 0;
        while jb < n {
            let je = (jb + JT).min(n);
            let w = je - jb;
            let mut acc0 = [0.0f32; JT];
            let mut acc1 = [0.0f32; JT];
            let mut acc2 = [0.0f32; JT];
            let mut acc3 = [0.0f32; JT];
            for kk in 0..k {
                let bq = &b[kk * n + jb..kk * n + je];
                let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                for j in 0..w {
                    let bv = bq[j];
                    acc0[j] += x0 * bv;
                    acc1[j] += x1 * bv;
                    acc2[j] += x2 * bv;
                    acc3[j] += x3 * bv;
                }
            }
            c[i * n + jb..i * n + je].copy_from_slice(&acc0[..w]);
            c[(i + 1) * n + jb..(i + 1) * n + je].copy_from_slice(&acc1[..w]);
            c[(i + 2) * n + jb..(i + 2) * n + je].copy_from_slice(&acc2[..w]);
            c[(i + 3) * n + jb..(i + 3) * n + je].copy_from_slice(&acc3[..w]);
            jb = je;
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        crow.iter_mut().for_each(|v| *v = 0.0);
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
        i += 1;
    }
}

/// C += A * B^T for row-major A (m x p), B (n x p), C (m x n).
#[inline(always)]
fn matmul_nt_acc_body(a: &[f32], b: &[f32], c: &mut [f32], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * p..(i + 1) * p];
        let a1 = &a[(i + 1) * p..(i + 2) * p];
        let a2 = &a[(i + 2) * p..(i + 3) * p];
        let a3 = &a[(i + 3) * p..(i + 4) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
            for q in 0..p {
                let bv = brow[q];
                s0 += a0[q] * bv;
                s1 += a1[q] * bv;
                s2 += a2[q] * bv;
                s3 += a3[q] * bv;
            }
            c[i * n + j] += s0;
            c[(i + 1) * n + j] += s1;
            c[(i + 2) * n + j] += s2;
            c[(i + 3) * n + j] += s3;
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut s = 0.0f32;
            for q in 0..p {
                s += arow[q] * brow[q];
            }
            c[i * n + j] += s;
        }
        i += 1;
    }
}

macro_rules! dispatch_x86 {
    ($name:ident, $body:ident) => {
        #[cfg(target_arch = "x86_64")]
        mod $name {
            use super::*;
            #[target_feature(enable = "avx2")]
            pub unsafe fn avx2(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
                $body(a, b, c, m, k, n)
            }
            #[target_feature(enable = "avx512f")]
            pub unsafe fn avx512(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
                $body(a, b, c, m, k, n)
            }
        }
    };
}
dispatch_x86!(nn_simd, matmul_nn_body);
dispatch_x86!(nt_simd, matmul_nt_acc_body);

/// Overwriting f32 matmul: C = A (m x k) * B (k x n).
pub fn matmul_nn_f32(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            return unsafe { nn_simd::avx512(a, b, c, m, k, n) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            return unsafe { nn_simd::avx2(a, b, c, m, k, n) };
        }
    }
    matmul_nn_body(a, b, c, m, k, n)
}

/// Accumulating transposed-B f32 matmul: C += A (m x p) * B^T, B row-major (n x p).
pub fn matmul_nt_acc_f32(a: &[f32], b: &[f32], c: &mut [f32], m: usize, p: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            return unsafe { nt_simd::avx512(a, b, c, m, p, n) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            return unsafe { nt_simd::avx2(a, b, c, m, p, n) };
        }
    }
    matmul_nt_acc_body(a, b, c, m, p, n)
}

/// Generic matmul used by the f64 replay path. C = A * B.
pub fn matmul_nn_gen<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.iter_mut().for_each(|v| *v = S::ZERO);
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

pub fn transpose_f32(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Spatial output size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Gather one sample (C,H,W) into a (C*k*k) x (Ho*Wo) patch matrix.
pub fn im2col<S: Scalar>(
    sample: &[S],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cols: &mut [S],
) {
    let ho = conv_out_dim(h, kernel, stride, padding);
    let wo = conv_out_dim(w, kernel, stride, padding);
    let p = ho * wo;
    debug_assert_eq!(cols.len(), c * kernel * kernel * p);
    for ch in 0..c {
        let plane = &sample[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    let base = oh * wo;
                    if ih < 0 || ih >= h as isize {
                        out[base..base + wo].iter_mut().for_each(|v| *v = S::ZERO);
                        continue;
                    }
                    let irow = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        out[base + ow] = if iw < 0 || iw >= w as isize {
                            S::ZERO
                        } else {
                            irow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`] back into a (C,H,W) gradient sample.
pub fn col2im_acc(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    sample: &mut [f32],
) {
    let ho = conv_out_dim(h, kernel, stride, padding);
    let wo = conv_out_dim(w, kernel, stride, padding);
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut sample[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = oh * wo;
                    let irow = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw >= 0 && iw < w as isize {
                            irow[iw as usize] += src[base + ow];
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> ConvDims {
        let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (o, kernel) = (weight_shape[0], weight_shape[2]);
        ConvDims {
            n,
            c,
            h,
            w,
            o,
            kernel,
            stride,
            padding,
            ho: conv_out_dim(h, kernel, stride, padding),
            wo: conv_out_dim(w, kernel, stride, padding),
        }
    }
}

/// f32 convolution forward: per-sample im2col followed by the blocked matmul.
pub fn conv2d_forward_f32(input: &[f32], weight: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
    let k = d.c * d.kernel * d.kernel;
    let p = d.ho * d.wo;
    let mut cols = vec![0.0f32; k * p];
    let mut out = vec![0.0f32; d.n * d.o * p];
    for s in 0..d.n {
        im2col(
            &input[s * d.c * d.h * d.w..(s + 1) * d.c * d.h * d.w],
            d.c,
            d.h,
            d.w,
            d.kernel,
            d.stride,
            d.padding,
            &mut cols,
        );
        let out_s = &mut out[s * d.o * p..(s + 1) * d.o * p];
        matmul_nn_f32(weight, &cols, out_s, d.o, k, p);
        for o in 0..d.o {
            let b = bias[o];
            for v in &mut out_s[o * p..(o + 1) * p] {
                *v += b;
            }
        }
    }
    out
}

/// Generic convolution forward for the f64 replay path.
pub fn conv2d_forward_gen<S: Scalar>(input: &[S], weight: &[S], bias: &[S], d: &ConvDims) -> Vec<S> {
    let k = d.c * d.kernel * d.kernel;
    let p = d.ho * d.wo;
    let mut cols = vec![S::ZERO; k * p];
    let mut out = vec![S::ZERO; d.n * d.o * p];
    for s in 0..d.n {
        im2col(
            &input[s * d.c * d.h * d.w..(s + 1) * d.c * d.h * d.w],
            d.c,
            d.h,
            d.w,
            d.kernel,
            d.stride,
            d.padding,
            &mut cols,
        );
        let out_s = &mut out[s * d.o * p..(s + 1) * d.o * p];
        matmul_nn_gen(weight, &cols, out_s, d.o, k, p);
        for o in 0..d.o {
            let b = bias[o];
            for v in &mut out_s[o * p..(o + 1) * p] {
                *v = *v + b;
            }
        }
    }
    out
}

/// Convolution backward. Any of the three gradient outputs may be skipped.
/// The im2col patch matrix is recomputed rather than cached so forward tapes
/// stay small.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_f32(
    input: &[f32],
    weight: &[f32],
    d_out: &[f32],
    d: &ConvDims,
    d_input: Option<&mut [f32]>,
    d_weight: Option<&mut [f32]>,
    d_bias: Option<&mut [f32]>,
) {
    let k = d.c * d.kernel * d.kernel;
    let p = d.ho * d.wo;
    let need_cols = d_weight.is_some();
    let mut cols = if need_cols { vec![0.0f32; k * p] } else { Vec::new() };
    let wt = if d_input.is_some() {
        transpose_f32(weight, d.o, k)
    } else {
        Vec::new()
    };
    let mut d_cols = if d_input.is_some() { vec![0.0f32; k * p] } else { Vec::new() };
    let mut d_input = d_input;
    let mut d_weight = d_weight;
    let mut d_bias = d_bias;
    for s in 0..d.n {
        let d_out_s = &d_out[s * d.o * p..(s + 1) * d.o * p];
        if let Some(db) = d_bias.as_deref_mut() {
            for o in 0..d.o {
                let mut acc = 0.0f64;
                for &g in &d_out_s[o * p..(o + 1) * p] {
                    acc += g as f64;
                }
                db[o] += acc as f32;
            }
        }
        if let Some(dw) = d_weight.as_deref_mut() {
            im2col(
                &input[s * d.c * d.h * d.w..(s + 1) * d.c * d.h * d.w],
                d.c,
                d.h,
                d.w,
                d.kernel,
                d.stride,
                d.padding,
                &mut cols,
            );
            matmul_nt_acc_f32(d_out_s, &cols, dw, d.o, p, k);
        }
        if let Some(di) = d_input.as_deref_mut() {
            matmul_nn_f32(&wt, d_out_s, &mut d_cols, k, d.o, p);
            col2im_acc(
                &d_cols,
                d.c,
                d.h,
                d.w,
                d.kernel,
                d.stride,
                d.padding,
                &mut di[s * d.c * d.h * d.w..(s + 1) * d.c * d.h * d.w],
            );
        }
    }
}

/// Nearest-neighbor upsample forward: every pixel becomes a factor x factor block.
pub fn upsample_forward<S: Scalar>(
    input: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<S> {
    let (h2, w2) = (h * factor, w * factor);
    let mut out = vec![S::ZERO; n * c * h2 * w2];
    for img in 0..n * c {
        let src = &input[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * h2 * w2..(img + 1) * h2 * w2];
        for r in 0..h2 {
            let sr = r / factor;
            for col in 0..w2 {
                dst[r * w2 + col] = src[sr * w + col / factor];
            }
        }
    }
    out
}

/// Upsample backward: gradients of each replication block sum into the source pixel.
pub fn upsample_backward_f32(
    d_out: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    d_in: &mut [f32],
) {
    let (h2, w2) = (h * factor, w * factor);
    for img in 0..n * c {
        let src = &d_out[img * h2 * w2..(img + 1) * h2 * w2];
        let dst = &mut d_in[img * h * w..(img + 1) * h * w];
        for r in 0..h2 {
            let sr = r / factor;
            for col in 0..w2 {
                dst[sr * w + col / factor] += src[r * w2 + col];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn matmul_oracle_f64(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for kk in 0..k {
                    s += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_f64_oracle() {
        let mut rng = Rng::new(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (4, 7, 9), (5, 16, 600), (9, 33, 4)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut c = vec![7.0f32; m * n];
            matmul_nn_f32(&a, &b, &mut c, m, k, n);
            let oracle = matmul_oracle_f64(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&oracle) {
                assert!((*x as f64 - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_nt_acc_matches_oracle() {
        let mut rng = Rng::new(2);
        let (m, p, n) = (5, 37, 6);
        let a: Vec<f32> = (0..m * p).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f32> = (0..n * p).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut c = vec![0.5f32; m * n];
        matmul_nt_acc_f32(&a, &b, &mut c, m, p, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.5f64;
                for q in 0..p {
                    s += a[i * p + q] as f64 * b[j * p + q] as f64;
                }
                let got = c[i * n + j] as f64;
                assert!((got - s).abs() < 1e-4, "{got} vs {s}");
            }
        }
    }

    /// Direct six-nested-loop convolution in f64.
    fn conv_oracle(
        input: &[f32],
        weight: &[f32],
        bias: &[f32],
        d: &ConvDims,
    ) -> Vec<f64> {
        let mut out = vec![0.0f64; d.n * d.o * d.ho * d.wo];
        for s in 0..d.n {
            for o in 0..d.o {
                for oh in 0..d.ho {
                    for ow in 0..d.wo {
                        let mut acc = bias[o] as f64;
                        for c in 0..d.c {
                            for ki in 0..d.kernel {
                                for kj in 0..d.kernel {
                                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                                    let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize {
                                        continue;
                                    }
                                    let iv = input
                                        [((s * d.c + c) * d.h + ih as usize) * d.w + iw as usize];
                                    let wv = weight
                                        [((o * d.c + c) * d.kernel + ki) * d.kernel + kj];
                                    acc += iv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((s * d.o + o) * d.ho + oh) * d.wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel_1x1() {
        let input: Vec<f32> = (0..16).map(|i| i as f32 * 0.25).collect();
        let d = ConvDims::new(&[1, 1, 4, 4], &[1, 1, 1, 1], 1, 0);
        let out = conv2d_forward_f32(&input, &[1.0], &[0.0], &d);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_all_ones_3x3_sums_to_nine() {
        let d = ConvDims::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 0);
        let out = conv2d_forward_f32(&[1.0; 9], &[1.0; 9], &[0.0], &d);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = Rng::new(3);
        for &(n, c, h, w, o, kern, stride, pad) in &[
            (1usize, 1usize, 5usize, 5usize, 1usize, 3usize, 1usize, 0usize),
            (2, 3, 8, 8, 4, 3, 2, 1),
            (1, 2, 6, 7, 3, 3, 1, 1),
            (1, 4, 8, 8, 2, 1, 1, 0),
        ] {
            let input: Vec<f32> = (0..n * c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let weight: Vec<f32> = (0..o * c * kern * kern).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let bias: Vec<f32> = (0..o).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let d = ConvDims::new(&[n, c, h, w], &[o, c, kern, kern], stride, pad);
            let fast = conv2d_forward_f32(&input, &weight, &bias, &d);
            let oracle = conv_oracle(&input, &weight, &bias, &d);
            assert_eq!(fast.len(), oracle.len());
            for (x, y) in fast.iter().zip(&oracle) {
                assert!((*x as f64 - y).abs() < 1e-5, "{x} vs {y}");
            }
            let gen64: Vec<f64> = {
                let i64v: Vec<f64> = input.iter().map(|&v| v as f64).collect();
                let w64: Vec<f64> = weight.iter().map(|&v| v as f64).collect();
                let b64: Vec<f64> = bias.iter().map(|&v| v as f64).collect();
                conv2d_forward_gen(&i64v, &w64, &b64, &d)
            };
            for (x, y) in gen64.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_factor_1_is_identity() {
        let input: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let out = upsample_forward(&input, 1, 3, 2, 2, 1);
        assert_eq!(out, input);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let out = upsample_forward(&[3.0f32], 1, 1, 1, 1, 2);
        assert_eq!(out, vec![3.0; 4]);
        let out2 = upsample_forward(&[1.0f32, 2.0, 3.0, 4.0], 1, 1, 2, 2, 2);
        assert_eq!(
            out2,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let mut d_in = vec![0.0f32; 4];
        upsample_backward_f32(&[1.0; 16], 1, 1, 2, 2, 2, &mut d_in);
        assert_eq!(d_in, vec![4.0; 4]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> must equal <x, col2im(y)> for random x, y.
        let mut rng = Rng::new(4);
        let (c, h, w, kern, stride, pad) = (2usize, 5usize, 4usize, 3usize, 2usize, 1usize);
        let ho = conv_out_dim(h, kern, stride, pad);
        let wo = conv_out_dim(w, kern, stride, pad);
        let kdim = c * kern * kern;
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f32> = (0..kdim * ho * wo).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut cols = vec![0.0f32; kdim * ho * wo];
        im2col(&x, c, h, w, kern, stride, pad, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| *a as f64 * *b as f64).sum();
        let mut back = vec![0.0f32; c * h * w];
        col2im_acc(&y, c, h, w, kern, stride, pad, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}


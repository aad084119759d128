//! Dense kernels with hand-written backward passes.
//!
//! Matrices are row-major slices. Backward functions accumulate into
//! parameter gradients and overwrite input gradients unless noted.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::masks::AttentionMask;

pub trait Scalar:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `c = alpha * a * b + beta * c` over strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

#[inline]
fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                assert!(
                    extent(m, n, rsc, csc) <= c.len(),
                    "gemm: output out of bounds"
                );
                // SAFETY: every accessed element lies within the slices (checked above).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }

            fn from_f64(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `y = x * w^T + b` for `x: rows x d_in`, `w: d_out x d_in`.
pub fn linear<T: Scalar>(x: &[T], rows: usize, d_in: usize, w: &[T], b: &[T], y: &mut [T]) {
    let d_out = b.len();
    for r in 0..rows {
        y[r * d_out..(r + 1) * d_out].copy_from_slice(b);
    }
    T::gemm_strided(
        rows,
        d_in,
        d_out,
        T::one(),
        x,
        d_in,
        1,
        w,
        1,
        d_in,
        T::one(),
        y,
        d_out,
        1,
    );
}

/// Backward of [`linear`]. `dx` is overwritten when given.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    d_in: usize,
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let d_out = db.len();
    if let Some(dx) = dx {
        T::gemm_strided(
            rows,
            d_out,
            d_in,
            T::one(),
            dy,
            d_out,
            1,
            w,
            d_in,
            1,
            T::zero(),
            dx,
            d_in,
            1,
        );
    }
    T::gemm_strided(
        d_out,
        rows,
        d_in,
        T::one(),
        dy,
        1,
        d_out,
        x,
        d_in,
        1,
        T::one(),
        dw,
        d_in,
        1,
    );
    for r in 0..rows {
        for (g, &d) in db.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
            *g += d;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &[T],
    rows: usize,
    dim: usize,
    gain: &[T],
    bias: &[T],
    y: &mut [T],
) -> LayerNormCache<T> {
    let mut xhat = vec![T::zero(); rows * dim];
    let mut rstd = vec![T::zero(); rows];
    let n = T::from_f64(dim as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..dim {
            let h = (row[c] - mean) * rs;
            xhat[r * dim + c] = h;
            y[r * dim + c] = h * gain[c] + bias[c];
        }
    }
    LayerNormCache { xhat, rstd }
}

/// Adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    rows: usize,
    dim: usize,
    gain: &[T],
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let n = T::from_f64(dim as f64);
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        let mut sum = T::zero();
        let mut dot = T::zero();
        for c in 0..dim {
            dgain[c] += g[c] * xh[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
            sum += dxhat[c];
            dot += dxhat[c] * xh[c];
        }
        let rs = cache.rstd[r];
        for c in 0..dim {
            dx[r * dim + c] += rs * (dxhat[c] - sum / n - xh[c] * dot / n);
        }
    }
}

pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the activation output was not positive.
pub fn relu_backward_in_place<T: Scalar>(out: &[T], d: &mut [T]) {
    for (g, &o) in d.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Softmax of `scores` in place; returns the maximum probability.
pub fn softmax_in_place<T: Scalar>(scores: &mut [T]) -> T {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let mut best = T::zero();
    for s in scores.iter_mut() {
        *s /= sum;
        best = best.max(*s);
    }
    best
}

/// Cross-entropy of `target` under softmax(`logits`); writes the gradient
/// `scale * (p - onehot)` into `dlogits`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize, scale: T, dlogits: &mut [T]) -> T {
    dlogits.copy_from_slice(logits);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    softmax_in_place(dlogits);
    for d in dlogits.iter_mut() {
        *d *= scale;
    }
    dlogits[target] -= scale;
    lse - logits[target]
}

/// Strided row-major view: element (r, c) is `data[r * ld + c]`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub ld: usize,
}

pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub ld: usize,
}

/// Multi-head scaled dot-product attention. Queries are `lq x dim`, keys and
/// values `lk x dim` (all strided). Returns per-head probabilities
/// (`heads x lq x lk`). Masked cells get exactly zero weight.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Scalar>(
    q: View<T>,
    k: View<T>,
    v: View<T>,
    lq: usize,
    lk: usize,
    dim: usize,
    heads: usize,
    mask: Option<&AttentionMask>,
    out: &mut [T],
) -> Vec<T> {
    let dh = dim / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); heads * lq * lk];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        let off = h * dh;
        T::gemm_strided(
            lq,
            dh,
            lk,
            scale,
            &q.data[off..],
            q.ld,
            1,
            &k.data[off..],
            1,
            k.ld,
            T::zero(),
            p,
            lk,
            1,
        );
        for i in 0..lq {
            let row = &mut p[i * lk..(i + 1) * lk];
            match mask {
                Some(m) => masked_softmax(row, m.row(i)),
                None => {
                    softmax_in_place(row);
                }
            }
        }
        T::gemm_strided(
            lq,
            lk,
            dh,
            T::one(),
            p,
            lk,
            1,
            &v.data[off..],
            v.ld,
            1,
            T::zero(),
            &mut out[off..],
            dim,
            1,
        );
    }
    probs
}

fn masked_softmax<T: Scalar>(row: &mut [T], allowed: &[bool]) {
    let mut max = T::neg_infinity();
    for (s, &a) in row.iter().zip(allowed) {
        if a && *s > max {
            max = *s;
        }
    }
    let mut sum = T::zero();
    for (s, &a) in row.iter_mut().zip(allowed) {
        if a {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = T::zero();
        }
    }
    for s in row.iter_mut() {
        *s /= sum;
    }
}

/// Backward of [`attention`]; `dq`, `dk`, `dv` are overwritten in the head
/// columns they cover.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: View<T>,
    k: View<T>,
    v: View<T>,
    lq: usize,
    lk: usize,
    dim: usize,
    heads: usize,
    probs: &[T],
    dout: &[T],
    dq: ViewMut<T>,
    dk: ViewMut<T>,
    dv: ViewMut<T>,
) {
    let dh = dim / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dp = vec![T::zero(); lq * lk];
    for h in 0..heads {
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        let off = h * dh;
        // dP = dO * V^T
        T::gemm_strided(
            lq,
            dh,
            lk,
            T::one(),
            &dout[off..],
            dim,
            1,
            &v.data[off..],
            1,
            v.ld,
            T::zero(),
            &mut dp,
            lk,
            1,
        );
        // dV = P^T * dO
        T::gemm_strided(
            lk,
            lq,
            dh,
            T::one(),
            p,
            1,
            lk,
            &dout[off..],
            dim,
            1,
            T::zero(),
            &mut dv.data[off..],
            dv.ld,
            1,
        );
        // dS = P * (dP - rowdot(dP, P))
        for i in 0..lq {
            let pr = &p[i * lk..(i + 1) * lk];
            let dr = &mut dp[i * lk..(i + 1) * lk];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pp) in dr.iter_mut().zip(pr) {
                *d = pp * (*d - dot);
            }
        }
        // dQ = scale * dS * K
        T::gemm_strided(
            lq,
            lk,
            dh,
            scale,
            &dp,
            lk,
            1,
            &k.data[off..],
            k.ld,
            1,
            T::zero(),
            &mut dq.data[off..],
            dq.ld,
            1,
        );
        // dK = scale * dS^T * Q
        T::gemm_strided(
            lk,
            lq,
            dh,
            scale,
            &dp,
            1,
            lk,
            &q.data[off..],
            q.ld,
            1,
            T::zero(),
            &mut dk.data[off..],
            dk.ld,
            1,
        );
    }
}

/// Geometry of a 3x3 convolution with padding 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride_h)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride_w)
    }

    pub fn patch(&self) -> usize {
        self.c_in * 9
    }
}

/// Unfolds `input` (`c_in x h x w`) into `patch x (out_h * out_w)` columns.
pub fn im2col<T: Scalar>(s: &ConvShape, input: &[T]) -> Vec<T> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    let mut col = vec![T::zero(); s.patch() * n];
    for c in 0..s.c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (c * 3 + ky) * 3 + kx;
                let dst = &mut col[r * n..(r + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * s.stride_h + ky) as isize - 1;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = &input[(c * s.h + iy as usize) * s.w..];
                    for ox in 0..ow {
                        let ix = (ox * s.stride_w + kx) as isize - 1;
                        if ix >= 0 && ix < s.w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds column gradients back onto the input (accumulating).
pub fn col2im<T: Scalar>(s: &ConvShape, dcol: &[T], dinput: &mut [T]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    for c in 0..s.c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (c * 3 + ky) * 3 + kx;
                let src = &dcol[r * n..(r + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * s.stride_h + ky) as isize - 1;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let base = (c * s.h + iy as usize) * s.w;
                    for ox in 0..ow {
                        let ix = (ox * s.stride_w + kx) as isize - 1;
                        if ix >= 0 && ix < s.w as isize {
                            dinput[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward from unfolded columns: `c_out x (out_h * out_w)`.
pub fn conv_from_cols<T: Scalar>(s: &ConvShape, col: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let n = s.out_h() * s.out_w();
    let mut out = vec![T::zero(); s.c_out * n];
    for (o, &b) in bias.iter().enumerate() {
        out[o * n..(o + 1) * n].fill(b);
    }
    T::gemm_strided(
        s.c_out,
        s.patch(),
        n,
        T::one(),
        weight,
        s.patch(),
        1,
        col,
        n,
        1,
        T::one(),
        &mut out,
        n,
        1,
    );
    out
}

/// Accumulates weight/bias gradients; returns column gradients when asked.
pub fn conv_backward<T: Scalar>(
    s: &ConvShape,
    col: &[T],
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let n = s.out_h() * s.out_w();
    for (o, g) in dbias.iter_mut().enumerate() {
        *g += dout[o * n..(o + 1) * n].iter().copied().sum::<T>();
    }
    T::gemm_strided(
        s.c_out,
        n,
        s.patch(),
        T::one(),
        dout,
        n,
        1,
        col,
        1,
        n,
        T::one(),
        dweight,
        s.patch(),
        1,
    );
    want_input.then(|| {
        let mut dcol = vec![T::zero(); s.patch() * n];
        T::gemm_strided(
            s.patch(),
            s.c_out,
            n,
            T::one(),
            weight,
            1,
            s.patch(),
            dout,
            n,
            1,
            T::zero(),
            &mut dcol,
            n,
            1,
        );
        dcol
    })
}

/// Interleaved sinusoidal encoding of `pos` over `dim` channels:
/// channel `2i` is `sin(pos / 10000^(2i/dim))`, channel `2i+1` the cosine.
pub fn sinusoid<T: Scalar>(pos: f64, dim: usize, out: &mut [T]) {
    for i in 0..dim.div_ceil(2) {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let a = pos * freq;
        out[2 * i] = T::from_f64(a.sin());
        if 2 * i + 1 < dim {
            out[2 * i + 1] = T::from_f64(a.cos());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm_strided(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn conv_output_geometry() {
        let s = ConvShape {
            c_in: 1,
            c_out: 1,
            h: 33,
            w: 9,
            stride_h: 2,
            stride_w: 1,
        };
        assert_eq!((s.out_h(), s.out_w()), (17, 9));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let s = ConvShape {
            c_in: 2,
            c_out: 3,
            h: 5,
            w: 4,
            stride_h: 2,
            stride_w: 1,
        };
        let input: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..54).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let out = conv_from_cols(&s, &im2col(&s, &input), &weight, &bias);
        let (oh, ow) = (s.out_h(), s.out_w());
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    acc += weight[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * input[(c * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(o * oh + oy) * ow + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sinusoid_at_origin() {
        let mut pe = vec![0.0f64; 8];
        sinusoid(0.0, 8, &mut pe);
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = vec![0.0f64; 4];
        let mut d = vec![0.0; 4];
        let l = cross_entropy(&logits, 2, 1.0, &mut d);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((d[2] + 0.75).abs() < 1e-12 && (d[0] - 0.25).abs() < 1e-12);
    }
}

//! Plain loop kernels shared by the graph ops and the standalone inference path.
//!
//! Feature maps are NHWC. Full convolution weights are `[k, k, c_in, c_out]`,
//! depthwise weights are `[k, k, c]`. Padding is always `k / 2`.

use super::tensor::Real;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * (self.k / 2) - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * (self.k / 2) - self.k) / self.stride + 1
    }
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

/// `c[n,m] = a[n,k] * b[k,m]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[n,k] = a[n,m] * b[k,m]^T`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// `c[k,m] = a[n,k]^T * b[n,m]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Direct-loop full convolution.
pub fn conv2d_direct<T: Real>(x: &[T], w: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad());
    let mut out = vec![T::zero(); g.n * oh * ow * g.c_out];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((n * oh + oy) * ow + ox) * g.c_out;
                let orow = &mut out[obase..obase + g.c_out];
                for ky in 0..g.k {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let ibase = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        for ci in 0..g.c_in {
                            let xv = x[ibase + ci];
                            let wbase = ((ky * g.k + kx) * g.c_in + ci) * g.c_out;
                            for (o, &wv) in orow.iter_mut().zip(&w[wbase..wbase + g.c_out]) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch matrix `[n*oh*ow, k*k*c_in]` for the im2col route. Out-of-bounds taps are left
/// out of the row sum in the same order the direct loop skips them.
fn im2col<T: Real>(x: &[T], g: ConvGeom) -> (Vec<T>, Vec<bool>) {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad());
    let cols = g.k * g.k * g.c_in;
    let rows = g.n * oh * ow;
    let mut patches = vec![T::zero(); rows * cols];
    let mut valid = vec![false; rows * g.k * g.k];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (n * oh + oy) * ow + ox;
                for ky in 0..g.k {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if iy < 0 || iy >= g.h as isize || ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        valid[r * g.k * g.k + ky * g.k + kx] = true;
                        let ibase = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let pbase = r * cols + (ky * g.k + kx) * g.c_in;
                        patches[pbase..pbase + g.c_in].copy_from_slice(&x[ibase..ibase + g.c_in]);
                    }
                }
            }
        }
    }
    (patches, valid)
}

/// im2col + GEMM route. Bit-identical to [`conv2d_direct`]: accumulation runs over
/// taps in the same order and padded taps are skipped rather than multiplied by zero.
pub fn conv2d_im2col<T: Real>(x: &[T], w: &[T], g: ConvGeom) -> Vec<T> {
    let (patches, valid) = im2col(x, g);
    let cols = g.k * g.k * g.c_in;
    let rows = g.n * g.out_h() * g.out_w();
    let taps = g.k * g.k;
    let mut out = vec![T::zero(); rows * g.c_out];
    for r in 0..rows {
        let orow = &mut out[r * g.c_out..(r + 1) * g.c_out];
        for t in 0..taps {
            if !valid[r * taps + t] {
                continue;
            }
            for ci in 0..g.c_in {
                let p = t * g.c_in + ci;
                let av = patches[r * cols + p];
                for (o, &wv) in orow.iter_mut().zip(&w[p * g.c_out..(p + 1) * g.c_out]) {
                    *o += av * wv;
                }
            }
        }
    }
    out
}

/// Gradients of a full convolution wrt input and weights.
pub fn conv2d_backward<T: Real>(x: &[T], w: &[T], dy: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>) {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((n * oh + oy) * ow + ox) * g.c_out;
                let drow = &dy[obase..obase + g.c_out];
                for ky in 0..g.k {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let ibase = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        for ci in 0..g.c_in {
                            let xv = x[ibase + ci];
                            let wbase = ((ky * g.k + kx) * g.c_in + ci) * g.c_out;
                            let mut acc = T::zero();
                            for co in 0..g.c_out {
                                acc += drow[co] * w[wbase + co];
                                dw[wbase + co] += drow[co] * xv;
                            }
                            dx[ibase + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Depthwise convolution, `c_in == c_out == g.c_in`.
pub fn depthwise<T: Real>(x: &[T], w: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad());
    let c = g.c_in;
    let mut out = vec![T::zero(); g.n * oh * ow * c];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((n * oh + oy) * ow + ox) * c;
                let orow = &mut out[obase..obase + c];
                for ky in 0..g.k {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let ibase = ((n * g.h + iy as usize) * g.w + ix as usize) * c;
                        let wbase = (ky * g.k + kx) * c;
                        let xrow = &x[ibase..ibase + c];
                        let wrow = &w[wbase..wbase + c];
                        for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Real>(x: &[T], w: &[T], dy: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>) {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad());
    let c = g.c_in;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((n * oh + oy) * ow + ox) * c;
                let drow = &dy[obase..obase + c];
                for ky in 0..g.k {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let ibase = ((n * g.h + iy as usize) * g.w + ix as usize) * c;
                        let wbase = (ky * g.k + kx) * c;
                        for ch in 0..c {
                            dx[ibase + ch] += drow[ch] * w[wbase + ch];
                            dw[wbase + ch] += drow[ch] * x[ibase + ch];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Per-channel mean and biased variance over all rows of a `[rows, c]` matrix.
pub fn channel_stats<T: Real>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let inv = T::one() / T::from_usize(rows).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s *= inv);
    (mean, var)
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, channel-last.
pub fn normalize_affine<T: Real>(x: &[T], mean: &[T], var: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let c = mean.len();
    let eps = T::from_f64_lossy(BN_EPS);
    let scale: Vec<T> = (0..c).map(|i| gamma[i] / (var[i] + eps).sqrt()).collect();
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for i in 0..c {
            y.push((row[i] - mean[i]) * scale[i] + beta[i]);
        }
    }
    y
}

#[inline]
pub fn hardswish<T: Real>(x: T) -> T {
    let three = T::from_f64_lossy(3.0);
    let six = T::from_f64_lossy(6.0);
    x * (x + three).max(T::zero()).min(six) / six
}

#[inline]
pub fn hardswish_grad<T: Real>(x: T) -> T {
    let three = T::from_f64_lossy(3.0);
    if x <= -three {
        T::zero()
    } else if x >= three {
        T::one()
    } else {
        (x + x + three) / T::from_f64_lossy(6.0)
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean over the spatial axes: `[n, h*w, c] -> [n, c]`.
pub fn global_avg_pool<T: Real>(x: &[T], n: usize, hw: usize, c: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let orow = &mut out[b * c..(b + 1) * c];
        for p in 0..hw {
            let base = (b * hw + p) * c;
            for (o, &v) in orow.iter_mut().zip(&x[base..base + c]) {
                *o += v;
            }
        }
        orow.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn im2col_route_is_bit_identical_to_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(h, k, s, ci, co) in &[(8, 3, 1, 3, 16), (9, 3, 2, 3, 5), (6, 5, 1, 4, 2), (7, 7, 2, 2, 3)] {
            let g = ConvGeom { n: 2, h, w: h, c_in: ci, c_out: co, k, stride: s };
            let x = random(2 * h * h * ci, &mut rng);
            let w = random(k * k * ci * co, &mut rng);
            let a = conv2d_direct(&x, &w, g);
            let b = conv2d_im2col(&x, &w, g);
            assert_eq!(a.len(), b.len());
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, k, m) = (3, 4, 5);
        let a: Vec<f64> = random(n * k, &mut rng).into_iter().map(f64::from).collect();
        let b: Vec<f64> = random(k * m, &mut rng).into_iter().map(f64::from).collect();
        let c = matmul(&a, &b, n, k, m);
        // transpose b to [m,k] and use the nt form
        let mut bt = vec![0.0; m * k];
        for p in 0..k {
            for j in 0..m {
                bt[j * k + p] = b[p * m + j];
            }
        }
        let c2 = matmul_nt(&a, &bt, n, k, m);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // transpose a to [k,n] and use the tn form
        let mut at = vec![0.0; k * n];
        for i in 0..n {
            for p in 0..k {
                at[p * n + i] = a[i * k + p];
            }
        }
        let c3 = matmul_tn(&at, &b, k, n, m);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hardswish_values() {
        assert_eq!(hardswish(-4.0f64), 0.0);
        assert_eq!(hardswish(4.0f64), 4.0);
        assert_eq!(hardswish(0.0f64), 0.0);
        assert!((hardswish(1.0f64) - 4.0 / 6.0).abs() < 1e-15);
    }
}

//! Floating-point scalar abstraction.
//!
//! Every kernel in the crate is generic over [`Real`] so that the same code
//! runs in `f32` for inference/training and in `f64` for finite-difference
//! gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rustfft::FftNum;

pub trait Real: FftNum + Float + Default + Sum + Display + Debug {
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Inner product of two equal-length slices.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        dot_generic(a, b)
    }

    /// `y += alpha * x`
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = *yi + alpha * xi;
        }
    }

    /// `y[r] = <w[r, ..], x>` for a row-major `w` with `y.len()` rows.
    fn gemv(w: &[Self], x: &[Self], y: &mut [Self]) {
        let cols = x.len();
        debug_assert!(w.len() >= cols * y.len());
        for (row, out) in w.chunks_exact(cols.max(1)).zip(y.iter_mut()) {
            *out = Self::dot(row, x);
        }
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn dot(a: &[f32], b: &[f32]) -> f32 {
        #[cfg(target_arch = "x86_64")]
        {
            if simd::has_avx2_fma() {
                // SAFETY: the required CPU features were detected at runtime.
                return unsafe { simd::dot_avx2(a, b) };
            }
        }
        dot_generic(a, b)
    }

    fn gemv(w: &[f32], x: &[f32], y: &mut [f32]) {
        assert!(w.len() >= x.len() * y.len());
        #[cfg(target_arch = "x86_64")]
        {
            if simd::has_avx2_fma() {
                // SAFETY: features detected at runtime; bounds asserted above.
                unsafe { simd::gemv_avx2(w, x, y) };
                return;
            }
        }
        for (row, out) in w.chunks_exact(x.len().max(1)).zip(y.iter_mut()) {
            *out = dot_generic(row, x);
        }
    }

    fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), y.len());
        #[cfg(target_arch = "x86_64")]
        {
            if simd::has_avx2_fma() {
                // SAFETY: the required CPU features were detected at runtime.
                unsafe { simd::axpy_avx2(alpha, x, y) };
                return;
            }
        }
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }
}

#[inline]
fn dot_generic<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    pub(super) fn has_avx2_fma() -> bool {
        static FLAG: OnceLock<bool> = OnceLock::new();
        *FLAG.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len().min(b.len());
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut acc0 = _mm256_setzero_ps();
        let mut acc1 = _mm256_setzero_ps();
        let mut acc2 = _mm256_setzero_ps();
        let mut acc3 = _mm256_setzero_ps();
        let mut i = 0;
        while i + 32 <= n {
            acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(i)), _mm256_loadu_ps(pb.add(i)), acc0);
            acc1 = _mm256_fmadd_ps(
                _mm256_loadu_ps(pa.add(i + 8)),
                _mm256_loadu_ps(pb.add(i + 8)),
                acc1,
            );
            acc2 = _mm256_fmadd_ps(
                _mm256_loadu_ps(pa.add(i + 16)),
                _mm256_loadu_ps(pb.add(i + 16)),
                acc2,
            );
            acc3 = _mm256_fmadd_ps(
                _mm256_loadu_ps(pa.add(i + 24)),
                _mm256_loadu_ps(pb.add(i + 24)),
                acc3,
            );
            i += 32;
        }
        while i + 8 <= n {
            acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(i)), _mm256_loadu_ps(pb.add(i)), acc0);
            i += 8;
        }
        let acc = _mm256_add_ps(_mm256_add_ps(acc0, acc1), _mm256_add_ps(acc2, acc3));
        let hi = _mm256_extractf128_ps(acc, 1);
        let lo = _mm256_castps256_ps128(acc);
        let s = _mm_add_ps(hi, lo);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        let mut total = _mm_cvtss_f32(s);
        while i < n {
            total += *pa.add(i) * *pb.add(i);
            i += 1;
        }
        total
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(v: __m256) -> f32 {
        let s = _mm_add_ps(_mm256_extractf128_ps(v, 1), _mm256_castps256_ps128(v));
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        _mm_cvtss_f32(_mm_add_ss(s, _mm_shuffle_ps(s, s, 1)))
    }

    /// Four rows per pass so each load of `x` feeds four accumulators.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gemv_avx2(w: &[f32], x: &[f32], y: &mut [f32]) {
        let c = x.len();
        let rows = y.len();
        let px = x.as_ptr();
        let mut r = 0;
        while r + 4 <= rows {
            let p = w.as_ptr().add(r * c);
            let mut a0 = _mm256_setzero_ps();
            let mut a1 = _mm256_setzero_ps();
            let mut a2 = _mm256_setzero_ps();
            let mut a3 = _mm256_setzero_ps();
            let mut i = 0;
            while i + 8 <= c {
                let xv = _mm256_loadu_ps(px.add(i));
                a0 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(i)), xv, a0);
                a1 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(c + i)), xv, a1);
                a2 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(2 * c + i)), xv, a2);
                a3 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(3 * c + i)), xv, a3);
                i += 8;
            }
            let mut t = [hsum(a0), hsum(a1), hsum(a2), hsum(a3)];
            while i < c {
                let xi = *px.add(i);
                for (k, tk) in t.iter_mut().enumerate() {
                    *tk += *p.add(k * c + i) * xi;
                }
                i += 1;
            }
            y[r..r + 4].copy_from_slice(&t);
            r += 4;
        }
        while r < rows {
            y[r] = dot_avx2(&w[r * c..(r + 1) * c], x);
            r += 1;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn axpy_avx2(alpha: f32, x: &[f32], y: &mut [f32]) {
        let n = x.len().min(y.len());
        let (px, py) = (x.as_ptr(), y.as_mut_ptr());
        let va = _mm256_set1_ps(alpha);
        let mut i = 0;
        while i + 8 <= n {
            let v = _mm256_fmadd_ps(va, _mm256_loadu_ps(px.add(i)), _mm256_loadu_ps(py.add(i)));
            _mm256_storeu_ps(py.add(i), v);
            i += 8;
        }
        while i < n {
            *py.add(i) += alpha * *px.add(i);
            i += 1;
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_dot_matches_naive_sum() {
        let a: Vec<f32> = (0..103).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..103).map(|i| (i as f32 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        assert!((f32::dot(&a, &b) as f64 - naive).abs() < 1e-4);
        assert!((dot_generic(&a, &b) as f64 - naive).abs() < 1e-4);
    }

    #[test]
    fn gemv_matches_rowwise_dot() {
        for (rows, cols) in [(1, 1), (4, 8), (7, 13), (9, 40), (5, 3)] {
            let w: Vec<f32> = (0..rows * cols).map(|i| (i as f32 * 0.71).sin()).collect();
            let x: Vec<f32> = (0..cols).map(|i| (i as f32 * 0.3).cos()).collect();
            let mut y = vec![0.0f32; rows];
            f32::gemv(&w, &x, &mut y);
            for r in 0..rows {
                let naive: f64 = (0..cols).map(|c| w[r * cols + c] as f64 * x[c] as f64).sum();
                assert!((y[r] as f64 - naive).abs() < 1e-5, "{rows}x{cols} row {r}");
            }
        }
    }

    #[test]
    fn axpy_accumulates() {
        let x = vec![1.0f32; 19];
        let mut y: Vec<f32> = (0..19).map(|i| i as f32).collect();
        f32::axpy(2.0, &x, &mut y);
        for (i, v) in y.iter().enumerate() {
            assert_eq!(*v, i as f32 + 2.0);
        }
    }

    #[test]
    fn sigmoid_is_symmetric_and_saturates() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.0f64) + sigmoid(-3.0f64) - 1.0).abs() < 1e-15);
        assert_eq!(sigmoid(100.0f32), 1.0);
        assert!(sigmoid(-1000.0f64) >= 0.0);
    }
}

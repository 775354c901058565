//! Raw slice kernels. Every reduction runs in a fixed order so results are
//! bit-reproducible; inner loops vectorize across output columns only, never
//! across a reduction.

use super::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Four output rows share each pass over `b`; every element still sums over
/// `k` in ascending order.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for kk in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
///
/// Each `c` row takes its four contributions in ascending `i` order.
pub fn matmul_at_b_acc<T: Real>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut i = 0;
    while i + 4 <= m {
        let (g0, g1, g2, g3) = (
            &g[i * n..(i + 1) * n],
            &g[(i + 1) * n..(i + 2) * n],
            &g[(i + 2) * n..(i + 3) * n],
            &g[(i + 3) * n..(i + 4) * n],
        );
        for kk in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                let mut v = crow[j];
                v += a0 * g0[j];
                v += a1 * g1[j];
                v += a2 * g2[j];
                v += a3 * g3[j];
                crow[j] = v;
            }
        }
        i += 4;
    }
    for i in i..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_a_bt_acc<T: Real>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, c, m, n, k);
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Sum by recursive halving. Error grows with `log n` rather than `n`, and a
/// power-of-two count of equal values sums exactly.
pub fn pairwise_sum<T: Real>(x: &[T]) -> T {
    match x.len() {
        0 => T::zero(),
        1 => x[0],
        n => pairwise_sum(&x[..n / 2]) + pairwise_sum(&x[n / 2..]),
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    T::of(0.5) * x * (T::one() + gelu_tanh(x))
}

/// `tanh` of the GELU inner argument.
#[inline]
pub fn gelu_tanh<T: Real>(x: T) -> T {
    (T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x)).tanh()
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    gelu_grad_with(x, gelu_tanh(x))
}

/// Derivative given the cached `t = gelu_tanh(x)`.
#[inline]
pub fn gelu_grad_with<T: Real>(x: T, t: T) -> T {
    let half = T::of(0.5);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

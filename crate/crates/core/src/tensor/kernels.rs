//! Scalar loop kernels shared by the tape ops. Inner loops are written so
//! the compiler can vectorize them: independent lanes for dot products,
//! contiguous axpy for everything shaped like an outer product.

/// Dot product with eight independent accumulators.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..i * LANES + LANES];
        let pb = &b[i * LANES..i * LANES + LANES];
        for l in 0..LANES {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut s = 0.0f32;
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// y += alpha * x
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    if alpha == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// c += a[m×k] · b[k×n], all row-major.
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            axpy(a_ip, &b[p * n..(p + 1) * n], c_row);
        }
    }
}

/// out += w[m×k] · x[k]
pub fn matvec_acc(w: &[f32], x: &[f32], out: &mut [f32], m: usize, k: usize) {
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(out.len(), m);
    for i in 0..m {
        out[i] += dot(&w[i * k..(i + 1) * k], x);
    }
}

/// Numerically stable softmax of one row; the normalizer sums in f64.
pub fn softmax_row(x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), out.len());
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        denom += e as f64;
    }
    let inv = (1.0 / denom) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Sum in f64.
pub fn sum64(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracle: plain triple loop, no unrolling, f64 throughout.
    fn matmul_oracle(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_pinned_example() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let mut c = vec![0.0];
        matmul_acc(&[1.0, 2.0], &[3.0, 4.0], &mut c, 1, 2, 1);
        assert_eq!(c, vec![11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 4, 5), (7, 13, 2), (16, 16, 16), (5, 1, 9)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut c = vec![0.0f32; m * n];
            matmul_acc(&a, &b, &mut c, m, k, n);
            let want = matmul_oracle(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn dot_handles_remainder_lengths() {
        for len in [0usize, 1, 7, 8, 9, 31] {
            let a: Vec<f32> = (0..len).map(|i| i as f32).collect();
            let want: f32 = a.iter().map(|v| v * v).sum();
            assert_eq!(dot(&a, &a), want);
        }
    }

    #[test]
    fn softmax_row_sums_to_one_under_shift() {
        let x = [1000.0f32, 1001.0, 999.5];
        let mut out = [0.0f32; 3];
        softmax_row(&x, &mut out);
        let s: f32 = out.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(out.iter().all(|v| v.is_finite() && *v > 0.0));
    }
}

//! Dense kernels on row-major slices.
//!
//! Every kernel accumulates in a fixed loop order, so results are bitwise
//! reproducible run to run.

use super::Real;

/// `c[m,n] += a[m,k] · b[k,n]`
///
/// Register-blocked over 4×8 tiles of `c`. Each output element still sums
/// its products in increasing `p`, starting from its current value.
pub fn matmul_acc<S: Real>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let n_main = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < n_main {
            let mut acc = [[S::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bb = &b[p * n + j..p * n + j + NR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for q in 0..NR {
                        row[q] += av * bb[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        i += MR;
    }
    // Leftover rows, and the leftover columns of the blocked rows.
    for r in 0..m {
        let j0 = if r < i { n_main } else { 0 };
        if j0 == n {
            continue;
        }
        let c_row = &mut c[r * n + j0..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            for (cv, &bv) in c_row.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

pub fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut t = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn_acc<S: Real>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub fn matmul_nt_acc<S: Real>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(a, &bt, c, m, n, k);
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors stored as
/// columns of a row-major `n×n` matrix.
pub fn symmetric_eigen<S: Real>(a: &[S], n: usize) -> (Vec<S>, Vec<S>) {
    let mut m = a.to_vec();
    let mut v = vec![S::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = S::one();
    }
    let scale: S = m.iter().map(|x| x.abs()).fold(S::zero(), S::max);
    if scale == S::zero() {
        return (vec![S::zero(); n], v);
    }
    let tol = S::epsilon() * S::epsilon() * scale * scale;
    for _sweep in 0..100 {
        let mut off = S::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[i * n + j] * m[i * n + j];
                }
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (S::lit(2.0) * apq);
                let sign = if theta >= S::zero() { S::one() } else { -S::one() };
                let t = sign / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues (round-off) are clamped to zero.
pub fn sqrt_psd<S: Real>(a: &[S], n: usize) -> Vec<S> {
    let (vals, vecs) = symmetric_eigen(a, n);
    let mut out = vec![S::zero(); n * n];
    for (k, &lambda) in vals.iter().enumerate() {
        let r = lambda.max(S::zero()).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += vecs[i * n + k] * r * vecs[j * n + k];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_reconstructs_matrix() {
        let a: [f64; 9] = [4.0, 1.0, 0.5, 1.0, 3.0, -0.25, 0.5, -0.25, 2.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let a: [f64; 4] = [2.0, 0.3, 0.3, 1.0];
        let r = sqrt_psd(&a, 2);
        let rr = matmul(&r, &r, 2, 2, 2);
        for (x, y) in rr.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_matmul_matches_naive_sums_bitwise() {
        let mut rng = crate::numerics::Rng::new(5);
        for (m, k, n) in [(1, 1, 1), (4, 3, 8), (5, 7, 9), (9, 2, 17), (13, 6, 3), (8, 16, 24)] {
            let a: Vec<f64> = rng.normal_vec(m * k);
            let b: Vec<f64> = rng.normal_vec(k * n);
            let mut c: Vec<f64> = rng.normal_vec(m * n);
            let mut want = c.clone();
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        want[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            matmul_acc(&a, &b, &mut c, m, k, n);
            assert_eq!(c, want, "{m}x{k}x{n}");
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect(); // 2x4
        let mut c = vec![0.0; 12];
        matmul_tn_acc(&a, &b, &mut c, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        assert_eq!(c, matmul(&at, &b, 3, 2, 4));
    }
}

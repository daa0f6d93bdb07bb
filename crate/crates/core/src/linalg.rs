//! Small-matrix linear algebra: a one-sided Jacobi SVD.
//!
//! Everything downstream (spectra, ranks, pseudo-inverses, PCA refreshes)
//! works on matrices no larger than a few thousand by a few dozen, where
//! cyclic one-sided Jacobi is simple, deterministic, and accurate to high
//! relative precision. Rotations orthogonalize the columns of a working
//! copy; column norms become singular values and the accumulated rotations
//! the right singular vectors.

use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Thin singular value decomposition `a = u * diag(sigma) * v^T`.
///
/// For an `n x m` input with `k = min(n, m)`: `u` is `n x k`, `sigma` holds
/// `k` values in descending order, and `v` is `m x k` with orthonormal
/// columns. Columns of `u` whose singular value is exactly zero are zero.
pub struct Svd<S: Real = f64> {
    pub u: Tensor<S>,
    pub sigma: Vec<S>,
    pub v: Tensor<S>,
}

/// Computes the SVD of an arbitrary dense matrix.
pub fn svd<S: Real>(a: &Tensor<S>) -> Result<Svd<S>> {
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        // Jacobi needs at least as many rows as columns; factor the
        // transpose and swap the roles of u and v.
        let t = svd_tall(&a.transpose())?;
        Ok(Svd { u: t.v, sigma: t.sigma, v: t.u })
    }
}

/// One-sided Jacobi on an `n x m` matrix with `n >= m`.
fn svd_tall<S: Real>(a: &Tensor<S>) -> Result<Svd<S>> {
    let (n, m) = a.shape();
    let mut work = a.clone();
    let mut v = Tensor::<S>::eye(m);
    if m > 1 {
        let tol = S::epsilon() * S::of(16.0);
        let max_sweeps = 60;
        for _ in 0..max_sweeps {
            let mut rotated = false;
            for p in 0..m - 1 {
                for q in p + 1..m {
                    // Gram entries for the column pair.
                    let mut alpha = S::zero();
                    let mut beta = S::zero();
                    let mut gamma = S::zero();
                    for i in 0..n {
                        let wp = work.get(i, p);
                        let wq = work.get(i, q);
                        alpha += wp * wp;
                        beta += wq * wq;
                        gamma += wp * wq;
                    }
                    if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == S::zero() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (S::of(2.0) * gamma);
                    let t = {
                        let s = if zeta >= S::zero() { S::one() } else { -S::one() };
                        s / (zeta.abs() + (S::one() + zeta * zeta).sqrt())
                    };
                    let c = S::one() / (S::one() + t * t).sqrt();
                    let s = c * t;
                    for i in 0..n {
                        let wp = work.get(i, p);
                        let wq = work.get(i, q);
                        work.set(i, p, c * wp - s * wq);
                        work.set(i, q, s * wp + c * wq);
                    }
                    for i in 0..m {
                        let vp = v.get(i, p);
                        let vq = v.get(i, q);
                        v.set(i, p, c * vp - s * vq);
                        v.set(i, q, s * vp + c * vq);
                    }
                }
            }
            if !rotated {
                break;
            }
        }
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..m).collect();
    let norms: Vec<S> = (0..m)
        .map(|j| (0..n).map(|i| work.get(i, j) * work.get(i, j)).sum::<S>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite singular values"));

    let mut u = Tensor::<S>::zeros(n, m);
    let mut sigma = Vec::with_capacity(m);
    let mut vs = Tensor::<S>::zeros(m, m);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > S::zero() {
            let inv = S::one() / s;
            for i in 0..n {
                u.set(i, dst, work.get(i, src) * inv);
            }
        }
        for i in 0..m {
            vs.set(i, dst, v.get(i, src));
        }
    }
    Ok(Svd { u, sigma, v: vs })
}

/// Singular values only, descending.
pub fn singular_values<S: Real>(a: &Tensor<S>) -> Result<Vec<S>> {
    Ok(svd(a)?.sigma)
}

/// Seeded random n x n orthogonal matrix: modified Gram-Schmidt (run twice
/// for stability) over the rows of a standard Gaussian draw.
pub fn random_orthogonal<S: Real>(n: usize, seed: u64) -> Tensor<S> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = crate::rng::rng_from(seed);
    let mut q = Tensor::<S>::zeros(n, n);
    for i in 0..n {
        let mut v: Vec<S> = (0..n).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect();
        loop {
            for _pass in 0..2 {
                for k in 0..i {
                    let dot: S = (0..n).map(|j| q.get(k, j) * v[j]).sum();
                    for j in 0..n {
                        v[j] -= dot * q.get(k, j);
                    }
                }
            }
            let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
            if norm > S::of(1e-8) {
                for (j, x) in v.iter().enumerate() {
                    q.set(i, j, *x / norm);
                }
                break;
            }
            // astronomically unlikely near-dependent draw; replace and retry
            for x in v.iter_mut() {
                *x = S::of(rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    fn reconstruction_error(a: &Tensor<f64>, s: &Svd<f64>) -> f64 {
        let k = s.sigma.len();
        let mut us = s.u.clone();
        for i in 0..us.rows() {
            for j in 0..k {
                let v = us.get(i, j) * s.sigma[j];
                us.set(i, j, v);
            }
        }
        let rec = us.matmul_nt(&s.v).unwrap();
        a.sub(&rec).unwrap().max_abs()
    }

    fn orthonormality_error(m: &Tensor<f64>) -> f64 {
        let g = m.matmul_tn(m).unwrap();
        g.sub(&Tensor::eye(m.cols())).unwrap().max_abs()
    }

    #[test]
    fn factors_random_matrices() {
        for seed in 0..10u64 {
            let (rows, cols) = match seed % 3 {
                0 => (8, 5),
                1 => (5, 8),
                _ => (6, 6),
            };
            let a = random_tensor(rows, cols, seed);
            let s = svd(&a).unwrap();
            assert!(reconstruction_error(&a, &s) < 1e-12, "seed {}", seed);
            assert!(orthonormality_error(&s.v) < 1e-12, "seed {}", seed);
            assert!(orthonormality_error(&s.u) < 1e-12, "seed {}", seed);
            for w in s.sigma.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn diagonal_matrix_has_exact_singular_values() {
        let a = Tensor::<f64>::new(3, 3, vec![3.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = svd(&a).unwrap();
        assert!((s.sigma[0] - 5.0).abs() < 1e-14);
        assert!((s.sigma[1] - 3.0).abs() < 1e-14);
        assert!((s.sigma[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_one_product_has_one_singular_value() {
        let u = Tensor::<f64>::col_vector(vec![1.0, 2.0, -1.0, 0.5]);
        let v = Tensor::row_vector(vec![3.0, -1.0, 2.0]);
        let a = u.matmul(&v).unwrap();
        let s = svd(&a).unwrap();
        assert!(s.sigma[0] > 1.0);
        assert!(s.sigma[1] < 1e-12);
        assert!(s.sigma[2] < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let a = Tensor::<f64>::zeros(4, 3);
        let s = svd(&a).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 0.0));
        assert!(orthonormality_error(&s.v) < 1e-15);
    }

    #[test]
    fn wide_matrix_right_vectors_orthonormal() {
        let a = random_tensor(4, 9, 42);
        let s = svd(&a).unwrap();
        assert_eq!(s.v.shape(), (9, 4));
        assert!(orthonormality_error(&s.v) < 1e-12);
        assert!(reconstruction_error(&a, &s) < 1e-12);
    }

    #[test]
    fn random_orthogonal_is_orthogonal_and_deterministic() {
        for n in [1usize, 3, 8, 17] {
            let q = random_orthogonal::<f64>(n, 9001);
            let qtq = q.transpose().matmul(&q).unwrap();
            let qqt = q.matmul(&q.transpose()).unwrap();
            let eye = Tensor::<f64>::eye(n);
            assert!(qtq.sub(&eye).unwrap().max_abs() < 1e-12, "n={n}");
            assert!(qqt.sub(&eye).unwrap().max_abs() < 1e-12, "n={n}");
        }
        let a = random_orthogonal::<f64>(12, 5);
        let b = random_orthogonal::<f64>(12, 5);
        assert_eq!(a.data(), b.data());
        let c = random_orthogonal::<f64>(12, 6);
        assert_ne!(a.data(), c.data());
    }
}

//! One-sided (Hestenes) Jacobi SVD for small square matrices.

use super::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SvdError {
    #[error("matrix must be square, got {0:?}")]
    NotSquare(Vec<usize>),
    #[error("matrix dimension {0} exceeds the supported maximum of {MAX_DIM}")]
    TooLarge(usize),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("Jacobi SVD did not converge within {0} sweeps")]
    NotConverged(usize),
}

pub const MAX_DIM: usize = 1024;

#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yp) = (*x, *y);
        *x = c * xp - s * yp;
        *y = s * xp + c * yp;
    }
}

/// Decomposes `m = U diag(S) Vt` with `S` nonincreasing.
pub fn svd_small(m: &Tensor) -> Result<Svd, SvdError> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(SvdError::NotSquare(shape.to_vec()));
    }
    let d = shape[0];
    if d > MAX_DIM {
        return Err(SvdError::TooLarge(d));
    }
    if !m.is_finite() {
        return Err(SvdError::NonFinite);
    }
    if d == 0 {
        return Ok(Svd { u: Tensor::zeros(&[0, 0]), s: vec![], vt: Tensor::zeros(&[0, 0]) });
    }

    // Work column-wise: w[j] is column j of the working matrix, v[j] column j of V.
    let mut w: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| m.get2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut col = vec![0.0; d];
            col[j] = 1.0;
            col
        })
        .collect();

    let tol = 1e-15;
    let max_sweeps = 100 * d;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = w.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SvdError::NotConverged(max_sweeps));
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let smax = norms[order[0]];
    let zero_cut = smax * 1e-14;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut s = Vec::with_capacity(d);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        if norms[j] > zero_cut && norms[j] > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; d]);
            pending.push(slot);
        }
    }
    complete_basis(&mut u_cols, &pending);

    let mut u = Tensor::zeros(&[d, d]);
    let mut vt = Tensor::zeros(&[d, d]);
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..d {
            u.set2(i, slot, u_cols[slot][i]);
            vt.set2(slot, i, v[j][i]);
        }
    }
    Ok(Svd { u, s, vt })
}

/// Fills the columns listed in `pending` with unit vectors orthogonal to all
/// other columns (Gram-Schmidt over the standard basis, twice for stability).
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize]) {
    let d = cols.len();
    let mut filled: Vec<bool> = (0..d).map(|i| !pending.contains(&i)).collect();
    for &slot in pending {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..d {
            let mut cand = vec![0.0; d];
            cand[e] = 1.0;
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if filled[k] {
                        let proj = dot(&cand, col);
                        for (c, x) in cand.iter_mut().zip(col) {
                            *c -= proj * x;
                        }
                    }
                }
            }
            let n = dot(&cand, &cand).sqrt();
            if n > best_norm {
                best_norm = n;
                best = Some(cand);
            }
            if n > 0.5 {
                break;
            }
        }
        let cand = best.expect("basis completion needs d >= 1");
        cols[slot] = cand.iter().map(|x| x / best_norm).collect();
        filled[slot] = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::Rng;

    fn residuals(m: &Tensor, svd: &Svd) -> (f64, f64, f64) {
        let d = m.shape()[0];
        let mut us = svd.u.clone();
        for i in 0..d {
            for j in 0..d {
                us.set2(i, j, svd.u.get2(i, j) * svd.s[j]);
            }
        }
        let rec = us.matmul(&svd.vt);
        let diff: f64 = rec.data().iter().zip(m.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let rel = diff / m.sum_squares().sqrt().max(f64::MIN_POSITIVE);
        let orth = |q: &Tensor| {
            let g = q.transpose().matmul(q);
            let mut worst: f64 = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let e = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((g.get2(i, j) - e).abs());
                }
            }
            worst
        };
        (rel, orth(&svd.u), orth(&svd.vt))
    }

    fn random(d: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_vec(&[d, d], (0..d * d).map(|_| r.normal()).collect())
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let svd = svd_small(&Tensor::identity(3)).unwrap();
        assert_eq!(svd.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_singular_values_sorted() {
        let m = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 3., 0., 0., 0., 2.]);
        let svd = svd_small(&m).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0, 1.0]);
        let (rel, ou, ov) = residuals(&m, &svd);
        assert!(rel < 1e-15 && ou < 1e-15 && ov < 1e-15);
    }

    #[test]
    fn random_8x8_residuals() {
        let m = random(8, 1);
        let svd = svd_small(&m).unwrap();
        let (rel, ou, ov) = residuals(&m, &svd);
        assert!(rel < 1e-10, "reconstruction {rel}");
        assert!(ou < 1e-10 && ov < 1e-10, "orthogonality {ou} {ov}");
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_deficient_still_orthogonal() {
        // rank 1: outer product
        let a = [1.0, 2.0, -1.0, 0.5];
        let b = [0.3, -0.7, 1.1, 2.0];
        let m = Tensor::from_vec(&[4, 4], (0..16).map(|k| a[k / 4] * b[k % 4]).collect());
        let svd = svd_small(&m).unwrap();
        let (rel, ou, ov) = residuals(&m, &svd);
        assert!(rel < 1e-12 && ou < 1e-10 && ov < 1e-10);
        assert!(svd.s[1] < 1e-12);
        let zero = svd_small(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(zero.s, vec![0.0; 3]);
        let (_, ou, _) = residuals(&Tensor::zeros(&[3, 3]), &zero);
        assert!(ou < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(svd_small(&Tensor::zeros(&[2, 3])), Err(SvdError::NotSquare(_))));
        let mut m = Tensor::identity(2);
        m.data_mut()[0] = f64::NAN;
        assert_eq!(svd_small(&m).unwrap_err(), SvdError::NonFinite);
    }

    #[test]
    fn random_sizes_up_to_64() {
        for (i, d) in [2usize, 3, 5, 9, 16, 31, 64].into_iter().enumerate() {
            let m = random(d, 100 + i as u64);
            let svd = svd_small(&m).unwrap();
            let (rel, ou, ov) = residuals(&m, &svd);
            assert!(rel < 1e-10 && ou < 1e-10 && ov < 1e-10, "d={d}: {rel} {ou} {ov}");
            assert!(svd.s.iter().all(|&x| x >= 0.0));
        }
    }
}

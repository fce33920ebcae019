//! Thin SVD by one-sided (Hestenes) Jacobi rotations, f64 throughout.
//!
//! Only singular values and right singular vectors are produced. For wide
//! inputs (`m < n`) the rotations act on the transpose, so the work per sweep
//! is `O(min(m, n)^2 max(m, n))`.

use ndarray::{Array1, Array2, Axis};

const MAX_SWEEPS: usize = 80;
const TOL: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// Descending, length `min(m, n)`.
    pub singular_values: Vec<f64>,
    /// `n x min(m, n)`, orthonormal columns matching `singular_values`.
    pub right: Array2<f64>,
    pub sweeps: usize,
}

/// Rotates column pairs of `a` until they are mutually orthogonal and
/// applies the same rotations to `acc`. Returns the number of sweeps.
fn orthogonalize_columns(a: &mut Array2<f64>, acc: &mut Array2<f64>) -> usize {
    let n = a.ncols();
    for sweep in 1..=MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = a.column(p);
                    let cq = a.column(q);
                    (cp.dot(&cp), cq.dot(&cq), cp.dot(&cq))
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(a, p, q, c, s);
                rotate(acc, p, q, c, s);
            }
        }
        if !rotated {
            return sweep;
        }
    }
    MAX_SWEEPS
}

fn rotate(m: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let xp = row[p];
        let xq = row[q];
        row[p] = c * xp - s * xq;
        row[q] = s * xp + c * xq;
    }
}

fn column_norms(a: &Array2<f64>) -> Vec<f64> {
    a.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect()
}

/// Indices ordered by descending value; equal values keep index order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx
}

/// Modified Gram-Schmidt (two passes) over the columns in order; columns
/// that vanish are replaced by the first standard basis vector that extends
/// the basis.
fn orthonormalize(cols: &mut Array2<f64>) {
    let (n, k) = cols.dim();
    for j in 0..k {
        let mut candidate = cols.column(j).to_owned();
        let mut basis_idx = 0usize;
        loop {
            for _ in 0..2 {
                for i in 0..j {
                    let prev = cols.column(i);
                    let proj = prev.dot(&candidate);
                    candidate.scaled_add(-proj, &prev);
                }
            }
            let norm = candidate.dot(&candidate).sqrt();
            if norm > 1e-8 {
                cols.column_mut(j).assign(&(candidate / norm));
                break;
            }
            assert!(basis_idx < n, "cannot extend an orthonormal basis beyond its dimension");
            candidate = Array1::zeros(n);
            candidate[basis_idx] = 1.0;
            basis_idx += 1;
        }
    }
}

pub fn thin_svd(a: &Array2<f64>) -> ThinSvd {
    let (m, n) = a.dim();
    let r = m.min(n);
    if r == 0 {
        return ThinSvd {
            singular_values: vec![],
            right: Array2::zeros((n, 0)),
            sweeps: 0,
        };
    }
    if m >= n {
        // A J = B with orthogonal columns; right vectors are the columns of J.
        let mut work = a.clone();
        let mut j = Array2::eye(n);
        let sweeps = orthogonalize_columns(&mut work, &mut j);
        let sv = column_norms(&work);
        let order = descending_order(&sv);
        let right = j.select(Axis(1), &order);
        ThinSvd {
            singular_values: order.iter().map(|&i| sv[i]).collect(),
            right,
            sweeps,
        }
    } else {
        // A^T J = B; right vectors of A are the normalized columns of B.
        let mut work = a.t().to_owned();
        let mut j = Array2::eye(m);
        let sweeps = orthogonalize_columns(&mut work, &mut j);
        let sv = column_norms(&work);
        let order = descending_order(&sv);
        let top = sv[order[0]];
        let mut right = Array2::zeros((n, r));
        for (dst, &src) in order.iter().enumerate() {
            if sv[src] > top * 1e-12 && sv[src] > 0.0 {
                right
                    .column_mut(dst)
                    .assign(&(&work.column(src) / sv[src]));
            }
        }
        orthonormalize(&mut right);
        ThinSvd {
            singular_values: order.iter().map(|&i| sv[i]).collect(),
            right,
            sweeps,
        }
    }
}

//! Small dense helpers for the ensemble-space systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Factorization of the ensemble-space matrix `S = I_N + Ỹ^T Ỹ`, where
/// `Ỹ = R^{-1/2} Y` are the whitened observation anomalies, through the thin
/// SVD `Ỹ^T = U diag(σ) V^T`. Every function of `S` is then
/// `I + U diag(f(1 + σ²) - 1) U^T`, evaluated without cancellation, so the
/// factor stays accurate however precise the observations are.
///
/// The SVD is computed by one-sided Jacobi rotations, which stay accurate on
/// the rank-deficient inputs an ensemble always produces (its anomalies sum to
/// zero). nalgebra's bidiagonal SVD returns wrong singular vectors for some of
/// these matrices.
#[derive(Debug, Clone)]
pub struct EnsembleSpaceFactor {
    /// Left singular vectors (`N x r`).
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    /// `diag(σ) V^T` (`r x d`), kept scaled so no division by `σ` is needed.
    scaled_v_t: DMatrix<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// Orthogonalizes the columns of `a` in place by plane rotations, applying the
/// same rotations to the columns of the returned orthogonal matrix `Q`, so that
/// on exit `a_in = a_out Q^T` with mutually orthogonal columns in `a_out`.
fn jacobi_orthogonalize(a: &mut DMatrix<f64>) -> DMatrix<f64> {
    let (rows, n) = a.shape();
    let mut q = DMatrix::identity(n, n);
    let a = a.as_mut_slice();
    let q = {
        let qs = q.as_mut_slice();
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut norms: Vec<f64> = a.chunks_exact(rows).map(|c| dot(c, c)).collect();
            let mut rotated = false;
            for i in 0..n {
                for j in i + 1..n {
                    let (alpha, beta) = (norms[i], norms[j]);
                    let gamma = dot(&a[i * rows..(i + 1) * rows], &a[j * rows..(j + 1) * rows]);
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * alpha.sqrt() * beta.sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate_columns(a, rows, i, j, c, s);
                    rotate_columns(qs, n, i, j, c, s);
                    norms[i] = alpha - t * gamma;
                    norms[j] = beta + t * gamma;
                }
            }
            if !rotated {
                break;
            }
        }
        q
    };
    q
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `(x_i, x_j) <- (c x_i - s x_j, s x_i + c x_j)` for columns of a column-major buffer.
fn rotate_columns(m: &mut [f64], rows: usize, i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = m.split_at_mut(j * rows);
    let xi = &mut head[i * rows..(i + 1) * rows];
    let xj = &mut tail[..rows];
    for (x, y) in xi.iter_mut().zip(xj.iter_mut()) {
        let (u, v) = (*x, *y);
        *x = c * u - s * v;
        *y = s * u + c * v;
    }
}

impl EnsembleSpaceFactor {
    /// `whitened_t` is `Ỹ^T` (`N x d`).
    pub fn new(whitened_t: DMatrix<f64>) -> Result<Self> {
        if whitened_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEnsembleSpace(
                "whitened observation anomalies".into(),
            ));
        }
        let (n, d) = whitened_t.shape();
        if d >= n {
            // Ỹ W = A with orthogonal columns a_k = σ_k v_k: U = W, diag(σ) V^T = A^T.
            let mut a = whitened_t.transpose();
            let u = jacobi_orthogonalize(&mut a);
            let sigma = DVector::from_iterator(n, a.column_iter().map(|c| c.norm()));
            Ok(Self {
                u,
                sigma,
                scaled_v_t: a.transpose(),
            })
        } else {
            // Ỹ^T W = B with orthogonal columns b_k = σ_k u_k: V = W.
            let mut b = whitened_t;
            let w = jacobi_orthogonalize(&mut b);
            let sigma = DVector::from_iterator(d, b.column_iter().map(|c| c.norm()));
            let mut scaled_v_t = w.transpose();
            for (k, &s) in sigma.iter().enumerate() {
                scaled_v_t.row_mut(k).scale_mut(s);
                // a null direction contributes nothing to any function of S
                b.column_mut(k)
                    .scale_mut(if s > 0.0 { 1.0 / s } else { 0.0 });
            }
            Ok(Self {
                u: b,
                sigma,
                scaled_v_t,
            })
        }
    }

    pub fn ensemble_size(&self) -> usize {
        self.u.nrows()
    }

    /// Eigenvalues `1 + σ²` of `S` on the range of `U` (all others are 1).
    pub fn leading_eigenvalues(&self) -> DVector<f64> {
        self.sigma.map(|s| 1.0 + s * s)
    }

    /// `I + U diag(g(σ)) U^T`, exactly symmetric.
    fn identity_plus(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.ensemble_size();
        let mut scaled = self.u.clone();
        for (j, &s) in self.sigma.iter().enumerate() {
            scaled.column_mut(j).scale_mut(g(s));
        }
        let mut out = scaled * self.u.transpose();
        for i in 0..n {
            out[(i, i)] += 1.0;
        }
        // rounding otherwise leaves ~1 ulp asymmetry
        (&out + out.transpose()) * 0.5
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        self.identity_plus(|s| s * s)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.identity_plus(|s| -s * s / (1.0 + s * s))
    }

    /// Symmetric positive definite square root of `S`.
    pub fn sqrt(&self) -> DMatrix<f64> {
        // sqrt(1 + s²) - 1 without cancellation
        self.identity_plus(|s| s * s / ((1.0 + s * s).sqrt() + 1.0))
    }

    /// Symmetric positive definite `S^{-1/2}`.
    pub fn inverse_sqrt(&self) -> DMatrix<f64> {
        // 1/sqrt(1 + s²) - 1 without cancellation
        self.identity_plus(|s| {
            let r = (1.0 + s * s).sqrt();
            -s * s / (r * (r + 1.0))
        })
    }

    /// `S^{-1} Ỹ^T b` for a whitened innovation `b` (`d` entries), i.e. the
    /// ensemble-space analysis weights.
    pub fn weights(&self, whitened_innovation: &DVector<f64>) -> DVector<f64> {
        let mut coeffs = &self.scaled_v_t * whitened_innovation;
        for (c, &s) in coeffs.iter_mut().zip(self.sigma.iter()) {
            *c /= 1.0 + s * s;
        }
        &self.u * coeffs
    }

    pub fn log_det(&self) -> f64 {
        self.sigma.iter().map(|s| (s * s).ln_1p()).sum()
    }
}

/// Cholesky log-determinant and quadratic form `b^T A^{-1} b` of an SPD matrix.
pub fn spd_logdet_quad(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<(f64, f64)> {
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    let l = chol.l_dirty();
    let log_det = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    // ||L^{-1} b||^2
    let z = l
        .solve_lower_triangular(b)
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok((log_det, z.norm_squared()))
}

//! Penalized smooth objective in whitened monomial coordinates.
//!
//! The factor `L` is packed row-major over its lower triangle. Off-diagonal
//! entries are used directly; each diagonal entry is `exp(c(t))` with
//! `c(t) = b − softplus(b − t)` and `b = ln(THETA_BOUND)`, which keeps the
//! diagonal positive and below the parameter bound.

use nalgebra::DMatrix;

use super::smooth::smooth_indicator_with_slope;
use crate::polyset::THETA_BOUND;

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn logistic(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn log_cap() -> f64 {
    THETA_BOUND.ln()
}

/// Log of the diagonal entry encoded by `t`, and its derivative.
fn capped_log(t: f64) -> (f64, f64) {
    let b = log_cap();
    (b - softplus(b - t), logistic(b - t))
}

/// Packs a lower-triangular factor with positive diagonal.
pub fn pack(l: &DMatrix<f64>) -> Vec<f64> {
    let m = l.nrows();
    let b = log_cap();
    let mut p = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in 0..=i {
            p.push(if i == j {
                let c = l[(i, i)].ln().min(b - 1e-9);
                b - (b - c).exp_m1().ln()
            } else {
                l[(i, j)]
            });
        }
    }
    p
}

pub fn unpack(p: &[f64], m: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(m, m);
    let mut it = p.iter();
    for i in 0..m {
        for j in 0..=i {
            let v = *it.next().expect("parameter vector too short");
            l[(i, j)] = if i == j { capped_log(v).0.exp() } else { v };
        }
    }
    l
}

/// `−(2/m) Σ log L_jj + ρ · max(0, (1 − α_s) − c_ε(L))²`, where `c_ε` is the
/// mean smooth indicator of `q_i = ‖Lᵀ u_i‖²` over the rows `u_i` of
/// `features`. Dividing `log det` by the basis size keeps the balance between
/// the two terms independent of `m`; the penalty alone is bounded, so without
/// it small penalties could not hold the set open for larger bases.
pub struct PenalizedObjective<'a> {
    features: &'a DMatrix<f64>,
    target: f64,
    epsilon: f64,
    penalty: f64,
}

impl<'a> PenalizedObjective<'a> {
    pub fn new(features: &'a DMatrix<f64>, alpha_s: f64, epsilon: f64, penalty: f64) -> Self {
        Self {
            features,
            target: 1.0 - alpha_s,
            epsilon,
            penalty,
        }
    }

    pub fn dim(&self) -> usize {
        let m = self.features.ncols();
        m * (m + 1) / 2
    }

    fn q_values(&self, l: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let v = self.features * l;
        let q = v.row_iter().map(|r| r.norm_squared()).collect();
        (v, q)
    }

    pub fn smooth_coverage(&self, p: &[f64]) -> f64 {
        let l = unpack(p, self.features.ncols());
        let (_, q) = self.q_values(&l);
        q.iter()
            .map(|&qi| smooth_indicator_with_slope(qi, self.epsilon).0)
            .sum::<f64>()
            / q.len() as f64
    }

    pub fn value(&self, p: &[f64]) -> f64 {
        self.value_and_gradient(p).0
    }

    pub fn value_and_gradient(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let m = self.features.ncols();
        let n = self.features.nrows() as f64;
        let l = unpack(p, m);
        let (v, q) = self.q_values(&l);

        let mut coverage = 0.0;
        let mut slopes = Vec::with_capacity(q.len());
        for &qi in &q {
            let (s, ds) = smooth_indicator_with_slope(qi, self.epsilon);
            coverage += s;
            slopes.push(ds);
        }
        coverage /= n;
        let gap = (self.target - coverage).max(0.0);

        let mut value = self.penalty * gap * gap;
        let mut log_slopes = Vec::with_capacity(m);
        let mut idx = 0;
        for i in 0..m {
            idx += i;
            let (c, dc) = capped_log(p[idx]);
            value -= 2.0 * c / m as f64;
            log_slopes.push(dc);
            idx += 1;
        }

        // d value / d L = 2 Uᵀ diag(w) U L with w_i = −2ρ·gap·slope_i / N.
        let mut grad_l = DMatrix::zeros(m, m);
        if gap > 0.0 {
            let mut weighted = v;
            for (i, mut row) in weighted.row_iter_mut().enumerate() {
                row *= -4.0 * self.penalty * gap * slopes[i] / n;
            }
            grad_l = self.features.transpose() * weighted;
        }

        let mut grad = Vec::with_capacity(p.len());
        for i in 0..m {
            for j in 0..=i {
                grad.push(if i == j {
                    (grad_l[(i, i)] * l[(i, i)] - 2.0 / m as f64) * log_slopes[i]
                } else {
                    grad_l[(i, j)]
                });
            }
        }
        (value, grad)
    }
}

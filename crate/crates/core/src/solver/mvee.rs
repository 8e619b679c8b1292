//! Minimum-volume centred ellipsoid through its D-optimal design dual,
//! solved by Frank–Wolfe with away steps.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Design {
    pub weights: Vec<f64>,
    /// `max_i g_i / r − 1` at exit, where `g_i = u_iᵀ X⁻¹ u_i`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn inverse_moment(u: &DMatrix<f64>, w: &[f64]) -> Option<DMatrix<f64>> {
    let r = u.ncols();
    let mut x = DMatrix::zeros(r, r);
    for (i, row) in u.row_iter().enumerate() {
        if w[i] > 0.0 {
            x += row.transpose() * row * w[i];
        }
    }
    x.try_inverse()
}

fn leverages(u: &DMatrix<f64>, xinv: &DMatrix<f64>) -> Vec<f64> {
    let a = u * xinv;
    a.row_iter()
        .zip(u.row_iter())
        .map(|(p, q)| p.dot(&q))
        .collect()
}

/// Weights `π` on the rows of `u` (full column rank) maximizing
/// `log det Σ π_i u_i u_iᵀ`; stops when every leverage is within `tol` of
/// the optimum.
pub(crate) fn d_optimal_design(u: &DMatrix<f64>, tol: f64, max_iters: usize) -> Design {
    let (n, r) = u.shape();
    let rf = r as f64;
    let mut w = vec![1.0 / n as f64; n];
    let mut xinv = inverse_moment(u, &w).expect("rows must span the space");
    let mut g = leverages(u, &xinv);
    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    while iterations < max_iters {
        if iterations % 200 == 199 {
            if let Some(fresh) = inverse_moment(u, &w) {
                xinv = fresh;
                g = leverages(u, &xinv);
            }
        }
        let (jp, gp) =
            g.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |b, (i, &v)| if v > b.1 { (i, v) } else { b },
            );
        let (jm, gm) = g.iter().enumerate().filter(|(i, _)| w[*i] > 0.0).fold(
            (0, f64::INFINITY),
            |b, (i, &v)| if v < b.1 { (i, v) } else { b },
        );
        let up = gp / rf - 1.0;
        let down = 1.0 - gm / rf;
        gap = up;
        if up.max(down) <= tol {
            return Design {
                weights: w,
                gap,
                iterations,
                converged: true,
            };
        }
        iterations += 1;

        // X ← a X + b u_j u_jᵀ
        let (j, a, b) = if up >= down {
            let lam = (gp - rf) / (rf * (gp - 1.0));
            w.iter_mut().for_each(|v| *v *= 1.0 - lam);
            w[jp] += lam;
            (jp, 1.0 - lam, lam)
        } else {
            let cap = w[jm] / (1.0 - w[jm]);
            let lam = if gm > 1.0 {
                ((rf - gm) / (rf * (gm - 1.0))).min(cap)
            } else {
                cap
            };
            w.iter_mut().for_each(|v| *v *= 1.0 + lam);
            w[jm] -= lam;
            if lam == cap || w[jm] < 1e-300 {
                w[jm] = 0.0;
            }
            (jm, 1.0 + lam, -lam)
        };
        let uj: DVector<f64> = u.row(j).transpose();
        let xu = &xinv * &uj;
        let c = b / a;
        let denom = 1.0 + c * g[j];
        let cross: Vec<f64> = u.row_iter().map(|row| row.dot(&xu.transpose())).collect();
        xinv = (&xinv - &xu * xu.transpose() * (c / denom)) / a;
        for (gi, ai) in g.iter_mut().zip(&cross) {
            *gi = (*gi - c * ai * ai / denom) / a;
        }
    }
    Design {
        weights: w,
        gap,
        iterations,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_corners_get_equal_weight() {
        // Lifted corners (1, ±1, ±1): the optimal design is uniform.
        let u = DMatrix::from_row_slice(
            5,
            3,
            &[
                1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 0.0, 0.0,
            ],
        );
        let d = d_optimal_design(&u, 1e-9, 100_000);
        assert!(d.converged);
        for i in 0..4 {
            assert!((d.weights[i] - 0.25).abs() < 1e-6, "{:?}", d.weights);
        }
        assert!(d.weights[4] < 1e-6);
    }
}

use std::f64::consts::PI;

use probreach::cde::{
    compute_h_matrix, cross_validate, fit, fit_with_cv, CdeConfig, CdeModel, CvScore,
    GaussianBasis, Standardizer,
};
use probreach::dynamics::{
    engine_marginal, generate_dataset, Dataset, EngineConditional, GroundTruthConditional,
};
use probreach::par::Execution;
use probreach::rng::stream;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Known conditional: w | x ~ N(0.8 sin(2x), 0.3²), x ~ U(-2, 2).
fn truth_density(w: f64, x: f64) -> f64 {
    let sd = 0.3;
    let m = 0.8 * (2.0 * x).sin();
    (-(w - m).powi(2) / (2.0 * sd * sd)).exp() / (2.0 * PI * sd * sd).sqrt()
}

fn synthetic(n: usize, seed: u64) -> Dataset {
    let mut rng = stream(seed, &[]);
    let (mut x, mut w) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let xi: f64 = rng.random_range(-2.0..2.0);
        x.push(vec![xi]);
        w.push(vec![
            0.8 * (2.0 * xi).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal),
        ]);
    }
    Dataset::new(x, w).unwrap()
}

/// Mean over a 50×50 (x, w) grid of the squared density error.
fn ise<F: Fn(f64, f64) -> f64>(estimate: F) -> f64 {
    let (nx, nw) = (50, 50);
    let dx = 4.0 / nx as f64;
    let dw = 4.0 / nw as f64;
    let mut acc = 0.0;
    for i in 0..nx {
        let x = -2.0 + (i as f64 + 0.5) * dx;
        for j in 0..nw {
            let w = -2.0 + (j as f64 + 0.5) * dw;
            acc += (estimate(w, x) - truth_density(w, x)).powi(2) * dw;
        }
    }
    acc / nx as f64
}

#[test]
fn h_matrix_matches_quadrature() {
    let mut rng = stream(100, &[]);
    for case in 0..10 {
        let b = 2 + case % 4;
        let n_data = 7;
        let sigma_w = rng.random_range(0.3..1.2);
        let cx: Vec<Vec<f64>> = (0..b).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let cw: Vec<Vec<f64>> = (0..b)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let basis = GaussianBasis::new(
            cx.clone(),
            cw.clone(),
            0.7,
            sigma_w,
            Standardizer::identity(1),
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..n_data)
            .map(|_| vec![rng.random_range(-1.5..1.5)])
            .collect();
        let ws: Vec<Vec<f64>> = (0..n_data).map(|_| vec![0.0, 0.0]).collect();
        let data = Dataset::new(xs.clone(), ws).unwrap();
        let h = compute_h_matrix(&basis, &data).unwrap();

        let kx = |x: &[f64], c: &[f64]| (-(x[0] - c[0]).powi(2) / (2.0 * 0.49)).exp();
        let kw = |w: [f64; 2], c: &[f64]| {
            (-((w[0] - c[0]).powi(2) + (w[1] - c[1]).powi(2)) / (2.0 * sigma_w * sigma_w)).exp()
        };
        for l in 0..b {
            for m in 0..b {
                // Trapezoid rule over a ±8σ_w box around the two centres.
                let lo: Vec<f64> = (0..2)
                    .map(|d| cw[l][d].min(cw[m][d]) - 8.0 * sigma_w)
                    .collect();
                let hi: Vec<f64> = (0..2)
                    .map(|d| cw[l][d].max(cw[m][d]) + 8.0 * sigma_w)
                    .collect();
                let steps = 240;
                let hx = (hi[0] - lo[0]) / steps as f64;
                let hy = (hi[1] - lo[1]) / steps as f64;
                let mut integral = 0.0;
                for i in 0..=steps {
                    let wi = if i == 0 || i == steps { 0.5 } else { 1.0 };
                    for j in 0..=steps {
                        let wj = if j == 0 || j == steps { 0.5 } else { 1.0 };
                        let w = [lo[0] + i as f64 * hx, lo[1] + j as f64 * hy];
                        integral += wi * wj * kw(w, &cw[l]) * kw(w, &cw[m]);
                    }
                }
                integral *= hx * hy;
                let state: f64 = xs
                    .iter()
                    .map(|x| kx(x, &cx[l]) * kx(x, &cx[m]))
                    .sum::<f64>()
                    / n_data as f64;
                let oracle = state * integral;
                assert!(
                    (h[(l, m)] - oracle).abs() < 1e-6,
                    "case {case} ({l},{m}): {} vs {oracle}",
                    h[(l, m)]
                );
            }
        }
    }
}

#[test]
fn cv_choice_beats_worst_grid_point() {
    let data = synthetic(600, 1);
    let cfg = CdeConfig {
        max_centers: 100,
        folds: 5,
        sigma_x_grid: vec![0.05, 0.3, 2.0],
        sigma_w_grid: vec![0.05, 0.2, 1.0],
        lambda_grid: vec![1e-3, 1e-1],
        ..CdeConfig::default()
    };
    let sel = cross_validate(&data, &cfg, &mut stream(2, &[]), Execution::Parallel).unwrap();
    let fit_at = |sx: f64, sw: f64, lam: f64| {
        let basis = GaussianBasis::from_dataset(&data, 100, sx, sw, &mut stream(3, &[])).unwrap();
        fit(basis, &data, lam).unwrap()
    };
    let err = |m: &CdeModel| ise(|w, x| m.conditional_density(&[w], &[x]));
    let chosen = err(&fit_at(sel.sigma_x, sel.sigma_w, sel.lambda));
    let mut worst: f64 = 0.0;
    for &sx in &cfg.sigma_x_grid {
        for &sw in &cfg.sigma_w_grid {
            for &lam in &cfg.lambda_grid {
                worst = worst.max(err(&fit_at(sx, sw, lam)));
            }
        }
    }
    assert!(chosen < worst, "chosen {chosen} worst {worst}");
}

#[test]
fn ise_decreases_with_sample_size() {
    let sizes = [250usize, 1000, 4000];
    let errors: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let data = synthetic(n, 40 + n as u64);
            let lam = 0.5 * (n as f64).powf(-0.45);
            let basis =
                GaussianBasis::from_dataset(&data, 100, 0.25, 0.2, &mut stream(5, &[n as u64]))
                    .unwrap();
            let model = fit(basis, &data, lam).unwrap();
            ise(|w, x| model.ratio(&[x], &[w]))
        })
        .collect();
    let inversions = errors.windows(2).filter(|p| p[1] > p[0]).count();
    assert!(inversions <= 1, "{errors:?}");
    assert!(errors[2] < errors[0], "{errors:?}");
}

#[test]
fn every_fitted_model_normalizes() {
    let data = synthetic(300, 6);
    for (sx, sw, lam) in [(0.1, 0.05, 1e-4), (0.5, 0.3, 1e-2), (2.0, 1.0, 1.0)] {
        let basis = GaussianBasis::from_dataset(&data, 100, sx, sw, &mut stream(7, &[])).unwrap();
        let model = fit(basis, &data, lam).unwrap();
        for x in [-1.9, -0.3, 0.0, 1.2] {
            let (lo, hi) = (-1.0 - 8.0 * sw, 1.0 + 8.0 * sw);
            let steps = 20_000;
            let h = (hi - lo) / steps as f64;
            let total: f64 = (0..=steps)
                .map(|i| {
                    let p = model.conditional_density(&[lo + i as f64 * h], &[x]);
                    assert!(p >= 0.0);
                    if i == 0 || i == steps {
                        0.5 * p
                    } else {
                        p
                    }
                })
                .sum::<f64>()
                * h;
            assert!((total - 1.0).abs() < 1e-6, "{sx} {sw} {lam} {x}: {total}");
        }
    }
}

#[test]
fn histogram_matches_density() {
    let data = synthetic(400, 8);
    let basis = GaussianBasis::from_dataset(&data, 100, 0.3, 0.2, &mut stream(9, &[])).unwrap();
    let model = fit(basis, &data, 1e-2).unwrap();
    let x = [0.6];
    let draws = model.sample_conditional(&x, 1_000_000, &mut stream(10, &[]));
    let (lo, hi, bins) = (-2.5, 2.5, 100);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for d in &draws {
        let b = ((d[0] - lo) / width).floor();
        if (0.0..bins as f64).contains(&b) {
            counts[b as usize] += 1;
        }
    }
    let mut tv = 0.0;
    for (b, &c) in counts.iter().enumerate() {
        let a = lo + b as f64 * width;
        // Simpson mass of the bin under the density.
        let mass = width / 6.0
            * (model.conditional_density(&[a], &x)
                + 4.0 * model.conditional_density(&[a + width / 2.0], &x)
                + model.conditional_density(&[a + width], &x));
        tv += (c as f64 / draws.len() as f64 - mass).abs();
    }
    assert!(0.5 * tv < 0.05, "total variation {}", 0.5 * tv);
}

/// Worst relative error of the CV-selected engine model over ten probes
/// within 0.3 standard deviations of the conditional mode at the mean state.
fn engine_probe_error(seed: u64) -> f64 {
    let data = generate_dataset(
        &EngineConditional,
        &engine_marginal(),
        1000,
        &mut stream(seed, &[]),
    )
    .unwrap();
    let cfg = CdeConfig {
        score: CvScore::DensityLoss,
        ..CdeConfig::default()
    };
    let (model, _) =
        fit_with_cv(&data, &cfg, &mut stream(seed, &[1]), Execution::Parallel).unwrap();
    let n = data.len() as f64;
    let x: Vec<f64> = (0..2)
        .map(|j| data.states().iter().map(|s| s[j]).sum::<f64>() / n)
        .collect();
    let mean = EngineConditional::means(&x);
    let sd = EngineConditional::variances(&x).map(f64::sqrt);
    let offsets = [
        (0.0, 0.0),
        (0.3, 0.0),
        (-0.3, 0.0),
        (0.0, 0.3),
        (0.0, -0.3),
        (0.3, 0.3),
        (-0.3, -0.3),
        (0.3, -0.3),
        (-0.3, 0.3),
        (0.15, -0.15),
    ];
    offsets
        .iter()
        .map(|&(a, b)| {
            let w = [mean[0] + a * sd[0], mean[1] + b * sd[1]];
            let truth = EngineConditional.density(&w, &x);
            (model.conditional_density(&w, &x) - truth).abs() / truth
        })
        .fold(0.0, f64::max)
}

#[test]
fn engine_density_within_quarter_at_mean_state() {
    let worst = engine_probe_error(11);
    assert!(worst <= 0.25, "worst relative error {worst}");
}

// Ranking by the raw ratio loss favours wide bandwidths whose clipped mixture
// flattens the mode.
#[test]
fn ratio_loss_selection_is_coarser() {
    let data = generate_dataset(
        &EngineConditional,
        &engine_marginal(),
        1000,
        &mut stream(11, &[]),
    )
    .unwrap();
    let cfg = CdeConfig {
        score: CvScore::DensityLoss,
        ..CdeConfig::default()
    };
    let sel = cross_validate(
        &data,
        &CdeConfig::default(),
        &mut stream(11, &[1]),
        Execution::Parallel,
    )
    .unwrap();
    let dens = cross_validate(&data, &cfg, &mut stream(11, &[1]), Execution::Parallel).unwrap();
    assert!(sel.sigma_w > dens.sigma_w, "{sel:?} vs {dens:?}");
}

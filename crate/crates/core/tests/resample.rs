use nalgebra::{DMatrix, DVector, Matrix2};
use probreach::cde::{fit_with_cv, CdeConfig, CdeModel, CvScore, GaussianBasis, Standardizer};
use probreach::dynamics::{
    generate_dataset, DiscreteStates, Example1Conditional, Example1Linear, SystemModel, EXAMPLE1_A,
    EXAMPLE1_COV_T1, EXAMPLE1_X0_T1,
};
use probreach::par::Execution;
use probreach::resample::{
    generate_raw_paths, generate_scenarios, RawPathRule, RawSamples, ScenarioSet, TrueConditional,
};
use probreach::rng::stream;
use probreach::Error;

fn pushed_cov() -> Matrix2<f64> {
    let a = Matrix2::from_fn(|i, j| EXAMPLE1_A[i][j]);
    let s = Matrix2::from_fn(|i, j| EXAMPLE1_COV_T1[i][j]);
    a * s * a.transpose()
}

fn cloud_moments(set: &ScenarioSet) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mean = DVector::zeros(2);
    for s in &set.scenarios {
        mean += DVector::from_row_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(2, 2);
    for s in &set.scenarios {
        let d = DVector::from_row_slice(s) - &mean;
        cov += &d * d.transpose();
    }
    (mean, cov / (n - 1.0))
}

fn rel_frobenius(est: &DMatrix<f64>, truth: &Matrix2<f64>) -> f64 {
    let t = DMatrix::from_fn(2, 2, |i, j| truth[(i, j)]);
    (est - &t).norm() / t.norm()
}

#[test]
fn degenerate_sampler_gives_identical_scenarios() {
    let basis = GaussianBasis::new(
        vec![vec![0.0, 0.0]],
        vec![vec![0.3, -0.2]],
        1.0,
        1e-6,
        Standardizer::identity(2),
    )
    .unwrap();
    let cde = CdeModel::from_parts(basis, DVector::from_vec(vec![1.0]), 0.0);
    let x0 = [3.0, 1.0];
    let sets = generate_scenarios(
        &Example1Linear,
        &cde,
        &x0,
        1,
        200,
        &mut stream(1, &[]),
        Execution::Parallel,
    )
    .unwrap();
    let target = Example1Linear.step(0, &x0, &[0.3, -0.2]).unwrap();
    for s in &sets[0].scenarios {
        assert!((s[0] - target[0]).abs() < 1e-4 && (s[1] - target[1]).abs() < 1e-4);
    }
}

/// Kernel smoothing adds about σ_w² to the cloud's variance, so a single
/// unlucky bandwidth choice can exceed the tolerance; require most seeds to
/// pass. Uses the density-loss selection, which keeps σ_w small.
#[test]
fn fitted_cloud_matches_linear_pushforward() {
    let errors: Vec<f64> = (0..10u64)
        .map(|seed| {
            let data = generate_dataset(
                &Example1Conditional,
                &DiscreteStates(vec![EXAMPLE1_X0_T1.to_vec()]),
                1000,
                &mut stream(seed, &[]),
            )
            .unwrap();
            let (cde, _) = fit_with_cv(
                &data,
                &CdeConfig {
                    score: CvScore::DensityLoss,
                    ..CdeConfig::default()
                },
                &mut stream(seed, &[1]),
                Execution::Parallel,
            )
            .unwrap();
            let sets = generate_scenarios(
                &Example1Linear,
                &cde,
                &EXAMPLE1_X0_T1,
                1,
                500,
                &mut stream(seed, &[2]),
                Execution::Parallel,
            )
            .unwrap();
            rel_frobenius(&cloud_moments(&sets[0]).1, &pushed_cov())
        })
        .collect();
    let within = errors.iter().filter(|&&e| e < 0.2).count();
    assert!(within >= 8, "{errors:?}");
}

#[test]
fn oracle_cloud_matches_linear_pushforward() {
    let sets = generate_scenarios(
        &Example1Linear,
        &TrueConditional(&Example1Conditional),
        &EXAMPLE1_X0_T1,
        1,
        20_000,
        &mut stream(5, &[]),
        Execution::Parallel,
    )
    .unwrap();
    let (mean, cov) = cloud_moments(&sets[0]);
    let expect = Example1Linear.advance(0, &EXAMPLE1_X0_T1, &[0.0, 0.0]);
    // Standard errors at 2·10⁴ draws are below 0.005 for every entry.
    for i in 0..2 {
        assert!((mean[i] - expect[i]).abs() < 0.02, "{mean}");
    }
    let truth = pushed_cov();
    for i in 0..2 {
        for j in 0..2 {
            assert!((cov[(i, j)] - truth[(i, j)]).abs() < 0.02, "{cov}");
        }
    }
}

#[test]
fn seeded_runs_repeat_and_schedules_agree() {
    let src = TrueConditional(&Example1Conditional);
    let run = |exec| {
        generate_scenarios(
            &Example1Linear,
            &src,
            &[2.5, 1.0],
            6,
            300,
            &mut stream(6, &[]),
            exec,
        )
        .unwrap()
    };
    let a = run(Execution::Parallel);
    assert_eq!(a, run(Execution::Parallel));
    assert_eq!(a, run(Execution::Sequential));
    assert_eq!(a.len(), 6);
    assert!(a
        .iter()
        .enumerate()
        .all(|(k, s)| s.k == k + 1 && s.len() == 300));
}

#[test]
fn smaller_runs_are_prefixes() {
    let src = TrueConditional(&Example1Conditional);
    let big = generate_scenarios(
        &Example1Linear,
        &src,
        &[3.0, 1.0],
        3,
        400,
        &mut stream(7, &[]),
        Execution::Parallel,
    )
    .unwrap();
    let small = generate_scenarios(
        &Example1Linear,
        &src,
        &[3.0, 1.0],
        3,
        50,
        &mut stream(7, &[]),
        Execution::Parallel,
    )
    .unwrap();
    for (b, s) in big.iter().zip(&small) {
        assert_eq!(&b.prefix(50), s);
    }
}

/// Leaves its domain whenever the disturbance exceeds a threshold.
struct Fragile {
    threshold: f64,
}

impl SystemModel for Fragile {
    fn name(&self) -> &str {
        "fragile"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn dist_dim(&self) -> usize {
        1
    }
    fn advance(&self, _k: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
        vec![if w[0] > self.threshold {
            f64::NAN
        } else {
            x[0] + w[0]
        }]
    }
}

#[test]
fn failed_particles_retry_once_then_abort() {
    let pool = RawSamples::new((0..100).map(|i| vec![i as f64 / 100.0]).collect()).unwrap();
    // Each step fails with probability 1%, so a few particles need a retry.
    let ok = Fragile { threshold: 0.985 };
    let sets = generate_raw_paths(
        &ok,
        &pool,
        RawPathRule::PerStepResample,
        &[0.0],
        3,
        200,
        &mut stream(8, &[]),
        Execution::Parallel,
    )
    .unwrap();
    assert!(sets
        .iter()
        .all(|s| s.len() == 200 && s.scenarios.iter().all(|x| x[0].is_finite())));

    let broken = Fragile { threshold: -1.0 };
    let err = generate_raw_paths(
        &broken,
        &pool,
        RawPathRule::PerStepResample,
        &[0.0],
        2,
        5,
        &mut stream(9, &[]),
        Execution::Parallel,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

#[test]
fn fixed_rule_reuses_one_disturbance() {
    let pool = RawSamples::new(vec![vec![0.5], vec![-1.0], vec![2.0]]).unwrap();
    let model = Fragile { threshold: 10.0 };
    let sets = generate_raw_paths(
        &model,
        &pool,
        RawPathRule::FixedPerPath,
        &[0.0],
        4,
        50,
        &mut stream(10, &[]),
        Execution::Sequential,
    )
    .unwrap();
    for i in 0..50 {
        let step = sets[0].scenarios[i][0];
        for (k, set) in sets.iter().enumerate() {
            assert!((set.scenarios[i][0] - step * (k + 1) as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_requests() {
    let src = TrueConditional(&Example1Conditional);
    let mut rng = stream(11, &[]);
    let seq = Execution::Sequential;
    assert!(generate_scenarios(&Example1Linear, &src, &[1.0], 1, 10, &mut rng, seq).is_err());
    assert!(generate_scenarios(&Example1Linear, &src, &[1.0, 1.0], 0, 10, &mut rng, seq).is_err());
    assert!(generate_scenarios(&Example1Linear, &src, &[1.0, 1.0], 1, 0, &mut rng, seq).is_err());
}

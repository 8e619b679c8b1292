//! Ground-truth evaluation of computed sets: Monte-Carlo coverage, the
//! repeated-trial study comparing the three methods, the two-state linear
//! example's four cases, and the feasibility bound for resampled constraints.

use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cde::{fit_with_cv, CdeConfig};
use crate::dynamics::{
    generate_dataset, BuiltinModel, Example1Conditional, Example1Linear, GroundTruthConditional,
    SystemModel, EXAMPLE1_COV_T1, EXAMPLE1_COV_T2, EXAMPLE1_X0_T1, EXAMPLE1_X0_T2,
};
use crate::error::{check_dim, Error, Result};
use crate::par::{map_indexed, try_map_indexed, Execution};
use crate::polyset::{MonomialBasis, SublevelSetParams};
use crate::resample::{
    generate_raw_paths, generate_scenarios, RawPathRule, RawSamples, ScenarioSet,
};
use crate::rng::{derive_seed, fork, stream, Rng};
use crate::solver::{solve_reachset, solve_scenario_baseline, SolveResult, SolverConfig};

/// States at each requested step of `m_eval` true trajectories from `x0`.
/// A trajectory that leaves the model domain is recorded as NaN from then on,
/// which every set treats as outside.
pub fn simulate_truth(
    gt: &dyn GroundTruthConditional,
    model: &dyn SystemModel,
    x0: &[f64],
    steps: &[usize],
    m_eval: usize,
    rng: &mut Rng,
    exec: Execution,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if m_eval == 0 {
        return Err(Error::invalid("m_eval must be at least 1"));
    }
    if steps.contains(&0) {
        return Err(Error::invalid("steps must be at least 1"));
    }
    check_dim("x0", x0.len(), model.state_dim())?;
    let k_max = steps.iter().copied().max().unwrap_or(0);
    let seed = fork(rng);
    let paths = map_indexed(m_eval, exec, |i| {
        let mut rng = stream(seed, &[i as u64]);
        let mut x = x0.to_vec();
        let mut out = Vec::with_capacity(steps.len());
        for k in 0..k_max {
            if x[0].is_finite() {
                x = gt
                    .sample(&x, &mut rng)
                    .and_then(|w| model.step(k, &x, &w))
                    .unwrap_or_else(|_| vec![f64::NAN; x.len()]);
            }
            if steps.contains(&(k + 1)) {
                out.push(x.clone());
            }
        }
        out
    });
    let mut order: Vec<usize> = steps.to_vec();
    order.sort_unstable();
    order.dedup();
    Ok(steps
        .iter()
        .map(|k| {
            let slot = order.binary_search(k).unwrap();
            paths.iter().map(|p| p[slot].clone()).collect()
        })
        .collect())
}

/// Fraction of `states` inside the set; non-finite states count as outside.
pub fn coverage_of(params: &SublevelSetParams, states: &[Vec<f64>]) -> Result<f64> {
    let mut inside = 0usize;
    for x in states {
        if x.iter().all(|v| v.is_finite()) && params.membership(x)? {
            inside += 1;
        }
    }
    Ok(inside as f64 / states.len() as f64)
}

/// Monte-Carlo estimate of the probability that the true state at step `k`
/// lies in the set.
#[allow(clippy::too_many_arguments)]
pub fn estimate_coverage(
    gt: &dyn GroundTruthConditional,
    model: &dyn SystemModel,
    x0: &[f64],
    params: &SublevelSetParams,
    k: usize,
    m_eval: usize,
    rng: &mut Rng,
    exec: Execution,
) -> Result<f64> {
    let states = simulate_truth(gt, model, x0, &[k], m_eval, rng, exec)?;
    coverage_of(params, &states[0])
}

/// `exp(−2 N_r M̄²)`: the probability bound on accepting a parameter whose
/// true coverage falls short by `margin`.
pub fn hoeffding_bound(n_r: usize, margin: f64) -> Result<f64> {
    if n_r == 0 {
        return Err(Error::invalid("N_r must be at least 1"));
    }
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::invalid(format!(
            "margin must be positive, got {margin}"
        )));
    }
    Ok((-2.0 * n_r as f64 * margin * margin).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full containment of context-free scenarios.
    Scenario,
    /// Smooth chance constraint on context-free scenarios.
    Sca,
    /// Smooth chance constraint on scenarios resampled from the estimated
    /// conditional density.
    Proposed,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Scenario, Method::Sca, Method::Proposed];

    pub fn label(self) -> &'static str {
        match self {
            Method::Scenario => "Scenario",
            Method::Sca => "SCA",
            Method::Proposed => "Proposed",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "scenario" => Ok(Method::Scenario),
            "sca" => Ok(Method::Sca),
            "proposed" => Ok(Method::Proposed),
            other => Err(Error::invalid(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub model: BuiltinModel,
    pub methods: Vec<Method>,
    pub trials: usize,
    /// Dataset size for the density estimate.
    pub n_data: usize,
    /// Scenario counts; smaller counts reuse prefixes of the largest run.
    pub n_r: Vec<usize>,
    pub degree: usize,
    pub alpha: f64,
    pub alpha_s: f64,
    pub steps: Vec<usize>,
    /// True trajectories per trial for the coverage estimate.
    pub m_eval: usize,
    pub seed: u64,
    pub raw_path_rule: RawPathRule,
    pub cde: CdeConfig,
    pub solver: SolverConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            model: BuiltinModel::EnginePowertrain,
            methods: Method::ALL.to_vec(),
            trials: 100,
            n_data: 1000,
            n_r: vec![500],
            degree: 2,
            alpha: 0.2,
            alpha_s: 0.185,
            steps: vec![11, 15],
            m_eval: 10_000,
            seed: 0,
            raw_path_rule: RawPathRule::default(),
            cde: CdeConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_s && self.alpha_s < self.alpha && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 <= alpha_s < alpha < 1, got alpha_s = {}, alpha = {}",
                self.alpha_s, self.alpha
            )));
        }
        if self.degree == 0 {
            return Err(Error::invalid("degree must be at least 1"));
        }
        let counts = [self.trials, self.n_data, self.m_eval];
        if counts.contains(&0) || self.n_r.is_empty() || self.n_r.contains(&0) {
            return Err(Error::invalid("all counts must be positive"));
        }
        if self.steps.is_empty() || self.steps.contains(&0) {
            return Err(Error::invalid(
                "steps must be a nonempty list of positive integers",
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one method is required"));
        }
        Ok(())
    }

    fn solver_config(&self, method: Method) -> SolverConfig {
        SolverConfig {
            alpha_s: if method == Method::Scenario {
                0.0
            } else {
                self.alpha_s
            },
            ..self.solver.clone()
        }
    }
}

/// Outcome of one method on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    /// `log det M⁻¹`, when a set was produced.
    pub objective: Option<f64>,
    /// Estimated true coverage, when a set was produced.
    pub coverage: Option<f64>,
    pub scenario_coverage: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Records that enter the aggregate statistics.
    pub fn counts(&self) -> bool {
        self.converged && self.error.is_none() && self.coverage.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub method: Method,
    pub k: usize,
    pub n_r: usize,
    pub alpha: f64,
    /// Trials entering the statistics.
    pub trials: usize,
    pub failures: usize,
    pub mean_objective: f64,
    pub violation_probability: f64,
    pub expected_risk: f64,
    pub per_trial: Vec<TrialRecord>,
}

impl ValidationReport {
    /// Aggregates records; failed trials are kept but excluded from means.
    pub fn from_records(
        method: Method,
        k: usize,
        n_r: usize,
        alpha: f64,
        per_trial: Vec<TrialRecord>,
    ) -> Self {
        let used: Vec<&TrialRecord> = per_trial.iter().filter(|r| r.counts()).collect();
        let n = used.len() as f64;
        let mean = |f: &dyn Fn(&TrialRecord) -> f64| {
            if used.is_empty() {
                f64::NAN
            } else {
                used.iter().map(|r| f(r)).sum::<f64>() / n
            }
        };
        let target = 1.0 - alpha;
        Self {
            method,
            k,
            n_r,
            alpha,
            trials: used.len(),
            failures: per_trial.len() - used.len(),
            mean_objective: mean(&|r| r.objective.unwrap()),
            violation_probability: mean(&|r| f64::from(u8::from(r.coverage.unwrap() < target))),
            expected_risk: mean(&|r| 1.0 - r.coverage.unwrap()),
            per_trial,
        }
    }

    pub const CSV_HEADER: [&'static str; 9] = [
        "method",
        "k",
        "n_r",
        "trials",
        "failures",
        "mean_objective",
        "pr_vio",
        "e_alpha",
        "alpha",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.method.label().to_string(),
            self.k.to_string(),
            self.n_r.to_string(),
            self.trials.to_string(),
            self.failures.to_string(),
            format!("{:.6}", self.mean_objective),
            format!("{:.6}", self.violation_probability),
            format!("{:.6}", self.expected_risk),
            format!("{}", self.alpha),
        ]
    }
}

pub fn write_reports_csv<W: Write>(reports: &[ValidationReport], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(ValidationReport::CSV_HEADER)?;
    for r in reports {
        wtr.write_record(r.csv_row())?;
    }
    wtr.flush()?;
    Ok(())
}

/// Result slot of one (method, n_r, k) cell within a trial.
type Cell = std::result::Result<(SolveResult, f64), String>;

struct TrialOutput {
    seed: u64,
    x0: Vec<f64>,
    /// Indexed `[method][n_r][step]`.
    cells: Vec<Vec<Vec<Cell>>>,
}

fn run_trial(cfg: &StudyConfig, trial: usize, exec: Execution) -> Result<TrialOutput> {
    let seed = derive_seed(cfg.seed, &[trial as u64]);
    let model = cfg.model.system();
    let gt = cfg.model.ground_truth();
    let x0 = cfg.model.state_marginal().sample(&mut stream(seed, &[0]));
    let data = generate_dataset(
        gt.as_ref(),
        cfg.model.state_marginal().as_ref(),
        cfg.n_data,
        &mut stream(seed, &[1]),
    )?;
    let basis = MonomialBasis::new(model.state_dim(), cfg.degree)?;
    let k_max = *cfg.steps.iter().max().unwrap();
    let n_max = *cfg.n_r.iter().max().unwrap();

    // Every method is judged on the same true trajectories.
    let truth = simulate_truth(
        gt.as_ref(),
        model.as_ref(),
        &x0,
        &cfg.steps,
        cfg.m_eval,
        &mut stream(seed, &[2]),
        exec,
    )?;

    let needs_raw = cfg.methods.iter().any(|m| *m != Method::Proposed);
    let raw = if needs_raw {
        let pool = RawSamples::new(data.disturbances().to_vec())?;
        Some(
            generate_raw_paths(
                model.as_ref(),
                &pool,
                cfg.raw_path_rule,
                &x0,
                k_max,
                n_max,
                &mut stream(seed, &[3]),
                exec,
            )
            .map_err(|e| e.to_string()),
        )
    } else {
        None
    };
    let resampled = if cfg.methods.contains(&Method::Proposed) {
        Some(
            fit_with_cv(&data, &cfg.cde, &mut stream(seed, &[4]), exec)
                .and_then(|(cde, _)| {
                    generate_scenarios(
                        model.as_ref(),
                        &cde,
                        &x0,
                        k_max,
                        n_max,
                        &mut stream(seed, &[5]),
                        exec,
                    )
                })
                .map_err(|e| e.to_string()),
        )
    } else {
        None
    };

    let solve = |method: Method, sets: &[ScenarioSet], n_r: usize, slot: usize| -> Cell {
        let k = cfg.steps[slot];
        let set = sets[k - 1].prefix(n_r);
        let res = match method {
            Method::Scenario => solve_scenario_baseline(&set, &basis),
            _ => solve_reachset(&set, &basis, &cfg.solver_config(method)),
        }
        .map_err(|e| e.to_string())?;
        let cov = coverage_of(&res.params, &truth[slot]).map_err(|e| e.to_string())?;
        Ok((res, cov))
    };

    let cells = cfg
        .methods
        .iter()
        .map(|&method| {
            let sets = match method {
                Method::Proposed => resampled.as_ref().unwrap(),
                _ => raw.as_ref().unwrap(),
            };
            cfg.n_r
                .iter()
                .map(|&n_r| {
                    (0..cfg.steps.len())
                        .map(|slot| match sets {
                            Ok(sets) => solve(method, sets, n_r, slot),
                            Err(e) => Err(e.clone()),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(TrialOutput { seed, x0, cells })
}

/// Runs `trials` independent trials. Each draws a random initial state and a
/// fresh dataset, builds scenarios for every method, solves, and estimates
/// true coverage on common trajectories. Returns one report per method, N_r
/// and step, in configuration order. Aborts when more than 20% of the trials
/// of any report fail.
pub fn monte_carlo_study(cfg: &StudyConfig, exec: Execution) -> Result<Vec<ValidationReport>> {
    cfg.validate()?;
    let outputs = try_map_indexed(cfg.trials, exec, |t| run_trial(cfg, t, exec))?;
    let mut reports = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        for (ni, &n_r) in cfg.n_r.iter().enumerate() {
            for (si, &k) in cfg.steps.iter().enumerate() {
                let records = outputs
                    .iter()
                    .enumerate()
                    .map(|(t, out)| {
                        let base = TrialRecord {
                            trial: t,
                            seed: out.seed,
                            x0: out.x0.clone(),
                            objective: None,
                            coverage: None,
                            scenario_coverage: None,
                            converged: false,
                            error: None,
                        };
                        match &out.cells[mi][ni][si] {
                            Ok((res, cov)) => TrialRecord {
                                objective: Some(res.objective),
                                coverage: Some(*cov),
                                scenario_coverage: Some(res.hard_coverage),
                                converged: res.converged,
                                ..base
                            },
                            Err(e) => TrialRecord {
                                error: Some(e.clone()),
                                ..base
                            },
                        }
                    })
                    .collect();
                let report = ValidationReport::from_records(method, k, n_r, cfg.alpha, records);
                if report.failures * 5 > cfg.trials {
                    return Err(Error::StudyAborted(format!(
                        "{} at k = {k}, N_r = {n_r}: {} of {} trials failed (first: {})",
                        method.label(),
                        report.failures,
                        cfg.trials,
                        report
                            .per_trial
                            .iter()
                            .find_map(|t| t.error.as_deref())
                            .unwrap_or("not converged")
                    )));
                }
                reports.push(report);
            }
        }
    }
    Ok(reports)
}

/// Which state the two-state example is conditioned on and which disturbance
/// samples it is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Example1Case {
    /// Conditioned on the first state, half the samples from each covariance.
    MixedAtFirst = 1,
    /// Conditioned on the second state, half the samples from each covariance.
    MixedAtSecond = 2,
    /// Conditioned on the first state with its own covariance.
    MatchedAtFirst = 3,
    /// Conditioned on the second state with its own covariance.
    MatchedAtSecond = 4,
}

impl Example1Case {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::MixedAtFirst),
            2 => Ok(Self::MixedAtSecond),
            3 => Ok(Self::MatchedAtFirst),
            4 => Ok(Self::MatchedAtSecond),
            _ => Err(Error::invalid(format!("case must be 1..=4, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn x0(self) -> [f64; 2] {
        match self {
            Self::MixedAtFirst | Self::MatchedAtFirst => EXAMPLE1_X0_T1,
            Self::MixedAtSecond | Self::MatchedAtSecond => EXAMPLE1_X0_T2,
        }
    }

    /// Covariance of sample `i` out of `n`.
    fn sample_cov(self, i: usize, n: usize) -> [[f64; 2]; 2] {
        match self {
            Self::MixedAtFirst | Self::MixedAtSecond => {
                if i < n / 2 {
                    EXAMPLE1_COV_T1
                } else {
                    EXAMPLE1_COV_T2
                }
            }
            Self::MatchedAtFirst => EXAMPLE1_COV_T1,
            Self::MatchedAtSecond => EXAMPLE1_COV_T2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example1Outcome {
    pub case: u8,
    pub x0: [f64; 2],
    pub result: SolveResult,
    pub coverage: f64,
}

/// Draws the case's `n` disturbance samples, solves for the step-one set at
/// degree two, and estimates its true coverage with `m_eval` draws.
pub fn example1_study(
    case: Example1Case,
    n: usize,
    alpha_s: f64,
    m_eval: usize,
    seed: u64,
    exec: Execution,
) -> Result<Example1Outcome> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let x0 = case.x0();
    let mut rng = stream(seed, &[0]);
    let chol = |c: [[f64; 2]; 2]| Matrix2::from_fn(|i, j| c[i][j]).cholesky().unwrap().l();
    let scenarios = (0..n)
        .map(|i| {
            let l = chol(case.sample_cov(i, n));
            let z = Vector2::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let w = l * z;
            Example1Linear.step(0, &x0, &[w[0], w[1]])
        })
        .collect::<Result<Vec<_>>>()?;
    let set = ScenarioSet::new(1, scenarios)?;
    let basis = MonomialBasis::new(2, 2)?;
    let result = solve_reachset(&set, &basis, &SolverConfig::with_alpha_s(alpha_s))?;
    let coverage = estimate_coverage(
        &Example1Conditional,
        &Example1Linear,
        &x0,
        &result.params,
        1,
        m_eval,
        &mut stream(seed, &[1]),
        exec,
    )?;
    Ok(Example1Outcome {
        case: case.number(),
        x0,
        result,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hoeffding_values() {
        assert_relative_eq!(
            hoeffding_bound(1000, 0.05).unwrap(),
            0.006737946999085467,
            max_relative = 1e-12
        );
        assert!(hoeffding_bound(10, 1e-9).unwrap() > 1.0 - 1e-12);
        let b = hoeffding_bound(300, 0.04).unwrap();
        assert_relative_eq!(
            hoeffding_bound(600, 0.04).unwrap(),
            b * b,
            max_relative = 1e-12
        );
        assert!(hoeffding_bound(10, 0.0).is_err());
        assert!(hoeffding_bound(10, -0.1).is_err());
        assert!(hoeffding_bound(0, 0.1).is_err());
    }

    fn record(t: usize, cov: f64, converged: bool) -> TrialRecord {
        TrialRecord {
            trial: t,
            seed: t as u64,
            x0: vec![0.0, 0.0],
            objective: Some(t as f64),
            coverage: Some(cov),
            scenario_coverage: Some(0.815),
            converged,
            error: None,
        }
    }

    #[test]
    fn single_trial_report_is_the_record() {
        let r =
            ValidationReport::from_records(Method::Sca, 3, 50, 0.2, vec![record(4, 0.75, true)]);
        assert_eq!(r.trials, 1);
        assert_eq!(r.mean_objective, 4.0);
        assert_eq!(r.violation_probability, 1.0);
        assert_eq!(r.expected_risk, 1.0 - 0.75);
    }

    #[test]
    fn failures_are_excluded() {
        let recs = vec![
            record(0, 0.9, true),
            record(1, 0.1, false),
            record(2, 0.7, true),
        ];
        let r = ValidationReport::from_records(Method::Proposed, 1, 10, 0.2, recs);
        assert_eq!((r.trials, r.failures), (2, 1));
        assert_relative_eq!(r.expected_risk, 0.2);
        assert_eq!(r.violation_probability, 0.5);
        assert_eq!(r.mean_objective, 1.0);
    }

    #[test]
    fn config_checks() {
        assert!(StudyConfig::default().validate().is_ok());
        let bad = StudyConfig {
            alpha_s: 0.2,
            ..StudyConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = StudyConfig {
            steps: vec![0],
            ..StudyConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: StudyConfig =
            serde_json::from_str(r#"{"trials": 3, "methods": ["sca"]}"#).unwrap();
        assert_eq!(parsed.trials, 3);
        assert_eq!(parsed.methods, vec![Method::Sca]);
    }

    #[test]
    fn whole_space_and_empty_sets() {
        let basis = MonomialBasis::new(2, 2).unwrap();
        let gt = crate::dynamics::Example1Conditional;
        let mut rng = stream(1, &[]);
        let wide = SublevelSetParams::identity(basis.clone())
            .scaled(1e-6)
            .unwrap();
        let c = estimate_coverage(
            &gt,
            &Example1Linear,
            &EXAMPLE1_X0_T1,
            &wide,
            1,
            2000,
            &mut rng,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(c, 1.0);
        let tight = SublevelSetParams::identity(basis).scaled(1e5).unwrap();
        let c = estimate_coverage(
            &gt,
            &Example1Linear,
            &EXAMPLE1_X0_T1,
            &tight,
            1,
            2000,
            &mut rng,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(c, 0.0);
    }
}

//! Sample-based minimum-volume polynomial sublevel sets.
//!
//! All three methods work on the monomial features of the scenarios after a
//! whitening transform `u = T e(x)` that makes their second moment the
//! identity. Since `log det` changes only by a constant under a fixed linear
//! map, the optimum is unchanged while the problem becomes well scaled. The
//! result is mapped back with `M = Tᵀ M' T` and refactored.

mod lbfgs;
mod mvee;
pub mod objective;
mod smooth;

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use lbfgs::Termination;
pub use smooth::smooth_indicator;

use crate::dynamics::SystemModel;
use crate::error::{check_dim, Error, Result};
use crate::par::Execution;
use crate::polyset::{MonomialBasis, SublevelSetParams, THETA_BOUND};
use crate::resample::{generate_raw_paths, RawPathRule, RawSamples, ScenarioSet};
use crate::rng::Rng;
use objective::{pack, unpack, PenalizedObjective};

/// Guard factor applied when rescaling so that boundary scenarios land
/// strictly inside.
const RESCALE_GUARD: f64 = 1.0 - 1e-12;
const MVEE_TOL: f64 = 1e-7;
const MVEE_MAX_ITERS: usize = 200_000;
const LBFGS_MEMORY: usize = 10;
/// Trust radius per optimizer step, in packed-parameter units.
const MAX_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub alpha_s: f64,
    pub epsilon_schedule: Vec<f64>,
    pub penalty_schedule: Vec<f64>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub constraint_tol: f64,
    /// Recorded for provenance; the solver is deterministic.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha_s: 0.185,
            epsilon_schedule: vec![0.5, 0.1, 0.02, 0.005],
            penalty_schedule: vec![10.0, 1e2, 1e3, 1e4],
            max_iters: 2000,
            grad_tol: 1e-6,
            constraint_tol: 5e-3,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_alpha_s(alpha_s: f64) -> Self {
        Self {
            alpha_s,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha_s) {
            return Err(Error::invalid(format!(
                "alpha_s must be in [0, 1), got {}",
                self.alpha_s
            )));
        }
        let eps = &self.epsilon_schedule;
        let pen = &self.penalty_schedule;
        if eps.is_empty() || eps.len() != pen.len() {
            return Err(Error::invalid(
                "smoothing and penalty schedules must be nonempty and of equal length",
            ));
        }
        if eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) || eps.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::invalid(
                "smoothing schedule must be positive and strictly decreasing",
            ));
        }
        if pen.iter().any(|&p| !(p > 0.0 && p.is_finite())) || pen.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::invalid(
                "penalty schedule must be positive and strictly increasing",
            ));
        }
        if self.max_iters == 0 || !(self.grad_tol > 0.0) || !(self.constraint_tol >= 0.0) {
            return Err(Error::invalid(
                "max_iters, grad_tol and constraint_tol must be positive",
            ));
        }
        Ok(())
    }
}

/// Axis-aligned bounding box of the scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn of(points: &[Vec<f64>]) -> Self {
        let n = points[0].len();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for p in points {
            for j in 0..n {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        Self { lo, hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub epsilon: f64,
    pub penalty: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub grad_norm: f64,
    pub smooth_coverage: f64,
    /// Penalized objective after every accepted step, starting value first.
    pub accepted_objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub stages: Vec<StageTrace>,
    /// Rank of the scenarios' monomial second-moment matrix.
    pub feature_rank: usize,
    /// Hard coverage of the optimizer's output before the final rescale.
    pub coverage_before_rescale: f64,
    /// Factor applied to `L` by the final rescale.
    pub rescale: f64,
    /// Optimality gap of the enclosing-ellipsoid design, when used.
    pub design_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub params: SublevelSetParams,
    /// `log det M⁻¹` of the returned parameters.
    pub objective: f64,
    /// Mean smooth indicator at the last smoothing level.
    pub smooth_coverage: f64,
    pub hard_coverage: f64,
    pub iterations: usize,
    pub converged: bool,
    pub bound_hit: bool,
    pub bounds: Bounds,
    pub diagnostics: Diagnostics,
}

impl SolveResult {
    /// `stage,iteration,objective` rows for every accepted step.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["stage", "iteration", "objective"])?;
        for (s, stage) in self.diagnostics.stages.iter().enumerate() {
            for (i, v) in stage.accepted_objectives.iter().enumerate() {
                wtr.write_record([s.to_string(), i.to_string(), format!("{v:.16e}")])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

struct Whitened {
    /// `u = T e`.
    transform: DMatrix<f64>,
    /// N×m rows `u_i`; the first `rank` columns carry the data.
    features: DMatrix<f64>,
    rank: usize,
}

fn monomial_matrix(points: &[Vec<f64>], basis: &MonomialBasis) -> Result<DMatrix<f64>> {
    let m = basis.size();
    let mut z = DMatrix::zeros(points.len(), m);
    let mut e = vec![0.0; m];
    for (i, p) in points.iter().enumerate() {
        check_dim("scenario", p.len(), basis.state_dim())?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("scenario {i} is not finite")));
        }
        basis.fill_monomials(p, &mut e);
        for j in 0..m {
            z[(i, j)] = e[j];
        }
    }
    Ok(z)
}

/// Eigen-whitening of the second moment, computed on monomials of the
/// standardized state so that nearly constant coordinates do not make the
/// moment matrix numerically singular. Directions without data keep unit
/// scale and are placed last.
fn whiten(points: &[Vec<f64>], basis: &MonomialBasis, z: &DMatrix<f64>) -> Whitened {
    let (n, m) = z.shape();
    let dim = basis.state_dim();
    let count = points.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / count)
        .collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let sd = (points.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / count).sqrt();
            if sd > 1e-12 * (1.0 + mean[j].abs()) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let affine = basis.affine_map(&mean, &scale);
    let zs = z * affine.transpose();

    let moment = (zs.transpose() * &zs) / n as f64;
    let eig = moment.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(f64::MIN_POSITIVE);
    let mut inner = DMatrix::zeros(m, m);
    let mut rank = 0;
    for (row, &k) in order.iter().enumerate() {
        let lam = eig.eigenvalues[k];
        let s = if lam > 1e-10 * top {
            rank += 1;
            1.0 / lam.sqrt()
        } else {
            1.0
        };
        for c in 0..m {
            inner[(row, c)] = s * eig.eigenvectors[(c, k)];
        }
    }
    let features = zs * inner.transpose();
    Whitened {
        transform: inner * affine,
        features,
        rank,
    }
}

/// Cholesky of `Tᵀ M' T`, with growing diagonal jitter if rounding makes it
/// indefinite.
fn params_from_whitened(
    basis: &MonomialBasis,
    transform: &DMatrix<f64>,
    inner: &DMatrix<f64>,
) -> Result<SublevelSetParams> {
    let gram = transform.transpose() * inner * transform;
    let gram = (&gram + gram.transpose()) * 0.5;
    let m = gram.nrows();
    let scale = gram.trace() / m as f64;
    let mut jitter = 0.0;
    for attempt in 0..12 {
        let g = &gram + DMatrix::identity(m, m) * jitter;
        if let Some(chol) = g.cholesky() {
            if let Ok(p) = SublevelSetParams::new(basis.clone(), chol.unpack()) {
                return Ok(p);
            }
        }
        jitter = scale * 1e-15 * 10f64.powi(attempt);
    }
    Err(Error::Numeric(
        "solution matrix could not be factored".into(),
    ))
}

fn q_values(params: &SublevelSetParams, z: &DMatrix<f64>) -> Vec<f64> {
    let mut e = vec![0.0; z.ncols()];
    z.row_iter()
        .map(|row| {
            e.iter_mut().zip(row.iter()).for_each(|(a, b)| *a = *b);
            params.q_from_monomials(&e)
        })
        .collect()
}

/// Scales `L` so that at least `⌈target·N⌉` scenarios have `q ≤ 1`, then
/// enforces the parameter bound. Returns the parameters, the applied factor
/// and whether the bound was active.
///
/// For thin clouds far from the origin `q` is a small difference of large
/// monomial terms, so the rescaled values carry rounding well above machine
/// precision. The count is therefore rechecked after scaling and the guard
/// widened until it holds.
fn rescale_to_coverage(
    params: SublevelSetParams,
    z: &DMatrix<f64>,
    target: f64,
) -> Result<(SublevelSetParams, f64, bool)> {
    let n = z.nrows();
    let j = ((target * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let kth = |p: &SublevelSetParams| {
        let mut q = q_values(p, z);
        q.sort_by(f64::total_cmp);
        q[j - 1]
    };
    let t = kth(&params);
    let mut factor = if t > 0.0 {
        RESCALE_GUARD / t.sqrt()
    } else {
        1.0
    };
    let mut guard = 1.0 - RESCALE_GUARD;
    for _ in 0..6 {
        let t = kth(&params.scaled(factor)?);
        if t <= 1.0 {
            break;
        }
        guard *= 100.0;
        factor *= (1.0 - guard) / t.sqrt();
    }
    let biggest = params.factor().iter().fold(0.0f64, |a, v| a.max(v.abs())) * factor;
    let bound_hit = biggest >= THETA_BOUND;
    if bound_hit {
        factor *= RESCALE_GUARD * THETA_BOUND / biggest;
    }
    Ok((params.scaled(factor)?, factor, bound_hit))
}

fn check_scenarios(scenarios: &ScenarioSet, basis: &MonomialBasis, min_count: usize) -> Result<()> {
    check_dim("scenario", scenarios.state_dim(), basis.state_dim())?;
    if scenarios.len() < min_count {
        return Err(Error::invalid(format!(
            "{} scenarios cannot determine a basis of size {min_count}",
            scenarios.len()
        )));
    }
    Ok(())
}

fn finish(
    params: SublevelSetParams,
    z: &DMatrix<f64>,
    target: f64,
    last_epsilon: f64,
    mut diagnostics: Diagnostics,
    iterations: usize,
    optimizer_ok: bool,
    scenarios: &ScenarioSet,
    constraint_tol: f64,
) -> Result<SolveResult> {
    diagnostics.coverage_before_rescale = params.empirical_coverage(&scenarios.scenarios)?;
    let (params, factor, bound_hit) = rescale_to_coverage(params, z, target)?;
    diagnostics.rescale = factor;
    let q = q_values(&params, z);
    let hard_coverage = params.empirical_coverage(&scenarios.scenarios)?;
    let smooth_coverage = q
        .iter()
        .map(|&v| smooth_indicator(v, last_epsilon))
        .sum::<f64>()
        / q.len() as f64;
    let objective = params.log_det_inv();
    let converged = optimizer_ok
        && objective.is_finite()
        && !bound_hit
        && hard_coverage >= target - constraint_tol;
    Ok(SolveResult {
        objective,
        smooth_coverage,
        hard_coverage,
        iterations,
        converged,
        bound_hit,
        bounds: Bounds::of(&scenarios.scenarios),
        params,
        diagnostics,
    })
}

/// Minimizes `log det M⁻¹` subject to smooth scenario coverage of at least
/// `1 − α_s`, by L-BFGS on a staged quadratic penalty. The optimizer output
/// is finally rescaled so that the hard scenario coverage is at least
/// `1 − α_s`, which also closes the residual gap a finite penalty leaves.
/// `converged` requires every stage to stop before `max_iters`, the bound to
/// stay inactive and the returned set to meet the coverage level within
/// `constraint_tol`; the pre-rescale coverage is kept in the diagnostics.
pub fn solve_reachset(
    scenarios: &ScenarioSet,
    basis: &MonomialBasis,
    config: &SolverConfig,
) -> Result<SolveResult> {
    config.validate()?;
    let m = basis.size();
    check_scenarios(scenarios, basis, m)?;
    let z = monomial_matrix(&scenarios.scenarios, basis)?;
    let w = whiten(&scenarios.scenarios, basis, &z);
    let target = 1.0 - config.alpha_s;

    // Start from a scaled identity whose (1 − α_s) quantile of q is 1.
    let mut norms: Vec<f64> = w.features.row_iter().map(|r| r.norm_squared()).collect();
    norms.sort_by(f64::total_cmp);
    let j = ((target * norms.len() as f64).ceil() as usize).clamp(1, norms.len());
    let t = norms[j - 1];
    let c = if t > 0.0 { 1.0 / t.sqrt() } else { 1.0 };
    let mut p = pack(&(DMatrix::identity(m, m) * c));

    let mut diagnostics = Diagnostics {
        feature_rank: w.rank,
        ..Diagnostics::default()
    };
    let mut iterations = 0;
    let mut optimizer_ok = true;
    for (&eps, &rho) in config.epsilon_schedule.iter().zip(&config.penalty_schedule) {
        let obj = PenalizedObjective::new(&w.features, config.alpha_s, eps, rho);
        let out = lbfgs::minimize(
            |x| obj.value_and_gradient(x),
            p,
            lbfgs::Options {
                max_iters: config.max_iters,
                grad_tol: config.grad_tol,
                memory: LBFGS_MEMORY,
                max_step: MAX_STEP,
            },
        );
        iterations += out.iterations;
        optimizer_ok &= out.value.is_finite() && out.termination != Termination::MaxIterations;
        log::debug!(
            "stage eps={eps} rho={rho}: {} iterations, {:?}, objective {:.6}",
            out.iterations,
            out.termination,
            out.value
        );
        diagnostics.stages.push(StageTrace {
            epsilon: eps,
            penalty: rho,
            iterations: out.iterations,
            termination: out.termination,
            grad_norm: out.grad_norm,
            smooth_coverage: obj.smooth_coverage(&out.x),
            accepted_objectives: out.accepted,
        });
        p = out.x;
    }

    let l = unpack(&p, m);
    let params = params_from_whitened(basis, &w.transform, &(&l * l.transpose()))?;
    let last_eps = *config.epsilon_schedule.last().unwrap();
    finish(
        params,
        &z,
        target,
        last_eps,
        diagnostics,
        iterations,
        optimizer_ok,
        scenarios,
        config.constraint_tol,
    )
}

/// Smallest sublevel set containing every scenario: the minimum-volume
/// centred ellipsoid of the whitened features. Feature directions without
/// data are pinned at the parameter bound, which is reported as `bound_hit`.
pub fn solve_scenario_baseline(
    scenarios: &ScenarioSet,
    basis: &MonomialBasis,
) -> Result<SolveResult> {
    check_scenarios(scenarios, basis, 1)?;
    let m = basis.size();
    let z = monomial_matrix(&scenarios.scenarios, basis)?;
    let w = whiten(&scenarios.scenarios, basis, &z);
    let r = w.rank;
    let data = w.features.columns(0, r).into_owned();
    let design = mvee::d_optimal_design(&data, MVEE_TOL, MVEE_MAX_ITERS);

    let mut moment = DMatrix::zeros(r, r);
    for (i, row) in data.row_iter().enumerate() {
        if design.weights[i] > 0.0 {
            moment += row.transpose() * row * design.weights[i];
        }
    }
    let inv = moment
        .try_inverse()
        .ok_or_else(|| Error::Numeric("enclosing-ellipsoid design is singular".into()))?;
    let mut inner = DMatrix::identity(m, m) * (THETA_BOUND * THETA_BOUND);
    inner.view_mut((0, 0), (r, r)).copy_from(&(inv / r as f64));

    let params = params_from_whitened(basis, &w.transform, &inner)?;
    let diagnostics = Diagnostics {
        feature_rank: r,
        design_gap: Some(design.gap),
        ..Diagnostics::default()
    };
    let mut res = finish(
        params,
        &z,
        1.0,
        f64::MIN_POSITIVE,
        diagnostics,
        design.iterations,
        design.converged,
        scenarios,
        0.0,
    )?;
    res.bound_hit |= r < m;
    // Boundary scenarios sit at q = 1 up to rounding, so the coverage test in
    // `finish` does not apply; the design's own stopping rule does.
    res.converged = design.converged && r == m && !res.bound_hit && res.objective.is_finite();
    res.smooth_coverage = res.hard_coverage;
    Ok(res)
}

/// Context-free baseline: scenarios are built from pooled disturbances
/// without conditioning on the state, then passed to [`solve_reachset`].
#[allow(clippy::too_many_arguments)]
pub fn solve_sca_baseline(
    model: &dyn SystemModel,
    pool: &RawSamples,
    rule: RawPathRule,
    x0: &[f64],
    k: usize,
    n_r: usize,
    basis: &MonomialBasis,
    config: &SolverConfig,
    rng: &mut Rng,
    exec: Execution,
) -> Result<SolveResult> {
    let sets = generate_raw_paths(model, pool, rule, x0, k, n_r, rng, exec)?;
    solve_reachset(&sets[k - 1], basis, config)
}

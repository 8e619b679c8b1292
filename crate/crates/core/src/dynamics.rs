//! Discrete-time stochastic systems `x_{k+1} = f(k, x_k, w_k)` whose
//! disturbance distribution depends on the current state, together with the
//! ground-truth conditional samplers used to generate data and to validate
//! computed sets.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

/// Deterministic one-step map of a stochastic system.
pub trait SystemModel: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn dist_dim(&self) -> usize;

    /// Raw dynamics. May return non-finite values outside the model's domain;
    /// callers should go through [`SystemModel::step`].
    fn advance(&self, k: usize, x: &[f64], w: &[f64]) -> Vec<f64>;

    fn step(&self, k: usize, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_dim("state", x.len(), self.state_dim())?;
        check_dim("disturbance", w.len(), self.dist_dim())?;
        let next = self.advance(k, x, w);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{}: step {k} left the model domain at x = {x:?}, w = {w:?}",
                self.name()
            )));
        }
        Ok(next)
    }
}

/// Known conditional law of the disturbance given the state: a Gaussian with
/// state-dependent mean and covariance.
pub trait GroundTruthConditional: Send + Sync {
    fn dist_dim(&self) -> usize;
    fn mean(&self, x: &[f64]) -> Vec<f64>;
    fn cov(&self, x: &[f64]) -> DMatrix<f64>;

    /// One draw from `N(mean(x), cov(x))`.
    fn sample(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let mean = self.mean(x);
        let cov = self.cov(x);
        let chol = cov.clone().cholesky().ok_or_else(|| {
            Error::Numeric(format!(
                "conditional covariance at {x:?} is not positive definite"
            ))
        })?;
        let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = chol.l() * z;
        Ok(mean.iter().zip(w.iter()).map(|(m, d)| m + d).collect())
    }

    /// Density of the conditional law at `w`.
    fn density(&self, w: &[f64], x: &[f64]) -> f64 {
        let mean = self.mean(x);
        let cov = self.cov(x);
        let s = mean.len();
        let Some(chol) = cov.cholesky() else {
            return 0.0;
        };
        let diff = DVector::from_iterator(s, w.iter().zip(&mean).map(|(a, b)| a - b));
        let sol = chol.l().solve_lower_triangular(&diff).unwrap_or(diff);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        (-0.5 * sol.norm_squared() - 0.5 * log_det - 0.5 * s as f64 * (2.0 * PI).ln()).exp()
    }
}

/// Draws `sample_true_conditional` for an arbitrary ground truth.
pub fn sample_true_conditional(
    gt: &dyn GroundTruthConditional,
    x: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    gt.sample(x, rng)
}

/// Sampler for states that are not produced by the dynamics (initial states,
/// dataset inputs).
pub trait StateSampler: Send + Sync {
    fn state_dim(&self) -> usize;
    fn sample(&self, rng: &mut Rng) -> Vec<f64>;
}

/// Independent Gaussian coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl StateSampler for DiagonalGaussian {
    fn state_dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Uniform choice among a fixed list of states.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStates(pub Vec<Vec<f64>>);

impl StateSampler for DiscreteStates {
    fn state_dim(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.0[rng.random_range(0..self.0.len())].clone()
    }
}

// ---------------------------------------------------------------------------
// Linear two-state example with a covariance that switches with the initial
// state.

pub const EXAMPLE1_A: [[f64; 2]; 2] = [[0.99, 0.01], [0.01, 0.99]];
pub const EXAMPLE1_X0_T1: [f64; 2] = [3.0, 1.0];
pub const EXAMPLE1_X0_T2: [f64; 2] = [2.5, 1.0];
pub const EXAMPLE1_COV_T1: [[f64; 2]; 2] = [[0.425, 0.05], [0.05, 0.275]];
pub const EXAMPLE1_COV_T2: [[f64; 2]; 2] = [[0.15, -0.02], [-0.02, 0.15]];

#[derive(Debug, Clone, Copy, Default)]
pub struct Example1Linear;

impl SystemModel for Example1Linear {
    fn name(&self) -> &str {
        "example1_linear"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn dist_dim(&self) -> usize {
        2
    }
    fn advance(&self, _k: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
        let a = EXAMPLE1_A;
        vec![
            a[0][0] * x[0] + a[0][1] * x[1] + w[0],
            a[1][0] * x[0] + a[1][1] * x[1] + w[1],
        ]
    }
}

/// Zero-mean Gaussian whose covariance is the one attached to the nearer of
/// the two reference initial states (ties go to the first).
#[derive(Debug, Clone, Copy, Default)]
pub struct Example1Conditional;

impl Example1Conditional {
    fn nearer_first(x: &[f64]) -> bool {
        let d = |r: &[f64; 2]| (x[0] - r[0]).powi(2) + (x[1] - r[1]).powi(2);
        d(&EXAMPLE1_X0_T1) <= d(&EXAMPLE1_X0_T2)
    }
}

impl GroundTruthConditional for Example1Conditional {
    fn dist_dim(&self) -> usize {
        2
    }
    fn mean(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn cov(&self, x: &[f64]) -> DMatrix<f64> {
        let c = if Self::nearer_first(x) {
            EXAMPLE1_COV_T1
        } else {
            EXAMPLE1_COV_T2
        };
        DMatrix::from_fn(2, 2, |i, j| c[i][j])
    }
}

// ---------------------------------------------------------------------------
// Engine powertrain: air charging and engine speed, Euler step of 0.02 s.

pub const ENGINE_DT: f64 = 0.02;
pub const ENGINE_STATE_MEAN: [f64; 2] = [2.2473, 5.3955];
pub const ENGINE_STATE_VAR: [f64; 2] = [0.9594, 0.2306];
/// Initial state used for the single-run figures.
pub const ENGINE_FIGURE_X0: [f64; 2] = [3.3767, 5.0524];

#[derive(Debug, Clone, Copy, Default)]
pub struct EnginePowertrain;

impl SystemModel for EnginePowertrain {
    fn name(&self) -> &str {
        "engine_powertrain"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn dist_dim(&self) -> usize {
        2
    }
    fn advance(&self, k: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
        // The second component depends on the time index explicitly.
        let f1 = 5.0 * ((10.0 - x[0]).sqrt() - w[0] * x[0] * x[1]);
        let f2 = (w[1] * ENGINE_DT * k as f64).sin();
        vec![x[0] + ENGINE_DT * f1, x[1] + ENGINE_DT * f2]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EngineConditional;

impl EngineConditional {
    fn radial(x: &[f64], a: f64, b: f64) -> f64 {
        PI * (a * x[0] * x[0] + b * x[1] * x[1]).sqrt()
    }

    /// Conditional variances `(sigma_3(x), sigma_4(x))`.
    pub fn variances(x: &[f64]) -> [f64; 2] {
        [
            0.15 + 0.025 * Self::radial(x, 0.75, 0.15).cos(),
            0.3 * PI + 0.1 * PI * Self::radial(x, 0.1, 0.6).cos(),
        ]
    }

    pub fn means(x: &[f64]) -> [f64; 2] {
        [
            0.5 + 0.1 * Self::radial(x, 0.5, 0.25).sin(),
            PI + 0.25 * PI * Self::radial(x, 0.15, 0.35).sin(),
        ]
    }
}

impl GroundTruthConditional for EngineConditional {
    fn dist_dim(&self) -> usize {
        2
    }
    fn mean(&self, x: &[f64]) -> Vec<f64> {
        Self::means(x).to_vec()
    }
    fn cov(&self, x: &[f64]) -> DMatrix<f64> {
        let v = Self::variances(x);
        DMatrix::from_diagonal(&DVector::from_row_slice(&v))
    }
    fn sample(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let m = Self::means(x);
        let v = Self::variances(x);
        Ok((0..2)
            .map(|i| m[i] + v[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }
    fn density(&self, w: &[f64], x: &[f64]) -> f64 {
        let m = Self::means(x);
        let v = Self::variances(x);
        (0..2)
            .map(|i| (-(w[i] - m[i]).powi(2) / (2.0 * v[i])).exp() / (2.0 * PI * v[i]).sqrt())
            .product()
    }
}

pub fn engine_marginal() -> DiagonalGaussian {
    DiagonalGaussian {
        mean: ENGINE_STATE_MEAN.to_vec(),
        var: ENGINE_STATE_VAR.to_vec(),
    }
}

/// Built-in systems addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    Example1Linear,
    EnginePowertrain,
}

impl BuiltinModel {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "example1_linear" | "example1" => Ok(Self::Example1Linear),
            "engine_powertrain" | "engine" => Ok(Self::EnginePowertrain),
            other => Err(Error::invalid(format!(
                "unknown model `{other}` (expected example1_linear or engine_powertrain)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Example1Linear => "example1_linear",
            Self::EnginePowertrain => "engine_powertrain",
        }
    }

    pub fn system(self) -> Box<dyn SystemModel> {
        match self {
            Self::Example1Linear => Box::new(Example1Linear),
            Self::EnginePowertrain => Box::new(EnginePowertrain),
        }
    }

    pub fn ground_truth(self) -> Box<dyn GroundTruthConditional> {
        match self {
            Self::Example1Linear => Box::new(Example1Conditional),
            Self::EnginePowertrain => Box::new(EngineConditional),
        }
    }

    /// Law of dataset inputs and random initial states.
    pub fn state_marginal(self) -> Box<dyn StateSampler> {
        match self {
            Self::Example1Linear => Box::new(DiscreteStates(vec![
                EXAMPLE1_X0_T1.to_vec(),
                EXAMPLE1_X0_T2.to_vec(),
            ])),
            Self::EnginePowertrain => Box::new(engine_marginal()),
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets

/// Paired state/disturbance observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    s: usize,
    x: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, w: Vec<Vec<f64>>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::invalid("dataset must contain at least one pair"));
        }
        check_dim("disturbance list", w.len(), x.len())?;
        let n = x[0].len();
        let s = w[0].len();
        if n == 0 || s == 0 {
            return Err(Error::invalid(
                "state and disturbance dimensions must be positive",
            ));
        }
        for (xi, wi) in x.iter().zip(&w) {
            check_dim("state", xi.len(), n)?;
            check_dim("disturbance", wi.len(), s)?;
        }
        Ok(Self { n, s, x, w })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn dist_dim(&self) -> usize {
        self.s
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn disturbances(&self) -> &[Vec<f64>] {
        &self.w
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.x[i], &self.w[i])
    }

    /// Sub-dataset with the given row indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            n: self.n,
            s: self.s,
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            w: idx.iter().map(|&i| self.w[i].clone()).collect(),
        }
    }

    /// CSV with header `x1..xn,w1..ws` and 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let header: Vec<String> = (1..=self.n)
            .map(|i| format!("x{i}"))
            .chain((1..=self.s).map(|i| format!("w{i}")))
            .collect();
        wtr.write_record(&header)?;
        for (xi, wi) in self.x.iter().zip(&self.w) {
            wtr.write_record(xi.iter().chain(wi).map(|v| fmt_f64(*v)))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with('x')).count();
        let s = header.iter().filter(|h| h.starts_with('w')).count();
        if n + s != header.len() || n == 0 || s == 0 {
            return Err(Error::invalid(format!(
                "dataset header must be x1..xn,w1..ws, got {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let mut x = Vec::new();
        let mut w = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals = parse_row(&rec)?;
            x.push(vals[..n].to_vec());
            w.push(vals[n..].to_vec());
        }
        Self::new(x, w)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn parse_row(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number `{f}`: {e}")))
        })
        .collect()
}

/// Draws `count` i.i.d. pairs: `x` from `marginal`, `w` from `gt` given `x`.
pub fn generate_dataset(
    gt: &dyn GroundTruthConditional,
    marginal: &dyn StateSampler,
    count: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let mut x = Vec::with_capacity(count);
    let mut w = Vec::with_capacity(count);
    for _ in 0..count {
        let xi = marginal.sample(rng);
        w.push(gt.sample(&xi, rng)?);
        x.push(xi);
    }
    Dataset::new(x, w)
}

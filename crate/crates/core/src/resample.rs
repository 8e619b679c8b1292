//! Forward simulation of particles whose disturbances are redrawn at every
//! step from a state-conditional sampler.

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cde::CdeModel;
use crate::dynamics::{fmt_f64, parse_row, GroundTruthConditional, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::par::{try_map_indexed, Execution};
use crate::rng::{fork, stream, Rng};

/// Something that can produce a disturbance given the current state.
pub trait DisturbanceSource: Send + Sync {
    fn dist_dim(&self) -> usize;
    fn draw(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
}

impl DisturbanceSource for CdeModel {
    fn dist_dim(&self) -> usize {
        self.basis().dist_dim()
    }

    fn draw(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.mixture_at(x).sample(rng))
    }
}

/// Samples from the true conditional law instead of an estimate.
pub struct TrueConditional<'a>(pub &'a dyn GroundTruthConditional);

impl DisturbanceSource for TrueConditional<'_> {
    fn dist_dim(&self) -> usize {
        self.0.dist_dim()
    }

    fn draw(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.0.sample(x, rng)
    }
}

/// Uniform draws from a fixed pool of observed disturbances, ignoring the
/// state.
#[derive(Debug, Clone)]
pub struct RawSamples {
    pool: Vec<Vec<f64>>,
}

impl RawSamples {
    pub fn new(pool: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = pool.first() else {
            return Err(Error::invalid("empty disturbance pool"));
        };
        let s = first.len();
        for w in &pool {
            check_dim("pooled disturbance", w.len(), s)?;
        }
        Ok(Self { pool })
    }

    pub fn pool(&self) -> &[Vec<f64>] {
        &self.pool
    }

    fn pick(&self, rng: &mut Rng) -> &[f64] {
        &self.pool[rng.random_range(0..self.pool.len())]
    }
}

impl DisturbanceSource for RawSamples {
    fn dist_dim(&self) -> usize {
        self.pool[0].len()
    }

    fn draw(&self, _x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.pick(rng).to_vec())
    }
}

/// Predicted states at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub k: usize,
    pub scenarios: Vec<Vec<f64>>,
}

impl ScenarioSet {
    pub fn new(k: usize, scenarios: Vec<Vec<f64>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("scenario step must be at least 1"));
        }
        let Some(first) = scenarios.first() else {
            return Err(Error::invalid("scenario set is empty"));
        };
        let n = first.len();
        for s in &scenarios {
            check_dim("scenario", s.len(), n)?;
        }
        Ok(Self { k, scenarios })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.scenarios[0].len()
    }

    /// First `count` scenarios. Because each particle has its own random
    /// stream, this equals a run with `count` particles.
    pub fn prefix(&self, count: usize) -> Self {
        Self {
            k: self.k,
            scenarios: self.scenarios[..count.min(self.len())].to_vec(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record((1..=self.state_dim()).map(|i| format!("x{i}")))?;
        for s in &self.scenarios {
            wtr.write_record(s.iter().map(|v| fmt_f64(*v)))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(k: usize, input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let scenarios = rdr
            .records()
            .map(|r| parse_row(&r?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(k, scenarios)
    }
}

/// How the context-free baselines pair raw disturbances with path steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawPathRule {
    /// Every step draws a fresh pooled disturbance.
    #[default]
    PerStepResample,
    /// Each path draws one pooled disturbance and reuses it at every step.
    FixedPerPath,
}

fn check_request(
    model: &dyn SystemModel,
    dist_dim: usize,
    x0: &[f64],
    k_max: usize,
    n_r: usize,
) -> Result<()> {
    if n_r == 0 {
        return Err(Error::invalid("particle count must be at least 1"));
    }
    if k_max == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    check_dim("x0", x0.len(), model.state_dim())?;
    check_dim("sampler disturbance", dist_dim, model.dist_dim())
}

/// Runs `path` for every particle with the retry rule: a particle whose
/// trajectory leaves the model domain restarts once from `x0` on a fresh
/// stream; a second failure aborts.
fn run_particles<F>(
    seed: u64,
    k_max: usize,
    n_r: usize,
    exec: Execution,
    path: F,
) -> Result<Vec<ScenarioSet>>
where
    F: Fn(&mut Rng) -> Result<Vec<Vec<f64>>> + Sync + Send,
{
    let paths = try_map_indexed(n_r, exec, |i| {
        match path(&mut stream(seed, &[i as u64, 0])) {
            Err(e) if e.is_numeric() => {
                log::debug!("particle {i} failed ({e}); restarting from x0");
                path(&mut stream(seed, &[i as u64, 1])).map_err(|e2| {
                    Error::Numeric(format!("particle {i} failed twice: first {e}; then {e2}"))
                })
            }
            other => other,
        }
    })?;
    (0..k_max)
        .map(|k| ScenarioSet::new(k + 1, paths.iter().map(|p| p[k].clone()).collect()))
        .collect()
}

/// Propagates `n_r` particles from `x0` for `k_max` steps, drawing each
/// particle's disturbance from `source` conditioned on that particle's
/// current state. Returns one set per step `1..=k_max`.
pub fn generate_scenarios(
    model: &dyn SystemModel,
    source: &dyn DisturbanceSource,
    x0: &[f64],
    k_max: usize,
    n_r: usize,
    rng: &mut Rng,
    exec: Execution,
) -> Result<Vec<ScenarioSet>> {
    check_request(model, source.dist_dim(), x0, k_max, n_r)?;
    let seed = fork(rng);
    run_particles(seed, k_max, n_r, exec, |rng| {
        let mut x = x0.to_vec();
        let mut out = Vec::with_capacity(k_max);
        for k in 0..k_max {
            let w = source.draw(&x, rng)?;
            x = model.step(k, &x, &w)?;
            out.push(x.clone());
        }
        Ok(out)
    })
}

/// Pushes pooled disturbances through the dynamics without conditioning on
/// the state, for the context-free baselines.
pub fn generate_raw_paths(
    model: &dyn SystemModel,
    pool: &RawSamples,
    rule: RawPathRule,
    x0: &[f64],
    k_max: usize,
    n_r: usize,
    rng: &mut Rng,
    exec: Execution,
) -> Result<Vec<ScenarioSet>> {
    check_request(model, pool.dist_dim(), x0, k_max, n_r)?;
    let seed = fork(rng);
    run_particles(seed, k_max, n_r, exec, |rng| {
        let fixed = pool.pick(rng).to_vec();
        let mut x = x0.to_vec();
        let mut out = Vec::with_capacity(k_max);
        for k in 0..k_max {
            x = match rule {
                RawPathRule::FixedPerPath => model.step(k, &x, &fixed)?,
                RawPathRule::PerStepResample => model.step(k, &x, pool.pick(rng))?,
            };
            out.push(x.clone());
        }
        Ok(out)
    })
}

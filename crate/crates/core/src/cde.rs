//! Least-squares conditional density estimation.
//!
//! The density ratio `π(x, w) = p(w | x)` is modelled as `βᵀ φ(x, w)` with
//! Gaussian product kernels `φ_l(x, w) = K_x(x, x_l) K_w(w, w_l)` centred on a
//! random subset of the observations. The squared-error loss
//! `βᵀ Ĥ β − 2 ĥᵀ β + λ βᵀ β` has a closed-form minimiser, and because the
//! disturbance space is all of `ℝˢ` both `Ĥ` and the normalising integral of
//! the estimate are available in closed form.
//!
//! State coordinates are standardized before kernel evaluation; disturbance
//! coordinates are used as-is with a single bandwidth.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::par::{map_indexed, Execution};
use crate::rng::Rng;

/// Default number of kernel centres.
pub const DEFAULT_MAX_CENTERS: usize = 100;
/// Responses below this are treated as "no kernel reaches x".
pub const RESPONSE_FLOOR: f64 = 1e-300;
const CONDITION_LIMIT: f64 = 1e12;

/// Affine map `z = (x − mean) / scale` applied to states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Per-coordinate mean and standard deviation; degenerate coordinates
    /// keep unit scale.
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let n = xs[0].len();
        let count = xs.len() as f64;
        let mean: Vec<f64> = (0..n)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / count)
            .collect();
        let scale = (0..n)
            .map(|j| {
                let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / count;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, xi), (m, s)) in out.iter_mut().zip(x).zip(self.mean.iter().zip(&self.scale)) {
            *o = (xi - m) / s;
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian product kernels centred on observed pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBasis {
    centers_x: Vec<Vec<f64>>,
    centers_w: Vec<Vec<f64>>,
    centers_z: Vec<Vec<f64>>,
    sigma_x: f64,
    sigma_w: f64,
    standardizer: Standardizer,
}

impl GaussianBasis {
    pub fn new(
        centers_x: Vec<Vec<f64>>,
        centers_w: Vec<Vec<f64>>,
        sigma_x: f64,
        sigma_w: f64,
        standardizer: Standardizer,
    ) -> Result<Self> {
        if centers_x.is_empty() {
            return Err(Error::invalid("basis needs at least one centre"));
        }
        check_dim("centre disturbances", centers_w.len(), centers_x.len())?;
        if !(sigma_x > 0.0 && sigma_x.is_finite() && sigma_w > 0.0 && sigma_w.is_finite()) {
            return Err(Error::invalid(format!(
                "bandwidths must be positive, got sigma_x = {sigma_x}, sigma_w = {sigma_w}"
            )));
        }
        let n = centers_x[0].len();
        let s = centers_w[0].len();
        check_dim("standardizer", standardizer.mean.len(), n)?;
        for (cx, cw) in centers_x.iter().zip(&centers_w) {
            check_dim("centre state", cx.len(), n)?;
            check_dim("centre disturbance", cw.len(), s)?;
        }
        let centers_z = centers_x.iter().map(|c| standardizer.apply(c)).collect();
        Ok(Self {
            centers_x,
            centers_w,
            centers_z,
            sigma_x,
            sigma_w,
            standardizer,
        })
    }

    /// Centres are `min(N, max_centers)` distinct observations chosen
    /// uniformly at random; the standardizer is fitted to the whole dataset.
    pub fn from_dataset(
        data: &Dataset,
        max_centers: usize,
        sigma_x: f64,
        sigma_w: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let b = data.len().min(max_centers.max(1));
        let mut idx = index::sample(rng, data.len(), b).into_vec();
        idx.sort_unstable();
        Self::new(
            idx.iter().map(|&i| data.states()[i].clone()).collect(),
            idx.iter()
                .map(|&i| data.disturbances()[i].clone())
                .collect(),
            sigma_x,
            sigma_w,
            Standardizer::fit(data.states()),
        )
    }

    pub fn with_bandwidths(&self, sigma_x: f64, sigma_w: f64) -> Result<Self> {
        Self::new(
            self.centers_x.clone(),
            self.centers_w.clone(),
            sigma_x,
            sigma_w,
            self.standardizer.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.centers_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers_x.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.centers_x[0].len()
    }

    pub fn dist_dim(&self) -> usize {
        self.centers_w[0].len()
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w
    }

    pub fn centers(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.centers_x, &self.centers_w)
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// `K_x(x, x_l)` for every centre.
    pub fn state_kernels(&self, x: &[f64], out: &mut [f64]) {
        let mut z = vec![0.0; x.len()];
        self.standardizer.apply_into(x, &mut z);
        self.state_kernels_standardized(&z, out);
    }

    fn state_kernels_standardized(&self, z: &[f64], out: &mut [f64]) {
        let denom = 2.0 * self.sigma_x * self.sigma_x;
        for (o, c) in out.iter_mut().zip(&self.centers_z) {
            *o = (-sq_dist(z, c) / denom).exp();
        }
    }

    pub fn dist_kernel(&self, w: &[f64], l: usize) -> f64 {
        (-sq_dist(w, &self.centers_w[l]) / (2.0 * self.sigma_w * self.sigma_w)).exp()
    }

    /// `φ(x, w)`.
    pub fn phi(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0; self.len()];
        self.state_kernels(x, &mut k);
        k.iter()
            .enumerate()
            .map(|(l, kx)| kx * self.dist_kernel(w, l))
            .collect()
    }

    /// `∫ K_w(w, w_l) dw = (2π σ_w²)^{s/2}`.
    pub fn dist_kernel_mass(&self) -> f64 {
        (2.0 * PI * self.sigma_w * self.sigma_w).powf(self.dist_dim() as f64 / 2.0)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        check_dim("dataset state", data.state_dim(), self.state_dim())?;
        check_dim("dataset disturbance", data.dist_dim(), self.dist_dim())
    }

    /// N×b matrix of `K_x(x_i, x_l)`.
    fn state_kernel_matrix(&self, data: &Dataset) -> DMatrix<f64> {
        let b = self.len();
        let mut k = DMatrix::zeros(data.len(), b);
        let mut row = vec![0.0; b];
        for (i, x) in data.states().iter().enumerate() {
            self.state_kernels(x, &mut row);
            for l in 0..b {
                k[(i, l)] = row[l];
            }
        }
        k
    }

    /// b×b matrix of the closed-form w-integral of two kernels,
    /// `(π σ_w²)^{s/2} exp(−‖w_l − w_m‖² / (4 σ_w²))`.
    fn dist_overlap_matrix(&self) -> DMatrix<f64> {
        let b = self.len();
        let s2 = self.sigma_w * self.sigma_w;
        let scale = (PI * s2).powf(self.dist_dim() as f64 / 2.0);
        DMatrix::from_fn(b, b, |l, m| {
            scale * (-sq_dist(&self.centers_w[l], &self.centers_w[m]) / (4.0 * s2)).exp()
        })
    }
}

/// `Ĥ = (1/N) Σ_i ∫ φ(x_i, w) φ(x_i, w)ᵀ dw`.
pub fn compute_h_matrix(basis: &GaussianBasis, data: &Dataset) -> Result<DMatrix<f64>> {
    basis.check_data(data)?;
    let kx = basis.state_kernel_matrix(data);
    Ok(h_matrix_from_parts(&kx, &basis.dist_overlap_matrix()))
}

fn h_matrix_from_parts(kx: &DMatrix<f64>, overlap: &DMatrix<f64>) -> DMatrix<f64> {
    let mut gram = kx.transpose() * kx;
    gram /= kx.nrows() as f64;
    gram.component_mul_assign(overlap);
    // exact symmetry
    let b = gram.nrows();
    for l in 0..b {
        for m in 0..l {
            let v = 0.5 * (gram[(l, m)] + gram[(m, l)]);
            gram[(l, m)] = v;
            gram[(m, l)] = v;
        }
    }
    gram
}

/// `ĥ = (1/N) Σ_i φ(x_i, w_i)`.
pub fn compute_h_vector(basis: &GaussianBasis, data: &Dataset) -> Result<DVector<f64>> {
    basis.check_data(data)?;
    let kx = basis.state_kernel_matrix(data);
    Ok(h_vector_from_parts(basis, &kx, data))
}

fn h_vector_from_parts(basis: &GaussianBasis, kx: &DMatrix<f64>, data: &Dataset) -> DVector<f64> {
    let b = basis.len();
    let mut h = DVector::zeros(b);
    for (i, w) in data.disturbances().iter().enumerate() {
        for l in 0..b {
            h[l] += kx[(i, l)] * basis.dist_kernel(w, l);
        }
    }
    h / data.len() as f64
}

/// Solves `(Ĥ + λI) β = ĥ` by Cholesky. Returns the solution and a cheap
/// condition estimate from the factor's diagonal.
fn ridge_solve(
    h_mat: &DMatrix<f64>,
    h_vec: &DVector<f64>,
    lambda: f64,
) -> Option<(DVector<f64>, f64)> {
    let b = h_mat.nrows();
    let sys = h_mat + DMatrix::identity(b, b) * lambda;
    let chol = sys.cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| {
        (lo.min(d), hi.max(d))
    });
    if !(lo > 0.0) {
        return None;
    }
    let cond = (hi / lo).powi(2);
    Some((chol.solve(h_vec), cond))
}

/// Fitted LS-CDE model.
#[derive(Debug, Clone, PartialEq)]
pub struct CdeModel {
    basis: GaussianBasis,
    beta: DVector<f64>,
    beta_clipped: DVector<f64>,
    lambda: f64,
}

/// `β = (Ĥ + λI)⁻¹ ĥ`.
///
/// With `λ = 0` a singular `Ĥ` is an error. With `λ > 0` an estimated
/// condition number above 1e12 logs a warning and raises `λ` by
/// `1e-8 · trace(Ĥ) / b`; the stored `λ` is the one actually used.
pub fn fit(basis: GaussianBasis, data: &Dataset, lambda: f64) -> Result<CdeModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "ridge coefficient must be >= 0, got {lambda}"
        )));
    }
    let h_mat = compute_h_matrix(&basis, data)?;
    let h_vec = compute_h_vector(&basis, data)?;
    let b = basis.len();
    let mut lam = lambda;
    let solved = ridge_solve(&h_mat, &h_vec, lam);
    let beta = match solved {
        Some((beta, cond)) if cond <= CONDITION_LIMIT => beta,
        _ if lambda == 0.0 => {
            return Err(Error::IllConditioned(
                "Ĥ is numerically singular; use a positive ridge coefficient".into(),
            ));
        }
        other => {
            let bump = 1e-8 * h_mat.trace() / b as f64;
            log::warn!(
                "ridge system ill-conditioned (cond ≈ {:.3e}); raising lambda by {bump:.3e}",
                other.map_or(f64::INFINITY, |(_, c)| c)
            );
            lam += bump;
            ridge_solve(&h_mat, &h_vec, lam)
                .map(|(beta, _)| beta)
                .ok_or_else(|| Error::IllConditioned("ridge system could not be factored".into()))?
        }
    };
    Ok(CdeModel::from_parts(basis, beta, lam))
}

/// Value of the quadratic part of the loss, `βᵀ H β − 2 hᵀ β`.
pub fn quadratic_loss(beta: &DVector<f64>, h_mat: &DMatrix<f64>, h_vec: &DVector<f64>) -> f64 {
    (beta.transpose() * h_mat * beta)[(0, 0)] - 2.0 * h_vec.dot(beta)
}

/// Mixture of Gaussians in `w` obtained by fixing `x`.
#[derive(Debug, Clone)]
pub struct ConditionalMixture<'a> {
    model: &'a CdeModel,
    /// Cumulative component weights; `None` means the fallback applies.
    cumulative: Option<Vec<f64>>,
}

impl ConditionalMixture<'_> {
    pub fn is_fallback(&self) -> bool {
        self.cumulative.is_none()
    }

    /// One draw. Components are chosen with probability proportional to
    /// `β₊_l K_x(x, x_l)`; the fallback returns a stored disturbance chosen
    /// uniformly.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let basis = &self.model.basis;
        match &self.cumulative {
            Some(cum) => {
                let total = *cum.last().unwrap();
                let u = rng.random::<f64>() * total;
                let l = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
                basis.centers_w[l]
                    .iter()
                    .map(|c| c + basis.sigma_w * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            None => basis.centers_w[rng.random_range(0..basis.len())].clone(),
        }
    }
}

impl CdeModel {
    pub fn from_parts(basis: GaussianBasis, beta: DVector<f64>, lambda: f64) -> Self {
        let beta_clipped = beta.map(|b| b.max(0.0));
        Self {
            basis,
            beta,
            beta_clipped,
            lambda,
        }
    }

    pub fn basis(&self) -> &GaussianBasis {
        &self.basis
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn beta_clipped(&self) -> &DVector<f64> {
        &self.beta_clipped
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Unnormalized model `βᵀ φ(x, w)` with the raw coefficients.
    pub fn ratio(&self, x: &[f64], w: &[f64]) -> f64 {
        self.basis
            .phi(x, w)
            .iter()
            .zip(self.beta.iter())
            .map(|(p, b)| p * b)
            .sum()
    }

    fn responses(&self, x: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0; self.basis.len()];
        self.basis.state_kernels(x, &mut k);
        k.iter_mut()
            .zip(self.beta_clipped.iter())
            .for_each(|(k, b)| *k *= b);
        k
    }

    pub fn mixture_at(&self, x: &[f64]) -> ConditionalMixture<'_> {
        let r = self.responses(x);
        let total: f64 = r.iter().sum();
        let cumulative = (total >= RESPONSE_FLOOR).then(|| {
            r.iter()
                .scan(0.0, |acc, v| {
                    *acc += v;
                    Some(*acc)
                })
                .collect()
        });
        ConditionalMixture {
            model: self,
            cumulative,
        }
    }

    /// Normalized estimate `β₊ᵀφ(x, w) / ∫ β₊ᵀφ(x, w') dw'`.
    pub fn conditional_density(&self, w: &[f64], x: &[f64]) -> f64 {
        let r = self.responses(x);
        let total: f64 = r.iter().sum();
        let b = self.basis.len();
        let mass = self.basis.dist_kernel_mass();
        if total < RESPONSE_FLOOR {
            let sum: f64 = (0..b).map(|l| self.basis.dist_kernel(w, l)).sum();
            return sum / (b as f64 * mass);
        }
        let num: f64 = (0..b)
            .filter(|&l| r[l] > 0.0)
            .map(|l| r[l] * self.basis.dist_kernel(w, l))
            .sum();
        num / (total * mass)
    }

    pub fn sample_conditional(&self, x: &[f64], count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let mix = self.mixture_at(x);
        (0..count).map(|_| mix.sample(rng)).collect()
    }

    pub fn to_json(&self) -> CdeJson {
        CdeJson {
            centers: self
                .basis
                .centers_x
                .iter()
                .zip(&self.basis.centers_w)
                .map(|(x, w)| Center {
                    x: x.clone(),
                    w: w.clone(),
                })
                .collect(),
            sigma_x: self.basis.sigma_x,
            sigma_w: self.basis.sigma_w,
            lambda: self.lambda,
            beta: self.beta.iter().copied().collect(),
            standardization: self.basis.standardizer.clone(),
        }
    }

    pub fn from_json(j: CdeJson) -> Result<Self> {
        let (cx, cw): (Vec<_>, Vec<_>) = j.centers.into_iter().map(|c| (c.x, c.w)).unzip();
        let basis = GaussianBasis::new(cx, cw, j.sigma_x, j.sigma_w, j.standardization)?;
        check_dim("beta", j.beta.len(), basis.len())?;
        Ok(Self::from_parts(basis, DVector::from_vec(j.beta), j.lambda))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

/// Serialized form of a [`CdeModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdeJson {
    pub centers: Vec<Center>,
    pub sigma_x: f64,
    pub sigma_w: f64,
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub standardization: Standardizer,
}

impl Serialize for CdeModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CdeModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Self::from_json(CdeJson::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Model selection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdeConfig {
    pub max_centers: usize,
    pub folds: usize,
    pub sigma_x_grid: Vec<f64>,
    pub sigma_w_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub score: CvScore,
}

/// Held-out criterion used to rank grid points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvScore {
    /// `βᵀ Ĥ_val β − 2 ĥ_valᵀ β` with the raw coefficients.
    #[default]
    RatioLoss,
    /// `∫ p̂(w|x)² dw − 2 p̂(w|x)` averaged over held-out pairs, for the
    /// clipped and normalized density that is actually sampled. Picks
    /// sharper kernels and a more accurate density, whose narrower clouds
    /// give sets with lower true coverage.
    DensityLoss,
}

impl Default for CdeConfig {
    fn default() -> Self {
        Self {
            max_centers: DEFAULT_MAX_CENTERS,
            folds: 5,
            sigma_x_grid: vec![0.2, 0.35, 0.5, 0.75, 1.0],
            sigma_w_grid: vec![0.1, 0.2, 0.3, 0.5, 0.8],
            lambda_grid: vec![1e-3, 1e-2, 1e-1],
            score: CvScore::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub sigma_x: f64,
    pub sigma_w: f64,
    pub lambda: f64,
    /// Mean held-out quadratic loss at the selected point.
    pub score: f64,
}

fn clean_grid(name: &str, grid: &[f64], allow_zero: bool) -> Result<Vec<f64>> {
    let ok = |v: f64| v.is_finite() && (v > 0.0 || (allow_zero && v == 0.0));
    if grid.is_empty() || grid.iter().any(|&v| !ok(v)) {
        return Err(Error::invalid(format!("degenerate {name} grid {grid:?}")));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

/// Held-out squared-error loss of the clipped, normalized density, up to the
/// constant `∫∫ p² dw dP(x)`.
fn density_loss(
    basis: &GaussianBasis,
    beta: &DVector<f64>,
    kx: &DMatrix<f64>,
    overlap: &DMatrix<f64>,
    data: &Dataset,
) -> f64 {
    let (n, b) = kx.shape();
    let mass = basis.dist_kernel_mass();
    let mut weights = DMatrix::zeros(n, b);
    for i in 0..n {
        let total: f64 = (0..b).map(|l| kx[(i, l)] * beta[l].max(0.0)).sum();
        for l in 0..b {
            weights[(i, l)] = if total < RESPONSE_FLOOR {
                1.0 / b as f64
            } else {
                kx[(i, l)] * beta[l].max(0.0) / total
            };
        }
    }
    // ∫ N(w; w_l, σ²) N(w; w_m, σ²) dw
    let cross = overlap / (mass * mass);
    let aw = &weights * cross;
    let mut acc = 0.0;
    for (i, w) in data.disturbances().iter().enumerate() {
        let mut square = 0.0;
        let mut at_obs = 0.0;
        for l in 0..b {
            square += aw[(i, l)] * weights[(i, l)];
            at_obs += weights[(i, l)] * basis.dist_kernel(w, l);
        }
        acc += square - 2.0 * at_obs / mass;
    }
    acc / n as f64
}

struct Fold {
    train: Dataset,
    val: Dataset,
    centers: Vec<usize>,
    standardizer: Standardizer,
}

/// K-fold selection of `(σ_x, σ_w, λ)` by the mean held-out value of the
/// configured [`CvScore`]. Ties go to the larger `λ`, then larger `σ_x`, then
/// larger `σ_w`.
pub fn cross_validate(
    data: &Dataset,
    config: &CdeConfig,
    rng: &mut Rng,
    exec: Execution,
) -> Result<CvSelection> {
    let sx_grid = clean_grid("sigma_x", &config.sigma_x_grid, false)?;
    let sw_grid = clean_grid("sigma_w", &config.sigma_w_grid, false)?;
    let lam_grid = clean_grid("lambda", &config.lambda_grid, true)?;
    let k = config.folds;
    if k < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if data.len() < k {
        return Err(Error::invalid(format!(
            "dataset of size {} cannot be split into {k} folds",
            data.len()
        )));
    }

    let mut perm: Vec<usize> = (0..data.len()).collect();
    perm.shuffle(rng);
    let folds: Vec<Fold> = (0..k)
        .map(|f| {
            let mut val_idx = Vec::new();
            let mut train_idx = Vec::new();
            for (pos, &i) in perm.iter().enumerate() {
                if pos % k == f {
                    val_idx.push(i)
                } else {
                    train_idx.push(i)
                }
            }
            let train = data.select(&train_idx);
            let b = train.len().min(config.max_centers.max(1));
            let mut centers = index::sample(rng, train.len(), b).into_vec();
            centers.sort_unstable();
            let standardizer = Standardizer::fit(train.states());
            Fold {
                val: data.select(&val_idx),
                train,
                centers,
                standardizer,
            }
        })
        .collect();

    // scores[sx][sw][lambda]
    let scores: Vec<Result<Vec<Vec<f64>>>> = map_indexed(sx_grid.len(), exec, |ix| {
        let sx = sx_grid[ix];
        let mut acc = vec![vec![0.0; lam_grid.len()]; sw_grid.len()];
        for fold in &folds {
            let base = GaussianBasis::new(
                fold.centers
                    .iter()
                    .map(|&i| fold.train.states()[i].clone())
                    .collect(),
                fold.centers
                    .iter()
                    .map(|&i| fold.train.disturbances()[i].clone())
                    .collect(),
                sx,
                sw_grid[0],
                fold.standardizer.clone(),
            )?;
            let kx_tr = base.state_kernel_matrix(&fold.train);
            let kx_val = base.state_kernel_matrix(&fold.val);
            for (iw, &sw) in sw_grid.iter().enumerate() {
                let basis = base.with_bandwidths(sx, sw)?;
                let overlap = basis.dist_overlap_matrix();
                let h_tr = h_matrix_from_parts(&kx_tr, &overlap);
                let v_tr = h_vector_from_parts(&basis, &kx_tr, &fold.train);
                let h_val = h_matrix_from_parts(&kx_val, &overlap);
                let v_val = h_vector_from_parts(&basis, &kx_val, &fold.val);
                for (il, &lam) in lam_grid.iter().enumerate() {
                    acc[iw][il] += match ridge_solve(&h_tr, &v_tr, lam) {
                        Some((beta, cond)) if lam > 0.0 || cond <= CONDITION_LIMIT => {
                            let loss = match config.score {
                                CvScore::RatioLoss => quadratic_loss(&beta, &h_val, &v_val),
                                CvScore::DensityLoss => {
                                    density_loss(&basis, &beta, &kx_val, &overlap, &fold.val)
                                }
                            };
                            loss / k as f64
                        }
                        _ => f64::INFINITY,
                    };
                }
            }
        }
        Ok(acc)
    });

    let mut best: Option<CvSelection> = None;
    for (ix, table) in scores.into_iter().enumerate() {
        let table = table?;
        for (iw, row) in table.iter().enumerate() {
            for (il, &score) in row.iter().enumerate() {
                if !score.is_finite() {
                    continue;
                }
                let cand = CvSelection {
                    sigma_x: sx_grid[ix],
                    sigma_w: sw_grid[iw],
                    lambda: lam_grid[il],
                    score,
                };
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (cand.score, -cand.lambda, -cand.sigma_x, -cand.sigma_w)
                            < (b.score, -b.lambda, -b.sigma_x, -b.sigma_w)
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
    }
    best.ok_or_else(|| Error::IllConditioned("no grid point produced a solvable fit".into()))
}

/// Cross-validates, then fits on the full dataset with the selected
/// hyper-parameters.
pub fn fit_with_cv(
    data: &Dataset,
    config: &CdeConfig,
    rng: &mut Rng,
    exec: Execution,
) -> Result<(CdeModel, CvSelection)> {
    let sel = cross_validate(data, config, rng, exec)?;
    let basis =
        GaussianBasis::from_dataset(data, config.max_centers, sel.sigma_x, sel.sigma_w, rng)?;
    Ok((fit(basis, data, sel.lambda)?, sel))
}

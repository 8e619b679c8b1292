//! Polynomial sublevel sets `{x : e(x)ᵀ M e(x) ≤ 1}` with `M = L Lᵀ`.
//!
//! `e(x)` stacks all monomials of total degree `≤ d`. Within a degree the
//! mixed monomials come first (lower maximum exponent first), ties broken by
//! descending exponent tuple, so for `n = 2, d = 2` the order is
//! `[1, x1, x2, x1 x2, x1², x2²]`. The gram matrix is stored through its
//! lower-triangular factor `L`, which keeps `M` positive semidefinite by
//! construction and makes `log det M⁻¹ = -2 Σ log L_ii`.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Smallest admissible diagonal entry of `L`.
pub const DIAG_FLOOR: f64 = 1e-8;
/// Practical bound on `|L_ij|` standing in for a compact parameter set.
pub const THETA_BOUND: f64 = 1e6;

pub const ORDERING_TAG: &str = "graded-mixed-first";
const CUSTOM_TAG: &str = "custom";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    n: usize,
    d: usize,
    exponents: Vec<Vec<u32>>,
    tag: &'static str,
}

fn canonical_cmp(a: &[u32], b: &[u32]) -> Ordering {
    let deg = |e: &[u32]| e.iter().sum::<u32>();
    let max = |e: &[u32]| e.iter().copied().max().unwrap_or(0);
    deg(a)
        .cmp(&deg(b))
        .then(max(a).cmp(&max(b)))
        .then_with(|| b.cmp(a))
}

fn exponents_up_to(n: usize, d: usize) -> Vec<Vec<u32>> {
    fn rec(n: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(n, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, d as u32, &mut Vec::with_capacity(n), &mut out);
    out
}

pub fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

impl MonomialBasis {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid("basis needs n >= 1 and d >= 1"));
        }
        let mut exponents = exponents_up_to(n, d);
        exponents.sort_by(|a, b| canonical_cmp(a, b));
        Ok(Self {
            n,
            d,
            exponents,
            tag: ORDERING_TAG,
        })
    }

    /// Basis with an explicit monomial order. It must list every monomial of
    /// degree `≤ d` exactly once, grouped by ascending degree, constant first.
    pub fn from_exponents(n: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        let d = exponents
            .iter()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0) as usize;
        let canonical = Self::new(n, d)?;
        let mut sorted = exponents.clone();
        sorted.sort_by(|a, b| canonical_cmp(a, b));
        if sorted != canonical.exponents {
            return Err(Error::invalid(
                "exponent list is not a complete monomial basis",
            ));
        }
        let degrees: Vec<u32> = exponents.iter().map(|e| e.iter().sum()).collect();
        if degrees.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid(
                "monomials must be grouped by ascending degree",
            ));
        }
        let tag = if exponents == canonical.exponents {
            ORDERING_TAG
        } else {
            CUSTOM_TAG
        };
        Ok(Self {
            n,
            d,
            exponents,
            tag,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.d
    }

    /// Number of monomials, `C(n + d, d)`.
    pub fn size(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn ordering_tag(&self) -> &'static str {
        self.tag
    }

    pub fn monomial_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("state", x.len(), self.n)?;
        let mut out = vec![0.0; self.size()];
        self.fill_monomials(x, &mut out);
        Ok(out)
    }

    /// Matrix `A` with `e((x − shift) / scale) = A e(x)` for every `x`. Exists
    /// because a complete basis is closed under affine maps of the state.
    pub fn affine_map(&self, shift: &[f64], scale: &[f64]) -> DMatrix<f64> {
        let m = self.size();
        let index: std::collections::HashMap<&[u32], usize> = self
            .exponents
            .iter()
            .enumerate()
            .map(|(i, e)| (e.as_slice(), i))
            .collect();
        let mut a = DMatrix::zeros(m, m);
        for (row, alpha) in self.exponents.iter().enumerate() {
            // Enumerate every k ≤ alpha componentwise.
            let mut k = vec![0u32; self.n];
            loop {
                let mut coef = 1.0;
                for j in 0..self.n {
                    coef *= binomial(alpha[j] as usize, k[j] as usize) as f64
                        * (-shift[j]).powi((alpha[j] - k[j]) as i32)
                        / scale[j].powi(alpha[j] as i32);
                }
                a[(row, index[k.as_slice()])] += coef;
                let mut j = 0;
                while j < self.n && k[j] == alpha[j] {
                    k[j] = 0;
                    j += 1;
                }
                if j == self.n {
                    break;
                }
                k[j] += 1;
            }
        }
        a
    }

    /// Writes `e(x)` into `out` without dimension checks.
    pub fn fill_monomials(&self, x: &[f64], out: &mut [f64]) {
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            *slot =
                exps.iter().zip(x).fold(
                    1.0,
                    |acc, (&p, &xi)| if p == 0 { acc } else { acc * xi.powi(p as i32) },
                );
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublevelSetParams {
    basis: MonomialBasis,
    l: DMatrix<f64>,
}

pub(crate) fn log_det_inv_of(l: &DMatrix<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if !(d > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diagonal entry L[{i},{i}] = {d} is not positive"
            )));
        }
        acc -= 2.0 * d.ln();
    }
    Ok(acc)
}

impl SublevelSetParams {
    pub fn new(basis: MonomialBasis, l: DMatrix<f64>) -> Result<Self> {
        let m = basis.size();
        if l.nrows() != m || l.ncols() != m {
            return Err(Error::InvalidParameter(format!(
                "factor is {}x{}, basis size is {m}",
                l.nrows(),
                l.ncols()
            )));
        }
        for i in 0..m {
            for j in i + 1..m {
                if l[(i, j)] != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "factor is not lower triangular at ({i},{j})"
                    )));
                }
            }
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "factor has non-finite entries".into(),
            ));
        }
        log_det_inv_of(&l)?;
        Ok(Self { basis, l })
    }

    pub fn identity(basis: MonomialBasis) -> Self {
        let m = basis.size();
        Self {
            basis,
            l: DMatrix::identity(m, m),
        }
    }

    /// Factor a positive-definite gram matrix.
    pub fn from_gram(basis: MonomialBasis, gram: &DMatrix<f64>) -> Result<Self> {
        let sym = (gram + gram.transpose()) * 0.5;
        let chol = sym
            .cholesky()
            .ok_or_else(|| Error::Numeric("gram matrix is not positive definite".into()))?;
        Self::new(basis, chol.unpack())
    }

    /// Rebuild from `θ`, the lower triangle of `L` in row-major order.
    pub fn from_theta(basis: MonomialBasis, theta: &[f64]) -> Result<Self> {
        let m = basis.size();
        check_dim("theta", theta.len(), m * (m + 1) / 2)?;
        let mut l = DMatrix::zeros(m, m);
        let mut it = theta.iter();
        for i in 0..m {
            for j in 0..=i {
                l[(i, j)] = *it.next().unwrap();
            }
        }
        Self::new(basis, l)
    }

    pub fn theta(&self) -> Vec<f64> {
        let m = self.basis.size();
        (0..m)
            .flat_map(|i| (0..=i).map(move |j| (i, j)))
            .map(|ij| self.l[ij])
            .collect()
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn gram(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// `q(x) = ‖Lᵀ e(x)‖²`.
    pub fn evaluate_q(&self, x: &[f64]) -> Result<f64> {
        let e = self.basis.monomial_vector(x)?;
        Ok(self.q_from_monomials(&e))
    }

    pub fn q_from_monomials(&self, e: &[f64]) -> f64 {
        let m = e.len();
        let mut acc = 0.0;
        for j in 0..m {
            let mut v = 0.0;
            for (i, ei) in e.iter().enumerate().skip(j) {
                v += self.l[(i, j)] * ei;
            }
            acc += v * v;
        }
        acc
    }

    /// Boundary points (`q = 1`) count as inside.
    pub fn membership(&self, x: &[f64]) -> Result<bool> {
        Ok(self.evaluate_q(x)? <= 1.0)
    }

    pub fn log_det_inv(&self) -> f64 {
        log_det_inv_of(&self.l).expect("diagonal validated at construction")
    }

    pub fn empirical_coverage(&self, points: &[Vec<f64>]) -> Result<f64> {
        if points.is_empty() {
            return Err(Error::invalid("coverage of an empty point set"));
        }
        let mut e = vec![0.0; self.basis.size()];
        let mut inside = 0usize;
        for p in points {
            check_dim("point", p.len(), self.basis.state_dim())?;
            self.basis.fill_monomials(p, &mut e);
            if self.q_from_monomials(&e) <= 1.0 {
                inside += 1;
            }
        }
        Ok(inside as f64 / points.len() as f64)
    }

    /// `L → c L`, i.e. `q → c² q`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.basis.clone(), &self.l * c)
    }

    /// Whether some entry of `L` reached the parameter bound.
    pub fn bound_hit(&self) -> bool {
        self.l.iter().any(|v| v.abs() >= THETA_BOUND)
    }

    pub fn to_json(&self) -> ParamsJson {
        let m = self.basis.size();
        ParamsJson {
            n: self.basis.state_dim(),
            d: self.basis.degree(),
            ordering_tag: self.basis.ordering_tag().to_string(),
            exponents: (self.basis.ordering_tag() != ORDERING_TAG)
                .then(|| self.basis.exponents().to_vec()),
            l_rowmajor: (0..m)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .map(|ij| self.l[ij])
                .collect(),
        }
    }

    pub fn from_json(j: &ParamsJson) -> Result<Self> {
        let basis = match (&j.exponents, j.ordering_tag.as_str()) {
            (None, ORDERING_TAG) => MonomialBasis::new(j.n, j.d)?,
            (Some(exps), _) => MonomialBasis::from_exponents(j.n, exps.clone())?,
            (None, other) => {
                return Err(Error::invalid(format!("unknown ordering tag `{other}`")));
            }
        };
        let m = basis.size();
        check_dim("L_rowmajor", j.l_rowmajor.len(), m * m)?;
        Self::new(basis, DMatrix::from_row_slice(m, m, &j.l_rowmajor))
    }
}

/// Portable serialized form of [`SublevelSetParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    pub n: usize,
    pub d: usize,
    pub ordering_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponents: Option<Vec<Vec<u32>>>,
    #[serde(rename = "L_rowmajor")]
    pub l_rowmajor: Vec<f64>,
}

impl Serialize for SublevelSetParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SublevelSetParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = ParamsJson::deserialize(d)?;
        Self::from_json(&j).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_params(basis: &MonomialBasis, rng: &mut crate::rng::Rng) -> SublevelSetParams {
        let m = basis.size();
        let mut l = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..i {
                l[(i, j)] = rng.random_range(-1.0..1.0);
            }
            l[(i, i)] = rng.random_range(0.2..2.0);
        }
        SublevelSetParams::new(basis.clone(), l).unwrap()
    }

    #[test]
    fn affine_map_matches_direct_evaluation() {
        let basis = MonomialBasis::new(2, 3).unwrap();
        let shift = [1.5, -0.25];
        let scale = [0.3, 2.0];
        let a = basis.affine_map(&shift, &scale);
        for x in [[0.2, 0.7], [-3.0, 4.0], [1.5, -0.25]] {
            let y = [(x[0] - shift[0]) / scale[0], (x[1] - shift[1]) / scale[1]];
            let ex = DVector::from_vec(basis.monomial_vector(&x).unwrap());
            let ey = basis.monomial_vector(&y).unwrap();
            let mapped = &a * ex;
            for (p, q) in mapped.iter().zip(&ey) {
                assert!((p - q).abs() < 1e-9 * (1.0 + q.abs()), "{p} vs {q}");
            }
        }
    }
    #[test]
    fn footnote_ordering() {
        let b = MonomialBasis::new(2, 2).unwrap();
        assert_eq!(
            b.exponents(),
            &[
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![1, 1],
                vec![2, 0],
                vec![0, 2]
            ]
        );
        assert_eq!(
            b.monomial_vector(&[2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 6.0, 4.0, 9.0]
        );
        let b1 = MonomialBasis::new(2, 1).unwrap();
        assert_eq!(
            b1.monomial_vector(&[0.3, -0.7]).unwrap(),
            vec![1.0, 0.3, -0.7]
        );
    }

    #[test]
    fn basis_sizes_are_binomial() {
        for n in 1..5 {
            for d in 1..5 {
                let b = MonomialBasis::new(n, d).unwrap();
                assert_eq!(b.size(), binomial(n + d, d));
                let z = b.monomial_vector(&vec![0.0; n]).unwrap();
                assert_eq!(z[0], 1.0);
                assert!(z[1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn monomial_dimension_mismatch() {
        let b = MonomialBasis::new(2, 2).unwrap();
        assert!(matches!(
            b.monomial_vector(&[1.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn q_at_origin() {
        let b = MonomialBasis::new(2, 2).unwrap();
        let p = SublevelSetParams::identity(b.clone());
        assert_eq!(p.evaluate_q(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(p.membership(&[0.0, 0.0]).unwrap());
        let p2 = p.scaled(2.0).unwrap();
        assert_eq!(p2.evaluate_q(&[0.0, 0.0]).unwrap(), 4.0);
        assert!(!p2.membership(&[0.0, 0.0]).unwrap());
    }

    #[test]
    fn q_matches_naive_quadratic_form() {
        let b = MonomialBasis::new(2, 3).unwrap();
        let mut rng = stream(4, &[]);
        for _ in 0..50 {
            let p = random_params(&b, &mut rng);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let e = b.monomial_vector(&x).unwrap();
            let m = p.gram();
            let mut naive = 0.0;
            for i in 0..e.len() {
                for j in 0..e.len() {
                    naive += e[i] * m[(i, j)] * e[j];
                }
            }
            assert_relative_eq!(p.evaluate_q(&x).unwrap(), naive, max_relative = 1e-12);
        }
    }

    #[test]
    fn unit_disc_membership() {
        let b = MonomialBasis::new(2, 1).unwrap();
        let l = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            (1.0f64 / 3.0).sqrt(),
            (2.0f64 / 3.0).sqrt(),
            (2.0f64 / 3.0).sqrt(),
        ]));
        let p = SublevelSetParams::new(b, l).unwrap();
        let mut rng = stream(8, &[]);
        for _ in 0..1000 {
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let r2: f64 = x[0] * x[0] + x[1] * x[1];
            if (r2 - 1.0).abs() > 1e-9 {
                assert_eq!(p.membership(&x).unwrap(), r2 <= 1.0);
            }
        }
    }

    #[test]
    fn log_det_cases() {
        let b = MonomialBasis::new(2, 2).unwrap();
        assert_eq!(SublevelSetParams::identity(b.clone()).log_det_inv(), 0.0);
        let p = SublevelSetParams::identity(b.clone()).scaled(2.0).unwrap();
        assert_relative_eq!(p.log_det_inv(), -12.0 * 2f64.ln(), epsilon = 1e-12);
        let mut rng = stream(5, &[]);
        for _ in 0..20 {
            let p = random_params(&b, &mut rng);
            let direct = (1.0 / p.gram().determinant()).ln();
            assert_relative_eq!(p.log_det_inv(), direct, max_relative = 1e-9);
        }
    }

    #[test]
    fn invalid_factors_rejected() {
        let b = MonomialBasis::new(2, 1).unwrap();
        let mut l = DMatrix::identity(3, 3);
        l[(1, 1)] = 0.0;
        assert!(matches!(
            SublevelSetParams::new(b.clone(), l.clone()),
            Err(Error::InvalidParameter(_))
        ));
        assert!(log_det_inv_of(&l).is_err());
        let mut u = DMatrix::identity(3, 3);
        u[(0, 2)] = 1.0;
        assert!(SublevelSetParams::new(b, u).is_err());
    }

    #[test]
    fn coverage_counts() {
        let b = MonomialBasis::new(2, 1).unwrap();
        let l = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            (1.0f64 / 3.0).sqrt(),
            (2.0f64 / 3.0).sqrt(),
            (2.0f64 / 3.0).sqrt(),
        ]));
        let p = SublevelSetParams::new(b.clone(), l).unwrap();
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.5, 0.5],
            vec![0.0, 0.9],
            vec![2.0, 0.0],
        ];
        assert_eq!(p.empirical_coverage(&pts).unwrap(), 0.75);
        let origin = vec![vec![0.0, 0.0]; 10];
        assert_eq!(
            SublevelSetParams::identity(b)
                .empirical_coverage(&origin)
                .unwrap(),
            1.0
        );
        assert!(p.empirical_coverage(&[]).is_err());
    }

    #[test]
    fn coverage_is_mean_of_membership() {
        let b = MonomialBasis::new(2, 2).unwrap();
        let mut rng = stream(6, &[]);
        for _ in 0..10 {
            let p = random_params(&b, &mut rng);
            let pts: Vec<Vec<f64>> = (0..200)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let oracle = pts.iter().filter(|x| p.membership(x).unwrap()).count() as f64 / 200.0;
            assert_eq!(p.empirical_coverage(&pts).unwrap(), oracle);
        }
    }

    #[test]
    fn theta_and_json_roundtrip() {
        let b = MonomialBasis::new(2, 2).unwrap();
        let p = random_params(&b, &mut stream(1, &[]));
        let theta = p.theta();
        assert_eq!(theta.len(), 21);
        assert_eq!(SublevelSetParams::from_theta(b, &theta).unwrap(), p);
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"L_rowmajor\""));
        let back: SublevelSetParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn permuted_basis_preserves_membership() {
        let canonical = MonomialBasis::new(2, 2).unwrap();
        // swap x1 x2 <-> x2² and x1 <-> x2
        let perm = [0usize, 2, 1, 5, 4, 3];
        let exps: Vec<Vec<u32>> = perm
            .iter()
            .map(|&i| canonical.exponents()[i].clone())
            .collect();
        let permuted = MonomialBasis::from_exponents(2, exps).unwrap();
        assert_eq!(permuted.ordering_tag(), "custom");
        let mut rng = stream(12, &[]);
        let p = random_params(&canonical, &mut rng);
        let m = p.gram();
        let mp = DMatrix::from_fn(6, 6, |i, j| m[(perm[i], perm[j])]);
        let pp = SublevelSetParams::from_gram(permuted, &mp).unwrap();
        for _ in 0..200 {
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            assert_relative_eq!(
                p.evaluate_q(&x).unwrap(),
                pp.evaluate_q(&x).unwrap(),
                max_relative = 1e-10
            );
        }
        let back: SublevelSetParams =
            serde_json::from_str(&serde_json::to_string(&pp).unwrap()).unwrap();
        assert_eq!(back, pp);
    }

    #[test]
    fn incomplete_custom_basis_rejected() {
        assert!(MonomialBasis::from_exponents(2, vec![vec![0, 0], vec![1, 0]]).is_err());
        assert!(MonomialBasis::from_exponents(
            2,
            vec![
                vec![0, 0],
                vec![2, 0],
                vec![1, 0],
                vec![0, 1],
                vec![1, 1],
                vec![0, 2]
            ]
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn q_is_nonnegative(seed in any::<u64>(), x1 in -10.0f64..10.0, x2 in -10.0f64..10.0) {
            let b = MonomialBasis::new(2, 2).unwrap();
            let p = random_params(&b, &mut stream(seed, &[]));
            prop_assert!(p.evaluate_q(&[x1, x2]).unwrap() >= 0.0);
        }

        #[test]
        fn scaling_shifts_log_det(seed in any::<u64>(), c in 1.0001f64..10.0) {
            let b = MonomialBasis::new(2, 2).unwrap();
            let p = random_params(&b, &mut stream(seed, &[]));
            let diff = p.scaled(c).unwrap().log_det_inv() - p.log_det_inv();
            prop_assert!((diff + 12.0 * c.ln()).abs() < 1e-10);
        }

        #[test]
        fn coverage_monotone_in_psd_order(seed in any::<u64>()) {
            let b = MonomialBasis::new(2, 2).unwrap();
            let mut rng = stream(seed, &[]);
            let p1 = random_params(&b, &mut rng);
            let extra = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-0.5..0.5));
            let m2 = p1.gram() + &extra * extra.transpose();
            let p2 = SublevelSetParams::from_gram(b, &m2).unwrap();
            let pts: Vec<Vec<f64>> = (0..300)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            prop_assert!(p2.empirical_coverage(&pts).unwrap() <= p1.empirical_coverage(&pts).unwrap());
        }
    }
}

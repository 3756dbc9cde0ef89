//! Anisotropic Matérn covariance on range-scaled inputs.
//!
//! All lengthscale information lives in the per-dimension range vector λ:
//! inputs are divided coordinate-wise by λ and an isotropic Matérn kernel is
//! applied to the resulting scaled distance. A range of `+∞` removes a
//! dimension (its scaled coordinate collapses to zero), which is how the
//! estimation layer expresses "this input is irrelevant". The reciprocal 1/λ_l
//! is the relevance of dimension l.

use nalgebra::DMatrix;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-integer smoothness values with closed-form kernels.
pub const SUPPORTED_SMOOTHNESS: [f64; 5] = [0.5, 1.5, 2.5, 3.5, 4.5];

/// Default smoothness used by the emulator when none is requested.
pub const DEFAULT_SMOOTHNESS: f64 = 3.5;

/// Covariance hyperparameters: K(x, x') = σ²·M_ν(q(x, x')) + τ²·1[x = x'],
/// with q the range-scaled Euclidean distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceConfig {
    /// Process variance σ² > 0.
    pub variance: f64,
    /// Per-dimension ranges λ_l ∈ (0, +∞]; +∞ eliminates the dimension.
    #[serde(with = "range_repr")]
    pub ranges: Vec<f64>,
    /// Nugget variance τ² ≥ 0 added on the diagonal.
    pub nugget: f64,
    /// Matérn smoothness ν; must be one of [`SUPPORTED_SMOOTHNESS`].
    pub smoothness: f64,
}

/// JSON has no infinity literal, so eliminated dimensions round-trip as the
/// string "inf" inside the ranges array.
mod range_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Repr> = v
            .iter()
            .map(|&r| if r.is_finite() { Repr::Num(r) } else { Repr::Word("inf".into()) })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<Repr>::deserialize(d)?;
        raw.into_iter()
            .map(|r| match r {
                Repr::Num(v) => Ok(v),
                Repr::Word(w) if w.eq_ignore_ascii_case("inf") => Ok(f64::INFINITY),
                Repr::Word(w) => Err(serde::de::Error::custom(format!("bad range value {w:?}"))),
            })
            .collect()
    }
}

impl CovarianceConfig {
    pub fn new(variance: f64, ranges: Vec<f64>, nugget: f64, smoothness: f64) -> Result<Self> {
        let cfg = Self { variance, ranges, nugget, smoothness };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "variance must be positive and finite, got {}",
                self.variance
            )));
        }
        if !(self.nugget >= 0.0) || self.nugget.is_infinite() && self.nugget > 0.0 {
            return Err(Error::InvalidArgument(format!("nugget must be >= 0, got {}", self.nugget)));
        }
        if self.ranges.is_empty() {
            return Err(Error::InvalidArgument("ranges must be non-empty".into()));
        }
        for (l, &r) in self.ranges.iter().enumerate() {
            // +inf is allowed (eliminated dimension); NaN and non-positive are not.
            if r.is_nan() || r <= 0.0 {
                return Err(Error::InvalidArgument(format!("range[{l}] must be > 0, got {r}")));
            }
        }
        half_integer_index(self.smoothness)?;
        Ok(())
    }

    /// Relevance of each dimension, 1/λ_l (0 for eliminated dimensions).
    pub fn relevances(&self) -> Vec<f64> {
        self.ranges.iter().map(|&r| if r.is_infinite() { 0.0 } else { 1.0 / r }).collect()
    }
}

pub(crate) fn half_integer_index(nu: f64) -> Result<usize> {
    SUPPORTED_SMOOTHNESS
        .iter()
        .position(|&s| s == nu)
        .ok_or(Error::UnsupportedSmoothness(nu))
}

/// Scaled Euclidean distance q(x, x') = sqrt(Σ_l ((x_l − x'_l)/λ_l)²).
///
/// Dimensions with λ_l = +∞ contribute nothing.
pub fn scaled_distance(x: &[f64], y: &[f64], ranges: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != ranges.len() {
        return Err(Error::DimensionMismatch(format!(
            "scaled_distance: |x| = {}, |y| = {}, |ranges| = {}",
            x.len(),
            y.len(),
            ranges.len()
        )));
    }
    let mut s = 0.0;
    for l in 0..x.len() {
        if x[l].is_nan() || y[l].is_nan() {
            return Err(Error::NonFinite(format!("scaled_distance: NaN coordinate at dimension {l}")));
        }
        let d = (x[l] - y[l]) / ranges[l];
        s += d * d;
    }
    Ok(s.sqrt())
}

/// Matérn correlation M_ν(q) with M_ν(0) = 1, for half-integer ν.
///
/// These are the polynomial-times-exponential forms of
/// 2^(1−ν)/Γ(ν) · q^ν · K_ν(q).
#[inline]
pub(crate) fn matern_corr(q: f64, nu_idx: usize) -> f64 {
    let e = (-q).exp();
    match nu_idx {
        0 => e,
        1 => (1.0 + q) * e,
        2 => {
            let q2 = q * q;
            (1.0 + q + q2 / 3.0) * e
        }
        3 => {
            let q2 = q * q;
            (1.0 + q + 0.4 * q2 + q2 * q / 15.0) * e
        }
        4 => {
            let q2 = q * q;
            let q3 = q2 * q;
            (1.0 + q + 3.0 * q2 / 7.0 + 2.0 * q3 / 21.0 + q2 * q2 / 105.0) * e
        }
        _ => unreachable!("validated smoothness index"),
    }
}

/// -M'_ν(q)/q, the factor appearing in range derivatives. Finite at q → 0 for
/// ν ≥ 1.5; the ν = 0.5 case is only ever multiplied by δ² ≤ q², and callers
/// pass q > 0.
#[inline]
pub(crate) fn neg_matern_deriv_over_q(q: f64, nu_idx: usize) -> f64 {
    let e = (-q).exp();
    match nu_idx {
        0 => e / q,
        1 => e,
        2 => (1.0 + q) * e / 3.0,
        3 => {
            let q2 = q * q;
            (3.0 + 3.0 * q + q2) * e / 15.0
        }
        4 => {
            let q2 = q * q;
            (15.0 + 15.0 * q + 6.0 * q2 + q2 * q) * e / 105.0
        }
        _ => unreachable!("validated smoothness index"),
    }
}

/// Matérn covariance σ²·M_ν(q) at scaled distance q ≥ 0.
pub fn matern(q: f64, nu: f64, variance: f64) -> Result<f64> {
    let idx = half_integer_index(nu)?;
    if !(q >= 0.0) {
        return Err(Error::InvalidArgument(format!("matern: q must be >= 0, got {q}")));
    }
    Ok(variance * matern_corr(q, idx))
}

/// Inputs divided coordinate-wise by the ranges, stored row-contiguous.
///
/// Precomputing this once per parameter value keeps the hot block builders
/// free of divisions; (x_i − x_j)/λ and x_i/λ − x_j/λ agree to last-ulp noise.
#[derive(Debug, Clone)]
pub(crate) struct ScaledPoints {
    data: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

impl ScaledPoints {
    pub fn new(x: ArrayView2<'_, f64>, ranges: &[f64]) -> Self {
        let (n, d) = x.dim();
        assert_eq!(d, ranges.len(), "ranges length must match input dimension");
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = x.row(i);
            for l in 0..d {
                data.push(row[l] / ranges[l]);
            }
        }
        Self { data, n, d }
    }

    /// Unscaled view (λ ≡ 1).
    pub fn unscaled(x: ArrayView2<'_, f64>) -> Self {
        let (n, d) = x.dim();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(x.row(i).iter().copied());
        }
        Self { data, n, d }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn dist_sq(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.row(i), self.row(j));
        let mut s = 0.0;
        for l in 0..self.d {
            let d = a[l] - b[l];
            s += d * d;
        }
        s
    }
}

/// Dense covariance matrix over the rows of `x`.
pub fn cov_matrix(x: ArrayView2<'_, f64>, config: &CovarianceConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    let (n, d) = x.dim();
    if d != config.dim() {
        return Err(Error::DimensionMismatch(format!(
            "cov_matrix: X has {d} columns, config has {} ranges",
            config.dim()
        )));
    }
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("cov_matrix: X entry {i} is {v}")));
        }
    }
    let idx = half_integer_index(config.smoothness)?;
    let xs = ScaledPoints::new(x, &config.ranges);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = config.variance + config.nugget;
        for j in 0..i {
            let q = xs.dist_sq(i, j).sqrt();
            let v = config.variance * matern_corr(q, idx);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Trend basis ψ(x) for the process mean ψ(x)'β.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Zero mean, no coefficients.
    None,
    /// Intercept only.
    Constant,
    /// Intercept plus the input coordinates.
    Linear,
}

impl Basis {
    /// Number of coefficients for inputs of dimension d.
    pub fn p(self, d: usize) -> usize {
        match self {
            Basis::None => 0,
            Basis::Constant => 1,
            Basis::Linear => d + 1,
        }
    }

    /// Write ψ(x) into `out` (length `p(d)`).
    pub fn features_into(self, x: &[f64], out: &mut [f64]) {
        match self {
            Basis::None => {}
            Basis::Constant => out[0] = 1.0,
            Basis::Linear => {
                out[0] = 1.0;
                out[1..].copy_from_slice(x);
            }
        }
    }
}

/// Mean model ψ(x)'β with known coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanModel {
    pub basis: Basis,
    pub beta: Vec<f64>,
}

impl MeanModel {
    pub fn zero() -> Self {
        Self { basis: Basis::None, beta: Vec::new() }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.beta.len() != self.basis.p(d) {
            return Err(Error::DimensionMismatch(format!(
                "mean model: basis {:?} over {d} inputs needs {} coefficients, got {}",
                self.basis,
                self.basis.p(d),
                self.beta.len()
            )));
        }
        Ok(())
    }

    pub fn mean_at(&self, x: &[f64]) -> f64 {
        match self.basis {
            Basis::None => 0.0,
            Basis::Constant => self.beta[0],
            Basis::Linear => {
                let mut s = self.beta[0];
                for (b, v) in self.beta[1..].iter().zip(x) {
                    s += b * v;
                }
                s
            }
        }
    }
}

/// Index layout of the log-parameterization θ = (log σ², log λ_1..d, log τ²).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamIndex {
    Variance,
    Range(usize),
    Nugget,
}

/// Parameter vector in the order (σ², λ_1..d, τ²) with a per-entry fixed
/// mask. Steps live in the unconstrained log-parameterization: applying a
/// step multiplies each free entry by exp(step), so values stay positive and
/// a config round-trips exactly (no ln/exp detour for stored values).
///
/// Eliminated dimensions (λ = +∞) and a pinned zero nugget are representable
/// directly; such entries are expected to be fixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub fixed: Vec<bool>,
}

impl ParameterVector {
    pub fn from_config(config: &CovarianceConfig, fix_variance: bool, fix_ranges: &[bool], fix_nugget: bool) -> Self {
        assert_eq!(fix_ranges.len(), config.dim());
        let mut values = Vec::with_capacity(config.dim() + 2);
        let mut fixed = Vec::with_capacity(config.dim() + 2);
        values.push(config.variance);
        fixed.push(fix_variance);
        for (l, &r) in config.ranges.iter().enumerate() {
            values.push(r);
            fixed.push(fix_ranges[l]);
        }
        values.push(config.nugget);
        fixed.push(fix_nugget);
        Self { values, fixed }
    }

    pub fn dim(&self) -> usize {
        self.values.len() - 2
    }

    /// Materialize a covariance config at the given smoothness.
    pub fn to_config(&self, smoothness: f64) -> CovarianceConfig {
        let d = self.dim();
        CovarianceConfig {
            variance: self.values[0],
            ranges: self.values[1..=d].to_vec(),
            nugget: self.values[d + 1],
            smoothness,
        }
    }

    /// Identities of the free entries, in vector order.
    pub fn free_indices(&self) -> Vec<ParamIndex> {
        let d = self.dim();
        (0..self.values.len())
            .filter(|&k| !self.fixed[k])
            .map(|k| {
                if k == 0 {
                    ParamIndex::Variance
                } else if k <= d {
                    ParamIndex::Range(k - 1)
                } else {
                    ParamIndex::Nugget
                }
            })
            .collect()
    }

    pub fn n_free(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }

    /// Multiply the free entries by exp(step), i.e. add `step` in log space.
    pub fn apply_step(&self, step: &[f64]) -> Self {
        assert_eq!(step.len(), self.n_free(), "step length must match free parameter count");
        let mut out = self.clone();
        let mut k = 0;
        for (v, f) in out.values.iter_mut().zip(&out.fixed) {
            if !*f {
                *v *= step[k].exp();
                k += 1;
            }
        }
        out
    }
}

/// Dense derivative matrices ∂K/∂θ_k of [`cov_matrix`] with respect to the
/// free entries of the log-parameterization, in [`ParameterVector`] order.
pub fn cov_gradients(
    x: ArrayView2<'_, f64>,
    config: &CovarianceConfig,
    free: &[ParamIndex],
) -> Result<Vec<DMatrix<f64>>> {
    config.validate()?;
    let (n, d) = x.dim();
    if d != config.dim() {
        return Err(Error::DimensionMismatch(format!(
            "cov_gradients: X has {d} columns, config has {} ranges",
            config.dim()
        )));
    }
    let idx = half_integer_index(config.smoothness)?;
    let xs = ScaledPoints::new(x, &config.ranges);
    let mut out: Vec<DMatrix<f64>> = free.iter().map(|_| DMatrix::zeros(n, n)).collect();
    for i in 0..n {
        for (g, which) in out.iter_mut().zip(free) {
            match *which {
                ParamIndex::Variance => g[(i, i)] = config.variance,
                ParamIndex::Nugget => g[(i, i)] = config.nugget,
                ParamIndex::Range(_) => {}
            }
        }
        for j in 0..i {
            let q = xs.dist_sq(i, j).sqrt();
            for (g, which) in out.iter_mut().zip(free) {
                let v = match *which {
                    ParamIndex::Variance => config.variance * matern_corr(q, idx),
                    ParamIndex::Nugget => 0.0,
                    ParamIndex::Range(l) => {
                        if q == 0.0 {
                            0.0
                        } else {
                            let delta = xs.row(i)[l] - xs.row(j)[l];
                            config.variance * neg_matern_deriv_over_q(q, idx) * delta * delta
                        }
                    }
                };
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
    }
    Ok(out)
}

/// One conditioning block: covariance over `rows` of the scaled points, with
/// the nugget added only on diagonal entries flagged in `nugget_on`, plus the
/// derivative matrices for `free` when requested. Shares one kernel
/// evaluation per pair between K and all its derivatives.
pub(crate) fn build_block(
    xs: &ScaledPoints,
    rows: &[usize],
    config: &CovarianceConfig,
    nugget_on: &dyn Fn(usize) -> bool,
    free: Option<&[ParamIndex]>,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let idx = half_integer_index(config.smoothness).expect("validated smoothness");
    let b = rows.len();
    let mut k = DMatrix::zeros(b, b);
    let mut grads: Vec<DMatrix<f64>> =
        free.map(|f| f.iter().map(|_| DMatrix::zeros(b, b)).collect()).unwrap_or_default();
    for a in 0..b {
        let with_nugget = nugget_on(rows[a]);
        k[(a, a)] = config.variance + if with_nugget { config.nugget } else { 0.0 };
        if let Some(f) = free {
            for (g, which) in grads.iter_mut().zip(f) {
                match *which {
                    ParamIndex::Variance => g[(a, a)] = config.variance,
                    ParamIndex::Nugget => g[(a, a)] = if with_nugget { config.nugget } else { 0.0 },
                    ParamIndex::Range(_) => {}
                }
            }
        }
        let ra = xs.row(rows[a]);
        for c in 0..a {
            let rc = xs.row(rows[c]);
            let mut q2 = 0.0;
            for l in 0..xs.d {
                let dl = ra[l] - rc[l];
                q2 += dl * dl;
            }
            let q = q2.sqrt();
            let e = (-q).exp();
            let corr = match idx {
                0 => e,
                1 => (1.0 + q) * e,
                2 => (1.0 + q + q * q / 3.0) * e,
                3 => {
                    let qq = q * q;
                    (1.0 + q + 0.4 * qq + qq * q / 15.0) * e
                }
                _ => {
                    let qq = q * q;
                    (1.0 + q + 3.0 * qq / 7.0 + 2.0 * qq * q / 21.0 + qq * qq / 105.0) * e
                }
            };
            let v = config.variance * corr;
            k[(a, c)] = v;
            k[(c, a)] = v;
            if let Some(f) = free {
                // -M'(q)/q sharing the already computed exp(-q)
                let dfac = if q == 0.0 {
                    0.0
                } else {
                    match idx {
                        0 => e / q,
                        1 => e,
                        2 => (1.0 + q) * e / 3.0,
                        3 => (3.0 + 3.0 * q + q * q) * e / 15.0,
                        _ => {
                            let qq = q * q;
                            (15.0 + 15.0 * q + 6.0 * qq + qq * q) * e / 105.0
                        }
                    }
                };
                for (g, which) in grads.iter_mut().zip(f) {
                    let gv = match *which {
                        ParamIndex::Variance => v,
                        ParamIndex::Nugget => 0.0,
                        ParamIndex::Range(l) => {
                            let dl = ra[l] - rc[l];
                            config.variance * dfac * dl * dl
                        }
                    };
                    g[(a, c)] = gv;
                    g[(c, a)] = gv;
                }
            }
        }
    }
    (k, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    // Frozen against an independent Bessel-function evaluation of
    // 2^(1-v)/Gamma(v) q^v K_v(q), 20 significant digits.
    const BESSEL_ORACLE: [(f64, f64, f64); 5] = [
        (1.0, 0.5, 0.36787944117144232160),
        (1.0, 1.5, 0.73575888234288464319),
        (1.3, 2.5, 0.78034936738738940821),
        (0.7, 3.5, 0.95288098660187600987),
        (2.2, 4.5, 0.72149276066680477436),
    ];

    #[test]
    fn matern_matches_bessel_oracle() {
        for &(q, nu, want) in &BESSEL_ORACLE {
            let got = matern(q, nu, 1.0).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-14);
        }
    }

    #[test]
    fn matern_at_zero_is_variance() {
        for &nu in &SUPPORTED_SMOOTHNESS {
            assert_eq!(matern(0.0, nu, 2.75).unwrap(), 2.75);
        }
    }

    #[test]
    fn matern_rejects_unsupported_smoothness() {
        let err = matern(1.0, 2.0, 1.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0.5") && msg.contains("4.5"), "{msg}");
    }

    #[test]
    fn scaled_distance_basics() {
        // equal points
        assert_eq!(scaled_distance(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
        // unit ranges reduce to Euclidean distance
        let q = scaled_distance(&[0.0, 0.0], &[3.0, 4.0], &[1.0, 1.0]).unwrap();
        assert_eq!(q, 5.0);
        // anisotropic scaling
        let q = scaled_distance(&[0.0, 0.0], &[2.0, 6.0], &[2.0, 3.0]).unwrap();
        assert_relative_eq!(q, (1.0f64 + 4.0).sqrt(), max_relative = 1e-15);
        // infinite range drops the dimension
        let q = scaled_distance(&[0.0, 0.0], &[2.0, 6.0], &[2.0, f64::INFINITY]).unwrap();
        assert_eq!(q, 1.0);
    }

    #[test]
    fn scaled_distance_errors() {
        assert!(scaled_distance(&[0.0], &[0.0, 1.0], &[1.0]).is_err());
        assert!(scaled_distance(&[f64::NAN], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn cov_matrix_singleton_and_pair() {
        let x = array![[0.0]];
        let cfg = CovarianceConfig::new(2.0, vec![1.0], 1.0, 0.5).unwrap();
        let k = cov_matrix(x.view(), &cfg).unwrap();
        assert_eq!(k[(0, 0)], 3.0);

        let x = array![[0.0], [1.0]];
        let cfg = CovarianceConfig::new(1.0, vec![1.0], 0.0, 0.5).unwrap();
        let k = cov_matrix(x.view(), &cfg).unwrap();
        assert_relative_eq!(k[(0, 1)], (-1.0f64).exp(), max_relative = 1e-15);
        assert_eq!(k[(1, 0)], k[(0, 1)]);
    }

    #[test]
    fn cov_matrix_is_positive_definite_on_scattered_points() {
        let mut rng = crate::testutil::rng(7);
        let x = crate::testutil::uniform_points(&mut rng, 5, 3);
        let cfg = CovarianceConfig::new(1.3, vec![0.8, 1.1, 0.6], 0.0, 3.5).unwrap();
        let k = cov_matrix(x.view(), &cfg).unwrap();
        let eig = k.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > 0.0), "eigenvalues {:?}", eig);
    }

    #[test]
    fn dimension_elimination_matches_column_deletion() {
        let mut rng = crate::testutil::rng(3);
        let x = crate::testutil::uniform_points(&mut rng, 12, 3);
        let x_dropped = x.select(ndarray::Axis(1), &[0, 2]);
        let full = CovarianceConfig::new(1.0, vec![0.7, f64::INFINITY, 1.4], 0.1, 2.5).unwrap();
        let dropped = CovarianceConfig::new(1.0, vec![0.7, 1.4], 0.1, 2.5).unwrap();
        let ka = cov_matrix(x.view(), &full).unwrap();
        let kb = cov_matrix(x_dropped.view(), &dropped).unwrap();
        assert_eq!(ka, kb);
    }

    #[test]
    fn gradients_have_exact_variance_and_nugget_slices() {
        let mut rng = crate::testutil::rng(11);
        let x = crate::testutil::uniform_points(&mut rng, 8, 2);
        let cfg = CovarianceConfig::new(1.7, vec![0.9, 1.2], 0.3, 1.5).unwrap();
        let free = [ParamIndex::Variance, ParamIndex::Range(0), ParamIndex::Range(1), ParamIndex::Nugget];
        let grads = cov_gradients(x.view(), &cfg, &free).unwrap();
        let k = cov_matrix(x.view(), &cfg).unwrap();
        // d/d log sigma^2 = K - tau^2 I, d/d log tau^2 = tau^2 I
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { k[(i, j)] - cfg.nugget } else { k[(i, j)] };
                assert_relative_eq!(grads[0][(i, j)], want, max_relative = 1e-15);
                let want_n = if i == j { cfg.nugget } else { 0.0 };
                assert_eq!(grads[3][(i, j)], want_n);
            }
        }
    }

    #[test]
    fn range_gradients_match_central_differences() {
        let mut rng = crate::testutil::rng(23);
        for &nu in &SUPPORTED_SMOOTHNESS {
            let x = crate::testutil::uniform_points(&mut rng, 10, 3);
            let cfg = CovarianceConfig::new(1.4, vec![0.6, 1.3, 0.9], 0.05, nu).unwrap();
            let free: Vec<ParamIndex> = (0..3).map(ParamIndex::Range).collect();
            let grads = cov_gradients(x.view(), &cfg, &free).unwrap();
            let h = 1e-6;
            for l in 0..3 {
                let mut up = cfg.clone();
                up.ranges[l] = (up.ranges[l].ln() + h).exp();
                let mut dn = cfg.clone();
                dn.ranges[l] = (dn.ranges[l].ln() - h).exp();
                let ku = cov_matrix(x.view(), &up).unwrap();
                let kd = cov_matrix(x.view(), &dn).unwrap();
                let fd = (ku - kd) / (2.0 * h);
                for i in 0..10 {
                    for j in 0..10 {
                        let a = grads[l][(i, j)];
                        let b = fd[(i, j)];
                        assert!(
                            (a - b).abs() <= 1e-5 * (1.0 + b.abs()),
                            "nu={nu} l={l} ({i},{j}): {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn block_builder_agrees_with_dense_matrices() {
        let mut rng = crate::testutil::rng(5);
        let x = crate::testutil::uniform_points(&mut rng, 9, 4);
        let cfg = CovarianceConfig::new(2.2, vec![0.5, 2.0, 1.0, 0.8], 0.2, 3.5).unwrap();
        let free =
            [ParamIndex::Variance, ParamIndex::Range(0), ParamIndex::Range(2), ParamIndex::Nugget];
        let xs = ScaledPoints::new(x.view(), &cfg.ranges);
        let rows = [3usize, 0, 7, 5];
        let (k, grads) = build_block(&xs, &rows, &cfg, &|_| true, Some(&free));
        let k_full = cov_matrix(x.view(), &cfg).unwrap();
        let g_full = cov_gradients(x.view(), &cfg, &free).unwrap();
        for a in 0..rows.len() {
            for c in 0..rows.len() {
                assert_relative_eq!(k[(a, c)], k_full[(rows[a], rows[c])], max_relative = 1e-12);
                for (gb, gf) in grads.iter().zip(&g_full) {
                    assert_relative_eq!(gb[(a, c)], gf[(rows[a], rows[c])], max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn scaling_consistency_prescaled_vs_direct() {
        let mut rng = crate::testutil::rng(13);
        let x = crate::testutil::uniform_points(&mut rng, 20, 3);
        let ranges = [0.3, 5.0, 1.7];
        let xs = ScaledPoints::new(x.view(), &ranges);
        for i in 0..20 {
            for j in 0..i {
                let direct = scaled_distance(
                    x.row(i).as_slice().unwrap(),
                    x.row(j).as_slice().unwrap(),
                    &ranges,
                )
                .unwrap();
                let pre = xs.dist_sq(i, j).sqrt();
                assert!((direct - pre).abs() <= 1e-12 * (1.0 + direct), "{direct} vs {pre}");
            }
        }
    }

    #[test]
    fn parameter_vector_round_trips_exactly() {
        let cfg = CovarianceConfig::new(2.5, vec![0.05, f64::INFINITY, 3.0], 0.0, 3.5).unwrap();
        let theta = ParameterVector::from_config(&cfg, false, &[false, true, false], true);
        let back = theta.to_config(3.5);
        assert_eq!(back.variance, cfg.variance);
        assert_eq!(back.ranges, cfg.ranges);
        assert_eq!(back.nugget, 0.0);
        assert_eq!(theta.n_free(), 3);
        assert_eq!(
            theta.free_indices(),
            vec![ParamIndex::Variance, ParamIndex::Range(0), ParamIndex::Range(2)]
        );
    }

    #[test]
    fn apply_step_respects_fixed_entries() {
        let cfg = CovarianceConfig::new(1.0, vec![1.0, f64::INFINITY], 0.0, 1.5).unwrap();
        let theta = ParameterVector::from_config(&cfg, false, &[false, true], true);
        let moved = theta.apply_step(&[0.5, -0.25]);
        assert_eq!(moved.values[0], 0.5f64.exp());
        assert_eq!(moved.values[1], (-0.25f64).exp());
        assert_eq!(moved.values[2], f64::INFINITY);
        assert_eq!(moved.values[3], 0.0);
    }

    #[test]
    fn config_json_round_trips_eliminated_dimensions() {
        let cfg = CovarianceConfig::new(2.5, vec![0.4, f64::INFINITY, 1.75], 0.01, 3.5).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"inf\""));
        let back: CovarianceConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.variance, cfg.variance);
        assert_eq!(back.ranges, cfg.ranges);
        assert_eq!(back.nugget, cfg.nugget);
        assert!(serde_json::from_str::<CovarianceConfig>(
            "{\"variance\":1.0,\"ranges\":[\"huge\"],\"nugget\":0.0,\"smoothness\":1.5}"
        )
        .is_err());
    }
}

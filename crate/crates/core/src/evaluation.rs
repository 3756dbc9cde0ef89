//! Test functions, GP simulation, proper scoring rules, and the benchmark
//! harness that reruns the reference study protocols at desk scale.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::covariance::{
    cov_matrix, half_integer_index, matern_corr, CovarianceConfig, MeanModel, ScaledPoints,
};
use crate::design::lhs;
use crate::error::{Error, Result};
use crate::estimation::{
    default_initial, fisher_step, fit, line_search, penalty, sample_variance, EstimationConfig,
    Method,
};
use crate::geometry::{Conditioning, ConditioningPlan};
use crate::likelihood::{
    cholesky_with_jitter, exact_gp_loglik, exact_gp_score, sparse_inverse_cholesky, vecchia_loglik,
    Dataset, DENSE_CAP,
};
use crate::prediction::{
    corrected_variances, predict, sample_joint, variance_correction, PredictiveDistribution,
};

const LN_2PI: f64 = 1.8378770664093453;
/// Sample pairs used in the Monte-Carlo energy-score estimate.
const ENERGY_PAIRS: usize = 100;

// ---------------------------------------------------------------------------
// test functions

fn unit_cube(x: &[f64], d: usize, name: &str) -> Result<()> {
    if x.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "{name} takes {d} inputs, got {}",
            x.len()
        )));
    }
    for (l, v) in x.iter().enumerate() {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::InvalidArgument(format!(
                "{name} input {l} = {v} outside the unit cube"
            )));
        }
    }
    Ok(())
}

fn affine(u: f64, lo: f64, hi: f64) -> f64 {
    lo + u * (hi - lo)
}

/// Water-flow rate through a borehole, on inputs rescaled to [0,1]^8.
pub fn borehole(x: &[f64]) -> Result<f64> {
    unit_cube(x, 8, "borehole")?;
    let rw = affine(x[0], 0.05, 0.15);
    let r = affine(x[1], 100.0, 50_000.0);
    let tu = affine(x[2], 63_070.0, 115_600.0);
    let hu = affine(x[3], 990.0, 1110.0);
    let tl = affine(x[4], 63.1, 116.0);
    let hl = affine(x[5], 700.0, 820.0);
    let l = affine(x[6], 1120.0, 1680.0);
    let kw = affine(x[7], 9855.0, 12_045.0);
    let lnr = (r / rw).ln();
    Ok(2.0 * std::f64::consts::PI * tu * (hu - hl)
        / (lnr * (1.0 + 2.0 * l * tu / (lnr * rw * rw * kw) + tu / tl)))
}

/// Distance of a four-segment planar robot arm's hand from the origin;
/// inputs are four joint angles (rescaled from [0,2π]) then four segment
/// lengths.
pub fn robot_arm(x: &[f64]) -> Result<f64> {
    unit_cube(x, 8, "robot_arm")?;
    let mut angle = 0.0;
    let (mut u, mut v) = (0.0, 0.0);
    for i in 0..4 {
        angle += 2.0 * std::f64::consts::PI * x[i];
        u += x[4 + i] * angle.cos();
        v += x[4 + i] * angle.sin();
    }
    Ok(u.hypot(v))
}

/// Cycle time of a piston moving within a cylinder, on inputs rescaled to
/// [0,1]^7.
pub fn piston(x: &[f64]) -> Result<f64> {
    unit_cube(x, 7, "piston")?;
    let m = affine(x[0], 30.0, 60.0);
    let s = affine(x[1], 0.005, 0.020);
    let v0 = affine(x[2], 0.002, 0.010);
    let k = affine(x[3], 1000.0, 5000.0);
    let p0 = affine(x[4], 90_000.0, 110_000.0);
    let ta = affine(x[5], 290.0, 296.0);
    let t0 = affine(x[6], 340.0, 360.0);
    let a = p0 * s + 19.62 * m - k * v0 / s;
    let v = s / (2.0 * k) * ((a * a + 4.0 * k * p0 * v0 / t0 * ta).sqrt() - a);
    Ok(2.0 * std::f64::consts::PI * (m / (k + s * s * p0 * v0 / t0 * ta / (v * v))).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunction {
    Borehole,
    RobotArm,
    Piston,
}

impl TestFunction {
    pub const ALL: [TestFunction; 3] =
        [TestFunction::Borehole, TestFunction::RobotArm, TestFunction::Piston];

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::Borehole => "borehole",
            TestFunction::RobotArm => "robot-arm",
            TestFunction::Piston => "piston",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "borehole" => Ok(TestFunction::Borehole),
            "robot-arm" => Ok(TestFunction::RobotArm),
            "piston" => Ok(TestFunction::Piston),
            other => Err(Error::InvalidArgument(format!(
                "unknown test function '{other}'; known: borehole, robot-arm, piston"
            ))),
        }
    }

    pub fn dim(self) -> usize {
        match self {
            TestFunction::Borehole | TestFunction::RobotArm => 8,
            TestFunction::Piston => 7,
        }
    }

    pub fn eval(self, x: &[f64]) -> Result<f64> {
        match self {
            TestFunction::Borehole => borehole(x),
            TestFunction::RobotArm => robot_arm(x),
            TestFunction::Piston => piston(x),
        }
    }

    /// Evaluate every row of `x`.
    pub fn evaluate_rows(self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let values: Result<Vec<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.eval(x.row(i).as_slice().unwrap()))
            .collect();
        Ok(Array1::from_vec(values?))
    }

    fn salt(self) -> u64 {
        match self {
            TestFunction::Borehole => 11,
            TestFunction::RobotArm => 12,
            TestFunction::Piston => 13,
        }
    }
}

/// Add iid N(0, sd²) observation noise in place.
pub fn add_noise(y: &mut Array1<f64>, sd: f64, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for v in y.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sd * z;
    }
}

/// Uniform random points on [0,1]^d; the convention for test inputs.
pub fn uniform_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
    use rand::RngExt;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random::<f64>())
}

// ---------------------------------------------------------------------------
// GP simulation

/// Draw one response vector from N(mean, K) at the given inputs.
///
/// With `m = None` the draw is exact through a dense Cholesky factor and n
/// is capped at [`DENSE_CAP`]. With `m = Some(m)` the draw is sequential
/// through the ordered-conditional factor on scaled inputs, which is exact
/// for m ≥ n−1 and an approximation below that.
pub fn simulate_gp(
    x: ArrayView2<'_, f64>,
    config: &CovarianceConfig,
    mean: &MeanModel,
    seed: u64,
    m: Option<usize>,
) -> Result<Array1<f64>> {
    config.validate()?;
    let n = x.nrows();
    let d = x.ncols();
    if d != config.dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {d} columns, covariance has {} ranges",
            config.dim()
        )));
    }
    mean.validate(d)?;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot simulate zero points".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("simulation inputs".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut dev = vec![0.0; n];
    match m {
        None => {
            if n > DENSE_CAP {
                return Err(Error::DenseCapExceeded { n, cap: DENSE_CAP });
            }
            let k = cov_matrix(x, config)?;
            let chol = cholesky_with_jitter(&k, config.variance, 0)?.0;
            let l = chol.l_dirty();
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..=i {
                    s += l[(i, j)] * z[j];
                }
                dev[i] = s;
            }
        }
        Some(m) => {
            let xs = ScaledPoints::new(x, &config.ranges);
            let plan = ConditioningPlan::build_points(&xs, m, Conditioning::NearestNeighbors);
            let u = sparse_inverse_cholesky(x, config, &plan)?;
            let in_plan = u.solve_transpose(&z);
            for (j, &row) in plan.order.iter().enumerate() {
                dev[row as usize] = in_plan[j];
            }
        }
    }

    Ok(Array1::from_shape_fn(n, |i| {
        mean.mean_at(x.row(i).as_slice().unwrap()) + dev[i]
    }))
}

// ---------------------------------------------------------------------------
// scores

/// Difference in log scores between the reference density and an
/// approximation of it, on the same data. Averaged over datasets drawn from
/// the reference this estimates their KL divergence.
pub fn dls(exact_loglik: f64, approx_loglik: f64) -> f64 {
    exact_loglik - approx_loglik
}

/// Closed-form CRPS of a Gaussian predictive distribution at `y`.
pub fn normal_crps(y: f64, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return (y - mean).abs();
    }
    let z = (y - mean) / sd;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    sd * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 0.5 * std::f64::consts::FRAC_2_SQRT_PI)
}

/// Averaged predictive scores over a set of test points. Intervals are
/// central 95% intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Number of test points scored.
    pub n: usize,
    pub rmse: f64,
    /// Root mean square percentage error; absent when every truth is zero.
    pub rmspe: Option<f64>,
    /// Test points excluded from RMSPE because the truth is exactly zero.
    pub rmspe_excluded: usize,
    /// Share of truths inside the 95% interval, in percent.
    pub interval_coverage: f64,
    pub interval_width: f64,
    pub interval_score: f64,
    pub log_score: f64,
    pub crps: f64,
    /// Monte-Carlo energy score of the joint prediction, when samples were
    /// provided.
    pub energy: Option<f64>,
}

/// Score marginal Gaussian predictions N(means[i], variances[i]) against the
/// truth.
pub fn score_moments(y_true: &[f64], means: &[f64], variances: &[f64]) -> Result<ScoreReport> {
    let n = y_true.len();
    if n == 0 || means.len() != n || variances.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "scoring needs matching nonempty inputs, got {n} truths, {} means, {} variances",
            means.len(),
            variances.len()
        )));
    }
    if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "predictive variances must be positive and finite".into(),
        ));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = normal.inverse_cdf(0.975);
    let alpha = 0.05;

    let mut se = 0.0;
    let mut pe = 0.0;
    let mut pe_n = 0usize;
    let mut covered = 0usize;
    let mut width = 0.0;
    let mut iscore = 0.0;
    let mut logscore = 0.0;
    let mut crps = 0.0;
    for i in 0..n {
        let (y, mu, sd) = (y_true[i], means[i], variances[i].sqrt());
        let err = y - mu;
        se += err * err;
        if y != 0.0 {
            let p = 100.0 * err / y;
            pe += p * p;
            pe_n += 1;
        }
        let half = z * sd;
        let (lo, hi) = (mu - half, mu + half);
        if (lo..=hi).contains(&y) {
            covered += 1;
        }
        width += 2.0 * half;
        iscore += 2.0 * half
            + 2.0 / alpha * (lo - y).max(0.0)
            + 2.0 / alpha * (y - hi).max(0.0);
        logscore += 0.5 * LN_2PI + sd.ln() + 0.5 * (err / sd) * (err / sd);
        crps += normal_crps(y, mu, sd);
    }
    let nf = n as f64;
    Ok(ScoreReport {
        n,
        rmse: (se / nf).sqrt(),
        rmspe: (pe_n > 0).then(|| (pe / pe_n as f64).sqrt()),
        rmspe_excluded: n - pe_n,
        interval_coverage: 100.0 * covered as f64 / nf,
        interval_width: width / nf,
        interval_score: iscore / nf,
        log_score: logscore / nf,
        crps: crps / nf,
        energy: None,
    })
}

/// Monte-Carlo energy score of a joint sample (rows are draws) against the
/// observed vector: mean distance to the truth minus half the mean distance
/// between consecutive draw pairs.
pub fn energy_score(samples: ArrayView2<'_, f64>, y_true: &[f64]) -> Result<f64> {
    let (s, np) = samples.dim();
    if np != y_true.len() {
        return Err(Error::DimensionMismatch(format!(
            "samples have {np} columns, truth has {} entries",
            y_true.len()
        )));
    }
    if s < 2 || s % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "energy score needs an even number of draws, at least 2, got {s}"
        )));
    }
    let dist = |a: ndarray::ArrayView1<'_, f64>, b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let to_truth: f64 =
        (0..s).map(|i| dist(samples.row(i), y_true)).sum::<f64>() / s as f64;
    let between: f64 = (0..s / 2)
        .map(|k| {
            let a = samples.row(2 * k);
            let b = samples.row(2 * k + 1);
            a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / (s / 2) as f64;
    Ok(to_truth - 0.5 * between)
}

/// Full scoring suite for a predictive distribution, with the calibration
/// correction applied to the variances. Joint samples (rows are draws in
/// test order) switch on the energy score.
pub fn score_suite(
    dist: &PredictiveDistribution,
    y_true: &[f64],
    joint_samples: Option<ArrayView2<'_, f64>>,
) -> Result<ScoreReport> {
    let mut report = score_moments(y_true, &dist.means, &corrected_variances(dist))?;
    if let Some(samples) = joint_samples {
        report.energy = Some(energy_score(samples, y_true)?);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// dense reference fit and prediction

/// Result of the dense maximum-likelihood fit used as the exact baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactFit {
    pub config: CovarianceConfig,
    pub basis: crate::covariance::Basis,
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ExactFit {
    pub fn mean_model(&self) -> MeanModel {
        MeanModel { basis: self.basis, beta: self.beta.clone() }
    }
}

/// Fisher scoring against the dense likelihood; no conditioning
/// approximation anywhere. Plan-related settings (method, m_est, n_est,
/// reorder schedule) are ignored; n is capped at [`DENSE_CAP`].
pub fn exact_gp_fit(data: &Dataset, settings: &EstimationConfig) -> Result<ExactFit> {
    settings.validate()?;
    let initial = match &settings.initial {
        Some(cfg) => {
            cfg.validate()?;
            let mut cfg = cfg.clone();
            cfg.smoothness = settings.smoothness;
            cfg
        }
        None => default_initial(data, settings)?.0,
    };
    let fixed_ranges: Vec<bool> = initial.ranges.iter().map(|r| r.is_infinite()).collect();
    let mut theta = crate::covariance::ParameterVector::from_config(
        &initial,
        false,
        &fixed_ranges,
        !settings.estimate_nugget,
    );
    let free = theta.free_indices();
    let var_pos = free.iter().position(|p| *p == crate::covariance::ParamIndex::Variance);
    let s2y = sample_variance(data.responses.as_slice().unwrap()).max(f64::MIN_POSITIVE);
    let penalized = |cfg: &CovarianceConfig, ll: f64| -> f64 {
        ll - penalty(cfg.variance, s2y, settings.penalty_weight).0
    };

    let mut cfg = theta.to_config(settings.smoothness);
    let mut eval = exact_gp_score(data, &cfg, settings.basis, &free)?;
    let mut obj = penalized(&cfg, eval.loglik);
    if !obj.is_finite() {
        return Err(Error::NonFiniteObjective);
    }

    let mut converged = false;
    let mut iterations = 0;
    let mut stalls = 0;
    for k in 1..=settings.max_iterations {
        iterations = k;
        let (_, pen_g, pen_c) = penalty(cfg.variance, s2y, settings.penalty_weight);
        let mut grad = eval.gradient.clone();
        let mut info = eval.fisher.clone();
        if let Some(v) = var_pos {
            grad[v] -= pen_g;
            info[(v, v)] += pen_c;
        }
        let try_candidate = |cand: &crate::covariance::ParameterVector| {
            let c = cand.to_config(settings.smoothness);
            match exact_gp_score(data, &c, settings.basis, &[]) {
                Ok(e) => {
                    let o = penalized(&c, e.loglik);
                    o.is_finite().then_some((o, e.beta))
                }
                Err(_) => None,
            }
        };

        let mut accepted: Option<(crate::covariance::ParameterVector, f64)> = None;
        let mut step_vec: Vec<f64> = Vec::new();
        if let Some(s) = fisher_step(&info, &grad) {
            let step: Vec<f64> = s.iter().copied().collect();
            let cand = theta.apply_step(&step);
            if let Some((o, _)) = try_candidate(&cand) {
                if o > obj {
                    accepted = Some((cand, o));
                    step_vec = step;
                }
            }
        }
        if accepted.is_none() {
            if let Some((cand, o, _, step)) = line_search(&theta, &grad, obj, try_candidate) {
                accepted = Some((cand, o));
                step_vec = step;
            }
        }

        match accepted {
            None => {
                stalls += 1;
                if stalls >= 3 {
                    break;
                }
            }
            Some((next, next_obj)) => {
                stalls = 0;
                let dot: f64 = step_vec.iter().zip(grad.iter()).map(|(s, g)| s * g).sum();
                theta = next;
                cfg = theta.to_config(settings.smoothness);
                eval = exact_gp_score(data, &cfg, settings.basis, &free)?;
                obj = next_obj;
                if dot < settings.termination_tol {
                    converged = true;
                    break;
                }
            }
        }
    }

    let mut final_cfg = theta.to_config(settings.smoothness);
    for r in final_cfg.ranges.iter_mut() {
        if *r >= settings.relevance_threshold {
            *r = f64::INFINITY;
        }
    }
    let final_eval = exact_gp_score(data, &final_cfg, settings.basis, &[])?;
    Ok(ExactFit {
        config: final_cfg,
        basis: settings.basis,
        beta: final_eval.beta,
        iterations,
        converged,
    })
}

/// Dense conditional prediction: exact posterior mean and latent variance at
/// each prediction point. The baseline the approximate methods are judged
/// against.
pub fn exact_gp_predict(
    data: &Dataset,
    config: &CovarianceConfig,
    mean: &MeanModel,
    x_pred: ArrayView2<'_, f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    mean.validate(data.d())?;
    let n = data.n();
    let np = x_pred.nrows();
    if x_pred.ncols() != data.d() {
        return Err(Error::DimensionMismatch(format!(
            "prediction inputs have {} columns, training data has {}",
            x_pred.ncols(),
            data.d()
        )));
    }
    if n > DENSE_CAP {
        return Err(Error::DenseCapExceeded { n, cap: DENSE_CAP });
    }
    if x_pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction inputs".into()));
    }

    let k = cov_matrix(data.inputs.view(), config)?;
    let chol = cholesky_with_jitter(&k, config.variance, 0)?.0;
    let r = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            data.responses[i] - mean.mean_at(data.inputs.row(i).as_slice().unwrap())
        }),
    );
    let alpha = chol.solve(&r);

    let nu_idx = half_integer_index(config.smoothness)?;
    let xo = ScaledPoints::new(data.inputs.view(), &config.ranges);
    let xp = ScaledPoints::new(x_pred, &config.ranges);
    let mut cross = DMatrix::zeros(n, np);
    for j in 0..np {
        let pj = xp.row(j);
        for i in 0..n {
            let q = xo
                .row(i)
                .iter()
                .zip(pj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            cross[(i, j)] = config.variance * matern_corr(q, nu_idx);
        }
    }
    let kinv_cross = chol.solve(&cross);

    let mut means = Vec::with_capacity(np);
    let mut vars = Vec::with_capacity(np);
    for j in 0..np {
        let kj = cross.column(j);
        means.push(mean.mean_at(x_pred.row(j).as_slice().unwrap()) + kj.dot(&alpha));
        vars.push((config.variance - kj.dot(&kinv_cross.column(j))).max(0.0));
    }
    Ok((means, vars))
}

// ---------------------------------------------------------------------------
// benchmark harness

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Known-parameter likelihood-approximation accuracy (dLS) on draws from
    /// an anisotropic Matérn GP in d=10.
    MaternSim,
    /// Borehole prediction accuracy at small n against the dense baseline.
    BoreholeCurves,
    /// Prediction accuracy of all methods on the three test functions.
    TestfunSuite,
    /// Noise-variance recovery on the piston function.
    NoiseRecovery,
    /// Calibration and joint-prediction scores on the piston function.
    PistonUq,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::MaternSim,
        Protocol::BoreholeCurves,
        Protocol::TestfunSuite,
        Protocol::NoiseRecovery,
        Protocol::PistonUq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::MaternSim => "matern_sim",
            Protocol::BoreholeCurves => "borehole_curves",
            Protocol::TestfunSuite => "testfun_suite",
            Protocol::NoiseRecovery => "noise_recovery",
            Protocol::PistonUq => "piston_uq",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        let wanted = s.replace('-', "_");
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == wanted)
            .ok_or_else(|| {
                let known: Vec<&str> = Protocol::ALL.iter().map(|p| p.name()).collect();
                Error::UnknownProtocol(format!("'{s}'; known protocols: {}", known.join(", ")))
            })
    }
}

/// Scale knobs for one benchmark run. [`BenchmarkConfig::for_protocol`]
/// fills the defaults that mirror the reference study at desk scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub protocol: Protocol,
    /// Training sizes; one result block per entry.
    pub n_train: Vec<usize>,
    pub n_test: usize,
    /// Conditioning-set sizes during estimation.
    pub m_values: Vec<usize>,
    /// Conditioning-set size during prediction, where the protocol does not
    /// tie it to m.
    pub m_pred: usize,
    pub replicates: usize,
    /// Test functions to run; only read by the testfun_suite protocol.
    pub functions: Vec<TestFunction>,
    /// Whether borehole_curves also runs the dense exact baseline.
    pub include_exact: bool,
    /// Observation-noise standard deviation for noise_recovery.
    pub noise_sd: f64,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn for_protocol(protocol: Protocol) -> Self {
        let base = Self {
            protocol,
            n_train: vec![],
            n_test: 0,
            m_values: vec![],
            m_pred: 0,
            replicates: 1,
            functions: vec![],
            include_exact: false,
            noise_sd: 0.0,
            seed: 0,
        };
        match protocol {
            Protocol::MaternSim => Self {
                n_train: vec![2000],
                m_values: vec![10, 30, 50],
                replicates: 10,
                ..base
            },
            Protocol::BoreholeCurves => Self {
                n_train: vec![100, 400],
                n_test: 2000,
                m_values: vec![50],
                replicates: 10,
                include_exact: true,
                ..base
            },
            Protocol::TestfunSuite => Self {
                n_train: vec![5000],
                n_test: 2000,
                m_values: vec![30, 50],
                m_pred: 140,
                replicates: 5,
                functions: TestFunction::ALL.to_vec(),
                ..base
            },
            Protocol::NoiseRecovery => Self {
                n_train: vec![10_000],
                m_values: vec![30],
                replicates: 10,
                noise_sd: 0.02,
                ..base
            },
            Protocol::PistonUq => Self {
                n_train: vec![20_000],
                n_test: 5000,
                m_values: vec![30],
                m_pred: 140,
                replicates: 3,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be at least 1".into()));
        }
        if self.n_train.is_empty() || self.n_train.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument(
                "n_train must list at least one size of at least 2".into(),
            ));
        }
        if self.m_values.is_empty() || self.m_values.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument(
                "m_values must list at least one positive size".into(),
            ));
        }
        let needs_dense = match self.protocol {
            Protocol::MaternSim => true,
            Protocol::BoreholeCurves => self.include_exact,
            _ => false,
        };
        if needs_dense {
            if let Some(&n) = self.n_train.iter().find(|&&n| n > DENSE_CAP) {
                return Err(Error::DenseCapExceeded { n, cap: DENSE_CAP });
            }
        }
        let needs_test = matches!(
            self.protocol,
            Protocol::BoreholeCurves | Protocol::TestfunSuite | Protocol::PistonUq
        );
        if needs_test && self.n_test == 0 {
            return Err(Error::InvalidArgument("n_test must be positive".into()));
        }
        if matches!(self.protocol, Protocol::TestfunSuite | Protocol::PistonUq) && self.m_pred == 0
        {
            return Err(Error::InvalidArgument("m_pred must be positive".into()));
        }
        if self.protocol == Protocol::TestfunSuite && self.functions.is_empty() {
            return Err(Error::InvalidArgument("functions must list at least one entry".into()));
        }
        if self.protocol == Protocol::NoiseRecovery && !(self.noise_sd > 0.0) {
            return Err(Error::InvalidArgument("noise_sd must be positive".into()));
        }
        Ok(())
    }
}

/// One benchmark measurement: a method at a setting on one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub protocol: String,
    /// What was emulated: a test-function name or the simulation label.
    pub setting: String,
    pub method: String,
    pub n: usize,
    pub m: usize,
    pub m_pred: usize,
    pub replicate: u64,
    /// Log-score gap to the dense likelihood, for likelihood protocols.
    pub dls: Option<f64>,
    /// Estimated noise standard deviation, for noise protocols.
    pub tau_hat: Option<f64>,
    pub scores: Option<ScoreReport>,
    pub fit_seconds: f64,
    pub predict_seconds: f64,
}

/// Deterministic seed derivation for replicate streams: a splitmix-style
/// hash folded over the parts.
fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const SALT_TRAIN: u64 = 1;
const SALT_RESPONSE: u64 = 2;
const SALT_TEST: u64 = 3;
const SALT_NOISE: u64 = 4;
const SALT_SPLIT: u64 = 5;
const SALT_SAMPLES: u64 = 6;

/// The anisotropic d=10 configuration of the simulation study: two strongly
/// relevant inputs, eight weak ones.
pub fn matern_sim_config() -> CovarianceConfig {
    let mut ranges = vec![5.0; 10];
    ranges[0] = 0.05;
    ranges[1] = 0.05;
    CovarianceConfig::new(1.0, ranges, 0.0, 3.5).expect("static configuration")
}

fn est_config(method: Method, m: usize, n_est: usize) -> EstimationConfig {
    EstimationConfig { method, m_est: m, n_est, ..EstimationConfig::default() }
}

fn run_replicates<F>(replicates: usize, body: F) -> Result<Vec<BenchmarkRow>>
where
    F: Fn(u64) -> Result<Vec<BenchmarkRow>> + Sync + Send,
{
    let per: Result<Vec<Vec<BenchmarkRow>>> =
        (0..replicates as u64).into_par_iter().map(body).collect();
    Ok(per?.into_iter().flatten().collect())
}

fn run_matern_sim(c: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let cfg = matern_sim_config();
    let zero = MeanModel::zero();
    run_replicates(c.replicates, |r| {
        let mut rows = Vec::new();
        for &n in &c.n_train {
            let x = lhs(n, 10, mix_seed(&[c.seed, r, SALT_TRAIN, n as u64]))?;
            let y = simulate_gp(
                x.view(),
                &cfg,
                &zero,
                mix_seed(&[c.seed, r, SALT_RESPONSE, n as u64]),
                None,
            )?;
            let data = Dataset::new(x, y)?;
            let exact = exact_gp_loglik(&data, &cfg, &zero)?;
            for method in [Method::SVecchia, Method::Vecchia, Method::LowRank] {
                for &m in &c.m_values {
                    let t = Instant::now();
                    let xs = if method.scales_inputs() {
                        ScaledPoints::new(data.inputs.view(), &cfg.ranges)
                    } else {
                        ScaledPoints::unscaled(data.inputs.view())
                    };
                    let plan = ConditioningPlan::build_points(&xs, m, method.conditioning());
                    let ll = vecchia_loglik(&data, &cfg, &zero, &plan)?;
                    rows.push(BenchmarkRow {
                        protocol: c.protocol.name().into(),
                        setting: "matern-d10".into(),
                        method: method.name().into(),
                        n,
                        m,
                        m_pred: 0,
                        replicate: r,
                        dls: Some(dls(exact, ll)),
                        tau_hat: None,
                        scores: None,
                        fit_seconds: t.elapsed().as_secs_f64(),
                        predict_seconds: 0.0,
                    });
                }
            }
        }
        Ok(rows)
    })
}

fn run_borehole_curves(c: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let f = TestFunction::Borehole;
    run_replicates(c.replicates, |r| {
        let mut rows = Vec::new();
        for &n in &c.n_train {
            let x = lhs(n, f.dim(), mix_seed(&[c.seed, r, SALT_TRAIN, n as u64]))?;
            let y = f.evaluate_rows(x.view())?;
            let data = Dataset::new(x, y)?;
            let xt = uniform_inputs(c.n_test, f.dim(), mix_seed(&[c.seed, r, SALT_TEST, n as u64]));
            let yt = f.evaluate_rows(xt.view())?;

            for &m in &c.m_values {
                // prediction reuses the estimation budget in this protocol
                let est = est_config(Method::SVecchia, m, 3000.max(m + 1));
                let t0 = Instant::now();
                let fitted = fit(&data, &est)?;
                let fit_seconds = t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let dist = predict(&fitted, xt.view(), m)?;
                let predict_seconds = t1.elapsed().as_secs_f64();
                rows.push(BenchmarkRow {
                    protocol: c.protocol.name().into(),
                    setting: f.name().into(),
                    method: Method::SVecchia.name().into(),
                    n,
                    m,
                    m_pred: m,
                    replicate: r,
                    dls: None,
                    tau_hat: None,
                    scores: Some(score_suite(&dist, yt.as_slice().unwrap(), None)?),
                    fit_seconds,
                    predict_seconds,
                });
            }

            if c.include_exact {
                let est = est_config(Method::SVecchia, c.m_values[0], 3000);
                let t0 = Instant::now();
                let exact = exact_gp_fit(&data, &est)?;
                let fit_seconds = t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let (means, vars) =
                    exact_gp_predict(&data, &exact.config, &exact.mean_model(), xt.view())?;
                let predict_seconds = t1.elapsed().as_secs_f64();
                rows.push(BenchmarkRow {
                    protocol: c.protocol.name().into(),
                    setting: f.name().into(),
                    method: "exact".into(),
                    n,
                    m: 0,
                    m_pred: 0,
                    replicate: r,
                    dls: None,
                    tau_hat: None,
                    scores: Some(score_moments(yt.as_slice().unwrap(), &means, &vars)?),
                    fit_seconds,
                    predict_seconds,
                });
            }
        }
        Ok(rows)
    })
}

fn run_testfun_suite(c: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    run_replicates(c.replicates, |r| {
        let mut rows = Vec::new();
        for &f in &c.functions {
            for &n in &c.n_train {
                let x = lhs(n, f.dim(), mix_seed(&[c.seed, r, SALT_TRAIN, n as u64, f.salt()]))?;
                let y = f.evaluate_rows(x.view())?;
                let data = Dataset::new(x, y)?;
                let xt = uniform_inputs(
                    c.n_test,
                    f.dim(),
                    mix_seed(&[c.seed, r, SALT_TEST, n as u64, f.salt()]),
                );
                let yt = f.evaluate_rows(xt.view())?;
                for method in [Method::SVecchia, Method::Vecchia, Method::LowRank] {
                    for &m in &c.m_values {
                        let est = est_config(method, m, 3000.max(m + 1));
                        let t0 = Instant::now();
                        let fitted = fit(&data, &est)?;
                        let fit_seconds = t0.elapsed().as_secs_f64();
                        let t1 = Instant::now();
                        let dist = predict(&fitted, xt.view(), c.m_pred)?;
                        let predict_seconds = t1.elapsed().as_secs_f64();
                        rows.push(BenchmarkRow {
                            protocol: c.protocol.name().into(),
                            setting: f.name().into(),
                            method: method.name().into(),
                            n,
                            m,
                            m_pred: c.m_pred,
                            replicate: r,
                            dls: None,
                            tau_hat: None,
                            scores: Some(score_suite(&dist, yt.as_slice().unwrap(), None)?),
                            fit_seconds,
                            predict_seconds,
                        });
                    }
                }
            }
        }
        Ok(rows)
    })
}

fn run_noise_recovery(c: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let f = TestFunction::Piston;
    run_replicates(c.replicates, |r| {
        let mut rows = Vec::new();
        for &n in &c.n_train {
            let x = lhs(n, f.dim(), mix_seed(&[c.seed, r, SALT_TRAIN, n as u64]))?;
            let mut y = f.evaluate_rows(x.view())?;
            add_noise(&mut y, c.noise_sd, mix_seed(&[c.seed, r, SALT_NOISE, n as u64]));
            let data = Dataset::new(x, y)?;
            for &m in &c.m_values {
                let est = EstimationConfig {
                    estimate_nugget: true,
                    ..est_config(Method::SVecchia, m, n.max(m + 1))
                };
                let t0 = Instant::now();
                let fitted = fit(&data, &est)?;
                rows.push(BenchmarkRow {
                    protocol: c.protocol.name().into(),
                    setting: format!("{}+noise", f.name()),
                    method: Method::SVecchia.name().into(),
                    n,
                    m,
                    m_pred: 0,
                    replicate: r,
                    dls: None,
                    tau_hat: Some(fitted.config.nugget.sqrt()),
                    scores: None,
                    fit_seconds: t0.elapsed().as_secs_f64(),
                    predict_seconds: 0.0,
                });
            }
        }
        Ok(rows)
    })
}

fn run_piston_uq(c: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let f = TestFunction::Piston;
    run_replicates(c.replicates, |r| {
        let mut rows = Vec::new();
        for &n in &c.n_train {
            let x = lhs(n, f.dim(), mix_seed(&[c.seed, r, SALT_TRAIN, n as u64]))?;
            let y = f.evaluate_rows(x.view())?;
            let data = Dataset::new(x, y)?;
            let xt = uniform_inputs(c.n_test, f.dim(), mix_seed(&[c.seed, r, SALT_TEST, n as u64]));
            let yt = f.evaluate_rows(xt.view())?;
            for method in [Method::SVecchia, Method::Vecchia] {
                for &m in &c.m_values {
                    let est = est_config(method, m, 3000.max(m + 1));
                    let t0 = Instant::now();
                    let mut fitted = fit(&data, &est)?;
                    variance_correction(
                        &mut fitted,
                        0.9,
                        c.m_pred,
                        mix_seed(&[c.seed, r, SALT_SPLIT, n as u64]),
                    )?;
                    let fit_seconds = t0.elapsed().as_secs_f64();
                    let t1 = Instant::now();
                    let dist = predict(&fitted, xt.view(), c.m_pred)?;
                    let samples = sample_joint(
                        &dist,
                        2 * ENERGY_PAIRS,
                        mix_seed(&[c.seed, r, SALT_SAMPLES, n as u64]),
                    );
                    let predict_seconds = t1.elapsed().as_secs_f64();
                    rows.push(BenchmarkRow {
                        protocol: c.protocol.name().into(),
                        setting: f.name().into(),
                        method: method.name().into(),
                        n,
                        m,
                        m_pred: c.m_pred,
                        replicate: r,
                        dls: None,
                        tau_hat: None,
                        scores: Some(score_suite(
                            &dist,
                            yt.as_slice().unwrap(),
                            Some(samples.view()),
                        )?),
                        fit_seconds,
                        predict_seconds,
                    });
                }
            }
        }
        Ok(rows)
    })
}

/// Run one benchmark protocol; rows come back in deterministic order
/// (replicate-major, then the protocol's setting loops).
pub fn benchmark(config: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    config.validate()?;
    match config.protocol {
        Protocol::MaternSim => run_matern_sim(config),
        Protocol::BoreholeCurves => run_borehole_curves(config),
        Protocol::TestfunSuite => run_testfun_suite(config),
        Protocol::NoiseRecovery => run_noise_recovery(config),
        Protocol::PistonUq => run_piston_uq(config),
    }
}

const CSV_HEADER: [&str; 21] = [
    "protocol",
    "setting",
    "method",
    "n",
    "m",
    "m_pred",
    "replicate",
    "dls",
    "tau_hat",
    "n_test",
    "rmse",
    "rmspe",
    "rmspe_excluded",
    "interval_coverage",
    "interval_width",
    "interval_score",
    "log_score",
    "crps",
    "energy",
    "fit_seconds",
    "predict_seconds",
];

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl BenchmarkRow {
    fn record(&self) -> Vec<String> {
        let s = self.scores.as_ref();
        vec![
            self.protocol.clone(),
            self.setting.clone(),
            self.method.clone(),
            self.n.to_string(),
            self.m.to_string(),
            self.m_pred.to_string(),
            self.replicate.to_string(),
            opt_cell(self.dls),
            opt_cell(self.tau_hat),
            s.map(|s| s.n.to_string()).unwrap_or_default(),
            opt_cell(s.map(|s| s.rmse)),
            opt_cell(s.and_then(|s| s.rmspe)),
            s.map(|s| s.rmspe_excluded.to_string()).unwrap_or_default(),
            opt_cell(s.map(|s| s.interval_coverage)),
            opt_cell(s.map(|s| s.interval_width)),
            opt_cell(s.map(|s| s.interval_score)),
            opt_cell(s.map(|s| s.log_score)),
            opt_cell(s.map(|s| s.crps)),
            opt_cell(s.and_then(|s| s.energy)),
            self.fit_seconds.to_string(),
            self.predict_seconds.to_string(),
        ]
    }
}

/// Render benchmark rows as CSV text.
pub fn csv_string(rows: &[BenchmarkRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

/// Write benchmark rows to a CSV file.
pub fn write_csv(rows: &[BenchmarkRow], path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(rows)?)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config: &'a BenchmarkConfig,
    rows: &'a [BenchmarkRow],
}

/// Write the JSON manifest pairing the run's settings with its results.
pub fn write_manifest(
    config: &BenchmarkConfig,
    rows: &[BenchmarkRow],
    path: &Path,
) -> Result<()> {
    let manifest =
        Manifest { version: env!("CARGO_PKG_VERSION"), config, rows };
    serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(path)?), &manifest)?;
    Ok(())
}

//! Fisher-scoring maximum-likelihood estimation of the covariance
//! hyperparameters, with the trend profiled out at every evaluation.
//!
//! The loop works in log-parameters: score the profiled likelihood, take the
//! information-preconditioned step M⁻¹g, fall back to a backtracking search
//! along g when that step does not improve the penalized objective, and
//! periodically rebuild the ordering and conditioning sets on inputs scaled
//! by the current range estimates. Ranges that grow past a threshold are set
//! to +∞ at the end, which removes those dimensions from the kernel.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{Basis, CovarianceConfig, ParameterVector, ScaledPoints};
use crate::error::{Error, Result};
use crate::geometry::{Conditioning, ConditioningPlan};
use crate::likelihood::{profile_beta, profiled_loglik, vecchia_score, Dataset};

/// Ordering/conditioning variant used for fitting and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Maximin ordering and nearest neighbors on range-scaled inputs,
    /// refreshed during estimation as the ranges evolve.
    SVecchia,
    /// Maximin ordering and nearest neighbors on the raw inputs, fixed.
    Vecchia,
    /// Maximin ordering on raw inputs; every point conditions on the first
    /// m ordered points (modified predictive process).
    LowRank,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SVecchia => "svecchia",
            Method::Vecchia => "vecchia",
            Method::LowRank => "lowrank",
        }
    }

    pub(crate) fn conditioning(self) -> Conditioning {
        match self {
            Method::LowRank => Conditioning::FirstM,
            _ => Conditioning::NearestNeighbors,
        }
    }

    /// Only the scaled variant re-plans as range estimates move.
    pub(crate) fn scales_inputs(self) -> bool {
        matches!(self, Method::SVecchia)
    }
}

/// Settings for [`fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub method: Method,
    /// Conditioning-set size during estimation.
    pub m_est: usize,
    /// Estimation runs on a random subsample of at most this many points.
    pub n_est: usize,
    pub smoothness: f64,
    pub basis: Basis,
    /// When false, the nugget stays fixed at `fixed_nugget`.
    pub estimate_nugget: bool,
    pub fixed_nugget: f64,
    pub max_iterations: usize,
    /// Stop once step·gradient falls below this.
    pub termination_tol: f64,
    /// Weight of the hinge penalty on log σ² above the sample variance.
    pub penalty_weight: f64,
    /// Ranges at least this large are set to +∞ after the last iteration.
    pub relevance_threshold: f64,
    /// Iterations at which the plan is rebuilt on freshly scaled inputs.
    pub reorder_iterations: Vec<usize>,
    pub subsample_seed: u64,
    /// Warm start; [`default_initial`] is used when absent.
    pub initial: Option<CovarianceConfig>,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            method: Method::SVecchia,
            m_est: 30,
            n_est: 5000,
            smoothness: crate::covariance::DEFAULT_SMOOTHNESS,
            basis: Basis::Constant,
            estimate_nugget: false,
            fixed_nugget: 0.0,
            max_iterations: 40,
            termination_tol: 1e-4,
            penalty_weight: 1.0,
            relevance_threshold: 1e3,
            reorder_iterations: vec![2, 4, 8, 16, 32],
            subsample_seed: 0,
            initial: None,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_est == 0 {
            return Err(Error::InvalidArgument("m_est must be at least 1".into()));
        }
        if self.n_est < self.m_est + 1 {
            return Err(Error::InvalidArgument(format!(
                "n_est must be at least m_est+1 = {}, got {}",
                self.m_est + 1,
                self.n_est
            )));
        }
        if !(self.termination_tol > 0.0) {
            return Err(Error::InvalidArgument("termination_tol must be positive".into()));
        }
        if !(self.penalty_weight >= 0.0) {
            return Err(Error::InvalidArgument("penalty_weight must be non-negative".into()));
        }
        crate::covariance::half_integer_index(self.smoothness)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    /// Starting point, before any step.
    Initial,
    /// Information-preconditioned step accepted as proposed.
    Fisher,
    /// Backtracking step along the gradient.
    LineSearch,
}

/// One accepted iterate of the estimation loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    /// Penalized objective at this iterate.
    pub objective: f64,
    pub loglik: f64,
    pub grad_norm: f64,
    pub step: StepKind,
    /// Whether the plan was rebuilt at the start of this iteration.
    pub reordered: bool,
    /// Raw parameter values (σ², λ₁..λ_d, τ²), including fixed entries.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convergence {
    /// step·gradient fell below the tolerance.
    Converged,
    /// Three consecutive iterations found no improving step.
    Stalled,
    MaxIterations,
}

/// A fitted emulator: hyperparameters, trend, and everything needed to
/// predict from the full training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub basis: Basis,
    /// Final hyperparameters, with eliminated dimensions at +∞.
    pub config: CovarianceConfig,
    pub beta: Vec<f64>,
    /// Full training data (prediction conditions on all of it).
    pub data: Dataset,
    /// Rows of `data` the estimation subsample used, in increasing order.
    pub est_rows: Vec<usize>,
    /// Final conditioning plan over the estimation subsample.
    pub plan: ConditioningPlan,
    pub trace: Vec<TraceStep>,
    pub convergence: Convergence,
    pub iterations: usize,
    /// Input dimensions whose range was thresholded to +∞.
    pub eliminated: Vec<usize>,
    /// Predictive-variance inflation factor, when calibrated.
    pub variance_correction: Option<f64>,
    pub warnings: Vec<String>,
    pub settings: EstimationConfig,
}

impl FitResult {
    /// Mean model assembled from basis and fitted coefficients.
    pub fn mean_model(&self) -> crate::covariance::MeanModel {
        crate::covariance::MeanModel { basis: self.basis, beta: self.beta.clone() }
    }

    /// Covariance at the final iterate, before range thresholding. Use this
    /// to warm-start a later fit without locking in eliminated dimensions.
    pub fn unthresholded_config(&self) -> CovarianceConfig {
        let values = &self.trace.last().expect("trace has the initial record").values;
        let d = values.len() - 2;
        CovarianceConfig::new(
            values[0],
            values[1..1 + d].to_vec(),
            values[1 + d],
            self.config.smoothness,
        )
        .expect("trace values were live parameters")
    }
}

/// Sorted uniform subsample indices; identity when the budget covers n.
pub(crate) fn subsample_rows(n: usize, n_est: usize, seed: u64) -> Vec<usize> {
    if n_est >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, n_est).into_vec();
    rows.sort_unstable();
    rows
}

/// Uniform random subset of the data without replacement; deterministic for
/// a given seed, identity when n_est ≥ n.
pub fn subsample(data: &Dataset, n_est: usize, seed: u64) -> Dataset {
    data.select(&subsample_rows(data.n(), n_est, seed))
}

/// Data-driven starting point: σ² from the response variance, each range
/// from its column's spread, nugget per the settings.
pub fn default_initial(
    data: &Dataset,
    settings: &EstimationConfig,
) -> Result<(CovarianceConfig, Vec<String>)> {
    if data.n() < 2 {
        return Err(Error::InvalidArgument("need at least 2 points to initialize".into()));
    }
    let mut warnings = Vec::new();
    let mut s2 = sample_variance(data.responses.as_slice().unwrap());
    if !(s2 > 0.0) {
        warnings.push("response has zero variance; starting variance set to 1".into());
        s2 = 1.0;
    }
    let mut ranges = Vec::with_capacity(data.d());
    for l in 0..data.d() {
        let col = data.inputs.column(l);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in col {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let spread = hi - lo;
        if spread > 0.0 {
            ranges.push(spread);
        } else {
            warnings.push(format!("input column {l} is constant; starting range set to 1"));
            ranges.push(1.0);
        }
    }
    let nugget = if settings.estimate_nugget { 1e-4 * s2 } else { settings.fixed_nugget };
    Ok((CovarianceConfig::new(s2, ranges, nugget, settings.smoothness)?, warnings))
}

pub(crate) fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
}

/// Hinge penalty on log σ² above the log sample variance:
/// weight·max(0, log σ² − log s²_y)², with its gradient and curvature in
/// log σ².
pub fn penalty(variance: f64, sample_var: f64, weight: f64) -> (f64, f64, f64) {
    let excess = (variance.ln() - sample_var.ln()).max(0.0);
    if excess == 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        (weight * excess * excess, 2.0 * weight * excess, 2.0 * weight)
    }
}

/// Information-preconditioned candidate step: solve M s = g over the free
/// parameters, rescaled to root-mean-square 1 when larger. Far from the
/// optimum the raw solve can be enormous (the expected information knows
/// nothing about the residuals in g); the cap keeps iterates where the
/// gradients stay informative. None when M is numerically singular (caller
/// falls back to a gradient search).
pub fn fisher_step(info: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let solve = |m: DMatrix<f64>| Cholesky::new(m).map(|c| c.solve(grad));
    let step = match solve(info.clone()) {
        Some(s) => Some(s),
        None => {
            // one mild ridge retry before giving up
            let ridge = 1e-10 * info.diagonal().amax().max(1e-300);
            let mut reg = info.clone();
            for i in 0..reg.nrows() {
                reg[(i, i)] += ridge;
            }
            solve(reg)
        }
    };
    step.map(|mut s| {
        let rms = (s.norm_squared() / s.len() as f64).sqrt();
        if rms > 1.0 {
            s /= rms;
        }
        s
    })
}

/// Backtracking search along the gradient direction: log-space steps of
/// length 1, 1/2, ..., 2⁻²⁰, first strict improvement wins. None means
/// stall.
pub(crate) fn line_search<F>(
    theta: &ParameterVector,
    grad: &DVector<f64>,
    current: f64,
    mut objective: F,
) -> Option<(ParameterVector, f64, Vec<f64>, Vec<f64>)>
where
    F: FnMut(&ParameterVector) -> Option<(f64, Vec<f64>)>,
{
    let norm = grad.norm();
    if norm == 0.0 {
        return None;
    }
    let mut alpha = 1.0 / norm;
    for _ in 0..=20 {
        let step: Vec<f64> = grad.iter().map(|g| alpha * g).collect();
        let cand = theta.apply_step(&step);
        if let Some((obj, beta)) = objective(&cand) {
            if obj > current {
                return Some((cand, obj, beta, step));
            }
        }
        alpha *= 0.5;
    }
    None
}

struct PlanState {
    plan: ConditioningPlan,
}

fn build_plan(
    data: &Dataset,
    config: &CovarianceConfig,
    method: Method,
    m: usize,
) -> Result<PlanState> {
    let xs = if method.scales_inputs() {
        ScaledPoints::new(data.inputs.view(), &config.ranges)
    } else {
        ScaledPoints::unscaled(data.inputs.view())
    };
    Ok(PlanState { plan: ConditioningPlan::build_points(&xs, m, method.conditioning()) })
}

/// Fit hyperparameters and trend to the data by Fisher scoring on a
/// subsample, returning everything needed for prediction.
pub fn fit(data: &Dataset, settings: &EstimationConfig) -> Result<FitResult> {
    settings.validate()?;
    let est_rows = subsample_rows(data.n(), settings.n_est, settings.subsample_seed);
    let est = data.select(&est_rows);
    let mut warnings = Vec::new();

    let initial = match &settings.initial {
        Some(cfg) => {
            cfg.validate()?;
            if cfg.dim() != data.d() {
                return Err(Error::DimensionMismatch(format!(
                    "initial config has {} ranges, data has {} inputs",
                    cfg.dim(),
                    data.d()
                )));
            }
            let mut cfg = cfg.clone();
            cfg.smoothness = settings.smoothness;
            cfg
        }
        None => {
            let (cfg, warn) = default_initial(&est, settings)?;
            warnings.extend(warn);
            cfg
        }
    };

    // dimensions already eliminated in the warm start stay fixed: their
    // kernel derivative is identically zero
    let fixed_ranges: Vec<bool> = initial.ranges.iter().map(|r| r.is_infinite()).collect();
    let mut theta = ParameterVector::from_config(&initial, false, &fixed_ranges, !settings.estimate_nugget);
    let free = theta.free_indices();
    let var_pos = free.iter().position(|p| *p == crate::covariance::ParamIndex::Variance);

    let s2y = sample_variance(est.responses.as_slice().unwrap()).max(f64::MIN_POSITIVE);
    let m = settings.m_est;
    let mut state = build_plan(&est, &initial, settings.method, m)?;

    let penalized = |cfg: &CovarianceConfig, ll: f64| -> f64 {
        ll - penalty(cfg.variance, s2y, settings.penalty_weight).0
    };

    // score at the starting point; a broken initial configuration is an error
    let mut cfg = theta.to_config(settings.smoothness);
    let mut eval = vecchia_score(&est, &cfg, settings.basis, &state.plan, &free)?;
    let mut obj = penalized(&cfg, eval.loglik);
    if !obj.is_finite() {
        return Err(Error::NonFiniteObjective);
    }

    let mut trace = vec![TraceStep {
        iteration: 0,
        objective: obj,
        loglik: eval.loglik,
        grad_norm: eval.gradient.norm(),
        step: StepKind::Initial,
        reordered: false,
        values: theta.values.clone(),
    }];

    let mut convergence = Convergence::MaxIterations;
    let mut stalls = 0usize;
    let mut iterations = 0usize;

    for k in 1..=settings.max_iterations {
        iterations = k;
        let mut reordered = false;
        if settings.method.scales_inputs() && settings.reorder_iterations.contains(&k) {
            cfg = theta.to_config(settings.smoothness);
            state = build_plan(&est, &cfg, settings.method, m)?;
            eval = vecchia_score(&est, &cfg, settings.basis, &state.plan, &free)?;
            obj = penalized(&cfg, eval.loglik);
            reordered = true;
        }

        // penalize gradient and curvature in the log-variance coordinate
        let (_, pen_g, pen_c) = penalty(cfg.variance, s2y, settings.penalty_weight);
        let mut grad = eval.gradient.clone();
        let mut info = eval.fisher.clone();
        if let Some(v) = var_pos {
            grad[v] -= pen_g;
            info[(v, v)] += pen_c;
        }

        let try_candidate = |cand: &ParameterVector| -> Option<(f64, Vec<f64>)> {
            let c = cand.to_config(settings.smoothness);
            match profiled_loglik(&est, &c, settings.basis, &state.plan) {
                Ok((ll, beta)) => {
                    let o = penalized(&c, ll);
                    o.is_finite().then_some((o, beta))
                }
                Err(_) => None,
            }
        };

        let mut accepted: Option<(ParameterVector, f64, Vec<f64>, StepKind)> = None;
        let mut step_vec: Vec<f64> = Vec::new();
        if let Some(s) = fisher_step(&info, &grad) {
            let step: Vec<f64> = s.iter().copied().collect();
            let cand = theta.apply_step(&step);
            if let Some((o, beta)) = try_candidate(&cand) {
                if o > obj {
                    accepted = Some((cand, o, beta, StepKind::Fisher));
                    step_vec = step;
                }
            }
        }
        if accepted.is_none() {
            if let Some((cand, o, beta, step)) = line_search(&theta, &grad, obj, try_candidate) {
                accepted = Some((cand, o, beta, StepKind::LineSearch));
                step_vec = step;
            }
        }

        match accepted {
            None => {
                stalls += 1;
                log::debug!("iter {k}: stall ({stalls}/3), |g|={:.3e}", grad.norm());
                if stalls >= 3 {
                    convergence = Convergence::Stalled;
                    warnings.push(format!(
                        "no improving step found for 3 consecutive iterations (stopped at iteration {k})"
                    ));
                    break;
                }
            }
            Some((next, next_obj, _beta, kind)) => {
                stalls = 0;
                let dot: f64 = step_vec.iter().zip(grad.iter()).map(|(s, g)| s * g).sum();
                theta = next;
                cfg = theta.to_config(settings.smoothness);
                eval = vecchia_score(&est, &cfg, settings.basis, &state.plan, &free)?;
                obj = next_obj;
                trace.push(TraceStep {
                    iteration: k,
                    objective: obj,
                    loglik: eval.loglik,
                    grad_norm: eval.gradient.norm(),
                    step: kind,
                    reordered,
                    values: theta.values.clone(),
                });
                log::debug!(
                    "iter {k}: obj={obj:.6}, |g|={:.3e}, step={kind:?}, reordered={reordered}, step·g={dot:.3e}",
                    eval.gradient.norm()
                );
                if dot < settings.termination_tol {
                    convergence = Convergence::Converged;
                    break;
                }
            }
        }
    }

    // relevance thresholding, then a final plan consistent with it
    let mut final_cfg = theta.to_config(settings.smoothness);
    let mut eliminated = Vec::new();
    for (l, r) in final_cfg.ranges.iter_mut().enumerate() {
        if *r >= settings.relevance_threshold {
            *r = f64::INFINITY;
            eliminated.push(l);
        }
    }
    let state = if eliminated.is_empty() || !settings.method.scales_inputs() {
        state
    } else {
        build_plan(&est, &final_cfg, settings.method, m)?
    };
    let beta = profile_beta(&est, &final_cfg, settings.basis, &state.plan)?;

    Ok(FitResult {
        method: settings.method,
        basis: settings.basis,
        config: final_cfg,
        beta,
        data: data.clone(),
        est_rows,
        plan: state.plan,
        trace,
        convergence,
        iterations,
        eliminated,
        variance_correction: None,
        warnings,
        settings: settings.clone(),
    })
}

//! Ordered-conditional (Vecchia-type) log-likelihood, its score, and the
//! sparse inverse Cholesky factor it induces.
//!
//! Under a plan with ordering o and conditioning sets c(i), the approximate
//! density is Π_i p(y_i | y_c(i)), evaluated blockwise as
//! log N(y_u) − log N(y_c) with u = c(i) ∪ {i}. One Cholesky of the
//! (m+1)-sized u-block serves both terms: the leading principal submatrix of
//! its factor is exactly the factor of the c-block.
//!
//! Everything a block contributes can be read off the solution w of
//! Lᵀw = e_last: w_last = 1/sd of the conditional, wᵀr is the standardized
//! residual, and w itself is the block's column of the upper-triangular U
//! with K̂⁻¹ = UUᵀ.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    build_block, cov_matrix, cov_gradients, Basis, CovarianceConfig, MeanModel, ParamIndex,
    ScaledPoints,
};
use crate::error::{Error, Result};
use crate::geometry::ConditioningPlan;

const LN_2PI: f64 = 1.8378770664093453;

/// Largest n for which dense reference computations are allowed.
pub const DENSE_CAP: usize = 4000;

/// Supervised training data: inputs (n×d) and responses (n).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub responses: Array1<f64>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, responses: Array1<f64>) -> Result<Self> {
        if inputs.nrows() != responses.len() {
            return Err(Error::DimensionMismatch(format!(
                "dataset: {} input rows vs {} responses",
                inputs.nrows(),
                responses.len()
            )));
        }
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset: need at least one observation".into()));
        }
        if inputs.ncols() == 0 {
            return Err(Error::InvalidArgument("dataset: need at least one input column".into()));
        }
        if let Some(v) = inputs.iter().chain(responses.iter()).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dataset contains {v}")));
        }
        Ok(Self { inputs, responses })
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn d(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows of the dataset, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(ndarray::Axis(0), rows),
            responses: self.responses.select(ndarray::Axis(0), rows),
        }
    }
}

/// Profiled likelihood evaluation at one parameter value.
#[derive(Debug, Clone)]
pub struct LikelihoodEvaluation {
    pub loglik: f64,
    /// Score over the free parameters, in [`crate::covariance::ParameterVector`] order.
    pub gradient: DVector<f64>,
    /// Expected information over the free parameters; symmetric PSD.
    pub fisher: DMatrix<f64>,
    /// Profiled trend coefficients (empty for [`Basis::None`]).
    pub beta: Vec<f64>,
}

/// Cholesky with one retry under diagonal jitter of 1e-10·σ².
///
/// Returns the lower factor and whether jitter was applied. Two failures are
/// a hard error naming the ordered position.
pub(crate) fn cholesky_with_jitter(
    k: &DMatrix<f64>,
    variance: f64,
    position: usize,
) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, false));
    }
    let mut kj = k.clone();
    let jitter = 1e-10 * variance;
    for i in 0..kj.nrows() {
        kj[(i, i)] += jitter;
    }
    match Cholesky::new(kj) {
        Some(c) => Ok((c, true)),
        None => Err(Error::SingularBlock { position }),
    }
}

/// Per-block w vectors (Lᵀw = e_last) for a whole plan; the building block
/// shared by likelihood evaluation, trend profiling, and the sparse factor.
struct BlockFactors {
    /// ws[i] has length |c(i)| + 1, aligned with sorted c(i) then i itself.
    ws: Vec<DVector<f64>>,
}

fn factor_blocks(
    xs: &ScaledPoints,
    plan: &ConditioningPlan,
    config: &CovarianceConfig,
) -> Result<BlockFactors> {
    let n = plan.order.len();
    let results: Result<Vec<(DVector<f64>, bool)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rows = block_rows(plan, i);
            let (k, _) = build_block(xs, &rows, config, &|_| true, None);
            let (chol, jittered) = cholesky_with_jitter(&k, config.variance, i)?;
            Ok((last_unit_tr_solve(chol.l_dirty()), jittered))
        })
        .collect();
    let results = results?;
    let jittered = results.iter().filter(|r| r.1).count();
    if jittered > 0 {
        log::warn!("{jittered} conditioning blocks required diagonal jitter");
    }
    Ok(BlockFactors { ws: results.into_iter().map(|r| r.0).collect() })
}

/// Original data rows of block i: the sorted conditioning set, then i itself.
#[inline]
fn block_rows(plan: &ConditioningPlan, i: usize) -> Vec<usize> {
    let mut rows: Vec<usize> =
        plan.cond_sets[i].iter().map(|&p| plan.order[p as usize]).collect();
    rows.push(plan.order[i]);
    rows
}

/// Solve Lᵀw = e_last given the lower factor (only the lower triangle of
/// `l` is referenced).
pub(crate) fn last_unit_tr_solve(l: &DMatrix<f64>) -> DVector<f64> {
    let b = l.nrows();
    let mut w = DVector::zeros(b);
    w[b - 1] = 1.0;
    // back-substitution on Lᵀ, i.e. rows of L read as columns
    for i in (0..b).rev() {
        let mut s = w[i];
        for j in i + 1..b {
            s -= l[(j, i)] * w[j];
        }
        w[i] = s / l[(i, i)];
    }
    w
}

fn residuals(data: &Dataset, mean: &MeanModel) -> Vec<f64> {
    (0..data.n())
        .map(|i| data.responses[i] - mean.mean_at(data.inputs.row(i).as_slice().unwrap()))
        .collect()
}

fn check_plan(data: &Dataset, config: &CovarianceConfig, plan: &ConditioningPlan) -> Result<()> {
    config.validate()?;
    if config.dim() != data.d() {
        return Err(Error::DimensionMismatch(format!(
            "config has {} ranges, data has {} inputs",
            config.dim(),
            data.d()
        )));
    }
    if plan.order.len() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "plan covers {} points, data has {}",
            plan.order.len(),
            data.n()
        )));
    }
    Ok(())
}

/// Ordered-conditional log-likelihood of the data under the plan, with a
/// known mean model.
pub fn vecchia_loglik(
    data: &Dataset,
    config: &CovarianceConfig,
    mean: &MeanModel,
    plan: &ConditioningPlan,
) -> Result<f64> {
    check_plan(data, config, plan)?;
    mean.validate(data.d())?;
    let xs = ScaledPoints::new(data.inputs.view(), &config.ranges);
    let factors = factor_blocks(&xs, plan, config)?;
    let r = residuals(data, mean);
    Ok(loglik_from_factors(&factors, plan, &r))
}

fn loglik_from_factors(factors: &BlockFactors, plan: &ConditioningPlan, r: &[f64]) -> f64 {
    let n = plan.order.len();
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let w = &factors.ws[i];
            let rows = block_rows(plan, i);
            let mut e = 0.0;
            for (wv, &row) in w.iter().zip(&rows) {
                e += wv * r[row];
            }
            -0.5 * LN_2PI + w[w.len() - 1].ln() - 0.5 * e * e
        })
        .collect();
    terms.iter().sum()
}

/// Generalized-least-squares trend coefficients under the plan-implied
/// precision: β̂ = argmax of the ordered-conditional likelihood over β.
pub fn profile_beta(
    data: &Dataset,
    config: &CovarianceConfig,
    basis: Basis,
    plan: &ConditioningPlan,
) -> Result<Vec<f64>> {
    check_plan(data, config, plan)?;
    let xs = ScaledPoints::new(data.inputs.view(), &config.ranges);
    let factors = factor_blocks(&xs, plan, config)?;
    beta_from_factors(&factors, data, basis, plan)
}

fn beta_from_factors(
    factors: &BlockFactors,
    data: &Dataset,
    basis: Basis,
    plan: &ConditioningPlan,
) -> Result<Vec<f64>> {
    let p = basis.p(data.d());
    if p == 0 {
        return Ok(Vec::new());
    }
    let n = plan.order.len();
    if n < p {
        return Err(Error::RankDeficientBasis);
    }
    // normal equations accumulated per block: each block contributes one
    // whitened row (wᵀΨ_u, wᵀy_u)
    let contributions: Vec<(DVector<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let w = &factors.ws[i];
            let rows = block_rows(plan, i);
            let mut xhat = DVector::zeros(p);
            let mut yhat = 0.0;
            let mut feat = vec![0.0; p];
            for (wv, &row) in w.iter().zip(&rows) {
                basis.features_into(data.inputs.row(row).as_slice().unwrap(), &mut feat);
                for (x, f) in xhat.iter_mut().zip(&feat) {
                    *x += wv * f;
                }
                yhat += wv * data.responses[row];
            }
            (xhat, yhat)
        })
        .collect();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for (xhat, yhat) in &contributions {
        a.syger(1.0, xhat, xhat, 1.0);
        b.axpy(*yhat, xhat, 1.0);
    }
    // syger fills the lower triangle; mirror it
    for i in 0..p {
        for j in i + 1..p {
            a[(i, j)] = a[(j, i)];
        }
    }
    let chol = Cholesky::new(a).ok_or(Error::RankDeficientBasis)?;
    Ok(chol.solve(&b).iter().copied().collect())
}

/// Profile the trend, then evaluate the log-likelihood, reusing one set of
/// block factorizations. Returns (loglik, β̂).
pub fn profiled_loglik(
    data: &Dataset,
    config: &CovarianceConfig,
    basis: Basis,
    plan: &ConditioningPlan,
) -> Result<(f64, Vec<f64>)> {
    check_plan(data, config, plan)?;
    let xs = ScaledPoints::new(data.inputs.view(), &config.ranges);
    let factors = factor_blocks(&xs, plan, config)?;
    let beta = beta_from_factors(&factors, data, basis, plan)?;
    let mean = MeanModel { basis, beta: beta.clone() };
    let r = residuals(data, &mean);
    Ok((loglik_from_factors(&factors, plan, &r), beta))
}

/// Log-likelihood, score vector, and expected information over the free
/// parameters, with the trend profiled out first.
///
/// Per block, gradients and information need only the last row of
/// B_k = L⁻¹ ∂K L⁻ᵀ: the u-block and c-block contributions differ exactly by
/// that row, so each free parameter costs O(m²) per block.
pub fn vecchia_score(
    data: &Dataset,
    config: &CovarianceConfig,
    basis: Basis,
    plan: &ConditioningPlan,
    free: &[ParamIndex],
) -> Result<LikelihoodEvaluation> {
    check_plan(data, config, plan)?;
    let xs = ScaledPoints::new(data.inputs.view(), &config.ranges);
    let factors = factor_blocks(&xs, plan, config)?;
    let beta = beta_from_factors(&factors, data, basis, plan)?;
    let mean = MeanModel { basis, beta: beta.clone() };
    let r = residuals(data, &mean);

    let n = plan.order.len();
    let nf = free.len();
    struct BlockOut {
        term: f64,
        grad: DVector<f64>,
        fisher_tri: Vec<f64>, // upper triangle, row-major
    }
    let blocks: Result<Vec<BlockOut>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rows = block_rows(plan, i);
            let b = rows.len();
            let m = b - 1;
            let (k, grads) = build_block(&xs, &rows, config, &|_| true, Some(free));
            let (chol, _) = cholesky_with_jitter(&k, config.variance, i)?;
            let l = chol.l_dirty();
            let w = last_unit_tr_solve(l);
            let ru = DVector::from_iterator(b, rows.iter().map(|&row| r[row]));

            // loglik term
            let e = w.dot(&ru);
            let term = -0.5 * LN_2PI + w[m].ln() - 0.5 * e * e;

            // a = K_u^{-1} r_u and the leading-system analog
            let a = chol.solve(&ru);
            let a_c = if m > 0 {
                let lc = l.view((0, 0), (m, m));
                let rc = ru.rows(0, m).clone_owned();
                let z = lc.solve_lower_triangular(&rc).expect("PD leading block");
                Some(lc.tr_solve_lower_triangular(&z).expect("PD leading block"))
            } else {
                None
            };

            let mut grad = DVector::zeros(nf);
            let mut rows_b: Vec<DVector<f64>> = Vec::with_capacity(nf);
            for (kf, dk) in grads.iter().enumerate() {
                // last row of B = L^{-1} dK L^{-T}, as a column vector
                let v = dk * &w;
                let row = l.solve_lower_triangular(&v).expect("PD block");
                let quad_u = a.dot(&(dk * &a));
                let quad_c = match &a_c {
                    Some(ac) => {
                        let dc = dk.view((0, 0), (m, m));
                        ac.dot(&(dc * ac))
                    }
                    None => 0.0,
                };
                grad[kf] = -0.5 * row[m] + 0.5 * (quad_u - quad_c);
                rows_b.push(row);
            }

            let mut fisher_tri = Vec::with_capacity(nf * (nf + 1) / 2);
            for ka in 0..nf {
                for kb in ka..nf {
                    let ra = &rows_b[ka];
                    let rb = &rows_b[kb];
                    let mut s = ra[m] * rb[m];
                    for j in 0..m {
                        s += 2.0 * ra[j] * rb[j];
                    }
                    fisher_tri.push(0.5 * s);
                }
            }
            Ok(BlockOut { term, grad, fisher_tri })
        })
        .collect();
    let blocks = blocks?;

    let mut loglik = 0.0;
    let mut gradient = DVector::zeros(nf);
    let mut tri = vec![0.0; nf * (nf + 1) / 2];
    for blk in &blocks {
        loglik += blk.term;
        gradient += &blk.grad;
        for (t, v) in tri.iter_mut().zip(&blk.fisher_tri) {
            *t += v;
        }
    }
    let mut fisher = DMatrix::zeros(nf, nf);
    let mut it = tri.iter();
    for ka in 0..nf {
        for kb in ka..nf {
            let v = *it.next().unwrap();
            fisher[(ka, kb)] = v;
            fisher[(kb, ka)] = v;
        }
    }
    Ok(LikelihoodEvaluation { loglik, gradient, fisher, beta })
}

/// Upper-triangular sparse factor U (in plan order) with K̂⁻¹ = UUᵀ, where K̂
/// is the covariance the plan-approximated density implies. Column i has
/// nonzeros exactly at c(i) ∪ {i}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseInverseCholesky {
    pub n: usize,
    /// Per column: row positions (the sorted conditioning set) and values.
    pub col_rows: Vec<Vec<u32>>,
    pub col_vals: Vec<Vec<f64>>,
    /// Diagonal entries, strictly positive.
    pub diag: Vec<f64>,
}

impl SparseInverseCholesky {
    /// log det K̂ = −2 Σ log U_ii.
    pub fn logdet_khat(&self) -> f64 {
        -2.0 * self.diag.iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn nnz_off_diagonal(&self) -> usize {
        self.col_rows.iter().map(|c| c.len()).sum()
    }

    /// Uᵀ r for a vector in plan order.
    pub fn transpose_mul(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.n);
        (0..self.n)
            .map(|j| {
                let mut s = self.diag[j] * r[j];
                for (&i, &v) in self.col_rows[j].iter().zip(&self.col_vals[j]) {
                    s += v * r[i as usize];
                }
                s
            })
            .collect()
    }

    /// Solve Uᵀ x = z (forward substitution in plan order).
    pub fn solve_transpose(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n);
        let mut x = vec![0.0; self.n];
        for j in 0..self.n {
            let mut s = z[j];
            for (&i, &v) in self.col_rows[j].iter().zip(&self.col_vals[j]) {
                s -= v * x[i as usize];
            }
            x[j] = s / self.diag[j];
        }
        x
    }

    /// Squared column norms of U⁻¹, i.e. the marginal variances of K̂.
    pub fn inverse_column_sq_norms(&self) -> Vec<f64> {
        // CSR view of the strict upper triangle for row-wise back-substitution
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); self.n];
        for j in 0..self.n {
            for (&i, &v) in self.col_rows[j].iter().zip(&self.col_vals[j]) {
                rows[i as usize].push((j as u32, v));
            }
        }
        (0..self.n)
            .into_par_iter()
            .map(|col| {
                // solve U x = e_col; x vanishes below col
                let mut x = vec![0.0; col + 1];
                x[col] = 1.0 / self.diag[col];
                let mut norm2 = x[col] * x[col];
                for i in (0..col).rev() {
                    let mut s = 0.0;
                    for &(j, v) in &rows[i] {
                        let j = j as usize;
                        if j <= col {
                            s -= v * x[j];
                        }
                    }
                    if s != 0.0 {
                        let xi = s / self.diag[i];
                        x[i] = xi;
                        norm2 += xi * xi;
                    }
                }
                norm2
            })
            .collect()
    }

    /// Dense U in plan order; for small n only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            u[(j, j)] = self.diag[j];
            for (&i, &v) in self.col_rows[j].iter().zip(&self.col_vals[j]) {
                u[(i as usize, j)] = v;
            }
        }
        u
    }

    /// Dense K̂ = (UUᵀ)⁻¹ in plan order; for small n only.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let u = self.to_dense();
        let prec = &u * u.transpose();
        prec.try_inverse().expect("UUᵀ is positive definite by construction")
    }
}

/// Build the sparse inverse Cholesky factor of the plan-implied covariance.
pub fn sparse_inverse_cholesky(
    inputs: ArrayView2<'_, f64>,
    config: &CovarianceConfig,
    plan: &ConditioningPlan,
) -> Result<SparseInverseCholesky> {
    config.validate()?;
    if plan.order.len() != inputs.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "plan covers {} points, inputs have {} rows",
            plan.order.len(),
            inputs.nrows()
        )));
    }
    let xs = ScaledPoints::new(inputs, &config.ranges);
    let factors = factor_blocks(&xs, plan, config)?;
    let n = plan.order.len();
    let mut col_rows = Vec::with_capacity(n);
    let mut col_vals = Vec::with_capacity(n);
    let mut diag = Vec::with_capacity(n);
    for (i, w) in factors.ws.iter().enumerate() {
        let m = w.len() - 1;
        col_rows.push(plan.cond_sets[i].clone());
        col_vals.push(w.as_slice()[..m].to_vec());
        diag.push(w[m]);
    }
    Ok(SparseInverseCholesky { n, col_rows, col_vals, diag })
}

/// Dense reference log-likelihood (exact GP), capped at [`DENSE_CAP`] points.
pub fn exact_gp_loglik(data: &Dataset, config: &CovarianceConfig, mean: &MeanModel) -> Result<f64> {
    let n = data.n();
    if n > DENSE_CAP {
        return Err(Error::DenseCapExceeded { n, cap: DENSE_CAP });
    }
    mean.validate(data.d())?;
    let k = cov_matrix(data.inputs.view(), config)?;
    let chol = cholesky_with_jitter(&k, config.variance, 0)?.0;
    let r = DVector::from_vec(residuals(data, mean));
    let alpha = chol.solve(&r);
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64) * LN_2PI - 0.5 * logdet - 0.5 * r.dot(&alpha))
}

/// Dense reference score with profiled trend; the analytic counterpart of
/// [`vecchia_score`] without any conditioning approximation.
pub fn exact_gp_score(
    data: &Dataset,
    config: &CovarianceConfig,
    basis: Basis,
    free: &[ParamIndex],
) -> Result<LikelihoodEvaluation> {
    let n = data.n();
    if n > DENSE_CAP {
        return Err(Error::DenseCapExceeded { n, cap: DENSE_CAP });
    }
    let k = cov_matrix(data.inputs.view(), config)?;
    let chol = cholesky_with_jitter(&k, config.variance, 0)?.0;

    // profiled trend via dense GLS
    let p = basis.p(data.d());
    let beta = if p == 0 {
        Vec::new()
    } else {
        let mut psi = DMatrix::zeros(n, p);
        let mut feat = vec![0.0; p];
        for i in 0..n {
            basis.features_into(data.inputs.row(i).as_slice().unwrap(), &mut feat);
            for j in 0..p {
                psi[(i, j)] = feat[j];
            }
        }
        let kinv_psi = chol.solve(&psi);
        let y = DVector::from_iterator(n, data.responses.iter().copied());
        let a = psi.transpose() * &kinv_psi;
        let b = kinv_psi.transpose() * &y;
        let acol = Cholesky::new(a).ok_or(Error::RankDeficientBasis)?;
        acol.solve(&b).iter().copied().collect()
    };
    let mean = MeanModel { basis, beta: beta.clone() };
    let r = DVector::from_vec(residuals(data, &mean));
    let alpha = chol.solve(&r);
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let loglik = -0.5 * (n as f64) * LN_2PI - 0.5 * logdet - 0.5 * r.dot(&alpha);

    let grads = cov_gradients(data.inputs.view(), config, free)?;
    let l = chol.l_dirty();
    let nf = free.len();
    // B_k = L^{-1} dK L^{-T}
    let bs: Vec<DMatrix<f64>> = grads
        .par_iter()
        .map(|dk| {
            let y = l.solve_lower_triangular(dk).expect("PD covariance");
            l.solve_lower_triangular(&y.transpose()).expect("PD covariance")
        })
        .collect();
    let mut gradient = DVector::zeros(nf);
    for (kf, dk) in grads.iter().enumerate() {
        gradient[kf] = -0.5 * bs[kf].trace() + 0.5 * alpha.dot(&(dk * &alpha));
    }
    let mut fisher = DMatrix::zeros(nf, nf);
    for ka in 0..nf {
        for kb in ka..nf {
            let v = 0.5 * bs[ka].dot(&bs[kb]);
            fisher[(ka, kb)] = v;
            fisher[(kb, ka)] = v;
        }
    }
    Ok(LikelihoodEvaluation { loglik, gradient, fisher, beta })
}

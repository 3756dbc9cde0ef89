//! Latin hypercube sampling and the two-stage experimental design.
//!
//! Stage one spends a small share of the run budget on a Latin hypercube,
//! fits the emulator, and keeps the estimated ranges. Stage two draws a much
//! larger candidate hypercube, scales everything by those ranges, and takes
//! the maximin-ordered prefix of the candidates with the stage-one points as
//! already-placed predecessors. Irrelevant dimensions shrink away in the
//! scaled space, so the selected points concentrate their spacing where the
//! response actually varies.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::ScaledPoints;
use crate::error::{Error, Result};
use crate::estimation::{fit, EstimationConfig, FitResult};
use crate::geometry::maximin_given;
use crate::likelihood::Dataset;

/// Budget layout for [`two_stage_design`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignConfig {
    /// Total number of runs across both stages.
    pub n: usize,
    /// Share of the budget spent on the stage-one hypercube.
    pub first_stage_fraction: f64,
    /// Candidate pool size as a multiple of n.
    pub oversample_factor: f64,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { n: 0, first_stage_fraction: 0.1, oversample_factor: 20.0, seed: 0 }
    }
}

impl DesignConfig {
    pub fn stage_sizes(&self, d: usize) -> Result<(usize, usize)> {
        let n1 = (self.n as f64 * self.first_stage_fraction).round() as usize;
        if n1 < d + 2 {
            return Err(Error::InvalidArgument(format!(
                "stage-one budget {n1} too small; need at least d+2 = {} runs",
                d + 2
            )));
        }
        if n1 >= self.n {
            return Err(Error::InvalidArgument(format!(
                "stage one consumes the whole budget ({n1} of {})",
                self.n
            )));
        }
        if !(self.oversample_factor >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "oversample factor must be at least 1, got {}",
                self.oversample_factor
            )));
        }
        Ok((n1, self.n - n1))
    }
}

/// Result of the two-stage design: the evaluated runs and the final fit.
#[derive(Debug)]
pub struct DesignResult {
    pub fit: FitResult,
    /// Rows 0..stage1 of the fit's data are the stage-one hypercube.
    pub stage1: usize,
    /// Candidate-pool rows chosen in stage two, in selection order.
    pub selected: Vec<usize>,
    /// Range estimates after stage one, which shaped the stage-two metric.
    pub stage1_ranges: Vec<f64>,
}

/// Latin hypercube on [0,1]^d: one uniformly placed point per stratum per
/// dimension, columns independently permuted. Deterministic given the seed.
pub fn lhs(n: usize, d: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("lhs needs n,d >= 1, got n={n}, d={d}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, d));
    let mut perm: Vec<usize> = (0..n).collect();
    for l in 0..d {
        perm.shuffle(&mut rng);
        for i in 0..n {
            x[(i, l)] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    Ok(x)
}

/// Maximin-ordered prefix of the candidate pool in the range-scaled space,
/// with the stage-one points as fixed predecessors.
pub(crate) fn select_scaled_maximin(
    stage1: ArrayView2<'_, f64>,
    candidates: ArrayView2<'_, f64>,
    ranges: &[f64],
    take: usize,
) -> Vec<usize> {
    let fixed = ScaledPoints::new(stage1, ranges);
    let pool = ScaledPoints::new(candidates, ranges);
    maximin_given(&fixed, &pool, take)
}

fn evaluate_batch<F>(x: ArrayView2<'_, f64>, evaluator: &F, row_offset: usize) -> Result<Array1<f64>>
where
    F: Fn(&[f64]) -> std::result::Result<f64, String> + Sync,
{
    let values: Result<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            evaluator(x.row(i).as_slice().unwrap()).map_err(|message| Error::EvaluatorFailure {
                index: row_offset + i,
                message,
            })
        })
        .collect();
    Ok(Array1::from_vec(values?))
}

/// Run the two-stage design: hypercube, fit, scaled-maximin selection from
/// an oversampled candidate pool, evaluation, refit on everything.
///
/// The refit warm-starts from the last pre-thresholding stage-one iterate,
/// so dimensions eliminated on a small first stage can re-enter.
pub fn two_stage_design<F>(
    design: &DesignConfig,
    d: usize,
    evaluator: F,
    est: &EstimationConfig,
) -> Result<DesignResult>
where
    F: Fn(&[f64]) -> std::result::Result<f64, String> + Sync,
{
    let (n1, n2) = design.stage_sizes(d)?;
    let x1 = lhs(n1, d, design.seed)?;
    let y1 = evaluate_batch(x1.view(), &evaluator, 0)?;
    let stage1_fit = fit(&Dataset::new(x1.clone(), y1.clone())?, est)?;
    let stage1_ranges = stage1_fit.config.ranges.clone();

    let pool_size = (design.n as f64 * design.oversample_factor).round() as usize;
    let candidates = lhs(pool_size, d, design.seed.wrapping_add(1))?;
    let selected = select_scaled_maximin(x1.view(), candidates.view(), &stage1_ranges, n2);
    let x2 = candidates.select(Axis(0), &selected);
    let y2 = evaluate_batch(x2.view(), &evaluator, n1)?;

    let inputs = ndarray::concatenate(Axis(0), &[x1.view(), x2.view()])
        .expect("stage dimensions agree");
    let responses = ndarray::concatenate(Axis(0), &[y1.view(), y2.view()])
        .expect("stage dimensions agree");
    let data = Dataset::new(inputs, responses)?;

    let mut refit_settings = est.clone();
    refit_settings.initial = Some(stage1_fit.unthresholded_config());
    let final_fit = fit(&data, &refit_settings)?;

    Ok(DesignResult { fit: final_fit, stage1: n1, selected, stage1_ranges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::Basis;
    use crate::testutil::rng;
    use approx::assert_relative_eq;

    #[test]
    fn lhs_is_stratified_per_column() {
        for (n, d, seed) in [(1usize, 1usize, 0u64), (16, 3, 7), (50, 2, 99)] {
            let x = lhs(n, d, seed).unwrap();
            assert_eq!(x.dim(), (n, d));
            for l in 0..d {
                let mut col: Vec<f64> = x.column(l).iter().copied().collect();
                col.sort_by(f64::total_cmp);
                for (k, v) in col.iter().enumerate() {
                    assert!(
                        *v >= k as f64 / n as f64 && *v < (k + 1) as f64 / n as f64,
                        "value {v} outside stratum {k}/{n}"
                    );
                }
            }
        }
        assert!(lhs(0, 2, 0).is_err());
        assert!(lhs(5, 0, 0).is_err());
    }

    #[test]
    fn lhs_is_deterministic_and_roughly_centered() {
        let a = lhs(1000, 2, 5).unwrap();
        let b = lhs(1000, 2, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, lhs(1000, 2, 6).unwrap());
        for l in 0..2 {
            let mean = a.column(l).sum() / 1000.0;
            // LHS variance of the mean is at most that of 1000 iid uniforms
            assert!((mean - 0.5).abs() < 3.0 / (12.0f64 * 1000.0).sqrt());
        }
    }

    #[test]
    fn isotropic_ranges_reduce_to_unscaled_maximin() {
        let stage1 = lhs(12, 2, 1).unwrap();
        let pool = lhs(150, 2, 2).unwrap();
        let scaled = select_scaled_maximin(stage1.view(), pool.view(), &[0.37, 0.37], 30);
        let unscaled = select_scaled_maximin(stage1.view(), pool.view(), &[1.0, 1.0], 30);
        assert_eq!(scaled, unscaled);
        assert_eq!(scaled.len(), 30);
        let unique: std::collections::BTreeSet<usize> = scaled.iter().copied().collect();
        assert_eq!(unique.len(), 30);
    }

    #[test]
    fn selection_matches_a_greedy_oracle() {
        let stage1 = lhs(8, 2, 3).unwrap();
        let pool = lhs(60, 2, 4).unwrap();
        let ranges = [0.2, 2.0];
        let got = select_scaled_maximin(stage1.view(), pool.view(), &ranges, 12);

        // greedy recompute: repeatedly take the candidate farthest from
        // everything placed so far, in the scaled metric
        let scale = |x: &Array2<f64>| -> Vec<[f64; 2]> {
            (0..x.nrows()).map(|i| [x[(i, 0)] / ranges[0], x[(i, 1)] / ranges[1]]).collect()
        };
        let fixed = scale(&stage1);
        let cand = scale(&pool);
        let mut placed = fixed.clone();
        let mut remaining: Vec<usize> = (0..60).collect();
        let mut want = Vec::new();
        for _ in 0..12 {
            let (pos, &best) = remaining
                .iter()
                .enumerate()
                .max_by(|(_, &a), (_, &b)| {
                    let da = placed
                        .iter()
                        .map(|p| (cand[a][0] - p[0]).powi(2) + (cand[a][1] - p[1]).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    let db = placed
                        .iter()
                        .map(|p| (cand[b][0] - p[0]).powi(2) + (cand[b][1] - p[1]).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap();
            want.push(best);
            placed.push(cand[best]);
            remaining.remove(pos);
        }
        assert_eq!(got, want);
    }

    #[test]
    fn scaling_concentrates_spacing_on_the_relevant_dimension() {
        let stage1 = lhs(10, 2, 11).unwrap();
        let pool = lhs(400, 2, 12).unwrap();
        let take = 40;
        let aniso = select_scaled_maximin(stage1.view(), pool.view(), &[0.1, 1e6], take);
        let iso = select_scaled_maximin(stage1.view(), pool.view(), &[1.0, 1.0], take);

        let max_gap = |rows: &[usize]| -> f64 {
            let mut proj: Vec<f64> = rows.iter().map(|&i| pool[(i, 0)]).collect();
            proj.sort_by(f64::total_cmp);
            proj.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
        };
        assert!(
            max_gap(&aniso) < max_gap(&iso),
            "anisotropic selection should pack dimension 0 more tightly: {} vs {}",
            max_gap(&aniso),
            max_gap(&iso)
        );
    }

    #[test]
    fn evaluator_failures_carry_the_row_index() {
        let x = lhs(5, 2, 20).unwrap();
        let out = evaluate_batch(
            x.view(),
            &|p: &[f64]| if p[0] < 2.0 { Err("boom".to_string()) } else { Ok(0.0) },
            100,
        );
        match out {
            Err(Error::EvaluatorFailure { index, message }) => {
                assert!((100..105).contains(&index));
                assert_eq!(message, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_stage_design_runs_end_to_end() {
        let design = DesignConfig { n: 200, seed: 5, ..DesignConfig::default() };
        let est = EstimationConfig {
            m_est: 10,
            n_est: 200,
            basis: Basis::Constant,
            max_iterations: 10,
            ..EstimationConfig::default()
        };
        let f = |p: &[f64]| -> std::result::Result<f64, String> {
            Ok((4.0 * p[0]).sin() + 0.5 * (3.0 * p[1]).cos())
        };
        let result = two_stage_design(&design, 2, f, &est).unwrap();
        assert_eq!(result.stage1, 20);
        assert_eq!(result.selected.len(), 180);
        assert_eq!(result.fit.data.n(), 200);
        // stage-one rows are reproduced verbatim at the front
        let x1 = lhs(20, 2, 5).unwrap();
        for i in 0..20 {
            for l in 0..2 {
                assert_relative_eq!(result.fit.data.inputs[(i, l)], x1[(i, l)]);
            }
        }
        // warm start: the refit's initial values equal the stage-one tail
        assert!(result.fit.settings.initial.is_some());
        let again = two_stage_design(&design, 2, f, &est).unwrap();
        assert_eq!(result.selected, again.selected);
        assert_eq!(result.fit.config.ranges, again.fit.config.ranges);
        // budget validation
        let tiny = DesignConfig { n: 30, first_stage_fraction: 0.01, ..DesignConfig::default() };
        assert!(two_stage_design(&tiny, 2, f, &est).is_err());
    }
}

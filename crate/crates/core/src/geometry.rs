//! Orderings and conditioning-set selection.
//!
//! All functions here treat their inputs as already scaled; callers divide by
//! the current ranges first. Correctness is defined by exhaustive search:
//! every routine must return exactly what a brute-force scan would, with
//! distance ties broken by smallest original index so plans are reproducible
//! bit for bit across runs and thread counts.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::ScaledPoints;
use crate::error::{Error, Result};

/// How conditioning sets are chosen given an ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Nearest previously ordered points in the scaled space.
    NearestNeighbors,
    /// The first min(m, i−1) points of the ordering, independent of distance.
    FirstM,
}

/// A training ordering with per-point conditioning sets.
///
/// `order[i]` is the original row at position i; `cond_sets[i]` holds sorted
/// positions (not rows) strictly below i, with |cond_sets[i]| = min(m, i).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditioningPlan {
    pub order: Vec<usize>,
    pub cond_sets: Vec<Vec<u32>>,
    pub m: usize,
}

/// Joint ordering over observed + prediction points, observed first.
///
/// Joint position p < n is the observed point `obs_order[p]`; p ≥ n is the
/// prediction point `pred_order[p − n]`. `cond_sets[j]` holds the sorted
/// joint positions conditioning the j-th ordered prediction, of size
/// min(m, n + j).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionPlan {
    pub obs_order: Vec<usize>,
    pub pred_order: Vec<usize>,
    pub cond_sets: Vec<Vec<u32>>,
    pub m: usize,
}

// Fixed chunk size keeps parallel reductions independent of thread count.
const CHUNK: usize = 4096;

/// Exact maximin ordering: start at the point closest to the coordinate-wise
/// mean, then repeatedly take the point with the largest minimum distance to
/// everything already ordered. O(n²) total.
pub fn maximin_order(x: ArrayView2<'_, f64>) -> Vec<usize> {
    maximin_order_points(&ScaledPoints::unscaled(x))
}

pub(crate) fn maximin_order_points(xs: &ScaledPoints) -> Vec<usize> {
    let n = xs.n;
    if n == 0 {
        return Vec::new();
    }
    let mut mean = vec![0.0; xs.d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(xs.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let seed = (0..n)
        .map(|i| {
            let mut s = 0.0;
            for (a, b) in xs.row(i).iter().zip(&mean) {
                let d = a - b;
                s += d * d;
            }
            (s, i)
        })
        .fold((f64::INFINITY, usize::MAX), |best, cur| if cur.0 < best.0 { cur } else { best })
        .1;

    let mut order = Vec::with_capacity(n);
    order.push(seed);
    // min squared distance to the ordered set; NAN marks ordered points
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| if i == seed { f64::NAN } else { xs.dist_sq(i, seed) })
        .collect();
    for _ in 1..n {
        let best = min_d2
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for (k, &d2) in chunk.iter().enumerate() {
                    if !d2.is_nan() && d2 > best.0 {
                        best = (d2, c * CHUNK + k);
                    }
                }
                best
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold((f64::NEG_INFINITY, usize::MAX), |acc, cur| if cur.0 > acc.0 { cur } else { acc });
        let chosen = best.1;
        order.push(chosen);
        min_d2[chosen] = f64::NAN;
        let base = xs.row(chosen);
        min_d2.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            for (k, slot) in chunk.iter_mut().enumerate() {
                if slot.is_nan() {
                    continue;
                }
                let other = xs.row(c * CHUNK + k);
                let mut d2 = 0.0;
                for l in 0..xs.d {
                    let dl = base[l] - other[l];
                    d2 += dl * dl;
                }
                if d2 < *slot {
                    *slot = d2;
                }
            }
        });
    }
    order
}

/// Maximin selection of `take` points from `candidates`, treating `fixed` as
/// already ordered. The first pick maximizes distance to the fixed set.
/// Returns indices into `candidates`, in selection order.
pub(crate) fn maximin_given(
    fixed: &ScaledPoints,
    candidates: &ScaledPoints,
    take: usize,
) -> Vec<usize> {
    assert!(fixed.n > 0, "maximin_given requires a non-empty fixed set");
    assert_eq!(fixed.d, candidates.d);
    let nc = candidates.n;
    let take = take.min(nc);
    let mut min_d2: Vec<f64> = (0..nc)
        .into_par_iter()
        .map(|j| {
            let row = candidates.row(j);
            let mut best = f64::INFINITY;
            for i in 0..fixed.n {
                let other = fixed.row(i);
                let mut d2 = 0.0;
                for l in 0..fixed.d {
                    let dl = row[l] - other[l];
                    d2 += dl * dl;
                }
                if d2 < best {
                    best = d2;
                }
            }
            best
        })
        .collect();
    let mut order = Vec::with_capacity(take);
    for _ in 0..take {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, &d2) in min_d2.iter().enumerate() {
            if !d2.is_nan() && d2 > best.0 {
                best = (d2, j);
            }
        }
        let chosen = best.1;
        order.push(chosen);
        min_d2[chosen] = f64::NAN;
        let base = candidates.row(chosen);
        min_d2.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            for (k, slot) in chunk.iter_mut().enumerate() {
                if slot.is_nan() {
                    continue;
                }
                let other = candidates.row(c * CHUNK + k);
                let mut d2 = 0.0;
                for l in 0..candidates.d {
                    let dl = base[l] - other[l];
                    d2 += dl * dl;
                }
                if d2 < *slot {
                    *slot = d2;
                }
            }
        });
    }
    order
}

/// For each ordered position i, the min(m, i) nearest previously ordered
/// points (exact scan). Ties on distance go to the smaller original row.
pub fn nn_conditioning(x: ArrayView2<'_, f64>, order: &[usize], m: usize) -> Vec<Vec<u32>> {
    nn_sets(&ScaledPoints::unscaled(x), order, m)
}

pub(crate) fn nn_sets(xs: &ScaledPoints, order: &[usize], m: usize) -> Vec<Vec<u32>> {
    let n = order.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let k = m.min(i);
            if k == 0 {
                return Vec::new();
            }
            let target = xs.row(order[i]);
            let mut cand: Vec<(f64, usize, u32)> = (0..i)
                .map(|p| {
                    let other = xs.row(order[p]);
                    let mut d2 = 0.0;
                    for l in 0..xs.d {
                        let dl = target[l] - other[l];
                        d2 += dl * dl;
                    }
                    (d2, order[p], p as u32)
                })
                .collect();
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, |a, b| {
                    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                });
                cand.truncate(k);
            }
            let mut set: Vec<u32> = cand.into_iter().map(|(_, _, p)| p).collect();
            set.sort_unstable();
            set
        })
        .collect()
}

/// Conditioning on the first min(m, i) ordered points, the low-rank baseline.
pub fn lowrank_conditioning(n: usize, m: usize) -> Vec<Vec<u32>> {
    (0..n).map(|i| (0..m.min(i) as u32).collect()).collect()
}

impl ConditioningPlan {
    /// Build a training plan over the rows of `x` (already scaled).
    pub fn build(x: ArrayView2<'_, f64>, m: usize, conditioning: Conditioning) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("conditioning size m must be >= 1".into()));
        }
        let xs = ScaledPoints::unscaled(x);
        Ok(Self::build_points(&xs, m, conditioning))
    }

    pub(crate) fn build_points(xs: &ScaledPoints, m: usize, conditioning: Conditioning) -> Self {
        let order = maximin_order_points(xs);
        let cond_sets = match conditioning {
            Conditioning::NearestNeighbors => nn_sets(xs, &order, m),
            Conditioning::FirstM => lowrank_conditioning(order.len(), m),
        };
        Self { order, cond_sets, m }
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }
}

impl PredictionPlan {
    pub fn n_obs(&self) -> usize {
        self.obs_order.len()
    }

    pub fn n_pred(&self) -> usize {
        self.pred_order.len()
    }

    /// Original row behind a joint position: Ok(obs row) or Err(pred row).
    #[inline]
    pub fn joint_row(&self, p: usize) -> std::result::Result<usize, usize> {
        let n = self.obs_order.len();
        if p < n {
            Ok(self.obs_order[p])
        } else {
            Err(self.pred_order[p - n])
        }
    }
}

/// Joint plan for predicting at `x_pred` given observations at `x_obs` (both
/// already scaled): observed points in maximin order, then prediction points
/// in maximin order treating all observed points as predecessors, each
/// prediction conditioning on its min(m, #predecessors) nearest predecessors
/// (or the first ones, for [`Conditioning::FirstM`]).
pub fn prediction_plan(
    x_obs: ArrayView2<'_, f64>,
    x_pred: ArrayView2<'_, f64>,
    m: usize,
    conditioning: Conditioning,
) -> Result<PredictionPlan> {
    if m == 0 {
        return Err(Error::InvalidArgument("conditioning size m must be >= 1".into()));
    }
    if x_obs.ncols() != x_pred.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "prediction_plan: observed inputs have {} columns, prediction inputs {}",
            x_obs.ncols(),
            x_pred.ncols()
        )));
    }
    if x_obs.nrows() == 0 || x_pred.nrows() == 0 {
        return Err(Error::InvalidArgument("prediction_plan: empty observed or prediction set".into()));
    }
    let obs = ScaledPoints::unscaled(x_obs);
    let pred = ScaledPoints::unscaled(x_pred);
    Ok(prediction_plan_points(&obs, &pred, m, conditioning))
}

pub(crate) fn prediction_plan_points(
    obs: &ScaledPoints,
    pred: &ScaledPoints,
    m: usize,
    conditioning: Conditioning,
) -> PredictionPlan {
    let n = obs.n;
    let np = pred.n;
    let obs_order = maximin_order_points(obs);
    let pred_order = maximin_given(obs, pred, np);

    let cond_sets: Vec<Vec<u32>> = match conditioning {
        Conditioning::FirstM => (0..np).map(|j| (0..m.min(n + j) as u32).collect()).collect(),
        Conditioning::NearestNeighbors => {
            // coordinates by joint position
            let row_of = |p: usize| -> &[f64] {
                if p < n {
                    obs.row(obs_order[p])
                } else {
                    pred.row(pred_order[p - n])
                }
            };
            // tie key: original row, observed before prediction on exact ties
            let key_of = |p: usize| -> usize {
                if p < n {
                    obs_order[p]
                } else {
                    n + pred_order[p - n]
                }
            };
            (0..np)
                .into_par_iter()
                .map(|j| {
                    let k = m.min(n + j);
                    let target = pred.row(pred_order[j]);
                    let mut cand: Vec<(f64, usize, u32)> = (0..n + j)
                        .map(|p| {
                            let other = row_of(p);
                            let mut d2 = 0.0;
                            for l in 0..obs.d {
                                let dl = target[l] - other[l];
                                d2 += dl * dl;
                            }
                            (d2, key_of(p), p as u32)
                        })
                        .collect();
                    if k < cand.len() {
                        cand.select_nth_unstable_by(k - 1, |a, b| {
                            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                        });
                        cand.truncate(k);
                    }
                    let mut set: Vec<u32> = cand.into_iter().map(|(_, _, p)| p).collect();
                    set.sort_unstable();
                    set
                })
                .collect()
        }
    };
    PredictionPlan { obs_order, pred_order, cond_sets, m }
}

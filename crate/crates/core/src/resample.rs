//! Subsample-balanced adjustment statistics.
//!
//! Both sides of an adjustment pair are averaged over subsamples of the common
//! size `min(n₀, n_m)`, so that under MCAR the two averages have equal means
//! for any estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combine::CamComponents;
use crate::dataset::{project, AdjustmentSet, MaskedDataset, Pattern, PatternGroups, ProjectedSample};
use crate::error::{CamError, Result};
use crate::sampling::{binomial, stream_rng, Combinations, SubsetSampler};
use crate::stats;

pub const DEFAULT_BALANCE_BUDGET: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedAdjustment {
    pub pattern: Pattern,
    /// `θ̄_{0,m}`, the average over subsamples of the complete cases.
    pub theta0m_bar: f64,
    /// `θ̄_m`, the average over subsamples of `A_m`.
    pub thetam_bar: f64,
    pub subsample_size: usize,
    /// Subsamples evaluated on the complete-case and pattern sides.
    pub draws_used: (u64, u64),
    /// Whether each side enumerated every subsample.
    pub exhaustive: (bool, bool),
}

struct SideAverage {
    value: f64,
    draws: u64,
    exhaustive: bool,
}

fn side_stream(m: &Pattern, side: u64, draw: u64) -> u64 {
    (m.bits() as u64) << 33 | side << 32 | draw
}

/// The lowest-indexed failure wins, independent of scheduling.
fn first_error(values: Vec<Result<f64>>) -> Result<Vec<f64>> {
    values.into_iter().collect()
}

fn average_side<F>(sample: &ProjectedSample, k: usize, budget: u64, seed: u64, side: u64, estimator: &F) -> Result<SideAverage>
where
    F: Fn(&ProjectedSample) -> Result<f64> + Sync,
{
    let n = sample.len();
    let fail = |draw: u64, e: CamError| CamError::SubsampleFailure {
        draw: draw as usize,
        message: format!("{} side: {e}", if side == 0 { "complete-case" } else { "pattern" }),
    };
    if k == n {
        let v = estimator(sample).map_err(|e| fail(0, e))?;
        return Ok(SideAverage { value: v, draws: 1, exhaustive: true });
    }
    let total = binomial(n, k);
    if total <= budget as u128 {
        let mut subsets = Vec::with_capacity(total as usize);
        let mut comb = Combinations::new(n, k);
        while let Some(s) = comb.next_subset() {
            subsets.push(s.to_vec());
        }
        let values = subsets
            .par_iter()
            .enumerate()
            .map(|(b, s)| estimator(&sample.subset(s)).map_err(|e| fail(b as u64, e)))
            .collect::<Vec<_>>();
        let values = first_error(values)?;
        return Ok(SideAverage {
            value: stats::mean(&values),
            draws: total as u64,
            exhaustive: true,
        });
    }
    let m = sample.pattern();
    let values = (0..budget)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, side_stream(&m, side, b));
            let mut sampler = SubsetSampler::new(n, k);
            let s = sampler.draw_sorted(&mut rng).to_vec();
            estimator(&sample.subset(&s)).map_err(|e| fail(b, e))
        })
        .collect::<Vec<_>>();
    let values = first_error(values)?;
    Ok(SideAverage {
        value: stats::mean(&values),
        draws: budget,
        exhaustive: false,
    })
}

fn balanced_on<F>(
    ds: &MaskedDataset,
    a0: &[usize],
    rows_m: &[usize],
    m: &Pattern,
    estimator: &F,
    budget: u64,
    seed: u64,
) -> Result<BalancedAdjustment>
where
    F: Fn(&ProjectedSample) -> Result<f64> + Sync,
{
    if m.is_complete() {
        return Err(CamError::InvalidPattern(m.encode()));
    }
    if a0.is_empty() {
        return Err(CamError::NoCompleteCases);
    }
    if rows_m.is_empty() {
        return Err(CamError::TooFewRows {
            needed: 1,
            have: 0,
            context: format!("pattern {m}"),
        });
    }
    if budget == 0 {
        return Err(CamError::InvalidArgument("subsample budget must be ≥ 1".into()));
    }
    let k = a0.len().min(rows_m.len());
    let s0 = project(ds, a0, *m)?;
    let sm = project(ds, rows_m, *m)?;
    let c = average_side(&s0, k, budget, seed, 0, estimator)?;
    let p = average_side(&sm, k, budget, seed, 1, estimator)?;
    Ok(BalancedAdjustment {
        pattern: *m,
        theta0m_bar: c.value,
        thetam_bar: p.value,
        subsample_size: k,
        draws_used: (c.draws, p.draws),
        exhaustive: (c.exhaustive, p.exhaustive),
    })
}

/// Balanced pair `(θ̄_{0,m}, θ̄_m)` for pattern `m`, using the rows of `A_m`.
///
/// Each side averages `estimator` over `min(budget, C(n, k))` subsamples of
/// size `k = min(n₀, n_m)`, enumerating all of them when that fits in the
/// budget; the smaller side is used whole, once.
pub fn balanced_adjustment<F>(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    m: &Pattern,
    estimator: F,
    budget: u64,
    seed: u64,
) -> Result<BalancedAdjustment>
where
    F: Fn(&ProjectedSample) -> Result<f64> + Sync,
{
    balanced_on(ds, groups.complete(), groups.group(m), m, &estimator, budget, seed)
}

/// Balanced pairs for every pattern of `set` (effective rows), packaged with
/// `θ̂₀` for `combine`.
pub fn balanced_components<F>(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    set: &AdjustmentSet,
    theta0: f64,
    estimator: F,
    budget: u64,
    seed: u64,
) -> Result<(CamComponents, Vec<BalancedAdjustment>)>
where
    F: Fn(&ProjectedSample) -> Result<f64> + Sync,
{
    let pairs = set
        .entries()
        .iter()
        .map(|e| balanced_on(ds, groups.complete(), &e.rows, &e.pattern, &estimator, budget, seed))
        .collect::<Result<Vec<_>>>()?;
    let comps = CamComponents::new(
        theta0,
        pairs.iter().map(|p| p.theta0m_bar).collect(),
        pairs.iter().map(|p| p.thetam_bar).collect(),
    )?;
    Ok((comps, pairs))
}

/// Mean response of a projected sample.
pub fn response_mean(sample: &ProjectedSample) -> Result<f64> {
    if sample.is_empty() {
        return Err(CamError::TooFewRows {
            needed: 1,
            have: 0,
            context: "response mean".into(),
        });
    }
    Ok(stats::mean(sample.responses()))
}

//! CAM local-constant (Nadaraya–Watson) regression.
//!
//! Fits are computed relative to an anchor response (the first row of the
//! sample): `η̂ = a + Σ wᵢ(yᵢ − a)`. When responses are shifted by a constant
//! and the shifted values are exact, every fitted quantity shifts exactly too.

use serde::{Deserialize, Serialize};

use crate::combine::{combine, CamComponents};
use crate::dataset::{project, AdjustmentSet, MaskedDataset, Pattern, PatternGroups, ProjectedSample};
use crate::error::{CamError, Result};
use crate::kde::{kernel_constants, marginal_kernel, KernelFamily, SmootherSpec};
use crate::sampling::{stream_rng, CamRng};
use crate::stats;

/// Kernel mass below this is treated as no local data.
pub const MIN_MASS: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalWeights {
    pub weights: Vec<f64>,
    /// Total kernel mass before normalisation.
    pub rawmass: f64,
}

/// Normalise in place so that the left-to-right sum is exactly 1.
fn normalize(w: &mut [f64]) -> Option<f64> {
    let mass = stats::sum(w.iter().copied());
    if !(mass >= MIN_MASS) {
        return None;
    }
    let mut imax = 0;
    for v in w.iter_mut() {
        *v /= mass;
    }
    for i in 1..w.len() {
        if w[i] > w[imax] {
            imax = i;
        }
    }
    if w.iter().sum::<f64>() != 1.0 {
        fix_sum(w, imax);
    }
    Some(mass)
}

/// Adjust weights until the left-to-right sum is exactly 1.
///
/// A residual jump on the largest weight usually lands. Otherwise the last
/// positive weight is solved for: only exact zeros follow it, so the sum is
/// one monotone rounding of `prefix + v` and bisection on `v` finds 1.
fn fix_sum(w: &mut [f64], imax: usize) {
    let s: f64 = w.iter().sum();
    let v = (w[imax] + (1.0 - s)).max(0.0);
    let old = std::mem::replace(&mut w[imax], v);
    if w.iter().sum::<f64>() == 1.0 {
        return;
    }
    w[imax] = old;
    let Some(j) = w.iter().rposition(|v| *v > 0.0) else {
        return;
    };
    let mut prefix: f64 = w[..j].iter().sum();
    if prefix > 1.0 {
        // only reachable when j is not the largest weight
        let k = (0..j).fold(0, |k, i| if w[i] > w[k] { i } else { k });
        w[k] = (w[k] - (prefix - 1.0)).max(0.0);
        prefix = w[..j].iter().sum();
        while prefix > 1.0 && w[k] > 0.0 {
            w[k] = f64::from_bits(w[k].to_bits() - 1);
            prefix = w[..j].iter().sum();
        }
    }
    let guess = 1.0 - prefix;
    if prefix + guess == 1.0 {
        w[j] = guess;
        return;
    }
    // smallest non-negative v with prefix + v >= 1
    let (mut lb, mut hb) = (0u64, 1.0f64.to_bits());
    while hb - lb > 1 {
        let mid = lb + (hb - lb) / 2;
        if prefix + f64::from_bits(mid) >= 1.0 {
            hb = mid;
        } else {
            lb = mid;
        }
    }
    w[j] = f64::from_bits(hb);
}

fn check_query(sample: &ProjectedSample, x_m: &[f64], spec: &SmootherSpec) -> Result<()> {
    if sample.is_empty() {
        return Err(CamError::TooFewRows {
            needed: 1,
            have: 0,
            context: "regression sample".into(),
        });
    }
    if x_m.len() != sample.d_m() || spec.d != sample.d_m() {
        return Err(CamError::DimensionMismatch {
            expected: sample.d_m(),
            got: x_m.len(),
        });
    }
    Ok(())
}

fn no_local_data(x_m: &[f64], pattern: Pattern) -> CamError {
    CamError::NoLocalData(format!("pattern {pattern}, x = {x_m:?}"))
}

fn fill_weights(sample: &ProjectedSample, x_m: &[f64], spec: &SmootherSpec, buf: &mut Vec<f64>) -> Result<f64> {
    buf.clear();
    buf.extend((0..sample.len()).map(|i| spec.weight(sample.x(i), x_m)));
    normalize(buf).ok_or_else(|| no_local_data(x_m, sample.pattern()))
}

/// Normalised kernel weights `H_{A,m}` at `x^m`.
pub fn local_weights(sample: &ProjectedSample, x_m: &[f64], spec: &SmootherSpec) -> Result<LocalWeights> {
    check_query(sample, x_m, spec)?;
    let mut w = Vec::with_capacity(sample.len());
    let rawmass = fill_weights(sample, x_m, spec, &mut w)?;
    Ok(LocalWeights { weights: w, rawmass })
}

fn weighted_mean(w: &[f64], y: &[f64]) -> f64 {
    let a = y[0];
    let s: f64 = w.iter().zip(y).map(|(wi, yi)| wi * (yi - a)).sum();
    a + s
}

fn weighted_var(w: &[f64], y: &[f64], eta: f64) -> f64 {
    w.iter()
        .zip(y)
        .map(|(wi, yi)| {
            let r = yi - eta;
            wi * r * r
        })
        .sum()
}

/// `η̂_{A,m}(x^m) = Σ wᵢ yᵢ`.
pub fn loccon_point(sample: &ProjectedSample, x_m: &[f64], spec: &SmootherSpec) -> Result<f64> {
    let w = local_weights(sample, x_m, spec)?;
    Ok(weighted_mean(&w.weights, sample.responses()))
}

/// `Σ wᵢ (yᵢ − η̂)²`.
pub fn local_variance(sample: &ProjectedSample, x_m: &[f64], spec: &SmootherSpec, eta_hat: f64) -> Result<f64> {
    let w = local_weights(sample, x_m, spec)?;
    Ok(weighted_var(&w.weights, sample.responses(), eta_hat))
}

/// Fitted value and local residual variance in one pass.
fn fit(sample: &ProjectedSample, x_m: &[f64], spec: &SmootherSpec, buf: &mut Vec<f64>) -> Result<(f64, f64)> {
    fill_weights(sample, x_m, spec, buf)?;
    let eta = weighted_mean(buf, sample.responses());
    Ok((eta, weighted_var(buf, sample.responses(), eta)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternRegression {
    pub pattern: Pattern,
    pub n_m: usize,
    pub eta0m: f64,
    pub etam: f64,
    pub gamma: f64,
    pub sigma2_m: f64,
    /// A required fit had no local data; the pattern contributes nothing.
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamRegressionResult {
    pub eta_cam: f64,
    pub eta_cc: f64,
    pub sigma2_hat: f64,
    pub patterns: Vec<PatternRegression>,
    pub warnings: Vec<String>,
}

struct PatternSamples {
    pattern: Pattern,
    n_m: usize,
    spec: SmootherSpec,
    cc: ProjectedSample,
    own: ProjectedSample,
    pooled: ProjectedSample,
    /// `ν_{0,m} μ_{0,m} / ν_m`
    const_ratio: f64,
}

/// Projected samples prepared once for repeated CAM regression queries.
pub struct CamRegressor {
    spec: SmootherSpec,
    n0: usize,
    cc: ProjectedSample,
    patterns: Vec<PatternSamples>,
}

impl CamRegressor {
    pub fn new(ds: &MaskedDataset, groups: &PatternGroups, set: &AdjustmentSet, spec: &SmootherSpec) -> Result<Self> {
        if spec.d != ds.d() {
            return Err(CamError::DimensionMismatch {
                expected: ds.d(),
                got: spec.d,
            });
        }
        let a0 = groups.complete();
        if a0.is_empty() {
            return Err(CamError::NoCompleteCases);
        }
        let consts = kernel_constants(spec, set);
        let mut patterns = Vec::with_capacity(set.len());
        for (k, e) in set.entries().iter().enumerate() {
            let m = e.pattern;
            let mut pool: Vec<usize> = a0.iter().chain(&e.rows).copied().collect();
            pool.sort_unstable();
            pool.dedup();
            patterns.push(PatternSamples {
                pattern: m,
                n_m: e.rows.len(),
                spec: marginal_kernel(spec, &m),
                cc: project(ds, a0, m)?,
                own: project(ds, &e.rows, m)?,
                pooled: project(ds, &pool, m)?,
                const_ratio: consts.nu_0m[k] * consts.mu0_m[k] / consts.nu_m[k],
            });
        }
        Ok(CamRegressor {
            spec: *spec,
            n0: a0.len(),
            cc: project(ds, a0, Pattern::complete(ds.d()))?,
            patterns,
        })
    }

    /// CAM fit at `x` with `γ̂_{R,m} = σ̂² ν_{0,m} μ_{0,m} n_m / (σ̂_m² ν_m (n₀ + n_m))`,
    /// where `σ̂²/σ̂_m²` is capped at 1.
    pub fn at(&self, x: &[f64]) -> Result<CamRegressionResult> {
        check_query(&self.cc, x, &self.spec)?;
        let mut buf = Vec::new();
        let (eta_cc, sigma2_hat) = fit(&self.cc, x, &self.spec, &mut buf)?;
        let mut warnings = Vec::new();
        let mut per = Vec::with_capacity(self.patterns.len());
        let mut xm = Vec::new();
        for p in &self.patterns {
            xm.clear();
            xm.extend(p.pattern.observed_features().iter().map(|&j| x[j]));
            let fits = (|| -> Result<(f64, f64, f64)> {
                let e0 = fit(&p.cc, &xm, &p.spec, &mut buf)?.0;
                let em = fit(&p.own, &xm, &p.spec, &mut buf)?.0;
                let s2 = fit(&p.pooled, &xm, &p.spec, &mut buf)?.1;
                Ok((e0, em, s2))
            })();
            let mut entry = PatternRegression {
                pattern: p.pattern,
                n_m: p.n_m,
                eta0m: 0.0,
                etam: 0.0,
                gamma: 0.0,
                sigma2_m: 0.0,
                excluded: true,
            };
            match fits {
                Err(e) => warnings.push(format!("pattern {} excluded: {e}", p.pattern)),
                Ok((e0, em, s2)) => {
                    entry.eta0m = e0;
                    entry.etam = em;
                    entry.sigma2_m = s2;
                    entry.excluded = false;
                    if s2 > 0.0 {
                        // σ_m² = σ² + τ_m ≥ σ², so the plug-in ratio is capped at 1
                        let ratio = (sigma2_hat / s2).min(1.0);
                        entry.gamma = ratio * p.const_ratio * p.n_m as f64 / (self.n0 + p.n_m) as f64;
                    } else {
                        warnings.push(format!("pattern {}: zero local variance; weight set to 0", p.pattern));
                    }
                }
            }
            per.push(entry);
        }
        if !per.is_empty() && per.iter().all(|p| p.excluded) {
            warnings.push("every pattern excluded; CAM equals the complete-case fit".into());
        }
        let comps = CamComponents::new(
            eta_cc,
            per.iter().map(|p| p.eta0m).collect(),
            per.iter().map(|p| p.etam).collect(),
        )?;
        let gamma: Vec<f64> = per.iter().map(|p| p.gamma).collect();
        Ok(CamRegressionResult {
            eta_cam: combine(&comps, &gamma)?,
            eta_cc,
            sigma2_hat,
            patterns: per,
            warnings,
        })
    }

    /// Complete-case fit only.
    pub fn cc_at(&self, x: &[f64]) -> Result<f64> {
        check_query(&self.cc, x, &self.spec)?;
        let mut buf = Vec::new();
        Ok(fit(&self.cc, x, &self.spec, &mut buf)?.0)
    }
}

pub fn cam_regress_at(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    set: &AdjustmentSet,
    x: &[f64],
    spec: &SmootherSpec,
) -> Result<CamRegressionResult> {
    CamRegressor::new(ds, groups, set, spec)?.at(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoocvScore {
    pub h: f64,
    pub sse: f64,
    /// Held-out rows with no remaining kernel mass.
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoocvResult {
    pub h: f64,
    pub scores: Vec<LoocvScore>,
    pub warnings: Vec<String>,
}

/// Leave-one-out bandwidth choice on the complete cases.
///
/// Bandwidths are ranked by (rows without local mass, squared error); ties go
/// to the smaller bandwidth.
pub fn loocv_bandwidth(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    grid: &[f64],
    family: KernelFamily,
) -> Result<LoocvResult> {
    if grid.is_empty() {
        return Err(CamError::InvalidArgument("empty bandwidth grid".into()));
    }
    if let Some(h) = grid.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        return Err(CamError::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    let a0 = groups.complete();
    if a0.len() < 2 {
        return Err(CamError::TooFewRows {
            needed: 2,
            have: a0.len(),
            context: "leave-one-out cross-validation".into(),
        });
    }
    let s = project(ds, a0, Pattern::complete(ds.d()))?;
    let n = s.len();
    // squared distances (Gaussian) or max-abs distances (box), row-major
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (xi, xj) = (s.x(i), s.x(j));
            dist[i * n + j] = match family {
                KernelFamily::Gaussian => xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum(),
                KernelFamily::Box => xi.iter().zip(xj).fold(0.0, |m, (a, b)| m.max((a - b).abs())),
            };
        }
    }
    let y = s.responses();
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut scores = Vec::with_capacity(sorted.len());
    let mut w = vec![0.0; n];
    for &h in &sorted {
        let mut sse = Vec::with_capacity(n);
        let mut failures = 0;
        for i in 0..n {
            for j in 0..n {
                let d = dist[i * n + j];
                w[j] = if j == i {
                    0.0
                } else {
                    match family {
                        KernelFamily::Gaussian => (-0.5 * d / (h * h)).exp(),
                        KernelFamily::Box => {
                            if d <= h {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    }
                };
            }
            let mass: f64 = w.iter().sum();
            if !(mass >= MIN_MASS) {
                failures += 1;
                continue;
            }
            let a = y[if i == 0 { 1 } else { 0 }];
            let fit = a + w.iter().zip(y).map(|(wj, yj)| wj * (yj - a)).sum::<f64>() / mass;
            sse.push((y[i] - fit) * (y[i] - fit));
        }
        scores.push(LoocvScore {
            h,
            sse: stats::sum(sse),
            failures,
        });
    }
    let mut best = 0;
    for (k, sc) in scores.iter().enumerate().skip(1) {
        let b = &scores[best];
        if sc.failures < b.failures || (sc.failures == b.failures && sc.sse < b.sse) {
            best = k;
        }
    }
    let mut warnings = Vec::new();
    if scores[best].failures > 0 {
        warnings.push(format!(
            "{} held-out rows had no local data at the chosen bandwidth",
            scores[best].failures
        ));
    }
    Ok(LoocvResult {
        h: scores[best].h,
        scores,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiseEstimate {
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Monte Carlo `∫(η̂ − η)² dP_X` over `n_mc` draws; evaluation failures are
/// skipped, and more than 10% failures is an error.
pub fn mise<E, T, S>(etahat: E, eta: T, mut sampler: S, n_mc: usize, seed: u64) -> Result<MiseEstimate>
where
    E: Fn(&[f64]) -> Result<f64>,
    T: Fn(&[f64]) -> f64,
    S: FnMut(&mut CamRng) -> Vec<f64>,
{
    if n_mc == 0 {
        return Err(CamError::InvalidArgument("n_mc must be ≥ 1".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut sq = Vec::with_capacity(n_mc);
    let mut skipped = 0;
    for _ in 0..n_mc {
        let x = sampler(&mut rng);
        match etahat(&x) {
            Ok(v) => {
                let e = v - eta(&x);
                sq.push(e * e);
            }
            Err(_) => skipped += 1,
        }
    }
    if skipped * 10 > n_mc {
        return Err(CamError::TooManyFailures {
            failed: skipped,
            total: n_mc,
        });
    }
    Ok(MiseEstimate {
        value: stats::mean(&sq),
        used: sq.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{group_by_pattern, select_adjustment_set};
    use proptest::prelude::*;
    use rand::Rng;

    fn one_d(x: &[f64], y: &[f64]) -> ProjectedSample {
        ProjectedSample::from_parts(Pattern::complete(1), x.iter().map(|&v| vec![v]).collect(), y.to_vec()).unwrap()
    }

    fn gauss(h: f64, d: usize) -> SmootherSpec {
        SmootherSpec::new(KernelFamily::Gaussian, h, d).unwrap()
    }

    #[test]
    fn weight_examples() {
        let s = one_d(&[0.3], &[1.0]);
        assert_eq!(local_weights(&s, &[5.0], &gauss(1.0, 1)).unwrap().weights, vec![1.0]);
        let s = one_d(&[-1.0, 1.0], &[0.0, 2.0]);
        let w = local_weights(&s, &[0.0], &gauss(0.7, 1)).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.5]);
        assert_eq!(loccon_point(&s, &[0.0], &gauss(0.7, 1)).unwrap(), 1.0);
        assert_eq!(local_variance(&s, &[0.0], &gauss(0.7, 1), 1.0).unwrap(), 1.0);
        let boxk = SmootherSpec::new(KernelFamily::Box, 0.5, 1).unwrap();
        assert!(matches!(local_weights(&s, &[10.0], &boxk), Err(CamError::NoLocalData(_))));
    }

    #[test]
    fn constant_response_is_exact() {
        let x: Vec<f64> = (0..25).map(|i| (i as f64 * 0.31).sin()).collect();
        let s = one_d(&x, &[0.7; 25]);
        let spec = gauss(0.2, 1);
        assert_eq!(loccon_point(&s, &[0.1], &spec).unwrap(), 0.7);
        assert_eq!(local_variance(&s, &[0.1], &spec, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn linear_response_bias_shrinks_with_h() {
        let x: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.01).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.5 * v * v).collect();
        let s = one_d(&x, &y);
        let err = |h: f64| (loccon_point(&s, &[0.0], &gauss(h, 1)).unwrap() - 0.0).abs();
        let (e1, e2) = (err(0.2), err(0.1));
        assert!(e2 < e1 && e2 < 0.01, "{e1} {e2}");
    }

    #[test]
    fn local_variance_recovers_noise() {
        let mut rng = stream_rng(5, 0);
        let n = 5000;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v + 0.3 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let s = one_d(&x, &y);
        let spec = gauss(0.05, 1);
        let eta = loccon_point(&s, &[0.5], &spec).unwrap();
        let v = local_variance(&s, &[0.5], &spec, eta).unwrap();
        assert!((v / 0.09 - 1.0).abs() < 0.1, "{v}");
    }

    fn dataset(shift: f64, scale: f64) -> MaskedDataset {
        let rows: Vec<(Vec<Option<f64>>, f64)> = (0..80)
            .map(|i| {
                let a = (i as f64 * 0.77).sin();
                let b = (i as f64 * 1.91).cos();
                let y = 8.0 + ((i * 37) % 97) as f64 / 32.0;
                (vec![if i % 3 == 0 { None } else { Some(a) }, Some(b)], y * scale + shift)
            })
            .collect();
        MaskedDataset::from_rows(2, rows).unwrap()
    }

    #[test]
    fn gaussian_gamma_formula() {
        let ds = dataset(0.0, 1.0);
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, 1, false).unwrap();
        let r = cam_regress_at(&ds, &groups, &set, &[0.1, -0.2], &gauss(0.4, 2)).unwrap();
        let p = &r.patterns[0];
        assert!(r.sigma2_hat < p.sigma2_m);
        let want = r.sigma2_hat * p.n_m as f64 / (p.sigma2_m * (groups.complete().len() + p.n_m) as f64);
        assert!((p.gamma - want).abs() <= 1e-15 * want);
        let cc = r.eta_cc - p.gamma * (p.eta0m - p.etam);
        assert_eq!(r.eta_cam, cc);
    }

    #[test]
    fn variance_ratio_is_capped() {
        // rows lacking x1 sit at the mean response, so the pooled variance is below σ̂²
        let rows: Vec<(Vec<Option<f64>>, f64)> = (0..90)
            .map(|i| {
                let t = i as f64 / 90.0;
                if i % 3 == 0 {
                    (vec![None, Some(t)], 0.5)
                } else {
                    (vec![Some(t), Some(t)], (i % 2) as f64)
                }
            })
            .collect();
        let ds = MaskedDataset::from_rows(2, rows).unwrap();
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, 1, false).unwrap();
        let r = cam_regress_at(&ds, &groups, &set, &[0.5, 0.5], &gauss(0.3, 2)).unwrap();
        let p = &r.patterns[0];
        assert!(r.sigma2_hat > p.sigma2_m);
        let nm = p.n_m as f64;
        let bound = nm / (groups.complete().len() as f64 + nm);
        assert!((p.gamma - bound).abs() < 1e-15);
    }

    #[test]
    fn all_excluded_gives_cc() {
        let rows: Vec<(Vec<Option<f64>>, f64)> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0;
                if i % 2 == 0 {
                    (vec![Some(t), Some(t)], t * 3.0)
                } else {
                    (vec![None, Some(5.0 + t)], 1.0)
                }
            })
            .collect();
        let ds = MaskedDataset::from_rows(2, rows).unwrap();
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, 1, false).unwrap();
        let spec = SmootherSpec::new(KernelFamily::Box, 0.2, 2).unwrap();
        let r = cam_regress_at(&ds, &groups, &set, &[0.5, 0.5], &spec).unwrap();
        assert!(r.patterns[0].excluded);
        assert_eq!(r.eta_cam.to_bits(), r.eta_cc.to_bits());
        assert_eq!(r.warnings.len(), 2);
        assert!(cam_regress_at(&ds, &groups, &set, &[0.5, 3.0], &spec).is_err());
    }

    #[test]
    fn loocv_examples() {
        let ds = dataset(0.0, 1.0);
        let groups = group_by_pattern(&ds);
        let one = loocv_bandwidth(&ds, &groups, &[0.3], KernelFamily::Gaussian).unwrap();
        assert_eq!(one.h, 0.3);
        let flat = ds.map_responses(|_| 2.0);
        let r = loocv_bandwidth(&flat, &groups, &[0.5, 0.2, 0.9], KernelFamily::Gaussian).unwrap();
        assert_eq!(r.h, 0.2);
        assert!(loocv_bandwidth(&ds, &groups, &[], KernelFamily::Gaussian).is_err());
    }

    #[test]
    fn mise_examples() {
        let sampler = |rng: &mut CamRng| vec![rng.random::<f64>()];
        let eta = |x: &[f64]| x[0] * 2.0;
        let zero = mise(|x| Ok(eta(x)), eta, sampler, 100, 1).unwrap();
        assert_eq!(zero.value, 0.0);
        let one = mise(|x| Ok(eta(x) + 1.0), eta, sampler, 100, 1).unwrap();
        assert!((one.value - 1.0).abs() < 1e-12);
        let bad = mise(
            |x| if x[0] < 0.5 { Err(CamError::NoLocalData(String::new())) } else { Ok(0.0) },
            eta,
            sampler,
            100,
            1,
        );
        assert!(matches!(bad, Err(CamError::TooManyFailures { .. })));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(
            x in proptest::collection::vec(-3.0f64..3.0, 1..60),
            q in -2.0f64..2.0,
            h in 0.05f64..3.0,
        ) {
            let s = one_d(&x, &vec![0.0; x.len()]);
            if let Ok(w) = local_weights(&s, &[q], &gauss(h, 1)) {
                let total: f64 = w.weights.iter().sum();
                prop_assert_eq!(total, 1.0);
                prop_assert!(w.weights.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn shift_and_scale_equivariance(k in 0u32..2048, e in -3i32..4, qx in -0.8f64..0.8) {
            let c = k as f64 / 1024.0;
            let s = 2f64.powi(e);
            let base = dataset(0.0, 1.0);
            let groups = group_by_pattern(&base);
            let set = select_adjustment_set(&groups, 1, false).unwrap();
            let spec = gauss(0.5, 2);
            let x = [qx, 0.3];
            let r0 = cam_regress_at(&base, &groups, &set, &x, &spec).unwrap();
            let rc = cam_regress_at(&dataset(c, 1.0), &groups, &set, &x, &spec).unwrap();
            prop_assert_eq!(rc.eta_cc, r0.eta_cc + c);
            prop_assert_eq!(rc.eta_cam, r0.eta_cam + c);
            prop_assert_eq!(rc.sigma2_hat, r0.sigma2_hat);
            prop_assert_eq!(rc.patterns[0].gamma, r0.patterns[0].gamma);
            prop_assert_eq!(rc.patterns[0].eta0m, r0.patterns[0].eta0m + c);
            let rs = cam_regress_at(&dataset(0.0, s), &groups, &set, &x, &spec).unwrap();
            prop_assert_eq!(rs.eta_cam, r0.eta_cam * s);
            prop_assert_eq!(rs.sigma2_hat, r0.sigma2_hat * s * s);
            prop_assert_eq!(rs.patterns[0].gamma, r0.patterns[0].gamma);
        }
    }
}

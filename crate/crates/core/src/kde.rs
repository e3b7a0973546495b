//! CAM kernel density estimation with product kernels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::combine::{combine, CamComponents};
use crate::dataset::{project, AdjustmentSet, MaskedDataset, Pattern, PatternGroups, ProjectedSample};
use crate::error::{CamError, Result};
use crate::stats;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Coordinatewise product kernel families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    /// Height `1/2` on `[−1, 1]` per coordinate.
    Box,
}

impl KernelFamily {
    /// One-dimensional kernel.
    #[inline]
    pub fn k1(self, t: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => INV_SQRT_2PI * (-0.5 * t * t).exp(),
            KernelFamily::Box => {
                if t.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }

    /// `∫ k²` of the one-dimensional kernel.
    pub fn nu1(self) -> f64 {
        match self {
            KernelFamily::Gaussian => 0.5 / std::f64::consts::PI.sqrt(),
            KernelFamily::Box => 0.5,
        }
    }

    /// `ν = ∫ K²` in dimension `d`.
    pub fn nu(self, d: usize) -> f64 {
        match self {
            KernelFamily::Gaussian => (4.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0),
            KernelFamily::Box => 0.5f64.powi(d as i32),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Box => "box",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = CamError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(KernelFamily::Gaussian),
            "box" | "uniform" => Ok(KernelFamily::Box),
            other => Err(CamError::Unsupported(format!("kernel family '{other}'"))),
        }
    }
}

/// Kernel family, bandwidth and dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmootherSpec {
    pub family: KernelFamily,
    pub h: f64,
    pub d: usize,
}

impl SmootherSpec {
    pub fn new(family: KernelFamily, h: f64, d: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(CamError::InvalidArgument(format!("bandwidth must be positive, got {h}")));
        }
        Ok(SmootherSpec { family, h, d })
    }

    /// `K(u)` as the product of one-dimensional kernels.
    #[inline]
    pub fn kernel(&self, u: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let s: f64 = u.iter().map(|t| t * t).sum();
                INV_SQRT_2PI.powi(u.len() as i32) * (-0.5 * s).exp()
            }
            KernelFamily::Box => {
                if u.iter().all(|t| t.abs() <= 1.0) {
                    0.5f64.powi(u.len() as i32)
                } else {
                    0.0
                }
            }
        }
    }

    /// `K_h(x − c)`, i.e. `K((x − c)/h)` without the `h^{-d}` factor.
    #[inline]
    pub fn weight(&self, x: &[f64], c: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let mut s = 0.0;
                for (a, b) in x.iter().zip(c) {
                    let t = (a - b) / self.h;
                    s += t * t;
                }
                INV_SQRT_2PI.powi(x.len() as i32) * (-0.5 * s).exp()
            }
            KernelFamily::Box => {
                if x.iter().zip(c).all(|(a, b)| ((a - b) / self.h).abs() <= 1.0) {
                    0.5f64.powi(x.len() as i32)
                } else {
                    0.0
                }
            }
        }
    }
}

/// The kernel for the coordinates observed under `m`: same family and bandwidth.
pub fn marginal_kernel(spec: &SmootherSpec, m: &Pattern) -> SmootherSpec {
    SmootherSpec {
        d: m.d_m(),
        ..*spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    pub nu: f64,
    pub nu_m: Vec<f64>,
    pub nu_0m: Vec<f64>,
    pub mu0_m: Vec<f64>,
    pub nu_m1m2: Vec<Vec<f64>>,
}

/// Analytic constants for the patterns of `set`.
///
/// For product kernels `ν_{0,m} = ν_m`, `μ_{0,m} = 1`, and `ν_{m₁,m₂}` is the
/// one-dimensional `∫k²` raised to the number of coordinates observed under both.
pub fn kernel_constants(spec: &SmootherSpec, set: &AdjustmentSet) -> KernelConstants {
    let f = spec.family;
    let pats = set.patterns();
    let nu_m: Vec<f64> = pats.iter().map(|m| f.nu(m.d_m())).collect();
    let nu_m1m2 = pats
        .iter()
        .map(|a| pats.iter().map(|b| f.nu(a.pmax(b).d_m())).collect())
        .collect();
    KernelConstants {
        nu: f.nu(spec.d),
        nu_0m: nu_m.clone(),
        mu0_m: vec![1.0; pats.len()],
        nu_m,
        nu_m1m2,
    }
}

/// `f̂_{A,m}(x^m) = (|A| h^{d_m})⁻¹ Σ K_m((X_i^m − x^m)/h)`.
pub fn kde_point(sample: &ProjectedSample, x_m: &[f64], spec: &SmootherSpec) -> Result<f64> {
    if sample.is_empty() {
        return Err(CamError::TooFewRows {
            needed: 1,
            have: 0,
            context: "density sample".into(),
        });
    }
    if sample.d_m() == 0 {
        return Err(CamError::InvalidArgument(
            "density of a pattern with no observed features".into(),
        ));
    }
    if x_m.len() != sample.d_m() || spec.d != sample.d_m() {
        return Err(CamError::DimensionMismatch {
            expected: sample.d_m(),
            got: x_m.len(),
        });
    }
    let s = stats::sum((0..sample.len()).map(|i| spec.weight(sample.x(i), x_m)));
    Ok(s / (sample.len() as f64 * spec.h.powi(spec.d as i32)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternDensity {
    pub pattern: Pattern,
    pub n_m: usize,
    pub f0m: f64,
    pub fm: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamDensityResult {
    pub f_cam: f64,
    pub f_cc: f64,
    pub patterns: Vec<PatternDensity>,
    pub warnings: Vec<String>,
}

/// `γ̂_{D,m} = ν_{0,m} n_m f̂₀ / (ν_m (n₀ f̂_{0,m} + n_m f̂_m))`, or 0 when the denominator vanishes.
pub fn gamma_density(nu_ratio: f64, n0: usize, nm: usize, f0: f64, f0m: f64, fm: f64) -> Option<f64> {
    let denom = n0 as f64 * f0m + nm as f64 * fm;
    if denom > 0.0 {
        Some(nu_ratio * nm as f64 * f0 / denom)
    } else {
        None
    }
}

fn project_point(x: &[f64], m: &Pattern) -> Vec<f64> {
    m.observed_features().iter().map(|&j| x[j]).collect()
}

fn check_density_inputs(ds: &MaskedDataset, groups: &PatternGroups, spec: &SmootherSpec) -> Result<()> {
    if spec.d != ds.d() {
        return Err(CamError::DimensionMismatch {
            expected: ds.d(),
            got: spec.d,
        });
    }
    if groups.complete().is_empty() {
        return Err(CamError::NoCompleteCases);
    }
    Ok(())
}

/// CAM density at `x` with the closed-form weights (off-diagonal `Λ_D` taken as 0).
///
/// Patterns observing no feature get weight 0.
pub fn cam_density_at(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    set: &AdjustmentSet,
    x: &[f64],
    spec: &SmootherSpec,
) -> Result<CamDensityResult> {
    check_density_inputs(ds, groups, spec)?;
    if x.len() != ds.d() {
        return Err(CamError::DimensionMismatch {
            expected: ds.d(),
            got: x.len(),
        });
    }
    let a0 = groups.complete();
    let n0 = a0.len();
    let s0 = project(ds, a0, Pattern::complete(ds.d()))?;
    let f_cc = kde_point(&s0, x, spec)?;
    let consts = kernel_constants(spec, set);
    let mut warnings = Vec::new();
    let mut per = Vec::with_capacity(set.len());
    for (k, e) in set.entries().iter().enumerate() {
        let m = e.pattern;
        let nm = e.rows.len();
        if m.d_m() == 0 {
            warnings.push(format!("pattern {m} observes no features; weight set to 0"));
            per.push(PatternDensity { pattern: m, n_m: nm, f0m: 0.0, fm: 0.0, gamma: 0.0 });
            continue;
        }
        let mspec = marginal_kernel(spec, &m);
        let xm = project_point(x, &m);
        let f0m = kde_point(&project(ds, a0, m)?, &xm, &mspec)?;
        let fm = kde_point(&project(ds, &e.rows, m)?, &xm, &mspec)?;
        let gamma = match gamma_density(consts.nu_0m[k] / consts.nu_m[k], n0, nm, f_cc, f0m, fm) {
            Some(g) => g,
            None => {
                warnings.push(format!("pattern {m}: no kernel mass at x^m; weight set to 0"));
                0.0
            }
        };
        per.push(PatternDensity { pattern: m, n_m: nm, f0m, fm, gamma });
    }
    let comps = CamComponents::new(
        f_cc,
        per.iter().map(|p| p.f0m).collect(),
        per.iter().map(|p| p.fm).collect(),
    )?;
    let gamma: Vec<f64> = per.iter().map(|p| p.gamma).collect();
    Ok(CamDensityResult {
        f_cam: combine(&comps, &gamma)?,
        f_cc,
        patterns: per,
        warnings,
    })
}

/// A rectangular midpoint grid; points are ordered with the last axis fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<Vec<f64>>,
    pub cell_volume: f64,
}

impl Grid {
    /// `per_axis` midpoints per coordinate over `[lo_j, hi_j]`.
    pub fn new(lo: &[f64], hi: &[f64], per_axis: usize) -> Result<Grid> {
        if lo.len() != hi.len() || lo.is_empty() || per_axis == 0 {
            return Err(CamError::InvalidArgument("degenerate grid".into()));
        }
        let mut axes = Vec::with_capacity(lo.len());
        let mut vol = 1.0;
        for (&a, &b) in lo.iter().zip(hi) {
            if !(b > a) {
                return Err(CamError::InvalidArgument(format!("empty grid range [{a}, {b}]")));
            }
            let step = (b - a) / per_axis as f64;
            vol *= step;
            axes.push((0..per_axis).map(|k| a + (k as f64 + 0.5) * step).collect());
        }
        Ok(Grid { axes, cell_volume: vol })
    }

    /// Bounding box of the observed values of each feature, widened by `pad`.
    pub fn around(ds: &MaskedDataset, pad: f64, per_axis: usize) -> Result<Grid> {
        let d = ds.d();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..ds.n() {
            for j in 0..d {
                if let Some(v) = ds.value(i, j) {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        if lo.iter().any(|v| !v.is_finite()) {
            return Err(CamError::InvalidArgument("a feature is never observed".into()));
        }
        let lo: Vec<f64> = lo.iter().map(|v| v - pad).collect();
        let hi: Vec<f64> = hi.iter().map(|v| v + pad).collect();
        Grid::new(&lo, &hi, per_axis)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of the point with flat index `idx`.
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        for j in (0..self.dim()).rev() {
            let len = self.axes[j].len();
            p[j] = self.axes[j][idx % len];
            idx /= len;
        }
        p
    }

    /// The grid over a subset of axes.
    pub fn select_axes(&self, axes: &[usize]) -> Grid {
        let sel: Vec<Vec<f64>> = axes.iter().map(|&j| self.axes[j].clone()).collect();
        let vol = sel
            .iter()
            .map(|a| if a.len() > 1 { a[1] - a[0] } else { 1.0 })
            .product();
        Grid { axes: sel, cell_volume: vol }
    }

    /// Map each full-grid flat index to its flat index on the sub-grid over `axes`.
    fn sub_index(&self, axes: &[usize]) -> Vec<usize> {
        let n = self.len();
        let d = self.dim();
        let mut out = Vec::with_capacity(n);
        let mut multi = vec![0usize; d];
        for _ in 0..n {
            let mut s = 0;
            for &j in axes {
                s = s * self.axes[j].len() + multi[j];
            }
            out.push(s);
            for j in (0..d).rev() {
                multi[j] += 1;
                if multi[j] < self.axes[j].len() {
                    break;
                }
                multi[j] = 0;
            }
        }
        out
    }
}

/// Kernel density estimate at every grid point, using the product structure.
pub fn kde_grid(sample: &ProjectedSample, grid: &Grid, spec: &SmootherSpec) -> Result<Vec<f64>> {
    let d = grid.dim();
    if sample.is_empty() {
        return Err(CamError::TooFewRows {
            needed: 1,
            have: 0,
            context: "density sample".into(),
        });
    }
    if sample.d_m() != d || spec.d != d {
        return Err(CamError::DimensionMismatch {
            expected: sample.d_m(),
            got: d,
        });
    }
    let n = sample.len();
    // factors[j][g * n + i] = k((X_ij − g)/h)
    let factors: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut f = Vec::with_capacity(grid.axes[j].len() * n);
            for &g in &grid.axes[j] {
                f.extend((0..n).map(|i| spec.family.k1((sample.x(i)[j] - g) / spec.h)));
            }
            f
        })
        .collect();
    let scale = 1.0 / (n as f64 * spec.h.powi(d as i32));
    let mut out = Vec::with_capacity(grid.len());
    let mut prefix = vec![1.0; n];
    fill_grid(&factors, &grid.axes, 0, &mut prefix, n, scale, &mut out);
    Ok(out)
}

fn fill_grid(
    factors: &[Vec<f64>],
    axes: &[Vec<f64>],
    j: usize,
    prefix: &mut Vec<f64>,
    n: usize,
    scale: f64,
    out: &mut Vec<f64>,
) {
    let last = j + 1 == axes.len();
    for g in 0..axes[j].len() {
        let f = &factors[j][g * n..(g + 1) * n];
        if last {
            let s = stats::sum(prefix.iter().zip(f).map(|(a, b)| a * b));
            out.push(s * scale);
        } else {
            let mut next: Vec<f64> = prefix.iter().zip(f).map(|(a, b)| a * b).collect();
            fill_grid(factors, axes, j + 1, &mut next, n, scale, out);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamDensityGrid {
    pub f_cc: Vec<f64>,
    pub f_cam: Vec<f64>,
    pub patterns: Vec<Pattern>,
    /// Per pattern, `γ̂_{D,m}` at each grid point.
    pub gamma: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// `cam_density_at` over every grid point.
pub fn cam_density_grid(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    set: &AdjustmentSet,
    grid: &Grid,
    spec: &SmootherSpec,
) -> Result<CamDensityGrid> {
    check_density_inputs(ds, groups, spec)?;
    if grid.dim() != ds.d() {
        return Err(CamError::DimensionMismatch {
            expected: ds.d(),
            got: grid.dim(),
        });
    }
    let a0 = groups.complete();
    let n0 = a0.len();
    let f_cc = kde_grid(&project(ds, a0, Pattern::complete(ds.d()))?, grid, spec)?;
    let consts = kernel_constants(spec, set);
    let mut adjust = vec![0.0; grid.len()];
    let mut gammas = Vec::with_capacity(set.len());
    let mut warnings = Vec::new();
    for (k, e) in set.entries().iter().enumerate() {
        let m = e.pattern;
        if m.d_m() == 0 {
            warnings.push(format!("pattern {m} observes no features; weight set to 0"));
            gammas.push(vec![0.0; grid.len()]);
            continue;
        }
        let obs = m.observed_features();
        let sub = grid.select_axes(&obs);
        let mspec = marginal_kernel(spec, &m);
        let f0m = kde_grid(&project(ds, a0, m)?, &sub, &mspec)?;
        let fm = kde_grid(&project(ds, &e.rows, m)?, &sub, &mspec)?;
        let map = grid.sub_index(&obs);
        let ratio = consts.nu_0m[k] / consts.nu_m[k];
        let mut zero_mass = 0usize;
        let g: Vec<f64> = map
            .iter()
            .zip(&f_cc)
            .zip(adjust.iter_mut())
            .map(|((&s, &f0), a)| {
                let gm = gamma_density(ratio, n0, e.rows.len(), f0, f0m[s], fm[s]).unwrap_or_else(|| {
                    zero_mass += 1;
                    0.0
                });
                *a += gm * (f0m[s] - fm[s]);
                gm
            })
            .collect();
        if zero_mass > 0 {
            warnings.push(format!(
                "pattern {m}: no kernel mass at {zero_mass} grid points; weight set to 0 there"
            ));
        }
        gammas.push(g);
    }
    let f_cam = f_cc
        .iter()
        .zip(&adjust)
        .map(|(&f, &a)| if a == 0.0 { f } else { f - a })
        .collect();
    Ok(CamDensityGrid {
        f_cc,
        f_cam,
        patterns: set.patterns(),
        gamma: gammas,
        warnings,
    })
}

/// `½ Σ |f̂ − f| · cell_volume`.
pub fn tv_distance(fhat: &[f64], f: &[f64], cell_volume: f64) -> Result<f64> {
    if fhat.len() != f.len() {
        return Err(CamError::DimensionMismatch {
            expected: f.len(),
            got: fhat.len(),
        });
    }
    if !(cell_volume > 0.0) {
        return Err(CamError::InvalidArgument("cell volume must be positive".into()));
    }
    Ok(0.5 * stats::sum(fhat.iter().zip(f).map(|(a, b)| (a - b).abs())) * cell_volume)
}

/// Normal-reference bandwidth `1.06 · σ̄ · n^{−1/(d+4)}`, `σ̄` the geometric
/// mean of the coordinate standard deviations.
pub fn rule_of_thumb_bandwidth(sample: &ProjectedSample) -> Result<f64> {
    let n = sample.len();
    let d = sample.d_m();
    if n < 2 || d == 0 {
        return Err(CamError::TooFewRows {
            needed: 2,
            have: n,
            context: "bandwidth rule".into(),
        });
    }
    let mut log_sd = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| sample.x(i)[j]).collect();
        let s = stats::sd(&col);
        if !(s > 0.0) {
            return Err(CamError::InvalidArgument(format!(
                "coordinate {} has zero spread; bandwidth rule undefined",
                j + 1
            )));
        }
        log_sd += s.ln();
    }
    let sigma = (log_sd / d as f64).exp();
    Ok(1.06 * sigma * (n as f64).powf(-1.0 / (d as f64 + 4.0)))
}

/// Self-convolution `(k ∗ k)(t)` of the one-dimensional kernel.
fn k1_self_conv(family: KernelFamily, t: f64) -> f64 {
    match family {
        KernelFamily::Gaussian => INV_SQRT_2PI * (-0.25 * t * t).exp() / std::f64::consts::SQRT_2,
        KernelFamily::Box => (2.0 - t.abs()).max(0.0) / 4.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LscvResult {
    pub h: f64,
    /// `(h, score)` for every grid bandwidth, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Least-squares cross-validation, `∫f̂² − (2/n) Σᵢ f̂₋ᵢ(Xᵢ)`, minimised
/// over `grid`; ties go to the smaller bandwidth.
pub fn lscv_bandwidth(sample: &ProjectedSample, family: KernelFamily, grid: &[f64]) -> Result<LscvResult> {
    let n = sample.len();
    let d = sample.d_m();
    if n < 2 || d == 0 {
        return Err(CamError::TooFewRows {
            needed: 2,
            have: n,
            context: "least-squares cross-validation".into(),
        });
    }
    if grid.is_empty() || grid.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(CamError::InvalidArgument("bandwidth grid must be nonempty and positive".into()));
    }
    let mut diffs = Vec::with_capacity(n * (n - 1) / 2 * d);
    for i in 0..n {
        for j in i + 1..n {
            diffs.extend(sample.x(i).iter().zip(sample.x(j)).map(|(a, b)| a - b));
        }
    }
    let nf = n as f64;
    let mut scores = Vec::with_capacity(grid.len());
    for &h in grid {
        let mut conv = 0.0;
        let mut kern = 0.0;
        for pair in diffs.chunks_exact(d) {
            let (mut a, mut b) = (1.0, 1.0);
            for &t in pair {
                a *= k1_self_conv(family, t / h);
                b *= family.k1(t / h);
            }
            conv += a;
            kern += b;
        }
        let hd = h.powi(d as i32);
        let diag = nf * k1_self_conv(family, 0.0).powi(d as i32);
        let score = (diag + 2.0 * conv) / (nf * nf * hd) - 4.0 * kern / (nf * (nf - 1.0) * hd);
        scores.push((h, score));
    }
    let mut best = 0;
    for k in 1..scores.len() {
        let (h, s) = scores[k];
        let (hb, sb) = scores[best];
        if s < sb || (s == sb && h < hb) {
            best = k;
        }
    }
    Ok(LscvResult { h: scores[best].0, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{group_by_pattern, select_adjustment_set};
    use proptest::prelude::*;

    fn p(s: &str) -> Pattern {
        Pattern::parse(s).unwrap()
    }

    fn one_d(points: &[f64]) -> ProjectedSample {
        ProjectedSample::from_parts(
            Pattern::complete(1),
            points.iter().map(|&v| vec![v]).collect(),
            vec![0.0; points.len()],
        )
        .unwrap()
    }

    #[test]
    fn constants() {
        assert!((KernelFamily::Gaussian.nu(1) - 0.282_094_791_773_878_1).abs() < 1e-15);
        for d in 1..=5 {
            let want = (4.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0);
            assert!((KernelFamily::Gaussian.nu(d) - want).abs() < 1e-12);
            assert!((KernelFamily::Gaussian.nu1().powi(d as i32) - want).abs() < 1e-12);
        }
        assert_eq!(KernelFamily::Box.nu(3), 0.125);
        let set = AdjustmentSet::from_entries(
            vec![
                crate::dataset::AdjustmentEntry { pattern: p("100"), rows: vec![] },
                crate::dataset::AdjustmentEntry { pattern: p("011"), rows: vec![] },
            ],
            false,
        )
        .unwrap();
        let spec = SmootherSpec::new(KernelFamily::Gaussian, 0.5, 3).unwrap();
        let c = kernel_constants(&spec, &set);
        assert_eq!(c.nu_0m, c.nu_m);
        assert_eq!(c.mu0_m, vec![1.0, 1.0]);
        // 011 and 100 share no observed coordinate
        assert_eq!(c.nu_m1m2[0][1], 1.0);
        assert_eq!(c.nu_m1m2[0][0], c.nu_m[0]);
    }

    #[test]
    fn box_nu_is_integral_of_square() {
        // numeric ∫k² on [−1.5, 1.5]
        let f = KernelFamily::Box;
        let steps = 30_000;
        let dx = 3.0 / steps as f64;
        let s: f64 = (0..steps)
            .map(|k| f.k1(-1.5 + (k as f64 + 0.5) * dx).powi(2) * dx)
            .sum();
        assert!((s - f.nu1()).abs() < 1e-3);
    }

    #[test]
    fn marginal_dimension() {
        let spec = SmootherSpec::new(KernelFamily::Box, 0.3, 3).unwrap();
        let m = marginal_kernel(&spec, &p("110"));
        assert_eq!((m.d, m.h, m.family), (1, 0.3, KernelFamily::Box));
        assert_eq!(marginal_kernel(&spec, &p("000")), spec);
    }

    #[test]
    fn single_point_density() {
        let s = one_d(&[0.7]);
        for h in [1.0, 2.0, 0.25] {
            let spec = SmootherSpec::new(KernelFamily::Gaussian, h, 1).unwrap();
            let v = kde_point(&s, &[0.7], &spec).unwrap();
            assert!((v - INV_SQRT_2PI / h).abs() < 1e-12);
        }
        let spec = SmootherSpec::new(KernelFamily::Gaussian, 1.0, 1).unwrap();
        assert!(kde_point(&s, &[100.0], &spec).unwrap() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let s = one_d(&[-1.0, 0.2, 0.3, 2.5]);
        let spec = SmootherSpec::new(KernelFamily::Gaussian, 0.4, 1).unwrap();
        let g = Grid::new(&[-6.0], &[8.0], 4000).unwrap();
        let v = kde_grid(&s, &g, &spec).unwrap();
        let total: f64 = v.iter().sum::<f64>() * g.cell_volume;
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn tv_examples() {
        let g = Grid::new(&[0.0], &[1.5], 3000).unwrap();
        let f: Vec<f64> = g.axes[0].iter().map(|&x| if x <= 1.0 { 1.0 } else { 0.0 }).collect();
        let q: Vec<f64> = g.axes[0].iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(tv_distance(&f, &f, g.cell_volume).unwrap(), 0.0);
        assert!((tv_distance(&f, &q, g.cell_volume).unwrap() - 0.5).abs() < 0.01);
        assert!(tv_distance(&f, &q[1..], g.cell_volume).is_err());
    }

    fn dataset() -> MaskedDataset {
        let rows: Vec<(Vec<Option<f64>>, f64)> = (0..60)
            .map(|i| {
                let a = (i as f64 * 0.77).sin();
                let b = a * 0.6 + (i as f64 * 1.91).cos() * 0.5;
                (vec![if i % 3 == 0 { None } else { Some(a) }, Some(b)], 0.0)
            })
            .collect();
        MaskedDataset::from_rows(2, rows).unwrap()
    }

    #[test]
    fn grid_matches_pointwise() {
        let ds = dataset();
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, 1, false).unwrap();
        let spec = SmootherSpec::new(KernelFamily::Gaussian, 0.35, 2).unwrap();
        let grid = Grid::around(&ds, 1.0, 7).unwrap();
        let gr = cam_density_grid(&ds, &groups, &set, &grid, &spec).unwrap();
        for idx in [0, 5, 17, 24, 48] {
            let x = grid.point(idx);
            let pt = cam_density_at(&ds, &groups, &set, &x, &spec).unwrap();
            assert!((pt.f_cc - gr.f_cc[idx]).abs() < 1e-12);
            assert!((pt.f_cam - gr.f_cam[idx]).abs() < 1e-12);
            assert!((pt.patterns[0].gamma - gr.gamma[0][idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_adjustments_give_cc() {
        let ds = dataset();
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, 1, false).unwrap();
        let spec = SmootherSpec::new(KernelFamily::Box, 0.5, 2).unwrap();
        // far outside: all densities 0, weights 0
        let r = cam_density_at(&ds, &groups, &set, &[50.0, 50.0], &spec).unwrap();
        assert_eq!(r.f_cam, r.f_cc);
        assert_eq!(r.patterns[0].gamma, 0.0);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn rule_of_thumb() {
        let s = one_d(&[0.0, 1.0, 2.0, 3.0]);
        let h = rule_of_thumb_bandwidth(&s).unwrap();
        let sd = stats::sd(&[0.0, 1.0, 2.0, 3.0]);
        assert!((h - 1.06 * sd * 4f64.powf(-0.2)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn gamma_within_bound(
            n0 in 1usize..500, nm in 1usize..500,
            f0 in 1e-6f64..5.0, f0m in 1e-6f64..5.0, fm in 1e-6f64..5.0,
        ) {
            let g = gamma_density(1.0, n0, nm, f0, f0m, fm).unwrap();
            prop_assert!(g >= 0.0);
            let tol = 1.0 + 1e-12;
            prop_assert!(g <= f0 / fm * tol);
            prop_assert!(g <= nm as f64 / n0 as f64 * f0 / f0m * tol);
        }

        #[test]
        fn kde_nonnegative(
            pts in proptest::collection::vec(-3.0f64..3.0, 1..20),
            q in -5.0f64..5.0,
            h in 0.05f64..2.0,
        ) {
            let s = one_d(&pts);
            for fam in [KernelFamily::Gaussian, KernelFamily::Box] {
                let spec = SmootherSpec::new(fam, h, 1).unwrap();
                prop_assert!(kde_point(&s, &[q], &spec).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn lscv_matches_direct_integration() {
        let pts = [0.1, 0.4, 0.45, 1.3, 2.0, -0.7];
        let s = one_d(&pts);
        for family in [KernelFamily::Gaussian, KernelFamily::Box] {
            let grid = [0.2, 0.5, 0.9];
            let r = lscv_bandwidth(&s, family, &grid).unwrap();
            for &(h, score) in &r.scores {
                let spec = SmootherSpec::new(family, h, 1).unwrap();
                let f = |x: f64| pts.iter().map(|&c| family.k1((x - c) / h)).sum::<f64>() / (pts.len() as f64 * h);
                // midpoint rule; the box integrand is piecewise constant on a 1e-4 lattice
                let (lo, hi, m) = (-5.0, 6.0, 110_000);
                let dx = (hi - lo) / m as f64;
                let int_sq: f64 = (0..m).map(|k| f(lo + (k as f64 + 0.5) * dx).powi(2)).sum::<f64>() * dx;
                let loo: f64 = (0..pts.len())
                    .map(|i| {
                        let rest: Vec<f64> = pts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
                        kde_point(&one_d(&rest), &[pts[i]], &spec).unwrap()
                    })
                    .sum();
                let want = int_sq - 2.0 * loo / pts.len() as f64;
                let tol = if family == KernelFamily::Box { 2e-3 } else { 1e-9 };
                assert!((score - want).abs() < tol, "{family} h={h}: {score} vs {want}");
            }
            assert!(grid.contains(&r.h));
        }
        let one = lscv_bandwidth(&s, KernelFamily::Gaussian, &[0.3]).unwrap();
        assert_eq!(one.h, 0.3);
        assert!(lscv_bandwidth(&one_d(&[1.0]), KernelFamily::Gaussian, &[0.3]).is_err());
        assert!(lscv_bandwidth(&s, KernelFamily::Gaussian, &[]).is_err());
    }

    #[test]
    fn lscv_shrinks_with_n_on_a_smooth_density() {
        use rand_distr::{Distribution, StandardNormal};
        let grid: Vec<f64> = (0..30).map(|k| 0.05 * 1.12f64.powi(k)).collect();
        let mut picks = Vec::new();
        for n in [100, 1600] {
            let mut rng = crate::sampling::stream_rng(4, n as u64);
            let pts: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            picks.push(lscv_bandwidth(&one_d(&pts), KernelFamily::Gaussian, &grid).unwrap().h);
        }
        assert!(picks[1] < picks[0], "{picks:?}");
    }
}

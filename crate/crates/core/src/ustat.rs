//! U-statistics: point estimates, the order-(4r−2) estimators of `(ψ, Ω, Λ)`
//! and the data-driven CAM U-statistic with a Gaussian interval.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::combine::{combine, optimal_gamma, CamComponents, MseGeometry};
use crate::dataset::{
    project, AdjustmentSet, MaskedDataset, Pattern, PatternGroups, ProjectedSample, Rec,
};
use crate::error::{CamError, Result};
use crate::linalg::least_squares;
use crate::sampling::{binomial, stream_rng, CamRng, Combinations, SubsetSampler};
use crate::stats::{normal_quantile, MeanAccumulator};

pub const DEFAULT_GEOMETRY_BUDGET: u64 = 100_000;
/// Point estimates enumerate exactly up to this many subsets.
pub const DEFAULT_POINT_BUDGET: u64 = 10_000_000;

pub type KernelFn = dyn Fn(&[Rec<'_>]) -> f64 + Send + Sync;

/// A variable referenced by a built-in kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coord {
    /// Feature index in the full `0..d` numbering.
    Feature(usize),
    Response,
}

/// What a kernel estimates, when known; used by `linear_adjustment`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetForm {
    Mean(Coord),
    Covariance(Coord, Coord),
    Constant(f64),
    Other,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    X(usize),
    Y,
}

impl Slot {
    fn resolve(pattern: &Pattern, c: Coord) -> Result<Slot> {
        match c {
            Coord::Response => Ok(Slot::Y),
            Coord::Feature(j) => {
                if j >= pattern.d() {
                    return Err(CamError::FeatureOutOfRange {
                        index: j,
                        d: pattern.d(),
                    });
                }
                pattern.position_of(j).map(Slot::X).ok_or_else(|| {
                    CamError::InvalidArgument(format!(
                        "feature {} is missing under pattern {}",
                        j + 1,
                        pattern
                    ))
                })
            }
        }
    }

    #[inline]
    fn get(self, r: &Rec<'_>) -> f64 {
        match self {
            Slot::X(p) => r.x[p],
            Slot::Y => r.y,
        }
    }
}

/// A symmetric kernel of order `r` on records projected to `pattern`.
#[derive(Clone)]
pub struct UKernelSpec {
    name: String,
    order: usize,
    pattern: Pattern,
    form: TargetForm,
    eval: Arc<KernelFn>,
}

impl fmt::Debug for UKernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UKernelSpec")
            .field("name", &self.name)
            .field("order", &self.order)
            .field("pattern", &self.pattern)
            .field("form", &self.form)
            .finish()
    }
}

impl UKernelSpec {
    pub fn new<F>(name: impl Into<String>, order: usize, pattern: Pattern, f: F) -> Result<Self>
    where
        F: Fn(&[Rec<'_>]) -> f64 + Send + Sync + 'static,
    {
        if order == 0 {
            return Err(CamError::InvalidArgument("kernel order must be ≥ 1".into()));
        }
        Ok(UKernelSpec {
            name: name.into(),
            order,
            pattern,
            form: TargetForm::Other,
            eval: Arc::new(f),
        })
    }

    pub fn with_form(mut self, form: TargetForm) -> Self {
        self.form = form;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn pattern(&self) -> Pattern {
        self.pattern
    }

    pub fn form(&self) -> TargetForm {
        self.form
    }

    #[inline]
    pub fn eval(&self, recs: &[Rec<'_>]) -> f64 {
        (self.eval)(recs)
    }

    /// `φ(z) = x_j` (order 1).
    pub fn mean(pattern: Pattern, j: usize) -> Result<Self> {
        Self::coord_mean(pattern, Coord::Feature(j))
    }

    /// `φ(z) = y` (order 1).
    pub fn response_mean(pattern: Pattern) -> Self {
        Self::coord_mean(pattern, Coord::Response).expect("response is always observed")
    }

    pub fn coord_mean(pattern: Pattern, c: Coord) -> Result<Self> {
        let s = Slot::resolve(&pattern, c)?;
        let name = match c {
            Coord::Feature(j) => format!("mean(x{})", j + 1),
            Coord::Response => "mean(y)".to_string(),
        };
        Ok(Self::new(name, 1, pattern, move |r| s.get(&r[0]))?.with_form(TargetForm::Mean(c)))
    }

    /// `φ(z₁, z₂) = ½(a₁ − a₂)(b₁ − b₂)` (order 2).
    pub fn covariance(pattern: Pattern, a: Coord, b: Coord) -> Result<Self> {
        let sa = Slot::resolve(&pattern, a)?;
        let sb = Slot::resolve(&pattern, b)?;
        let label = |c: Coord| match c {
            Coord::Feature(j) => format!("x{}", j + 1),
            Coord::Response => "y".to_string(),
        };
        let name = format!("cov({},{})", label(a), label(b));
        Ok(Self::new(name, 2, pattern, move |r| {
            0.5 * (sa.get(&r[0]) - sa.get(&r[1])) * (sb.get(&r[0]) - sb.get(&r[1]))
        })?
        .with_form(TargetForm::Covariance(a, b)))
    }

    /// `φ(y₁, y₂) = ½(y₁ − y₂)²` (order 2).
    pub fn response_half_sq_diff(pattern: Pattern) -> Self {
        Self::covariance(pattern, Coord::Response, Coord::Response)
            .expect("response is always observed")
    }

    pub fn constant(pattern: Pattern, order: usize, c: f64) -> Result<Self> {
        Ok(Self::new(format!("const({c})"), order, pattern, move |_| c)?
            .with_form(TargetForm::Constant(c)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UStatEstimate {
    pub value: f64,
    /// Full enumeration rather than Monte Carlo over subsets.
    pub exact: bool,
    pub subsets_used: u64,
}

fn check_budget(budget: u64) -> Result<()> {
    if budget == 0 {
        return Err(CamError::InvalidArgument("subset budget must be ≥ 1".into()));
    }
    Ok(())
}

/// Average `f` over all `size`-subsets of `0..n` if there are at most `budget`
/// of them, otherwise over `budget` uniformly drawn ones. Subsets are passed in
/// increasing order.
fn average_over_subsets<F>(n: usize, size: usize, budget: u64, rng: &mut CamRng, mut f: F) -> (f64, bool, u64)
where
    F: FnMut(&[usize]) -> f64,
{
    let total = binomial(n, size);
    let mut acc = MeanAccumulator::new();
    if total <= budget as u128 {
        let mut comb = Combinations::new(n, size);
        while let Some(s) = comb.next_subset() {
            acc.add(f(s));
        }
        (acc.mean(), true, total as u64)
    } else {
        let mut sampler = SubsetSampler::new(n, size);
        for _ in 0..budget {
            acc.add(f(sampler.draw_sorted(rng)));
        }
        (acc.mean(), false, budget)
    }
}

fn check_pattern(sample: &ProjectedSample, k: &UKernelSpec) -> Result<()> {
    if sample.pattern() != k.pattern() {
        return Err(CamError::InvalidArgument(format!(
            "kernel '{}' lives on pattern {}, sample is projected to {}",
            k.name(),
            k.pattern(),
            sample.pattern()
        )));
    }
    Ok(())
}

/// The U-statistic of `k` over `sample`, exact when `C(n, r) ≤ budget`.
pub fn eval_ustat(sample: &ProjectedSample, k: &UKernelSpec, budget: u64, seed: u64) -> Result<UStatEstimate> {
    eval_ustat_with(sample, k, budget, &mut stream_rng(seed, 0))
}

pub fn eval_ustat_with(
    sample: &ProjectedSample,
    k: &UKernelSpec,
    budget: u64,
    rng: &mut CamRng,
) -> Result<UStatEstimate> {
    check_budget(budget)?;
    check_pattern(sample, k)?;
    let r = k.order();
    if sample.len() < r {
        return Err(CamError::TooFewRows {
            needed: r,
            have: sample.len(),
            context: format!("U-statistic '{}'", k.name()),
        });
    }
    let mut buf: Vec<Rec<'_>> = Vec::with_capacity(r);
    let (value, exact, used) = average_over_subsets(sample.len(), r, budget, rng, |s| {
        buf.clear();
        buf.extend(s.iter().map(|&p| sample.record(p)));
        k.eval(&buf)
    });
    Ok(UStatEstimate {
        value,
        exact,
        subsets_used: used,
    })
}

/// `θ̂₀`: the U-statistic over the complete cases.
pub fn cc_ustat(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    phi: &UKernelSpec,
    budget: u64,
    seed: u64,
) -> Result<UStatEstimate> {
    let a0 = groups.complete();
    if a0.len() < phi.order() {
        return Err(CamError::TooFewRows {
            needed: phi.order(),
            have: a0.len(),
            context: "complete cases".into(),
        });
    }
    let s0 = project(ds, a0, Pattern::complete(ds.d()))?;
    eval_ustat(&s0, phi, budget, seed)
}

/// `(θ̂_{0,m}, θ̂_m)`: `φ_m` over the complete cases and over the effective rows of `m`.
pub fn adjustment_pair(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    set: &AdjustmentSet,
    m: &Pattern,
    phim: &UKernelSpec,
    budget: u64,
    seed: u64,
) -> Result<(UStatEstimate, UStatEstimate)> {
    let rows = set.rows(m)?;
    let s0m = project(ds, groups.complete(), *m)?;
    let sm = project(ds, rows, *m)?;
    let bits = m.bits();
    let a = eval_ustat_with(&s0m, phim, budget, &mut stream_rng(seed, stream_id(3, bits, 1)))?;
    let b = eval_ustat_with(&sm, phim, budget, &mut stream_rng(seed, stream_id(3, bits, 2)))?;
    Ok((a, b))
}

/// Stream ids keyed by pattern bits, so an entry's draws do not depend on `|M|`.
fn stream_id(kind: u64, a: u32, b: u32) -> u64 {
    (kind << 62) | ((a as u64) << 31) | b as u64
}

/// Slots of the order-(4r−2) integrand inside a sorted subset `s`:
/// `{f(s[A]) − f(s[B])}·{g(s[AM]) − g(s[BM])}/2` with `A = (1..r)`,
/// `B = (2r..3r−1)`, `AM = (1, r+1..2r−1)`, `BM = (2r, 3r..4r−2)` (1-based).
#[derive(Clone, Debug)]
struct IntegrandSlots {
    a: Vec<usize>,
    b: Vec<usize>,
    am: Vec<usize>,
    bm: Vec<usize>,
}

impl IntegrandSlots {
    fn new(r: usize) -> Self {
        let a = (0..r).collect();
        let b = (2 * r - 1..3 * r - 1).collect();
        let am = std::iter::once(0).chain(r..2 * r - 1).collect();
        let bm = std::iter::once(2 * r - 1).chain(3 * r - 1..4 * r - 2).collect();
        IntegrandSlots { a, b, am, bm }
    }

    fn size(&self) -> usize {
        2 * self.a.len() + 2 * self.am.len() - 2
    }
}

#[inline]
fn eval_at<'s>(
    sample: &'s ProjectedSample,
    k: &UKernelSpec,
    subset: &[usize],
    slots: &[usize],
    buf: &mut Vec<Rec<'s>>,
) -> f64 {
    buf.clear();
    buf.extend(slots.iter().map(|&i| sample.record(subset[i])));
    k.eval(buf)
}

/// One geometry entry: both samples hold the same rows in the same order,
/// projected for `k1` and `k2` respectively.
fn geometry_entry(
    s1: &ProjectedSample,
    k1: &UKernelSpec,
    s2: &ProjectedSample,
    k2: &UKernelSpec,
    budget: u64,
    rng: &mut CamRng,
    context: &str,
) -> Result<(f64, bool)> {
    debug_assert_eq!(s1.len(), s2.len());
    let r = k1.order();
    let slots = IntegrandSlots::new(r);
    let size = slots.size();
    if s1.len() < size {
        return Err(CamError::TooFewRows {
            needed: size,
            have: s1.len(),
            context: context.to_string(),
        });
    }
    let mut buf1: Vec<Rec<'_>> = Vec::with_capacity(r);
    let mut buf2: Vec<Rec<'_>> = Vec::with_capacity(r);
    let (v, exact, _) = average_over_subsets(s1.len(), size, budget, rng, |s| {
        let f = eval_at(s1, k1, s, &slots.a, &mut buf1) - eval_at(s1, k1, s, &slots.b, &mut buf1);
        let g = eval_at(s2, k2, s, &slots.am, &mut buf2) - eval_at(s2, k2, s, &slots.bm, &mut buf2);
        0.5 * f * g
    });
    Ok((v, exact))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UGeometryEstimate {
    pub omega: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub psi: f64,
    /// Subsets per entry.
    pub budget: u64,
    /// Every entry was computed by full enumeration.
    pub exact: bool,
}

fn sorted_union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn check_kernels(set: &AdjustmentSet, phi: &UKernelSpec, phims: &[UKernelSpec]) -> Result<()> {
    if !phi.pattern().is_complete() {
        return Err(CamError::InvalidArgument(format!(
            "target kernel '{}' must live on the complete pattern",
            phi.name()
        )));
    }
    if phims.len() != set.len() {
        return Err(CamError::DimensionMismatch {
            expected: set.len(),
            got: phims.len(),
        });
    }
    for (e, k) in set.entries().iter().zip(phims) {
        if k.pattern() != e.pattern {
            return Err(CamError::InvalidArgument(format!(
                "adjustment kernel '{}' lives on {}, expected {}",
                k.name(),
                k.pattern(),
                e.pattern
            )));
        }
        if k.order() != phi.order() {
            return Err(CamError::InvalidArgument(format!(
                "adjustment kernel '{}' has order {}, target has order {}",
                k.name(),
                k.order(),
                phi.order()
            )));
        }
    }
    Ok(())
}

/// Estimates `ψ_U`, `Ω_U` and `Λ_U` by U-statistics of order `4r − 2`.
///
/// `ψ̂` and `Ω̂` use the complete cases; the diagonal of `Λ̂` pools `A_0` with
/// the effective rows of `m` and is scaled by `1 + n₀/n_m`; the off-diagonal
/// pools `A_0` with the rows of the entrywise-minimum pattern.
pub fn estimate_geometry(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    set: &AdjustmentSet,
    phi: &UKernelSpec,
    phims: &[UKernelSpec],
    budget: u64,
    seed: u64,
) -> Result<UGeometryEstimate> {
    check_budget(budget)?;
    check_kernels(set, phi, phims)?;
    let a0 = groups.complete();
    let n0 = a0.len();
    let s0 = project(ds, a0, Pattern::complete(ds.d()))?;
    let mut exact = true;
    let (psi, e) = geometry_entry(&s0, phi, &s0, phi, budget, &mut stream_rng(seed, stream_id(0, 0, 0)), "complete cases")?;
    exact &= e;

    let k = set.len();
    let entries = set.entries();
    let mut omega = vec![0.0; k];
    let mut lambda = vec![vec![0.0; k]; k];
    for (i, (e_i, phim)) in entries.iter().zip(phims).enumerate() {
        let m = e_i.pattern;
        let s0m = project(ds, a0, m)?;
        let mut rng = stream_rng(seed, stream_id(1, m.bits(), 0));
        let (v, e) = geometry_entry(&s0, phi, &s0m, phim, budget, &mut rng, "complete cases")?;
        omega[i] = v;
        exact &= e;

        let nm = e_i.rows.len();
        if nm == 0 {
            return Err(CamError::TooFewRows {
                needed: 1,
                have: 0,
                context: format!("rows with pattern {m}"),
            });
        }
        let pool = sorted_union(a0, &e_i.rows);
        let sp = project(ds, &pool, m)?;
        let mut rng = stream_rng(seed, stream_id(2, m.bits(), m.bits()));
        let ctx = format!("pooled rows for pattern {m}");
        let (v, e) = geometry_entry(&sp, phim, &sp, phim, budget, &mut rng, &ctx)?;
        lambda[i][i] = (1.0 + n0 as f64 / nm as f64) * v;
        exact &= e;
    }
    for i in 0..k {
        for j in i + 1..k {
            let (m1, m2) = (entries[i].pattern, entries[j].pattern);
            let m12 = m1.pmin(&m2);
            let extra: Vec<usize> = if m12.is_complete() {
                Vec::new()
            } else if set.integrate {
                groups.integrated_rows(&m12)
            } else {
                groups.group(&m12).to_vec()
            };
            let extra: Vec<usize> = extra.into_iter().filter(|&r| ds.pattern(r).le(&m12)).collect();
            let pool = sorted_union(a0, &extra);
            let s1 = project(ds, &pool, m1)?;
            let s2 = project(ds, &pool, m2)?;
            let mut rng = stream_rng(seed, stream_id(2, m1.bits(), m2.bits()));
            let ctx = format!("pooled rows for patterns {m1}, {m2}");
            let (v, e) = geometry_entry(&s1, &phims[i], &s2, &phims[j], budget, &mut rng, &ctx)?;
            lambda[i][j] = v;
            lambda[j][i] = v;
            exact &= e;
        }
    }
    Ok(UGeometryEstimate {
        omega,
        lambda,
        psi,
        budget,
        exact,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamUStatConfig {
    /// Two-sided interval level `α` (0.05 gives a 95% interval).
    pub level: f64,
    pub geometry_budget: u64,
    pub point_budget: u64,
    pub seed: u64,
}

impl Default for CamUStatConfig {
    fn default() -> Self {
        CamUStatConfig {
            level: 0.05,
            geometry_budget: DEFAULT_GEOMETRY_BUDGET,
            point_budget: DEFAULT_POINT_BUDGET,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamUStatResult {
    pub estimate: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub gamma: Vec<f64>,
    pub psi: f64,
    pub omega: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub n0: usize,
    pub patterns: Vec<Pattern>,
    pub n_m: Vec<usize>,
    pub theta0_m: Vec<f64>,
    pub theta_m: Vec<f64>,
    pub cc_estimate: f64,
    pub cc_se: f64,
    pub cc_ci: (f64, f64),
    pub level: f64,
    /// `ψ̂ − Ω̂ᵀΛ̂⁺Ω̂` was negative and the variance was set to 0.
    pub variance_clamped: bool,
    pub lambda_indefinite: bool,
    pub geometry_exact: bool,
    pub warnings: Vec<String>,
}

/// The CAM U-statistic with plug-in weights `γ̂ = Λ̂⁺Ω̂` and its interval.
pub fn cam_ustat(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    set: &AdjustmentSet,
    phi: &UKernelSpec,
    phims: &[UKernelSpec],
    cfg: &CamUStatConfig,
) -> Result<CamUStatResult> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(CamError::InvalidArgument(format!("level {} not in (0, 1)", cfg.level)));
    }
    check_budget(cfg.point_budget)?;
    check_kernels(set, phi, phims)?;
    let a0 = groups.complete();
    let n0 = a0.len();
    let r = phi.order();
    if n0 < r {
        return Err(CamError::TooFewRows {
            needed: r,
            have: n0,
            context: "complete cases".into(),
        });
    }
    let s0 = project(ds, a0, Pattern::complete(ds.d()))?;
    let theta0 = eval_ustat_with(&s0, phi, cfg.point_budget, &mut stream_rng(cfg.seed, stream_id(3, 0, 0)))?;
    let mut theta0_m = Vec::with_capacity(set.len());
    let mut theta_m = Vec::with_capacity(set.len());
    for (e, phim) in set.entries().iter().zip(phims) {
        let (a, b) = adjustment_pair(ds, groups, set, &e.pattern, phim, cfg.point_budget, cfg.seed)?;
        theta0_m.push(a.value);
        theta_m.push(b.value);
    }
    let geom = estimate_geometry(ds, groups, set, phi, phims, cfg.geometry_budget, cfg.seed)?;
    let opt = optimal_gamma(&MseGeometry::new(geom.omega.clone(), geom.lambda.clone())?)?;
    let comps = CamComponents::new(theta0.value, theta0_m.clone(), theta_m.clone())?;
    let estimate = combine(&comps, &opt.gamma)?;

    let mut warnings = Vec::new();
    let raw_var = geom.psi - opt.reduction;
    let variance_clamped = raw_var < 0.0;
    if variance_clamped {
        warnings.push(format!(
            "plug-in variance ψ̂ − Ω̂ᵀΛ̂⁺Ω̂ = {raw_var:e} is negative; clamped to 0"
        ));
    }
    if opt.indefinite {
        warnings.push("estimated Λ is indefinite; negative directions were kept in the pseudo-inverse".into());
    }
    let rf = r as f64;
    let n0f = n0 as f64;
    let se = rf * (raw_var.max(0.0) / n0f).sqrt();
    let cc_se = rf * (geom.psi.max(0.0) / n0f).sqrt();
    let z = normal_quantile(1.0 - cfg.level / 2.0);
    Ok(CamUStatResult {
        estimate,
        se,
        ci: (estimate - z * se, estimate + z * se),
        gamma: opt.gamma,
        psi: geom.psi,
        omega: geom.omega,
        lambda: geom.lambda,
        n0,
        patterns: set.patterns(),
        n_m: set.entries().iter().map(|e| e.rows.len()).collect(),
        theta0_m,
        theta_m,
        cc_estimate: theta0.value,
        cc_se,
        cc_ci: (theta0.value - z * cc_se, theta0.value + z * cc_se),
        level: cfg.level,
        variance_clamped,
        lambda_indefinite: opt.indefinite,
        geometry_exact: geom.exact,
        warnings,
    })
}

/// `φ_m` for a mean or covariance target: every coordinate that `m` does not
/// observe is replaced by the response.
pub fn response_proxy(m: &Pattern, target: &UKernelSpec) -> Result<UKernelSpec> {
    let sub = |c: Coord| match c {
        Coord::Feature(j) if j < m.d() && m.is_missing(j) => Coord::Response,
        c => c,
    };
    match target.form() {
        TargetForm::Mean(c) => UKernelSpec::coord_mean(*m, sub(c)),
        TargetForm::Covariance(a, b) => UKernelSpec::covariance(*m, sub(a), sub(b)),
        TargetForm::Constant(c) => UKernelSpec::constant(*m, target.order(), c),
        TargetForm::Other => Err(CamError::Unsupported(format!(
            "no response proxy for kernel '{}'",
            target.name()
        ))),
    }
}

/// A fitted surrogate `φ_m` for `E{φ(Z) | Z^m}`.
#[derive(Clone, Debug)]
pub struct LinearAdjustment {
    pub kernel: UKernelSpec,
    /// Names of the design columns.
    pub basis: Vec<String>,
    /// One coefficient vector per fitted quantity.
    pub coefficients: Vec<Vec<f64>>,
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Design `[1, y, x_k, x_k·y]` over the coordinates observed under `m`.
fn basis_row(rec: &Rec<'_>, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.push(rec.y);
    out.extend_from_slice(rec.x);
    out.extend(rec.x.iter().map(|x| x * rec.y));
}

fn basis_names(m: &Pattern) -> Vec<String> {
    let obs = m.observed_features();
    let mut names = vec!["1".to_string(), "y".to_string()];
    names.extend(obs.iter().map(|j| format!("x{}", j + 1)));
    names.extend(obs.iter().map(|j| format!("x{}*y", j + 1)));
    names
}

fn dot_basis(beta: &[f64], rec: &Rec<'_>) -> f64 {
    let p = rec.x.len();
    let mut v = beta[0] + beta[1] * rec.y;
    for k in 0..p {
        v += (beta[2 + k] + beta[2 + p + k] * rec.y) * rec.x[k];
    }
    v
}

/// Fit `φ_m` by least squares on the complete cases.
///
/// Order-1 targets are regressed on the basis directly. For an order-2
/// covariance target each variable missing under `m` is replaced by its
/// least-squares prediction, giving `½(â₁ − â₂)(b̂₁ − b̂₂)`.
pub fn linear_adjustment(
    ds: &MaskedDataset,
    groups: &PatternGroups,
    m: &Pattern,
    target: &UKernelSpec,
) -> Result<LinearAdjustment> {
    if !target.pattern().is_complete() {
        return Err(CamError::InvalidArgument(format!(
            "target kernel '{}' must live on the complete pattern",
            target.name()
        )));
    }
    let a0 = groups.complete();
    if a0.is_empty() {
        return Err(CamError::NoCompleteCases);
    }
    let names = basis_names(m);
    let r = target.order();
    if let TargetForm::Constant(c) = target.form() {
        return Ok(LinearAdjustment {
            kernel: UKernelSpec::constant(*m, r, c)?,
            basis: vec!["1".into()],
            coefficients: vec![vec![c]],
            dropped: Vec::new(),
            warnings: Vec::new(),
        });
    }
    let s0 = project(ds, a0, Pattern::complete(ds.d()))?;
    let sm = project(ds, a0, *m)?;
    let mut design = Vec::with_capacity(sm.len());
    let mut row = Vec::new();
    for i in 0..sm.len() {
        basis_row(&sm.record(i), &mut row);
        design.push(row.clone());
    }
    let mut warnings = Vec::new();
    let mut note_dropped = |what: &str, dropped: &[usize]| {
        if !dropped.is_empty() {
            let cols: Vec<&str> = dropped.iter().map(|&c| names[c].as_str()).collect();
            warnings.push(format!(
                "rank-deficient design for {what}: dropped columns [{}]",
                cols.join(", ")
            ));
        }
    };
    let name = format!("linear[{}]", target.name());
    match r {
        1 => {
            let t: Vec<f64> = (0..s0.len()).map(|i| target.eval(&[s0.record(i)])).collect();
            if t.iter().all(|&v| v == t[0]) {
                let c = t[0];
                return Ok(LinearAdjustment {
                    kernel: UKernelSpec::constant(*m, 1, c)?,
                    basis: vec!["1".into()],
                    coefficients: vec![vec![c]],
                    dropped: Vec::new(),
                    warnings,
                });
            }
            let fit = least_squares(&design, &t);
            note_dropped(target.name(), &fit.dropped);
            let beta = fit.coefficients.clone();
            let kernel = UKernelSpec::new(name, 1, *m, move |recs| dot_basis(&beta, &recs[0]))?;
            Ok(LinearAdjustment {
                kernel,
                basis: names,
                coefficients: vec![fit.coefficients],
                dropped: fit.dropped,
                warnings,
            })
        }
        2 => {
            let TargetForm::Covariance(a, b) = target.form() else {
                return Err(CamError::Unsupported(format!(
                    "linear adjustment of order-2 kernel '{}' (only covariance targets are supported)",
                    target.name()
                )));
            };
            let full = Pattern::complete(ds.d());
            let mut coefficients = Vec::new();
            let mut dropped = Vec::new();
            // Either an observed slot under m or a fitted linear predictor.
            let mut resolve = |c: Coord| -> Result<Surrogate> {
                match c {
                    Coord::Feature(j) if m.is_missing(j) => {
                        let slot = Slot::resolve(&full, c)?;
                        let t: Vec<f64> = (0..s0.len()).map(|i| slot.get(&s0.record(i))).collect();
                        let fit = least_squares(&design, &t);
                        note_dropped(&format!("x{}", j + 1), &fit.dropped);
                        dropped.extend(fit.dropped.iter().copied());
                        coefficients.push(fit.coefficients.clone());
                        Ok(Surrogate::Fitted(fit.coefficients))
                    }
                    _ => Ok(Surrogate::Observed(Slot::resolve(m, c)?)),
                }
            };
            let sa = resolve(a)?;
            let sb = resolve(b)?;
            dropped.sort_unstable();
            dropped.dedup();
            let kernel = UKernelSpec::new(name, 2, *m, move |recs| {
                0.5 * (sa.eval(&recs[0]) - sa.eval(&recs[1])) * (sb.eval(&recs[0]) - sb.eval(&recs[1]))
            })?;
            Ok(LinearAdjustment {
                kernel,
                basis: names,
                coefficients,
                dropped,
                warnings,
            })
        }
        _ => Err(CamError::Unsupported(format!(
            "linear adjustment for kernels of order {r}"
        ))),
    }
}

#[derive(Clone, Debug)]
enum Surrogate {
    Observed(Slot),
    Fitted(Vec<f64>),
}

impl Surrogate {
    #[inline]
    fn eval(&self, rec: &Rec<'_>) -> f64 {
        match self {
            Surrogate::Observed(s) => s.get(rec),
            Surrogate::Fitted(beta) => dot_basis(beta, rec),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{group_by_pattern, select_adjustment_set};
    use crate::stats;
    use proptest::prelude::*;

    fn sample_1d(x: &[f64], y: &[f64]) -> ProjectedSample {
        let xs = x.iter().map(|&v| vec![v]).collect();
        ProjectedSample::from_parts(Pattern::complete(1), xs, y.to_vec()).unwrap()
    }

    fn p(s: &str) -> Pattern {
        Pattern::parse(s).unwrap()
    }

    #[test]
    fn mean_of_three() {
        let s = sample_1d(&[1.0, 2.0, 3.0], &[0.0; 3]);
        let k = UKernelSpec::mean(Pattern::complete(1), 0).unwrap();
        let e = eval_ustat(&s, &k, 100, 0).unwrap();
        assert_eq!(e.value, 2.0);
        assert!(e.exact);
        assert_eq!(e.subsets_used, 3);
    }

    #[test]
    fn covariance_over_pairs() {
        let s = sample_1d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let k = UKernelSpec::covariance(Pattern::complete(1), Coord::Feature(0), Coord::Response).unwrap();
        let e = eval_ustat(&s, &k, 100, 0).unwrap();
        assert!((e.value - 1.0).abs() < 1e-15);
        let s5 = sample_1d(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]);
        let e5 = eval_ustat(&s5, &k, 10, 0).unwrap();
        assert!(e5.exact);
        assert_eq!(e5.subsets_used, 10);
    }

    #[test]
    fn builtin_values() {
        let pat = Pattern::complete(1);
        let cov = UKernelSpec::covariance(pat, Coord::Feature(0), Coord::Response).unwrap();
        let a = [0.0];
        let b = [1.0];
        let recs = [Rec { x: &a, y: 0.0 }, Rec { x: &b, y: 1.0 }];
        assert_eq!(cov.eval(&recs), 0.5);
        let sq = UKernelSpec::response_half_sq_diff(p("1"));
        let e: [f64; 0] = [];
        assert_eq!(sq.eval(&[Rec { x: &e, y: 0.0 }, Rec { x: &e, y: 2.0 }]), 2.0);
        assert!(matches!(
            UKernelSpec::mean(pat, 3),
            Err(CamError::FeatureOutOfRange { index: 3, d: 1 })
        ));
        assert!(UKernelSpec::mean(p("1"), 0).is_err());
    }

    #[test]
    fn too_few_rows() {
        let s = sample_1d(&[1.0], &[1.0]);
        let k = UKernelSpec::covariance(Pattern::complete(1), Coord::Feature(0), Coord::Response).unwrap();
        assert!(matches!(eval_ustat(&s, &k, 10, 0), Err(CamError::TooFewRows { .. })));
    }

    #[test]
    fn constant_kernel_is_exact() {
        let s = sample_1d(&[0.3, 1.7, 2.2, 9.0, -4.0, 5.5], &[0.0; 6]);
        for budget in [3, 1000] {
            let k = UKernelSpec::constant(Pattern::complete(1), 2, 0.1).unwrap();
            assert_eq!(eval_ustat(&s, &k, budget, 9).unwrap().value, 0.1);
        }
    }

    #[test]
    fn subsampled_estimate_is_unbiased() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 * 0.3).collect();
        let y: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let s = sample_1d(&x, &y);
        let k = UKernelSpec::covariance(Pattern::complete(1), Coord::Feature(0), Coord::Response).unwrap();
        let exact = eval_ustat(&s, &k, 1000, 0).unwrap().value;
        let runs: Vec<f64> = (0..500)
            .map(|seed| eval_ustat(&s, &k, 50, seed).unwrap().value)
            .collect();
        let sum = stats::Summary::of(&runs);
        assert!((sum.mean - exact).abs() < 3.0 * sum.se, "{} vs {}", sum.mean, exact);
    }

    fn toy_dataset() -> MaskedDataset {
        // x, y with x missing on rows 8..
        let rows: Vec<(Vec<Option<f64>>, f64)> = (0..14)
            .map(|i| {
                let x = (i as f64 * 0.37).sin() * 2.0 + i as f64 * 0.1;
                let y = x + (i as f64 * 1.3).cos();
                (vec![if i < 8 { Some(x) } else { None }], y)
            })
            .collect();
        MaskedDataset::from_rows(1, rows).unwrap()
    }

    #[test]
    fn order_one_geometry_is_sample_covariance() {
        let ds = toy_dataset();
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, 1, false).unwrap();
        let phi = UKernelSpec::mean(Pattern::complete(1), 0).unwrap();
        let phim = UKernelSpec::response_mean(p("1"));
        let g = estimate_geometry(&ds, &groups, &set, &phi, &[phim], 1000, 0).unwrap();
        assert!(g.exact);
        let a0 = groups.complete();
        let x: Vec<f64> = a0.iter().map(|&i| ds.value(i, 0).unwrap()).collect();
        let y0: Vec<f64> = a0.iter().map(|&i| ds.y(i)).collect();
        let n0 = x.len() as f64;
        let (mx, my) = (stats::mean(&x), stats::mean(&y0));
        let cov: f64 = x.iter().zip(&y0).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n0 - 1.0);
        assert!((g.omega[0] - cov).abs() < 1e-12);
        assert!((g.psi - stats::variance(&x)).abs() < 1e-12);
        let vy = stats::variance(ds.responses());
        assert!((g.lambda[0][0] - (1.0 + 8.0 / 6.0) * vy).abs() < 1e-12);
    }

    #[test]
    fn constant_adjustment_kernel_gives_cc() {
        let ds = toy_dataset();
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, 1, false).unwrap();
        let phi = UKernelSpec::mean(Pattern::complete(1), 0).unwrap();
        let phim = UKernelSpec::constant(p("1"), 1, 3.0).unwrap();
        let res = cam_ustat(&ds, &groups, &set, &phi, &[phim], &CamUStatConfig::default()).unwrap();
        assert_eq!(res.omega, vec![0.0]);
        assert_eq!(res.lambda, vec![vec![0.0]]);
        assert_eq!(res.gamma, vec![0.0]);
        assert_eq!(res.estimate, res.cc_estimate);
        assert!(res.ci.0 <= res.estimate && res.estimate <= res.ci.1);
        let json = serde_json::to_value(&res).unwrap();
        assert_eq!(json["patterns"][0], "1");
        assert!(json["ci"].is_array());
    }

    #[test]
    fn empty_adjustment_set() {
        let ds = toy_dataset();
        let groups = group_by_pattern(&ds);
        let set = AdjustmentSet::empty();
        let phi = UKernelSpec::mean(Pattern::complete(1), 0).unwrap();
        let res = cam_ustat(&ds, &groups, &set, &phi, &[], &CamUStatConfig::default()).unwrap();
        assert_eq!(res.estimate, res.cc_estimate);
        assert_eq!(res.se, res.cc_se);
    }

    #[test]
    fn linear_adjustment_recovers_exact_relation() {
        let rows: Vec<(Vec<Option<f64>>, f64)> = (0..30)
            .map(|i| {
                let y = i as f64 * 0.25 - 3.0;
                let x = 1.5 - 0.75 * y;
                (vec![if i % 3 == 0 { None } else { Some(x) }], y)
            })
            .collect();
        let ds = MaskedDataset::from_rows(1, rows).unwrap();
        let groups = group_by_pattern(&ds);
        let phi = UKernelSpec::mean(Pattern::complete(1), 0).unwrap();
        let fit = linear_adjustment(&ds, &groups, &p("1"), &phi).unwrap();
        assert!((fit.coefficients[0][0] - 1.5).abs() < 1e-10);
        assert!((fit.coefficients[0][1] + 0.75).abs() < 1e-10);
        let e: [f64; 0] = [];
        let v = fit.kernel.eval(&[Rec { x: &e, y: 2.0 }]);
        assert!((v - 0.0).abs() < 1e-10);
    }

    #[test]
    fn linear_adjustment_constant_and_rank_deficient() {
        let ds = toy_dataset();
        let groups = group_by_pattern(&ds);
        let c = UKernelSpec::constant(Pattern::complete(1), 1, 4.0).unwrap();
        let fit = linear_adjustment(&ds, &groups, &p("1"), &c).unwrap();
        assert_eq!(fit.coefficients, vec![vec![4.0]]);
        let one = ds.select_rows(&[0, 9, 10]);
        let g1 = group_by_pattern(&one);
        let phi = UKernelSpec::mean(Pattern::complete(1), 0).unwrap();
        let fit = linear_adjustment(&one, &g1, &p("1"), &phi);
        // a single complete case gives a constant target, hence no fit at all
        assert!(fit.unwrap().warnings.is_empty());
        let two = ds.select_rows(&[0, 1, 9]);
        let mut rows: Vec<(Vec<Option<f64>>, f64)> = vec![];
        for i in 0..two.n() {
            rows.push((vec![two.value(i, 0)], 1.0));
        }
        let flat = MaskedDataset::from_rows(1, rows).unwrap();
        let gf = group_by_pattern(&flat);
        let fit = linear_adjustment(&flat, &gf, &p("1"), &phi).unwrap();
        assert_eq!(fit.dropped, vec![1]);
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn linear_adjustment_covariance_structure() {
        // d = 2, x1 = 2 x2 + y exactly; pattern 10 keeps x2.
        let rows: Vec<(Vec<Option<f64>>, f64)> = (0..20)
            .map(|i| {
                let x2 = (i as f64 * 0.9).cos();
                let y = i as f64 * 0.1;
                let x1 = 2.0 * x2 + y;
                (vec![if i >= 15 { None } else { Some(x1) }, Some(x2)], y)
            })
            .collect();
        let ds = MaskedDataset::from_rows(2, rows).unwrap();
        let groups = group_by_pattern(&ds);
        let phi = UKernelSpec::covariance(Pattern::complete(2), Coord::Feature(0), Coord::Feature(1)).unwrap();
        let fit = linear_adjustment(&ds, &groups, &p("10"), &phi).unwrap();
        let (a, b) = ([0.5], [-0.2]);
        let recs = [Rec { x: &a, y: 1.0 }, Rec { x: &b, y: 0.0 }];
        let x1 = |x2: f64, y: f64| 2.0 * x2 + y;
        let expect = 0.5 * (x1(0.5, 1.0) - x1(-0.2, 0.0)) * (0.5 - -0.2);
        assert!((fit.kernel.eval(&recs) - expect).abs() < 1e-9);
        assert_eq!(fit.kernel.pattern(), p("10"));
    }

    proptest! {
        #[test]
        fn builtin_kernels_are_symmetric(
            x in proptest::collection::vec(-10.0f64..10.0, 6),
            y in proptest::collection::vec(-10.0f64..10.0, 2),
        ) {
            let pat = Pattern::complete(3);
            let kernels = [
                UKernelSpec::covariance(pat, Coord::Feature(0), Coord::Feature(2)).unwrap(),
                UKernelSpec::covariance(pat, Coord::Feature(1), Coord::Response).unwrap(),
                UKernelSpec::response_half_sq_diff(pat),
            ];
            let r0 = Rec { x: &x[0..3], y: y[0] };
            let r1 = Rec { x: &x[3..6], y: y[1] };
            for k in &kernels {
                prop_assert_eq!(k.eval(&[r0, r1]), k.eval(&[r1, r0]));
            }
        }

        #[test]
        fn exact_estimate_is_row_order_invariant(
            v in proptest::collection::vec(-5.0f64..5.0, 7),
            shift in 0usize..7,
        ) {
            let y: Vec<f64> = v.iter().map(|a| a * a).collect();
            let s = sample_1d(&v, &y);
            let mut order: Vec<usize> = (0..7).collect();
            order.rotate_left(shift);
            let s2 = s.subset(&order);
            let k = UKernelSpec::covariance(Pattern::complete(1), Coord::Feature(0), Coord::Response).unwrap();
            let a = eval_ustat(&s, &k, 100, 0).unwrap().value;
            let b = eval_ustat(&s2, &k, 100, 0).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn response_proxy_substitutes_missing_coordinates() {
        let full = Pattern::complete(2);
        let m = Pattern::parse("10").unwrap();
        let mean = response_proxy(&m, &UKernelSpec::mean(full, 0).unwrap()).unwrap();
        assert_eq!(mean.form(), TargetForm::Mean(Coord::Response));
        let kept = response_proxy(&m, &UKernelSpec::mean(full, 1).unwrap()).unwrap();
        assert_eq!(kept.form(), TargetForm::Mean(Coord::Feature(1)));
        let cov = UKernelSpec::covariance(full, Coord::Feature(0), Coord::Response).unwrap();
        let p = response_proxy(&m, &cov).unwrap();
        assert_eq!(p.form(), TargetForm::Covariance(Coord::Response, Coord::Response));
        let x = [0.5];
        let recs = [Rec { x: &x, y: 1.0 }, Rec { x: &x, y: 3.0 }];
        assert_eq!(p.eval(&recs), 2.0);
        let other = UKernelSpec::new("f", 1, full, |_| 0.0).unwrap();
        assert!(response_proxy(&m, &other).is_err());
    }
}

//! Synthetic models, MCAR masking, model-known oracles and replicated
//! experiments comparing complete-case and CAM estimators.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::combine::{combine, optimal_gamma, CamComponents, MseGeometry};
use crate::dataset::{
    group_by_pattern, project, select_adjustment_set, MaskedDataset, Pattern, PatternGroups,
};
use crate::error::{CamError, Result};
use crate::kde::{
    cam_density_grid, lscv_bandwidth, rule_of_thumb_bandwidth, tv_distance, Grid, KernelFamily, SmootherSpec,
};
use crate::locreg::{loocv_bandwidth, CamRegressor};
use crate::sampling::{stream_rng, CamRng, SubsetSampler};
use crate::stats::{self, Summary};
use crate::ustat::{cam_ustat, linear_adjustment, response_proxy, CamUStatConfig, Coord, UKernelSpec};

/// Patterns with fewer rows than this are left out of the adjustment set.
pub const DEFAULT_MIN_COUNT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Model {
    /// `(X, Y)` bivariate normal; `n` complete pairs plus `n` response-only rows.
    ToyGaussian { nu: [f64; 2], gamma: [[f64; 2]; 2] },
    /// `N₂(0, 0.3I + 0.7J)`.
    Density1,
    /// Uniform on the unit disk.
    Density2,
    /// `¼U([−2,−1]×[−½,½]) + ¾U([1,2]×[−½,½])`.
    Density3,
    /// `X ~ U[0,1]³`, `Y = X₁ + X₂ + 0.1ε`.
    Regression1,
    /// `X ~ U[0,1]³`, `Y = (X₁ − X₂)² + 0.1ε`.
    Regression2,
    /// `X ~ N₂(0, 0.3I + 0.8J)`, `Y = sin(2X₁) + 0.3ε`.
    Regression3,
    /// `X ~ Exp(1)`, `Y | X ~ N(X, σ²)`.
    ExampleJoint { sigma: f64 },
}

impl Model {
    pub fn toy_default() -> Model {
        Model::ToyGaussian {
            nu: [1.0, 1.0],
            gamma: [[1.0, 0.9], [0.9, 1.0]],
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Model::ToyGaussian { .. } | Model::ExampleJoint { .. } => 1,
            Model::Density1 | Model::Density2 | Model::Density3 | Model::Regression3 => 2,
            Model::Regression1 | Model::Regression2 => 3,
        }
    }

    pub fn is_density(&self) -> bool {
        matches!(self, Model::Density1 | Model::Density2 | Model::Density3)
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, Model::Regression1 | Model::Regression2 | Model::Regression3)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Model::ToyGaussian { gamma, .. } => {
                let det = gamma[0][0] * gamma[1][1] - gamma[0][1] * gamma[1][0];
                if !(gamma[0][0] > 0.0 && det > 0.0) || gamma[0][1] != gamma[1][0] {
                    return Err(CamError::InvalidArgument("toy covariance must be symmetric positive definite".into()));
                }
            }
            Model::ExampleJoint { sigma } if !(sigma > 0.0) => {
                return Err(CamError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
            }
            _ => {}
        }
        Ok(())
    }

    /// One draw of `X`.
    pub fn sample_x(&self, rng: &mut CamRng) -> Vec<f64> {
        match *self {
            Model::ToyGaussian { nu, gamma } => {
                let z: f64 = StandardNormal.sample(rng);
                vec![nu[0] + gamma[0][0].sqrt() * z]
            }
            Model::Density1 => correlated_normal(rng, 1.0, 0.7),
            Model::Density2 => loop {
                let a = 2.0 * rng.random::<f64>() - 1.0;
                let b = 2.0 * rng.random::<f64>() - 1.0;
                if a * a + b * b <= 1.0 {
                    break vec![a, b];
                }
            },
            Model::Density3 => {
                let left = rng.random::<f64>() < 0.25;
                let a = rng.random::<f64>() + if left { -2.0 } else { 1.0 };
                vec![a, rng.random::<f64>() - 0.5]
            }
            Model::Regression1 | Model::Regression2 => (0..3).map(|_| rng.random::<f64>()).collect(),
            Model::Regression3 => correlated_normal(rng, 1.1, 0.8),
            Model::ExampleJoint { .. } => vec![Exp1.sample(rng)],
        }
    }

    /// One draw of `(X, Y)`; density models carry the dummy response 0.
    pub fn sample(&self, rng: &mut CamRng) -> (Vec<f64>, f64) {
        match *self {
            Model::ToyGaussian { nu, gamma } => {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                let l11 = gamma[0][0].sqrt();
                let l21 = gamma[0][1] / l11;
                let l22 = (gamma[1][1] - l21 * l21).sqrt();
                (vec![nu[0] + l11 * z1], nu[1] + l21 * z1 + l22 * z2)
            }
            Model::ExampleJoint { sigma } => {
                let x: f64 = Exp1.sample(rng);
                let e: f64 = StandardNormal.sample(rng);
                (vec![x], x + sigma * e)
            }
            m if m.is_density() => (m.sample_x(rng), 0.0),
            m => {
                let x = m.sample_x(rng);
                let e: f64 = StandardNormal.sample(rng);
                let noise = if m == Model::Regression3 { 0.3 } else { 0.1 };
                let y = m.regression_function(&x).unwrap() + noise * e;
                (x, y)
            }
        }
    }

    /// `f_X(x)` for the density models.
    pub fn density(&self, x: &[f64]) -> Option<f64> {
        match self {
            Model::Density1 => {
                let (a, c) = (1.0, 0.7);
                let det = a * a - c * c;
                let q = (a * x[0] * x[0] - 2.0 * c * x[0] * x[1] + a * x[1] * x[1]) / det;
                Some((-0.5 * q).exp() / (2.0 * PI * det.sqrt()))
            }
            Model::Density2 => Some(if x[0] * x[0] + x[1] * x[1] <= 1.0 { 1.0 / PI } else { 0.0 }),
            Model::Density3 => {
                let mid = x[1].abs() <= 0.5;
                Some(if mid && (-2.0..=-1.0).contains(&x[0]) {
                    0.25
                } else if mid && (1.0..=2.0).contains(&x[0]) {
                    0.75
                } else {
                    0.0
                })
            }
            _ => None,
        }
    }

    /// `η(x) = E(Y | X = x)` for the regression models.
    pub fn regression_function(&self, x: &[f64]) -> Option<f64> {
        match self {
            Model::Regression1 => Some(x[0] + x[1]),
            Model::Regression2 => Some((x[0] - x[1]).powi(2)),
            Model::Regression3 => Some((2.0 * x[0]).sin()),
            Model::ExampleJoint { .. } => Some(x[0]),
            _ => None,
        }
    }

    /// Population value of a U-statistic target, where known in closed form.
    pub fn ustat_truth(&self, target: UTarget) -> Option<f64> {
        match (*self, target) {
            (Model::ToyGaussian { nu, .. }, UTarget::Mean) => Some(nu[0]),
            (Model::ToyGaussian { gamma, .. }, UTarget::Covariance) => Some(gamma[0][1]),
            (Model::ExampleJoint { .. }, _) => Some(1.0),
            (Model::Density1 | Model::Density2 | Model::Regression3, UTarget::Mean) => Some(0.0),
            (Model::Density3, UTarget::Mean) => Some(0.75),
            (m, UTarget::Covariance) if m.is_density() => Some(0.0),
            (Model::Regression1 | Model::Regression2, UTarget::Mean) => Some(0.5),
            (Model::Regression1, UTarget::Covariance) => Some(1.0 / 12.0),
            (Model::Regression2, UTarget::Covariance) => Some(0.0),
            (Model::Regression3, UTarget::Covariance) => Some(2.2 * (-2.2f64).exp()),
            _ => None,
        }
    }
}

/// Centred bivariate normal with variances `a` and covariance `c`.
fn correlated_normal(rng: &mut CamRng, a: f64, c: f64) -> Vec<f64> {
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let l11 = a.sqrt();
    let l21 = c / l11;
    let l22 = (a - l21 * l21).sqrt();
    vec![l11 * z1, l21 * z1 + l22 * z2]
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::ToyGaussian { .. } => write!(f, "toy"),
            Model::Density1 => write!(f, "density1"),
            Model::Density2 => write!(f, "density2"),
            Model::Density3 => write!(f, "density3"),
            Model::Regression1 => write!(f, "regression1"),
            Model::Regression2 => write!(f, "regression2"),
            Model::Regression3 => write!(f, "regression3"),
            Model::ExampleJoint { .. } => write!(f, "example"),
        }
    }
}

impl FromStr for Model {
    type Err = CamError;

    /// Model ids; `example1`/`example2` both name the exponential-normal model with `σ = 0.2`.
    fn from_str(s: &str) -> Result<Model> {
        Ok(match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "toy" | "toygaussian" => Model::toy_default(),
            "density1" => Model::Density1,
            "density2" => Model::Density2,
            "density3" => Model::Density3,
            "regression1" => Model::Regression1,
            "regression2" => Model::Regression2,
            "regression3" => Model::Regression3,
            "example" | "example1" | "example2" | "examplejoint" => Model::ExampleJoint { sigma: 0.2 },
            _ => return Err(CamError::InvalidArgument(format!("unknown model '{s}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub model: Model,
    pub n: usize,
    /// MCAR probability of each listed pattern; the rest are complete.
    pub p_miss: Vec<(Pattern, f64)>,
    pub seed: u64,
}

impl ModelSpec {
    /// The first feature is removed independently with probability `p1`.
    pub fn with_p1(model: Model, n: usize, p1: f64, seed: u64) -> Result<ModelSpec> {
        let m = Pattern::missing_features(model.d(), &[0])?;
        let spec = ModelSpec {
            model,
            n,
            p_miss: vec![(m, p1)],
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n == 0 {
            return Err(CamError::InvalidArgument("n must be ≥ 1".into()));
        }
        let mut total = 0.0;
        for (m, p) in &self.p_miss {
            if m.d() != self.model.d() {
                return Err(CamError::DimensionMismatch {
                    expected: self.model.d(),
                    got: m.d(),
                });
            }
            if m.is_complete() {
                return Err(CamError::InvalidPattern(m.encode()));
            }
            if !(0.0..=1.0).contains(p) {
                return Err(CamError::InvalidArgument(format!("probability {p} not in [0, 1]")));
            }
            total += p;
        }
        if total > 1.0 + 1e-12 {
            return Err(CamError::InvalidArgument(format!("pattern probabilities sum to {total} > 1")));
        }
        Ok(())
    }

    /// Probability that the first feature is missing, summed over patterns.
    pub fn p1(&self) -> f64 {
        self.p_miss.iter().filter(|(m, _)| m.is_missing(0)).map(|(_, p)| p).sum()
    }
}

/// Draw a dataset from `spec` using its own seed.
pub fn generate(spec: &ModelSpec) -> Result<MaskedDataset> {
    generate_with(spec, &mut stream_rng(spec.seed, 0))
}

/// Draw a dataset from `spec` with the given generator.
///
/// The toy model ignores `p_miss`: its first `n` rows are complete and the
/// next `n` observe the response only.
pub fn generate_with(spec: &ModelSpec, rng: &mut CamRng) -> Result<MaskedDataset> {
    spec.validate()?;
    let d = spec.model.d();
    let mut ds = MaskedDataset::new(d)?;
    if let Model::ToyGaussian { .. } = spec.model {
        for i in 0..2 * spec.n {
            let (x, y) = spec.model.sample(rng);
            let xo = if i < spec.n { Some(x[0]) } else { None };
            ds.push_row(&[xo], y)?;
        }
        return Ok(ds);
    }
    let mut row = vec![None; d];
    for _ in 0..spec.n {
        let (x, y) = spec.model.sample(rng);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pattern = None;
        for (m, p) in &spec.p_miss {
            acc += p;
            if u < acc {
                pattern = Some(*m);
                break;
            }
        }
        for j in 0..d {
            row[j] = match pattern {
                Some(m) if m.is_missing(j) => None,
                _ => Some(x[j]),
            };
        }
        ds.push_row(&row, y)?;
    }
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyClosedForm {
    pub var_cc: f64,
    pub var_cam: f64,
}

/// Exact variances of the complete-case and adjusted means in the toy model
/// with `n` observations per arm.
pub fn toy_closed_form(gamma: [[f64; 2]; 2], n: usize) -> Result<ToyClosedForm> {
    Model::ToyGaussian { nu: [0.0; 2], gamma }.validate()?;
    if n == 0 {
        return Err(CamError::InvalidArgument("n must be ≥ 1".into()));
    }
    let nf = n as f64;
    Ok(ToyClosedForm {
        var_cc: gamma[0][0] / nf,
        var_cam: (gamma[0][0] - gamma[0][1] * gamma[0][1] / (2.0 * gamma[1][1])) / nf,
    })
}

/// Complete-case and adjusted means of `X` for a toy dataset, using the
/// known covariance for the weight.
pub fn toy_estimates(ds: &MaskedDataset, gamma: [[f64; 2]; 2]) -> Result<(f64, f64)> {
    let groups = group_by_pattern(ds);
    let a0 = groups.complete();
    let m = Pattern::missing_features(1, &[0])?;
    let am = groups.group(&m);
    if a0.is_empty() || am.is_empty() {
        return Err(CamError::TooFewRows {
            needed: 1,
            have: a0.len().min(am.len()),
            context: "toy arms".into(),
        });
    }
    let x: Vec<f64> = a0.iter().map(|&i| ds.value(i, 0).unwrap()).collect();
    let y0: Vec<f64> = a0.iter().map(|&i| ds.y(i)).collect();
    let ym: Vec<f64> = am.iter().map(|&i| ds.y(i)).collect();
    let (n0, nm) = (a0.len() as f64, am.len() as f64);
    let geom = MseGeometry::new(
        vec![gamma[0][1] / n0],
        vec![vec![gamma[1][1] / n0 + gamma[1][1] / nm]],
    )?;
    let g = optimal_gamma(&geom)?.gamma;
    let cc = stats::mean(&x);
    let comps = CamComponents::new(cc, vec![stats::mean(&y0)], vec![stats::mean(&ym)])?;
    Ok((cc, combine(&comps, &g)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub n: usize,
    pub reps: usize,
    pub closed_form: ToyClosedForm,
    pub cc: Vec<f64>,
    pub cam: Vec<f64>,
    pub var_cc: f64,
    pub var_cam: f64,
    pub mean_cc: f64,
    pub mean_cam: f64,
}

pub fn run_toy_experiment(model: Model, n: usize, reps: usize, seed: u64, threads: usize) -> Result<ToyReport> {
    let Model::ToyGaussian { gamma, .. } = model else {
        return Err(CamError::Unsupported(format!("toy experiment needs the toy model, got {model}")));
    };
    let closed_form = toy_closed_form(gamma, n)?;
    let spec = ModelSpec {
        model,
        n,
        p_miss: Vec::new(),
        seed,
    };
    let pairs = run_reps(reps, threads, |rep| {
        let ds = generate_with(&spec, &mut stream_rng(seed, rep as u64))?;
        toy_estimates(&ds, gamma)
    })?;
    let cc: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let cam: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(ToyReport {
        n,
        reps,
        closed_form,
        var_cc: stats::variance(&cc),
        var_cam: stats::variance(&cam),
        mean_cc: stats::mean(&cc),
        mean_cam: stats::mean(&cam),
        cc,
        cam,
    })
}

/// `Q(t)/φ(t)` tail term `λ(t) − t`, with `λ` the normal hazard, by backward
/// evaluation of the continued fraction `1/(t + 2/(t + 3/(t + …)))`.
fn hazard_excess_cf(t: f64) -> f64 {
    let mut tail = 0.0;
    for k in (2..=200).rev() {
        tail = k as f64 / (t + tail);
    }
    1.0 / (t + tail)
}

/// `E(X | Y = y)` for `X ~ Exp(1)`, `Y | X ~ N(X, σ²)`.
///
/// The posterior is a normal with mean `y − σ²` truncated to `(0, ∞)`.
pub fn oracle_phi1_example1(y: f64, sigma: f64) -> f64 {
    let t = sigma - y / sigma;
    if t >= 3.0 {
        // y − σ² + σλ(t) = σ(λ(t) − t)
        sigma * hazard_excess_cf(t)
    } else {
        let q = 0.5 * erfc(t / std::f64::consts::SQRT_2);
        y - sigma * sigma + sigma * stats::normal_pdf(t) / q
    }
}

/// Asymptotic `Var(CAM)/Var(CC)` for the Example-1 mean with `φ₁(y) = y`:
/// `1 − p₁ Corr²(X, Y)`, `Corr² = 1/(1 + σ²)`.
pub fn example1_variance_ratio(p1: f64, sigma: f64) -> f64 {
    1.0 - p1 / (1.0 + sigma * sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UTarget {
    /// Mean of the first feature.
    Mean,
    /// Covariance of the first feature with the response.
    Covariance,
}

impl FromStr for UTarget {
    type Err = CamError;
    fn from_str(s: &str) -> Result<UTarget> {
        match s {
            "mean" => Ok(UTarget::Mean),
            "cov" | "covariance" => Ok(UTarget::Covariance),
            _ => Err(CamError::InvalidArgument(format!("unknown target '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjustmentChoice {
    /// The response stands in for the first feature.
    Practical,
    /// Least-squares surrogate fitted on the complete cases.
    LinearFit,
    /// The model-known conditional expectation (exponential-normal model only).
    Oracle,
}

impl FromStr for AdjustmentChoice {
    type Err = CamError;
    fn from_str(s: &str) -> Result<AdjustmentChoice> {
        match s {
            "practical" => Ok(AdjustmentChoice::Practical),
            "linear" | "linear-fit" | "linear_fit" => Ok(AdjustmentChoice::LinearFit),
            "oracle" => Ok(AdjustmentChoice::Oracle),
            _ => Err(CamError::InvalidArgument(format!("unknown adjustment choice '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UStatExperiment {
    pub target: UTarget,
    pub choice: AdjustmentChoice,
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    pub geometry_budget: u64,
    pub point_budget: u64,
    pub min_count: usize,
    pub threads: usize,
}

impl UStatExperiment {
    pub fn new(target: UTarget, choice: AdjustmentChoice, reps: usize, seed: u64) -> Self {
        let d = CamUStatConfig::default();
        UStatExperiment {
            target,
            choice,
            reps,
            seed,
            level: d.level,
            geometry_budget: d.geometry_budget,
            point_budget: d.point_budget,
            min_count: DEFAULT_MIN_COUNT,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UStatRep {
    pub cc: f64,
    pub cam: f64,
    pub se: f64,
    pub cc_se: f64,
    pub covered: bool,
    pub cc_covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UStatSummary {
    pub truth: Option<f64>,
    pub mean_cc: f64,
    pub mean_cam: f64,
    pub var_cc: f64,
    pub var_cam: f64,
    /// `Var(CAM)/Var(CC)`; 1 when both are zero.
    pub variance_ratio: f64,
    pub bias_cam: Option<f64>,
    /// Monte Carlo standard error of the CAM mean.
    pub se_mean_cam: f64,
    pub coverage_cam: Option<f64>,
    pub coverage_cc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UStatReport {
    pub model: String,
    pub n: usize,
    pub p1: f64,
    pub config: UStatExperiment,
    pub reps: Vec<UStatRep>,
    pub summary: UStatSummary,
}

fn target_kernel(d: usize, target: UTarget) -> Result<UKernelSpec> {
    let full = Pattern::complete(d);
    match target {
        UTarget::Mean => UKernelSpec::mean(full, 0),
        UTarget::Covariance => UKernelSpec::covariance(full, Coord::Feature(0), Coord::Response),
    }
}

fn adjustment_kernel(
    spec: &ModelSpec,
    cfg: &UStatExperiment,
    ds: &MaskedDataset,
    groups: &PatternGroups,
    phi: &UKernelSpec,
    m: Pattern,
) -> Result<UKernelSpec> {
    match cfg.choice {
        AdjustmentChoice::Practical => response_proxy(&m, phi),
        AdjustmentChoice::LinearFit => Ok(linear_adjustment(ds, groups, &m, phi)?.kernel),
        AdjustmentChoice::Oracle => {
            let Model::ExampleJoint { sigma } = spec.model else {
                return Err(CamError::Unsupported(format!(
                    "no oracle adjustment kernel for model {}",
                    spec.model
                )));
            };
            // kernels only ever see this dataset's responses
            let table: HashMap<u64, f64> = ds
                .responses()
                .iter()
                .map(|&y| (y.to_bits(), oracle_phi1_example1(y, sigma)))
                .collect();
            let phi1 = move |y: f64| table.get(&y.to_bits()).copied().unwrap_or_else(|| oracle_phi1_example1(y, sigma));
            match cfg.target {
                UTarget::Mean => UKernelSpec::new("oracle", 1, m, move |r| phi1(r[0].y)),
                UTarget::Covariance => UKernelSpec::new("oracle", 2, m, move |r| {
                    0.5 * (phi1(r[0].y) - phi1(r[1].y)) * (r[0].y - r[1].y)
                }),
            }
        }
    }
}

/// Seed for the estimator of one replication, independent of its data stream.
fn rep_seed(rng: &mut CamRng) -> u64 {
    rng.next_u64()
}

pub fn run_ustat_experiment(spec: &ModelSpec, cfg: &UStatExperiment) -> Result<UStatReport> {
    spec.validate()?;
    let d = spec.model.d();
    let phi = target_kernel(d, cfg.target)?;
    let truth = spec.model.ustat_truth(cfg.target);
    let reps = run_reps(cfg.reps, cfg.threads, |rep| {
        let mut rng = stream_rng(cfg.seed, rep as u64);
        let est_seed = rep_seed(&mut rng);
        let ds = generate_with(spec, &mut rng)?;
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, cfg.min_count, false)?;
        let phims = set
            .patterns()
            .into_iter()
            .map(|m| adjustment_kernel(spec, cfg, &ds, &groups, &phi, m))
            .collect::<Result<Vec<_>>>()?;
        let ucfg = CamUStatConfig {
            level: cfg.level,
            geometry_budget: cfg.geometry_budget,
            point_budget: cfg.point_budget,
            seed: est_seed,
        };
        let r = cam_ustat(&ds, &groups, &set, &phi, &phims, &ucfg)?;
        let inside = |ci: (f64, f64)| truth.is_some_and(|t| ci.0 <= t && t <= ci.1);
        Ok(UStatRep {
            cc: r.cc_estimate,
            cam: r.estimate,
            se: r.se,
            cc_se: r.cc_se,
            covered: inside(r.ci),
            cc_covered: inside(r.cc_ci),
        })
    })?;
    let cc: Vec<f64> = reps.iter().map(|r| r.cc).collect();
    let cam: Vec<f64> = reps.iter().map(|r| r.cam).collect();
    let (var_cc, var_cam) = (stats::variance(&cc), stats::variance(&cam));
    let mean_cam = stats::mean(&cam);
    let frac = |f: &dyn Fn(&UStatRep) -> bool| reps.iter().filter(|r| f(r)).count() as f64 / reps.len() as f64;
    let summary = UStatSummary {
        truth,
        mean_cc: stats::mean(&cc),
        mean_cam,
        var_cc,
        var_cam,
        variance_ratio: if var_cc == 0.0 && var_cam == 0.0 { 1.0 } else { var_cam / var_cc },
        bias_cam: truth.map(|t| mean_cam - t),
        se_mean_cam: (var_cam / reps.len() as f64).sqrt(),
        coverage_cam: truth.map(|_| frac(&|r| r.covered)),
        coverage_cc: truth.map(|_| frac(&|r| r.cc_covered)),
    };
    Ok(UStatReport {
        model: spec.model.to_string(),
        n: spec.n,
        p1: spec.p1(),
        config: *cfg,
        reps,
        summary,
    })
}

/// One replication's metric for both estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub rep: usize,
    pub h: f64,
    pub cc: f64,
    pub cam: f64,
    /// `(cc − cam)/cc`.
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: String,
    pub n: usize,
    pub p1: f64,
    /// `"tv"` or `"mise"`.
    pub metric: String,
    pub reps: Vec<RepMetrics>,
    pub relative: Summary,
    pub cc: Summary,
    pub cam: Summary,
}

impl ExperimentReport {
    fn new(spec: &ModelSpec, metric: &str, reps: Vec<RepMetrics>) -> Self {
        let col = |f: fn(&RepMetrics) -> f64| reps.iter().map(f).collect::<Vec<_>>();
        ExperimentReport {
            model: spec.model.to_string(),
            n: spec.n,
            p1: spec.p1(),
            metric: metric.into(),
            relative: Summary::of(&col(|r| r.relative)),
            cc: Summary::of(&col(|r| r.cc)),
            cam: Summary::of(&col(|r| r.cam)),
            reps,
        }
    }
}

fn relative(cc: f64, cam: f64) -> f64 {
    if cc == cam {
        0.0
    } else {
        (cc - cam) / cc
    }
}

/// How a density experiment picks its bandwidth from the complete cases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    /// Normal-reference rule.
    RuleOfThumb,
    /// Least-squares cross-validation over multiples of the normal-reference bandwidth.
    Lscv,
    Fixed(f64),
}

/// Multiples of the normal-reference bandwidth searched by [`BandwidthRule::Lscv`].
pub fn lscv_factors() -> Vec<f64> {
    (0..16).map(|k| 0.1 * 15f64.powf(k as f64 / 15.0)).collect()
}

impl BandwidthRule {
    pub fn select(&self, ds: &MaskedDataset, groups: &PatternGroups, family: KernelFamily) -> Result<f64> {
        if let BandwidthRule::Fixed(h) = *self {
            return Ok(h);
        }
        let s0 = project(ds, groups.complete(), Pattern::complete(ds.d()))?;
        let h0 = rule_of_thumb_bandwidth(&s0)?;
        match self {
            BandwidthRule::Lscv => {
                let grid: Vec<f64> = lscv_factors().iter().map(|f| f * h0).collect();
                Ok(lscv_bandwidth(&s0, family, &grid)?.h)
            }
            _ => Ok(h0),
        }
    }
}

impl FromStr for BandwidthRule {
    type Err = CamError;
    fn from_str(s: &str) -> Result<BandwidthRule> {
        match s {
            "rot" | "rule-of-thumb" => Ok(BandwidthRule::RuleOfThumb),
            "lscv" => Ok(BandwidthRule::Lscv),
            _ => s
                .parse::<f64>()
                .ok()
                .filter(|h| *h > 0.0 && h.is_finite())
                .map(BandwidthRule::Fixed)
                .ok_or_else(|| CamError::InvalidArgument(format!("bandwidth must be 'rot', 'lscv' or a positive number, got '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityExperiment {
    pub reps: usize,
    pub seed: u64,
    pub family: KernelFamily,
    pub bandwidth: BandwidthRule,
    pub per_axis: usize,
    /// Grid padding beyond the data, in bandwidths.
    pub pad: f64,
    pub min_count: usize,
    pub threads: usize,
}

impl DensityExperiment {
    pub fn new(reps: usize, seed: u64) -> Self {
        DensityExperiment {
            reps,
            seed,
            family: KernelFamily::Gaussian,
            bandwidth: BandwidthRule::Lscv,
            per_axis: 200,
            pad: 3.0,
            min_count: DEFAULT_MIN_COUNT,
            threads: 1,
        }
    }
}

pub fn run_density_experiment(spec: &ModelSpec, cfg: &DensityExperiment) -> Result<ExperimentReport> {
    spec.validate()?;
    if !spec.model.is_density() {
        return Err(CamError::Unsupported(format!("{} is not a density model", spec.model)));
    }
    let d = spec.model.d();
    let reps = run_reps(cfg.reps, cfg.threads, |rep| {
        let mut rng = stream_rng(cfg.seed, rep as u64);
        let ds = generate_with(spec, &mut rng)?;
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, cfg.min_count, false)?;
        let h = cfg.bandwidth.select(&ds, &groups, cfg.family)?;
        let smoother = SmootherSpec::new(cfg.family, h, d)?;
        let grid = Grid::around(&ds, cfg.pad * h, cfg.per_axis)?;
        let fit = cam_density_grid(&ds, &groups, &set, &grid, &smoother)?;
        let truth: Vec<f64> = (0..grid.len()).map(|i| spec.model.density(&grid.point(i)).unwrap()).collect();
        let cc = tv_distance(&fit.f_cc, &truth, grid.cell_volume)?;
        let cam = tv_distance(&fit.f_cam, &truth, grid.cell_volume)?;
        Ok(RepMetrics {
            rep,
            h,
            cc,
            cam,
            relative: relative(cc, cam),
        })
    })?;
    Ok(ExperimentReport::new(spec, "tv", reps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionExperiment {
    pub reps: usize,
    pub seed: u64,
    pub family: KernelFamily,
    /// Candidate bandwidths as multiples of the normal-reference bandwidth.
    pub h_factors: Vec<f64>,
    pub n_mc: usize,
    pub min_count: usize,
    pub threads: usize,
}

impl RegressionExperiment {
    pub fn new(reps: usize, seed: u64) -> Self {
        RegressionExperiment {
            reps,
            seed,
            family: KernelFamily::Gaussian,
            h_factors: vec![0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0],
            n_mc: 10_000,
            min_count: DEFAULT_MIN_COUNT,
            threads: 1,
        }
    }
}

/// Monte Carlo MISE of the complete-case and CAM fits over shared draws.
///
/// Points where either fit fails are skipped; more than 10% is an error.
pub fn mise_pair(reg: &CamRegressor, model: Model, n_mc: usize, rng: &mut CamRng) -> Result<(f64, f64)> {
    let mut cc = Vec::with_capacity(n_mc);
    let mut cam = Vec::with_capacity(n_mc);
    let mut skipped = 0;
    for _ in 0..n_mc {
        let x = model.sample_x(rng);
        let eta = model
            .regression_function(&x)
            .ok_or_else(|| CamError::Unsupported(format!("{model} has no regression function")))?;
        match reg.at(&x) {
            Ok(r) => {
                cc.push((r.eta_cc - eta).powi(2));
                cam.push((r.eta_cam - eta).powi(2));
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
    Ok((stats::mean(&cc), stats::mean(&cam)))
}

pub fn run_regression_experiment(spec: &ModelSpec, cfg: &RegressionExperiment) -> Result<ExperimentReport> {
    spec.validate()?;
    if !spec.model.is_regression() {
        return Err(CamError::Unsupported(format!("{} is not a regression model", spec.model)));
    }
    if cfg.h_factors.is_empty() || cfg.n_mc == 0 {
        return Err(CamError::InvalidArgument("need bandwidth factors and n_mc ≥ 1".into()));
    }
    let d = spec.model.d();
    let reps = run_reps(cfg.reps, cfg.threads, |rep| {
        let mut rng = stream_rng(cfg.seed, rep as u64);
        let mut mc_rng = stream_rng(rep_seed(&mut rng), 1);
        let ds = generate_with(spec, &mut rng)?;
        let groups = group_by_pattern(&ds);
        let set = select_adjustment_set(&groups, cfg.min_count, false)?;
        let h0 = rule_of_thumb_bandwidth(&project(&ds, groups.complete(), Pattern::complete(d))?)?;
        let grid: Vec<f64> = cfg.h_factors.iter().map(|f| f * h0).collect();
        let h = loocv_bandwidth(&ds, &groups, &grid, cfg.family)?.h;
        let reg = CamRegressor::new(&ds, &groups, &set, &SmootherSpec::new(cfg.family, h, d)?)?;
        let (cc, cam) = mise_pair(&reg, spec.model, cfg.n_mc, &mut mc_rng)?;
        Ok(RepMetrics {
            rep,
            h,
            cc,
            cam,
            relative: relative(cc, cam),
        })
    })?;
    Ok(ExperimentReport::new(spec, "mise", reps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutConfig {
    pub test_size: usize,
    pub train_size: usize,
    pub reps: usize,
    pub seed: u64,
    pub family: KernelFamily,
    pub h_grid: Vec<f64>,
    pub min_count: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRep {
    pub h: f64,
    pub mse_cc: f64,
    pub mse_cam: f64,
    /// Test points with no kernel mass, left out of both averages.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub patterns: Vec<Pattern>,
    pub reps: Vec<HoldoutRep>,
    pub cc: Summary,
    pub cam: Summary,
    pub improvement: Summary,
    /// Share of replications where CAM has the lower test error.
    pub cam_better: f64,
}

/// Train/test evaluation on a user dataset.
///
/// A fixed test set is drawn once from the complete cases. Each replication
/// trains on a fresh sample of the remaining complete cases together with
/// every incomplete row.
pub fn run_holdout(ds: &MaskedDataset, cfg: &HoldoutConfig) -> Result<HoldoutReport> {
    let groups = group_by_pattern(ds);
    let a0 = groups.complete();
    if cfg.test_size + cfg.train_size > a0.len() {
        return Err(CamError::TooFewRows {
            needed: cfg.test_size + cfg.train_size,
            have: a0.len(),
            context: "complete cases for test and training".into(),
        });
    }
    if cfg.train_size == 0 || cfg.test_size == 0 || cfg.h_grid.is_empty() {
        return Err(CamError::InvalidArgument("need positive test and training sizes and a bandwidth grid".into()));
    }
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    let mut sampler = SubsetSampler::new(a0.len(), cfg.test_size);
    let test_pos = sampler.draw_sorted(&mut rng).to_vec();
    let test: Vec<usize> = test_pos.iter().map(|&p| a0[p]).collect();
    let pool: Vec<usize> = a0.iter().copied().filter(|i| test.binary_search(i).is_err()).collect();
    let incomplete: Vec<usize> = (0..ds.n()).filter(|&i| !ds.pattern(i).is_complete()).collect();
    let mut patterns = Vec::new();
    let reps = run_reps(cfg.reps, cfg.threads, |rep| {
        let mut rng = stream_rng(cfg.seed, rep as u64);
        let mut s = SubsetSampler::new(pool.len(), cfg.train_size);
        let mut rows: Vec<usize> = s.draw_sorted(&mut rng).iter().map(|&p| pool[p]).collect();
        rows.extend(&incomplete);
        rows.sort_unstable();
        let train = ds.select_rows(&rows);
        let g = group_by_pattern(&train);
        let set = select_adjustment_set(&g, cfg.min_count, false)?;
        let h = loocv_bandwidth(&train, &g, &cfg.h_grid, cfg.family)?.h;
        let reg = CamRegressor::new(&train, &g, &set, &SmootherSpec::new(cfg.family, h, ds.d())?)?;
        let mut cc = Vec::with_capacity(test.len());
        let mut cam = Vec::with_capacity(test.len());
        let mut skipped = 0;
        for &i in &test {
            match reg.at(ds.row_values(i)) {
                Ok(r) => {
                    cc.push((r.eta_cc - ds.y(i)).powi(2));
                    cam.push((r.eta_cam - ds.y(i)).powi(2));
                }
                Err(_) => skipped += 1,
            }
        }
        if cc.is_empty() {
            return Err(CamError::NoLocalData("every test point".into()));
        }
        Ok((
            set.patterns(),
            HoldoutRep {
                h,
                mse_cc: stats::mean(&cc),
                mse_cam: stats::mean(&cam),
                skipped,
            },
        ))
    })?;
    if let Some((p, _)) = reps.first() {
        patterns = p.clone();
    }
    let reps: Vec<HoldoutRep> = reps.into_iter().map(|(_, r)| r).collect();
    let cc: Vec<f64> = reps.iter().map(|r| r.mse_cc).collect();
    let cam: Vec<f64> = reps.iter().map(|r| r.mse_cam).collect();
    let gain: Vec<f64> = cc.iter().zip(&cam).map(|(a, b)| a - b).collect();
    Ok(HoldoutReport {
        patterns,
        cam_better: gain.iter().filter(|g| **g > 0.0).count() as f64 / reps.len().max(1) as f64,
        cc: Summary::of(&cc),
        cam: Summary::of(&cam),
        improvement: Summary::of(&gain),
        reps,
    })
}

/// Evaluate `f(rep)` for every replication on a pool of `threads` workers
/// (0 lets the pool decide); results keep replication order.
pub fn run_reps<T, F>(reps: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if reps == 0 {
        return Err(CamError::InvalidArgument("reps must be ≥ 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CamError::InvalidArgument(format!("thread pool: {e}")))?;
    let out: Vec<Result<T>> = pool.install(|| (0..reps).into_par_iter().map(&f).collect());
    out.into_iter().collect()
}

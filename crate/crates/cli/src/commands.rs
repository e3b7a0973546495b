use std::fs::File;
use std::path::Path;

use cam_core::kde::{cam_density_at, cam_density_grid, rule_of_thumb_bandwidth, Grid, SmootherSpec};
use cam_core::locreg::{loocv_bandwidth, CamRegressionResult, CamRegressor, LoocvResult};
use cam_core::simlab::{
    run_density_experiment, run_regression_experiment, run_toy_experiment, run_ustat_experiment, BandwidthRule,
    DensityExperiment, ExperimentReport, Model, ModelSpec, RegressionExperiment, ToyReport, UStatExperiment,
    UStatReport, UTarget,
};
use cam_core::ustat::{cam_ustat, linear_adjustment, response_proxy, CamUStatConfig, CamUStatResult, Coord, UKernelSpec};
use cam_core::{
    group_by_pattern, ingest_csv, project, select_adjustment_set, AdjustmentSet, CsvSchema, MaskedDataset, Pattern,
    PatternGroups,
};
use serde::Serialize;

use crate::args::*;
use crate::output::{floats, fmt_f64, write_json, Error, Table};

pub fn run(cli: &Cli) -> Result<(), Error> {
    let out = cli.out.as_deref();
    let csv = cli.emit_csv.as_deref();
    match &cli.command {
        Command::EstimateMean(a) => estimate_mean(a, out, csv),
        Command::EstimateCov(a) => estimate_cov(a, out, csv),
        Command::Density(a) => density(a, out, csv),
        Command::Regress(a) => regress(a, out, csv),
        Command::Simulate(a) => simulate(a, cli.threads, out, csv),
    }
}

fn load(a: &DataArgs) -> Result<MaskedDataset, Error> {
    let mut schema = CsvSchema::new(a.response.clone());
    schema.features = a.features.clone();
    if !a.na.is_empty() {
        schema.na_markers = a.na.clone();
    }
    let f = File::open(&a.input).map_err(|e| format!("{}: {e}", a.input.display()))?;
    Ok(ingest_csv(f, &schema)?)
}

#[derive(Serialize)]
struct GroupSize {
    pattern: Pattern,
    rows: usize,
}

#[derive(Serialize)]
struct DataSummary {
    n: usize,
    d: usize,
    features: Vec<String>,
    response: String,
    groups: Vec<GroupSize>,
}

impl DataSummary {
    fn of(ds: &MaskedDataset, groups: &PatternGroups) -> Self {
        DataSummary {
            n: ds.n(),
            d: ds.d(),
            features: ds.feature_names().to_vec(),
            response: ds.response_name().to_string(),
            groups: groups
                .iter()
                .map(|(p, rows)| GroupSize {
                    pattern: *p,
                    rows: rows.len(),
                })
                .collect(),
        }
    }
}

fn coord(ds: &MaskedDataset, s: &str) -> Result<Coord, Error> {
    if s == "y" || s == ds.response_name() {
        return Ok(Coord::Response);
    }
    if let Ok(k) = s.parse::<usize>() {
        if k == 0 || k > ds.d() {
            return Err(format!("feature position {k} out of range 1..={}", ds.d()).into());
        }
        return Ok(Coord::Feature(k - 1));
    }
    ds.feature_names()
        .iter()
        .position(|n| n == s)
        .map(Coord::Feature)
        .ok_or_else(|| format!("unknown variable '{s}'").into())
}

fn coord_name(ds: &MaskedDataset, c: Coord) -> String {
    match c {
        Coord::Feature(j) => ds.feature_names()[j].clone(),
        Coord::Response => ds.response_name().to_string(),
    }
}

#[derive(Serialize)]
struct UStatOutput {
    target: String,
    phi: &'static str,
    data: DataSummary,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    phi_warnings: Vec<String>,
    #[serde(flatten)]
    result: CamUStatResult,
}

fn run_ustat(
    ds: &MaskedDataset,
    target: String,
    phi: UKernelSpec,
    a: &UStatArgs,
    command: &str,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<(), Error> {
    let groups = group_by_pattern(ds);
    let set = select_adjustment_set(&groups, a.patterns.min_count, a.patterns.integrate)?;
    let mut phi_warnings = Vec::new();
    let phims = set
        .patterns()
        .iter()
        .map(|m| match a.phi {
            Phi::Practical => response_proxy(m, &phi),
            Phi::Linear => linear_adjustment(ds, &groups, m, &phi).map(|fit| {
                phi_warnings.extend(fit.warnings.iter().map(|w| format!("pattern {m}: {w}")));
                fit.kernel
            }),
        })
        .collect::<cam_core::Result<Vec<_>>>()?;
    let cfg = CamUStatConfig {
        level: a.level,
        geometry_budget: a.geometry_budget,
        point_budget: a.point_budget,
        seed: a.seed,
    };
    let result = cam_ustat(ds, &groups, &set, &phi, &phims, &cfg)?;
    if let Some(path) = csv {
        let mut t = Table::new(["pattern", "n_m", "theta0_m", "theta_m", "gamma"]);
        for k in 0..result.patterns.len() {
            let mut row = vec![result.patterns[k].encode(), result.n_m[k].to_string()];
            row.extend(floats([result.theta0_m[k], result.theta_m[k], result.gamma[k]]));
            t.push(row);
        }
        t.write(path)?;
    }
    let body = UStatOutput {
        target,
        phi: match a.phi {
            Phi::Practical => "practical",
            Phi::Linear => "linear",
        },
        data: DataSummary::of(ds, &groups),
        phi_warnings,
        result,
    };
    write_json(command, body, out)
}

fn estimate_mean(a: &EstimateMeanArgs, out: Option<&Path>, csv: Option<&Path>) -> Result<(), Error> {
    let ds = load(&a.data)?;
    let c = match &a.feature {
        Some(s) => coord(&ds, s)?,
        None => Coord::Response,
    };
    let phi = UKernelSpec::coord_mean(Pattern::complete(ds.d()), c)?;
    let target = format!("mean({})", coord_name(&ds, c));
    run_ustat(&ds, target, phi, &a.ustat, "estimate-mean", out, csv)
}

fn estimate_cov(a: &EstimateCovArgs, out: Option<&Path>, csv: Option<&Path>) -> Result<(), Error> {
    let ds = load(&a.data)?;
    let (c1, c2) = (coord(&ds, &a.first)?, coord(&ds, &a.second)?);
    let phi = UKernelSpec::covariance(Pattern::complete(ds.d()), c1, c2)?;
    let target = format!("cov({}, {})", coord_name(&ds, c1), coord_name(&ds, c2));
    run_ustat(&ds, target, phi, &a.ustat, "estimate-cov", out, csv)
}

fn parse_point(s: &str, d: usize) -> Result<Vec<f64>, Error> {
    let x = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("cannot parse '{v}' in point '{s}'"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if x.len() != d {
        return Err(format!("point '{s}' has {} coordinates, data have {d} features", x.len()).into());
    }
    Ok(x)
}

/// Query points from `--at` or a points file; `None` when neither is given.
///
/// A points file may name the feature columns in its header; otherwise it
/// must have exactly `d` columns.
fn query_points(q: &PointArgs, ds: &MaskedDataset) -> Result<Option<Vec<Vec<f64>>>, Error> {
    let d = ds.d();
    if let Some(path) = &q.points {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let by_name: Option<Vec<usize>> = ds
            .feature_names()
            .iter()
            .map(|f| header.iter().position(|h| h == f))
            .collect();
        let cols = match by_name {
            Some(c) => c,
            None if header.len() == d => (0..d).collect(),
            None => {
                return Err(format!(
                    "{}: header names neither the {d} feature columns nor exactly {d} columns",
                    path.display()
                )
                .into())
            }
        };
        let mut pts = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line: Vec<&str> = cols.iter().map(|&c| rec.get(c).unwrap_or("")).collect();
            pts.push(parse_point(&line.join(","), d).map_err(|e| format!("{} row {}: {e}", path.display(), k + 1))?);
        }
        if pts.is_empty() {
            return Err(format!("{}: no query points", path.display()).into());
        }
        return Ok(Some(pts));
    }
    if q.at.is_empty() {
        return Ok(None);
    }
    q.at.iter().map(|s| parse_point(s, d)).collect::<Result<Vec<_>, _>>().map(Some)
}

fn gamma_columns(prefix: &str, set: &AdjustmentSet) -> Vec<String> {
    set.patterns().iter().map(|m| format!("{prefix}_{}", m.encode())).collect()
}

#[derive(Serialize)]
struct DensityPoint {
    x: Vec<f64>,
    f_cc: f64,
    f_cam: f64,
    gamma: Vec<f64>,
}

#[derive(Serialize)]
struct GridInfo {
    axes: Vec<(f64, f64)>,
    per_axis: usize,
    cell_volume: f64,
    mass_cc: f64,
    mass_cam: f64,
}

#[derive(Serialize)]
struct DensityOutput {
    data: DataSummary,
    kernel: String,
    bandwidth_rule: BandwidthRule,
    h: f64,
    patterns: Vec<Pattern>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<GridInfo>,
    points: Vec<DensityPoint>,
    warnings: Vec<String>,
}

fn density(a: &DensityArgs, out: Option<&Path>, csv: Option<&Path>) -> Result<(), Error> {
    let ds = load(&a.data)?;
    let groups = group_by_pattern(&ds);
    let set = select_adjustment_set(&groups, a.patterns.min_count, a.patterns.integrate)?;
    let h = a.bandwidth.select(&ds, &groups, a.kernel)?;
    let spec = SmootherSpec::new(a.kernel, h, ds.d())?;
    let mut warnings = Vec::new();
    let mut points = Vec::new();
    let mut grid_info = None;
    match query_points(&a.query, &ds)? {
        Some(pts) => {
            for x in pts {
                let r = cam_density_at(&ds, &groups, &set, &x, &spec)?;
                warnings.extend(r.warnings.iter().map(|w| format!("at {x:?}: {w}")));
                points.push(DensityPoint {
                    gamma: r.patterns.iter().map(|p| p.gamma).collect(),
                    x,
                    f_cc: r.f_cc,
                    f_cam: r.f_cam,
                });
            }
        }
        None => {
            if !(a.pad >= 0.0) {
                return Err("grid padding must be non-negative".into());
            }
            let grid = Grid::around(&ds, a.pad * h, a.grid)?;
            let g = cam_density_grid(&ds, &groups, &set, &grid, &spec)?;
            warnings.extend(g.warnings.iter().cloned());
            for k in 0..grid.len() {
                points.push(DensityPoint {
                    x: grid.point(k),
                    f_cc: g.f_cc[k],
                    f_cam: g.f_cam[k],
                    gamma: g.gamma.iter().map(|col| col[k]).collect(),
                });
            }
            let mass = |f: &[f64]| cam_core::stats::sum(f.iter().copied()) * grid.cell_volume;
            grid_info = Some(GridInfo {
                axes: grid
                    .axes
                    .iter()
                    .map(|ax| (ax[0], ax[ax.len() - 1]))
                    .collect(),
                per_axis: a.grid,
                cell_volume: grid.cell_volume,
                mass_cc: mass(&g.f_cc),
                mass_cam: mass(&g.f_cam),
            });
        }
    }
    if let Some(path) = csv {
        let mut header: Vec<String> = ds.feature_names().to_vec();
        header.extend(["f_cc".to_string(), "f_cam".to_string()]);
        header.extend(gamma_columns("gamma", &set));
        let mut t = Table::new(header);
        for p in &points {
            let mut row = floats(p.x.iter().copied());
            row.extend(floats([p.f_cc, p.f_cam]));
            row.extend(floats(p.gamma.iter().copied()));
            t.push(row);
        }
        t.write(path)?;
    }
    let body = DensityOutput {
        data: DataSummary::of(&ds, &groups),
        kernel: a.kernel.to_string(),
        bandwidth_rule: a.bandwidth,
        h,
        patterns: set.patterns(),
        grid: grid_info,
        points,
        warnings,
    };
    write_json("density", body, out)
}

#[derive(Serialize)]
struct RegressPoint {
    x: Vec<f64>,
    #[serde(flatten)]
    fit: Option<CamRegressionResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct RegressOutput {
    data: DataSummary,
    kernel: String,
    h: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    loocv: Option<LoocvResult>,
    patterns: Vec<Pattern>,
    failed_points: usize,
    points: Vec<RegressPoint>,
}

fn regress(a: &RegressArgs, out: Option<&Path>, csv: Option<&Path>) -> Result<(), Error> {
    let ds = load(&a.data)?;
    let groups = group_by_pattern(&ds);
    let set = select_adjustment_set(&groups, a.patterns.min_count, a.patterns.integrate)?;
    let (h, loocv) = match a.h {
        Some(h) => (h, None),
        None => {
            let s0 = project(&ds, groups.complete(), Pattern::complete(ds.d()))?;
            let h0 = rule_of_thumb_bandwidth(&s0)?;
            let grid: Vec<f64> = a.h_factors.iter().map(|f| f * h0).collect();
            let r = loocv_bandwidth(&ds, &groups, &grid, a.kernel)?;
            (r.h, Some(r))
        }
    };
    let reg = CamRegressor::new(&ds, &groups, &set, &SmootherSpec::new(a.kernel, h, ds.d())?)?;
    let pts = match query_points(&a.query, &ds)? {
        Some(p) => p,
        None => groups.complete().iter().map(|&i| ds.row_values(i).to_vec()).collect(),
    };
    let points: Vec<RegressPoint> = pts
        .into_iter()
        .map(|x| match reg.at(&x) {
            Ok(r) => RegressPoint { x, fit: Some(r), error: None },
            Err(e) => RegressPoint {
                x,
                fit: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    if let Some(path) = csv {
        let mut header: Vec<String> = ds.feature_names().to_vec();
        header.extend(["eta_cc".to_string(), "eta_cam".to_string()]);
        header.extend(gamma_columns("gamma", &set));
        let mut t = Table::new(header);
        for p in &points {
            let mut row = floats(p.x.iter().copied());
            match &p.fit {
                Some(r) => {
                    row.extend(floats([r.eta_cc, r.eta_cam]));
                    row.extend(floats(r.patterns.iter().map(|q| q.gamma)));
                }
                None => row.extend(std::iter::repeat(fmt_f64(f64::NAN)).take(2 + set.len())),
            }
            t.push(row);
        }
        t.write(path)?;
    }
    let body = RegressOutput {
        data: DataSummary::of(&ds, &groups),
        kernel: a.kernel.to_string(),
        h,
        loocv,
        patterns: set.patterns(),
        failed_points: points.iter().filter(|p| p.fit.is_none()).count(),
        points,
    };
    write_json("regress", body, out)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum SimulationOutput {
    Toy(ToyReport),
    Ustat(UStatReport),
    Density(ExperimentReport),
    Regression(ExperimentReport),
}

fn simulate(a: &SimulateArgs, threads: usize, out: Option<&Path>, csv: Option<&Path>) -> Result<(), Error> {
    if a.target.is_some() && !matches!(a.model, Model::ExampleJoint { .. }) {
        return Err(format!("--target only applies to the exponential-normal model, not {}", a.model).into());
    }
    let report = match a.model {
        Model::ToyGaussian { .. } => SimulationOutput::Toy(run_toy_experiment(a.model, a.n, a.reps, a.seed, threads)?),
        Model::ExampleJoint { .. } => {
            let spec = ModelSpec::with_p1(a.model, a.n, a.p1, a.seed)?;
            let cfg = UStatExperiment {
                level: a.level,
                min_count: a.min_count,
                threads,
                ..UStatExperiment::new(a.target.unwrap_or(UTarget::Mean), a.choice, a.reps, a.seed)
            };
            SimulationOutput::Ustat(run_ustat_experiment(&spec, &cfg)?)
        }
        m if m.is_density() => {
            let spec = ModelSpec::with_p1(m, a.n, a.p1, a.seed)?;
            let cfg = DensityExperiment {
                family: a.kernel,
                bandwidth: a.bandwidth,
                min_count: a.min_count,
                threads,
                ..DensityExperiment::new(a.reps, a.seed)
            };
            SimulationOutput::Density(run_density_experiment(&spec, &cfg)?)
        }
        m => {
            let spec = ModelSpec::with_p1(m, a.n, a.p1, a.seed)?;
            let cfg = RegressionExperiment {
                family: a.kernel,
                n_mc: a.n_mc,
                min_count: a.min_count,
                threads,
                ..RegressionExperiment::new(a.reps, a.seed)
            };
            SimulationOutput::Regression(run_regression_experiment(&spec, &cfg)?)
        }
    };
    if let Some(path) = csv {
        simulation_table(&report).write(path)?;
    }
    write_json("simulate", report, out)
}

fn simulation_table(report: &SimulationOutput) -> Table {
    match report {
        SimulationOutput::Toy(r) => {
            let mut t = Table::new(["rep", "cc", "cam"]);
            for (k, (cc, cam)) in r.cc.iter().zip(&r.cam).enumerate() {
                let mut row = vec![k.to_string()];
                row.extend(floats([*cc, *cam]));
                t.push(row);
            }
            t
        }
        SimulationOutput::Ustat(r) => {
            let mut t = Table::new(["rep", "cc", "cam", "se", "cc_se", "covered", "cc_covered"]);
            for (k, rep) in r.reps.iter().enumerate() {
                let mut row = vec![k.to_string()];
                row.extend(floats([rep.cc, rep.cam, rep.se, rep.cc_se]));
                row.extend([rep.covered.to_string(), rep.cc_covered.to_string()]);
                t.push(row);
            }
            t
        }
        SimulationOutput::Density(r) | SimulationOutput::Regression(r) => {
            let mut t = Table::new(["rep", "h", "cc", "cam", "relative"]);
            for rep in &r.reps {
                let mut row = vec![rep.rep.to_string()];
                row.extend(floats([rep.h, rep.cc, rep.cam, rep.relative]));
                t.push(row);
            }
            t
        }
    }
}

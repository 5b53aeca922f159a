//! Command implementations behind the `bdef` binary: data ingestion, model
//! files, simulation, estimation, prediction and the estimator comparison.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{KnotGrid, Point};
use crate::covariance::{covariance_matrix, CovParams};
use crate::deformation::{validate, CoefPair};
use crate::error::{Error, Result};
use crate::estimation::{fit, Dataset, DeformModel, Diagnostics, FitConfig};
use crate::fields::{conditional_simulate, krige, simulate_grf, AnalyticMap};
use crate::linalg::{dist, regression, upper_entries, Regression};
use crate::scaling::{sg_initialize, SgOptions};
use crate::smoothers::{fit_tps, tps_lambda_for_dof, TpsSmoother};

/// Header of the long-format data CSV.
pub const DATA_HEADER: [&str; 5] = ["station_id", "x1", "x2", "time", "value"];

/// Current [`ModelFile`] schema.
pub const SCHEMA_VERSION: u32 = 1;

/// Side length of the deformed-grid CSV written by [`cmd_estimate`].
pub const DEFORMED_GRID_SIZE: usize = 21;

/// Render a number with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// configuration

/// Settings shared by the commands, read from a flat TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub k1: usize,
    pub k2: usize,
    pub epsilon: Option<f64>,
    pub tol: f64,
    pub max_outer: usize,
    pub ridge: Option<f64>,
    pub seed: u64,
    /// Number of simulated periods.
    #[serde(rename = "T")]
    pub t: usize,
    pub swirl_strength: f64,
    pub swirl_radius: f64,
    /// Simulation sites form a `grid_size x grid_size` grid on the unit square.
    pub grid_size: usize,
    pub sigma2: f64,
    pub phi: f64,
    pub nugget: f64,
}

impl Default for Config {
    fn default() -> Self {
        let fc = FitConfig::default();
        Self {
            k1: fc.k1,
            k2: fc.k2,
            epsilon: None,
            tol: fc.tol,
            max_outer: fc.max_outer,
            ridge: None,
            seed: 1,
            t: 100,
            swirl_strength: 1.5,
            swirl_radius: 0.35,
            grid_size: 11,
            sigma2: 1.0,
            phi: 0.25,
            nugget: 1.0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Data(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            k1: self.k1,
            k2: self.k2,
            epsilon: self.epsilon,
            tol: self.tol,
            max_outer: self.max_outer,
            ridge: self.ridge,
            ..FitConfig::default()
        }
    }

    pub fn truth(&self) -> Result<AnalyticMap> {
        AnalyticMap::swirl([0.5, 0.5], self.swirl_strength, self.swirl_radius)
    }

    pub fn cov(&self) -> Result<CovParams> {
        CovParams::new(self.sigma2, self.phi, self.nugget)
    }

    pub fn sites(&self) -> Result<Vec<Point>> {
        let m = self.grid_size;
        if m < 2 {
            return Err(Error::Argument(format!("grid_size must be >= 2, got {m}")));
        }
        Ok((0..m * m)
            .map(|k| {
                [
                    (k % m) as f64 / (m - 1) as f64,
                    (k / m) as f64 / (m - 1) as f64,
                ]
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// data ingestion

/// A dataset read from CSV, with the stations removed for incompleteness.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    pub dropped: Vec<String>,
}

fn parse_f64(field: &str, name: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("{name}: cannot parse {field:?} as a number"),
    })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Read a long-format CSV (`station_id,x1,x2,time,value`).
///
/// Stations keep their first-appearance order; periods too. An empty or `NA`
/// value counts as missing, and stations missing any period are dropped.
pub fn ingest_reader<R: std::io::Read>(reader: R) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().collect::<Vec<_>>() != DATA_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {:?}", DATA_HEADER.join(",")),
        });
    }

    let mut stations: Vec<(String, Point)> = Vec::new();
    let mut station_index: HashMap<String, usize> = HashMap::new();
    let mut times: Vec<String> = Vec::new();
    let mut time_index: HashMap<String, usize> = HashMap::new();
    let mut values: HashMap<(usize, usize), Option<f64>> = HashMap::new();

    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty station_id".into(),
            });
        }
        let p = [
            parse_f64(&record[1], "x1", line)?,
            parse_f64(&record[2], "x2", line)?,
        ];
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Parse {
                line,
                message: "coordinates must be finite".into(),
            });
        }
        let s = match station_index.get(&id) {
            Some(&s) => {
                if stations[s].1 != p {
                    return Err(Error::Parse {
                        line,
                        message: format!("station {id} changes coordinates"),
                    });
                }
                s
            }
            None => {
                stations.push((id.clone(), p));
                station_index.insert(id.clone(), stations.len() - 1);
                stations.len() - 1
            }
        };
        let time = record[3].to_string();
        let t = *time_index.entry(time.clone()).or_insert_with(|| {
            times.push(time);
            times.len() - 1
        });
        let raw = &record[4];
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            None
        } else {
            let v = parse_f64(raw, "value", line)?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: "value must be finite".into(),
                });
            }
            Some(v)
        };
        if values.insert((s, t), value).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate row for station {id}, time {}", &record[3]),
            });
        }
    }

    let complete: Vec<usize> = (0..stations.len())
        .filter(|&s| (0..times.len()).all(|t| matches!(values.get(&(s, t)), Some(Some(_)))))
        .collect();
    let dropped: Vec<String> = (0..stations.len())
        .filter(|s| !complete.contains(s))
        .map(|s| stations[s].0.clone())
        .collect();
    if complete.len() < 4 {
        return Err(Error::Data(format!(
            "{} complete stations, need at least 4",
            complete.len()
        )));
    }
    let z = DMatrix::from_fn(complete.len(), times.len(), |i, t| {
        values[&(complete[i], t)].expect("complete station")
    });
    let sites = complete.iter().map(|&s| stations[s].1).collect();
    let ids = complete.iter().map(|&s| stations[s].0.clone()).collect();
    Ok(Ingested {
        dataset: Dataset::with_labels(sites, z, ids, times)?,
        dropped,
    })
}

pub fn ingest(path: &Path) -> Result<Ingested> {
    ingest_reader(fs::File::open(path)?)
}

/// Write a dataset in long format.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(DATA_HEADER).map_err(csv_error)?;
    for (i, (id, p)) in data.ids().iter().zip(data.sites()).enumerate() {
        for (t, label) in data.times().iter().enumerate() {
            w.write_record([
                id.clone(),
                fmt_f64(p[0]),
                fmt_f64(p[1]),
                label.clone(),
                fmt_f64(data.replicates()[(i, t)]),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Read prediction sites from a CSV with header `x1,x2`.
pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().collect::<Vec<_>>() != ["x1", "x2"] {
        return Err(Error::Parse {
            line: 1,
            message: "expected header \"x1,x2\"".into(),
        });
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 fields, got {}", record.len()),
            });
        }
        out.push([
            parse_f64(&record[0], "x1", line)?,
            parse_f64(&record[1], "x2", line)?,
        ]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// model files

/// Training data stored alongside a model so that predictions can be made
/// from the model file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub station_ids: Vec<String>,
    pub sites: Vec<Point>,
    pub times: Vec<String>,
    /// One row per station, one column per period.
    pub values: Vec<Vec<f64>>,
}

/// Serialized form of a fitted model. Coefficient arrays are row-major
/// `K1 x K2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub domain_min: Point,
    pub domain_max: Point,
    pub k1: usize,
    pub k2: usize,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub sigma2: f64,
    pub phi: f64,
    pub nugget: f64,
    pub epsilon: f64,
    pub mean: f64,
    pub site_means: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub training: TrainingData,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter()
        .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
        .collect()
}

impl ModelFile {
    pub fn new(model: &DeformModel, data: &Dataset) -> Result<Self> {
        if data.sites() != model.sites.as_slice() {
            return Err(Error::Argument(
                "dataset sites differ from the model's".into(),
            ));
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            domain_min: model.grid.min(),
            domain_max: model.grid.max(),
            k1: model.grid.k1(),
            k2: model.grid.k2(),
            theta1: row_major(&model.coef.theta1),
            theta2: row_major(&model.coef.theta2),
            sigma2: model.cov.sigma2,
            phi: model.cov.phi,
            nugget: model.cov.nugget,
            epsilon: model.epsilon,
            mean: model.mean,
            site_means: model.site_means.clone(),
            diagnostics: model.diagnostics.clone(),
            training: TrainingData {
                station_ids: data.ids().to_vec(),
                sites: data.sites().to_vec(),
                times: data.times().to_vec(),
                values: data
                    .replicates()
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
            },
        })
    }

    /// Rebuild the model and its training data, validating the coefficients.
    pub fn to_model(&self) -> Result<(DeformModel, Dataset)> {
        let grid = KnotGrid::new(self.domain_min, self.domain_max, self.k1, self.k2)?;
        let len = self.k1 * self.k2;
        if self.theta1.len() != len || self.theta2.len() != len {
            return Err(Error::Data(format!(
                "coefficient arrays must have {len} entries"
            )));
        }
        let coef = CoefPair::new(
            DMatrix::from_row_slice(self.k1, self.k2, &self.theta1),
            DMatrix::from_row_slice(self.k1, self.k2, &self.theta2),
        )?;
        validate(&grid, &coef, self.epsilon)?;
        let cov = CovParams::new(self.sigma2, self.phi, self.nugget)?;
        let tr = &self.training;
        let t = tr.times.len();
        if tr.values.iter().any(|r| r.len() != t) {
            return Err(Error::Data("training rows differ in length".into()));
        }
        let z = DMatrix::from_fn(tr.values.len(), t, |i, j| tr.values[i][j]);
        let data = Dataset::with_labels(
            tr.sites.clone(),
            z,
            tr.station_ids.clone(),
            tr.times.clone(),
        )?;
        if self.site_means.len() != data.n() {
            return Err(Error::Data(
                "site_means length differs from the station count".into(),
            ));
        }
        let model = DeformModel {
            grid,
            coef,
            cov,
            epsilon: self.epsilon,
            sites: tr.sites.clone(),
            site_means: self.site_means.clone(),
            mean: self.mean,
            diagnostics: self.diagnostics.clone(),
        };
        Ok((model, data))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("model file: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("model file: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Data(format!(
                    "unsupported model schema version {v} (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Data("model file has no schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Data(format!("model file: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// `path` with `suffix` appended to its file stem, e.g. `model.json` ->
/// `model_grid.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

/// `g x g` regular grid over a rectangle, row by row from the lower edge.
pub fn regular_grid(min: Point, max: Point, g: usize) -> Vec<Point> {
    let step = |a: usize, lo: f64, hi: f64| {
        if g == 1 {
            lo
        } else {
            lo + (hi - lo) * a as f64 / (g - 1) as f64
        }
    };
    (0..g * g)
        .map(|k| [step(k % g, min[0], max[0]), step(k / g, min[1], max[1])])
        .collect()
}

// ---------------------------------------------------------------------------
// commands

/// Files written by [`cmd_simulate`].
#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub data: PathBuf,
    pub truth_map: PathBuf,
    pub truth_cov: PathBuf,
}

/// Simulate the swirl field and write the replicates plus the truth sidecars.
pub fn cmd_simulate(config: &Config, out_dir: &Path, seed: u64) -> Result<SimulateOutput> {
    fs::create_dir_all(out_dir)?;
    let sites = config.sites()?;
    let truth = config.truth()?;
    let cov = config.cov()?;
    let z = simulate_grf(&sites, &truth, &cov, config.t, seed)?;
    let ids = (0..sites.len()).map(|i| format!("s{i:03}")).collect();
    let times = (0..config.t).map(|t| format!("t{t:03}")).collect();
    let data = Dataset::with_labels(sites.clone(), z, ids, times)?;

    let out = SimulateOutput {
        data: out_dir.join("data.csv"),
        truth_map: out_dir.join("truth_map.csv"),
        truth_cov: out_dir.join("truth_cov.csv"),
    };
    write_dataset(&out.data, &data)?;
    let g = regular_grid([0.0, 0.0], [1.0, 1.0], DEFORMED_GRID_SIZE);
    write_rows(
        &out.truth_map,
        &["gx1", "gx2", "dx1", "dx2"],
        g.iter().map(|p| {
            let d = truth.eval(*p);
            vec![p[0], p[1], d[0], d[1]]
        }),
    )?;
    let c = covariance_matrix(&sites, &truth, &cov)?;
    let n = sites.len();
    write_rows(
        &out.truth_cov,
        &["i", "j", "covariance"],
        (0..n)
            .flat_map(|i| (i..n).map(move |j| (i, j)))
            .map(|(i, j)| vec![i as f64, j as f64, c[(i, j)]]),
    )?;
    Ok(out)
}

/// Options of [`cmd_estimate`]; `None` falls back to the config file value.
#[derive(Clone, Debug, Default)]
pub struct EstimateArgs {
    pub data: PathBuf,
    pub k: Option<usize>,
    pub epsilon: Option<f64>,
    pub tol: Option<f64>,
    pub out: PathBuf,
}

/// Result of [`cmd_estimate`].
#[derive(Clone, Debug)]
pub struct EstimateOutput {
    pub model: ModelFile,
    pub dropped: Vec<String>,
    pub grid_csv: PathBuf,
}

/// Fit a model to long-format data, write the model file and the deformed grid.
pub fn cmd_estimate(args: &EstimateArgs, config: &Config) -> Result<EstimateOutput> {
    let ingested = ingest(&args.data)?;
    let mut cfg = config.fit_config();
    if let Some(k) = args.k {
        cfg.k1 = k;
        cfg.k2 = k;
    }
    if args.epsilon.is_some() {
        cfg.epsilon = args.epsilon;
    }
    if let Some(t) = args.tol {
        cfg.tol = t;
    }
    let model = fit(&ingested.dataset, &cfg)?;
    validate(&model.grid, &model.coef, model.epsilon)?;
    let file = ModelFile::new(&model, &ingested.dataset)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    file.write(&args.out)?;

    let grid_csv = sibling(&args.out, "_grid.csv");
    let map = model.map();
    let g = regular_grid(model.grid.min(), model.grid.max(), DEFORMED_GRID_SIZE);
    let rows: Vec<Vec<f64>> = g
        .iter()
        .map(|p| map.eval(*p).map(|d| vec![p[0], p[1], d[0], d[1]]))
        .collect::<Result<_>>()?;
    write_rows(&grid_csv, &["gx1", "gx2", "dx1", "dx2"], rows)?;
    Ok(EstimateOutput {
        model: file,
        dropped: ingested.dropped,
        grid_csv,
    })
}

/// Options of [`cmd_predict`].
#[derive(Clone, Debug, Default)]
pub struct PredictArgs {
    pub model: PathBuf,
    pub grid: PathBuf,
    pub time: String,
    pub out: PathBuf,
    pub draws: Option<usize>,
    pub seed: u64,
}

/// Krige one period of the stored training data onto the sites in `grid`;
/// optionally write conditional simulations next to the output.
pub fn cmd_predict(args: &PredictArgs) -> Result<usize> {
    let (model, data) = ModelFile::read(&args.model)?.to_model()?;
    let t = data
        .times()
        .iter()
        .position(|l| *l == args.time)
        .ok_or_else(|| {
            Error::Data(format!(
                "time {:?} not in the model's training data",
                args.time
            ))
        })?;
    let values: Vec<f64> = data.replicates().column(t).iter().copied().collect();
    let pred = read_points(&args.grid)?;
    let k = krige(&model, &values, &pred)?;
    write_rows(
        &args.out,
        &["x1", "x2", "mean", "variance"],
        pred.iter()
            .zip(k.mean.iter().zip(&k.variance))
            .map(|(p, (m, v))| vec![p[0], p[1], *m, *v]),
    )?;
    if let Some(d) = args.draws.filter(|d| *d > 0) {
        let draws = conditional_simulate(&model, &values, &pred, d, args.seed)?;
        let mut header = vec!["x1".to_string(), "x2".to_string()];
        header.extend((0..d).map(|i| format!("draw_{i}")));
        let refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        write_rows(
            &sibling(&args.out, "_draws.csv"),
            &refs,
            pred.iter().enumerate().map(|(i, p)| {
                let mut row = vec![p[0], p[1]];
                row.extend(draws.row(i).iter());
                row
            }),
        )?;
    }
    Ok(pred.len())
}

/// One row of the comparison report.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    /// `K` for the B-spline fit; `K^2` degrees of freedom for the thin-plate spline.
    pub size: usize,
    /// Thin-plate smoothing parameter, `NaN` for B-splines.
    pub lambda: f64,
    pub fit: Regression,
    pub mse: f64,
    /// Smallest Jacobian determinant (B-spline: exact; TPS: over a 100 x 100 grid).
    pub min_jacobian: f64,
    /// The Jacobian determinant changes sign on the 100 x 100 grid.
    pub folds: bool,
    pub scatter: PathBuf,
}

/// Signed Jacobian extremes of a thin-plate map over a `g x g` grid.
fn tps_jacobian_range(model: &crate::smoothers::TpsModel, g: usize) -> (f64, f64) {
    regular_grid([0.0, 0.0], [1.0, 1.0], g)
        .iter()
        .map(|p| model.jacobian_det(*p))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
}

/// Fit the constrained B-spline model for `K` in `{4, 6, 8}` and the
/// thin-plate initializer at matching degrees of freedom on one simulated
/// dataset; write per-method scatter CSVs and a summary report.
pub fn cmd_compare(config: &Config, out_dir: &Path) -> Result<Vec<CompareRow>> {
    fs::create_dir_all(out_dir)?;
    let sites = config.sites()?;
    let truth = config.truth()?;
    let cov = config.cov()?;
    let z = simulate_grf(&sites, &truth, &cov, config.t, config.seed)?;
    let data = Dataset::new(sites.clone(), z)?;
    let true_c = upper_entries(&covariance_matrix(&sites, &truth, &cov)?);
    let ks = [4usize, 6, 8];

    let summarize = |method: &str,
                     size: usize,
                     lambda: f64,
                     est: Vec<f64>,
                     min_j: f64,
                     folds: bool|
     -> Result<CompareRow> {
        let scatter = out_dir.join(format!("{method}_{size}.csv"));
        write_rows(
            &scatter,
            &["true", "estimated"],
            true_c.iter().zip(&est).map(|(a, b)| vec![*a, *b]),
        )?;
        let mse = true_c
            .iter()
            .zip(&est)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / est.len() as f64;
        Ok(CompareRow {
            method: method.into(),
            size,
            lambda,
            fit: regression(&true_c, &est),
            mse,
            min_jacobian: min_j,
            folds,
            scatter,
        })
    };

    let bspline = |k: usize| -> Result<CompareRow> {
        let cfg = FitConfig {
            k1: k,
            k2: k,
            ..config.fit_config()
        };
        let model = fit(&data, &cfg)?;
        let min_j = model.min_jacobian();
        summarize(
            "bspline",
            k,
            f64::NAN,
            upper_entries(&model.covariance()),
            min_j,
            min_j <= 0.0,
        )
    };
    let tps = |k: usize| -> Result<CompareRow> {
        let dof = (k * k) as f64;
        let lambda = tps_lambda_for_dof(&sites, dof)?;
        let sg = sg_initialize(
            &data.dispersions()?,
            &sites,
            &TpsSmoother { lambda },
            SgOptions::default(),
        )?;
        // C_ij = s^2 - g(h_ij) / 2, with s^2 the mean sample variance; the
        // sill alone is unreliable when the fitted range exceeds the distances
        let centered = data.centered();
        let total = centered.norm_squared() / (centered.len() - centered.nrows()) as f64;
        let n = sites.len();
        let c = DMatrix::from_fn(n, n, |i, j| {
            total - 0.5 * sg.variogram.eval(dist(sg.smoothed[i], sg.smoothed[j]))
        });
        let map = fit_tps(&sites, sg.configuration.coords(), lambda)?;
        let (lo, hi) = tps_jacobian_range(&map, 100);
        let folds = lo < 0.0 && hi > 0.0;
        // the configuration may be mirrored; report the orientation-free minimum
        let min_j = if hi <= 0.0 { -hi } else { lo };
        summarize("tps", k * k, lambda, upper_entries(&c), min_j, folds)
    };

    let rows: Vec<Result<CompareRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = ks
            .iter()
            .map(|&k| s.spawn(move || bspline(k)))
            .chain(ks.iter().map(|&k| s.spawn(move || tps(k))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("comparison worker panicked"))
            .collect()
    });
    let rows: Vec<CompareRow> = rows.into_iter().collect::<Result<_>>()?;

    let mut report = fs::File::create(out_dir.join("report.csv"))?;
    writeln!(
        report,
        "method,size,lambda,slope,intercept,correlation,mse,min_jacobian,folds"
    )?;
    for r in &rows {
        writeln!(
            report,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.size,
            fmt_f64(r.lambda),
            fmt_f64(r.fit.slope),
            fmt_f64(r.fit.intercept),
            fmt_f64(r.fit.correlation),
            fmt_f64(r.mse),
            fmt_f64(r.min_jacobian),
            r.folds
        )?;
    }
    Ok(rows)
}

//! File formats: long-format curve CSV, coefficient CSV, model JSON,
//! assignment CSV and benchmark outputs.
//!
//! Floats are written in Rust's shortest round-trip representation, so every
//! value reads back bit-for-bit.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::{self, FitResult, MixtureParams, PenaltyKind};
use crate::error::{Error, Result};
use crate::fpca::{CoefficientMatrix, FpcaBundle, FunctionalDataSet};
use crate::select::{Chosen, SelectionReport, SelectionRow};
use crate::simbench::{BenchmarkRow, ReplicateRecord, SimulationDesign};

pub const SCHEMA_VERSION: u32 = 1;
const LONG_HEADER: [&str; 4] = ["obs_id", "sensor_id", "time", "value"];
const MISSING_REPORT_LIMIT: usize = 10;

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("{what} `{field}` is not a number"),
    })
}

fn order_of_first_appearance(keys: &mut Vec<String>, index: &mut HashMap<String, usize>, key: &str) -> usize {
    if let Some(&i) = index.get(key) {
        return i;
    }
    keys.push(key.to_string());
    index.insert(key.to_string(), keys.len() - 1);
    keys.len() - 1
}

/// Reads `obs_id,sensor_id,time,value` rows into a dataset. Observations and
/// sensors keep their order of first appearance; times are sorted.
pub fn read_long_csv(path: &Path) -> Result<FunctionalDataSet> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != LONG_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{}`, found `{}`", LONG_HEADER.join(","), header.join(",")),
        });
    }
    let (mut obs, mut obs_index) = (Vec::new(), HashMap::new());
    let (mut sensors, mut sensor_index) = (Vec::new(), HashMap::new());
    let mut cells: HashMap<(usize, usize, u64), f64> = HashMap::new();
    let mut times: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let t = parse_f64(&record[2], line, "time")?;
        let v = parse_f64(&record[3], line, "value")?;
        if !t.is_finite() {
            return Err(Error::Parse {
                line,
                msg: format!("time `{}` is not finite", &record[2]),
            });
        }
        let o = order_of_first_appearance(&mut obs, &mut obs_index, &record[0]);
        let s = order_of_first_appearance(&mut sensors, &mut sensor_index, &record[1]);
        // -0.0 and 0.0 are the same grid point
        let t = if t == 0.0 { 0.0 } else { t };
        if cells.insert((o, s, t.to_bits()), v).is_some() {
            return Err(Error::DuplicateRecord {
                obs: record[0].to_string(),
                sensor: record[1].to_string(),
                time: t,
            });
        }
        times.push(t);
    }
    if cells.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{} has no data rows", path.display()),
        });
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (n, p, tau) = (obs.len(), sensors.len(), times.len());
    let mut values = Vec::with_capacity(n * p * tau);
    let mut missing = Vec::new();
    let mut missing_count = 0;
    for o in 0..n {
        for s in 0..p {
            for &t in &times {
                match cells.get(&(o, s, t.to_bits())) {
                    Some(&v) => values.push(v),
                    None => {
                        missing_count += 1;
                        if missing.len() < MISSING_REPORT_LIMIT {
                            missing.push((obs[o].clone(), sensors[s].clone(), t));
                        }
                        values.push(f64::NAN);
                    }
                }
            }
        }
    }
    if missing_count > 0 {
        return Err(Error::MissingCells {
            count: missing_count,
            first: missing,
        });
    }
    log::info!("read {}: n={n}, p={p}, tau={tau}", path.display());
    FunctionalDataSet::new(times, values, obs, sensors)
}

/// Writes a file through a temporary sibling and renames it into place.
fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Shortest round-trip decimal, in exponent form for very small or large
/// magnitudes.
fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_long_csv(data: &FunctionalDataSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LONG_HEADER)?;
    for i in 0..data.n() {
        for s in 0..data.p() {
            for (t, v) in data.times().iter().zip(data.curve(i, s)) {
                w.write_record([&data.obs_ids()[i], &data.sensor_names()[s], &num(*t), &num(*v)])?;
            }
        }
    }
    write_atomically(path, &csv_bytes(w)?)
}

fn coefficient_header(c: &CoefficientMatrix) -> Vec<String> {
    let mut header = vec!["obs_id".to_string()];
    for name in c.sensor_names() {
        for l in 1..=c.q_c() {
            header.push(format!("{name}_fpc{l}"));
        }
    }
    header
}

/// One row per observation: `obs_id` then `<sensor>_fpc<l>` columns.
pub fn write_coefficients(c: &CoefficientMatrix, obs_ids: &[String], path: &Path) -> Result<()> {
    if obs_ids.len() != c.n() {
        return Err(Error::ShapeMismatch(format!("{} ids for {} rows", obs_ids.len(), c.n())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(coefficient_header(c))?;
    for (i, id) in obs_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(c.scores().row(i).iter().map(|&v| num(v)));
        w.write_record(&row)?;
    }
    write_atomically(path, &csv_bytes(w)?)
}

/// Reads a coefficient CSV; returns the matrix and the observation ids.
pub fn read_coefficients(path: &Path) -> Result<(CoefficientMatrix, Vec<String>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let bad_header = |msg: String| Error::Parse { line: 1, msg };
    if header.first().map(String::as_str) != Some("obs_id") || header.len() < 2 {
        return Err(bad_header("expected `obs_id` followed by `<sensor>_fpc<l>` columns".into()));
    }
    let mut sensors: Vec<String> = Vec::new();
    let mut components: Vec<usize> = Vec::new();
    for col in &header[1..] {
        let (name, l) = col
            .rsplit_once("_fpc")
            .and_then(|(n, l)| l.parse::<usize>().ok().map(|l| (n.to_string(), l)))
            .ok_or_else(|| bad_header(format!("column `{col}` is not `<sensor>_fpc<l>`")))?;
        if sensors.last() != Some(&name) {
            sensors.push(name);
        }
        components.push(l);
    }
    let q_c = components.len() / sensors.len();
    let expected: Vec<usize> = (0..sensors.len()).flat_map(|_| 1..=q_c).collect();
    if components.len() != sensors.len() * q_c || components != expected {
        return Err(bad_header("every sensor needs the same components fpc1..fpcQ in order".into()));
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        ids.push(record[0].to_string());
        for f in record.iter().skip(1) {
            data.push(parse_f64(f, line, "score")?);
        }
    }
    if ids.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{} has no data rows", path.display()),
        });
    }
    let scores = DMatrix::from_row_slice(ids.len(), header.len() - 1, &data);
    let p = sensors.len();
    Ok((CoefficientMatrix::new(scores, p, q_c, sensors)?, ids))
}

/// Mixture parameters and fit summary as stored in the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub kind: PenaltyKind,
    pub q_c: usize,
    pub proportions: Vec<f64>,
    /// Row per cluster.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub zero_mask: Vec<Vec<bool>>,
    pub removed_sensors: Vec<String>,
    pub lambda: f64,
    pub gamma: f64,
    pub penalized_nll: f64,
    pub plain_nll: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl MixtureRecord {
    pub fn from_fit(fit: &FitResult, q_c: usize, sensor_names: &[String]) -> Self {
        let p = &fit.params;
        Self {
            kind: fit.kind,
            q_c,
            proportions: p.proportions.clone(),
            means: p.means.row_iter().map(|r| r.iter().copied().collect()).collect(),
            variances: p.variances.clone(),
            zero_mask: p.zero_mask().row_iter().map(|r| r.iter().copied().collect()).collect(),
            removed_sensors: fit.removed_sensors.iter().map(|&s| sensor_names[s].clone()).collect(),
            lambda: fit.lambda,
            gamma: fit.gamma,
            penalized_nll: fit.penalized_nll,
            plain_nll: fit.plain_nll,
            iterations: fit.iterations,
            converged: fit.converged,
        }
    }

    pub fn params(&self) -> Result<MixtureParams> {
        let m = self.means.len();
        let q = self.variances.len();
        if self.means.iter().any(|r| r.len() != q) {
            return Err(Error::ShapeMismatch("mean rows do not match the variance count".into()));
        }
        let flat: Vec<f64> = self.means.iter().flatten().copied().collect();
        let params = MixtureParams {
            proportions: self.proportions.clone(),
            means: DMatrix::from_row_slice(m, q, &flat),
            variances: self.variances.clone(),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Contents of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    /// Absent when the model was fitted on a coefficient file.
    pub fpca: Option<FpcaBundle>,
    pub mixture: MixtureRecord,
    pub selection_table: Vec<SelectionRow>,
    pub chosen: Chosen,
    /// Pilot means per number of clusters, rows per cluster.
    pub pilot_means: Vec<(usize, Vec<Vec<f64>>)>,
}

impl ModelFile {
    pub fn new(report: &SelectionReport, fpca: Option<FpcaBundle>, sensor_names: &[String], q_c: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            fpca,
            mixture: MixtureRecord::from_fit(&report.best, q_c, sensor_names),
            selection_table: report.rows.clone(),
            chosen: report.chosen,
            pilot_means: report
                .pilot_means
                .iter()
                .map(|(m, mu)| (*m, mu.row_iter().map(|r| r.iter().copied().collect()).collect()))
                .collect(),
        }
    }

    /// Posterior responsibilities and hard labels for a coefficient matrix.
    pub fn assign(&self, coeffs: &CoefficientMatrix) -> Result<(em::Responsibilities, Vec<usize>)> {
        let params = self.mixture.params()?;
        let e = em::e_step(coeffs.scores(), &params)?;
        let labels = e.responsibilities.hard_labels();
        Ok((e.responsibilities, labels))
    }

    /// Transforms raw curves with the stored FPCA and assigns them.
    pub fn predict(&self, data: &FunctionalDataSet) -> Result<(em::Responsibilities, Vec<usize>)> {
        let fpca = self
            .fpca
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no FPCA part; pass coefficients instead".into()))?;
        self.assign(&fpca.transform_dataset(data)?)
    }
}

pub fn write_model(model: &ModelFile, path: &Path) -> Result<()> {
    write_atomically(path, serde_json::to_string_pretty(model)?.as_bytes())
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "model file has no schema_version".into(),
        })?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(Error::VersionMismatch {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// `obs_id,label,resp_1..resp_m`; labels are 1-based to match the columns.
pub fn write_assignments(obs_ids: &[String], resp: &em::Responsibilities, path: &Path) -> Result<()> {
    let tau = resp.matrix();
    if tau.nrows() != obs_ids.len() || tau.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!("{} ids for {} rows", obs_ids.len(), tau.nrows())));
    }
    let labels = resp.hard_labels();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["obs_id".to_string(), "label".to_string()];
    header.extend((1..=tau.ncols()).map(|k| format!("resp_{k}")));
    w.write_record(&header)?;
    for (i, id) in obs_ids.iter().enumerate() {
        let mut row = vec![id.clone(), (labels[i] + 1).to_string()];
        row.extend(tau.row(i).iter().map(|&v| num(v)));
        w.write_record(&row)?;
    }
    write_atomically(path, &csv_bytes(w)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignments {
    pub obs_ids: Vec<String>,
    /// 0-based cluster indices.
    pub labels: Vec<usize>,
    pub responsibilities: DMatrix<f64>,
}

pub fn read_assignments(path: &Path) -> Result<Assignments> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let m = header.len().saturating_sub(2);
    let expected: Vec<String> = ["obs_id".to_string(), "label".to_string()]
        .into_iter()
        .chain((1..=m).map(|k| format!("resp_{k}")))
        .collect();
    if m == 0 || header != expected {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header `obs_id,label,resp_1..resp_m`".into(),
        });
    }
    let (mut ids, mut labels, mut resp) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        ids.push(record[0].to_string());
        let label: usize = record[1].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label `{}` is not a positive integer", &record[1]),
        })?;
        if label == 0 || label > m {
            return Err(Error::Parse {
                line,
                msg: format!("label {label} outside 1..={m}"),
            });
        }
        labels.push(label - 1);
        for f in record.iter().skip(2) {
            resp.push(parse_f64(f, line, "responsibility")?);
        }
    }
    Ok(Assignments {
        responsibilities: DMatrix::from_row_slice(ids.len(), m, &resp),
        obs_ids: ids,
        labels,
    })
}

pub fn write_selection_table(rows: &[SelectionRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    write_atomically(path, &csv_bytes(w)?)
}

pub fn read_selection_table(path: &Path) -> Result<Vec<SelectionRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_removed_sensors(names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sensor_id"])?;
    for name in names {
        w.write_record([name])?;
    }
    write_atomically(path, &csv_bytes(w)?)
}

pub fn read_removed_sensors(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .records()
        .map(|r| Ok(r?.get(0).unwrap_or_default().to_string()))
        .collect()
}

/// One point of a cluster-mean curve on the original measurement scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sensor_id: String,
    /// 1-based, as in the assignment file.
    pub cluster: usize,
    pub time: f64,
    pub value: f64,
}

/// Cluster-mean curves rebuilt from the mean scores of every cluster.
pub fn cluster_mean_curves(model: &ModelFile) -> Result<Vec<CurvePoint>> {
    let fpca = model
        .fpca
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model has no FPCA part".into()))?;
    let q_c = model.mixture.q_c;
    let mut points = Vec::new();
    for (s, sensor) in fpca.models.iter().enumerate() {
        for (k, means) in model.mixture.means.iter().enumerate() {
            let scores = means
                .get(s * q_c..(s + 1) * q_c)
                .ok_or_else(|| Error::ShapeMismatch("mixture has fewer columns than the FPCA part".into()))?;
            let curve = sensor.reconstruct(scores)?;
            for (&t, &z) in sensor.times.iter().zip(&curve) {
                points.push(CurvePoint {
                    sensor_id: sensor.sensor_name.clone(),
                    cluster: k + 1,
                    time: t,
                    value: sensor.standardization.invert(z),
                });
            }
        }
    }
    Ok(points)
}

pub fn write_curve_points(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for point in points {
        w.serialize(point)?;
    }
    write_atomically(path, &csv_bytes(w)?)
}

/// Ground truth written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub design: SimulationDesign,
    pub obs_ids: Vec<String>,
    /// 1-based true cluster per observation.
    pub labels: Vec<usize>,
    pub signal_sensors: Vec<String>,
    pub noise_sensors: Vec<String>,
}

impl TruthFile {
    pub fn new(design: &SimulationDesign, data: &FunctionalDataSet) -> Result<Self> {
        let labels = data
            .labels()
            .ok_or_else(|| Error::InvalidArgument("dataset carries no labels".into()))?;
        let names = data.sensor_names();
        Ok(Self {
            design: design.clone(),
            obs_ids: data.obs_ids().to_vec(),
            labels: labels.iter().map(|k| k + 1).collect(),
            signal_sensors: design.signal_sensors().iter().map(|&s| names[s].clone()).collect(),
            noise_sensors: design.noise_sensors().iter().map(|&s| names[s].clone()).collect(),
        })
    }
}

pub fn write_truth(truth: &TruthFile, path: &Path) -> Result<()> {
    write_atomically(path, serde_json::to_string_pretty(truth)?.as_bytes())
}

pub fn read_truth(path: &Path) -> Result<TruthFile> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_benchmark_rows(rows: &[BenchmarkRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    write_atomically(path, &csv_bytes(w)?)
}

pub fn read_benchmark_rows(path: &Path) -> Result<Vec<BenchmarkRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Appends replicate records to a CSV, one whole line per `write_all`, so
/// an interrupted run leaves a valid file.
pub struct ReplicateWriter {
    file: Mutex<File>,
}

impl ReplicateWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(REPLICATE_HEADER)?;
        file.write_all(&csv_bytes(w)?)?;
        file.flush()?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn append(&self, records: &[ReplicateRecord]) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in records {
            w.serialize(r)?;
        }
        let bytes = csv_bytes(w)?;
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        for line in bytes.split_inclusive(|&b| b == b'\n') {
            file.write_all(line)?;
        }
        file.flush()?;
        Ok(())
    }
}

const REPLICATE_HEADER: [&str; 14] = [
    "scenario",
    "level",
    "replicate",
    "seed",
    "kind",
    "m_hat",
    "ari",
    "removed_correct",
    "removed_falsely",
    "variables_removed",
    "lambda",
    "gamma",
    "max_objective_increase",
    "error",
];

pub fn read_replicates(path: &Path) -> Result<Vec<ReplicateRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

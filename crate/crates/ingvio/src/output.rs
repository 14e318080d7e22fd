//! Run outputs: `estimate.csv`, `errors.csv`, `events.csv` and `summary.csv`.

use std::path::Path;

use ingvio_core::estimator::{EstimateRecord, LogEntry, RunResult};
use ingvio_core::metrics::{summarize, ErrorRecord};
use nalgebra::UnitQuaternion;

use crate::dataset::{fmt_f64, Table, TableWriter};
use crate::error::{Error, Result};

pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// IMU error-state component names, in layout order.
pub const IMU_AXES: [&str; 15] = ["rx", "ry", "rz", "px", "py", "pz", "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz"];

fn estimate_columns() -> Vec<String> {
    let mut c: Vec<String> = ["t_s", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz"].map(String::from).to_vec();
    c.extend(IMU_AXES.iter().map(|a| format!("var_{a}")));
    c.extend(["yaw_var", "clones", "landmarks", "clocks", "aligned"].map(String::from));
    c
}

fn error_columns() -> Vec<String> {
    let mut c: Vec<String> = ["t_s", "ex", "ey", "ez", "position_error_m", "yaw_error_rad", "nees"].map(String::from).to_vec();
    c.extend(IMU_AXES.iter().map(|a| format!("d_{a}")));
    c
}

fn estimate_row(r: &EstimateRecord) -> Vec<String> {
    let q = UnitQuaternion::from_rotation_matrix(&r.pose.rotation);
    let mut row = vec![fmt_f64(r.t)];
    row.extend(r.pose.position.iter().map(|x| fmt_f64(*x)));
    row.extend([q.w, q.i, q.j, q.k].map(fmt_f64));
    row.extend(r.pose.velocity.iter().chain(r.gyro_bias.iter()).chain(r.accel_bias.iter()).map(|x| fmt_f64(*x)));
    row.extend(r.imu_covariance.diagonal().iter().map(|x| fmt_f64(*x)));
    row.push(r.yaw_variance.map(fmt_f64).unwrap_or_default());
    row.extend([r.clones, r.landmarks, r.clocks, usize::from(r.aligned)].map(|n| n.to_string()));
    row
}

fn error_row(e: &ErrorRecord) -> Vec<String> {
    let mut row = vec![fmt_f64(e.t)];
    row.extend(e.position_error.iter().map(|x| fmt_f64(*x)));
    row.extend([e.position_error.norm(), e.yaw_error, e.nees].map(fmt_f64));
    row.extend(e.error.iter().map(|x| fmt_f64(*x)));
    row
}

fn event_row(e: &LogEntry) -> Vec<String> {
    vec![fmt_f64(e.t), fmt_f64(e.t_filter), e.kind.name().to_string(), e.detail.clone()]
}

fn cols(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

pub fn write_run(dir: &Path, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let c = estimate_columns();
    let mut w = TableWriter::create(&dir.join(ESTIMATE_FILE), "estimate", &cols(&c))?;
    for r in &result.estimates {
        w.row(estimate_row(r))?;
    }
    w.finish()?;

    let errors_path = dir.join(ERRORS_FILE);
    if result.errors.is_empty() {
        if errors_path.exists() {
            std::fs::remove_file(&errors_path).map_err(Error::io(&errors_path))?;
        }
    } else {
        let c = error_columns();
        let mut w = TableWriter::create(&errors_path, "errors", &cols(&c))?;
        for e in &result.errors {
            w.row(error_row(e))?;
        }
        w.finish()?;
    }

    let mut w = TableWriter::create(&dir.join(EVENTS_FILE), "events", &["t_s", "t_filter_s", "kind", "detail"])?;
    for e in &result.events {
        w.row(event_row(e))?;
    }
    w.finish()?;

    let mut w = TableWriter::create(&dir.join(SUMMARY_FILE), "summary", &["key", "value"])?;
    w.row(["images", &result.estimates.len().to_string()])?;
    w.row(["aligned", if result.alignment.is_some() { "1" } else { "0" }])?;
    if let Some(a) = &result.alignment {
        w.row(["alignment_yaw_rad".to_string(), fmt_f64(a.yaw)])?;
        for (k, v) in ["x", "y", "z"].iter().zip(a.translation.iter()) {
            w.row([format!("alignment_t{k}_m"), fmt_f64(*v)])?;
        }
    }
    if let Ok(s) = summarize(&result.errors) {
        w.row(["position_rmse_m".to_string(), fmt_f64(s.position_rmse)])?;
        w.row(["final_position_error_m".to_string(), fmt_f64(s.final_position_error)])?;
        w.row(["yaw_rmse_rad".to_string(), fmt_f64(s.yaw_rmse)])?;
        w.row(["anees_per_dim".to_string(), fmt_f64(s.anees)])?;
    }
    w.finish()
}

/// Numeric columns of a results table (events are not numeric).
pub struct NumericTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let columns: Vec<String> = match kind {
            "estimate" => estimate_columns(),
            "errors" => error_columns(),
            _ => return Err(Error::dataset(path, format!("no numeric schema for {kind}"))),
        };
        let t = Table::read(path, kind)?;
        let mut rows = Vec::with_capacity(t.rows.len());
        for (line, rec) in &t.rows {
            if rec.len() != columns.len() {
                return Err(t.error(*line, format!("expected {} fields, found {}", columns.len(), rec.len())));
            }
            // empty cells (e.g. an untracked yaw variance) read as NaN
            let row = rec.iter().enumerate().map(|(i, s)| if s.is_empty() { Ok(f64::NAN) } else { t.field(*line, rec, i, &columns[i]) }).collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

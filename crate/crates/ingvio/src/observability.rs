//! Observability of a filter run over a short analysis window.
//!
//! The estimator runs up to `t_start`; from the resulting estimate the IMU
//! stream is replayed for `steps` image intervals, recording the transition
//! matrices and, at every image time, the visual rows of the in-state
//! landmarks plus (in GVIO mode) the single-difference GNSS rows of the
//! epoch nearest `t_start`. The stacked observability matrix is then probed
//! along the candidate symmetry directions.

use std::path::Path;

use ingvio_core::estimator::{run_dataset, EstimatorConfig, Mode};
use ingvio_core::geometry::Vec3;
use ingvio_core::gravity_vector;
use ingvio_core::propagation::{propagate_mean, transition_matrix};
use ingvio_core::simulator::{generate, Dataset, ScenarioConfig};
use ingvio_core::symmetry::{
    classify_degeneracy, observability_matrix, restricted_observability, single_difference_rows, stack_dense, unobservable_directions, visual_rows, DegeneracyReport,
};
use ingvio_core::Rotation;
use nalgebra::{DMatrix, DVector};

use crate::dataset::{fmt_f64, TableWriter};
use crate::error::{Error, Result};

pub const OBSERVABILITY_FILE: &str = "observability.csv";

#[derive(Clone, Debug)]
pub struct Candidate {
    pub name: String,
    /// Predicted unobservable by the degeneracy classifier.
    pub predicted: bool,
    /// `‖O n‖ / ‖O‖` (Frobenius).
    pub relative_norm: f64,
}

#[derive(Clone, Debug)]
pub struct ObservabilityReport {
    pub t_start: f64,
    pub steps: usize,
    pub dim: usize,
    pub satellites: usize,
    pub report: DegeneracyReport,
    pub candidates: Vec<Candidate>,
    /// Singular values of `O` restricted to the span of the four
    /// visual-inertial symmetry directions, relative to `σ_max(O)`.
    pub restricted_spectrum: Vec<f64>,
    /// Smallest of those.
    pub restricted_min: f64,
}

fn truncate(ds: &Dataset, t: f64) -> Dataset {
    Dataset {
        imu: ds.imu.iter().filter(|s| s.t <= t).cloned().collect(),
        images: ds.images.iter().filter(|f| f.t <= t).cloned().collect(),
        gnss: ds.gnss.iter().filter(|e| e.t <= t).cloned().collect(),
        truth: ds.truth.clone(),
        calibration: ds.calibration.clone(),
    }
}

pub fn analyze_observability(scenario: &ScenarioConfig, estimator: &EstimatorConfig, seed: u64, t_start: Option<f64>, steps: usize) -> Result<ObservabilityReport> {
    if steps == 0 {
        return Err(Error::Config("observability window needs at least one step".into()));
    }
    let sc = ScenarioConfig { seed, ..scenario.clone() };
    let ds = generate(&sc)?;
    let t_start = t_start.unwrap_or(0.5 * sc.duration);
    let result = run_dataset(&truncate(&ds, t_start), estimator, seed)?;
    let mut x = result.state.clone();
    let g = gravity_vector();

    // line of sight of the epoch nearest the window start
    let gvio = estimator.mode == Mode::Gvio;
    let (los, r_w_ecef) = match (&result.alignment, gvio) {
        (Some(a), true) => {
            let epoch = ds.gnss.iter().filter(|e| !e.observations.is_empty()).min_by(|a, b| (a.t - t_start).abs().total_cmp(&(b.t - t_start).abs()));
            let rx = a.to_ecef(&x.imu.position);
            let los: Vec<Vec3> = epoch.map(|e| e.observations.iter().map(|o| (o.position - rx).normalize()).collect()).unwrap_or_default();
            (los, a.t_w_ecef.rotation)
        }
        (None, true) => {
            log::warn!("no alignment at t = {t_start}; analysing visual-inertial rows only");
            (Vec::new(), Rotation::identity())
        }
        _ => (Vec::new(), Rotation::identity()),
    };
    let rows = |x: &ingvio_core::NavState| -> Result<DMatrix<f64>> {
        let layout = x.layout();
        let mut blocks = vec![visual_rows(x)?];
        if los.len() >= 2 {
            blocks.push(single_difference_rows(x, &layout, &los, &r_w_ecef));
        }
        Ok(stack_dense(&blocks, layout.dim()))
    };

    let report = classify_degeneracy(&los, &r_w_ecef, &x.imu.position, &x.imu.velocity, &g)?;
    let vio = classify_degeneracy(&[], &r_w_ecef, &x.imu.position, &x.imu.velocity, &g)?;
    let vio_dirs = unobservable_directions(&x, &vio, &g);
    let predicted = unobservable_directions(&x, &report, &g);

    let per_image = (sc.imu.rate / sc.camera.rate).round().max(1.0) as usize;
    let start = ds.imu.partition_point(|s| s.t < x.timestamp);
    let needed = steps * per_image + 1;
    if start + needed > ds.imu.len() {
        return Err(Error::Config(format!("window of {steps} images after t = {t_start} runs past the end of the scenario")));
    }
    let dim = x.layout().dim();
    let mut phis = Vec::with_capacity(steps);
    let mut hs = vec![rows(&x)?];
    let mut phi = DMatrix::<f64>::identity(dim, dim);
    for k in 0..steps * per_image {
        let (s, next) = (&ds.imu[start + k], &ds.imu[start + k + 1]);
        let dt = next.t - s.t;
        phi = transition_matrix(&x, &s.gyro, &s.accel, dt) * phi;
        x = propagate_mean(&x, &s.gyro, &s.accel, dt);
        if (k + 1) % per_image == 0 {
            phis.push(std::mem::replace(&mut phi, DMatrix::identity(dim, dim)));
            hs.push(rows(&x)?);
        }
    }
    let o = observability_matrix(&phis, &hs)?;
    let o_norm = o.norm();
    if o_norm == 0.0 {
        return Err(Error::Core(ingvio_core::Error::InsufficientSamples { have: 0, need: 1 }));
    }
    let rel = |n: DVector<f64>| (&o * n).norm() / o_norm;

    // is a direction inside the predicted unobservable span?
    let in_span = |v: &DVector<f64>| -> bool {
        if predicted.ncols() == 0 {
            return false;
        }
        let q = predicted.clone().qr().q();
        let resid = v - &q * (q.transpose() * v);
        resid.norm() < 1e-8 * v.norm()
    };
    let mut candidates = Vec::new();
    for (j, name) in ["translation_x", "translation_y", "translation_z", "yaw"].iter().enumerate() {
        let n = vio_dirs.column(j).into_owned();
        candidates.push(Candidate { name: name.to_string(), predicted: in_span(&n), relative_norm: rel(n) });
    }
    if (1..3).contains(&report.null_dim) {
        for j in 0..report.null_dim {
            candidates.push(Candidate { name: format!("null_translation_{j}"), predicted: true, relative_norm: rel(predicted.column(j).into_owned()) });
        }
    }
    let q = vio_dirs.clone().qr().q();
    let smax = o.clone().singular_values().max();
    let mut restricted_spectrum: Vec<f64> = (&o * q).singular_values().iter().map(|s| s / smax).collect();
    restricted_spectrum.sort_by(|a, b| b.total_cmp(a));
    Ok(ObservabilityReport {
        t_start,
        steps,
        dim,
        satellites: los.len(),
        restricted_min: restricted_observability(&o, &vio_dirs),
        report,
        candidates,
        restricted_spectrum,
    })
}

pub fn write_report(dir: &Path, r: &ObservabilityReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut w = TableWriter::create(&dir.join(OBSERVABILITY_FILE), "observability", &["kind", "name", "predicted_unobservable", "value"])?;
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    for (k, v) in [("t_start_s", r.t_start), ("residual_gp", r.report.residual_gp), ("residual_gv", r.report.residual_gv)] {
        w.row(["window".to_string(), k.to_string(), String::new(), fmt_f64(v)])?;
    }
    for (k, v) in [("steps", r.steps), ("state_dim", r.dim), ("satellites", r.satellites), ("null_dim", r.report.null_dim)] {
        w.row(["window".to_string(), k.to_string(), String::new(), v.to_string()])?;
    }
    w.row(["window".to_string(), "yaw_unobservable".to_string(), String::new(), flag(r.report.yaw_unobservable)])?;
    for (j, b) in r.report.null_basis.iter().enumerate() {
        for (axis, v) in ["x", "y", "z"].iter().zip(b.iter()) {
            w.row(["null_basis".to_string(), format!("{j}_{axis}"), String::new(), fmt_f64(*v)])?;
        }
    }
    for c in &r.candidates {
        w.row(["direction".to_string(), c.name.clone(), flag(c.predicted), fmt_f64(c.relative_norm)])?;
    }
    for (j, s) in r.restricted_spectrum.iter().enumerate() {
        w.row(["restricted_singular".to_string(), j.to_string(), String::new(), fmt_f64(*s)])?;
    }
    w.finish()
}

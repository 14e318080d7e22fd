//! Dataset directories: `imu.csv`, `features.csv`, `gnss.csv`,
//! `calibration.csv` and the optional `groundtruth.csv`.
//!
//! Every file starts with a `# ingvio <kind> v<version>` line followed by a
//! `#` line naming the columns. Floats are written with 17 significant
//! digits so values survive the round trip unchanged. An image without
//! features is a `t_s,frame_id` row, and an empty GNSS epoch is a lone
//! `t_s` row.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord, WriterBuilder};
use ingvio_core::geometry::{Mat3, Vec3};
use ingvio_core::vision::Vec2;
use ingvio_core::gnss::{Alignment, SatelliteObservation};
use ingvio_core::propagation::ImuSample;
use ingvio_core::simulator::{Calibration, Dataset, GnssEpoch, ImageFrame, TruthSample};
use ingvio_core::{Constellation, ExtendedPose, GeodeticPoint, Pose, Rotation};
use nalgebra::{Quaternion, UnitQuaternion};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const IMU_FILE: &str = "imu.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const GNSS_FILE: &str = "gnss.csv";
pub const TRUTH_FILE: &str = "groundtruth.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";

const IMU_COLS: &[&str] = &["t_s", "wx", "wy", "wz", "ax", "ay", "az"];
const FEATURE_COLS: &[&str] = &["t_s", "frame_id", "cam", "feature_id", "u", "v"];
const GNSS_COLS: &[&str] = &[
    "t_s", "constellation", "sat_id", "px", "py", "pz", "vx", "vy", "vz", "pseudorange_m", "rangerate_mps", "sat_clk_m", "sat_clkdrift_mps", "delay_m",
];
/// The trailing angular rate and acceleration columns are optional on read.
const TRUTH_COLS: &[&str] = &[
    "t_s", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz", "clk_gps_m", "clk_bds_m", "clk_gal_m", "clk_glo_m",
    "clkdrift_mps", "wx", "wy", "wz", "acc_x", "acc_y", "acc_z",
];
const TRUTH_REQUIRED: usize = 22;

/// Round-trip exact float text.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct TableWriter {
    path: PathBuf,
    inner: csv::Writer<fs::File>,
}

impl TableWriter {
    pub fn create(path: &Path, kind: &str, columns: &[&str]) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(Error::io(path))?;
        writeln!(file, "# ingvio {kind} v{SCHEMA_VERSION}").map_err(Error::io(path))?;
        writeln!(file, "# {}", columns.join(",")).map_err(Error::io(path))?;
        let inner = WriterBuilder::new().flexible(true).from_writer(file);
        Ok(Self { path: path.to_path_buf(), inner })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(|e| Error::dataset(&self.path, e.to_string()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(Error::io(&self.path))
    }
}

/// Data rows of a table with their 1-based line numbers.
pub struct Table {
    pub path: PathBuf,
    pub rows: Vec<(u64, StringRecord)>,
}

impl Table {
    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let first = text.lines().next().unwrap_or("");
        let version = first
            .strip_prefix(&format!("# ingvio {kind} v"))
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Parse { path: path.into(), line: 1, msg: format!("expected header '# ingvio {kind} v{SCHEMA_VERSION}'") })?;
        if version != SCHEMA_VERSION {
            return Err(Error::Parse { path: path.into(), line: 1, msg: format!("unsupported schema version {version}") });
        }
        let mut reader = ReaderBuilder::new().has_headers(false).flexible(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse { path: path.into(), line: e.position().map_or(0, |p| p.line()), msg: e.to_string() })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self { path: path.into(), rows })
    }

    pub fn error(&self, line: u64, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.clone(), line, msg: msg.into() }
    }

    pub fn field<T: std::str::FromStr>(&self, line: u64, rec: &StringRecord, i: usize, name: &str) -> Result<T> {
        let s = rec.get(i).ok_or_else(|| self.error(line, format!("missing column {name}")))?;
        s.parse().map_err(|_| self.error(line, format!("bad {name}: {s:?}")))
    }

    pub fn floats<const N: usize>(&self, line: u64, rec: &StringRecord, from: usize, names: &[&str]) -> Result<[f64; N]> {
        let mut out = [0.0f64; N];
        for (k, v) in out.iter_mut().enumerate() {
            *v = self.field(line, rec, from + k, names[from + k])?;
            if !v.is_finite() {
                return Err(self.error(line, format!("non-finite {}", names[from + k])));
            }
        }
        Ok(out)
    }

    fn expect_len(&self, line: u64, rec: &StringRecord, allowed: &[usize]) -> Result<()> {
        if allowed.contains(&rec.len()) {
            Ok(())
        } else {
            Err(self.error(line, format!("expected {} fields, found {}", allowed.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" or "), rec.len())))
        }
    }
}

fn vec3(a: &[f64]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn push_vec(out: &mut Vec<String>, v: &Vec3) {
    out.extend(v.iter().map(|x| fmt_f64(*x)));
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;

    let mut w = TableWriter::create(&dir.join(IMU_FILE), "imu", IMU_COLS)?;
    for s in &ds.imu {
        let mut row = vec![fmt_f64(s.t)];
        push_vec(&mut row, &s.gyro);
        push_vec(&mut row, &s.accel);
        w.row(&row)?;
    }
    w.finish()?;

    let mut w = TableWriter::create(&dir.join(FEATURES_FILE), "features", FEATURE_COLS)?;
    for f in &ds.images {
        if f.features.is_empty() {
            w.row([fmt_f64(f.t), f.frame_id.to_string()])?;
        }
        for (id, cam, uv) in &f.features {
            w.row([fmt_f64(f.t), f.frame_id.to_string(), cam.to_string(), id.to_string(), fmt_f64(uv.x), fmt_f64(uv.y)])?;
        }
    }
    w.finish()?;

    let mut w = TableWriter::create(&dir.join(GNSS_FILE), "gnss", GNSS_COLS)?;
    for e in &ds.gnss {
        if e.observations.is_empty() {
            w.row([fmt_f64(e.t)])?;
        }
        for o in &e.observations {
            let mut row = vec![fmt_f64(e.t), o.constellation.index().to_string(), o.sat_id.to_string()];
            push_vec(&mut row, &o.position);
            push_vec(&mut row, &o.velocity);
            row.extend([o.pseudorange, o.range_rate, o.sat_clock, o.sat_clock_drift, o.delay].map(fmt_f64));
            w.row(&row)?;
        }
    }
    w.finish()?;

    if let Some(truth) = &ds.truth {
        let mut w = TableWriter::create(&dir.join(TRUTH_FILE), "groundtruth", TRUTH_COLS)?;
        for s in truth {
            let q = UnitQuaternion::from_rotation_matrix(&s.state.rotation);
            let mut row = vec![fmt_f64(s.t)];
            push_vec(&mut row, &s.state.position);
            row.extend([q.w, q.i, q.j, q.k].map(fmt_f64));
            push_vec(&mut row, &s.state.velocity);
            push_vec(&mut row, &s.gyro_bias);
            push_vec(&mut row, &s.accel_bias);
            row.extend(s.clock_biases.map(fmt_f64));
            row.push(fmt_f64(s.clock_drift));
            push_vec(&mut row, &s.omega);
            push_vec(&mut row, &s.acceleration);
            w.row(&row)?;
        }
        w.finish()?;
    } else if dir.join(TRUTH_FILE).exists() {
        fs::remove_file(dir.join(TRUTH_FILE)).map_err(Error::io(dir.join(TRUTH_FILE)))?;
    }

    write_calibration(&dir.join(CALIBRATION_FILE), &ds.calibration)
}

fn write_calibration(path: &Path, c: &Calibration) -> Result<()> {
    let mut w = TableWriter::create(path, "calibration", &["key", "values..."])?;
    let m = c.extrinsics.rotation.matrix();
    let mut row = vec!["extrinsics_rotation".to_string()];
    // row-major
    for i in 0..3 {
        for j in 0..3 {
            row.push(fmt_f64(m[(i, j)]));
        }
    }
    w.row(&row)?;
    let mut row = vec!["extrinsics_translation".to_string()];
    push_vec(&mut row, &c.extrinsics.translation);
    w.row(&row)?;
    w.row(["stereo", if c.stereo { "1" } else { "0" }])?;
    w.row(["baseline".to_string(), fmt_f64(c.baseline)])?;
    w.row(["feature_sigma".to_string(), fmt_f64(c.feature_sigma)])?;
    if let Some(a) = &c.alignment {
        w.row(["alignment_origin".to_string(), fmt_f64(a.origin.latitude), fmt_f64(a.origin.longitude), fmt_f64(a.origin.height)])?;
        w.row(["alignment_yaw".to_string(), fmt_f64(a.yaw)])?;
        let mut row = vec!["alignment_translation".to_string()];
        push_vec(&mut row, &a.translation);
        w.row(&row)?;
    }
    w.finish()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::dataset(dir, "not a directory"));
    }
    let calibration = read_calibration(&dir.join(CALIBRATION_FILE))?;
    let imu = read_imu(&dir.join(IMU_FILE))?;
    let images = read_features(&dir.join(FEATURES_FILE))?;
    let gnss = read_gnss(&dir.join(GNSS_FILE))?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() { Some(read_truth(&truth_path)?) } else { None };
    Ok(Dataset { imu, images, gnss, truth, calibration })
}

fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let t = Table::read(path, "imu")?;
    t.rows
        .iter()
        .map(|(line, rec)| {
            t.expect_len(*line, rec, &[IMU_COLS.len()])?;
            let v: [f64; 7] = t.floats(*line, rec, 0, IMU_COLS)?;
            Ok(ImuSample { t: v[0], gyro: vec3(&v[1..4]), accel: vec3(&v[4..7]) })
        })
        .collect()
}

fn read_features(path: &Path) -> Result<Vec<ImageFrame>> {
    let t = Table::read(path, "features")?;
    let mut frames: Vec<ImageFrame> = Vec::new();
    for (line, rec) in &t.rows {
        t.expect_len(*line, rec, &[2, FEATURE_COLS.len()])?;
        let time: f64 = t.field(*line, rec, 0, "t_s")?;
        let frame_id: u64 = t.field(*line, rec, 1, "frame_id")?;
        let same = frames.last().is_some_and(|f| f.frame_id == frame_id);
        if same && frames.last().unwrap().t != time {
            return Err(t.error(*line, format!("frame {frame_id} has two timestamps")));
        }
        if !same {
            frames.push(ImageFrame { t: time, frame_id, features: Vec::new() });
        }
        if rec.len() == 2 {
            continue;
        }
        let cam: u8 = t.field(*line, rec, 2, "cam")?;
        if cam > 1 {
            return Err(t.error(*line, format!("camera index {cam} is not 0 or 1")));
        }
        let id: u64 = t.field(*line, rec, 3, "feature_id")?;
        let uv: [f64; 2] = t.floats(*line, rec, 4, FEATURE_COLS)?;
        frames.last_mut().unwrap().features.push((id, cam, Vec2::new(uv[0], uv[1])));
    }
    Ok(frames)
}

fn read_gnss(path: &Path) -> Result<Vec<GnssEpoch>> {
    let t = Table::read(path, "gnss")?;
    let mut epochs: Vec<GnssEpoch> = Vec::new();
    for (line, rec) in &t.rows {
        t.expect_len(*line, rec, &[1, GNSS_COLS.len()])?;
        let time: f64 = t.field(*line, rec, 0, "t_s")?;
        if epochs.last().is_none_or(|e| e.t != time) {
            epochs.push(GnssEpoch { t: time, observations: Vec::new() });
        }
        if rec.len() == 1 {
            continue;
        }
        let c: usize = t.field(*line, rec, 1, "constellation")?;
        let constellation = Constellation::from_index(c).ok_or_else(|| t.error(*line, format!("constellation {c} is not in 0..=3")))?;
        let sat_id: u32 = t.field(*line, rec, 2, "sat_id")?;
        let v: [f64; 11] = t.floats(*line, rec, 3, GNSS_COLS)?;
        epochs.last_mut().unwrap().observations.push(SatelliteObservation {
            constellation,
            sat_id,
            position: vec3(&v[0..3]),
            velocity: vec3(&v[3..6]),
            pseudorange: v[6],
            range_rate: v[7],
            sat_clock: v[8],
            sat_clock_drift: v[9],
            delay: v[10],
        });
    }
    Ok(epochs)
}

fn read_truth(path: &Path) -> Result<Vec<TruthSample>> {
    let t = Table::read(path, "groundtruth")?;
    t.rows
        .iter()
        .map(|(line, rec)| {
            t.expect_len(*line, rec, &[TRUTH_REQUIRED, TRUTH_COLS.len()])?;
            let v: [f64; TRUTH_REQUIRED] = t.floats(*line, rec, 0, TRUTH_COLS)?;
            let q = Quaternion::new(v[4], v[5], v[6], v[7]);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(t.error(*line, "quaternion is not unit length"));
            }
            let rotation: Rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
            let (omega, acceleration) = if rec.len() == TRUTH_COLS.len() {
                let x: [f64; 6] = t.floats(*line, rec, TRUTH_REQUIRED, TRUTH_COLS)?;
                (vec3(&x[0..3]), vec3(&x[3..6]))
            } else {
                (Vec3::zeros(), Vec3::zeros())
            };
            Ok(TruthSample {
                t: v[0],
                state: ExtendedPose::new(rotation, vec3(&v[1..4]), vec3(&v[8..11])),
                omega,
                acceleration,
                gyro_bias: vec3(&v[11..14]),
                accel_bias: vec3(&v[14..17]),
                clock_biases: [v[17], v[18], v[19], v[20]],
                clock_drift: v[21],
            })
        })
        .collect()
}

fn read_calibration(path: &Path) -> Result<Calibration> {
    let t = Table::read(path, "calibration")?;
    let mut rot = None;
    let mut trans = None;
    let (mut stereo, mut baseline, mut sigma) = (None, None, None);
    let (mut origin, mut yaw, mut at) = (None, None, None);
    let values = |line: u64, rec: &StringRecord, n: usize| -> Result<Vec<f64>> {
        t.expect_len(line, rec, &[n + 1])?;
        let names: Vec<String> = (0..=n).map(|i| format!("{}[{}]", &rec[0], i)).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        (1..=n)
            .map(|i| {
                let x: f64 = t.field(line, rec, i, names[i])?;
                if x.is_finite() { Ok(x) } else { Err(t.error(line, format!("non-finite {}", names[i]))) }
            })
            .collect()
    };
    for (line, rec) in &t.rows {
        let line = *line;
        match rec.get(0).unwrap_or("") {
            "extrinsics_rotation" => rot = Some((line, values(line, rec, 9)?)),
            "extrinsics_translation" => trans = Some(vec3(&values(line, rec, 3)?)),
            "stereo" => stereo = Some(values(line, rec, 1)?[0] != 0.0),
            "baseline" => baseline = Some(values(line, rec, 1)?[0]),
            "feature_sigma" => sigma = Some(values(line, rec, 1)?[0]),
            "alignment_origin" => origin = Some((line, values(line, rec, 3)?)),
            "alignment_yaw" => yaw = Some(values(line, rec, 1)?[0]),
            "alignment_translation" => at = Some(vec3(&values(line, rec, 3)?)),
            other => return Err(t.error(line, format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::dataset(path, format!("missing {k}"));
    let (line, r) = rot.ok_or_else(|| missing("extrinsics_rotation"))?;
    let m = Mat3::from_row_slice(&r);
    if (m.transpose() * m - Mat3::identity()).amax() > 1e-9 || m.determinant() < 0.0 {
        return Err(t.error(line, "extrinsic rotation is not orthonormal"));
    }
    let extrinsics = Pose::new(Rotation::from_matrix_unchecked(m), trans.ok_or_else(|| missing("extrinsics_translation"))?);
    let alignment = match (origin, yaw, at) {
        (None, None, None) => None,
        (Some((line, o)), Some(yaw), Some(tr)) => {
            let origin = GeodeticPoint::new(o[0], o[1], o[2]).map_err(|e| t.error(line, e.to_string()))?;
            Some(Alignment::new(origin, yaw, tr))
        }
        _ => return Err(Error::dataset(path, "alignment needs origin, yaw and translation")),
    };
    let feature_sigma = sigma.ok_or_else(|| missing("feature_sigma"))?;
    if !(feature_sigma > 0.0) {
        return Err(Error::dataset(path, "feature_sigma must be positive"));
    }
    Ok(Calibration {
        extrinsics,
        stereo: stereo.ok_or_else(|| missing("stereo"))?,
        baseline: baseline.ok_or_else(|| missing("baseline"))?,
        feature_sigma,
        alignment,
    })
}

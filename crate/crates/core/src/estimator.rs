//! The online estimation loop: IMU propagation, image updates, soft-synced
//! GNSS updates and world/ECEF alignment.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{rot_z, ExtendedPose, Pose, Rotation, Vec3};
use crate::gnss::{gnss_update, initialize_alignment_with_covariance, spp_solve_weighted, Alignment, AlignmentConfig, GnssConfig, SppSolution, SPP_MAX_GDOP};
use crate::metrics::{imu_error, imu_nees, yaw_error, yaw_variance, ErrorRecord};
use crate::propagation::{Discretization, ImuSample, Mat15, NoiseSpec, Propagator};
use crate::simulator::{Calibration, Dataset, GnssEpoch, ImageFrame, TruthSample};
use crate::state::{augment_clone, boxplus, check_covariance, symmetrize, Covariance, InitialCovariance, NavState, IMU_DIM, IMU_POS, IMU_ROT};
use crate::vision::{VisionConfig, VisualUpdater};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vio,
    #[default]
    Gvio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mode: Mode,
    /// Use right-camera observations when the dataset has them.
    pub stereo: bool,
    pub estimate_extrinsics: bool,
    /// Largest GNSS-to-image offset for pairing, s.
    pub soft_sync: f64,
    pub noise: NoiseSpec,
    pub discretization: Discretization,
    pub vision: VisionConfig,
    pub gnss: GnssConfig,
    pub alignment: AlignmentConfig,
    pub initial: InitialCovariance,
    /// Record the yaw information variance before every image.
    pub track_yaw_variance: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gvio,
            stereo: true,
            estimate_extrinsics: false,
            soft_sync: 0.05,
            noise: NoiseSpec::default(),
            discretization: Discretization::default(),
            vision: VisionConfig::default(),
            gnss: GnssConfig::default(),
            alignment: AlignmentConfig::default(),
            initial: InitialCovariance {
                orientation: 1e-4,
                position: 1e-2,
                velocity: 1e-2,
                gyro_bias: 1e-6,
                accel_bias: 1e-4,
                extrinsics: 1e-6,
            },
            track_yaw_variance: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.soft_sync >= 0.0) {
            return Err(Error::InvalidConfig("soft_sync must be non-negative"));
        }
        if self.vision.max_clones < 2 {
            return Err(Error::InvalidConfig("max_clones must be at least 2"));
        }
        if !(self.vision.sigma > 0.0 && self.gnss.sigma_pseudorange > 0.0 && self.gnss.sigma_range_rate > 0.0) {
            return Err(Error::InvalidConfig("measurement sigmas must be positive"));
        }
        if !(0.0..1.0).contains(&self.gnss.chi2_confidence) || !(0.0..1.0).contains(&self.vision.chi2_confidence) {
            return Err(Error::InvalidConfig("chi2 confidence must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Image,
    Marginalization,
    SlamInit,
    VisualGating,
    Gnss,
    GnssGating,
    ClockAdded,
    ClockRemoved,
    AlignmentDeferred,
    AlignmentInitialized,
    AlignmentRefined,
    Skipped,
    Warning,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Marginalization => "marginalization",
            Self::SlamInit => "slam_init",
            Self::VisualGating => "visual_gating",
            Self::Gnss => "gnss",
            Self::GnssGating => "gnss_gating",
            Self::ClockAdded => "clock_added",
            Self::ClockRemoved => "clock_removed",
            Self::AlignmentDeferred => "alignment_deferred",
            Self::AlignmentInitialized => "alignment_initialized",
            Self::AlignmentRefined => "alignment_refined",
            Self::Skipped => "skipped",
            Self::Warning => "warning",
        }
    }
}

/// One line of the event log. `t` is the measurement time, `t_filter` the
/// filter time it was processed at (they differ for soft-synced GNSS).
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub t: f64,
    pub t_filter: f64,
    pub kind: EventKind,
    pub detail: String,
}

/// Filter output after each image (and the GNSS epoch paired with it).
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRecord {
    pub t: f64,
    pub pose: ExtendedPose,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    pub imu_covariance: Mat15,
    /// Information-form yaw variance before the image was cloned.
    pub yaw_variance: Option<f64>,
    pub clones: usize,
    pub landmarks: usize,
    pub clocks: usize,
    pub aligned: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub estimates: Vec<EstimateRecord>,
    pub errors: Vec<ErrorRecord>,
    pub events: Vec<LogEntry>,
    pub alignment: Option<Alignment>,
    pub state: NavState,
    pub covariance: Covariance,
}

/// Starting point of a run.
#[derive(Clone, Debug)]
pub struct InitialState {
    pub state: NavState,
    pub covariance: Covariance,
}

impl InitialState {
    /// Truth at `t` perturbed by one draw from the prior covariance.
    pub fn from_truth(truth: &TruthSample, calibration: &Calibration, cfg: &EstimatorConfig, seed: u64) -> Result<Self> {
        let mut x = NavState::new(truth.t, truth.state, calibration.extrinsics, cfg.estimate_extrinsics);
        x.gyro_bias = truth.gyro_bias;
        x.accel_bias = truth.accel_bias;
        let p = cfg.initial.build(&x);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(7);
        let chol = p.clone().cholesky().ok_or(Error::NotPositiveSemiDefinite)?;
        let z = DVector::from_fn(p.nrows(), |_, _| r.sample::<f64, _>(StandardNormal));
        let state = boxplus(&x, &(chol.l() * z))?;
        Ok(Self { state, covariance: p })
    }

    /// Level attitude from the first accelerometer sample, at rest at the origin.
    pub fn from_gravity(imu: &ImuSample, calibration: &Calibration, cfg: &EstimatorConfig) -> Result<Self> {
        let rot = Rotation::rotation_between(&imu.accel, &Vec3::z()).unwrap_or_else(|| Rotation::from_axis_angle(&Vec3::x_axis(), core::f64::consts::PI));
        let x = NavState::new(imu.t, ExtendedPose::new(rot, Vec3::zeros(), Vec3::zeros()), calibration.extrinsics, cfg.estimate_extrinsics);
        let covariance = cfg.initial.build(&x);
        Ok(Self { state: x, covariance })
    }
}

/// World-to-world map from the true world frame into the estimator's frame.
pub fn truth_to_estimate_frame(true_alignment: Option<&Alignment>, est_alignment: Option<&Alignment>) -> Pose {
    match (true_alignment, est_alignment) {
        (Some(t), Some(e)) => e.t_w_ecef.inverse().compose(&t.t_w_ecef),
        _ => Pose::identity(),
    }
}

/// Online filter. Feed sensor data in time order through the `process_*`
/// methods, or use [`run`] for a whole dataset.
pub struct Estimator {
    pub config: EstimatorConfig,
    pub state: NavState,
    pub covariance: Covariance,
    pub alignment: Option<Alignment>,
    pub events: Vec<LogEntry>,
    pub yaw_variance: Option<f64>,
    propagator: Propagator,
    vision: VisualUpdater,
    last_imu: Option<ImuSample>,
    pairs_vio: Vec<Vec3>,
    pairs_spp: Vec<Vec3>,
    pairs_cov: Vec<Matrix3<f64>>,
}

const MAX_ALIGNMENT_PAIRS: usize = 1000;

impl Estimator {
    pub fn new(config: EstimatorConfig, calibration: &Calibration, initial: InitialState) -> Result<Self> {
        let mut config = config;
        config.validate()?;
        config.vision.sigma = calibration.feature_sigma;
        config.vision.stereo_baseline = calibration.baseline;
        initial.state.check_invariants()?;
        check_covariance(&initial.covariance)?;
        Ok(Self {
            propagator: Propagator::new(config.noise, config.discretization),
            vision: VisualUpdater::new(config.vision),
            config,
            state: initial.state,
            covariance: initial.covariance,
            alignment: None,
            events: Vec::new(),
            yaw_variance: None,
            last_imu: None,
            pairs_vio: Vec::new(),
            pairs_spp: Vec::new(),
            pairs_cov: Vec::new(),
        })
    }

    fn log(&mut self, t: f64, kind: EventKind, detail: String) {
        self.events.push(LogEntry { t, t_filter: self.state.timestamp, kind, detail });
    }

    /// Advance the mean to `t` with the held IMU sample. Covariance steps are
    /// accumulated and applied by [`Estimator::flush`].
    pub fn propagate_to(&mut self, t: f64) {
        if let Some(s) = self.last_imu {
            let dt = t - self.state.timestamp;
            if dt > 0.0 {
                self.propagator.step(&mut self.state, &s.gyro, &s.accel, dt);
                // keep the clock exact against accumulated rounding
                self.state.timestamp = t;
            }
        }
    }

    pub fn flush(&mut self) {
        self.propagator.flush(&mut self.covariance);
    }

    pub fn process_imu(&mut self, s: &ImuSample) -> Result<()> {
        if s.t < self.state.timestamp {
            return Err(Error::Unsorted("imu"));
        }
        self.propagate_to(s.t);
        self.last_imu = Some(*s);
        Ok(())
    }

    /// Propagate to the image time, clone, and run the visual update.
    pub fn process_image(&mut self, frame: &ImageFrame) -> Result<()> {
        if frame.t < self.state.timestamp {
            return Err(Error::Unsorted("images"));
        }
        self.propagate_to(frame.t);
        self.flush();
        if self.config.track_yaw_variance {
            self.yaw_variance = yaw_variance(&self.state, &self.covariance).ok();
        }
        self.image_update(frame)
    }

    /// Clone and visual update at the current filter time (already propagated).
    pub fn image_update(&mut self, frame: &ImageFrame) -> Result<()> {
        augment_clone(&mut self.state, &mut self.covariance, frame.frame_id)?;
        let features: Vec<_> = if self.config.stereo { frame.features.clone() } else { frame.features.iter().copied().filter(|f| f.1 == 0).collect() };
        let report = self.vision.process_image(&mut self.state, &mut self.covariance, frame.frame_id, &features)?;
        if self.state.clones.len() > self.config.vision.max_clones + 1 {
            return Err(Error::InvalidConfig("clone window exceeded its bound"));
        }
        let t = frame.t;
        self.log(
            t,
            EventKind::Image,
            format!("frame={} features={} msckf={} slam_updated={} clones={}", frame.frame_id, features.len(), report.msckf_features, report.slam_updated, self.state.clones.len()),
        );
        if report.msckf_rejected + report.slam_rejected > 0 {
            self.log(t, EventKind::VisualGating, format!("msckf_rejected={} slam_rejected={}", report.msckf_rejected, report.slam_rejected));
        }
        if report.slam_initialized + report.slam_dropped > 0 {
            self.log(t, EventKind::SlamInit, format!("initialized={} dropped={}", report.slam_initialized, report.slam_dropped));
        }
        if !report.marginalized.is_empty() {
            self.log(t, EventKind::Marginalization, format!("frames={:?} anchor_changes={}", report.marginalized, report.anchor_changes));
        }
        Ok(())
    }

    /// GNSS epoch processed at filter time `t_filter` (the paired image time
    /// under soft sync, otherwise the epoch time).
    pub fn process_gnss(&mut self, epoch: &GnssEpoch, t_filter: f64) -> Result<()> {
        if self.config.mode == Mode::Vio {
            return Ok(());
        }
        if t_filter < self.state.timestamp {
            return Err(Error::Unsorted("gnss"));
        }
        self.propagate_to(t_filter);
        self.flush();
        self.gnss_step(epoch)
    }

    /// Alignment bookkeeping and the GNSS update at the current filter time.
    pub fn gnss_step(&mut self, epoch: &GnssEpoch) -> Result<()> {
        let t = epoch.t;
        let needs_pair = match &self.alignment {
            None => true,
            Some(a) => !a.frozen && self.pairs_vio.len() < self.config.alignment.refine_samples,
        };
        let missing_clock = epoch.observations.iter().any(|o| !self.state.clock_biases.contains_key(&o.constellation));
        let spp: Option<SppSolution> = if needs_pair || missing_clock { spp_solve_weighted(&epoch.observations, Some(&self.config.gnss)).ok().filter(|s| s.gdop < SPP_MAX_GDOP) } else { None };

        if needs_pair {
            if let Some(s) = &spp {
                if self.pairs_vio.len() == MAX_ALIGNMENT_PAIRS {
                    self.pairs_vio.remove(0);
                    self.pairs_spp.remove(0);
                    self.pairs_cov.remove(0);
                }
                self.pairs_vio.push(self.state.imu.position);
                self.pairs_spp.push(s.position);
                self.pairs_cov.push(s.position_covariance);
                self.try_alignment(t)?;
            }
        }
        let Some(align) = self.alignment else {
            return Ok(());
        };
        let report = gnss_update(&mut self.state, &mut self.covariance, &epoch.observations, &align, &self.config.gnss, spp.as_ref())?;
        for c in &report.clocks_added {
            self.log(t, EventKind::ClockAdded, format!("{c:?}"));
        }
        for c in &report.clocks_removed {
            self.log(t, EventKind::ClockRemoved, format!("{c:?}"));
        }
        if report.drift_added {
            self.log(t, EventKind::ClockAdded, "drift".into());
        }
        if report.drift_removed {
            self.log(t, EventKind::ClockRemoved, "drift".into());
        }
        if report.gated > 0 {
            self.log(t, EventKind::GnssGating, format!("gated={}", report.gated));
        }
        self.log(t, EventKind::Gnss, format!("satellites={} used={}", report.satellites, report.used));
        Ok(())
    }

    fn try_alignment(&mut self, t: f64) -> Result<()> {
        let refining = self.alignment.is_some();
        match initialize_alignment_with_covariance(&self.pairs_vio, &self.pairs_spp, &self.pairs_cov, &self.config.alignment) {
            Ok(mut a) => {
                if self.config.alignment.refine && self.pairs_vio.len() >= self.config.alignment.refine_samples {
                    a.frozen = true;
                }
                if refining {
                    self.log(t, EventKind::AlignmentRefined, format!("pairs={} yaw={:.6}", self.pairs_vio.len(), a.yaw));
                } else {
                    self.gauge_fix(&a)?;
                    self.log(t, EventKind::AlignmentInitialized, format!("pairs={} yaw={:.6} sigma_yaw={:.3e}", self.pairs_vio.len(), a.yaw, a.covariance[(0, 0)].sqrt()));
                }
                self.alignment = Some(a);
            }
            Err(Error::InsufficientSamples { .. }) => {}
            Err(e @ Error::InsufficientMotion { .. }) => {
                if !refining {
                    self.log(t, EventKind::AlignmentDeferred, format!("{e}"));
                }
            }
            Err(e) => self.log(t, EventKind::Warning, format!("alignment fit failed: {e}")),
        }
        Ok(())
    }

    /// Replace the covariance along the yaw/translation gauge directions by
    /// the alignment fit covariance: `P ← (I − N H) P (I − N H)ᵀ + N Σ Nᵀ`
    /// with `H N = I`.
    fn gauge_fix(&mut self, a: &Alignment) -> Result<()> {
        let n_dim = self.covariance.nrows();
        let (n, h) = gauge_basis(&self.state, a.yaw);
        let a_mat = DMatrix::identity(n_dim, n_dim) - &n * &h;
        let sigma = DMatrix::from_column_slice(4, 4, a.covariance.as_slice());
        let mut p = &a_mat * &self.covariance * a_mat.transpose() + &n * sigma * n.transpose();
        symmetrize(&mut p);
        check_covariance(&p)?;
        self.covariance = p;
        Ok(())
    }

    pub fn record(&self) -> EstimateRecord {
        EstimateRecord {
            t: self.state.timestamp,
            pose: self.state.imu,
            gyro_bias: self.state.gyro_bias,
            accel_bias: self.state.accel_bias,
            imu_covariance: Mat15::from_fn(|r, c| self.covariance[(r, c)]),
            yaw_variance: self.yaw_variance,
            clones: self.state.clones.len(),
            landmarks: self.state.landmarks.len(),
            clocks: self.state.clock_biases.len(),
            aligned: self.alignment.is_some(),
        }
    }

    /// Error of the current estimate against `truth` (true world frame).
    pub fn evaluate(&self, truth: &TruthSample, true_alignment: Option<&Alignment>) -> Result<ErrorRecord> {
        let g = truth_to_estimate_frame(true_alignment, self.alignment.as_ref());
        let mapped = truth.state.left_act(&g);
        let error = imu_error(&mapped, &truth.gyro_bias, &truth.accel_bias, &self.state)?;
        let p = self.covariance.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned();
        Ok(ErrorRecord {
            t: self.state.timestamp,
            nees: imu_nees(&error, &p)?,
            position_error: mapped.position - self.state.imu.position,
            yaw_error: yaw_error(&mapped, &self.state.imu),
            error,
        })
    }
}

/// Gauge directions `N` (yaw, then world x/y/z expressed through the fitted
/// yaw) and the selector `H` of IMU yaw and ENU-aligned IMU position, `H N = I`.
pub fn gauge_basis(x: &NavState, yaw: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let layout = x.layout();
    let dim = layout.dim();
    let rz = rot_z(yaw);
    let mut n = DMatrix::zeros(dim, 4);
    for s in layout.world_rotation_slots() {
        n[(s + 2, 0)] = 1.0;
    }
    let rt = rz.inverse();
    for s in layout.world_position_slots() {
        n.view_mut((s, 1), (3, 3)).copy_from(rt.matrix());
    }
    let mut h = DMatrix::zeros(4, dim);
    h[(0, IMU_ROT + 2)] = 1.0;
    h.view_mut((1, IMU_POS), (3, 3)).copy_from(rz.matrix());
    (n, h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Item {
    Imu(usize),
    Image(usize),
    Gnss(usize),
}

impl Item {
    fn priority(self) -> u8 {
        match self {
            Item::Imu(_) => 0,
            Item::Image(_) => 1,
            Item::Gnss(_) => 2,
        }
    }
}

fn check_sorted(ts: impl Iterator<Item = f64>, what: &'static str) -> Result<()> {
    let mut last = f64::NEG_INFINITY;
    for t in ts {
        if !(t >= last) {
            return Err(Error::Unsorted(what));
        }
        last = t;
    }
    Ok(())
}

/// Filter time for each GNSS epoch: the nearest image time when within
/// `tol`, otherwise the epoch's own time.
pub fn soft_sync(images: &[ImageFrame], gnss: &[GnssEpoch], tol: f64) -> Vec<f64> {
    gnss.iter()
        .map(|e| {
            let i = images.partition_point(|f| f.t < e.t);
            let mut best: Option<f64> = None;
            for j in [i.wrapping_sub(1), i] {
                if let Some(f) = images.get(j) {
                    let d = (f.t - e.t).abs();
                    if d <= tol && best.is_none_or(|b| d < (b - e.t).abs()) {
                        best = Some(f.t);
                    }
                }
            }
            best.unwrap_or(e.t)
        })
        .collect()
}

/// Merged processing order of every sensor stream.
fn schedule(ds: &Dataset, gnss_t: &[f64]) -> Vec<(f64, Item)> {
    let mut items: Vec<(f64, Item)> = Vec::with_capacity(ds.imu.len() + ds.images.len() + ds.gnss.len());
    items.extend(ds.imu.iter().enumerate().map(|(i, s)| (s.t, Item::Imu(i))));
    items.extend(ds.images.iter().enumerate().map(|(i, f)| (f.t, Item::Image(i))));
    items.extend(gnss_t.iter().enumerate().map(|(i, t)| (*t, Item::Gnss(i))));
    // stable: equal keys keep stream order
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.priority().cmp(&b.1.priority())));
    items
}

/// Run the filter over a dataset. Estimates (and errors, when truth is
/// present) are recorded after each image together with a GNSS epoch paired
/// to it.
pub fn run(ds: &Dataset, cfg: &EstimatorConfig, initial: InitialState) -> Result<RunResult> {
    check_sorted(ds.imu.iter().map(|s| s.t), "imu")?;
    check_sorted(ds.images.iter().map(|f| f.t), "images")?;
    check_sorted(ds.gnss.iter().map(|e| e.t), "gnss")?;
    if ds.imu.is_empty() {
        return Err(Error::InsufficientSamples { have: 0, need: 1 });
    }
    let mut est = Estimator::new(cfg.clone(), &ds.calibration, initial)?;
    let t0 = est.state.timestamp;
    let use_gnss = cfg.mode == Mode::Gvio;
    let gnss_t = if use_gnss { soft_sync(&ds.images, &ds.gnss, cfg.soft_sync) } else { Vec::new() };
    let items = schedule(ds, &gnss_t);

    let mut estimates = Vec::new();
    let mut errors = Vec::new();
    let mut pending: Option<f64> = None;
    let true_alignment = ds.calibration.alignment.as_ref();

    let emit = |est: &Estimator, estimates: &mut Vec<EstimateRecord>, errors: &mut Vec<ErrorRecord>| -> Result<()> {
        estimates.push(est.record());
        if let Some(truth) = ds.truth_at(est.state.timestamp) {
            errors.push(est.evaluate(&truth, true_alignment)?);
        }
        Ok(())
    };

    for (t, item) in items {
        if let Some(tp) = pending {
            let same_epoch = matches!(item, Item::Gnss(_)) && t == tp;
            if !same_epoch {
                emit(&est, &mut estimates, &mut errors)?;
                pending = None;
            }
        }
        if t < t0 {
            if !matches!(item, Item::Imu(_)) {
                est.events.push(LogEntry { t, t_filter: t0, kind: EventKind::Skipped, detail: "before first imu sample".into() });
            }
            continue;
        }
        match item {
            Item::Imu(i) => {
                if est.last_imu.is_none() || ds.imu[i].t >= est.state.timestamp {
                    est.process_imu(&ds.imu[i])?;
                }
            }
            Item::Image(i) => {
                est.process_image(&ds.images[i])?;
                pending = Some(t);
            }
            Item::Gnss(i) => est.process_gnss(&ds.gnss[i], t)?,
        }
    }
    if pending.is_some() {
        emit(&est, &mut estimates, &mut errors)?;
    }
    if use_gnss && est.alignment.is_none() {
        log::warn!("GNSS alignment was never achieved; the run used visual-inertial updates only");
        let t = est.state.timestamp;
        est.log(t, EventKind::Warning, "alignment never achieved, continued as VIO".into());
    }
    Ok(RunResult { estimates, errors, events: est.events, alignment: est.alignment, state: est.state, covariance: est.covariance })
}

/// [`run`] starting from the dataset truth perturbed by the prior, or from a
/// gravity-levelled rest state when no truth is available.
pub fn run_dataset(ds: &Dataset, cfg: &EstimatorConfig, seed: u64) -> Result<RunResult> {
    let first = ds.imu.first().ok_or(Error::InsufficientSamples { have: 0, need: 1 })?;
    let initial = match ds.truth_at(first.t) {
        Some(truth) => InitialState::from_truth(&truth, &ds.calibration, cfg, seed)?,
        None => InitialState::from_gravity(first, &ds.calibration, cfg)?,
    };
    run(ds, cfg, initial)
}

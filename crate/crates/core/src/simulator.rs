//! Synthetic scenarios: analytic trajectories, IMU, feature tracks and raw
//! GNSS observations generated from the same models the filter uses.
//!
//! Generation is a pure function of [`ScenarioConfig`] (including its seed).
//! Each noise source draws from its own ChaCha stream, so toggling one
//! sensor does not change the realization of another.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::geometry::{enu_rotation, exp_so3, geodetic_to_ecef, rot_z, ExtendedPose, GeodeticPoint, Mat3, Pose, Rotation, Vec3};
use crate::gnss::{elevation, Alignment, GnssConfig, SatelliteObservation};
use crate::propagation::{ImuSample, NoiseSpec};
use crate::state::{Constellation, FeatureId, FrameId};
use crate::vision::{camera_pose, Vec2};
use crate::{gravity_vector, Error, Result};

/// Orbit radius of the simulated satellites, m.
pub const ORBIT_RADIUS: f64 = 26.6e6;
const GM: f64 = 3.986_004_418e14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static { position: [f64; 3] },
    Line { speed: f64, heading_deg: f64, altitude: f64 },
    /// Counter-clockwise circle about the world origin.
    Circle { radius: f64, speed: f64, altitude: f64 },
    /// Lemniscate `x = r sin ωt`, `y = r/2 sin 2ωt` with a vertical wave.
    Figure8 { radius: f64, period: f64, altitude: f64, vertical_amplitude: f64 },
    /// Climbing circle with a constant body pitch.
    Helix { radius: f64, speed: f64, climb_rate: f64, pitch_deg: f64, altitude: f64 },
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::Figure8 { radius: 20.0, period: 30.0, altitude: 5.0, vertical_amplitude: 1.0 }
    }
}

/// Truth kinematics at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub state: ExtendedPose,
    /// World frame, m/s².
    pub acceleration: Vec3,
    /// Body frame, rad/s.
    pub omega: Vec3,
}

fn heading_attitude(psi: f64, psi_dot: f64, pitch: f64) -> (Rotation, Vec3) {
    let ry = Rotation::from_axis_angle(&Vec3::y_axis(), pitch);
    let r = rot_z(psi) * ry;
    (r, ry.inverse() * Vec3::new(0.0, 0.0, psi_dot))
}

/// Heading along the horizontal velocity and its rate.
fn heading_of(v: &Vec3, a: &Vec3) -> (f64, f64) {
    let s = v.x * v.x + v.y * v.y;
    if s < 1e-18 {
        return (0.0, 0.0);
    }
    (v.y.atan2(v.x), (v.x * a.y - v.y * a.x) / s)
}

pub fn eval_trajectory(traj: &Trajectory, duration: f64, t: f64) -> Result<Kinematics> {
    if !(0.0..=duration).contains(&t) {
        return Err(Error::TimeOutOfRange { t, duration });
    }
    let (p, v, a, pitch) = match *traj {
        Trajectory::Static { position } => {
            let p = Vec3::from(position);
            return Ok(Kinematics { state: ExtendedPose::new(Rotation::identity(), p, Vec3::zeros()), acceleration: Vec3::zeros(), omega: Vec3::zeros() });
        }
        Trajectory::Line { speed, heading_deg, altitude } => {
            let (s, c) = heading_deg.to_radians().sin_cos();
            let v = Vec3::new(c, s, 0.0) * speed;
            (v * t + Vec3::new(0.0, 0.0, altitude), v, Vec3::zeros(), 0.0)
        }
        Trajectory::Circle { radius, speed, altitude } => {
            let w = speed / radius;
            let (s, c) = (w * t).sin_cos();
            (Vec3::new(radius * c, radius * s, altitude), Vec3::new(-s, c, 0.0) * speed, Vec3::new(-c, -s, 0.0) * (speed * w), 0.0)
        }
        Trajectory::Helix { radius, speed, climb_rate, pitch_deg, altitude } => {
            let w = speed / radius;
            let (s, c) = (w * t).sin_cos();
            (
                Vec3::new(radius * c, radius * s, altitude + climb_rate * t),
                Vec3::new(-s * speed, c * speed, climb_rate),
                Vec3::new(-c, -s, 0.0) * (speed * w),
                pitch_deg.to_radians(),
            )
        }
        Trajectory::Figure8 { radius, period, altitude, vertical_amplitude: h } => {
            let w = 2.0 * core::f64::consts::PI / period;
            let (s1, c1) = (w * t).sin_cos();
            let (s2, c2) = (2.0 * w * t).sin_cos();
            (
                Vec3::new(radius * s1, 0.5 * radius * s2, altitude + h * s2),
                Vec3::new(radius * w * c1, radius * w * c2, 2.0 * h * w * c2),
                Vec3::new(-radius * w * w * s1, -2.0 * radius * w * w * s2, -4.0 * h * w * w * s2),
                0.0,
            )
        }
    };
    let (psi, psi_dot) = heading_of(&v, &a);
    let (r, omega) = heading_attitude(psi, psi_dot, pitch);
    Ok(Kinematics { state: ExtendedPose::new(r, p, v), acceleration: a, omega })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuSimConfig {
    pub rate: f64,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
}

impl Default for ImuSimConfig {
    fn default() -> Self {
        Self { rate: 200.0, initial_gyro_bias: [0.0; 3], initial_accel_bias: [0.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSimConfig {
    pub rate: f64,
    pub pixel_sigma: f64,
    pub focal_length: f64,
    pub half_fov_deg: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub max_features: usize,
    /// Frames after which a track is cut (and the landmark may be redetected
    /// under a new id).
    pub lifetime: usize,
    pub stereo: bool,
    pub baseline: f64,
    /// Downward pitch of the forward-looking camera, degrees.
    pub mount_pitch_deg: f64,
    /// `^i p_c`, m.
    pub mount_translation: [f64; 3],
}

impl Default for CameraSimConfig {
    fn default() -> Self {
        Self {
            rate: 10.0,
            pixel_sigma: 1.0,
            focal_length: 460.0,
            half_fov_deg: 45.0,
            min_depth: 1.0,
            max_depth: 40.0,
            max_features: 100,
            lifetime: 40,
            stereo: false,
            baseline: 0.1,
            mount_pitch_deg: 0.0,
            mount_translation: [0.1, 0.0, 0.05],
        }
    }
}

impl CameraSimConfig {
    /// Camera-to-body transform: optical axis along body +x, image x to the
    /// right (body −y), image y down (body −z), then pitched down.
    pub fn extrinsics(&self) -> Pose {
        let look = Mat3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let pitch = Rotation::from_axis_angle(&Vec3::y_axis(), self.mount_pitch_deg.to_radians());
        Pose::new(pitch * Rotation::from_matrix_unchecked(look), Vec3::from(self.mount_translation))
    }

    /// σ on normalized image coordinates.
    pub fn normalized_sigma(&self) -> f64 {
        self.pixel_sigma / self.focal_length
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub landmarks: usize,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { landmarks: 3000, box_min: [-60.0, -50.0, -10.0], box_max: [60.0, 50.0, 20.0] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatelliteGroup {
    pub constellation: Constellation,
    pub count: usize,
}

/// During `[t_start, t_end)` only the first `visible` satellites report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropout {
    pub t_start: f64,
    pub t_end: f64,
    pub visible: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnssSimConfig {
    pub enabled: bool,
    pub rate: f64,
    /// ENU origin, degrees / m.
    pub origin: [f64; 3],
    /// True yaw of the world frame inside ENU, degrees.
    pub yaw_deg: f64,
    /// True world origin inside ENU, m.
    pub world_offset: [f64; 3],
    pub satellites: Vec<SatelliteGroup>,
    /// Optional fixed `(azimuth, elevation)` directions in degrees, one per
    /// satellite; such satellites do not move.
    pub fixed_directions: Vec<[f64; 2]>,
    pub elevation_floor_deg: f64,
    /// Seed for the satellite geometry, independent of the noise seed.
    pub geometry_seed: u64,
    pub sigma_pseudorange: f64,
    pub sigma_range_rate: f64,
    pub elevation_mask_deg: f64,
    /// `D = d0 + d1 / sin(el)`, m.
    pub delay: [f64; 2],
    /// Relative error of the delay handed to the filter.
    pub delay_mismatch: f64,
    pub initial_clock_sigma: f64,
    pub initial_drift_sigma: f64,
    pub dropouts: Vec<Dropout>,
}

impl Default for GnssSimConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rate: 5.0,
            origin: [22.3, 114.2, 30.0],
            yaw_deg: 25.0,
            world_offset: [0.0, 0.0, 0.0],
            satellites: alloc::vec![
                SatelliteGroup { constellation: Constellation::Gps, count: 4 },
                SatelliteGroup { constellation: Constellation::Bds, count: 4 },
            ],
            fixed_directions: Vec::new(),
            elevation_floor_deg: 15.0,
            geometry_seed: 7,
            sigma_pseudorange: 1.0,
            sigma_range_rate: 0.1,
            elevation_mask_deg: 10.0,
            delay: [2.0, 3.0],
            delay_mismatch: 0.0,
            initial_clock_sigma: 100.0,
            initial_drift_sigma: 1.0,
            dropouts: Vec::new(),
        }
    }
}

impl GnssSimConfig {
    pub fn satellite_count(&self) -> usize {
        self.satellites.iter().map(|g| g.count).sum()
    }

    pub fn true_alignment(&self) -> Result<Alignment> {
        let o = GeodeticPoint::from_degrees(self.origin[0], self.origin[1], self.origin[2])?;
        Ok(Alignment::new(o, self.yaw_deg.to_radians(), Vec3::from(self.world_offset)))
    }

    fn noise_model(&self) -> GnssConfig {
        GnssConfig {
            sigma_pseudorange: self.sigma_pseudorange,
            sigma_range_rate: self.sigma_range_rate,
            elevation_mask: self.elevation_mask_deg.to_radians(),
            ..GnssConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: alloc::string::String,
    pub duration: f64,
    pub seed: u64,
    pub trajectory: Trajectory,
    pub noise: NoiseSpec,
    pub imu: ImuSimConfig,
    pub camera: CameraSimConfig,
    pub scene: SceneConfig,
    pub gnss: GnssSimConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "figure8".into(),
            duration: 60.0,
            seed: 1,
            trajectory: Trajectory::default(),
            noise: NoiseSpec::default(),
            imu: ImuSimConfig::default(),
            camera: CameraSimConfig::default(),
            scene: SceneConfig::default(),
            gnss: GnssSimConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::InvalidConfig("duration must be positive"));
        }
        if !(self.imu.rate > 0.0 && self.camera.rate > 0.0 && self.gnss.rate > 0.0) {
            return Err(Error::InvalidConfig("rates must be positive"));
        }
        if self.imu.rate < self.camera.rate {
            return Err(Error::InvalidConfig("imu rate must be at least the camera rate"));
        }
        if !self.gnss.fixed_directions.is_empty() && self.gnss.fixed_directions.len() != self.gnss.satellite_count() {
            return Err(Error::InvalidConfig("one fixed direction per satellite"));
        }
        if self.scene.box_min.iter().zip(&self.scene.box_max).any(|(a, b)| a > b) {
            return Err(Error::InvalidConfig("scene box is inverted"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub state: ExtendedPose,
    /// Body angular rate, rad/s.
    pub omega: Vec3,
    /// World acceleration, m/s².
    pub acceleration: Vec3,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    /// `c t_α` per constellation in [`Constellation::ALL`] order, m.
    pub clock_biases: [f64; 4],
    /// `c f`, m/s.
    pub clock_drift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    pub t: f64,
    pub frame_id: FrameId,
    pub features: Vec<(FeatureId, u8, Vec2)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnssEpoch {
    pub t: f64,
    pub observations: Vec<SatelliteObservation>,
}

/// Sensor setup shipped with a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub extrinsics: Pose,
    pub stereo: bool,
    pub baseline: f64,
    pub feature_sigma: f64,
    /// True `T_w^ECEF` when known (simulation).
    pub alignment: Option<Alignment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub images: Vec<ImageFrame>,
    pub gnss: Vec<GnssEpoch>,
    pub truth: Option<Vec<TruthSample>>,
    pub calibration: Calibration,
}

impl Dataset {
    /// Truth interpolated at `t`: kinematics linear between samples (only
    /// used for reporting), clocks carried forward with their drift.
    pub fn truth_at(&self, t: f64) -> Option<TruthSample> {
        let truth = self.truth.as_ref()?;
        let i = truth.partition_point(|s| s.t <= t);
        if i == 0 {
            return None;
        }
        let s = truth[i - 1];
        if s.t == t || i == truth.len() {
            return (s.t == t).then_some(s);
        }
        let n = truth[i];
        let a = (t - s.t) / (n.t - s.t);
        let mut out = s;
        out.t = t;
        let dr = crate::geometry::so3_log(&(s.state.rotation.inverse() * n.state.rotation));
        out.state = ExtendedPose::new(
            s.state.rotation * exp_so3(&(dr * a)),
            s.state.position.lerp(&n.state.position, a),
            s.state.velocity.lerp(&n.state.velocity, a),
        );
        out.gyro_bias = s.gyro_bias.lerp(&n.gyro_bias, a);
        out.accel_bias = s.accel_bias.lerp(&n.accel_bias, a);
        for k in 0..4 {
            out.clock_biases[k] = s.clock_biases[k] + s.clock_drift * (t - s.t);
        }
        Some(out)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn normal3(r: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(normal(r), normal(r), normal(r))
}

fn samples(rate: f64, duration: f64) -> usize {
    // tolerate rounding of duration·rate
    (duration * rate + 1e-9).floor() as usize
}

/// Kinematics on the IMU grid plus bias and clock random walks.
pub fn generate_truth(cfg: &ScenarioConfig) -> Result<Vec<TruthSample>> {
    cfg.validate()?;
    let mut r = stream(cfg.seed, 1);
    let rate = cfg.imu.rate;
    let dt = 1.0 / rate;
    let n = samples(rate, cfg.duration);
    let noise = &cfg.noise;
    let mut bg = Vec3::from(cfg.imu.initial_gyro_bias);
    let mut ba = Vec3::from(cfg.imu.initial_accel_bias);
    let mut clocks = [0.0; 4];
    for c in clocks.iter_mut() {
        *c = normal(&mut r) * cfg.gnss.initial_clock_sigma;
    }
    let mut drift = normal(&mut r) * cfg.gnss.initial_drift_sigma;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let kin = eval_trajectory(&cfg.trajectory, cfg.duration, t.min(cfg.duration))?;
        out.push(TruthSample {
            t,
            state: kin.state,
            omega: kin.omega,
            acceleration: kin.acceleration,
            gyro_bias: bg,
            accel_bias: ba,
            clock_biases: clocks,
            clock_drift: drift,
        });
        let sq = dt.sqrt();
        bg += normal3(&mut r) * (noise.gyro_bias_walk * sq);
        ba += normal3(&mut r) * (noise.accel_bias_walk * sq);
        for c in clocks.iter_mut() {
            *c += drift * dt + normal(&mut r) * noise.clock_bias_walk * sq;
        }
        drift += normal(&mut r) * noise.clock_drift_walk * sq;
    }
    Ok(out)
}

/// IMU stream. Each sample represents the interval that follows it and is
/// taken at the interval midpoint; the last sample uses the final instant.
pub fn gen_imu(cfg: &ScenarioConfig, truth: &[TruthSample]) -> Result<Vec<ImuSample>> {
    let mut r = stream(cfg.seed, 2);
    let dt = 1.0 / cfg.imu.rate;
    let sq = cfg.imu.rate.sqrt();
    let g = gravity_vector();
    truth
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let kin = if k + 1 < truth.len() {
                eval_trajectory(&cfg.trajectory, cfg.duration, (s.t + 0.5 * dt).min(cfg.duration))?
            } else {
                Kinematics { state: s.state, acceleration: s.acceleration, omega: s.omega }
            };
            let gyro = kin.omega + s.gyro_bias + normal3(&mut r) * (cfg.noise.gyro_noise * sq);
            let accel = kin.state.rotation.inverse() * (kin.acceleration - g) + s.accel_bias + normal3(&mut r) * (cfg.noise.accel_noise * sq);
            Ok(ImuSample { t: s.t, gyro, accel })
        })
        .collect()
}

pub fn gen_landmarks(cfg: &ScenarioConfig) -> Vec<Vec3> {
    let mut r = stream(cfg.seed, 3);
    let (lo, hi) = (Vec3::from(cfg.scene.box_min), Vec3::from(cfg.scene.box_max));
    (0..cfg.scene.landmarks)
        .map(|_| Vec3::new(r.random_range(lo.x..=hi.x), r.random_range(lo.y..=hi.y), r.random_range(lo.z..=hi.z)))
        .collect()
}

/// Normalized image coordinates of `p` if it is inside the viewing cone and
/// depth range of a camera at `cam`.
pub fn visible(cam: &Pose, p: &Vec3, cfg: &CameraSimConfig) -> Option<Vec2> {
    let pc = cam.inverse_transform_point(p);
    if !(pc.z >= cfg.min_depth && pc.z <= cfg.max_depth) {
        return None;
    }
    let uv = Vec2::new(pc.x / pc.z, pc.y / pc.z);
    let lim = cfg.half_fov_deg.to_radians().tan();
    (uv.x.abs() <= lim && uv.y.abs() <= lim).then_some(uv)
}

/// Feature tracks: existing tracks continue while visible and younger than
/// the lifetime; free slots are filled with newly detected landmarks.
pub fn gen_features(cfg: &ScenarioConfig, landmarks: &[Vec3]) -> Result<Vec<ImageFrame>> {
    let mut r = stream(cfg.seed, 4);
    let cam_cfg = &cfg.camera;
    let ext = cam_cfg.extrinsics();
    let sigma = cam_cfg.normalized_sigma();
    let n = samples(cam_cfg.rate, cfg.duration);
    // landmark index -> (feature id, age)
    let mut active: BTreeMap<usize, (FeatureId, usize)> = BTreeMap::new();
    let mut next_id: FeatureId = 1;
    let mut frames = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let t = j as f64 / cam_cfg.rate;
        let kin = eval_trajectory(&cfg.trajectory, cfg.duration, t.min(cfg.duration))?;
        let left = kin.state.pose().compose(&ext);
        let right = camera_pose(&left, 1, cam_cfg.baseline);
        let mut keep: BTreeMap<usize, (FeatureId, usize)> = BTreeMap::new();
        for (&l, &(id, age)) in &active {
            if age < cam_cfg.lifetime && visible(&left, &landmarks[l], cam_cfg).is_some() {
                keep.insert(l, (id, age + 1));
            }
        }
        let mut candidates: Vec<usize> = (0..landmarks.len()).filter(|l| !keep.contains_key(l) && !active.contains_key(l)).filter(|&l| visible(&left, &landmarks[l], cam_cfg).is_some()).collect();
        candidates.shuffle(&mut r);
        for l in candidates {
            if keep.len() >= cam_cfg.max_features {
                break;
            }
            keep.insert(l, (next_id, 1));
            next_id += 1;
        }
        let mut features = Vec::with_capacity(keep.len() * 2);
        for (&l, &(id, _)) in &keep {
            let uv = visible(&left, &landmarks[l], cam_cfg).unwrap();
            features.push((id, 0u8, uv + Vec2::new(normal(&mut r), normal(&mut r)) * sigma));
            if cam_cfg.stereo {
                if let Some(uv) = visible(&right, &landmarks[l], cam_cfg) {
                    features.push((id, 1u8, uv + Vec2::new(normal(&mut r), normal(&mut r)) * sigma));
                }
            }
        }
        features.sort_by_key(|f| (f.0, f.1));
        frames.push(ImageFrame { t, frame_id: j as FrameId + 1, features });
        active = keep;
    }
    Ok(frames)
}

/// One simulated satellite: circular orbit (or a fixed point).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Satellite {
    pub constellation: Constellation,
    pub id: u32,
    pub p0: Vec3,
    /// Unit in-plane direction of motion at t = 0.
    pub u: Vec3,
    pub rate: f64,
    pub clock: f64,
    pub clock_drift: f64,
}

impl Satellite {
    pub fn state(&self, t: f64) -> (Vec3, Vec3) {
        let r = self.p0.norm();
        let (s, c) = (self.rate * t).sin_cos();
        let e = self.p0 / r;
        (e * (r * c) + self.u * (r * s), (self.u * c - e * s) * (r * self.rate))
    }
}

/// Point at `ORBIT_RADIUS` seen from `origin` in the given direction.
pub fn satellite_at(origin: &GeodeticPoint, az: f64, el: f64) -> Vec3 {
    let o = geodetic_to_ecef(origin);
    let dir = enu_rotation(origin) * Vec3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
    let b = o.dot(&dir);
    let s = -b + (b * b - o.norm_squared() + ORBIT_RADIUS * ORBIT_RADIUS).sqrt();
    o + dir * s
}

pub fn gen_satellites(cfg: &GnssSimConfig) -> Result<Vec<Satellite>> {
    let mut r = stream(cfg.geometry_seed, 5);
    let origin = cfg.true_alignment()?.origin;
    let floor = cfg.elevation_floor_deg.to_radians();
    let rate = (GM / ORBIT_RADIUS.powi(3)).sqrt();
    let mut out = Vec::new();
    let mut idx = 0usize;
    for g in &cfg.satellites {
        for _ in 0..g.count {
            let (az, el, moving) = match cfg.fixed_directions.get(idx) {
                Some(d) => (d[0].to_radians(), d[1].to_radians(), false),
                None => {
                    // uniform on the sphere cap above the floor
                    let z = r.random_range(floor.sin()..1.0);
                    (r.random_range(0.0..2.0 * core::f64::consts::PI), z.asin(), true)
                }
            };
            let p0 = satellite_at(&origin, az, el);
            let e = p0.normalize();
            let u = if moving {
                let a = normal3(&mut r);
                (a - e * e.dot(&a)).normalize()
            } else {
                e.cross(&Vec3::z()).normalize()
            };
            idx += 1;
            out.push(Satellite {
                constellation: g.constellation,
                id: idx as u32,
                p0,
                u,
                rate: if moving { rate } else { 0.0 },
                clock: r.random_range(-30.0..30.0),
                clock_drift: r.random_range(-0.01..0.01),
            });
        }
    }
    Ok(out)
}

/// Truth clock terms at an arbitrary time.
fn clocks_at(truth: &[TruthSample], rate: f64, t: f64) -> ([f64; 4], f64) {
    let k = ((t * rate + 1e-9).floor() as usize).min(truth.len() - 1);
    let s = &truth[k];
    let mut b = s.clock_biases;
    for c in b.iter_mut() {
        *c += s.clock_drift * (t - s.t);
    }
    (b, s.clock_drift)
}

pub fn gen_gnss(cfg: &ScenarioConfig, truth: &[TruthSample]) -> Result<Vec<GnssEpoch>> {
    if !cfg.gnss.enabled {
        return Ok(Vec::new());
    }
    let mut r = stream(cfg.seed, 6);
    let align = cfg.gnss.true_alignment()?;
    let sats = gen_satellites(&cfg.gnss)?;
    let model = cfg.gnss.noise_model();
    let n = samples(cfg.gnss.rate, cfg.duration);
    let mut epochs = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let t = j as f64 / cfg.gnss.rate;
        let kin = eval_trajectory(&cfg.trajectory, cfg.duration, t.min(cfg.duration))?;
        let (clocks, drift) = clocks_at(truth, cfg.imu.rate, t);
        let p = align.to_ecef(&kin.state.position);
        let v = align.t_w_ecef.rotation * kin.state.velocity;
        let limit = cfg.gnss.dropouts.iter().filter(|d| t >= d.t_start && t < d.t_end).map(|d| d.visible).min().unwrap_or(usize::MAX);
        let mut obs = Vec::new();
        for s in sats.iter().take(limit) {
            let (ps, vs) = s.state(t);
            let el = elevation(&p, &ps);
            if el < 0.0 {
                continue;
            }
            let n = (ps - p).normalize();
            let d = cfg.gnss.delay[0] + cfg.gnss.delay[1] / el.max(model.elevation_mask).sin();
            let scale = model.elevation_scale(el).sqrt();
            let rho = (p - ps).norm() + clocks[s.constellation.index()] - s.clock + d + normal(&mut r) * model.sigma_pseudorange * scale;
            let rate = -n.dot(&(v - vs)) + drift - s.clock_drift + normal(&mut r) * model.sigma_range_rate * scale;
            obs.push(SatelliteObservation {
                constellation: s.constellation,
                sat_id: s.id,
                position: ps,
                velocity: vs,
                pseudorange: rho,
                range_rate: rate,
                sat_clock: s.clock,
                sat_clock_drift: s.clock_drift,
                delay: d * (1.0 + cfg.gnss.delay_mismatch),
            });
        }
        epochs.push(GnssEpoch { t, observations: obs });
    }
    Ok(epochs)
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Dataset> {
    let truth = generate_truth(cfg)?;
    let imu = gen_imu(cfg, &truth)?;
    let landmarks = gen_landmarks(cfg);
    let images = gen_features(cfg, &landmarks)?;
    let gnss = gen_gnss(cfg, &truth)?;
    let calibration = Calibration {
        extrinsics: cfg.camera.extrinsics(),
        stereo: cfg.camera.stereo,
        baseline: cfg.camera.baseline,
        feature_sigma: cfg.camera.normalized_sigma(),
        alignment: if cfg.gnss.enabled { Some(cfg.gnss.true_alignment()?) } else { None },
    };
    Ok(Dataset { imu, images, gnss, truth: Some(truth), calibration })
}

//! Raw pseudorange / Doppler fusion.
//!
//! For satellite `k` of constellation `α`, with `n` the unit vector from the
//! receiver to the satellite and `T = T_w^ECEF`:
//!
//! ```text
//! ρ   = ‖T p_i − p_sat‖ + c t_α − c Δt^k + D^k
//! ρ̇   = −nᵀ (R v_i − v_sat) + c f − c Δf^k
//! ```
//!
//! Clock terms are stored premultiplied by `c`, so their Jacobian entries are 1.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::chi2;
use crate::geometry::{ecef_to_geodetic, enu_frame, enu_rotation, rot_z, skew, GeodeticPoint, Pose, Vec3};
use crate::state::{delayed_init, kalman_update_columns, marginalize, Component, Constellation, Covariance, NavState, NewBlock, StateLayout, IMU_POS, IMU_ROT, IMU_VEL};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SatelliteObservation {
    pub constellation: Constellation,
    pub sat_id: u32,
    /// ECEF, m
    pub position: Vec3,
    /// ECEF, m/s
    pub velocity: Vec3,
    pub pseudorange: f64,
    /// Doppler expressed as range rate, m/s.
    pub range_rate: f64,
    /// `c Δt^k`, m
    pub sat_clock: f64,
    /// `c Δf^k`, m/s
    pub sat_clock_drift: f64,
    /// Modeled atmospheric delay, m.
    pub delay: f64,
}

impl SatelliteObservation {
    pub fn is_plausible(&self) -> bool {
        let r = self.position.norm();
        (2e7..=5e7).contains(&r) && self.pseudorange > 0.0 && self.pseudorange.is_finite() && self.range_rate.is_finite()
    }

    /// Pseudorange with the broadcast clock and delay removed.
    pub fn corrected_pseudorange(&self) -> f64 {
        self.pseudorange + self.sat_clock - self.delay
    }

    pub fn corrected_range_rate(&self) -> f64 {
        self.range_rate + self.sat_clock_drift
    }
}

/// `T_w^ECEF = T_ENU^ECEF T_w^ENU`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub t_w_ecef: Pose,
    /// ENU origin (first SPP fix).
    pub origin: GeodeticPoint,
    /// Yaw of the world frame inside ENU, rad.
    pub yaw: f64,
    /// Translation of the world origin inside ENU, m.
    pub translation: Vec3,
    pub frozen: bool,
    /// Covariance of `(yaw, t_x, t_y, t_z)` from the fit.
    pub covariance: nalgebra::Matrix4<f64>,
}

impl Alignment {
    pub fn new(origin: GeodeticPoint, yaw: f64, translation: Vec3) -> Self {
        let t_w_enu = Pose::new(rot_z(yaw), translation);
        Self { t_w_ecef: enu_frame(&origin).compose(&t_w_enu), origin, yaw, translation, frozen: true, covariance: nalgebra::Matrix4::zeros() }
    }

    /// Receiver position in ECEF.
    pub fn to_ecef(&self, p_w: &Vec3) -> Vec3 {
        self.t_w_ecef.transform_point(p_w)
    }
}

pub fn line_of_sight(receiver: &Vec3, sat: &Vec3) -> Vec3 {
    (sat - receiver).normalize()
}

fn clock(x: &NavState, c: Constellation) -> Result<f64> {
    x.clock_biases.get(&c).copied().ok_or(Error::MissingClock(c))
}

pub fn predict_pseudorange(x: &NavState, align: &Alignment, obs: &SatelliteObservation) -> Result<f64> {
    let p = align.to_ecef(&x.imu.position);
    Ok((p - obs.position).norm() + clock(x, obs.constellation)? - obs.sat_clock + obs.delay)
}

pub fn predict_doppler(x: &NavState, align: &Alignment, obs: &SatelliteObservation) -> Result<f64> {
    let p = align.to_ecef(&x.imu.position);
    let n = line_of_sight(&p, &obs.position);
    let v = align.t_w_ecef.rotation * x.imu.velocity;
    let f = x.clock_drift.ok_or(Error::MissingClock(obs.constellation))?;
    clock(x, obs.constellation)?;
    Ok(-n.dot(&(v - obs.velocity)) + f - obs.sat_clock_drift)
}

/// Clock-free single difference of two satellites of one constellation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingleDifference {
    /// Measured `(ρ̃, ρ̃̇)` after removing broadcast clocks and delays.
    pub measured: (f64, f64),
    /// Predicted from the receiver position and velocity only.
    pub predicted: (f64, f64),
}

pub fn single_difference(k: &SatelliteObservation, l: &SatelliteObservation, x: &NavState, align: &Alignment) -> Result<SingleDifference> {
    if k.constellation != l.constellation {
        return Err(Error::ConstellationMismatch);
    }
    let measured = (k.corrected_pseudorange() - l.corrected_pseudorange(), k.corrected_range_rate() - l.corrected_range_rate());
    let (pk, pl) = (geometric(x, align, k), geometric(x, align, l));
    Ok(SingleDifference { measured, predicted: (pk.0 - pl.0, pk.1 - pl.1) })
}

/// Geometric range and range rate (no clocks, no delay).
pub fn geometric(x: &NavState, align: &Alignment, obs: &SatelliteObservation) -> (f64, f64) {
    let p = align.to_ecef(&x.imu.position);
    let n = line_of_sight(&p, &obs.position);
    let v = align.t_w_ecef.rotation * x.imu.velocity;
    ((p - obs.position).norm(), -n.dot(&(v - obs.velocity)))
}

/// Pseudorange and Doppler rows for one satellite. Columns: IMU `δθ, δp, δv`
/// (0..9), then the constellation clock and the drift slot when present.
pub fn gnss_jacobians(x: &NavState, layout: &StateLayout, align: &Alignment, obs: &SatelliteObservation) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let clk = layout.clock_offset(obs.constellation).ok_or(Error::MissingClock(obs.constellation))?;
    let p = align.to_ecef(&x.imu.position);
    let n = line_of_sight(&p, &obs.position);
    let nr: RowVector3<f64> = n.transpose() * align.t_w_ecef.rotation.matrix();
    let mut cols: Vec<usize> = (IMU_ROT..IMU_VEL + 3).collect();
    cols.push(clk);
    let drift = layout.drift_offset();
    cols.extend(drift);
    let mut h = DMatrix::zeros(2, cols.len());
    h.fixed_view_mut::<1, 3>(0, IMU_ROT).copy_from(&(nr * skew(&x.imu.position)));
    h.fixed_view_mut::<1, 3>(0, IMU_POS).copy_from(&(-nr));
    h[(0, 9)] = 1.0;
    h.fixed_view_mut::<1, 3>(1, IMU_ROT).copy_from(&(nr * skew(&x.imu.velocity)));
    h.fixed_view_mut::<1, 3>(1, IMU_VEL).copy_from(&(-nr));
    if drift.is_some() {
        h[(1, 10)] = 1.0;
    }
    Ok((cols, h))
}

/// Elevation of a satellite seen from an ECEF receiver position.
pub fn elevation(receiver: &Vec3, sat: &Vec3) -> f64 {
    let up = match ecef_to_geodetic(receiver) {
        Ok(g) => enu_rotation(&g).matrix().column(2).into_owned(),
        Err(_) => return core::f64::consts::FRAC_PI_2,
    };
    elevation_with_up(&up, receiver, sat)
}

fn elevation_with_up(up: &Vec3, receiver: &Vec3, sat: &Vec3) -> f64 {
    line_of_sight(receiver, sat).dot(up).clamp(-1.0, 1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnssConfig {
    pub sigma_pseudorange: f64,
    pub sigma_range_rate: f64,
    /// rad
    pub elevation_mask: f64,
    pub chi2_confidence: f64,
    pub use_doppler: bool,
}

impl Default for GnssConfig {
    fn default() -> Self {
        Self {
            sigma_pseudorange: 1.0,
            sigma_range_rate: 0.1,
            elevation_mask: 10f64.to_radians(),
            chi2_confidence: 0.95,
            use_doppler: true,
        }
    }
}

impl GnssConfig {
    /// Variance scale `1 / sin²(max(el, mask))`.
    pub fn elevation_scale(&self, el: f64) -> f64 {
        let s = el.max(self.elevation_mask).sin();
        1.0 / (s * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SppSolution {
    pub position: Vec3,
    pub clocks: BTreeMap<Constellation, f64>,
    pub velocity: Vec3,
    pub drift: f64,
    pub gdop: f64,
    /// ECEF position covariance, m² (unit pseudorange variance when unweighted).
    pub position_covariance: Matrix3<f64>,
}

pub const SPP_MAX_GDOP: f64 = 20.0;

/// Single point positioning: Gauss–Newton on pseudoranges for position and
/// one clock per constellation, then linear least squares on range rates.
pub fn spp_solve(obs: &[SatelliteObservation]) -> Result<SppSolution> {
    spp_solve_weighted(obs, None)
}

/// [`spp_solve`] with rows weighted by the elevation-scaled noise model of
/// `cfg` (elevations taken at the current iterate once it is off the Earth
/// center).
pub fn spp_solve_weighted(obs: &[SatelliteObservation], cfg: Option<&GnssConfig>) -> Result<SppSolution> {
    let consts: Vec<Constellation> = {
        let mut v: Vec<Constellation> = obs.iter().map(|o| o.constellation).collect();
        v.sort();
        v.dedup();
        v
    };
    let need = 3 + consts.len();
    if obs.len() < need.max(4) {
        return Err(Error::InsufficientSatellites { have: obs.len(), need: need.max(4) });
    }
    let dim = 3 + consts.len();
    let col = |c: Constellation| 3 + consts.iter().position(|&k| k == c).unwrap();
    let weights = |p: &Vec3, sigma: f64| -> DVector<f64> {
        DVector::from_iterator(
            obs.len(),
            obs.iter().map(|o| match cfg {
                Some(c) if p.norm() > 1e6 => 1.0 / (sigma * sigma * c.elevation_scale(elevation(p, &o.position))),
                Some(_) => 1.0 / (sigma * sigma),
                None => 1.0,
            }),
        )
    };
    let mut sol = DVector::<f64>::zeros(dim);
    let mut a = DMatrix::<f64>::zeros(obs.len(), dim);
    let mut w = DVector::from_element(obs.len(), 1.0);
    let mut converged = false;
    let sigma_pr = cfg.map_or(1.0, |c| c.sigma_pseudorange);
    for _ in 0..20 {
        let p = Vec3::new(sol[0], sol[1], sol[2]);
        w = weights(&p, sigma_pr);
        let mut r = DVector::zeros(obs.len());
        a.fill(0.0);
        for (i, o) in obs.iter().enumerate() {
            let d = p - o.position;
            let range = d.norm();
            a.fixed_view_mut::<1, 3>(i, 0).copy_from(&(d / range).transpose());
            a[(i, col(o.constellation))] = 1.0;
            r[i] = o.corrected_pseudorange() - range - sol[col(o.constellation)];
        }
        let aw = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * w[i]);
        let step = (aw.transpose() * &a).cholesky().ok_or(Error::WeakGeometry(f64::INFINITY))?.solve(&(aw.transpose() * r));
        sol += &step;
        if !sol.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence);
        }
        if step.norm() < 1e-4 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Divergence);
    }
    let position = Vec3::new(sol[0], sol[1], sol[2]);
    let cov = (a.transpose() * &a).try_inverse().ok_or(Error::WeakGeometry(f64::INFINITY))?;
    let gdop = cov.trace().sqrt();
    if !(gdop <= SPP_MAX_GDOP) {
        return Err(Error::WeakGeometry(gdop));
    }
    let aw = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * w[i]);
    let wcov = (aw.transpose() * &a).try_inverse().ok_or(Error::WeakGeometry(gdop))?;
    let position_covariance = wcov.fixed_view::<3, 3>(0, 0).into_owned();
    // range rate: −nᵀ v + f = ρ̇ + cΔf − nᵀ v_sat, same relative weights
    let mut b = DMatrix::<f64>::zeros(obs.len(), 4);
    let mut y = DVector::zeros(obs.len());
    for (i, o) in obs.iter().enumerate() {
        let n = line_of_sight(&position, &o.position);
        b.fixed_view_mut::<1, 3>(i, 0).copy_from(&(-n.transpose()));
        b[(i, 3)] = 1.0;
        y[i] = o.corrected_range_rate() - n.dot(&o.velocity);
    }
    let bw = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * w[i]);
    let vel = (bw.transpose() * &b).cholesky().ok_or(Error::WeakGeometry(gdop))?.solve(&(bw.transpose() * y));
    let clocks = consts.iter().map(|&c| (c, sol[col(c)])).collect();
    Ok(SppSolution { position, clocks, velocity: Vec3::new(vel[0], vel[1], vel[2]), drift: vel[3], gdop, position_covariance })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub min_samples: usize,
    /// m
    pub min_horizontal_span: f64,
    /// Keep re-solving with every new pair until this many are collected.
    pub refine: bool,
    pub refine_samples: usize,
    /// σ of an SPP fix per axis, m, for fits without per-fix covariances.
    pub spp_sigma: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { min_samples: 10, min_horizontal_span: 5.0, refine: false, refine_samples: 50, spp_sigma: 3.0 }
    }
}

/// Fit the 4-DoF transform from world to ENU (yaw about up, translation) so
/// that `R_ENU^ECEF (R_z(ψ) p_w + t) + o ≈ p_spp`, with `o` the first fix.
/// The fit covariance assumes isotropic fixes with σ = `cfg.spp_sigma`.
pub fn initialize_alignment(vio: &[Vec3], spp: &[Vec3], cfg: &AlignmentConfig) -> Result<Alignment> {
    let s2 = cfg.spp_sigma * cfg.spp_sigma;
    let covs = alloc::vec![Matrix3::identity() * s2; spp.len()];
    initialize_alignment_with_covariance(vio, spp, &covs, cfg)
}

/// [`initialize_alignment`] with one ECEF covariance per SPP fix. The fit
/// itself is unweighted; its covariance is the sandwich
/// `(JᵀJ)⁻¹ (Σ Jᵢᵀ Cᵢ Jᵢ) (JᵀJ)⁻¹` with `Cᵢ` rotated into ENU.
pub fn initialize_alignment_with_covariance(vio: &[Vec3], spp: &[Vec3], covs: &[Matrix3<f64>], cfg: &AlignmentConfig) -> Result<Alignment> {
    if vio.len() != spp.len() || covs.len() != spp.len() {
        return Err(Error::DimensionMismatch { expected: vio.len(), found: spp.len().min(covs.len()) });
    }
    if vio.len() < cfg.min_samples {
        return Err(Error::InsufficientSamples { have: vio.len(), need: cfg.min_samples });
    }
    let origin = ecef_to_geodetic(&spp[0])?;
    let enu = enu_frame(&origin);
    let e: Vec<Vec3> = spp.iter().map(|p| enu.inverse_transform_point(p)).collect();
    let k = vio.len() as f64;
    let pc = vio.iter().sum::<Vec3>() / k;
    let ec = e.iter().sum::<Vec3>() / k;
    let span = vio.iter().map(|p| ((p - pc).xy()).norm()).fold(0.0, f64::max) * 2.0;
    if span < cfg.min_horizontal_span {
        return Err(Error::InsufficientMotion { span });
    }
    let (mut s, mut c) = (0.0, 0.0);
    for (p, q) in vio.iter().zip(&e) {
        let (a, b) = (p - pc, q - ec);
        c += a.x * b.x + a.y * b.y;
        s += a.x * b.y - a.y * b.x;
    }
    let yaw = s.atan2(c);
    let rz = rot_z(yaw);
    let t = ec - rz * pc;
    let mut align = Alignment::new(origin, yaw, t);
    // linearized fit covariance: rows ∂(R_z p + t)/∂(ψ, t) = [e_z × R_z p, I]
    let r_enu = enu.rotation.matrix();
    let mut info = nalgebra::Matrix4::<f64>::zeros();
    let mut meat = nalgebra::Matrix4::<f64>::zeros();
    for (p, cov) in vio.iter().zip(covs) {
        let mut j = nalgebra::Matrix3x4::<f64>::zeros();
        j.fixed_view_mut::<3, 1>(0, 0).copy_from(&Vec3::z().cross(&(rz * p)));
        j.fixed_view_mut::<3, 3>(0, 1).copy_from(&Matrix3::identity());
        info += j.transpose() * j;
        meat += j.transpose() * (r_enu.transpose() * cov * r_enu) * j;
    }
    let inv = info.try_inverse().unwrap_or_else(nalgebra::Matrix4::zeros);
    align.covariance = inv * meat * inv;
    align.covariance = (align.covariance + align.covariance.transpose()) * 0.5;
    align.frozen = !cfg.refine;
    Ok(align)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GnssReport {
    pub satellites: usize,
    pub used: usize,
    pub gated: usize,
    pub clocks_added: Vec<Constellation>,
    pub clocks_removed: Vec<Constellation>,
    pub drift_added: bool,
    pub drift_removed: bool,
}

/// Clock-state lifecycle, χ²-gated and elevation-weighted GNSS update.
pub fn gnss_update(
    x: &mut NavState,
    p: &mut Covariance,
    obs: &[SatelliteObservation],
    align: &Alignment,
    cfg: &GnssConfig,
    spp: Option<&SppSolution>,
) -> Result<GnssReport> {
    let mut report = GnssReport { satellites: obs.len(), ..Default::default() };
    let obs: Vec<&SatelliteObservation> = obs.iter().filter(|o| o.is_plausible()).collect();

    // stale clocks leave the state
    let stale: Vec<Constellation> = x.clock_biases.keys().filter(|c| !obs.iter().any(|o| o.constellation == **c)).copied().collect();
    let mut comps: Vec<Component> = stale.iter().map(|&c| Component::ClockBias(c)).collect();
    if x.clock_drift.is_some() && stale.len() == x.clock_biases.len() {
        comps.push(Component::ClockDrift);
        report.drift_removed = true;
    }
    if !comps.is_empty() {
        marginalize(x, p, &comps)?;
    }
    report.clocks_removed = stale;
    if obs.is_empty() {
        return Ok(report);
    }

    let receiver = align.to_ecef(&x.imu.position);
    let up = match ecef_to_geodetic(&receiver) {
        Ok(g) => enu_rotation(&g).matrix().column(2).into_owned(),
        Err(_) => Vec3::z(),
    };
    let mut sats: Vec<(f64, &SatelliteObservation)> = obs.iter().map(|o| (elevation_with_up(&up, &receiver, &o.position), *o)).collect();
    // highest elevation first, ties broken by id for determinism
    sats.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.sat_id.cmp(&b.1.sat_id)));

    let sigma2_pr = cfg.sigma_pseudorange * cfg.sigma_pseudorange;
    let sigma2_rr = cfg.sigma_range_rate * cfg.sigma_range_rate;
    let mut used_pr = Vec::new();
    let mut used_rr = Vec::new();

    // new clock biases from the best satellite of each new constellation
    for c in Constellation::ALL {
        if x.clock_biases.contains_key(&c) {
            continue;
        }
        let Some(&(el, o)) = sats.iter().find(|(_, o)| o.constellation == c) else { continue };
        let seed = spp.and_then(|s| s.clocks.get(&c).copied()).unwrap_or(0.0);
        let layout = x.layout();
        let n = layout.dim();
        let mut probe = x.clone();
        probe.clock_biases.insert(c, seed);
        let (cols, h) = gnss_jacobians(&probe, &probe.layout(), align, o)?;
        let mut h_x = DMatrix::zeros(1, n);
        for (j, &col) in cols.iter().enumerate().take(9) {
            h_x[(0, col)] = h[(0, j)];
        }
        let r = DVector::from_element(1, o.pseudorange - predict_pseudorange(&probe, align, o)?);
        let noise = DMatrix::from_element(1, 1, sigma2_pr * cfg.elevation_scale(el));
        delayed_init(x, p, NewBlock::ClockBias { constellation: c, value: seed }, &h_x, &DMatrix::identity(1, 1), &r, &noise)?;
        used_pr.push((o.constellation, o.sat_id));
        report.clocks_added.push(c);
    }
    if x.clock_drift.is_none() && cfg.use_doppler {
        if let Some(&(el, o)) = sats.first() {
            let seed = spp.map(|s| s.drift).unwrap_or(0.0);
            let n = x.layout().dim();
            let mut probe = x.clone();
            probe.clock_drift = Some(seed);
            let (cols, h) = gnss_jacobians(&probe, &probe.layout(), align, o)?;
            let mut h_x = DMatrix::zeros(1, n);
            for (j, &col) in cols.iter().enumerate().take(10) {
                h_x[(0, col)] = h[(1, j)];
            }
            let r = DVector::from_element(1, o.range_rate - predict_doppler(&probe, align, o)?);
            let noise = DMatrix::from_element(1, 1, sigma2_rr * cfg.elevation_scale(el));
            delayed_init(x, p, NewBlock::ClockDrift { value: seed }, &h_x, &DMatrix::identity(1, 1), &r, &noise)?;
            used_rr.push((o.constellation, o.sat_id));
            report.drift_added = true;
        }
    }

    // per-satellite rows, gated
    let layout = x.layout();
    // (columns, H, residual, noise variances) per satellite
    type SatRows = (Vec<usize>, DMatrix<f64>, DVector<f64>, DVector<f64>);
    let mut rows_h: Vec<SatRows> = Vec::new();
    let dof_gate = [0.0, chi2::quantile(cfg.chi2_confidence, 1), chi2::quantile(cfg.chi2_confidence, 2)];
    for &(el, o) in &sats {
        let (cols, h) = gnss_jacobians(x, &layout, align, o)?;
        let scale = cfg.elevation_scale(el);
        let mut keep = Vec::new();
        if !used_pr.contains(&(o.constellation, o.sat_id)) {
            keep.push((0, o.pseudorange - predict_pseudorange(x, align, o)?, sigma2_pr * scale));
        }
        if cfg.use_doppler && x.clock_drift.is_some() && !used_rr.contains(&(o.constellation, o.sat_id)) {
            keep.push((1, o.range_rate - predict_doppler(x, align, o)?, sigma2_rr * scale));
        }
        if keep.is_empty() {
            continue;
        }
        let hs = DMatrix::from_fn(keep.len(), cols.len(), |i, j| h[(keep[i].0, j)]);
        let r = DVector::from_iterator(keep.len(), keep.iter().map(|k| k.1));
        let var = DVector::from_iterator(keep.len(), keep.iter().map(|k| k.2));
        let p_sub = p.select_rows(&cols).select_columns(&cols);
        let s = &hs * p_sub * hs.transpose() + DMatrix::from_diagonal(&var);
        let d = s.cholesky().map(|ch| r.dot(&ch.solve(&r)));
        match d {
            Some(d) if d < dof_gate[keep.len()] => rows_h.push((cols, hs, r, var)),
            _ => report.gated += 1,
        }
    }
    if rows_h.is_empty() {
        return Ok(report);
    }
    report.used = rows_h.len();
    // every row shares the IMU columns; take the union of clock columns
    let mut cols: Vec<usize> = rows_h.iter().flat_map(|r| r.0.iter().copied()).collect();
    cols.sort_unstable();
    cols.dedup();
    let m: usize = rows_h.iter().map(|r| r.1.nrows()).sum();
    let mut h = DMatrix::zeros(m, cols.len());
    let mut r = DVector::zeros(m);
    let mut var = DVector::zeros(m);
    let mut row = 0;
    for (c, hs, rs, vs) in &rows_h {
        for (j, col) in c.iter().enumerate() {
            let k = cols.binary_search(col).unwrap();
            for i in 0..hs.nrows() {
                h[(row + i, k)] = hs[(i, j)];
            }
        }
        r.rows_mut(row, rs.len()).copy_from(rs);
        var.rows_mut(row, vs.len()).copy_from(vs);
        row += hs.nrows();
    }
    kalman_update_columns(x, p, &cols, &h, &r, &DMatrix::from_diagonal(&var))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, geodetic_to_ecef};
    use crate::state::testing::*;
    use crate::state::{boxplus, check_covariance};
    use crate::{ExtendedPose, Pose};
    use rand::Rng;

    fn origin() -> GeodeticPoint {
        GeodeticPoint::from_degrees(22.3, 114.2, 30.0).unwrap()
    }

    /// Satellite at azimuth/elevation from the ENU origin at orbit radius.
    fn sat_at(align: &Alignment, az: f64, el: f64) -> Vec3 {
        let o = geodetic_to_ecef(&align.origin);
        let dir = enu_rotation(&align.origin) * Vec3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
        // solve ‖o + s dir‖ = 26.6e6
        let b = o.dot(&dir);
        let s = -b + (b * b - o.norm_squared() + 26.6e6f64.powi(2)).sqrt();
        o + dir * s
    }

    fn make_obs(x: &NavState, align: &Alignment, c: Constellation, id: u32, pos: Vec3, vel: Vec3) -> SatelliteObservation {
        let mut o = SatelliteObservation {
            constellation: c,
            sat_id: id,
            position: pos,
            velocity: vel,
            pseudorange: 0.0,
            range_rate: 0.0,
            sat_clock: 12.0,
            sat_clock_drift: 0.3,
            delay: 4.0,
        };
        o.pseudorange = predict_pseudorange(x, align, &o).unwrap();
        o.range_rate = predict_doppler(x, align, &o).unwrap();
        o
    }

    fn gnss_state(r: &mut rand_chacha::ChaCha8Rng) -> NavState {
        let mut x = random_state(r, 1, 0, 0);
        for c in Constellation::ALL {
            x.clock_biases.insert(c, r.random_range(-100.0..100.0));
        }
        x.clock_drift = Some(r.random_range(-1.0..1.0));
        x
    }

    fn random_sats(r: &mut rand_chacha::ChaCha8Rng, align: &Alignment, x: &NavState, n: usize) -> Vec<SatelliteObservation> {
        (0..n)
            .map(|i| {
                let pos = sat_at(align, r.random_range(0.0..core::f64::consts::TAU), r.random_range(0.3..1.5));
                let vel = rvec(r, 3000.0);
                make_obs(x, align, Constellation::ALL[i % 4], i as u32, pos, vel)
            })
            .collect()
    }

    #[test]
    fn pseudorange_at_nadir() {
        let align = Alignment::new(origin(), 0.3, Vec3::new(1.0, 2.0, 3.0));
        let mut x = NavState::new(0.0, ExtendedPose::identity(), Pose::identity(), false);
        x.clock_biases.insert(Constellation::Gps, 0.0);
        x.clock_drift = Some(0.0);
        let rx = align.to_ecef(&Vec3::zeros());
        let d = 2.02e7;
        let obs = SatelliteObservation {
            constellation: Constellation::Gps,
            sat_id: 1,
            position: rx + rx.normalize() * d,
            velocity: rx.normalize() * 250.0,
            pseudorange: d,
            range_rate: 0.0,
            sat_clock: 0.0,
            sat_clock_drift: 0.0,
            delay: 0.0,
        };
        assert!((predict_pseudorange(&x, &align, &obs).unwrap() - d).abs() < 1e-6);
        // satellite receding radially at 250 m/s
        assert!((predict_doppler(&x, &align, &obs).unwrap() - 250.0).abs() < 1e-9);
        x.clock_biases.clear();
        assert_eq!(predict_pseudorange(&x, &align, &obs), Err(Error::MissingClock(Constellation::Gps)));
    }

    #[test]
    fn single_difference_cancels_clocks() {
        let mut r = rng(1);
        let align = Alignment::new(origin(), 0.0, Vec3::zeros());
        let x = gnss_state(&mut r);
        let sats = random_sats(&mut r, &align, &x, 8);
        let (k, l) = (&sats[0], &sats[4]);
        let sd = single_difference(k, k, &x, &align).unwrap();
        assert_eq!(sd.measured, (0.0, 0.0));
        assert_eq!(sd.predicted, (0.0, 0.0));
        let sd = single_difference(k, l, &x, &align).unwrap();
        let (pk, pl) = (predict_pseudorange(&x, &align, k).unwrap(), predict_pseudorange(&x, &align, l).unwrap());
        assert!((sd.predicted.0 - (pk - pl + k.sat_clock - l.sat_clock - k.delay + l.delay)).abs() < 1e-6);
        assert!((sd.measured.0 - sd.predicted.0).abs() < 1e-6);
        let (mut k2, mut l2) = (*k, *l);
        k2.pseudorange += 1234.5;
        l2.pseudorange += 1234.5;
        k2.range_rate += 0.75;
        l2.range_rate += 0.75;
        let sd2 = single_difference(&k2, &l2, &x, &align).unwrap();
        assert!((sd2.measured.0 - sd.measured.0).abs() < 1e-7);
        assert!((sd2.measured.1 - sd.measured.1).abs() < 1e-12);
        assert_eq!(single_difference(k, &sats[1], &x, &align), Err(Error::ConstellationMismatch));
    }

    #[test]
    fn jacobian_examples() {
        let align = Alignment { t_w_ecef: Pose::identity(), ..Alignment::new(origin(), 0.0, Vec3::zeros()) };
        let mut x = NavState::new(0.0, ExtendedPose::identity(), Pose::identity(), false);
        x.clock_biases.insert(Constellation::Bds, 0.0);
        x.clock_drift = Some(0.0);
        let obs = SatelliteObservation {
            constellation: Constellation::Bds,
            sat_id: 3,
            position: Vec3::new(0.0, 2.5e7, 0.0),
            velocity: Vec3::zeros(),
            pseudorange: 2.5e7,
            range_rate: 0.0,
            sat_clock: 0.0,
            sat_clock_drift: 0.0,
            delay: 0.0,
        };
        let (cols, h) = gnss_jacobians(&x, &x.layout(), &align, &obs).unwrap();
        assert_eq!(cols.len(), 11);
        assert_eq!(h.fixed_view::<1, 3>(0, 3).into_owned(), RowVector3::new(0.0, -1.0, 0.0));
        assert_eq!(h.fixed_view::<1, 3>(0, 0).amax(), 0.0);
        assert_eq!((h[(0, 9)], h[(1, 10)]), (1.0, 1.0));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut r = rng(2);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let align = Alignment::new(origin(), r.random_range(-3.0..3.0), rvec(&mut r, 100.0));
            let x = gnss_state(&mut r);
            let layout = x.layout();
            let n = layout.dim();
            let sats = random_sats(&mut r, &align, &x, 4);
            for o in &sats {
                let (cols, h) = gnss_jacobians(&x, &layout, &align, o).unwrap();
                let mut full = DMatrix::zeros(2, n);
                for (j, &c) in cols.iter().enumerate() {
                    full.set_column(c, &h.column(j));
                }
                // the line of sight is held fixed for the Doppler row
                let n_fixed = line_of_sight(&align.to_ecef(&x.imu.position), &o.position);
                let eval = |s: &NavState| {
                    let pr = predict_pseudorange(s, &align, o).unwrap();
                    let v = align.t_w_ecef.rotation * s.imu.velocity;
                    let rr = -n_fixed.dot(&(v - o.velocity)) + s.clock_drift.unwrap() - o.sat_clock_drift;
                    DVector::from_vec(alloc::vec![pr, rr])
                };
                let mut fd = DMatrix::zeros(2, n);
                for c in 0..n {
                    let step = 1e-3;
                    let mut d = DVector::zeros(n);
                    d[c] = step;
                    let plus = eval(&boxplus(&x, &d).unwrap());
                    d[c] = -step;
                    let minus = eval(&boxplus(&x, &d).unwrap());
                    fd.set_column(c, &((plus - minus) / (2.0 * step)));
                }
                for row in 0..2 {
                    let rel = (fd.row(row) - full.row(row)).norm() / full.row(row).norm();
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn elevation_weighting_is_monotone() {
        let cfg = GnssConfig::default();
        let mut last = f64::INFINITY;
        for i in 0..=90 {
            let s = cfg.elevation_scale((i as f64).to_radians());
            assert!(s <= last);
            last = s;
        }
        assert_eq!(cfg.elevation_scale(0.0), cfg.elevation_scale(cfg.elevation_mask));
    }

    fn worst_los_change(speed: f64) -> f64 {
        let mut r = rng(3);
        let align = Alignment::new(origin(), 0.0, Vec3::zeros());
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let sat = sat_at(&align, r.random_range(0.0..core::f64::consts::TAU), r.random_range(0.18..1.57));
            let p0 = align.to_ecef(&rvec(&mut r, 1000.0));
            let v = rvec(&mut r, 1.0).normalize() * speed;
            let (n0, n1) = (line_of_sight(&p0, &sat), line_of_sight(&(p0 + v), &sat));
            worst = worst.max(n0.dot(&n1).clamp(-1.0, 1.0).acos());
        }
        worst
    }

    #[test]
    fn line_of_sight_changes_slowly() {
        // 1 s of receiver motion against satellites above the mask. The
        // change is bounded by speed / shortest range (zenith, 26.6e6 m
        // orbit radius minus the Earth radius).
        let zenith_range = 26.6e6 - 6.38e6;
        let at_30 = worst_los_change(30.0);
        assert!(at_30 <= 30.0 / zenith_range, "{at_30}");
        assert!(worst_los_change(20.0) < 1e-6);
    }

    fn spp_truth(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> (NavState, Alignment, Vec<SatelliteObservation>) {
        let align = Alignment::new(origin(), 0.0, Vec3::zeros());
        let mut x = gnss_state(r);
        x.imu.position = rvec(r, 50.0);
        x.imu.velocity = rvec(r, 10.0);
        let sats = random_sats(r, &align, &x, n);
        (x, align, sats)
    }

    #[test]
    fn spp_recovers_noiseless_truth() {
        let mut r = rng(4);
        for _ in 0..20 {
            let (x, align, mut sats) = spp_truth(&mut r, 8);
            for s in sats.iter_mut() {
                s.constellation = Constellation::Gps;
            }
            let mut x = x;
            let gps = x.clock_biases[&Constellation::Gps];
            for s in sats.iter_mut() {
                s.pseudorange = predict_pseudorange(&x, &align, s).unwrap();
                s.range_rate = predict_doppler(&x, &align, s).unwrap();
            }
            let sol = spp_solve(&sats[..6]).unwrap();
            assert!((sol.position - align.to_ecef(&x.imu.position)).norm() < 1e-6);
            assert!((sol.clocks[&Constellation::Gps] - gps).abs() < 1e-6);
            assert!((sol.velocity - align.t_w_ecef.rotation * x.imu.velocity).norm() < 1e-6);
            assert!((sol.drift - x.clock_drift.unwrap()).abs() < 1e-6);
            x.clock_biases.clear();
        }
    }

    #[test]
    fn spp_multi_constellation() {
        let mut r = rng(5);
        let (x, align, sats) = spp_truth(&mut r, 10);
        let sol = spp_solve(&sats).unwrap();
        assert!((sol.position - align.to_ecef(&x.imu.position)).norm() < 1e-6);
        for (c, v) in &sol.clocks {
            assert!((v - x.clock_biases[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_spp_covariance_matches_scatter() {
        use rand_distr::StandardNormal;
        let mut r = rng(15);
        let (x, align, mut sats) = spp_truth(&mut r, 8);
        let cfg = GnssConfig::default();
        let truth = align.to_ecef(&x.imu.position);
        let clean: Vec<f64> = sats.iter().map(|s| predict_pseudorange(&x, &align, s).unwrap()).collect();
        for (s, c) in sats.iter_mut().zip(&clean) {
            s.pseudorange = *c;
        }
        let exact = spp_solve_weighted(&sats, Some(&cfg)).unwrap();
        assert!((exact.position - truth).norm() < 1e-6);
        let trials = 4000;
        let mut scatter = Matrix3::zeros();
        for _ in 0..trials {
            let mut noisy = sats.clone();
            for (s, c) in noisy.iter_mut().zip(&clean) {
                let el = elevation(&truth, &s.position);
                let n: f64 = r.sample(StandardNormal);
                s.pseudorange = c + n * cfg.sigma_pseudorange * cfg.elevation_scale(el).sqrt();
            }
            let d = spp_solve_weighted(&noisy, Some(&cfg)).unwrap().position - truth;
            scatter += d * d.transpose();
        }
        scatter /= trials as f64;
        let c = exact.position_covariance;
        for i in 0..3 {
            assert!((scatter[(i, i)] / c[(i, i)] - 1.0).abs() < 0.1, "{scatter} vs {c}");
        }
    }

    #[test]
    fn spp_failures() {
        let mut r = rng(6);
        let (_, align, mut sats) = spp_truth(&mut r, 6);
        for s in sats.iter_mut() {
            s.constellation = Constellation::Gps;
        }
        assert!(matches!(spp_solve(&sats[..3]), Err(Error::InsufficientSatellites { have: 3, .. })));
        // all satellites on one great circle through the zenith: the receiver
        // cannot be located across that plane
        let coplanar: Vec<SatelliteObservation> = (0..6)
            .map(|i| {
                let mut s = sats[0];
                s.position = sat_at(&align, 0.0, 0.3 + 0.4 * i as f64);
                s
            })
            .collect();
        assert!(matches!(spp_solve(&coplanar), Err(Error::WeakGeometry(_)) | Err(Error::Divergence)));
    }

    #[test]
    fn alignment_examples() {
        let cfg = AlignmentConfig::default();
        let o = origin();
        let enu = enu_frame(&o);
        let vio: Vec<Vec3> = (0..12).map(|i| Vec3::new(i as f64, 0.5 * (i as f64).sin(), 0.1 * i as f64)).collect();
        let spp: Vec<Vec3> = vio.iter().map(|p| enu.transform_point(p)).collect();
        let a = initialize_alignment(&vio, &spp, &cfg).unwrap();
        assert!(a.yaw.abs() < 1e-9);
        assert!(a.translation.norm() < 1e-6);

        let yaw = 30f64.to_radians();
        let t = Vec3::new(3.0, -7.0, 1.0);
        let truth = Alignment::new(o, yaw, t);
        let spp: Vec<Vec3> = vio.iter().map(|p| truth.to_ecef(p)).collect();
        let a = initialize_alignment(&vio, &spp, &cfg).unwrap();
        // the fit's ENU origin sits at the first fix, which tilts its frame
        // by ~1e-6 rad relative to the true one
        assert!((a.yaw - yaw).abs() < 1e-5);
        for p in &vio {
            assert!((a.to_ecef(p) - truth.to_ecef(p)).norm() < 1e-4);
        }
        // first fix at the true origin: identical ENU frames
        let truth0 = Alignment::new(o, yaw, Vec3::zeros());
        let spp: Vec<Vec3> = vio.iter().map(|p| truth0.to_ecef(p)).collect();
        let a = initialize_alignment(&vio, &spp, &cfg).unwrap();
        assert!((a.yaw - yaw).abs() < 1e-9);
        assert!(a.translation.norm() < 1e-6);
        let static_vio = alloc::vec![Vec3::zeros(); 12];
        let spp: Vec<Vec3> = static_vio.iter().map(|p| truth.to_ecef(p)).collect();
        assert!(matches!(initialize_alignment(&static_vio, &spp, &cfg), Err(Error::InsufficientMotion { .. })));
    }

    fn update_setup(r: &mut rand_chacha::ChaCha8Rng) -> (NavState, Covariance, Alignment, Vec<SatelliteObservation>) {
        let (truth, align, sats) = spp_truth(r, 8);
        let mut x = truth.clone();
        x.landmarks.clear();
        let n = x.layout().dim();
        let p = DMatrix::identity(n, n) * 1e-2;
        (x, p, align, sats)
    }

    #[test]
    fn empty_epoch_removes_clocks() {
        let mut r = rng(7);
        let (mut x, mut p, align, _) = update_setup(&mut r);
        let before = x.clone();
        let rep = gnss_update(&mut x, &mut p, &[], &align, &GnssConfig::default(), None).unwrap();
        assert_eq!(rep.clocks_removed.len(), 4);
        assert!(x.clock_biases.is_empty() && x.clock_drift.is_none());
        assert_eq!(x.imu, before.imu);
        assert_eq!(p.nrows(), x.layout().dim());
    }

    #[test]
    fn new_clocks_are_initialized_and_outlier_gated() {
        let mut r = rng(8);
        let (mut x, mut p, align, mut sats) = update_setup(&mut r);
        let truth = x.clone();
        x.clock_biases.clear();
        x.clock_drift = None;
        let n = x.layout().dim();
        p = p.view((0, 0), (n, n)).into_owned();
        sats[5].pseudorange += 100.0;
        let rep = gnss_update(&mut x, &mut p, &sats, &align, &GnssConfig::default(), None).unwrap();
        assert_eq!(rep.clocks_added.len(), 4);
        assert!(rep.drift_added);
        assert_eq!(rep.gated, 1);
        // the best satellite seeds both its clock and the drift, so both of
        // its rows are spent
        assert_eq!(rep.used, 6);
        check_covariance(&p).unwrap();
        for (c, v) in &truth.clock_biases {
            if *c != sats[5].constellation {
                assert!((x.clock_biases[c] - v).abs() < 1e-6, "{c:?}");
            }
        }
    }

    #[test]
    fn gnss_rows_never_touch_clones_directly() {
        let mut r = rng(9);
        let (mut x, _, align, sats) = update_setup(&mut r);
        let n = x.layout().dim();
        // clone uncorrelated with the IMU block
        let mut p = DMatrix::identity(n, n) * 1e-2;
        let c = x.layout().clone_offset(1).unwrap();
        for i in c..c + 6 {
            p[(i, i)] = 0.5;
        }
        x.imu.position += Vec3::new(3.0, -2.0, 1.0);
        let before = x.clones.clone();
        gnss_update(&mut x, &mut p, &sats, &align, &GnssConfig::default(), None).unwrap();
        assert_eq!(x.clones, before);
    }

    #[test]
    fn gnss_update_shrinks_position_covariance() {
        let mut r = rng(10);
        let (mut x, mut p, align, sats) = update_setup(&mut r);
        for i in IMU_POS..IMU_POS + 3 {
            p[(i, i)] = 100.0;
        }
        let before = p.view((IMU_POS, IMU_POS), (3, 3)).trace();
        x.imu.rotation = exp_so3(&Vec3::new(0.0, 0.0, 0.01)) * x.imu.rotation;
        gnss_update(&mut x, &mut p, &sats, &align, &GnssConfig::default(), None).unwrap();
        assert!(p.view((IMU_POS, IMU_POS), (3, 3)).trace() < 0.5 * before);
    }
}

//! Accuracy and consistency metrics.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::chi2;
use crate::geometry::{so3_log, ExtendedPose, Vec3};
use crate::state::{boxminus, Covariance, NavState, IMU_DIM, IMU_ROT};
use crate::{gravity_vector, Error, Result};

/// Right-invariant IMU error `truth ⊟ estimate` (15 entries).
pub fn imu_error(truth: &ExtendedPose, gyro_bias: &Vec3, accel_bias: &Vec3, est: &NavState) -> Result<DVector<f64>> {
    let strip = |x: &NavState| {
        let mut s = NavState::new(x.timestamp, x.imu, x.extrinsics, false);
        s.gyro_bias = x.gyro_bias;
        s.accel_bias = x.accel_bias;
        s
    };
    let mut t = strip(est);
    t.imu = *truth;
    t.gyro_bias = *gyro_bias;
    t.accel_bias = *accel_bias;
    boxminus(&t, &strip(est))
}

/// `eᵀ P⁻¹ e`.
pub fn nees(e: &DVector<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let ch = p.clone().cholesky().ok_or(Error::NotPositiveSemiDefinite)?;
    Ok(e.dot(&ch.solve(e)))
}

/// NEES of the IMU block.
pub fn imu_nees(e: &DVector<f64>, p: &Covariance) -> Result<f64> {
    nees(e, &p.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned())
}

/// Heading error (rad): the world-z component of `log(R Rᵀ_est)`.
pub fn yaw_error(truth: &ExtendedPose, est: &ExtendedPose) -> f64 {
    so3_log(&(truth.rotation * est.rotation.inverse())).z
}

/// Variance of the error along the rotation about gravity, taken as the
/// inverse information `1 / (nᵀ P⁻¹ n)` with `n` holding `ĝ` in every world
/// rotation slot. Updates cannot raise this information when yaw is
/// unobservable and propagation cannot raise it either, so in VIO it never
/// decreases.
pub fn yaw_variance(x: &NavState, p: &Covariance) -> Result<f64> {
    let layout = x.layout();
    let g = gravity_vector().normalize();
    let mut n = DVector::zeros(layout.dim());
    for s in layout.world_rotation_slots() {
        n.fixed_rows_mut::<3>(s).copy_from(&g);
    }
    let ch = p.clone().cholesky().ok_or(Error::NotPositiveSemiDefinite)?;
    Ok(1.0 / n.dot(&ch.solve(&n)))
}

/// Marginal IMU heading variance `ĝᵀ P_θθ ĝ`.
pub fn imu_yaw_marginal_variance(p: &Covariance) -> f64 {
    let g = gravity_vector().normalize();
    let b = p.fixed_view::<3, 3>(IMU_ROT, IMU_ROT);
    g.dot(&(b * g))
}

pub fn rmse(errors: &[f64]) -> Option<f64> {
    if errors.is_empty() {
        return None;
    }
    Some((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Least-squares slope of `y` over `t`.
pub fn slope(t: &[f64], y: &[f64]) -> Option<f64> {
    if t.len() != y.len() || t.len() < 2 {
        return None;
    }
    let n = t.len() as f64;
    let (mt, my) = (t.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = t.iter().map(|a| (a - mt) * (a - mt)).sum();
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// One time-aligned record of an estimate against truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRecord {
    pub t: f64,
    pub error: DVector<f64>,
    /// World-frame position error, m.
    pub position_error: Vec3,
    pub yaw_error: f64,
    pub nees: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub samples: usize,
    pub position_rmse: f64,
    pub final_position_error: f64,
    pub yaw_rmse: f64,
    pub anees: f64,
}

pub fn summarize(records: &[ErrorRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::InsufficientSamples { have: 0, need: 1 });
    }
    let pos: Vec<f64> = records.iter().map(|r| r.position_error.norm()).collect();
    let yaw: Vec<f64> = records.iter().map(|r| r.yaw_error).collect();
    Ok(Summary {
        samples: records.len(),
        position_rmse: rmse(&pos).unwrap(),
        final_position_error: *pos.last().unwrap(),
        yaw_rmse: rmse(&yaw).unwrap(),
        anees: records.iter().map(|r| r.nees).sum::<f64>() / (records.len() as f64 * IMU_DIM as f64),
    })
}

/// Monte Carlo average NEES and its two-sided χ² acceptance interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Anees {
    /// Average NEES over runs and time (not normalized by dimension).
    pub value: f64,
    pub dim: usize,
    pub runs: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Anees {
    /// `runs` runs, each contributing the NEES series `series[r]`.
    pub fn from_runs(series: &[Vec<f64>], dim: usize, confidence: f64) -> Result<Self> {
        let runs = series.len();
        let count: usize = series.iter().map(|s| s.len()).sum();
        if runs == 0 || count == 0 {
            return Err(Error::InsufficientSamples { have: 0, need: 1 });
        }
        let value = series.iter().flatten().sum::<f64>() / count as f64;
        // per-epoch average over runs: χ²(runs·dim) / runs
        let a = (1.0 - confidence) * 0.5;
        let k = runs * dim;
        Ok(Self { value, dim, runs, lower: chi2::quantile(a, k) / runs as f64, upper: chi2::quantile(1.0 - a, k) / runs as f64 })
    }

    /// ANEES divided by the dimension.
    pub fn normalized(&self) -> f64 {
        self.value / self.dim as f64
    }
}

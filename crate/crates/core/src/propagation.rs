//! Mean and covariance propagation between measurement updates.
//!
//! The mean follows the closed-form zero-order-hold solution
//!
//! ```text
//! R' = R Γ₀(ω̃Δt)
//! v' = v + R Γ₁(ω̃Δt) ã Δt + g Δt
//! p' = p + v Δt + R Γ₂(ω̃Δt) ã Δt² + ½ g Δt²
//! t_α' = t_α + f Δt
//! ```
//!
//! with ω̃ = ω_m − b̂_g and ã = a_m − b̂_a. Only the IMU block and the clock
//! block have non-trivial dynamics; extrinsics, clones and landmarks have an
//! identity transition and no process noise, so covariance propagation only
//! touches the rows and columns of those two blocks.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

use crate::geometry::{gamma, gamma_times_vec_jacobian, skew, Mat3, Vec3};
use crate::gravity_vector;
use crate::state::{Constellation, Covariance, NavState, StateLayout, ACCEL_BIAS, GYRO_BIAS, IMU_DIM, IMU_POS, IMU_ROT, IMU_VEL};

pub type Mat15 = SMatrix<f64, 15, 15>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

/// Continuous-time noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// rad/s/√Hz
    pub gyro_noise: f64,
    /// m/s²/√Hz
    pub accel_noise: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
    /// m/√s
    pub clock_bias_walk: f64,
    /// m/s/√s
    pub clock_drift_walk: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gyro_noise: 1.7e-4,
            accel_noise: 2.0e-3,
            gyro_bias_walk: 2.0e-5,
            accel_bias_walk: 3.0e-3,
            clock_bias_walk: 0.1,
            clock_drift_walk: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    #[default]
    FirstOrder,
    Trapezoidal,
}

fn unbiased(x: &NavState, omega_m: &Vec3, accel_m: &Vec3) -> (Vec3, Vec3) {
    (omega_m - x.gyro_bias, accel_m - x.accel_bias)
}

pub fn propagate_mean(x: &NavState, omega_m: &Vec3, accel_m: &Vec3, dt: f64) -> NavState {
    let (w, a) = unbiased(x, omega_m, accel_m);
    let phi = w * dt;
    let g = gravity_vector();
    let r = x.imu.rotation.matrix();
    let mut out = x.clone();
    out.imu.rotation = nalgebra::Rotation3::from_matrix_unchecked(r * gamma(0, &phi));
    out.imu.velocity = x.imu.velocity + r * gamma(1, &phi) * a * dt + g * dt;
    out.imu.position = x.imu.position + x.imu.velocity * dt + r * gamma(2, &phi) * a * (dt * dt) + g * (0.5 * dt * dt);
    if let Some(f) = x.clock_drift {
        for b in out.clock_biases.values_mut() {
            *b += f * dt;
        }
    }
    out.timestamp += dt;
    out
}

fn set(m: &mut Mat15, r: usize, c: usize, b: &Mat3) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

/// 15 × 15 transition of `(δθ, δp, δv, δb_g, δb_a)` over one step, evaluated
/// at the estimate before the step.
pub fn imu_transition(x: &NavState, omega_m: &Vec3, accel_m: &Vec3, dt: f64) -> Mat15 {
    let (w, a) = unbiased(x, omega_m, accel_m);
    let phi = w * dt;
    let g = gravity_vector();
    let next = propagate_mean(x, omega_m, accel_m, dt);
    let r = x.imu.rotation.matrix();
    let rg1 = r * gamma(1, &phi);
    let m1 = gamma_times_vec_jacobian(1, &phi, &a);
    let m2 = gamma_times_vec_jacobian(2, &phi, &a);
    let gx = skew(&g);
    let (p1, v1) = (skew(&next.imu.position), skew(&next.imu.velocity));
    let dt2 = dt * dt;

    let mut f = Mat15::identity();
    set(&mut f, IMU_ROT, GYRO_BIAS, &(-rg1 * dt));

    set(&mut f, IMU_POS, IMU_ROT, &(gx * (0.5 * dt2)));
    set(&mut f, IMU_POS, IMU_VEL, &(Mat3::identity() * dt));
    set(&mut f, IMU_POS, GYRO_BIAS, &(-(r * m2) * (dt2 * dt) - p1 * rg1 * dt));
    set(&mut f, IMU_POS, ACCEL_BIAS, &(-(r * gamma(2, &phi)) * dt2));

    set(&mut f, IMU_VEL, IMU_ROT, &(gx * dt));
    set(&mut f, IMU_VEL, GYRO_BIAS, &(-(r * m1) * dt2 - v1 * rg1 * dt));
    set(&mut f, IMU_VEL, ACCEL_BIAS, &(-rg1 * dt));
    f
}

/// Continuous noise input matrix (15 × 12) for `(n_g, n_a, n_bg, n_ba)`.
pub fn imu_noise_input(x: &NavState) -> SMatrix<f64, 15, 12> {
    let r = *x.imu.rotation.matrix();
    let mut g = SMatrix::<f64, 15, 12>::zeros();
    g.fixed_view_mut::<3, 3>(IMU_ROT, 0).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(IMU_POS, 0).copy_from(&(-skew(&x.imu.position) * r));
    g.fixed_view_mut::<3, 3>(IMU_VEL, 0).copy_from(&(-skew(&x.imu.velocity) * r));
    g.fixed_view_mut::<3, 3>(IMU_VEL, 3).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(GYRO_BIAS, 6).fill_with_identity();
    g.fixed_view_mut::<3, 3>(ACCEL_BIAS, 9).fill_with_identity();
    g
}

/// Error-vector indices with non-trivial dynamics: the IMU block followed by
/// every clock bias and the drift (which sit at the end of the layout).
pub fn dynamic_indices(layout: &StateLayout) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..IMU_DIM).collect();
    let first_clock = Constellation::ALL.iter().filter_map(|c| layout.clock_offset(*c)).chain(layout.drift_offset()).min();
    if let Some(c) = first_clock {
        idx.extend(c..layout.dim());
    }
    idx
}

/// Transition restricted to [`dynamic_indices`].
pub fn dynamic_transition(x: &NavState, layout: &StateLayout, omega_m: &Vec3, accel_m: &Vec3, dt: f64) -> DMatrix<f64> {
    let d = dynamic_indices(layout).len();
    let mut phi = DMatrix::identity(d, d);
    phi.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&imu_transition(x, omega_m, accel_m, dt));
    if let Some(drift) = layout.drift_offset() {
        let base = d - (layout.dim() - drift);
        for i in IMU_DIM..base {
            phi[(i, base)] = dt;
        }
    }
    phi
}

/// Full-size transition matrix Φ_k (identity on extrinsics, clones, landmarks).
pub fn transition_matrix(x: &NavState, omega_m: &Vec3, accel_m: &Vec3, dt: f64) -> DMatrix<f64> {
    let layout = x.layout();
    let idx = dynamic_indices(&layout);
    let dyn_phi = dynamic_transition(x, &layout, omega_m, accel_m, dt);
    let mut phi = DMatrix::identity(layout.dim(), layout.dim());
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            phi[(i, j)] = dyn_phi[(a, b)];
        }
    }
    phi
}

/// Discrete process noise on the dynamic block, `Φ G Q_c Gᵀ Φᵀ Δt` (or the
/// trapezoidal average with `G Q_c Gᵀ Δt`).
pub fn dynamic_noise(x: &NavState, layout: &StateLayout, dyn_phi: &DMatrix<f64>, noise: &NoiseSpec, dt: f64, disc: Discretization) -> DMatrix<f64> {
    let d = dyn_phi.nrows();
    let g = imu_noise_input(x);
    let qc = SMatrix::<f64, 12, 12>::from_diagonal(&SMatrix::<f64, 12, 1>::from_iterator(
        [noise.gyro_noise, noise.accel_noise, noise.gyro_bias_walk, noise.accel_bias_walk]
            .iter()
            .flat_map(|s| core::iter::repeat_n(s * s, 3)),
    ));
    let mut gqg = DMatrix::zeros(d, d);
    gqg.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&(g * qc * g.transpose()));
    let clocks = d - IMU_DIM;
    if clocks > 0 {
        let has_drift = layout.drift_offset().is_some();
        let biases = if has_drift { clocks - 1 } else { clocks };
        for i in 0..biases {
            gqg[(IMU_DIM + i, IMU_DIM + i)] = noise.clock_bias_walk * noise.clock_bias_walk;
        }
        if has_drift {
            gqg[(d - 1, d - 1)] = noise.clock_drift_walk * noise.clock_drift_walk;
        }
    }
    let propagated = dyn_phi * &gqg * dyn_phi.transpose();
    let mut q = match disc {
        Discretization::FirstOrder => propagated * dt,
        Discretization::Trapezoidal => (propagated + gqg) * (0.5 * dt),
    };
    crate::state::symmetrize(&mut q);
    q
}

/// Apply a transition/noise pair acting on `idx` to the full covariance.
pub fn apply_dynamic(p: &mut Covariance, idx: &[usize], phi: &DMatrix<f64>, q: &DMatrix<f64>) {
    let n = p.nrows();
    let d = idx.len();
    let mut dyn_idx = alloc::vec![usize::MAX; n];
    for (a, &i) in idx.iter().enumerate() {
        dyn_idx[i] = a;
    }
    // rows of the dynamic block against every column
    let rows = DMatrix::from_fn(d, n, |a, c| p[(idx[a], c)]);
    let new_rows = phi * rows; // d × n: Φ P_{d,·}
    let mut p_dd = DMatrix::from_fn(d, d, |a, b| new_rows[(a, idx[b])]);
    p_dd = &p_dd * phi.transpose() + q;
    for c in 0..n {
        if dyn_idx[c] != usize::MAX {
            continue;
        }
        for a in 0..d {
            p[(idx[a], c)] = new_rows[(a, c)];
            p[(c, idx[a])] = new_rows[(a, c)];
        }
    }
    for a in 0..d {
        for b in 0..d {
            p[(idx[a], idx[b])] = 0.5 * (p_dd[(a, b)] + p_dd[(b, a)]);
        }
    }
}

/// `P ← Φ P Φᵀ + Q_d` with a full-size Φ whose non-dynamic part is identity.
pub fn propagate_covariance(p: &Covariance, x: &NavState, phi: &DMatrix<f64>, noise: &NoiseSpec, dt: f64, disc: Discretization) -> Covariance {
    let layout = x.layout();
    let idx = dynamic_indices(&layout);
    let dyn_phi = DMatrix::from_fn(idx.len(), idx.len(), |a, b| phi[(idx[a], idx[b])]);
    let q = dynamic_noise(x, &layout, &dyn_phi, noise, dt, disc);
    let mut out = p.clone();
    apply_dynamic(&mut out, &idx, &dyn_phi, &q);
    out
}

/// Accumulates consecutive IMU steps so the full covariance is only touched
/// once per update: `Φ_tot ← Φ Φ_tot`, `Q_tot ← Φ Q_tot Φᵀ + Q`.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub noise: NoiseSpec,
    pub discretization: Discretization,
    layout: Option<StateLayout>,
    idx: Vec<usize>,
    phi: DMatrix<f64>,
    q: DMatrix<f64>,
    steps: usize,
}

impl Propagator {
    pub fn new(noise: NoiseSpec, discretization: Discretization) -> Self {
        Self { noise, discretization, layout: None, idx: Vec::new(), phi: DMatrix::zeros(0, 0), q: DMatrix::zeros(0, 0), steps: 0 }
    }

    pub fn pending_steps(&self) -> usize {
        self.steps
    }

    /// Propagate the mean by one IMU interval and fold the step into the
    /// pending covariance transition. The layout must not change between
    /// [`Propagator::flush`] calls.
    pub fn step(&mut self, x: &mut NavState, omega_m: &Vec3, accel_m: &Vec3, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let layout = x.layout();
        if self.layout.as_ref() != Some(&layout) {
            debug_assert!(self.steps == 0, "layout changed with pending propagation");
            self.idx = dynamic_indices(&layout);
            let d = self.idx.len();
            self.phi = DMatrix::identity(d, d);
            self.q = DMatrix::zeros(d, d);
            self.layout = Some(layout.clone());
        }
        let phi = dynamic_transition(x, &layout, omega_m, accel_m, dt);
        let q = dynamic_noise(x, &layout, &phi, &self.noise, dt, self.discretization);
        self.phi = &phi * &self.phi;
        self.q = &phi * &self.q * phi.transpose() + q;
        self.steps += 1;
        *x = propagate_mean(x, omega_m, accel_m, dt);
    }

    /// Apply the accumulated transition to `p`.
    pub fn flush(&mut self, p: &mut Covariance) {
        if self.steps > 0 {
            apply_dynamic(p, &self.idx, &self.phi, &self.q);
        }
        self.steps = 0;
        self.layout = None;
    }
}

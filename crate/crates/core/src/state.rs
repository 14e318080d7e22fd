//! Filter state, right-invariant error coordinates and covariance bookkeeping.
//!
//! Error layout (fixed order): IMU `δθ, δp, δv` (9), `δb_g, δb_a` (6),
//! extrinsic `δθ_c, δp_c` (6, omitted when frozen), one `δθ, δp` pair per
//! clone in frame order, one `δp_f` per landmark in id order, one clock bias
//! per tracked constellation in [`Constellation::ALL`] order, then the clock
//! drift. With four constellations, `N` clones and `M` landmarks the
//! dimension is `26 + 6N + 3M`.
//!
//! Rotation-carrying blocks use the left-multiplicative error
//! `R = Γ₀(δθ) R̂`, and every translation-type quantity attached to that
//! rotation uses `p = Γ₀(δθ) p̂ + Γ₁(δθ) δp`. A landmark borrows the `δθ` of
//! the clone it is anchored to.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::geometry::{gamma, skew, so3_log, ExtendedPose, Pose, Rotation, Vec3};
use crate::{Error, Result};

pub type FrameId = u64;
pub type FeatureId = u64;
pub type Covariance = DMatrix<f64>;
pub type ErrorVector = DVector<f64>;

pub const IMU_ROT: usize = 0;
pub const IMU_POS: usize = 3;
pub const IMU_VEL: usize = 6;
pub const GYRO_BIAS: usize = 9;
pub const ACCEL_BIAS: usize = 12;
pub const IMU_DIM: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Constellation {
    Gps,
    Bds,
    Gal,
    Glo,
}

impl Constellation {
    pub const ALL: [Constellation; 4] = [Self::Gps, Self::Bds, Self::Gal, Self::Glo];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// A cloned camera pose (`R_cm^w`, `^w p_cm`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraClone {
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vec3,
    pub anchor_frame: FrameId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavState {
    pub timestamp: f64,
    pub imu: ExtendedPose,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    /// Camera-to-IMU transform (`R_c^i`, `^i p_c`).
    pub extrinsics: Pose,
    pub estimate_extrinsics: bool,
    pub clones: BTreeMap<FrameId, CameraClone>,
    pub landmarks: BTreeMap<FeatureId, Landmark>,
    /// `c·t_α` per constellation, metres.
    pub clock_biases: BTreeMap<Constellation, f64>,
    /// `c·f`, metres per second.
    pub clock_drift: Option<f64>,
}

impl NavState {
    pub fn new(timestamp: f64, imu: ExtendedPose, extrinsics: Pose, estimate_extrinsics: bool) -> Self {
        Self {
            timestamp,
            imu,
            gyro_bias: Vec3::zeros(),
            accel_bias: Vec3::zeros(),
            extrinsics,
            estimate_extrinsics,
            clones: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            clock_biases: BTreeMap::new(),
            clock_drift: None,
        }
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::of(self)
    }

    pub fn newest_clone(&self) -> Option<(FrameId, &CameraClone)> {
        self.clones.iter().next_back().map(|(k, v)| (*k, v))
    }

    /// Current camera pose implied by the IMU pose and the extrinsics.
    pub fn camera_pose(&self) -> Pose {
        self.imu.pose().compose(&self.extrinsics)
    }

    /// Left action of a world-frame rigid transform on every world-referenced
    /// quantity (IMU, clones, landmarks). Body-frame quantities are untouched.
    pub fn left_act(&self, g: &Pose) -> NavState {
        let mut out = self.clone();
        out.imu = self.imu.left_act(g);
        for c in out.clones.values_mut() {
            c.pose = g.compose(&c.pose);
        }
        for l in out.landmarks.values_mut() {
            l.position = g.transform_point(&l.position);
        }
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (id, l) in &self.landmarks {
            if !self.clones.contains_key(&l.anchor_frame) {
                return Err(Error::DanglingAnchor { landmark: *id, frame: l.anchor_frame });
            }
        }
        let mut last = f64::NEG_INFINITY;
        for c in self.clones.values() {
            if c.timestamp <= last {
                return Err(Error::Unsorted("clone timestamps"));
            }
            last = c.timestamp;
        }
        Ok(())
    }
}

/// Offsets of every block of the error vector for a given state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateLayout {
    extrinsics: Option<usize>,
    clones: BTreeMap<FrameId, usize>,
    landmarks: BTreeMap<FeatureId, usize>,
    clocks: BTreeMap<Constellation, usize>,
    drift: Option<usize>,
    dim: usize,
}

impl StateLayout {
    pub fn of(x: &NavState) -> Self {
        let mut off = IMU_DIM;
        let extrinsics = if x.estimate_extrinsics {
            off += 6;
            Some(IMU_DIM)
        } else {
            None
        };
        let clones = x
            .clones
            .keys()
            .map(|&k| {
                off += 6;
                (k, off - 6)
            })
            .collect();
        let landmarks = x
            .landmarks
            .keys()
            .map(|&k| {
                off += 3;
                (k, off - 3)
            })
            .collect();
        let clocks = x
            .clock_biases
            .keys()
            .map(|&k| {
                off += 1;
                (k, off - 1)
            })
            .collect();
        let drift = x.clock_drift.map(|_| {
            off += 1;
            off - 1
        });
        Self { extrinsics, clones, landmarks, clocks, drift, dim: off }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Offset of the extrinsic `δθ_c` (`δp_c` follows), if estimated.
    pub fn extrinsics(&self) -> Option<usize> {
        self.extrinsics
    }

    /// Offset of a clone's `δθ` (`δp` follows at +3).
    pub fn clone_offset(&self, id: FrameId) -> Option<usize> {
        self.clones.get(&id).copied()
    }

    pub fn landmark_offset(&self, id: FeatureId) -> Option<usize> {
        self.landmarks.get(&id).copied()
    }

    pub fn clock_offset(&self, c: Constellation) -> Option<usize> {
        self.clocks.get(&c).copied()
    }

    pub fn drift_offset(&self) -> Option<usize> {
        self.drift
    }

    pub fn clone_ids(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.clones.keys().copied()
    }

    /// Offsets of every rotation-error slot that rotates with the world frame
    /// (IMU and clones), and of every world translation-type slot (IMU
    /// position, clone positions, landmarks).
    pub fn world_rotation_slots(&self) -> Vec<usize> {
        let mut v = alloc::vec![IMU_ROT];
        v.extend(self.clones.values().copied());
        v
    }

    pub fn world_position_slots(&self) -> Vec<usize> {
        let mut v = alloc::vec![IMU_POS];
        v.extend(self.clones.values().map(|o| o + 3));
        v.extend(self.landmarks.values().copied());
        v
    }

    /// Offset where the block for a new clone is inserted (after the last clone).
    fn clone_insert_offset(&self) -> usize {
        self.landmarks
            .values()
            .next()
            .or_else(|| self.clocks.values().next())
            .or(self.drift.as_ref())
            .copied()
            .unwrap_or(self.dim)
    }
}

fn plus_pair(r: &Rotation, p: &Vec3, dtheta: &Vec3, dp: &Vec3) -> (Rotation, Vec3) {
    let g0 = gamma(0, dtheta);
    (Rotation::from_matrix_unchecked(g0 * r.matrix()), g0 * p + gamma(1, dtheta) * dp)
}

fn minus_rotation(r1: &Rotation, r0: &Rotation) -> Vec3 {
    so3_log(&(r1 * r0.transpose()))
}

fn minus_translation(dtheta: &Vec3, p1: &Vec3, p0: &Vec3) -> Vec3 {
    let rhs = p1 - gamma(0, dtheta) * p0;
    gamma(1, dtheta).lu().solve(&rhs).unwrap_or(rhs)
}

fn v3(d: &DVector<f64>, off: usize) -> Vec3 {
    Vec3::new(d[off], d[off + 1], d[off + 2])
}

fn set3(d: &mut DVector<f64>, off: usize, v: &Vec3) {
    d.fixed_rows_mut::<3>(off).copy_from(v);
}

/// `x ⊞ δ`.
pub fn boxplus(x: &NavState, delta: &ErrorVector) -> Result<NavState> {
    let layout = x.layout();
    if delta.len() != layout.dim() {
        return Err(Error::DimensionMismatch { expected: layout.dim(), found: delta.len() });
    }
    let mut out = x.clone();
    let dth = v3(delta, IMU_ROT);
    let g0 = gamma(0, &dth);
    let g1 = gamma(1, &dth);
    out.imu.rotation = Rotation::from_matrix_unchecked(g0 * x.imu.rotation.matrix());
    out.imu.position = g0 * x.imu.position + g1 * v3(delta, IMU_POS);
    out.imu.velocity = g0 * x.imu.velocity + g1 * v3(delta, IMU_VEL);
    out.gyro_bias += v3(delta, GYRO_BIAS);
    out.accel_bias += v3(delta, ACCEL_BIAS);
    if let Some(o) = layout.extrinsics() {
        let (r, p) = plus_pair(&x.extrinsics.rotation, &x.extrinsics.translation, &v3(delta, o), &v3(delta, o + 3));
        out.extrinsics = Pose::new(r, p);
    }
    for (id, c) in out.clones.iter_mut() {
        let o = layout.clone_offset(*id).unwrap();
        let (r, p) = plus_pair(&c.pose.rotation, &c.pose.translation, &v3(delta, o), &v3(delta, o + 3));
        c.pose = Pose::new(r, p);
    }
    for (id, l) in out.landmarks.iter_mut() {
        let o = layout.landmark_offset(*id).unwrap();
        let a = layout.clone_offset(l.anchor_frame).ok_or(Error::DanglingAnchor { landmark: *id, frame: l.anchor_frame })?;
        let dth = v3(delta, a);
        l.position = gamma(0, &dth) * l.position + gamma(1, &dth) * v3(delta, o);
    }
    for (c, b) in out.clock_biases.iter_mut() {
        *b += delta[layout.clock_offset(*c).unwrap()];
    }
    if let (Some(f), Some(o)) = (out.clock_drift.as_mut(), layout.drift_offset()) {
        *f += delta[o];
    }
    Ok(out)
}

/// `x1 ⊟ x0`, the exact inverse of [`boxplus`] for states with equal layouts
/// and identical landmark anchors.
pub fn boxminus(x1: &NavState, x0: &NavState) -> Result<ErrorVector> {
    let layout = x0.layout();
    if x1.layout() != layout || x1.estimate_extrinsics != x0.estimate_extrinsics {
        return Err(Error::LayoutMismatch);
    }
    let mut d = DVector::zeros(layout.dim());
    let dth = minus_rotation(&x1.imu.rotation, &x0.imu.rotation);
    set3(&mut d, IMU_ROT, &dth);
    set3(&mut d, IMU_POS, &minus_translation(&dth, &x1.imu.position, &x0.imu.position));
    set3(&mut d, IMU_VEL, &minus_translation(&dth, &x1.imu.velocity, &x0.imu.velocity));
    set3(&mut d, GYRO_BIAS, &(x1.gyro_bias - x0.gyro_bias));
    set3(&mut d, ACCEL_BIAS, &(x1.accel_bias - x0.accel_bias));
    if let Some(o) = layout.extrinsics() {
        let dth = minus_rotation(&x1.extrinsics.rotation, &x0.extrinsics.rotation);
        set3(&mut d, o, &dth);
        set3(&mut d, o + 3, &minus_translation(&dth, &x1.extrinsics.translation, &x0.extrinsics.translation));
    }
    let mut clone_dth = BTreeMap::new();
    for (id, c0) in &x0.clones {
        let c1 = &x1.clones[id];
        let o = layout.clone_offset(*id).unwrap();
        let dth = minus_rotation(&c1.pose.rotation, &c0.pose.rotation);
        set3(&mut d, o, &dth);
        set3(&mut d, o + 3, &minus_translation(&dth, &c1.pose.translation, &c0.pose.translation));
        clone_dth.insert(*id, dth);
    }
    for (id, l0) in &x0.landmarks {
        let l1 = &x1.landmarks[id];
        if l1.anchor_frame != l0.anchor_frame {
            return Err(Error::LayoutMismatch);
        }
        let dth = clone_dth.get(&l0.anchor_frame).ok_or(Error::DanglingAnchor { landmark: *id, frame: l0.anchor_frame })?;
        set3(&mut d, layout.landmark_offset(*id).unwrap(), &minus_translation(dth, &l1.position, &l0.position));
    }
    for (c, b0) in &x0.clock_biases {
        d[layout.clock_offset(*c).unwrap()] = x1.clock_biases[c] - b0;
    }
    if let (Some(o), Some(f0), Some(f1)) = (layout.drift_offset(), x0.clock_drift, x1.clock_drift) {
        d[o] = f1 - f0;
    }
    Ok(d)
}

pub fn symmetrize(p: &mut Covariance) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Symmetric to 1e-9 relative and eigenvalues ≥ −1e-10·trace.
pub fn check_covariance(p: &Covariance) -> Result<()> {
    let scale = p.amax().max(f64::MIN_POSITIVE);
    if (p - p.transpose()).amax() > 1e-9 * scale {
        return Err(Error::NotPositiveSemiDefinite);
    }
    let trace = p.trace();
    let eig = p.clone().symmetric_eigenvalues();
    if eig.min() < -1e-10 * trace.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveSemiDefinite);
    }
    Ok(())
}

/// Invert a symmetric positive definite matrix, falling back to LU.
pub(crate) fn spd_inverse(s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = s.clone().cholesky() {
        return Some(ch.inverse());
    }
    s.clone().try_inverse()
}

/// EKF update in the right-invariant error coordinates.
///
/// `K = P Hᵀ (H P Hᵀ + R)⁻¹`, `x ← x ⊞ K r`; the covariance uses the Joseph
/// expression `(I−KH) P (I−KH)ᵀ + K R Kᵀ`, expanded so that it costs
/// `O(n² m)` instead of `O(n³)`, and is symmetrized afterwards. On failure
/// the state and covariance are left untouched.
pub fn kalman_update(x: &mut NavState, p: &mut Covariance, h: &DMatrix<f64>, r: &DVector<f64>, noise: &DMatrix<f64>) -> Result<()> {
    let n = p.nrows();
    if h.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: h.ncols() });
    }
    let cols: Vec<usize> = (0..n).collect();
    kalman_update_columns(x, p, &cols, h, r, noise)
}

/// [`kalman_update`] for a Jacobian that is zero outside the columns `cols`;
/// `h` holds only those columns.
pub fn kalman_update_columns(
    x: &mut NavState,
    p: &mut Covariance,
    cols: &[usize],
    h: &DMatrix<f64>,
    r: &DVector<f64>,
    noise: &DMatrix<f64>,
) -> Result<()> {
    let n = p.nrows();
    if h.nrows() == 0 {
        return Ok(());
    }
    if h.ncols() != cols.len() || r.len() != h.nrows() || noise.nrows() != h.nrows() || cols.iter().any(|&c| c >= n) {
        return Err(Error::DimensionMismatch { expected: cols.len(), found: h.ncols() });
    }
    let p_cols = p.select_columns(cols);
    let pht = &p_cols * h.transpose();
    let s = h * pht.select_rows(cols) + noise;
    let s_inv = spd_inverse(&s).ok_or(Error::SingularInnovation)?;
    if !s_inv.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularInnovation);
    }
    let k = &pht * &s_inv;
    let dx = &k * r;
    let updated = boxplus(x, &dx)?;
    let kpht = &k * pht.transpose();
    let ksk = (&k * &s) * k.transpose();
    for c in 0..n {
        for rr in 0..n {
            p[(rr, c)] += ksk[(rr, c)] - kpht[(rr, c)] - kpht[(c, rr)];
        }
    }
    symmetrize(p);
    *x = updated;
    Ok(())
}

/// Jacobian (6 × dim) of a new clone's error with respect to the current
/// IMU and extrinsic errors.
pub fn clone_jacobian(x: &NavState, layout: &StateLayout) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(6, layout.dim());
    let ri = *x.imu.rotation.matrix();
    j.fixed_view_mut::<3, 3>(0, IMU_ROT).fill_with_identity();
    j.fixed_view_mut::<3, 3>(3, IMU_POS).fill_with_identity();
    if let Some(o) = layout.extrinsics() {
        j.fixed_view_mut::<3, 3>(0, o).copy_from(&ri);
        j.fixed_view_mut::<3, 3>(3, o).copy_from(&(skew(&x.imu.position) * ri));
        j.fixed_view_mut::<3, 3>(3, o + 3).copy_from(&ri);
    }
    j
}

/// Clone the current camera pose into the state as frame `frame_id`.
pub fn augment_clone(x: &mut NavState, p: &mut Covariance, frame_id: FrameId) -> Result<()> {
    if x.clones.contains_key(&frame_id) {
        return Err(Error::DuplicateFrame(frame_id));
    }
    if let Some((newest, c)) = x.newest_clone() {
        if frame_id < newest || x.timestamp <= c.timestamp {
            return Err(Error::StaleFrame(frame_id));
        }
    }
    let layout = x.layout();
    let j = clone_jacobian(x, &layout);
    let at = layout.clone_insert_offset();
    let jp = &j * &*p;
    let jpj = &jp * j.transpose();
    let cross = jp;
    let n = layout.dim();
    let mut out = DMatrix::zeros(n + 6, n + 6);
    let map = |i: usize| if i < at { i } else { i + 6 };
    for c in 0..n {
        let mc = map(c);
        for r in 0..n {
            out[(map(r), mc)] = p[(r, c)];
        }
        for r in 0..6 {
            out[(at + r, mc)] = cross[(r, c)];
            out[(mc, at + r)] = cross[(r, c)];
        }
    }
    out.view_mut((at, at), (6, 6)).copy_from(&jpj);
    symmetrize(&mut out);
    x.clones.insert(frame_id, CameraClone { pose: x.camera_pose(), timestamp: x.timestamp });
    *p = out;
    Ok(())
}

/// A removable block of the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Clone(FrameId),
    Landmark(FeatureId),
    ClockBias(Constellation),
    ClockDrift,
}

/// Remove blocks from the state; remaining covariance entries are copied verbatim.
pub fn marginalize(x: &mut NavState, p: &mut Covariance, components: &[Component]) -> Result<()> {
    let layout = x.layout();
    let mut drop = alloc::vec![false; layout.dim()];
    for c in components {
        let (off, len) = match *c {
            Component::Clone(id) => {
                if let Some((lid, _)) = x.landmarks.iter().find(|(lid, l)| l.anchor_frame == id && !components.contains(&Component::Landmark(**lid))) {
                    return Err(Error::DanglingAnchor { landmark: *lid, frame: id });
                }
                (layout.clone_offset(id).ok_or(Error::UnknownFrame(id))?, 6)
            }
            Component::Landmark(id) => (layout.landmark_offset(id).ok_or(Error::UnknownLandmark(id))?, 3),
            Component::ClockBias(cst) => (layout.clock_offset(cst).ok_or(Error::MissingClock(cst))?, 1),
            Component::ClockDrift => (layout.drift_offset().ok_or(Error::InvalidConfig("no clock drift in state"))?, 1),
        };
        drop[off..off + len].iter_mut().for_each(|d| *d = true);
    }
    let keep: Vec<usize> = (0..layout.dim()).filter(|&i| !drop[i]).collect();
    *p = DMatrix::from_fn(keep.len(), keep.len(), |r, c| p[(keep[r], keep[c])]);
    for c in components {
        match *c {
            Component::Clone(id) => {
                x.clones.remove(&id);
            }
            Component::Landmark(id) => {
                x.landmarks.remove(&id);
            }
            Component::ClockBias(cst) => {
                x.clock_biases.remove(&cst);
            }
            Component::ClockDrift => x.clock_drift = None,
        }
    }
    Ok(())
}

/// Value of a block being introduced by delayed initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NewBlock {
    Landmark { id: FeatureId, position: Vec3, anchor_frame: FrameId },
    ClockBias { constellation: Constellation, value: f64 },
    ClockDrift { value: f64 },
}

impl NewBlock {
    pub fn dim(&self) -> usize {
        match self {
            NewBlock::Landmark { .. } => 3,
            _ => 1,
        }
    }
}

fn insert_block(x: &mut NavState, block: &NewBlock) -> Result<()> {
    match *block {
        NewBlock::Landmark { id, position, anchor_frame } => {
            if !x.clones.contains_key(&anchor_frame) {
                return Err(Error::UnknownFrame(anchor_frame));
            }
            if x.landmarks.contains_key(&id) {
                return Err(Error::InvalidConfig("landmark already in state"));
            }
            x.landmarks.insert(id, Landmark { position, anchor_frame });
        }
        NewBlock::ClockBias { constellation, value } => {
            if x.clock_biases.contains_key(&constellation) {
                return Err(Error::InvalidConfig("clock bias already in state"));
            }
            x.clock_biases.insert(constellation, value);
        }
        NewBlock::ClockDrift { value } => {
            if x.clock_drift.is_some() {
                return Err(Error::InvalidConfig("clock drift already in state"));
            }
            x.clock_drift = Some(value);
        }
    }
    Ok(())
}

fn block_offset(layout: &StateLayout, block: &NewBlock) -> usize {
    match *block {
        NewBlock::Landmark { id, .. } => layout.landmark_offset(id).unwrap(),
        NewBlock::ClockBias { constellation, .. } => layout.clock_offset(constellation).unwrap(),
        NewBlock::ClockDrift { .. } => layout.drift_offset().unwrap(),
    }
}

/// Delayed initialization with a square, invertible new-block Jacobian.
///
/// The linearized measurement is `r = H_x δx + H_new δnew + n`, `n ~ N(0, R)`.
/// The new error is solved from the residual, `δnew = H_new⁻¹ (r − H_x δx − n)`,
/// which fixes its covariance and its cross-covariance with the existing
/// state. Existing states are not changed.
pub fn delayed_init(
    x: &mut NavState,
    p: &mut Covariance,
    block: NewBlock,
    h_x: &DMatrix<f64>,
    h_new: &DMatrix<f64>,
    r: &DVector<f64>,
    noise: &DMatrix<f64>,
) -> Result<()> {
    let k = block.dim();
    let n = p.nrows();
    if h_new.nrows() != k || h_new.ncols() != k || h_x.nrows() != k || h_x.ncols() != n || r.len() != k {
        return Err(Error::DimensionMismatch { expected: k, found: h_new.nrows() });
    }
    let hinv = h_new.clone().try_inverse().ok_or(Error::SingularInitialization)?;
    let cond_ok = hinv.iter().all(|v| v.is_finite()) && h_new.clone().svd(false, false).singular_values.min() > 1e-12 * h_new.amax().max(1e-300);
    if !cond_ok {
        return Err(Error::SingularInitialization);
    }
    let cross = -(&hinv * h_x * &*p); // k × n
    let new_cov = &hinv * (h_x * &*p * h_x.transpose() + noise) * hinv.transpose();
    let dnew = &hinv * r;

    let mut grown = x.clone();
    insert_block(&mut grown, &block)?;
    let layout = grown.layout();
    let at = block_offset(&layout, &block);
    match (&mut grown, block) {
        (g, NewBlock::Landmark { id, .. }) => {
            let l = g.landmarks.get_mut(&id).unwrap();
            l.position += Vec3::new(dnew[0], dnew[1], dnew[2]);
        }
        (g, NewBlock::ClockBias { constellation, .. }) => *g.clock_biases.get_mut(&constellation).unwrap() += dnew[0],
        (g, NewBlock::ClockDrift { .. }) => *g.clock_drift.as_mut().unwrap() += dnew[0],
    }
    let map = |i: usize| if i < at { i } else { i + k };
    let mut out = DMatrix::zeros(n + k, n + k);
    for c in 0..n {
        let mc = map(c);
        for rr in 0..n {
            out[(map(rr), mc)] = p[(rr, c)];
        }
        for rr in 0..k {
            out[(at + rr, mc)] = cross[(rr, c)];
            out[(mc, at + rr)] = cross[(rr, c)];
        }
    }
    out.view_mut((at, at), (k, k)).copy_from(&new_cov);
    symmetrize(&mut out);
    *x = grown;
    *p = out;
    Ok(())
}

/// Rows left over after a delayed initialization, expressed in the grown layout.
#[derive(Clone, Debug)]
pub struct ResidualRows {
    pub h: DMatrix<f64>,
    pub r: DVector<f64>,
}

/// Delayed initialization from a tall measurement block.
///
/// The rows are whitened with the diagonal noise `sigma²`, rotated by the QR
/// factorization of `H_new` so that the first `k` rows carry all information
/// about the new block (used for [`delayed_init`]) and the remaining rows are
/// independent of it. Those remaining rows are returned (unit noise, new
/// layout) for a regular update.
pub fn initialize_from_rows(
    x: &mut NavState,
    p: &mut Covariance,
    block: NewBlock,
    h_x: &DMatrix<f64>,
    h_new: &DMatrix<f64>,
    r: &DVector<f64>,
    variances: &DVector<f64>,
) -> Result<ResidualRows> {
    let k = block.dim();
    let m = h_x.nrows();
    if m < k {
        return Err(Error::InsufficientSamples { have: m, need: k });
    }
    let mut hx = h_x.clone();
    let mut hn = h_new.clone();
    let mut rr = r.clone();
    for i in 0..m {
        let w = 1.0 / variances[i].sqrt();
        hx.row_mut(i).scale_mut(w);
        hn.row_mut(i).scale_mut(w);
        rr[i] *= w;
    }
    let qr = hn.qr();
    qr.q_tr_mul(&mut hx);
    qr.q_tr_mul(&mut rr);
    let rmat = qr.r();
    let h_init = rmat.view((0, 0), (k, k)).into_owned();
    let hx_init = hx.rows(0, k).into_owned();
    let r_init = rr.rows(0, k).into_owned();
    delayed_init(x, p, block, &hx_init, &h_init, &r_init, &DMatrix::identity(k, k))?;
    let layout = x.layout();
    let at = block_offset(&layout, &block);
    let rest = m - k;
    let n_old = h_x.ncols();
    let mut h = DMatrix::zeros(rest, layout.dim());
    for c in 0..n_old {
        let mc = if c < at { c } else { c + k };
        for i in 0..rest {
            h[(i, mc)] = hx[(k + i, c)];
        }
    }
    Ok(ResidualRows { h, r: rr.rows(k, rest).into_owned() })
}

/// Default prior variances for a freshly created state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialCovariance {
    pub orientation: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub extrinsics: f64,
}

impl Default for InitialCovariance {
    fn default() -> Self {
        Self { orientation: 1e-2, position: 1e-2, velocity: 1e-2, gyro_bias: 1e-4, accel_bias: 1e-4, extrinsics: 1e-4 }
    }
}

impl InitialCovariance {
    /// Diagonal covariance for a state without clones, landmarks or clocks.
    pub fn build(&self, x: &NavState) -> Covariance {
        let layout = x.layout();
        let mut p = DMatrix::zeros(layout.dim(), layout.dim());
        let mut set = |off: usize, v: f64| {
            for i in off..off + 3 {
                p[(i, i)] = v;
            }
        };
        set(IMU_ROT, self.orientation);
        set(IMU_POS, self.position);
        set(IMU_VEL, self.velocity);
        set(GYRO_BIAS, self.gyro_bias);
        set(ACCEL_BIAS, self.accel_bias);
        if let Some(o) = layout.extrinsics() {
            set(o, self.extrinsics);
            set(o + 3, self.extrinsics);
        }
        p
    }
}

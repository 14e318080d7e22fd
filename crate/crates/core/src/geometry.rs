//! Lie-group and frame mathematics.
//!
//! Everything here is a pure function over small fixed-size matrices: the
//! `Γ_m` series that generalizes the SO(3) exponential (`Γ_0`) and its left
//! Jacobian (`Γ_1`), the SO(3) logarithm, rigid and extended poses, and the
//! WGS-84 geodetic / ECEF / ENU conversions used by the GNSS side.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Rotation = Rotation3<f64>;

/// Below this angle the Γ coefficients are evaluated from their Taylor series.
pub const SERIES_THRESHOLD: f64 = 0.1;
const SERIES_TERMS: usize = 8;

/// Skew-symmetric (cross-product) matrix: `skew(v) * w == v.cross(&w)`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
#[inline]
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// `a_j(s) = Σ_k (-s²)^k / (j+2k)!`, the scalar coefficients of the Γ series.
///
/// `Γ_m(θ) = I/m! + a_{m+1}(s) [θ]× + a_{m+2}(s) [θ]×²` with `s = |θ|`.
fn coeff(j: usize, s: f64) -> f64 {
    if s < SERIES_THRESHOLD {
        let s2 = s * s;
        let mut term = 1.0 / factorial(j);
        let mut sum = term;
        for k in 1..SERIES_TERMS {
            term *= -s2 / (((j + 2 * k - 1) * (j + 2 * k)) as f64);
            sum += term;
        }
        return sum;
    }
    let (sn, cs) = s.sin_cos();
    match j {
        0 => cs,
        1 => sn / s,
        2 => (1.0 - cs) / (s * s),
        3 => (s - sn) / (s * s * s),
        4 => (cs - 1.0 + 0.5 * s * s) / (s * s * s * s),
        5 => (sn - s + s * s * s / 6.0) / (s * s * s * s * s),
        _ => unreachable!("Γ coefficients are only needed up to order 5"),
    }
}

/// `b_j(s) = a_j'(s) / s`, used for derivatives of `Γ_m(θ)·a` with respect to θ.
fn coeff_deriv_over_s(j: usize, s: f64) -> f64 {
    if s < SERIES_THRESHOLD {
        let s2 = s * s;
        let mut sum = 0.0;
        let mut pow = 1.0;
        for k in 1..=SERIES_TERMS {
            let sign = if k % 2 == 1 { -1.0 } else { 1.0 };
            sum += sign * 2.0 * k as f64 * pow / factorial(j + 2 * k);
            pow *= s2;
        }
        return sum;
    }
    (coeff(j - 1, s) - j as f64 * coeff(j, s)) / (s * s)
}

/// `Γ_m(θ) = Σ_{n≥0} [θ]×ⁿ / (m+n)!` for `m ∈ {0,1,2,3}`.
///
/// `Γ_0` is the SO(3) exponential, `Γ_1` its left Jacobian.
pub fn gamma(m: usize, theta: &Vec3) -> Mat3 {
    assert!(m <= 3, "gamma is defined here for orders 0..=3");
    let s = theta.norm();
    let k = skew(theta);
    Mat3::identity() / factorial(m) + k * coeff(m + 1, s) + k * k * coeff(m + 2, s)
}

/// Exponential map of SO(3).
pub fn exp_so3(theta: &Vec3) -> Rotation {
    Rotation::from_matrix_unchecked(gamma(0, theta))
}

/// Derivative of `Γ_m(θ)·a` with respect to θ (3×3), for `m ∈ {1, 2}` or any m ≤ 3.
pub fn gamma_times_vec_jacobian(m: usize, theta: &Vec3, a: &Vec3) -> Mat3 {
    let s = theta.norm();
    let k = skew(theta);
    let ka = k * a;
    let kka = k * ka;
    let c1 = coeff(m + 1, s);
    let c2 = coeff(m + 2, s);
    let d1 = coeff_deriv_over_s(m + 1, s);
    let d2 = coeff_deriv_over_s(m + 2, s);
    let dot = theta.dot(a);
    // d(θ×(θ×a))/dθ = (θ·a) I + θ aᵀ − 2 a θᵀ
    let dkka = Mat3::identity() * dot + theta * a.transpose() - a * theta.transpose() * 2.0;
    ka * theta.transpose() * d1 - skew(a) * c1 + kka * theta.transpose() * d2 + dkka * c2
}

/// Logarithm of SO(3); result has norm ≤ π.
pub fn so3_log(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    let w = vee(m);
    let sin_phi = w.norm();
    let cos_phi = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let phi = sin_phi.atan2(cos_phi);

    if cos_phi < -0.99 {
        // near π: axis from the symmetric part, largest diagonal entry of (R+I)/2
        let sym = (m + m.transpose()) * 0.5;
        let aat = (sym - Mat3::identity() * cos_phi) / (1.0 - cos_phi);
        let mut i = 0;
        for j in 1..3 {
            if aat[(j, j)] > aat[(i, i)] {
                i = j;
            }
        }
        let mut axis: Vec3 = aat.column(i).into_owned();
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * phi;
    }
    if phi < 1e-6 {
        return w * (1.0 + phi * phi / 6.0);
    }
    w * (phi / sin_phi)
}

/// Rotation about the world z axis.
pub fn rot_z(angle: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Re-orthonormalize a nearly orthonormal matrix (polar projection via SVD).
pub fn orthonormalize(m: &Mat3) -> Rotation {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    Rotation::from_matrix_unchecked(r)
}

pub fn quaternion_to_rotation(w: f64, x: f64, y: f64, z: f64) -> Rotation {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
    q.to_rotation_matrix()
}

/// `(w, x, y, z)` with non-negative `w`.
pub fn rotation_to_quaternion(r: &Rotation) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(r);
    let q = q.quaternion();
    if q.w < 0.0 {
        [-q.w, -q.i, -q.j, -q.k]
    } else {
        [q.w, q.i, q.j, q.k]
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Element of SE₂(3): attitude, position and velocity of the IMU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtendedPose {
    pub rotation: Rotation,
    pub position: Vec3,
    pub velocity: Vec3,
}

impl ExtendedPose {
    pub fn new(rotation: Rotation, position: Vec3, velocity: Vec3) -> Self {
        Self { rotation, position, velocity }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros())
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    /// Left group action `g ▷ x` by a world-frame transform: rotates and
    /// translates position, rotates velocity.
    pub fn left_act(&self, g: &Pose) -> ExtendedPose {
        ExtendedPose::new(
            g.rotation * self.rotation,
            g.transform_point(&self.position),
            g.rotation * self.velocity,
        )
    }
}

impl Default for ExtendedPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 semi-minor axis (m).
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPoint {
    /// rad
    pub latitude: f64,
    /// rad
    pub longitude: f64,
    /// m above the ellipsoid
    pub height: f64,
}

impl GeodeticPoint {
    pub fn new(latitude: f64, longitude: f64, height: f64) -> Result<Self, Error> {
        let half_pi = core::f64::consts::FRAC_PI_2;
        let pi = core::f64::consts::PI;
        if !(latitude.abs() <= half_pi && longitude.abs() <= pi && height.is_finite()) {
            return Err(Error::InvalidGeodetic { latitude, longitude });
        }
        Ok(Self { latitude, longitude, height })
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Result<Self, Error> {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }
}

fn prime_vertical_radius(lat: f64) -> f64 {
    let s = lat.sin();
    WGS84_A / (1.0 - WGS84_E2 * s * s).sqrt()
}

pub fn geodetic_to_ecef(p: &GeodeticPoint) -> Vec3 {
    let n = prime_vertical_radius(p.latitude);
    let (slat, clat) = p.latitude.sin_cos();
    let (slon, clon) = p.longitude.sin_cos();
    Vec3::new(
        (n + p.height) * clat * clon,
        (n + p.height) * clat * slon,
        (n * (1.0 - WGS84_E2) + p.height) * slat,
    )
}

/// Bounded fixed-point iteration on latitude (≤ 10 iterations, 1e-12 rad).
pub fn ecef_to_geodetic(r: &Vec3) -> Result<GeodeticPoint, Error> {
    if r.norm() < 1_000.0 {
        return Err(Error::NearEarthCenter);
    }
    let p = (r.x * r.x + r.y * r.y).sqrt();
    let lon = r.y.atan2(r.x);
    let height_at = |lat: f64| {
        let (s, c) = lat.sin_cos();
        p * c + r.z * s - WGS84_A * (1.0 - WGS84_E2 * s * s).sqrt()
    };
    let mut lat = r.z.atan2(p * (1.0 - WGS84_E2));
    for _ in 0..10 {
        let n = prime_vertical_radius(lat);
        let h = height_at(lat);
        let next = r.z.atan2(p * (1.0 - WGS84_E2 * n / (n + h)));
        let done = (next - lat).abs() < 1e-12;
        lat = next;
        if done {
            break;
        }
    }
    Ok(GeodeticPoint { latitude: lat, longitude: lon, height: height_at(lat) })
}

/// Rotation whose columns are the local east, north and up axes in ECEF,
/// i.e. it maps ENU coordinates to ECEF directions.
pub fn enu_rotation(origin: &GeodeticPoint) -> Rotation {
    let (slat, clat) = origin.latitude.sin_cos();
    let (slon, clon) = origin.longitude.sin_cos();
    let east = Vec3::new(-slon, clon, 0.0);
    let north = Vec3::new(-slat * clon, -slat * slon, clat);
    let up = Vec3::new(clat * clon, clat * slon, slat);
    Rotation::from_matrix_unchecked(Mat3::from_columns(&[east, north, up]))
}

/// Local ENU frame at `origin` as a pose mapping ENU points to ECEF.
pub fn enu_frame(origin: &GeodeticPoint) -> Pose {
    Pose::new(enu_rotation(origin), geodetic_to_ecef(origin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use core::f64::consts::{FRAC_PI_2, PI};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct truncated matrix power series, independent of the closed forms.
    fn gamma_series(m: usize, theta: &Vec3, terms: usize) -> Mat3 {
        let k = skew(theta);
        let mut pow = Mat3::identity();
        let mut sum = Mat3::zeros();
        for n in 0..terms {
            sum += pow / factorial(m + n);
            pow *= k;
        }
        sum
    }

    fn random_vec(rng: &mut ChaCha8Rng, max_norm: f64) -> Vec3 {
        loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() <= 1.0 {
                return v * max_norm;
            }
        }
    }

    #[test]
    fn gamma_at_zero() {
        assert_eq!(gamma(0, &Vec3::zeros()), Mat3::identity());
        assert_eq!(gamma(2, &Vec3::zeros()), Mat3::identity() * 0.5);
    }

    #[test]
    fn gamma0_quarter_turn_about_x() {
        let g = gamma(0, &Vec3::new(FRAC_PI_2, 0.0, 0.0));
        let expected = Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_relative_eq!(g, expected, epsilon = 1e-15);
        assert_relative_eq!(gamma_series(0, &Vec3::new(FRAC_PI_2, 0.0, 0.0), 40), expected, epsilon = 1e-14);
    }

    #[test]
    fn gamma_matches_series_across_threshold() {
        for &s in &[0.0, 1e-8, 1e-4, 0.05, 0.0999999, 0.1, 0.1000001, 0.5, 2.0, PI] {
            let theta = Vec3::new(0.3, -0.5, 0.81).normalize() * s;
            for m in 0..=3 {
                let diff = (gamma(m, &theta) - gamma_series(m, &theta, 40)).amax();
                assert!(diff < 1e-13, "m={m} s={s} diff={diff}");
            }
        }
    }

    #[test]
    fn gamma0_identity_series_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = random_vec(&mut rng, PI);
            let lhs = gamma(0, &t);
            let rhs = Mat3::identity() + skew(&t) * gamma(1, &t);
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    #[test]
    fn gamma_vec_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = random_vec(&mut rng, 2.5);
            let a = random_vec(&mut rng, 10.0);
            for m in 0..=3 {
                let j = gamma_times_vec_jacobian(m, &t, &a);
                let h = 1e-6;
                for c in 0..3 {
                    let mut tp = t;
                    tp[c] += h;
                    let mut tm = t;
                    tm[c] -= h;
                    let fd = (gamma(m, &tp) * a - gamma(m, &tm) * a) / (2.0 * h);
                    assert!((fd - j.column(c)).norm() < 1e-7 * (1.0 + j.norm()));
                }
            }
        }
        // small angles exercise the series branch of the derivative coefficients
        let t = Vec3::new(1e-3, -2e-3, 5e-4);
        let a = Vec3::new(1.0, 2.0, 3.0);
        let j = gamma_times_vec_jacobian(2, &t, &a);
        let h = 1e-5;
        for c in 0..3 {
            let mut tp = t;
            tp[c] += h;
            let mut tm = t;
            tm[c] -= h;
            let fd = (gamma(2, &tp) * a - gamma(2, &tm) * a) / (2.0 * h);
            assert!((fd - j.column(c)).norm() < 1e-9);
        }
    }

    #[test]
    fn skew_properties() {
        assert_eq!(skew(&Vec3::zeros()), Mat3::zeros());
        assert_eq!(skew(&Vec3::x()) * Vec3::y(), Vec3::z());
        let v = Vec3::new(0.4, -1.2, 3.3);
        assert_eq!(skew(&v).transpose(), -skew(&v));
        assert_eq!(vee(&skew(&v)), v);
    }

    #[test]
    fn log_identity_and_round_trip() {
        assert_eq!(so3_log(&Rotation::identity()), Vec3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let v = random_vec(&mut rng, PI * 0.999_999);
            let back = so3_log(&exp_so3(&v));
            assert!((back - v).norm() < 1e-9, "{v:?} -> {back:?}");
        }
    }

    #[test]
    fn log_at_pi() {
        let r = exp_so3(&Vec3::new(0.0, 0.0, PI));
        let v = so3_log(&r);
        assert!((v.norm() - PI).abs() < 1e-12);
        assert!(v.x.abs() < 1e-12 && v.y.abs() < 1e-12);
        // eigen-axis oracle: R v = v
        assert!((r * v - v).norm() < 1e-12);
        let axis = Vec3::new(1.0, -2.0, 0.5).normalize();
        let r = exp_so3(&(axis * PI));
        let v = so3_log(&r);
        assert!((exp_so3(&v).matrix() - r.matrix()).amax() < 1e-9);
        assert!(v.norm() <= PI + 1e-12);
    }

    #[test]
    fn pose_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let random_pose = |rng: &mut ChaCha8Rng| Pose::new(exp_so3(&random_vec(rng, 3.0)), random_vec(rng, 10.0));
        for _ in 0..100 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!((l.rotation.matrix() - r.rotation.matrix()).amax() < 1e-12);
            assert!((l.translation - r.translation).norm() < 1e-12);
            let id = a.compose(&a.inverse());
            assert!((id.rotation.matrix() - Mat3::identity()).amax() < 1e-12);
            assert!(id.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let r = exp_so3(&Vec3::new(0.3, -1.1, 2.0));
        let q = rotation_to_quaternion(&r);
        let back = quaternion_to_rotation(q[0], q[1], q[2], q[3]);
        assert!((back.matrix() - r.matrix()).amax() < 1e-14);
    }

    #[test]
    fn wgs84_reference_points() {
        let eq = geodetic_to_ecef(&GeodeticPoint::new(0.0, 0.0, 0.0).unwrap());
        assert_relative_eq!(eq, Vec3::new(WGS84_A, 0.0, 0.0), epsilon = 1e-9);
        let pole = geodetic_to_ecef(&GeodeticPoint::new(FRAC_PI_2, 0.0, 0.0).unwrap());
        assert!(pole.x.abs() < 1e-9 && pole.y.abs() < 1e-9);
        assert!((pole.z - WGS84_B).abs() < 1e-8);
    }

    #[test]
    fn wgs84_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let g = GeodeticPoint::new(
                rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
                rng.random_range(-PI..PI),
                rng.random_range(-1_000.0..100_000.0),
            )
            .unwrap();
            let back = ecef_to_geodetic(&geodetic_to_ecef(&g)).unwrap();
            let err = ((back.latitude - g.latitude) * WGS84_A)
                .abs()
                .max(((back.longitude - g.longitude) * WGS84_A * g.latitude.cos()).abs())
                .max((back.height - g.height).abs());
            // one ulp of an ECEF coordinate is already 9.3e-10 m, so the bound is a few ulps
            assert!(err < 8.0 * f64::EPSILON * WGS84_A, "{g:?} {err}");
        }
    }

    #[test]
    fn wgs84_rejects_center_and_bad_input() {
        assert!(matches!(ecef_to_geodetic(&Vec3::new(10.0, 0.0, 0.0)), Err(Error::NearEarthCenter)));
        assert!(GeodeticPoint::new(2.0, 0.0, 0.0).is_err());
        assert!(GeodeticPoint::new(0.0, 3.5, 0.0).is_err());
    }

    #[test]
    fn enu_axes() {
        let o = GeodeticPoint::from_degrees(30.0, 114.0, 20.0).unwrap();
        let r = enu_rotation(&o);
        let m = r.matrix();
        assert!((m.transpose() * m - Mat3::identity()).amax() < 1e-12);
        assert!((m.determinant() - 1.0).abs() < 1e-12);
        // up axis points along increasing height
        let up = geodetic_to_ecef(&GeodeticPoint { height: 21.0, ..o }) - geodetic_to_ecef(&o);
        assert!((up - m.column(2)).norm() < 1e-6);
        let north = geodetic_to_ecef(&GeodeticPoint { latitude: o.latitude + 1e-7, ..o }) - geodetic_to_ecef(&o);
        assert!(north.normalize().dot(&m.column(1)) > 1.0 - 1e-9);
    }
}

//! Symmetries of the GNSS-visual-inertial system and observability checks.
//!
//! With raw line-of-sight vectors `n_1..n_N` held fixed over an analysis
//! window, world translations `t` with `N_g t = 0` leave every single
//! difference unchanged, and a rotation about gravity is a symmetry as long
//! as `g × p` and `g × v` stay in `null(N_g)`. Under the right-invariant
//! error the corresponding error-space directions do not depend on the
//! estimate.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, RowVector3};

use crate::geometry::{exp_so3, skew, Pose, Rotation, Vec3};
use crate::state::{boxminus, NavState, StateLayout, IMU_POS, IMU_ROT, IMU_VEL};
use crate::vision::{feature_rows, predict_observation, Observation};
use crate::{Error, Result};

/// Relative singular-value threshold for rank decisions.
pub const NULL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyReport {
    pub null_dim: usize,
    pub null_basis: Vec<Vec3>,
    pub yaw_unobservable: bool,
    /// `‖N_g (g×p)‖ / (‖g×p‖ + ε)`
    pub residual_gp: f64,
    /// `‖N_g (g×v)‖ / (‖g×v‖ + ε)`
    pub residual_gv: f64,
}

/// Rows `(n_j − n_{j−1})ᵀ R_w^ECEF`, `j = 2..N`.
pub fn build_ng(los: &[Vec3], r_w_ecef: &Rotation) -> Result<DMatrix<f64>> {
    if los.is_empty() {
        return Err(Error::InsufficientSatellites { have: 0, need: 1 });
    }
    let mut unit = Vec::with_capacity(los.len());
    for n in los {
        let norm = n.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig("line-of-sight vector is not unit length"));
        }
        if (norm - 1.0).abs() > 1e-12 {
            log::warn!("renormalizing line of sight with norm {norm}");
        }
        unit.push(n / norm);
    }
    let r = r_w_ecef.matrix();
    let mut m = DMatrix::zeros(los.len() - 1, 3);
    for j in 1..unit.len() {
        let row: RowVector3<f64> = (unit[j] - unit[j - 1]).transpose() * r;
        m.fixed_view_mut::<1, 3>(j - 1, 0).copy_from(&row);
    }
    Ok(m)
}

/// Orthonormal basis (columns) of the right nullspace: right-singular
/// vectors with singular value below `tol · σ_max`.
pub fn nullspace(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 || m.amax() == 0.0 {
        return DMatrix::identity(n, n);
    }
    // pad to at least n rows so the SVD yields a full V
    let padded = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let cols: Vec<DVector<f64>> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] < tol * smax)
        .map(|i| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn relative_residual(ng: &DMatrix<f64>, w: &Vec3) -> f64 {
    if ng.nrows() == 0 {
        return 0.0;
    }
    let r = ng * DVector::from_column_slice(w.as_slice());
    r.norm() / (w.norm() + f64::EPSILON)
}

/// Null space of `N_g` and whether the rotation about gravity survives at
/// the given receiver position and velocity (world frame).
pub fn classify_degeneracy(los: &[Vec3], r_w_ecef: &Rotation, p: &Vec3, v: &Vec3, g: &Vec3) -> Result<DegeneracyReport> {
    let ng = if los.is_empty() { DMatrix::zeros(0, 3) } else { build_ng(los, r_w_ecef)? };
    let basis = nullspace(&ng, NULL_TOL);
    let null_basis: Vec<Vec3> = basis.column_iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    let residual_gp = relative_residual(&ng, &g.cross(p));
    let residual_gv = relative_residual(&ng, &g.cross(v));
    Ok(DegeneracyReport {
        null_dim: null_basis.len(),
        null_basis,
        yaw_unobservable: residual_gp < NULL_TOL && residual_gv < NULL_TOL,
        residual_gp,
        residual_gv,
    })
}

/// Analytic unobservable directions: one column per null-space translation
/// (`t` in every world position-type slot) and, when yaw is unobservable,
/// one column with `ĝ` in the IMU and clone `δθ` slots.
pub fn unobservable_directions(x: &NavState, report: &DegeneracyReport, g: &Vec3) -> DMatrix<f64> {
    let layout = x.layout();
    let k = report.null_dim + usize::from(report.yaw_unobservable);
    let mut n = DMatrix::zeros(layout.dim(), k);
    for (j, t) in report.null_basis.iter().enumerate() {
        for s in layout.world_position_slots() {
            n.fixed_view_mut::<3, 1>(s, j).copy_from(t);
        }
    }
    if report.yaw_unobservable {
        let gh = g.normalize();
        for s in layout.world_rotation_slots() {
            n.fixed_view_mut::<3, 1>(s, k - 1).copy_from(&gh);
        }
    }
    n
}

/// The same directions as the derivative of `(h ▷ x) ⊟ x` over the group
/// parameter, by central differences.
pub fn numeric_unobservable_directions(x: &NavState, report: &DegeneracyReport, g: &Vec3) -> Result<DMatrix<f64>> {
    let mut actions: Vec<fn(f64, &Vec3) -> Pose> = Vec::new();
    let mut dirs: Vec<Vec3> = Vec::new();
    for t in &report.null_basis {
        actions.push(|s, t| Pose::new(Rotation::identity(), t * s));
        dirs.push(*t);
    }
    if report.yaw_unobservable {
        actions.push(|s, gh| Pose::new(exp_so3(&(gh * s)), Vec3::zeros()));
        dirs.push(g.normalize());
    }
    let h = 1e-5;
    let cols: Result<Vec<DVector<f64>>> = actions
        .iter()
        .zip(&dirs)
        .map(|(act, d)| {
            let plus = boxminus(&x.left_act(&act(h, d)), x)?;
            let minus = boxminus(&x.left_act(&act(-h, d)), x)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect();
    let cols = cols?;
    Ok(if cols.is_empty() { DMatrix::zeros(x.layout().dim(), 0) } else { DMatrix::from_columns(&cols) })
}

/// `O = [H_0; H_1 Φ_0; H_2 Φ_1 Φ_0; …]`; `hs.len()` must be `phis.len() + 1`.
pub fn observability_matrix(phis: &[DMatrix<f64>], hs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if hs.len() != phis.len() + 1 {
        return Err(Error::DimensionMismatch { expected: phis.len() + 1, found: hs.len() });
    }
    let n = hs[0].ncols();
    let rows: usize = hs.iter().map(|h| h.nrows()).sum();
    let mut o = DMatrix::zeros(rows, n);
    let mut acc = DMatrix::<f64>::identity(n, n);
    let mut row = 0;
    for (k, h) in hs.iter().enumerate() {
        if h.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: h.ncols() });
        }
        if k > 0 {
            let phi = &phis[k - 1];
            if phi.nrows() != n || phi.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, found: phi.nrows() });
            }
            acc = phi * acc;
        }
        o.view_mut((row, 0), (h.nrows(), n)).copy_from(&(h * &acc));
        row += h.nrows();
    }
    Ok(o)
}

/// Single-difference pseudorange and range-rate rows (satellite `j` minus
/// `j−1`) over the full layout, with the line-of-sight vectors frozen.
pub fn single_difference_rows(x: &NavState, layout: &StateLayout, los: &[Vec3], r_w_ecef: &Rotation) -> DMatrix<f64> {
    let n = layout.dim();
    let m = los.len().saturating_sub(1);
    let mut h = DMatrix::zeros(2 * m, n);
    let (px, vx) = (skew(&x.imu.position), skew(&x.imu.velocity));
    for j in 1..los.len() {
        let d: RowVector3<f64> = (los[j] - los[j - 1]).transpose() * r_w_ecef.matrix();
        let (a, b) = (2 * (j - 1), 2 * (j - 1) + 1);
        h.fixed_view_mut::<1, 3>(a, IMU_ROT).copy_from(&(d * px));
        h.fixed_view_mut::<1, 3>(a, IMU_POS).copy_from(&(-d));
        h.fixed_view_mut::<1, 3>(b, IMU_ROT).copy_from(&(d * vx));
        h.fixed_view_mut::<1, 3>(b, IMU_VEL).copy_from(&(-d));
    }
    h
}

/// Visual rows (left camera) of every in-state landmark seen from every
/// clone that has it in front, over the full layout.
pub fn visual_rows(x: &NavState) -> Result<DMatrix<f64>> {
    let layout = x.layout();
    let mut blocks = Vec::new();
    for (&id, l) in &x.landmarks {
        let obs: Vec<Observation> = x
            .clones
            .iter()
            .filter_map(|(&f, c)| predict_observation(&c.pose, 0, 0.0, &l.position).ok().map(|uv| Observation { frame: f, cam: 0, uv }))
            .collect();
        if obs.is_empty() {
            continue;
        }
        let (rows, _) = feature_rows(x, &layout, &obs, &l.position, l.anchor_frame, 0.0, Some(id))?;
        let mut full = DMatrix::zeros(rows.h.nrows(), layout.dim());
        for (j, &c) in rows.cols.iter().enumerate() {
            full.set_column(c, &rows.h.column(j));
        }
        blocks.push(full);
    }
    Ok(stack_dense(&blocks, layout.dim()))
}

/// Stack dense row blocks with `n` columns.
pub fn stack_dense(blocks: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let m = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(m, n);
    let mut row = 0;
    for b in blocks {
        out.view_mut((row, 0), (b.nrows(), n)).copy_from(b);
        row += b.nrows();
    }
    out
}

/// Smallest singular value of `O` restricted to `span(N)` (orthonormalized)
/// relative to `σ_max(O)`.
pub fn restricted_observability(o: &DMatrix<f64>, n: &DMatrix<f64>) -> f64 {
    if n.ncols() == 0 {
        return f64::INFINITY;
    }
    let q = n.clone().qr().q();
    let on = o * q;
    let smax = o.clone().singular_values().max();
    on.singular_values().min() / smax
}

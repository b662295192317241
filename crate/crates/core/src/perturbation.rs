//! Stain perturbations, their feasibility, projections and rendering.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::StainBudget;
use crate::error::{CasaError, Result};
use crate::image::RgbImage;
use crate::linalg::angle_between;
use crate::stain::{reconstruct, ConcentrationMap, StainMatrix};

/// Margin keeping `1 + delta_h` strictly positive.
pub const EPS_H: f64 = 1e-3;
const ANGLE_TOL: f64 = 1e-9;
const BOX_TOL: f64 = 1e-12;
const ANTIPODAL_MARGIN: f64 = 1e-6;

/// Additive offsets to the reference stain columns and multiplicative
/// per-channel concentration offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainPerturbation {
    /// Column offsets: `delta_w[k]` is added to reference column `k`.
    pub delta_w: [Vector3<f64>; 2],
    pub delta_h: [f64; 2],
}

impl Default for StainPerturbation {
    fn default() -> Self {
        Self::zero()
    }
}

impl StainPerturbation {
    pub fn zero() -> Self {
        Self { delta_w: [Vector3::zeros(); 2], delta_h: [0.0; 2] }
    }

    pub fn is_zero(&self) -> bool {
        self.delta_h.iter().all(|&v| v == 0.0) && self.delta_w.iter().all(|c| c.iter().all(|&v| v == 0.0))
    }

    /// Offsets that move `w_ref` onto the given unit columns.
    ///
    /// A column equal to its reference yields an exactly zero offset.
    pub fn from_columns(w_ref: &StainMatrix, columns: &[Vector3<f64>; 2], delta_h: [f64; 2]) -> Self {
        let delta_w = std::array::from_fn(|k| {
            if columns[k] == *w_ref.column(k) {
                Vector3::zeros()
            } else {
                columns[k] - w_ref.column(k)
            }
        });
        Self { delta_w, delta_h }
    }

    /// Angle of each perturbed column to its reference column.
    pub fn column_angles(&self, w_ref: &StainMatrix) -> [f64; 2] {
        std::array::from_fn(|k| {
            let v = w_ref.column(k) + self.delta_w[k];
            angle_between(&v, w_ref.column(k))
        })
    }

    /// Membership in the feasible set of `budget`.
    pub fn is_feasible(&self, w_ref: &StainMatrix, budget: &StainBudget) -> bool {
        let angles_ok = self
            .column_angles(w_ref)
            .iter()
            .all(|&a| a.is_finite() && a <= budget.tau_w + ANGLE_TOL);
        let box_ok = self
            .delta_h
            .iter()
            .all(|&d| d.abs() <= budget.tau_h + BOX_TOL && d >= -1.0 + EPS_H - BOX_TOL);
        angles_ok && box_ok
    }

    pub fn to_document(&self) -> PerturbationDocument {
        let [a, b] = self.delta_w;
        PerturbationDocument { delta_w: [[a[0], b[0]], [a[1], b[1]], [a[2], b[2]]], delta_h: self.delta_h }
    }
}

/// JSON form: `delta_w` row-major 3x2, `delta_h` per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDocument {
    pub delta_w: [[f64; 2]; 3],
    pub delta_h: [f64; 2],
}

impl From<PerturbationDocument> for StainPerturbation {
    fn from(doc: PerturbationDocument) -> Self {
        let r = doc.delta_w;
        Self {
            delta_w: [Vector3::new(r[0][0], r[1][0], r[2][0]), Vector3::new(r[0][1], r[1][1], r[2][1])],
            delta_h: doc.delta_h,
        }
    }
}

/// Clamps negative components to zero and rescales to unit norm.
fn clamp_to_octant(v: Vector3<f64>) -> Result<Vector3<f64>> {
    let v = v.map(|x| x.max(0.0));
    let norm = v.norm();
    if norm < 1e-9 {
        return Err(CasaError::NullColumn(norm));
    }
    Ok(v / norm)
}

/// Normalized, non-negative columns `w_ref_k + delta_w_k`.
pub fn perturbed_matrix(w_ref: &StainMatrix, delta_w: &[Vector3<f64>; 2]) -> Result<StainMatrix> {
    let mut cols = [Vector3::zeros(); 2];
    for k in 0..2 {
        if delta_w[k].iter().all(|&v| v == 0.0) {
            cols[k] = *w_ref.column(k);
            continue;
        }
        let v = w_ref.column(k) + delta_w[k];
        let norm = v.norm();
        if norm < 1e-9 {
            return Err(CasaError::NullColumn(norm));
        }
        cols[k] = clamp_to_octant(v / norm)?;
    }
    StainMatrix::new(cols[0], cols[1])
}

/// Geodesic projection of the unit vector `v` onto the cap of half-angle
/// `tau_w` around the unit vector `w_ref_col`.
pub fn project_cap(w_ref_col: &Vector3<f64>, v: &Vector3<f64>, tau_w: f64) -> Result<Vector3<f64>> {
    let theta = angle_between(v, w_ref_col);
    if theta <= tau_w {
        return Ok(*v);
    }
    if theta > std::f64::consts::PI - ANTIPODAL_MARGIN {
        return Err(CasaError::Antipodal(theta));
    }
    if tau_w == 0.0 {
        return Ok(*w_ref_col);
    }
    let out = (w_ref_col * (theta - tau_w).sin() + v * tau_w.sin()) / theta.sin();
    Ok(out.normalize())
}

/// Which feasible set a concentration offset is projected onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    /// PGD iterates: stay in the box and keep `1 + delta_h` positive.
    Intermediate,
    /// The returned perturbation.
    Final,
}

/// Box projection of the concentration offsets.
///
/// Both modes clamp to `[max(-tau_h, -1 + EPS_H), tau_h]`; the lower bound
/// only departs from `-tau_h` when `tau_h >= 1 - EPS_H`.
pub fn project_delta_h(delta_h: [f64; 2], tau_h: f64, mode: ProjectionMode) -> [f64; 2] {
    let lower = match mode {
        ProjectionMode::Intermediate | ProjectionMode::Final => (-tau_h).max(-1.0 + EPS_H),
    };
    delta_h.map(|d| d.clamp(lower.min(tau_h), tau_h))
}

/// Renders the perturbed Beer-Lambert image
/// `i0 * exp(-(W_ref + delta_W) (h0 * (1 + delta_h)))`.
pub fn apply_perturbation(
    w_ref: &StainMatrix,
    h0: &ConcentrationMap,
    pert: &StainPerturbation,
    i0: f64,
    width: usize,
    height: usize,
) -> Result<RgbImage> {
    let w = perturbed_matrix(w_ref, &pert.delta_w)?;
    if pert.delta_h == [0.0, 0.0] {
        return reconstruct(&w, h0, i0, width, height);
    }
    let h = h0.scaled([1.0 + pert.delta_h[0], 1.0 + pert.delta_h[1]]);
    reconstruct(&w, &h, i0, width, height)
}

/// Uniformly random rotation of `col` by an angle in `[0, max_angle]`.
fn random_cap_point<R: Rng + ?Sized>(col: &Vector3<f64>, max_angle: f64, rng: &mut R) -> Vector3<f64> {
    let angle = rng.random_range(0.0..=max_angle);
    let tangent = loop {
        let g = Vector3::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
        let t = g - col * col.dot(&g);
        if t.norm() > 1e-6 {
            break t.normalize();
        }
    };
    col * angle.cos() + tangent * angle.sin()
}

/// Random feasible perturbation: each column rotated by a uniform angle in
/// `[0, tau_w]` toward a uniform tangent direction, each concentration
/// offset uniform on `[-min(tau_h, 1 - EPS_H), tau_h]`.
pub fn sample_random_perturbation<R: Rng + ?Sized>(
    w_ref: &StainMatrix,
    budget: &StainBudget,
    rng: &mut R,
) -> StainPerturbation {
    let mut cols = *w_ref.columns();
    if budget.tau_w > 0.0 {
        for (k, col) in cols.iter_mut().enumerate() {
            // Clamping into the octant only ever shrinks the angle to a
            // non-negative reference, so the sample stays in the cap.
            let candidate = random_cap_point(w_ref.column(k), budget.tau_w, rng);
            *col = clamp_to_octant(candidate).unwrap_or(*w_ref.column(k));
        }
    }
    let delta_h = if budget.tau_h > 0.0 {
        let lo = -budget.tau_h.min(1.0 - EPS_H);
        [rng.random_range(lo..=budget.tau_h), rng.random_range(lo..=budget.tau_h)]
    } else {
        [0.0, 0.0]
    };
    StainPerturbation::from_columns(w_ref, &cols, delta_h)
}

//! Probe motion: target orientation from the vessel and surface normals,
//! lateral centering offset, a Cartesian impedance plant with unilateral
//! surface contact, and the contact-force safety stop.
//!
//! Poses are `base_from_probe` at the probe tip, lengths in mm, SI elsewhere.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageCalibration, Mat3, Pose, Vec3};
use crate::phantom::SurfacePlane;

pub const MAX_MARCH_VELOCITY: f64 = 20.0;
/// Smallest allowed angle between vessel and surface normal.
pub const MIN_VESSEL_SURFACE_ANGLE_DEG: f64 = 10.0;

/// Diagonal stiffness, inertia and desired wrench, ordered
/// `(x, y, z, rx, ry, rz)` in the probe frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpedanceParams {
    /// N/m for translation, Nm/rad for rotation.
    pub stiffness: [f64; 6],
    pub damping_ratio: f64,
    /// kg, kg·m².
    pub inertia: [f64; 6],
    /// Wrench the controller adds on top of the spring (N, Nm).
    pub desired_wrench: [f64; 6],
    pub force_limit: f64,
    /// Integration substep (s).
    pub substep: f64,
}

impl Default for ImpedanceParams {
    fn default() -> Self {
        Self {
            stiffness: [1000.0, 1000.0, 300.0, 20.0, 20.0, 2.0],
            damping_ratio: 0.8,
            inertia: [2.0, 2.0, 2.0, 0.02, 0.02, 0.02],
            desired_wrench: [0.0, 0.0, 5.0, 0.0, 0.0, 0.0],
            force_limit: 25.0,
            substep: 1e-4,
        }
    }
}

impl ImpedanceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !self.stiffness.iter().all(|k| *k > 0.0 && k.is_finite()) {
            return bad("stiffness must be > 0");
        }
        if !self.inertia.iter().all(|m| *m > 0.0 && m.is_finite()) {
            return bad("inertia must be > 0");
        }
        if !(self.damping_ratio > 0.0 && self.damping_ratio <= 2.0) {
            return bad("damping_ratio must be in (0, 2]");
        }
        if !(self.force_limit > 0.0) {
            return bad("force_limit must be > 0");
        }
        if !self.desired_wrench.iter().all(|w| w.is_finite()) {
            return bad("desired_wrench must be finite");
        }
        if !(self.substep > 0.0 && self.substep <= 0.02) {
            return bad("substep must be in (0, 0.02] s");
        }
        Ok(())
    }

    /// `2ζ√(K M)` per axis.
    pub fn damping(&self) -> [f64; 6] {
        std::array::from_fn(|i| {
            2.0 * self.damping_ratio * (self.stiffness[i] * self.inertia[i]).sqrt()
        })
    }
}

/// Unilateral spring along the surface normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactModel {
    pub surface: SurfacePlane,
    /// N/m.
    pub stiffness: f64,
}

impl Default for ContactModel {
    fn default() -> Self {
        Self {
            surface: SurfacePlane::default(),
            stiffness: 5000.0,
        }
    }
}

impl ContactModel {
    /// Contact force on the probe tip (N, base frame).
    pub fn force_at(&self, tip: &Vec3) -> Vec3 {
        let depth = self.surface.depth(tip);
        if depth <= 0.0 {
            return Vec3::zeros();
        }
        -self.stiffness * depth * 1e-3 * self.surface.normal.normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeCommand {
    pub target_pose: Pose,
    /// mm/s along the current vessel direction.
    pub march_velocity: f64,
    pub centering_offset: Vec3,
}

impl ProbeCommand {
    pub fn new(target_pose: Pose, march_velocity: f64, centering_offset: Vec3) -> Result<Self> {
        if !(0.0..=MAX_MARCH_VELOCITY).contains(&march_velocity) {
            return Err(Error::InvalidConfig(format!(
                "march velocity {march_velocity} outside [0, {MAX_MARCH_VELOCITY}] mm/s"
            )));
        }
        if target_pose.orthonormality_error() > 1e-9 {
            return Err(Error::DegenerateGeometry(
                "target rotation not orthonormal".into(),
            ));
        }
        Ok(Self {
            target_pose,
            march_velocity,
            centering_offset,
        })
    }
}

/// Probe orientation with `Y_p ∥ n_v` and `Z_p` the surface normal made
/// orthogonal to it. The sign of `Y_p` follows `previous_y` when given.
pub fn target_orientation(
    n_v: &Vec3,
    n_s: &Vec3,
    previous_y: Option<&Vec3>,
) -> Result<Rotation3<f64>> {
    let v = n_v
        .try_normalize(1e-12)
        .ok_or_else(|| Error::DegenerateGeometry("zero vessel direction".into()))?;
    let s = n_s
        .try_normalize(1e-12)
        .ok_or_else(|| Error::DegenerateGeometry("zero surface normal".into()))?;
    if v.dot(&s).abs() >= MIN_VESSEL_SURFACE_ANGLE_DEG.to_radians().cos() {
        return Err(Error::DegenerateGeometry(
            "vessel nearly parallel to the surface normal".into(),
        ));
    }
    let y = match previous_y {
        Some(p) if p.dot(&v) < 0.0 => -v,
        _ => v,
    };
    let z = (s - s.dot(&y) * y).normalize();
    let x = y.cross(&z);
    Ok(Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[
        x, y, z,
    ])))
}

/// Lateral pixel offset of the centroid from the image midline mapped into
/// `{b}` as a direction (rotation and scale only).
pub fn centering_offset(x_c: f64, cal: &ImageCalibration, base_from_probe: &Pose) -> Result<Vec3> {
    let h = cal.lateral_px as f64;
    if !(0.0..=h).contains(&x_c) {
        return Err(Error::PixelOutOfRange {
            axis: "u",
            value: x_c,
            max: h,
        });
    }
    let lateral = cal.lateral_scale() * (cal.lateral_center_px() - x_c);
    Ok(base_from_probe.transform_vector(&Vec3::new(lateral, 0.0, 0.0)))
}

/// Pose plus twist of the probe tip, both velocities in `{b}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeState {
    pub pose: Pose,
    /// mm/s.
    pub linear_velocity: Vec3,
    /// rad/s.
    pub angular_velocity: Vec3,
}

impl ProbeState {
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            pose,
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Contact force magnitude at the end of the step (N).
    pub contact_force: f64,
    /// Largest contact force seen within the step (N).
    pub peak_force: f64,
}

/// Position (m) and rotation-vector (rad) error `target − current`, in the
/// current probe frame.
pub fn pose_error(current: &Pose, target: &Pose) -> [f64; 6] {
    let r = current.rotation();
    let dp = r.inverse() * (target.translation() - current.translation()) * 1e-3;
    let dr = r.inverse() * rotation_vector(&(target.rotation() * r.inverse()));
    [dp.x, dp.y, dp.z, dr.x, dr.y, dr.z]
}

/// `½ vᵀ M v + ½ eᵀ K e` in the probe frame (J).
pub fn lyapunov(state: &ProbeState, target: &Pose, params: &ImpedanceParams) -> f64 {
    let e = pose_error(&state.pose, target);
    let r = state.pose.rotation().inverse();
    let v = r * state.linear_velocity * 1e-3;
    let w = r * state.angular_velocity;
    let vel = [v.x, v.y, v.z, w.x, w.y, w.z];
    (0..6)
        .map(|i| {
            0.5 * params.inertia[i] * vel[i] * vel[i] + 0.5 * params.stiffness[i] * e[i] * e[i]
        })
        .sum()
}

/// Integrates `M ë = K_m e − D ẋ + F_d + F_contact` over `dt` with
/// semi-implicit Euler substeps.
pub fn step_impedance(
    state: &ProbeState,
    target: &Pose,
    params: &ImpedanceParams,
    contact: Option<&ContactModel>,
    dt: f64,
) -> Result<(ProbeState, StepReport)> {
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(Error::InvalidConfig(format!("dt {dt} outside (0, 0.02] s")));
    }
    let damping = params.damping();
    let n = (dt / params.substep).ceil().max(1.0) as usize;
    let h = dt / n as f64;
    let mut s = *state;
    let mut peak: f64 = 0.0;
    for _ in 0..n {
        let r = *s.pose.rotation();
        let r_inv = r.inverse();
        let e = pose_error(&s.pose, target);
        let v = r_inv * s.linear_velocity * 1e-3;
        let w = r_inv * s.angular_velocity;
        let f_contact = contact.map_or(Vec3::zeros(), |c| c.force_at(s.pose.translation()));
        peak = peak.max(f_contact.norm());
        let fc = r_inv * f_contact;
        let mut acc = [0.0; 6];
        let vel = [v.x, v.y, v.z, w.x, w.y, w.z];
        let ext = [fc.x, fc.y, fc.z, 0.0, 0.0, 0.0];
        for i in 0..6 {
            let wrench = params.stiffness[i] * e[i] - damping[i] * vel[i]
                + params.desired_wrench[i]
                + ext[i];
            acc[i] = wrench / params.inertia[i];
        }
        let lin_acc = r * Vec3::new(acc[0], acc[1], acc[2]) * 1e3;
        let ang_acc = r * Vec3::new(acc[3], acc[4], acc[5]);
        s.linear_velocity += lin_acc * h;
        s.angular_velocity += ang_acc * h;
        let rotation = Rotation3::new(s.angular_velocity * h) * r;
        let translation = s.pose.translation() + s.linear_velocity * h;
        s.pose = Pose::new(renormalize(&rotation), translation);
    }
    let end = contact.map_or(0.0, |c| c.force_at(s.pose.translation()).norm());
    Ok((
        s,
        StepReport {
            contact_force: end,
            peak_force: peak.max(end),
        },
    ))
}

/// Rotation vector (axis × angle, angle in [0, π]).
pub fn rotation_vector(r: &Rotation3<f64>) -> Vec3 {
    let q = UnitQuaternion::from_rotation_matrix(r);
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        return 2.0 * v;
    }
    v * (2.0 * s.atan2(w) / s)
}

fn renormalize(r: &Rotation3<f64>) -> Rotation3<f64> {
    let m: Mat3 = *r.matrix();
    Rotation3::from_matrix_eps(&m, 1e-12, 8, *r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStatus {
    Continue,
    Halted,
}

/// Latching over-force stop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyGate {
    limit: f64,
    halted: bool,
}

impl SafetyGate {
    pub fn new(limit: f64) -> Self {
        Self {
            limit,
            halted: false,
        }
    }

    pub fn check(&mut self, contact_force: f64) -> GateStatus {
        if contact_force > self.limit {
            self.halted = true;
        }
        self.status()
    }

    pub fn status(&self) -> GateStatus {
        if self.halted {
            GateStatus::Halted
        } else {
            GateStatus::Continue
        }
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn reset(&mut self) {
        self.halted = false;
    }
}

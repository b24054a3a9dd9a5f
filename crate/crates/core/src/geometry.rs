//! Rigid transforms, the image/probe/flange/base frame chain and the linear
//! probe pixel calibration.
//!
//! Frames: `{b}` robot base, `{f}` flange, `{p}` probe tip, `{I}` image.
//! A pose named `a_from_b` maps coordinates expressed in `{b}` into `{a}`.
//! All lengths are millimetres.

use std::fmt;
use std::ops::Mul;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform in SE(3): rotation followed by translation (mm).
#[derive(Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    rotation: Rotation3<f64>,
    translation: Vec3,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, p, y) = self.rotation.euler_angles();
        f.debug_struct("Pose")
            .field("rpy_deg", &[r.to_degrees(), p.to_degrees(), y.to_degrees()])
            .field(
                "translation",
                &[self.translation.x, self.translation.y, self.translation.z],
            )
            .finish()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw 3×3 matrix, rejecting anything that is not a
    /// proper rotation (orthonormal, det = +1).
    pub fn from_matrix(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho_err = (rotation.transpose() * rotation - Mat3::identity())
            .abs()
            .max();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > ORTHONORMAL_TOL || det_err > ORTHONORMAL_TOL {
            return Err(Error::DegenerateGeometry(format!(
                "rotation is not in SO(3) (|RᵀR − I| = {ortho_err:.3e}, |det − 1| = {det_err:.3e})"
            )));
        }
        Ok(Self::new(
            Rotation3::from_matrix_unchecked(rotation),
            translation,
        ))
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation3::identity(), translation)
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> &Mat3 {
        self.rotation.matrix()
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Column `i` of the rotation, i.e. the i-th axis of the child frame in
    /// parent coordinates.
    pub fn axis(&self, i: usize) -> Vec3 {
        self.rotation.matrix().column(i).into_owned()
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Maximum of |RᵀR − I| and |det R − 1|.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation.matrix();
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
        ortho.max((r.determinant() - 1.0).abs())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// The two probe mountings allowed on the flange: parallel to `{f}` or
/// turned half a revolution about its z axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MountRotation {
    #[default]
    Identity,
    FlippedZ,
}

impl MountRotation {
    pub fn rotation(self) -> Rotation3<f64> {
        match self {
            MountRotation::Identity => Rotation3::identity(),
            MountRotation::FlippedZ => Rotation3::from_matrix_unchecked(Mat3::new(
                -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0,
            )),
        }
    }

    /// `flange_from_probe` for a probe whose tip sits at `tip_offset` (mm) in `{f}`.
    pub fn mount_pose(self, tip_offset: Vec3) -> Pose {
        Pose::new(self.rotation(), tip_offset)
    }
}

/// Linear-array probe calibration mapping image pixels into the probe frame.
///
/// `u` runs laterally along the footprint (`lateral_px` samples), `v` runs in
/// depth (`axial_px` samples). The image plane is the x–z plane of `{p}`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ImageCalibration {
    /// Footprint length of the element array, `L_p` (mm).
    pub footprint_mm: f64,
    /// Imaging depth, `D_I` (mm).
    pub depth_mm: f64,
    /// Lateral pixel count, `H`.
    pub lateral_px: u32,
    /// Axial pixel count, `W`.
    pub axial_px: u32,
    /// Offset from probe origin to the first image row, `ε₀` (mm).
    pub element_offset_mm: f64,
}

impl Default for ImageCalibration {
    fn default() -> Self {
        Self {
            footprint_mm: 37.5,
            depth_mm: 40.0,
            lateral_px: 256,
            axial_px: 256,
            element_offset_mm: 0.0,
        }
    }
}

impl ImageCalibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.footprint_mm > 0.0) || !(self.depth_mm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "footprint ({}) and depth ({}) must be positive",
                self.footprint_mm, self.depth_mm
            )));
        }
        if self.lateral_px < 2 || self.axial_px < 2 {
            return Err(Error::InvalidConfig(format!(
                "image must be at least 2×2 pixels, got {}×{}",
                self.lateral_px, self.axial_px
            )));
        }
        if !self.element_offset_mm.is_finite() {
            return Err(Error::InvalidConfig("element offset must be finite".into()));
        }
        Ok(())
    }

    /// mm per lateral pixel.
    pub fn lateral_scale(&self) -> f64 {
        self.footprint_mm / self.lateral_px as f64
    }

    /// mm per axial pixel.
    pub fn axial_scale(&self) -> f64 {
        self.depth_mm / self.axial_px as f64
    }

    pub fn lateral_center_px(&self) -> f64 {
        self.lateral_px as f64 / 2.0
    }

    /// The 4×4 affine map `p_from_I` acting on `(u, v, 0, 1)`.
    pub fn probe_from_image(&self) -> Matrix4<f64> {
        Matrix4::new(
            self.lateral_scale(),
            0.0,
            0.0,
            -self.footprint_mm / 2.0,
            0.0,
            0.0,
            -1.0,
            0.0,
            0.0,
            self.axial_scale(),
            0.0,
            self.element_offset_mm,
            0.0,
            0.0,
            0.0,
            1.0,
        )
    }

    fn check_pixel(&self, u: f64, v: f64) -> Result<()> {
        let (h, w) = (self.lateral_px as f64, self.axial_px as f64);
        if !(0.0..=h).contains(&u) {
            return Err(Error::PixelOutOfRange {
                axis: "u",
                value: u,
                max: h,
            });
        }
        if !(0.0..=w).contains(&v) {
            return Err(Error::PixelOutOfRange {
                axis: "v",
                value: v,
                max: w,
            });
        }
        Ok(())
    }

    /// Inverse of [`pixel_to_probe`] for points in the image plane. No range check.
    pub fn probe_to_pixel(&self, p: &Vec3) -> (f64, f64) {
        let u = (p.x + self.footprint_mm / 2.0) / self.lateral_scale();
        let v = (p.z - self.element_offset_mm) / self.axial_scale();
        (u, v)
    }

    /// Whether a probe-frame point projects inside the imaged sector.
    pub fn in_field_of_view(&self, p: &Vec3) -> bool {
        let half = self.footprint_mm / 2.0;
        let depth = p.z - self.element_offset_mm;
        p.x >= -half && p.x <= half && depth >= 0.0 && depth <= self.depth_mm
    }

    /// Reads a `key = value` calibration file with keys `L_p_mm`, `D_I_mm`,
    /// `H_px`, `W_px` and the optional `eps0_mm`. `#` starts a comment.
    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv_str(&text)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut footprint = None;
        let mut depth = None;
        let mut lateral = None;
        let mut axial = None;
        let mut offset = 0.0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| {
                    Error::Parse(format!("line {}: expected key = value", lineno + 1))
                })?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {key}: {e}", lineno + 1)))
            };
            let count = |v: &str| -> Result<u32> {
                v.parse::<u32>()
                    .map_err(|e| Error::Parse(format!("line {}: {key}: {e}", lineno + 1)))
            };
            match key {
                "L_p_mm" => footprint = Some(num(value)?),
                "D_I_mm" => depth = Some(num(value)?),
                "H_px" => lateral = Some(count(value)?),
                "W_px" => axial = Some(count(value)?),
                "eps0_mm" => offset = num(value)?,
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        let missing = |k: &str| Error::Parse(format!("missing key `{k}`"));
        let cal = Self {
            footprint_mm: footprint.ok_or_else(|| missing("L_p_mm"))?,
            depth_mm: depth.ok_or_else(|| missing("D_I_mm"))?,
            lateral_px: lateral.ok_or_else(|| missing("H_px"))?,
            axial_px: axial.ok_or_else(|| missing("W_px"))?,
            element_offset_mm: offset,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "L_p_mm = {}\nD_I_mm = {}\nH_px = {}\nW_px = {}\neps0_mm = {}\n",
            self.footprint_mm,
            self.depth_mm,
            self.lateral_px,
            self.axial_px,
            self.element_offset_mm
        )
    }
}

/// Maps pixel `(u, v)` into the probe frame.
pub fn pixel_to_probe(cal: &ImageCalibration, u: f64, v: f64) -> Result<Vec3> {
    cal.check_pixel(u, v)?;
    let h = cal.probe_from_image() * Vector4::new(u, v, 0.0, 1.0);
    Ok(Vec3::new(h.x, h.y, h.z))
}

/// Maps pixel `(u, v)` into `{b}` through `base_from_flange ∘ flange_from_probe ∘ probe_from_image`.
pub fn image_to_base(
    base_from_flange: &Pose,
    flange_from_probe: &Pose,
    cal: &ImageCalibration,
    u: f64,
    v: f64,
) -> Result<Vec3> {
    let p = pixel_to_probe(cal, u, v)?;
    Ok(base_from_flange
        .compose(flange_from_probe)
        .transform_point(&p))
}

/// Unit normal of the plane through three points, signed to agree with
/// `reference` (+z when `None`).
pub fn plane_normal_from_points(
    p1: &Vec3,
    p2: &Vec3,
    p3: &Vec3,
    reference: Option<&Vec3>,
) -> Result<Unit<Vec3>> {
    let cross = (p2 - p1).cross(&(p3 - p1));
    let area = 0.5 * cross.norm();
    if area <= 1e-6 {
        return Err(Error::DegenerateGeometry(format!(
            "points are collinear (triangle area {area:.3e} mm²)"
        )));
    }
    let reference = reference.copied().unwrap_or_else(Vec3::z);
    let n = cross / (2.0 * area);
    let n = if n.dot(&reference) < 0.0 { -n } else { n };
    Ok(Unit::new_unchecked(n))
}

/// Angle between two lines (undirected), in degrees within [0, 90].
pub fn line_angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probe_cal() -> ImageCalibration {
        ImageCalibration::default()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.0..3.0);
        let t = Vec3::new(
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
        );
        Pose::new(
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle),
            t,
        )
    }

    #[test]
    fn center_pixel_maps_to_origin() {
        let p = pixel_to_probe(&probe_cal(), 128.0, 0.0).unwrap();
        assert_abs_diff_eq!(p, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn left_edge_and_far_corner() {
        let p = pixel_to_probe(&probe_cal(), 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(p, Vec3::new(-18.75, 0.0, 0.0), epsilon = 1e-12);
        let p = pixel_to_probe(&probe_cal(), 256.0, 256.0).unwrap();
        assert_abs_diff_eq!(p, Vec3::new(18.75, 0.0, 40.0), epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_pixel_names_axis() {
        match pixel_to_probe(&probe_cal(), 10.0, 300.0) {
            Err(Error::PixelOutOfRange { axis, .. }) => assert_eq!(axis, "v"),
            other => panic!("unexpected {other:?}"),
        }
        match pixel_to_probe(&probe_cal(), -1.0, 0.0) {
            Err(Error::PixelOutOfRange { axis, .. }) => assert_eq!(axis, "u"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn element_offset_shifts_depth() {
        let cal = ImageCalibration {
            element_offset_mm: 1.5,
            ..probe_cal()
        };
        let p = pixel_to_probe(&cal, 128.0, 64.0).unwrap();
        assert_abs_diff_eq!(p, Vec3::new(0.0, 0.0, 10.0 + 1.5), epsilon = 1e-12);
        let (u, v) = cal.probe_to_pixel(&p);
        assert_abs_diff_eq!(u, 128.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 64.0, epsilon = 1e-12);
    }

    #[test]
    fn pixel_map_is_affine() {
        let cal = ImageCalibration {
            footprint_mm: 50.0,
            depth_mm: 60.0,
            lateral_px: 300,
            axial_px: 420,
            element_offset_mm: 0.7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (u0, v0) = (rng.random_range(0.0..300.0), rng.random_range(0.0..420.0));
            let (u1, v1) = (rng.random_range(0.0..300.0), rng.random_range(0.0..420.0));
            let a = pixel_to_probe(&cal, u0, v0).unwrap();
            let b = pixel_to_probe(&cal, u1, v1).unwrap();
            let m = pixel_to_probe(&cal, (u0 + u1) / 2.0, (v0 + v1) / 2.0).unwrap();
            assert_abs_diff_eq!(m, (a + b) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn image_to_base_identity_and_translation() {
        let cal = probe_cal();
        let id = Pose::identity();
        assert_abs_diff_eq!(
            image_to_base(&id, &id, &cal, 128.0, 0.0).unwrap(),
            Vec3::zeros(),
            epsilon = 1e-12
        );
        let shift = Pose::from_translation(Vec3::new(10.0, 0.0, 0.0));
        let raw = pixel_to_probe(&cal, 40.0, 100.0).unwrap();
        let moved = image_to_base(&shift, &id, &cal, 40.0, 100.0).unwrap();
        assert_abs_diff_eq!(moved, raw + Vec3::new(10.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn image_to_base_matches_homogeneous_product() {
        let cal = probe_cal();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let bf = random_pose(&mut rng);
            let fp = random_pose(&mut rng);
            let (u, v) = (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0));
            let oracle = bf.to_homogeneous()
                * fp.to_homogeneous()
                * cal.probe_from_image()
                * Vector4::new(u, v, 0.0, 1.0);
            let got = image_to_base(&bf, &fp, &cal, u, v).unwrap();
            assert_abs_diff_eq!(got, Vec3::new(oracle.x, oracle.y, oracle.z), epsilon = 1e-9);
        }
    }

    #[test]
    fn image_to_base_is_functorial() {
        let cal = probe_cal();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (p1, p2, mount) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let (u, v) = (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0));
            let lhs = image_to_base(&(p1 * p2), &mount, &cal, u, v).unwrap();
            let rhs = p1.transform_point(&image_to_base(&p2, &mount, &cal, u, v).unwrap());
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
        }
    }

    #[test]
    fn pose_inverse_and_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let id = a * a.inverse();
            assert!((id.rotation_matrix() - Mat3::identity()).abs().max() < 1e-9);
            assert!(id.translation().norm() < 1e-9);
            let l = (a * b) * c;
            let r = a * (b * c);
            assert!((l.to_homogeneous() - r.to_homogeneous()).abs().max() < 1e-9);
            assert!(l.orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn from_matrix_rejects_reflection() {
        let reflect = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::from_matrix(reflect, Vec3::zeros()).is_err());
        assert!(Pose::from_matrix(
            MountRotation::FlippedZ.rotation().into_inner(),
            Vec3::zeros()
        )
        .is_ok());
    }

    #[test]
    fn plane_normal_sign_convention() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        let n = plane_normal_from_points(&a, &b, &c, None).unwrap();
        assert_abs_diff_eq!(n.into_inner(), Vec3::z(), epsilon = 1e-12);
        let n = plane_normal_from_points(&a, &b, &c, Some(&-Vec3::z())).unwrap();
        assert_abs_diff_eq!(n.into_inner(), -Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn plane_normal_of_analytic_plane() {
        // 2x + y + 2z = 5
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let on_plane = |x: f64, y: f64| Vec3::new(x, y, (5.0 - 2.0 * x - y) / 2.0);
        let expected = Vec3::new(2.0, 1.0, 2.0) / 3.0;
        for _ in 0..50 {
            let pts: Vec<Vec3> = (0..3)
                .map(|_| on_plane(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
                .collect();
            let n = plane_normal_from_points(&pts[0], &pts[1], &pts[2], None).unwrap();
            assert_abs_diff_eq!(n.into_inner(), expected, epsilon = 1e-9);
            // permutation invariance under the sign rule
            let m = plane_normal_from_points(&pts[2], &pts[0], &pts[1], None).unwrap();
            let k = plane_normal_from_points(&pts[1], &pts[0], &pts[2], None).unwrap();
            assert_abs_diff_eq!(m.into_inner(), n.into_inner(), epsilon = 1e-9);
            assert_abs_diff_eq!(k.into_inner(), n.into_inner(), epsilon = 1e-9);
        }
    }

    #[test]
    fn collinear_points_rejected() {
        let r = plane_normal_from_points(&Vec3::zeros(), &Vec3::x(), &(Vec3::x() * 2.0), None);
        assert!(matches!(r, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn kv_calibration_roundtrip() {
        let text = "# probe\nL_p_mm = 37.5\nD_I_mm = 40\nH_px = 256\nW_px = 256\neps0_mm = 0.25 # standoff\n";
        let cal = ImageCalibration::from_kv_str(text).unwrap();
        assert_eq!(cal.lateral_px, 256);
        assert_eq!(cal.element_offset_mm, 0.25);
        assert_eq!(
            ImageCalibration::from_kv_str(&cal.to_kv_string()).unwrap(),
            cal
        );
        assert!(
            ImageCalibration::from_kv_str("L_p_mm = 1\nD_I_mm = 1\nH_px = 1\nW_px = 4").is_err()
        );
        assert!(ImageCalibration::from_kv_str("L_p_mm = 1\nfoo = 2").is_err());
    }
}

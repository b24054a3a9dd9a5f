//! Ground-truth tubular phantom, plane-cut imaging and the synthetic
//! segmentation error model.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::buffer::{mean, BoundaryCloud};
use crate::error::{Error, Result};
use crate::geometry::{ImageCalibration, Pose, Vec3};

/// Largest allowed turn between consecutive polyline segments.
pub const MAX_KINK_DEG: f64 = 30.0;

/// Tube axis in `{b}`, parameterised by arclength `s` (mm). Every variant is
/// extended indefinitely past its ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Centerline {
    Straight {
        point: Vec3,
        direction: Vec3,
    },
    Polyline {
        vertices: Vec<Vec3>,
    },
    Helix {
        center: Vec3,
        axis: Vec3,
        radius: f64,
        /// Rise per full turn (mm).
        pitch: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadiusProfile {
    Constant {
        radius: f64,
    },
    /// Gaussian bump (amplitude > 0, aneurysm) or dip (amplitude < 0, stenosis).
    Bump {
        base: f64,
        amplitude: f64,
        center_s: f64,
        width: f64,
    },
}

impl RadiusProfile {
    pub fn at(&self, s: f64) -> f64 {
        match *self {
            RadiusProfile::Constant { radius } => radius,
            RadiusProfile::Bump {
                base,
                amplitude,
                center_s,
                width,
            } => base + amplitude * (-(s - center_s).powi(2) / (2.0 * width * width)).exp(),
        }
    }

    pub fn min_radius(&self) -> f64 {
        match *self {
            RadiusProfile::Constant { radius } => radius,
            RadiusProfile::Bump {
                base, amplitude, ..
            } => base + amplitude.min(0.0),
        }
    }

    pub fn max_radius(&self) -> f64 {
        match *self {
            RadiusProfile::Constant { radius } => radius,
            RadiusProfile::Bump {
                base, amplitude, ..
            } => base + amplitude.max(0.0),
        }
    }
}

/// Skin surface plane; `normal` points into the tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePlane {
    pub point: Vec3,
    pub normal: Vec3,
}

impl Default for SurfacePlane {
    fn default() -> Self {
        Self {
            point: Vec3::zeros(),
            normal: Vec3::z(),
        }
    }
}

impl SurfacePlane {
    /// Signed depth of `p` below the surface.
    pub fn depth(&self, p: &Vec3) -> f64 {
        (p - self.point).dot(&self.normal)
    }

    pub fn project(&self, p: &Vec3) -> Vec3 {
        p - self.depth(p) * self.normal
    }
}

struct HelixFrame {
    e1: Vec3,
    e2: Vec3,
    axis: Vec3,
    rise: f64,
    len: f64,
}

impl Centerline {
    fn helix_frame(axis: &Vec3, radius: f64, pitch: f64) -> HelixFrame {
        let a = axis.normalize();
        let seed = if a.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let e1 = (seed - a * a.dot(&seed)).normalize();
        let e2 = a.cross(&e1);
        let rise = pitch / TAU;
        HelixFrame {
            e1,
            e2,
            axis: a,
            rise,
            len: (radius * radius + rise * rise).sqrt(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Centerline::Straight { direction, .. } => {
                if !(direction.norm() > 1e-12) {
                    return Err(Error::InvalidConfig(
                        "straight centerline needs a nonzero direction".into(),
                    ));
                }
            }
            Centerline::Polyline { vertices } => {
                if vertices.len() < 2 {
                    return Err(Error::InvalidConfig(
                        "polyline needs at least two vertices".into(),
                    ));
                }
                for w in vertices.windows(2) {
                    if !((w[1] - w[0]).norm() > 1e-9) {
                        return Err(Error::InvalidConfig(
                            "polyline has a zero-length segment".into(),
                        ));
                    }
                }
                for w in vertices.windows(3) {
                    let a = (w[1] - w[0]).normalize();
                    let b = (w[2] - w[1]).normalize();
                    let turn = a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees();
                    if turn >= MAX_KINK_DEG {
                        return Err(Error::InvalidConfig(format!(
                            "polyline turns by {turn:.1}° (limit {MAX_KINK_DEG}°)"
                        )));
                    }
                }
            }
            Centerline::Helix {
                axis,
                radius,
                pitch,
                ..
            } => {
                if !(axis.norm() > 1e-12) || !(*radius >= 0.0) || !(pitch.abs() > 1e-9) {
                    return Err(Error::InvalidConfig(
                        "helix needs a nonzero axis, radius ≥ 0 and nonzero pitch".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn point(&self, s: f64) -> Vec3 {
        match self {
            Centerline::Straight { point, direction } => point + direction.normalize() * s,
            Centerline::Polyline { vertices } => {
                let (k, tau) = self.polyline_locate(vertices, s);
                vertices[k] + (vertices[k + 1] - vertices[k]).normalize() * tau
            }
            Centerline::Helix {
                center,
                axis,
                radius,
                pitch,
            } => {
                let h = Self::helix_frame(axis, *radius, *pitch);
                let t = s / h.len;
                center + *radius * (t.cos() * h.e1 + t.sin() * h.e2) + h.rise * t * h.axis
            }
        }
    }

    pub fn tangent(&self, s: f64) -> Vec3 {
        match self {
            Centerline::Straight { direction, .. } => direction.normalize(),
            Centerline::Polyline { vertices } => {
                let (k, _) = self.polyline_locate(vertices, s);
                (vertices[k + 1] - vertices[k]).normalize()
            }
            Centerline::Helix {
                axis,
                radius,
                pitch,
                ..
            } => {
                let h = Self::helix_frame(axis, *radius, *pitch);
                let t = s / h.len;
                (*radius * (-t.sin() * h.e1 + t.cos() * h.e2) + h.rise * h.axis) / h.len
            }
        }
    }

    /// Segment index and offset within it for arclength `s`.
    fn polyline_locate(&self, vertices: &[Vec3], s: f64) -> (usize, f64) {
        let last = vertices.len() - 2;
        let mut start = 0.0;
        for k in 0..=last {
            let len = (vertices[k + 1] - vertices[k]).norm();
            if s < start + len || k == last {
                return (k, s - start);
            }
            start += len;
        }
        unreachable!("polyline has at least one segment")
    }

    /// Arclength of the axis point closest to `p`, searched near `hint` for
    /// curved variants.
    pub fn closest_arclength(&self, p: &Vec3, hint: f64) -> f64 {
        match self {
            Centerline::Straight { point, direction } => (p - point).dot(&direction.normalize()),
            Centerline::Polyline { vertices } => {
                let last = vertices.len() - 2;
                let mut start = 0.0;
                let mut best = (f64::INFINITY, 0.0);
                for k in 0..=last {
                    let seg = vertices[k + 1] - vertices[k];
                    let len = seg.norm();
                    let dir = seg / len;
                    let mut tau = (p - vertices[k]).dot(&dir);
                    if k > 0 {
                        tau = tau.max(0.0);
                    }
                    if k < last {
                        tau = tau.min(len);
                    }
                    let d = (vertices[k] + dir * tau - p).norm_squared();
                    if d < best.0 {
                        best = (d, start + tau);
                    }
                    start += len;
                }
                best.1
            }
            Centerline::Helix {
                center,
                axis,
                radius,
                pitch,
            } => {
                let h = Self::helix_frame(axis, *radius, *pitch);
                let at = |t: f64| {
                    center + *radius * (t.cos() * h.e1 + t.sin() * h.e2) + h.rise * t * h.axis
                };
                let dist = |t: f64| (at(t) - p).norm_squared();
                let t_hint = hint / h.len;
                let samples = 90;
                let (lo, hi) = (t_hint - PI / 2.0, t_hint + PI / 2.0);
                let step = (hi - lo) / samples as f64;
                let mut best_t = lo;
                let mut best_d = f64::INFINITY;
                for i in 0..=samples {
                    let t = lo + step * i as f64;
                    let d = dist(t);
                    if d < best_d {
                        best_d = d;
                        best_t = t;
                    }
                }
                golden_min(dist, best_t - step, best_t + step) * h.len
            }
        }
    }

    /// Arclength where the axis crosses the plane through `origin` with
    /// normal `normal`, choosing the crossing nearest `near`.
    pub fn plane_crossing(&self, origin: &Vec3, normal: &Vec3, near: &Vec3) -> Option<f64> {
        let side = |s: f64| (self.point(s) - origin).dot(normal);
        match self {
            Centerline::Straight { point, direction } => {
                let d = direction.normalize();
                let denom = d.dot(normal);
                if denom.abs() < 1e-9 {
                    return None;
                }
                Some((origin - point).dot(normal) / denom)
            }
            Centerline::Polyline { vertices } => {
                let last = vertices.len() - 2;
                let mut start = 0.0;
                let mut best: Option<(f64, f64)> = None;
                for k in 0..=last {
                    let seg = vertices[k + 1] - vertices[k];
                    let len = seg.norm();
                    let dir = seg / len;
                    let denom = dir.dot(normal);
                    if denom.abs() > 1e-12 {
                        let tau = (origin - vertices[k]).dot(normal) / denom;
                        let lower_ok = k == 0 || tau >= 0.0;
                        let upper_ok = k == last || tau <= len;
                        if lower_ok && upper_ok {
                            let d = (vertices[k] + dir * tau - near).norm();
                            if best.is_none_or(|(bd, _)| d < bd) {
                                best = Some((d, start + tau));
                            }
                        }
                    }
                    start += len;
                }
                best.map(|(_, s)| s)
            }
            Centerline::Helix {
                center,
                axis,
                radius,
                pitch,
            } => {
                let h = Self::helix_frame(axis, *radius, *pitch);
                let t0 = (origin - center).dot(&h.axis) / h.rise;
                let (lo, hi) = ((t0 - 2.0 * TAU) * h.len, (t0 + 2.0 * TAU) * h.len);
                let samples = 2000;
                let step = (hi - lo) / samples as f64;
                let mut best: Option<(f64, f64)> = None;
                let mut prev = (lo, side(lo));
                for i in 1..=samples {
                    let s = lo + step * i as f64;
                    let cur = (s, side(s));
                    if prev.1 == 0.0 || prev.1.signum() != cur.1.signum() {
                        let root = bisect(side, prev.0, cur.0);
                        let d = (self.point(root) - near).norm();
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, root));
                        }
                    }
                    prev = cur;
                }
                best.map(|(_, s)| s)
            }
        }
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..100 {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

/// Root of `f` on `[lo, hi]` given a sign change.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Ground-truth tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubePhantom {
    pub centerline: Centerline,
    pub radius: RadiusProfile,
    #[serde(default)]
    pub surface: SurfacePlane,
}

/// Where the imaging plane meets the true axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceTruth {
    pub arclength: f64,
    pub center: Vec3,
    pub tangent: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct Slice {
    pub cloud: BoundaryCloud,
    pub visible: bool,
    pub truth: Option<SliceTruth>,
}

impl TubePhantom {
    pub fn straight(point: Vec3, direction: Vec3, radius: f64) -> Self {
        Self {
            centerline: Centerline::Straight { point, direction },
            radius: RadiusProfile::Constant { radius },
            surface: SurfacePlane::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.centerline.validate()?;
        if !(self.radius.min_radius() > 0.0) {
            return Err(Error::InvalidConfig(
                "radius profile must stay positive".into(),
            ));
        }
        if let RadiusProfile::Bump { width, .. } = self.radius {
            if !(width > 0.0) {
                return Err(Error::InvalidConfig("bump width must be positive".into()));
            }
        }
        if !(self.surface.normal.norm() > 1e-12) {
            return Err(Error::InvalidConfig(
                "surface normal must be nonzero".into(),
            ));
        }
        Ok(())
    }

    /// Unit surface normal pointing into the tissue.
    pub fn surface_normal(&self) -> Vec3 {
        self.surface.normal.normalize()
    }

    /// Signed distance of `p` from the tube wall (negative inside).
    fn wall_distance(&self, p: &Vec3, hint: f64) -> f64 {
        let s = self.centerline.closest_arclength(p, hint);
        (p - self.centerline.point(s)).norm() - self.radius.at(s)
    }

    /// Axis crossing for the image plane of `base_from_probe`, taking the
    /// crossing nearest the image centre when there are several.
    pub fn truth_at(&self, base_from_probe: &Pose, cal: &ImageCalibration) -> Option<SliceTruth> {
        let origin = base_from_probe.translation();
        let normal = base_from_probe.axis(1);
        let center = base_from_probe.transform_point(&Vec3::new(
            0.0,
            0.0,
            cal.element_offset_mm + cal.depth_mm / 2.0,
        ));
        let s = self.centerline.plane_crossing(origin, &normal, &center)?;
        Some(SliceTruth {
            arclength: s,
            center: self.centerline.point(s),
            tangent: self.centerline.tangent(s),
            radius: self.radius.at(s),
        })
    }
}

/// Cuts the tube with the image plane (x–z plane of `{p}`) and samples
/// `n_points` boundary points at uniform polar angle about the axis
/// crossing, keeping those inside the field of view.
pub fn slice_tube(
    phantom: &TubePhantom,
    base_from_probe: &Pose,
    cal: &ImageCalibration,
    n_points: usize,
) -> Result<Slice> {
    if n_points < 8 {
        return Err(Error::InvalidConfig(format!(
            "slice needs ≥ 8 points, got {n_points}"
        )));
    }
    let empty = |truth| Slice {
        cloud: BoundaryCloud::empty(0, 0.0, *base_from_probe),
        visible: false,
        truth,
    };
    let Some(truth) = phantom.truth_at(base_from_probe, cal) else {
        return Ok(empty(None));
    };
    let lateral = base_from_probe.axis(0);
    let depth = base_from_probe.axis(2);
    let probe_from_base = base_from_probe.inverse();
    let hint = truth.arclength;
    let reach = 1e3 * phantom.radius.max_radius().max(1.0);

    let mut points = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let phi = TAU * k as f64 / n_points as f64;
        let w = phi.cos() * lateral + phi.sin() * depth;
        let g = |rho: f64| phantom.wall_distance(&(truth.center + rho * w), hint);
        let mut hi = truth.radius.max(1e-3);
        while g(hi) <= 0.0 {
            hi *= 2.0;
            if hi > reach {
                break;
            }
        }
        if hi > reach {
            continue;
        }
        let rho = bisect(g, 0.0, hi);
        let p = truth.center + rho * w;
        if cal.in_field_of_view(&probe_from_base.transform_point(&p)) {
            points.push(p);
        }
    }
    if points.is_empty() {
        return Ok(empty(Some(truth)));
    }
    Ok(Slice {
        cloud: BoundaryCloud::new(0, 0.0, *base_from_probe, points),
        visible: true,
        truth: Some(truth),
    })
}

/// Serializable knobs of the segmentation error model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Isotropic Gaussian jitter on boundary points (mm).
    pub boundary_jitter_sigma: f64,
    /// Fraction of points replaced by uniform points in the field of view.
    pub outlier_rate: f64,
    /// Probability of dropping each point.
    pub dropout_rate: f64,
    /// Per-frame probability of a spurious second detection.
    pub false_positive_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            boundary_jitter_sigma: 0.15,
            outlier_rate: 0.005,
            dropout_rate: 0.05,
            false_positive_rate: 0.05,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            boundary_jitter_sigma: 0.0,
            outlier_rate: 0.0,
            dropout_rate: 0.0,
            false_positive_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.boundary_jitter_sigma >= 0.0) {
            return Err(Error::InvalidConfig("jitter sigma must be ≥ 0".into()));
        }
        let unit_open = |x: f64| (0.0..1.0).contains(&x);
        if !unit_open(self.outlier_rate) {
            return Err(Error::InvalidConfig(
                "outlier_rate must be in [0, 1)".into(),
            ));
        }
        // dropout of 1.0 is allowed: it models a frame with no usable boundary
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(
                "dropout_rate must be in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.false_positive_rate) {
            return Err(Error::InvalidConfig(
                "false_positive_rate must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Segmentation error model with its own seeded random stream.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    spec: NoiseSpec,
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoiseModel {
    pub fn new(spec: NoiseSpec, rng_seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            seed: rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn uniform_fov_point(&mut self, cal: &ImageCalibration, base_from_probe: &Pose) -> Vec3 {
        let x = self
            .rng
            .random_range(-cal.footprint_mm / 2.0..=cal.footprint_mm / 2.0);
        let z = cal.element_offset_mm + self.rng.random_range(0.0..=cal.depth_mm);
        base_from_probe.transform_point(&Vec3::new(x, 0.0, z))
    }
}

/// Applies dropout, outlier replacement and Gaussian jitter, in that order
/// per point. Outliers are drawn uniformly over the image of the cloud's
/// acquisition pose.
pub fn corrupt_cloud(
    cloud: &BoundaryCloud,
    noise: &mut NoiseModel,
    cal: &ImageCalibration,
) -> BoundaryCloud {
    let spec = noise.spec;
    let jitter = Normal::new(0.0, spec.boundary_jitter_sigma.max(0.0)).expect("sigma validated");
    let mut out = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        if spec.dropout_rate > 0.0 && noise.rng.random::<f64>() < spec.dropout_rate {
            continue;
        }
        if spec.outlier_rate > 0.0 && noise.rng.random::<f64>() < spec.outlier_rate {
            out.push(noise.uniform_fov_point(cal, &cloud.source_pose));
            continue;
        }
        if spec.boundary_jitter_sigma > 0.0 {
            let d = Vec3::new(
                jitter.sample(&mut noise.rng),
                jitter.sample(&mut noise.rng),
                jitter.sample(&mut noise.rng),
            );
            out.push(p + d);
        } else {
            out.push(*p);
        }
    }
    cloud.with_points(out)
}

/// With probability `false_positive_rate`, adds a shrunken copy of the cloud
/// centred at a random image location at least two radii from the original.
pub fn spawn_false_candidate(
    cloud: &BoundaryCloud,
    noise: &mut NoiseModel,
    cal: &ImageCalibration,
) -> Vec<BoundaryCloud> {
    let mut out = vec![cloud.clone()];
    if cloud.is_empty() || noise.spec.false_positive_rate <= 0.0 {
        return out;
    }
    if noise.rng.random::<f64>() >= noise.spec.false_positive_rate {
        return out;
    }
    let pose = cloud.source_pose;
    let c = cloud.centroid();
    let radius = cloud.points().iter().map(|p| (p - c).norm()).sum::<f64>() / cloud.len() as f64;
    let min_sep = 2.0 * radius;

    let mut chosen = None;
    let mut farthest = (f64::NEG_INFINITY, c);
    for _ in 0..1000 {
        let q = noise.uniform_fov_point(cal, &pose);
        let d = (q - c).norm();
        if d >= min_sep {
            chosen = Some(q);
            break;
        }
        if d > farthest.0 {
            farthest = (d, q);
        }
    }
    let target = chosen.unwrap_or(farthest.1);
    let scale = noise.rng.random_range(0.4..0.8);
    let pts = cloud
        .points()
        .iter()
        .map(|p| target + scale * (p - c))
        .collect();
    out.push(cloud.with_points(pts));
    out
}

/// Mean in-plane distance of a cloud's points from its centroid.
pub fn mean_centroid_distance(points: &[Vec3]) -> f64 {
    let c = mean(points);
    points.iter().map(|p| (p - c).norm()).sum::<f64>() / points.len().max(1) as f64
}

//! Cylinder fit of a vessel segment: direction `n_v = (n₁, n₂, 1)` in an
//! anchor frame, radius `r_v` and radius slack `ε`, solved by alternating a
//! direction update (Levenberg–Marquardt over `n₁, n₂`) with a closed-form
//! radius update.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Unit, Vector2};
use serde::{Deserialize, Serialize};

use crate::buffer::{coplanarity, mean};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

pub const MIN_POINTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub r_l: f64,
    pub r_h: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps_min: f64,
    pub tick_tock_rounds: usize,
    pub inner_max_iters: usize,
    /// Stop the direction solve once an accepted step lowers the objective
    /// by less than this (mm²).
    pub convergence_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            r_l: 1.0,
            r_h: 15.0,
            lambda1: 1.0,
            lambda2: 1.0,
            eps_min: 1e-6,
            tick_tock_rounds: 1,
            inner_max_iters: 50,
            convergence_tol: 1e-12,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.r_l.is_finite() && self.r_h.is_finite() && self.r_l >= 0.0 && self.r_l < self.r_h)
        {
            return bad("need 0 ≤ r_l < r_h");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("λ₁, λ₂ must be ≥ 0");
        }
        if !(self.eps_min > 0.0) {
            return bad("ε_min must be > 0");
        }
        if self.tick_tock_rounds == 0 || self.inner_max_iters == 0 {
            return bad("iteration counts must be ≥ 1");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be ≥ 0");
        }
        Ok(())
    }
}

/// Decision variables of the fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Params {
    pub n1: f64,
    pub n2: f64,
    pub r_v: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterlineEstimate {
    pub n1: f64,
    pub n2: f64,
    pub r_v: f64,
    pub eps: f64,
    /// Frame whose third axis carries the unit component of `n_v`.
    pub anchor_frame: Pose,
    /// Centroid of the raw points, a point on the fitted axis.
    pub centroid: Vec3,
    /// Objective on the raw points, including the stabilization terms.
    pub objective_value: f64,
    /// Set when the buffer was degenerate and the previous estimate was reused.
    pub degenerate: bool,
}

impl CenterlineEstimate {
    pub fn params(&self) -> Params {
        Params {
            n1: self.n1,
            n2: self.n2,
            r_v: self.r_v,
            eps: self.eps,
        }
    }

    /// Unit axis direction in the base frame.
    pub fn direction(&self) -> Unit<Vec3> {
        Unit::new_normalize(
            self.anchor_frame
                .transform_vector(&Vec3::new(self.n1, self.n2, 1.0)),
        )
    }

    pub fn is_feasible(&self, cfg: &OptimizerConfig) -> bool {
        self.eps >= cfg.eps_min && self.r_v > cfg.r_l && self.r_v <= self.eps + cfg.r_h + 1e-12
    }

    /// `(n₁, n₂)` of this direction expressed in `anchor`, or `None` when the
    /// direction is (nearly) perpendicular to the anchor's third axis.
    pub fn direction_in(&self, anchor: &Pose) -> Option<(f64, f64)> {
        if anchor.rotation().angle_to(self.anchor_frame.rotation()) < 1e-12 {
            return Some((self.n1, self.n2));
        }
        let mut l = anchor.inverse().transform_vector(&self.direction());
        if l.z < 0.0 {
            l = -l;
        }
        (l.z > 1e-9).then(|| (l.x / l.z, l.y / l.z))
    }
}

/// Anchor whose third axis is `reference` turned by `tilt_deg` toward
/// `toward`, so that `reference` itself sits at `(n₁, n₂) = (tan tilt, 0)`.
pub fn tilted_anchor(reference: &Vec3, toward: &Vec3, tilt_deg: f64) -> Result<Pose> {
    let y = reference
        .try_normalize(1e-12)
        .ok_or_else(|| Error::DegenerateGeometry("zero anchor reference".into()))?;
    let s = (toward - toward.dot(&y) * y)
        .try_normalize(1e-9)
        .ok_or_else(|| {
            Error::DegenerateGeometry("anchor tilt direction parallel to reference".into())
        })?;
    let (sin, cos) = tilt_deg.to_radians().sin_cos();
    let e3 = cos * y + sin * s;
    let e1 = sin * y - cos * s;
    let e2 = e3.cross(&e1);
    Pose::from_matrix(
        nalgebra::Matrix3::from_columns(&[e1, e2, e3]),
        Vec3::zeros(),
    )
}

#[derive(Debug, Clone, Copy)]
struct Prior {
    n1: f64,
    n2: f64,
    r_v: f64,
    angle_active: bool,
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Points centred on `C` and rotated into the anchor.
struct Fit<'a> {
    q: Vec<Vec3>,
    prior: Option<Prior>,
    cfg: &'a OptimizerConfig,
}

impl<'a> Fit<'a> {
    fn new(
        points: &[Vec3],
        c: &Vec3,
        anchor: &Pose,
        prev: Option<&CenterlineEstimate>,
        cfg: &'a OptimizerConfig,
    ) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(Error::InsufficientData {
                needed: MIN_POINTS,
                got: points.len(),
            });
        }
        let inv = anchor.rotation().inverse();
        let q = points.iter().map(|p| inv * (p - c)).collect();
        let prior = prev.map(|p| match p.direction_in(anchor) {
            Some((n1, n2)) => Prior {
                n1,
                n2,
                r_v: p.r_v,
                angle_active: n1.hypot(n2) > 1e-12,
            },
            None => Prior {
                n1: 0.0,
                n2: 0.0,
                r_v: p.r_v,
                angle_active: false,
            },
        });
        Ok(Self { q, prior, cfg })
    }

    fn n(n1: f64, n2: f64) -> Vec3 {
        Vec3::new(n1, n2, 1.0)
    }

    fn distances(&self, n1: f64, n2: f64) -> Vec<f64> {
        let n = Self::n(n1, n2);
        let nn = n.norm();
        self.q.iter().map(|q| q.cross(&n).norm() / nn).collect()
    }

    fn angle_residual(&self, n1: f64, n2: f64) -> f64 {
        match self.prior {
            Some(p) if p.angle_active && self.cfg.lambda1 > 0.0 => {
                wrap_angle(n2.atan2(n1) - p.n2.atan2(p.n1))
            }
            _ => 0.0,
        }
    }

    fn data_term(&self, n1: f64, n2: f64, r: f64) -> f64 {
        let d = self.distances(n1, n2);
        d.iter().map(|d| (d - r).powi(2)).sum::<f64>() / (2.0 * d.len() as f64)
    }

    fn value(&self, x: &Params) -> f64 {
        let mut f = self.data_term(x.n1, x.n2, x.r_v) + 0.5 * x.eps * x.eps;
        let dphi = self.angle_residual(x.n1, x.n2);
        f += 0.5 * self.cfg.lambda1 * dphi * dphi;
        if let Some(p) = self.prior {
            f += 0.5 * self.cfg.lambda2 * (x.r_v - p.r_v).powi(2);
        }
        f
    }

    /// Rows `∂d_i/∂(n₁, n₂)`, zero for points on the axis.
    fn distance_jacobian(&self, n1: f64, n2: f64, d: &[f64]) -> Vec<[f64; 2]> {
        let n = Self::n(n1, n2);
        let nn2 = n.norm_squared();
        self.q
            .iter()
            .zip(d)
            .map(|(q, &di)| {
                if di <= 1e-300 {
                    return [0.0, 0.0];
                }
                let qn = q.dot(&n);
                let s = -qn / (di * nn2);
                [s * (q.x - qn * n.x / nn2), s * (q.y - qn * n.y / nn2)]
            })
            .collect()
    }

    fn angle_jacobian(&self, n1: f64, n2: f64) -> [f64; 2] {
        let rho2 = n1 * n1 + n2 * n2;
        match self.prior {
            Some(p) if p.angle_active && rho2 > 0.0 => [-n2 / rho2, n1 / rho2],
            _ => [0.0, 0.0],
        }
    }

    fn gradient(&self, n1: f64, n2: f64, r: f64) -> (f64, f64) {
        let d = self.distances(n1, n2);
        let j = self.distance_jacobian(n1, n2, &d);
        let inv_n = 1.0 / d.len() as f64;
        let (mut g1, mut g2) = (0.0, 0.0);
        for (di, ji) in d.iter().zip(&j) {
            g1 += (di - r) * ji[0] * inv_n;
            g2 += (di - r) * ji[1] * inv_n;
        }
        let dphi = self.angle_residual(n1, n2);
        let ja = self.angle_jacobian(n1, n2);
        g1 += self.cfg.lambda1 * dphi * ja[0];
        g2 += self.cfg.lambda1 * dphi * ja[1];
        (g1, g2)
    }

    /// Direction update at fixed `r_v, ε`. Only steps that lower the
    /// objective are taken.
    fn tick(&self, x: Params) -> Params {
        let mut x = x;
        let mut f = self.value(&x);
        let mut damping = 1e-3;
        let sqrt_n = (self.q.len() as f64).sqrt();
        let sqrt_l1 = self.cfg.lambda1.sqrt();
        for _ in 0..self.cfg.inner_max_iters {
            let d = self.distances(x.n1, x.n2);
            let jd = self.distance_jacobian(x.n1, x.n2, &d);
            let mut h = Matrix2::zeros();
            let mut g = Vector2::zeros();
            for (di, ji) in d.iter().zip(&jd) {
                let row = Vector2::new(ji[0], ji[1]) / sqrt_n;
                h += row * row.transpose();
                g += row * ((di - x.r_v) / sqrt_n);
            }
            let ja = self.angle_jacobian(x.n1, x.n2);
            let row = Vector2::new(ja[0], ja[1]) * sqrt_l1;
            h += row * row.transpose();
            g += row * (sqrt_l1 * self.angle_residual(x.n1, x.n2));
            if g.norm() < 1e-15 {
                break;
            }
            let mut accepted = None;
            for _ in 0..30 {
                let lhs = h + Matrix2::from_diagonal(
                    &(h.diagonal() * damping).add_scalar(1e-12 * damping),
                );
                let Some(step) = lhs.lu().solve(&-g) else {
                    damping *= 10.0;
                    continue;
                };
                let cand = Params {
                    n1: x.n1 + step.x,
                    n2: x.n2 + step.y,
                    ..x
                };
                let fc = self.value(&cand);
                if fc.is_finite() && fc < f {
                    accepted = Some((cand, fc));
                    damping = (damping / 3.0).max(1e-12);
                    break;
                }
                damping *= 4.0;
            }
            let Some((cand, fc)) = accepted else { break };
            let decrease = f - fc;
            x = cand;
            f = fc;
            if decrease < self.cfg.convergence_tol {
                break;
            }
        }
        x
    }

    /// Exact minimizer over `(r_v, ε)` at fixed direction.
    fn tock(&self, x: Params) -> Params {
        let cfg = self.cfg;
        let d = self.distances(x.n1, x.n2);
        let dbar = d.iter().sum::<f64>() / d.len() as f64;
        let (a, b) = match self.prior {
            Some(p) => (1.0 + cfg.lambda2, dbar + cfg.lambda2 * p.r_v),
            None => (1.0, dbar),
        };
        let r_star = b / a;
        let (r_v, eps) = if r_star <= cfg.r_l {
            (cfg.r_l + cfg.eps_min, cfg.eps_min)
        } else if r_star <= cfg.r_h + cfg.eps_min {
            (r_star, cfg.eps_min)
        } else {
            let eps = ((b - a * cfg.r_h) / (a + 1.0)).max(cfg.eps_min);
            (cfg.r_h + eps, eps)
        };
        Params { r_v, eps, ..x }
    }
}

/// Full objective: mean squared radial residual over 2, slack penalty and the
/// orientation / radius stabilization toward `prev` (expressed in `anchor`).
pub fn objective(
    points: &[Vec3],
    c: &Vec3,
    anchor: &Pose,
    x: &Params,
    prev: Option<&CenterlineEstimate>,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    Ok(Fit::new(points, c, anchor, prev, cfg)?.value(x))
}

/// `(∂f/∂n₁, ∂f/∂n₂)` of [`objective`] at fixed `r_v, ε`.
pub fn gradient_direction(
    points: &[Vec3],
    c: &Vec3,
    anchor: &Pose,
    x: &Params,
    prev: Option<&CenterlineEstimate>,
    cfg: &OptimizerConfig,
) -> Result<(f64, f64)> {
    Ok(Fit::new(points, c, anchor, prev, cfg)?.gradient(x.n1, x.n2, x.r_v))
}

/// Mean distance from the points to the line through `c` along `n_v`.
pub fn estimate_radius(points: &[Vec3], c: &Vec3, n_v: &Vec3) -> Result<f64> {
    if points.len() < MIN_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_POINTS,
            got: points.len(),
        });
    }
    let nn = n_v.norm();
    if !(nn > 0.0) {
        return Err(Error::DegenerateGeometry("zero direction".into()));
    }
    Ok(points
        .iter()
        .map(|p| (p - c).cross(n_v).norm() / nn)
        .sum::<f64>()
        / points.len() as f64)
}

/// One estimator update. The direction is refined on `spread_points`, the
/// radius and slack on `raw_points`. With a previous estimate the solve
/// starts there and is stabilized toward it; otherwise it starts along the
/// anchor's third axis.
pub fn tick_tock_step(
    spread_points: &[Vec3],
    raw_points: &[Vec3],
    prev: Option<&CenterlineEstimate>,
    anchor: &Pose,
    cfg: &OptimizerConfig,
) -> Result<CenterlineEstimate> {
    cfg.validate()?;
    if coplanarity(raw_points).degenerate {
        return match prev {
            Some(p) => Ok(CenterlineEstimate {
                degenerate: true,
                ..*p
            }),
            None => Err(Error::ColdStart),
        };
    }
    let c_spread = mean(spread_points);
    let c_raw = mean(raw_points);
    let dir_fit = Fit::new(spread_points, &c_spread, anchor, prev, cfg)?;
    let rad_fit = Fit::new(raw_points, &c_raw, anchor, prev, cfg)?;

    let mut x = match (prev, dir_fit.prior) {
        (Some(p), Some(pr)) => Params {
            n1: pr.n1,
            n2: pr.n2,
            r_v: p.r_v,
            eps: p.eps.max(cfg.eps_min),
        },
        _ => rad_fit.tock(Params {
            n1: 0.0,
            n2: 0.0,
            r_v: cfg.r_l + cfg.eps_min,
            eps: cfg.eps_min,
        }),
    };
    for _ in 0..cfg.tick_tock_rounds {
        x = dir_fit.tick(x);
        x = rad_fit.tock(x);
    }
    Ok(CenterlineEstimate {
        n1: x.n1,
        n2: x.n2,
        r_v: x.r_v,
        eps: x.eps,
        anchor_frame: *anchor,
        centroid: c_raw,
        objective_value: rad_fit.value(&x),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rings of radius `r` around the line through `origin` along `axis`,
    /// `rings` of them spaced `spacing` apart, `per_ring` points each.
    fn cylinder(
        origin: Vec3,
        axis: Vec3,
        r: f64,
        rings: usize,
        spacing: f64,
        per_ring: usize,
    ) -> Vec<Vec3> {
        let a = axis.normalize();
        let u = if a.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let e1 = (u - u.dot(&a) * a).normalize();
        let e2 = a.cross(&e1);
        let mut pts = Vec::new();
        for k in 0..rings {
            let c = origin + a * (k as f64 * spacing);
            for j in 0..per_ring {
                let t = 2.0 * PI * (j as f64 + 0.37 * k as f64) / per_ring as f64;
                pts.push(c + r * (t.cos() * e1 + t.sin() * e2));
            }
        }
        pts
    }

    fn z_cylinder() -> Vec<Vec3> {
        cylinder(Vec3::zeros(), Vec3::z(), 10.0, 6, 2.0, 24)
    }

    fn est(n1: f64, n2: f64, r_v: f64) -> CenterlineEstimate {
        CenterlineEstimate {
            n1,
            n2,
            r_v,
            eps: 1e-6,
            anchor_frame: Pose::identity(),
            centroid: Vec3::zeros(),
            objective_value: 0.0,
            degenerate: false,
        }
    }

    fn p(n1: f64, n2: f64, r_v: f64) -> Params {
        Params {
            n1,
            n2,
            r_v,
            eps: 1e-6,
        }
    }

    fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
        crate::geometry::line_angle_deg(a, b)
    }

    #[test]
    fn exact_fit_objective() {
        let pts = z_cylinder();
        let c = mean(&pts);
        let cfg = OptimizerConfig::default();
        let prev = est(0.0, 0.0, 10.0);
        let f = objective(
            &pts,
            &c,
            &Pose::identity(),
            &p(0.0, 0.0, 10.0),
            Some(&prev),
            &cfg,
        )
        .unwrap();
        assert!((f - 0.5e-12).abs() < 1e-12);
    }

    #[test]
    fn radius_mismatch_objective() {
        let pts = z_cylinder();
        let c = mean(&pts);
        let cfg = OptimizerConfig::default();
        let id = Pose::identity();
        let no_prior = objective(&pts, &c, &id, &p(0.0, 0.0, 9.0), None, &cfg).unwrap();
        assert_relative_eq!(no_prior, 0.5 + 0.5e-12, epsilon = 1e-9);
        let prev = est(0.0, 0.0, 10.0);
        let with_prior = objective(&pts, &c, &id, &p(0.0, 0.0, 9.0), Some(&prev), &cfg).unwrap();
        assert_relative_eq!(with_prior, 1.0 + 0.5e-12, epsilon = 1e-9);
    }

    #[test]
    fn orientation_term() {
        let pts = z_cylinder();
        let c = mean(&pts);
        let cfg = OptimizerConfig::default();
        let id = Pose::identity();
        let prev = est(1.0, 0.0, 10.0);
        let x = p(0.0, 1.0, 10.0);
        let f = objective(&pts, &c, &id, &x, Some(&prev), &cfg).unwrap();
        let data = objective(&pts, &c, &id, &x, None, &cfg).unwrap();
        assert_relative_eq!(f - data, (PI / 2.0).powi(2) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![Vec3::x(); 5];
        let cfg = OptimizerConfig::default();
        let r = objective(
            &pts,
            &Vec3::zeros(),
            &Pose::identity(),
            &p(0.0, 0.0, 1.0),
            None,
            &cfg,
        );
        assert!(matches!(
            r,
            Err(Error::InsufficientData { needed: 6, got: 5 })
        ));
        assert!(estimate_radius(&pts, &Vec3::zeros(), &Vec3::z()).is_err());
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let pts = z_cylinder();
        let c = mean(&pts);
        let cfg = OptimizerConfig::default();
        let prev = est(0.0, 0.0, 10.0);
        let (g1, g2) = gradient_direction(
            &pts,
            &c,
            &Pose::identity(),
            &p(0.0, 0.0, 10.0),
            Some(&prev),
            &cfg,
        )
        .unwrap();
        assert!(g1.abs() < 1e-9 && g2.abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = OptimizerConfig::default();
        let id = Pose::identity();
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let pts: Vec<Vec3> = (0..40)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-12.0..12.0),
                        rng.random_range(-12.0..12.0),
                        rng.random_range(-20.0..20.0),
                    )
                })
                .collect();
            let c = mean(&pts);
            let prev = est(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..12.0),
            );
            let x = p(
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(2.0..12.0),
            );
            let prior = if checked % 2 == 0 { Some(&prev) } else { None };
            let phi = x.n2.atan2(x.n1) - prev.n2.atan2(prev.n1);
            if prior.is_some() && (wrap_angle(phi).abs() > PI - 1e-3 || x.n1.hypot(x.n2) < 1e-2) {
                continue;
            }
            let f = |n1: f64, n2: f64| {
                objective(&pts, &c, &id, &Params { n1, n2, ..x }, prior, &cfg).unwrap()
            };
            let fd1 = (f(x.n1 + h, x.n2) - f(x.n1 - h, x.n2)) / (2.0 * h);
            let fd2 = (f(x.n1, x.n2 + h) - f(x.n1, x.n2 - h)) / (2.0 * h);
            let (g1, g2) = gradient_direction(&pts, &c, &id, &x, prior, &cfg).unwrap();
            let err = ((g1 - fd1).powi(2) + (g2 - fd2).powi(2)).sqrt();
            let scale = (fd1 * fd1 + fd2 * fd2).sqrt().max(1e-3);
            assert!(err / scale < 1e-5, "rel err {} at {:?}", err / scale, x);
            checked += 1;
        }
    }

    #[test]
    fn gradient_descent_smoke() {
        let axis = Vec3::new(0.2, -0.1, 1.0);
        let pts = cylinder(Vec3::new(1.0, 2.0, 0.0), axis, 8.0, 8, 3.0, 25);
        assert_eq!(pts.len(), 200);
        let c = mean(&pts);
        let cfg = OptimizerConfig::default();
        let id = Pose::identity();
        let mut x = p(0.3, -0.2, 8.0);
        let f = |x: &Params| objective(&pts, &c, &id, x, None, &cfg).unwrap() - 0.5 * x.eps * x.eps;
        let mut fx = f(&x);
        for _ in 0..20000 {
            let (g1, g2) = gradient_direction(&pts, &c, &id, &x, None, &cfg).unwrap();
            let mut t = 1.0;
            loop {
                let y = Params {
                    n1: x.n1 - t * g1,
                    n2: x.n2 - t * g2,
                    ..x
                };
                let fy = f(&y);
                if fy <= fx - 0.5 * t * (g1 * g1 + g2 * g2) || t < 1e-12 {
                    x = y;
                    fx = fy;
                    break;
                }
                t *= 0.5;
            }
            if fx < 1e-12 {
                break;
            }
        }
        assert!(fx < 1e-10, "data term {fx}");
    }

    #[test]
    fn radius_of_perpendicular_circle() {
        let pts = cylinder(
            Vec3::new(3.0, -1.0, 5.0),
            Vec3::new(1.0, 1.0, 0.0),
            7.5,
            1,
            0.0,
            64,
        );
        let c = mean(&pts);
        assert_relative_eq!(
            estimate_radius(&pts, &c, &Vec3::new(1.0, 1.0, 0.0)).unwrap(),
            7.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn radius_of_oblique_slice_uses_3d_axis() {
        // plane through the origin at 45° to the z axis; wall points x² + y² = r²
        let r = 7.5;
        let tilt = 45f64.to_radians();
        let (e_lat, e_dep) = (Vec3::x(), Vec3::new(0.0, tilt.sin(), tilt.cos()));
        let pts: Vec<Vec3> = (0..96)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / 96.0;
                let a = r * t.cos();
                let b = r * t.sin() / e_dep.y;
                a * e_lat + b * e_dep
            })
            .collect();
        let major = pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
        assert!((major - r / tilt.sin()).abs() < 1e-9);
        assert_relative_eq!(
            estimate_radius(&pts, &Vec3::zeros(), &Vec3::z()).unwrap(),
            r,
            epsilon = 1e-12
        );
    }

    #[test]
    fn radius_with_perturbed_direction() {
        let pts = cylinder(Vec3::zeros(), Vec3::z(), 10.0, 10, 2.0, 36);
        let c = mean(&pts);
        let off = Rotation3::from_axis_angle(&Vec3::x_axis(), 5f64.to_radians()) * Vec3::z();
        assert!((estimate_radius(&pts, &c, &off).unwrap() - 10.0).abs() < 0.5);
    }

    fn tilted_anchor(deg: f64) -> Pose {
        Pose::new(
            Rotation3::from_axis_angle(&Vec3::x_axis(), deg.to_radians()),
            Vec3::zeros(),
        )
    }

    #[test]
    fn cold_start_recovers_axis_and_radius() {
        let pts = cylinder(Vec3::new(0.0, 0.0, -10.0), Vec3::z(), 10.0, 10, 2.0, 48);
        let cfg = OptimizerConfig::default();
        let anchor = tilted_anchor(30.0);
        let mut e = tick_tock_step(&pts, &pts, None, &anchor, &cfg).unwrap();
        for _ in 1..20 {
            e = tick_tock_step(&pts, &pts, Some(&e), &anchor, &cfg).unwrap();
        }
        assert!(angle_deg(&e.direction(), &Vec3::z()) < 0.5);
        assert!((e.r_v - 10.0).abs() < 0.1);
        assert!(e.is_feasible(&cfg));
    }

    #[test]
    fn aneurysm_radius_absorbed_by_slack() {
        let cfg = OptimizerConfig::default();
        let r_true = 1.2 * cfg.r_h;
        let pts = cylinder(Vec3::zeros(), Vec3::z(), r_true, 10, 2.0, 48);
        let mut e = tick_tock_step(&pts, &pts, None, &Pose::identity(), &cfg).unwrap();
        for _ in 0..5 {
            e = tick_tock_step(&pts, &pts, Some(&e), &Pose::identity(), &cfg).unwrap();
        }
        assert!(e.eps > cfg.eps_min);
        assert!(e.r_v <= e.eps + cfg.r_h + 1e-12);
        // cold start and the stabilized fixed point agree: r = (r_true + r_h)/2
        assert_relative_eq!(e.r_v, (r_true + cfg.r_h) / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn radius_clamped_at_lower_bound() {
        let cfg = OptimizerConfig::default();
        let pts = cylinder(Vec3::zeros(), Vec3::z(), 0.5, 10, 2.0, 24);
        let e = tick_tock_step(&pts, &pts, None, &Pose::identity(), &cfg).unwrap();
        assert!(e.r_v > cfg.r_l && e.is_feasible(&cfg));
    }

    #[test]
    fn degenerate_buffer_falls_back() {
        let cfg = OptimizerConfig::default();
        let flat = cylinder(Vec3::zeros(), Vec3::z(), 7.5, 1, 0.0, 64);
        assert!(matches!(
            tick_tock_step(&flat, &flat, None, &Pose::identity(), &cfg),
            Err(Error::ColdStart)
        ));
        let prev = est(0.1, 0.2, 7.0);
        let e = tick_tock_step(&flat, &flat, Some(&prev), &Pose::identity(), &cfg).unwrap();
        assert!(e.degenerate);
        assert_eq!((e.n1, e.n2, e.r_v), (0.1, 0.2, 7.0));
    }

    #[test]
    fn reanchored_prior_keeps_direction() {
        let prev = CenterlineEstimate {
            anchor_frame: tilted_anchor(20.0),
            ..est(0.3, -0.1, 5.0)
        };
        let other = tilted_anchor(-10.0);
        let (n1, n2) = prev.direction_in(&other).unwrap();
        let d = other.transform_vector(&Vec3::new(n1, n2, 1.0));
        assert!(angle_deg(&d, &prev.direction()) < 1e-9);
        let a = super::tilted_anchor(&prev.direction(), &Vec3::z(), 45.0).unwrap();
        let (m1, m2) = prev.direction_in(&a).unwrap();
        assert!((m1 - 1.0).abs() < 1e-12 && m2.abs() < 1e-12);
        assert!((a.rotation_matrix().determinant() - 1.0).abs() < 1e-12);
        let b = super::tilted_anchor(&prev.direction(), &Vec3::z(), 0.0).unwrap();
        let (k1, k2) = prev.direction_in(&b).unwrap();
        assert!(k1.abs() < 1e-12 && k2.abs() < 1e-12);
    }

    #[test]
    fn scale_invariance_of_distance() {
        let pts = cylinder(Vec3::zeros(), Vec3::new(0.3, 0.1, 1.0), 6.0, 4, 2.0, 16);
        let c = mean(&pts);
        let n = Vec3::new(0.2, -0.4, 1.0);
        let base = estimate_radius(&pts, &c, &n).unwrap();
        for s in [1e-3, 0.5, 3.0, 1e4] {
            assert_relative_eq!(
                estimate_radius(&pts, &c, &(s * n)).unwrap(),
                base,
                epsilon = 1e-12,
                max_relative = 1e-12
            );
        }
    }

    fn noisy_cylinder(seed: u64, axis: Vec3, r: f64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cylinder(Vec3::new(2.0, -1.0, 0.0), axis, r, 10, 2.0, 20)
            .into_iter()
            .map(|p| {
                p + Vec3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                )
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn steps_stay_feasible(seed in 0u64..1000, r in 0.3f64..25.0, ax in -0.5f64..0.5, ay in -0.5f64..0.5) {
            let cfg = OptimizerConfig::default();
            let pts = noisy_cylinder(seed, Vec3::new(ax, ay, 1.0), r);
            let mut e = tick_tock_step(&pts, &pts, None, &Pose::identity(), &cfg).unwrap();
            prop_assert!(e.is_feasible(&cfg));
            for _ in 0..3 {
                e = tick_tock_step(&pts, &pts, Some(&e), &Pose::identity(), &cfg).unwrap();
                prop_assert!(e.is_feasible(&cfg));
            }
        }

        #[test]
        fn monotone_on_static_data(seed in 0u64..1000, ax in -0.6f64..0.6, ay in -0.6f64..0.6) {
            let cfg = OptimizerConfig::default();
            let pts = noisy_cylinder(seed, Vec3::new(ax, ay, 1.0), 7.5);
            let anchor = tilted_anchor(25.0);
            let mut e = tick_tock_step(&pts, &pts, None, &anchor, &cfg).unwrap();
            for _ in 0..8 {
                let next = tick_tock_step(&pts, &pts, Some(&e), &anchor, &cfg).unwrap();
                prop_assert!(next.objective_value <= e.objective_value + 1e-12,
                    "{} > {}", next.objective_value, e.objective_value);
                e = next;
            }
        }

        #[test]
        fn rotation_equivariance(seed in 0u64..1000, rx in -PI..PI, ry in -PI..PI, rz in -PI..PI) {
            let cfg = OptimizerConfig::default();
            let pts = cylinder(Vec3::zeros(), Vec3::new(0.3, -0.2, 1.0), 7.5, 10, 2.0, 24);
            let rot = Rotation3::from_euler_angles(rx, ry, rz);
            let moved: Vec<Vec3> = pts.iter().map(|p| rot * p).collect();
            let anchor = tilted_anchor((seed % 40) as f64);
            let moved_anchor = Pose::new(rot, Vec3::zeros()).compose(&anchor);
            let mut a = tick_tock_step(&pts, &pts, None, &anchor, &cfg).unwrap();
            let mut b = tick_tock_step(&moved, &moved, None, &moved_anchor, &cfg).unwrap();
            for _ in 0..5 {
                a = tick_tock_step(&pts, &pts, Some(&a), &anchor, &cfg).unwrap();
                b = tick_tock_step(&moved, &moved, Some(&b), &moved_anchor, &cfg).unwrap();
            }
            prop_assert!(angle_deg(&(rot * a.direction().into_inner()), &b.direction()) < 0.1);
            prop_assert!(angle_deg(&a.direction(), &Vec3::new(0.3, -0.2, 1.0)) < 0.1);
        }
    }
}

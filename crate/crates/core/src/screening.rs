//! Closed-loop screening simulation on a virtual clock: frame acquisition,
//! synthetic segmentation, tracking, cloud buffering, centerline estimation,
//! probe commands and the impedance plant, with the error and convergence
//! metrics of each run.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::{BoundaryCloud, CloudRingBuffer, DEFAULT_CAPACITY, DEFAULT_SPREAD_MU};
use crate::centerline::{tick_tock_step, tilted_anchor, CenterlineEstimate, OptimizerConfig};
use crate::control::{
    centering_offset, step_impedance, target_orientation, ContactModel, GateStatus,
    ImpedanceParams, ProbeState, SafetyGate,
};
use crate::error::{Error, Result};
use crate::geometry::{image_to_base, line_angle_deg, ImageCalibration, MountRotation, Pose, Vec3};
use crate::phantom::{
    corrupt_cloud, slice_tube, spawn_false_candidate, NoiseModel, NoiseSpec, SliceTruth,
    TubePhantom,
};
use crate::segmentation::{extract_candidates, track_nearest, BinaryMask, DEFAULT_MIN_AREA};

/// Solving waits until the buffered centroids span this fraction of the
/// distance a full buffer covers at the march speed.
pub const SWEEP_GATE_FRACTION: f64 = 0.5;
/// The direction parameterization is anchored this far off the reference
/// direction, toward the surface normal.
pub const ANCHOR_TILT_DEG: f64 = 45.0;
/// Re-anchor once the estimate drifts this far from the reference direction.
pub const REANCHOR_DEG: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Wall samples per slice used to draw the synthetic mask.
    pub slice_points: usize,
    /// Contour points kept per frame.
    pub contour_points: usize,
    pub min_area: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            slice_points: 128,
            contour_points: 512,
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

/// Convergence thresholds, each to be held for `hold_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub orientation_deg: f64,
    pub centering_mm: f64,
    pub radius_mm: f64,
    pub hold_s: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            orientation_deg: 5.0,
            centering_mm: 0.5,
            radius_mm: 1.0,
            hold_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub frame_rate_hz: f64,
    pub control_rate_hz: f64,
    /// mm/s.
    pub march_velocity: f64,
    /// Initial yaw of the probe away from the vessel, about the surface normal.
    pub initial_offset_deg: f64,
    /// Draw the sign of the initial yaw from the seed.
    pub randomize_offset_sign: bool,
    pub initial_lateral_offset_mm: f64,
    /// Arclength of the vessel under the initial probe position.
    pub start_arclength_mm: f64,
    pub phantom: TubePhantom,
    pub calibration: ImageCalibration,
    pub mount: MountRotation,
    /// Probe tip position in the flange frame.
    pub tip_offset_mm: Vec3,
    pub noise: NoiseSpec,
    pub buffer_capacity: usize,
    pub spread_mu: f64,
    pub optimizer: OptimizerConfig,
    pub impedance: ImpedanceParams,
    /// Skin contact stiffness (N/m).
    pub contact_stiffness: f64,
    pub segmentation: SegmentationConfig,
    pub lost_target_timeout_s: f64,
    /// Clear a safety halt automatically and carry on.
    pub operator_reset: bool,
    pub thresholds: Thresholds,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_s: 8.0,
            frame_rate_hz: 50.0,
            control_rate_hz: 100.0,
            march_velocity: 10.0,
            initial_offset_deg: 0.0,
            randomize_offset_sign: true,
            initial_lateral_offset_mm: 2.0,
            start_arclength_mm: 0.0,
            phantom: TubePhantom::straight(Vec3::new(0.0, 0.0, 20.0), Vec3::y(), 7.5),
            calibration: ImageCalibration::default(),
            mount: MountRotation::Identity,
            tip_offset_mm: Vec3::new(0.0, 0.0, 120.0),
            noise: NoiseSpec::default(),
            buffer_capacity: DEFAULT_CAPACITY,
            spread_mu: DEFAULT_SPREAD_MU,
            optimizer: OptimizerConfig::default(),
            impedance: ImpedanceParams::default(),
            contact_stiffness: 5000.0,
            segmentation: SegmentationConfig::default(),
            lost_target_timeout_s: 1.0,
            operator_reset: false,
            thresholds: Thresholds::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=45.0).contains(&self.initial_offset_deg) {
            return bad(format!(
                "initial offset {}° outside [0, 45]",
                self.initial_offset_deg
            ));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration must be positive".into());
        }
        if !(self.frame_rate_hz > 0.0 && self.control_rate_hz >= self.frame_rate_hz) {
            return bad("need 0 < frame rate ≤ control rate".into());
        }
        let ratio = self.control_rate_hz / self.frame_rate_hz;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("control rate must be an integer multiple of the frame rate".into());
        }
        if 1.0 / self.control_rate_hz > 0.02 {
            return bad("control period must be ≤ 20 ms".into());
        }
        if !(0.0..=crate::control::MAX_MARCH_VELOCITY).contains(&self.march_velocity) {
            return bad(format!(
                "march velocity {} outside [0, 20] mm/s",
                self.march_velocity
            ));
        }
        if self.buffer_capacity < 2 {
            return bad("buffer needs at least two clouds".into());
        }
        if !(self.spread_mu >= 0.0) {
            return bad("spread μ must be ≥ 0".into());
        }
        if !(self.contact_stiffness > 0.0) {
            return bad("contact stiffness must be > 0".into());
        }
        if self.segmentation.contour_points < 8 {
            return bad("contour_points must be ≥ 8".into());
        }
        if !(self.lost_target_timeout_s > 0.0) {
            return bad("lost-target timeout must be > 0".into());
        }
        let t = &self.thresholds;
        if !(t.orientation_deg > 0.0 && t.centering_mm > 0.0 && t.radius_mm > 0.0 && t.hold_s > 0.0)
        {
            return bad("thresholds must be > 0".into());
        }
        self.phantom.validate()?;
        self.calibration.validate()?;
        self.noise.validate()?;
        self.optimizer.validate()?;
        self.impedance.validate()?;
        // probe the slice geometry early
        slice_tube(
            &self.phantom,
            &Pose::identity(),
            &self.calibration,
            self.segmentation.slice_points,
        )?;
        Ok(())
    }

    /// Sign of the initial yaw for this seed.
    pub fn offset_sign(&self) -> f64 {
        if !self.randomize_offset_sign {
            return 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_0FF5_E7u64);
        if rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Probe tip pose at the start of the run.
    pub fn initial_pose(&self) -> Result<Pose> {
        let ns = self.phantom.surface_normal();
        let s0 = self.start_arclength_mm;
        let aligned = target_orientation(&self.phantom.centerline.tangent(s0), &ns, None)?;
        let yaw = Rotation3::from_axis_angle(
            &Unit::new_normalize(ns),
            self.offset_sign() * self.initial_offset_deg.to_radians(),
        );
        let rotation = yaw * aligned;
        let above = self
            .phantom
            .surface
            .project(&self.phantom.centerline.point(s0));
        let lateral = rotation * Vec3::x();
        let lateral = (lateral - lateral.dot(&ns) * ns).normalize();
        Ok(Pose::new(
            rotation,
            above + self.initial_lateral_offset_mm * lateral,
        ))
    }

    fn contact(&self) -> ContactModel {
        ContactModel {
            surface: self.phantom.surface,
            stiffness: self.contact_stiffness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Probe held while the buffer fills.
    Fill,
    /// Marching along the current probe axis, no estimate yet.
    Sweep,
    /// Following the estimated centerline.
    Track,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    LostTarget,
    Halted,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Completed => "completed",
            RunStatus::LostTarget => "lost_target",
            RunStatus::Halted => "halted",
        })
    }
}

/// Errors at one instant; `None` where not observable.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScreeningMetrics {
    /// Angle between the true centerline and the probe's elevational axis (deg).
    pub e_or_rea: Option<f64>,
    /// Angle between the true and estimated centerline (deg).
    pub e_or_com: Option<f64>,
    /// Lateral distance of the tracked centroid from the image midline (mm).
    pub e_ce: Option<f64>,
    /// Estimated minus true radius (mm).
    pub e_ra: Option<f64>,
}

/// Metric snapshot from the probe pose, the current estimate, the tracked
/// centroid column and the truth under the probe.
pub fn compute_metrics(
    probe_y: &Vec3,
    estimate: Option<(&Vec3, f64)>,
    x_c: Option<f64>,
    cal: &ImageCalibration,
    truth: Option<&SliceTruth>,
) -> ScreeningMetrics {
    let e_ce = x_c.map(|u| (u - cal.lateral_center_px()).abs() * cal.lateral_scale());
    let Some(truth) = truth else {
        return ScreeningMetrics {
            e_ce,
            ..Default::default()
        };
    };
    ScreeningMetrics {
        e_or_rea: Some(line_angle_deg(&truth.tangent, probe_y)),
        e_or_com: estimate.map(|(n, _)| line_angle_deg(&truth.tangent, n)),
        e_ce,
        e_ra: estimate.map(|(_, r)| r - truth.radius),
    }
}

/// One control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    /// Time since the buffer filled and motion began.
    pub motion_t: Option<f64>,
    pub phase: Phase,
    pub frame: bool,
    pub commanded: bool,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub yx: f64,
    pub yy: f64,
    pub yz: f64,
    pub force: f64,
    pub halted: bool,
    pub x_c: Option<f64>,
    pub nvx: Option<f64>,
    pub nvy: Option<f64>,
    pub nvz: Option<f64>,
    pub r_v: Option<f64>,
    pub eps: Option<f64>,
    pub objective: Option<f64>,
    pub e_or_rea: Option<f64>,
    pub e_or_com: Option<f64>,
    pub e_ce: Option<f64>,
    pub e_ra: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        Some(Self {
            mean,
            sd,
            median,
            max: sorted[m - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceTimes {
    pub t_or: Option<f64>,
    pub t_ce: Option<f64>,
    pub t_ra: Option<f64>,
}

/// Absolute error samples inside the steady-state window.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SteadySamples {
    pub e_or_rea: Vec<f64>,
    pub e_or_com: Vec<f64>,
    pub e_ce: Vec<f64>,
    pub e_ra: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SteadyStats {
    pub e_or_rea: Option<ErrorStats>,
    pub e_or_com: Option<ErrorStats>,
    pub e_ce: Option<ErrorStats>,
    pub e_ra: Option<ErrorStats>,
}

impl SteadySamples {
    pub fn stats(&self) -> SteadyStats {
        SteadyStats {
            e_or_rea: ErrorStats::of(&self.e_or_rea),
            e_or_com: ErrorStats::of(&self.e_or_com),
            e_ce: ErrorStats::of(&self.e_ce),
            e_ra: ErrorStats::of(&self.e_ra),
        }
    }

    fn extend(&mut self, other: &SteadySamples) {
        self.e_or_rea.extend_from_slice(&other.e_or_rea);
        self.e_or_com.extend_from_slice(&other.e_or_com);
        self.e_ce.extend_from_slice(&other.e_ce);
        self.e_ra.extend_from_slice(&other.e_ra);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub motion_start_s: Option<f64>,
    pub times: ConvergenceTimes,
    /// Motion time at which the steady-state window opens.
    pub window_start_s: Option<f64>,
    pub stats: SteadyStats,
    #[serde(skip)]
    pub steady: SteadySamples,
}

/// First motion time after which `series` stays within `threshold` for at
/// least `hold` seconds. Missing samples break a streak.
pub fn time_to_converge(series: &[(f64, Option<f64>)], threshold: f64, hold: f64) -> Option<f64> {
    let mut start: Option<f64> = None;
    for &(t, v) in series {
        match v {
            Some(e) if e.abs() <= threshold => {
                let s = *start.get_or_insert(t);
                if t - s >= hold - 1e-9 {
                    return Some(s);
                }
            }
            _ => start = None,
        }
    }
    None
}

/// Convergence times and steady-state statistics from a trace.
pub fn summarize(rows: &[TraceRow], thresholds: &Thresholds, status: RunStatus) -> RunSummary {
    let moving: Vec<&TraceRow> = rows.iter().filter(|r| r.motion_t.is_some()).collect();
    let motion_start_s = moving.first().map(|r| r.t);
    let series = |f: fn(&TraceRow) -> Option<f64>, frames_only: bool| -> Vec<(f64, Option<f64>)> {
        moving
            .iter()
            .filter(|r| !frames_only || r.frame)
            .map(|r| (r.motion_t.unwrap_or(0.0), f(r)))
            .collect()
    };
    let or = series(|r| r.e_or_rea, false);
    let ce = series(|r| r.e_ce, true);
    let ra = series(|r| r.e_ra, true);
    let com = series(|r| r.e_or_com, true);
    let times = ConvergenceTimes {
        t_or: time_to_converge(&or, thresholds.orientation_deg, thresholds.hold_s),
        t_ce: time_to_converge(&ce, thresholds.centering_mm, thresholds.hold_s),
        t_ra: time_to_converge(&ra, thresholds.radius_mm, thresholds.hold_s),
    };
    let end = moving.last().and_then(|r| r.motion_t);
    let window_start_s = match (times.t_or, times.t_ce, times.t_ra) {
        (Some(a), Some(b), Some(c)) => Some(a.max(b).max(c)),
        _ => end.map(|e| (e - 1.0).max(0.0)),
    };
    let mut steady = SteadySamples::default();
    if let Some(w) = window_start_s {
        let pick = |s: &[(f64, Option<f64>)]| -> Vec<f64> {
            s.iter()
                .filter(|(t, _)| *t >= w)
                .filter_map(|(_, v)| v.map(f64::abs))
                .collect()
        };
        steady = SteadySamples {
            e_or_rea: pick(&or),
            e_or_com: pick(&com),
            e_ce: pick(&ce),
            e_ra: pick(&ra),
        };
    }
    RunSummary {
        status,
        motion_start_s,
        times,
        window_start_s,
        stats: steady.stats(),
        steady,
    }
}

#[derive(Debug, Clone)]
pub struct ScreeningTrace {
    pub config: ScenarioConfig,
    pub offset_sign: f64,
    pub rows: Vec<TraceRow>,
    pub summary: RunSummary,
    pub final_estimate: Option<CenterlineEstimate>,
    /// Buffer contents at the end of the run.
    pub final_raw: Vec<Vec3>,
    pub final_spread: Vec<Vec3>,
}

struct Frame {
    /// Tracked blob centroid `(u, v)`.
    centroid_px: (f64, f64),
    cloud: BoundaryCloud,
}

/// Synthetic acquisition: slice the phantom, add a false blob at random,
/// draw the mask, extract and track blobs, and lift the tracked contour to
/// `{b}` through the calibration chain.
fn acquire(
    cfg: &ScenarioConfig,
    pose: &Pose,
    mount: &Pose,
    noise: &mut NoiseModel,
    previous_px: Option<(f64, f64)>,
    frame_id: u64,
    t: f64,
) -> Result<Option<Frame>> {
    let cal = &cfg.calibration;
    let slice = slice_tube(&cfg.phantom, pose, cal, cfg.segmentation.slice_points)?;
    if !slice.visible {
        return Ok(None);
    }
    let blobs = spawn_false_candidate(&slice.cloud, noise, cal);
    let probe_from_base = pose.inverse();
    let mut mask = BinaryMask::new(cal.lateral_px as usize, cal.axial_px as usize);
    for blob in &blobs {
        let poly: Vec<(f64, f64)> = blob
            .points()
            .iter()
            .map(|p| cal.probe_to_pixel(&probe_from_base.transform_point(p)))
            .collect();
        mask.fill_polygon(&poly);
    }
    let candidates = extract_candidates(&mask, cfg.segmentation.min_area);
    let Some(tracked) = track_nearest(previous_px, &candidates) else {
        return Ok(None);
    };
    let base_from_flange = pose.compose(&mount.inverse());
    let stride = tracked
        .boundary
        .len()
        .div_ceil(cfg.segmentation.contour_points)
        .max(1);
    let mut points = Vec::with_capacity(cfg.segmentation.contour_points);
    for &(u, v) in tracked.boundary.iter().step_by(stride) {
        points.push(image_to_base(
            &base_from_flange,
            mount,
            cal,
            u as f64,
            v as f64,
        )?);
    }
    let clean = BoundaryCloud::new(frame_id, t, *pose, points);
    Ok(Some(Frame {
        centroid_px: tracked.centroid,
        cloud: corrupt_cloud(&clean, noise, cal),
    }))
}

fn anchor_for(probe: &Pose) -> Result<Pose> {
    let r = probe.rotation_matrix();
    let (x, y, z) = (
        r.column(0).into_owned(),
        r.column(1).into_owned(),
        r.column(2).into_owned(),
    );
    Pose::from_matrix(Matrix3::from_columns(&[z, x, y]), Vec3::zeros())
}

/// Runs one screening session.
pub fn run_screening(cfg: &ScenarioConfig) -> Result<ScreeningTrace> {
    cfg.validate()?;
    let cal = &cfg.calibration;
    let dt = 1.0 / cfg.control_rate_hz;
    let frame_every = (cfg.control_rate_hz / cfg.frame_rate_hz).round() as usize;
    let n_ticks = (cfg.duration_s / dt).round() as usize;
    let sweep_gate = SWEEP_GATE_FRACTION * (cfg.buffer_capacity - 1) as f64 * cfg.march_velocity
        / cfg.frame_rate_hz;
    let ns = cfg.phantom.surface_normal();
    let surface = cfg.phantom.surface;
    let contact = cfg.contact();
    let mount = cfg.mount.mount_pose(cfg.tip_offset_mm);

    let start = cfg.initial_pose()?;
    let mut state = ProbeState::at_rest(start);
    let mut ref_pos = surface.project(start.translation());
    let mut ref_rot = *start.rotation();
    let mut buffer = CloudRingBuffer::new(cfg.buffer_capacity, cfg.spread_mu)?;
    let mut noise = NoiseModel::new(cfg.noise, cfg.seed)?;
    let mut gate = SafetyGate::new(cfg.impedance.force_limit);
    let mut estimate: Option<CenterlineEstimate> = None;
    // session anchor and the direction it was built around
    let mut anchor: Option<(Pose, Vec3)> = None;
    let mut tracked_px: Option<(f64, f64)> = None;
    let mut lost_since: Option<f64> = None;
    let mut motion_start: Option<f64> = None;
    let mut status = RunStatus::Completed;
    let mut rows = Vec::with_capacity(n_ticks + 1);
    let mut frame_id = 0u64;

    for k in 0..n_ticks {
        let t = k as f64 * dt;
        let pose = state.pose;
        let is_frame = k % frame_every == 0;
        let mut x_c = None;
        let halted = gate.is_halted();

        if is_frame && !halted {
            match acquire(cfg, &pose, &mount, &mut noise, tracked_px, frame_id, t)? {
                Some(frame) => {
                    frame_id += 1;
                    lost_since = None;
                    x_c = Some(frame.centroid_px.0);
                    tracked_px = Some(frame.centroid_px);
                    if frame.cloud.len() >= 8 {
                        buffer.push(frame.cloud)?;
                    }
                }
                None => {
                    let since = *lost_since.get_or_insert(t);
                    if t - since > cfg.lost_target_timeout_s {
                        status = RunStatus::LostTarget;
                    }
                }
            }
        }
        if status == RunStatus::LostTarget {
            break;
        }

        if is_frame && buffer.is_full() && !halted {
            motion_start.get_or_insert(t);
            if estimate.is_some() || buffer.centroid_span() >= sweep_gate {
                // the first solve starts along the probe's elevational axis
                let a = match anchor {
                    Some((a, _)) => a,
                    None => anchor_for(&pose)?,
                };
                let spread = buffer.spread_view()?;
                let raw = buffer.raw_points();
                match tick_tock_step(&spread, &raw, estimate.as_ref(), &a, &cfg.optimizer) {
                    Ok(e) => {
                        let dir = e.direction().into_inner();
                        if anchor.is_none_or(|(_, r)| line_angle_deg(&dir, &r) > REANCHOR_DEG) {
                            anchor = Some((tilted_anchor(&dir, &ns, ANCHOR_TILT_DEG)?, dir));
                        }
                        if let Ok(r) = target_orientation(&dir, &ns, Some(&(ref_rot * Vec3::y()))) {
                            ref_rot = r;
                        }
                        estimate = Some(e);
                    }
                    Err(Error::ColdStart) => {}
                    Err(e) => return Err(e),
                }
            }
            if let Some(xc) = x_c {
                // lateral component of the reference: where the vessel was seen
                let offset = centering_offset(xc, cal, &pose)?;
                let lateral = {
                    let l = ref_rot * Vec3::x();
                    (l - l.dot(&ns) * ns).normalize()
                };
                let desired = pose.translation() - offset;
                ref_pos += lateral * lateral.dot(&(desired - ref_pos));
            }
        }

        let phase = match (motion_start, &estimate) {
            (None, _) => Phase::Fill,
            (Some(_), None) => Phase::Sweep,
            (Some(_), Some(_)) => Phase::Track,
        };
        let commanded = motion_start.is_some() && !halted;
        if commanded {
            let march = {
                let y = ref_rot * Vec3::y();
                (y - y.dot(&ns) * ns).normalize()
            };
            ref_pos = surface.project(&(ref_pos + march * cfg.march_velocity * dt));
        }

        let truth = cfg.phantom.truth_at(&pose, cal);
        let est_view = estimate
            .as_ref()
            .map(|e| (e.direction().into_inner(), e.r_v));
        let y_axis = pose.axis(1);
        let m = compute_metrics(
            &y_axis,
            if is_frame {
                est_view.as_ref().map(|(d, r)| (d, *r))
            } else {
                None
            },
            x_c,
            cal,
            truth.as_ref(),
        );
        let force = contact.force_at(pose.translation()).norm();
        rows.push(TraceRow {
            t,
            motion_t: motion_start.map(|s| t - s),
            phase,
            frame: is_frame,
            commanded,
            px: pose.translation().x,
            py: pose.translation().y,
            pz: pose.translation().z,
            yx: y_axis.x,
            yy: y_axis.y,
            yz: y_axis.z,
            force,
            halted,
            x_c,
            nvx: est_view.map(|(d, _)| d.x),
            nvy: est_view.map(|(d, _)| d.y),
            nvz: est_view.map(|(d, _)| d.z),
            r_v: estimate.map(|e| e.r_v),
            eps: estimate.map(|e| e.eps),
            objective: estimate.map(|e| e.objective_value),
            e_or_rea: m.e_or_rea,
            e_or_com: m.e_or_com,
            e_ce: m.e_ce,
            e_ra: m.e_ra,
        });
        if halted {
            if cfg.operator_reset {
                gate.reset();
            } else {
                status = RunStatus::Halted;
                break;
            }
        }

        let target = Pose::new(ref_rot, ref_pos);
        let (next, report) = step_impedance(&state, &target, &cfg.impedance, Some(&contact), dt)?;
        state = next;
        if gate.check(report.peak_force) == GateStatus::Halted {
            state.linear_velocity = Vec3::zeros();
            state.angular_velocity = Vec3::zeros();
            ref_pos = *state.pose.translation();
            ref_rot = *state.pose.rotation();
        }
    }

    let summary = summarize(&rows, &cfg.thresholds, status);
    let final_spread = if buffer.is_empty() {
        Vec::new()
    } else {
        buffer.spread_view()?
    };
    Ok(ScreeningTrace {
        config: cfg.clone(),
        offset_sign: cfg.offset_sign(),
        rows,
        summary,
        final_estimate: estimate,
        final_raw: buffer.raw_points(),
        final_spread,
    })
}

impl ScreeningTrace {
    /// Comment lines written ahead of the CSV header.
    pub fn header_lines(&self) -> Vec<String> {
        let c = &self.config;
        let k = c.impedance.stiffness;
        vec![
            format!("seed = {}", c.seed),
            format!("initial_offset_deg = {}", self.offset_sign * c.initial_offset_deg),
            format!(
                "K_m = [{}, {}, {}, {}, {}, {}] (N/m x y z, Nm/rad rx ry rz)",
                k[0], k[1], k[2], k[3], k[4], k[5]
            ),
            format!("damping_ratio = {}", c.impedance.damping_ratio),
            format!(
                "blend = vector sum: march {} mm/s along Y_p projected on the skin, plus lateral centering to the last seen vessel position",
                c.march_velocity
            ),
            format!("status = {}", self.summary.status),
        ]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        for line in self.header_lines() {
            writeln!(file, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metadata(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            config: &'a ScenarioConfig,
            offset_sign: f64,
            summary: &'a RunSummary,
            final_estimate: Option<&'a CenterlineEstimate>,
        }
        let meta = Meta {
            config: &self.config,
            offset_sign: self.offset_sign,
            summary: &self.summary,
            final_estimate: self.final_estimate.as_ref(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &meta)?;
        Ok(())
    }

    pub fn write_ply(&self, raw: impl AsRef<Path>, spread: impl AsRef<Path>) -> Result<()> {
        crate::buffer::write_ply(raw, &self.final_raw)?;
        crate::buffer::write_ply(spread, &self.final_spread)
    }
}

/// Reads a trace written by [`ScreeningTrace::write_csv`]; returns the
/// comment lines and the rows.
pub fn read_trace(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<TraceRow>)> {
    let mut comments = Vec::new();
    for line in BufReader::new(File::open(path.as_ref())?).lines() {
        let line = line?;
        match line.strip_prefix('#') {
            Some(c) => comments.push(c.trim().to_string()),
            None => break,
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<TraceRow>, _>>()?;
    Ok((comments, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub offset_deg: f64,
    pub repeat: usize,
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRecord {
    pub offset_deg: f64,
    pub completed: usize,
    pub aborted: usize,
    /// Pooled steady-state samples of the completed runs.
    pub stats: SteadyStats,
    /// Medians over completed runs that converged.
    pub times: ConvergenceTimes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<AggregateRecord>,
}

/// Seed of run `repeat` at offset index `offset_idx`.
pub fn batch_seed(base: u64, offset_idx: usize, repeat: usize) -> u64 {
    base.wrapping_add(1000 * offset_idx as u64)
        .wrapping_add(repeat as u64)
}

fn median(values: &[f64]) -> Option<f64> {
    ErrorStats::of(values).map(|s| s.median)
}

/// Runs every offset `repeats` times (in parallel) and aggregates per offset.
pub fn batch_runs(
    template: &ScenarioConfig,
    offsets: &[f64],
    repeats: usize,
) -> Result<BatchSummary> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be ≥ 1".into()));
    }
    if offsets.is_empty() {
        return Err(Error::EmptyInput("offsets"));
    }
    let jobs: Vec<(usize, f64, usize)> = offsets
        .iter()
        .enumerate()
        .flat_map(|(i, &o)| (0..repeats).map(move |r| (i, o, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, offset, repeat)| {
            let cfg = ScenarioConfig {
                initial_offset_deg: offset,
                seed: batch_seed(template.seed, i, repeat),
                ..template.clone()
            };
            let trace = run_screening(&cfg)?;
            Ok(RunRecord {
                offset_deg: offset,
                repeat,
                seed: cfg.seed,
                summary: trace.summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let aggregates = offsets
        .iter()
        .enumerate()
        .map(|(i, &offset)| {
            let group = &runs[i * repeats..(i + 1) * repeats];
            let done: Vec<&RunRecord> = group
                .iter()
                .filter(|r| r.summary.status == RunStatus::Completed)
                .collect();
            let mut pooled = SteadySamples::default();
            for r in &done {
                pooled.extend(&r.summary.steady);
            }
            let times_of = |f: fn(&ConvergenceTimes) -> Option<f64>| {
                median(
                    &done
                        .iter()
                        .filter_map(|r| f(&r.summary.times))
                        .collect::<Vec<_>>(),
                )
            };
            AggregateRecord {
                offset_deg: offset,
                completed: done.len(),
                aborted: group.len() - done.len(),
                stats: pooled.stats(),
                times: ConvergenceTimes {
                    t_or: times_of(|t| t.t_or),
                    t_ce: times_of(|t| t.t_ce),
                    t_ra: times_of(|t| t.t_ra),
                },
            }
        })
        .collect();
    Ok(BatchSummary { runs, aggregates })
}

#[derive(Debug, Serialize)]
struct CsvRow {
    kind: &'static str,
    offset_deg: f64,
    repeat: Option<usize>,
    seed: Option<u64>,
    status: String,
    completed: usize,
    aborted: usize,
    e_or_rea_mean: Option<f64>,
    e_or_rea_sd: Option<f64>,
    e_or_rea_median: Option<f64>,
    e_or_rea_max: Option<f64>,
    e_or_com_mean: Option<f64>,
    e_or_com_sd: Option<f64>,
    e_or_com_median: Option<f64>,
    e_or_com_max: Option<f64>,
    e_ce_mean: Option<f64>,
    e_ce_sd: Option<f64>,
    e_ce_median: Option<f64>,
    e_ce_max: Option<f64>,
    e_ra_mean: Option<f64>,
    e_ra_sd: Option<f64>,
    e_ra_median: Option<f64>,
    e_ra_max: Option<f64>,
    t_or: Option<f64>,
    t_ce: Option<f64>,
    t_ra: Option<f64>,
}

impl CsvRow {
    fn new(
        kind: &'static str,
        offset_deg: f64,
        status: String,
        stats: &SteadyStats,
        times: &ConvergenceTimes,
    ) -> Self {
        let f = |s: &Option<ErrorStats>, g: fn(&ErrorStats) -> f64| s.as_ref().map(g);
        Self {
            kind,
            offset_deg,
            repeat: None,
            seed: None,
            status,
            completed: 0,
            aborted: 0,
            e_or_rea_mean: f(&stats.e_or_rea, |s| s.mean),
            e_or_rea_sd: f(&stats.e_or_rea, |s| s.sd),
            e_or_rea_median: f(&stats.e_or_rea, |s| s.median),
            e_or_rea_max: f(&stats.e_or_rea, |s| s.max),
            e_or_com_mean: f(&stats.e_or_com, |s| s.mean),
            e_or_com_sd: f(&stats.e_or_com, |s| s.sd),
            e_or_com_median: f(&stats.e_or_com, |s| s.median),
            e_or_com_max: f(&stats.e_or_com, |s| s.max),
            e_ce_mean: f(&stats.e_ce, |s| s.mean),
            e_ce_sd: f(&stats.e_ce, |s| s.sd),
            e_ce_median: f(&stats.e_ce, |s| s.median),
            e_ce_max: f(&stats.e_ce, |s| s.max),
            e_ra_mean: f(&stats.e_ra, |s| s.mean),
            e_ra_sd: f(&stats.e_ra, |s| s.sd),
            e_ra_median: f(&stats.e_ra, |s| s.median),
            e_ra_max: f(&stats.e_ra, |s| s.max),
            t_or: times.t_or,
            t_ce: times.t_ce,
            t_ra: times.t_ra,
        }
    }
}

impl BatchSummary {
    /// One row per run followed by one aggregate row per offset.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.runs {
            let mut row = CsvRow::new(
                "run",
                r.offset_deg,
                r.summary.status.to_string(),
                &r.summary.stats,
                &r.summary.times,
            );
            row.repeat = Some(r.repeat);
            row.seed = Some(r.seed);
            let done = r.summary.status == RunStatus::Completed;
            row.completed = done as usize;
            row.aborted = (!done) as usize;
            w.serialize(row)?;
        }
        for a in &self.aggregates {
            let mut row = CsvRow::new(
                "aggregate",
                a.offset_deg,
                "aggregate".into(),
                &a.stats,
                &a.times,
            );
            row.completed = a.completed;
            row.aborted = a.aborted;
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }

    /// Median convergence times over all completed runs, unconverged runs
    /// counting as never converging.
    pub fn median_times(&self) -> (f64, f64, f64) {
        let med = |f: fn(&ConvergenceTimes) -> Option<f64>| {
            let v: Vec<f64> = self
                .runs
                .iter()
                .filter(|r| r.summary.status == RunStatus::Completed)
                .map(|r| f(&r.summary.times).unwrap_or(f64::INFINITY))
                .collect();
            median(&v).unwrap_or(f64::NAN)
        };
        (med(|t| t.t_or), med(|t| t.t_ce), med(|t| t.t_ra))
    }
}

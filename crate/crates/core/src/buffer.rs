//! Ring buffer of the newest per-frame boundary clouds, with centroid
//! spreading applied on read.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Vec3};

/// Default spreading coefficient μ.
pub const DEFAULT_SPREAD_MU: f64 = 5.0;
/// Default ring capacity N_R.
pub const DEFAULT_CAPACITY: usize = 10;
/// Relative singular-value floor below which a cloud counts as coplanar.
pub const COPLANAR_RATIO: f64 = 1e-6;

/// One frame's vessel-boundary points in `{b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCloud {
    pub frame_id: u64,
    pub timestamp: f64,
    pub source_pose: Pose,
    points: Vec<Vec3>,
    centroid: Vec3,
}

impl BoundaryCloud {
    pub fn new(frame_id: u64, timestamp: f64, source_pose: Pose, points: Vec<Vec3>) -> Self {
        let centroid = mean(&points);
        Self {
            frame_id,
            timestamp,
            source_pose,
            points,
            centroid,
        }
    }

    pub fn empty(frame_id: u64, timestamp: f64, source_pose: Pose) -> Self {
        Self::new(frame_id, timestamp, source_pose, Vec::new())
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    /// Arithmetic mean of the points (zero for an empty cloud).
    pub fn centroid(&self) -> Vec3 {
        self.centroid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same metadata, new points.
    pub fn with_points(&self, points: Vec<Vec3>) -> Self {
        Self::new(self.frame_id, self.timestamp, self.source_pose, points)
    }
}

pub(crate) fn mean(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Singular values of a centred point set and whether it is (numerically) planar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coplanarity {
    /// Singular values of the centred point matrix, descending.
    pub singular_values: [f64; 3],
    pub degenerate: bool,
}

pub fn coplanarity(points: &[Vec3]) -> Coplanarity {
    let c = mean(points);
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let singular_values = [sv[0], sv[1], sv[2]];
    Coplanarity {
        singular_values,
        degenerate: points.len() < 4 || singular_values[2] < COPLANAR_RATIO * singular_values[0],
    }
}

/// FIFO of the newest `capacity` clouds.
#[derive(Debug, Clone)]
pub struct CloudRingBuffer {
    capacity: usize,
    spread_mu: f64,
    slots: VecDeque<BoundaryCloud>,
}

impl CloudRingBuffer {
    pub fn new(capacity: usize, spread_mu: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig(
                "ring buffer capacity must be ≥ 1".into(),
            ));
        }
        if !(spread_mu >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "spread μ must be ≥ 0, got {spread_mu}"
            )));
        }
        Ok(Self {
            capacity,
            spread_mu,
            slots: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn spread_mu(&self) -> f64 {
        self.spread_mu
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// Appends a cloud, evicting the oldest when over capacity. Returns the
    /// evicted cloud, if any.
    pub fn push(&mut self, cloud: BoundaryCloud) -> Result<Option<BoundaryCloud>> {
        if cloud.is_empty() {
            return Err(Error::EmptyInput("boundary cloud"));
        }
        self.slots.push_back(cloud);
        if self.slots.len() > self.capacity {
            Ok(self.slots.pop_front())
        } else {
            Ok(None)
        }
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &BoundaryCloud> {
        self.slots.iter()
    }

    pub fn newest(&self) -> Option<&BoundaryCloud> {
        self.slots.back()
    }

    pub fn raw_points(&self) -> Vec<Vec3> {
        self.slots
            .iter()
            .flat_map(|c| c.points().iter().copied())
            .collect()
    }

    /// Every point of cloud `j` shifted by `μ (C_j − C_1)`, `C_1` being the
    /// oldest buffered centroid.
    pub fn spread_view(&self) -> Result<Vec<Vec3>> {
        let anchor = self.slots.front().ok_or(Error::EmptyBuffer)?.centroid();
        let mut out = Vec::with_capacity(self.slots.iter().map(BoundaryCloud::len).sum());
        for cloud in &self.slots {
            let shift = self.spread_mu * (cloud.centroid() - anchor);
            out.extend(cloud.points().iter().map(|p| p + shift));
        }
        Ok(out)
    }

    /// Coplanarity diagnostic on the spread union.
    pub fn coplanarity(&self) -> Result<Coplanarity> {
        Ok(coplanarity(&self.spread_view()?))
    }

    /// Largest distance between any two buffered (raw) centroids, in mm.
    pub fn centroid_span(&self) -> f64 {
        let cs: Vec<Vec3> = self.slots.iter().map(BoundaryCloud::centroid).collect();
        let mut best: f64 = 0.0;
        for (i, a) in cs.iter().enumerate() {
            for b in &cs[i + 1..] {
                best = best.max((a - b).norm());
            }
        }
        best
    }

    pub fn write_ply(&self, path: impl AsRef<Path>, spread: bool) -> Result<()> {
        let pts = if spread {
            self.spread_view()?
        } else {
            self.raw_points()
        };
        write_ply(path, &pts)
    }
}

/// Thread-safe handle for one acquisition writer and one optimizer reader.
#[derive(Debug, Clone)]
pub struct SharedCloudBuffer {
    inner: Arc<Mutex<CloudRingBuffer>>,
}

impl SharedCloudBuffer {
    pub fn new(buffer: CloudRingBuffer) -> Self {
        Self {
            inner: Arc::new(Mutex::new(buffer)),
        }
    }

    fn lock(&self) -> MutexGuard<'_, CloudRingBuffer> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, cloud: BoundaryCloud) -> Result<Option<BoundaryCloud>> {
        self.lock().push(cloud)
    }

    /// Spread and raw points taken under a single lock.
    pub fn views(&self) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        let guard = self.lock();
        Ok((guard.spread_view()?, guard.raw_points()))
    }

    pub fn is_full(&self) -> bool {
        self.lock().is_full()
    }

    pub fn snapshot(&self) -> CloudRingBuffer {
        self.lock().clone()
    }
}

/// ASCII PLY with vertex positions only.
pub fn write_ply(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment units mm, frame base")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "end_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ring(center: Vec3, id: u64) -> BoundaryCloud {
        let pts = (0..12)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 12.0;
                center + Vec3::new(3.0 * a.cos(), 0.0, 3.0 * a.sin())
            })
            .collect();
        BoundaryCloud::new(id, id as f64 * 0.02, Pose::identity(), pts)
    }

    #[test]
    fn eviction_keeps_newest() {
        let mut buf = CloudRingBuffer::new(10, 5.0).unwrap();
        for i in 0..11 {
            buf.push(ring(Vec3::new(0.0, i as f64, 0.0), i)).unwrap();
        }
        assert_eq!(buf.len(), 10);
        assert!(buf.is_full());
        let ids: Vec<u64> = buf.iter().map(|c| c.frame_id).collect();
        assert_eq!(ids, (1..11).collect::<Vec<_>>());
    }

    #[test]
    fn single_push_not_full() {
        let mut buf = CloudRingBuffer::new(10, 5.0).unwrap();
        buf.push(ring(Vec3::zeros(), 0)).unwrap();
        assert_eq!(buf.len(), 1);
        assert!(!buf.is_full());
    }

    #[test]
    fn empty_cloud_rejected() {
        let mut buf = CloudRingBuffer::new(3, 5.0).unwrap();
        let r = buf.push(BoundaryCloud::empty(0, 0.0, Pose::identity()));
        assert!(matches!(r, Err(Error::EmptyInput(_))));
        assert!(matches!(buf.spread_view(), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn trailing_window_matches_reference_list() {
        let mut buf = CloudRingBuffer::new(10, 5.0).unwrap();
        let mut reference: Vec<u64> = Vec::new();
        for i in 0..100u64 {
            buf.push(ring(Vec3::new(0.0, i as f64 * 0.2, 0.0), i))
                .unwrap();
            reference.push(i);
            if i % 3 == 0 {
                let _ = buf.spread_view().unwrap();
            }
            let start = reference.len().saturating_sub(10);
            let ids: Vec<u64> = buf.iter().map(|c| c.frame_id).collect();
            assert_eq!(ids, reference[start..].to_vec());
        }
    }

    #[test]
    fn zero_mu_is_concatenation() {
        let mut buf = CloudRingBuffer::new(4, 0.0).unwrap();
        for i in 0..4 {
            buf.push(ring(Vec3::new(i as f64, 2.0 * i as f64, 0.0), i))
                .unwrap();
        }
        assert_eq!(buf.spread_view().unwrap(), buf.raw_points());
    }

    #[test]
    fn two_clouds_mu_five() {
        let mut buf = CloudRingBuffer::new(4, DEFAULT_SPREAD_MU).unwrap();
        let a = ring(Vec3::zeros(), 0);
        let b = ring(Vec3::new(0.0, 1.0, 0.0), 1);
        buf.push(a.clone()).unwrap();
        buf.push(b.clone()).unwrap();
        let spread = buf.spread_view().unwrap();
        for (got, raw) in spread[..a.len()].iter().zip(a.points()) {
            assert_abs_diff_eq!(*got, *raw, epsilon = 1e-12);
        }
        for (got, raw) in spread[a.len()..].iter().zip(b.points()) {
            assert_abs_diff_eq!(*got, raw + Vec3::new(0.0, 5.0, 0.0), epsilon = 1e-12);
        }
        // stored clouds untouched
        assert_eq!(buf.iter().nth(1).unwrap(), &b);
    }

    #[test]
    fn paused_probe_is_flagged_degenerate() {
        let mut buf = CloudRingBuffer::new(5, 5.0).unwrap();
        for i in 0..5 {
            buf.push(ring(Vec3::new(1.0, 2.0, 3.0), i)).unwrap();
        }
        assert_eq!(buf.spread_view().unwrap(), buf.raw_points());
        assert!(buf.coplanarity().unwrap().degenerate);
        assert_eq!(buf.centroid_span(), 0.0);

        let mut moving = CloudRingBuffer::new(5, 5.0).unwrap();
        for i in 0..5 {
            moving
                .push(ring(Vec3::new(0.0, 0.2 * i as f64, 0.0), i))
                .unwrap();
        }
        assert!(!moving.coplanarity().unwrap().degenerate);
        assert_abs_diff_eq!(moving.centroid_span(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn shared_buffer_across_threads() {
        let shared = SharedCloudBuffer::new(CloudRingBuffer::new(10, 5.0).unwrap());
        let writer = shared.clone();
        let handle = std::thread::spawn(move || {
            for i in 0..200 {
                writer
                    .push(ring(Vec3::new(0.0, 0.2 * i as f64, 0.0), i))
                    .unwrap();
            }
        });
        for _ in 0..200 {
            if let Ok((spread, raw)) = shared.views() {
                // each read sees whole clouds only
                assert_eq!(spread.len() % 12, 0);
                assert_eq!(spread.len(), raw.len());
            }
        }
        handle.join().unwrap();
        assert!(shared.is_full());
        assert_eq!(shared.snapshot().newest().unwrap().frame_id, 199);
    }

    #[test]
    fn ply_dump_has_header_and_rows() {
        let mut buf = CloudRingBuffer::new(2, 5.0).unwrap();
        buf.push(ring(Vec3::zeros(), 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        buf.write_ply(&path, true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert!(text.contains("element vertex 12\n"));
        assert_eq!(text.lines().count(), 8 + 12);
    }

    fn arb_clouds() -> impl Strategy<Value = Vec<Vec<(f64, f64, f64)>>> {
        prop::collection::vec(
            prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64), 1..8),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn spreading_preserves_shape_and_shifts_centroid(clouds in arb_clouds(), mu in 0.0..10.0f64) {
            let mut buf = CloudRingBuffer::new(8, mu).unwrap();
            for (i, c) in clouds.iter().enumerate() {
                let pts = c.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
                buf.push(BoundaryCloud::new(i as u64, 0.0, Pose::identity(), pts)).unwrap();
            }
            let spread = buf.spread_view().unwrap();
            let raw = buf.raw_points();
            let mut offset = 0;
            for cloud in buf.iter() {
                let n = cloud.len();
                for i in 0..n {
                    for j in 0..n {
                        let before = (raw[offset + i] - raw[offset + j]).norm();
                        let after = (spread[offset + i] - spread[offset + j]).norm();
                        prop_assert!((before - after).abs() < 1e-9);
                    }
                }
                offset += n;
            }
            // union centroid: raw mean + μ·(point-weighted mean of C_j − C_1)
            let c1 = buf.iter().next().unwrap().centroid();
            let total: usize = buf.iter().map(BoundaryCloud::len).sum();
            let weighted: Vec3 = buf.iter().map(|c| (c.centroid() - c1) * c.len() as f64).sum::<Vec3>() / total as f64;
            let expected = mean(&raw) + mu * weighted;
            prop_assert!((mean(&spread) - expected).norm() < 1e-9);
        }
    }
}

//! Mask-level utilities: overlap score, blob extraction with outer contour
//! tracing, and frame-to-frame candidate tracking.
//!
//! Masks are indexed `(x, y)` with `x` the lateral pixel index `u` and `y`
//! the depth index `v`, stored row-major.

use std::collections::VecDeque;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};

use crate::error::{Error, Result};

/// Default minimum blob area (px²) kept by [`extract_candidates`].
pub const DEFAULT_MIN_AREA: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch {
                left: (width, height),
                right: (bits.len(), 1),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Fills every pixel whose integer coordinate lies inside the closed
    /// polygon (even–odd rule). Vertices are in pixel units.
    pub fn fill_polygon(&mut self, vertices: &[(f64, f64)]) {
        if vertices.len() < 3 {
            return;
        }
        let (ymin, ymax) = vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| {
                (lo.min(y), hi.max(y))
            });
        let y0 = ymin.ceil().max(0.0) as usize;
        let y1 = ymax.floor().min(self.height as f64 - 1.0);
        if y1 < 0.0 {
            return;
        }
        let mut xs = Vec::new();
        for y in y0..=(y1 as usize) {
            let yf = y as f64;
            xs.clear();
            for (i, &(xa, ya)) in vertices.iter().enumerate() {
                let (xb, yb) = vertices[(i + 1) % vertices.len()];
                // half-open rule so shared vertices count once
                if (ya <= yf && yb > yf) || (yb <= yf && ya > yf) {
                    xs.push(xa + (yf - ya) * (xb - xa) / (yb - ya));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                let xa = pair[0].ceil().max(0.0);
                let xb = pair[1].floor().min(self.width as f64 - 1.0);
                if xb < xa {
                    continue;
                }
                for x in (xa as usize)..=(xb as usize) {
                    self.set(x, y, true);
                }
            }
        }
    }

    /// Writes a binary PGM (P5), foreground 255.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) {
                255
            } else {
                0
            }])
        });
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(
                img.as_raw(),
                img.width(),
                img.height(),
                ExtendedColorType::L8,
            )?;
        Ok(())
    }

    /// Reads a PGM; pixels above half scale are foreground.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(w, h, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] > 127
        }))
    }
}

/// `2|G∩S| / (|G|+|S|)`, with two empty masks scoring 1.
pub fn dice(truth: &BinaryMask, seg: &BinaryMask) -> Result<f64> {
    if truth.dims() != seg.dims() {
        return Err(Error::DimensionMismatch {
            left: truth.dims(),
            right: seg.dims(),
        });
    }
    let (mut inter, mut g, mut s) = (0usize, 0usize, 0usize);
    for (&a, &b) in truth.bits.iter().zip(&seg.bits) {
        g += a as usize;
        s += b as usize;
        inter += (a && b) as usize;
    }
    if g + s == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (g + s) as f64)
}

/// A detected blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Mean member pixel `(u, v)`.
    pub centroid: (f64, f64),
    /// Outer contour, traced clockwise from the first pixel in raster order.
    pub boundary: Vec<(usize, usize)>,
    pub area: usize,
}

// clockwise with y pointing down: W, NW, N, NE, E, SE, S, SW
const RING: [(isize, isize); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn ring_index(dx: isize, dy: isize) -> usize {
    RING.iter().position(|&d| d == (dx, dy)).expect("unit step")
}

/// 4-connected components of at least `min_area` pixels, largest first.
pub fn extract_candidates(mask: &BinaryMask, min_area: usize) -> Vec<Candidate> {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        let (mut sx, mut sy, mut area) = (0.0, 0.0, 0usize);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            sx += x as f64;
            sy += y as f64;
            area += 1;
            let mut visit = |j: usize| {
                if mask.bits[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area < min_area.max(1) {
            continue;
        }
        let boundary = trace_contour(&labels, w, h, (start % w, start / w), next);
        out.push(Candidate {
            centroid: (sx / area as f64, sy / area as f64),
            boundary,
            area,
        });
    }
    // stable: equal areas keep raster order
    out.sort_by(|a, b| b.area.cmp(&a.area));
    out
}

/// Moore-neighbour tracing with Jacob's stopping criterion.
fn trace_contour(
    labels: &[u32],
    w: usize,
    h: usize,
    start: (usize, usize),
    label: u32,
) -> Vec<(usize, usize)> {
    let member = |x: isize, y: isize| {
        x >= 0
            && y >= 0
            && (x as usize) < w
            && (y as usize) < h
            && labels[y as usize * w + x as usize] == label
    };
    let mut contour = vec![start];
    // the raster-first pixel has no member to its west
    let start_back = 0usize;
    let (mut cx, mut cy) = (start.0 as isize, start.1 as isize);
    let mut back = start_back;
    let limit = 4 * w * h + 8;
    for _ in 0..limit {
        let mut found = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let (nx, ny) = (cx + RING[d].0, cy + RING[d].1);
            if member(nx, ny) {
                let prev = (back + k - 1) % 8;
                let (bx, by) = (cx + RING[prev].0, cy + RING[prev].1);
                found = Some((nx, ny, ring_index(bx - nx, by - ny)));
                break;
            }
        }
        let Some((nx, ny, nb)) = found else {
            break; // isolated pixel
        };
        if (nx, ny) == (start.0 as isize, start.1 as isize) && nb == start_back {
            break;
        }
        cx = nx;
        cy = ny;
        back = nb;
        if (cx, cy) != (start.0 as isize, start.1 as isize) {
            contour.push((cx as usize, cy as usize));
        }
    }
    contour
}

/// Picks the candidate nearest the previous centroid (ties within 1e-9 go to
/// the larger area), or the largest one when there is no history.
pub fn track_nearest<'a>(
    previous: Option<(f64, f64)>,
    candidates: &'a [Candidate],
) -> Option<&'a Candidate> {
    let prev = match previous {
        Some(p) => p,
        None => {
            return candidates
                .iter()
                .fold(None, |best: Option<&Candidate>, c| match best {
                    Some(b) if b.area >= c.area => Some(b),
                    _ => Some(c),
                })
        }
    };
    let dist =
        |c: &Candidate| ((c.centroid.0 - prev.0).powi(2) + (c.centroid.1 - prev.1).powi(2)).sqrt();
    let mut best: Option<(&Candidate, f64)> = None;
    for c in candidates {
        let d = dist(c);
        best = match best {
            None => Some((c, d)),
            Some((b, bd)) => {
                if d < bd - 1e-9 || ((d - bd).abs() <= 1e-9 && c.area > b.area) {
                    Some((c, d))
                } else {
                    Some((b, bd))
                }
            }
        };
    }
    best.map(|(c, _)| c)
}

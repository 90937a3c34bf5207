//! Marker detection and sparse pyramidal Lucas–Kanade tracking.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GelImage;
use crate::Vec2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("found {found} markers, expected {expected}")]
    CountMismatch { found: usize, expected: usize },
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("need at least two frames, got {0}")]
    TooFewFrames(usize),
    #[error("invalid track config: {0}")]
    InvalidConfig(String),
}

/// Smallest connected dark region accepted as a marker, in pixels.
pub const MIN_BLOB_AREA: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSet {
    pub centroids: Vec<Vec2>,
    pub detection_threshold: u8,
}

impl MarkerSet {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

/// Otsu's between-class-variance split. `None` when the image has fewer than
/// two distinct intensities.
pub fn otsu_threshold(image: &GelImage) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &p in image.pixels() {
        hist[p as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = image.pixels().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w_lo, mut sum_lo) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for (t, &count) in hist.iter().enumerate().take(255) {
        w_lo += count as f64;
        sum_lo += t as f64 * count as f64;
        let w_hi = total - w_lo;
        if w_lo == 0.0 || w_hi == 0.0 {
            continue;
        }
        let mean_lo = sum_lo / w_lo;
        let mean_hi = (sum_all - sum_lo) / w_hi;
        let between = w_lo * w_hi * (mean_lo - mean_hi).powi(2);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

/// Finds dark blobs at or below an Otsu threshold and returns their
/// darkness-weighted centroids in row-major order. Fails with
/// [`TrackError::CountMismatch`] when the number found differs from
/// `expected_count`.
pub fn detect_markers(image: &GelImage, expected_count: usize) -> Result<MarkerSet, TrackError> {
    let set = find_markers(image);
    if set.len() != expected_count {
        return Err(TrackError::CountMismatch {
            found: set.len(),
            expected: expected_count,
        });
    }
    Ok(set)
}

/// Like [`detect_markers`] without the count check.
pub fn find_markers(image: &GelImage) -> MarkerSet {
    let Some(threshold) = otsu_threshold(image) else {
        return MarkerSet {
            centroids: Vec::new(),
            detection_threshold: 0,
        };
    };
    let (w, h) = (image.width(), image.height());
    let px = image.pixels();
    let mut seen = vec![false; px.len()];
    let mut stack = Vec::new();
    let mut centroids = Vec::new();
    for start in 0..px.len() {
        if seen[start] || px[start] > threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut mass, mut mx, mut my) = (0usize, 0.0f64, 0.0f64, 0.0f64);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            let weight = (threshold as f64 + 1.0) - px[idx] as f64;
            area += 1;
            mass += weight;
            mx += weight * x as f64;
            my += weight * y as f64;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let n = ny * w + nx;
                    if !seen[n] && px[n] <= threshold {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        if area >= MIN_BLOB_AREA {
            centroids.push(Vec2::new(mx / mass, my / mass));
        }
    }
    sort_row_major(&mut centroids);
    MarkerSet {
        centroids,
        detection_threshold: threshold,
    }
}

/// Groups points into rows by splitting at large vertical gaps, then orders
/// each row left to right.
fn sort_row_major(points: &mut [Vec2]) {
    if points.len() < 2 {
        return;
    }
    points.sort_by(|a, b| a.y.total_cmp(&b.y));
    let max_gap = points.windows(2).map(|p| p[1].y - p[0].y).fold(0.0f64, f64::max);
    let split = (0.5 * max_gap).max(4.0);
    let mut start = 0;
    for i in 1..=points.len() {
        if i == points.len() || points[i].y - points[i - 1].y > split {
            points[start..i].sort_by(|a, b| a.x.total_cmp(&b.x));
            start = i;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEntry {
    pub base: Vec2,
    pub delta: Vec2,
    pub valid: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowField {
    pub entries: Vec<FlowEntry>,
}

impl FlowField {
    pub fn from_deltas(bases: &[Vec2], deltas: &[Vec2]) -> Self {
        Self {
            entries: bases
                .iter()
                .zip(deltas)
                .map(|(&base, &delta)| FlowEntry {
                    base,
                    delta,
                    valid: true,
                    residual: 0.0,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn valid(&self) -> impl Iterator<Item = &FlowEntry> {
        self.entries.iter().filter(|e| e.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.valid().count()
    }

    /// Mean delta over valid entries; zero when none are valid.
    pub fn mean_delta(&self) -> Vec2 {
        let (sum, n) = self
            .valid()
            .fold((Vec2::zeros(), 0usize), |(s, n), e| (s + e.delta, n + 1));
        if n == 0 {
            Vec2::zeros()
        } else {
            sum / n as f64
        }
    }

    /// Debug dump: `base_x,base_y,dx,dy,valid,residual`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["base_x", "base_y", "dx", "dy", "valid", "residual"])?;
        for e in &self.entries {
            wr.write_record([
                e.base.x.to_string(),
                e.base.y.to_string(),
                e.delta.x.to_string(),
                e.delta.y.to_string(),
                u8::from(e.valid).to_string(),
                e.residual.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub window_half: usize,
    pub pyramid_levels: usize,
    pub max_iterations: usize,
    /// Stop once an update moves less than this, px.
    pub epsilon: f64,
    /// Minimum eigenvalue of the per-pixel-normalized structure tensor.
    pub min_eigen: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            window_half: 7,
            pyramid_levels: 3,
            max_iterations: 20,
            epsilon: 0.01,
            min_eigen: 1.0,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if self.window_half < 2 {
            return Err(TrackError::InvalidConfig("window_half must be >= 2".into()));
        }
        if self.pyramid_levels < 1 {
            return Err(TrackError::InvalidConfig("pyramid_levels must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(TrackError::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(TrackError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn from_image(img: &GelImage) -> Self {
        Self {
            w: img.width(),
            h: img.height(),
            data: img.pixels().iter().map(|&p| p as f32).collect(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    /// Bilinear sample with coordinates clamped to the image.
    #[inline]
    fn sample(&self, x: f64, y: f64) -> f64 {
        let xf = x.clamp(0.0, (self.w - 1) as f64);
        let yf = y.clamp(0.0, (self.h - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let ax = xf - x0 as f64;
        let ay = yf - y0 as f64;
        let top = (1.0 - ax) * self.at(x0, y0) as f64 + ax * self.at(x1, y0) as f64;
        let bottom = (1.0 - ax) * self.at(x0, y1) as f64 + ax * self.at(x1, y1) as f64;
        (1.0 - ay) * top + ay * bottom
    }

    /// 5-tap binomial blur followed by 2x decimation.
    fn pyr_down(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.w, self.h);
        let mut horiz = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, weight) in K.iter().enumerate() {
                    let sx = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                    acc += weight * self.data[y * w + sx];
                }
                horiz[y * w + x] = acc;
            }
        }
        let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
        let mut data = vec![0f32; nw * nh];
        for ny in 0..nh {
            let y = 2 * ny;
            for nx in 0..nw {
                let x = 2 * nx;
                let mut acc = 0.0;
                for (k, weight) in K.iter().enumerate() {
                    let sy = (y as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                    acc += weight * horiz[sy * w + x];
                }
                data[ny * nw + nx] = acc;
            }
        }
        Plane { w: nw, h: nh, data }
    }

    /// Central differences with border clamping.
    fn gradients(&self) -> (Plane, Plane) {
        let (w, h) = (self.w, self.h);
        let mut gx = vec![0f32; w * h];
        let mut gy = vec![0f32; w * h];
        for y in 0..h {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
                gx[y * w + x] = 0.5 * (self.at(xp, y) - self.at(xm, y));
                gy[y * w + x] = 0.5 * (self.at(x, yp) - self.at(x, ym));
            }
        }
        (Plane { w, h, data: gx }, Plane { w, h, data: gy })
    }
}

fn build_pyramid(img: &GelImage, levels: usize) -> Vec<Plane> {
    let mut pyr = vec![Plane::from_image(img)];
    while pyr.len() < levels {
        let next = pyr.last().unwrap().pyr_down();
        pyr.push(next);
    }
    pyr
}

/// Reference frame with its image pyramid and gradients precomputed, so a
/// sequence can be tracked against it without rebuilding them per frame.
#[derive(Debug, Clone)]
pub struct ReferenceFrame {
    width: usize,
    height: usize,
    cfg: TrackConfig,
    levels: Vec<(Plane, Plane, Plane)>,
}

impl ReferenceFrame {
    pub fn new(image: &GelImage, cfg: &TrackConfig) -> Result<Self, TrackError> {
        cfg.validate()?;
        let levels = build_pyramid(image, cfg.pyramid_levels)
            .into_iter()
            .map(|p| {
                let (gx, gy) = p.gradients();
                (p, gx, gy)
            })
            .collect();
        Ok(Self {
            width: image.width(),
            height: image.height(),
            cfg: cfg.clone(),
            levels,
        })
    }

    pub fn config(&self) -> &TrackConfig {
        &self.cfg
    }

    /// Tracks `points` (positions in the reference frame) into `cur`.
    pub fn track(&self, cur: &GelImage, points: &[Vec2]) -> Result<FlowField, TrackError> {
        if cur.width() != self.width || cur.height() != self.height {
            return Err(TrackError::DimensionMismatch(
                self.width,
                self.height,
                cur.width(),
                cur.height(),
            ));
        }
        let cur_pyr = build_pyramid(cur, self.levels.len());
        let entries = points.iter().map(|&p| self.track_point(&cur_pyr, p)).collect();
        Ok(FlowField { entries })
    }

    fn track_point(&self, cur_pyr: &[Plane], base: Vec2) -> FlowEntry {
        let invalid = |residual: f64| FlowEntry {
            base,
            delta: Vec2::zeros(),
            valid: false,
            residual,
        };
        let inside = base.x.is_finite()
            && base.y.is_finite()
            && base.x >= 0.0
            && base.y >= 0.0
            && base.x <= (self.width - 1) as f64
            && base.y <= (self.height - 1) as f64;
        if !inside {
            return invalid(0.0);
        }

        let cfg = &self.cfg;
        let half = cfg.window_half as isize;
        let n_win = ((2 * half + 1) * (2 * half + 1)) as f64;
        let top = self.levels.len() - 1;
        let mut guess = Vec2::zeros();
        let mut ok = true;

        for level in (0..=top).rev() {
            let (prev, gx, gy) = &self.levels[level];
            let cur = &cur_pyr[level];
            let scale = (1u32 << level) as f64;
            let p = base / scale;

            // Template, gradients and structure tensor at the reference position.
            let mut template = Vec::with_capacity(n_win as usize);
            let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
            for v in -half..=half {
                for u in -half..=half {
                    let (x, y) = (p.x + u as f64, p.y + v as f64);
                    let ix = gx.sample(x, y);
                    let iy = gy.sample(x, y);
                    gxx += ix * ix;
                    gxy += ix * iy;
                    gyy += iy * iy;
                    template.push((x, y, prev.sample(x, y), ix, iy));
                }
            }
            let (a, b, c) = (gxx / n_win, gxy / n_win, gyy / n_win);
            let min_eig = 0.5 * ((a + c) - ((a - c).powi(2) + 4.0 * b * b).sqrt());
            let det = gxx * gyy - gxy * gxy;
            if !(min_eig >= cfg.min_eigen) || det <= 0.0 || !det.is_finite() {
                ok = false;
                break;
            }

            let mut d = guess;
            let mut converged = false;
            for _ in 0..cfg.max_iterations {
                let (mut bx, mut by) = (0.0, 0.0);
                for &(x, y, ip, ix, iy) in &template {
                    let diff = ip - cur.sample(x + d.x, y + d.y);
                    bx += ix * diff;
                    by += iy * diff;
                }
                let step = Vec2::new(gyy * bx - gxy * by, gxx * by - gxy * bx) / det;
                if !(step.x.is_finite() && step.y.is_finite()) {
                    break;
                }
                d += step;
                if step.norm() < cfg.epsilon {
                    converged = true;
                    break;
                }
            }
            if level == 0 {
                ok = converged;
                guess = d;
            } else {
                guess = d * 2.0;
            }
        }

        let delta = if ok && guess.x.is_finite() && guess.y.is_finite() {
            guess
        } else {
            Vec2::zeros()
        };
        let residual = self.residual(&cur_pyr[0], base, delta);
        if ok {
            FlowEntry {
                base,
                delta,
                valid: true,
                residual,
            }
        } else {
            invalid(residual)
        }
    }

    fn residual(&self, cur: &Plane, base: Vec2, d: Vec2) -> f64 {
        let prev = &self.levels[0].0;
        let half = self.cfg.window_half as isize;
        let mut sum = 0.0;
        let mut n = 0usize;
        for v in -half..=half {
            for u in -half..=half {
                let (x, y) = (base.x + u as f64, base.y + v as f64);
                sum += (prev.sample(x, y) - cur.sample(x + d.x, y + d.y)).abs();
                n += 1;
            }
        }
        sum / n as f64
    }
}

/// Tracks `points` from `prev` into `cur`.
pub fn lk_flow(
    prev: &GelImage,
    cur: &GelImage,
    points: &MarkerSet,
    cfg: &TrackConfig,
) -> Result<FlowField, TrackError> {
    if prev.width() != cur.width() || prev.height() != cur.height() {
        return Err(TrackError::DimensionMismatch(
            prev.width(),
            prev.height(),
            cur.width(),
            cur.height(),
        ));
    }
    ReferenceFrame::new(prev, cfg)?.track(cur, &points.centroids)
}

/// Flow of every frame relative to the first. The returned vector is aligned
/// with `frames`; entry 0 is the identity flow of the first frame against
/// itself.
pub fn track_sequence(frames: &[GelImage], cfg: &TrackConfig) -> Result<Vec<FlowField>, TrackError> {
    if frames.len() < 2 {
        return Err(TrackError::TooFewFrames(frames.len()));
    }
    let first = &frames[0];
    let markers = find_markers(first);
    let reference = ReferenceFrame::new(first, cfg)?;
    frames.iter().map(|f| reference.track(f, &markers.centroids)).collect()
}

//! Forward model of a dot-matrix gel.
//!
//! An applied [`Wrench`] moves every marker by a linear combination of three
//! fields: a uniform translation (shear), a radial divergence about the grid
//! centroid (normal load) and a rigid rotation about the centroid (torsion).
//! For marker `i` at rest position `p_i`, with `c` the centroid of the rest
//! grid and `R` half the rest-grid diagonal:
//!
//! ```text
//! d_i = k_s·(fx, fy) + k_n·fn·(p_i − c)/R + k_t·tau·perp(p_i − c)/R + jitter
//! ```
//!
//! where `perp(x, y) = (−y, x)`. Jitter is isotropic Gaussian with standard
//! deviation `noise_sigma`, drawn from a ChaCha8 stream seeded by
//! `GelConfig::seed`, so identical seeds and call sequences give bit-identical
//! marker positions and images on every platform.

use std::ops::{Add, Mul};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GelImage;
use crate::Vec2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GelError {
    #[error("invalid gel config: {0}")]
    InvalidConfig(String),
    #[error("invalid wrench: {0}")]
    InvalidWrench(String),
    #[error("marker {index} at ({x:.2}, {y:.2}) escaped the drawable region")]
    MarkerOutOfBounds { index: usize, x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GelConfig {
    pub rows: usize,
    pub cols: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub margin: f64,
    pub dot_radius: f64,
    pub dot_contrast: f64,
    /// Shear gain, px/N.
    pub k_s: f64,
    /// Normal (divergence) gain, px/N.
    pub k_n: f64,
    /// Torsion gain, px/(N·mm).
    pub k_t: f64,
    /// Marker jitter standard deviation, px.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GelConfig {
    fn default() -> Self {
        Self {
            rows: 7,
            cols: 9,
            image_width: 320,
            image_height: 240,
            margin: 40.0,
            dot_radius: 4.0,
            dot_contrast: 0.8,
            k_s: 2.0,
            k_n: 1.5,
            k_t: 0.05,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl GelConfig {
    pub fn validate(&self) -> Result<(), GelError> {
        let bad = |msg: String| Err(GelError::InvalidConfig(msg));
        if self.rows < 2 || self.cols < 2 {
            return bad(format!("grid {}x{} needs at least 2x2", self.rows, self.cols));
        }
        for (name, gain) in [("k_s", self.k_s), ("k_n", self.k_n), ("k_t", self.k_t)] {
            if !(gain.is_finite() && gain > 0.0) {
                return bad(format!("{name} must be positive, got {gain}"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.dot_radius.is_finite() && self.dot_radius > 0.0) {
            return bad(format!("dot_radius must be positive, got {}", self.dot_radius));
        }
        if !(self.dot_contrast > 0.0 && self.dot_contrast <= 1.0) {
            return bad(format!("dot_contrast must be in (0,1], got {}", self.dot_contrast));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad(format!("margin must be >= 0, got {}", self.margin));
        }
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        if 2.0 * self.margin >= w || 2.0 * self.margin >= h {
            return bad(format!(
                "margin {} leaves no room in a {}x{} image",
                self.margin, self.image_width, self.image_height
            ));
        }
        // The last grid column sits at width - margin, which must be a drawable pixel.
        if w - self.margin > w - 1.0 || h - self.margin > h - 1.0 {
            return bad("margin must be at least 1 px".into());
        }
        Ok(())
    }

    /// Rest positions, row-major: index = row·cols + col.
    pub fn rest_grid(&self) -> Vec<Vec2> {
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        let sx = (w - 2.0 * self.margin) / (self.cols - 1) as f64;
        let sy = (h - 2.0 * self.margin) / (self.rows - 1) as f64;
        (0..self.rows)
            .flat_map(|r| {
                (0..self.cols).map(move |c| Vec2::new(self.margin + c as f64 * sx, self.margin + r as f64 * sy))
            })
            .collect()
    }

    pub fn marker_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Contact load on the gel. Forces in newtons, torsion in N·mm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub fx: f64,
    pub fy: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tau: f64,
}

impl Wrench {
    pub const ZERO: Wrench = Wrench {
        fx: 0.0,
        fy: 0.0,
        fn_: 0.0,
        tau: 0.0,
    };

    pub fn new(fx: f64, fy: f64, fn_: f64, tau: f64) -> Self {
        Self { fx, fy, fn_, tau }
    }

    pub fn is_finite(&self) -> bool {
        self.fx.is_finite() && self.fy.is_finite() && self.fn_.is_finite() && self.tau.is_finite()
    }

    /// Euclidean norm of the three force axes; torsion is excluded and a
    /// negative normal component counts as zero.
    pub fn total(&self) -> f64 {
        let normal = self.fn_.max(0.0);
        (self.fx * self.fx + self.fy * self.fy + normal * normal).sqrt()
    }

    pub fn components(&self) -> [f64; 4] {
        [self.fx, self.fy, self.fn_, self.tau]
    }
}

impl Add for Wrench {
    type Output = Wrench;
    fn add(self, o: Wrench) -> Wrench {
        Wrench::new(self.fx + o.fx, self.fy + o.fy, self.fn_ + o.fn_, self.tau + o.tau)
    }
}

impl Mul<f64> for Wrench {
    type Output = Wrench;
    fn mul(self, s: f64) -> Wrench {
        Wrench::new(self.fx * s, self.fy * s, self.fn_ * s, self.tau * s)
    }
}

/// Rest-grid geometry shared by the forward model and the flow inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub centroid: Vec2,
    pub radius_norm: f64,
}

impl GridFrame {
    pub fn of(rest: &[Vec2]) -> Self {
        let n = rest.len().max(1) as f64;
        let centroid = rest.iter().fold(Vec2::zeros(), |acc, p| acc + p) / n;
        let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
        for p in rest {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Self {
            centroid,
            radius_norm: 0.5 * (hi - lo).norm(),
        }
    }
}

#[inline]
pub fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// Noise-free displacement of a marker at `rest` under `w`.
pub fn model_displacement(cfg: &GelConfig, frame: &GridFrame, rest: Vec2, w: &Wrench) -> Vec2 {
    let r = (rest - frame.centroid) / frame.radius_norm;
    Vec2::new(w.fx, w.fy) * cfg.k_s + r * (cfg.k_n * w.fn_) + perp(r) * (cfg.k_t * w.tau)
}

#[derive(Debug, Clone)]
pub struct GelState {
    config: GelConfig,
    frame: GridFrame,
    rest: Vec<Vec2>,
    current: Vec<Vec2>,
    applied: Wrench,
    rng: ChaCha8Rng,
}

pub fn make_gel(config: GelConfig) -> Result<GelState, GelError> {
    config.validate()?;
    let rest = config.rest_grid();
    let frame = GridFrame::of(&rest);
    let rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(GelState {
        current: rest.clone(),
        rest,
        frame,
        applied: Wrench::ZERO,
        rng,
        config,
    })
}

impl GelState {
    pub fn config(&self) -> &GelConfig {
        &self.config
    }

    pub fn grid_frame(&self) -> GridFrame {
        self.frame
    }

    pub fn rest_positions(&self) -> &[Vec2] {
        &self.rest
    }

    pub fn current_positions(&self) -> &[Vec2] {
        &self.current
    }

    pub fn applied(&self) -> Wrench {
        self.applied
    }

    pub fn displacements(&self) -> Vec<Vec2> {
        self.current.iter().zip(&self.rest).map(|(c, r)| c - r).collect()
    }

    /// Deforms the gel from rest under `w`. Jitter, when configured, is drawn
    /// fresh from the state's generator on every call.
    pub fn apply_wrench(&self, w: Wrench) -> Result<GelState, GelError> {
        if !w.is_finite() {
            return Err(GelError::InvalidWrench(format!("{w:?} is not finite")));
        }
        if w.fn_ < 0.0 {
            return Err(GelError::InvalidWrench(format!("normal force {} < 0", w.fn_)));
        }
        let mut next = self.clone();
        let sigma = self.config.noise_sigma;
        for (cur, rest) in next.current.iter_mut().zip(&self.rest) {
            let mut d = model_displacement(&self.config, &self.frame, *rest, &w);
            if sigma > 0.0 {
                let jx: f64 = StandardNormal.sample(&mut next.rng);
                let jy: f64 = StandardNormal.sample(&mut next.rng);
                d += Vec2::new(jx, jy) * sigma;
            }
            *cur = rest + d;
        }
        next.applied = w;
        Ok(next)
    }

    /// Partial relaxation after the contact slips: every displacement and the
    /// recorded wrench shrink by `1 − fraction`.
    pub fn snap_back(&self, fraction: f64) -> Result<GelState, GelError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(GelError::InvalidWrench(format!(
                "snap-back fraction {fraction} outside [0,1]"
            )));
        }
        let keep = 1.0 - fraction;
        let mut next = self.clone();
        for (cur, rest) in next.current.iter_mut().zip(&self.rest) {
            *cur = rest + (*cur - rest) * keep;
        }
        next.applied = self.applied * keep;
        Ok(next)
    }

    pub fn render(&self) -> Result<GelImage, GelError> {
        render_markers(&self.config, &self.current)
    }
}

/// Gaussian spread of a dot relative to its nominal radius.
const SIGMA_PER_RADIUS: f64 = 0.6;
/// Blobs are drawn out to this many standard deviations.
const EXTENT_SIGMAS: f64 = 3.5;

/// Renders dark Gaussian dots at `positions`. Overlapping dots composite by
/// taking the darker value.
pub fn render_markers(cfg: &GelConfig, positions: &[Vec2]) -> Result<GelImage, GelError> {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let inset = cfg.dot_radius;
    for (index, p) in positions.iter().enumerate() {
        let inside = p.x.is_finite()
            && p.y.is_finite()
            && p.x >= inset
            && p.y >= inset
            && p.x <= (w - 1) as f64 - inset
            && p.y <= (h - 1) as f64 - inset;
        if !inside {
            return Err(GelError::MarkerOutOfBounds { index, x: p.x, y: p.y });
        }
    }

    let mut img = GelImage::filled(w, h, 255);
    let sigma = cfg.dot_radius * SIGMA_PER_RADIUS;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let extent = EXTENT_SIGMAS * sigma;
    let depth = 255.0 * cfg.dot_contrast;
    let pixels = img.pixels_mut();
    for p in positions {
        let x0 = (p.x - extent).floor().max(0.0) as usize;
        let x1 = ((p.x + extent).ceil() as usize).min(w - 1);
        let y0 = (p.y - extent).floor().max(0.0) as usize;
        let y1 = ((p.y + extent).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            let dy = y as f64 - p.y;
            for x in x0..=x1 {
                let dx = x as f64 - p.x;
                let value = 255.0 - depth * (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
                let value = value.round().clamp(0.0, 255.0) as u8;
                let px = &mut pixels[y * w + x];
                *px = (*px).min(value);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> GelConfig {
        GelConfig::default()
    }

    #[test]
    fn two_by_two_grid_endpoints() {
        let cfg = GelConfig {
            rows: 2,
            cols: 2,
            image_width: 100,
            image_height: 100,
            margin: 20.0,
            ..quiet()
        };
        let gel = make_gel(cfg).unwrap();
        let got: Vec<(f64, f64)> = gel.rest_positions().iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(got, vec![(20.0, 20.0), (80.0, 20.0), (20.0, 80.0), (80.0, 80.0)]);
        assert_eq!(gel.current_positions(), gel.rest_positions());
        assert_eq!(gel.applied(), Wrench::ZERO);
    }

    #[test]
    fn default_grid_has_63_markers() {
        assert_eq!(make_gel(quiet()).unwrap().rest_positions().len(), 63);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let too_wide_margin = GelConfig {
            image_width: 100,
            margin: 50.0,
            ..quiet()
        };
        assert!(matches!(make_gel(too_wide_margin), Err(GelError::InvalidConfig(_))));
        let zero_gain = GelConfig { k_n: 0.0, ..quiet() };
        assert!(make_gel(zero_gain).is_err());
        let single_row = GelConfig { rows: 1, ..quiet() };
        assert!(make_gel(single_row).is_err());
        let negative_noise = GelConfig {
            noise_sigma: -1.0,
            ..quiet()
        };
        assert!(make_gel(negative_noise).is_err());
    }

    #[test]
    fn zero_wrench_leaves_markers_at_rest() {
        let gel = make_gel(quiet()).unwrap().apply_wrench(Wrench::ZERO).unwrap();
        assert!(gel.displacements().iter().all(|d| *d == Vec2::zeros()));
    }

    #[test]
    fn pure_shear_is_uniform() {
        let gel = make_gel(quiet()).unwrap();
        let sheared = gel.apply_wrench(Wrench::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        for d in sheared.displacements() {
            assert_eq!(d, Vec2::new(2.0, 0.0));
        }
    }

    #[test]
    fn normal_load_diverges_about_centroid() {
        let cfg = GelConfig { k_n: 3.0, ..quiet() };
        let gel = make_gel(cfg).unwrap();
        let c = gel.grid_frame().centroid;
        let pressed = gel.apply_wrench(Wrench::new(0.0, 0.0, 1.0, 0.0)).unwrap();
        let disp = pressed.displacements();
        let mean = disp.iter().fold(Vec2::zeros(), |a, d| a + d) / disp.len() as f64;
        assert!(mean.norm() < 1e-12, "mean displacement {mean:?}");
        for (d, p) in disp.iter().zip(gel.rest_positions()) {
            let r = p - c;
            if r.norm() > 1e-6 {
                // Parallel and pointing outward.
                assert!(d.dot(&r) > 0.0);
                assert!((d.x * r.y - d.y * r.x).abs() < 1e-9);
            } else {
                assert!(d.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn snap_back_scales_displacements() {
        let gel = make_gel(quiet()).unwrap();
        let sheared = gel.apply_wrench(Wrench::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        let half = sheared.snap_back(0.5).unwrap();
        assert!(half.displacements().iter().all(|d| *d == Vec2::new(1.0, 0.0)));
        assert_eq!(half.applied(), Wrench::new(0.5, 0.0, 0.0, 0.0));
        let released = sheared.snap_back(1.0).unwrap();
        assert_eq!(released.current_positions(), released.rest_positions());
        let same = sheared.snap_back(0.0).unwrap();
        assert_eq!(same.current_positions(), sheared.current_positions());
        assert!(sheared.snap_back(1.5).is_err());
    }

    #[test]
    fn negative_or_nonfinite_wrench_rejected() {
        let gel = make_gel(quiet()).unwrap();
        assert!(gel.apply_wrench(Wrench::new(0.0, 0.0, -1.0, 0.0)).is_err());
        assert!(gel.apply_wrench(Wrench::new(f64::NAN, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn render_background_and_minima() {
        let gel = make_gel(quiet()).unwrap();
        let img = gel.render().unwrap();
        assert_eq!(img.pixels().len(), 320 * 240);
        assert_eq!(img.get(0, 0), 255);
        // First and last rows sit on whole pixels.
        for p in gel.rest_positions().iter().filter(|p| p.y.fract() == 0.0) {
            let v = img.get(p.x as usize, p.y as usize);
            assert_eq!(v, (255.0f64 - 255.0 * 0.8).round() as u8);
        }
    }

    #[test]
    fn excessive_shear_escapes_image() {
        let gel = make_gel(quiet()).unwrap();
        let pushed = gel.apply_wrench(Wrench::new(30.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(matches!(pushed.render(), Err(GelError::MarkerOutOfBounds { .. })));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let cfg = GelConfig {
            noise_sigma: 0.3,
            seed: 42,
            ..quiet()
        };
        let w = Wrench::new(0.5, -0.2, 1.0, 5.0);
        let a = make_gel(cfg.clone()).unwrap().apply_wrench(w).unwrap();
        let b = make_gel(cfg).unwrap().apply_wrench(w).unwrap();
        assert_eq!(a.render().unwrap(), b.render().unwrap());
        let a2 = a.apply_wrench(w).unwrap();
        assert_ne!(a2.current_positions(), a.current_positions());
    }

    #[test]
    fn wrench_total_excludes_torsion_and_pull() {
        assert_eq!(Wrench::new(3.0, 0.0, 4.0, 100.0).total(), 5.0);
        assert_eq!(Wrench::new(3.0, 4.0, -2.0, 0.0).total(), 5.0);
    }

    #[test]
    fn config_reads_json_with_defaults() {
        let cfg: GelConfig = serde_json::from_str(r#"{"rows": 5, "k_s": 3.5}"#).unwrap();
        assert_eq!(cfg.rows, 5);
        assert_eq!(cfg.k_s, 3.5);
        assert_eq!(cfg.cols, 9);
    }
}

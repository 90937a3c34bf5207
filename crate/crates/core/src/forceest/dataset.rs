//! Labeled training data from the simulator, and a least-squares fit of the
//! linear gel gains from such data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowtrack::{detect_markers, ReferenceFrame, TrackConfig, TrackError};
use crate::gelsim::{make_gel, GelConfig, GelError, GridFrame, Wrench};

use super::ridge::Sample;
use super::{pool_features, Calibration, EstimateError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Gel(#[from] GelError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

/// Magnitude bounds for random wrenches. Shear and torsion get a random sign;
/// the normal load is always pressing. The defaults keep every marker inside
/// the default image margins and every component far enough from zero for a
/// relative error to mean something.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WrenchRanges {
    pub shear: [f64; 2],
    pub normal: [f64; 2],
    pub torsion: [f64; 2],
}

impl Default for WrenchRanges {
    fn default() -> Self {
        Self {
            shear: [0.5, 1.5],
            normal: [1.5, 3.5],
            torsion: [30.0, 50.0],
        }
    }
}

impl WrenchRanges {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Wrench {
        let mut signed = |[lo, hi]: [f64; 2]| {
            let mag = rng.random_range(lo..=hi);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        };
        let fx = signed(self.shear);
        let fy = signed(self.shear);
        let tau = signed(self.torsion);
        let fn_ = rng.random_range(self.normal[0]..=self.normal[1]);
        Wrench::new(fx, fy, fn_, tau)
    }
}

/// Renders `count` random wrenches, tracks each against the rest frame and
/// pools the flow into features labeled with the applied wrench.
pub fn synthesize_dataset(
    gel: &GelConfig,
    track: &TrackConfig,
    ranges: &WrenchRanges,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>, SynthError> {
    let mut state = make_gel(gel.clone())?;
    let rest = state.render()?;
    let markers = detect_markers(&rest, gel.marker_count())?.centroids;
    let reference = ReferenceFrame::new(&rest, track)?;
    let cal = Calibration::from_gel(gel);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let w = ranges.sample(&mut rng);
        state = state.apply_wrench(w)?;
        let flow = reference.track(&state.render()?, &markers)?;
        out.push((pool_features(&flow, &cal)?, w));
    }
    Ok(out)
}

/// Fits k_s, k_n and k_t to pooled features by least squares through the
/// origin, assuming every marker of `gel`'s grid was tracked.
pub fn fit_gains(dataset: &[Sample], gel: &GelConfig) -> Result<Calibration, EstimateError> {
    let rest = gel.rest_grid();
    let frame = GridFrame::of(&rest);
    // Mean |r|/R: how much of a radial or tangential gain the pooled
    // projections retain.
    let spread =
        rest.iter().map(|p| (p - frame.centroid).norm()).sum::<f64>() / (rest.len() as f64 * frame.radius_norm);

    let (mut s_num, mut s_den) = (0.0, 0.0);
    let (mut n_num, mut n_den) = (0.0, 0.0);
    let (mut t_num, mut t_den) = (0.0, 0.0);
    for (f, w) in dataset {
        s_num += f[0] * w.fx + f[1] * w.fy;
        s_den += w.fx * w.fx + w.fy * w.fy;
        n_num += f[2] * w.fn_;
        n_den += w.fn_ * w.fn_;
        t_num += f[3] * w.tau;
        t_den += w.tau * w.tau;
    }
    let gain = |num: f64, den: f64, what: &str| {
        if den > 0.0 {
            Ok(num / den)
        } else {
            Err(EstimateError::DegenerateDesign(format!(
                "no {what} excitation in dataset"
            )))
        }
    };
    let cal = Calibration {
        k_s: gain(s_num, s_den, "shear")?,
        k_n: gain(n_num, n_den, "normal")? / spread,
        k_t: gain(t_num, t_den, "torsion")? / spread,
        centroid: [frame.centroid.x, frame.centroid.y],
        radius_norm: frame.radius_norm,
    };
    cal.validate()?;
    Ok(cal)
}

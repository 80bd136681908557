//! Target estimation: box proposals around a coarse estimate, scored by an
//! IoU predictor, averaged over the best three.

mod head;
mod train;

pub use head::{HeadGeometry, HeadGrads, IouHeadParams, IouHeadTrace, POOL_GRID};
pub use train::{
    build_training_set, evaluate_mse, fit_offline, stratified_candidates, FitOutcome, TrainHyper, TrainingPatch, TrainingSample, TrainingSet,
};

use crate::bbox::{iou, BoundingBox};
use crate::rng::Rng;

pub const DEFAULT_PROPOSALS: usize = 10;
pub const DEFAULT_PROPOSAL_NOISE: f64 = 0.1;
pub const TOP_K: usize = 3;

/// Anything that rates how well a box covers the target.
pub trait BoxScorer {
    fn score(&self, b: &BoundingBox) -> f64;
}

impl<F: Fn(&BoundingBox) -> f64> BoxScorer for F {
    fn score(&self, b: &BoundingBox) -> f64 {
        self(b)
    }
}

/// Scores boxes by their true IoU with a known ground truth.
#[derive(Clone, Copy, Debug)]
pub struct OracleScorer {
    pub truth: BoundingBox,
}

impl BoxScorer for OracleScorer {
    fn score(&self, b: &BoundingBox) -> f64 {
        iou(b, &self.truth)
    }
}

/// `n` jittered copies of `b`: centers move by up to `±noise` times the box
/// size, and log-width / log-height by up to `±noise`, all uniform.
pub fn generate_proposals(b: &BoundingBox, n: usize, noise: f64, rng: &mut Rng) -> Vec<BoundingBox> {
    let (cx, cy) = b.center();
    (0..n)
        .map(|_| {
            let dx = rng.uniform_in(-1.0, 1.0) * noise * b.w;
            let dy = rng.uniform_in(-1.0, 1.0) * noise * b.h;
            let sw = (rng.uniform_in(-1.0, 1.0) * noise).exp();
            let sh = (rng.uniform_in(-1.0, 1.0) * noise).exp();
            BoundingBox::from_center(cx + dx, cy + dy, b.w * sw, b.h * sh)
        })
        .collect()
}

/// Scores `initial` and `n` proposals around it and returns the
/// coordinate-wise mean of the three best. Candidates are ordered with the
/// initial box first; ties keep that order.
pub fn refine(initial: &BoundingBox, scorer: &dyn BoxScorer, n: usize, noise: f64, rng: &mut Rng) -> BoundingBox {
    let mut candidates = Vec::with_capacity(n + 1);
    candidates.push(*initial);
    candidates.extend(generate_proposals(initial, n, noise, rng));
    let mut scored: Vec<(usize, f64)> = candidates.iter().map(|c| scorer.score(c)).enumerate().collect();
    // Stable sort keeps generation order among equal scores; NaN sorts last.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or_else(|| a.1.is_nan().cmp(&b.1.is_nan())));
    let top: Vec<&BoundingBox> = scored.iter().take(TOP_K).map(|&(i, _)| &candidates[i]).collect();
    let k = top.len() as f64;
    let mean = |f: fn(&BoundingBox) -> f64| top.iter().map(|b| f(b)).sum::<f64>() / k;
    BoundingBox {
        x: mean(|b| b.x),
        y: mean(|b| b.y),
        w: mean(|b| b.w),
        h: mean(|b| b.h),
    }
}

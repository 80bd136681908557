use crate::backbone::Taps;
use crate::bbox::{iou, BoundingBox};
use crate::error::{Error, Result};
use crate::fam::{fam_backward_traced, fam_forward_with, FamParams, FamSwitches, FamTrace, StreamMode};
use crate::grid::Grid;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::head::{HeadGeometry, IouHeadParams};

/// One candidate box in patch pixels with its true IoU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    pub bbox: BoundingBox,
    pub target: f64,
}

/// Backbone features of one patch and the candidates scored on it. The FAM
/// pass is shared by all candidates of a patch.
#[derive(Clone, Debug)]
pub struct TrainingPatch<T> {
    pub x2d: Taps<T>,
    pub x3d: Taps<T>,
    pub samples: Vec<TrainingSample>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet<T> {
    pub patches: Vec<TrainingPatch<T>>,
    pub geometry: HeadGeometry,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn len(&self) -> usize {
        self.patches.iter().map(|p| p.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> Vec<f64> {
        self.patches.iter().flat_map(|p| p.samples.iter().map(|s| s.target)).collect()
    }

    /// Population variance of the targets: the MSE of the best constant
    /// predictor.
    pub fn target_variance(&self) -> f64 {
        let t = self.targets();
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

/// Draws `per_patch` candidates around `truth` whose IoUs are stratified over
/// `[0.1, 1.0]`: stratum `k` covers `[0.1 + 0.9 k/n, 0.1 + 0.9 (k+1)/n)`.
/// Each stratum takes the first of up to 200 random jitters that lands in
/// it, or the closest one if none does.
pub fn stratified_candidates(truth: &BoundingBox, per_patch: usize, extent: f64, rng: &mut Rng) -> Vec<TrainingSample> {
    let (cx, cy) = truth.center();
    let mut out = Vec::with_capacity(per_patch);
    for k in 0..per_patch {
        let lo = 0.1 + 0.9 * k as f64 / per_patch as f64;
        let hi = 0.1 + 0.9 * (k + 1) as f64 / per_patch as f64;
        let mid = 0.5 * (lo + hi);
        let mut best: Option<(f64, TrainingSample)> = None;
        for _ in 0..200 {
            let s = rng.uniform_in(0.0, 0.7);
            let b = BoundingBox::from_center(
                cx + rng.uniform_in(-s, s) * truth.w,
                cy + rng.uniform_in(-s, s) * truth.h,
                truth.w * rng.uniform_in(-s, s).exp(),
                truth.h * rng.uniform_in(-s, s).exp(),
            );
            if !(b.x < extent && b.y < extent && b.right() > 0.0 && b.bottom() > 0.0) {
                continue;
            }
            let v = iou(&b, truth);
            let sample = TrainingSample { bbox: b, target: v };
            if v >= lo && (v < hi || k + 1 == per_patch) {
                best = Some((0.0, sample));
                break;
            }
            let d = (v - mid).abs();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, sample));
            }
        }
        out.push(best.map_or(TrainingSample { bbox: *truth, target: 1.0 }, |(_, s)| s));
    }
    out
}

/// Pairs each patch's features with stratified candidates around its target
/// box (patch pixels).
pub fn build_training_set<T: Scalar>(
    patches: Vec<(Taps<T>, Taps<T>, BoundingBox)>,
    per_patch: usize,
    geometry: HeadGeometry,
    rng: &mut Rng,
) -> Result<TrainingSet<T>> {
    if patches.is_empty() || per_patch == 0 {
        return Err(Error::InvalidArgument("training set needs at least one patch and one candidate".into()));
    }
    let patches = patches
        .into_iter()
        .map(|(x2d, x3d, truth)| TrainingPatch {
            samples: stratified_candidates(&truth, per_patch, geometry.patch_extent, rng),
            x2d,
            x3d,
        })
        .collect();
    Ok(TrainingSet { patches, geometry })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr_fam: f64,
    pub lr_head: f64,
    /// Multiplier applied every `max(1, epochs / 3)` epochs.
    pub decay: f64,
    pub switches: FamSwitches,
    pub streams: StreamMode,
    pub seed: u64,
    /// Patches whose gradients are summed into one optimizer step.
    pub batch_patches: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 30,
            lr_fam: 5e-4,
            lr_head: 1e-3,
            decay: 0.2,
            switches: FamSwitches::default(),
            streams: StreamMode::Both,
            seed: 0,
            batch_patches: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T> {
    /// Shallow-tap and deep-tap modules.
    pub fam: (FamParams<T>, FamParams<T>),
    pub head: IouHeadParams<T>,
    /// Full-set MSE after each epoch.
    pub loss_curve: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step<T: Scalar>(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_f64();
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= T::of(lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS));
        }
    }
}

struct PatchPass<T> {
    maps: (Grid<T>, Grid<T>),
    traces: (FamTrace<T>, FamTrace<T>),
}

fn fam_pass<T: Scalar>(
    patch: &TrainingPatch<T>,
    fam: &(FamParams<T>, FamParams<T>),
    switches: FamSwitches,
    streams: StreamMode,
) -> Result<PatchPass<T>> {
    let ts = fam_forward_with(streams.input(Some(&patch.x2d.shallow), Some(&patch.x3d.shallow))?, &fam.0, switches)?;
    let td = fam_forward_with(streams.input(Some(&patch.x2d.deep), Some(&patch.x3d.deep))?, &fam.1, switches)?;
    Ok(PatchPass {
        maps: (ts.output.clone(), td.output.clone()),
        traces: (ts, td),
    })
}

/// Mean squared error over the whole set.
pub fn evaluate_mse<T: Scalar>(
    set: &TrainingSet<T>,
    fam: &(FamParams<T>, FamParams<T>),
    head: &IouHeadParams<T>,
    switches: FamSwitches,
    streams: StreamMode,
) -> Result<f64> {
    let mut sum = 0.0;
    for patch in &set.patches {
        let pass = fam_pass(patch, fam, switches, streams)?;
        for s in &patch.samples {
            let p = head.predict(&pass.maps.0, &pass.maps.1, &s.bbox, &set.geometry)?;
            sum += (p - s.target).powi(2);
        }
    }
    Ok(sum / set.len() as f64)
}

/// Jointly trains both FAM modules and the IoU head with Adam on the MSE.
/// Minibatches hold `batch_patches` whole patches; patch order is
/// reshuffled every epoch.
pub fn fit_offline<T: Scalar>(
    set: &TrainingSet<T>,
    fam: (FamParams<T>, FamParams<T>),
    head: IouHeadParams<T>,
    hyper: &TrainHyper,
) -> Result<FitOutcome<T>> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if hyper.epochs == 0 {
        return Err(Error::InvalidArgument("epoch budget must be positive".into()));
    }
    let mut fam = fam;
    let mut head = head;
    let mut rng = Rng::new(hyper.seed);
    let mut flat_s = fam.0.to_flat();
    let mut flat_d = fam.1.to_flat();
    let mut flat_h = head.to_flat();
    let (mut adam_s, mut adam_d, mut adam_h) = (Adam::new(flat_s.len()), Adam::new(flat_d.len()), Adam::new(flat_h.len()));
    let period = (hyper.epochs / 3).max(1);
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..set.patches.len()).collect();

    for epoch in 0..hyper.epochs {
        let scale = hyper.decay.powi((epoch / period) as i32);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for batch in order.chunks(hyper.batch_patches.max(1)) {
            let n = T::of_usize(batch.iter().map(|&pi| set.patches[pi].samples.len()).sum::<usize>().max(1));
            let mut g_head = vec![T::zero(); flat_h.len()];
            let mut g_fam_s = vec![T::zero(); flat_s.len()];
            let mut g_fam_d = vec![T::zero(); flat_d.len()];
            for &pi in batch {
                let patch = &set.patches[pi];
                if patch.samples.is_empty() {
                    continue;
                }
                let pass = fam_pass(patch, &fam, hyper.switches, hyper.streams)?;
                let mut g_s = Grid::zeros(pass.maps.0.shape());
                let mut g_d = Grid::zeros(pass.maps.1.shape());
                for s in &patch.samples {
                    let b = s.bbox.as_array().map(T::of);
                    let tr = head.forward(&pass.maps.0, &pass.maps.1, b, &set.geometry)?;
                    let up = T::of(2.0) * (tr.output - T::of(s.target)) / n;
                    let g = head.backward(&pass.maps.0, &pass.maps.1, &set.geometry, &tr, up)?;
                    for (a, v) in g_head.iter_mut().zip(g.params_flat()) {
                        *a += v;
                    }
                    g_s.axpy(T::one(), &g.shallow);
                    g_d.axpy(T::one(), &g.deep);
                }
                let gs = fam_backward_traced(
                    hyper.streams.input(Some(&patch.x2d.shallow), Some(&patch.x3d.shallow))?,
                    &fam.0,
                    &pass.traces.0,
                    &g_s,
                )?;
                let gd = fam_backward_traced(
                    hyper.streams.input(Some(&patch.x2d.deep), Some(&patch.x3d.deep))?,
                    &fam.1,
                    &pass.traces.1,
                    &g_d,
                )?;
                for (a, v) in g_fam_s.iter_mut().zip(gs.to_flat()) {
                    *a += v;
                }
                for (a, v) in g_fam_d.iter_mut().zip(gd.to_flat()) {
                    *a += v;
                }
            }
            adam_s.step(&mut flat_s, &g_fam_s, hyper.lr_fam * scale);
            adam_d.step(&mut flat_d, &g_fam_d, hyper.lr_fam * scale);
            adam_h.step(&mut flat_h, &g_head, hyper.lr_head * scale);
            fam.0.set_flat(&flat_s);
            fam.1.set_flat(&flat_d);
            head.set_flat(&flat_h);
        }
        let mse = evaluate_mse(set, &fam, &head, hyper.switches, hyper.streams)?;
        loss_curve.push(mse);
        if !mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                trace: loss_curve,
            });
        }
    }
    Ok(FitOutcome { fam, head, loss_curve })
}

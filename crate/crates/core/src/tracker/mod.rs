//! The online tracking loop.
//!
//! Per frame: crop the search region around the previous box, extract the
//! enabled streams (key-frame patch for the spatial stream, a clip cropped
//! with the same window for the temporal stream), fuse both taps with FAM,
//! localize with the classifier on the deep tap, refine the box with
//! proposals, then add the frame to the classifier memory and periodically
//! re-fit its second layer.

mod augment;
mod crop;

pub use augment::{schedule as augmentation_schedule, Augmentation};
pub use crop::{assemble_clip, crop_roi, crop_with, CropGeometry};

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::backbone::Taps;
use crate::bbox::BoundingBox;
use crate::classifier::{locate_peak, make_label_map, ClassifierConfig, ClassifierState, FeatureGeometry, Which};
use crate::error::{Error, Result};
use crate::estimator::{
    build_training_set, fit_offline, refine, BoxScorer, HeadGeometry, OracleScorer, TrainHyper, DEFAULT_PROPOSALS,
    DEFAULT_PROPOSAL_NOISE,
};
use crate::fam::{fam_forward_with, FamSwitches, FusionMode, Pooling, StreamMode};
use crate::grid::Grid;
use crate::model::Model;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sequence::{Image, Sequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScorerKind {
    #[default]
    Learned,
    /// True IoU against the ground truth passed to [`Tracker::step`].
    Oracle,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::Learned => "learned",
            ScorerKind::Oracle => "oracle",
        })
    }
}

impl FromStr for ScorerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(ScorerKind::Learned),
            "oracle" => Ok(ScorerKind::Oracle),
            _ => Err(Error::InvalidArgument(format!("unknown scorer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub patch_extent: usize,
    /// Search window side as a multiple of `√(w·h)`.
    pub search_scale: f64,
    pub clip_len: usize,
    pub update_period: usize,
    pub init_augmentations: usize,
    pub stream_mode: StreamMode,
    pub fusion_mode: FusionMode,
    pub attention: bool,
    pub pooling: Pooling,
    pub scorer: ScorerKind,
    pub seed: u64,
    /// Backbone / FAM width.
    pub channels: usize,
    /// Shallow and deep tap strides.
    pub downsample_factors: (usize, usize),
    pub proposals: usize,
    pub proposal_noise: f64,
    /// A frame is flagged lost when its peak is below this fraction of the
    /// median of earlier peaks.
    pub lost_ratio: f64,
    /// Weight of the Hann-window motion prior blended into the response
    /// before peak picking; 0 disables it.
    pub window_influence: f64,
    pub classifier: ClassifierConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            patch_extent: 96,
            search_scale: 5.0,
            clip_len: 4,
            update_period: 10,
            init_augmentations: 30,
            stream_mode: StreamMode::Both,
            fusion_mode: FusionMode::Concat,
            attention: true,
            pooling: Pooling::Awp,
            scorer: ScorerKind::Learned,
            seed: 0,
            channels: 16,
            downsample_factors: (4, 8),
            proposals: DEFAULT_PROPOSALS,
            proposal_noise: DEFAULT_PROPOSAL_NOISE,
            lost_ratio: 0.25,
            window_influence: 0.5,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.clip_len == 0 {
            return bad("clip_len must be at least 1".into());
        }
        if self.update_period == 0 {
            return bad("update_period must be at least 1".into());
        }
        if self.init_augmentations == 0 {
            return bad("init_augmentations must be at least 1".into());
        }
        let dd = self.downsample_factors.1;
        if dd == 0 || self.patch_extent == 0 || self.patch_extent % dd != 0 {
            return bad(format!(
                "patch_extent {} is not divisible by the deepest downsample factor {dd}",
                self.patch_extent
            ));
        }
        if !(self.search_scale > 0.0 && self.search_scale.is_finite()) {
            return bad(format!("search_scale must be positive, got {}", self.search_scale));
        }
        if !(0.0..1.0).contains(&self.window_influence) {
            return bad(format!("window_influence must lie in [0, 1), got {}", self.window_influence));
        }
        if !(0.0..=1.0).contains(&self.proposal_noise) {
            return bad(format!("proposal_noise must lie in [0, 1], got {}", self.proposal_noise));
        }
        Ok(())
    }

    pub fn switches(&self) -> FamSwitches {
        FamSwitches {
            attention: self.attention,
            pooling: self.pooling,
        }
    }

    pub fn feature_geometry(&self) -> FeatureGeometry {
        let dd = self.downsample_factors.1;
        FeatureGeometry {
            height: self.patch_extent / dd,
            width: self.patch_extent / dd,
            stride: dd as f64,
        }
    }

    pub fn head_geometry(&self) -> HeadGeometry {
        HeadGeometry {
            patch_extent: self.patch_extent as f64,
            strides: (self.downsample_factors.0 as f64, self.downsample_factors.1 as f64),
        }
    }
}

/// How often each backbone ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounters {
    pub spatial: usize,
    pub temporal: usize,
}

/// Outcome of one tracked frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based; the initialization frame is frame 1.
    pub frame: usize,
    pub bbox: BoundingBox,
    /// Classifier estimate before refinement.
    pub coarse: BoundingBox,
    pub peak_score: f64,
    pub lost: bool,
    /// Loss trace of the scheduled classifier update, if one ran.
    pub update: Option<Vec<f64>>,
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frame={} box={},{},{},{} peak={:.6} lost={} update={}",
            self.frame,
            self.bbox.x,
            self.bbox.y,
            self.bbox.w,
            self.bbox.h,
            self.peak_score,
            self.lost,
            self.update.is_some()
        )
    }
}

#[derive(Clone, Debug)]
pub struct Tracker<T> {
    pub config: TrackerConfig,
    model: Model<T>,
    pub classifier: ClassifierState<T>,
    frames: VecDeque<Image>,
    bbox: BoundingBox,
    frame: usize,
    rng: Rng,
    counters: EvalCounters,
    peaks: Vec<f64>,
    init_trace: Vec<f64>,
}

/// Shallow and deep FAM outputs for one frame, plus the classifier's view
/// of the deep map.
struct FamMaps<T> {
    shallow: Grid<T>,
    deep: Grid<T>,
    cls: Grid<T>,
}

/// Root mean square of the classifier input after normalization.
pub const CLASSIFIER_FEATURE_RMS: f64 = 2.0;

/// Rescales `x` to a fixed root mean square. Keeps the classifier's data
/// term on a fixed scale so the regularizer cannot dominate it, whatever
/// the contrast of the patch.
pub fn instance_normalize<T: Scalar>(x: &Grid<T>) -> Grid<T> {
    let ms = x.norm_sq().as_f64() / x.len().max(1) as f64;
    if ms <= 1e-24 {
        return x.clone();
    }
    x.scaled(T::of(CLASSIFIER_FEATURE_RMS / ms.sqrt()))
}

impl<T: Scalar> Tracker<T> {
    /// Sets up the tracker on the first frame: builds the augmented initial
    /// sample set, fills the classifier memory and fits both filter layers.
    pub fn init(frame: &Image, init_box: &BoundingBox, config: TrackerConfig, model: Model<T>) -> Result<Self> {
        config.validate()?;
        model.check_compatible(&config)?;
        init_box.validate()?;
        if frame.is_empty() {
            return Err(Error::InvalidArgument("empty first frame".into()));
        }
        let (cx, cy) = init_box.center();
        if !(0.0..frame.width as f64).contains(&cx) || !(0.0..frame.height as f64).contains(&cy) {
            return Err(Error::InvalidArgument(format!("initial box {init_box} is not inside the frame")));
        }
        let mut rng = Rng::new(config.seed);
        let classifier = ClassifierState::new(config.channels, config.classifier.clone(), &mut rng)?;
        let mut t = Tracker {
            classifier,
            model,
            frames: VecDeque::from([frame.clone()]),
            bbox: *init_box,
            frame: 1,
            rng,
            counters: EvalCounters::default(),
            peaks: Vec::new(),
            init_trace: Vec::new(),
            config,
        };
        let e = t.config.patch_extent;
        let (patch, geom) = crop_roi::<T>(frame, init_box, e, t.config.search_scale);
        let size = (init_box.w / geom.scale, init_box.h / geom.scale);
        let centre = geom.to_patch(cx, cy);
        let fg = t.config.feature_geometry();
        let augs = augment::schedule(t.config.init_augmentations, e, &mut t.rng);
        let mut samples = Vec::with_capacity(augs.len());
        for aug in &augs {
            let p = aug.apply(&patch);
            let clip_len = t.config.clip_len;
            let maps = fam_maps(&t.model, &t.config, &mut t.counters, &p, |p| repeat_frames(p, clip_len))?;
            let (x, y) = aug.map_point(centre.0, centre.1, e);
            let label = make_label_map((x, y), size, &fg, t.config.classifier.sigma_factor)?;
            samples.push((maps.cls, label));
        }
        t.classifier.init_memory(samples)?;
        let (gn, cg) = t.config.classifier.init_budget;
        t.init_trace = t.classifier.optimize(gn, cg, Which::Both)?;
        let first = t.classifier.forward(&t.classifier.memory[0].x)?;
        t.peaks.push(locate_peak(&first).score);
        Ok(t)
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    /// Number of frames seen, counting the initialization frame.
    pub fn frame_index(&self) -> usize {
        self.frame
    }

    pub fn counters(&self) -> EvalCounters {
        self.counters
    }

    pub fn init_trace(&self) -> &[f64] {
        &self.init_trace
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    /// Frames currently in the clip buffer, oldest first.
    pub fn buffered_frames(&self) -> usize {
        self.frames.len()
    }

    /// The clip the temporal stream would see for `geom`.
    pub fn assemble_clip(&self, geom: &CropGeometry) -> Grid<T> {
        let refs: Vec<&Image> = self.frames.iter().collect();
        assemble_clip(&refs, geom, self.config.clip_len)
    }

    /// Deep-tap classifier response on an arbitrary patch (clip built by
    /// repeating it).
    pub fn response_on_patch(&mut self, patch: &Grid<T>) -> Result<Grid<T>> {
        let clip_len = self.config.clip_len;
        let maps = fam_maps(&self.model, &self.config, &mut self.counters, patch, |p| repeat_frames(p, clip_len))?;
        self.classifier.forward(&maps.cls)
    }

    /// Tracks one frame. `truth` is required by the oracle scorer and
    /// ignored otherwise.
    pub fn step(&mut self, frame: &Image, truth: Option<&BoundingBox>) -> Result<StepReport> {
        if frame.is_empty() {
            return Err(Error::InvalidArgument("empty frame".into()));
        }
        if self.config.scorer == ScorerKind::Oracle && truth.is_none() {
            return Err(Error::InvalidArgument("the oracle scorer needs ground truth".into()));
        }
        let frame_no = self.frame + 1;
        self.frames.push_back(frame.clone());
        while self.frames.len() > self.config.clip_len {
            self.frames.pop_front();
        }
        let e = self.config.patch_extent;
        let geom = CropGeometry::around(&self.bbox, e, self.config.search_scale);
        let key = crop_with::<T>(frame, &geom);
        let refs: Vec<&Image> = self.frames.iter().collect();
        let clip_len = self.config.clip_len;
        let maps = fam_maps(&self.model, &self.config, &mut self.counters, &key, |_| {
            assemble_clip(&refs, &geom, clip_len)
        })?;

        let response = self.classifier.forward(&maps.cls)?;
        let mut peak = locate_peak(&apply_window(&response, self.config.window_influence));
        peak.score = response.data()[peak.row * response.dim(2) + peak.col].as_f64();
        let fg = self.config.feature_geometry();
        let (row, col) = peak.position();
        let (px, py) = fg.cell_to_patch(row, col);
        let (fx, fy) = geom.to_frame(px, py);
        let coarse = BoundingBox::from_center(fx, fy, self.bbox.w, self.bbox.h);

        let hg = self.config.head_geometry();
        let head = &self.model.head;
        let learned = |b: &BoundingBox| {
            head.predict(&maps.shallow, &maps.deep, &geom.box_to_patch(b), &hg)
                .unwrap_or(-1.0)
        };
        let oracle = truth.map(|t| OracleScorer { truth: *t });
        let scorer: &dyn BoxScorer = match self.config.scorer {
            ScorerKind::Learned => &learned,
            ScorerKind::Oracle => oracle.as_ref().expect("checked above"),
        };
        let refined = refine(&coarse, scorer, self.config.proposals, self.config.proposal_noise, &mut self.rng);
        let bbox = keep_in_frame(refined, frame);

        let (cx, cy) = bbox.center();
        let (lx, ly) = geom.to_patch(cx, cy);
        let size = (bbox.w / geom.scale, bbox.h / geom.scale);
        if let Ok(label) = make_label_map((lx, ly), size, &fg, self.config.classifier.sigma_factor) {
            self.classifier
                .memory_update(maps.cls, label, self.config.classifier.learning_rate)?;
        }
        let update = if frame_no % self.config.update_period == 0 {
            let (gn, cg) = self.config.classifier.update_budget;
            Some(self.classifier.optimize(gn, cg, Which::W2Only)?)
        } else {
            None
        };

        let lost = peak.score < self.config.lost_ratio * median(&self.peaks);
        self.peaks.push(peak.score);
        self.bbox = bbox;
        self.frame = frame_no;
        Ok(StepReport {
            frame: frame_no,
            bbox,
            coarse,
            peak_score: peak.score,
            lost,
            update,
        })
    }
}

/// Runs the enabled backbones and both FAM modules. The clip is only
/// built when the temporal stream is enabled.
fn fam_maps<T: Scalar>(
    model: &Model<T>,
    config: &TrackerConfig,
    counters: &mut EvalCounters,
    key: &Grid<T>,
    clip: impl FnOnce(&Grid<T>) -> Grid<T>,
) -> Result<FamMaps<T>> {
    let mode = config.stream_mode;
    let x2d: Option<Taps<T>> = if mode.uses_spatial() {
        counters.spatial += 1;
        Some(model.spatial.extract_spatial(key)?)
    } else {
        None
    };
    let x3d: Option<Taps<T>> = if mode.uses_temporal() {
        counters.temporal += 1;
        Some(model.temporal.extract_temporal(&clip(key))?)
    } else {
        None
    };
    let sw = config.switches();
    let shallow = fam_forward_with(
        mode.input(x2d.as_ref().map(|t| &t.shallow), x3d.as_ref().map(|t| &t.shallow))?,
        &model.fam.0,
        sw,
    )?
    .output;
    let deep = fam_forward_with(
        mode.input(x2d.as_ref().map(|t| &t.deep), x3d.as_ref().map(|t| &t.deep))?,
        &model.fam.1,
        sw,
    )?
    .output;
    let cls = instance_normalize(&deep);
    Ok(FamMaps { shallow, deep, cls })
}

/// Blends the max-normalized response with a Hann window centred on the
/// map, which is where the previous position lands.
pub fn apply_window<T: Scalar>(response: &Grid<T>, influence: f64) -> Grid<T> {
    if influence <= 0.0 {
        return response.clone();
    }
    let (h, w) = (response.dim(1), response.dim(2));
    let max = response.max_abs().as_f64();
    let norm = if max > 0.0 { 1.0 / max } else { 0.0 };
    let hann = |i: usize, n: usize| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos();
    let mut out = response.clone();
    for r in 0..h {
        for c in 0..w {
            let v = out.at3_mut(0, r, c);
            *v = T::of((1.0 - influence) * v.as_f64() * norm + influence * hann(r, h) * hann(c, w));
        }
    }
    out
}

/// Clip made of `clip_len` copies of one patch.
fn repeat_frames<T: Scalar>(p: &Grid<T>, clip_len: usize) -> Grid<T> {
    let (e1, e2) = (p.dim(1), p.dim(2));
    let plane = e1 * e2;
    let mut out = Grid::zeros(&[3, clip_len, e1, e2]);
    let d = out.data_mut();
    for c in 0..3 {
        for s in 0..clip_len {
            d[(c * clip_len + s) * plane..][..plane].copy_from_slice(p.plane(c));
        }
    }
    out
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Keeps the centre inside the frame and the size between 2 px and the
/// frame size, so a runaway estimate cannot produce a degenerate window.
fn keep_in_frame(b: BoundingBox, frame: &Image) -> BoundingBox {
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let w = b.w.clamp(2.0, fw.max(2.0));
    let h = b.h.clamp(2.0, fh.max(2.0));
    let (cx, cy) = b.center();
    BoundingBox::from_center(cx.clamp(0.0, fw), cy.clamp(0.0, fh), w, h)
}

/// Runs a whole sequence from its first ground-truth box; returns one box
/// per frame (the first is the initialization box).
pub fn track_sequence<T: Scalar>(
    seq: &Sequence,
    config: TrackerConfig,
    model: Model<T>,
) -> Result<(Vec<BoundingBox>, Vec<StepReport>, EvalCounters)> {
    if seq.frames.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let first = seq.ground_truth.first().ok_or_else(|| Error::InvalidArgument("sequence has no ground truth".into()))?;
    let mut t = Tracker::init(&seq.frames[0], first, config, model)?;
    let mut boxes = vec![*first];
    let mut reports = Vec::with_capacity(seq.frames.len());
    for (i, f) in seq.frames.iter().enumerate().skip(1) {
        let r = t.step(f, seq.ground_truth.get(i))?;
        boxes.push(r.bbox);
        reports.push(r);
    }
    Ok((boxes, reports, t.counters()))
}

/// Feature patches for offline training: for each draw, a random frame of
/// one of `seqs` (round robin) is cropped around a jittered copy of its
/// ground truth, both streams are extracted, and the ground truth is
/// returned in patch coordinates.
pub fn training_patches<T: Scalar>(
    model: &Model<T>,
    config: &TrackerConfig,
    seqs: &[Sequence],
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<(Taps<T>, Taps<T>, BoundingBox)>> {
    if seqs.is_empty() || seqs.iter().any(|s| s.frames.is_empty()) {
        return Err(Error::InvalidArgument("training needs non-empty sequences".into()));
    }
    if seqs.iter().any(|s| !s.is_annotated()) {
        return Err(Error::InvalidArgument("training needs a ground-truth box for every frame".into()));
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let seq = &seqs[k % seqs.len()];
        let t = rng.below(seq.frames.len());
        let gt = seq.ground_truth[t];
        let prev = BoundingBox::from_center(
            gt.center().0 + rng.uniform_in(-0.3, 0.3) * gt.w,
            gt.center().1 + rng.uniform_in(-0.3, 0.3) * gt.h,
            gt.w * rng.uniform_in(-0.15, 0.15).exp(),
            gt.h * rng.uniform_in(-0.15, 0.15).exp(),
        );
        let geom = CropGeometry::around(&prev, config.patch_extent, config.search_scale);
        let key = crop_with::<T>(&seq.frames[t], &geom);
        let lo = (t + 1).saturating_sub(config.clip_len);
        let refs: Vec<&Image> = seq.frames[lo..=t].iter().collect();
        let clip = assemble_clip(&refs, &geom, config.clip_len);
        out.push((
            model.spatial.extract_spatial(&key)?,
            model.temporal.extract_temporal(&clip)?,
            geom.box_to_patch(&gt),
        ));
    }
    Ok(out)
}

/// Size of the offline training set: `patches` crops, each with
/// `per_patch` stratified candidate boxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingPlan {
    pub patches: usize,
    pub per_patch: usize,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        TrainingPlan {
            patches: 200,
            per_patch: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub model: Model<T>,
    pub loss_curve: Vec<f64>,
    pub samples: usize,
    pub target_variance: f64,
}

/// Offline training end to end: a fresh model for `config` seeded with
/// `hyper.seed`, training crops from `seqs`, the stratified IoU set and
/// `fit_offline` on the FAM modules and the head. Backbones stay frozen.
pub fn train_model<T: Scalar>(
    config: &TrackerConfig,
    seqs: &[Sequence],
    plan: TrainingPlan,
    hyper: &TrainHyper,
) -> Result<TrainReport<T>> {
    let mut model = Model::<T>::fresh(config, hyper.seed)?;
    let mut rng = Rng::new(hyper.seed ^ 0x7a11_5eed);
    let patches = training_patches(&model, config, seqs, plan.patches, &mut rng)?;
    let set = build_training_set(patches, plan.per_patch, config.head_geometry(), &mut rng)?;
    let out = fit_offline(&set, model.fam.clone(), model.head.clone(), hyper)?;
    model.fam = out.fam;
    model.head = out.head;
    Ok(TrainReport {
        model,
        loss_curve: out.loss_curve,
        samples: set.len(),
        target_variance: set.target_variance(),
    })
}

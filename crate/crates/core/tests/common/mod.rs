//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use strack::bbox::BoundingBox;
use strack::classifier::ClassifierState;
use strack::rng::Rng;
use strack::sequence::{render, Motion, Sequence, SequenceSpec};

pub const SUITE_SIZE: u64 = 10;

/// Easy-suite sequence `k`: 40 frames of 200×160, constant velocity of at
/// most 2 px/frame through the frame centre, no distractors.
pub fn easy_spec(k: u64) -> SequenceSpec {
    let mut r = Rng::new(100 + k);
    let angle = r.uniform_in(0.0, std::f64::consts::TAU);
    let speed = r.uniform_in(0.5, 2.0);
    let w = r.uniform_in(18.0, 28.0).round();
    let h = r.uniform_in(16.0, 26.0).round();
    let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
    let frames = 40;
    let (fw, fh) = (200.0, 160.0);
    let x0 = fw / 2.0 - w / 2.0 - vx * frames as f64 / 2.0;
    let y0 = fh / 2.0 - h / 2.0 - vy * frames as f64 / 2.0;
    SequenceSpec {
        frames,
        extent: (200, 160),
        target: BoundingBox::new(x0.round(), y0.round(), w, h).unwrap(),
        texture_seed: k,
        motion: Motion::ConstantVelocity { vx, vy },
        distractors: 0,
        illumination_ramp: (1.0, 1.0),
        background: k,
    }
}

/// Fast-suite sequence `k`: same target as `easy_spec(k)`, but it jumps by
/// 0.6 of its larger side every 4 frames.
pub fn fast_spec(k: u64) -> SequenceSpec {
    let mut s = easy_spec(k);
    s.motion = Motion::Jump {
        period: 4,
        magnitude: 0.6 * s.target.w.max(s.target.h),
    };
    s.target.x = 70.0;
    s.target.y = 50.0;
    s
}

pub fn easy_suite() -> Vec<Sequence> {
    (0..SUITE_SIZE).map(|k| render(&easy_spec(k), k).unwrap()).collect()
}

pub fn fast_suite() -> Vec<Sequence> {
    (0..SUITE_SIZE).map(|k| render(&fast_spec(k), k).unwrap()).collect()
}

/// Training sequences, disjoint from both suites: alternating easy and fast
/// motion with seeds 50..60.
pub fn training_sequences() -> Vec<Sequence> {
    (50..60)
        .map(|k| {
            let spec = if k % 2 == 0 { easy_spec(k) } else { fast_spec(k) };
            render(&spec, k).unwrap()
        })
        .collect()
}

/// Primal ridge solution for the second layer of a single-sample, identity
/// activation classifier: `(Jᵀ γ J + λ I) w = Jᵀ γ y` by Cholesky. Columns
/// of `J` come from probing the forward pass with unit filters. Returns the
/// weights and the objective at those weights.
pub fn ridge_w2(st: &ClassifierState<f64>) -> (Vec<f64>, f64) {
    let sample = &st.memory[0];
    let nw = st.w2.weights.len();
    let m = sample.y.len();
    let mut probe = st.clone();
    let mut j = DMatrix::<f64>::zeros(m, nw);
    for k in 0..nw {
        probe.w2.weights.fill(0.0);
        probe.w2.weights.data_mut()[k] = 1.0;
        let col = probe.forward(&sample.x).unwrap();
        j.set_column(k, &DVector::from_column_slice(col.data()));
    }
    let gamma = sample.weight;
    let y = DVector::from_column_slice(sample.y.data());
    let lambda2 = st.config.lambda2;
    let normal = j.transpose() * &j * gamma + DMatrix::identity(nw, nw) * lambda2;
    let rhs = j.transpose() * &y * gamma;
    let w = normal.cholesky().expect("normal matrix is positive definite").solve(&rhs);
    let r = &j * &w - &y;
    let loss = gamma * r.norm_squared() + st.config.lambda1 * st.w1.weights.norm_sq() + lambda2 * w.norm_squared();
    (w.as_slice().to_vec(), loss)
}

/// A scored trajectory: `pred` and `gt` share frame 0, the initialization
/// frame, which the metrics skip.
pub struct Fixture {
    pub name: &'static str,
    pub pred: Vec<BoundingBox>,
    pub gt: Vec<BoundingBox>,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    pub precision_curve: Vec<f64>,
    pub p20: f64,
}

fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

/// `n` entries: `value(k)` for each index.
fn curve(n: usize, value: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..n).map(value).collect()
}

/// Three hand-enumerated trajectories.
pub fn metric_fixtures() -> Vec<Fixture> {
    let init = b(0.0, 0.0, 5.0, 1.0);
    let gt_box = b(10.0, 10.0, 5.0, 1.0);

    // Every frame exact: IoU 1 is not above the 1.00 threshold.
    let perfect = Fixture {
        name: "perfect",
        pred: vec![init, gt_box, gt_box.translated(3.0, 4.0), gt_box],
        gt: vec![init, gt_box, gt_box.translated(3.0, 4.0), gt_box],
        success_curve: curve(101, |k| if k < 100 { 1.0 } else { 0.0 }),
        auc: 100.0 / 101.0,
        precision_curve: vec![1.0; 51],
        p20: 1.0,
    };

    // Far apart on both scored frames; centre errors 60 and 80.
    let disjoint = Fixture {
        name: "disjoint",
        pred: vec![init, gt_box.translated(60.0, 0.0), gt_box.translated(0.0, 80.0)],
        gt: vec![init, gt_box, gt_box],
        success_curve: vec![0.0; 101],
        auc: 0.0,
        precision_curve: vec![0.0; 51],
        p20: 0.0,
    };

    // IoUs 2/5, 4/5, 0, 0 and centre errors 1.5, 0.5, 5, 30.
    let mixed = Fixture {
        name: "mixed",
        pred: vec![
            init,
            b(10.0, 10.0, 2.0, 1.0),
            b(10.0, 10.0, 4.0, 1.0),
            gt_box.translated(5.0, 0.0),
            gt_box.translated(0.0, 30.0),
        ],
        gt: vec![init, gt_box, gt_box, gt_box, gt_box],
        success_curve: curve(101, |k| match k {
            0..=39 => 0.5,
            40..=79 => 0.25,
            _ => 0.0,
        }),
        auc: 30.0 / 101.0,
        precision_curve: curve(51, |t| match t {
            0 => 0.0,
            1 => 0.25,
            2..=4 => 0.5,
            5..=29 => 0.75,
            _ => 1.0,
        }),
        p20: 0.75,
    };
    vec![perfect, disjoint, mixed]
}

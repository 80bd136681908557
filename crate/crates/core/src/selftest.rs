//! Built-in correctness suites run by `strack selftest`.
//!
//! Every check produces a named [`Check`]; a failing computation is
//! reported as a failed check rather than aborting the run.

use std::fmt;

use crate::bbox::BoundingBox;
use crate::classifier::{ClassifierConfig, ClassifierState, Which};
use crate::error::{Error, Result};
use crate::fam::{awp, fam_forward_with, FamParams, FamSwitches, FusionMode, Pooling, StreamInput};
use crate::gradcheck::{self, check_fam, check_iou_head, check_op_with, DEFAULT_EPS};
use crate::grid::Grid;
use crate::model::Model;
use crate::ops::global_average_pool;
use crate::rng::Rng;
use crate::sequence::{render, Motion, SequenceSpec};
use crate::tracker::{track_sequence, TrackerConfig};

/// Gradient tolerance shared with the test suites.
pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const GRAD_POINTS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "ok" } else { "FAILED" };
        write!(f, "{status:<6} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    /// Name of a gradient target whose analytic gradient is deliberately
    /// perturbed. Test hook: the run must then report that target.
    pub corrupt_vjp: Option<String>,
}

/// Names accepted by [`SelftestOptions::corrupt_vjp`].
pub fn gradient_targets() -> Vec<String> {
    let mut v: Vec<String> = gradcheck::representative_ops()
        .iter()
        .map(|op| op.tag().name().to_string())
        .collect();
    v.push("fam".into());
    v.push("iou-head".into());
    v
}

fn check(name: impl Into<String>, outcome: Result<(bool, String)>) -> Check {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

pub fn run(opts: &SelftestOptions) -> Result<Vec<Check>> {
    if let Some(t) = &opts.corrupt_vjp {
        if !gradient_targets().contains(t) {
            return Err(Error::InvalidArgument(format!(
                "unknown gradient target `{t}` (expected one of {})",
                gradient_targets().join(", ")
            )));
        }
    }
    let mut out = gradient_checks(opts.corrupt_vjp.as_deref());
    out.push(check("solver-oracle", solver_oracle()));
    out.push(check("awp-gap-identity", awp_gap_identity()));
    out.push(check("attention-range", attention_range()));
    out.push(check("determinism", determinism()));
    Ok(out)
}

fn corrupt(g: &mut [f64]) {
    if let Some(v) = g.first_mut() {
        *v = *v * 1.5 + 0.1;
    }
}

fn untouched(_: &mut [f64]) {}

fn worst_of(mut f: impl FnMut(usize) -> Result<f64>, n: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..n {
        worst = worst.max(f(i)?);
    }
    Ok((worst < GRAD_TOLERANCE, format!("max relative error {worst:.2e} over {n} points")))
}

pub fn gradient_checks(corrupt_target: Option<&str>) -> Vec<Check> {
    let mut rng = Rng::new(0x5e1f);
    let hook = |name: &str| -> &dyn Fn(&mut [f64]) {
        if corrupt_target == Some(name) {
            &corrupt
        } else {
            &untouched
        }
    };
    let mut out = Vec::new();
    for op in gradcheck::representative_ops() {
        let name = op.tag().name();
        let tamper = hook(name);
        let res = worst_of(
            |_| {
                let inputs = gradcheck::random_op_instance(&op, &mut rng);
                check_op_with(&op, &inputs, &mut rng, DEFAULT_EPS, tamper)
            },
            GRAD_POINTS,
        );
        out.push(check(format!("grad/{name}"), res));
    }
    let tamper = hook("fam");
    let configs = [
        (FusionMode::Sum, Pooling::Awp),
        (FusionMode::Sum, Pooling::Gap),
        (FusionMode::Concat, Pooling::Awp),
        (FusionMode::Concat, Pooling::Gap),
    ];
    let res = worst_of(
        |i| {
            let (mode, pooling) = configs[i % configs.len()];
            check_fam(
                mode,
                FamSwitches {
                    attention: true,
                    pooling,
                },
                &mut rng,
                tamper,
            )
        },
        configs.len().max(GRAD_POINTS),
    );
    out.push(check("grad/fam", res));
    let tamper = hook("iou-head");
    out.push(check("grad/iou-head", worst_of(|_| check_iou_head(&mut rng, tamper), GRAD_POINTS)));
    out
}

/// Solves `(A + λI) x = b` for symmetric positive definite `A` by Cholesky.
fn cholesky_solve(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::Validation("matrix is not positive definite".into()));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(x)
}

/// The instance used by the solver-oracle check: identity activations,
/// one sample, two input channels, an 8×8 map and `λ = 1e-2`.
pub fn solver_instance(seed: u64) -> Result<ClassifierState<f64>> {
    let mut rng = Rng::new(seed);
    let cfg = ClassifierConfig {
        lambda1: 1e-2,
        lambda2: 1e-2,
        ..ClassifierConfig::default()
    };
    let mut st = ClassifierState::new(2, cfg, &mut rng)?;
    let x = Grid::randn(&[2, 8, 8], 1.0, &mut rng);
    let y = Grid::randn(&[1, 8, 8], 1.0, &mut rng);
    st.init_memory(vec![(x, y)])?;
    Ok(st)
}

/// Ridge solution for `w2` with `w1` held fixed, computed densely in the
/// dual: `w2 = Jᵀ (J Jᵀ + λ I)⁻¹ y`. Returns the weights and the objective
/// value computed directly from them.
pub fn dense_w2_oracle(st: &ClassifierState<f64>) -> Result<(Vec<f64>, f64)> {
    let sample = st.memory.first().ok_or_else(|| Error::InvalidArgument("empty memory".into()))?;
    let lambda = st.config.lambda2;
    let nw = st.w2.weights.len();
    // Column k of J is the response to the k-th unit filter.
    let mut probe = st.clone();
    let mut cols = Vec::with_capacity(nw);
    for k in 0..nw {
        probe.w2.weights.fill(0.0);
        probe.w2.weights.data_mut()[k] = 1.0;
        cols.push(probe.forward(&sample.x)?.into_vec());
    }
    let m = sample.y.len();
    let gamma = sample.weight;
    let mut gram = vec![0.0; m * m];
    for col in &cols {
        for i in 0..m {
            for j in 0..m {
                gram[i * m + j] += gamma * col[i] * col[j];
            }
        }
    }
    for i in 0..m {
        gram[i * m + i] += lambda;
    }
    let rhs: Vec<f64> = sample.y.data().iter().map(|&v| gamma * v).collect();
    let alpha = cholesky_solve(&gram, m, &rhs)?;
    let w: Vec<f64> = cols.iter().map(|c| c.iter().zip(&alpha).map(|(a, b)| a * b).sum()).collect();

    let mut resp = vec![0.0; m];
    for (col, wk) in cols.iter().zip(&w) {
        for (r, c) in resp.iter_mut().zip(col) {
            *r += wk * c;
        }
    }
    let data: f64 = resp.iter().zip(sample.y.data()).map(|(r, y)| (r - y) * (r - y)).sum();
    let loss = gamma * data
        + st.config.lambda1 * st.w1.weights.norm_sq()
        + lambda * w.iter().map(|v| v * v).sum::<f64>();
    Ok((w, loss))
}

pub fn solver_oracle() -> Result<(bool, String)> {
    let mut st = solver_instance(7)?;
    let (w_star, oracle_loss) = dense_w2_oracle(&st)?;
    let trace = st.optimize(6, 32, Which::W2Only)?;
    let reached = *trace.last().expect("trace has the initial loss");
    let gap = (reached - oracle_loss) / oracle_loss.abs();

    let mut at_oracle = st.clone();
    at_oracle.w2.weights = Grid::from_vec(st.w2.weights.shape(), w_star)?;
    let objective_err = (at_oracle.objective()? - oracle_loss).abs();
    Ok((
        gap.abs() < 1e-6 && objective_err < 1e-8,
        format!("relative loss gap {gap:.2e}, objective mismatch {objective_err:.2e}"),
    ))
}

pub fn awp_gap_identity() -> Result<(bool, String)> {
    let mut rng = Rng::new(0xa3);
    let mut mismatches = 0;
    for _ in 0..100 {
        let c = 1 + rng.below(8);
        let (h, w) = (1 + rng.below(9), 1 + rng.below(9));
        let mut p = FamParams::<f64>::init(FusionMode::Sum, c, &mut rng)?;
        p.awp_conv.weights.fill(0.0);
        if let Some(b) = p.awp_conv.bias.as_mut() {
            b.fill(0.0);
        }
        p.amplification = 2.0;
        let xs = Grid::randn(&[c, h, w], 1.0 + 3.0 * rng.uniform(), &mut rng);
        if awp(&xs, &p)? != global_average_pool(&xs)? {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of 100 maps differ from GAP")))
}

pub fn attention_range() -> Result<(bool, String)> {
    let mut rng = Rng::new(0xa7);
    let mut out_of_range = 0;
    let mut bypass_broken = 0;
    for i in 0..50 {
        let mode = if i % 2 == 0 { FusionMode::Sum } else { FusionMode::Concat };
        let c = 2 + rng.below(8);
        let mut p = FamParams::<f64>::init(mode, c, &mut rng)?;
        let flat: Vec<f64> = p.to_flat().iter().map(|_| 0.5 * rng.normal()).collect();
        p.set_flat(&flat);
        let a = Grid::randn(&[c, 5, 6], 1.0, &mut rng);
        let b = Grid::randn(&[c, 5, 6], 1.0, &mut rng);
        let on = fam_forward_with(StreamInput::Both(&a, &b), &p, FamSwitches::default())?;
        let wc = on.attention.ok_or_else(|| Error::Validation("attention weights missing".into()))?;
        out_of_range += wc.data().iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
        let off = FamSwitches {
            attention: false,
            ..FamSwitches::default()
        };
        let t = fam_forward_with(StreamInput::Both(&a, &b), &p, off)?;
        if t.output != t.fused {
            bypass_broken += 1;
        }
    }
    Ok((
        out_of_range == 0 && bypass_broken == 0,
        format!("{out_of_range} weights outside (0,1), {bypass_broken} bypass mismatches"),
    ))
}

pub fn determinism() -> Result<(bool, String)> {
    let spec = SequenceSpec {
        frames: 6,
        extent: (96, 80),
        target: BoundingBox::new(30.0, 28.0, 18.0, 16.0)?,
        texture_seed: 3,
        motion: Motion::ConstantVelocity { vx: 1.5, vy: -0.5 },
        distractors: 1,
        illumination_ramp: (1.0, 1.1),
        background: 4,
    };
    let seq = render(&spec, 11)?;
    let config = TrackerConfig {
        seed: 5,
        ..TrackerConfig::default()
    };
    let model = Model::<f64>::fresh(&config, 9)?;
    let (a, _, _) = track_sequence(&seq, config.clone(), model.clone())?;
    let (b, _, _) = track_sequence(&seq, config, model.clone())?;
    let same_track = a.len() == b.len()
        && a.iter().zip(&b).all(|(p, q)| {
            [p.x, p.y, p.w, p.h].map(f64::to_bits) == [q.x, q.y, q.w, q.h].map(f64::to_bits)
        });
    let bytes = model.to_bytes();
    let same_model = Model::<f64>::from_bytes(&bytes)?.to_bytes() == bytes;
    Ok((
        same_track && same_model,
        format!("tracks identical: {same_track}, model round-trip exact: {same_model}"),
    ))
}

//! Acceptance suite: one line per criterion, then a summary. Exits nonzero
//! when any criterion fails.
//!
//! Runs as a plain binary (`harness = false`) so the tracking suites are
//! trained and tracked once and shared between the criteria that need them.

mod common;

use std::time::{Duration, Instant};

use strack::bbox::{iou, BoundingBox};
use strack::classifier::Which;
use strack::estimator::{build_training_set, evaluate_mse, fit_offline, refine, OracleScorer, TrainHyper};
use strack::eval::{evaluate, mean_iou, precision_curve, success_curve};
use strack::fam::{awp, fam_forward_with, FamParams, FamSwitches, FusionMode, StreamInput, StreamMode};
use strack::model::Model;
use strack::ops::global_average_pool;
use strack::selftest::{gradient_checks, solver_instance};
use strack::sequence::{write_results, Sequence};
use strack::tracker::{crop_with, track_sequence, train_model, training_patches, CropGeometry, Tracker, TrackerConfig, TrainingPlan};
use strack::{Grid, Result, Rng};

use common::{easy_suite, fast_suite, metric_fixtures, ridge_w2, training_sequences};

struct Verdict {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

impl Verdict {
    fn line(&self) -> String {
        format!(
            "{} {:>2} {}: {} [{:.1}s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn record(out: &mut Vec<Verdict>, id: usize, title: &'static str, start: Instant, res: Result<(bool, String)>) {
    let (passed, detail) = res.unwrap_or_else(|e| (false, format!("error: {e}")));
    let v = Verdict {
        id,
        title,
        passed,
        detail,
        elapsed: start.elapsed(),
    };
    println!("{}", v.line());
    out.push(v);
}

fn gradient_fidelity() -> Result<(bool, String)> {
    let start = Instant::now();
    let checks = gradient_checks(None);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let secs = start.elapsed().as_secs_f64();
    Ok((
        failed.is_empty() && secs < 60.0,
        if failed.is_empty() {
            format!("{} targets within tolerance in {secs:.1}s", checks.len())
        } else {
            failed.join("; ")
        },
    ))
}

fn solver_oracle() -> Result<(bool, String)> {
    let mut st = solver_instance(7)?;
    let (w_star, oracle) = ridge_w2(&st);
    let trace = st.optimize(6, 32, Which::W2Only)?;
    let reached = *trace.last().expect("trace starts with the initial loss");
    let gap = ((reached - oracle) / oracle.abs()).abs();
    let mut at = st.clone();
    at.w2.weights = Grid::from_vec(st.w2.weights.shape(), w_star)?;
    let mismatch = (at.objective()? - oracle).abs();
    Ok((
        gap < 1e-6 && mismatch < 1e-8,
        format!("relative gap {gap:.2e}, objective mismatch {mismatch:.2e}"),
    ))
}

fn gn_monotone(traces: &[Vec<f64>]) -> (bool, String) {
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut steps = 0;
    for t in traces {
        for w in t.windows(2) {
            steps += 1;
            let rise = w[1] - w[0];
            worst = worst.max(rise);
            if rise > 1e-10 {
                violations += 1;
            }
        }
    }
    (
        violations == 0 && steps > 0,
        format!("{} traces, {steps} steps, {violations} rises, largest step change {worst:.2e}", traces.len()),
    )
}

fn awp_gap_identity() -> Result<(bool, String)> {
    let mut rng = Rng::new(404);
    let mut differ = 0;
    for _ in 0..100 {
        let c = 1 + rng.below(12);
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let mut p = FamParams::<f64>::init(FusionMode::Sum, c, &mut rng)?;
        p.awp_conv.weights.fill(0.0);
        if let Some(b) = p.awp_conv.bias.as_mut() {
            b.fill(0.0);
        }
        p.amplification = 2.0;
        let x = Grid::randn(&[c, h, w], 0.1 + 5.0 * rng.uniform(), &mut rng);
        if awp(&x, &p)?.data().iter().map(|v| v.to_bits()).ne(global_average_pool(&x)?.data().iter().map(|v| v.to_bits())) {
            differ += 1;
        }
    }
    Ok((differ == 0, format!("{differ} of 100 maps differ from plain GAP")))
}

fn attention_range_and_bypass() -> Result<(bool, String)> {
    let mut rng = Rng::new(505);
    let (mut outside, mut total, mut bypass) = (0, 0, 0);
    for i in 0..40 {
        let mode = if i % 2 == 0 { FusionMode::Sum } else { FusionMode::Concat };
        let c = 1 + rng.below(16);
        let mut p = FamParams::<f64>::init(mode, c, &mut rng)?;
        let flat: Vec<f64> = p.to_flat().iter().map(|_| 0.4 * rng.normal()).collect();
        p.set_flat(&flat);
        let a = Grid::randn(&[c, 6, 7], 1.0, &mut rng);
        let b = Grid::randn(&[c, 6, 7], 1.0, &mut rng);
        let on = fam_forward_with(StreamInput::Both(&a, &b), &p, FamSwitches::default())?;
        let wc = on.attention.expect("attention enabled");
        total += wc.len();
        outside += wc.data().iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
        let off = FamSwitches {
            attention: false,
            ..FamSwitches::default()
        };
        for input in [StreamInput::Both(&a, &b), StreamInput::SpatialOnly(&a), StreamInput::TemporalOnly(&b)] {
            let t = fam_forward_with(input, &p, off)?;
            if t.output != t.fused {
                bypass += 1;
            }
        }
    }
    Ok((
        outside == 0 && bypass == 0,
        format!("{outside} of {total} weights outside (0,1), {bypass} bypass mismatches"),
    ))
}

fn refinement_improves() -> Result<(bool, String)> {
    let mut rng = Rng::new(606);
    let trials = 1000;
    let mut improved = 0;
    for _ in 0..trials {
        let truth = BoundingBox::new(
            rng.uniform_in(0.0, 200.0),
            rng.uniform_in(0.0, 200.0),
            rng.uniform_in(8.0, 80.0),
            rng.uniform_in(8.0, 80.0),
        )?;
        let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
        let initial = truth.translated(0.2 * truth.w * angle.cos(), 0.2 * truth.h * angle.sin());
        let scorer = OracleScorer { truth };
        let refined = refine(&initial, &scorer, 10, 0.1, &mut rng);
        if iou(&refined, &truth) > iou(&initial, &truth) {
            improved += 1;
        }
    }
    let rate = improved as f64 / trials as f64;
    Ok((rate >= 0.95, format!("IoU raised in {improved} of {trials} trials ({:.1}%)", 100.0 * rate)))
}

/// Tracks one sequence, keeping every Gauss-Newton loss trace.
fn track_with_traces(seq: &Sequence, config: &TrackerConfig, model: &Model<f64>) -> Result<(Vec<BoundingBox>, Vec<Vec<f64>>)> {
    let mut t = Tracker::init(&seq.frames[0], &seq.ground_truth[0], config.clone(), model.clone())?;
    let mut traces = vec![t.init_trace().to_vec()];
    let mut boxes = vec![seq.ground_truth[0]];
    for (i, f) in seq.frames.iter().enumerate().skip(1) {
        let r = t.step(f, Some(&seq.ground_truth[i]))?;
        boxes.push(r.bbox);
        traces.extend(r.update);
    }
    Ok((boxes, traces))
}

struct SuiteScore {
    auc: f64,
    miou: f64,
    per_seq: Vec<f64>,
}

fn score_suite(suite: &[Sequence], config: &TrackerConfig, model: &Model<f64>, traces: &mut Vec<Vec<f64>>) -> Result<SuiteScore> {
    let (mut auc, mut per_seq) = (0.0, Vec::new());
    for seq in suite {
        let (boxes, t) = track_with_traces(seq, config, model)?;
        traces.extend(t);
        auc += evaluate(&boxes, &seq.ground_truth)?.success_auc;
        per_seq.push(mean_iou(&boxes, &seq.ground_truth)?);
    }
    let n = suite.len() as f64;
    Ok(SuiteScore {
        auc: auc / n,
        miou: per_seq.iter().sum::<f64>() / n,
        per_seq,
    })
}

fn train_for(streams: StreamMode, seqs: &[Sequence]) -> Result<(TrackerConfig, Model<f64>)> {
    let config = TrackerConfig {
        stream_mode: streams,
        ..TrackerConfig::default()
    };
    let hyper = TrainHyper {
        streams,
        switches: config.switches(),
        ..TrainHyper::default()
    };
    let report = train_model::<f64>(&config, seqs, TrainingPlan::default(), &hyper)?;
    Ok((config, report.model))
}

fn offline_training(seqs: &[Sequence]) -> Result<(bool, String)> {
    let config = TrackerConfig::default();
    let model = Model::<f64>::fresh(&config, 3)?;
    let mut rng = Rng::new(909);
    let patches = training_patches(&model, &config, seqs, 50, &mut rng)?;
    let set = build_training_set(patches, 10, config.head_geometry(), &mut rng)?;
    let hyper = TrainHyper::default();
    let out = fit_offline(&set, model.fam.clone(), model.head.clone(), &hyper)?;
    let variance = set.target_variance();
    let mse = evaluate_mse(&set, &out.fam, &out.head, hyper.switches, hyper.streams)?;
    let violations = out.loss_curve.windows(2).filter(|w| w[1] > w[0]).count();
    Ok((
        set.len() == 500 && out.loss_curve.len() <= 30 && mse < 0.5 * variance && violations <= 2,
        format!(
            "{} samples, MSE {mse:.5} vs variance {variance:.5} (ratio {:.3}), {} epochs, {violations} rises",
            set.len(),
            mse / variance,
            out.loss_curve.len()
        ),
    ))
}

fn protocol(seq: &Sequence, config: &TrackerConfig, model: &Model<f64>) -> Result<(bool, String)> {
    let mut t = Tracker::init(&seq.frames[0], &seq.ground_truth[0], config.clone(), model.clone())?;
    let memory = t.classifier.memory.len();
    let mut problems = Vec::new();
    if memory != 30 {
        problems.push(format!("init memory holds {memory} samples"));
    }
    // Whatever the window, the clip must repeat frame 1 in the slots no
    // frame has reached yet.
    let probe = CropGeometry::around(&seq.ground_truth[0], config.patch_extent, config.search_scale);
    let e = config.patch_extent;
    let slot = |clip: &Grid<f64>, s: usize| -> Vec<f64> {
        (0..3)
            .flat_map(|c| clip.data()[(c * config.clip_len + s) * e * e..][..e * e].to_vec())
            .collect()
    };
    let patch = |k: usize| crop_with::<f64>(&seq.frames[k], &probe).into_vec();
    let mut updates = Vec::new();
    for (i, f) in seq.frames.iter().enumerate() {
        if i > 0 {
            let r = t.step(f, None)?;
            if r.update.is_some() {
                updates.push(r.frame);
            }
        }
        let frame_no = i + 1;
        if frame_no <= 4 {
            let clip = t.assemble_clip(&probe);
            let want: Vec<usize> = (0..4).map(|s| (s + frame_no).saturating_sub(4)).collect();
            for (s, &k) in want.iter().enumerate() {
                if slot(&clip, s) != patch(k) {
                    problems.push(format!("frame {frame_no}: clip slot {s} is not frame {}", k + 1));
                }
            }
        }
    }
    let expected: Vec<usize> = (1..=seq.frames.len()).filter(|f| f % 10 == 0).collect();
    if updates != expected {
        problems.push(format!("updates at {updates:?}, expected {expected:?}"));
    }
    Ok((
        problems.is_empty(),
        if problems.is_empty() {
            format!("30 init samples, updates at frames {updates:?}, clips padded with frame 1")
        } else {
            problems.join("; ")
        },
    ))
}

fn determinism(seq: &Sequence, config: &TrackerConfig, model: &Model<f64>) -> Result<(bool, String)> {
    let dir = tempfile::tempdir().map_err(|e| strack::Error::InvalidArgument(e.to_string()))?;
    let mut files = Vec::new();
    for run in 0..2 {
        let (boxes, _, _) = track_sequence(seq, config.clone(), model.clone())?;
        let path = dir.path().join(format!("run{run}.txt"));
        write_results(&path, &boxes)?;
        files.push(std::fs::read(&path).map_err(|e| strack::Error::InvalidArgument(e.to_string()))?);
    }
    let same_results = files[0] == files[1];
    let bytes = model.to_bytes();
    let path = dir.path().join("model.bin");
    model.store(&path)?;
    let loaded = Model::<f64>::load(&path)?;
    let same_model = loaded.to_bytes() == bytes && loaded.fam == model.fam && loaded.head == model.head;
    Ok((
        same_results && same_model,
        format!("results identical: {same_results}, model round-trip exact: {same_model}"),
    ))
}

fn metric_correctness() -> Result<(bool, String)> {
    let mut wrong = Vec::new();
    let fixtures = metric_fixtures();
    for f in &fixtures {
        let (sc, auc) = success_curve(&f.pred, &f.gt)?;
        let (pc, p20) = precision_curve(&f.pred, &f.gt)?;
        if sc != f.success_curve || auc != f.auc || pc != f.precision_curve || p20 != f.p20 {
            wrong.push(f.name);
        }
    }
    Ok((
        wrong.is_empty(),
        if wrong.is_empty() {
            format!("{} fixtures exact", fixtures.len())
        } else {
            format!("mismatch on {}", wrong.join(", "))
        },
    ))
}

fn main() {
    let mut out = Vec::new();

    let t = Instant::now();
    record(&mut out, 1, "gradient fidelity", t, gradient_fidelity());
    let t = Instant::now();
    record(&mut out, 2, "solver oracle", t, solver_oracle());
    let t = Instant::now();
    record(&mut out, 4, "AWP/GAP identity", t, awp_gap_identity());
    let t = Instant::now();
    record(&mut out, 5, "attention range and bypass", t, attention_range_and_bypass());
    let t = Instant::now();
    record(&mut out, 6, "refinement improves boxes", t, refinement_improves());
    let t = Instant::now();
    record(&mut out, 12, "metric correctness", t, metric_correctness());

    let train_seqs = training_sequences();
    let t = Instant::now();
    record(&mut out, 9, "offline training", t, offline_training(&train_seqs));

    let mut traces = Vec::new();
    let t = Instant::now();
    let easy = easy_suite();
    let both = train_for(StreamMode::Both, &train_seqs).map_err(|e| e.to_string());
    let competence = trained(&both).and_then(|(config, model)| {
        let s = score_suite(&easy, config, model, &mut traces)?;
        let secs = t.elapsed().as_secs_f64();
        Ok((
            s.auc >= 0.55 && s.miou >= 0.6 && secs < 300.0,
            format!(
                "AUC {:.3}, mean IoU {:.3} (per sequence {}), {secs:.0}s including training",
                s.auc,
                s.miou,
                fmt_list(&s.per_seq)
            ),
        ))
    });
    record(&mut out, 7, "tracking competence", t, competence);

    let t = Instant::now();
    let ordering = trained(&both).and_then(|both| {
        let fast = fast_suite();
        let mut rows = Vec::new();
        for streams in [StreamMode::Both, StreamMode::Spatial, StreamMode::Temporal] {
            let own;
            let (config, model) = if streams == StreamMode::Both {
                (&both.0, &both.1)
            } else {
                own = train_for(streams, &train_seqs)?;
                (&own.0, &own.1)
            };
            rows.push((streams, score_suite(&fast, config, model, &mut traces)?));
        }
        let m = |i: usize| rows[i].1.miou;
        let detail = rows
            .iter()
            .map(|(s, r)| format!("{s} {:.3} ({})", r.miou, fmt_list(&r.per_seq)))
            .collect::<Vec<_>>()
            .join("; ");
        Ok((m(0) >= m(1) && m(0) >= m(2), detail))
    });
    record(&mut out, 8, "motion ablation ordering", t, ordering);

    let t = Instant::now();
    record(&mut out, 3, "Gauss-Newton monotonicity", t, Ok(gn_monotone(&traces)));

    let t = Instant::now();
    record(&mut out, 10, "protocol conformance", t, trained(&both).and_then(|(c, m)| protocol(&easy[0], c, m)));
    let t = Instant::now();
    record(&mut out, 11, "determinism", t, trained(&both).and_then(|(c, m)| determinism(&easy[1], c, m)));

    out.sort_by_key(|v| v.id);
    println!("\nsummary");
    for v in &out {
        println!("{}", v.line());
    }
    let failed = out.iter().filter(|v| !v.passed).count();
    println!("{} of {} criteria passed", out.len() - failed, out.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

type Trained = std::result::Result<(TrackerConfig, Model<f64>), String>;

fn trained(t: &Trained) -> Result<&(TrackerConfig, Model<f64>)> {
    t.as_ref()
        .map_err(|e| strack::Error::InvalidArgument(format!("training failed: {e}")))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

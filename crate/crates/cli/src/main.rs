//! `strack`: synthesize sequences, train, track, evaluate, self-check.
//!
//! Exit codes: 0 success, 1 internal failure, 2 user or input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use strack::estimator::TrainHyper;
use strack::eval::{compare, curve_file, evaluate, mean_iou, OpeReport};
use strack::fam::{FusionMode, Pooling, StreamMode};
use strack::model::{parse_switch, Model};
use strack::selftest::{self, SelftestOptions};
use strack::sequence::{generate, read_ground_truth, read_results, read_sequence, write_results, Sequence, SequenceSpec};
use strack::tracker::{track_sequence, train_model, ScorerKind, TrackerConfig, TrainingPlan};
use strack::{Error, Result};

#[derive(Parser)]
#[command(name = "strack", version, about = "Two-stream spatio-temporal single object tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence from a spec file.
    Synth(SynthArgs),
    /// Train the FAM modules and the IoU head offline.
    Train(TrainArgs),
    /// Track one sequence and write the per-frame boxes.
    Track(TrackArgs),
    /// Score result files and print a comparison table.
    Eval(EvalArgs),
    /// Run the built-in correctness suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Comma-separated sequence directories.
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrackerConfig::default().fusion_mode)]
    fusion: FusionMode,
    /// Streams the training passes run through.
    #[arg(long, default_value_t = StreamMode::Both)]
    stream: StreamMode,
    /// Training crops; each gets `--per-patch` candidate boxes.
    #[arg(long, default_value_t = TrainingPlan::default().patches)]
    patches: usize,
    #[arg(long, default_value_t = TrainingPlan::default().per_patch)]
    per_patch: usize,
    #[arg(long, default_value_t = TrainHyper::default().lr_fam)]
    lr_fam: f64,
    #[arg(long, default_value_t = TrainHyper::default().lr_head)]
    lr_head: f64,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flags left out take the value stored in the model file.
    #[arg(long)]
    stream: Option<StreamMode>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long, value_parser = parse_switch)]
    attention: Option<bool>,
    #[arg(long)]
    pooling: Option<Pooling>,
    #[arg(long)]
    scorer: Option<ScorerKind>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated result files.
    #[arg(long, value_delimiter = ',', required = true)]
    pred: Vec<PathBuf>,
    /// Sequence directories, one per result file or a single shared one.
    #[arg(long, value_delimiter = ',', required = true)]
    gt: Vec<PathBuf>,
    /// Run names for the table; default is the result file stem.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    name: Vec<String>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Test hook: perturb the analytic gradient of one target.
    #[arg(long, hide = true)]
    corrupt_vjp: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Selftest(a) => run_selftest(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    // A diverging fit is reported as bad input: the data or the flags
    // were unsuitable, nothing inside the program broke.
    if e.is_user_error() || matches!(e, Error::Divergence { .. }) {
        2
    } else {
        1
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = SequenceSpec::read(&a.spec)?;
    let gt = generate(&spec, a.seed, &a.out)?;
    println!("wrote {} frames to {}", gt.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_sequences(dirs: &[PathBuf]) -> Result<Vec<Sequence>> {
    dirs.iter().map(|d| read_sequence(d)).collect()
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let seqs = load_sequences(&a.data)?;
    let config = TrackerConfig {
        fusion_mode: a.fusion,
        stream_mode: a.stream,
        seed: a.seed,
        ..TrackerConfig::default()
    };
    let hyper = TrainHyper {
        epochs: a.epochs,
        seed: a.seed,
        streams: a.stream,
        switches: config.switches(),
        lr_fam: a.lr_fam,
        lr_head: a.lr_head,
        ..TrainHyper::default()
    };
    let plan = TrainingPlan {
        patches: a.patches,
        per_patch: a.per_patch,
    };
    let report = train_model::<f64>(&config, &seqs, plan, &hyper)?;
    println!(
        "training set: {} samples, target variance {:.6}",
        report.samples, report.target_variance
    );
    for (i, l) in report.loss_curve.iter().enumerate() {
        println!("epoch {:>3}  mse {l:.6}", i + 1);
    }
    report.model.store(&a.out)?;
    println!("model written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn track(a: TrackArgs) -> Result<ExitCode> {
    let seq = read_sequence(&a.seq)?;
    let model = Model::<f64>::load(&a.model)?;
    let mut config = model.config.clone();
    if let Some(v) = a.stream {
        config.stream_mode = v;
    }
    if let Some(v) = a.fusion {
        config.fusion_mode = v;
    }
    if let Some(v) = a.attention {
        config.attention = v;
    }
    if let Some(v) = a.pooling {
        config.pooling = v;
    }
    if let Some(v) = a.scorer {
        config.scorer = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if config.scorer == ScorerKind::Oracle && !seq.is_annotated() {
        return Err(Error::InvalidArgument(format!(
            "the oracle scorer needs ground truth for every frame of {}",
            a.seq.display()
        )));
    }
    let (boxes, reports, _) = track_sequence(&seq, config, model)?;
    write_results(&a.out, &boxes)?;
    let lost = reports.iter().filter(|r| r.lost).count();
    println!("tracked {} frames ({lost} flagged lost)", boxes.len());
    if seq.is_annotated() && boxes.len() >= 2 {
        println!("mean IoU {:.4}", mean_iou(&boxes, &seq.ground_truth)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn curve_path(pred: &Path) -> PathBuf {
    let mut name = pred.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".curves");
    pred.with_file_name(name)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    if a.gt.len() != 1 && a.gt.len() != a.pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} result files but {} ground-truth directories",
            a.pred.len(),
            a.gt.len()
        )));
    }
    if !a.name.is_empty() && a.name.len() != a.pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} result files but {} names",
            a.pred.len(),
            a.name.len()
        )));
    }
    let mut runs: Vec<(String, OpeReport)> = Vec::new();
    for (i, pred) in a.pred.iter().enumerate() {
        let gt_dir = &a.gt[if a.gt.len() == 1 { 0 } else { i }];
        let gt = read_ground_truth(gt_dir)?;
        let boxes = read_results(pred)?;
        let report = evaluate(&boxes, &gt).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", pred.display())),
            other => other,
        })?;
        let name = match a.name.get(i) {
            Some(n) => n.clone(),
            None => pred
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{i}")),
        };
        runs.push((name, report));
    }
    let table = compare(&runs)?;
    for ((_, r), pred) in runs.iter().zip(&a.pred) {
        let path = curve_path(pred);
        std::fs::write(&path, curve_file(r)).map_err(|e| Error::Io { path, source: e })?;
    }
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn run_selftest(a: SelftestArgs) -> Result<ExitCode> {
    let checks = selftest::run(&SelftestOptions {
        corrupt_vjp: a.corrupt_vjp,
    })?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    for c in &checks {
        println!("{c}");
    }
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{} of {} checks failed: {}", failed.len(), checks.len(), failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

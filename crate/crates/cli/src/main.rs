use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latrack_core::checkpoint::{self, Checkpoint};
use latrack_core::checks::gradient_suite;
use latrack_core::config::RunConfig;
use latrack_core::evalkit::{self, EvalSequence, ReportMeta};
use latrack_core::frame::Frame;
use latrack_core::geometry::BBox;
use latrack_core::io::{self, MapDumpWriter, SequenceDir};
use latrack_core::synthetic::{gen_synthetic_sequence, SyntheticConfig};
use latrack_core::training::{train, TrainOutputs};
use latrack_core::tracker::track;
use latrack_core::Error;
use serde_json::json;
use sha2::{Digest, Sha256};

const EXIT_INTERNAL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "latrack", version, about = "Train, run and evaluate the Siamese tracker")]
struct Cli {
    /// Config file of `key = value` lines applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// `key=value` setting applied after the config file; repeatable.
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Base settings for commands that do not read a checkpoint.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 127/255 crops and the full-size network.
    Default,
    /// 63/127 crops and a narrow network for quick runs.
    Toy,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on synthetic sequences and write checkpoints plus a metrics log.
    Train {
        /// Output directory (model.ckpt, best.ckpt, metrics.jsonl, config.txt).
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one sequence directory and write per-frame results.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of ordered images, optionally with groundtruth.txt.
        #[arg(long)]
        sequence: PathBuf,
        /// Results file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Initial box `x,y,w,h`; defaults to the first ground-truth box.
        #[arg(long)]
        init: Option<String>,
        /// Also dump per-frame cls/loc/combined score maps to this file.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Score results files against ground truth.
    Eval {
        /// Results file; pair each with a `--sequence`.
        #[arg(long, required = true)]
        results: Vec<PathBuf>,
        /// Sequence directory holding the ground truth, in `--results` order.
        #[arg(long, required = true)]
        sequence: Vec<PathBuf>,
        /// Report directory (report.json, curves/).
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint that produced the results, recorded in the report.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Render plots/*.png as well.
        #[arg(long)]
        plots: bool,
    },
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Success AUC as a function of the window influence.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directories; the synthetic suite is used when omitted.
        #[arg(long)]
        sequence: Vec<PathBuf>,
        /// Number of synthetic suite sequences.
        #[arg(long, default_value_t = 6)]
        suite: usize,
        /// Comma-separated window influences.
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        windows: String,
        /// Table output (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render synthetic sequences to disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences; more than one writes `seq-NNN` subdirectories.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", EXIT_USAGE),
            Failure::Core(e) => match e {
                Error::Config(_) => ("config", EXIT_CONFIG),
                Error::Data(_) | Error::Io { .. } | Error::InvalidInput(_) | Error::DegenerateTarget(_) => {
                    ("data", EXIT_DATA)
                }
                Error::Numerical(_) => ("numerical", EXIT_NUMERICAL),
                Error::Shape(_) => ("internal", EXIT_INTERNAL),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&Failure::Usage(e.kind().to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

/// Print the machine-readable error line and map to the exit code.
fn fail(f: &Failure) -> ExitCode {
    let (kind, code) = f.kind_and_code();
    eprintln!("{}", json!({"error": {"kind": kind, "code": code, "message": f.message()}}));
    ExitCode::from(code)
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Train { out } => cmd_train(&cli, out),
        Command::Track {
            checkpoint,
            sequence,
            out,
            init,
            maps,
        } => cmd_track(&cli, checkpoint, sequence, out, init.as_deref(), maps.as_deref()),
        Command::Eval {
            results,
            sequence,
            out,
            checkpoint,
            plots,
        } => cmd_eval(results, sequence, out, checkpoint.as_deref(), *plots),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
        Command::Sweep {
            checkpoint,
            sequence,
            suite,
            windows,
            out,
        } => cmd_sweep(&cli, checkpoint, sequence, *suite, windows, out),
        Command::Synth { out, count } => cmd_synth(&cli, out, *count),
    }
}

fn apply_user_settings(cli: &Cli, cfg: &mut RunConfig) -> CliResult {
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        cfg.merge_text(&text)?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(())
}

fn fresh_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match cli.preset {
        Preset::Default => RunConfig::default(),
        Preset::Toy => RunConfig::toy(),
    };
    apply_user_settings(cli, &mut cfg)?;
    Ok(cfg)
}

/// The checkpoint's own settings with user settings on top; the model
/// settings must stay those the checkpoint was trained with.
fn checkpoint_config(cli: &Cli, ckpt: &Checkpoint) -> CliResult<RunConfig> {
    let mut cfg = ckpt.config.clone();
    apply_user_settings(cli, &mut cfg)?;
    if cfg.model != ckpt.config.model {
        return Err(Error::Config("model settings cannot differ from the checkpoint".into()).into());
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn cmd_train(cli: &Cli, out: &Path) -> CliResult {
    let cfg = fresh_config(cli)?;
    create_dir(out)?;
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    let outputs = TrainOutputs {
        checkpoint: out.join("model.ckpt"),
        best: Some(out.join("best.ckpt")),
        metrics: Some(out.join("metrics.jsonl")),
    };
    let total = cfg.train.epochs * cfg.train.steps_per_epoch;
    let summary = train(&cfg, &outputs, |r| {
        if (r.step + 1) % cfg.train.steps_per_epoch == 0 {
            eprintln!("step {}/{total} loss {:.4}", r.step + 1, r.total);
        }
    })?;
    println!(
        "{}",
        json!({
            "checkpoint": outputs.checkpoint,
            "steps": summary.steps,
            "epoch_losses": summary.epoch_losses,
            "best_epoch": summary.best_epoch,
            "config_hash": cfg.hash(),
        })
    );
    Ok(())
}

fn parse_box(s: &str) -> CliResult<BBox> {
    let boxes = io::parse_gt(s).map_err(|e| Failure::Usage(format!("--init: {e}")))?;
    match boxes[..] {
        [b] => Ok(b),
        _ => Err(Failure::Usage("--init expects one box x,y,w,h".into())),
    }
}

fn cmd_track(
    cli: &Cli,
    ckpt_path: &Path,
    seq_path: &Path,
    out: &Path,
    init: Option<&str>,
    maps: Option<&Path>,
) -> CliResult {
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = checkpoint_config(cli, &ckpt)?;
    let model = ckpt.model()?;
    let seq = SequenceDir::open(seq_path)?;
    let init = match init {
        Some(s) => parse_box(s)?,
        None => *seq.gt.first().ok_or_else(|| {
            Error::Data(format!("{} has no ground truth; pass --init", seq_path.display()))
        })?,
    };
    let run = track(&model, seq.frames(), init, &cfg.track, maps.is_some())?;
    io::write_results(out, &run.results)?;
    if let Some(p) = maps {
        let mut w = MapDumpWriter::create(p)?;
        for (i, m) in run.maps.iter().enumerate() {
            w.write(i + 1, m)?;
        }
        w.finish()?;
    }
    if let Some(e) = run.error {
        return Err(Error::Data(format!("stopped after {} frames: {e}", run.results.len())).into());
    }
    println!("{}", json!({"results": out, "frames": run.results.len()}));
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_eval(results: &[PathBuf], sequences: &[PathBuf], out: &Path, ckpt: Option<&Path>, plots: bool) -> CliResult {
    if results.len() != sequences.len() {
        return Err(Failure::Usage(format!(
            "{} --results for {} --sequence",
            results.len(),
            sequences.len()
        )));
    }
    let mut reports = Vec::new();
    for (r, s) in results.iter().zip(sequences) {
        let seq = SequenceDir::open(s)?;
        if seq.gt.is_empty() {
            return Err(Error::Data(format!("{} has no ground truth", s.display())).into());
        }
        let res = io::read_results(r)?;
        reports.push(evalkit::evaluate_sequence(&seq.name, &res, &seq.gt)?);
    }
    let meta = match ckpt {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let c = checkpoint::decode(&bytes)?;
            ReportMeta {
                checkpoint: Some(sha256_hex(&bytes)),
                config_hash: Some(c.config.hash()),
            }
        }
        None => ReportMeta::default(),
    };
    let report = evalkit::build_report(reports, meta)?;
    evalkit::write_report(out, &report, plots)?;
    let a = &report.aggregate;
    println!(
        "{}",
        json!({
            "auc": a.auc,
            "precision": a.precision,
            "norm_precision": a.norm_precision,
            "pearson_r": a.pearson.as_ref().and_then(|c| c.r),
            "sequences": a.sequences,
        })
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> CliResult {
    let rows = gradient_suite(seed)?;
    println!("{:<22} {:>8} {:>14} {:>10}  result", "check", "inputs", "max_rel_err", "tolerance");
    for r in &rows {
        let rep = &r.report;
        println!(
            "{:<22} {:>8} {:>14.3e} {:>10.0e}  {}",
            r.name,
            rep.checked,
            rep.max_rel_error,
            rep.tolerance,
            if rep.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.report.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient mismatch in {}", failed.join(", "))).into())
    }
}

fn parse_windows(s: &str) -> CliResult<Vec<f64>> {
    let ws = s
        .split(',')
        .map(|w| w.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(format!("--windows: {e}")))?;
    if ws.is_empty() || ws.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Failure::Usage("--windows values must lie in [0, 1]".into()));
    }
    Ok(ws)
}

fn load_eval_sequence(dir: &Path) -> CliResult<EvalSequence> {
    let seq = SequenceDir::open(dir)?;
    if seq.gt.is_empty() {
        return Err(Error::Data(format!("{} has no ground truth", dir.display())).into());
    }
    let frames = seq.frames().collect::<latrack_core::Result<Vec<Frame>>>()?;
    if frames.len() != seq.gt.len() {
        return Err(Error::Data(format!(
            "{}: {} frames for {} ground-truth boxes",
            dir.display(),
            frames.len(),
            seq.gt.len()
        ))
        .into());
    }
    Ok(EvalSequence {
        name: seq.name,
        frames,
        gt: seq.gt,
    })
}

fn cmd_sweep(
    cli: &Cli,
    ckpt_path: &Path,
    seqs: &[PathBuf],
    suite: usize,
    windows: &str,
    out: &Path,
) -> CliResult {
    let windows = parse_windows(windows)?;
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = checkpoint_config(cli, &ckpt)?;
    let model = ckpt.model()?;
    let sequences = if seqs.is_empty() {
        if suite == 0 {
            return Err(Failure::Usage("--suite must be positive".into()));
        }
        evalkit::synthetic_suite(&cfg.synth, suite)?
    } else {
        seqs.iter().map(|s| load_eval_sequence(s)).collect::<CliResult<Vec<_>>>()?
    };
    let table = evalkit::window_sweep(&model, &sequences, &cfg.track, &windows)?;
    evalkit::write_json(out, &table)?;
    println!("{:>8} {:>8} {:>10} {:>10}", "w", "auc", "precision", "norm_prec");
    for r in &table.rows {
        println!(
            "{:>8.3} {:>8.4} {:>10.4} {:>10.4}",
            r.window_influence, r.auc, r.precision, r.norm_precision
        );
    }
    println!("auc range {:.4}", table.auc_range());
    Ok(())
}

fn cmd_synth(cli: &Cli, out: &Path, count: usize) -> CliResult {
    if count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    let cfg = fresh_config(cli)?;
    for i in 0..count {
        let synth = SyntheticConfig {
            seed: cfg.synth.seed.wrapping_add(i as u64),
            ..cfg.synth.clone()
        };
        let seq = gen_synthetic_sequence(&synth)?;
        let dir = if count == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("seq-{i:03}"))
        };
        io::write_sequence(&dir, &seq)?;
    }
    println!("{}", json!({"out": out, "sequences": count, "frames": cfg.synth.length}));
    Ok(())
}

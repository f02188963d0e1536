use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shortcut_probe::config::PipelineConfig;
use shortcut_probe::dataset::EmbeddingDataset;
use shortcut_probe::detector::ShortcutDetector;
use shortcut_probe::error::{Error, Result};
use shortcut_probe::head::LinearHead;
use shortcut_probe::metrics::{evaluate, interpret_base_vectors};
use shortcut_probe::mitigate::RunReport;
use shortcut_probe::pipeline::{
    run_detect, run_mitigate, run_pipeline, run_probe, Progress, Stage, StageError, StageResult, DETECTOR_FILE,
    HEAD_FILE, PROBE_REPORT_FILE, RUN_REPORT_FILE,
};
use shortcut_probe::rng::{stream, Stream};
use shortcut_probe::synth::{generate_synthetic, SynthSpec};
use shortcut_probe::theory::{check_instance, format_checks, TheoryInstance};

#[derive(Parser)]
#[command(name = "shortcut-probe", version, about = "Detect and unlearn prediction shortcuts in a linear head over frozen embeddings")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a two-class synthetic dataset with one spurious axis.
    Synth(SynthArgs),
    /// Select the probe set and print its partition sizes.
    Probe,
    /// Train the shortcut detector (stage one only).
    Detect,
    /// Retrain the head against a saved detector (stage two only).
    Mitigate,
    /// Print accuracy metrics of a head on a dataset.
    Eval(EvalArgs),
    /// List the records most similar to each learned base vector.
    Interpret(InterpretArgs),
    /// Check the residual-projection identities on random instances.
    TheoryCheck(TheoryArgs),
    /// Run every stage and write all artifacts.
    Pipeline,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Counts for groups (y=0,a=0), (y=0,a=1), (y=1,a=0), (y=1,a=1).
    #[arg(long, value_delimiter = ',', default_values_t = [900, 100, 100, 900])]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    core: f64,
    #[arg(long, default_value_t = 2.0)]
    spurious: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Head checkpoint; defaults to `head_in`.
    #[arg(long)]
    head: Option<PathBuf>,
    /// Dataset; defaults to `test_data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Human-readable table instead of `metric<TAB>value` lines.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct InterpretArgs {
    /// Detector checkpoint; defaults to `detector_in`.
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Dataset; defaults to `probe_data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Training rows per instance.
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Feature dimension per instance.
    #[arg(long, default_value_t = 8)]
    d: usize,
}

fn at<T>(r: Result<T>, stage: Stage) -> StageResult<T> {
    r.map_err(|source| StageError { stage, source })
}

fn required(value: Option<PathBuf>, key: &str) -> StageResult<PathBuf> {
    value.ok_or_else(|| StageError {
        stage: Stage::Config,
        source: Error::ConfigValue {
            key: key.into(),
            message: "required by this command".into(),
        },
    })
}

fn load_config(global: &Global) -> StageResult<PipelineConfig> {
    let mut config = match &global.config {
        Some(path) => at(PipelineConfig::load(path), Stage::Config)?,
        None => PipelineConfig::default(),
    };
    let mut overrides = global.overrides.clone();
    if let Some(seed) = global.seed {
        overrides.push(format!("seed={seed}"));
    }
    at(config.apply_overrides(&overrides), Stage::Config)?;
    Ok(config)
}

fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> StageResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StageError {
            stage: Stage::Write,
            source: Error::Io { path: parent.to_path_buf(), source: e },
        })?;
    }
    fs::write(&path, bytes).map_err(|e| StageError {
        stage: Stage::Write,
        source: Error::Io { path, source: e },
    })
}

fn load_dataset(path: &Path) -> StageResult<EmbeddingDataset> {
    at(EmbeddingDataset::load(path), Stage::Load)
}

fn synth(args: SynthArgs, config: &PipelineConfig, progress: Progress) -> StageResult<()> {
    if args.counts.len() != 4 {
        return Err(StageError {
            stage: Stage::Config,
            source: Error::InvalidArgument(format!("--counts takes 4 values, got {}", args.counts.len())),
        });
    }
    let spec = SynthSpec {
        dim: args.dim,
        group_counts: [args.counts[0], args.counts[1], args.counts[2], args.counts[3]],
        core_magnitude: args.core,
        spurious_magnitude: args.spurious,
        noise_std: args.noise,
        seed: config.seed,
    };
    let ds = at(generate_synthetic(&spec), Stage::Config)?;
    write(args.out.clone(), ds.to_bytes())?;
    progress.note(format!("wrote {} records to {}", ds.len(), args.out.display()));
    Ok(())
}

fn run(cli: Cli) -> StageResult<()> {
    let config = load_config(&cli.global)?;
    let progress = Progress { quiet: cli.global.quiet };
    let out = |name: &str| config.out_dir.join(name);
    match cli.command {
        Command::Synth(args) => synth(args, &config, progress)?,
        Command::Probe => {
            let probe = run_probe(&config, progress)?;
            let report = probe.partitions.report();
            print!("{report}");
            write(out(PROBE_REPORT_FILE), report)?;
        }
        Command::Detect => {
            let probe = run_probe(&config, progress)?;
            let (detector, trace) = run_detect(&config, &probe, progress)?;
            let report = RunReport { detector: Some(trace), mitigation: None };
            write(out(DETECTOR_FILE), detector.to_bytes())?;
            write(out(RUN_REPORT_FILE), report.to_text())?;
            progress.note(format!("detector written to {}", out(DETECTOR_FILE).display()));
        }
        Command::Mitigate => {
            let det_path = required(config.detector_in.clone(), "detector_in")?;
            let detector = at(ShortcutDetector::load(&det_path), Stage::Load)?;
            let probe = run_probe(&config, progress)?;
            let (head, trace) = run_mitigate(&config, &probe, &detector, progress)?;
            let report = RunReport { detector: None, mitigation: Some(trace) };
            write(out(HEAD_FILE), head.to_bytes())?;
            write(out(RUN_REPORT_FILE), report.to_text())?;
            progress.note(format!("head written to {}", out(HEAD_FILE).display()));
        }
        Command::Eval(args) => {
            let head_path = required(args.head.or(config.head_in.clone()), "head_in")?;
            let data_path = required(args.data.or(config.test_data.clone()), "test_data")?;
            let head = at(LinearHead::load(&head_path), Stage::Load)?;
            let ds = load_dataset(&data_path)?;
            let metrics = at(evaluate(&head, &ds), Stage::Evaluate)?;
            if args.table {
                print!("{}", metrics.to_table());
            } else {
                print!("{}", metrics.to_lines());
            }
        }
        Command::Interpret(args) => {
            let det_path = required(args.detector.or(config.detector_in.clone()), "detector_in")?;
            let data_path = required(args.data.or(config.probe_data.clone()), "probe_data")?;
            let detector = at(ShortcutDetector::load(&det_path), Stage::Load)?;
            let ds = load_dataset(&data_path)?;
            let ranks = at(interpret_base_vectors(&detector, &ds, args.top_k, config.ridge), Stage::Evaluate)?;
            println!("base\trank\tindex\tsimilarity\tlabel\tgroup");
            for (k, list) in ranks.iter().enumerate() {
                for (rank, (i, sim)) in list.iter().enumerate() {
                    let rec = ds.record(*i);
                    let group = rec.group.map_or_else(|| "-".to_string(), |g| g.to_string());
                    println!("{k}\t{rank}\t{i}\t{sim:.6}\t{}\t{group}", rec.label);
                }
            }
        }
        Command::TheoryCheck(args) => {
            let mut rng = stream(config.seed, Stream::Theory);
            let checks = (0..args.instances)
                .map(|_| TheoryInstance::random(args.n, args.d, &mut rng).and_then(|inst| check_instance(&inst)))
                .collect::<Result<Vec<_>>>();
            print!("{}", format_checks(&at(checks, Stage::Evaluate)?));
        }
        Command::Pipeline => {
            let outcome = run_pipeline(&config, progress)?;
            print!("{}", outcome.metrics.to_lines());
            for path in &outcome.artifacts {
                progress.note(format!("wrote {}", path.display()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

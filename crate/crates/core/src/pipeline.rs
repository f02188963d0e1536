//! End-to-end driver: probe selection, detector training, head retraining and
//! evaluation, with every artifact written under `out_dir`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::dataset::EmbeddingDataset;
use crate::detector::{train_detector, DetectorTrainConfig, DetectorTrace, ShortcutDetector};
use crate::error::{Error, ErrorKind};
use crate::head::{train_erm, LinearHead};
use crate::metrics::{evaluate, MetricsReport};
use crate::mitigate::{retrain_head, MitigationConfig, MitigationTrace, RunReport};
use crate::probe::{build_probe_set, partition, ProbePartitions};
use crate::sgd::SgdConfig;

pub const DETECTOR_FILE: &str = "detector.scpd";
pub const HEAD_FILE: &str = "head.scph";
pub const BASELINE_HEAD_FILE: &str = "erm_head.scph";
pub const RUN_REPORT_FILE: &str = "run_report.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const BASELINE_METRICS_FILE: &str = "baseline_metrics.txt";
pub const PROBE_REPORT_FILE: &str = "probe_report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Baseline,
    Probe,
    Detect,
    Mitigate,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Baseline => "baseline",
            Stage::Probe => "probe",
            Stage::Detect => "detect",
            Stage::Mitigate => "mitigate",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl StageError {
    /// Process exit code: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        if self.stage == Stage::Config {
            return 2;
        }
        match self.source.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for crate::error::Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

fn missing(key: &str) -> StageError {
    StageError {
        stage: Stage::Config,
        source: Error::ConfigValue {
            key: key.into(),
            message: "required by this command".into(),
        },
    }
}

pub fn baseline_sgd(config: &PipelineConfig) -> SgdConfig {
    SgdConfig {
        learning_rate: config.erm_lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        batch_size: config.erm_batch_size,
        batches_per_epoch: 0,
        epochs: config.erm_epochs,
        seed: config.seed,
    }
}

pub fn detector_config(config: &PipelineConfig) -> DetectorTrainConfig {
    DetectorTrainConfig {
        k: config.k,
        eta: config.eta,
        ridge: config.ridge,
        sgd: SgdConfig {
            learning_rate: config.alpha,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            batch_size: config.batch_size,
            batches_per_epoch: config.batches_per_epoch,
            epochs: config.e1,
            seed: config.seed,
        },
    }
}

pub fn mitigation_config(config: &PipelineConfig) -> MitigationConfig {
    MitigationConfig {
        lambda: config.lambda,
        ridge: config.ridge,
        sgd: SgdConfig {
            learning_rate: config.beta,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            batch_size: config.batch_size,
            batches_per_epoch: config.batches_per_epoch,
            epochs: config.e2,
            seed: config.seed,
        },
    }
}

/// Prints progress to stderr unless quiet.
#[derive(Debug, Clone, Copy, Default)]
pub struct Progress {
    pub quiet: bool,
}

impl Progress {
    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_dataset(path: &Path) -> StageResult<EmbeddingDataset> {
    EmbeddingDataset::load(path).at(Stage::Load)
}

/// The starting head: `head_in` if given, otherwise a baseline fitted on
/// `train_data`. The second value is true when a baseline was fitted.
pub fn starting_head(config: &PipelineConfig, progress: Progress) -> StageResult<(LinearHead, bool)> {
    if let Some(path) = &config.head_in {
        return Ok((LinearHead::load(path).at(Stage::Load)?, false));
    }
    let train_path = config.train_data.as_ref().ok_or_else(|| missing("head_in or train_data"))?;
    let train = load_dataset(train_path)?;
    progress.note(format!("fitting baseline head on {} records", train.len()));
    let head = train_erm(&train, &baseline_sgd(config)).at(Stage::Baseline)?;
    Ok((head, true))
}

pub struct ProbeOutcome {
    pub dataset: EmbeddingDataset,
    pub head: LinearHead,
    pub partitions: ProbePartitions,
    pub baseline_fitted: bool,
}

pub fn run_probe(config: &PipelineConfig, progress: Progress) -> StageResult<ProbeOutcome> {
    let probe_path = config.probe_data.as_ref().ok_or_else(|| missing("probe_data"))?;
    let dataset = load_dataset(probe_path)?;
    let (head, baseline_fitted) = starting_head(config, progress)?;
    head.check_dataset(&dataset).at(Stage::Load)?;
    let selection = build_probe_set(&dataset, &head, config.r).at(Stage::Probe)?;
    let partitions = partition(&selection, &dataset, &head).at(Stage::Probe)?;
    progress.note(format!(
        "probe set: {} of {} records (r = {})",
        selection.indices.len(),
        dataset.len(),
        config.r
    ));
    Ok(ProbeOutcome {
        dataset,
        head,
        partitions,
        baseline_fitted,
    })
}

fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> StageResult<()> {
    fs::write(&path, bytes).map_err(|e| StageError {
        stage: Stage::Write,
        source: Error::Io { path, source: e },
    })
}

fn ensure_out_dir(config: &PipelineConfig) -> StageResult<()> {
    fs::create_dir_all(&config.out_dir).map_err(|e| StageError {
        stage: Stage::Write,
        source: Error::Io {
            path: config.out_dir.clone(),
            source: e,
        },
    })
}

pub fn run_detect(
    config: &PipelineConfig,
    probe: &ProbeOutcome,
    progress: Progress,
) -> StageResult<(ShortcutDetector, DetectorTrace)> {
    let (detector, trace) = train_detector(
        &probe.dataset,
        &probe.head,
        &probe.partitions,
        &detector_config(config),
    )
    .at(Stage::Detect)?;
    if let Some(last) = trace.epochs.last() {
        progress.note(format!(
            "detector: objective {:.6} -> {:.6}",
            trace.initial.objective, last.objective
        ));
    }
    Ok((detector, trace))
}

pub fn run_mitigate(
    config: &PipelineConfig,
    probe: &ProbeOutcome,
    detector: &ShortcutDetector,
    progress: Progress,
) -> StageResult<(LinearHead, MitigationTrace)> {
    let selection_path = config.selection_data.as_ref().ok_or_else(|| missing("selection_data"))?;
    let selection = load_dataset(selection_path)?;
    let (head, trace) = retrain_head(
        &probe.head,
        detector,
        &probe.dataset,
        &probe.partitions,
        &mitigation_config(config),
        &selection,
    )
    .at(Stage::Mitigate)?;
    if let Some(best) = trace.best_epoch {
        progress.note(format!(
            "mitigation: best epoch {best}, worst-class selection accuracy {:.4}",
            trace.epochs[best - 1].selection_worst_class
        ));
    }
    Ok((head, trace))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub head: LinearHead,
    pub detector: ShortcutDetector,
    pub report: RunReport,
    pub metrics: MetricsReport,
    pub baseline_metrics: MetricsReport,
    pub artifacts: Vec<PathBuf>,
}

/// Runs every stage and writes the detector, best head, run report and
/// metrics (on `test_data`, or `selection_data` when there is no test set).
pub fn run_pipeline(config: &PipelineConfig, progress: Progress) -> StageResult<PipelineOutcome> {
    config.validate().at(Stage::Config)?;
    let probe = run_probe(config, progress)?;
    let (detector, det_trace) = run_detect(config, &probe, progress)?;
    let (head, mit_trace) = run_mitigate(config, &probe, &detector, progress)?;

    let eval_path = config
        .test_data
        .as_ref()
        .or(config.selection_data.as_ref())
        .ok_or_else(|| missing("test_data"))?;
    let eval_set = load_dataset(eval_path)?;
    let metrics = evaluate(&head, &eval_set).at(Stage::Evaluate)?;
    let baseline_metrics = evaluate(&probe.head, &eval_set).at(Stage::Evaluate)?;

    let report = RunReport {
        detector: Some(det_trace),
        mitigation: Some(mit_trace),
    };
    ensure_out_dir(config)?;
    let out = |name: &str| config.out_dir.join(name);
    let mut artifacts = vec![
        out(DETECTOR_FILE),
        out(HEAD_FILE),
        out(RUN_REPORT_FILE),
        out(METRICS_FILE),
        out(BASELINE_METRICS_FILE),
        out(PROBE_REPORT_FILE),
    ];
    write(out(DETECTOR_FILE), detector.to_bytes())?;
    write(out(HEAD_FILE), head.to_bytes())?;
    write(out(RUN_REPORT_FILE), report.to_text())?;
    write(out(METRICS_FILE), metrics.to_lines())?;
    write(out(BASELINE_METRICS_FILE), baseline_metrics.to_lines())?;
    write(out(PROBE_REPORT_FILE), probe.partitions.report())?;
    if probe.baseline_fitted {
        write(out(BASELINE_HEAD_FILE), probe.head.to_bytes())?;
        artifacts.push(out(BASELINE_HEAD_FILE));
    }
    progress.note(format!("artifacts written to {}", config.out_dir.display()));
    Ok(PipelineOutcome {
        head,
        detector,
        report,
        metrics,
        baseline_metrics,
        artifacts,
    })
}

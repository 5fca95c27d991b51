//! `cascade-rcnn` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::assign::iou_histogram;
use crate::cascade::{
    train_cascade, train_integral, CascadeModel, Detector, InferenceConfig, Scoring, TrainConfig,
    DEFAULT_THRESHOLDS,
};
use crate::error::{Error, Result};
use crate::eval::{
    coco_ap, curve_to_csv, ground_truth_set, localization_curve, rows_to_csv, stage_report,
};
use crate::harness::io::{
    load_dataset, load_detections, load_model, save_dataset, save_detections, save_model,
};
use crate::harness::{generate_dataset, matched_proposal_ious, split, DatasetConfig, Scene};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

const HIST_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];

#[derive(Debug, Parser)]
#[command(
    name = "cascade-rcnn",
    version,
    about = "Cascaded detection heads on synthetic proposals"
)]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Split {
    /// Number of trailing scenes held out for evaluation (0 = use all).
    #[arg(long, default_value_t = 100)]
    holdout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Cascade,
    Baseline,
    Iterative,
    Integral,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Number of stages (iterations for `iterative`, heads for `integral`).
        #[arg(long)]
        stages: Option<usize>,
        /// Comma-separated IoU thresholds, one per stage.
        #[arg(long, value_delimiter = ',')]
        ious: Option<Vec<f64>>,
        /// Label every stage at the first threshold.
        #[arg(long)]
        no_iou_up: bool,
        /// Do not normalize regression targets.
        #[arg(long)]
        no_stat: bool,
        #[arg(long, value_enum, default_value_t = Mode::Cascade)]
        mode: Mode,
        /// JSON file overriding training hyper-parameters.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[command(flatten)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained detector on the held-out split.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score with the mean of all stage classifiers.
        #[arg(long)]
        ensemble: bool,
        /// Append ground-truth boxes to the proposals.
        #[arg(long)]
        add_gt: bool,
        #[command(flatten)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// COCO-style AP of a detection file against the held-out split.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage AP table of a cascade model.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// IoU histogram of the proposals, optionally at every stage of a cascade.
    Hist {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        bin_width: f64,
        #[command(flatten)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localization curve of one stage's regressor.
    Curve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// 1-based stage index.
        #[arg(long, default_value_t = 1)]
        stage: usize,
        #[arg(long, default_value_t = 0.05)]
        bin_width: f64,
        #[command(flatten)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!(
                "{}",
                <Cli as clap::CommandFactory>::command().render_usage()
            );
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn held_out(data: &Path, split_args: &Split) -> Result<Vec<Scene>> {
    let scenes = load_dataset(data)?;
    Ok(split(&scenes, split_args.holdout).1.to_vec())
}

fn resolve_thresholds(stages: Option<usize>, ious: Option<Vec<f64>>) -> Result<Vec<f64>, CliError> {
    match (stages, ious) {
        (Some(0), _) => Err(usage("--stages must be >= 1")),
        (None, None) => Ok(DEFAULT_THRESHOLDS[..3].to_vec()),
        (Some(t), None) if t <= DEFAULT_THRESHOLDS.len() => Ok(DEFAULT_THRESHOLDS[..t].to_vec()),
        (Some(t), None) => Err(usage(format!(
            "--stages {t} needs explicit --ious (defaults cover {} stages)",
            DEFAULT_THRESHOLDS.len()
        ))),
        (None, Some(u)) if u.is_empty() => Err(usage("--ious is empty")),
        (None, Some(u)) => Ok(u),
        (Some(t), Some(u)) if u.len() >= t => Ok(u[..t].to_vec()),
        (Some(t), Some(u)) => Err(usage(format!("--stages {t} but only {} --ious", u.len()))),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen { config, out } => {
            let mut cfg: DatasetConfig = match config {
                Some(p) => read_json(&p)?,
                None => DatasetConfig::default(),
            };
            cfg.seed = seed;
            let scenes = generate_dataset(&cfg)?;
            save_dataset(&out, &scenes)?;
        }
        Command::Train {
            data,
            stages,
            ious,
            no_iou_up,
            no_stat,
            mode,
            train_config,
            split: split_args,
            out,
        } => {
            let mut cfg: TrainConfig = match train_config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            let thresholds = match mode {
                Mode::Baseline => resolve_thresholds(Some(1), ious)?,
                Mode::Iterative => resolve_thresholds(Some(1), ious)?,
                _ => resolve_thresholds(stages, ious)?,
            };
            cfg.thresholds = thresholds;
            cfg.increasing_iou = !no_iou_up;
            cfg.use_stats = !no_stat;
            cfg.seed = seed;
            cfg.features.seed = seed;

            let scenes = load_dataset(&data)?;
            let (train, _) = split(&scenes, split_args.holdout);
            let n_classes = train
                .iter()
                .flat_map(|s| s.gts.iter().map(|g| g.class_id))
                .max()
                .unwrap_or(0);
            if n_classes > cfg.features.n_classes {
                return Err(CliError::Data(Error::InvalidArgument(format!(
                    "data has class id {n_classes} but the feature config allows {}",
                    cfg.features.n_classes
                ))));
            }

            let detector = match mode {
                Mode::Cascade | Mode::Baseline => Detector::Cascade(train_cascade(train, &cfg)?.0),
                Mode::Iterative => {
                    let iterations = stages.unwrap_or(3);
                    if iterations == 0 {
                        return Err(usage("--stages must be >= 1"));
                    }
                    Detector::Iterative {
                        base: train_cascade(train, &cfg)?.0,
                        iterations,
                    }
                }
                Mode::Integral => Detector::Integral(train_integral(train, &cfg)?.0),
            };
            save_model(&out, &detector)?;
        }
        Command::Infer {
            model,
            data,
            ensemble,
            add_gt,
            split: split_args,
            out,
        } => {
            let detector = load_model(&model)?;
            let scenes = held_out(&data, &split_args)?;
            let cfg = InferenceConfig {
                scoring: if ensemble {
                    Scoring::Ensemble
                } else {
                    Scoring::LastStage
                },
                ..InferenceConfig::default()
            };
            save_detections(&out, &detector.detect(&scenes, add_gt, &cfg))?;
        }
        Command::Eval {
            dets,
            data,
            split: split_args,
            out,
        } => {
            let detections = load_detections(&dets)?;
            let scenes = held_out(&data, &split_args)?;
            write_text(
                &out,
                &coco_ap(&detections, &ground_truth_set(&scenes)).to_csv(),
            )?;
        }
        Command::Report {
            model,
            data,
            split: split_args,
            out,
        } => {
            let cascade = cascade_of(load_model(&model)?)?;
            let scenes = held_out(&data, &split_args)?;
            let rows = stage_report(&cascade, &scenes, &InferenceConfig::default());
            write_text(&out, &rows_to_csv(&rows))?;
        }
        Command::Hist {
            data,
            model,
            bin_width,
            split: split_args,
            out,
        } => {
            let scenes = load_dataset(&data)?;
            let (train, _) = split(&scenes, split_args.holdout);
            let mut per_stage = Vec::new();
            match model {
                None => per_stage.push(matched_proposal_ious(train)),
                Some(p) => {
                    let cascade = cascade_of(load_model(&p)?)?;
                    per_stage = stage_input_ious(&cascade, train);
                }
            }
            let mut hist_rows = String::from("stage,bin_low,bin_high,count\n");
            let mut frac_rows = String::from("stage,threshold,percent_above\n");
            for (t, ious) in per_stage.iter().enumerate() {
                let h = iou_histogram(ious, bin_width, &HIST_THRESHOLDS)?;
                for (i, c) in h.counts.iter().enumerate() {
                    let (lo, hi) = h.bin_edges(i);
                    hist_rows.push_str(&format!("{},{lo:.6},{hi:.6},{c}\n", t + 1));
                }
                for (u, pct) in &h.above {
                    frac_rows.push_str(&format!("{},{u:.6},{pct:.6}\n", t + 1));
                }
            }
            write_text(&out, &(hist_rows + &frac_rows))?;
        }
        Command::Curve {
            model,
            data,
            stage,
            bin_width,
            split: split_args,
            out,
        } => {
            let detector = load_model(&model)?;
            let stages = match &detector {
                Detector::Cascade(m) => m.stages.clone(),
                Detector::Iterative { base, .. } => base.stages.clone(),
                Detector::Integral(m) => m.heads[..1].to_vec(),
            };
            if stage == 0 || stage > stages.len() {
                return Err(usage(format!(
                    "--stage {stage} out of range 1..={}",
                    stages.len()
                )));
            }
            let scenes = held_out(&data, &split_args)?;
            let points = localization_curve(
                &stages[stage - 1],
                detector.feature_config(),
                &scenes,
                bin_width,
            )?;
            write_text(&out, &curve_to_csv(&points))?;
        }
    }
    Ok(())
}

fn cascade_of(detector: Detector) -> Result<CascadeModel, CliError> {
    match detector {
        Detector::Cascade(m) => Ok(m),
        _ => Err(CliError::Data(Error::InvalidArgument(
            "this command needs a cascade model".into(),
        ))),
    }
}

/// Best-match IoU of every proposal entering each stage of `model`.
fn stage_input_ious(model: &CascadeModel, scenes: &[Scene]) -> Vec<Vec<f64>> {
    let cfg = InferenceConfig::default();
    let mut per_stage = vec![Vec::new(); model.n_stages()];
    for s in scenes {
        let trace = crate::cascade::run_cascade(model, s, &s.proposals, &cfg);
        for (t, boxes) in trace.stage_inputs.iter().enumerate() {
            per_stage[t].extend(
                boxes
                    .iter()
                    .filter_map(|b| crate::assign::best_match(b, &s.gts).map(|(_, o)| o))
                    .filter(|&o| o > 0.0),
            );
        }
    }
    per_stage
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use talforge::config::PipelineConfig;
use talforge::eval::{class_ground_truth, pr_curve};
use talforge::exec::{init_threads, Exec};
use talforge::io;
use talforge::params::ParamSet;
use talforge::pipeline::{self, Dataset};
use talforge::synthetic::gen_synthetic;

/// Temporal action localization: proposals, refinement, post-processing, evaluation.
#[derive(Debug, Parser)]
#[command(name = "talforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON pipeline config (defaults to the built-in toy config)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run per-video work on the calling thread only
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (annotations, class scores, features)
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the proposal net and the refinement cascade
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// optional JSON file with per-epoch losses
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Generate proposals for the evaluation subset
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine proposals with the trained cascade
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Soft-NMS and class assignment; writes a submission JSON
    Postproc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse several proposal files, then Soft-NMS and class assignment
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        proposals: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a submission against ground truth
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// annotation file, instead of the one in the data directory
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        results: PathBuf,
        /// metrics JSON to write
        #[arg(long)]
        out: Option<PathBuf>,
        /// precision/recall CSV for `--pr-class` at `--pr-iou`
        #[arg(long, requires = "pr_class")]
        pr_csv: Option<PathBuf>,
        #[arg(long)]
        pr_class: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        pr_iou: f64,
    },
    /// Comparison table from metric files (`name=path`), with published
    /// reference numbers shown for orientation
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long = "metrics", value_name = "NAME=PATH")]
        metrics: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenSynthetic { common, .. }
            | Command::Train { common, .. }
            | Command::Infer { common, .. }
            | Command::Refine { common, .. }
            | Command::Postproc { common, .. }
            | Command::Ensemble { common, .. }
            | Command::Eval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let base = match &c.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::toy(),
    };
    Ok(base.with_overrides(&c.overrides)?)
}

fn data_dir(arg: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf> {
    match arg.as_ref().or(cfg.paths.data_dir.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!("no data directory: pass --data or set paths.data_dir"),
    }
}

fn load_data(arg: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<Dataset> {
    let dir = data_dir(arg, cfg)?;
    Dataset::load(&dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    ParamSet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let cfg = load_config(common)?;
    let exec = if common.sequential { Exec::Sequential } else { Exec::Parallel };
    init_threads(None);

    match &cli.command {
        Command::GenSynthetic { out, .. } => {
            let ds: Dataset = gen_synthetic(&cfg.synthetic)?.into();
            ds.save(out)?;
            eprintln!(
                "wrote {} videos ({} instances) to {}",
                ds.features.len(),
                ds.annotations.num_instances(),
                out.display()
            );
        }
        Command::Train { data, out, losses, .. } => {
            let ds = load_data(data, &cfg)?;
            let report = pipeline::train(&cfg, &ds, exec, &mut |s| eprintln!("{s}"))?;
            report.params.save(out)?;
            if let Some(p) = losses {
                let v = serde_json::json!({
                    "proposal_net": report.proposal_losses,
                    "cascade": report.cascade_losses,
                });
                std::fs::write(p, serde_json::to_string_pretty(&v)? + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            eprintln!("wrote checkpoint {}", out.display());
        }
        Command::Infer {
            data, checkpoint, out, ..
        } => {
            let ds = load_data(data, &cfg)?;
            let params = load_checkpoint(checkpoint)?;
            let props = pipeline::infer(&cfg, &params, &ds, cfg.eval.subset, exec)?;
            io::save_proposals(out, &props)?;
            eprintln!("wrote proposals for {} videos to {}", props.len(), out.display());
        }
        Command::Refine {
            data,
            checkpoint,
            proposals,
            out,
            ..
        } => {
            let ds = load_data(data, &cfg)?;
            let params = load_checkpoint(checkpoint)?;
            let props = io::load_proposals(proposals)?;
            let refined = pipeline::refine(&cfg, &params, &ds, &props, exec)?;
            io::save_proposals(out, &refined)?;
            eprintln!("wrote refined proposals to {}", out.display());
        }
        Command::Postproc {
            data, proposals, out, ..
        } => {
            let ds = load_data(data, &cfg)?;
            let props = io::load_proposals(proposals)?;
            let dets = pipeline::postprocess(&cfg, &props, &ds.class_scores)?;
            io::write_results(out, &dets)?;
            eprintln!("wrote {} detections to {}", dets.len(), out.display());
        }
        Command::Ensemble {
            data, proposals, out, ..
        } => {
            let ds = load_data(data, &cfg)?;
            let sets = proposals
                .iter()
                .map(|p| io::load_proposals(p))
                .collect::<talforge::Result<Vec<_>>>()?;
            let dets = pipeline::ensemble_detections(&cfg, &sets, &ds.class_scores)?;
            io::write_results(out, &dets)?;
            eprintln!("wrote {} ensembled detections to {}", dets.len(), out.display());
        }
        Command::Eval {
            data,
            annotations,
            results,
            out,
            pr_csv,
            pr_class,
            pr_iou,
            ..
        } => {
            let gts = match annotations {
                Some(p) => io::load_annotations(p)?,
                None => io::load_annotations(&data_dir(data, &cfg)?.join(pipeline::ANNOTATIONS_FILE))?,
            };
            let dets = io::read_results(results)?;
            let report = pipeline::evaluate(&cfg, &dets, &gts, exec)?;
            for (t, m) in report.thresholds.iter().zip(&report.map_per_threshold) {
                println!("mAP@{t:.2} {m:.4}");
            }
            println!("average_mAP {:.4}", report.average_map);
            if let Some(p) = out {
                io::save_metrics(p, &report)?;
            }
            if let (Some(p), Some(label)) = (pr_csv, pr_class) {
                let sub = gts.subset(cfg.eval.subset);
                let gt = class_ground_truth(&sub, label);
                if gt.is_empty() {
                    bail!("class {label:?} has no ground truth in the {} subset", cfg.eval.subset);
                }
                let cls: Vec<_> = dets.iter().filter(|d| &d.label == label).cloned().collect();
                io::save_pr_csv(p, &pr_curve(&cls, &gt, *pr_iou))?;
            }
        }
        Command::Report { metrics, out, .. } => {
            let runs = metrics
                .iter()
                .map(|spec| {
                    let (name, path) = spec
                        .split_once('=')
                        .with_context(|| format!("--metrics expects NAME=PATH, got {spec:?}"))?;
                    let r = io::load_metrics(Path::new(path)).with_context(|| format!("loading metrics {path}"))?;
                    Ok((name.to_string(), r))
                })
                .collect::<Result<Vec<_>>>()?;
            let text = pipeline::render_report(&runs);
            match out {
                Some(p) => std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
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
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use simva::config::{ModelConfig, Protocol};
use simva::container;
use simva::harness::eval::{evaluate_base_to_novel, run_protocol};
use simva::harness::gradcheck::{gradcheck, GradcheckOptions};
use simva::harness::inspect::{dump, summarize_store, trace_arrays};
use simva::harness::{evaluate, Dataset, MetricsRecord, RunConfig};
use simva::model::SimVa;
use simva::wse::{wse_blend_filtered, DEFAULT_BETA};
use simva::SimvaError;

mod plot;

#[derive(Parser)]
#[command(name = "simva", version, about = "Similarity-volume aggregation: train, evaluate and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults to the built-in desk benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train under the configured protocol and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON lines go here instead of stdout.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Multiplies the epoch schedule.
        #[arg(long)]
        desk_scale: Option<f64>,
        /// Omit wall-clock time from metrics so runs are byte-identical.
        #[arg(long)]
        no_wall_time: bool,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also evaluate frame-shuffled test clips.
        #[arg(long)]
        shuffled: bool,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interpolate two checkpoints: (1 - beta) * base + beta * tuned.
    Wse {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        /// Only blend arrays whose name starts with this prefix.
        #[arg(long)]
        prefix: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a checkpoint, or dump intermediate volumes for one clip.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the traced arrays of test clip `--clip` to this container.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        /// Comma-separated array names to dump (all when omitted).
        #[arg(long, value_delimiter = ',')]
        keys: Vec<String>,
    },
    /// Render metrics curves from a JSON-lines file to a PNG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "loss_agg,top1")]
        keys: Vec<String>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).map_err(|e| SimvaError::Validation(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_model(path: &Path, cfg: &RunConfig, explicit_config: bool) -> Result<(SimVa, RunConfig)> {
    let ckpt = container::load(path)?;
    let cfg = match (&ckpt.config, explicit_config) {
        (Some(v), false) => serde_json::from_value(v.clone())?,
        _ => cfg.clone(),
    };
    let model = SimVa::from_store(cfg.model.clone(), ckpt.store)?;
    Ok((model, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            out,
            metrics_out,
            desk_scale,
            no_wall_time,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = desk_scale {
                cfg.train.desk_scale = s;
            }
            if no_wall_time {
                cfg.train.record_wall_time = false;
            }
            cfg.validate()?;
            let (train, test) = Dataset::synthetic(&cfg.data)?;
            let mut sink = writer(metrics_out.as_deref())?;
            let mut io_err = None;
            let mut emit = |r: &MetricsRecord| {
                let line = serde_json::to_string(r).expect("metrics serialize");
                if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                    io_err.get_or_insert(e);
                }
            };
            let (outcome, report) = run_protocol(&cfg.model, &cfg.train, cfg.protocol.0, &train, &test, &mut emit)?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            container::save(&out, &outcome.model.params, Some(&serde_json::to_value(&cfg)?))?;
            eprintln!("{}", json!({ "checkpoint": out, "steps": outcome.steps, "report": report }));
        }
        Command::Eval {
            common,
            checkpoint,
            shuffled,
            out,
        } => {
            let explicit = common.config.is_some();
            let base_cfg = if explicit { load_config(&common)? } else { RunConfig::desk() };
            let (model, cfg) = load_model(&checkpoint, &base_cfg, explicit)?;
            let (train, test) = Dataset::synthetic(&cfg.data)?;
            let mut report = match cfg.protocol.0 {
                Protocol::BaseToNovel => json!({ "protocol": "base_to_novel", "result": evaluate_base_to_novel(&model, &test)? }),
                p => json!({
                    "protocol": p,
                    "train": evaluate(&model, &train)?,
                    "test": evaluate(&model, &test)?,
                }),
            };
            if shuffled {
                report["test_frame_shuffled"] = json!(evaluate(&model, &test.frame_shuffled(cfg.train.seed))?);
            }
            writeln!(writer(out.as_deref())?, "{report}")?;
        }
        Command::Gradcheck {
            common,
            eps,
            tolerance,
            out,
        } => {
            let (model_cfg, section) = match &common.config {
                Some(_) => {
                    let c = load_config(&common)?;
                    (c.model, c.gradcheck)
                }
                None => (ModelConfig::tiny(), Default::default()),
            };
            let opts = GradcheckOptions {
                eps: eps.unwrap_or(section.options.eps),
                tolerance: tolerance.unwrap_or(section.options.tolerance),
                seed: common.seed.unwrap_or(section.options.seed),
                ..section.options
            };
            let report = gradcheck(&model_cfg, section.n_classes, opts)?;
            writeln!(writer(out.as_deref())?, "{}", serde_json::to_string(&report)?)?;
            report.into_result()?;
        }
        Command::Wse {
            base,
            tuned,
            beta,
            prefix,
            out,
        } => {
            let b = container::load(&base)?;
            let t = container::load(&tuned)?;
            let blended = wse_blend_filtered(&b.store, &t.store, beta, prefix.as_deref())?;
            container::save(&out, &blended, b.config.as_ref())?;
        }
        Command::Inspect {
            common,
            checkpoint,
            out,
            clip,
            keys,
        } => {
            let ckpt = container::load(&checkpoint)?;
            match out {
                None => print!("{}", summarize_store(&ckpt.store)),
                Some(out) => {
                    let explicit = common.config.is_some();
                    let base_cfg = if explicit { load_config(&common)? } else { RunConfig::desk() };
                    let (model, cfg) = load_model(&checkpoint, &base_cfg, explicit)?;
                    let (_, test) = Dataset::synthetic(&cfg.data)?;
                    if clip >= test.len() {
                        bail!(SimvaError::Validation(format!(
                            "clip {clip} out of range for {} test clips",
                            test.len()
                        )));
                    }
                    let arrays = trace_arrays(&model, &test.clips[clip], &test.texts)?;
                    let store = dump(&arrays, &keys)?;
                    print!("{}", summarize_store(&store));
                    container::save(&out, &store, None)?;
                }
            }
        }
        Command::Plot { metrics, out, keys } => plot::render(&metrics, &out, &keys)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<SimvaError>().map_or("error", SimvaError::kind);
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

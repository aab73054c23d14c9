//! `coattendwg` command-line tool.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coattendwg::ablation::ablation_variants;
use coattendwg::autodiff::gradcheck;
use coattendwg::data::{
    collect_traces, export_trace, load_features, parse_config, split, synth_generate, RunConfig,
    SyntheticSpec, Task, TraceFormat,
};
use coattendwg::nn::DropoutConfig;
use coattendwg::train::{evaluate, train, Metrics};
use coattendwg::{AblationFlags, Batch, Error, ModelConfig, ModelParams};

#[derive(Parser)]
#[command(name = "coattendwg", version, about = "Gated co-attention fusion of text and image features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature file.
    Synth {
        #[arg(long, default_value = "xor")]
        task: Task,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        text_dim: usize,
        #[arg(long, default_value_t = 16)]
        image_dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a model and save its parameters.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated components to switch off; overrides the config.
        #[arg(long)]
        ablation: Option<AblationFlags>,
        #[arg(long, short)]
        out: PathBuf,
        /// Per-epoch JSON lines; printed to stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accuracy, macro-F1 and per-class counts of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic and central-difference gradients of the loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export attention maps, gates and predictions.
    Trace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// csv or jsonl; guessed from the file extension by default.
        #[arg(long)]
        format: Option<TraceFormat>,
    },
    /// Train and score every ablation variant on a held-out split.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Only run these variants (ablation lists separated by ';').
        #[arg(long, value_delimiter = ';')]
        variants: Option<Vec<AblationFlags>>,
    },
}

enum Failure {
    Core(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Gradcheck(_) => 7,
            Failure::Core(e) => match e {
                Error::InvalidArgument(_) => 2,
                Error::Io { .. } => 3,
                Error::Config(_) => 4,
                Error::Parse { .. }
                | Error::Record { .. }
                | Error::ShapeMismatch { .. }
                | Error::InvalidShape { .. }
                | Error::InvalidAxis { .. }
                | Error::NonFinite(_) => 5,
                Error::Diverged { .. } => 6,
            },
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => parse_config(&read(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<ModelParams, Error> {
    ModelParams::from_json(&read(path)?)
}

fn print_metrics(out: &mut impl Write, m: &Metrics) -> io::Result<()> {
    writeln!(out, "samples\t{}", m.samples)?;
    writeln!(out, "accuracy\t{:.4}", m.accuracy)?;
    writeln!(out, "macro_f1\t{:.4}", m.macro_f1)?;
    writeln!(out, "class\tprecision\trecall\tf1\ttp\tfp\tfn\ttn")?;
    for c in &m.per_class {
        let k = c.counts;
        writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}",
            c.class, c.precision, c.recall, c.f1, k.tp, k.fp, k.fn_, k.tn
        )?;
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stdout_err(e: io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn run(cli: Cli) -> CliResult {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Synth {
            task,
            samples,
            text_dim,
            image_dim,
            noise,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                n_samples: samples,
                text_dim,
                image_dim,
                task,
                noise,
                seed,
            };
            synth_generate(&spec)?.save(&out)?;
        }
        Command::Train {
            data,
            config,
            ablation,
            out,
            log,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(flags) = ablation {
                cfg.model.ablation = flags;
                cfg.model.validate()?;
            }
            let dataset = load_features(&data)?;
            let outcome = train(&cfg.model, &cfg.train, &dataset)?;
            let lines: String = outcome.log.iter().map(|r| r.to_json_line() + "\n").collect();
            match log {
                Some(path) => write(&path, &lines)?,
                None => stdout.write_all(lines.as_bytes()).map_err(stdout_err)?,
            }
            write(&out, &outcome.model.to_json()?)?;
            eprintln!(
                "best epoch {} of {}{}",
                outcome.best_epoch,
                outcome.log.len(),
                if outcome.stopped_early { " (stopped early)" } else { "" }
            );
        }
        Command::Eval { model, data, json } => {
            let model = load_model(&model)?;
            let dataset = load_features(&data)?;
            let metrics = evaluate(&model, &dataset)?;
            if json {
                let s = serde_json::to_string_pretty(&metrics).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                writeln!(stdout, "{s}").map_err(stdout_err)?;
            } else {
                print_metrics(&mut stdout, &metrics).map_err(stdout_err)?;
            }
        }
        Command::Gradcheck {
            config,
            seed,
            batch,
            step,
            tol,
        } => {
            let mut model_cfg = match config {
                Some(p) => load_config(Some(&p))?.model,
                None => ModelConfig {
                    dim: 8,
                    fusion_heads: 2,
                    refine_heads: 2,
                    ..ModelConfig::default()
                },
            };
            model_cfg.seed = seed;
            let model_cfg = model_cfg.resolve(
                model_cfg.text_dim.unwrap_or(6),
                model_cfg.image_dim.unwrap_or(10),
                model_cfg.num_classes.unwrap_or(3),
            )?;
            let model = ModelParams::new(&model_cfg)?;
            let spec = SyntheticSpec {
                n_samples: batch.max(1),
                text_dim: model.text_dim(),
                image_dim: model.image_dim(),
                task: Task::LinearlySeparable,
                noise: 1.0,
                seed: seed.wrapping_add(1),
            };
            let data = synth_generate(&spec)?;
            let batch = Batch::from_records(&data.records)?;
            let (_, grads, _) = model.loss_and_grads(&batch, DropoutConfig::eval(), None)?;
            let report = gradcheck(&model.store, &grads, step, tol, |store| {
                let mut m = model.clone();
                m.store = store.clone();
                m.loss(&batch)
            })?;
            for e in &report.entries {
                writeln!(stdout, "{}\t{}\t{:.3e}", e.name, e.numel, e.max_rel_err).map_err(stdout_err)?;
            }
            writeln!(
                stdout,
                "max rel err {:.3e} over {} scalars (tol {tol:e})",
                report.max_rel_err(),
                model.store.numel()
            )
            .map_err(stdout_err)?;
            if !report.passed() {
                let worst: Vec<String> = report.failures().map(|e| e.name.clone()).collect();
                return Err(Failure::Gradcheck(format!("gradient check failed for {}", worst.join(", "))));
            }
        }
        Command::Trace {
            model,
            data,
            out,
            format,
        } => {
            let format = match format {
                Some(f) => f,
                None => match out.extension().and_then(|e| e.to_str()) {
                    Some("jsonl") | Some("json") => TraceFormat::Jsonl,
                    _ => TraceFormat::Csv,
                },
            };
            let model = load_model(&model)?;
            let dataset = load_features(&data)?;
            export_trace(&collect_traces(&model, &dataset)?, &out, format)?;
        }
        Command::Ablate {
            data,
            config,
            seeds,
            test_fraction,
            variants,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = load_features(&data)?;
            if seeds == 0 {
                return Err(Error::InvalidArgument("--seeds must be at least 1".into()).into());
            }
            let variants = variants.unwrap_or_else(ablation_variants);
            writeln!(stdout, "variant\taccuracy\tacc_std\tmacro_f1\tf1_std").map_err(stdout_err)?;
            for flags in variants {
                let (mut accs, mut f1s) = (Vec::new(), Vec::new());
                for s in 0..seeds {
                    let (train_set, test_set) = split(&dataset, 1.0 - test_fraction, s)?;
                    let mut model_cfg = cfg.model.clone();
                    model_cfg.ablation = flags;
                    model_cfg.seed = cfg.model.seed.wrapping_add(s);
                    let mut train_cfg = cfg.train.clone();
                    train_cfg.seed = cfg.train.seed.wrapping_add(s);
                    let outcome = train(&model_cfg, &train_cfg, &train_set)?;
                    let m = evaluate(&outcome.model, &test_set)?;
                    accs.push(m.accuracy);
                    f1s.push(m.macro_f1);
                }
                let (acc, acc_sd) = mean_std(&accs);
                let (f1, f1_sd) = mean_std(&f1s);
                writeln!(stdout, "{}\t{acc:.4}\t{acc_sd:.4}\t{f1:.4}\t{f1_sd:.4}", flags.label())
                    .map_err(stdout_err)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Gradcheck(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

//! `smp-kws`: synthesize data, train, evaluate and ablate keyword spotters.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kws_core::config::{RunConfig, PRESETS};
use kws_core::data::{read_dataset, split_holdout, stack_context, synth_corpus, write_dataset, Annotation, Utterance};
use kws_core::eval::{ablation_report, evaluate, roc_csv, ModelEntry};
use kws_core::frontend::{log_mel, read_wav};
use kws_core::model::{Checkpoint, ModelParams};
use kws_core::numerics::GradCheckConfig;
use kws_core::training::{model_grad_check, run_training, CheckpointSink};
use kws_core::{Error, ErrorKind, Result};
use serde_json::{json, Value};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "smp-kws", version, about = "Keyword spotting with smoothed max pooling loss")]
struct Cli {
    /// Worker threads; falls back to SMP_KWS_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run config; sections left out take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a built-in preset (see `presets`).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override one field, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled corpus.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn 16-bit mono WAV files into an unlabelled dataset.
    Frontend {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Mark every file as a positive ending at this frame.
        #[arg(long)]
        keyword_end: Option<usize>,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, loss log and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report FR at a target FA/h.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Supplies the `eval` section; the checkpoint supplies the rest.
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        target_fa: Option<f64>,
        #[arg(long)]
        suppression: Option<usize>,
        /// Frames before and after the keyword end that count as a hit.
        #[arg(long, num_args = 2, value_names = ["BEFORE", "AFTER"])]
        tolerance: Option<Vec<usize>>,
        /// Write the full ROC as CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of the loss gradient on a random model.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Synthetic utterances in the probe batch.
        #[arg(long, default_value_t = 4)]
        utterances: usize,
        #[arg(long, default_value_t = 0.3)]
        init_scale: f64,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train several configurations and tabulate FR per evaluation condition.
    Ablate {
        /// Base config for the data, eval and ablation sections.
        #[command(flatten)]
        config: ConfigArgs,
        /// Config files or preset names; defaults to every preset.
        #[arg(long, num_args = 1..)]
        configs: Vec<String>,
        /// Dataset to split; synthesized from the base config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the built-in presets.
    Presets,
    /// Print a fully resolved config as JSON.
    InitConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn write_manifest(path: &Path, command: &str, cfg: &RunConfig, extra: Value) -> Result<()> {
    let body = json!({
        "tool": "smp-kws",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": std::env::args().collect::<Vec<_>>(),
        "config": cfg,
        "result": extra,
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(())
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn feature_dim(data: &[Utterance]) -> Result<usize> {
    data.first()
        .map(|u| u.features.dim())
        .ok_or_else(|| Error::Data("dataset is empty".into()))
}

fn counts(data: &[Utterance]) -> (usize, usize) {
    let pos = data.iter().filter(|u| u.annotation.is_positive()).count();
    (pos, data.len() - pos)
}

fn synth(config: &ConfigArgs, out: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let mut cfg = config.resolve()?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    let data = synth_corpus(&cfg.synth, count)?;
    write_dataset(out, &data)?;
    let (pos, neg) = counts(&data);
    let frames: usize = data.iter().map(Utterance::num_frames).sum();
    println!("wrote {} records ({pos} positive, {neg} negative, {frames} frames) to {}", data.len(), out.display());
    write_manifest(
        &sibling_manifest(out),
        "synth",
        &cfg,
        json!({ "records": data.len(), "positives": pos, "negatives": neg, "frames": frames }),
    )
}

fn frontend(config: &ConfigArgs, out: &Path, keyword_end: Option<usize>, wavs: &[PathBuf]) -> Result<()> {
    let cfg = config.resolve()?;
    let mut data = Vec::with_capacity(wavs.len());
    for (i, path) in wavs.iter().enumerate() {
        let (rate, pcm) = read_wav(path)?;
        if rate != cfg.frontend.sample_rate {
            return Err(Error::Data(format!(
                "{}: sample rate {rate} Hz, config expects {}",
                path.display(),
                cfg.frontend.sample_rate
            )));
        }
        let features = log_mel(&pcm, &cfg.frontend)?;
        let annotation = match keyword_end {
            Some(end) => Annotation::Positive {
                keyword_end: end,
                keyword_start: None,
                labels: None,
            },
            None => Annotation::Negative { labels: None },
        };
        let u = Utterance {
            id: u32::try_from(i).map_err(|_| Error::Data("too many files".into()))?,
            features,
            annotation,
        };
        u.validate(None).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        data.push(u);
    }
    write_dataset(out, &data)?;
    println!("wrote {} records to {}", data.len(), out.display());
    write_manifest(&sibling_manifest(out), "frontend", &cfg, json!({ "records": data.len() }))
}

/// Trains `cfg` on raw (unstacked) features and saves the model under `out`.
fn train_into(cfg: &RunConfig, raw: &[Utterance], out: &Path) -> Result<(Checkpoint, Value)> {
    cfg.check_input_dim(feature_dim(raw)?)?;
    let data = stack_context(raw, cfg.frontend.left_context, cfg.frontend.right_context);
    std::fs::create_dir_all(out)?;
    let sink = CheckpointSink {
        dir: out.join("checkpoints"),
        frontend: cfg.frontend.clone(),
    };
    if cfg.train.checkpoint_interval.is_some() {
        std::fs::create_dir_all(&sink.dir)?;
    }
    let started = std::time::Instant::now();
    let outcome = run_training(&data, &cfg.train_config(), Some(&sink))?;
    let seconds = started.elapsed().as_secs_f64();
    let ck = Checkpoint {
        frontend: cfg.frontend.clone(),
        params: outcome.params,
    };
    ck.save(&out.join("model.smpw"))?;
    outcome.report.write_csv(&out.join("train_log.csv"))?;
    let last = outcome.report.records.last().map(|r| r.loss.total);
    let summary = json!({
        "steps": outcome.report.records.len(),
        "final_loss": last,
        "skipped_utterances": outcome.report.skipped_total(),
        "checkpoints": outcome.report.checkpoints,
        "seconds": seconds,
    });
    Ok((ck, summary))
}

fn train(config: &ConfigArgs, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = config.resolve()?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let raw = read_dataset(data)?;
    let (_, summary) = train_into(&cfg, &raw, out)?;
    println!(
        "trained {} steps, final loss {}",
        summary["steps"],
        summary["final_loss"]
    );
    println!("model written to {}", out.join("model.smpw").display());
    write_manifest(&out.join("manifest.json"), "train", &cfg, summary)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    data: &Path,
    config: &ConfigArgs,
    target_fa: Option<f64>,
    suppression: Option<usize>,
    tolerance: Option<&[usize]>,
    roc: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let mut cfg = config.resolve()?;
    if let Some(t) = target_fa {
        cfg.eval.target_fa_per_hour = t;
    }
    if let Some(s) = suppression {
        cfg.eval.suppression = s;
    }
    if let Some(&[before, after]) = tolerance {
        cfg.eval.tolerance_before = before;
        cfg.eval.tolerance_after = after;
    }
    let ck = Checkpoint::load(checkpoint)?;
    cfg.frontend = ck.frontend.clone();
    cfg.model = ck.params.config().clone();
    let raw = read_dataset(data)?;
    cfg.check_input_dim(feature_dim(&raw)?)?;
    let stacked = stack_context(&raw, ck.frontend.left_context, ck.frontend.right_context);
    let s = evaluate(&ck.params, &stacked, &cfg.eval)?;
    let op = &s.operating_point;
    println!(
        "threshold {:.6} FR {:.4} FA/h {:.4} at target {} FA/h{}",
        op.threshold,
        op.fr,
        op.fa_per_hour,
        cfg.eval.target_fa_per_hour,
        if op.target_met { "" } else { " (target not reached)" }
    );
    println!(
        "zero-FA threshold {:.6} FR {:.4}; {} positives, {} negatives, {:.4} h negative audio",
        s.zero_fa_point.threshold, s.zero_fa_point.fr, s.positives, s.negatives, s.negative_hours
    );
    if let Some(p) = roc {
        std::fs::write(p, roc_csv(&s.roc))?;
    }
    if let Some(m) = manifest {
        write_manifest(m, "eval", &cfg, serde_json::to_value(&s)?)?;
    }
    Ok(())
}

fn gradcheck(config: &ConfigArgs, utterances: usize, init_scale: f64, manifest: Option<&Path>) -> Result<bool> {
    let cfg = config.resolve()?;
    cfg.check_input_dim(cfg.synth.feature_dim)?;
    let raw = synth_corpus(&cfg.synth, utterances)?;
    let batch = stack_context(&raw, cfg.frontend.left_context, cfg.frontend.right_context);
    let params = ModelParams::init_uniform(&cfg.model, init_scale, cfg.train.seed)?;
    let obj = cfg.loss.prepare()?;
    let r = model_grad_check(&params, &batch, &obj, &GradCheckConfig::default())?;
    let ok = r.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {:.3e} over {} coordinates ({} skipped at kinks, {} parameters): {}",
        r.max_rel_error,
        r.checked,
        r.skipped_kinks,
        params.num_params(),
        if ok { "ok" } else { "FAILED" }
    );
    if let Some(m) = manifest {
        write_manifest(
            m,
            "gradcheck",
            &cfg,
            json!({ "max_rel_error": r.max_rel_error, "checked": r.checked, "skipped_kinks": r.skipped_kinks, "ok": ok }),
        )?;
    }
    Ok(ok)
}

fn model_config(spec: &str) -> Result<(String, RunConfig)> {
    let path = Path::new(spec);
    if path.is_file() {
        let name = path
            .file_stem()
            .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
        return Ok((name, RunConfig::load(path)?));
    }
    let p = PRESETS
        .iter()
        .find(|p| p.key == spec || p.display.eq_ignore_ascii_case(spec))
        .ok_or_else(|| Error::Config(format!("{spec} is neither a config file nor a preset")))?;
    Ok((p.display.to_string(), RunConfig::preset(p.key)?))
}

fn ablate(config: &ConfigArgs, specs: &[String], data: Option<&Path>, out: &Path) -> Result<()> {
    let base = config.resolve()?;
    let models: Vec<(String, RunConfig)> = if specs.is_empty() {
        PRESETS
            .iter()
            .map(|p| {
                let cfg = p.apply(base.clone());
                cfg.validate().map(|()| (p.display.to_string(), cfg))
            })
            .collect::<Result<_>>()?
    } else {
        specs
            .iter()
            .map(|s| {
                let (name, cfg) = model_config(s)?;
                Ok((name, cfg.with_overrides(&config.overrides)?))
            })
            .collect::<Result<_>>()?
    };
    let corpus = match data {
        Some(p) => read_dataset(p)?,
        None => synth_corpus(&base.synth, base.ablation.corpus_size)?,
    };
    let ab = &base.ablation;
    let (train_set, holdout) = split_holdout(&corpus, ab.holdout_positives, ab.holdout_negatives);
    let (hp, hn) = counts(&holdout);
    log::info!("training on {} utterances, evaluating on {hp} positives and {hn} negatives", train_set.len());

    let mut entries = Vec::with_capacity(models.len());
    let mut runs = serde_json::Map::new();
    for (name, cfg) in &models {
        log::info!("training {name}");
        let (ck, summary) = train_into(cfg, &train_set, &out.join("models").join(name))?;
        runs.insert(name.clone(), json!({ "config": cfg, "train": summary }));
        entries.push(ModelEntry {
            name: name.clone(),
            checkpoint: Some(ck),
        });
    }
    let report = ablation_report(&holdout, &entries, &base.eval, ab)?;
    let written = report.write_to(out)?;
    print!("{}", report.to_markdown());
    println!("report written to {}", out.join("report.md").display());
    write_manifest(
        &out.join("manifest.json"),
        "ablate",
        &base,
        json!({ "models": runs, "holdout": { "positives": hp, "negatives": hn }, "files": written }),
    )
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            config,
            out,
            count,
            seed,
        } => synth(&config, &out, count, seed)?,
        Command::Frontend {
            config,
            out,
            keyword_end,
            wavs,
        } => frontend(&config, &out, keyword_end, &wavs)?,
        Command::Train {
            config,
            data,
            out,
            seed,
        } => train(&config, &data, &out, seed)?,
        Command::Eval {
            checkpoint,
            data,
            config,
            target_fa,
            suppression,
            tolerance,
            roc,
            manifest,
        } => eval(
            &checkpoint,
            &data,
            &config,
            target_fa,
            suppression,
            tolerance.as_deref(),
            roc.as_deref(),
            manifest.as_deref(),
        )?,
        Command::Gradcheck {
            config,
            utterances,
            init_scale,
            manifest,
        } => {
            if !gradcheck(&config, utterances, init_scale, manifest.as_deref())? {
                return Ok(ExitCode::from(4));
            }
        }
        Command::Ablate {
            config,
            configs,
            data,
            out,
        } => ablate(&config, &configs, data.as_deref(), &out)?,
        Command::Presets => {
            for p in PRESETS {
                println!(
                    "{:<16} {:<16} encoder {:<4} decoder {:<4}{}",
                    p.key,
                    p.display,
                    p.encoder.label(),
                    p.decoder.label(),
                    if p.two_stage { " two-stage" } else { "" }
                );
            }
        }
        Command::InitConfig { config } => println!("{}", config.resolve()?.to_json()),
    }
    Ok(ExitCode::SUCCESS)
}

fn threads(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SMP_KWS_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("SMP_KWS_THREADS={v} is not a thread count")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match threads(cli.threads) {
        Ok(Some(0)) => {
            eprintln!("error: thread count must be positive");
            return ExitCode::from(2);
        }
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

//! Mini-batch training of both heads under any [`LossSpec`], plus the
//! two-stage baseline (encoder CE first, then the decoder on a frozen
//! encoder).

mod adam;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::data::{augment, AugmentConfig, Utterance};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::losses::{LossBreakdown, LossSpec, Objective};
use crate::model::{forward_on_tape, input_tensor, load_params, Checkpoint, Head, ModelConfig, ModelParams};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Probe, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Every parameter uniform in `±init_scale`.
    Uniform,
    /// See [`ModelParams::init_glorot`].
    #[default]
    Glorot,
}

impl InitScheme {
    pub fn init(self, model: &ModelConfig, scale: f64, seed: u64) -> Result<ModelParams> {
        match self {
            InitScheme::Uniform => ModelParams::init_uniform(model, scale, seed),
            InitScheme::Glorot => ModelParams::init_glorot(model, seed),
        }
    }
}

/// The `train` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Optimizer steps; the two-stage baseline runs this many per stage.
    pub steps: usize,
    pub learning_rate: f64,
    /// Cosine decay from `learning_rate` at the first step to this value at
    /// the last; `None` keeps the rate constant.
    pub final_learning_rate: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub init: InitScheme,
    /// Half-width of the [`InitScheme::Uniform`] initialization.
    pub init_scale: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many steps (needs a checkpoint sink).
    pub checkpoint_interval: Option<usize>,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Train with [`baseline_two_stage_train`] instead of jointly.
    pub two_stage: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 2000,
            learning_rate: 0.005,
            final_learning_rate: None,
            adam: AdamConfig::default(),
            seed: 0,
            init: InitScheme::Glorot,
            init_scale: 0.05,
            clip_norm: Some(5.0),
            checkpoint_interval: None,
            augment: false,
            augmentation: AugmentConfig::default(),
            two_stage: false,
        }
    }
}

impl TrainSettings {
    /// Learning rate for step `step` of a stage.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.final_learning_rate {
            Some(f) if self.steps > 1 => {
                let p = step as f64 / (self.steps - 1) as f64;
                f + 0.5 * (self.learning_rate - f) * (1.0 + (std::f64::consts::PI * p).cos())
            }
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if matches!(self.final_learning_rate, Some(f) if !(f > 0.0 && f.is_finite())) {
            return Err(Error::config("final_learning_rate must be positive"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.checkpoint_interval == Some(0) {
            return Err(Error::config("checkpoint_interval must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossSpec,
    pub settings: TrainSettings,
}

/// Where periodic checkpoints go.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub frontend: FrontendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Batch-mean loss at the parameters before this step's update.
    pub loss: LossBreakdown,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn skipped_total(&self) -> usize {
        self.records.iter().map(|r| r.skipped).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,loss_E,loss_D,loss_pos,loss_neg,skipped\n");
        for r in &self.records {
            let l = &r.loss;
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step, l.total, l.loss_e, l.loss_d, l.loss_pos, l.loss_neg, r.skipped
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
}

/// Batch-mean loss and gradient over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
    pub counted: usize,
    pub skipped: usize,
}

/// Per-utterance tapes evaluated in parallel, reduced in input order so the
/// result does not depend on the worker count. Heads outside `trainable`
/// are constants and get a zero gradient.
pub fn loss_and_gradient(
    params: &ModelParams,
    batch: &[Utterance],
    obj: &Objective,
    trainable: &[Head],
) -> Result<BatchGradient> {
    let n = params.num_params();
    let parts: Vec<Option<(LossBreakdown, Vec<f64>)>> = batch
        .par_iter()
        .map(|u| {
            let mut tape = Tape::new();
            let vars = load_params(&mut tape, params, trainable);
            let input = tape.constant(input_tensor(&u.features));
            let out = forward_on_tape(&mut tape, params.config(), &vars, input)?;
            let Some(l) = obj.utterance_loss(&mut tape, out, u)? else {
                return Ok(None);
            };
            let g = tape.backward(l.total)?;
            let mut flat = Vec::with_capacity(n);
            for v in &vars {
                match g.get(*v) {
                    Some(x) => flat.extend_from_slice(x),
                    None => flat.extend(std::iter::repeat_n(0.0, tape.value(*v).len())),
                }
            }
            Ok(Some((obj.breakdown(&tape, &l), flat)))
        })
        .collect::<Result<_>>()?;

    let mut out = BatchGradient {
        loss: LossBreakdown::default(),
        grad: vec![0.0; n],
        counted: 0,
        skipped: 0,
    };
    for p in parts {
        match p {
            Some((l, g)) => {
                out.loss.add(&l);
                for (a, b) in out.grad.iter_mut().zip(&g) {
                    *a += b;
                }
                out.counted += 1;
            }
            None => out.skipped += 1,
        }
    }
    if out.counted > 0 {
        let c = 1.0 / out.counted as f64;
        out.loss = out.loss.scaled(c);
        for g in &mut out.grad {
            *g *= c;
        }
    }
    Ok(out)
}

fn clip(grad: &mut [f64], mask: &[bool], max_norm: f64) {
    let norm = grad
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(g, _)| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= c;
        }
    }
}

struct Stage<'a> {
    obj: Objective,
    trainable: &'a [Head],
    /// Distinguishes the RNG streams of the two baseline stages.
    index: u64,
    step_offset: usize,
}

fn run_stage(
    data: &[Utterance],
    settings: &TrainSettings,
    mut params: ModelParams,
    stage: Stage<'_>,
    sink: Option<&CheckpointSink>,
    report: &mut TrainReport,
) -> Result<ModelParams> {
    let mask: Vec<bool> = {
        let masks: Vec<Vec<bool>> = stage.trainable.iter().map(|h| params.head_mask(*h)).collect();
        (0..params.num_params()).map(|i| masks.iter().any(|m| m[i])).collect()
    };
    let mut flat = params.to_flat();
    let mut opt = Adam::new(settings.adam, settings.learning_rate, flat.len());
    let mut order_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    order_rng.set_stream(2 * stage.index);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    aug_rng.set_stream(2 * stage.index + 1);

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..settings.steps {
        let mut batch = Vec::with_capacity(settings.batch_size);
        while batch.len() < settings.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let u = &data[order[cursor]];
            cursor += 1;
            batch.push(if settings.augment {
                augment(u, &settings.augmentation, &mut aug_rng)?
            } else {
                u.clone()
            });
        }

        let mut bg = loss_and_gradient(&params, &batch, &stage.obj, stage.trainable)?;
        let global = stage.step_offset + step;
        if !bg.loss.total.is_finite() || bg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("non-finite loss or gradient at step {global}")));
        }
        report.records.push(StepRecord {
            step: global,
            loss: bg.loss,
            skipped: bg.skipped,
        });
        if let Some(c) = settings.clip_norm {
            clip(&mut bg.grad, &mask, c);
        }
        opt.set_learning_rate(settings.learning_rate_at(step));
        opt.step(&mut flat, &bg.grad, &mask);
        params.set_flat(&flat)?;

        if global % 100 == 0 {
            log::info!("step {global}: loss {:.5}", bg.loss.total);
        }
        if let (Some(every), Some(sink)) = (settings.checkpoint_interval, sink) {
            if (global + 1) % every == 0 {
                let path = sink.dir.join(format!("step_{:06}.smpw", global + 1));
                Checkpoint {
                    frontend: sink.frontend.clone(),
                    params: params.clone(),
                }
                .save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    Ok(params)
}

fn prepare(data: &[Utterance], cfg: &TrainConfig, spec: &LossSpec) -> Result<()> {
    cfg.settings.validate()?;
    cfg.model.validate()?;
    spec.check_dataset(data, cfg.model.num_units(), cfg.model.input_dim)?;
    if data.is_empty() && cfg.settings.steps > 0 {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    Ok(())
}

/// Joint training of encoder and decoder under `cfg.loss`.
pub fn train(data: &[Utterance], cfg: &TrainConfig, sink: Option<&CheckpointSink>) -> Result<TrainOutcome> {
    let obj = cfg.loss.prepare()?;
    prepare(data, cfg, &cfg.loss)?;
    let init = cfg.settings.init.init(&cfg.model, cfg.settings.init_scale, cfg.settings.seed)?;
    let mut report = TrainReport::default();
    let stage = Stage {
        obj,
        trainable: &[Head::Encoder, Head::Decoder],
        index: 0,
        step_offset: 0,
    };
    let params = run_stage(data, &cfg.settings, init, stage, sink, &mut report)?;
    Ok(TrainOutcome { params, report })
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    /// Parameters after encoder-only CE training.
    pub stage1: ModelParams,
    pub params: ModelParams,
    pub report: TrainReport,
}

/// Stage 1 fits the encoder with frame CE; stage 2 fits the decoder with
/// `cfg.loss.decoder` while the encoder is frozen. Each stage runs
/// `cfg.settings.steps` steps; report steps continue across stages.
pub fn baseline_two_stage_train(
    data: &[Utterance],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TwoStageOutcome> {
    let stage1_obj = cfg.loss.encoder_ce_only()?;
    prepare(data, cfg, stage1_obj.spec())?;
    let init = cfg.settings.init.init(&cfg.model, cfg.settings.init_scale, cfg.settings.seed)?;
    let mut report = TrainReport::default();
    let stage1 = run_stage(
        data,
        &cfg.settings,
        init,
        Stage {
            obj: stage1_obj,
            trainable: &[Head::Encoder],
            index: 0,
            step_offset: 0,
        },
        sink,
        &mut report,
    )?;
    let decoder_spec = LossSpec {
        encoder: crate::losses::HeadLoss::None,
        ..cfg.loss.clone()
    };
    let params = run_stage(
        data,
        &cfg.settings,
        stage1.clone(),
        Stage {
            obj: decoder_spec.prepare()?,
            trainable: &[Head::Decoder],
            index: 1,
            step_offset: cfg.settings.steps,
        },
        sink,
        &mut report,
    )?;
    Ok(TwoStageOutcome { stage1, params, report })
}

/// Batch-mean loss, gradient over all parameters, and the combined branch
/// signature of every utterance tape.
pub fn loss_probe(params: &ModelParams, batch: &[Utterance], obj: &Objective) -> Result<Probe> {
    let all = [Head::Encoder, Head::Decoder];
    let mut value = 0.0;
    let mut grad = vec![0.0; params.num_params()];
    let mut signature = 0u64;
    let mut counted = 0usize;
    for u in batch {
        let mut tape = Tape::new();
        let vars = load_params(&mut tape, params, &all);
        let input = tape.constant(input_tensor(&u.features));
        let out = forward_on_tape(&mut tape, params.config(), &vars, input)?;
        let Some(l) = obj.utterance_loss(&mut tape, out, u)? else {
            continue;
        };
        let g = tape.backward(l.total)?;
        let mut i = 0;
        for v in &vars {
            let len = tape.value(*v).len();
            if let Some(x) = g.get(*v) {
                for (a, b) in grad[i..i + len].iter_mut().zip(x) {
                    *a += b;
                }
            }
            i += len;
        }
        value += tape.value(l.total).data()[0];
        signature = signature.rotate_left(17) ^ tape.branch_signature();
        counted += 1;
    }
    if counted > 0 {
        let c = 1.0 / counted as f64;
        value *= c;
        grad.iter_mut().for_each(|g| *g *= c);
    }
    Ok(Probe { value, grad, signature })
}

/// Finite-difference check of [`loss_probe`] around `params`.
pub fn model_grad_check(
    params: &ModelParams,
    batch: &[Utterance],
    obj: &Objective,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let f = |flat: &[f64]| {
        let mut p = params.clone();
        p.set_flat(flat)?;
        loss_probe(&p, batch, obj)
    };
    grad_check(f, &params.to_flat(), cfg)
}

/// [`train`] or [`baseline_two_stage_train`], as selected by
/// `cfg.settings.two_stage`.
pub fn run_training(data: &[Utterance], cfg: &TrainConfig, sink: Option<&CheckpointSink>) -> Result<TrainOutcome> {
    if cfg.settings.two_stage {
        let o = baseline_two_stage_train(data, cfg, sink)?;
        Ok(TrainOutcome {
            params: o.params,
            report: o.report,
        })
    } else {
        train(data, cfg, sink)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthConfig};
    use crate::losses::HeadLoss;

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                input_dim: 10,
                ..Default::default()
            },
            loss: LossSpec::default(),
            settings: TrainSettings {
                steps,
                batch_size: 4,
                ..Default::default()
            },
        }
    }

    fn corpus(n: usize) -> Vec<Utterance> {
        synth_corpus(&SynthConfig::default(), n).unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = small_cfg(0);
        let out = train(&corpus(4), &cfg, None).unwrap();
        let init = ModelParams::init_glorot(&cfg.model, 0).unwrap();
        assert_eq!(out.params, init);
        assert!(out.report.records.is_empty());
    }

    #[test]
    fn deterministic_and_decomposes() {
        let data = corpus(12);
        let cfg = TrainConfig {
            settings: TrainSettings {
                augment: true,
                ..small_cfg(5).settings
            },
            ..small_cfg(5)
        };
        let a = train(&data, &cfg, None).unwrap();
        let b = train(&data, &cfg, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.report, b.report);
        for r in &a.report.records {
            let l = r.loss;
            assert!((l.total - (l.loss_e + l.loss_d)).abs() < 1e-9);
            assert!((l.total - (l.loss_pos + l.loss_neg)).abs() < 1e-9);
        }
        let csv = a.report.to_csv();
        assert!(csv.starts_with("step,total,loss_E,loss_D,loss_pos,loss_neg"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn alpha_zero_leaves_encoder_loss_at_zero() {
        let cfg = TrainConfig {
            loss: LossSpec {
                encoder: HeadLoss::None,
                alpha: 0.0,
                ..Default::default()
            },
            ..small_cfg(4)
        };
        let out = train(&corpus(8), &cfg, None).unwrap();
        assert!(out.report.records.iter().all(|r| r.loss.loss_e == 0.0));
    }

    #[test]
    fn two_stage_freezes_encoder() {
        let data = corpus(8);
        let cfg = TrainConfig {
            loss: LossSpec {
                encoder: HeadLoss::Ce,
                decoder: HeadLoss::Ce,
                ..Default::default()
            },
            ..small_cfg(3)
        };
        let out = baseline_two_stage_train(&data, &cfg, None).unwrap();
        assert_eq!(out.params.head(Head::Encoder), out.stage1.head(Head::Encoder));
        assert_ne!(out.params.head(Head::Decoder), out.stage1.head(Head::Decoder));
        assert_eq!(out.report.records.len(), 6);

        let obj = LossSpec {
            encoder: HeadLoss::None,
            ..cfg.loss.clone()
        }
        .prepare()
        .unwrap();
        let g = loss_and_gradient(&out.params, &data, &obj, &[Head::Decoder]).unwrap();
        let mask = out.params.head_mask(Head::Encoder);
        assert!(g.grad.iter().zip(&mask).filter(|(_, m)| **m).all(|(g, _)| *g == 0.0));
    }

    #[test]
    fn nan_input_aborts_with_step() {
        let mut data = corpus(4);
        for u in &mut data {
            u.features.values_mut()[0] = f64::NAN;
        }
        match train(&data, &small_cfg(3), None) {
            Err(Error::Numeric(m)) => assert!(m.contains("step 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_annotation_lists_utterances() {
        let mut data = corpus(4);
        data[2].features = crate::frontend::FeatureSequence::new(3, 7, vec![0.0; 21]).unwrap();
        match train(&data, &small_cfg(1), None) {
            Err(Error::Data(m)) => assert!(m.contains("2:"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0, 100.0];
        clip(&mut g, &[true, true, false], 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn periodic_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            settings: TrainSettings {
                checkpoint_interval: Some(2),
                ..small_cfg(5).settings
            },
            ..small_cfg(5)
        };
        let sink = CheckpointSink {
            dir: dir.path().to_path_buf(),
            frontend: FrontendConfig::default(),
        };
        let out = train(&corpus(6), &cfg, Some(&sink)).unwrap();
        assert_eq!(out.report.checkpoints.len(), 2);
        let ck = Checkpoint::load(&out.report.checkpoints[1]).unwrap();
        assert_eq!(ck.params.config(), &cfg.model);
    }

    #[test]
    fn manual_gradient_step_equals_one_optimizer_step() {
        let data = corpus(4);
        let cfg = TrainConfig {
            settings: TrainSettings {
                batch_size: 4,
                clip_norm: None,
                ..small_cfg(1).settings
            },
            ..small_cfg(1)
        };
        let out = train(&data, &cfg, None).unwrap();
        let init = ModelParams::init_glorot(&cfg.model, 0).unwrap();
        let obj = cfg.loss.prepare().unwrap();
        // one epoch of 4 covers the whole corpus; the mean is order-independent up to rounding
        let g = loss_and_gradient(&init, &data, &obj, &[Head::Encoder, Head::Decoder]).unwrap();
        let lr = cfg.settings.learning_rate;
        for ((p, q), gi) in out.params.to_flat().iter().zip(init.to_flat()).zip(&g.grad) {
            let expect = q - lr * gi / (gi.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-9, "{p} vs {expect}");
        }
    }

    #[test]
    fn probe_matches_batch_gradient_and_passes_check() {
        let data = corpus(4);
        let cfg = small_cfg(1);
        let params = ModelParams::init_uniform(&cfg.model, 0.3, 5).unwrap();
        let obj = cfg.loss.prepare().unwrap();
        let p = loss_probe(&params, &data, &obj).unwrap();
        let g = loss_and_gradient(&params, &data, &obj, &[Head::Encoder, Head::Decoder]).unwrap();
        assert!((p.value - g.loss.total).abs() < 1e-12);
        for (a, b) in p.grad.iter().zip(&g.grad) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = model_grad_check(&params, &data, &obj, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = TrainSettings {
            steps: 11,
            learning_rate: 0.01,
            final_learning_rate: Some(0.001),
            ..Default::default()
        };
        assert!((s.learning_rate_at(0) - 0.01).abs() < 1e-15);
        assert!((s.learning_rate_at(5) - 0.0055).abs() < 1e-15);
        assert!((s.learning_rate_at(10) - 0.001).abs() < 1e-15);
        assert_eq!(TrainSettings::default().learning_rate_at(7), 0.005);
        assert!(TrainSettings { final_learning_rate: Some(0.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn init_schemes() {
        let m = ModelConfig::default();
        let u = InitScheme::Uniform.init(&m, 0.05, 3).unwrap();
        assert!(u.to_flat().iter().all(|v| v.abs() < 0.05));
        let g = InitScheme::Glorot.init(&m, 0.05, 3).unwrap();
        assert_eq!(g, ModelParams::init_glorot(&m, 3).unwrap());
        let out = &g.encoder.output;
        let bound = (6.0f64 / (m.encoder.last().unwrap().output_dim() + m.encoder_outputs) as f64).sqrt();
        assert!(out.weight.data().iter().all(|v| v.abs() < bound));
        assert!(out.bias.data().iter().all(|&v| v == 0.0));
    }
}

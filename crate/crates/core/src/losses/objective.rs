use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::{Kernel, KernelSpec};
use super::terms::{ce_loss_split, negative_loss, pooled_positive_loss, zero};
use super::window::{try_decoder_window, try_encoder_windows, WindowSpec};
use crate::data::{Annotation, Utterance};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, input_tensor, load_params, HeadOutputs, ModelParams};
use crate::numerics::{Tape, Var};

/// Objective applied to one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadLoss {
    /// Frame cross entropy.
    Ce,
    /// Max pooling without smoothing.
    Mp,
    /// Smoothed max pooling.
    Smp,
    None,
}

impl HeadLoss {
    pub fn label(self) -> &'static str {
        match self {
            HeadLoss::Ce => "CE",
            HeadLoss::Mp => "MP",
            HeadLoss::Smp => "SMP",
            HeadLoss::None => "NA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub encoder: HeadLoss,
    pub decoder: HeadLoss,
    pub encoder_kernel: KernelSpec,
    pub decoder_kernel: KernelSpec,
    pub windows: WindowSpec,
    /// Weight of the encoder loss in the total.
    pub alpha: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            encoder: HeadLoss::Smp,
            decoder: HeadLoss::Smp,
            encoder_kernel: KernelSpec { sigma: 4.0, length: 9 },
            decoder_kernel: KernelSpec { sigma: 9.0, length: 21 },
            windows: WindowSpec::default(),
            alpha: 1.0,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if self.decoder == HeadLoss::None {
            return Err(Error::config("the decoder needs a loss"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha {} must be finite and non-negative", self.alpha)));
        }
        self.windows.validate()?;
        self.encoder_kernel.build()?;
        self.decoder_kernel.build()?;
        Ok(())
    }

    /// Validates and builds the smoothing kernels once.
    pub fn prepare(&self) -> Result<Objective> {
        self.validate()?;
        Ok(Objective {
            spec: self.clone(),
            encoder_kernel: self.encoder_kernel.build()?,
            decoder_kernel: self.decoder_kernel.build()?,
            decoder_active: true,
        })
    }

    /// Encoder frame CE alone, the first stage of the two-stage baseline.
    pub fn encoder_ce_only(&self) -> Result<Objective> {
        let spec = LossSpec {
            encoder: HeadLoss::Ce,
            alpha: 1.0,
            ..self.clone()
        };
        let mut obj = spec.prepare()?;
        obj.decoder_active = false;
        Ok(obj)
    }

    /// Whether the encoder contributes to the total at all.
    pub fn encoder_active(&self) -> bool {
        self.encoder != HeadLoss::None && self.alpha != 0.0
    }

    /// Lists utterances that cannot be scored under this spec.
    pub fn check_dataset(&self, data: &[Utterance], num_units: usize, input_dim: usize) -> Result<()> {
        let needs_labels = self.encoder_active() && self.encoder == HeadLoss::Ce;
        let mut bad = Vec::new();
        for u in data {
            let problem = if u.features.dim() != input_dim {
                Some(format!("feature dim {} (model expects {input_dim})", u.features.dim()))
            } else if let Err(e) = u.validate(Some(num_units)) {
                Some(e.to_string())
            } else if needs_labels && u.annotation.is_positive() && u.annotation.labels().is_none() {
                Some("encoder CE needs frame labels".to_string())
            } else {
                None
            };
            if let Some(p) = problem {
                bad.push(format!("{}: {p}", u.id));
            }
        }
        if bad.is_empty() {
            return Ok(());
        }
        let shown = bad.len().min(10);
        Err(Error::data(format!(
            "{} utterance(s) do not match the loss spec: {}{}",
            bad.len(),
            bad[..shown].join("; "),
            if bad.len() > shown { "; ..." } else { "" }
        )))
    }
}

/// A [`LossSpec`] with its kernels built.
#[derive(Debug, Clone)]
pub struct Objective {
    spec: LossSpec,
    encoder_kernel: Kernel,
    decoder_kernel: Kernel,
    decoder_active: bool,
}

/// Scalar loss components of one head on the tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadTerms {
    pub pos: Var,
    pub neg: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct UtteranceLoss {
    pub total: Var,
    pub encoder: HeadTerms,
    pub decoder: HeadTerms,
}

/// Plain-number view of the loss, `total = α·loss_e + loss_d = loss_pos + loss_neg`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub loss_e: f64,
    pub loss_d: f64,
    pub loss_pos: f64,
    pub loss_neg: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.loss_e += o.loss_e;
        self.loss_d += o.loss_d;
        self.loss_pos += o.loss_pos;
        self.loss_neg += o.loss_neg;
    }

    pub fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * c,
            loss_e: self.loss_e * c,
            loss_d: self.loss_d * c,
            loss_pos: self.loss_pos * c,
            loss_neg: self.loss_neg * c,
        }
    }
}

impl Objective {
    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    fn kernel(&self, mode: HeadLoss, encoder: bool) -> Option<&Kernel> {
        match (mode, encoder) {
            (HeadLoss::Smp, true) => Some(&self.encoder_kernel),
            (HeadLoss::Smp, false) => Some(&self.decoder_kernel),
            _ => None,
        }
    }

    /// Terms of one head, or `None` when a pooling window is empty after
    /// clamping and the utterance has to be skipped.
    fn head_terms(&self, tape: &mut Tape, y: Var, encoder: bool, u: &Utterance) -> Result<Option<HeadTerms>> {
        let mode = if encoder { self.spec.encoder } else { self.spec.decoder };
        let (frames, classes) = tape.value(y).dims2()?;
        if frames != u.num_frames() {
            return Err(Error::shape(format!("{frames} posterior frames for {} input frames", u.num_frames())));
        }
        let end = match &u.annotation {
            Annotation::Positive { keyword_end, .. } => {
                if *keyword_end >= frames {
                    return Err(Error::data(format!("utterance {}: keyword end {keyword_end} outside {frames} frames", u.id)));
                }
                Some(*keyword_end)
            }
            Annotation::Negative { .. } => None,
        };
        let windows = match (end, encoder) {
            (None, _) => Some(Vec::new()),
            (Some(e), true) => try_encoder_windows(e, &self.spec.windows, classes - 1, frames),
            (Some(e), false) => try_decoder_window(e, &self.spec.windows, frames).map(|w| vec![w]),
        };
        let needs_windows = mode != HeadLoss::None && !(mode == HeadLoss::Ce && encoder);
        let windows = match windows {
            Some(w) => w,
            None if needs_windows => return Ok(None),
            None => Vec::new(),
        };

        let terms = match mode {
            HeadLoss::None => self.zero_terms(tape),
            HeadLoss::Ce => {
                let labels: Vec<u16> = if encoder {
                    match u.annotation.labels() {
                        Some(l) => l.to_vec(),
                        None if end.is_none() => vec![0; frames],
                        None => return Err(Error::data(format!("utterance {}: encoder CE needs frame labels", u.id))),
                    }
                } else {
                    (0..frames).map(|t| u16::from(windows.iter().any(|w| w.contains(t)))).collect()
                };
                let (pos, neg) = ce_loss_split(tape, y, &labels)
                    .map_err(|e| Error::data(format!("utterance {}: {e}", u.id)))?;
                HeadTerms { pos, neg }
            }
            HeadLoss::Mp | HeadLoss::Smp => {
                let pooled = pooled_positive_loss(tape, y, &windows, self.kernel(mode, encoder))?;
                let neg = negative_loss(tape, y, &windows, 0)?;
                HeadTerms { pos: pooled.loss, neg }
            }
        };
        Ok(Some(terms))
    }

    fn zero_terms(&self, tape: &mut Tape) -> HeadTerms {
        let z = zero(tape);
        HeadTerms { pos: z, neg: z }
    }

    /// Records the combined loss of one utterance given both heads'
    /// posteriors. `None` means the utterance was skipped.
    pub fn utterance_loss(&self, tape: &mut Tape, out: HeadOutputs, u: &Utterance) -> Result<Option<UtteranceLoss>> {
        let encoder = if self.spec.encoder_active() {
            match self.head_terms(tape, out.encoder, true, u)? {
                Some(t) => t,
                None => return Ok(None),
            }
        } else {
            self.zero_terms(tape)
        };
        if !self.decoder_active {
            let decoder = self.zero_terms(tape);
            let total = tape.add(encoder.pos, encoder.neg)?;
            return Ok(Some(UtteranceLoss { total, encoder, decoder }));
        }
        let Some(decoder) = self.head_terms(tape, out.decoder, false, u)? else {
            return Ok(None);
        };
        let d = tape.add(decoder.pos, decoder.neg)?;
        let total = if self.spec.encoder_active() {
            let e = tape.add(encoder.pos, encoder.neg)?;
            let e = tape.scale(e, self.spec.alpha);
            tape.add(e, d)?
        } else {
            d
        };
        Ok(Some(UtteranceLoss { total, encoder, decoder }))
    }

    pub fn breakdown(&self, tape: &Tape, l: &UtteranceLoss) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        let a = if self.spec.encoder_active() { self.spec.alpha } else { 0.0 };
        let (ep, en, dp, dn) = (v(l.encoder.pos), v(l.encoder.neg), v(l.decoder.pos), v(l.decoder.neg));
        LossBreakdown {
            total: v(l.total),
            loss_e: ep + en,
            loss_d: dp + dn,
            loss_pos: a * ep + dp,
            loss_neg: a * en + dn,
        }
    }
}

/// Batch-mean loss without gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BatchLoss {
    pub mean: LossBreakdown,
    pub counted: usize,
    pub skipped: usize,
}

/// Forward pass plus loss for one utterance, values only.
pub fn utterance_breakdown(params: &ModelParams, obj: &Objective, u: &Utterance) -> Result<Option<LossBreakdown>> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, &[]);
    let input = tape.constant(input_tensor(&u.features));
    let out = forward_on_tape(&mut tape, params.config(), &vars, input)?;
    Ok(obj.utterance_loss(&mut tape, out, u)?.map(|l| obj.breakdown(&tape, &l)))
}

/// `α·Loss^E + Loss^D` averaged over the utterances that could be scored.
pub fn total_loss(batch: &[Utterance], params: &ModelParams, spec: &LossSpec) -> Result<BatchLoss> {
    let obj = spec.prepare()?;
    let parts: Vec<Option<LossBreakdown>> = batch
        .par_iter()
        .map(|u| utterance_breakdown(params, &obj, u))
        .collect::<Result<_>>()?;
    let mut out = BatchLoss::default();
    for p in parts {
        match p {
            Some(b) => {
                out.mean.add(&b);
                out.counted += 1;
            }
            None => out.skipped += 1,
        }
    }
    if out.counted > 0 {
        out.mean = out.mean.scaled(1.0 / out.counted as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthConfig};
    use crate::frontend::FeatureSequence;
    use crate::model::ModelConfig;
    use crate::numerics::{grad_check, GradCheckConfig, Probe, Tensor};

    fn positive(frames: usize, end: usize, labels: Option<Vec<u16>>) -> Utterance {
        Utterance {
            id: 0,
            features: FeatureSequence::new(frames, 1, vec![0.0; frames]).unwrap(),
            annotation: Annotation::Positive {
                keyword_end: end,
                keyword_start: None,
                labels,
            },
        }
    }

    /// Posteriors equal to the targets each head is trained towards.
    fn ideal(tape: &mut Tape, spec: &LossSpec, u: &Utterance, k: usize) -> HeadOutputs {
        let n = u.num_frames();
        let end = u.annotation.keyword_end().unwrap();
        let mut enc = vec![vec![0.0; k + 1]; n];
        let mut dec = vec![vec![1.0, 0.0]; n];
        for (t, row) in enc.iter_mut().enumerate() {
            row[0] = 1.0;
            for w in try_encoder_windows(end, &spec.windows, k, n).unwrap() {
                if w.contains(t) {
                    row[0] = 0.0;
                    row[w.dim] = 1.0;
                }
            }
        }
        let w = try_decoder_window(end, &spec.windows, n).unwrap();
        for t in w.start..w.end {
            dec[t] = vec![0.0, 1.0];
        }
        HeadOutputs {
            encoder: tape.constant(Tensor::from_rows(&enc).unwrap()),
            decoder: tape.constant(Tensor::from_rows(&dec).unwrap()),
        }
    }

    #[test]
    fn perfect_heads_give_zero() {
        let u = positive(300, 150, None);
        for (e, d) in [(HeadLoss::Smp, HeadLoss::Smp), (HeadLoss::Mp, HeadLoss::Mp), (HeadLoss::Mp, HeadLoss::Ce)] {
            let spec = LossSpec {
                encoder: e,
                decoder: d,
                ..Default::default()
            };
            let obj = spec.prepare().unwrap();
            let mut tape = Tape::new();
            let out = ideal(&mut tape, &spec, &u, 4);
            let l = obj.utterance_loss(&mut tape, out, &u).unwrap().unwrap();
            assert!(obj.breakdown(&tape, &l).total.abs() < 1e-12);
        }
    }

    fn random_outputs(tape: &mut Tape, n: usize, k: usize, seed: u64) -> HeadOutputs {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut dist = |c: usize| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let r: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let (e, d) = (dist(k + 1), dist(2));
        HeadOutputs {
            encoder: tape.constant(e),
            decoder: tape.constant(d),
        }
    }

    #[test]
    fn alpha_zero_is_decoder_alone() {
        let u = positive(200, 120, None);
        let full = LossSpec::default().prepare().unwrap();
        let na = LossSpec {
            alpha: 0.0,
            ..Default::default()
        }
        .prepare()
        .unwrap();
        let mut tape = Tape::new();
        let out = random_outputs(&mut tape, 200, 4, 3);
        let a = full.utterance_loss(&mut tape, out, &u).unwrap().unwrap();
        let b = na.utterance_loss(&mut tape, out, &u).unwrap().unwrap();
        let (a, b) = (full.breakdown(&tape, &a), na.breakdown(&tape, &b));
        assert_eq!(b.total, a.loss_d);
        assert_eq!(b.loss_e, 0.0);
        assert!((a.total - (a.loss_e + a.loss_d)).abs() < 1e-12);
        assert!((a.total - (a.loss_pos + a.loss_neg)).abs() < 1e-12);
    }

    #[test]
    fn empty_window_skips_and_missing_labels_error() {
        let spec = LossSpec {
            windows: WindowSpec {
                decoder_offset: -200,
                ..Default::default()
            },
            ..Default::default()
        };
        let obj = spec.prepare().unwrap();
        let u = positive(200, 100, None);
        let mut tape = Tape::new();
        let out = random_outputs(&mut tape, 200, 4, 1);
        assert!(obj.utterance_loss(&mut tape, out, &u).unwrap().is_none());

        let ce = LossSpec {
            encoder: HeadLoss::Ce,
            ..Default::default()
        }
        .prepare()
        .unwrap();
        assert!(matches!(ce.utterance_loss(&mut tape, out, &u), Err(Error::Data(_))));
        assert!(ce.spec().check_dataset(&[u.clone()], 4, 1).is_err());
        let labelled = positive(200, 100, Some(vec![0; 200]));
        ce.spec().check_dataset(&[labelled], 4, 1).unwrap();
    }

    #[test]
    fn decoder_none_rejected() {
        let spec = LossSpec {
            decoder: HeadLoss::None,
            ..Default::default()
        };
        assert!(matches!(spec.prepare(), Err(Error::Config(_))));
        let bad_kernel = LossSpec {
            decoder_kernel: KernelSpec { sigma: 9.0, length: 20 },
            ..Default::default()
        };
        assert!(matches!(bad_kernel.prepare(), Err(Error::Config(_))));
    }

    #[test]
    fn batch_mean_and_json_round_trip() {
        let data = synth_corpus(&SynthConfig::default(), 6).unwrap();
        let cfg = ModelConfig {
            input_dim: 10,
            ..Default::default()
        };
        let params = ModelParams::init_uniform(&cfg, 0.1, 4).unwrap();
        let spec = LossSpec::default();
        let b = total_loss(&data, &params, &spec).unwrap();
        assert_eq!(b.counted + b.skipped, 6);
        let obj = spec.prepare().unwrap();
        let sum: f64 = data
            .iter()
            .map(|u| utterance_breakdown(&params, &obj, u).unwrap().unwrap().total)
            .sum();
        assert!((b.mean.total - sum / 6.0).abs() < 1e-12);

        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<LossSpec>(&json).unwrap(), spec);
        assert!(serde_json::from_str::<LossSpec>(r#"{"alfa": 1}"#).is_err());
    }

    #[test]
    fn smp_loss_gradients_through_model() {
        let data = synth_corpus(&SynthConfig::default(), 4).unwrap();
        let u = data.iter().find(|u| u.annotation.is_positive()).unwrap();
        let cfg = ModelConfig {
            input_dim: 10,
            ..Default::default()
        };
        let params = ModelParams::init_uniform(&cfg, 0.3, 9).unwrap();
        let obj = LossSpec::default().prepare().unwrap();
        let f = |flat: &[f64]| -> Result<Probe> {
            let mut p = params.clone();
            p.set_flat(flat)?;
            let mut tape = Tape::new();
            let vars = load_params(&mut tape, &p, &[crate::model::Head::Encoder, crate::model::Head::Decoder]);
            let input = tape.constant(input_tensor(&u.features));
            let out = forward_on_tape(&mut tape, &cfg, &vars, input)?;
            let l = obj.utterance_loss(&mut tape, out, u)?.unwrap();
            let g = tape.backward(l.total)?;
            let grad = vars.iter().flat_map(|v| g.get(*v).unwrap().to_vec()).collect();
            Ok(Probe {
                value: tape.value(l.total).data()[0],
                grad,
                signature: tape.branch_signature(),
            })
        };
        let r = grad_check(f, &params.to_flat(), &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

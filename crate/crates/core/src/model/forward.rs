//! Whole-utterance forward pass recorded on a tape.

use super::config::{Activation, LayerConfig, ModelConfig};
use super::params::{Head, ModelParams};
use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::numerics::{Tape, Tensor, Var};

/// Posterior matrices of both heads on the tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `frames × (K + 1)`
    pub encoder: Var,
    /// `frames × 2`
    pub decoder: Var,
}

/// Puts every parameter tensor on the tape in canonical order. Tensors of
/// heads not listed in `trainable` are recorded as constants.
pub fn load_params(tape: &mut Tape, params: &ModelParams, trainable: &[Head]) -> Vec<Var> {
    params
        .named_tensors()
        .into_iter()
        .map(|(_, head, t)| {
            if trainable.contains(&head) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

fn head_forward(
    tape: &mut Tape,
    layers: &[LayerConfig],
    vars: &mut impl Iterator<Item = Var>,
    mut h: Var,
) -> Result<Var> {
    let mut next = || vars.next().ok_or_else(|| Error::shape("parameter list too short"));
    for layer in layers {
        match layer {
            LayerConfig::Svdf(s) => {
                let (feature, time, bias) = (next()?, next()?, next()?);
                let a = tape.matmul(h, feature)?;
                let m = tape.svdf_time(a, time, s.rank)?;
                let z = tape.add_bias(m, bias)?;
                h = match s.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Linear => z,
                };
            }
            LayerConfig::Bottleneck { .. } => {
                let w = next()?;
                h = tape.matmul(h, w)?;
            }
        }
    }
    let (w, b) = (next()?, next()?);
    let logits = tape.matmul(h, w)?;
    let logits = tape.add_bias(logits, b)?;
    tape.softmax_rows(logits)
}

/// Runs encoder then decoder over a stacked input matrix already on the tape.
/// The decoder consumes the encoder's softmax posteriors.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    param_vars: &[Var],
    input: Var,
) -> Result<HeadOutputs> {
    let cols = tape.value(input).cols();
    if cols != config.input_dim {
        return Err(Error::shape(format!(
            "input dim {cols} but model expects {}",
            config.input_dim
        )));
    }
    let mut it = param_vars.iter().copied();
    let encoder = head_forward(tape, &config.encoder, &mut it, input)?;
    let decoder = head_forward(tape, &config.decoder, &mut it, encoder)?;
    if it.next().is_some() {
        return Err(Error::shape("parameter list too long"));
    }
    Ok(HeadOutputs { encoder, decoder })
}

pub fn input_tensor(x: &FeatureSequence) -> Tensor {
    Tensor::new(vec![x.num_frames(), x.dim()], x.values().to_vec()).expect("sized")
}

/// Batch forward without gradients: `(Y^E, Y^D)`.
pub fn batch_forward(params: &ModelParams, x: &FeatureSequence) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, &[]);
    let input = tape.constant(input_tensor(x));
    let out = forward_on_tape(&mut tape, params.config(), &vars, input)?;
    Ok((tape.value(out.encoder).clone(), tape.value(out.decoder).clone()))
}

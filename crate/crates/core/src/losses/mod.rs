//! Training objectives: frame cross entropy, (smoothed) max pooling over
//! windows anchored at the keyword end, and the weighted encoder/decoder sum.

mod kernel;
mod objective;
mod terms;
mod window;

pub use kernel::{make_gaussian_kernel, Kernel, KernelSpec};
pub use objective::{
    total_loss, utterance_breakdown, BatchLoss, HeadLoss, HeadTerms, LossBreakdown, LossSpec, Objective,
    UtteranceLoss,
};
pub use terms::{ce_loss, ce_loss_split, negative_loss, pooled_positive_loss, smooth_posteriors, PooledLoss};
pub use window::{complement_frames, decoder_windows, encoder_windows, PoolingWindow, WindowSpec};

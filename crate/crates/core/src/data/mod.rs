//! Annotated utterances, the synthetic keyword corpus, augmentation and the
//! dataset file format.

mod augment;
mod io;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{synth_corpus, SynthConfig};
pub use io::{read_dataset_from, write_dataset_to};

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;

/// Ground truth for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Positive {
        /// One past the last keyword frame.
        keyword_end: usize,
        keyword_start: Option<usize>,
        /// Per-frame sound-unit labels in `0..=K`, 0 = background.
        labels: Option<Vec<u16>>,
    },
    Negative {
        labels: Option<Vec<u16>>,
    },
}

impl Annotation {
    pub fn is_positive(&self) -> bool {
        matches!(self, Annotation::Positive { .. })
    }

    pub fn keyword_end(&self) -> Option<usize> {
        match self {
            Annotation::Positive { keyword_end, .. } => Some(*keyword_end),
            Annotation::Negative { .. } => None,
        }
    }

    pub fn labels(&self) -> Option<&[u16]> {
        match self {
            Annotation::Positive { labels, .. } | Annotation::Negative { labels } => labels.as_deref(),
        }
    }

    pub(crate) fn labels_mut(&mut self) -> &mut Option<Vec<u16>> {
        match self {
            Annotation::Positive { labels, .. } | Annotation::Negative { labels } => labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: u32,
    pub features: FeatureSequence,
    pub annotation: Annotation,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.num_frames()
    }

    /// Checks the annotation against the frame count and, when given, the
    /// number of sound units `K`.
    pub fn validate(&self, num_units: Option<usize>) -> Result<()> {
        let n = self.num_frames();
        if let Some(end) = self.annotation.keyword_end() {
            if end >= n {
                return Err(Error::data(format!(
                    "utterance {}: keyword end {end} outside {n} frames",
                    self.id
                )));
            }
        }
        if let Some(labels) = self.annotation.labels() {
            if labels.len() != n {
                return Err(Error::data(format!(
                    "utterance {}: {} labels for {n} frames",
                    self.id,
                    labels.len()
                )));
            }
            if let Some(k) = num_units {
                if let Some(bad) = labels.iter().find(|&&l| usize::from(l) > k) {
                    return Err(Error::data(format!(
                        "utterance {}: label {bad} exceeds K = {k}",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic split: the last `holdout` utterances of each kind go to the
/// second set.
pub fn split_holdout(data: &[Utterance], holdout_pos: usize, holdout_neg: usize) -> (Vec<Utterance>, Vec<Utterance>) {
    let pos: Vec<usize> = (0..data.len()).filter(|&i| data[i].annotation.is_positive()).collect();
    let neg: Vec<usize> = (0..data.len()).filter(|&i| !data[i].annotation.is_positive()).collect();
    let mut held = vec![false; data.len()];
    for &i in pos.iter().rev().take(holdout_pos).chain(neg.iter().rev().take(holdout_neg)) {
        held[i] = true;
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (u, h) in data.iter().zip(held) {
        if h { b.push(u.clone()) } else { a.push(u.clone()) }
    }
    (a, b)
}

/// Replaces each utterance's features with context-stacked frames (see
/// [`crate::frontend::stack_frames`]); annotations are unchanged.
pub fn stack_context(data: &[Utterance], left: usize, right: usize) -> Vec<Utterance> {
    data.iter()
        .map(|u| Utterance {
            id: u.id,
            features: crate::frontend::stack_frames(&u.features, left, right),
            annotation: u.annotation.clone(),
        })
        .collect()
}

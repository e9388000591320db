//! Masked-token transformers for the top and bottom token sequences.

mod model;
mod train;

pub use model::{Level, MaskedTransformer, TransformerConfig};
pub use train::{
    conditional_augmentation, evaluate_level, train_level, LevelDataset, LossRow, TrainConfig, TrainReport,
};

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Tape, Var};

/// Id layout shared by the models: codes `[0, K)`, `MASK = K`; classes
/// `[0, C)` with `NULL = C` for the unconditional branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pub codes: usize,
    pub classes: usize,
}

impl VocabLayout {
    pub fn mask_id(&self) -> usize {
        self.codes
    }

    pub fn null_class(&self) -> usize {
        self.classes
    }
}

/// A batch of `batch × len` token rows with some positions replaced by MASK.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub targets: Vec<usize>,
    pub class_ids: Vec<usize>,
}

/// `cos(π r / 2)` for `r ~ U[0, 1)`; always positive so at least one
/// position is masked.
pub fn sample_mask_ratio<R: Rng>(rng: &mut R) -> f64 {
    let r: f64 = rng.gen();
    (std::f64::consts::FRAC_PI_2 * r).cos().max(f64::MIN_POSITIVE)
}

/// Mask exactly `⌈ratio · len⌉` positions of every row, uniformly without replacement.
pub fn apply_mask<R: Rng>(
    targets: &[usize],
    class_ids: &[usize],
    len: usize,
    ratio: f64,
    layout: VocabLayout,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if !(ratio > 0.0) {
        return contract_err(format!("mask ratio must be positive, got {ratio}"));
    }
    if len == 0 || !targets.len().is_multiple_of(len) || targets.len() / len != class_ids.len() {
        return dim_err(format!("{} targets do not form {} rows of {len}", targets.len(), class_ids.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= layout.codes) {
        return contract_err(format!("target {t} is not a codebook id"));
    }
    let batch = class_ids.len();
    let count = ((ratio.min(1.0) * len as f64).ceil() as usize).clamp(1, len);
    let mut mask = vec![false; targets.len()];
    for row in mask.chunks_mut(len) {
        for i in sample(rng, len, count) {
            row[i] = true;
        }
    }
    let tokens = targets.iter().zip(&mask).map(|(&t, &m)| if m { layout.mask_id() } else { t }).collect();
    Ok(MaskedBatch { batch, len, tokens, mask, targets: targets.to_vec(), class_ids: class_ids.to_vec() })
}

/// Replace each class id by `null` with probability `p`.
pub fn cfg_dropout<R: Rng>(class_ids: &[usize], null: usize, p: f64, rng: &mut R) -> Vec<usize> {
    class_ids.iter().map(|&c| if rng.gen::<f64>() < p { null } else { c }).collect()
}

/// Label-smoothed cross-entropy averaged over masked positions only.
/// Logits at unmasked positions are never read.
pub fn masked_nll(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool], eps: f32) -> Result<Var> {
    if mask.len() != targets.len() {
        return dim_err(format!("{} mask entries for {} targets", mask.len(), targets.len()));
    }
    if !mask.iter().any(|&m| m) {
        return contract_err("masked_nll needs at least one masked position");
    }
    let weights: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    tape.cross_entropy(logits, targets, Some(&weights), eps)
}

//! Two-level vector-quantized tokenizer.

mod model;
pub mod quantize;
mod train;

pub use model::{
    CodebookMode, FusionMode, LatentPair, LevelOut, Tokenizer, TokenizerConfig, TokenizerForward, VqLoss, VqLossParts,
};
pub use quantize::{codebook_utilization, lookup, nearest_codes, perplexity, quantize};
pub use train::{mean_psnr, train_tokenizer, TokenizerLogRow, TokenizerTrainConfig, TokenizerTrainReport};

use crate::error::{Error, Result};

/// Token ids of one image, row-major at each level.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
}

impl TokenGrid {
    pub fn new(top: Vec<usize>, bottom: Vec<usize>, top_codes: usize, bottom_codes: usize) -> Result<Self> {
        if top.is_empty() || bottom.len() != 4 * top.len() {
            return Err(Error::Validation(format!(
                "bottom length {} must be 4x top length {}",
                bottom.len(),
                top.len()
            )));
        }
        if let Some(&bad) = top.iter().find(|&&t| t >= top_codes) {
            return Err(Error::Validation(format!("top code {bad} outside [0,{top_codes})")));
        }
        if let Some(&bad) = bottom.iter().find(|&&t| t >= bottom_codes) {
            return Err(Error::Validation(format!("bottom code {bad} outside [0,{bottom_codes})")));
        }
        Ok(Self { top, bottom })
    }

    /// Side length of the (square) top grid.
    pub fn top_side(&self) -> usize {
        (self.top.len() as f64).sqrt().round() as usize
    }
}

//! Stratified iterative parallel decoding: the top sequence from a blank
//! canvas, then the bottom sequence conditioned on it.

mod sampler;
mod schedule;

pub use sampler::{
    audit_csv, decode_level, guided_logits, sample_and_score, AuditRow, DecodeConfig, LevelRequest,
};
pub use schedule::{commit_counts, gamma, Schedule};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Image;
use crate::error::{contract_err, Error, Result};
use crate::nar::{Level, MaskedTransformer};
use crate::vq::{TokenGrid, Tokenizer};

/// Generated (or edited) token grids with their decoded images.
#[derive(Clone, Debug)]
pub struct Generated {
    pub grids: Vec<TokenGrid>,
    pub images: Vec<Image>,
    pub model_calls: usize,
    pub audit: Vec<AuditRow>,
}

/// A frozen tokenizer plus the two level models.
pub struct Generator<'a> {
    pub tokenizer: &'a Tokenizer,
    pub top: &'a MaskedTransformer,
    pub bottom: &'a MaskedTransformer,
}

impl<'a> Generator<'a> {
    pub fn new(tokenizer: &'a Tokenizer, top: &'a MaskedTransformer, bottom: &'a MaskedTransformer) -> Result<Self> {
        let tc = &tokenizer.config;
        if top.level() != Level::Top || bottom.level() != Level::Bottom {
            return contract_err("generator needs a top and a bottom model");
        }
        if top.config.seq_len != tc.top_len() || bottom.config.seq_len != tc.bottom_len() || bottom.config.cond_len != tc.top_len() {
            return contract_err("model sequence lengths do not match the tokenizer grid");
        }
        if top.config.codes != tc.top_codes() || bottom.config.codes != tc.bottom_codes() {
            return contract_err("model vocabularies do not match the tokenizer codebooks");
        }
        Ok(Self { tokenizer, top, bottom })
    }

    pub fn classes(&self) -> usize {
        self.top.config.classes
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.classes() {
            return Err(Error::Validation(format!("class {class_id} outside [0,{})", self.classes())));
        }
        Ok(())
    }

    fn finish(&self, top: Vec<usize>, bottom: Vec<usize>, rows: usize, calls: usize, audit: Vec<AuditRow>) -> Result<Generated> {
        let (n, m) = (self.tokenizer.config.top_len(), self.tokenizer.config.bottom_len());
        let grids = (0..rows)
            .map(|r| {
                TokenGrid::new(
                    top[r * n..(r + 1) * n].to_vec(),
                    bottom[r * m..(r + 1) * m].to_vec(),
                    self.tokenizer.config.top_codes(),
                    self.tokenizer.config.bottom_codes(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let images = self.tokenizer.detokenize(&grids)?;
        Ok(Generated { grids, images, model_calls: calls, audit })
    }

    /// Decode both levels for a batch of rows. `frozen_*` pre-commit tokens.
    fn run(
        &self,
        class_ids: &[usize],
        frozen_top: Option<&[Option<usize>]>,
        frozen_bottom: Option<&[Option<usize>]>,
        cfg: &DecodeConfig,
        trace: bool,
    ) -> Result<Generated> {
        cfg.validate()?;
        for &c in class_ids {
            self.check_class(c)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut audit = Vec::new();
        let top_req = LevelRequest { class_ids, steps: cfg.steps_top, frozen: frozen_top, cond: None };
        let (top, c1) = decode_level(self.top, &top_req, cfg, &mut rng, trace.then_some(&mut audit))?;
        let bottom_req = LevelRequest { class_ids, steps: cfg.steps_bottom, frozen: frozen_bottom, cond: Some(&top) };
        let (bottom, c2) = decode_level(self.bottom, &bottom_req, cfg, &mut rng, trace.then_some(&mut audit))?;
        self.finish(top, bottom, class_ids.len(), c1 + c2, audit)
    }

    /// Sample one image per entry of `class_ids`, decoded as a batch.
    pub fn generate(&self, class_ids: &[usize], cfg: &DecodeConfig, trace: bool) -> Result<Generated> {
        if class_ids.is_empty() {
            return contract_err("nothing to generate");
        }
        self.run(class_ids, None, None, cfg, trace)
    }

    /// Regenerate the tokens touching `region` (`true` = pixel to fill,
    /// row-major `H×W`). A token stays frozen iff its whole cell is outside
    /// the region.
    pub fn inpaint(&self, image: &Image, region: &[bool], class_id: usize, cfg: &DecodeConfig) -> Result<(Generated, TokenGrid)> {
        let size = self.tokenizer.config.image_size;
        if image.height() != size || image.width() != size || region.len() != size * size {
            return contract_err(format!("inpainting needs a {size}x{size} image and region"));
        }
        let source = self.tokenizer.tokenize(std::slice::from_ref(image))?.remove(0);
        let frozen = |tokens: &[usize], cell: usize| -> Vec<Option<usize>> {
            let side = size / cell;
            (0..side * side)
                .map(|i| {
                    let (ty, tx) = (i / side, i % side);
                    let touched = (ty * cell..(ty + 1) * cell)
                        .any(|y| (tx * cell..(tx + 1) * cell).any(|x| region[y * size + x]));
                    (!touched).then_some(tokens[i])
                })
                .collect()
        };
        let top = frozen(&source.top, 16);
        let bottom = frozen(&source.bottom, 8);
        if top.iter().all(Option::is_none) && bottom.iter().all(Option::is_none) {
            log::warn!("inpainting region covers every token; this is unconditional generation");
        }
        let out = self.run(&[class_id], Some(&top), Some(&bottom), cfg, false)?;
        Ok((out, source))
    }

    /// Keep the source top tokens (all of them, or those where
    /// `keep_top_region` is true) and re-predict every bottom token under
    /// `target_class`.
    pub fn domain_transfer(
        &self,
        image: &Image,
        target_class: usize,
        keep_top_region: Option<&[bool]>,
        cfg: &DecodeConfig,
    ) -> Result<(Generated, TokenGrid)> {
        self.check_class(target_class)?;
        let source = self.tokenizer.tokenize(std::slice::from_ref(image))?.remove(0);
        let n = source.top.len();
        let top: Vec<Option<usize>> = match keep_top_region {
            None => source.top.iter().map(|&t| Some(t)).collect(),
            Some(keep) if keep.len() == n => source.top.iter().zip(keep).map(|(&t, &k)| k.then_some(t)).collect(),
            Some(keep) => return contract_err(format!("keep region has {} entries for {n} top tokens", keep.len())),
        };
        let out = self.run(&[target_class], Some(&top), None, cfg, false)?;
        Ok((out, source))
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::quantize::{lookup, nearest_codes};
use super::TokenGrid;
use crate::data::checkpoint::{Checkpoint, ModelKind};
use crate::data::Image;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nn::{GroupNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Upsampled top features plus bottom features as a residual.
    Residual,
    /// Channel concatenation of upsampled top and bottom, then a projection.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookMode {
    Shared,
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    /// Shared codebook size, or the top codebook size in separate mode.
    pub codebook_size: usize,
    pub codebook_size_bottom: usize,
    pub codebook_mode: CodebookMode,
    pub fusion: FusionMode,
    /// 2 for the stratified tokenizer, 1 for a single factor-16 baseline.
    pub levels: usize,
    pub res_blocks: usize,
    pub norm_groups: usize,
    pub commitment_cost: f32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 32,
            embed_dim: 16,
            codebook_size: 256,
            codebook_size_bottom: 64,
            codebook_mode: CodebookMode::Shared,
            fusion: FusionMode::Residual,
            levels: 2,
            res_blocks: 2,
            norm_groups: 8,
            commitment_cost: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!("image size {} must be a multiple of 16", self.image_size)));
        }
        if !(1..=2).contains(&self.levels) {
            return Err(Error::Config(format!("levels must be 1 or 2, got {}", self.levels)));
        }
        if self.codebook_size < 2 || self.codebook_size_bottom < 2 {
            return Err(Error::Config("codebooks need at least two entries".into()));
        }
        let half = self.channels / 2;
        if self.norm_groups == 0 || !self.channels.is_multiple_of(2) || !half.is_multiple_of(self.norm_groups) {
            return Err(Error::Config(format!(
                "channels {} must be even with channels/2 divisible by norm_groups {}",
                self.channels, self.norm_groups
            )));
        }
        Ok(())
    }

    pub fn top_side(&self) -> usize {
        self.image_size / 16
    }

    pub fn bottom_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn top_len(&self) -> usize {
        self.top_side() * self.top_side()
    }

    pub fn bottom_len(&self) -> usize {
        self.bottom_side() * self.bottom_side()
    }

    pub fn top_codes(&self) -> usize {
        self.codebook_size
    }

    pub fn bottom_codes(&self) -> usize {
        match self.codebook_mode {
            CodebookMode::Shared => self.codebook_size,
            CodebookMode::Separate => self.codebook_size_bottom,
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// GroupNorm → Swish → 3×3 conv, twice, with an identity skip.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Linear,
    norm2: GroupNorm,
    conv2: Linear,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), channels, groups)?,
            conv1: Linear::scaled(store, &format!("{name}.conv1"), 9 * channels, channels, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), channels, groups)?,
            conv2: Linear::with_std(store, &format!("{name}.conv2"), 9 * channels, channels, 0.1 / (9.0 * channels as f32).sqrt(), rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (norm, conv) in [(&self.norm1, &self.conv1), (&self.norm2, &self.conv2)] {
            h = norm.forward(tape, store, h)?;
            h = tape.swish(h)?;
            h = tape.im2col3x3(h)?;
            h = conv.forward(tape, store, h)?;
        }
        tape.add(x, h)
    }
}

fn run_blocks(blocks: &[ResBlock], tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, store, x)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
enum FusionLayers {
    Residual { top_proj: Linear, top_blocks: Vec<ResBlock>, bottom_proj: Linear },
    Concat { proj: Linear },
    TopOnly { top_proj: Linear, top_blocks: Vec<ResBlock> },
}

#[derive(Clone, Debug)]
struct BottomEncoder {
    cond_in: Linear,
    cond_blocks: Vec<ResBlock>,
    merge: Linear,
    merge_block: ResBlock,
    pre_quant: Linear,
}

/// Trunk features at both scales, before pre-projection and quantization.
#[derive(Clone, Copy, Debug)]
pub struct LatentPair {
    /// `[B, H/16, W/16, C]`
    pub top: Var,
    /// `[B, H/8, W/8, C]`
    pub bottom: Var,
}

/// One quantized level on a tape.
#[derive(Clone, Debug)]
pub struct LevelOut {
    pub indices: Vec<usize>,
    /// Pre-quantization features `[B, h, w, D]`.
    pub z_e: Var,
    /// Straight-through quantized features (value = codebook rows).
    pub z_q: Var,
    pub commit: Var,
    pub codebook: Var,
}

#[derive(Clone, Debug)]
pub struct TokenizerForward {
    pub recon: Var,
    pub top: LevelOut,
    pub bottom: Option<LevelOut>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VqLossParts {
    pub recon: f32,
    pub commit_top: f32,
    pub commit_bottom: f32,
    pub codebook: f32,
}

pub struct VqLoss {
    pub total: Var,
    pub parts: VqLossParts,
    pub forward: TokenizerForward,
}

/// Two-level (or single-level baseline) VQ tokenizer.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub store: ParamStore,
    codebook_top: ParamId,
    codebook_bottom: ParamId,
    stem: Linear,
    enc8: Vec<ResBlock>,
    enc16: Vec<ResBlock>,
    pre_top: Linear,
    bottom_enc: Option<BottomEncoder>,
    fusion: FusionLayers,
    dec8: Vec<ResBlock>,
    up_proj: Linear,
    up_block: ResBlock,
    out_norm: GroupNorm,
    out: Linear,
}

const STEM_PATCH: usize = 8;
const OUT_PATCH: usize = 4;

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (c, d, g) = (config.channels, config.embed_dim, config.norm_groups);
        let blocks = |s: &mut ParamStore, name: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<ResBlock>> {
            (0..n).map(|i| ResBlock::new(s, &format!("{name}.{i}"), c, g, rng)).collect()
        };

        let codebook_top = s.add_trunc_normal("codebook", &[config.codebook_size, d], 1.0, rng)?;
        let codebook_bottom = match config.codebook_mode {
            CodebookMode::Shared => codebook_top,
            CodebookMode::Separate => s.add_trunc_normal("codebook_bottom", &[config.codebook_size_bottom, d], 1.0, rng)?,
        };
        let stem = Linear::scaled(s, "enc.stem", STEM_PATCH * STEM_PATCH * 3, c, rng)?;
        let enc8 = blocks(s, "enc.f8", config.res_blocks, rng)?;
        let enc16 = blocks(s, "enc.f16", config.res_blocks, rng)?;
        let pre_top = Linear::scaled(s, "enc.pre_quant_top", c, d, rng)?;
        let bottom_enc = if config.levels == 2 {
            Some(BottomEncoder {
                cond_in: Linear::scaled(s, "enc.cond.in", d, c, rng)?,
                cond_blocks: blocks(s, "enc.cond.blocks", 2, rng)?,
                merge: Linear::scaled(s, "enc.merge", 2 * c, c, rng)?,
                merge_block: ResBlock::new(s, "enc.merge_block", c, g, rng)?,
                pre_quant: Linear::scaled(s, "enc.pre_quant_bottom", c, d, rng)?,
            })
        } else {
            None
        };
        let fusion = match (config.levels, config.fusion) {
            (1, _) => FusionLayers::TopOnly {
                top_proj: Linear::scaled_no_bias(s, "dec.top_proj", d, c, rng)?,
                top_blocks: blocks(s, "dec.top_blocks", config.res_blocks, rng)?,
            },
            (_, FusionMode::Residual) => FusionLayers::Residual {
                top_proj: Linear::scaled_no_bias(s, "dec.top_proj", d, c, rng)?,
                top_blocks: blocks(s, "dec.top_blocks", config.res_blocks, rng)?,
                bottom_proj: Linear::scaled_no_bias(s, "dec.bottom_proj", d, c, rng)?,
            },
            (_, FusionMode::Concat) => FusionLayers::Concat { proj: Linear::scaled_no_bias(s, "dec.concat_proj", 2 * d, c, rng)? },
        };
        // Concat mode spends the top-level blocks after fusion to keep depth equal.
        let extra = if matches!(fusion, FusionLayers::Concat { .. }) { config.res_blocks } else { 0 };
        let dec8 = blocks(s, "dec.f8", config.res_blocks + extra, rng)?;
        let up_proj = Linear::scaled(s, "dec.up_proj", c, c / 2, rng)?;
        let up_block = ResBlock::new(s, "dec.f4", c / 2, g, rng)?;
        let out_norm = GroupNorm::new(s, "dec.out_norm", c / 2, g)?;
        let out = Linear::scaled(s, "dec.out", c / 2, OUT_PATCH * OUT_PATCH * 3, rng)?;

        Ok(Self {
            config,
            store,
            codebook_top,
            codebook_bottom,
            stem,
            enc8,
            enc16,
            pre_top,
            bottom_enc,
            fusion,
            dec8,
            up_proj,
            up_block,
            out_norm,
            out,
        })
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn codebook_top(&self) -> &Tensor {
        &self.store.get(self.codebook_top).value
    }

    pub fn codebook_bottom(&self) -> &Tensor {
        &self.store.get(self.codebook_bottom).value
    }

    pub(crate) fn codebook_ids(&self) -> (ParamId, ParamId) {
        (self.codebook_top, self.codebook_bottom)
    }

    fn check_images(&self, tape: &Tape, images: Var) -> Result<usize> {
        match *tape.shape(images) {
            [b, h, w, 3] if h == self.config.image_size && w == self.config.image_size => Ok(b),
            [_, h, w, 3] if h % 16 != 0 || w % 16 != 0 => dim_err(format!("{h}x{w} is not divisible by 16")),
            ref s => dim_err(format!(
                "tokenizer expects [B,{0},{0},3] images, got {s:?}",
                self.config.image_size
            )),
        }
    }

    /// Shared trunk: factor-8 features and their further 2× reduction.
    pub fn encode_stratified(&self, tape: &mut Tape, images: Var) -> Result<LatentPair> {
        self.check_images(tape, images)?;
        let st = &self.store;
        let p = tape.patchify(images, STEM_PATCH)?;
        let h = self.stem.forward(tape, st, p)?;
        let bottom = run_blocks(&self.enc8, tape, st, h)?;
        let pooled = tape.avg_pool2x(bottom)?;
        let top = run_blocks(&self.enc16, tape, st, pooled)?;
        Ok(LatentPair { top, bottom })
    }

    fn quantize_level(&self, tape: &mut Tape, z_e: Var, codebook: ParamId) -> Result<LevelOut> {
        let cb = &self.store.get(codebook).value;
        let indices = nearest_codes(tape.value(z_e).data(), cb)?;
        let q = lookup(&indices, cb, tape.shape(z_e))?;
        let z_q = tape.straight_through(z_e, q.clone())?;
        let q_const = tape.constant(q);
        let commit = tape.mse(z_e, q_const)?;
        let table = tape.param(&self.store, codebook);
        let rows = tape.embedding(table, &indices)?;
        let shape = tape.shape(z_e).to_vec();
        let rows = tape.reshape(rows, &shape)?;
        let z_e_const = tape.detach(z_e);
        let codebook = tape.mse(z_e_const, rows)?;
        Ok(LevelOut { indices, z_e, z_q, commit, codebook })
    }

    /// Bottom pre-quantization features from the factor-8 trunk output and
    /// the quantized top map (latent conditional layer).
    fn bottom_features(&self, tape: &mut Tape, enc8: Var, top_q: Var) -> Result<Var> {
        let be = self.bottom_enc.as_ref().ok_or_else(|| Error::Contract("single-level tokenizer has no bottom path".into()))?;
        let st = &self.store;
        let c = be.cond_in.forward(tape, st, top_q)?;
        let c = run_blocks(&be.cond_blocks, tape, st, c)?;
        let c = tape.upsample2x(c)?;
        let merged = tape.concat(&[enc8, c], 3)?;
        let h = be.merge.forward(tape, st, merged)?;
        let h = be.merge_block.forward(tape, st, h)?;
        be.pre_quant.forward(tape, st, h)
    }

    /// Combine quantized levels into decoder input at factor 8.
    /// `bottom_q = None` is only valid for a single-level tokenizer.
    pub fn fuse(&self, tape: &mut Tape, top_q: Var, bottom_q: Option<Var>) -> Result<Var> {
        let st = &self.store;
        let (ts, bs) = (tape.shape(top_q).to_vec(), bottom_q.map(|b| tape.shape(b).to_vec()));
        if let Some(bs) = &bs {
            if bs.len() != 4 || ts.len() != 4 || bs[1] != 2 * ts[1] || bs[2] != 2 * ts[2] || bs[0] != ts[0] {
                return contract_err(format!("fuse: bottom {bs:?} must be twice the resolution of top {ts:?}"));
            }
        }
        match (&self.fusion, bottom_q) {
            (FusionLayers::Residual { top_proj, top_blocks, bottom_proj }, Some(b)) => {
                let t = top_proj.forward(tape, st, top_q)?;
                let t = run_blocks(top_blocks, tape, st, t)?;
                let t = tape.upsample2x(t)?;
                let b = bottom_proj.forward(tape, st, b)?;
                tape.add(t, b)
            }
            (FusionLayers::Concat { proj }, Some(b)) => {
                let t = tape.upsample2x(top_q)?;
                let cat = tape.concat(&[t, b], 3)?;
                proj.forward(tape, st, cat)
            }
            (FusionLayers::TopOnly { top_proj, top_blocks }, None) => {
                let t = top_proj.forward(tape, st, top_q)?;
                let t = run_blocks(top_blocks, tape, st, t)?;
                tape.upsample2x(t)
            }
            _ => contract_err("fusion mode does not match the supplied levels"),
        }
    }

    /// Decoder from fused factor-8 features to an image in `[0, 1]`.
    pub fn decode(&self, tape: &mut Tape, fused: Var) -> Result<Var> {
        let st = &self.store;
        let h = run_blocks(&self.dec8, tape, st, fused)?;
        let h = tape.upsample2x(h)?;
        let h = self.up_proj.forward(tape, st, h)?;
        let h = self.up_block.forward(tape, st, h)?;
        let h = self.out_norm.forward(tape, st, h)?;
        let h = tape.swish(h)?;
        let h = self.out.forward(tape, st, h)?;
        let h = tape.unpatchify(h, OUT_PATCH)?;
        tape.sigmoid(h)
    }

    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<TokenizerForward> {
        let latents = self.encode_stratified(tape, images)?;
        let z_top = self.pre_top.forward(tape, &self.store, latents.top)?;
        let top = self.quantize_level(tape, z_top, self.codebook_top)?;
        let bottom = if self.config.levels == 2 {
            let z_bottom = self.bottom_features(tape, latents.bottom, top.z_q)?;
            Some(self.quantize_level(tape, z_bottom, self.codebook_bottom)?)
        } else {
            None
        };
        let fused = self.fuse(tape, top.z_q, bottom.as_ref().map(|b| b.z_q))?;
        let recon = self.decode(tape, fused)?;
        Ok(TokenizerForward { recon, top, bottom })
    }

    /// Pixel MSE + β·(commit_top + commit_bottom) + codebook terms.
    pub fn loss(&self, tape: &mut Tape, images: Var) -> Result<VqLoss> {
        self.loss_with_beta(tape, images, self.config.commitment_cost)
    }

    pub fn loss_with_beta(&self, tape: &mut Tape, images: Var, beta: f32) -> Result<VqLoss> {
        let forward = self.forward(tape, images)?;
        let recon = tape.mse(forward.recon, images)?;
        let mut commit = forward.top.commit;
        let mut codebook = forward.top.codebook;
        if let Some(b) = &forward.bottom {
            commit = tape.add(commit, b.commit)?;
            codebook = tape.add(codebook, b.codebook)?;
        }
        let weighted = tape.scale(commit, beta)?;
        let total = tape.add(recon, weighted)?;
        let total = tape.add(total, codebook)?;
        let v = |t: &Tape, x: Var| t.value(x).data()[0];
        let parts = VqLossParts {
            recon: v(tape, recon),
            commit_top: v(tape, forward.top.commit),
            commit_bottom: forward.bottom.as_ref().map_or(0.0, |b| v(tape, b.commit)),
            codebook: v(tape, codebook),
        };
        Ok(VqLoss { total, parts, forward })
    }

    pub fn tokenize(&self, images: &[Image]) -> Result<Vec<TokenGrid>> {
        if self.config.levels != 2 {
            return contract_err("tokenize needs a two-level tokenizer");
        }
        let mut tape = Tape::inference();
        let x = tape.constant(Image::batch(&images.iter().collect::<Vec<_>>())?);
        let latents = self.encode_stratified(&mut tape, x)?;
        let z_top = self.pre_top.forward(&mut tape, &self.store, latents.top)?;
        let top_idx = nearest_codes(tape.value(z_top).data(), self.codebook_top())?;
        let top_q = tape.constant(lookup(&top_idx, self.codebook_top(), tape.shape(z_top))?);
        let z_bottom = self.bottom_features(&mut tape, latents.bottom, top_q)?;
        let bottom_idx = nearest_codes(tape.value(z_bottom).data(), self.codebook_bottom())?;
        let (n, m) = (self.config.top_len(), self.config.bottom_len());
        (0..images.len())
            .map(|i| {
                TokenGrid::new(
                    top_idx[i * n..(i + 1) * n].to_vec(),
                    bottom_idx[i * m..(i + 1) * m].to_vec(),
                    self.config.top_codes(),
                    self.config.bottom_codes(),
                )
            })
            .collect()
    }

    /// Decode token grids to images through codebook lookup, fusion and the decoder.
    pub fn detokenize(&self, grids: &[TokenGrid]) -> Result<Vec<Image>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let (n, m) = (self.config.top_len(), self.config.bottom_len());
        let (ts, bs, d) = (self.config.top_side(), self.config.bottom_side(), self.config.embed_dim);
        let mut top = Vec::with_capacity(grids.len() * n);
        let mut bottom = Vec::with_capacity(grids.len() * m);
        for g in grids {
            if g.top.len() != n || g.bottom.len() != m {
                return Err(Error::Validation(format!(
                    "grid has {}+{} tokens, tokenizer expects {n}+{m}",
                    g.top.len(),
                    g.bottom.len()
                )));
            }
            top.extend_from_slice(&g.top);
            bottom.extend_from_slice(&g.bottom);
        }
        let b = grids.len();
        let mut tape = Tape::inference();
        let tq = tape.constant(lookup(&top, self.codebook_top(), &[b, ts, ts, d])?);
        let bq = tape.constant(lookup(&bottom, self.codebook_bottom(), &[b, bs, bs, d])?);
        let fused = self.fuse(&mut tape, tq, Some(bq))?;
        let out = self.decode(&mut tape, fused)?;
        Image::unbatch(tape.value(out))
    }

    /// Reconstruction through the full quantized path (works for both level counts).
    pub fn reconstruct(&self, images: &[Image]) -> Result<Vec<Image>> {
        let mut tape = Tape::inference();
        let x = tape.constant(Image::batch(&images.iter().collect::<Vec<_>>())?);
        let fwd = self.forward(&mut tape, x)?;
        Image::unbatch(tape.value(fwd.recon))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(ModelKind::Tokenizer, self.config.to_text(), &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ModelKind::Tokenizer {
            return Err(Error::Load { field: "kind", msg: format!("expected tokenizer, found `{}`", ckpt.kind.tag()) });
        }
        let config = TokenizerConfig::from_text(&ckpt.config)?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

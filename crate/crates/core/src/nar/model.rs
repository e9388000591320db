use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VocabLayout;
use crate::data::checkpoint::{Checkpoint, ModelKind};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nn::{LayerNorm, Linear, INIT_STD};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Top,
    Bottom,
}

impl Level {
    pub fn kind(self) -> ModelKind {
        match self {
            Level::Top => ModelKind::Top,
            Level::Bottom => ModelKind::Bottom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub level: Level,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub dropout: f32,
    /// Token sequence length: N for the top model, 4N for the bottom model.
    pub seq_len: usize,
    /// Length of the conditioning top sequence (bottom model only).
    pub cond_len: usize,
    /// Output vocabulary size.
    pub codes: usize,
    /// Vocabulary of the conditioning top tokens.
    pub cond_codes: usize,
    pub classes: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            level: Level::Top,
            layers: 6,
            heads: 4,
            dim: 128,
            mlp_dim: 512,
            dropout: 0.1,
            seq_len: 16,
            cond_len: 0,
            codes: 256,
            cond_codes: 256,
            classes: 12,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if self.layers == 0 || self.seq_len == 0 || self.codes < 2 || self.classes == 0 {
            return Err(Error::Config("layers, seq_len, classes must be positive and codes ≥ 2".into()));
        }
        if self.level == Level::Bottom && self.cond_len == 0 {
            return Err(Error::Config("the bottom model needs a conditioning length".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout { codes: self.codes, classes: self.classes }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Bidirectional pre-LN transformer over one token level.
///
/// The top model reads `[class, y_1..y_N]` and predicts codes at the N token
/// positions. The bottom model self-attends over its 4N tokens and
/// cross-attends to `[class, top tokens]`.
#[derive(Clone, Debug)]
pub struct MaskedTransformer {
    pub config: TransformerConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    class_emb: ParamId,
    pos_emb: ParamId,
    cond: Option<(ParamId, ParamId, LayerNorm)>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl MaskedTransformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = config.dim;
        let attention = |s: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| -> Result<Attention> {
            Ok(Attention {
                q: Linear::new(s, &format!("{name}.q"), d, d, rng)?,
                k: Linear::new(s, &format!("{name}.k"), d, d, rng)?,
                v: Linear::new(s, &format!("{name}.v"), d, d, rng)?,
                o: Linear::new(s, &format!("{name}.o"), d, d, rng)?,
            })
        };
        let tok_emb = s.add_trunc_normal("tok_emb", &[config.codes + 1, d], INIT_STD, rng)?;
        let class_emb = s.add_trunc_normal("class_emb", &[config.classes + 1, d], INIT_STD, rng)?;
        let positions = match config.level {
            Level::Top => config.seq_len + 1,
            Level::Bottom => config.seq_len,
        };
        let pos_emb = s.add_trunc_normal("pos_emb", &[positions, d], INIT_STD, rng)?;
        let cond = match config.level {
            Level::Top => None,
            Level::Bottom => Some((
                s.add_trunc_normal("cond_emb", &[config.cond_codes, d], INIT_STD, rng)?,
                s.add_trunc_normal("cond_pos_emb", &[config.cond_len, d], INIT_STD, rng)?,
                LayerNorm::new(s, "cond_ln", d)?,
            )),
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("blocks.{i}");
            let cross = match config.level {
                Level::Top => None,
                Level::Bottom => Some((LayerNorm::new(s, &format!("{p}.ln_cross"), d)?, attention(s, &format!("{p}.cross"), rng)?)),
            };
            blocks.push(Block {
                ln1: LayerNorm::new(s, &format!("{p}.ln1"), d)?,
                attn: attention(s, &format!("{p}.attn"), rng)?,
                cross,
                ln2: LayerNorm::new(s, &format!("{p}.ln2"), d)?,
                fc1: Linear::new(s, &format!("{p}.fc1"), d, config.mlp_dim, rng)?,
                fc2: Linear::new(s, &format!("{p}.fc2"), config.mlp_dim, d, rng)?,
            });
        }
        let ln_f = LayerNorm::new(s, "ln_f", d)?;
        let head = Linear::new(s, "head", d, config.codes, rng)?;
        Ok(Self { config, store, tok_emb, class_emb, pos_emb, cond, blocks, ln_f, head })
    }

    pub fn level(&self) -> Level {
        self.config.level
    }

    pub fn layout(&self) -> VocabLayout {
        self.config.layout()
    }

    fn attend(
        &self,
        tape: &mut Tape,
        attn: &Attention,
        xq: Var,
        xkv: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let st = &self.store;
        let (h, d) = (self.config.heads, self.config.dim);
        let hd = d / h;
        let split = |tape: &mut Tape, x: Var| -> Result<Var> {
            let (b, t) = (tape.shape(x)[0], tape.shape(x)[1]);
            let x = tape.reshape(x, &[b, t, h, hd])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * h, t, hd])
        };
        let (b, t) = (tape.shape(xq)[0], tape.shape(xq)[1]);
        let q = attn.q.forward(tape, st, xq)?;
        let k = attn.k.forward(tape, st, xkv)?;
        let v = attn.v.forward(tape, st, xkv)?;
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (hd as f32).sqrt())?;
        let mut probs = tape.softmax(scores)?;
        if let Some(r) = rng.as_deref_mut() {
            probs = tape.dropout(probs, self.config.dropout, r)?;
        }
        let out = tape.bmm(probs, v, false)?;
        let out = tape.reshape(out, &[b, h, t, hd])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, t, d])?;
        attn.o.forward(tape, st, out)
    }

    fn embed_rows(&self, tape: &mut Tape, table: ParamId, ids: &[usize], shape: [usize; 3]) -> Result<Var> {
        let table = tape.param(&self.store, table);
        let rows = tape.embedding(table, ids)?;
        tape.reshape(rows, &shape)
    }

    /// Logits `[B, L, K]` for the token rows in `tokens` (`B·L` ids, MASK allowed).
    /// `dropout_rng` enables dropout; `None` runs deterministically.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        class_ids: &[usize],
        cond: Option<&[usize]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        let (l, d) = (c.seq_len, c.dim);
        let b = class_ids.len();
        if b == 0 || tokens.len() != b * l {
            return dim_err(format!("expected {b} rows of {l} tokens, got {} ids", tokens.len()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t > c.codes) {
            return Err(Error::Index(format!("token {t} outside [0,{}]", c.codes)));
        }
        if let Some(&k) = class_ids.iter().find(|&&k| k > c.classes) {
            return Err(Error::Index(format!("class {k} outside [0,{}]", c.classes)));
        }
        if dropout_rng.is_some() && c.dropout == 0.0 {
            dropout_rng = None;
        }

        let tok = self.embed_rows(tape, self.tok_emb, tokens, [b, l, d])?;
        let cls = self.embed_rows(tape, self.class_emb, class_ids, [b, 1, d])?;
        let mut x = match c.level {
            Level::Top => {
                let seq = tape.concat(&[cls, tok], 1)?;
                let pos: Vec<usize> = (0..b).flat_map(|_| 0..=l).collect();
                let pos = self.embed_rows(tape, self.pos_emb, &pos, [b, l + 1, d])?;
                tape.add(seq, pos)?
            }
            Level::Bottom => {
                let pos: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
                let pos = self.embed_rows(tape, self.pos_emb, &pos, [b, l, d])?;
                tape.add(tok, pos)?
            }
        };
        let memory = match (c.level, &self.cond, cond) {
            (Level::Top, _, None) => None,
            (Level::Bottom, Some((emb, pos_emb, ln)), Some(top)) => {
                let n = c.cond_len;
                if top.len() != b * n {
                    return dim_err(format!("expected {b} rows of {n} top tokens, got {}", top.len()));
                }
                if let Some(&t) = top.iter().find(|&&t| t >= c.cond_codes) {
                    return contract_err(format!("conditioning token {t} is not a top code (MASK not allowed)"));
                }
                let e = self.embed_rows(tape, *emb, top, [b, n, d])?;
                let pos: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
                let p = self.embed_rows(tape, *pos_emb, &pos, [b, n, d])?;
                let e = tape.add(e, p)?;
                let m = tape.concat(&[cls, e], 1)?;
                Some(ln.forward(tape, &self.store, m)?)
            }
            (Level::Top, _, Some(_)) => return contract_err("the top model takes no conditioning tokens"),
            _ => return contract_err("the bottom model needs conditioning top tokens"),
        };

        let st = &self.store;
        for blk in &self.blocks {
            let h = blk.ln1.forward(tape, st, x)?;
            let a = self.attend(tape, &blk.attn, h, h, &mut dropout_rng)?;
            x = tape.add(x, a)?;
            if let (Some((ln, attn)), Some(mem)) = (&blk.cross, memory) {
                let h = ln.forward(tape, st, x)?;
                let a = self.attend(tape, attn, h, mem, &mut dropout_rng)?;
                x = tape.add(x, a)?;
            }
            let h = blk.ln2.forward(tape, st, x)?;
            let h = blk.fc1.forward(tape, st, h)?;
            let mut h = tape.gelu(h)?;
            if let Some(r) = dropout_rng.as_deref_mut() {
                h = tape.dropout(h, c.dropout, r)?;
            }
            let h = blk.fc2.forward(tape, st, h)?;
            x = tape.add(x, h)?;
        }
        if c.level == Level::Top {
            x = tape.narrow(x, 1, 1, l)?;
        }
        let x = self.ln_f.forward(tape, st, x)?;
        self.head.forward(tape, st, x)
    }

    /// Inference-mode logits as a plain tensor.
    pub fn logits(&self, tokens: &[usize], class_ids: &[usize], cond: Option<&[usize]>) -> Result<crate::tensor::Tensor> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, tokens, class_ids, cond, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.config.level.kind(), self.config.to_text(), &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind == ModelKind::Tokenizer {
            return Err(Error::Load { field: "kind", msg: "expected a transformer, found `tokenizer`".into() });
        }
        let config = TransformerConfig::from_text(&ckpt.config)?;
        if config.level.kind() != ckpt.kind {
            return Err(Error::Load { field: "kind", msg: format!("kind tag `{}` disagrees with config", ckpt.kind.tag()) });
        }
        let mut model = Self::new(config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{apply_mask, cfg_dropout, masked_nll, sample_mask_ratio, Level, MaskedBatch, MaskedTransformer};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{AdamW, AdamWConfig, LrSchedule, Tape};
use crate::vq::TokenGrid;

/// Token rows for one level, with the conditioning top rows for the bottom level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelDataset {
    pub level: Level,
    pub len: usize,
    pub targets: Vec<usize>,
    pub class_ids: Vec<usize>,
    pub cond_len: usize,
    pub cond: Vec<usize>,
}

impl LevelDataset {
    pub fn new(level: Level, grids: &[TokenGrid], class_ids: &[usize]) -> Result<Self> {
        if grids.is_empty() || grids.len() != class_ids.len() {
            return dim_err(format!("{} grids for {} class ids", grids.len(), class_ids.len()));
        }
        let (n, m) = (grids[0].top.len(), grids[0].bottom.len());
        if grids.iter().any(|g| g.top.len() != n || g.bottom.len() != m) {
            return dim_err("token grids differ in size");
        }
        let top: Vec<usize> = grids.iter().flat_map(|g| g.top.iter().copied()).collect();
        Ok(match level {
            Level::Top => Self { level, len: n, targets: top, class_ids: class_ids.to_vec(), cond_len: 0, cond: Vec::new() },
            Level::Bottom => Self {
                level,
                len: m,
                targets: grids.iter().flat_map(|g| g.bottom.iter().copied()).collect(),
                class_ids: class_ids.to_vec(),
                cond_len: n,
                cond: top,
            },
        })
    }

    pub fn rows(&self) -> usize {
        self.class_ids.len()
    }

    fn cond_row(&self, i: usize) -> &[usize] {
        &self.cond[i * self.cond_len..(i + 1) * self.cond_len]
    }

    /// Same bottom rows with the conditioning rows permuted across samples,
    /// so each bottom sequence sees some other image's top tokens.
    pub fn with_shuffled_conditions(&self, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.rows()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cond = order.iter().flat_map(|&i| self.cond_row(i).iter().copied()).collect();
        Self { cond, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub clip: f32,
    pub label_smoothing: f32,
    /// Probability of replacing the class with NULL.
    pub uncond_cutoff: f64,
    pub seed: u64,
    /// Mask ratio for conditional augmentation of the top rows; `None` disables it.
    pub cond_aug: Option<f64>,
    /// Use this mask ratio for every row instead of sampling one.
    pub fixed_mask_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch: 32,
            lr: 1e-4,
            warmup: 200,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 0.045,
            clip: 3.0,
            label_smoothing: 0.1,
            uncond_cutoff: 0.1,
            seed: 0,
            cond_aug: None,
            fixed_mask_ratio: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub mask_ratio_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LossRow>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr,mask_ratio_mean\n");
        for r in &self.log {
            out.push_str(&format!("{},{},{},{:.6}\n", r.step, r.loss, r.lr, r.mask_ratio_mean));
        }
        out
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss as f64).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Mask `rows` of `data` with one independently drawn ratio per row.
fn masked_rows<R: Rng>(
    model: &MaskedTransformer,
    data: &LevelDataset,
    rows: &[usize],
    fixed: Option<f64>,
    rng: &mut R,
) -> Result<(MaskedBatch, f64)> {
    let layout = model.layout();
    let l = data.len;
    let mut out = MaskedBatch {
        batch: rows.len(),
        len: l,
        tokens: Vec::with_capacity(rows.len() * l),
        mask: Vec::with_capacity(rows.len() * l),
        targets: Vec::with_capacity(rows.len() * l),
        class_ids: Vec::with_capacity(rows.len()),
    };
    let mut ratio_sum = 0.0;
    for &i in rows {
        let ratio = fixed.unwrap_or_else(|| sample_mask_ratio(rng));
        ratio_sum += ratio;
        let m = apply_mask(&data.targets[i * l..(i + 1) * l], &data.class_ids[i..i + 1], l, ratio, layout, rng)?;
        out.tokens.extend(m.tokens);
        out.mask.extend(m.mask);
        out.targets.extend(m.targets);
        out.class_ids.push(data.class_ids[i]);
    }
    Ok((out, ratio_sum / rows.len() as f64))
}

/// Replace `⌈ratio·N⌉` positions of each top row with the top model's
/// single-pass argmax prediction for them.
pub fn conditional_augmentation<R: Rng>(
    top_tokens: &[usize],
    class_ids: &[usize],
    ratio: f64,
    top_model: &MaskedTransformer,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return contract_err(format!("augmentation ratio {ratio} outside [0, 1]"));
    }
    if top_model.level() != Level::Top {
        return contract_err("conditional augmentation needs the top model");
    }
    let n = top_model.config.seq_len;
    let count = (ratio * n as f64).ceil() as usize;
    if count == 0 {
        return Ok(top_tokens.to_vec());
    }
    if top_tokens.len() != class_ids.len() * n {
        return dim_err(format!("{} top tokens for {} rows of {n}", top_tokens.len(), class_ids.len()));
    }
    let mut tokens = top_tokens.to_vec();
    let mut masked = vec![false; tokens.len()];
    for (row, flags) in tokens.chunks_mut(n).zip(masked.chunks_mut(n)) {
        for i in sample(rng, n, count.min(n)) {
            row[i] = top_model.layout().mask_id();
            flags[i] = true;
        }
    }
    let logits = top_model.logits(&tokens, class_ids, None)?;
    let k = top_model.config.codes;
    for (pos, flag) in masked.iter().enumerate() {
        if *flag {
            let row = &logits.data()[pos * k..(pos + 1) * k];
            // first maximum wins
            let best = row.iter().enumerate().fold((0, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            tokens[pos] = best.0;
        }
    }
    Ok(tokens)
}

/// Train one level with AdamW, linear warmup and cosine decay.
pub fn train_level(
    model: &mut MaskedTransformer,
    data: &LevelDataset,
    cfg: &TrainConfig,
    top_model: Option<&MaskedTransformer>,
    mut on_step: impl FnMut(&LossRow),
) -> Result<TrainReport> {
    if data.level != model.level() || data.len != model.config.seq_len {
        return contract_err(format!(
            "{:?} data of length {} does not fit the {:?} model of length {}",
            data.level,
            data.len,
            model.level(),
            model.config.seq_len
        ));
    }
    if cfg.batch == 0 || data.rows() == 0 {
        return contract_err("training needs data and a positive batch size");
    }
    if cfg.cond_aug.is_some() && top_model.is_none() {
        return contract_err("conditional augmentation needs a top model");
    }
    let adam = AdamWConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
        clip_norm: Some(cfg.clip),
    };
    let mut opt = AdamW::new(adam, &model.store);
    let schedule = LrSchedule { peak: cfg.lr, warmup: cfg.warmup, total: cfg.steps };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch.min(data.rows());
    let per_epoch = data.rows() / batch;
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let slot = step % per_epoch;
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let rows = &order[slot * batch..(slot + 1) * batch];
        let (mb, ratio_mean) = masked_rows(model, data, rows, cfg.fixed_mask_ratio, &mut rng)?;
        let classes = cfg_dropout(&mb.class_ids, model.layout().null_class(), cfg.uncond_cutoff, &mut rng);
        let cond: Option<Vec<usize>> = match model.level() {
            Level::Top => None,
            Level::Bottom => {
                let raw: Vec<usize> = rows.iter().flat_map(|&i| data.cond_row(i).iter().copied()).collect();
                Some(match (cfg.cond_aug, top_model) {
                    (Some(ratio), Some(top)) => conditional_augmentation(&raw, &mb.class_ids, ratio, top, &mut rng)?,
                    _ => raw,
                })
            }
        };
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &mb.tokens, &classes, cond.as_deref(), Some(&mut rng))?;
        let loss = masked_nll(&mut tape, logits, &mb.targets, &mb.mask, cfg.label_smoothing)?;
        model.store.zero_grad();
        tape.backward(loss, &mut model.store)?;
        let lr = schedule.at(step);
        opt.step(&mut model.store, lr)?;
        let row = LossRow { step, loss: tape.value(loss).data()[0], lr, mask_ratio_mean: ratio_mean };
        on_step(&row);
        report.log.push(row);
    }
    Ok(report)
}

/// Mean masked NLL (no smoothing, no dropout, real classes) over all rows of
/// `data`, with mask ratios drawn from `seed`.
pub fn evaluate_level(model: &MaskedTransformer, data: &LevelDataset, batch: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = (0..data.rows()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in rows.chunks(batch.max(1)) {
        let (mb, _) = masked_rows(model, data, chunk, None, &mut rng)?;
        let cond: Option<Vec<usize>> = match model.level() {
            Level::Top => None,
            Level::Bottom => Some(chunk.iter().flat_map(|&i| data.cond_row(i).iter().copied()).collect()),
        };
        let mut tape = Tape::inference();
        let logits = model.forward(&mut tape, &mb.tokens, &mb.class_ids, cond.as_deref(), None)?;
        let loss = masked_nll(&mut tape, logits, &mb.targets, &mb.mask, 0.0)?;
        let masked = mb.mask.iter().filter(|&&m| m).count();
        total += tape.value(loss).data()[0] as f64 * masked as f64;
        count += masked;
    }
    Ok(total / count as f64)
}

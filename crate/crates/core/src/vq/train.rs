use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::quantize::perplexity;
use super::Tokenizer;
use crate::data::Image;
use crate::error::{contract_err, Result};
use crate::tensor::{AdamW, AdamWConfig, ParamId, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub dead_code_revival: bool,
    /// Window of trailing batches whose per-batch perplexities are averaged.
    pub ppl_window: usize,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 16, lr: 1e-3, seed: 0, dead_code_revival: true, ppl_window: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerLogRow {
    pub step: usize,
    pub loss: f32,
    pub recon: f32,
    pub commit_top: f32,
    pub commit_bottom: f32,
    pub ppl_top: f64,
    pub ppl_bottom: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TokenizerTrainReport {
    pub log: Vec<TokenizerLogRow>,
    pub ppl_top: f64,
    pub ppl_bottom: f64,
    pub revived: usize,
}

impl TokenizerTrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,recon,commit_top,commit_bottom,ppl_top,ppl_bottom\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4}\n",
                r.step, r.loss, r.recon, r.commit_top, r.commit_bottom, r.ppl_top, r.ppl_bottom
            ));
        }
        out
    }
}

struct Usage {
    id: ParamId,
    counts: Vec<usize>,
}

/// Train `model` in place on `images` with plain AdamW at a constant rate.
pub fn train_tokenizer(
    model: &mut Tokenizer,
    images: &[Image],
    cfg: &TokenizerTrainConfig,
    mut on_step: impl FnMut(&TokenizerLogRow),
) -> Result<TokenizerTrainReport> {
    if images.is_empty() || cfg.batch == 0 {
        return contract_err("tokenizer training needs images and a positive batch size");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamWConfig { lr: cfg.lr, weight_decay: 0.0, clip_norm: None, ..Default::default() };
    let mut opt = AdamW::new(adam, &model.store);
    let batch = cfg.batch.min(images.len());
    let per_epoch = (images.len() / batch).max(1);
    let (top_id, bottom_id) = model.codebook_ids();
    let mut usage = vec![Usage { id: top_id, counts: vec![0; model.config.top_codes()] }];
    if bottom_id != top_id && model.levels() == 2 {
        usage.push(Usage { id: bottom_id, counts: vec![0; model.config.bottom_codes()] });
    }

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut report = TokenizerTrainReport::default();
    for step in 0..cfg.steps {
        let slot = step % per_epoch;
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let picked: Vec<&Image> = order[slot * batch..(slot + 1) * batch].iter().map(|&i| &images[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Image::batch(&picked)?);
        let loss = model.loss(&mut tape, x)?;
        model.store.zero_grad();
        tape.backward(loss.total, &mut model.store)?;
        opt.step(&mut model.store, cfg.lr)?;

        let fwd = &loss.forward;
        let k_top = model.config.top_codes();
        let ppl_top = perplexity(&fwd.top.indices, k_top)?;
        let ppl_bottom = match &fwd.bottom {
            Some(b) => perplexity(&b.indices, model.config.bottom_codes())?,
            None => 0.0,
        };
        usage[0].counts.iter_mut().zip(count(&fwd.top.indices, k_top)).for_each(|(c, n)| *c += n);
        if let Some(b) = &fwd.bottom {
            let u = usage.last_mut().expect("nonempty");
            let k = u.counts.len();
            u.counts.iter_mut().zip(count(&b.indices, k)).for_each(|(c, n)| *c += n);
        }
        let row = TokenizerLogRow {
            step,
            loss: tape.value(loss.total).data()[0],
            recon: loss.parts.recon,
            commit_top: loss.parts.commit_top,
            commit_bottom: loss.parts.commit_bottom,
            ppl_top,
            ppl_bottom,
        };
        on_step(&row);
        report.log.push(row);

        if cfg.dead_code_revival && slot + 1 == per_epoch && step + 1 < cfg.steps {
            // A shared codebook draws replacements from each level equally
            // often; otherwise the longer bottom sequence would dominate.
            for u in &mut usage {
                let d = model.config.embed_dim;
                let mut pools: Vec<Vec<&[f32]>> = Vec::new();
                if u.id == top_id {
                    pools.push(tape.value(fwd.top.z_e).data().chunks(d).collect());
                }
                if let Some(b) = fwd.bottom.as_ref().filter(|_| u.id == bottom_id) {
                    pools.push(tape.value(b.z_e).data().chunks(d).collect());
                }
                let entries = model.store.get_mut(u.id).value.data_mut();
                for (code, c) in u.counts.iter_mut().enumerate() {
                    if *c == 0 {
                        let pool = &pools[rng.gen_range(0..pools.len())];
                        let src = pool[rng.gen_range(0..pool.len())];
                        for (e, &s) in entries[code * d..(code + 1) * d].iter_mut().zip(src) {
                            let noise: f32 = rng.sample(StandardNormal);
                            *e = s + 0.01 * noise;
                        }
                        opt.reset_state(u.id, code * d..(code + 1) * d);
                        report.revived += 1;
                    }
                    *c = 0;
                }
            }
        }
    }
    let tail = &report.log[report.log.len().saturating_sub(cfg.ppl_window)..];
    if !tail.is_empty() {
        report.ppl_top = tail.iter().map(|r| r.ppl_top).sum::<f64>() / tail.len() as f64;
        report.ppl_bottom = tail.iter().map(|r| r.ppl_bottom).sum::<f64>() / tail.len() as f64;
    }
    Ok(report)
}

fn count(indices: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &i in indices {
        c[i] += 1;
    }
    c
}

/// Mean PSNR of the quantized reconstruction over `images`, in chunks of `batch`.
pub fn mean_psnr(model: &Tokenizer, images: &[Image], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(batch.max(1)) {
        let recon = model.reconstruct(chunk)?;
        total += chunk.iter().zip(&recon).map(|(a, b)| a.psnr(b)).sum::<f64>();
    }
    Ok(total / images.len() as f64)
}

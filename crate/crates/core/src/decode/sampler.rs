use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{commit_counts, Schedule};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nar::MaskedTransformer;
use crate::tensor::kernels::log_softmax_row;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub steps_top: usize,
    pub steps_bottom: usize,
    pub schedule: Schedule,
    /// Sampling temperature; 0 selects the argmax.
    pub temperature: f32,
    /// Base scale of the Gumbel noise added to confidences, annealed to 0.
    pub confidence_temperature: f32,
    pub guidance_scale: f32,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            steps_top: 18,
            steps_bottom: 6,
            schedule: Schedule::Cosine,
            temperature: 1.0,
            confidence_temperature: 1.0,
            guidance_scale: 0.2,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_top == 0 || self.steps_bottom == 0 {
            return Err(Error::Config("each level needs at least one decoding step".into()));
        }
        for (name, v) in [
            ("temperature", self.temperature),
            ("confidence temperature", self.confidence_temperature),
            ("guidance scale", self.guidance_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(1+s)·cond − s·uncond`; returns `cond` unchanged when `s == 0`.
pub fn guided_logits(cond: &Tensor, uncond: &Tensor, s: f32) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return dim_err(format!("guidance shapes {:?} and {:?} differ", cond.shape(), uncond.shape()));
    }
    if s == 0.0 {
        return Ok(cond.clone());
    }
    let data = cond.data().iter().zip(uncond.data()).map(|(&c, &u)| (1.0 + s) * c - s * u).collect();
    Tensor::new(cond.shape().to_vec(), data)
}

fn standard_gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Sample a proposal at every masked position of `logits[L, K]` and score
/// it by its log-probability plus `tau_c`-scaled Gumbel noise. Positions
/// that are not masked get no proposal and confidence `+∞`.
pub fn sample_and_score<R: Rng>(
    logits: &[f32],
    k: usize,
    tau: f32,
    tau_c: f64,
    masked: &[bool],
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("sampling temperature must be non-negative, got {tau}")));
    }
    if k == 0 || logits.len() != masked.len() * k {
        return dim_err(format!("{} logits for {} positions", logits.len(), masked.len()));
    }
    if !masked.iter().any(|&m| m) {
        return contract_err("sample_and_score needs at least one masked position");
    }
    let mut proposals = vec![usize::MAX; masked.len()];
    let mut confidence = vec![f64::INFINITY; masked.len()];
    let mut logp = vec![0f32; k];
    let mut scaled = vec![0f32; k];
    for (i, &m) in masked.iter().enumerate() {
        if !m {
            continue;
        }
        let row = &logits[i * k..(i + 1) * k];
        log_softmax_row(row, &mut logp);
        let pick = if tau == 0.0 {
            argmax(&logp)
        } else {
            for (s, &l) in scaled.iter_mut().zip(row) {
                *s = l / tau;
            }
            let mut probs = vec![0f32; k];
            log_softmax_row(&scaled, &mut probs);
            let u: f64 = rng.gen();
            let mut acc = 0f64;
            let mut pick = k - 1;
            for (j, &lp) in probs.iter().enumerate() {
                acc += (lp as f64).exp();
                if u < acc {
                    pick = j;
                    break;
                }
            }
            pick
        };
        proposals[i] = pick;
        let noise = if tau_c > 0.0 { tau_c * standard_gumbel(rng) } else { 0.0 };
        confidence[i] = logp[pick] as f64 + noise;
    }
    Ok((proposals, confidence))
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// One row of the per-step decoding audit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub level: &'static str,
    pub step: usize,
    pub committed: usize,
    pub mean_confidence: f64,
    /// Canvas of every row after this step (`MASK` where undecided).
    pub canvas: Vec<usize>,
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("level,step,committed,mean_confidence\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6}\n", r.level, r.step, r.committed, r.mean_confidence));
    }
    out
}

/// Inputs of one decoding pass over a batch of rows.
pub struct LevelRequest<'a> {
    pub class_ids: &'a [usize],
    pub steps: usize,
    /// Pre-committed tokens (`Some(id)`) per position of every row.
    pub frozen: Option<&'a [Option<usize>]>,
    /// Conditioning top tokens for the bottom model.
    pub cond: Option<&'a [usize]>,
}

/// Iterative parallel decoding of one level. Returns the filled rows and
/// the number of model forward passes.
pub fn decode_level(
    model: &MaskedTransformer,
    req: &LevelRequest<'_>,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
    mut audit: Option<&mut Vec<AuditRow>>,
) -> Result<(Vec<usize>, usize)> {
    cfg.validate()?;
    let (l, k) = (model.config.seq_len, model.config.codes);
    let layout = model.layout();
    let b = req.class_ids.len();
    if req.steps == 0 {
        return Err(Error::Config("at least one decoding step is required".into()));
    }
    let mut tokens = vec![layout.mask_id(); b * l];
    if let Some(frozen) = req.frozen {
        if frozen.len() != b * l {
            return contract_err(format!("{} frozen entries for {b} rows of length {l}", frozen.len()));
        }
        for (t, f) in tokens.iter_mut().zip(frozen) {
            if let Some(id) = *f {
                if id >= k {
                    return Err(Error::Validation(format!("frozen token {id} outside [0,{k})")));
                }
                *t = id;
            }
        }
    }
    let level = match model.level() {
        crate::nar::Level::Top => "top",
        crate::nar::Level::Bottom => "bottom",
    };
    // Steps are capped by the number of free positions in each row.
    let plans: Vec<Vec<usize>> = tokens
        .chunks(l)
        .map(|row| {
            let free = row.iter().filter(|&&t| t == layout.mask_id()).count();
            if free == 0 {
                Ok(Vec::new())
            } else {
                commit_counts(cfg.schedule, req.steps.min(free), free)
            }
        })
        .collect::<Result<_>>()?;
    let total_steps = plans.iter().map(Vec::len).max().unwrap_or(0);
    let null = vec![layout.null_class(); b];
    let mut calls = 0;
    for t in 0..total_steps {
        let cond_logits = model.logits(&tokens, req.class_ids, req.cond)?;
        calls += 1;
        let logits = if cfg.guidance_scale > 0.0 {
            let uncond = model.logits(&tokens, &null, req.cond)?;
            calls += 1;
            guided_logits(&cond_logits, &uncond, cfg.guidance_scale)?
        } else {
            cond_logits
        };
        let (mut conf_sum, mut conf_n) = (0.0, 0usize);
        for (r, plan) in plans.iter().enumerate() {
            let Some(&count) = plan.get(t) else { continue };
            let row = &mut tokens[r * l..(r + 1) * l];
            let masked: Vec<bool> = row.iter().map(|&x| x == layout.mask_id()).collect();
            let steps = plan.len();
            let tau_c = cfg.confidence_temperature as f64 * (1.0 - (t + 1) as f64 / steps as f64);
            let row_logits = &logits.data()[r * l * k..(r + 1) * l * k];
            let (proposals, confidence) = sample_and_score(row_logits, k, cfg.temperature, tau_c, &masked, rng)?;
            let mut order: Vec<usize> = (0..l).filter(|&i| masked[i]).collect();
            // stable: equal confidences keep position order
            order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]));
            for &i in &order[..count] {
                row[i] = proposals[i];
                conf_sum += confidence[i];
                conf_n += 1;
            }
        }
        if let Some(log) = audit.as_deref_mut() {
            log.push(AuditRow {
                level,
                step: t + 1,
                committed: tokens.iter().filter(|&&x| x != layout.mask_id()).count(),
                mean_confidence: conf_sum / conf_n.max(1) as f64,
                canvas: tokens.clone(),
            });
        }
    }
    debug_assert!(tokens.iter().all(|&x| x < k));
    Ok((tokens, calls))
}

//! Tiny untrained tokenizer + level models, and the decoder / editing
//! invariant checks shared by the decode tests and the acceptance harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strata::data::Image;
use strata::decode::{commit_counts, decode_level, sample_and_score, AuditRow, DecodeConfig, Generator, LevelRequest, Schedule};
use strata::nar::{Level, MaskedTransformer, TransformerConfig};
use strata::vq::{Tokenizer, TokenizerConfig};

pub const TRIALS: [(usize, usize); 5] = [(1, 16), (8, 16), (16, 16), (6, 64), (24, 64)];

pub fn tiny_tokenizer(seed: u64) -> Tokenizer {
    let cfg = TokenizerConfig {
        image_size: 32,
        channels: 16,
        embed_dim: 8,
        codebook_size: 8,
        res_blocks: 1,
        norm_groups: 4,
        ..Default::default()
    };
    Tokenizer::new(cfg, seed).unwrap()
}

pub fn tiny_stack(seed: u64) -> (Tokenizer, MaskedTransformer, MaskedTransformer) {
    (tiny_tokenizer(seed), super::tiny_transformer(Level::Top, seed + 1), super::tiny_transformer(Level::Bottom, seed + 2))
}

/// A top-level model over sequences of length `len`.
pub fn flat_model(len: usize, seed: u64) -> MaskedTransformer {
    let mut cfg: TransformerConfig = super::tiny_transformer(Level::Top, seed).config;
    cfg.seq_len = len;
    MaskedTransformer::new(cfg, seed).unwrap()
}

/// Masked fraction after a fraction `u` of the steps, written out per name.
pub fn gamma_oracle(name: &str, u: f64) -> f64 {
    let e = std::f64::consts::E;
    let g = match name {
        "cosine" => (u * std::f64::consts::PI / 2.0).cos(),
        "linear" => 1.0 - u,
        "square" => 1.0 - u.powi(2),
        "cubic" => 1.0 - u.powi(3),
        "exponential" => (e - u.exp()) / (e - 1.0),
        "square-root" => 1.0 - u.powf(0.5),
        "logarithmic" => 1.0 - (1.0 + u * (e - 1.0)).ln(),
        other => panic!("no oracle for {other}"),
    };
    g.max(0.0).min(1.0)
}

/// Independent recomputation of the per-step commit counts.
pub fn counts_oracle(name: &str, steps: usize, len: usize) -> Vec<usize> {
    let mut remaining = len;
    let mut out = Vec::new();
    for t in 1..=steps {
        let want = (gamma_oracle(name, t as f64 / steps as f64) * len as f64).floor() as usize;
        let floor = steps - t;
        let ceil = remaining - 1;
        let next = want.max(floor).min(ceil);
        out.push(remaining - next);
        remaining = next;
    }
    out
}

pub fn check_counts(schedule: Schedule, steps: usize, len: usize) -> Result<(), String> {
    let counts = commit_counts(schedule, steps, len).map_err(|e| e.to_string())?;
    let ctx = format!("{schedule} T={steps} L={len}");
    if counts.len() != steps {
        return Err(format!("{ctx}: {} steps planned", counts.len()));
    }
    if counts.iter().sum::<usize>() != len {
        return Err(format!("{ctx}: counts sum to {}", counts.iter().sum::<usize>()));
    }
    if counts.contains(&0) {
        return Err(format!("{ctx}: a step commits nothing"));
    }
    if counts != counts_oracle(schedule.name(), steps, len) {
        return Err(format!("{ctx}: {counts:?} differs from the recomputation"));
    }
    Ok(())
}

/// Walk an audit log of one decoding pass over `rows` rows of length `len`:
/// committed tokens never change, each step commits the planned count, and
/// nothing is masked at the end.
pub fn check_audit(audit: &[AuditRow], plan: &[usize], rows: usize, len: usize, mask: usize) -> Result<(), String> {
    if audit.len() != plan.len() {
        return Err(format!("{} audit rows for {} steps", audit.len(), plan.len()));
    }
    let mut prev = vec![mask; rows * len];
    let mut committed = 0;
    for (row, &count) in audit.iter().zip(plan) {
        for (i, (&a, &b)) in prev.iter().zip(&row.canvas).enumerate() {
            if a != mask && a != b {
                return Err(format!("step {}: position {i} changed {a} -> {b}", row.step));
            }
        }
        committed += count * rows;
        let now = row.canvas.iter().filter(|&&x| x != mask).count();
        if now != committed || row.committed != committed {
            return Err(format!("step {}: {now} committed, expected {committed}", row.step));
        }
        prev = row.canvas.clone();
    }
    if prev.contains(&mask) {
        return Err("tokens still masked after the last step".into());
    }
    Ok(())
}

fn cfg(seed: u64, schedule: Schedule, guidance: f32) -> DecodeConfig {
    DecodeConfig { schedule, guidance_scale: guidance, seed, ..Default::default() }
}

/// Conditional-only decoding written directly against the model, used as
/// the reference for guidance scale 0.
pub fn conditional_decode(model: &MaskedTransformer, classes: &[usize], steps: usize, cfg: &DecodeConfig) -> Vec<usize> {
    let (l, k, mask) = (model.config.seq_len, model.config.codes, model.layout().mask_id());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = counts_oracle(cfg.schedule.name(), steps, l);
    let mut tokens = vec![mask; classes.len() * l];
    for (t, &count) in plan.iter().enumerate() {
        let logits = model.logits(&tokens, classes, None).unwrap();
        let tau_c = cfg.confidence_temperature as f64 * (1.0 - (t + 1) as f64 / steps as f64);
        for r in 0..classes.len() {
            let row = &mut tokens[r * l..(r + 1) * l];
            let masked: Vec<bool> = row.iter().map(|&x| x == mask).collect();
            let (prop, conf) =
                sample_and_score(&logits.data()[r * l * k..(r + 1) * l * k], k, cfg.temperature, tau_c, &masked, &mut rng).unwrap();
            let mut order: Vec<usize> = (0..l).filter(|&i| masked[i]).collect();
            order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
            for &i in &order[..count] {
                row[i] = prop[i];
            }
        }
    }
    tokens
}

fn bits(images: &[Image]) -> Vec<u32> {
    images.iter().flat_map(|im| im.data().iter().map(|v| v.to_bits())).collect()
}

/// Every decoder invariant over all schedules and trial shapes. Returns the
/// number of (schedule, T, L) cases checked.
pub fn decoder_invariants() -> Result<usize, String> {
    let mut cases = 0;
    for schedule in Schedule::ALL {
        for (steps, len) in TRIALS {
            check_counts(schedule, steps, len)?;
            let model = flat_model(len, len as u64);
            let classes = [0, 2];
            let mut audit = Vec::new();
            let req = LevelRequest { class_ids: &classes, steps, frozen: None, cond: None };
            let c = cfg(7, schedule, 0.2);
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
            let (out, calls) = decode_level(&model, &req, &c, &mut rng, Some(&mut audit)).map_err(|e| e.to_string())?;
            if calls != 2 * steps {
                return Err(format!("{calls} model calls for {steps} guided steps"));
            }
            check_audit(&audit, &counts_oracle(schedule.name(), steps, len), classes.len(), len, model.layout().mask_id())
                .map_err(|e| format!("{schedule} T={steps} L={len}: {e}"))?;
            if audit.last().map(|a| &a.canvas) != Some(&out) {
                return Err("final audit canvas differs from the output".into());
            }

            let plain = cfg(11, schedule, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(plain.seed);
            let (s0, _) = decode_level(&model, &req, &plain, &mut rng, None).map_err(|e| e.to_string())?;
            if s0 != conditional_decode(&model, &classes, steps, &plain) {
                return Err(format!("{schedule} T={steps} L={len}: s=0 differs from conditional decoding"));
            }
            cases += 1;
        }
    }
    let (tok, top, bottom) = tiny_stack(20);
    let g = Generator::new(&tok, &top, &bottom).map_err(|e| e.to_string())?;
    let c = DecodeConfig { steps_top: 3, steps_bottom: 5, seed: 3, ..Default::default() };
    let a = g.generate(&[0, 1, 2, 1], &c, true).map_err(|e| e.to_string())?;
    let b = g.generate(&[0, 1, 2, 1], &c, true).map_err(|e| e.to_string())?;
    if a.grids != b.grids || bits(&a.images) != bits(&b.images) || a.audit != b.audit {
        return Err("fixed-seed generation is not reproducible".into());
    }
    Ok(cases)
}

/// Inpainting keeps every frozen token; full-keep transfer keeps the top
/// grid and decodes the whole bottom grid from a blank canvas.
pub fn editing_conservation() -> Result<(), String> {
    let (tok, top, bottom) = tiny_stack(30);
    let g = Generator::new(&tok, &top, &bottom).map_err(|e| e.to_string())?;
    let sample = strata::data::shapes::generate(32, 5, 0);
    let size = 32;
    let c = DecodeConfig { steps_top: 2, steps_bottom: 4, seed: 9, ..Default::default() };

    // fill the right half: the left top column and left two bottom columns stay
    let region: Vec<bool> = (0..size * size).map(|i| i % size >= size / 2).collect();
    let (out, source) = g.inpaint(&sample.image, &region, 1, &c).map_err(|e| e.to_string())?;
    let grid = &out.grids[0];
    let (ts, bs) = (tok.config.top_side(), tok.config.bottom_side());
    for i in 0..ts * ts {
        if i % ts < ts / 2 && grid.top[i] != source.top[i] {
            return Err(format!("inpainting changed frozen top token {i}"));
        }
    }
    for i in 0..bs * bs {
        if i % bs < bs / 2 && grid.bottom[i] != source.bottom[i] {
            return Err(format!("inpainting changed frozen bottom token {i}"));
        }
    }

    let (out, source) = g.domain_transfer(&sample.image, 2, None, &c).map_err(|e| e.to_string())?;
    if out.grids[0].top != source.top {
        return Err("transfer changed the top grid".into());
    }
    // reference: bottom decoded from an all-MASK canvas under the kept top
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut audit = Vec::new();
    let req = LevelRequest { class_ids: &[2], steps: c.steps_bottom, frozen: None, cond: Some(&source.top) };
    let (expected, _) = decode_level(&bottom, &req, &c, &mut rng, Some(&mut audit)).map_err(|e| e.to_string())?;
    if out.grids[0].bottom != expected {
        return Err("transfer bottom is not a full re-prediction".into());
    }
    let plan = counts_oracle(c.schedule.name(), c.steps_bottom, bottom.config.seq_len);
    check_audit(&audit, &plan, 1, bottom.config.seq_len, bottom.layout().mask_id())?;
    Ok(())
}

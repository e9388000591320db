mod common;

use common::stack::{self, check_counts, counts_oracle, flat_model};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strata::decode::{commit_counts, decode_level, guided_logits, DecodeConfig, Generator, LevelRequest, Schedule};
use strata::tensor::Tensor;
use strata::Error;

#[test]
fn decoder_invariants_hold_on_every_trial() {
    assert_eq!(stack::decoder_invariants().unwrap(), 35);
}

#[test]
fn editing_conserves_tokens() {
    stack::editing_conservation().unwrap();
}

#[test]
fn zero_steps_are_rejected() {
    let (tok, top, bottom) = stack::tiny_stack(1);
    let g = Generator::new(&tok, &top, &bottom).unwrap();
    for (t, b) in [(0, 6), (18, 0)] {
        let cfg = DecodeConfig { steps_top: t, steps_bottom: b, ..Default::default() };
        assert!(matches!(g.generate(&[0], &cfg, false), Err(Error::Config(_))));
    }
    assert!(matches!(g.generate(&[3], &DecodeConfig::default(), false), Err(Error::Validation(_))));
    assert!(Generator::new(&tok, &bottom, &top).is_err());
}

#[test]
fn steps_are_capped_by_free_positions() {
    let model = flat_model(16, 2);
    let frozen: Vec<Option<usize>> = (0..16).map(|i| (i >= 3).then_some(i % 8)).collect();
    let req = LevelRequest { class_ids: &[1], steps: 10, frozen: Some(&frozen), cond: None };
    let cfg = DecodeConfig { guidance_scale: 0.0, ..Default::default() };
    let mut audit = Vec::new();
    let (out, calls) = decode_level(&model, &req, &cfg, &mut ChaCha8Rng::seed_from_u64(0), Some(&mut audit)).unwrap();
    assert_eq!(calls, 3);
    assert_eq!(audit.len(), 3);
    for i in 3..16 {
        assert_eq!(out[i], i % 8);
    }
    assert!(out.iter().all(|&t| t < 8));
}

#[test]
fn generated_images_match_detokenized_grids() {
    let (tok, top, bottom) = stack::tiny_stack(4);
    let g = Generator::new(&tok, &top, &bottom).unwrap();
    let cfg = DecodeConfig { steps_top: 2, steps_bottom: 3, ..Default::default() };
    let out = g.generate(&[0, 1], &cfg, false).unwrap();
    assert_eq!(out.model_calls, 2 * (2 + 3));
    assert_eq!(out.images, tok.detokenize(&out.grids).unwrap());
    let other = g.generate(&[0, 1], &DecodeConfig { seed: 1, ..cfg }, false).unwrap();
    assert_ne!(out.grids, other.grids);
}

proptest! {
    #[test]
    fn commit_counts_match_the_recomputation(len in 1usize..300, t_frac in 0.0f64..1.0, idx in 0usize..7) {
        let steps = 1 + ((len - 1) as f64 * t_frac) as usize;
        let schedule = Schedule::ALL[idx];
        prop_assert!(check_counts(schedule, steps, len).is_ok(), "{:?}", check_counts(schedule, steps, len));
        prop_assert_eq!(commit_counts(schedule, steps, len).unwrap(), counts_oracle(schedule.name(), steps, len));
    }

    #[test]
    fn schedules_fall_monotonically(u in 0.0f64..1.0, v in 0.0f64..1.0, idx in 0usize..7) {
        let s = Schedule::ALL[idx];
        let (lo, hi) = if u < v { (u, v) } else { (v, u) };
        prop_assert!(s.gamma(lo) >= s.gamma(hi));
        prop_assert!((s.gamma(u) - stack::gamma_oracle(s.name(), u)).abs() < 1e-12);
    }

    #[test]
    fn zero_guidance_is_the_identity(data in prop::collection::vec(-1e3f32..1e3, 1..64), seed in any::<u64>()) {
        let cond = Tensor::new(vec![data.len()], data.clone()).unwrap();
        let uncond = common::randn(&[data.len()], &mut ChaCha8Rng::seed_from_u64(seed));
        let out = guided_logits(&cond, &uncond, 0.0).unwrap();
        prop_assert!(out.data().iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

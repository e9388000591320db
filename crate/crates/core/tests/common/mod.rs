//! Shared oracles for the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strata::nar::{apply_mask, masked_nll, Level, MaskedBatch, MaskedTransformer, TransformerConfig};
use strata::tensor::{ParamStore, Tape, Tensor, Var};
use strata::Result;

pub mod reference;
pub mod stack;

use reference::Arr;

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
pub type RefFn = Box<dyn Fn(&[Arr]) -> Arr>;

/// A tape op paired with an independent f64 forward implementation.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
    pub reference: RefFn,
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    reference: impl Fn(&[Arr]) -> Arr + 'static,
) -> OpCase {
    OpCase { name, inputs, f: Box::new(f), reference: Box::new(reference) }
}

const EMB_IDS: [usize; 4] = [4, 0, 4, 2];
const CE_TARGETS: [usize; 4] = [1, 0, 4, 2];
const CE_WEIGHTS: [f32; 4] = [1.0, 0.0, 2.0, 0.5];

/// Every differentiable tape op on small random inputs.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use reference as r;
    let g = &mut ChaCha8Rng::seed_from_u64(seed);
    vec![
        case("matmul", vec![randn(&[4, 5], g), randn(&[5, 3], g)], |t, v| t.matmul(v[0], v[1]), |x| r::matmul(&x[0], &x[1])),
        case("matmul_batched", vec![randn(&[2, 3, 4], g), randn(&[4, 2], g)], |t, v| t.matmul(v[0], v[1]), |x| {
            r::matmul(&x[0], &x[1])
        }),
        case("bmm", vec![randn(&[2, 3, 4], g), randn(&[2, 4, 5], g)], |t, v| t.bmm(v[0], v[1], false), |x| {
            r::bmm(&x[0], &x[1], false)
        }),
        case("bmm_trans", vec![randn(&[2, 3, 4], g), randn(&[2, 5, 4], g)], |t, v| t.bmm(v[0], v[1], true), |x| {
            r::bmm(&x[0], &x[1], true)
        }),
        case("add", vec![randn(&[3, 4], g), randn(&[3, 4], g)], |t, v| t.add(v[0], v[1]), |x| r::zip(&x[0], &x[1], |a, b| a + b)),
        case("sub", vec![randn(&[3, 4], g), randn(&[3, 4], g)], |t, v| t.sub(v[0], v[1]), |x| r::zip(&x[0], &x[1], |a, b| a - b)),
        case("mul", vec![randn(&[3, 4], g), randn(&[3, 4], g)], |t, v| t.mul(v[0], v[1]), |x| r::zip(&x[0], &x[1], |a, b| a * b)),
        case("add_bias", vec![randn(&[2, 3, 4], g), randn(&[4], g)], |t, v| t.add_bias(v[0], v[1]), |x| r::add_bias(&x[0], &x[1])),
        case("scale", vec![randn(&[3, 4], g)], |t, v| t.scale(v[0], -1.7), |x| x[0].map(|a| -1.7 * a)),
        case("sum", vec![randn(&[3, 4], g)], |t, v| t.sum(v[0]), |x| Arr::scalar(x[0].data.iter().sum())),
        case("mean", vec![randn(&[3, 4], g)], |t, v| t.mean(v[0]), |x| {
            Arr::scalar(x[0].data.iter().sum::<f64>() / x[0].data.len() as f64)
        }),
        case("mse", vec![randn(&[3, 4], g), randn(&[3, 4], g)], |t, v| t.mse(v[0], v[1]), |x| {
            let d = r::zip(&x[0], &x[1], |a, b| (a - b) * (a - b));
            Arr::scalar(d.data.iter().sum::<f64>() / d.data.len() as f64)
        }),
        case("softmax", vec![randn(&[3, 5], g)], |t, v| t.softmax(v[0]), |x| r::softmax(&x[0])),
        case(
            "layer_norm",
            vec![randn(&[3, 6], g), randn(&[6], g), randn(&[6], g)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
            |x| r::group_norm(&x[0].reshaped(&[3, 1, 6]), 1, &x[1], &x[2], 1e-5).reshaped(&[3, 6]),
        ),
        case(
            "group_norm",
            vec![randn(&[2, 2, 2, 4], g), randn(&[4], g), randn(&[4], g)],
            |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5),
            |x| r::group_norm(&x[0], 2, &x[1], &x[2], 1e-5),
        ),
        case("swish", vec![randn(&[3, 4], g)], |t, v| t.swish(v[0]), |x| x[0].map(|a| a * r::sigmoid(a))),
        case("gelu", vec![randn(&[3, 4], g)], |t, v| t.gelu(v[0]), |x| x[0].map(r::gelu)),
        case("sigmoid", vec![randn(&[3, 4], g)], |t, v| t.sigmoid(v[0]), |x| x[0].map(r::sigmoid)),
        case("embedding", vec![randn(&[5, 3], g)], |t, v| t.embedding(v[0], &EMB_IDS), |x| r::embedding(&x[0], &EMB_IDS)),
        case("reshape", vec![randn(&[2, 6], g)], |t, v| t.reshape(v[0], &[3, 4]), |x| x[0].reshaped(&[3, 4])),
        case("permute", vec![randn(&[2, 3, 4], g)], |t, v| t.permute(v[0], &[2, 0, 1]), |x| r::permute(&x[0], &[2, 0, 1])),
        case("narrow", vec![randn(&[2, 5, 3], g)], |t, v| t.narrow(v[0], 1, 1, 3), |x| r::narrow(&x[0], 1, 1, 3)),
        case("concat", vec![randn(&[2, 3], g), randn(&[2, 2], g)], |t, v| t.concat(&[v[0], v[1]], 1), |x| {
            r::concat(&[&x[0], &x[1]], 1)
        }),
        case("upsample2x", vec![randn(&[1, 2, 3, 2], g)], |t, v| t.upsample2x(v[0]), |x| r::upsample2x(&x[0])),
        case("avg_pool2x", vec![randn(&[1, 4, 4, 2], g)], |t, v| t.avg_pool2x(v[0]), |x| r::avg_pool2x(&x[0])),
        case("im2col3x3", vec![randn(&[1, 3, 3, 2], g)], |t, v| t.im2col3x3(v[0]), |x| r::im2col3x3(&x[0])),
        case("patchify", vec![randn(&[1, 4, 4, 2], g)], |t, v| t.patchify(v[0], 2), |x| r::patchify(&x[0], 2)),
        case("unpatchify", vec![randn(&[1, 2, 2, 8], g)], |t, v| t.unpatchify(v[0], 2), |x| r::unpatchify(&x[0], 2)),
        case(
            "cross_entropy",
            vec![randn(&[4, 5], g)],
            |t, v| t.cross_entropy(v[0], &CE_TARGETS, Some(&CE_WEIGHTS), 0.1),
            |x| r::cross_entropy(&x[0], &CE_TARGETS, &CE_WEIGHTS, 0.1),
        ),
        case(
            "dropout",
            vec![randn(&[3, 4], g)],
            |t, v| t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(5)),
            |x| r::dropout(&x[0], 0.3, &mut ChaCha8Rng::seed_from_u64(5)),
        ),
    ]
}

fn projected(case: &OpCase, inputs: &[Arr], w: &[f64]) -> f64 {
    (case.reference)(inputs).data.iter().zip(w).map(|(o, w)| o * w).sum()
}

/// Worst relative error between the tape's gradients of `Σ w ⊙ op(x)` and
/// central differences of the f64 reference forward, over `probes` random
/// input elements.
pub fn op_gradcheck(case: &OpCase, probes: usize, eps: f64, seed: u64) -> Result<f64> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.f)(&mut tape, &vars)?;
    let n = tape.value(out).numel();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt = tape.constant(Tensor::new(tape.shape(out).to_vec(), w.iter().map(|&x| x as f32).collect())?);
    let prod = tape.mul(out, wt)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss, &mut ParamStore::new())?;
    let grads: Vec<Vec<f32>> = vars.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_default()).collect();
    let w: Vec<f64> = w.iter().map(|&x| x as f32 as f64).collect();
    let base: Vec<Arr> = case.inputs.iter().map(Arr::from_tensor).collect();

    let mut worst = 0f64;
    for _ in 0..probes {
        let i = rng.gen_range(0..base.len());
        let j = rng.gen_range(0..base[i].data.len());
        let analytic = grads[i].get(j).copied().unwrap_or(0.0) as f64;
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i].data[j] += eps;
        minus[i].data[j] -= eps;
        let numeric = (projected(case, &plus, &w) - projected(case, &minus, &w)) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Largest relative difference between the tape forward and the reference.
pub fn op_forward_error(case: &OpCase) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.f)(&mut tape, &vars)?;
    let base: Vec<Arr> = case.inputs.iter().map(Arr::from_tensor).collect();
    let expected = (case.reference)(&base);
    assert_eq!(tape.shape(out), expected.shape.as_slice(), "{}", case.name);
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(&expected.data)
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max))
}

pub fn tiny_transformer(level: Level, seed: u64) -> MaskedTransformer {
    let cfg = TransformerConfig {
        level,
        layers: 2,
        heads: 2,
        dim: 16,
        mlp_dim: 32,
        dropout: 0.0,
        seq_len: if level == Level::Top { 4 } else { 16 },
        cond_len: if level == Level::Top { 0 } else { 4 },
        codes: 8,
        cond_codes: 8,
        classes: 3,
    };
    MaskedTransformer::new(cfg, seed).unwrap()
}

/// A fixed masked batch for `model` and the matching conditioning rows.
pub fn masked_batch(model: &MaskedTransformer, rows: usize, seed: u64) -> (MaskedBatch, Option<Vec<usize>>) {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let c = &model.config;
    let targets: Vec<usize> = (0..rows * c.seq_len).map(|_| rng.gen_range(0..c.codes)).collect();
    let classes: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..c.classes)).collect();
    let mb = apply_mask(&targets, &classes, c.seq_len, 0.5, model.layout(), rng).unwrap();
    let cond = (c.cond_len > 0).then(|| (0..rows * c.cond_len).map(|_| rng.gen_range(0..c.cond_codes)).collect());
    (mb, cond)
}

fn loss_of(model: &MaskedTransformer, mb: &MaskedBatch, cond: Option<&[usize]>) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &mb.tokens, &mb.class_ids, cond, None)?;
    let loss = masked_nll(&mut tape, logits, &mb.targets, &mb.mask, 0.1)?;
    Ok((tape, loss))
}

/// Finite-difference check of the full masked loss of a small model on
/// `probes` random parameters whose gradient is not negligible.
pub fn model_gradcheck(level: Level, probes: usize, eps: f32, seed: u64) -> Result<f64> {
    let mut model = tiny_transformer(level, seed);
    let (mb, cond) = masked_batch(&model, 3, seed);
    let (mut tape, loss) = loss_of(&model, &mb, cond.as_deref())?;
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    let mut candidates = Vec::new();
    for (p, param) in model.store.iter().enumerate() {
        let Some(g) = &param.grad else { continue };
        for (j, &gj) in g.iter().enumerate() {
            if gj.abs() > 1e-2 {
                candidates.push((p, j, gj as f64));
            }
        }
    }
    assert!(candidates.len() >= probes, "only {} parameters with a usable gradient", candidates.len());
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let mut worst = 0f64;
    for _ in 0..probes {
        let (p, j, analytic) = candidates[rng.gen_range(0..candidates.len())];
        let eval = |delta: f32| -> Result<(f64, f32)> {
            let mut m = model.clone();
            let x = &mut m.store.iter_mut().nth(p).unwrap().value.data_mut()[j];
            *x += delta;
            let x = *x;
            let (tape, loss) = loss_of(&m, &mb, cond.as_deref())?;
            Ok((tape.value(loss).data()[0] as f64, x))
        };
        // fourth-order central stencil; h is the step actually taken in f32
        let (l1, x1) = eval(eps)?;
        let (l2, x2) = eval(-eps)?;
        let (l3, x3) = eval(2.0 * eps)?;
        let (l4, x4) = eval(-2.0 * eps)?;
        let h = (x1 as f64 - x2 as f64 + 0.5 * (x3 as f64 - x4 as f64)) / 4.0;
        let numeric = (8.0 * (l1 - l2) - (l3 - l4)) / (12.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
    }
    Ok(worst)
}

/// Exhaustive f64 scan, lowest index on ties.
pub fn nearest_oracle(features: &[f32], codebook: &Tensor) -> Vec<usize> {
    let d = codebook.last_dim();
    features
        .chunks(d)
        .map(|z| {
            let dists: Vec<f64> = codebook
                .data()
                .chunks(d)
                .map(|e| z.iter().zip(e).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
                .collect();
            (0..dists.len()).fold(0, |best, j| if dists[j] < dists[best] { j } else { best })
        })
        .collect()
}

/// Gradient reaching the encoder output through the straight-through
/// estimator is bit-equal to the gradient at the quantized values when they
/// enter the same downstream graph as a plain leaf.
pub fn straight_through_is_identity(seed: u64) -> bool {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&[6, 4], rng);
    let codebook = randn(&[5, 4], rng);
    let (_, q) = strata::vq::quantize(&x, &codebook).unwrap();
    let w = randn(&[4, 3], rng);
    let downstream = |tape: &mut Tape, z| {
        let wv = tape.constant(w.clone());
        let h = tape.matmul(z, wv).unwrap();
        let h = tape.gelu(h).unwrap();
        tape.mean(h).unwrap()
    };

    let mut st = Tape::new();
    let xv = st.leaf(x.clone());
    let zq = st.straight_through(xv, q.clone()).unwrap();
    let loss = downstream(&mut st, zq);
    st.backward(loss, &mut ParamStore::new()).unwrap();

    let mut id = Tape::new();
    let qv = id.leaf(q);
    let loss_id = downstream(&mut id, qv);
    id.backward(loss_id, &mut ParamStore::new()).unwrap();

    let bits = |g: &[f32]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    st.value(loss).data()[0].to_bits() == id.value(loss_id).data()[0].to_bits()
        && bits(st.grad(xv).unwrap()) == bits(id.grad(qv).unwrap())
}

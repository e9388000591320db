//! Small layer helpers shared by the tokenizer and the transformers.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Standard deviation used for weight init (truncated normal).
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Self::with_std(store, name, fan_in, fan_out, INIT_STD, rng)
    }

    /// Fan-in scaled init (`1/√fan_in`), used by the convolutional tokenizer.
    pub fn scaled<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Self::with_std(store, name, fan_in, fan_out, 1.0 / (fan_in as f32).sqrt(), rng)
    }

    /// Fan-in scaled init with no bias term.
    pub fn scaled_no_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f32).sqrt();
        let weight = store.add_trunc_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng)?;
        Ok(Self { weight, bias: None })
    }

    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_trunc_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng)?;
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[fan_out])?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_ones(format!("{name}.gain"), &[dim])?,
            bias: store.add_zeros(format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_ones(format!("{name}.gain"), &[channels])?,
            bias: store.add_zeros(format!("{name}.bias"), &[channels])?,
            groups,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.group_norm(x, self.groups, g, b, Self::EPS)
    }
}

use std::f64::consts::{E, FRAC_PI_2};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Masked-fraction schedule γ(u) on `u ∈ [0, 1]`, with γ(0) = 1 and γ(1) = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    Linear,
    Square,
    Cubic,
    Exponential,
    SquareRoot,
    Logarithmic,
}

impl Schedule {
    pub const ALL: [Schedule; 7] = [
        Schedule::Cosine,
        Schedule::Linear,
        Schedule::Square,
        Schedule::Cubic,
        Schedule::Exponential,
        Schedule::SquareRoot,
        Schedule::Logarithmic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Cosine => "cosine",
            Schedule::Linear => "linear",
            Schedule::Square => "square",
            Schedule::Cubic => "cubic",
            Schedule::Exponential => "exponential",
            Schedule::SquareRoot => "square-root",
            Schedule::Logarithmic => "logarithmic",
        }
    }

    pub fn gamma(self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let g = match self {
            Schedule::Cosine => (FRAC_PI_2 * u).cos(),
            Schedule::Linear => 1.0 - u,
            Schedule::Square => 1.0 - u * u,
            Schedule::Cubic => 1.0 - u * u * u,
            Schedule::Exponential => 1.0 - (u.exp() - 1.0) / (E - 1.0),
            Schedule::SquareRoot => 1.0 - u.sqrt(),
            Schedule::Logarithmic => 1.0 - (1.0 + (E - 1.0) * u).ln(),
        };
        g.clamp(0.0, 1.0)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Schedule::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Schedule::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown schedule `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Look up a schedule by name.
pub fn gamma(schedule: &str, u: f64) -> Result<f64> {
    Ok(schedule.parse::<Schedule>()?.gamma(u))
}

/// Tokens committed at each of the `steps` decoding steps for a sequence of
/// length `len`. The masked count after step t is `⌊len·γ(t/T)⌋`, clamped so
/// every step commits at least one token and the last step commits the rest.
pub fn commit_counts(schedule: Schedule, steps: usize, len: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Config("at least one decoding step is required".into()));
    }
    if steps > len {
        return Err(Error::Config(format!("{steps} steps exceed sequence length {len}")));
    }
    let mut counts = Vec::with_capacity(steps);
    let mut masked = len;
    for t in 1..=steps {
        let target = (len as f64 * schedule.gamma(t as f64 / steps as f64)).floor() as usize;
        let next = target.clamp(steps - t, masked - 1);
        counts.push(masked - next);
        masked = next;
    }
    Ok(counts)
}

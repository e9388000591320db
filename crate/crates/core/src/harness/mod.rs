//! Evaluation metrics and experiment reports.

mod frechet;
pub mod pipeline;

pub use frechet::{frechet_distance, gaussian_fit, toy_frechet, FeatureMap, FEATURE_DIM, FEATURE_SEED};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::{write_ppm, Image};
use crate::error::{Error, Result};
use crate::vq::{TokenGrid, Tokenizer};

pub const PAPER_LABEL: &str = "paper reference — not reproduced at desk scale";

/// One variant row of an experiment. Absent metrics are left empty in CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub seed: u64,
    pub ppl_top: Option<f64>,
    pub ppl_bottom: Option<f64>,
    pub utilization: Option<f64>,
    pub psnr: Option<f64>,
    pub toy_frechet: Option<f64>,
    pub wall_clock_s: Option<f64>,
    pub steps_top: Option<usize>,
    pub steps_bottom: Option<usize>,
    /// Wall-clock of the reference row divided by this row's.
    pub speed_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub id: String,
    pub config: String,
    pub rows: Vec<MetricRow>,
    /// `(label, value)` pairs from the paper, printed with [`PAPER_LABEL`].
    pub paper_reference: Vec<(String, f64)>,
    /// Outcome of the experiment's directional check, if it has one.
    pub assertion: Option<(bool, String)>,
}

fn cell<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl ExperimentReport {
    pub fn new(id: impl Into<String>, config: impl Into<String>) -> Self {
        Self { id: id.into(), config: config.into(), rows: Vec::new(), paper_reference: Vec::new(), assertion: None }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "experiment,variant,seed,ppl_top,ppl_bottom,utilization,psnr,toy_frechet,wall_clock_s,steps_top,steps_bottom,speed_ratio\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.id,
                r.variant,
                r.seed,
                cell(&r.ppl_top),
                cell(&r.ppl_bottom),
                cell(&r.utilization),
                cell(&r.psnr),
                cell(&r.toy_frechet),
                cell(&r.wall_clock_s),
                cell(&r.steps_top),
                cell(&r.steps_bottom),
                cell(&r.speed_ratio),
            );
        }
        out
    }

    /// Human-readable summary: config echo, paper reference, assertion.
    pub fn summary(&self) -> String {
        let mut out = format!("# experiment {}\n", self.id);
        for line in self.config.lines() {
            let _ = writeln!(out, "# config: {line}");
        }
        for (label, v) in &self.paper_reference {
            let _ = writeln!(out, "# {label} = {v} ({PAPER_LABEL})");
        }
        if let Some((ok, msg)) = &self.assertion {
            let _ = writeln!(out, "# check: {} {msg}", if *ok { "PASS" } else { "FAIL" });
        }
        out
    }

    /// Write `report.csv`, `summary.txt` and, if given, `sheet.ppm` into `dir`.
    pub fn write(&self, dir: &Path, sheet: Option<&Image>) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        if let Some(img) = sheet {
            write_ppm(img, dir.join("sheet.ppm"))?;
        }
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Uniformly random token grids, the reference point for generation quality.
pub fn random_grids<R: Rng>(tokenizer: &Tokenizer, count: usize, rng: &mut R) -> Result<Vec<TokenGrid>> {
    let c = &tokenizer.config;
    (0..count)
        .map(|_| {
            let top = (0..c.top_len()).map(|_| rng.gen_range(0..c.top_codes())).collect();
            let bottom = (0..c.bottom_len()).map(|_| rng.gen_range(0..c.bottom_codes())).collect();
            TokenGrid::new(top, bottom, c.top_codes(), c.bottom_codes())
        })
        .collect()
}

/// Fail unless `path` exists, naming it in the error.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Prerequisite(path.to_path_buf()))
    }
}

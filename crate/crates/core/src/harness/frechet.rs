//! Toy Fréchet distance: a stand-in for FID with a fixed random feature map.
//!
//! Each image becomes `[pixels − ½, horizontal diffs, vertical diffs]`,
//! projected by a Gaussian matrix drawn from [`FEATURE_SEED`] and squashed
//! with `tanh` into [`FEATURE_DIM`] features. Gaussians are fitted to both
//! feature sets and compared with the closed-form Fréchet distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Image;
use crate::error::{contract_err, dim_err, Result};

pub const FEATURE_SEED: u64 = 0x5EED_F1D;
pub const FEATURE_DIM: usize = 64;

pub struct FeatureMap {
    input: usize,
    weights: Vec<f32>,
}

impl FeatureMap {
    /// Map for `size × size` RGB images.
    pub fn new(size: usize) -> Self {
        let input = 3 * size * size * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let scale = 4.0 / (input as f32).sqrt();
        let weights = (0..FEATURE_DIM * input)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        Self { input, weights }
    }

    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w) = (image.height(), image.width());
        if 3 * h * w * 3 != self.input {
            return dim_err(format!("feature map built for another size than {h}x{w}"));
        }
        let d = image.data();
        let mut x = Vec::with_capacity(self.input);
        x.extend(d.iter().map(|v| v - 0.5));
        for y in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    let i = (y * w + xx) * 3 + c;
                    x.push(if xx + 1 < w { d[i + 3] - d[i] } else { 0.0 });
                }
            }
        }
        for y in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    let i = (y * w + xx) * 3 + c;
                    x.push(if y + 1 < h { d[i + 3 * w] - d[i] } else { 0.0 });
                }
            }
        }
        Ok(self
            .weights
            .chunks(self.input)
            .map(|row| (crate::tensor::kernels::dot(row, &x) as f64).tanh())
            .collect())
    }
}

/// Mean and unbiased covariance of the rows.
pub fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return contract_err("a Gaussian fit needs at least two samples");
    }
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped to 0.
/// The eigen solver can return NaN on nearly rank-deficient input (the
/// covariance of near-identical samples); SVD is the fallback there.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = m.amax();
    if scale < f64::MIN_POSITIVE {
        return DMatrix::zeros(m.nrows(), m.ncols());
    }
    let sym = (m + m.transpose()) * (0.5 / scale);
    let eig = SymmetricEigen::new(sym.clone());
    let root = if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).all(|v| v.is_finite()) {
        let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
    } else {
        let svd = sym.svd(true, true);
        let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        u * DMatrix::from_diagonal(&svd.singular_values.map(f64::sqrt)) * v_t
    };
    root * scale.sqrt()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(√Σ₁ Σ₂ √Σ₁)^½)`, clamped at 0.
pub fn frechet_distance(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let r1 = psd_sqrt(s1);
    let cross = psd_sqrt(&(&r1 * s2 * &r1));
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    if d.is_nan() {
        d
    } else {
        d.max(0.0)
    }
}

/// Toy Fréchet distance between two image sets.
pub fn toy_frechet(real: &[Image], generated: &[Image]) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return contract_err("toy Fréchet needs at least two images per side");
    }
    let map = FeatureMap::new(real[0].height());
    let fa: Vec<_> = real.iter().map(|i| map.features(i)).collect::<Result<_>>()?;
    let fb: Vec<_> = generated.iter().map(|i| map.features(i)).collect::<Result<_>>()?;
    let (m1, s1) = gaussian_fit(&fa)?;
    let (m2, s2) = gaussian_fit(&fb)?;
    Ok(frechet_distance(&m1, &s1, &m2, &s2))
}

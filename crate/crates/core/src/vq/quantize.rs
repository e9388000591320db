use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Nearest-neighbour lookup of each row of `features[L, D]` in
/// `codebook[K, D]` under squared L2 distance. Ties go to the lowest index.
pub fn nearest_codes(features: &[f32], codebook: &Tensor) -> Result<Vec<usize>> {
    let (k, d) = match *codebook.shape() {
        [k, d] => (k, d),
        ref s => return dim_err(format!("codebook must be [K, D], got {s:?}")),
    };
    if k < 2 {
        return contract_err("codebook needs at least two entries");
    }
    if !features.len().is_multiple_of(d) {
        return dim_err(format!("{} feature values are not a multiple of D={d}", features.len()));
    }
    let entries = codebook.data();
    let out = features
        .chunks(d)
        .map(|z| {
            let mut best = (f32::INFINITY, 0usize);
            for (j, e) in entries.chunks(d).enumerate() {
                let mut dist = 0f32;
                for (a, b) in z.iter().zip(e) {
                    let t = a - b;
                    dist += t * t;
                }
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1
        })
        .collect();
    Ok(out)
}

/// Quantize `features[L, D]`: indices of the nearest entries and the
/// gathered entries themselves.
pub fn quantize(features: &Tensor, codebook: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    let d = codebook.last_dim();
    if features.last_dim() != d {
        return dim_err(format!("feature dim {} != codebook dim {d}", features.last_dim()));
    }
    let indices = nearest_codes(features.data(), codebook)?;
    let quantized = lookup(&indices, codebook, features.shape())?;
    Ok((indices, quantized))
}

/// Gather codebook rows into a tensor of `shape` (trailing axis = D).
pub fn lookup(indices: &[usize], codebook: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (k, d) = (codebook.shape()[0], codebook.last_dim());
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= k {
            return Err(Error::Validation(format!("code {i} outside [0,{k})")));
        }
        data.extend_from_slice(&codebook.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(shape.to_vec(), data)
}

/// Code usage histogram over `[0, k)`.
fn histogram(indices: &[usize], k: usize) -> Result<Vec<usize>> {
    if indices.is_empty() {
        return contract_err("empty index set");
    }
    let mut counts = vec![0usize; k];
    for &i in indices {
        if i >= k {
            return Err(Error::Index(format!("code {i} outside [0,{k})")));
        }
        counts[i] += 1;
    }
    Ok(counts)
}

/// `2^H(p)` of the empirical code distribution, with `0·log 0 = 0`.
pub fn perplexity(indices: &[usize], k: usize) -> Result<f64> {
    let counts = histogram(indices, k)?;
    let n = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    Ok(entropy.exp2())
}

/// Fraction of the `k` codes that occur at least once.
pub fn codebook_utilization(indices: &[usize], k: usize) -> Result<f64> {
    let counts = histogram(indices, k)?;
    Ok(counts.iter().filter(|&&c| c > 0).count() as f64 / k as f64)
}

//! Naive f64 forward implementations, written from the op definitions
//! without sharing code with the tape.

use rand::Rng;
use strata::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1], vec![v])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Self {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    fn at(&self, idx: &[usize]) -> f64 {
        let off: usize = idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[off]
    }
}

/// Row-major multi-index of flat position `flat` in `shape`.
fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for i in (0..shape.len()).rev() {
        idx[i] = flat % shape[i];
        flat /= shape[i];
    }
    idx
}

pub fn zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr::new(&a.shape, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn matmul(a: &Arr, w: &Arr) -> Arr {
    let (k, n) = (w.shape[0], w.shape[1]);
    let rows = a.data.len() / k;
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            out[r * n + j] = (0..k).map(|i| a.data[r * k + i] * w.data[i * n + j]).sum();
        }
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Arr::new(&shape, out)
}

pub fn bmm(a: &Arr, b: &Arr, trans_b: bool) -> Arr {
    let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = if trans_b { b.shape[1] } else { b.shape[2] };
    let mut out = vec![0.0; batch * m * n];
    for t in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[(t * m + i) * n + j] = (0..k)
                    .map(|l| a.at(&[t, i, l]) * if trans_b { b.at(&[t, j, l]) } else { b.at(&[t, l, j]) })
                    .sum();
            }
        }
    }
    Arr::new(&[batch, m, n], out)
}

pub fn add_bias(x: &Arr, b: &Arr) -> Arr {
    let n = b.data.len();
    Arr::new(&x.shape, x.data.iter().enumerate().map(|(i, &v)| v + b.data[i % n]).collect())
}

pub fn softmax(x: &Arr) -> Arr {
    let k = *x.shape.last().unwrap();
    let mut out = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(k) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        out.extend(row.iter().map(|v| v.exp() / z));
    }
    Arr::new(&x.shape, out)
}

/// Channels-last group norm; statistics per batch item and channel group.
pub fn group_norm(x: &Arr, groups: usize, gain: &Arr, bias: &Arr, eps: f64) -> Arr {
    let c = *x.shape.last().unwrap();
    let batch = x.shape[0];
    let per_item = x.data.len() / batch;
    let cg = c / groups;
    let mut out = x.data.clone();
    for b in 0..batch {
        let item = &x.data[b * per_item..(b + 1) * per_item];
        for g in 0..groups {
            let members: Vec<usize> = (0..per_item).filter(|i| (i % c) / cg == g).collect();
            let n = members.len() as f64;
            let mean = members.iter().map(|&i| item[i]).sum::<f64>() / n;
            let var = members.iter().map(|&i| (item[i] - mean).powi(2)).sum::<f64>() / n;
            for &i in &members {
                let ch = i % c;
                out[b * per_item + i] = (item[i] - mean) / (var + eps).sqrt() * gain.data[ch] + bias.data[ch];
            }
        }
    }
    Arr::new(&x.shape, out)
}

pub fn embedding(table: &Arr, ids: &[usize]) -> Arr {
    let d = table.shape[1];
    let data = ids.iter().flat_map(|&i| table.data[i * d..(i + 1) * d].to_vec()).collect();
    Arr::new(&[ids.len(), d], data)
}

pub fn permute(x: &Arr, perm: &[usize]) -> Arr {
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let n = x.data.len();
    let data = (0..n)
        .map(|flat| {
            let out_idx = unravel(flat, &shape);
            let mut src = vec![0; perm.len()];
            for (o, &p) in perm.iter().enumerate() {
                src[p] = out_idx[o];
            }
            x.at(&src)
        })
        .collect();
    Arr::new(&shape, data)
}

pub fn narrow(x: &Arr, axis: usize, start: usize, len: usize) -> Arr {
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|flat| {
            let mut idx = unravel(flat, &shape);
            idx[axis] += start;
            x.at(&idx)
        })
        .collect();
    Arr::new(&shape, data)
}

pub fn concat(xs: &[&Arr], axis: usize) -> Arr {
    let mut shape = xs[0].shape.clone();
    shape[axis] = xs.iter().map(|x| x.shape[axis]).sum();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|flat| {
            let mut idx = unravel(flat, &shape);
            let mut part = 0;
            while idx[axis] >= xs[part].shape[axis] {
                idx[axis] -= xs[part].shape[axis];
                part += 1;
            }
            xs[part].at(&idx)
        })
        .collect();
    Arr::new(&shape, data)
}

pub fn upsample2x(x: &Arr) -> Arr {
    let (b, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let shape = [b, 2 * h, 2 * w, c];
    let data = (0..b * 4 * h * w * c)
        .map(|flat| {
            let i = unravel(flat, &shape);
            x.at(&[i[0], i[1] / 2, i[2] / 2, i[3]])
        })
        .collect();
    Arr::new(&shape, data)
}

pub fn avg_pool2x(x: &Arr) -> Arr {
    let (b, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let shape = [b, h / 2, w / 2, c];
    let data = (0..b * h * w * c / 4)
        .map(|flat| {
            let i = unravel(flat, &shape);
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += x.at(&[i[0], 2 * i[1] + dy, 2 * i[2] + dx, i[3]]);
                }
            }
            s / 4.0
        })
        .collect();
    Arr::new(&shape, data)
}

/// Channel layout `((dy+1)·3 + (dx+1))·C + c`, zero outside the image.
pub fn im2col3x3(x: &Arr) -> Arr {
    let (b, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let shape = [b, h, w, 9 * c];
    let data = (0..b * h * w * 9 * c)
        .map(|flat| {
            let i = unravel(flat, &shape);
            let (tap, ch) = (i[3] / c, i[3] % c);
            let y = i[1] as isize + (tap / 3) as isize - 1;
            let xx = i[2] as isize + (tap % 3) as isize - 1;
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.at(&[i[0], y as usize, xx as usize, ch])
            }
        })
        .collect();
    Arr::new(&shape, data)
}

/// Channel layout `(dy·p + dx)·C + c` within each p×p patch.
pub fn patchify(x: &Arr, p: usize) -> Arr {
    let (b, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let shape = [b, h / p, w / p, p * p * c];
    let data = (0..x.data.len())
        .map(|flat| {
            let i = unravel(flat, &shape);
            let (dy, dx, ch) = (i[3] / (p * c), (i[3] / c) % p, i[3] % c);
            x.at(&[i[0], i[1] * p + dy, i[2] * p + dx, ch])
        })
        .collect();
    Arr::new(&shape, data)
}

pub fn unpatchify(x: &Arr, p: usize) -> Arr {
    let (b, h, w, pc) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let c = pc / (p * p);
    let shape = [b, h * p, w * p, c];
    let data = (0..x.data.len())
        .map(|flat| {
            let i = unravel(flat, &shape);
            let (dy, dx) = (i[1] % p, i[2] % p);
            x.at(&[i[0], i[1] / p, i[2] / p, (dy * p + dx) * c + i[3]])
        })
        .collect();
    Arr::new(&shape, data)
}

pub fn cross_entropy(logits: &Arr, targets: &[usize], weights: &[f32], eps: f64) -> Arr {
    let k = *logits.shape.last().unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (r, row) in logits.data.chunks(k).enumerate() {
        let w = weights[r] as f64;
        if w == 0.0 {
            continue;
        }
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        let logp: Vec<f64> = row.iter().map(|v| v - lse).collect();
        let ce = -(1.0 - eps) * logp[targets[r]] - eps / k as f64 * logp.iter().sum::<f64>();
        num += w * ce;
        den += w;
    }
    Arr::scalar(num / den)
}

/// Inverted dropout drawing one uniform per element in order.
pub fn dropout<R: Rng>(x: &Arr, p: f32, rng: &mut R) -> Arr {
    let keep = 1.0 / (1.0 - p as f64);
    x.map(|v| if rng.gen::<f32>() < p { 0.0 } else { v * keep })
}

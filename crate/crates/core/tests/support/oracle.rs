//! Plain `f64` reference implementations used as independent oracles.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

/// Row-major `[m×k]·[k×n]` by triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Valid convolution by direct loops. `x: [N×C×H×W]`, `k: [O×C×KH×KW]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    o: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = bias.map_or(0.0, |b| b[oi]);
                    for ci in 0..c {
                        for a in 0..kh {
                            for b in 0..kw {
                                s += k[((oi * c + ci) * kh + a) * kw + b]
                                    * x[((ni * c + ci) * h + y * stride + a) * w + xx * stride + b];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (out, oh, ow)
}

/// ReLU that folds its active mask into `sig`.
pub fn relu(x: &mut [f64], sig: &mut DefaultHasher) {
    for v in x.iter_mut() {
        (*v > 0.0).hash(sig);
        *v = v.max(0.0);
    }
}

pub fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

/// `[R×A]` mean over chunks of `area`.
pub fn mean_chunks(x: &[f64], area: usize) -> Vec<f64> {
    x.chunks(area).map(|c| c.iter().sum::<f64>() / area as f64).collect()
}

/// Mean over consecutive groups of `group` rows of a `[R×D]` matrix.
pub fn mean_rows(x: &[f64], d: usize, group: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; rows / group * d];
    for r in 0..rows {
        for j in 0..d {
            out[(r / group) * d + j] += x[r * d + j] / group as f64;
        }
    }
    out
}

pub fn log_softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v / tau - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v / tau - lse).collect()
}

pub fn softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    log_softmax_row(row, tau).into_iter().map(f64::exp).collect()
}

pub fn cross_entropy(logits: &[f64], c: usize, labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        s -= log_softmax_row(&logits[i * c..(i + 1) * c], 1.0)[l];
    }
    s / labels.len() as f64
}

/// `τ²·mean Σ p(log p − log q)` with `p = softmax(t/τ)`, `q = softmax(s/τ)`.
pub fn kd_kl(teacher: &[f64], student: &[f64], c: usize, tau: f64) -> f64 {
    let rows = teacher.len() / c;
    let mut s = 0.0;
    for i in 0..rows {
        let lp = log_softmax_row(&teacher[i * c..(i + 1) * c], tau);
        let lq = log_softmax_row(&student[i * c..(i + 1) * c], tau);
        for j in 0..c {
            s += lp[j].exp() * (lp[j] - lq[j]);
        }
    }
    tau * tau * s / rows as f64
}

/// Small convolutional classifier: conv(3×3, stride) + ReLU, spatial mean,
/// mean over `frames` per clip, dense + bias, then CE and optionally KL
/// against fixed teacher logits.
pub struct TinyNet {
    pub n: usize,
    pub frames: usize,
    pub c: usize,
    pub hw: usize,
    pub o: usize,
    pub classes: usize,
    pub stride: usize,
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub teacher: Option<(Vec<f64>, f64, f64)>,
}

impl TinyNet {
    /// Parameters: `[kernel, conv bias, dense weight, dense bias]`.
    pub fn loss(&self, p: &[Vec<f64>]) -> (f64, u64) {
        let mut sig = DefaultHasher::new();
        let rows = self.n * self.frames;
        let (mut y, oh, ow) = conv2d(
            &self.x, rows, self.c, self.hw, self.hw, &p[0], self.o, 3, 3, Some(&p[1]), self.stride,
        );
        relu(&mut y, &mut sig);
        let pooled = mean_chunks(&y, oh * ow);
        let clip = mean_rows(&pooled, self.o, self.frames);
        let mut logits = matmul(&clip, &p[2], self.n, self.o, self.classes);
        add_bias(&mut logits, &p[3]);
        let ce = cross_entropy(&logits, self.classes, &self.labels);
        let total = match &self.teacher {
            None => ce,
            Some((t, tau, lambda)) => {
                lambda * kd_kl(t, &logits, self.classes, *tau) + (1.0 - lambda) * ce
            }
        };
        (total, sig.finish())
    }
}

/// Brute-force ECE: for every bin scan every sample.
pub fn ece(probs: &[f64], c: usize, labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let conf: Vec<(f64, bool)> = probs
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (row[best], best == y)
        })
        .collect();
    let mut total = 0.0;
    for b in 0..k {
        let (lo, hi) = (b as f64 / k as f64, (b + 1) as f64 / k as f64);
        let members: Vec<&(f64, bool)> = conf
            .iter()
            .filter(|(p, _)| (*p > lo || (b == 0 && *p >= 0.0)) && *p <= hi)
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|(_, ok)| *ok).count() as f64 / m;
        let avg = members.iter().map(|(p, _)| p).sum::<f64>() / m;
        total += m / n as f64 * (acc - avg).abs();
    }
    total
}

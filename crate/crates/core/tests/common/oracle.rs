//! Independent `f64` reference forward passes used as finite-difference oracles.
//!
//! These deliberately share no code with the tape: every op is a direct loop.

#![allow(dead_code)]

/// Records the discrete decisions of a forward pass (ReLU signs, max-pool
/// winners). A finite difference is only valid when the pattern is unchanged.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Pattern(pub Vec<u32>);

pub fn relu(x: &mut [f64], pat: &mut Pattern) {
    for v in x {
        pat.0.push(u32::from(*v > 0.0));
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// `x[n×k] · w[k×m] + b[m]`
pub fn linear(x: &[f64], n: usize, k: usize, w: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            for p in 0..k {
                acc += x[i * k + p] * w[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Cross-correlation, stride 1, zero padding `pad`, plus per-filter bias.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    f: usize,
    ks: usize,
    bias: &[f64],
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = h + 2 * pad - ks + 1;
    let ow = w + 2 * pad - ks + 1;
    let mut out = vec![0.0; b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[fi];
                    for ci in 0..c {
                        for ki in 0..ks {
                            for kj in 0..ks {
                                let y = i as isize + ki as isize - pad as isize;
                                let xx = j as isize + kj as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    acc += x[((bi * c + ci) * h + y as usize) * w + xx as usize]
                                        * k[((fi * c + ci) * ks + ki) * ks + kj];
                                }
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn maxpool(x: &[f64], planes: usize, h: usize, w: usize, pat: &mut Pattern) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (0u32, f64::NEG_INFINITY);
                for (n, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = x[(p * h + 2 * i + di) * w + 2 * j + dj];
                    if v > best.1 {
                        best = (n as u32, v);
                    }
                }
                pat.0.push(best.0);
                out.push(best.1);
            }
        }
    }
    out
}

pub fn gap(x: &[f64], planes: usize, hw: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// Per-channel batch normalization of `[b × c × hw]` with scale and shift.
pub fn batch_norm(x: &[f64], b: usize, c: usize, hw: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let n = (b * hw) as f64;
    for ci in 0..c {
        let idx = |bi: usize, j: usize| (bi * c + ci) * hw + j;
        let mut mean = 0.0;
        for bi in 0..b {
            for j in 0..hw {
                mean += x[idx(bi, j)];
            }
        }
        mean /= n;
        let mut var = 0.0;
        for bi in 0..b {
            for j in 0..hw {
                var += (x[idx(bi, j)] - mean).powi(2);
            }
        }
        var /= n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for bi in 0..b {
            for j in 0..hw {
                out[idx(bi, j)] = gamma[ci] * (x[idx(bi, j)] - mean) * inv + beta[ci];
            }
        }
    }
    out
}

pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

//! Independent reference implementations used as test oracles, plus small
//! helpers shared by the integration tests. Nothing here calls the
//! library's kernels; the oracles are written as plain nested loops.

#![allow(dead_code)]

pub mod criteria;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unetformer::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    unetformer::rng::uniform(rng, shape, lo, hi)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

/// Direct seven-loop grouped convolution, zero padding.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cpg * groups, cin);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    for n in 0..b {
        for co in 0..cout {
            let g = co / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                    for ci in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[n, g * cpg + ci, iy as usize, ix as usize])
                                    * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out.set(&[n, co, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Multi-head self-attention computed window by window with explicit dot
/// products. The feature map is conceptually zero-padded to a multiple of
/// `window`; padded positions take part as all-zero tokens, exactly as a
/// bias-free projection of zero input would produce.
///
/// `qkv` is the `[3C, C, 1, 1]` projection (Q, K, V blocks; head `h` owns
/// channels `h·d .. (h+1)·d` of each block). `rel_bias`, if present, is the
/// `[(2w−1)², heads]` table indexed by `(dy + w − 1)·(2w − 1) + (dx + w − 1)`
/// with `dy = qy − ky`, `dx = qx − kx`.
pub fn dense_window_attention(
    x: &Tensor<f64>,
    qkv: &Tensor<f64>,
    heads: usize,
    window: usize,
    rel_bias: Option<&Tensor<f64>>,
) -> Tensor<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let d = c / heads;
    let rows = h.div_ceil(window);
    let cols = wd.div_ceil(window);
    let span = 2 * window - 1;
    let project = |n: usize, o: usize, y: usize, xx: usize| -> f64 {
        if y >= h || xx >= wd {
            return 0.0;
        }
        (0..c)
            .map(|ci| qkv.at(&[o, ci, 0, 0]) * x.at(&[n, ci, y, xx]))
            .sum()
    };
    let mut out = Tensor::zeros(&[b, c, h, wd]);
    for n in 0..b {
        for wr in 0..rows {
            for wc in 0..cols {
                let tokens: Vec<(usize, usize)> = (0..window * window)
                    .map(|t| (wr * window + t / window, wc * window + t % window))
                    .collect();
                for head in 0..heads {
                    let vecs = |block: usize| -> Vec<Vec<f64>> {
                        tokens
                            .iter()
                            .map(|&(y, xx)| {
                                (0..d)
                                    .map(|j| project(n, block * c + head * d + j, y, xx))
                                    .collect()
                            })
                            .collect()
                    };
                    let (q, k, v) = (vecs(0), vecs(1), vecs(2));
                    for (qi, &(qy, qx)) in tokens.iter().enumerate() {
                        let mut scores: Vec<f64> = (0..tokens.len())
                            .map(|ki| {
                                let dot: f64 = (0..d).map(|j| q[qi][j] * k[ki][j]).sum();
                                let mut s = dot / (d as f64).sqrt();
                                if let Some(table) = rel_bias {
                                    let (ky, kx) = tokens[ki];
                                    let dy = (qy % window) as isize - (ky % window) as isize
                                        + window as isize
                                        - 1;
                                    let dx = (qx % window) as isize - (kx % window) as isize
                                        + window as isize
                                        - 1;
                                    s += table.at(&[dy as usize * span + dx as usize, head]);
                                }
                                s
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        scores.iter_mut().for_each(|s| *s = (*s - m).exp());
                        let z: f64 = scores.iter().sum();
                        if qy >= h || qx >= wd {
                            continue;
                        }
                        for j in 0..d {
                            let val: f64 = scores.iter().zip(&v).map(|(p, vv)| p / z * vv[j]).sum();
                            out.set(&[n, head * d + j, qy, qx], val);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-class counts and scores obtained by scanning the label pairs once
/// per class.
#[derive(Debug, PartialEq)]
pub struct Tally {
    pub oa: f64,
    pub f1: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub mean_f1: Option<f64>,
    pub miou: Option<f64>,
}

pub fn brute_force_tally(pred: &[u8], reference: &[u8], k: usize) -> Tally {
    let total = pred.len();
    let correct = pred.iter().zip(reference).filter(|(p, r)| p == r).count();
    let mut f1 = Vec::new();
    let mut iou = Vec::new();
    for class in 0..k as u8 {
        let tp = pred
            .iter()
            .zip(reference)
            .filter(|&(&p, &r)| p == class && r == class)
            .count();
        let fp = pred
            .iter()
            .zip(reference)
            .filter(|&(&p, &r)| p == class && r != class)
            .count();
        let fn_ = pred
            .iter()
            .zip(reference)
            .filter(|&(&p, &r)| p != class && r == class)
            .count();
        if tp + fp + fn_ == 0 {
            f1.push(None);
            iou.push(None);
        } else {
            let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
            f1.push(Some(2.0 * tp / (2.0 * tp + fp + fn_)));
            iou.push(Some(tp / (tp + fp + fn_)));
        }
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    };
    Tally {
        oa: correct as f64 / total as f64,
        mean_f1: mean(&f1),
        miou: mean(&iou),
        f1,
        iou,
    }
}

//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use fino_core::metrics::Confusion;
use fino_tensor::{ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn binary(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    Tensor::from_fn(shape, |_| f64::from(u8::from(rng.random_bool(p))))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv(x: &Tensor, k: &Tensor, stride: usize, (ph, pw): (usize, usize)) -> Tensor {
    let (b, ci, h, w) = x.dims4().unwrap();
    let (co, _, kh, kw) = k.dims4().unwrap();
    let ho = (h + 2 * ph - kh) / stride + 1;
    let wo = (w + 2 * pw - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    let o = out.data_mut();
    for n in 0..b {
        for m in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - ph as isize;
                                let ix = (xo * stride + j) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at4(n, c, iy as usize, ix as usize) * k.at4(m, c, i, j);
                            }
                        }
                    }
                    o[((n * co + m) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    out
}

/// Window reduction without padding; `max` picks max, otherwise mean.
pub fn pool(x: &Tensor, (kh, kw): (usize, usize), stride: usize, max: bool) -> Tensor {
    let (b, c, h, w) = x.dims4().unwrap();
    let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let vals: Vec<f64> = (0..kh)
                        .flat_map(|i| (0..kw).map(move |j| (i, j)))
                        .map(|(i, j)| x.at4(n, ch, y * stride + i, xo * stride + j))
                        .collect();
                    out.push(if max {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    });
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, ho, wo], out).unwrap()
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce(p: &Tensor, y: &Tensor, eps: f64) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in p.data().iter().zip(y.data()) {
        let p = p.clamp(eps, 1.0 - eps);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total / p.numel() as f64
}

pub fn confusion(pred: &Tensor, gt: &Tensor) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel attention of the change-characteristics block, one scalar at a
/// time: `(weights [B, C], z)` for a difference map `d`.
pub fn channel_attention(d: &Tensor, store: &ParamStore, stage: usize) -> (Vec<Vec<f64>>, Tensor) {
    let (b, c, h, w) = d.dims4().unwrap();
    let p = format!("ccl.stage{stage}.mlp");
    let w1 = store.value(&format!("{p}.fc1.weight")).unwrap();
    let b1 = store.value(&format!("{p}.fc1.bias")).unwrap();
    let w2 = store.value(&format!("{p}.fc2.weight")).unwrap();
    let b2 = store.value(&format!("{p}.fc2.bias")).unwrap();
    let r = w1.shape()[0];
    let mut weights = Vec::new();
    let mut z = d.clone();
    for n in 0..b {
        let mut desc = vec![0.0; c];
        for (ch, slot) in desc.iter_mut().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let v = d.at4(n, ch, y, x);
                    mx = mx.max(v);
                    sum += v;
                }
            }
            *slot = mx + sum / (h * w) as f64;
        }
        let hidden: Vec<f64> = (0..r)
            .map(|j| (b1.data()[j] + (0..c).map(|i| w1.data()[j * c + i] * desc[i]).sum::<f64>()).max(0.0))
            .collect();
        let wts: Vec<f64> = (0..c)
            .map(|i| sigmoid(b2.data()[i] + (0..r).map(|j| w2.data()[i * r + j] * hidden[j]).sum::<f64>()))
            .collect();
        for (ch, wt) in wts.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    z.data_mut()[((n * c + ch) * h + y) * w + x] *= wt;
                }
            }
        }
        weights.push(wts);
    }
    (weights, z)
}

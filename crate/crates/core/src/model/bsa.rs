//! Brightness-aware contrastive losses and the shape-aware branch.

use fino_tensor::{kernels, Graph, ParamStore, Tensor, Var};

use super::{conv, init_conv, RclPolarity};
use crate::data::is_binary;
use crate::error::{FinoError, Result};

/// Kernel extents of the seven parallel shape convolutions.
pub const ASYM_KERNELS: [(usize, usize); 7] = [(1, 1), (1, 3), (3, 1), (3, 3), (1, 5), (5, 1), (5, 5)];

/// Clamp applied to probabilities before every cross-entropy.
pub const PROB_EPS: f64 = 1e-6;
const COS_EPS: f64 = 1e-8;

pub fn kernel_name(stage: usize, (kh, kw): (usize, usize)) -> String {
    format!("bsa.stage{stage}.asym.k{kh}x{kw}")
}

pub fn init(store: &mut ParamStore, stage: usize, c: usize, seed: u64) -> Result<()> {
    for k in ASYM_KERNELS {
        init_conv(store, &kernel_name(stage, k), [c, c, k.0, k.1], false, seed)?;
    }
    store.insert(format!("bsa.stage{stage}.asym.bias"), Tensor::zeros(&[c]))?;
    init_conv(store, &format!("bsa.stage{stage}.mlp.fc1"), [c, c, 1, 1], true, seed)?;
    init_conv(store, &format!("bsa.stage{stage}.mlp.fc2"), [1, c, 1, 1], true, seed)
}

pub struct ShapeBranchOutput {
    /// Shape features `H_i`.
    pub h: Var,
    /// Shape mask probabilities `M_i`, `[B, 1, H, W]`.
    pub m: Var,
}

pub fn shape_branch(g: &mut Graph, store: &ParamStore, stage: usize, t: Var) -> Result<ShapeBranchOutput> {
    let mut acc: Option<Var> = None;
    for k in ASYM_KERNELS {
        let y = conv(g, store, &kernel_name(stage, k), t, 1)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    let bias = g.param(store, &format!("bsa.stage{stage}.asym.bias"))?;
    let summed = g.add_channel_bias(acc.expect("seven kernels"), bias)?;
    let h = g.relu(summed)?;
    let hidden = conv(g, store, &format!("bsa.stage{stage}.mlp.fc1"), h, 1)?;
    let hidden = g.relu(hidden)?;
    let logit = conv(g, store, &format!("bsa.stage{stage}.mlp.fc2"), hidden, 1)?;
    let m = g.sigmoid(logit)?;
    Ok(ShapeBranchOutput { h, m })
}

/// `1 - cos(GAP(a), GAP(b))`, averaged over the batch. Lies in `[0, 2]`.
pub fn global_brightness_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let pa = g.global_avg_pool(a)?;
    let pb = g.global_avg_pool(b)?;
    let cos = g.channel_cosine(pa, pb, COS_EPS)?;
    let loss = g.affine(cos, -1.0, 1.0)?;
    Ok(g.mean(loss)?)
}

/// Per-position cosine mapped to `[0, 1]`, scored with cross-entropy against
/// the stage-resolution mask.
pub fn region_align_loss(g: &mut Graph, a: Var, b: Var, mask: &Tensor, polarity: RclPolarity) -> Result<Var> {
    if !is_binary(mask) {
        return Err(FinoError::Data("region alignment mask is not binary".into()));
    }
    let cos = g.channel_cosine(a, b, COS_EPS)?;
    let s = g.affine(cos, 0.5, 0.5)?;
    let target = match polarity {
        RclPolarity::Unchanged => mask.map(|y| 1.0 - y),
        RclPolarity::Literal => mask.clone(),
    };
    Ok(g.bce(s, &target, PROB_EPS)?)
}

/// Max-pools a binary `[B, 1, H, W]` mask down to `(h, w)`.
pub fn downsample_mask(mask: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let (_, _, mh, mw) = mask.dims4()?;
    if mh % h != 0 || mw % w != 0 || mh / h != mw / w {
        return Err(FinoError::Data(format!("cannot pool a {mh}x{mw} mask to {h}x{w}")));
    }
    Ok(kernels::max_pool(mask, mh / h)?)
}

/// Sum over stages of the mean cross-entropy between `M_i` and the
/// ground truth pooled to that stage.
pub fn shape_supervision_loss(g: &mut Graph, masks: &[Var], gt: &Tensor) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &m in masks {
        let (_, _, h, w) = g.value(m).dims4()?;
        let target = downsample_mask(gt, (h, w))?;
        let l = g.bce(m, &target, PROB_EPS)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| FinoError::Data("no shape masks to supervise".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(g: &mut Graph, shape: &[usize], f: impl FnMut(usize) -> f64) -> Var {
        g.input(Tensor::from_fn(shape, f), false).unwrap()
    }

    #[test]
    fn brightness_loss_extremes() {
        let mut g = Graph::new();
        let a = input(&mut g, &[2, 3, 2, 2], |i| 1.0 + i as f64);
        let neg = input(&mut g, &[2, 3, 2, 2], |i| -1.0 - i as f64);
        let same = global_brightness_loss(&mut g, a, a).unwrap();
        let opposite = global_brightness_loss(&mut g, a, neg).unwrap();
        assert!(g.value(same).item().abs() < 1e-12);
        assert!((g.value(opposite).item() - 2.0).abs() < 1e-12);
        let x = input(&mut g, &[1, 2, 1, 1], |i| [1.0, 0.0][i]);
        let y = input(&mut g, &[1, 2, 1, 1], |i| [0.0, 1.0][i]);
        let ortho = global_brightness_loss(&mut g, x, y).unwrap();
        assert!((g.value(ortho).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn region_align_clamps_identical_features() {
        let mut g = Graph::new();
        let a = input(&mut g, &[1, 4, 2, 2], |i| 0.3 + i as f64);
        let l = region_align_loss(&mut g, a, a, &Tensor::zeros(&[1, 1, 2, 2]), RclPolarity::Unchanged).unwrap();
        assert!((g.value(l).item() + (1.0 - PROB_EPS).ln()).abs() < 1e-12);
        let bad = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!(region_align_loss(&mut g, a, a, &bad, RclPolarity::Unchanged).is_err());
    }

    #[test]
    fn region_align_orthogonal_is_ln2() {
        let mut g = Graph::new();
        let a = input(&mut g, &[1, 2, 1, 3], |i| [1.0, 2.0, 3.0, 0.0, 0.0, 0.0][i]);
        let b = input(&mut g, &[1, 2, 1, 3], |i| [0.0, 0.0, 0.0, 1.0, 5.0, 2.0][i]);
        let mask = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        for pol in [RclPolarity::Unchanged, RclPolarity::Literal] {
            let l = region_align_loss(&mut g, a, b, &mask, pol).unwrap();
            assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_supervision_extremes() {
        let mut g = Graph::new();
        let gt = Tensor::full(&[1, 1, 16, 16], 1.0);
        let masks: Vec<Var> = [16, 8, 4, 2].iter().map(|&e| input(&mut g, &[1, 1, e, e], |_| 1.0)).collect();
        let l = shape_supervision_loss(&mut g, &masks, &gt).unwrap();
        assert!((g.value(l).item() - 4.0 * -(1.0 - PROB_EPS).ln()).abs() < 1e-12);
        let half: Vec<Var> = [16, 8, 4, 2].iter().map(|&e| input(&mut g, &[1, 1, e, e], |_| 0.5)).collect();
        let l = shape_supervision_loss(&mut g, &half, &Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert!((g.value(l).item() - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_kernel_gives_relu() {
        let mut store = ParamStore::new();
        init(&mut store, 1, 3, 0).unwrap();
        for k in ASYM_KERNELS {
            let p = store.get_mut(&format!("{}.weight", kernel_name(1, k))).unwrap();
            p.value.data_mut().fill(0.0);
            if k == (1, 1) {
                for c in 0..3 {
                    p.value.data_mut()[c * 3 + c] = 1.0;
                }
            }
        }
        let mut g = Graph::new();
        let t = input(&mut g, &[2, 3, 5, 4], |i| (i as f64 * 0.77).sin());
        let out = shape_branch(&mut g, &store, 1, t).unwrap();
        let want = g.value(t).map(|v| v.max(0.0));
        assert_eq!(g.value(out.h), &want);
        assert_eq!(g.shape(out.m), &[2, 1, 5, 4]);
    }

    #[test]
    fn thin_objects_survive_downsampling() {
        let mut mask = Tensor::zeros(&[1, 1, 16, 16]);
        mask.data_mut()[7 * 16 + 9] = 1.0;
        for e in [8, 4, 2, 1] {
            let d = downsample_mask(&mask, (e, e)).unwrap();
            assert_eq!(d.sum(), 1.0);
        }
    }
}

//! Segmentation head and thresholding.

use fino_tensor::{Graph, ParamStore, ResizeMode, Tensor, Var};

use super::{conv, init_conv};
use crate::error::{FinoError, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn init(store: &mut ParamStore, c: usize, width: usize, seed: u64) -> Result<()> {
    init_conv(store, "head.conv0", [width, c, 1, 1], true, seed)?;
    init_conv(store, "head.conv1", [width, width, 3, 3], true, seed)?;
    init_conv(store, "head.conv2", [width, width, 3, 3], true, seed)?;
    init_conv(store, "head.conv3", [1, width, 3, 3], true, seed)
}

/// Returns `(logits, prob)`, both upsampled to `extents`.
pub fn seg_head(g: &mut Graph, store: &ParamStore, z: Var, extents: (usize, usize)) -> Result<(Var, Var)> {
    let mut x = z;
    for i in 0..4 {
        x = conv(g, store, &format!("head.conv{i}"), x, 1)?;
        if i < 3 {
            x = g.relu(x)?;
        }
    }
    let logits = g.resize(x, extents, ResizeMode::Bilinear)?;
    let prob = g.sigmoid(logits)?;
    Ok((logits, prob))
}

/// 1 where `prob > threshold`, else 0.
pub fn decide(prob: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(FinoError::Config(format!("threshold {threshold} is outside (0, 1)")));
    }
    Ok(prob.map(|p| if p > threshold { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_half() {
        let mut store = ParamStore::new();
        init(&mut store, 5, 3, 0).unwrap();
        for (_, p) in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let z = g.input(Tensor::from_fn(&[1, 5, 16, 16], |i| i as f64), false).unwrap();
        let (_, prob) = seg_head(&mut g, &store, z, (64, 64)).unwrap();
        assert_eq!(g.shape(prob), &[1, 1, 64, 64]);
        assert!(g.value(prob).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn decide_boundary_and_range() {
        let p = Tensor::from_vec(&[4], vec![0.5, 0.50001, 1.0, 0.0]).unwrap();
        assert_eq!(decide(&p, 0.5).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(decide(&p, 1.0).is_err());
        assert!(decide(&p, 0.0).is_err());
    }
}

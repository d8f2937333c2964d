//! Weight-shared residual encoder with outputs at 1/4, 1/8, 1/16 and 1/32.

use fino_tensor::{Graph, ParamStore, Tensor, Var};

use super::{conv, init_conv, ModelConfig};
use crate::data::STAGE_DIVISOR;
use crate::error::{FinoError, Result};

const NORM_EPS: f64 = 1e-5;

/// Stage outputs of one image, stage 1 first.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub stages: [Var; 4],
}

impl FeaturePyramid {
    /// Output of stage `stage` in 1..=4.
    pub fn stage(&self, stage: usize) -> Var {
        self.stages[stage - 1]
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("backbone.stage{stage}.block{block}")
}

fn init_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]))?;
    Ok(())
}

pub fn init(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<()> {
    init_conv(store, "backbone.stem.conv", [cfg.widths[0], 3, 3, 3], true, seed)?;
    let mut cin = cfg.widths[0];
    for stage in 1..=4 {
        let cout = cfg.width(stage);
        for block in 0..cfg.blocks[stage - 1] {
            let p = block_prefix(stage, block);
            let fan = if block == 0 { cin } else { cout };
            init_conv(store, &format!("{p}.conv1"), [cout, fan, 3, 3], true, seed)?;
            init_conv(store, &format!("{p}.conv2"), [cout, cout, 3, 3], true, seed)?;
            if block == 0 && (stage > 1 || cin != cout) {
                init_conv(store, &format!("{p}.proj"), [cout, cin, 1, 1], true, seed)?;
            }
            if cfg.norm_groups > 0 {
                init_norm(store, &format!("{p}.norm1"), cout)?;
                init_norm(store, &format!("{p}.norm2"), cout)?;
            }
        }
        cin = cout;
    }
    Ok(())
}

fn norm(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, prefix: &str, x: Var) -> Result<Var> {
    if cfg.norm_groups == 0 {
        return Ok(x);
    }
    let y = g.group_norm(x, cfg.norm_groups, NORM_EPS)?;
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let y = g.scale_channels(y, gamma)?;
    Ok(g.add_channel_bias(y, beta)?)
}

fn residual_block(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, store, &format!("{prefix}.conv1"), x, stride)?;
    let y = norm(g, store, cfg, &format!("{prefix}.norm1"), y)?;
    let y = cfg.activation.apply(g, y)?;
    let y = conv(g, store, &format!("{prefix}.conv2"), y, 1)?;
    let y = norm(g, store, cfg, &format!("{prefix}.norm2"), y)?;
    let proj = format!("{prefix}.proj");
    let skip = if store.contains(&format!("{proj}.weight")) {
        conv(g, store, &proj, x, stride)?
    } else {
        x
    };
    let sum = g.add(y, skip)?;
    cfg.activation.apply(g, sum)
}

/// Encodes `[B, 3, H, W]` images; H and W must be multiples of 32.
pub fn encode(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, image: Var) -> Result<FeaturePyramid> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(FinoError::Data(format!("expected [B,3,H,W] images, got {shape:?}")));
    }
    if !shape[2].is_multiple_of(STAGE_DIVISOR) || !shape[3].is_multiple_of(STAGE_DIVISOR) {
        return Err(FinoError::Data(format!(
            "image extents {}x{} are not multiples of {STAGE_DIVISOR}",
            shape[2], shape[3]
        )));
    }
    let x = conv(g, store, "backbone.stem.conv", image, cfg.stem_stride)?;
    let mut x = cfg.activation.apply(g, x)?;
    let pool = 4 / cfg.stem_stride;
    if pool > 1 {
        x = g.max_pool2d(x, (pool, pool), pool)?;
    }
    let mut outputs = Vec::with_capacity(4);
    for stage in 1..=4 {
        for block in 0..cfg.blocks[stage - 1] {
            let stride = if block == 0 && stage > 1 { 2 } else { 1 };
            x = residual_block(g, store, cfg, &block_prefix(stage, block), x, stride)?;
        }
        outputs.push(x);
    }
    Ok(FeaturePyramid {
        stages: outputs.try_into().expect("four stages"),
    })
}

/// `|a - b|`, the per-stage difference feature.
pub fn diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    Ok(g.abs(d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small() -> ModelConfig {
        ModelConfig {
            widths: [4, 6, 8, 10],
            ..Default::default()
        }
    }

    fn image(seed: usize) -> Tensor {
        Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 31 + seed * 7) % 89) as f64 / 89.0)
    }

    #[test]
    fn stage_extents() {
        for (stem_stride, groups) in [(2, 0), (1, 2), (4, 0)] {
            let cfg = ModelConfig { stem_stride, norm_groups: groups, ..small() };
            let store = init_params(&cfg, 0).unwrap();
            let mut g = Graph::new();
            let x = g.input(image(0), false).unwrap();
            let p = encode(&mut g, &store, &cfg, x).unwrap();
            for (i, ext) in [16, 8, 4, 2].into_iter().enumerate() {
                assert_eq!(g.shape(p.stages[i]), &[1, cfg.widths[i], ext, ext]);
            }
        }
    }

    #[test]
    fn rejects_indivisible_extents() {
        let cfg = small();
        let store = init_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 48, 64]), false).unwrap();
        assert!(encode(&mut g, &store, &cfg, x).is_err());
    }

    #[test]
    fn zeroed_residual_branch_leaves_projected_skip() {
        let cfg = small();
        let mut store = init_params(&cfg, 5).unwrap();
        for name in ["backbone.stage2.block0.conv2.weight", "backbone.stage2.block0.conv2.bias"] {
            store.get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.input(image(1), false).unwrap();
        let p = encode(&mut g, &store, &cfg, x).unwrap();
        let skip = conv(&mut g, &store, "backbone.stage2.block0.proj", p.stage(1), 2).unwrap();
        let expected = g.relu(skip).unwrap();
        assert_eq!(g.value(p.stage(2)), g.value(expected));
    }

    #[test]
    fn diff_is_symmetric_and_matches_loop() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64 * 0.7).sin()), false).unwrap();
        let b = g.input(Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64 * 1.3).cos()), false).unwrap();
        let ab = diff(&mut g, a, b).unwrap();
        let ba = diff(&mut g, b, a).unwrap();
        assert_eq!(g.value(ab), g.value(ba));
        for i in 0..18 {
            let want = (g.value(a).data()[i] - g.value(b).data()[i]).abs();
            assert_eq!(g.value(ab).data()[i], want);
        }
        let same = diff(&mut g, a, a).unwrap();
        assert!(g.value(same).data().iter().all(|&v| v == 0.0));
    }
}

//! Regularization gate and change characteristics learning.

use fino_tensor::{Graph, ParamStore, Var};

use super::{conv, init_conv};
use crate::error::{FinoError, Result};

/// Hidden width of the channel-attention MLP.
pub fn reduced(c: usize) -> usize {
    (c / 4).max(1)
}

pub fn init_gate(store: &mut ParamStore, stage: usize, c: usize, seed: u64) -> Result<()> {
    init_conv(store, &format!("rega.stage{stage}.conv"), [1, 3 * c, 1, 1], true, seed)
}

pub fn init_ccl(store: &mut ParamStore, stage: usize, c: usize, seed: u64) -> Result<()> {
    let p = format!("ccl.stage{stage}");
    init_conv(store, &format!("{p}.proj"), [c, c, 1, 1], false, seed)?;
    init_conv(store, &format!("{p}.mlp.fc1"), [reduced(c), c, 1, 1], true, seed)?;
    init_conv(store, &format!("{p}.mlp.fc2"), [c, reduced(c), 1, 1], true, seed)
}

pub struct GateOutput {
    /// Spatial gate `[B, 1, H, W]`.
    pub gate: Var,
    pub ia: Var,
    pub ib: Var,
}

/// `G = sigmoid(conv([xa, xb, h])) + M` with `M` detached, then both
/// feature maps are scaled by `G`. With `clamp`, `G` is clipped to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn rega_gate(
    g: &mut Graph,
    store: &ParamStore,
    stage: usize,
    xa: Var,
    xb: Var,
    h: Var,
    m: Option<Var>,
    clamp: bool,
) -> Result<GateOutput> {
    let (ea, eb, eh) = (g.shape(xa), g.shape(xb), g.shape(h));
    if ea != eb || ea[2..] != eh[2..] || ea[0] != eh[0] {
        return Err(FinoError::Data(format!("gate inputs disagree: {ea:?}, {eb:?}, {eh:?}")));
    }
    let cat = g.concat_channels(&[xa, xb, h])?;
    let logit = conv(g, store, &format!("rega.stage{stage}.conv"), cat, 1)?;
    let mut gate = g.sigmoid(logit)?;
    if let Some(m) = m {
        let m = g.detach(m);
        gate = g.add(gate, m)?;
    }
    if clamp {
        gate = g.clamp(gate, 0.0, 1.0)?;
    }
    let ia = g.broadcast_mul(xa, gate)?;
    let ib = g.broadcast_mul(xb, gate)?;
    Ok(GateOutput { gate, ia, ib })
}

pub struct ChangeFeature {
    /// `|w*Ia - w*Ib|`.
    pub d: Var,
    /// Per-batch-item channel weights `[B, C, 1, 1]` in (0, 1).
    pub weights: Var,
    pub z: Var,
}

pub fn ccl(g: &mut Graph, store: &ParamStore, stage: usize, ia: Var, ib: Var) -> Result<ChangeFeature> {
    let p = format!("ccl.stage{stage}");
    let pa = conv(g, store, &format!("{p}.proj"), ia, 1)?;
    let pb = conv(g, store, &format!("{p}.proj"), ib, 1)?;
    let diff = g.sub(pa, pb)?;
    let d = g.abs(diff)?;
    let mx = g.global_max_pool(d)?;
    let avg = g.global_avg_pool(d)?;
    let desc = g.add(mx, avg)?;
    let hidden = conv(g, store, &format!("{p}.mlp.fc1"), desc, 1)?;
    let hidden = g.relu(hidden)?;
    let logit = conv(g, store, &format!("{p}.mlp.fc2"), hidden, 1)?;
    let weights = g.sigmoid(logit)?;
    let z = g.scale_channels(d, weights)?;
    Ok(ChangeFeature { d, weights, z })
}

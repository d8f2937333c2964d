//! Training objective `L_cd + L_sal + lambda * (L_gcl + L_rcl)`.

use fino_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FinoError, Result};
use crate::model::bsa::{self, PROB_EPS};
use crate::model::{ForwardOutput, ModelConfig};

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(FinoError::Config(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cd: f64,
    pub l_sal: f64,
    pub l_gcl: f64,
    pub l_rcl: f64,
    pub total: f64,
}

pub fn total_loss(l_cd: f64, l_sal: f64, l_gcl: f64, l_rcl: f64, weights: LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_cd", l_cd), ("l_sal", l_sal), ("l_gcl", l_gcl), ("l_rcl", l_rcl)] {
        if !v.is_finite() {
            return Err(FinoError::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    weights.validate()?;
    Ok(LossBreakdown {
        l_cd,
        l_sal,
        l_gcl,
        l_rcl,
        total: l_cd + l_sal + weights.lambda * l_gcl + weights.lambda * l_rcl,
    })
}

/// Builds the objective on the graph. Terms that cannot contribute (shape
/// branch disabled, or `lambda = 0` for the brightness losses) are not
/// built at all and reported as 0.
pub fn objective(
    g: &mut Graph,
    out: &ForwardOutput,
    gt: &Tensor,
    cfg: &ModelConfig,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let l_cd = g.bce(out.prob, gt, PROB_EPS)?;
    let mut loss = l_cd;
    let mut parts = [0.0; 3];
    let masks = out.shape_masks();
    if !masks.is_empty() {
        let l_sal = bsa::shape_supervision_loss(g, &masks, gt)?;
        parts[0] = g.value(l_sal).item();
        loss = g.add(loss, l_sal)?;
    }
    if cfg.bsa && weights.lambda > 0.0 {
        let (a4, b4) = (out.pyramid_a.stage(4), out.pyramid_b.stage(4));
        let (_, _, h, w) = g.value(a4).dims4()?;
        let l_gcl = bsa::global_brightness_loss(g, a4, b4)?;
        let mask4 = bsa::downsample_mask(gt, (h, w))?;
        let l_rcl = bsa::region_align_loss(g, a4, b4, &mask4, cfg.rcl_polarity)?;
        parts[1] = g.value(l_gcl).item();
        parts[2] = g.value(l_rcl).item();
        let aux = g.add(l_gcl, l_rcl)?;
        let aux = g.affine(aux, weights.lambda, 0.0)?;
        loss = g.add(loss, aux)?;
    }
    let breakdown = total_loss(g.value(l_cd).item(), parts[0], parts[1], parts[2], weights)?;
    Ok((loss, breakdown))
}

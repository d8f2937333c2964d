//! Context-dependent learning: region-local softmax attention guided by the
//! change features of the stage above.

use fino_tensor::{Graph, ParamStore, ResizeMode, Var};

use super::{conv, init_conv, StageSet};
use crate::error::{FinoError, Result};

pub fn init(store: &mut ParamStore, stage: usize, channels: usize, guide_channels: usize, seed: u64) -> Result<()> {
    let p = format!("cdl.stage{stage}");
    init_conv(store, &format!("{p}.phi1"), [1, channels + guide_channels, 1, 1], true, seed)?;
    init_conv(store, &format!("{p}.phi2"), [channels, channels, 1, 1], false, seed)
}

/// Region side actually used on an `h x w` map: `region` capped at the
/// extents, and it has to tile the map exactly.
pub fn effective_region(region: usize, h: usize, w: usize) -> Result<usize> {
    let r = region.min(h).min(w);
    if r == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
        return Err(FinoError::Config(format!("region {r} does not tile a {h}x{w} map")));
    }
    Ok(r)
}

/// Softmax of a `[B, 1, H, W]` score map within each non-overlapping
/// `r x r` region, after scaling by `1/sqrt(dk)`.
pub fn region_softmax(g: &mut Graph, scores: Var, region: usize, dk: usize) -> Result<Var> {
    let (b, c, h, w) = g.value(scores).dims4()?;
    if c != 1 {
        return Err(FinoError::Data(format!("score map must have one channel, got {c}")));
    }
    let r = effective_region(region, h, w)?;
    let (gh, gw) = (h / r, w / r);
    let x = g.affine(scores, 1.0 / (dk as f64).sqrt(), 0.0)?;
    let x = g.reshape(x, &[b, gh, r, gw, r])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    let x = g.reshape(x, &[b * gh * gw, r * r])?;
    let x = g.softmax(x, 1)?;
    let x = g.reshape(x, &[b, gh, gw, r, r])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    Ok(g.reshape(x, &[b, 1, h, w])?)
}

/// Attention map `A_i` and context feature `T_i` of one stage.
pub struct ContextOutput {
    pub attention: Var,
    pub t: Var,
}

pub fn cdl_attention(g: &mut Graph, store: &ParamStore, stage: usize, c: Var, guide: Option<Var>, region: usize) -> Result<ContextOutput> {
    let (_, _, h, w) = g.value(c).dims4()?;
    let guide = match guide {
        Some(z) => g.resize(z, (h, w), ResizeMode::Bilinear)?,
        None => c,
    };
    let fused = g.concat_channels(&[c, guide])?;
    let dk = g.shape(fused)[1];
    let p = format!("cdl.stage{stage}");
    let scores = conv(g, store, &format!("{p}.phi1"), fused, 1)?;
    let attention = region_softmax(g, scores, region, dk)?;
    let value = conv(g, store, &format!("{p}.phi2"), c, 1)?;
    let t = g.broadcast_mul(value, attention)?;
    Ok(ContextOutput { attention, t })
}

/// `T_i` from the stage difference `c` and the (unresized) change feature of
/// the stage above; the top stage guides itself.
pub fn cdl_forward(g: &mut Graph, store: &ParamStore, stage: usize, c: Var, guide: Option<Var>, region: usize) -> Result<Var> {
    Ok(cdl_attention(g, store, stage, c, guide, region)?.t)
}

/// Enforces the top-down order: each stage must be opened with
/// [`Cascade::guidance`] and closed with [`Cascade::complete`] before the
/// next lower one starts.
#[derive(Debug, Clone)]
pub struct Cascade {
    order: Vec<usize>,
    next: usize,
    open: Option<usize>,
    last_z: Option<Var>,
}

impl Cascade {
    pub fn new(stages: StageSet) -> Self {
        Self {
            order: stages.top_down(),
            next: 0,
            open: None,
            last_z: None,
        }
    }

    /// The stage that has to run next, or `None` once all are done.
    pub fn expected(&self) -> Option<usize> {
        match self.open {
            Some(s) => Some(s),
            None => self.order.get(self.next).copied(),
        }
    }

    /// Opens `stage` and returns the change feature of the stage above it.
    pub fn guidance(&mut self, stage: usize) -> Result<Option<Var>> {
        if let Some(open) = self.open {
            return Err(FinoError::Cascade(format!("stage {stage} requested while stage {open} is still open")));
        }
        match self.order.get(self.next) {
            Some(&s) if s == stage => {
                self.open = Some(stage);
                Ok(self.last_z)
            }
            Some(&s) => Err(FinoError::Cascade(format!("stage {stage} requested out of order, expected stage {s}"))),
            None => Err(FinoError::Cascade(format!("stage {stage} requested after the cascade finished"))),
        }
    }

    pub fn complete(&mut self, stage: usize, z: Var) -> Result<()> {
        if self.open != Some(stage) {
            return Err(FinoError::Cascade(format!("stage {stage} completed without being opened")));
        }
        self.open = None;
        self.next += 1;
        self.last_z = Some(z);
        Ok(())
    }

    /// Change feature of the lowest stage, once every stage completed.
    pub fn finish(self) -> Result<Var> {
        match (self.expected(), self.last_z) {
            (None, Some(z)) => Ok(z),
            (Some(s), _) => Err(FinoError::Cascade(format!("cascade finished early, stage {s} still pending"))),
            (None, None) => Err(FinoError::Cascade("cascade ran no stages".into())),
        }
    }
}

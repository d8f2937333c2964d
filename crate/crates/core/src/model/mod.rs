//! The FINO network: Siamese encoder, cascaded region attention, shape
//! branch, regularization gate, change characteristics and segmentation head.

pub mod backbone;
pub mod bsa;
pub mod cdl;
pub mod gate;
pub mod head;

use std::fmt;
use std::str::FromStr;

use fino_tensor::suite::fnv1a;
use fino_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FinoError, Result};

pub use backbone::FeaturePyramid;
pub use cdl::Cascade;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(match self {
            Self::Relu => g.relu(x)?,
            Self::Tanh => g.tanh(x)?,
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = FinoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            _ => Err(FinoError::Config(format!("unknown activation `{s}`"))),
        }
    }
}

/// Target polarity of the region alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RclPolarity {
    /// Unchanged positions are pulled together (target `1 - y`).
    Unchanged,
    /// Target `y`.
    Literal,
}

impl fmt::Display for RclPolarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unchanged => "unchanged",
            Self::Literal => "literal",
        })
    }
}

impl FromStr for RclPolarity {
    type Err = FinoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unchanged" => Ok(Self::Unchanged),
            "literal" => Ok(Self::Literal),
            _ => Err(FinoError::Config(format!("unknown rcl polarity `{s}`"))),
        }
    }
}

/// Subset of the stages 1..=4 taking part in the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSet([bool; 4]);

impl StageSet {
    pub fn all() -> Self {
        Self([true; 4])
    }

    pub fn new(stages: &[usize]) -> Result<Self> {
        let mut set = [false; 4];
        for &s in stages {
            if !(1..=4).contains(&s) {
                return Err(FinoError::Config(format!("stage {s} is not in 1..=4")));
            }
            set[s - 1] = true;
        }
        if !set.contains(&true) {
            return Err(FinoError::Config("stage set is empty".into()));
        }
        Ok(Self(set))
    }

    pub fn contains(&self, stage: usize) -> bool {
        (1..=4).contains(&stage) && self.0[stage - 1]
    }

    /// Enabled stages, highest first.
    pub fn top_down(&self) -> Vec<usize> {
        (1..=4).rev().filter(|&s| self.contains(s)).collect()
    }

    pub fn lowest(&self) -> usize {
        (1..=4).find(|&s| self.contains(s)).expect("stage set is never empty")
    }

    /// The next enabled stage above `stage`, if any.
    pub fn above(&self, stage: usize) -> Option<usize> {
        (stage + 1..=4).find(|&s| self.contains(s))
    }
}

impl fmt::Display for StageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.top_down().iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for StageSet {
    type Err = FinoError;
    fn from_str(s: &str) -> Result<Self> {
        let stages = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| FinoError::Config(format!("bad stage list `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(&stages)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    /// Stride of the stem convolution; the following max pool makes up the
    /// rest of the factor 4.
    pub stem_stride: usize,
    pub activation: Activation,
    /// Group count for normalization after every backbone conv; 0 disables it.
    pub norm_groups: usize,
    /// Region side of the attention softmax.
    pub region: usize,
    pub head_width: usize,
    pub stages: StageSet,
    pub cdl: bool,
    pub bsa: bool,
    pub rega: bool,
    pub gate_clamp: bool,
    pub rcl_polarity: RclPolarity,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            blocks: [2, 1, 1, 1],
            stem_stride: 2,
            activation: Activation::Relu,
            norm_groups: 0,
            region: 4,
            head_width: 32,
            stages: StageSet::all(),
            cdl: true,
            bsa: true,
            rega: true,
            gate_clamp: false,
            rcl_polarity: RclPolarity::Unchanged,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FinoError::Config(format!("widths {:?} must be positive and strictly increasing", self.widths)));
        }
        if self.blocks.contains(&0) {
            return Err(FinoError::Config("every stage needs at least one block".into()));
        }
        if ![1, 2, 4].contains(&self.stem_stride) {
            return Err(FinoError::Config(format!("stem stride {} is not 1, 2 or 4", self.stem_stride)));
        }
        if self.norm_groups > 0 {
            if let Some(w) = self.widths.iter().find(|&&w| w % self.norm_groups != 0) {
                return Err(FinoError::Config(format!("{} norm groups do not divide width {w}", self.norm_groups)));
            }
        }
        if self.region == 0 || self.head_width == 0 {
            return Err(FinoError::Config("region and head width must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.widths[stage - 1]
    }
}

/// Per-parameter seed, so adding a parameter never shifts the others.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}

pub(crate) fn init_uniform(store: &mut ParamStore, name: &str, shape: &[usize], bound: f64, seed: u64) -> Result<()> {
    let mut rng = param_rng(seed, name);
    let value = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
    Ok(store.insert(name, value)?)
}

/// Inserts `{prefix}.weight` with Kaiming-uniform fan-in init and, when
/// requested, a zero `{prefix}.bias`.
pub(crate) fn init_conv(store: &mut ParamStore, prefix: &str, shape: [usize; 4], bias: bool, seed: u64) -> Result<()> {
    let fan_in = shape[1] * shape[2] * shape[3];
    init_uniform(store, &format!("{prefix}.weight"), &shape, (6.0 / fan_in as f64).sqrt(), seed)?;
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[shape[0]]))?;
    }
    Ok(())
}

/// Convolution with "same" padding for odd kernels, plus bias when the
/// store holds `{prefix}.bias`.
pub(crate) fn conv(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let k = g.param(store, &format!("{prefix}.weight"))?;
    let (kh, kw) = (g.shape(k)[2], g.shape(k)[3]);
    let mut y = g.conv2d(x, k, stride, (kh / 2, kw / 2))?;
    let bias = format!("{prefix}.bias");
    if store.contains(&bias) {
        let b = g.param(store, &bias)?;
        y = g.add_channel_bias(y, b)?;
    }
    Ok(y)
}

/// Everything the per-stage cascade produced, for losses and inspection.
#[derive(Debug, Clone)]
pub struct StageTrace {
    pub stage: usize,
    pub c: Var,
    pub t: Var,
    pub h: Var,
    pub m: Option<Var>,
    pub gate: Option<Var>,
    pub d: Var,
    pub z: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid_a: FeaturePyramid,
    pub pyramid_b: FeaturePyramid,
    /// Top-down, one entry per enabled stage.
    pub stages: Vec<StageTrace>,
    pub logits: Var,
    pub prob: Var,
}

impl ForwardOutput {
    pub fn shape_masks(&self) -> Vec<Var> {
        self.stages.iter().filter_map(|s| s.m).collect()
    }
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    backbone::init(&mut store, cfg, seed)?;
    for stage in cfg.stages.top_down() {
        let c = cfg.width(stage);
        if cfg.cdl {
            let guide = cfg.stages.above(stage).map_or(c, |s| cfg.width(s));
            cdl::init(&mut store, stage, c, guide, seed)?;
        }
        if cfg.bsa {
            bsa::init(&mut store, stage, c, seed)?;
        }
        if cfg.rega {
            gate::init_gate(&mut store, stage, c, seed)?;
        }
        gate::init_ccl(&mut store, stage, c, seed)?;
    }
    head::init(&mut store, cfg.width(cfg.stages.lowest()), cfg.head_width, seed)?;
    Ok(store)
}

/// Runs the full network on image batches `[B, 3, H, W]`.
pub fn forward(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, a: &Tensor, b: &Tensor) -> Result<ForwardOutput> {
    let (_, _, h, w) = a.dims4()?;
    if a.shape() != b.shape() {
        return Err(FinoError::Data(format!("image batches differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let xa = g.input(a.clone(), false)?;
    let xb = g.input(b.clone(), false)?;
    let pyramid_a = backbone::encode(g, store, cfg, xa)?;
    let pyramid_b = backbone::encode(g, store, cfg, xb)?;

    let mut cascade = Cascade::new(cfg.stages);
    let mut stages = Vec::new();
    while let Some(stage) = cascade.expected() {
        let (fa, fb) = (pyramid_a.stage(stage), pyramid_b.stage(stage));
        let c = backbone::diff(g, fa, fb)?;
        let guide = cascade.guidance(stage)?;
        let t = if cfg.cdl {
            cdl::cdl_forward(g, store, stage, c, guide, cfg.region)?
        } else {
            c
        };
        let (hv, m) = if cfg.bsa {
            let out = bsa::shape_branch(g, store, stage, t)?;
            (out.h, Some(out.m))
        } else {
            (t, None)
        };
        let (ia, ib, gate_var) = if cfg.rega {
            let out = gate::rega_gate(g, store, stage, fa, fb, hv, m, cfg.gate_clamp)?;
            (out.ia, out.ib, Some(out.gate))
        } else {
            (fa, fb, None)
        };
        let change = gate::ccl(g, store, stage, ia, ib)?;
        cascade.complete(stage, change.z)?;
        stages.push(StageTrace {
            stage,
            c,
            t,
            h: hv,
            m,
            gate: gate_var,
            d: change.d,
            z: change.z,
        });
    }
    let z = cascade.finish()?;
    let (logits, prob) = head::seg_head(g, store, z, (h, w))?;
    Ok(ForwardOutput {
        pyramid_a,
        pyramid_b,
        stages,
        logits,
        prob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_set_parsing() {
        let s: StageSet = "4, 3".parse().unwrap();
        assert_eq!(s.top_down(), vec![4, 3]);
        assert_eq!(s.lowest(), 3);
        assert_eq!(s.above(3), Some(4));
        assert_eq!(s.above(4), None);
        assert_eq!(s.to_string(), "4,3");
        assert!("5".parse::<StageSet>().is_err());
        assert!("".parse::<StageSet>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { widths: [8, 8, 16, 32], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { norm_groups: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { stem_stride: 3, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig { widths: [4, 5, 6, 7], head_width: 3, ..Default::default() };
        let store = init_params(&cfg, 3).unwrap();
        let a = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i * 37) % 101) as f64 / 101.0);
        let b = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i * 53) % 97) as f64 / 97.0);
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &a, &b).unwrap();
        assert_eq!(g.shape(out.prob), &[2, 1, 64, 64]);
        assert_eq!(out.stages.iter().map(|s| s.stage).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
        assert_eq!(out.shape_masks().len(), 4);
        assert!(g.value(out.prob).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn ablations_drop_parameters() {
        let full = init_params(&ModelConfig::default(), 0).unwrap();
        let cfg = ModelConfig { cdl: false, bsa: false, rega: false, ..Default::default() };
        let slim = init_params(&cfg, 0).unwrap();
        assert!(slim.len() < full.len());
        assert!(!slim.names().any(|n| n.starts_with("cdl.") || n.starts_with("bsa.") || n.starts_with("rega.")));
    }

    #[test]
    fn init_is_deterministic_per_name() {
        let a = init_params(&ModelConfig::default(), 11).unwrap();
        let b = init_params(&ModelConfig { bsa: false, ..Default::default() }, 11).unwrap();
        let name = "backbone.stage2.block0.conv1.weight";
        assert_eq!(a.value(name).unwrap(), b.value(name).unwrap());
    }
}

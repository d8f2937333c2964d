//! Finite-difference gradient checks of each network module and of the
//! whole objective on small inputs.

use fino_tensor::suite::run_op_suite;
use fino_tensor::{grad_check, GradCheckConfig, GradCheckReport, Graph, ParamStore, ParamReport, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FinoError, Result};
use crate::losses::{objective, LossWeights};
use crate::model::{backbone, bsa, cdl, forward, gate, head, init_params, Activation, ModelConfig, RclPolarity};

/// Names accepted by [`check_module`].
pub const MODULES: [&str; 6] = ["ops", "backbone", "cdl", "bsa", "rega-ccl-head", "full"];

/// A tiny network: every code path, few parameters.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        widths: [2, 3, 4, 5],
        blocks: [1, 1, 1, 1],
        head_width: 2,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
}

/// Collapses `x` to a scalar through fixed random weights, so every
/// element gets a distinct, non-trivial upstream gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(x), -1.0, 1.0);
    let w = g.constant(w)?;
    let y = g.mul(x, w)?;
    Ok(g.sum(y)?)
}

fn sum_all(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// Zero-initialized biases put dead units exactly on the relu kink, where
/// central differences see half a slope. Checks run from random biases.
fn check(store: &ParamStore, cfg: &GradCheckConfig, f: impl FnMut(&mut Graph, &ParamStore) -> Result<Var>) -> Result<GradCheckReport> {
    let mut store = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(fino_tensor::suite::fnv1a("bias"));
    for (name, p) in store.iter_mut() {
        if name.ends_with("bias") || name.ends_with("beta") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    grad_check(&store, cfg, f)
}

fn backbone_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = tiny_model();
    let store = init_params(&model, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0), random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0));
    let only: Vec<String> = store.names().filter(|n| n.starts_with("backbone.")).map(String::from).collect();
    let cfg = GradCheckConfig { only: Some(only), ..cfg.clone() };
    check(&store, &cfg, |g, s| {
        let xa = g.input(a.clone(), false)?;
        let xb = g.input(b.clone(), false)?;
        let pa = backbone::encode(g, s, &model, xa)?;
        let pb = backbone::encode(g, s, &model, xb)?;
        let mut parts = Vec::new();
        for stage in 1..=4 {
            let d = backbone::diff(g, pa.stage(stage), pb.stage(stage))?;
            parts.push(project(g, d, stage as u64)?);
        }
        sum_all(g, &parts)
    })
}

fn cdl_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    cdl::init(&mut store, 2, 4, 5, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = random(&mut rng, &[2, 4, 8, 8], 0.0, 1.0);
    let z = random(&mut rng, &[2, 5, 4, 4], 0.0, 1.0);
    check(&store, cfg, |g, s| {
        let c = g.input(c.clone(), false)?;
        let z = g.input(z.clone(), false)?;
        let t = cdl::cdl_forward(g, s, 2, c, Some(z), 4)?;
        project(g, t, 1)
    })
}

fn bsa_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    bsa::init(&mut store, 1, 3, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let t = random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let gt = binary(&mut rng, &[2, 1, 8, 8]);
    check(&store, cfg, |g, s| {
        let t = g.input(t.clone(), false)?;
        let out = bsa::shape_branch(g, s, 1, t)?;
        let sal = bsa::shape_supervision_loss(g, &[out.m], &gt)?;
        // The contrastive losses read the shape features as stand-ins for
        // stage-4 features of the two images.
        let fa = g.affine(out.h, 1.0, 0.1)?;
        let fb = second_view(g, out.h)?;
        let gcl = bsa::global_brightness_loss(g, fa, fb)?;
        let rcl = bsa::region_align_loss(g, fa, fb, &gt, RclPolarity::Unchanged)?;
        let feat = project(g, out.h, 2)?;
        sum_all(g, &[sal, gcl, rcl, feat])
    })
}

/// A second feature map that depends on `h` differently from the first.
fn second_view(g: &mut Graph, h: Var) -> Result<Var> {
    let t = g.tanh(h)?;
    Ok(g.affine(t, 2.0, 0.3)?)
}

fn gate_head_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    gate::init_gate(&mut store, 1, 3, 5)?;
    gate::init_ccl(&mut store, 1, 3, 5)?;
    head::init(&mut store, 3, 2, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let xa = random(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let xb = random(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let h = random(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let m = random(&mut rng, &[2, 1, 8, 8], 0.05, 0.95);
    let gt = binary(&mut rng, &[2, 1, 32, 32]);
    check(&store, cfg, |g, s| {
        let (xa, xb) = (g.input(xa.clone(), false)?, g.input(xb.clone(), false)?);
        let (h, m) = (g.input(h.clone(), false)?, g.input(m.clone(), false)?);
        let gated = gate::rega_gate(g, s, 1, xa, xb, h, Some(m), false)?;
        let change = gate::ccl(g, s, 1, gated.ia, gated.ib)?;
        let (_, prob) = head::seg_head(g, s, change.z, (32, 32))?;
        Ok(g.bce(prob, &gt, bsa::PROB_EPS)?)
    })
}

/// Full objective of [`tiny_model`] on one random 32x32 pair. The backbone
/// runs with tanh: relu feeding max-pool leaves too many exact kinks for a
/// 1e-4 step across thousands of activations.
pub fn full_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = ModelConfig {
        activation: Activation::Tanh,
        ..tiny_model()
    };
    let store = init_params(&model, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let b = random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let gt = binary(&mut rng, &[1, 1, 32, 32]);
    check(&store, cfg, |g, s| {
        let out = forward(g, s, &model, &a, &b)?;
        Ok(objective(g, &out, &gt, &model, LossWeights::default())?.0)
    })
}

/// Runs the check named `name` (one of [`MODULES`]). The operator suite
/// yields one report per op and seed, the rest a single report.
pub fn check_module(name: &str, cfg: &GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    Ok(match name {
        "ops" => run_op_suite(&[0, 1, 2, 3, 4], cfg)?
            .into_iter()
            .map(|o| (format!("op {} seed {}", o.name, o.seed), o.report))
            .collect(),
        "backbone" => vec![(name.into(), backbone_check(cfg)?)],
        "cdl" => vec![(name.into(), cdl_check(cfg)?)],
        "bsa" => vec![(name.into(), bsa_check(cfg)?)],
        "rega-ccl-head" => vec![(name.into(), gate_head_check(cfg)?)],
        "full" => vec![(name.into(), full_check(cfg)?)],
        _ => return Err(FinoError::Config(format!("unknown module `{name}`, expected one of {}", MODULES.join(", ")))),
    })
}

/// Worst entry of a report, if any parameter was probed.
pub fn worst(report: &GradCheckReport) -> Option<&ParamReport> {
    report.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
}

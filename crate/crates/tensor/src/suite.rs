//! Gradient checks for every differentiable op on random small shapes.
//!
//! Each case draws a shape no larger than `2x4x9x9`, registers its inputs as
//! parameters and reduces the op output with fixed random weights so every
//! output element contributes to the checked scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::kernels::ResizeMode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

type Build = fn(&mut Case) -> Result<()>;

/// A registered op check.
#[derive(Clone, Copy)]
pub struct OpCheck {
    pub name: &'static str,
    build: Build,
}

#[derive(Debug, Clone)]
pub struct OpCheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

type Program = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

/// Random inputs plus the op applied to them.
struct Case {
    rng: ChaCha8Rng,
    store: ParamStore,
    program: Option<Program>,
}

impl Case {
    fn shape(&mut self, min_hw: usize) -> [usize; 4] {
        [
            self.rng.random_range(1..=2),
            self.rng.random_range(1..=4),
            self.rng.random_range(min_hw.max(1)..=9),
            self.rng.random_range(min_hw.max(1)..=9),
        ]
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    /// Values with magnitude at least `gap`, keeping kinks at zero out of
    /// reach of the finite-difference step.
    fn away_from_zero(&mut self, shape: &[usize], gap: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    /// Distinct values spaced 0.01 apart in random order.
    fn distinct(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            values.swap(i, j);
        }
        Tensor::from_vec(shape, values).expect("shape matches")
    }

    fn add(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.store.insert(name, t)
    }

    fn set(&mut self, program: impl Fn(&mut Graph, &ParamStore) -> Result<Var> + 'static) {
        self.program = Some(Box::new(program));
    }

    /// Registers a unary op over a single input `x`, reduced with random weights.
    fn unary(&mut self, x: Tensor, op: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> Result<()> {
        self.add("x", x)?;
        let weights = self.weights_for_unary(&op)?;
        self.set(move |g, s| {
            let x = g.param(s, "x")?;
            let y = op(g, x)?;
            weighted_sum(g, y, &weights)
        });
        Ok(())
    }

    fn weights_for_unary(&mut self, op: &dyn Fn(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.param(&self.store, "x")?;
        let y = op(&mut g, x)?;
        let shape = g.shape(y).to_vec();
        Ok(self.uniform(&shape, -1.0, 1.0))
    }

    fn binary(&mut self, a: Tensor, b: Tensor, op: impl Fn(&mut Graph, Var, Var) -> Result<Var> + 'static) -> Result<()> {
        self.add("a", a)?;
        self.add("b", b)?;
        let shape = {
            let mut g = Graph::new();
            let (a, b) = (g.param(&self.store, "a")?, g.param(&self.store, "b")?);
            let y = op(&mut g, a, b)?;
            g.shape(y).to_vec()
        };
        let weights = self.uniform(&shape, -1.0, 1.0);
        self.set(move |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = op(g, a, b)?;
            weighted_sum(g, y, &weights)
        });
        Ok(())
    }
}

fn weighted_sum(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

macro_rules! check {
    ($name:literal, $build:expr) => {
        OpCheck { name: $name, build: $build }
    };
}

/// Every differentiable op of the graph.
pub fn registered_ops() -> Vec<OpCheck> {
    vec![
        check!("conv2d", |c| {
            let kernels = [1, 3, 5];
            let kh = kernels[c.rng.random_range(0..3)];
            let kw = kernels[c.rng.random_range(0..3)];
            let stride = c.rng.random_range(1..=2);
            let pad = (c.rng.random_range(0..=kh / 2), c.rng.random_range(0..=kw / 2));
            let [b, cin, h, w] = c.shape(kh.max(kw));
            let cout = c.rng.random_range(1..=4);
            let x = c.uniform(&[b, cin, h, w], -1.0, 1.0);
            let k = c.uniform(&[cout, cin, kh, kw], -1.0, 1.0);
            c.binary(x, k, move |g, x, k| g.conv2d(x, k, stride, pad))
        }),
        check!("add_channel_bias", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            let b = c.uniform(&[s[1]], -1.0, 1.0);
            c.binary(x, b, |g, x, b| g.add_channel_bias(x, b))
        }),
        check!("scale_channels", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            let w = c.uniform(&[s[0], s[1], 1, 1], -1.0, 1.0);
            c.binary(x, w, |g, x, w| g.scale_channels(x, w))
        }),
        check!("max_pool2d", |c| {
            let s = c.shape(2);
            let x = c.distinct(&s);
            let stride = c.rng.random_range(1..=2);
            c.unary(x, move |g, x| g.max_pool2d(x, (2, 2), stride))
        }),
        check!("avg_pool2d", |c| {
            let s = c.shape(3);
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, |g, x| g.avg_pool2d(x, (3, 2), 2))
        }),
        check!("global_avg_pool", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, |g, x| g.global_avg_pool(x))
        }),
        check!("global_max_pool", |c| {
            let s = c.shape(1);
            let x = c.distinct(&s);
            c.unary(x, |g, x| g.global_max_pool(x))
        }),
        check!("softmax", |c| {
            let s = c.shape(1);
            let axis = c.rng.random_range(0..4);
            let x = c.uniform(&s, -2.0, 2.0);
            c.unary(x, move |g, x| g.softmax(x, axis))
        }),
        check!("add", |c| {
            let s = c.shape(1);
            let (a, b) = (c.uniform(&s, -1.0, 1.0), c.uniform(&s, -1.0, 1.0));
            c.binary(a, b, |g, a, b| g.add(a, b))
        }),
        check!("sub", |c| {
            let s = c.shape(1);
            let (a, b) = (c.uniform(&s, -1.0, 1.0), c.uniform(&s, -1.0, 1.0));
            c.binary(a, b, |g, a, b| g.sub(a, b))
        }),
        check!("mul", |c| {
            let s = c.shape(1);
            let (a, b) = (c.uniform(&s, -1.0, 1.0), c.uniform(&s, -1.0, 1.0));
            c.binary(a, b, |g, a, b| g.mul(a, b))
        }),
        check!("abs", |c| {
            let s = c.shape(1);
            let x = c.away_from_zero(&s, 0.05);
            c.unary(x, |g, x| g.abs(x))
        }),
        check!("sigmoid", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -4.0, 4.0);
            c.unary(x, |g, x| g.sigmoid(x))
        }),
        check!("relu", |c| {
            let s = c.shape(1);
            let x = c.away_from_zero(&s, 0.05);
            c.unary(x, |g, x| g.relu(x))
        }),
        check!("tanh", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -2.0, 2.0);
            c.unary(x, |g, x| g.tanh(x))
        }),
        check!("concat_channels", |c| {
            let s = c.shape(1);
            let extra = c.rng.random_range(1..=3);
            let a = c.uniform(&s, -1.0, 1.0);
            let b = c.uniform(&[s[0], extra, s[2], s[3]], -1.0, 1.0);
            c.binary(a, b, |g, a, b| g.concat_channels(&[a, b, a]))
        }),
        check!("broadcast_mul", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            let m = c.uniform(&[s[0], 1, s[2], s[3]], -1.0, 1.0);
            c.binary(x, m, |g, x, m| g.broadcast_mul(x, m))
        }),
        check!("resize_nearest", |c| {
            let s = c.shape(1);
            let target = (c.rng.random_range(1..=9), c.rng.random_range(1..=9));
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, move |g, x| g.resize(x, target, ResizeMode::Nearest))
        }),
        check!("resize_bilinear", |c| {
            let s = c.shape(1);
            let target = (c.rng.random_range(1..=9), c.rng.random_range(1..=9));
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, move |g, x| g.resize(x, target, ResizeMode::Bilinear))
        }),
        check!("reshape", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, move |g, x| g.reshape(x, &[s[0] * s[1], s[2] * s[3]]))
        }),
        check!("permute", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, |g, x| g.permute(x, &[2, 0, 3, 1]))
        }),
        check!("affine", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, |g, x| g.affine(x, 0.5, 0.5))
        }),
        check!("clamp", |c| {
            let s = c.shape(1);
            // magnitudes in [0.05, 1) scaled so none sit near the bounds at ±0.5
            let x = c.away_from_zero(&s, 0.05).map(|v| if v.abs() < 0.45 { v } else { v.signum() * (v.abs() + 0.1) });
            c.unary(x, |g, x| g.clamp(x, -0.5, 0.5))
        }),
        check!("channel_cosine", |c| {
            let s = c.shape(1);
            let (a, b) = (c.uniform(&s, -1.0, 1.0), c.uniform(&s, -1.0, 1.0));
            c.binary(a, b, |g, a, b| g.channel_cosine(a, b, 1e-8))
        }),
        check!("bce", |c| {
            let s = c.shape(1);
            let p = c.uniform(&s, 0.05, 0.95);
            let rng = &mut c.rng;
            let target = Tensor::from_fn(&s, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            c.unary(p, move |g, p| g.bce(p, &target, 1e-6))
        }),
        check!("sum", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, |g, x| g.sum(x))
        }),
        check!("mean", |c| {
            let s = c.shape(1);
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, |g, x| g.mean(x))
        }),
        check!("group_norm", |c| {
            let mut s = c.shape(2);
            s[1] = 4;
            let x = c.uniform(&s, -1.0, 1.0);
            c.unary(x, |g, x| g.group_norm(x, 2, 1e-5))
        }),
    ]
}

impl OpCheck {
    pub fn run(&self, seed: u64, cfg: &GradCheckConfig) -> Result<OpCheckOutcome> {
        let mut case = Case {
            rng: ChaCha8Rng::seed_from_u64(seed ^ fnv1a(self.name)),
            store: ParamStore::new(),
            program: None,
        };
        (self.build)(&mut case)?;
        let program = case.program.expect("every check registers a program");
        let report = grad_check(&case.store, cfg, |g, s| program(g, s))?;
        Ok(OpCheckOutcome {
            name: self.name,
            seed,
            report,
        })
    }
}

/// Runs every registered op check once per seed.
pub fn run_op_suite(seeds: &[u64], cfg: &GradCheckConfig) -> Result<Vec<OpCheckOutcome>> {
    let mut out = Vec::new();
    for check in registered_ops() {
        for &seed in seeds {
            out.push(check.run(seed, cfg)?);
        }
    }
    Ok(out)
}

/// 64-bit FNV-1a, used to derive per-name seeds.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

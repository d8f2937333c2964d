//! Synthetic bitemporal scenes with controllable change and noise.
//!
//! A scene holds rectangular "buildings" (some rotated) on a textured
//! background. Each object belongs to one population:
//!
//! * static: identical in both images, unchanged;
//! * change: present in exactly one image, labeled changed;
//! * pseudo: same footprint but recolored/retextured, labeled unchanged.
//!
//! After rendering, each image independently receives a global brightness
//! shift, a per-channel tint and i.i.d. Gaussian pixel noise.

use std::f64::consts::PI;

use fino_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::BitemporalPair;
use crate::error::{FinoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Canvas height and width in pixels.
    pub size: usize,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_extent: (f64, f64),
    /// Fraction of objects that are pseudo-changes.
    pub pseudo_fraction: f64,
    /// Fraction of the remaining objects that are true changes.
    pub change_fraction: f64,
    /// Fraction of objects drawn rotated rather than axis-aligned.
    pub rotated_fraction: f64,
    /// Additive per-image brightness shift range.
    pub brightness: (f64, f64),
    /// Multiplicative per-image, per-channel tint range.
    pub tint: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            objects: (3, 6),
            object_extent: (10.0, 20.0),
            pseudo_fraction: 0.25,
            change_fraction: 0.5,
            rotated_fraction: 0.3,
            brightness: (-0.1, 0.1),
            tint: (0.9, 1.1),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A scene with no objects and no photometric noise.
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            objects: (0, 0),
            brightness: (0.0, 0.0),
            tint: (1.0, 1.0),
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FinoError::Config(msg));
        if self.size == 0 {
            return bad("canvas size must be positive".into());
        }
        if self.objects.0 > self.objects.1 {
            return bad(format!("object count range {:?} is reversed", self.objects));
        }
        let (lo, hi) = self.object_extent;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("object extent range {:?} is invalid", self.object_extent));
        }
        for (name, f) in [
            ("pseudo_fraction", self.pseudo_fraction),
            ("change_fraction", self.change_fraction),
            ("rotated_fraction", self.rotated_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} is outside [0, 1]"));
            }
        }
        if self.brightness.0.is_nan() || self.brightness.1.is_nan() || self.brightness.0 > self.brightness.1 {
            return bad(format!("brightness range {:?} is reversed", self.brightness));
        }
        if !(self.tint.0 <= self.tint.1 && self.tint.0 >= 0.0) {
            return bad(format!("tint range {:?} is invalid", self.tint));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} is invalid", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Static,
    /// Present only in image A (`in_a`) or only in image B.
    Change { in_a: bool },
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Appearance {
    color: [f64; 3],
    stripe_period: f64,
    stripe_amplitude: f64,
}

/// A rectangle of `size = (width, height)` centered at `center = (x, y)`,
/// rotated counter-clockwise by `angle` radians.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub angle: f64,
    pub population: Population,
    look_a: Appearance,
    look_b: Appearance,
}

impl SceneObject {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Whether the center of pixel `(col, row)` lies inside the rectangle.
    pub fn covers(&self, col: usize, row: usize) -> bool {
        let (u, v) = self.local(col as f64 + 0.5, row as f64 + 0.5);
        u.abs() <= self.size.0 / 2.0 && v.abs() <= self.size.1 / 2.0
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.angle.sin_cos();
        let (hw, hh) = (self.size.0 / 2.0, self.size.1 / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| (self.center.0 + u * c - v * s, self.center.1 + u * s + v * c))
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.corners().iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }

    pub fn visible_in_a(&self) -> bool {
        !matches!(self.population, Population::Change { in_a: false })
    }

    pub fn visible_in_b(&self) -> bool {
        !matches!(self.population, Population::Change { in_a: true })
    }

    pub fn is_change(&self) -> bool {
        matches!(self.population, Population::Change { .. })
    }

    fn shade(&self, look: &Appearance, col: usize, row: usize) -> [f64; 3] {
        let (u, _) = self.local(col as f64 + 0.5, row as f64 + 0.5);
        let stripe = if (u / look.stripe_period).rem_euclid(2.0) < 1.0 { 1.0 } else { -1.0 };
        look.color.map(|c| (c * (1.0 + look.stripe_amplitude * stripe)).clamp(0.0, 1.0))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream))
}

fn roof_look(rng: &mut ChaCha8Rng) -> Appearance {
    Appearance {
        color: [0; 3].map(|_| rng.random_range(0.55..0.95)),
        stripe_period: rng.random_range(2.0..5.0),
        stripe_amplitude: rng.random_range(0.0..0.15),
    }
}

/// A roof look whose color differs from `other` by at least 0.3 in L1.
fn recolored(rng: &mut ChaCha8Rng, other: &Appearance) -> Appearance {
    loop {
        let look = roof_look(rng);
        let dist: f64 = look.color.iter().zip(&other.color).map(|(a, b)| (a - b).abs()).sum();
        if dist >= 0.3 {
            return look;
        }
    }
}

fn populations(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize) -> Vec<Population> {
    let pseudo = (cfg.pseudo_fraction * n as f64).round() as usize;
    let rest = n - pseudo.min(n);
    let change = (cfg.change_fraction * rest as f64).round() as usize;
    let mut pops = Vec::with_capacity(n);
    pops.extend(std::iter::repeat_n(Population::Pseudo, pseudo.min(n)));
    for _ in 0..change.min(rest) {
        pops.push(Population::Change { in_a: rng.random_bool(0.5) });
    }
    pops.extend(std::iter::repeat_n(Population::Static, rest - change.min(rest)));
    pops.shuffle(rng);
    pops
}

fn place(rng: &mut ChaCha8Rng, cfg: &SynthConfig, placed: &[SceneObject], population: Population) -> Option<SceneObject> {
    const ATTEMPTS: usize = 500;
    const GAP: f64 = 2.0;
    let canvas = cfg.size as f64;
    for _ in 0..ATTEMPTS {
        let size = (
            rng.random_range(cfg.object_extent.0..=cfg.object_extent.1),
            rng.random_range(cfg.object_extent.0..=cfg.object_extent.1),
        );
        let angle = if rng.random_bool(cfg.rotated_fraction) {
            rng.random_range(0.1..PI / 2.0 - 0.1)
        } else {
            0.0
        };
        let center = (rng.random_range(0.0..canvas), rng.random_range(0.0..canvas));
        let look_a = roof_look(rng);
        let look_b = match population {
            Population::Pseudo => recolored(rng, &look_a),
            _ => look_a,
        };
        let candidate = SceneObject {
            center,
            size,
            angle,
            population,
            look_a,
            look_b,
        };
        let (x0, y0, x1, y1) = candidate.bounds();
        if x0 < 1.0 || y0 < 1.0 || x1 > canvas - 1.0 || y1 > canvas - 1.0 {
            continue;
        }
        let clear = placed.iter().all(|o| {
            let (a0, b0, a1, b1) = o.bounds();
            x1 + GAP <= a0 || a1 + GAP <= x0 || y1 + GAP <= b0 || b1 + GAP <= y0
        });
        if clear {
            return Some(candidate);
        }
    }
    None
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let base = [rng.random_range(0.2..0.35), rng.random_range(0.3..0.45), rng.random_range(0.15..0.3)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.01..0.04),
            )
        })
        .collect();
    let mut img = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let tex: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for (c, b) in base.iter().enumerate() {
                img[(c * size + y) * size + x] = b + tex;
            }
        }
    }
    img
}

fn photometric(rng: &mut ChaCha8Rng, cfg: &SynthConfig, img: &mut [f64]) -> Result<()> {
    let shift = rng.random_range(cfg.brightness.0..=cfg.brightness.1);
    let tint: [f64; 3] = [0; 3].map(|_| rng.random_range(cfg.tint.0..=cfg.tint.1));
    let plane = img.len() / 3;
    for (c, chunk) in img.chunks_mut(plane).enumerate() {
        for v in chunk.iter_mut() {
            *v = *v * tint[c] + shift;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| FinoError::Config(e.to_string()))?;
        for v in img.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(())
}

/// Lays out the objects of scene `index`.
pub fn generate_scene(cfg: &SynthConfig, index: u64) -> Result<Vec<SceneObject>> {
    let (objects, _) = layout(cfg, index)?;
    Ok(objects)
}

const LAYOUT_RESTARTS: usize = 20;

fn layout(cfg: &SynthConfig, index: u64) -> Result<(Vec<SceneObject>, ChaCha8Rng)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index));
    let n = rng.random_range(cfg.objects.0..=cfg.objects.1);
    let pops = populations(&mut rng, cfg, n);
    // Greedy placement can paint itself into a corner; start over a few
    // times before calling the canvas too small.
    'layouts: for _ in 0..LAYOUT_RESTARTS {
        let mut objects = Vec::with_capacity(n);
        for &population in &pops {
            match place(&mut rng, cfg, &objects, population) {
                Some(obj) => objects.push(obj),
                None => continue 'layouts,
            }
        }
        return Ok((objects, rng));
    }
    Err(FinoError::Generation(format!(
        "canvas {0}x{0} too small for {n} objects of extent {1:?}",
        cfg.size, cfg.object_extent
    )))
}

/// Renders scene `index`; a pure function of `(cfg, index)`.
pub fn generate_pair(cfg: &SynthConfig, index: u64) -> Result<BitemporalPair> {
    let (objects, mut rng) = layout(cfg, index)?;
    let size = cfg.size;
    let bg = background(&mut rng, size);
    let (mut a, mut b) = (bg.clone(), bg);
    let mut mask = vec![0.0; size * size];
    for obj in &objects {
        let (x0, y0, x1, y1) = obj.bounds();
        let rows = (y0.floor().max(0.0) as usize)..((y1.ceil() as usize).min(size));
        let cols = (x0.floor().max(0.0) as usize)..((x1.ceil() as usize).min(size));
        for row in rows {
            for col in cols.clone() {
                if !obj.covers(col, row) {
                    continue;
                }
                let at = row * size + col;
                if obj.visible_in_a() {
                    let rgb = obj.shade(&obj.look_a, col, row);
                    (0..3).for_each(|c| a[c * size * size + at] = rgb[c]);
                }
                if obj.visible_in_b() {
                    let rgb = obj.shade(&obj.look_b, col, row);
                    (0..3).for_each(|c| b[c * size * size + at] = rgb[c]);
                }
                if obj.is_change() {
                    mask[at] = 1.0;
                }
            }
        }
    }
    photometric(&mut rng, cfg, &mut a)?;
    photometric(&mut rng, cfg, &mut b)?;
    BitemporalPair::new(
        format!("synth_{:016x}_{index:06}", cfg.seed),
        Tensor::from_vec(&[3, size, size], a)?,
        Tensor::from_vec(&[3, size, size], b)?,
        Tensor::from_vec(&[1, size, size], mask)?,
    )
}

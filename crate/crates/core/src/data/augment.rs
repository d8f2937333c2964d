use fino_tensor::Tensor;
use rand::Rng;

use super::BitemporalPair;
use crate::error::{FinoError, Result};

/// Random augmentations. Geometric transforms hit both images and the mask
/// identically; brightness variation touches the images only.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub hflip: f64,
    pub vflip: f64,
    /// Probability of rotating by a random multiple of 90 degrees.
    pub rotate90: f64,
    /// Side of a random square crop.
    pub crop: Option<usize>,
    /// Maximum absolute additive brightness change, drawn per image.
    pub brightness: f64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rotate90: 0.0,
            crop: None,
            brightness: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip", self.hflip), ("vflip", self.vflip), ("rotate90", self.rotate90)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FinoError::Config(format!("augmentation probability {name} = {p} is outside [0, 1]")));
            }
        }
        if !(self.brightness >= 0.0 && self.brightness.is_finite()) {
            return Err(FinoError::Config(format!("brightness variation {} is invalid", self.brightness)));
        }
        if self.crop == Some(0) {
            return Err(FinoError::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rotate90: 0.5,
            crop: None,
            brightness: 0.0,
        }
    }
}

/// Applies `f(c, h, w, src) -> (new_h, new_w, data)` to every tensor of the pair.
fn map_geometry(pair: &BitemporalPair, f: impl Fn(usize, usize, usize, &[f64]) -> (usize, usize, Vec<f64>)) -> BitemporalPair {
    let apply = |t: &Tensor| {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (nh, nw, data) = f(c, h, w, t.data());
        Tensor::from_vec(&[c, nh, nw], data).expect("geometry keeps element count")
    };
    BitemporalPair {
        id: pair.id.clone(),
        image_a: apply(&pair.image_a),
        image_b: apply(&pair.image_b),
        mask: apply(&pair.mask),
    }
}

pub fn flip_horizontal(pair: &BitemporalPair) -> BitemporalPair {
    map_geometry(pair, |c, h, w, src| {
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(w).take(c * h) {
            out.extend(row.iter().rev());
        }
        (h, w, out)
    })
}

pub fn flip_vertical(pair: &BitemporalPair) -> BitemporalPair {
    map_geometry(pair, |c, h, w, src| {
        let mut out = Vec::with_capacity(src.len());
        for plane in src.chunks(h * w).take(c) {
            for row in plane.chunks(w).rev() {
                out.extend_from_slice(row);
            }
        }
        (h, w, out)
    })
}

/// Rotates counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate90(pair: &BitemporalPair, quarter_turns: u32) -> BitemporalPair {
    let mut out = pair.clone();
    for _ in 0..quarter_turns % 4 {
        out = map_geometry(&out, |c, h, w, src| {
            // new[y][x] = old[x][w - 1 - y], new extents (w, h)
            let mut data = Vec::with_capacity(src.len());
            for plane in src.chunks(h * w).take(c) {
                for y in 0..w {
                    for x in 0..h {
                        data.push(plane[x * w + (w - 1 - y)]);
                    }
                }
            }
            (w, h, data)
        });
    }
    out
}

fn crop(pair: &BitemporalPair, top: usize, left: usize, size: usize) -> BitemporalPair {
    map_geometry(pair, |c, h, w, src| {
        let mut data = Vec::with_capacity(c * size * size);
        for plane in src.chunks(h * w).take(c) {
            for y in top..top + size {
                data.extend_from_slice(&plane[y * w + left..y * w + left + size]);
            }
        }
        (size, size, data)
    })
}

fn shift_brightness(img: &Tensor, delta: f64) -> Tensor {
    img.map(|v| (v + delta).clamp(0.0, 1.0))
}

/// Draws and applies one random augmentation.
pub fn augment<R: Rng>(pair: &BitemporalPair, policy: &AugmentPolicy, rng: &mut R) -> Result<BitemporalPair> {
    policy.validate()?;
    let mut out = pair.clone();
    if let Some(size) = policy.crop {
        if size > out.height() || size > out.width() {
            return Err(FinoError::Data(format!(
                "crop {size} exceeds {}x{} pair {}",
                out.height(),
                out.width(),
                out.id
            )));
        }
        let top = rng.random_range(0..=out.height() - size);
        let left = rng.random_range(0..=out.width() - size);
        out = crop(&out, top, left, size);
    }
    if rng.random_bool(policy.hflip) {
        out = flip_horizontal(&out);
    }
    if rng.random_bool(policy.vflip) {
        out = flip_vertical(&out);
    }
    if rng.random_bool(policy.rotate90) {
        out = rotate90(&out, rng.random_range(1..=3));
    }
    if policy.brightness > 0.0 {
        let da = rng.random_range(-policy.brightness..=policy.brightness);
        let db = rng.random_range(-policy.brightness..=policy.brightness);
        out.image_a = shift_brightness(&out.image_a, da);
        out.image_b = shift_brightness(&out.image_b, db);
    }
    Ok(out)
}

//! Bitemporal pairs: synthetic generation, tiling, augmentation and PNG I/O.

mod augment;
mod io;
mod synth;
mod tile;

pub use augment::{augment, flip_horizontal, flip_vertical, rotate90, AugmentPolicy};
pub use io::{load_dataset, load_label, load_rgb, save_mask_png, save_pair, save_rgb};
pub use synth::{generate_pair, generate_scene, Population, SceneObject, SynthConfig};
pub use tile::tile;
pub(crate) use synth::derive_seed;

use fino_tensor::Tensor;

use crate::error::{FinoError, Result};

/// Spatial extents must be multiples of this for the four-stage encoder.
pub const STAGE_DIVISOR: usize = 32;

/// Two co-registered `[3, H, W]` images in `[0, 1]` plus a binary
/// `[1, H, W]` change mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BitemporalPair {
    pub id: String,
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub mask: Tensor,
}

impl BitemporalPair {
    pub fn new(id: impl Into<String>, image_a: Tensor, image_b: Tensor, mask: Tensor) -> Result<Self> {
        let id = id.into();
        let [c, h, w] = image_a.shape() else {
            return Err(FinoError::Data(format!("{id}: image_a must be [3,H,W], got {:?}", image_a.shape())));
        };
        if *c != 3 {
            return Err(FinoError::Data(format!("{id}: expected 3 channels, got {c}")));
        }
        if image_b.shape() != image_a.shape() {
            return Err(FinoError::Data(format!(
                "{id}: image_b {:?} does not match image_a {:?}",
                image_b.shape(),
                image_a.shape()
            )));
        }
        if mask.shape() != [1, *h, *w] {
            return Err(FinoError::Data(format!("{id}: mask {:?} does not match {h}x{w}", mask.shape())));
        }
        if !is_binary(&mask) {
            return Err(FinoError::Data(format!("{id}: mask is not binary")));
        }
        Ok(Self {
            id,
            image_a,
            image_b,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn changed_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Errors unless both extents are multiples of [`STAGE_DIVISOR`].
    pub fn ensure_stage_compatible(&self) -> Result<()> {
        if !self.height().is_multiple_of(STAGE_DIVISOR) || !self.width().is_multiple_of(STAGE_DIVISOR) {
            return Err(FinoError::Data(format!(
                "{}: extents {}x{} are not multiples of {STAGE_DIVISOR}",
                self.id,
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

pub fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Stacks pairs into `[B, 3, H, W]` image batches and a `[B, 1, H, W]` mask batch.
pub fn collate(pairs: &[&BitemporalPair]) -> Result<(Tensor, Tensor, Tensor)> {
    let expand = |t: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    };
    let a: Vec<Tensor> = pairs.iter().map(|p| expand(&p.image_a)).collect::<Result<_, _>>()?;
    let b: Vec<Tensor> = pairs.iter().map(|p| expand(&p.image_b)).collect::<Result<_, _>>()?;
    let m: Vec<Tensor> = pairs.iter().map(|p| expand(&p.mask)).collect::<Result<_, _>>()?;
    Ok((
        Tensor::stack(&a.iter().collect::<Vec<_>>())?,
        Tensor::stack(&b.iter().collect::<Vec<_>>())?,
        Tensor::stack(&m.iter().collect::<Vec<_>>())?,
    ))
}

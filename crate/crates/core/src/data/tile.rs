use fino_tensor::Tensor;

use super::BitemporalPair;
use crate::error::{FinoError, Result};

fn crop(t: &Tensor, row: usize, col: usize, size: usize) -> Result<Tensor> {
    let [c, _, w] = t.shape() else {
        unreachable!("pair tensors are rank 3")
    };
    let (c, w) = (*c, *w);
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in row..row + size {
            let start = (ch * t.shape()[1] + y) * w + col;
            data.extend_from_slice(&t.data()[start..start + size]);
        }
    }
    Ok(Tensor::from_vec(&[c, size, size], data)?)
}

/// Splits a pair into non-overlapping `tile_size` squares in row-major order.
///
/// Trailing rows and columns that do not fill a whole tile are dropped.
/// Tile ids are `<source id>_r<row>_c<col>`.
pub fn tile(pair: &BitemporalPair, tile_size: usize) -> Result<Vec<BitemporalPair>> {
    if tile_size == 0 || tile_size > pair.height() || tile_size > pair.width() {
        return Err(FinoError::Data(format!(
            "tile size {tile_size} does not fit {}x{} pair {}",
            pair.height(),
            pair.width(),
            pair.id
        )));
    }
    let (rows, cols) = (pair.height() / tile_size, pair.width() / tile_size);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r * tile_size, c * tile_size);
            tiles.push(BitemporalPair::new(
                format!("{}_r{r}_c{c}", pair.id),
                crop(&pair.image_a, y, x, tile_size)?,
                crop(&pair.image_b, y, x, tile_size)?,
                crop(&pair.mask, y, x, tile_size)?,
            )?);
        }
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize) -> BitemporalPair {
        BitemporalPair::new(
            "src",
            Tensor::from_fn(&[3, h, w], |i| (i % 251) as f64 / 251.0),
            Tensor::zeros(&[3, h, w]),
            Tensor::from_fn(&[1, h, w], |i| (i % 3 == 0) as u8 as f64),
        )
        .unwrap()
    }

    #[test]
    fn grid_counts() {
        assert_eq!(tile(&pair(1024, 1024), 512).unwrap().len(), 4);
        assert_eq!(tile(&pair(1024, 1024), 256).unwrap().len(), 16);
    }

    #[test]
    fn remainder_dropped_and_ids() {
        let tiles = tile(&pair(100, 70), 32).unwrap();
        assert_eq!(tiles.len(), 3 * 2);
        assert_eq!(tiles[3].id, "src_r1_c1");
        assert!(tiles.iter().all(|t| t.height() == 32 && t.width() == 32));
    }

    #[test]
    fn oversized_tile_rejected() {
        assert!(tile(&pair(64, 64), 128).is_err());
        assert!(tile(&pair(64, 64), 0).is_err());
    }
}

//! Dataset layout `root/{A,B,label}/<name>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use fino_tensor::Tensor;
use image::{GrayImage, Luma, Rgb, RgbImage};

use super::BitemporalPair;
use crate::error::{FinoError, Result};

const DIRS: [&str; 3] = ["A", "B", "label"];

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| FinoError::load(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

/// Reads a 0/255 label image as a `[1, H, W]` mask of zeros and ones.
pub fn load_label(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| FinoError::load(path, e.to_string()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(h * w);
    for (x, y, px) in img.enumerate_pixels() {
        data.push(match px[0] {
            0 => 0.0,
            255 => 1.0,
            v => {
                return Err(FinoError::load(
                    path,
                    format!("label value {v} at ({x}, {y}) is neither 0 nor 255"),
                ))
            }
        });
    }
    Ok(Tensor::from_vec(&[1, h, w], data)?)
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FinoError::load(dir, e.to_string()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every pair under `root`, sorted by file name.
pub fn load_dataset(root: &Path) -> Result<Vec<BitemporalPair>> {
    let dirs: Vec<PathBuf> = DIRS.iter().map(|d| root.join(d)).collect();
    let listings: Vec<Vec<String>> = dirs.iter().map(|d| png_names(d)).collect::<Result<_>>()?;
    for (i, listing) in listings.iter().enumerate() {
        for name in listing {
            for (j, other) in listings.iter().enumerate() {
                if i != j && other.binary_search(name).is_err() {
                    return Err(FinoError::load(
                        dirs[i].join(name),
                        format!("no counterpart in {}", dirs[j].display()),
                    ));
                }
            }
        }
    }
    let mut pairs = Vec::with_capacity(listings[0].len());
    for name in &listings[0] {
        let a = load_rgb(&dirs[0].join(name))?;
        let b = load_rgb(&dirs[1].join(name))?;
        let label_path = dirs[2].join(name);
        let mask = load_label(&label_path)?;
        if a.shape() != b.shape() || a.shape()[1..] != mask.shape()[1..] {
            return Err(FinoError::load(
                label_path,
                format!("size mismatch: A {:?}, B {:?}, label {:?}", a.shape(), b.shape(), mask.shape()),
            ));
        }
        let id = name.trim_end_matches(".png").trim_end_matches(".PNG").to_string();
        pairs.push(BitemporalPair::new(id, a, b, mask)?);
    }
    Ok(pairs)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(img: &Tensor, path: &Path) -> Result<()> {
    let [3, h, w] = img.shape() else {
        return Err(FinoError::Data(format!("expected [3,H,W] image, got {:?}", img.shape())));
    };
    let (h, w) = (*h, *w);
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| img.data()[(c * h + y as usize) * w + x as usize];
        Rgb([to_byte(at(0)), to_byte(at(1)), to_byte(at(2))])
    });
    out.save(path)?;
    Ok(())
}

/// Writes a binary `[1, H, W]` (or `[H, W]`-shaped) mask as a 0/255 PNG.
pub fn save_mask_png(mask: &Tensor, path: &Path) -> Result<()> {
    let shape = mask.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if mask.numel() != h * w {
        return Err(FinoError::Data(format!("expected a single-channel mask, got {shape:?}")));
    }
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.data()[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
    });
    out.save(path)?;
    Ok(())
}

/// Writes one pair into the `A/`, `B/`, `label/` layout under `root`.
pub fn save_pair(root: &Path, pair: &BitemporalPair) -> Result<()> {
    for d in DIRS {
        fs::create_dir_all(root.join(d))?;
    }
    let file = format!("{}.png", pair.id);
    save_rgb(&pair.image_a, &root.join("A").join(&file))?;
    save_rgb(&pair.image_b, &root.join("B").join(&file))?;
    save_mask_png(&pair.mask, &root.join("label").join(&file))
}

use std::fs;

use fino_core::data::{
    augment, flip_horizontal, generate_pair, generate_scene, load_dataset, load_label, rotate90, save_pair, tile, AugmentPolicy,
    BitemporalPair, SynthConfig,
};
use fino_tensor::Tensor;
use image::{GrayImage, Luma};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn change_only_mask_matches_independent_rasterization() {
    for seed in 0..6 {
        let cfg = SynthConfig {
            seed,
            pseudo_fraction: 0.0,
            change_fraction: 1.0,
            ..SynthConfig::default()
        };
        for index in 0..4 {
            let scene = generate_scene(&cfg, index).unwrap();
            assert!(scene.iter().all(|o| o.is_change()));
            let pair = generate_pair(&cfg, index).unwrap();
            let mut area = 0;
            for obj in &scene {
                for row in 0..cfg.size {
                    for col in 0..cfg.size {
                        area += usize::from(obj.covers(col, row));
                    }
                }
            }
            assert_eq!(pair.changed_pixels(), area, "seed {seed} index {index}");
        }
    }
}

#[test]
fn png_round_trip_within_quantization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { seed: 9, ..SynthConfig::default() };
    let pairs: Vec<BitemporalPair> = (0..3).map(|i| generate_pair(&cfg, i).unwrap()).collect();
    for p in &pairs {
        save_pair(tmp.path(), p).unwrap();
    }
    let loaded = load_dataset(tmp.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    for (orig, back) in pairs.iter().zip(&loaded) {
        assert_eq!(orig.id, back.id);
        assert!(max_abs_diff(&orig.image_a, &back.image_a) <= 0.5 / 255.0 + 1e-12);
        assert!(max_abs_diff(&orig.image_b, &back.image_b) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(orig.mask, back.mask);
    }
}

#[test]
fn empty_directories_give_no_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["A", "B", "label"] {
        fs::create_dir(tmp.path().join(d)).unwrap();
    }
    assert!(load_dataset(tmp.path()).unwrap().is_empty());
}

#[test]
fn all_white_label_is_all_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("l.png");
    GrayImage::from_pixel(64, 64, Luma([255])).save(&path).unwrap();
    let mask = load_label(&path).unwrap();
    assert_eq!(mask.shape(), &[1, 64, 64]);
    assert!(mask.data().iter().all(|&v| v == 1.0));
}

#[test]
fn grey_label_value_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("l.png");
    let mut img = GrayImage::from_pixel(4, 4, Luma([0]));
    img.put_pixel(2, 1, Luma([128]));
    img.save(&path).unwrap();
    let err = load_label(&path).unwrap_err().to_string();
    assert!(err.contains("128") && err.contains("(2, 1)"), "{err}");
}

fn striped(h: usize, w: usize) -> BitemporalPair {
    BitemporalPair::new(
        "big",
        Tensor::from_fn(&[3, h, w], |i| (i % 97) as f64 / 97.0),
        Tensor::from_fn(&[3, h, w], |i| (i % 89) as f64 / 89.0),
        Tensor::from_fn(&[1, h, w], |i| ((i / 7) % 2) as f64),
    )
    .unwrap()
}

#[test]
fn large_pair_tile_counts() {
    let pair = striped(1024, 1024);
    assert_eq!(tile(&pair, 512).unwrap().len(), 4);
    assert_eq!(tile(&pair, 256).unwrap().len(), 16);
}

#[test]
fn tiles_reassemble_to_cropped_source() {
    let (h, w, t) = (100, 70, 32);
    let pair = striped(h, w);
    let tiles = tile(&pair, t).unwrap();
    let (rows, cols) = (h / t, w / t);
    assert_eq!(tiles.len(), rows * cols);
    for (src, pick) in [
        (&pair.image_a, (|p: &BitemporalPair| p.image_a.clone()) as fn(&BitemporalPair) -> Tensor),
        (&pair.image_b, |p| p.image_b.clone()),
        (&pair.mask, |p| p.mask.clone()),
    ] {
        let ch = src.shape()[0];
        for c in 0..ch {
            for y in 0..rows * t {
                for x in 0..cols * t {
                    let piece = pick(&tiles[(y / t) * cols + x / t]);
                    let got = piece.data()[(c * t + y % t) * t + x % t];
                    assert_eq!(got, src.data()[(c * h + y) * w + x]);
                }
            }
        }
    }
}

#[test]
fn identity_policy_leaves_pair() {
    let pair = generate_pair(&SynthConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&pair, &AugmentPolicy::identity(), &mut rng).unwrap(), pair);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_preserves_changed_count(seed in 0u64..1000, turns in 0u32..4) {
        let pair = generate_pair(&SynthConfig { seed, ..SynthConfig::default() }, 0).unwrap();
        let rotated = rotate90(&pair, turns);
        prop_assert_eq!(rotated.changed_pixels(), pair.changed_pixels());
        prop_assert_eq!(rotate90(&rotated, 4 - turns), pair);
    }

    #[test]
    fn horizontal_flip_is_involution(seed in 0u64..1000) {
        let pair = generate_pair(&SynthConfig { seed, ..SynthConfig::default() }, 1).unwrap();
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&pair)), pair);
    }

    #[test]
    fn generation_is_reproducible(seed in any::<u64>(), index in 0u64..64) {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        prop_assert_eq!(generate_pair(&cfg, index).unwrap(), generate_pair(&cfg, index).unwrap());
    }
}

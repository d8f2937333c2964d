//! Training loop, prediction and evaluation.

use std::path::Path;

use fino_tensor::suite::fnv1a;
use fino_tensor::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{augment, collate, derive_seed, save_mask_png, BitemporalPair};
use crate::error::{FinoError, Result};
use crate::losses::objective;
use crate::metrics::{confusion, Confusion, MetricsReport};
use crate::model::head::decide;
use crate::model::{forward, init_params, ModelConfig};
use crate::optim::{poly_lr, AdamW};

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_cd: f64,
    pub l_sal: f64,
    pub l_gcl: f64,
    pub l_rcl: f64,
    pub total: f64,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// `min(epochs * ceil(n / batch), max_steps)`.
pub fn total_steps(cfg: &TrainConfig, pairs: usize) -> usize {
    let per_epoch = pairs.div_ceil(cfg.batch_size);
    let steps = cfg.epochs * per_epoch;
    cfg.max_steps.map_or(steps, |m| m.min(steps))
}

fn common_extents(data: &[BitemporalPair]) -> Result<(usize, usize)> {
    let first = data.first().ok_or_else(|| FinoError::Data("dataset is empty".into()))?;
    let extents = (first.height(), first.width());
    for p in data {
        p.ensure_stage_compatible()?;
        if (p.height(), p.width()) != extents {
            return Err(FinoError::Data(format!(
                "{} is {}x{}, expected {}x{}",
                p.id,
                p.height(),
                p.width(),
                extents.0,
                extents.1
            )));
        }
    }
    Ok(extents)
}

fn augmentation_rng(seed: u64, id: &str, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed ^ fnv1a(id), epoch as u64))
}

/// Trains from scratch, calling `on_step` after every optimizer step.
pub fn train(cfg: &TrainConfig, data: &[BitemporalPair], mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let extents = common_extents(data)?;
    if let Some(crop) = cfg.augment.crop {
        if crop % crate::data::STAGE_DIVISOR != 0 || crop > extents.0.min(extents.1) {
            return Err(FinoError::Config(format!("crop {crop} must be a multiple of 32 within {}x{}", extents.0, extents.1)));
        }
    }
    let mut store = init_params(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let total = total_steps(cfg, data.len());
    let snapshot = |store: &ParamStore, opt: &AdamW, step: usize| Checkpoint {
        params: store.clone(),
        optimizer: Some(opt.clone()),
        step: step as u64,
        config: cfg.clone(),
        extents: Some(extents),
    };
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let batch = chunk
                .iter()
                .map(|&i| augment(&data[i], &cfg.augment, &mut augmentation_rng(cfg.seed, &data[i].id, epoch)))
                .collect::<Result<Vec<_>>>()?;
            let (a, b, mask) = collate(&batch.iter().collect::<Vec<_>>())?;
            let lr = poly_lr(step, total, cfg.lr, cfg.poly_power)?;
            let attempt = (|| {
                let mut g = Graph::new();
                let out = forward(&mut g, &store, &cfg.model, &a, &b)?;
                let (loss, parts) = objective(&mut g, &out, &mask, &cfg.model, cfg.loss)?;
                store.zero_grad();
                g.backward(loss, &mut store)?;
                Ok::<_, FinoError>(parts)
            })();
            let parts = match attempt {
                Ok(p) => p,
                Err(e) if e.is_numeric() => {
                    return Err(FinoError::Diverged {
                        step,
                        last_good: Box::new(snapshot(&store, &opt, step)),
                    })
                }
                Err(e) => return Err(e),
            };
            opt.update(&mut store, lr);
            let entry = StepLog {
                step,
                lr,
                l_cd: parts.l_cd,
                l_sal: parts.l_sal,
                l_gcl: parts.l_gcl,
                l_rcl: parts.l_rcl,
                total: parts.total,
            };
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
    }
    store.zero_grad();
    Ok(TrainOutcome {
        checkpoint: snapshot(&store, &opt, step),
        log,
    })
}

/// Change probabilities `[B, 1, H, W]` for image batches `[B, 3, H, W]`.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = forward(&mut g, store, cfg, a, b)?;
    Ok(g.value(out.prob).clone())
}

fn single(pair: &BitemporalPair) -> Result<(Tensor, Tensor, Tensor)> {
    collate(&[pair])
}

/// Global-count metrics over `data`; optionally writes `<id>.png` masks.
pub fn evaluate_params(
    store: &ParamStore,
    cfg: &ModelConfig,
    data: &[BitemporalPair],
    threshold: f64,
    dump: Option<&Path>,
) -> Result<MetricsReport> {
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir)?;
    }
    let mut counts = Confusion::default();
    for pair in data {
        let (a, b, gt) = single(pair)?;
        let pred = decide(&predict(store, cfg, &a, &b)?, threshold)?;
        counts += confusion(&pred, &gt)?;
        if let Some(dir) = dump {
            save_mask_png(&pred, &dir.join(format!("{}.png", pair.id)))?;
        }
    }
    Ok(MetricsReport::from_counts(counts))
}

/// Like [`evaluate_params`], but rejects data whose extents differ from
/// those the checkpoint was trained on.
pub fn evaluate(ckpt: &Checkpoint, data: &[BitemporalPair], threshold: f64, dump: Option<&Path>) -> Result<MetricsReport> {
    if let Some((h, w)) = ckpt.extents {
        if let Some(p) = data.iter().find(|p| (p.height(), p.width()) != (h, w)) {
            return Err(FinoError::Data(format!(
                "{} is {}x{} but the checkpoint was trained on {h}x{w}",
                p.id,
                p.height(),
                p.width()
            )));
        }
    }
    evaluate_params(&ckpt.params, &ckpt.config.model, data, threshold, dump)
}

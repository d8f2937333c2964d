use fino_core::data::{collate, generate_pair, BitemporalPair, SynthConfig};
use fino_core::train::{evaluate, predict, train, StepLog};
use fino_core::{Checkpoint, FinoError, TrainConfig};

fn tiny(extra: &str) -> TrainConfig {
    TrainConfig::parse(&format!("widths = 2,3,4,5\nblocks = 1,1,1,1\nhead_width = 4\n{extra}")).unwrap()
}

fn pairs(n: u64, cfg: &SynthConfig) -> Vec<BitemporalPair> {
    (0..n).map(|i| generate_pair(cfg, i).unwrap()).collect()
}

fn log_text(log: &[StepLog]) -> String {
    log.iter().map(|s| s.to_json() + "\n").collect()
}

#[test]
fn identical_runs_give_identical_logs_and_weights() {
    let data = pairs(4, &SynthConfig { seed: 1, ..SynthConfig::default() });
    let cfg = tiny("epochs = 4\naug_hflip = 0.5\naug_rotate90 = 0.5\naug_brightness = 0.1");
    let a = train(&cfg, &data, |_| {}).unwrap();
    let b = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(log_text(&a.log), log_text(&b.log));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let other = train(&TrainConfig { seed: 5, ..cfg }, &data, |_| {}).unwrap();
    assert_ne!(log_text(&a.log), log_text(&other.log));
}

#[test]
fn callback_sees_every_step_and_schedule_decays() {
    let data = pairs(3, &SynthConfig { seed: 2, ..SynthConfig::default() });
    let mut seen = Vec::new();
    let out = train(&tiny("epochs = 4\nbatch_size = 2"), &data, |s| seen.push(*s)).unwrap();
    assert_eq!(seen, out.log);
    assert_eq!(seen.len(), 8);
    assert_eq!(seen[0].lr, 1e-3);
    assert!(seen.windows(2).all(|w| w[1].lr < w[0].lr && w[1].step == w[0].step + 1));
    for s in &seen {
        let sum = s.l_cd + s.l_sal + 0.1 * (s.l_gcl + s.l_rcl);
        assert!((s.total - sum).abs() < 1e-12);
    }
}

#[test]
fn lambda_zero_logs_zero_contrastive_terms() {
    let data = pairs(2, &SynthConfig { seed: 3, ..SynthConfig::default() });
    let out = train(&tiny("lambda = 0\nmax_steps = 3"), &data, |_| {}).unwrap();
    assert_eq!(out.log.len(), 3);
    for s in &out.log {
        assert_eq!((s.l_gcl, s.l_rcl), (0.0, 0.0));
        assert_eq!(s.total, s.l_cd + s.l_sal);
    }
}

#[test]
fn loss_trend_falls() {
    let data = pairs(4, &SynthConfig { seed: 4, ..SynthConfig::default() });
    let out = train(&tiny("epochs = 30\nlr = 0.003"), &data, |_| {}).unwrap();
    let mean = |s: &[StepLog]| s.iter().map(|l| l.l_cd).sum::<f64>() / s.len() as f64;
    let n = out.log.len();
    assert!(mean(&out.log[n - 10..]) < 0.8 * mean(&out.log[..10]));
}

#[test]
fn checkpoint_round_trip_reproduces_probabilities() {
    let tmp = tempfile::tempdir().unwrap();
    let data = pairs(2, &SynthConfig { seed: 5, ..SynthConfig::default() });
    let out = train(&tiny("max_steps = 2"), &data, |_| {}).unwrap();
    let path = tmp.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let (a, b, _) = collate(&[&data[0]]).unwrap();
    let p1 = predict(&out.checkpoint.params, &out.checkpoint.config.model, &a, &b).unwrap();
    let p2 = predict(&back.params, &back.config.model, &a, &b).unwrap();
    assert!(p1.data().iter().zip(p2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(back.config, out.checkpoint.config);
    assert_eq!(back.step, 2);
}

#[test]
fn evaluation_is_repeatable_and_checks_extents() {
    let data = pairs(3, &SynthConfig { seed: 6, ..SynthConfig::default() });
    let out = train(&tiny("max_steps = 2"), &data, |_| {}).unwrap();
    let first = evaluate(&out.checkpoint, &data, 0.5, None).unwrap().to_json();
    assert_eq!(first, evaluate(&out.checkpoint, &data, 0.5, None).unwrap().to_json());
    let big = pairs(1, &SynthConfig { seed: 6, size: 96, ..SynthConfig::default() });
    assert!(matches!(evaluate(&out.checkpoint, &big, 0.5, None), Err(FinoError::Data(_))));
}

#[test]
fn empty_masks_and_empty_predictions_score_perfectly() {
    let quiet = pairs(2, &SynthConfig { seed: 7, change_fraction: 0.0, ..SynthConfig::default() });
    assert!(quiet.iter().all(|p| p.changed_pixels() == 0));
    let out = train(&tiny("max_steps = 1"), &quiet, |_| {}).unwrap();
    let report = evaluate(&out.checkpoint, &quiet, 0.999_999, None).unwrap();
    assert_eq!((report.tp, report.fp, report.fn_), (0, 0, 0));
    assert_eq!([report.precision, report.recall, report.f1, report.iou], [1.0; 4]);
}

#[test]
fn divergence_reports_last_good_state() {
    let data = pairs(2, &SynthConfig { seed: 8, ..SynthConfig::default() });
    match train(&tiny("lr = 1e300"), &data, |_| {}) {
        Err(FinoError::Diverged { step, last_good }) => {
            assert!(last_good.step as usize <= step);
            assert!(last_good.params.iter().all(|(_, p)| p.value.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn overfit_trace_is_finite_and_settles() {
    let data = pairs(8, &SynthConfig { seed: 7, ..SynthConfig::default() });
    let cfg = TrainConfig::default();
    let out = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(out.log.len(), 300);
    assert!(out.log.iter().all(|s| s.total.is_finite()));
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    assert_eq!(20 % per_epoch, 0);
    // windows ending on an epoch boundary hold every pair equally often
    let totals: Vec<f64> = out.log.iter().map(|s| s.total).collect();
    let avg: Vec<(usize, f64)> = (20..=totals.len())
        .step_by(per_epoch)
        .map(|end| (end, totals[end - 20..end].iter().sum::<f64>() / 20.0))
        .collect();
    for w in avg.windows(2).filter(|w| w[0].0 > 50) {
        assert!(w[1].1 <= w[0].1, "moving average rises at step {}: {} -> {}", w[1].0, w[0].1, w[1].1);
    }
}

//! Trainer loop behaviour: compute accounting, schedules and degenerate
//! configurations.

mod common;

use andft_core::data_synth::{generate_dataset, Batch, DatasetSpec, NuisanceSpec};
use andft_core::nn_core::{detection_loss, sgd_step, ParameterSet};
use andft_core::seeds::derive_seed;
use andft_core::trainers::{
    nuisance_gradients, train_andft, train_baseline, train_ndft, AndftConfig, BaselineConfig, BatchSampler,
    IterationMetrics, NdftConfig, TrainError, TrainState, Trainer, TrainerConfig,
};
use common::*;

fn fingerprint(state: &TrainState) -> (u64, u64) {
    (state.detector.backbone.params().fingerprint(), state.detector.det_head.params().fingerprint())
}

fn assert_log_shape(log: &[IterationMetrics], t: usize) {
    assert_eq!(log.len(), t);
    for (i, row) in log.iter().enumerate() {
        assert_eq!(row.t, i + 1);
        assert!(row.loss_o.is_finite() && row.adversarial_loss.is_finite());
        if i > 0 {
            assert!(row.elapsed_seconds >= log[i - 1].elapsed_seconds);
            assert_eq!(row.backbone_forwards_total, log[i - 1].backbone_forwards_total + row.backbone_forwards_this_iter);
        }
    }
}

#[test]
fn baseline_spends_one_forward_per_iteration() {
    let ds = small_dataset(256, 16, 1);
    let out = train_baseline(&ds.train, &small_model(&ds), &BaselineConfig::new(40), 3).unwrap();
    assert_eq!(out.state.counters.backbone_forwards, 40);
    assert_log_shape(&out.log, 40);
    assert!(out.log.iter().all(|r| r.backbone_forwards_this_iter == 1 && r.adversarial_loss == 0.0));
}

#[test]
fn baseline_matches_reference_sgd_loop() {
    // Plain detection SGD written against the network API.
    let ds = small_dataset(256, 16, 2);
    let model = small_model(&ds);
    let seed = 5;
    let cfg = BaselineConfig::new(25);
    let out = train_baseline(&ds.train, &model, &cfg, seed).unwrap();

    let mut state = TrainState::new(&model, seed).unwrap();
    let mut sampler = BatchSampler::new(derive_seed(seed, 1));
    let (mut backbone, mut det) = (state.detector.backbone.clone(), state.detector.det_head.clone());
    for _ in 0..cfg.iterations {
        let idx = sampler.next_indices(ds.train.len(), cfg.batch_size).unwrap();
        let batch = Batch::from_samples(idx.iter().map(|&i| &ds.train[i]));
        let (f, fc) = backbone.forward_cached(&batch.images).unwrap();
        let (o, oc) = det.forward_cached(&f).unwrap();
        let c = model.num_classes;
        let l = detection_loss(&o.column_slice(0, c).unwrap(), &o.column_slice(c, c + 4).unwrap(), &batch.y_o, 1.0)
            .unwrap();
        let db = det.backward_cached(&oc, &l.class_grads.hcat(&l.box_grads).unwrap()).unwrap();
        let bb = backbone.backward_cached(&fc, &db.input_grads).unwrap();
        det.set_params(sgd_step(det.params(), &db.param_grads, cfg.eta_u).unwrap()).unwrap();
        backbone.set_params(sgd_step(backbone.params(), &bb.param_grads, cfg.eta_u).unwrap()).unwrap();
    }
    state.detector.backbone = backbone;
    state.detector.det_head = det;
    assert_eq!(fingerprint(&out.state), fingerprint(&state));
}

#[test]
fn ndft_and_andft_degenerate_to_baseline() {
    let ds = small_dataset(256, 16, 3);
    let model = small_model(&ds);
    let t = 60;
    let base = train_baseline(&ds.train, &model, &BaselineConfig::new(t), 9).unwrap();

    let ndft = NdftConfig { gammas: vec![0.0; 3], alpha: -1.0, psi: t + 1, ..NdftConfig::new(t, 3) };
    let ndft = train_ndft(&ds.train, &model, &ndft, 9).unwrap();
    assert_eq!(fingerprint(&ndft.state), fingerprint(&base.state));
    assert_eq!(ndft.state.counters.backbone_forwards, t as u64);

    let andft = AndftConfig { gammas: vec![0.0; 3], ..AndftConfig::new(t, 3) };
    let andft = train_andft(&ds.train, &model, &andft, 9).unwrap();
    assert_eq!(fingerprint(&andft.state), fingerprint(&base.state));

    for ((b, n), a) in base.log.iter().zip(&ndft.log).zip(&andft.log) {
        assert_eq!(b.loss_o, n.loss_o);
        assert_eq!(b.loss_o, a.loss_o);
    }
}

#[test]
fn ndft_forwards_are_outer_plus_inner() {
    let ds = small_dataset(256, 16, 4);
    let t = 50;
    let out = train_ndft(&ds.train, &small_model(&ds), &NdftConfig::new(t, 3), 1).unwrap();
    assert_log_shape(&out.log, t);
    let inner: u64 = out.log.iter().map(|r| r.backbone_forwards_this_iter - 1).sum();
    assert!(out.log.iter().all(|r| r.backbone_forwards_this_iter >= 2));
    assert_eq!(out.state.counters.backbone_forwards, t as u64 + inner);
}

#[test]
fn inner_cap_bounds_extra_forwards() {
    let ds = small_dataset(256, 16, 5);
    let t = 20;
    let cfg = NdftConfig { alpha: 0.99, max_inner_iters: 1, ..NdftConfig::new(t, 3) };
    let out = train_ndft(&ds.train, &small_model(&ds), &cfg, 2).unwrap();
    assert!(out.log.iter().all(|r| r.backbone_forwards_this_iter <= 2));
    // With a cap of one, every failed check is both an update and a cap hit.
    let hits = out.state.counters.inner_cap_hits;
    assert!(hits >= 1);
    assert_eq!(out.state.counters.nuisance_sgd_steps, hits);
}

#[test]
fn untrained_heads_trigger_inner_updates() {
    // Balanced nuisances so untrained heads sit near chance (1/2, 1/3).
    let nuisances: Vec<NuisanceSpec> = andft_core::data_synth::default_nuisances()
        .into_iter()
        .map(|n| NuisanceSpec { train_marginal: vec![1.0 / n.cardinality as f64; n.cardinality], ..n })
        .collect();
    let ds = generate_dataset(&DatasetSpec {
        height: 8,
        width: 8,
        nuisances,
        m_train: 256,
        m_test: 8,
        seed: 6,
        ..DatasetSpec::default()
    })
    .unwrap();
    let model = small_model(&ds);
    let trials = 100;
    let forced = (0..trials)
        .filter(|&seed| {
            let mut tr = Trainer::new(&model, TrainerConfig::Ndft(NdftConfig::new(1, 3)), seed).unwrap();
            tr.step(&ds.train).unwrap();
            tr.state().counters.nuisance_sgd_steps >= 1
        })
        .count();
    assert!(forced as f64 / trials as f64 >= 0.95, "{forced}/{trials}");
}

#[test]
fn reinit_fires_on_schedule_and_replaces_heads() {
    let ds = small_dataset(256, 16, 7);
    let model = small_model(&ds);
    let cfg = NdftConfig { alpha: -1.0, psi: 1, ..NdftConfig::new(3, 3) };
    let mut tr = Trainer::new(&model, TrainerConfig::Ndft(cfg), 4).unwrap();
    let before: Vec<ParameterSet> = tr.state().nuisance_heads.iter().map(|h| h.params().clone()).collect();
    tr.step(&ds.train).unwrap();
    assert_eq!(tr.state().counters.reinit_count, 1);
    for (old, new) in before.iter().zip(&tr.state().nuisance_heads) {
        let weights = |p: &ParameterSet| -> Vec<f64> {
            p.arrays().iter().filter(|a| a.name.ends_with("weight")).flat_map(|a| a.data.clone()).collect()
        };
        let (a, b) = (weights(old), weights(new.params()));
        let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * a.len() as f64, "{differ}/{}", a.len());
    }
    tr.step(&ds.train).unwrap();
    tr.step(&ds.train).unwrap();
    assert_eq!(tr.state().counters.reinit_count, 3);

    for (t, expected) in [(324, 0), (325, 1)] {
        let cfg = NdftConfig { alpha: -1.0, psi: 325, ..NdftConfig::new(t, 3) };
        let out = train_ndft(&ds.train, &model, &cfg, 4).unwrap();
        assert_eq!(out.state.counters.reinit_count, expected, "T = {t}");
    }
}

#[test]
fn andft_spends_one_forward_per_iteration() {
    let ds = small_dataset(512, 16, 8);
    let t = 40;
    let out = train_andft(&ds.train, &small_model(&ds), &AndftConfig { phi: 10, ..AndftConfig::new(t, 3) }, 3).unwrap();
    assert_log_shape(&out.log, t);
    assert_eq!(out.state.counters.backbone_forwards, t as u64);
    assert!(out.state.counters.full_pass_count >= 1);
}

#[test]
fn full_queue_pass_takes_capacity_over_batch_steps() {
    let ds = small_dataset(512, 16, 9);
    let cfg = AndftConfig { phi: 8, ..AndftConfig::new(8, 3) };
    let mut tr = Trainer::new(&small_model(&ds), TrainerConfig::Andft(cfg), 2).unwrap();
    for _ in 0..7 {
        tr.step(&ds.train).unwrap();
    }
    assert_eq!(tr.state().counters.nuisance_sgd_steps, 7);
    tr.step(&ds.train).unwrap();
    assert_eq!(tr.queue().unwrap().len(), 256);
    // one EMA step plus 256 / 32 full-pass steps
    assert_eq!(tr.state().counters.nuisance_sgd_steps, 7 + 1 + 8);
    assert_eq!(tr.state().counters.full_pass_count, 1);
    assert_eq!(tr.state().counters.backbone_forwards, 8);
}

#[test]
fn short_queue_skips_full_pass() {
    let ds = small_dataset(256, 16, 10);
    let cfg = AndftConfig { phi: 1, batch_size: 32, queue_capacity: 256, ..AndftConfig::new(2, 3) };
    let out = train_andft(&ds.train, &small_model(&ds), &cfg, 1).unwrap();
    // The queue holds 32 then 64 items: both passes run.
    assert_eq!(out.state.counters.full_pass_count, 2);
    assert_eq!(out.state.counters.nuisance_sgd_steps, 2 + 1 + 2);
}

#[test]
fn ema_with_zero_beta_is_plain_sgd_on_current_features() {
    let ds = small_dataset(256, 16, 11);
    let eta_n = 0.3;
    let cfg = AndftConfig { beta: 0.0, phi: 1000, eta_n, ..AndftConfig::new(5, 3) };
    let mut tr = Trainer::new(&small_model(&ds), TrainerConfig::Andft(cfg), 8).unwrap();
    for _ in 0..5 {
        let heads = tr.state().nuisance_heads.clone();
        tr.step(&ds.train).unwrap();
        let recent = tr.queue().unwrap().latest_batch(32).unwrap();
        let g = nuisance_gradients(&heads, &recent.features, &recent.labels).unwrap();
        for ((old, new), grad) in heads.iter().zip(&tr.state().nuisance_heads).zip(&g.grads) {
            let expected = sgd_step(old.params(), grad, eta_n).unwrap();
            for (a, b) in expected.iter_flat().zip(new.params().iter_flat()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn training_is_deterministic() {
    let ds = small_dataset(256, 16, 12);
    let model = small_model(&ds);
    let a = train_ndft(&ds.train, &model, &NdftConfig::new(30, 3), 7).unwrap();
    let b = train_ndft(&ds.train, &model, &NdftConfig::new(30, 3), 7).unwrap();
    assert_eq!(fingerprint(&a.state), fingerprint(&b.state));
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(
            (x.loss_o, x.adversarial_loss, &x.nuisance_accuracy, x.backbone_forwards_total),
            (y.loss_o, y.adversarial_loss, &y.nuisance_accuracy, y.backbone_forwards_total)
        );
    }
}

#[test]
fn divergence_aborts_with_partial_log() {
    let ds = small_dataset(256, 16, 13);
    let cfg = BaselineConfig { eta_u: 1e150, ..BaselineConfig::new(50) };
    let abort = train_baseline(&ds.train, &small_model(&ds), &cfg, 1).unwrap_err();
    assert!(abort.log.len() < 50, "{} rows", abort.log.len());
    assert!(matches!(abort.error, TrainError::Numeric { .. } | TrainError::Nn(_)), "{:?}", abort.error);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = small_dataset(64, 16, 14);
    let model = small_model(&ds);
    let bad = [
        TrainerConfig::Andft(AndftConfig { beta: 1.0, ..AndftConfig::new(5, 3) }),
        TrainerConfig::Andft(AndftConfig { queue_capacity: 16, ..AndftConfig::new(5, 3) }),
        TrainerConfig::Ndft(NdftConfig { gammas: vec![0.01; 2], ..NdftConfig::new(5, 3) }),
        TrainerConfig::Ndft(NdftConfig { eta_n: -1.0, ..NdftConfig::new(5, 3) }),
        TrainerConfig::Baseline(BaselineConfig { batch_size: 0, ..BaselineConfig::new(5) }),
    ];
    for cfg in bad {
        assert!(matches!(Trainer::new(&model, cfg.clone(), 0), Err(TrainError::Config(_))), "{cfg:?}");
    }
}

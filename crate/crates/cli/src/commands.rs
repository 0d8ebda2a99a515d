use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use andft_core::checkpoint::{load_checkpoint, save_checkpoint};
use andft_core::data_synth::{generate_dataset, load_dataset, save_dataset, Dataset};
use andft_core::eval::{correctness, evaluate, probe_invariance, EvalReport, ProbeConfig};
use andft_core::trainers::{Counters, IterationMetrics, Trainer};

use crate::config::{RunConfig, TrainerKind};
use crate::csv::{self, CompareRow};
use crate::{thread_cap, CliError};

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub m_train: usize,
    pub m_test: usize,
    /// Empirical train marginal of each nuisance.
    pub train_marginals: Vec<(String, Vec<f64>)>,
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary, CliError> {
    let ds = generate_dataset(&cfg.dataset_spec())?;
    save_dataset(&cfg.dataset_dir, &ds)?;
    let train_marginals = ds
        .spec
        .nuisances
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut counts = vec![0usize; n.cardinality];
            for s in &ds.train {
                counts[s.y_n.values[i]] += 1;
            }
            let m = ds.train.len() as f64;
            (n.name.clone(), counts.into_iter().map(|c| c as f64 / m).collect())
        })
        .collect();
    Ok(GenSummary {
        m_train: ds.train.len(),
        m_test: ds.test.len(),
        train_marginals,
    })
}

/// Loads the dataset named by the config and checks that its layout
/// matches the config's dataset fields.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let ds = load_dataset(&cfg.dataset_dir).map_err(|e| {
        CliError::Io(format!(
            "{e} (run `andft gen-data` for {} first)",
            cfg.dataset_dir.display()
        ))
    })?;
    let want = cfg.dataset_spec();
    if ds.spec.height != want.height
        || ds.spec.width != want.width
        || ds.spec.num_classes != want.num_classes
        || ds.spec.cardinalities() != want.cardinalities()
    {
        return Err(CliError::Config(format!(
            "dataset in {} ({}x{}, C={}, cardinalities {:?}) does not match config",
            cfg.dataset_dir.display(),
            ds.spec.height,
            ds.spec.width,
            ds.spec.num_classes,
            ds.spec.cardinalities()
        )));
    }
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iterations: usize,
    pub counters: Counters,
    pub report: EvalReport,
}

/// Runs the configured trainer, writing `metrics.csv`, `checkpoint/` and
/// `report.csv` under `output_dir`. On a numeric abort the partial
/// `metrics.csv` is still written.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let ds = load_data(cfg)?;
    let k = ds.spec.nuisances.len();
    let mut trainer = Trainer::new(&cfg.model_spec(), cfg.trainer_config(cfg.trainer), cfg.seed)?;
    let metrics_path = cfg.output_dir.join("metrics.csv");
    while !trainer.is_done() {
        if let Err(e) = trainer.step(&ds.train) {
            csv::write(&metrics_path, &csv::metrics_csv(trainer.log(), k))?;
            return Err(e.into());
        }
    }
    csv::write(&metrics_path, &csv::metrics_csv(trainer.log(), k))?;
    let outcome = trainer.into_outcome();
    save_checkpoint(&cfg.output_dir.join("checkpoint"), &outcome.state)?;
    let report = evaluate(&outcome.state.detector, &ds.test, &ds.spec.nuisances, cfg.iou_threshold)?;
    csv::write(&cfg.output_dir.join("report.csv"), &report.to_csv())?;
    Ok(TrainSummary {
        iterations: outcome.log.len(),
        counters: outcome.state.counters,
        report,
    })
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport, CliError> {
    let ds = load_data(cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.model.input_dim != ds.spec.num_pixels() || ck.model.num_classes != ds.spec.num_classes {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained for a different input layout",
            checkpoint.display()
        )));
    }
    Ok(evaluate(&ck.detector, &ds.test, &ds.spec.nuisances, cfg.iou_threshold)?)
}

/// One trainer's part of a comparison.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub kind: TrainerKind,
    pub rows: Vec<CompareRow>,
    pub log: Vec<IterationMetrics>,
    pub counters: Counters,
    pub report: Option<EvalReport>,
    pub probe: Vec<f64>,
    pub error: Option<String>,
}

fn run_tracked(cfg: &RunConfig, ds: &Dataset, kind: TrainerKind) -> RunResult {
    let mut res = RunResult {
        kind,
        rows: Vec::new(),
        log: Vec::new(),
        counters: Counters::default(),
        report: None,
        probe: Vec::new(),
        error: None,
    };
    let mut trainer = match Trainer::new(&cfg.model_spec(), cfg.trainer_config(kind), cfg.seed) {
        Ok(t) => t,
        Err(e) => {
            res.error = Some(e.to_string());
            return res;
        }
    };
    let total = cfg.total_iterations();
    let outcome: Result<(), String> = (|| {
        while !trainer.is_done() {
            let m = trainer.step(&ds.train).map_err(|e| e.to_string())?;
            let (t, elapsed, forwards) = (m.t, m.elapsed_seconds, m.backbone_forwards_total);
            if t % cfg.eval_every == 0 || t == total {
                let hits = correctness(&trainer.state().detector, &ds.test, cfg.iou_threshold)
                    .map_err(|e| e.to_string())?;
                res.rows.push(CompareRow {
                    trainer: kind.name(),
                    t,
                    elapsed_seconds: elapsed,
                    backbone_forwards: forwards,
                    test_accuracy: hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64,
                });
            }
        }
        let state = trainer.state();
        res.report = Some(
            evaluate(&state.detector, &ds.test, &ds.spec.nuisances, cfg.iou_threshold)
                .map_err(|e| e.to_string())?,
        );
        let probe_cfg = ProbeConfig {
            epochs: cfg.probe_epochs,
            seed: cfg.seed,
            ..ProbeConfig::default()
        };
        // probe on the (nuisance-balanced) test split: fit on one half, score on the other
        let (fit, score) = ds.test.split_at(ds.test.len() / 2);
        res.probe = probe_invariance(
            state.backbone(),
            fit,
            score,
            &ds.spec.cardinalities(),
            &probe_cfg,
        )
        .map_err(|e| e.to_string())?;
        Ok(())
    })();
    res.error = outcome.err();
    res.log = trainer.log().to_vec();
    res.counters = trainer.state().counters;
    res
}

#[derive(Debug, Clone)]
pub struct CompareSummary {
    pub runs: Vec<RunResult>,
}

impl CompareSummary {
    pub fn run(&self, kind: TrainerKind) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.kind == kind)
    }

    /// NDFT backbone forwards over A-NDFT backbone forwards.
    pub fn forwards_ratio(&self) -> Option<f64> {
        let ndft = self.run(TrainerKind::Ndft)?.counters.backbone_forwards;
        let andft = self.run(TrainerKind::Andft)?.counters.backbone_forwards;
        (andft > 0).then(|| ndft as f64 / andft as f64)
    }
}

/// Trains all three algorithms from the same seed, with periodic test
/// evaluation, and writes `compare.csv`, `report.csv`, `probe.csv` and one
/// `metrics_<trainer>.csv` per run. Results of finished runs are written
/// even if another run fails.
pub fn compare(cfg: &RunConfig) -> Result<CompareSummary, CliError> {
    let ds = load_data(cfg)?;
    let workers = thread_cap().min(TrainerKind::ALL.len());
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&kind) = TrainerKind::ALL.get(i) else { break };
                let r = run_tracked(cfg, &ds, kind);
                results.lock().expect("no worker panics while holding the lock").push(r);
            });
        }
    });
    let mut runs = results.into_inner().expect("workers joined");
    runs.sort_by_key(|r| TrainerKind::ALL.iter().position(|k| *k == r.kind));

    let k = ds.spec.nuisances.len();
    let out = &cfg.output_dir;
    let rows: Vec<CompareRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    csv::write(&out.join("compare.csv"), &csv::compare_csv(&rows))?;
    let reports: Vec<(&str, &EvalReport)> = runs
        .iter()
        .filter_map(|r| Some((r.kind.name(), r.report.as_ref()?)))
        .collect();
    csv::write(&out.join("report.csv"), &csv::report_csv(&reports))?;
    let mut probe = String::from("trainer,nuisance,probe_accuracy\n");
    for r in &runs {
        for (n, acc) in ds.spec.nuisances.iter().zip(&r.probe) {
            probe.push_str(&format!("{},{},{}\n", r.kind.name(), n.name, acc));
        }
    }
    csv::write(&out.join("probe.csv"), &probe)?;
    for r in &runs {
        csv::write(
            &out.join(format!("metrics_{}.csv", r.kind.name())),
            &csv::metrics_csv(&r.log, k),
        )?;
    }
    if let Some(r) = runs.iter().find(|r| r.error.is_some()) {
        let msg = format!("{} run failed: {}", r.kind.name(), r.error.as_deref().unwrap_or_default());
        return Err(if msg.contains("numeric") {
            CliError::Numeric(msg)
        } else {
            CliError::Config(msg)
        });
    }
    Ok(CompareSummary { runs })
}

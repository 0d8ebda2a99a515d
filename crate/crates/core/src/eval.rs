//! Detection accuracy, per-nuisance breakdowns and invariance probes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data_synth::{Batch, NuisanceSpec, Sample};
use crate::nn_core::{argmax, batch_accuracy, cross_entropy, init_network, sgd_step, Network, NetworkSpec, NnError, Tensor};
use crate::seeds::derive_seed;
use crate::trainers::DetectionModel;

/// Desk-scale default; 0.7 is the stricter setting.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid box {0:?}: width and height must be positive")]
    InvalidBox([f64; 4]),
    #[error("empty evaluation set")]
    Empty,
    #[error("evaluation shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Intersection over union of two `(cx, cy, w, h)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64, EvalError> {
    for bx in [a, b] {
        if !(bx[2] > 0.0 && bx[3] > 0.0) || bx.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::InvalidBox(bx));
        }
    }
    let span = |c: f64, s: f64| (c - s / 2.0, c + s / 2.0);
    let overlap = |(a0, a1): (f64, f64), (b0, b1): (f64, f64)| (a1.min(b1) - a0.max(b0)).max(0.0);
    let (ax, ay, bx, by) = (span(a[0], a[2]), span(a[1], a[3]), span(b[0], b[2]), span(b[1], b[3]));
    // areas from the same rounded spans so that iou(a, a) == 1 exactly
    let area = |(x0, x1): (f64, f64), (y0, y1): (f64, f64)| (x1 - x0) * (y1 - y0);
    let inter = overlap(ax, bx) * overlap(ay, by);
    let union = area(ax, ay) + area(bx, by) - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

pub trait Detector {
    fn predict(&self, images: &Tensor) -> Result<Vec<Prediction>, EvalError>;
}

impl Detector for DetectionModel {
    fn predict(&self, images: &Tensor) -> Result<Vec<Prediction>, EvalError> {
        let out = self.det_head.forward(&self.backbone.forward(images)?)?;
        let c = self.num_classes;
        if out.cols() != c + 4 {
            return Err(EvalError::Shape(format!("detector emits {} columns, expected {}", out.cols(), c + 4)));
        }
        Ok((0..out.rows())
            .map(|r| {
                let row = out.row(r);
                Prediction {
                    class_id: argmax(&row[..c]),
                    bbox: [row[c], row[c + 1], row[c + 2], row[c + 3]],
                }
            })
            .collect())
    }
}

/// Correct iff the class matches and the box overlaps the ground truth with
/// IoU at or above the threshold. Degenerate predicted boxes are misses.
pub fn is_correct(pred: &Prediction, sample: &Sample, iou_thresh: f64) -> bool {
    pred.class_id == sample.y_o.class_id
        && iou(pred.bbox, sample.y_o.bbox.map(f64::from)).is_ok_and(|v| v >= iou_thresh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub value: usize,
    pub count: usize,
    pub correct: usize,
    /// `None` when the cell is empty.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceReport {
    pub name: String,
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub total: usize,
    pub correct: usize,
    pub per_nuisance: Vec<NuisanceReport>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "nuisance,value,count,accuracy";

    /// Data rows (no header), one per cell, then the `overall` row.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for n in &self.per_nuisance {
            for c in &n.cells {
                let acc = c.accuracy.map(|a| a.to_string()).unwrap_or_default();
                rows.push(format!("{},{},{},{}", n.name, c.value, c.count, acc));
            }
        }
        rows.push(format!("overall,,{},{}", self.total, self.overall_accuracy));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in self.csv_rows() {
            s.push_str(&r);
            s.push('\n');
        }
        s
    }

    /// Accuracy of one cell, `None` if empty or absent.
    pub fn cell_accuracy(&self, nuisance: usize, value: usize) -> Option<f64> {
        self.per_nuisance.get(nuisance)?.cells.get(value)?.accuracy
    }
}

/// Per-sample correctness for a whole split, in sample order.
pub fn correctness<D: Detector + Sync>(model: &D, samples: &[Sample], iou_thresh: f64) -> Result<Vec<bool>, EvalError> {
    let chunks: Vec<Vec<bool>> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let batch = Batch::from_samples(chunk);
            let preds = model.predict(&batch.images)?;
            Ok(preds.iter().zip(chunk).map(|(p, s)| is_correct(p, s, iou_thresh)).collect())
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(chunks.concat())
}

pub fn evaluate<D: Detector + Sync>(
    model: &D,
    test: &[Sample],
    nuisances: &[NuisanceSpec],
    iou_thresh: f64,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = correctness(model, test, iou_thresh)?;
    let correct = hits.iter().filter(|&&h| h).count();
    let per_nuisance = nuisances
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut cells: Vec<CellReport> = (0..spec.cardinality)
                .map(|value| CellReport { value, count: 0, correct: 0, accuracy: None })
                .collect();
            for (s, &h) in test.iter().zip(&hits) {
                let cell = cells
                    .get_mut(s.y_n.values[i])
                    .ok_or_else(|| EvalError::Shape(format!("nuisance '{}' value out of range", spec.name)))?;
                cell.count += 1;
                cell.correct += usize::from(h);
            }
            for c in &mut cells {
                c.accuracy = (c.count > 0).then(|| c.correct as f64 / c.count as f64);
            }
            Ok(NuisanceReport { name: spec.name.clone(), cells })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(EvalReport {
        overall_accuracy: correct as f64 / test.len() as f64,
        total: test.len(),
        correct,
        per_nuisance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Hidden layers of the probe head; empty matches the nuisance heads.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 3, lr: 0.05, batch_size: 32, hidden: vec![], seed: 0 }
    }
}

fn features(backbone: &Network, samples: &[Sample]) -> Result<Tensor, EvalError> {
    let parts: Vec<Tensor> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| Ok(backbone.forward(&Batch::from_samples(chunk).images)?))
        .collect::<Result<_, EvalError>>()?;
    let cols = backbone.spec().output_dim;
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::matrix(samples.len(), cols, data)?)
}

/// Trains a fresh classifier per nuisance on frozen backbone features and
/// reports its test accuracy. Values near chance mean the features carry
/// little recoverable nuisance information. The backbone is only read.
pub fn probe_invariance(
    backbone: &Network,
    train: &[Sample],
    test: &[Sample],
    cardinalities: &[usize],
    config: &ProbeConfig,
) -> Result<Vec<f64>, EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Empty);
    }
    let train_f = features(backbone, train)?;
    let test_f = features(backbone, test)?;
    let n = config.batch_size.clamp(1, train.len());
    cardinalities
        .iter()
        .enumerate()
        .map(|(i, &card)| {
            let spec = NetworkSpec::new(backbone.spec().output_dim, config.hidden.clone(), card);
            let mut head = init_network(&spec, derive_seed(config.seed, i as u64))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + i as u64));
            let labels: Vec<usize> = train.iter().map(|s| s.y_n.values[i]).collect();
            let mut order: Vec<usize> = (0..train.len()).collect();
            for _ in 0..config.epochs {
                order.shuffle(&mut rng);
                for idx in order.chunks_exact(n) {
                    let x = train_f.select_rows(idx);
                    let y: Vec<usize> = idx.iter().map(|&j| labels[j]).collect();
                    let (logits, cache) = head.forward_cached(&x)?;
                    let (_, g) = cross_entropy(&logits, &y)?;
                    let grads = head.backward_cached(&cache, &g)?.param_grads;
                    let p = sgd_step(head.params(), &grads, config.lr)?;
                    head.set_params(p)?;
                }
            }
            let test_y: Vec<usize> = test.iter().map(|s| s.y_n.values[i]).collect();
            Ok(batch_accuracy(&head.forward(&test_f)?, &test_y)?)
        })
        .collect()
}

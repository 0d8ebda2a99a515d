//! Test-only oracles: central finite differences and loss values assembled
//! from the public forward/loss functions (never from the trainers'
//! gradient code).
#![allow(dead_code)]

use andft_core::data_synth::{generate_dataset, Batch, Dataset, DatasetSpec, DetectionLabel};
use andft_core::nn_core::{cross_entropy, detection_loss, negative_entropy, Network, ParameterSet, Tensor};
use andft_core::trainers::{AdversarialMode, ModelSpec};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative error; below it the comparison is
/// effectively absolute (1e-4 * 1e-5 = 1e-9, ~10x the f64 round-off of a
/// central difference with h = 1e-6 on O(1) losses).
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` at coordinate `idx` of `params`.
pub fn central_difference(params: &ParameterSet, idx: usize, f: &dyn Fn(&ParameterSet) -> f64) -> f64 {
    let x = params.get_flat(idx).unwrap();
    let mut p = params.clone();
    p.set_flat(idx, x + FD_STEP);
    let up = f(&p);
    p.set_flat(idx, x - FD_STEP);
    let down = f(&p);
    (up - down) / (2.0 * FD_STEP)
}

/// Max relative error over the given coordinates.
pub fn max_fd_error(
    params: &ParameterSet,
    analytic: &ParameterSet,
    coords: impl IntoIterator<Item = usize>,
    f: &dyn Fn(&ParameterSet) -> f64,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut count = 0;
    for i in coords {
        let a = analytic.get_flat(i).unwrap();
        worst = worst.max(rel_err(a, central_difference(params, i, f)));
        count += 1;
    }
    (worst, count)
}

pub fn with_params(net: &Network, p: &ParameterSet) -> Network {
    let mut n = net.clone();
    n.set_params(p.clone()).unwrap();
    n
}

/// Tiny 4x4 dataset so whole networks stay well under 2k parameters.
pub fn tiny_dataset(m_train: usize, seed: u64) -> Dataset {
    generate_dataset(&DatasetSpec {
        height: 4,
        width: 4,
        m_train,
        m_test: 16,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

pub fn tiny_model(ds: &Dataset) -> ModelSpec {
    ModelSpec {
        feature_dim: 8,
        backbone_hidden: vec![12],
        ..ModelSpec::for_dataset(&ds.spec)
    }
}

pub fn small_dataset(m_train: usize, m_test: usize, seed: u64) -> Dataset {
    generate_dataset(&DatasetSpec {
        height: 8,
        width: 8,
        m_train,
        m_test,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

pub fn small_model(ds: &Dataset) -> ModelSpec {
    ModelSpec {
        feature_dim: 16,
        backbone_hidden: vec![24],
        ..ModelSpec::for_dataset(&ds.spec)
    }
}

/// `L_O(f_O(f_T(x)))` from forward passes and loss values only.
pub fn detection_value(backbone: &Network, det: &Network, x: &Tensor, y_o: &[DetectionLabel], loc_weight: f64) -> f64 {
    let out = det.forward(&backbone.forward(x).unwrap()).unwrap();
    let c = out.cols() - 4;
    detection_loss(
        &out.column_slice(0, c).unwrap(),
        &out.column_slice(c, c + 4).unwrap(),
        y_o,
        loc_weight,
    )
    .unwrap()
    .total
}

/// `L_O + Σ γ_i A_i` from forward passes and loss values only.
pub fn composite_value(
    backbone: &Network,
    det: &Network,
    heads: &[Network],
    batch: &Batch,
    gammas: &[f64],
    mode: AdversarialMode,
    loc_weight: f64,
) -> f64 {
    let mut v = detection_value(backbone, det, &batch.images, &batch.y_o, loc_weight);
    let f = backbone.forward(&batch.images).unwrap();
    for ((head, g), y) in heads.iter().zip(gammas).zip(&batch.y_n) {
        let logits = head.forward(&f).unwrap();
        v += g * match mode {
            AdversarialMode::NegativeEntropy => negative_entropy(&logits).unwrap().0,
            AdversarialMode::GradientReversal => -cross_entropy(&logits, y).unwrap().0,
        };
    }
    v
}

/// `Σ_i L_N(f_{N,i}(features), y_i)`.
pub fn nuisance_value(heads: &[Network], features: &Tensor, labels: &[Vec<usize>]) -> f64 {
    heads
        .iter()
        .zip(labels)
        .map(|(h, y)| cross_entropy(&h.forward(features).unwrap(), y).unwrap().0)
        .sum()
}

/// Pearson chi-square statistic and degrees of freedom of a contingency table.
pub fn chi_square(table: &[Vec<usize>]) -> (f64, usize) {
    let rows = table.len();
    let cols = table[0].len();
    let total: usize = table.iter().flatten().sum();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col_sums: Vec<f64> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum::<usize>() as f64).collect();
    let mut stat = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let expected = row_sums[r] * col_sums[c] / total as f64;
            if expected > 0.0 {
                stat += (table[r][c] as f64 - expected).powi(2) / expected;
            }
        }
    }
    (stat, (rows - 1) * (cols - 1))
}

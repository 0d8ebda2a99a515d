use super::{NnError, Tensor};
use crate::data_synth::DetectionLabel;

fn check_logits(logits: &Tensor, what: &str) -> Result<(usize, usize), NnError> {
    if logits.shape().len() != 2 || logits.rows() == 0 {
        return Err(NnError::Shape(format!(
            "{what}: expected nonempty (n x C) logits, got {:?}",
            logits.shape()
        )));
    }
    if !logits.is_finite() {
        return Err(NnError::Numeric(format!("{what}: non-finite logits")));
    }
    Ok((logits.rows(), logits.cols()))
}

/// Row-wise `log softmax`, computed with the max-shift.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = log_softmax(logits);
    out.data_mut().iter_mut().for_each(|v| *v = v.exp());
    out
}

/// Index of the row maximum, ties toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean multi-class cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let (n, c) = check_logits(logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(NnError::Shape(format!(
            "cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(NnError::Label(format!(
            "cross_entropy: label {y} at row {i} out of range for {c} classes"
        )));
    }
    let logp = log_softmax(logits);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = logp.clone();
    for (r, &y) in labels.iter().enumerate() {
        loss -= logp.row(r)[y];
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        g.iter_mut().for_each(|v| *v = v.exp() * inv_n);
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Mean over rows of `Σ_c p_c log p_c` with `p = softmax(logits)`.
///
/// Lies in `[-ln C, 0]`; the minimum is reached at the uniform distribution.
pub fn negative_entropy(logits: &Tensor) -> Result<(f64, Tensor), NnError> {
    let (n, c) = check_logits(logits, "negative_entropy")?;
    if c < 2 {
        return Err(NnError::InvalidSpec(format!(
            "negative_entropy needs at least 2 classes, got {c}"
        )));
    }
    let logp = log_softmax(logits);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(n, c);
    for r in 0..n {
        let lp = logp.row(r);
        // p = 0 underflow contributes 0 * finite = 0
        let ne: f64 = lp.iter().map(|&l| l.exp() * l).sum();
        loss += ne;
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        for (gv, &l) in g.iter_mut().zip(lp) {
            *gv = l.exp() * (l - ne) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Per-term breakdown and gradients of the detection loss.
#[derive(Debug, Clone)]
pub struct DetectionLoss {
    pub total: f64,
    pub classification: f64,
    pub localization: f64,
    pub class_grads: Tensor,
    pub box_grads: Tensor,
}

/// Classification cross-entropy plus `loc_weight` times the mean squared
/// error over the four box coordinates.
pub fn detection_loss(
    class_logits: &Tensor,
    box_preds: &Tensor,
    labels: &[DetectionLabel],
    loc_weight: f64,
) -> Result<DetectionLoss, NnError> {
    let n = class_logits.rows();
    if box_preds.shape() != [n, 4] || labels.len() != n {
        return Err(NnError::Shape(format!(
            "detection_loss: logits {:?}, boxes {:?}, {} labels",
            class_logits.shape(),
            box_preds.shape(),
            labels.len()
        )));
    }
    if !(loc_weight >= 0.0) {
        return Err(NnError::Numeric(format!("loc_weight must be >= 0, got {loc_weight}")));
    }
    if !box_preds.is_finite() {
        return Err(NnError::Numeric("detection_loss: non-finite box predictions".into()));
    }
    let classes: Vec<usize> = labels.iter().map(|l| l.class_id).collect();
    let (classification, class_grads) = cross_entropy(class_logits, &classes)?;
    let denom = (4 * n) as f64;
    let mut sq = 0.0;
    let mut box_grads = Tensor::zeros(n, 4);
    for (r, label) in labels.iter().enumerate() {
        for k in 0..4 {
            let diff = box_preds.row(r)[k] - f64::from(label.bbox[k]);
            sq += diff * diff;
            box_grads.data_mut()[r * 4 + k] = loc_weight * 2.0 * diff / denom;
        }
    }
    let localization = sq / denom;
    Ok(DetectionLoss {
        total: classification + loc_weight * localization,
        classification,
        localization,
        class_grads,
        box_grads,
    })
}

/// Fraction of rows whose argmax equals the label.
pub fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    if logits.rows() == 0 || labels.is_empty() {
        return Err(NnError::Shape("batch_accuracy: empty batch".into()));
    }
    if labels.len() != logits.rows() {
        return Err(NnError::Shape(format!(
            "batch_accuracy: {} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(logits.row(*r)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

use log::warn;

use super::{AdversarialMode, JointObjective, NdftConfig, TrainError, TrainState};
use crate::data_synth::{Batch, DetectionLabel, Sample};
use crate::nn_core::{
    batch_accuracy, cross_entropy, detection_loss, init_network, negative_entropy, sgd_step,
    ForwardCache, Network, NnError, ParameterSet, Tensor,
};
use crate::replay::ReplayQueue;

fn finite(term: &str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::Numeric { term: term.to_string() })
    }
}

/// `f_T(x)`; counts one backbone forward.
pub fn backbone_forward(state: &mut TrainState, images: &Tensor) -> Result<(Tensor, ForwardCache), TrainError> {
    state.counters.backbone_forwards += 1;
    state
        .detector
        .backbone
        .forward_cached(images)
        .map_err(|e| match e {
            NnError::Numeric(_) => TrainError::Numeric { term: "backbone features".into() },
            other => other.into(),
        })
}

/// Value and θ_U-gradients of `L_O + Σ γ_i A_i`. The nuisance heads are
/// differentiated through (for the feature gradient) but not updated.
#[derive(Debug, Clone)]
pub struct JointGradients {
    pub loss_o: f64,
    pub adversarial_loss: f64,
    pub nuisance_accuracy: Vec<f64>,
    pub backbone_grads: ParameterSet,
    pub det_grads: ParameterSet,
}

impl JointGradients {
    pub fn total(&self) -> f64 {
        self.loss_o + self.adversarial_loss
    }
}

pub fn joint_gradients(
    backbone: &Network,
    det_head: &Network,
    heads: &[Network],
    backbone_cache: &ForwardCache,
    features: &Tensor,
    y_o: &[DetectionLabel],
    y_n: &[Vec<usize>],
    objective: &JointObjective,
) -> Result<JointGradients, TrainError> {
    if objective.gammas.len() != heads.len() || y_n.len() != heads.len() {
        return Err(TrainError::Config(format!(
            "{} gammas / {} label columns for {} nuisance heads",
            objective.gammas.len(),
            y_n.len(),
            heads.len()
        )));
    }
    let num_classes = det_head.spec().output_dim - 4;
    let (det_out, det_cache) = det_head.forward_cached(features)?;
    let class_logits = det_out.column_slice(0, num_classes)?;
    let box_preds = det_out.column_slice(num_classes, num_classes + 4)?;
    let det = detection_loss(&class_logits, &box_preds, y_o, objective.loc_weight)?;
    let loss_o = finite("L_O", det.total)?;
    let det_bundle = det_head.backward_cached(&det_cache, &det.class_grads.hcat(&det.box_grads)?)?;
    let mut feature_grads = det_bundle.input_grads;

    let mut adversarial_loss = 0.0;
    let mut nuisance_accuracy = Vec::with_capacity(heads.len());
    for (i, ((head, &gamma), labels)) in heads.iter().zip(&objective.gammas).zip(y_n).enumerate() {
        let (logits, cache) = head.forward_cached(features)?;
        nuisance_accuracy.push(batch_accuracy(&logits, labels)?);
        if gamma == 0.0 {
            continue;
        }
        let (value, mut grad) = match objective.mode {
            AdversarialMode::NegativeEntropy => negative_entropy(&logits)?,
            AdversarialMode::GradientReversal => {
                let (l, mut g) = cross_entropy(&logits, labels)?;
                g.scale(-1.0);
                (-l, g)
            }
        };
        adversarial_loss += gamma * finite(&format!("adversarial term of nuisance {}", i + 1), value)?;
        grad.scale(gamma);
        let bundle = head.backward_cached(&cache, &grad)?;
        feature_grads.add_assign(&bundle.input_grads)?;
    }
    let backbone_grads = backbone.backward_cached(backbone_cache, &feature_grads)?.param_grads;
    Ok(JointGradients {
        loss_o,
        adversarial_loss,
        nuisance_accuracy,
        backbone_grads,
        det_grads: det_bundle.param_grads,
    })
}

/// Result of one joint step. `features` is the backbone output computed
/// before the update, ready for reuse by the nuisance branch.
#[derive(Debug, Clone)]
pub struct JointOutput {
    pub loss_o: f64,
    pub adversarial_loss: f64,
    pub nuisance_accuracy: Vec<f64>,
    pub features: Tensor,
}

/// One SGD step on the backbone and detection head (θ_U) for the joint
/// objective. Costs exactly one backbone forward.
pub fn joint_update(
    state: &mut TrainState,
    batch: &Batch,
    objective: &JointObjective,
    eta_u: f64,
) -> Result<JointOutput, TrainError> {
    let (features, cache) = backbone_forward(state, &batch.images)?;
    let g = joint_gradients(
        &state.detector.backbone,
        &state.detector.det_head,
        &state.nuisance_heads,
        &cache,
        &features,
        &batch.y_o,
        &batch.y_n,
        objective,
    )?;
    let backbone = sgd_step(state.detector.backbone.params(), &g.backbone_grads, eta_u)?;
    let det = sgd_step(state.detector.det_head.params(), &g.det_grads, eta_u)?;
    state.detector.backbone.set_params(backbone)?;
    state.detector.det_head.set_params(det)?;
    Ok(JointOutput {
        loss_o: g.loss_o,
        adversarial_loss: g.adversarial_loss,
        nuisance_accuracy: g.nuisance_accuracy,
        features,
    })
}

/// `Σ_i L_N` over the heads and its gradient for each head.
#[derive(Debug, Clone)]
pub struct NuisanceGradients {
    pub loss: f64,
    pub accuracy: Vec<f64>,
    pub grads: Vec<ParameterSet>,
}

pub fn nuisance_gradients(
    heads: &[Network],
    features: &Tensor,
    labels: &[Vec<usize>],
) -> Result<NuisanceGradients, TrainError> {
    if labels.len() != heads.len() {
        return Err(TrainError::Config(format!(
            "{} label columns for {} nuisance heads",
            labels.len(),
            heads.len()
        )));
    }
    let mut loss = 0.0;
    let mut accuracy = Vec::with_capacity(heads.len());
    let mut grads = Vec::with_capacity(heads.len());
    for (i, (head, y)) in heads.iter().zip(labels).enumerate() {
        let (logits, cache) = head.forward_cached(features)?;
        accuracy.push(batch_accuracy(&logits, y)?);
        let (l, g) = cross_entropy(&logits, y)?;
        loss += finite(&format!("L_N of nuisance {}", i + 1), l)?;
        grads.push(head.backward_cached(&cache, &g)?.param_grads);
    }
    Ok(NuisanceGradients { loss, accuracy, grads })
}

/// Plain SGD on every nuisance head for `Σ_i L_N` on the given features.
pub fn nuisance_sgd_update(
    state: &mut TrainState,
    features: &Tensor,
    labels: &[Vec<usize>],
    lr: f64,
) -> Result<NuisanceGradients, TrainError> {
    let g = nuisance_gradients(&state.nuisance_heads, features, labels)?;
    for (head, grad) in state.nuisance_heads.iter_mut().zip(&g.grads) {
        let p = sgd_step(head.params(), grad, lr)?;
        head.set_params(p)?;
    }
    state.counters.nuisance_sgd_steps += 1;
    Ok(g)
}

/// NDFT monitoring loop. Each check draws a fresh training minibatch and
/// runs the backbone on it; the heads are updated while the weakest head's
/// accuracy is `<= alpha`. Returns the number of checks (backbone
/// forwards) spent. A negative `alpha` can never be reached by an accuracy,
/// so the loop is skipped outright.
pub fn monitor_and_update_nuisance(
    state: &mut TrainState,
    train: &[Sample],
    config: &NdftConfig,
) -> Result<usize, TrainError> {
    if config.alpha < 0.0 || state.nuisance_heads.is_empty() {
        return Ok(0);
    }
    for used in 1..=config.max_inner_iters {
        let idx = state.inner_sampler.next_indices(train.len(), config.batch_size)?;
        let batch = Batch::from_samples(idx.iter().map(|&i| &train[i]));
        let (features, _) = backbone_forward(state, &batch.images)?;
        let mut min_acc = f64::INFINITY;
        for (head, y) in state.nuisance_heads.iter().zip(&batch.y_n) {
            min_acc = min_acc.min(batch_accuracy(&head.forward(&features)?, y)?);
        }
        if min_acc > config.alpha {
            return Ok(used);
        }
        nuisance_sgd_update(state, &features, &batch.y_n, config.eta_n)?;
    }
    state.counters.inner_cap_hits += 1;
    warn!(
        "iteration {}: nuisance heads still at or below alpha = {} after {} inner iterations",
        state.t, config.alpha, config.max_inner_iters
    );
    Ok(config.max_inner_iters)
}

/// Fresh random nuisance heads when `t` is a multiple of `psi`.
pub fn reinit_nuisance_if_due(state: &mut TrainState, psi: usize) -> Result<bool, TrainError> {
    if psi == 0 || state.t % psi != 0 {
        return Ok(false);
    }
    use rand::Rng;
    for i in 0..state.nuisance_heads.len() {
        let seed: u64 = state.reinit_rng.gen();
        state.nuisance_heads[i] = init_network(&state.model.nuisance_spec(i), seed)?;
    }
    state.counters.reinit_count += 1;
    Ok(true)
}

/// `β θ + (1 - β) (θ - η g)`, evaluated as written.
pub fn ema_update_params(
    theta: &ParameterSet,
    grads: &ParameterSet,
    beta: f64,
    eta: f64,
) -> Result<ParameterSet, TrainError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(TrainError::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    let stepped = ParameterSet::linear_combination(1.0, theta, -eta, grads)?;
    Ok(ParameterSet::linear_combination(beta, theta, 1.0 - beta, &stepped)?)
}

/// Slow-learner update of the nuisance heads on already computed features.
/// No backbone forward is spent.
pub fn ema_nuisance_update(
    state: &mut TrainState,
    features: &Tensor,
    labels: &[Vec<usize>],
    beta: f64,
    eta_n: f64,
) -> Result<NuisanceGradients, TrainError> {
    let g = nuisance_gradients(&state.nuisance_heads, features, labels)?;
    for (head, grad) in state.nuisance_heads.iter_mut().zip(&g.grads) {
        let p = ema_update_params(head.params(), grad, beta, eta_n)?;
        if !p.all_finite() {
            return Err(TrainError::Numeric { term: "EMA nuisance update".into() });
        }
        head.set_params(p)?;
    }
    state.counters.nuisance_sgd_steps += 1;
    Ok(g)
}

/// Every `phi` iterations: one plain-SGD pass over the whole replay queue,
/// in disjoint minibatches of `n`. Skipped with a warning when the queue
/// holds fewer than `n` items.
pub fn full_queue_retrain_if_due(
    state: &mut TrainState,
    queue: &ReplayQueue,
    phi: usize,
    eta_n: f64,
    n: usize,
) -> Result<bool, TrainError> {
    if phi == 0 || state.t % phi != 0 {
        return Ok(false);
    }
    if queue.len() < n {
        warn!(
            "iteration {}: replay queue holds {} items, fewer than batch size {n}; skipping full pass",
            state.t,
            queue.len()
        );
        return Ok(false);
    }
    let batches = queue.full_pass_minibatches(n, &mut state.queue_rng)?;
    for b in &batches {
        nuisance_sgd_update(state, &b.features, &b.labels, eta_n)?;
    }
    state.counters.full_pass_count += 1;
    Ok(true)
}

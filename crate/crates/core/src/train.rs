//! Cross-entropy training with Adam, per-filter max-norm and early stopping
//! on the development-set F1 at its best threshold.

use std::io::Write;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuralnet::{
    dropout_mask, model_backward_into, model_forward, ConvFilterBank, ForwardMode, Gradients, ModelParameters,
    NetError,
};
use crate::textprep::EncodedSentence;

pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient at batch {batch}")]
    NonFiniteGradient { batch: usize },
    #[error("development set has no positive examples; F1 is undefined")]
    NoPositives,
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_norm: f64,
    pub eval_every: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 50,
            max_norm: 9.0,
            eval_every: 10,
            patience: 6,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("epochs, batch_size, eval_every and patience must be positive");
        }
        if !(self.max_norm > 0.0) || !(self.learning_rate >= 0.0) || !(self.epsilon > 0.0) {
            return bad("max_norm and epsilon must be positive, learning_rate non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Mean binary cross-entropy; probabilities are clamped to `[eps, 1 - eps]`.
pub fn cross_entropy(probs: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    assert!(!probs.is_empty());
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
            if y {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    -total / probs.len() as f64
}

/// `dL/dz_i = (p_i - y_i) / N` for the mean cross-entropy of sigmoid outputs.
pub fn loss_grad_logit(probs: &[f64], labels: &[bool]) -> Vec<f64> {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - if y { 1.0 } else { 0.0 }) / n)
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    u: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            u: vec![0.0; n],
        }
    }
}

/// First/second moment accumulators mirroring a model's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    embedding: Moments,
    conv_weights: Vec<Moments>,
    conv_bias: Vec<Moments>,
    head_w: Moments,
    head_b: Moments,
}

impl PartialEq for AdamHyper {
    fn eq(&self, o: &Self) -> bool {
        self.learning_rate == o.learning_rate
            && self.beta1 == o.beta1
            && self.beta2 == o.beta2
            && self.epsilon == o.epsilon
    }
}

impl AdamState {
    pub fn new(params: &ModelParameters, hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            step: 0,
            embedding: Moments::zeros(params.embedding.values.len()),
            conv_weights: params.conv_banks.iter().map(|b| Moments::zeros(b.weights.len())).collect(),
            conv_bias: params.conv_banks.iter().map(|b| Moments::zeros(b.bias.len())).collect(),
            head_w: Moments::zeros(params.head.w.len()),
            head_b: Moments::zeros(1),
        }
    }

    pub fn second_moments_nonnegative(&self) -> bool {
        std::iter::once(&self.embedding)
            .chain(&self.conv_weights)
            .chain(&self.conv_bias)
            .chain([&self.head_w, &self.head_b])
            .all(|m| m.u.iter().all(|&u| u >= 0.0))
    }
}

struct StepScale {
    lr_hat: f64,
    bc2: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl StepScale {
    #[inline]
    fn apply(&self, theta: &mut [f64], grad: &[f64], m: &mut [f64], u: &mut [f64]) {
        for (((p, &g), m), u) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(u.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *u = self.beta2 * *u + (1.0 - self.beta2) * g * g;
            *p -= self.lr_hat * *m / ((*u / self.bc2).sqrt() + self.epsilon);
        }
    }
}

/// One bias-corrected Adam update. Embedding rows absent from the sparse
/// gradient keep their parameters and moments; the step counter is global.
pub fn adam_step(params: &mut ModelParameters, grads: &Gradients, state: &mut AdamState) -> Result<(), TrainError> {
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient {
            batch: state.step as usize + 1,
        });
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let scale = StepScale {
        lr_hat: h.learning_rate / bc1,
        bc2,
        beta1: h.beta1,
        beta2: h.beta2,
        epsilon: h.epsilon,
    };

    let dim = params.embedding.dim;
    for (&row, g) in &grads.embedding.rows {
        let range = row * dim..(row + 1) * dim;
        scale.apply(
            &mut params.embedding.values[range.clone()],
            g,
            &mut state.embedding.m[range.clone()],
            &mut state.embedding.u[range],
        );
    }
    for (i, bank) in params.conv_banks.iter_mut().enumerate() {
        let mw = &mut state.conv_weights[i];
        scale.apply(&mut bank.weights, &grads.conv_weights[i], &mut mw.m, &mut mw.u);
        let mb = &mut state.conv_bias[i];
        scale.apply(&mut bank.bias, &grads.conv_bias[i], &mut mb.m, &mut mb.u);
    }
    scale.apply(&mut params.head.w, &grads.head_w, &mut state.head_w.m, &mut state.head_w.u);
    scale.apply(
        std::slice::from_mut(&mut params.head.b),
        &[grads.head_b],
        &mut state.head_b.m,
        &mut state.head_b.u,
    );
    Ok(())
}

pub fn max_norm_clip(banks: &mut [ConvFilterBank], max_norm: f64) {
    for bank in banks {
        bank.apply_max_norm(max_norm);
    }
}

/// Picks the dev-set score that, used as `score >= threshold`, maximizes F1.
/// Ties on F1 go to the larger threshold.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64), TrainError> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(TrainError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::NAN, -1.0);
    let mut i = 0;
    while i < order.len() {
        let tau = scores[order[i]];
        while i < order.len() && scores[order[i]] == tau {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fn_ = positives - tp;
        let f1 = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        if f1 > best.1 {
            best = (tau, f1);
        }
    }
    Ok(best)
}

/// One labelled, encoded training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: EncodedSentence,
    pub label: bool,
}

/// Parameters captured at the best development evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: ModelParameters,
    pub threshold: f64,
    pub dev_f1: f64,
    pub batch_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub batch_index: usize,
    pub dev_loss: f64,
    pub dev_f1: f64,
    pub threshold: f64,
    pub patience: usize,
}

impl Evaluation {
    pub fn tsv_header() -> &'static str {
        "batch\tdev_loss\tdev_f1\tthreshold\tpatience"
    }

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.batch_index, self.dev_loss, self.dev_f1, self.threshold, self.patience
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Snapshot,
    pub evaluations: Vec<Evaluation>,
    pub batches_trained: usize,
    pub stopped_early: bool,
}

pub fn predict(params: &ModelParameters, examples: &[Example]) -> Result<Vec<f64>, NetError> {
    examples
        .iter()
        .map(|e| model_forward(&e.input, params, ForwardMode::Infer).map(|(p, _)| p))
        .collect()
}

/// Forward/backward over one mini-batch, then Adam and the max-norm
/// constraint. Returns the batch loss measured before the update.
pub fn train_step(
    params: &mut ModelParameters,
    state: &mut AdamState,
    batch: &[&Example],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut grads = Gradients::zeros_like(params);
    let n = batch.len() as f64;
    let width = params.vector_len();
    let mut probs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for ex in batch {
        let mask = dropout_mask(width, config.dropout, rng);
        let (p, cache) = model_forward(&ex.input, params, ForwardMode::Train { mask: &mask })?;
        let dz = (p - if ex.label { 1.0 } else { 0.0 }) / n;
        model_backward_into(params, &cache, dz, &mut grads);
        probs.push(p);
        labels.push(ex.label);
    }
    adam_step(params, &grads, state)?;
    max_norm_clip(&mut params.conv_banks, config.max_norm);
    Ok(cross_entropy(&probs, &labels))
}

fn evaluate(params: &ModelParameters, dev: &[Example], dev_labels: &[bool]) -> Result<(f64, f64, f64), TrainError> {
    let scores = predict(params, dev)?;
    let loss = cross_entropy(&scores, dev_labels);
    let (tau, f1) = select_threshold(&scores, dev_labels)?;
    Ok((loss, tau, f1))
}

/// Mini-batch training with periodic dev evaluation. Keeps the parameters of
/// the strictly best dev F1 and stops after `patience` evaluations without
/// improvement or when the epoch budget runs out.
pub fn train_fold(
    train: &[Example],
    dev: &[Example],
    init: ModelParameters,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if dev.is_empty() {
        return Err(TrainError::Empty("development"));
    }
    let dev_labels: Vec<bool> = dev.iter().map(|e| e.label).collect();
    if !dev_labels.iter().any(|&y| y) {
        return Err(TrainError::NoPositives);
    }
    init.validate()?;

    let mut params = init;
    let mut state = AdamState::new(&params, AdamHyper::from(config));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<Snapshot> = None;
    let mut evaluations = Vec::new();
    let mut since_best = 0usize;
    let mut batch_index = 0usize;
    let mut stopped_early = false;

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", Evaluation::tsv_header())?;
    }

    let mut record = |params: &ModelParameters,
                      batch_index: usize,
                      best: &mut Option<Snapshot>,
                      since_best: &mut usize,
                      log: &mut Option<&mut dyn Write>|
     -> Result<(), TrainError> {
        let (loss, tau, f1) = evaluate(params, dev, &dev_labels)?;
        let improved = best.as_ref().is_none_or(|b| f1 > b.dev_f1);
        if improved {
            *best = Some(Snapshot {
                params: params.clone(),
                threshold: tau,
                dev_f1: f1,
                batch_index,
            });
            *since_best = 0;
        } else {
            *since_best += 1;
        }
        let e = Evaluation {
            batch_index,
            dev_loss: loss,
            dev_f1: f1,
            threshold: tau,
            patience: *since_best,
        };
        debug!("{}", e.tsv_line());
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", e.tsv_line())?;
        }
        evaluations.push(e);
        Ok(())
    };

    'epochs: for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            train_step(&mut params, &mut state, &batch, config, &mut rng).map_err(|e| match e {
                TrainError::NonFiniteGradient { .. } => TrainError::NonFiniteGradient {
                    batch: batch_index + 1,
                },
                other => other,
            })?;
            batch_index += 1;
            if batch_index % config.eval_every == 0 {
                record(&params, batch_index, &mut best, &mut since_best, &mut log)?;
                if since_best >= config.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if best.is_none() {
        record(&params, batch_index, &mut best, &mut since_best, &mut log)?;
    }
    Ok(TrainOutcome {
        best: best.expect("at least one evaluation ran"),
        evaluations,
        batches_trained: batch_index,
        stopped_early,
    })
}

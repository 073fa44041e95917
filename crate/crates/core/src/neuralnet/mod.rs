//! Convolutional sentence models with hand-written backward passes.
//!
//! Two graphs are supported:
//!
//! * `Huynh`: embed, valid conv, ReLU, global max-pool, dropout, logistic head.
//! * `Hughes`: embed, two same-padded conv+ReLU stages, max-pool (window 5,
//!   stride 5), two more conv+ReLU stages, global max-pool, dropout, head.

mod checkpoint;
mod kernels;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use kernels::*;

use crate::embeddings::EmbeddingMatrix;
use crate::textprep::EncodedSentence;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layer {layer}: {reason}")]
    Layer { layer: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Huynh,
    Hughes,
}

impl Architecture {
    pub fn default_filters(self) -> usize {
        match self {
            Architecture::Huynh => 300,
            Architecture::Hughes => 256,
        }
    }

    pub fn bank_count(self) -> usize {
        match self {
            Architecture::Huynh => 1,
            Architecture::Hughes => 4,
        }
    }

    /// Shortest input sequence the graph accepts for a given window.
    pub fn min_len(self, window: usize) -> usize {
        match self {
            Architecture::Huynh => window,
            Architecture::Hughes => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Huynh => "huynh",
            Architecture::Hughes => "hughes",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "huynh" => Ok(Architecture::Huynh),
            "hughes" => Ok(Architecture::Hughes),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

pub const HUGHES_POOL: usize = 5;

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv { bank: usize, padding: Padding },
    Relu,
    MaxPool { window: usize, stride: usize },
}

fn layer_plan(arch: Architecture) -> &'static [Layer] {
    const HUYNH: &[Layer] = &[
        Layer::Conv {
            bank: 0,
            padding: Padding::Valid,
        },
        Layer::Relu,
    ];
    const HUGHES: &[Layer] = &[
        Layer::Conv {
            bank: 0,
            padding: Padding::Same,
        },
        Layer::Relu,
        Layer::Conv {
            bank: 1,
            padding: Padding::Same,
        },
        Layer::Relu,
        Layer::MaxPool {
            window: HUGHES_POOL,
            stride: HUGHES_POOL,
        },
        Layer::Conv {
            bank: 2,
            padding: Padding::Same,
        },
        Layer::Relu,
        Layer::Conv {
            bank: 3,
            padding: Padding::Same,
        },
        Layer::Relu,
    ];
    match arch {
        Architecture::Huynh => HUYNH,
        Architecture::Hughes => HUGHES,
    }
}

/// Every trainable tensor of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub architecture: Architecture,
    pub embedding: EmbeddingMatrix,
    pub conv_banks: Vec<ConvFilterBank>,
    pub head: DenseHead,
}

impl ModelParameters {
    /// Glorot-initialized conv banks and head around a given embedding table.
    pub fn init<R: Rng>(
        architecture: Architecture,
        embedding: EmbeddingMatrix,
        filters: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        let mut banks = Vec::with_capacity(architecture.bank_count());
        let mut in_channels = embedding.dim;
        for _ in 0..architecture.bank_count() {
            banks.push(ConvFilterBank::glorot(window, in_channels, filters, rng));
            in_channels = filters;
        }
        let head = DenseHead::glorot(filters, rng);
        ModelParameters {
            architecture,
            embedding,
            conv_banks: banks,
            head,
        }
    }

    pub fn vector_len(&self) -> usize {
        self.head.w.len()
    }

    /// Checks that the layer shapes chain for the tagged architecture.
    pub fn validate(&self) -> Result<(), NetError> {
        let want = self.architecture.bank_count();
        if self.conv_banks.len() != want {
            return Err(NetError::Layer {
                layer: "conv".into(),
                reason: format!(
                    "{} expects {want} conv banks, found {}",
                    self.architecture.as_str(),
                    self.conv_banks.len()
                ),
            });
        }
        let mut channels = self.embedding.dim;
        for (i, bank) in self.conv_banks.iter().enumerate() {
            let layer = format!("conv{i}");
            if bank.in_channels != channels {
                return Err(NetError::Layer {
                    layer,
                    reason: format!("expects {} input channels, receives {channels}", bank.in_channels),
                });
            }
            if bank.weights.len() != bank.window * bank.in_channels * bank.out_channels
                || bank.bias.len() != bank.out_channels
            {
                return Err(NetError::Layer {
                    layer,
                    reason: "weight or bias length does not match the declared shape".into(),
                });
            }
            channels = bank.out_channels;
        }
        if self.head.w.len() != channels {
            return Err(NetError::Layer {
                layer: "head".into(),
                reason: format!("expects {} inputs, receives {channels}", self.head.w.len()),
            });
        }
        if self.embedding.values.len() != self.embedding.rows * self.embedding.dim {
            return Err(NetError::Layer {
                layer: "embedding".into(),
                reason: "value count does not match V x M".into(),
            });
        }
        Ok(())
    }

    /// Named value blocks in a fixed order, used for checkpoints and
    /// optimizer state.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![(
            "embedding".to_string(),
            vec![self.embedding.rows, self.embedding.dim],
            self.embedding.values.as_slice(),
        )];
        for (i, b) in self.conv_banks.iter().enumerate() {
            out.push((
                format!("conv{i}.weights"),
                vec![b.window, b.in_channels, b.out_channels],
                b.weights.as_slice(),
            ));
            out.push((format!("conv{i}.bias"), vec![b.out_channels], b.bias.as_slice()));
        }
        out.push(("head.w".to_string(), vec![self.head.w.len()], self.head.w.as_slice()));
        out.push(("head.b".to_string(), vec![1], std::slice::from_ref(&self.head.b)));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv(ConvCache),
    Relu(ReluCache),
    Pool(PoolCache),
}

/// Everything `model_backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub indices: Vec<usize>,
    layers: Vec<LayerCache>,
    global_pool: PoolCache,
    pub vector: Vec<f64>,
    pub mask: Vec<f64>,
    pub dropped: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
}

impl ForwardCache {
    /// ReLU on/off states and pooling argmax positions. Two passes with the
    /// same pattern are on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerCache::Relu(c) => out.extend(c.active.iter().map(|&a| a as usize)),
                LayerCache::Pool(c) => out.extend_from_slice(&c.argmax),
                LayerCache::Conv(_) => {}
            }
        }
        out.extend_from_slice(&self.global_pool.argmax);
        out
    }
}

/// Dropout handling for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Infer,
    /// Training with a precomputed inverted-dropout mask over `v`.
    Train { mask: &'a [f64] },
}

/// Runs one sentence through the model; returns `(probability, cache)`.
pub fn model_forward(
    sentence: &EncodedSentence,
    params: &ModelParameters,
    mode: ForwardMode<'_>,
) -> Result<(f64, ForwardCache), NetError> {
    let indices = &sentence.indices;
    if let Some(&bad) = indices.iter().find(|&&i| i >= params.embedding.rows) {
        return Err(NetError::Layer {
            layer: "embedding".into(),
            reason: format!("index {bad} outside vocabulary of {}", params.embedding.rows),
        });
    }
    let mut x = embed_forward(indices, &params.embedding);
    let mut caches = Vec::with_capacity(8);
    for (n, layer) in layer_plan(params.architecture).iter().enumerate() {
        match *layer {
            Layer::Conv { bank, padding } => {
                let (y, c) = conv1d_forward(&x, &params.conv_banks[bank], padding).map_err(|e| NetError::Layer {
                    layer: format!("conv{bank} (step {n})"),
                    reason: e.to_string(),
                })?;
                caches.push(LayerCache::Conv(c));
                x = y;
            }
            Layer::Relu => {
                let (y, c) = relu_forward(&x);
                caches.push(LayerCache::Relu(c));
                x = y;
            }
            Layer::MaxPool { window, stride } => {
                let (y, c) = maxpool1d_forward(&x, window, stride);
                caches.push(LayerCache::Pool(c));
                x = y;
            }
        }
    }
    let (pooled, global_pool) = global_maxpool_forward(&x);
    let vector = pooled.data;
    if vector.len() != params.head.w.len() {
        return Err(NetError::Layer {
            layer: "head".into(),
            reason: format!("expects {} inputs, receives {}", params.head.w.len(), vector.len()),
        });
    }
    let mask = match mode {
        ForwardMode::Infer => vec![1.0; vector.len()],
        ForwardMode::Train { mask } => {
            if mask.len() != vector.len() {
                return Err(NetError::Layer {
                    layer: "dropout".into(),
                    reason: format!("mask has {} entries for a {}-vector", mask.len(), vector.len()),
                });
            }
            mask.to_vec()
        }
    };
    let dropped = apply_mask(&vector, &mask);
    let (logit, probability) = head_forward(&dropped, &params.head);
    Ok((
        probability,
        ForwardCache {
            indices: indices.clone(),
            layers: caches,
            global_pool,
            vector,
            mask,
            dropped,
            logit,
            probability,
        },
    ))
}

/// Gradient of a scalar objective with respect to every tensor of a model.
/// Embedding gradients are sparse over the rows that were read.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: RowGradients,
    pub conv_weights: Vec<Vec<f64>>,
    pub conv_bias: Vec<Vec<f64>>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        Gradients {
            embedding: RowGradients::new(params.embedding.dim),
            conv_weights: params.conv_banks.iter().map(|b| vec![0.0; b.weights.len()]).collect(),
            conv_bias: params.conv_banks.iter().map(|b| vec![0.0; b.bias.len()]).collect(),
            head_w: vec![0.0; params.head.w.len()],
            head_b: 0.0,
        }
    }

    /// Every dense value followed by the touched embedding rows in index order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.conv_weights
            .iter()
            .chain(&self.conv_bias)
            .flatten()
            .chain(&self.head_w)
            .copied()
            .chain(std::iter::once(self.head_b))
            .chain(self.embedding.rows.values().flatten().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Exact reverse pass for an upstream `dL/dz`; returns fresh gradients.
pub fn model_backward(params: &ModelParameters, cache: &ForwardCache, dz: f64) -> Gradients {
    let mut grads = Gradients::zeros_like(params);
    model_backward_into(params, cache, dz, &mut grads);
    grads
}

/// Same as [`model_backward`] but accumulates into `grads`.
pub fn model_backward_into(params: &ModelParameters, cache: &ForwardCache, dz: f64, grads: &mut Gradients) {
    let (d_dropped, dw, db) = head_backward(&cache.dropped, &params.head, dz);
    for (a, b) in grads.head_w.iter_mut().zip(dw) {
        *a += b;
    }
    grads.head_b += db;
    let dv = dropout_backward(&cache.mask, &d_dropped);
    let mut g = global_maxpool_backward(&cache.global_pool, &Tensor::from_vec(1, dv.len(), dv));

    let plan = layer_plan(params.architecture);
    for (layer, lc) in plan.iter().zip(&cache.layers).rev() {
        g = match (layer, lc) {
            (Layer::Conv { bank, .. }, LayerCache::Conv(c)) => conv1d_backward_into(
                c,
                &params.conv_banks[*bank],
                &g,
                &mut grads.conv_weights[*bank],
                &mut grads.conv_bias[*bank],
                true,
            ),
            (Layer::Relu, LayerCache::Relu(c)) => relu_backward(c, &g),
            (Layer::MaxPool { .. }, LayerCache::Pool(c)) => maxpool1d_backward(c, &g),
            _ => unreachable!("cache does not match layer plan"),
        };
    }
    embed_backward(&cache.indices, &g, &mut grads.embedding);
}

//! Forward/backward kernels on row-major `(positions x channels)` tensors.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::embeddings::EmbeddingMatrix;

/// Row-major 2D tensor; rows are sequence positions, columns are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------- embedding

pub fn embed_forward(indices: &[usize], emb: &EmbeddingMatrix) -> Tensor {
    let mut out = Tensor::zeros(indices.len(), emb.dim);
    for (t, &idx) in indices.iter().enumerate() {
        out.row_mut(t).copy_from_slice(emb.row(idx));
    }
    out
}

/// Sparse per-row gradient of an embedding table. Rows are kept in index
/// order so iteration is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGradients {
    pub dim: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl RowGradients {
    pub fn new(dim: usize) -> Self {
        RowGradients {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn row_mut(&mut self, idx: usize) -> &mut [f64] {
        let dim = self.dim;
        self.rows.entry(idx).or_insert_with(|| vec![0.0; dim])
    }

    pub fn get(&self, idx: usize) -> Option<&[f64]> {
        self.rows.get(&idx).map(Vec::as_slice)
    }
}

/// Scatter-adds position gradients into the rows they were read from;
/// repeated indices accumulate.
pub fn embed_backward(indices: &[usize], grad: &Tensor, out: &mut RowGradients) {
    for (t, &idx) in indices.iter().enumerate() {
        let g = grad.row(t);
        if g.iter().all(|&v| v == 0.0) && out.rows.contains_key(&idx) {
            continue;
        }
        for (d, g) in out.row_mut(idx).iter_mut().zip(g) {
            *d += g;
        }
    }
}

// ---------------------------------------------------------------- conv1d

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// `weights[(i * in_channels + c) * out_channels + f]` is tap `i`, input
/// channel `c`, filter `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilterBank {
    pub window: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvFilterBank {
    pub fn zeros(window: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvFilterBank {
            window,
            in_channels,
            out_channels,
            weights: vec![0.0; window * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(window: usize, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let mut bank = Self::zeros(window, in_channels, out_channels);
        let limit = (6.0 / (window * in_channels + window * out_channels) as f64).sqrt();
        for w in bank.weights.iter_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        bank
    }

    pub fn filter_norm(&self, f: usize) -> f64 {
        self.weights
            .iter()
            .skip(f)
            .step_by(self.out_channels)
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales every filter whose L2 norm exceeds `max_norm` back onto the
    /// ball. Biases are left alone.
    pub fn apply_max_norm(&mut self, max_norm: f64) {
        let f_count = self.out_channels;
        for f in 0..f_count {
            let norm = self.filter_norm(f);
            if norm > max_norm {
                let scale = max_norm / norm;
                for w in self.weights.iter_mut().skip(f).step_by(f_count) {
                    *w *= scale;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: Tensor,
    pub padding: Padding,
}

fn left_offset(window: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => (window - 1) / 2,
    }
}

pub fn conv_output_len(len: usize, window: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Valid => len.checked_sub(window).map(|d| d + 1),
        Padding::Same => Some(len),
    }
}

pub fn conv1d_forward(x: &Tensor, bank: &ConvFilterBank, padding: Padding) -> Result<(Tensor, ConvCache), NetError> {
    if x.cols != bank.in_channels {
        return Err(NetError::Shape(format!(
            "conv expects {} input channels, got {}",
            bank.in_channels, x.cols
        )));
    }
    let out_len = conv_output_len(x.rows, bank.window, padding).ok_or_else(|| {
        NetError::Shape(format!(
            "valid convolution needs at least {} positions, got {}",
            bank.window, x.rows
        ))
    })?;
    let f_count = bank.out_channels;
    let c_count = bank.in_channels;
    let off = left_offset(bank.window, padding);
    let mut out = Tensor::zeros(out_len, f_count);
    for t in 0..out_len {
        let out_row = &mut out.data[t * f_count..(t + 1) * f_count];
        out_row.copy_from_slice(&bank.bias);
        for i in 0..bank.window {
            let src = t + i;
            if src < off || src - off >= x.rows {
                continue;
            }
            let x_row = x.row(src - off);
            for (c, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_row = &bank.weights[(i * c_count + c) * f_count..(i * c_count + c + 1) * f_count];
                for (o, w) in out_row.iter_mut().zip(w_row) {
                    *o += xv * w;
                }
            }
        }
    }
    Ok((
        out,
        ConvCache {
            input: x.clone(),
            padding,
        },
    ))
}

/// Returns `dx` and accumulates filter/bias gradients into `dweights`/`dbias`.
pub fn conv1d_backward_into(
    cache: &ConvCache,
    bank: &ConvFilterBank,
    grad: &Tensor,
    dweights: &mut [f64],
    dbias: &mut [f64],
    need_dx: bool,
) -> Tensor {
    let x = &cache.input;
    let f_count = bank.out_channels;
    let c_count = bank.in_channels;
    let off = left_offset(bank.window, cache.padding);
    let mut dx = Tensor::zeros(if need_dx { x.rows } else { 0 }, c_count);
    for t in 0..grad.rows {
        let g_row = grad.row(t);
        if g_row.iter().all(|&g| g == 0.0) {
            continue;
        }
        for (db, g) in dbias.iter_mut().zip(g_row) {
            *db += g;
        }
        for i in 0..bank.window {
            let src = t + i;
            if src < off || src - off >= x.rows {
                continue;
            }
            let p = src - off;
            for c in 0..c_count {
                let base = (i * c_count + c) * f_count;
                let xv = x.at(p, c);
                if xv != 0.0 {
                    for (dw, g) in dweights[base..base + f_count].iter_mut().zip(g_row) {
                        *dw += xv * g;
                    }
                }
                if need_dx {
                    let w_row = &bank.weights[base..base + f_count];
                    let s: f64 = w_row.iter().zip(g_row).map(|(w, g)| w * g).sum();
                    dx.data[p * c_count + c] += s;
                }
            }
        }
    }
    dx
}

/// Exact gradients `(dx, dweights, dbias)`.
pub fn conv1d_backward(cache: &ConvCache, bank: &ConvFilterBank, grad: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; bank.weights.len()];
    let mut db = vec![0.0; bank.bias.len()];
    let dx = conv1d_backward_into(cache, bank, grad, &mut dw, &mut db, true);
    (dx, dw, db)
}

// ---------------------------------------------------------------- relu

#[derive(Debug, Clone)]
pub struct ReluCache {
    pub active: Vec<bool>,
}

pub fn relu_forward(x: &Tensor) -> (Tensor, ReluCache) {
    let active: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
    let data = x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    (Tensor::from_vec(x.rows, x.cols, data), ReluCache { active })
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward(cache: &ReluCache, grad: &Tensor) -> Tensor {
    let data = grad
        .data
        .iter()
        .zip(&cache.active)
        .map(|(&g, &a)| if a { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad.rows, grad.cols, data)
}

// ---------------------------------------------------------------- pooling

#[derive(Debug, Clone)]
pub struct PoolCache {
    pub input_rows: usize,
    /// Source row of each output element, `out_rows x cols`.
    pub argmax: Vec<usize>,
}

/// Windowed max over positions; a final partial window is pooled over
/// whatever it covers. Ties go to the first position.
pub fn maxpool1d_forward(x: &Tensor, window: usize, stride: usize) -> (Tensor, PoolCache) {
    assert!(x.rows >= 1 && window >= 1 && stride >= 1);
    let starts: Vec<usize> = (0..x.rows).step_by(stride).collect();
    let cols = x.cols;
    let mut out = Tensor::zeros(starts.len(), cols);
    let mut argmax = vec![0usize; starts.len() * cols];
    for (o, &start) in starts.iter().enumerate() {
        let end = (start + window).min(x.rows);
        for c in 0..cols {
            let mut best = start;
            let mut best_v = x.at(start, c);
            for r in start + 1..end {
                let v = x.at(r, c);
                if v > best_v {
                    best_v = v;
                    best = r;
                }
            }
            out.data[o * cols + c] = best_v;
            argmax[o * cols + c] = best;
        }
    }
    (
        out,
        PoolCache {
            input_rows: x.rows,
            argmax,
        },
    )
}

pub fn maxpool1d_backward(cache: &PoolCache, grad: &Tensor) -> Tensor {
    let cols = grad.cols;
    let mut dx = Tensor::zeros(cache.input_rows, cols);
    for (k, &g) in grad.data.iter().enumerate() {
        let c = k % cols;
        dx.data[cache.argmax[k] * cols + c] += g;
    }
    dx
}

/// Per-channel max over all positions, returned as a `1 x cols` tensor.
pub fn global_maxpool_forward(x: &Tensor) -> (Tensor, PoolCache) {
    maxpool1d_forward(x, x.rows, x.rows)
}

pub fn global_maxpool_backward(cache: &PoolCache, grad: &Tensor) -> Tensor {
    maxpool1d_backward(cache, grad)
}

// ---------------------------------------------------------------- dropout

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Infer,
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if p > 0.0 && rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn dropout<R: Rng>(v: &[f64], p: f64, mode: DropoutMode, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mask = match mode {
        DropoutMode::Train => dropout_mask(v.len(), p, rng),
        DropoutMode::Infer => vec![1.0; v.len()],
    };
    (apply_mask(v, &mask), mask)
}

pub fn apply_mask(v: &[f64], mask: &[f64]) -> Vec<f64> {
    v.iter().zip(mask).map(|(a, m)| a * m).collect()
}

pub fn dropout_backward(mask: &[f64], grad: &[f64]) -> Vec<f64> {
    apply_mask(grad, mask)
}

// ---------------------------------------------------------------- head

#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl DenseHead {
    pub fn zeros(n: usize) -> Self {
        DenseHead { w: vec![0.0; n], b: 0.0 }
    }

    pub fn glorot<R: Rng>(n: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (n + 1) as f64).sqrt();
        DenseHead {
            w: (0..n).map(|_| rng.gen_range(-limit..limit)).collect(),
            b: 0.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Returns `(z, sigmoid(z))` with `z = v.w + b`.
pub fn head_forward(v: &[f64], head: &DenseHead) -> (f64, f64) {
    debug_assert_eq!(v.len(), head.w.len());
    let z = v.iter().zip(&head.w).map(|(a, b)| a * b).sum::<f64>() + head.b;
    (z, sigmoid(z))
}

/// Returns `(dv, dw, db)` for an upstream `dz`.
pub fn head_backward(v: &[f64], head: &DenseHead, dz: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let dv = head.w.iter().map(|w| w * dz).collect();
    let dw = v.iter().map(|x| x * dz).collect();
    (dv, dw, dz)
}

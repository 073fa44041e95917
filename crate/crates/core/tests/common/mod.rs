#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adrcnn::embeddings::EmbeddingMatrix;
use adrcnn::experiment::{EmbeddingSourceFormat, ExperimentConfig};
use adrcnn::neuralnet::*;
use adrcnn::textprep::EncodedSentence;
use adrcnn::train::cross_entropy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KEYWORD: &str = "zorbex";

/// Corpus files where a sentence is positive iff it contains [`KEYWORD`].
pub struct SyntheticCorpus {
    pub positive: PathBuf,
    pub negative: PathBuf,
    pub positive_sentences: Vec<String>,
    pub negative_sentences: Vec<String>,
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..9);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

pub fn write_synthetic_corpus(dir: &Path, n: usize, positive_share: f64, seed: u64) -> SyntheticCorpus {
    write_synthetic_corpus_with(dir, n, positive_share, seed, 300, 6..=20)
}

/// Like [`write_synthetic_corpus`] with a chosen filler pool and sentence length range.
pub fn write_synthetic_corpus_with(
    dir: &Path,
    n: usize,
    positive_share: f64,
    seed: u64,
    filler_count: usize,
    lengths: std::ops::RangeInclusive<usize>,
) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fillers: Vec<String> = Vec::new();
    while fillers.len() < filler_count {
        let w = word(&mut rng);
        if w != KEYWORD && !fillers.contains(&w) {
            fillers.push(w);
        }
    }
    let n_pos = (n as f64 * positive_share).round() as usize;
    let mut pos_lines = String::new();
    let mut neg_lines = String::new();
    let mut positive_sentences = Vec::new();
    let mut negative_sentences = Vec::new();
    for i in 0..n {
        let len = rng.gen_range(lengths.clone());
        let mut words: Vec<String> = (0..len).map(|_| fillers[rng.gen_range(0..fillers.len())].clone()).collect();
        let positive = i < n_pos;
        if positive {
            // never first, so capitalisation cannot hide it
            let at = rng.gen_range(1..words.len());
            words[at] = KEYWORD.to_string();
        }
        let mut s = words.join(" ");
        s[..1].make_ascii_uppercase();
        s.push('.');
        let pmid = 1_000_000 + i;
        if positive {
            let _ = writeln!(pos_lines, "{pmid}|{s}|{KEYWORD}|0|6|drug|0|4");
            positive_sentences.push(s);
        } else {
            let _ = writeln!(neg_lines, "{pmid} NEG {s}");
            negative_sentences.push(s);
        }
    }
    let positive = dir.join("DRUG-AE.rel");
    let negative = dir.join("ADE-NEG.txt");
    fs::write(&positive, pos_lines).unwrap();
    fs::write(&negative, neg_lines).unwrap();
    SyntheticCorpus {
        positive,
        negative,
        positive_sentences,
        negative_sentences,
    }
}

/// Huynh graph with tiny random embeddings and the standard training schedule.
pub fn synthetic_config(corpus: &SyntheticCorpus, filters: usize) -> ExperimentConfig {
    ExperimentConfig {
        positive_path: Some(corpus.positive.clone()),
        negative_path: Some(corpus.negative.clone()),
        embedding_format: EmbeddingSourceFormat::Random,
        embedding_dim: 8,
        filters: Some(filters),
        ..ExperimentConfig::default()
    }
}

// ------------------------------------------------------------------ gradient checks

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
// gradients smaller than this are compared absolutely
const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

impl CheckStats {
    pub fn merge(&mut self, o: CheckStats) {
        self.checked += o.checked;
        self.skipped_kinks += o.skipped_kinks;
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let den = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        self.max_rel_err = self.max_rel_err.max((analytic - numeric).abs() / den);
        self.checked += 1;
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_err < FD_REL_TOL
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` along coordinate `i` of `x`, or `None` if a
/// perturbation changes the activation pattern reported by `pattern`.
fn central_diff<F, P>(x: &mut [f64], i: usize, f: &F, pattern: &P) -> Option<f64>
where
    F: Fn(&[f64]) -> f64,
    P: Fn(&[f64]) -> Vec<usize>,
{
    let orig = x[i];
    let base = pattern(x);
    x[i] = orig + FD_STEP;
    let fp = f(x);
    let pp = pattern(x);
    x[i] = orig - FD_STEP;
    let fm = f(x);
    let pm = pattern(x);
    x[i] = orig;
    if pp != base || pm != base {
        return None;
    }
    Some((fp - fm) / (2.0 * FD_STEP))
}

fn check_vector<F, P>(x: &mut [f64], analytic: &[f64], f: F, pattern: P, stats: &mut CheckStats)
where
    F: Fn(&[f64]) -> f64,
    P: Fn(&[f64]) -> Vec<usize>,
{
    for i in 0..x.len() {
        match central_diff(x, i, &f, &pattern) {
            Some(n) => stats.record(analytic[i], n),
            None => stats.skipped_kinks += 1,
        }
    }
}

fn no_pattern(_: &[f64]) -> Vec<usize> {
    Vec::new()
}

pub fn check_conv(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(5..=12);
    let c = rng.gen_range(1..=4);
    let f = rng.gen_range(1..=4);
    let window = rng.gen_range(1..=5);
    let padding = if rng.gen_bool(0.5) { Padding::Valid } else { Padding::Same };
    let mut bank = ConvFilterBank::glorot(window, c, f, &mut rng);
    bank.bias = randn(&mut rng, f);
    let x = Tensor::from_vec(len, c, randn(&mut rng, len * c));
    let (y, cache) = conv1d_forward(&x, &bank, padding).unwrap();
    let g = Tensor::from_vec(y.rows, y.cols, randn(&mut rng, y.data.len()));
    let (dx, dw, db) = conv1d_backward(&cache, &bank, &g);

    let mut stats = CheckStats::default();
    let mut xs = x.data.clone();
    check_vector(
        &mut xs,
        &dx.data,
        |v| dot(&conv1d_forward(&Tensor::from_vec(len, c, v.to_vec()), &bank, padding).unwrap().0.data, &g.data),
        no_pattern,
        &mut stats,
    );
    let mut ws = bank.weights.clone();
    check_vector(
        &mut ws,
        &dw,
        |v| {
            let b = ConvFilterBank {
                weights: v.to_vec(),
                ..bank.clone()
            };
            dot(&conv1d_forward(&x, &b, padding).unwrap().0.data, &g.data)
        },
        no_pattern,
        &mut stats,
    );
    let mut bs = bank.bias.clone();
    check_vector(
        &mut bs,
        &db,
        |v| {
            let b = ConvFilterBank {
                bias: v.to_vec(),
                ..bank.clone()
            };
            dot(&conv1d_forward(&x, &b, padding).unwrap().0.data, &g.data)
        },
        no_pattern,
        &mut stats,
    );
    stats
}

pub fn check_relu(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (rng.gen_range(1..=12), rng.gen_range(1..=4));
    let x = Tensor::from_vec(rows, cols, randn(&mut rng, rows * cols));
    let g = randn(&mut rng, rows * cols);
    let (_, cache) = relu_forward(&x);
    let dx = relu_backward(&cache, &Tensor::from_vec(rows, cols, g.clone()));
    let mut stats = CheckStats::default();
    let mut xs = x.data.clone();
    check_vector(
        &mut xs,
        &dx.data,
        |v| dot(&relu_forward(&Tensor::from_vec(rows, cols, v.to_vec())).0.data, &g),
        |v| relu_forward(&Tensor::from_vec(rows, cols, v.to_vec())).1.active.iter().map(|&a| a as usize).collect(),
        &mut stats,
    );
    stats
}

pub fn check_maxpool(seed: u64, global: bool) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (rng.gen_range(1..=12), rng.gen_range(1..=4));
    let x = Tensor::from_vec(rows, cols, randn(&mut rng, rows * cols));
    let pool = |t: &Tensor| {
        if global {
            global_maxpool_forward(t)
        } else {
            maxpool1d_forward(t, 5, 5)
        }
    };
    let (y, cache) = pool(&x);
    let g = randn(&mut rng, y.data.len());
    let dx = maxpool1d_backward(&cache, &Tensor::from_vec(y.rows, y.cols, g.clone()));
    let mut stats = CheckStats::default();
    let mut xs = x.data.clone();
    check_vector(
        &mut xs,
        &dx.data,
        |v| dot(&pool(&Tensor::from_vec(rows, cols, v.to_vec())).0.data, &g),
        |v| pool(&Tensor::from_vec(rows, cols, v.to_vec())).1.argmax,
        &mut stats,
    );
    stats
}

pub fn check_embedding(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, dim, len) = (rng.gen_range(3..=10), rng.gen_range(1..=6), rng.gen_range(1..=12));
    let emb = EmbeddingMatrix {
        rows: vocab,
        dim,
        values: randn(&mut rng, vocab * dim),
    };
    let indices: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let g = randn(&mut rng, len * dim);
    let mut grads = RowGradients::new(dim);
    embed_backward(&indices, &Tensor::from_vec(len, dim, g.clone()), &mut grads);
    let mut dense = vec![0.0; vocab * dim];
    for (&r, v) in &grads.rows {
        dense[r * dim..(r + 1) * dim].copy_from_slice(v);
    }
    let mut stats = CheckStats::default();
    let mut vals = emb.values.clone();
    check_vector(
        &mut vals,
        &dense,
        |v| {
            let e = EmbeddingMatrix {
                values: v.to_vec(),
                ..emb.clone()
            };
            dot(&embed_forward(&indices, &e).data, &g)
        },
        no_pattern,
        &mut stats,
    );
    stats
}

pub fn check_dropout(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=8);
    let v = randn(&mut rng, n);
    let (_, mask) = dropout(&v, 0.5, DropoutMode::Train, &mut rng);
    let g = randn(&mut rng, n);
    let dv = dropout_backward(&mask, &g);
    let mut stats = CheckStats::default();
    let mut xs = v.clone();
    check_vector(&mut xs, &dv, |x| dot(&apply_mask(x, &mask), &g), no_pattern, &mut stats);
    stats
}

pub fn check_head(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=6);
    let v = randn(&mut rng, n);
    let head = DenseHead {
        w: randn(&mut rng, n),
        b: rng.gen_range(-1.0..1.0),
    };
    let label = rng.gen_bool(0.5);
    let loss = |v: &[f64], h: &DenseHead| cross_entropy(&[head_forward(v, h).1], &[label]);
    let (_, p) = head_forward(&v, &head);
    let dz = p - if label { 1.0 } else { 0.0 };
    let (dv, dw, db) = head_backward(&v, &head, dz);
    let mut stats = CheckStats::default();
    let mut xs = v.clone();
    check_vector(&mut xs, &dv, |x| loss(x, &head), no_pattern, &mut stats);
    let mut ws = head.w.clone();
    check_vector(
        &mut ws,
        &dw,
        |x| {
            loss(
                &v,
                &DenseHead {
                    w: x.to_vec(),
                    b: head.b,
                },
            )
        },
        no_pattern,
        &mut stats,
    );
    let mut bs = vec![head.b];
    check_vector(
        &mut bs,
        &[db],
        |x| {
            loss(
                &v,
                &DenseHead {
                    w: head.w.clone(),
                    b: x[0],
                },
            )
        },
        no_pattern,
        &mut stats,
    );
    stats
}

/// Whole-model check of every parameter block through the loss, with a
/// fixed dropout mask.
pub fn check_model(arch: Architecture, seed: u64, len: usize, dim: usize, filters: usize) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 7;
    let emb = EmbeddingMatrix {
        rows: vocab,
        dim,
        values: randn(&mut rng, vocab * dim),
    };
    let mut params = ModelParameters::init(arch, emb, filters, 5, &mut rng);
    for b in params.conv_banks.iter_mut() {
        b.bias = (0..b.bias.len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
    }
    params.head.b = rng.gen_range(-0.5..0.5);
    let indices: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let sentence = EncodedSentence {
        indices,
        true_length: len,
    };
    let mask = dropout_mask(filters, 0.5, &mut rng);
    let label = rng.gen_bool(0.5);

    let mode = ForwardMode::Train { mask: &mask };
    let (p, cache) = model_forward(&sentence, &params, mode).unwrap();
    let dz = p - if label { 1.0 } else { 0.0 };
    let grads = model_backward(&params, &cache, dz);

    let eval = |m: &ModelParameters| {
        let (p, c) = model_forward(&sentence, m, mode).unwrap();
        (cross_entropy(&[p], &[label]), c.activation_pattern())
    };

    let mut stats = CheckStats::default();
    let probe = params.clone();

    // Flatten each block, perturb through a setter.
    let blocks = params.conv_banks.len();
    let mut run_block = |get: &dyn Fn(&ModelParameters) -> Vec<f64>,
                         set: &dyn Fn(&mut ModelParameters, &[f64]),
                         analytic: &[f64],
                         probe: &ModelParameters| {
        let mut x = get(probe);
        let f = |v: &[f64]| {
            let mut m = probe.clone();
            set(&mut m, v);
            eval(&m).0
        };
        let pat = |v: &[f64]| {
            let mut m = probe.clone();
            set(&mut m, v);
            eval(&m).1
        };
        check_vector(&mut x, analytic, f, pat, &mut stats);
    };

    let mut emb_dense = vec![0.0; vocab * dim];
    for (&r, v) in &grads.embedding.rows {
        emb_dense[r * dim..(r + 1) * dim].copy_from_slice(v);
    }
    run_block(
        &|m| m.embedding.values.clone(),
        &|m, v| m.embedding.values.copy_from_slice(v),
        &emb_dense,
        &probe,
    );
    for b in 0..blocks {
        run_block(
            &|m| m.conv_banks[b].weights.clone(),
            &|m, v| m.conv_banks[b].weights.copy_from_slice(v),
            &grads.conv_weights[b],
            &probe,
        );
        run_block(
            &|m| m.conv_banks[b].bias.clone(),
            &|m, v| m.conv_banks[b].bias.copy_from_slice(v),
            &grads.conv_bias[b],
            &probe,
        );
    }
    run_block(
        &|m| m.head.w.clone(),
        &|m, v| m.head.w.copy_from_slice(v),
        &grads.head_w,
        &probe,
    );
    run_block(&|m| vec![m.head.b], &|m, v| m.head.b = v[0], &[grads.head_b], &probe);
    stats
}

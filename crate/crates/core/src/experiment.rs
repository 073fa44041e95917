//! k-fold cross-validation runs and their aggregation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusStats, FoldSplit, SentenceRecord};
use crate::embeddings::{self, EmbeddingFormat, PretrainedLexicon};
use crate::metrics::{MetricsError, MetricsReport};
use crate::neuralnet::{write_checkpoint, Architecture, CheckpointMeta, ModelParameters};
use crate::textprep::{self, encode, Vocabulary};
use crate::train::{self, Example, Snapshot, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fold {fold}, stage {stage}: {source}")]
    Fold {
        fold: usize,
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl ExperimentError {
    /// Problems with input files or configuration, as opposed to failures
    /// during the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ExperimentError::MissingFile(_) | ExperimentError::File { .. } | ExperimentError::Config(_)
        )
    }
}

fn fold_err<E>(fold: usize, stage: &'static str) -> impl FnOnce(E) -> ExperimentError
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |e| ExperimentError::Fold {
        fold,
        stage,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSourceFormat {
    GloveText,
    Word2vecBinary,
    /// Seeded uniform vectors for every corpus token; no file involved.
    Random,
}

impl std::str::FromStr for EmbeddingSourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(EmbeddingSourceFormat::Random),
            other => other.parse::<EmbeddingFormat>().map(|f| match f {
                EmbeddingFormat::GloveText => EmbeddingSourceFormat::GloveText,
                EmbeddingFormat::Word2vecBinary => EmbeddingSourceFormat::Word2vecBinary,
            }),
        }
    }
}

/// Flat experiment description; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub positive_path: Option<PathBuf>,
    pub negative_path: Option<PathBuf>,
    pub embedding_format: EmbeddingSourceFormat,
    pub embedding_path: Option<PathBuf>,
    /// Vector width for `random` embeddings.
    pub embedding_dim: usize,
    pub deduplicate: bool,
    pub stratify: bool,
    pub k: usize,
    pub dev_fraction: f64,
    pub seed: u64,
    /// Fixed sequence length; when absent the longest training sentence of
    /// each fold is used, capped at `max_len_cap`.
    pub max_len: Option<usize>,
    pub max_len_cap: usize,
    pub lowercase: bool,
    pub vocab_size: usize,
    /// Filters per conv bank; defaults to the architecture's width.
    pub filters: Option<usize>,
    pub window: usize,
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
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            architecture: Architecture::Huynh,
            positive_path: None,
            negative_path: None,
            embedding_format: EmbeddingSourceFormat::GloveText,
            embedding_path: None,
            embedding_dim: 300,
            deduplicate: true,
            stratify: true,
            k: 10,
            dev_fraction: 0.1,
            seed: 42,
            max_len: None,
            max_len_cap: 128,
            lowercase: false,
            vocab_size: textprep::DEFAULT_MAX_CONTENT,
            filters: None,
            window: 5,
            epochs: t.epochs,
            batch_size: t.batch_size,
            max_norm: t.max_norm,
            eval_every: t.eval_every,
            patience: t.patience,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            dropout: t.dropout,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ExperimentError::MissingFile(path.to_path_buf()),
            _ => ExperimentError::File {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        })?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::File {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn filters(&self) -> usize {
        self.filters.unwrap_or_else(|| self.architecture.default_filters())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_norm: self.max_norm,
            eval_every: self.eval_every,
            patience: self.patience,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            dropout: self.dropout,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return bad(format!("dev_fraction must lie in (0, 1), got {}", self.dev_fraction));
        }
        if self.window == 0 || self.filters() == 0 || self.max_len_cap == 0 {
            return bad("window, filters and max_len_cap must be positive".into());
        }
        if self.max_len == Some(0) {
            return bad("max_len must be positive".into());
        }
        if self.embedding_format == EmbeddingSourceFormat::Random && self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        self.train_config(0)
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        for (name, p) in [("positive_path", &self.positive_path), ("negative_path", &self.negative_path)] {
            match p {
                None => return bad(format!("{name} is required")),
                Some(p) if !p.exists() => return Err(ExperimentError::MissingFile(p.clone())),
                _ => {}
            }
        }
        if self.embedding_format != EmbeddingSourceFormat::Random {
            match &self.embedding_path {
                None => return bad("embedding_path is required for file-based embeddings".into()),
                Some(p) if !p.exists() => return Err(ExperimentError::MissingFile(p.clone())),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-fold seed derived from the master seed so that folds can run in any
/// order or in parallel.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub metrics: MetricsReport,
    pub threshold: f64,
    pub dev_f1: f64,
    pub best_batch: usize,
    pub batches_trained: usize,
    pub evaluations: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// L2 norm of the PAD embedding row in the kept parameters.
    pub pad_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config: ExperimentConfig,
    pub corpus: CorpusStats,
    pub mean: MetricsReport,
    pub std: MetricsReport,
    pub folds: Vec<FoldResult>,
}

/// Unweighted mean and population standard deviation of each metric.
pub fn aggregate(folds: &[FoldResult]) -> (MetricsReport, MetricsReport) {
    assert!(!folds.is_empty(), "aggregate needs at least one fold");
    let n = folds.len() as f64;
    let mut mean = [0.0; 6];
    for f in folds {
        for (m, v) in mean.iter_mut().zip(f.metrics.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 6];
    for f in folds {
        for ((s, v), m) in var.iter_mut().zip(f.metrics.values()).zip(mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.map(|s| (s / n).sqrt());
    (MetricsReport::from_values(mean), MetricsReport::from_values(std))
}

/// Markdown-style table: one row per metric, one column per report.
pub fn render_table(reports: &[&MetricsReport], labels: &[&str]) -> String {
    assert_eq!(reports.len(), labels.len());
    let mut out = String::new();
    let _ = write!(out, "| Metric |");
    for l in labels {
        let _ = write!(out, " {l} |");
    }
    out.push('\n');
    out.push_str("|---|");
    out.push_str(&"---|".repeat(labels.len()));
    out.push('\n');
    for (row, name) in MetricsReport::NAMES.iter().enumerate() {
        let _ = write!(out, "| {name} |");
        for r in reports {
            let _ = write!(out, " {:.3} |", r.values()[row]);
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`render_table`]: column labels and the six values per column.
pub fn parse_table(text: &str) -> Option<(Vec<String>, Vec<[f64; 6]>)> {
    let cells = |line: &str| -> Vec<String> {
        line.trim()
            .trim_matches('|')
            .split('|')
            .map(|c| c.trim().to_string())
            .collect()
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = cells(lines.next()?);
    let labels: Vec<String> = header.into_iter().skip(1).collect();
    lines.next()?;
    let mut cols = vec![[0.0; 6]; labels.len()];
    for (row, name) in MetricsReport::NAMES.iter().enumerate() {
        let c = cells(lines.next()?);
        if c.first().map(String::as_str) != Some(*name) || c.len() != labels.len() + 1 {
            return None;
        }
        for (col, v) in c[1..].iter().enumerate() {
            cols[col][row] = v.parse().ok()?;
        }
    }
    Some((labels, cols))
}

/// Records after optional de-duplication, with their statistics.
pub fn load_corpus(config: &ExperimentConfig) -> Result<(Vec<SentenceRecord>, CorpusStats), ExperimentError> {
    let open = |p: &Option<PathBuf>| -> Result<(PathBuf, BufReader<File>), ExperimentError> {
        let p = p.clone().ok_or_else(|| ExperimentError::Config("corpus path missing".into()))?;
        let f = File::open(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ExperimentError::MissingFile(p.clone()),
            _ => ExperimentError::File {
                path: p.clone(),
                source: Box::new(e),
            },
        })?;
        Ok((p, BufReader::new(f)))
    };
    let (pp, pos) = open(&config.positive_path)?;
    let positives = corpus::parse_positive_file(pos).map_err(|e| ExperimentError::File {
        path: pp,
        source: Box::new(e),
    })?;
    let (np, neg) = open(&config.negative_path)?;
    let negatives = corpus::parse_negative_file(neg).map_err(|e| ExperimentError::File {
        path: np,
        source: Box::new(e),
    })?;
    let all = corpus::combine(positives, negatives);
    Ok(if config.deduplicate {
        corpus::deduplicate(&all)
    } else {
        let stats = CorpusStats::undeduplicated(&all);
        (all, stats)
    })
}

/// The lexicon restricted to tokens that occur somewhere in the corpus.
pub fn load_lexicon(config: &ExperimentConfig, tokens: &[Vec<String>]) -> Result<PretrainedLexicon, ExperimentError> {
    let keep: HashSet<String> = tokens.iter().flatten().cloned().collect();
    let format = match config.embedding_format {
        EmbeddingSourceFormat::Random => {
            let mut sorted: Vec<&str> = keep.iter().map(String::as_str).collect();
            sorted.sort_unstable();
            return Ok(PretrainedLexicon::random(sorted, config.embedding_dim, config.seed));
        }
        EmbeddingSourceFormat::GloveText => EmbeddingFormat::GloveText,
        EmbeddingSourceFormat::Word2vecBinary => EmbeddingFormat::Word2vecBinary,
    };
    let path = config
        .embedding_path
        .clone()
        .ok_or_else(|| ExperimentError::Config("embedding_path is required".into()))?;
    let file = File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ExperimentError::MissingFile(path.clone()),
        _ => ExperimentError::File {
            path: path.clone(),
            source: Box::new(e),
        },
    })?;
    embeddings::load(format, file, Some(&keep)).map_err(|e| ExperimentError::File {
        path,
        source: Box::new(e),
    })
}

/// Everything produced by training and testing one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub result: FoldResult,
    pub snapshot: Snapshot,
    pub vocabulary: Vocabulary,
    pub training_log: String,
    pub seed: u64,
}

fn examples(ids: &[usize], records: &[SentenceRecord], tokens: &[Vec<String>], vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    ids.iter()
        .map(|&id| Example {
            input: encode(&tokens[id], vocab, max_len),
            label: records[id].label.is_positive(),
        })
        .collect()
}

/// Trains and evaluates one fold. Vocabulary, sequence length, embedding
/// matrix, training and threshold selection see only the fold's train and
/// dev records; test records are touched only for the final scoring.
pub fn run_fold(
    split: &FoldSplit,
    records: &[SentenceRecord],
    tokens: &[Vec<String>],
    lexicon: &PretrainedLexicon,
    config: &ExperimentConfig,
) -> Result<FoldOutcome, ExperimentError> {
    let fold = split.fold_index;
    let seed = fold_seed(config.seed, fold);

    let train_tokens = split.train_ids.iter().map(|&id| tokens[id].as_slice());
    let vocab = Vocabulary::build(train_tokens, |t| lexicon.contains(t), config.vocab_size);
    let min_len = config.architecture.min_len(config.window);
    let max_len = config
        .max_len
        .unwrap_or_else(|| {
            split
                .train_ids
                .iter()
                .map(|&id| tokens[id].len())
                .max()
                .unwrap_or(1)
                .min(config.max_len_cap)
        })
        .max(min_len)
        .max(1);

    let matrix = embeddings::assemble_matrix(&vocab, lexicon).map_err(fold_err(fold, "embeddings"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = ModelParameters::init(config.architecture, matrix, config.filters(), config.window, &mut rng);

    let train_set = examples(&split.train_ids, records, tokens, &vocab, max_len);
    let dev_set = examples(&split.dev_ids, records, tokens, &vocab, max_len);
    let mut log = Vec::new();
    let TrainOutcome {
        best,
        evaluations,
        batches_trained,
        ..
    } = train::train_fold(
        &train_set,
        &dev_set,
        init,
        &config.train_config(seed.rotate_left(17)),
        Some(&mut log),
    )
    .map_err(fold_err(fold, "training"))?;

    let test_set = examples(&split.test_ids, records, tokens, &vocab, max_len);
    let scores = train::predict(&best.params, &test_set).map_err(fold_err(fold, "scoring"))?;
    let labels: Vec<bool> = test_set.iter().map(|e| e.label).collect();
    let metrics = MetricsReport::evaluate(&scores, &labels, best.threshold)
        .map_err(fold_err::<MetricsError>(fold, "metrics"))?;
    let pad_drift = best.params.embedding.row(textprep::PAD_INDEX).iter().map(|v| v * v).sum::<f64>().sqrt();
    info!(
        "fold {fold}: dev F1 {:.4} at tau {:.4}, test F1 {:.4}, AUROC {:.4}, PAD drift {:.3e}",
        best.dev_f1, best.threshold, metrics.f1, metrics.auroc, pad_drift
    );

    Ok(FoldOutcome {
        result: FoldResult {
            fold_index: fold,
            metrics,
            threshold: best.threshold,
            dev_f1: best.dev_f1,
            best_batch: best.batch_index,
            batches_trained,
            evaluations: evaluations.len(),
            train_size: split.train_ids.len(),
            dev_size: split.dev_ids.len(),
            test_size: split.test_ids.len(),
            vocab_size: vocab.len(),
            max_len,
            pad_drift,
        },
        snapshot: best,
        vocabulary: vocab,
        training_log: String::from_utf8(log).expect("log is UTF-8"),
        seed,
    })
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Folds trained concurrently; 0 or 1 means sequential.
    pub jobs: usize,
    /// Where to write per-fold checkpoints, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Where to write per-fold training logs, if anywhere.
    pub log_dir: Option<PathBuf>,
}

/// Prepared inputs shared by all folds.
pub struct PreparedData {
    pub records: Vec<SentenceRecord>,
    pub stats: CorpusStats,
    pub tokens: Vec<Vec<String>>,
    pub lexicon: PretrainedLexicon,
    pub folds: Vec<FoldSplit>,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    config.validate()?;
    let (records, stats) = load_corpus(config)?;
    let tokens: Vec<Vec<String>> = records.iter().map(|r| textprep::prepare(&r.text, config.lowercase)).collect();
    let lexicon = load_lexicon(config, &tokens)?;
    let folds = corpus::make_folds(&records, config.k, config.dev_fraction, config.seed, config.stratify).map_err(|e| {
        ExperimentError::Stage {
            stage: "folds",
            source: Box::new(e),
        }
    })?;
    Ok(PreparedData {
        records,
        stats,
        tokens,
        lexicon,
        folds,
    })
}

pub fn run_folds(
    data: &PreparedData,
    config: &ExperimentConfig,
    jobs: usize,
) -> Result<Vec<FoldOutcome>, ExperimentError> {
    let work = |split: &FoldSplit| run_fold(split, &data.records, &data.tokens, &data.lexicon, config);
    if jobs <= 1 {
        data.folds.iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
        pool.install(|| data.folds.par_iter().map(work).collect())
    }
}

/// Full cross-validation: load, split, train every fold, aggregate.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<AggregateReport, ExperimentError> {
    let data = prepare_data(config)?;
    info!(
        "corpus: {} records ({} positive, {} negative), lexicon {} x {}",
        data.records.len(),
        data.stats.unique_positive,
        data.stats.negative,
        data.lexicon.len(),
        data.lexicon.dim()
    );
    let outcomes = run_folds(&data, config, options.jobs)?;
    for o in &outcomes {
        write_fold_artifacts(o, config, options)?;
    }
    let folds: Vec<FoldResult> = outcomes.into_iter().map(|o| o.result).collect();
    let (mean, std) = aggregate(&folds);
    Ok(AggregateReport {
        config: config.clone(),
        corpus: data.stats,
        mean,
        std,
        folds,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::File {
        path: path.to_path_buf(),
        source: Box::new(e),
    }
}

fn write_fold_artifacts(o: &FoldOutcome, config: &ExperimentConfig, options: &RunOptions) -> Result<(), ExperimentError> {
    let fold = o.result.fold_index;
    if let Some(dir) = &options.log_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("fold_{fold}.train.tsv"));
        fs::write(&path, &o.training_log).map_err(io_err(&path))?;
    }
    if let Some(dir) = &options.checkpoint_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("fold_{fold}.ckpt"));
        let meta = CheckpointMeta {
            architecture: config.architecture,
            seed: o.seed,
            window: config.window,
            filters: config.filters(),
            max_len: o.result.max_len,
            lowercase: config.lowercase,
            threshold: o.snapshot.threshold,
            vocabulary: o.vocabulary.tokens().to_vec(),
        };
        let file = File::create(&path).map_err(io_err(&path))?;
        write_checkpoint(BufWriter::new(file), &meta, &o.snapshot.params).map_err(fold_err(fold, "checkpoint"))?;
    }
    Ok(())
}

/// Writes `report.json`, `table.txt` and `folds.csv` into `dir`.
pub fn write_report(report: &AggregateReport, dir: &Path, label: &str) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;

    let table_path = dir.join("table.txt");
    fs::write(&table_path, render_table(&[&report.mean], &[label])).map_err(io_err(&table_path))?;

    let csv_path = dir.join("folds.csv");
    let mut csv = String::from("fold,accuracy,precision,recall,f1,specificity,auroc,threshold,dev_f1,best_batch,batches_trained\n");
    for f in &report.folds {
        let m = &f.metrics;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            f.fold_index, m.accuracy, m.precision, m.recall, m.f1, m.specificity, m.auroc, f.threshold, f.dev_f1,
            f.best_batch, f.batches_trained
        );
    }
    let mut file = File::create(&csv_path).map_err(io_err(&csv_path))?;
    file.write_all(csv.as_bytes()).map_err(io_err(&csv_path))?;
    Ok(())
}

//! Command-line front end.
//!
//! Exit statuses: 0 on success, 1 when a run fails, 2 for usage errors and
//! unreadable or malformed input files.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{self, CorpusStats};
use crate::embeddings::{self, EmbeddingFormat};
use crate::experiment::{self, EmbeddingSourceFormat, ExperimentConfig, RunOptions};
use crate::neuralnet::{model_forward, read_checkpoint, Architecture, ForwardMode};
use crate::textprep::{self, Vocabulary};

#[derive(Debug, Parser)]
#[command(name = "adrcnn", version, about = "CNN sentence classifier for adverse drug reaction detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the corpus files, de-duplicate, and write records plus statistics.
    Prepare {
        #[arg(long)]
        pos: PathBuf,
        #[arg(long)]
        neg: PathBuf,
        #[arg(long)]
        no_dedup: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the width, entry count and optional vocabulary coverage of an embedding file.
    EmbeddingsInfo {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: EmbeddingFormat,
        /// Two-column `token<TAB>index` vocabulary file.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Run k-fold cross-validation and write the aggregate report.
    Cv(CvArgs),
    /// Score sentences (one per line) with a saved checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Decision threshold; defaults to the one stored in the checkpoint.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn parse_format(s: &str) -> Result<EmbeddingFormat, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Flat JSON experiment configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Column label used in the rendered table.
    #[arg(long)]
    pub label: Option<String>,

    #[arg(long, value_parser = parse_arch)]
    pub architecture: Option<Architecture>,
    #[arg(long)]
    pub pos: Option<PathBuf>,
    #[arg(long)]
    pub neg: Option<PathBuf>,
    #[arg(long, value_parser = parse_source)]
    pub embedding_format: Option<EmbeddingSourceFormat>,
    #[arg(long)]
    pub emb: Option<PathBuf>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long, conflicts_with = "dedup")]
    pub no_dedup: bool,
    #[arg(long)]
    pub dedup: bool,
    #[arg(long)]
    pub no_stratify: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dev_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub max_len_cap: Option<usize>,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_norm: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse()
}

fn parse_source(s: &str) -> Result<EmbeddingSourceFormat, String> {
    s.parse()
}

impl CvArgs {
    /// Applies every flag that was given on top of `base`.
    pub fn apply(&self, mut c: ExperimentConfig) -> ExperimentConfig {
        macro_rules! set {
            ($($field:ident <- $flag:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(
            architecture <- architecture,
            embedding_format <- embedding_format,
            embedding_dim <- embedding_dim,
            k <- k,
            dev_fraction <- dev_fraction,
            seed <- seed,
            max_len_cap <- max_len_cap,
            vocab_size <- vocab_size,
            window <- window,
            epochs <- epochs,
            batch_size <- batch_size,
            max_norm <- max_norm,
            eval_every <- eval_every,
            patience <- patience,
            learning_rate <- learning_rate,
            beta1 <- beta1,
            beta2 <- beta2,
            epsilon <- epsilon,
            dropout <- dropout,
        );
        if self.pos.is_some() {
            c.positive_path = self.pos.clone();
        }
        if self.neg.is_some() {
            c.negative_path = self.neg.clone();
        }
        if self.emb.is_some() {
            c.embedding_path = self.emb.clone();
        }
        if self.max_len.is_some() {
            c.max_len = self.max_len;
        }
        if self.filters.is_some() {
            c.filters = self.filters;
        }
        if self.no_dedup {
            c.deduplicate = false;
        }
        if self.dedup {
            c.deduplicate = true;
        }
        if self.no_stratify {
            c.stratify = false;
        }
        if self.lowercase {
            c.lowercase = true;
        }
        c
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Command output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    run(args, &mut lock)
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Prepare { pos, neg, no_dedup, out: dir } => cmd_prepare(&pos, &neg, !no_dedup, &dir, out),
        Command::EmbeddingsInfo { emb, format, vocab } => cmd_embeddings_info(&emb, format, vocab.as_deref(), out),
        Command::Cv(args) => cmd_cv(&args, out),
        Command::Score {
            checkpoint,
            input,
            threshold,
        } => cmd_score(&checkpoint, &input, threshold, out),
    }
}

pub fn cmd_prepare(pos: &Path, neg: &Path, dedup: bool, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let positives = corpus::parse_positive_file(open(pos)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", pos.display())))?;
    let negatives = corpus::parse_negative_file(open(neg)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", neg.display())))?;
    let all = corpus::combine(positives, negatives);
    let (records, stats) = if dedup {
        corpus::deduplicate(&all)
    } else {
        let stats = CorpusStats::undeduplicated(&all);
        (all, stats)
    };

    fs::create_dir_all(dir).map_err(write_err(dir))?;
    let rec_path = dir.join("records.tsv");
    let file = File::create(&rec_path).map_err(write_err(&rec_path))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        let text = r.text.replace(['\t', '\n', '\r'], " ");
        writeln!(w, "{}\t{}\t{}", r.label.as_str(), r.pmid, text).map_err(write_err(&rec_path))?;
    }
    w.flush().map_err(write_err(&rec_path))?;

    let stats_path = dir.join("stats.json");
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    fs::write(&stats_path, format!("{json}\n")).map_err(write_err(&stats_path))?;
    writeln!(out, "{json}").map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

pub fn cmd_embeddings_info(
    emb: &Path,
    format: EmbeddingFormat,
    vocab: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let vocab = match vocab {
        Some(p) => Some(Vocabulary::read_tsv(open(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let keep: HashSet<String> = vocab
        .iter()
        .flat_map(|v| v.content_tokens().map(|(_, t)| t.to_string()))
        .collect();
    let file = File::open(emb).map_err(|e| CliError::Usage(format!("{}: {e}", emb.display())))?;
    let lex = embeddings::load(format, file, Some(&keep))
        .map_err(|e| CliError::Usage(format!("{}: {e}", emb.display())))?;
    let io = |e: io::Error| CliError::Runtime(e.to_string());
    writeln!(out, "dim\t{}", lex.dim()).map_err(io)?;
    writeln!(out, "entries\t{}", lex.entries_read).map_err(io)?;
    if lex.skipped_lines > 0 {
        writeln!(out, "skipped\t{}", lex.skipped_lines).map_err(io)?;
    }
    if let Some(v) = vocab {
        writeln!(out, "coverage\t{:.6}", lex.coverage(&v)).map_err(io)?;
    }
    Ok(())
}

pub fn cmd_cv(args: &CvArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let base = match &args.config {
        Some(p) => ExperimentConfig::from_json_file(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    let config = args.apply(base);
    let options = RunOptions {
        jobs: args.jobs,
        checkpoint_dir: args.checkpoint_dir.clone(),
        log_dir: args.log_dir.clone(),
    };
    let report = experiment::run_experiment(&config, &options).map_err(|e| {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    })?;
    let label = args.label.clone().unwrap_or_else(|| config.architecture.as_str().to_string());
    experiment::write_report(&report, &args.out, &label).map_err(|e| CliError::Runtime(e.to_string()))?;
    let table = experiment::render_table(&[&report.mean], &[&label]);
    write!(out, "{table}").map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

pub fn cmd_score(checkpoint: &Path, input: &Path, threshold: Option<f64>, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = read_checkpoint(open(checkpoint)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", checkpoint.display())))?;
    let vocab = Vocabulary::from_tokens(ckpt.meta.vocabulary.clone())
        .map_err(|e| CliError::Usage(format!("{}: {e}", checkpoint.display())))?;
    if vocab.len() != ckpt.params.embedding.rows {
        return Err(CliError::Usage(format!(
            "{}: vocabulary has {} entries but the embedding has {} rows",
            checkpoint.display(),
            vocab.len(),
            ckpt.params.embedding.rows
        )));
    }
    let tau = threshold.unwrap_or(ckpt.meta.threshold);
    let reader = open(input)?;
    for line in reader.lines() {
        let line = line.map_err(|e| CliError::Usage(format!("{}: {e}", input.display())))?;
        let tokens = textprep::prepare(&line, ckpt.meta.lowercase);
        let encoded = textprep::encode(&tokens, &vocab, ckpt.meta.max_len);
        let (score, _) = model_forward(&encoded, &ckpt.params, ForwardMode::Infer)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let label = if score >= tau { "positive" } else { "negative" };
        writeln!(out, "{score:.9}\t{label}").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

//! Pretrained word vectors: GloVe text and word2vec binary readers/writers,
//! and assembly of the initial embedding matrix.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, Read, Write};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::textprep::Vocabulary;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("empty embedding stream, cannot infer the vector width")]
    Empty,
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("invalid word2vec header: {0}")]
    BadHeader(String),
    #[error("truncated word2vec stream: expected {expected} entries, received {received}")]
    Truncated { expected: usize, received: usize },
    #[error("token {0:?} is in the vocabulary but not in the pretrained lexicon")]
    MissingToken(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Token to vector map of fixed width.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedLexicon {
    dim: usize,
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    values: Vec<f64>,
    /// Lines skipped because the token contained spaces.
    pub skipped_lines: usize,
    /// Repeated tokens ignored after their first occurrence.
    pub duplicate_tokens: usize,
    /// Well-formed entries seen in the source, including ones not kept.
    pub entries_read: usize,
}

impl PretrainedLexicon {
    pub fn new(dim: usize) -> Self {
        PretrainedLexicon {
            dim,
            index: HashMap::new(),
            tokens: Vec::new(),
            values: Vec::new(),
            skipped_lines: 0,
            duplicate_tokens: 0,
            entries_read: 0,
        }
    }

    /// Inserts a vector unless the token is already present. Returns whether
    /// it was inserted.
    pub fn insert(&mut self, token: &str, vector: &[f64]) -> bool {
        assert_eq!(vector.len(), self.dim, "vector width mismatch");
        self.entries_read += 1;
        if self.index.contains_key(token) {
            self.duplicate_tokens += 1;
            return false;
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.values.extend_from_slice(vector);
        true
    }

    /// Seeded uniform(-0.25, 0.25) vectors for the given tokens. Each vector
    /// depends only on the token and the seed.
    pub fn random<'a, I>(tokens: I, dim: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut lex = PretrainedLexicon::new(dim);
        let mut buf = vec![0.0; dim];
        for tok in tokens {
            if lex.contains(tok) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tok.as_bytes()));
            for v in buf.iter_mut() {
                *v = rng.gen_range(-0.25..0.25);
            }
            lex.insert(tok, &buf);
        }
        lex
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tokens
            .iter()
            .enumerate()
            .map(move |(i, t)| (t.as_str(), &self.values[i * self.dim..(i + 1) * self.dim]))
    }

    /// Fraction of the vocabulary's content tokens present here.
    pub fn coverage(&self, vocab: &Vocabulary) -> f64 {
        let total = vocab.content_len();
        if total == 0 {
            return 0.0;
        }
        let hit = vocab.content_tokens().filter(|(_, t)| self.contains(t)).count();
        hit as f64 / total as f64
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Reads GloVe text (`token v1 ... vM` per line). The width comes from the
/// first line. With `keep`, only listed tokens are materialized.
pub fn load_glove_text<R: BufRead>(
    reader: R,
    keep: Option<&HashSet<String>>,
) -> Result<PretrainedLexicon, EmbeddingError> {
    let mut lex: Option<PretrainedLexicon> = None;
    let mut buf = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
        let lex = lex.get_or_insert_with(|| PretrainedLexicon::new(fields.len().saturating_sub(1)));
        let dim = lex.dim;
        if dim == 0 {
            return Err(EmbeddingError::BadLine {
                line: line_no,
                reason: "no numeric fields".into(),
            });
        }
        if fields.len() < dim + 1 {
            return Err(EmbeddingError::BadLine {
                line: line_no,
                reason: format!("expected {dim} values, found {}", fields.len() - 1),
            });
        }
        let split = fields.len() - dim;
        if split > 1 {
            // Either a token with internal spaces or too many numbers.
            if fields[1..split].iter().all(|f| f.parse::<f64>().is_ok()) {
                return Err(EmbeddingError::BadLine {
                    line: line_no,
                    reason: format!("expected {dim} values, found {}", fields.len() - 1),
                });
            }
            warn!("glove line {line_no}: token contains spaces, skipped");
            lex.skipped_lines += 1;
            continue;
        }
        let token = fields[0];
        if keep.is_some_and(|k| !k.contains(token)) {
            for f in &fields[1..] {
                if f.parse::<f64>().is_err() {
                    return Err(EmbeddingError::BadLine {
                        line: line_no,
                        reason: format!("non-numeric value {f:?}"),
                    });
                }
            }
            lex.entries_read += 1;
            continue;
        }
        buf.clear();
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| EmbeddingError::BadLine {
                line: line_no,
                reason: format!("non-numeric value {f:?}"),
            })?;
            buf.push(v);
        }
        lex.insert(token, &buf);
    }
    let lex = lex.ok_or(EmbeddingError::Empty)?;
    if lex.duplicate_tokens > 0 {
        warn!("glove: {} duplicate tokens ignored", lex.duplicate_tokens);
    }
    Ok(lex)
}

/// Writes GloVe text using the shortest decimal that round-trips each value.
pub fn write_glove_text<W: Write>(lex: &PretrainedLexicon, mut w: W) -> io::Result<()> {
    for (tok, vec) in lex.iter() {
        write!(w, "{tok}")?;
        for v in vec {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn read_until_delim<R: BufRead>(reader: &mut R, delim: u8, out: &mut Vec<u8>) -> io::Result<bool> {
    out.clear();
    let n = reader.read_until(delim, out)?;
    if n == 0 {
        return Ok(false);
    }
    if out.last() == Some(&delim) {
        out.pop();
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Reads the word2vec binary layout: an ASCII `count dim\n` header, then per
/// entry the token, a space and `dim` little-endian f32 values, optionally
/// followed by a newline.
pub fn load_word2vec_binary<R: BufRead>(
    mut reader: R,
    keep: Option<&HashSet<String>>,
) -> Result<PretrainedLexicon, EmbeddingError> {
    let mut header = Vec::new();
    if !read_until_delim(&mut reader, b'\n', &mut header)? {
        return Err(EmbeddingError::BadHeader("missing header line".into()));
    }
    let header = String::from_utf8_lossy(&header);
    let nums: Vec<&str> = header.split_whitespace().collect();
    let parse = |s: &str| s.parse::<usize>().ok();
    let (count, dim) = match nums.as_slice() {
        [c, d] => match (parse(c), parse(d)) {
            (Some(c), Some(d)) if d > 0 => (c, d),
            _ => return Err(EmbeddingError::BadHeader(header.trim().to_string())),
        },
        _ => return Err(EmbeddingError::BadHeader(header.trim().to_string())),
    };

    let mut lex = PretrainedLexicon::new(dim);
    let mut token = Vec::new();
    let mut raw = vec![0u8; dim * 4];
    let mut vector = vec![0.0f64; dim];
    let truncated = |received| EmbeddingError::Truncated {
        expected: count,
        received,
    };
    for received in 0..count {
        // skip the optional newline left by the previous entry
        loop {
            let buf = reader.fill_buf()?;
            match buf.first() {
                Some(b'\n') => reader.consume(1),
                Some(_) => break,
                None => return Err(truncated(received)),
            }
        }
        if !read_until_delim(&mut reader, b' ', &mut token)? {
            return Err(truncated(received));
        }
        reader.read_exact(&mut raw).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => truncated(received),
            _ => EmbeddingError::Io(e),
        })?;
        let tok = String::from_utf8_lossy(&token);
        if keep.is_some_and(|k| !k.contains(tok.as_ref())) {
            lex.entries_read += 1;
            continue;
        }
        for (v, chunk) in vector.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
        lex.insert(&tok, &vector);
    }
    if lex.duplicate_tokens > 0 {
        warn!("word2vec: {} duplicate tokens ignored", lex.duplicate_tokens);
    }
    Ok(lex)
}

/// Writes the word2vec binary layout, narrowing values to f32.
pub fn write_word2vec_binary<W: Write>(lex: &PretrainedLexicon, mut w: W) -> io::Result<()> {
    writeln!(w, "{} {}", lex.len(), lex.dim())?;
    for (tok, vec) in lex.iter() {
        w.write_all(tok.as_bytes())?;
        w.write_all(b" ")?;
        for &v in vec {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFormat {
    GloveText,
    Word2vecBinary,
}

impl std::str::FromStr for EmbeddingFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "glove-text" => Ok(EmbeddingFormat::GloveText),
            "word2vec-binary" => Ok(EmbeddingFormat::Word2vecBinary),
            other => Err(format!("unknown embedding format {other:?}")),
        }
    }
}

pub fn load<R: Read>(
    format: EmbeddingFormat,
    reader: R,
    keep: Option<&HashSet<String>>,
) -> Result<PretrainedLexicon, EmbeddingError> {
    let reader = io::BufReader::with_capacity(1 << 16, reader);
    match format {
        EmbeddingFormat::GloveText => load_glove_text(reader, keep),
        EmbeddingFormat::Word2vecBinary => load_word2vec_binary(reader, keep),
    }
}

/// Trainable `V x M` embedding table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// PAD and UNK rows are zero; every content row copies its pretrained vector.
pub fn assemble_matrix(
    vocab: &Vocabulary,
    lexicon: &PretrainedLexicon,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut m = EmbeddingMatrix::zeros(vocab.len(), lexicon.dim());
    for (i, tok) in vocab.content_tokens() {
        let v = lexicon
            .get(tok)
            .ok_or_else(|| EmbeddingError::MissingToken(tok.to_string()))?;
        m.row_mut(i).copy_from_slice(v);
    }
    Ok(m)
}

//! Sentence cleaning, tokenization, frequency-capped vocabulary and
//! fixed-length index encoding.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::sync::OnceLock;

use regex::Regex;

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const DEFAULT_MAX_CONTENT: usize = 20_000;

fn clitic_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(n't|'s|'ve|'re|'d|'ll)").expect("valid clitic regex"))
}

/// Splits contraction clitics off their host word, replaces every
/// non-ASCII-letter with a space and collapses whitespace. Case is kept.
pub fn clean_text(raw: &str) -> String {
    let separated = clitic_pattern().replace_all(raw, " $1");
    let mut out = String::with_capacity(separated.len());
    let mut pending_space = false;
    for ch in separated.chars() {
        if ch.is_ascii_alphabetic() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

pub fn tokenize(cleaned: &str) -> Vec<&str> {
    cleaned.split(' ').filter(|t| !t.is_empty()).collect()
}

/// Cleaning plus optional lowercasing, returning owned tokens.
pub fn prepare(raw: &str, lowercase: bool) -> Vec<String> {
    let cleaned = clean_text(raw);
    let cleaned = if lowercase { cleaned.to_ascii_lowercase() } else { cleaned };
    tokenize(&cleaned).into_iter().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    max_content_size: usize,
}

impl Vocabulary {
    /// A vocabulary holding only the reserved PAD and UNK symbols.
    pub fn reserved_only(max_content_size: usize) -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocabulary {
            index,
            tokens,
            max_content_size,
        }
    }

    /// Ranks tokens by descending frequency (ties: ascending byte order),
    /// keeps the top `max_content_size`, then drops any the pretrained lexicon
    /// does not know. Survivors get indices 2, 3, ... in rank order.
    pub fn build<'a, I, S, F>(token_lists: I, in_pretrained: F, max_content_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
        F: Fn(&str) -> bool,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for list in token_lists {
            for tok in list {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_content_size);

        let mut vocab = Vocabulary::reserved_only(max_content_size);
        for (tok, _) in ranked {
            if in_pretrained(tok) {
                vocab.push(tok.to_string());
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from tokens listed in index order, the reserved
    /// symbols first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < 2 || tokens[PAD_INDEX] != PAD_TOKEN || tokens[UNK_INDEX] != UNK_TOKEN {
            return Err("token list must start with the PAD and UNK symbols".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocabulary {
            max_content_size: tokens.len() - 2,
            index,
            tokens,
        })
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn max_content_size(&self) -> usize {
        self.max_content_size
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// All tokens in index order, reserved symbols included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content tokens (indices 2 and up) in index order.
    pub fn content_tokens(&self) -> impl Iterator<Item = (usize, &str)> {
        self.tokens.iter().enumerate().skip(2).map(|(i, t)| (i, t.as_str()))
    }

    /// Writes `token<TAB>index` lines in index order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> io::Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, idx) = line.rsplit_once('\t').ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: missing tab", n + 1))
            })?;
            let idx: usize = idx.trim().parse().map_err(|_| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: bad index", n + 1))
            })?;
            rows.push((idx, tok.to_string()));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "indices are not dense"));
        }
        Vocabulary::from_tokens(rows.into_iter().map(|r| r.1).collect())
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub indices: Vec<usize>,
    pub true_length: usize,
}

/// Maps tokens to indices, truncating or right-padding to `max_len`. A
/// sentence without tokens becomes a lone UNK.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> EncodedSentence {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut indices: Vec<usize> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.lookup(t.as_ref()))
        .collect();
    if indices.is_empty() {
        indices.push(UNK_INDEX);
    }
    let true_length = indices.len();
    indices.resize(max_len, PAD_INDEX);
    EncodedSentence {
        indices,
        true_length,
    }
}

//! ADE corpus ingestion: parsing of the `DRUG-AE.rel` / `ADE-NEG.txt`
//! distribution files, de-duplication and stratified fold assignment.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("read error at line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid fold configuration: {0}")]
    InvalidFolds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_target(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" | "1" => Ok(Label::Positive),
            "negative" | "0" => Ok(Label::Negative),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// One labelled sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: usize,
    pub pmid: String,
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub raw_positive_lines: usize,
    pub unique_positive: usize,
    pub negative: usize,
    pub conflicts_resolved: usize,
}

impl CorpusStats {
    /// Stats for a record list that is used as-is (no de-duplication).
    pub fn undeduplicated(records: &[SentenceRecord]) -> Self {
        let positive = records.iter().filter(|r| r.label.is_positive()).count();
        CorpusStats {
            raw_positive_lines: positive,
            unique_positive: positive,
            negative: records.len() - positive,
            conflicts_resolved: 0,
        }
    }
}

/// Train/dev/test partition for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<usize>,
    pub dev_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

fn read_lines<R: BufRead>(
    reader: R,
) -> impl Iterator<Item = Result<(usize, String), CorpusError>> {
    reader.lines().enumerate().map(|(i, line)| {
        line.map(|l| (i + 1, l))
            .map_err(|source| CorpusError::Io { line: i + 1, source })
    })
}

/// Parses `DRUG-AE.rel` (`PMID|sentence|AE|begin|end|drug|begin|end`).
///
/// Blank lines are skipped. Entity spans are ignored. Ids are assigned in line
/// order starting at 0.
pub fn parse_positive_file<R: BufRead>(reader: R) -> Result<Vec<SentenceRecord>, CorpusError> {
    let mut out = Vec::new();
    for item in read_lines(reader) {
        let (line_no, line) = item?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('|');
        let pmid = fields.next().unwrap_or_default().trim();
        let text = fields.next().ok_or_else(|| CorpusError::Malformed {
            line: line_no,
            reason: "expected at least 2 pipe-separated fields".into(),
        })?;
        if text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: "empty sentence".into(),
            });
        }
        out.push(SentenceRecord {
            id: out.len(),
            pmid: pmid.to_string(),
            text: text.to_string(),
            label: Label::Positive,
        });
    }
    Ok(out)
}

/// Parses `ADE-NEG.txt` (`PMID NEG sentence`).
pub fn parse_negative_file<R: BufRead>(reader: R) -> Result<Vec<SentenceRecord>, CorpusError> {
    let mut out = Vec::new();
    for item in read_lines(reader) {
        let (line_no, line) = item?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rest = line.trim_start();
        let (pmid, rest) = rest
            .split_once(char::is_whitespace)
            .unwrap_or((rest, ""));
        let rest = rest.trim_start();
        let (marker, text) = rest
            .split_once(char::is_whitespace)
            .unwrap_or((rest, ""));
        if marker != "NEG" {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: format!("expected NEG marker in field 2, found {marker:?}"),
            });
        }
        let text = text.trim_start();
        if text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: "empty sentence".into(),
            });
        }
        out.push(SentenceRecord {
            id: out.len(),
            pmid: pmid.to_string(),
            text: text.to_string(),
            label: Label::Negative,
        });
    }
    Ok(out)
}

/// Concatenates positives then negatives and renumbers ids from 0.
pub fn combine(positives: Vec<SentenceRecord>, negatives: Vec<SentenceRecord>) -> Vec<SentenceRecord> {
    let mut all = positives;
    all.extend(negatives);
    renumber(&mut all);
    all
}

fn renumber(records: &mut [SentenceRecord]) {
    for (i, r) in records.iter_mut().enumerate() {
        r.id = i;
    }
}

/// Collapses records with identical raw text.
///
/// The first occurrence keeps its position and PMID. If the same text is seen
/// with both labels the survivor is positive and `conflicts_resolved` counts
/// the sentence once. Output ids are renumbered from 0.
pub fn deduplicate(records: &[SentenceRecord]) -> (Vec<SentenceRecord>, CorpusStats) {
    let mut out: Vec<SentenceRecord> = Vec::with_capacity(records.len());
    let mut seen: HashMap<&str, usize> = HashMap::with_capacity(records.len());
    let mut conflicted = vec![false; 0];
    let mut stats = CorpusStats::default();

    for r in records {
        if r.label.is_positive() {
            stats.raw_positive_lines += 1;
        }
        match seen.get(r.text.as_str()) {
            Some(&slot) => {
                if out[slot].label != r.label && !conflicted[slot] {
                    conflicted[slot] = true;
                    stats.conflicts_resolved += 1;
                }
                if r.label.is_positive() {
                    out[slot].label = Label::Positive;
                }
            }
            None => {
                seen.insert(r.text.as_str(), out.len());
                out.push(r.clone());
                conflicted.push(false);
            }
        }
    }
    renumber(&mut out);
    stats.unique_positive = out.iter().filter(|r| r.label.is_positive()).count();
    stats.negative = out.len() - stats.unique_positive;
    (out, stats)
}

/// Assigns records to `k` cross-validation folds.
///
/// With `stratify`, each class is shuffled separately and dealt round-robin
/// into the test buckets, continuing the bucket cursor from one class to the
/// next; the dev set of each fold is a per-class `dev_fraction` sample of the
/// remaining records. Without it the same procedure runs on the pooled ids.
pub fn make_folds(
    records: &[SentenceRecord],
    k: usize,
    dev_fraction: f64,
    seed: u64,
    stratify: bool,
) -> Result<Vec<FoldSplit>, CorpusError> {
    if k < 2 {
        return Err(CorpusError::InvalidFolds(format!("k must be at least 2, got {k}")));
    }
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(CorpusError::InvalidFolds(format!(
            "dev_fraction must lie in (0, 1), got {dev_fraction}"
        )));
    }
    if records.is_empty() {
        return Err(CorpusError::InvalidFolds("no records".into()));
    }

    let groups: Vec<Vec<usize>> = if stratify {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for r in records {
            if r.label.is_positive() {
                pos.push(r.id);
            } else {
                neg.push(r.id);
            }
        }
        for (name, group) in [("positive", &pos), ("negative", &neg)] {
            if group.len() < k {
                return Err(CorpusError::InvalidFolds(format!(
                    "{name} class has {} records, fewer than k={k}",
                    group.len()
                )));
            }
        }
        vec![pos, neg]
    } else {
        if records.len() < k {
            return Err(CorpusError::InvalidFolds(format!(
                "{} records, fewer than k={k}",
                records.len()
            )));
        }
        vec![records.iter().map(|r| r.id).collect()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // bucket_of[group][bucket] -> ids in that group assigned to the bucket
    let mut buckets: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); k]; groups.len()];
    let mut cursor = 0;
    for (g, group) in groups.iter().enumerate() {
        let mut ids = group.clone();
        ids.shuffle(&mut rng);
        for id in ids {
            buckets[g][cursor].push(id);
            cursor = (cursor + 1) % k;
        }
    }

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut test_ids = Vec::new();
        let mut dev_ids = Vec::new();
        let mut train_ids = Vec::new();
        for group_buckets in &buckets {
            test_ids.extend_from_slice(&group_buckets[fold]);
            let mut rest: Vec<usize> = group_buckets
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != fold)
                .flat_map(|(_, ids)| ids.iter().copied())
                .collect();
            rest.sort_unstable();
            rest.shuffle(&mut rng);
            let n_dev = dev_count(rest.len(), dev_fraction);
            dev_ids.extend_from_slice(&rest[..n_dev]);
            train_ids.extend_from_slice(&rest[n_dev..]);
        }
        test_ids.sort_unstable();
        dev_ids.sort_unstable();
        train_ids.sort_unstable();
        folds.push(FoldSplit {
            fold_index: fold,
            train_ids,
            dev_ids,
            test_ids,
        });
    }
    Ok(folds)
}

// Rounded share, but never empty and never the whole group when it has 2+ members.
fn dev_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let n_dev = (n as f64 * fraction).round() as usize;
    n_dev.clamp(1, n.saturating_sub(1).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rec(id: usize, text: &str, label: Label) -> SentenceRecord {
        SentenceRecord {
            id,
            pmid: id.to_string(),
            text: text.to_string(),
            label,
        }
    }

    #[test]
    fn parses_positive_line() {
        let recs = parse_positive_file("123|Drug X caused rash.|rash|10|14|Drug X|0|6\n".as_bytes())
            .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].pmid, "123");
        assert_eq!(recs[0].text, "Drug X caused rash.");
        assert_eq!(recs[0].label, Label::Positive);
    }

    #[test]
    fn positive_file_keeps_line_order() {
        let text = "1|a b|x\n2|c d|y\n3|e f|z\n";
        let recs = parse_positive_file(text.as_bytes()).unwrap();
        let texts: Vec<_> = recs.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, ["a b", "c d", "e f"]);
        assert_eq!(recs.iter().map(|r| r.id).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn empty_files_give_empty_lists() {
        assert!(parse_positive_file("".as_bytes()).unwrap().is_empty());
        assert!(parse_negative_file("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn malformed_positive_line_reports_line_number() {
        let err = parse_positive_file("1|ok|x\nno pipes here\n".as_bytes()).unwrap_err();
        match err {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_negative_line() {
        let recs = parse_negative_file("99 NEG No adverse events occurred.\n".as_bytes()).unwrap();
        assert_eq!(recs[0].pmid, "99");
        assert_eq!(recs[0].text, "No adverse events occurred.");
        assert_eq!(recs[0].label, Label::Negative);
    }

    #[test]
    fn negative_line_without_marker_fails() {
        let err = parse_negative_file("1 NEG fine\n2 POS not fine\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
    }

    #[test]
    fn dedup_hand_trace() {
        let input = vec![
            rec(0, "s1", Label::Positive),
            rec(1, "s1", Label::Positive),
            rec(2, "s2", Label::Negative),
            rec(3, "s2", Label::Positive),
        ];
        let (out, stats) = deduplicate(&input);
        let got: Vec<_> = out.iter().map(|r| (r.text.as_str(), r.label)).collect();
        assert_eq!(got, [("s1", Label::Positive), ("s2", Label::Positive)]);
        assert_eq!(stats.conflicts_resolved, 1);
        assert_eq!(stats.raw_positive_lines, 3);
        assert_eq!(stats.unique_positive, 2);
        assert_eq!(stats.negative, 0);
        assert_eq!(out[1].id, 1);
    }

    #[test]
    fn dedup_identity_without_duplicates() {
        let input = vec![rec(0, "a", Label::Positive), rec(1, "b", Label::Negative)];
        let (out, stats) = deduplicate(&input);
        assert_eq!(out, input);
        assert_eq!(stats.conflicts_resolved, 0);
    }

    #[test]
    fn twenty_records_ten_folds_one_of_each_class() {
        let records: Vec<_> = (0..20)
            .map(|i| rec(i, &format!("s{i}"), if i < 10 { Label::Positive } else { Label::Negative }))
            .collect();
        let folds = make_folds(&records, 10, 0.1, 7, true).unwrap();
        for f in &folds {
            let pos = f.test_ids.iter().filter(|&&i| i < 10).count();
            assert_eq!((pos, f.test_ids.len() - pos), (1, 1));
        }
        assert_eq!(folds, make_folds(&records, 10, 0.1, 7, true).unwrap());
    }

    #[test]
    fn fold_sizes_at_corpus_scale() {
        let records: Vec<_> = (0..20960)
            .map(|i| rec(i, "", if i < 4272 { Label::Positive } else { Label::Negative }))
            .collect();
        let folds = make_folds(&records, 10, 0.1, 1, true).unwrap();
        for f in &folds {
            assert!((2095..=2097).contains(&f.test_ids.len()), "{}", f.test_ids.len());
        }
    }

    #[test]
    fn too_small_class_is_rejected() {
        let records: Vec<_> = (0..12)
            .map(|i| rec(i, "", if i < 3 { Label::Positive } else { Label::Negative }))
            .collect();
        assert!(make_folds(&records, 5, 0.1, 0, true).is_err());
        assert!(make_folds(&records, 1, 0.1, 0, true).is_err());
        assert!(make_folds(&records, 2, 1.0, 0, true).is_err());
    }

    #[test]
    fn dev_sets_are_stratified() {
        let records: Vec<_> = (0..200)
            .map(|i| rec(i, "", if i % 4 == 0 { Label::Positive } else { Label::Negative }))
            .collect();
        for f in make_folds(&records, 10, 0.1, 3, true).unwrap() {
            let pos = f.dev_ids.iter().filter(|&&i| i % 4 == 0).count();
            // 45 positive and 135 negative non-test records per fold
            assert_eq!(pos, 5);
            assert_eq!(f.dev_ids.len(), 5 + 14);
            let all: HashSet<_> = f.train_ids.iter().chain(&f.dev_ids).chain(&f.test_ids).collect();
            assert_eq!(all.len(), 200);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn records_strategy() -> impl Strategy<Value = Vec<SentenceRecord>> {
            prop::collection::vec((0usize..6, any::<bool>()), 0..40).prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (t, pos))| {
                        rec(i, &format!("t{t}"), if pos { Label::Positive } else { Label::Negative })
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn dedup_is_idempotent(records in records_strategy()) {
                let (once, _) = deduplicate(&records);
                let (twice, _) = deduplicate(&once);
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn dedup_upgrades_only_with_positive_twin(records in records_strategy()) {
                let (out, stats) = deduplicate(&records);
                prop_assert!(stats.unique_positive <= stats.raw_positive_lines);
                for r in &out {
                    if r.label.is_positive() {
                        prop_assert!(records.iter().any(|o| o.text == r.text && o.label.is_positive()));
                    }
                }
            }

            #[test]
            fn folds_partition_ids(
                n_pos in 3usize..40,
                n_neg in 3usize..60,
                k in 2usize..4,
                seed in any::<u64>(),
            ) {
                let records: Vec<_> = (0..n_pos + n_neg)
                    .map(|i| rec(i, "", if i < n_pos { Label::Positive } else { Label::Negative }))
                    .collect();
                let folds = make_folds(&records, k, 0.1, seed, true).unwrap();
                let mut tested = vec![0usize; records.len()];
                let global = n_pos as f64 / records.len() as f64;
                for f in &folds {
                    let mut seen = vec![false; records.len()];
                    for &id in f.train_ids.iter().chain(&f.dev_ids).chain(&f.test_ids) {
                        prop_assert!(!seen[id]);
                        seen[id] = true;
                    }
                    prop_assert!(seen.iter().all(|&s| s));
                    for &id in &f.test_ids {
                        tested[id] += 1;
                    }
                    let pos = f.test_ids.iter().filter(|&&i| i < n_pos).count() as f64;
                    prop_assert!((pos - global * f.test_ids.len() as f64).abs() <= 1.0 + 1e-9);
                }
                prop_assert!(tested.iter().all(|&c| c == 1));
            }
        }
    }
}

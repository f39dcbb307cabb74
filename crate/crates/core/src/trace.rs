//! The attention-trace interchange format.
//!
//! A trace file holds one JSON object per line, each describing a single
//! classified example: its subword tokens, the token-to-word map, the
//! final-layer attention emitted by and received by the aggregation token in
//! every head, the gold and predicted labels, and the human rationales.
//! Attention values are 32-bit floats written in shortest round-trip decimal
//! form, so `load_traces(write_traces(x)) == x` bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Invariant, Result};
use crate::jsonl;

/// Absolute per-row tolerance on the softmax row sums.
pub const ROW_SUM_TOLERANCE: f32 = 1e-3;

/// Allowed difference between the two stored copies of the aggregation
/// token's self-attention.
pub const SELF_ATTENTION_TOLERANCE: f32 = 1e-6;

/// One annotator's word-level rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorRationale {
    pub annotator_id: String,
    #[serde(with = "jsonl::bits")]
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub example_id: String,
    pub dataset_id: String,
    pub tokens: Vec<String>,
    pub cls_index: usize,
    pub word_ids: Vec<Option<usize>>,
    pub num_heads: usize,
    /// `[head][token]`: attention emitted by the aggregation token.
    pub attn_task_to_token: Vec<Vec<f32>>,
    /// `[head][token]`: attention emitted by each token toward the
    /// aggregation token.
    pub attn_token_to_task: Vec<Vec<f32>>,
    pub label_gold: i64,
    pub label_pred: i64,
    pub rationales: Vec<AnnotatorRationale>,
}

impl AttentionTrace {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Number of words, `1 + max word id`.
    pub fn num_words(&self) -> usize {
        self.word_ids
            .iter()
            .flatten()
            .max()
            .map_or(0, |&w| w + 1)
    }

    /// `(token index, word index)` for every token that maps to a word.
    pub fn candidate_tokens(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.word_ids
            .iter()
            .enumerate()
            .filter_map(|(j, w)| w.map(|w| (j, w)))
    }

    pub fn is_correct(&self) -> bool {
        self.label_pred == self.label_gold
    }

    /// Surface words rebuilt from the subword tokens. WordPiece continuation
    /// markers (`##`) are stripped.
    pub fn words(&self) -> Vec<String> {
        let mut words = vec![String::new(); self.num_words()];
        for (j, w) in self.candidate_tokens() {
            let tok = &self.tokens[j];
            words[w].push_str(tok.strip_prefix("##").unwrap_or(tok));
        }
        words
    }

    pub fn rationale(&self, annotator_id: &str) -> Option<&AnnotatorRationale> {
        self.rationales
            .iter()
            .find(|r| r.annotator_id == annotator_id)
    }

    /// Checks shapes first, then every named invariant.
    pub fn validate(&self) -> Result<()> {
        let id = self.example_id.as_str();
        let t = self.tokens.len();
        let h = self.num_heads;
        let dim = |detail: String| Error::Dimension {
            example_id: id.to_owned(),
            detail,
        };

        if h == 0 {
            return Err(dim("num_heads must be at least 1".into()));
        }
        if self.word_ids.len() != t {
            return Err(dim(format!(
                "word_ids has {} entries for {t} tokens",
                self.word_ids.len()
            )));
        }
        for (name, m) in [
            ("attn_task_to_token", &self.attn_task_to_token),
            ("attn_token_to_task", &self.attn_token_to_task),
        ] {
            if m.len() != h {
                return Err(dim(format!("{name} has {} rows for {h} heads", m.len())));
            }
            if let Some((row, r)) = m.iter().enumerate().find(|(_, r)| r.len() != t) {
                return Err(dim(format!(
                    "{name}[{row}] has {} columns for {t} tokens",
                    r.len()
                )));
            }
        }

        if self.cls_index >= t {
            return Err(Error::validation(
                id,
                Invariant::ClsIndexRange,
                format!("cls_index {} with {t} tokens", self.cls_index),
            ));
        }
        if self.word_ids[self.cls_index].is_some() {
            return Err(Error::validation(
                id,
                Invariant::ClsWordIdNull,
                format!("word_ids[{}] is not null", self.cls_index),
            ));
        }

        for (name, m) in [
            ("attn_task_to_token", &self.attn_task_to_token),
            ("attn_token_to_task", &self.attn_token_to_task),
        ] {
            for (hd, row) in m.iter().enumerate() {
                if let Some((j, v)) = row
                    .iter()
                    .enumerate()
                    .find(|(_, v)| !(0.0..=1.0).contains(*v))
                {
                    return Err(Error::validation(
                        id,
                        Invariant::AttentionRange,
                        format!("{name}[{hd}][{j}] = {v}"),
                    ));
                }
            }
        }
        for (hd, row) in self.attn_task_to_token.iter().enumerate() {
            let sum: f32 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::validation(
                    id,
                    Invariant::RowStochastic,
                    format!("attn_task_to_token[{hd}] sums to {sum}"),
                ));
            }
        }
        let c = self.cls_index;
        for hd in 0..h {
            let a = self.attn_task_to_token[hd][c];
            let b = self.attn_token_to_task[hd][c];
            if (a - b).abs() > SELF_ATTENTION_TOLERANCE {
                return Err(Error::validation(
                    id,
                    Invariant::ClsSelfAttention,
                    format!("head {hd}: task_to_token {a} vs token_to_task {b}"),
                ));
            }
        }

        let mut next = 0usize;
        let mut last: Option<usize> = None;
        for (j, w) in self.word_ids.iter().enumerate() {
            let Some(w) = *w else { continue };
            match last {
                Some(prev) if w < prev => {
                    return Err(Error::validation(
                        id,
                        Invariant::WordIdsMonotone,
                        format!("word_ids[{j}] = {w} after {prev}"),
                    ))
                }
                Some(prev) if w == prev => {}
                _ => {
                    if w != next {
                        return Err(Error::validation(
                            id,
                            Invariant::WordIdGap,
                            format!("word_ids[{j}] = {w}, expected {next}"),
                        ));
                    }
                    next += 1;
                }
            }
            last = Some(w);
        }
        if next == 0 {
            return Err(Error::validation(
                id,
                Invariant::NoWords,
                "no token maps to a word",
            ));
        }

        for r in &self.rationales {
            if r.mask.len() != next {
                return Err(Error::validation(
                    id,
                    Invariant::RationaleLength,
                    format!(
                        "annotator `{}` has {} entries for {next} words",
                        r.annotator_id,
                        r.mask.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Loads and validates every trace in a file, preserving order.
pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<AttentionTrace>> {
    let path = path.as_ref();
    let records: Vec<(usize, AttentionTrace)> = jsonl::read(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (_, trace) in records {
        trace.validate()?;
        if !seen.insert(trace.example_id.clone()) {
            return Err(Error::validation(
                &trace.example_id,
                Invariant::UniqueExampleId,
                "duplicate example_id in file",
            ));
        }
        out.push(trace);
    }
    Ok(out)
}

/// Validates then writes `traces`, one per line.
pub fn write_traces(traces: &[AttentionTrace], path: impl AsRef<Path>) -> Result<()> {
    let mut seen = HashSet::new();
    for t in traces {
        t.validate()?;
        if !seen.insert(t.example_id.as_str()) {
            return Err(Error::validation(
                &t.example_id,
                Invariant::UniqueExampleId,
                "duplicate example_id",
            ));
        }
    }
    jsonl::write(path.as_ref(), traces)
}

/// Keeps the traces whose prediction matches the gold label.
pub fn filter_correct(traces: Vec<AttentionTrace>) -> Vec<AttentionTrace> {
    traces.into_iter().filter(AttentionTrace::is_correct).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Per-dataset metadata plus the trace files of each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    /// Average human rationale length, used for top-K binarization.
    pub avg_rationale_k: usize,
    /// Token-level positive rate of the training rationales.
    pub positive_rate: f64,
    #[serde(default)]
    pub splits: BTreeMap<Split, Vec<PathBuf>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.avg_rationale_k < 1 {
            return Err(Error::validation(
                &self.dataset_id,
                Invariant::ManifestK,
                format!("avg_rationale_k = {}", self.avg_rationale_k),
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(Error::validation(
                &self.dataset_id,
                Invariant::ManifestPositiveRate,
                format!("positive_rate = {}", self.positive_rate),
            ));
        }
        Ok(())
    }

    pub fn trace_paths(&self, split: Split) -> &[PathBuf] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    /// Loads every trace file listed for `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<AttentionTrace>> {
        let mut out = Vec::new();
        for p in self.trace_paths(split) {
            out.extend(load_traces(p)?);
        }
        Ok(out)
    }
}

/// Reads a manifest; relative trace paths are resolved against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let mut m: DatasetManifest = jsonl::read_object(path)?;
    m.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    for paths in m.splits.values_mut() {
        for p in paths.iter_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(m)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    jsonl::write_object(path.as_ref(), manifest)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Two heads, tokens `[CLS] a b ##c [SEP]`, three words.
    pub(crate) fn fixture(id: &str) -> AttentionTrace {
        AttentionTrace {
            example_id: id.into(),
            dataset_id: "toy".into(),
            tokens: ["[CLS]", "a", "b", "##c", "[SEP]"]
                .map(String::from)
                .to_vec(),
            cls_index: 0,
            word_ids: vec![None, Some(0), Some(1), Some(1), None],
            num_heads: 2,
            attn_task_to_token: vec![
                vec![0.2, 0.3, 0.1, 0.25, 0.15],
                vec![0.1, 0.1, 0.4, 0.2, 0.2],
            ],
            attn_token_to_task: vec![
                vec![0.2, 0.5, 0.9, 0.05, 0.6],
                vec![0.1, 0.7, 0.3, 0.8, 0.4],
            ],
            label_gold: 1,
            label_pred: 1,
            rationales: vec![AnnotatorRationale {
                annotator_id: "a1".into(),
                mask: vec![false, true],
            }],
        }
    }

    #[test]
    fn fixture_is_valid() {
        let t = fixture("x");
        t.validate().unwrap();
        assert_eq!(t.num_words(), 2);
        assert_eq!(t.words(), vec!["a", "bc"]);
    }

    fn expect_invariant(t: &AttentionTrace, inv: Invariant) {
        let err = t.validate().unwrap_err();
        assert_eq!(err.invariant(), Some(inv), "{err}");
        let msg = err.to_string();
        assert!(msg.contains(&inv.to_string()), "{msg}");
        assert!(msg.contains(&t.example_id), "{msg}");
    }

    #[test]
    fn row_not_summing_to_one_is_rejected() {
        let mut t = fixture("short-row");
        // sums to 0.9
        t.attn_task_to_token[1] = vec![0.1, 0.1, 0.3, 0.2, 0.2];
        expect_invariant(&t, Invariant::RowStochastic);
        assert!(t.validate().unwrap_err().to_string().contains("row-stochastic"));
    }

    #[test]
    fn word_id_gap_is_rejected() {
        let mut t = fixture("gap");
        t.tokens.truncate(4);
        t.word_ids = vec![None, Some(0), Some(0), Some(2)];
        for m in [&mut t.attn_task_to_token, &mut t.attn_token_to_task] {
            for row in m.iter_mut() {
                row.truncate(4);
            }
        }
        t.attn_task_to_token = vec![vec![0.25; 4], vec![0.25; 4]];
        t.attn_token_to_task[0][0] = 0.25;
        t.attn_token_to_task[1][0] = 0.25;
        t.rationales[0].mask = vec![true, false, false];
        expect_invariant(&t, Invariant::WordIdGap);
        assert!(t.validate().unwrap_err().to_string().contains("gap in word indices"));
    }

    /// One broken fixture per invariant.
    #[test]
    fn adversarial_corpus() {
        let mut t = fixture("cls-range");
        t.cls_index = 9;
        expect_invariant(&t, Invariant::ClsIndexRange);

        let mut t = fixture("cls-word");
        t.word_ids[0] = Some(0);
        expect_invariant(&t, Invariant::ClsWordIdNull);

        let mut t = fixture("range");
        t.attn_token_to_task[0][2] = 1.5;
        expect_invariant(&t, Invariant::AttentionRange);

        let mut t = fixture("negative");
        t.attn_task_to_token[0][1] = -0.1;
        t.attn_task_to_token[0][2] = 0.5;
        expect_invariant(&t, Invariant::AttentionRange);

        let mut t = fixture("nan");
        t.attn_token_to_task[1][3] = f32::NAN;
        expect_invariant(&t, Invariant::AttentionRange);

        let mut t = fixture("self");
        t.attn_token_to_task[1][0] = 0.3;
        expect_invariant(&t, Invariant::ClsSelfAttention);

        let mut t = fixture("monotone");
        t.word_ids = vec![None, Some(1), Some(0), Some(1), None];
        // word 1 first: that is a gap, not a decrease
        expect_invariant(&t, Invariant::WordIdGap);
        t.word_ids = vec![None, Some(0), Some(1), Some(0), None];
        expect_invariant(&t, Invariant::WordIdsMonotone);

        let mut t = fixture("no-words");
        t.word_ids = vec![None; 5];
        t.rationales.clear();
        expect_invariant(&t, Invariant::NoWords);

        let mut t = fixture("rationale");
        t.rationales[0].mask.push(true);
        expect_invariant(&t, Invariant::RationaleLength);
    }

    #[test]
    fn shape_errors_are_dimension_mismatches() {
        let mut t = fixture("dims");
        t.attn_token_to_task[1].pop();
        assert!(matches!(t.validate(), Err(Error::Dimension { .. })));

        let mut t = fixture("heads");
        t.num_heads = 3;
        assert!(matches!(t.validate(), Err(Error::Dimension { .. })));

        let mut t = fixture("word-ids");
        t.word_ids.pop();
        assert!(matches!(t.validate(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn filter_correct_keeps_matching_predictions() {
        let a = fixture("a");
        let mut b = fixture("b");
        b.label_pred = 0;
        let kept = filter_correct(vec![a.clone(), b.clone()]);
        assert_eq!(kept, vec![a.clone()]);
        assert_eq!(filter_correct(vec![a.clone(), a.clone()]).len(), 2);
        assert!(filter_correct(vec![b.clone(), b]).is_empty());
    }

    #[test]
    fn manifest_invariants() {
        let mut m = DatasetManifest {
            dataset_id: "d".into(),
            avg_rationale_k: 3,
            positive_rate: 0.2,
            splits: BTreeMap::new(),
        };
        m.validate().unwrap();
        m.avg_rationale_k = 0;
        assert_eq!(m.validate().unwrap_err().invariant(), Some(Invariant::ManifestK));
        m.avg_rationale_k = 1;
        m.positive_rate = 1.2;
        assert_eq!(
            m.validate().unwrap_err().invariant(),
            Some(Invariant::ManifestPositiveRate)
        );
    }

    #[test]
    fn manifest_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let traces = vec![fixture("m1")];
        write_traces(&traces, dir.path().join("data/train.jsonl")).unwrap();
        let m = DatasetManifest {
            dataset_id: "toy".into(),
            avg_rationale_k: 1,
            positive_rate: 0.5,
            splits: BTreeMap::from([(Split::Train, vec![PathBuf::from("data/train.jsonl")])]),
        };
        let path = dir.path().join("manifest.json");
        write_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.load_split(Split::Train).unwrap(), traces);
        assert!(loaded.load_split(Split::Test).unwrap().is_empty());
    }
}

//! Adapting external explainers: word aggregation of token scores, top-K
//! binarization, score files, and the random baseline.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::trace::AttentionTrace;

pub const RANDOM_METHOD_ID: &str = "random";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Token,
    Word,
}

/// Continuous attribution scores produced by some explainer for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: String,
    pub method_id: String,
    pub granularity: Granularity,
    pub scores: Vec<f64>,
}

/// One method's explanation of one example, at word granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub example_id: String,
    pub method_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_scores: Option<Vec<f64>>,
    pub word_scores: Vec<f64>,
    #[serde(with = "jsonl::bits")]
    pub word_mask: Vec<bool>,
}

impl Explanation {
    pub fn selected_words(&self) -> usize {
        self.word_mask.iter().filter(|&&b| b).count()
    }
}

/// A word's score is the maximum over its subtokens; tokens without a word
/// are ignored.
pub fn aggregate_to_words(trace: &AttentionTrace, token_scores: &[f64]) -> Result<Vec<f64>> {
    if token_scores.len() != trace.num_tokens() {
        return Err(Error::LengthMismatch {
            context: format!("token scores for example `{}`", trace.example_id),
            expected: trace.num_tokens(),
            actual: token_scores.len(),
        });
    }
    let mut words = vec![f64::NEG_INFINITY; trace.num_words()];
    for (j, w) in trace.candidate_tokens() {
        words[w] = words[w].max(token_scores[j]);
    }
    Ok(words)
}

/// Selects the `k` highest non-negative scores.
///
/// Strictly negative scores are never selected. Ties go to the earlier
/// position; positions are unique, so no further tie-break is needed. With
/// fewer than `k` non-negative candidates, all of them are selected.
pub fn binarize_topk(word_scores: &[f64], k: usize) -> Vec<bool> {
    let mut candidates: Vec<usize> = (0..word_scores.len())
        .filter(|&i| word_scores[i] >= 0.0)
        .collect();
    // NaN never passes the filter above; the stable sort keeps ascending
    // position among equal scores
    candidates.sort_by(|&a, &b| {
        word_scores[b]
            .partial_cmp(&word_scores[a])
            .expect("candidates are comparable")
    });
    let mut mask = vec![false; word_scores.len()];
    for &i in candidates.iter().take(k) {
        mask[i] = true;
    }
    mask
}

fn example_seed(example_id: &str, seed: u64) -> u64 {
    // FNV-1a over the id, then mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in example_id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Marks each word independently with probability `positive_rate`.
///
/// The generator is keyed by `(example_id, seed)`. Word scores are
/// `1 - u` for the uniform draw `u`, so the mask is exactly the set of
/// scores above `1 - positive_rate`.
pub fn random_baseline(trace: &AttentionTrace, positive_rate: f64, seed: u64) -> Result<Explanation> {
    if !(0.0..=1.0).contains(&positive_rate) {
        return Err(Error::Config(format!(
            "positive_rate {positive_rate} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(&trace.example_id, seed));
    let n = trace.num_words();
    let mut word_scores = Vec::with_capacity(n);
    let mut word_mask = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        word_scores.push(1.0 - u);
        word_mask.push(u < positive_rate);
    }
    Ok(Explanation {
        example_id: trace.example_id.clone(),
        method_id: RANDOM_METHOD_ID.into(),
        token_scores: None,
        word_scores,
        word_mask,
    })
}

/// Turns one score record into a binarized explanation of `trace`.
pub fn explain_from_scores(trace: &AttentionTrace, record: &ScoreRecord, k: usize) -> Result<Explanation> {
    let (token_scores, word_scores) = match record.granularity {
        Granularity::Token => {
            let words = aggregate_to_words(trace, &record.scores)?;
            (Some(record.scores.clone()), words)
        }
        Granularity::Word => {
            check_len(trace, record)?;
            (None, record.scores.clone())
        }
    };
    let word_mask = binarize_topk(&word_scores, k);
    Ok(Explanation {
        example_id: record.example_id.clone(),
        method_id: record.method_id.clone(),
        token_scores,
        word_scores,
        word_mask,
    })
}

fn check_len(trace: &AttentionTrace, record: &ScoreRecord) -> Result<()> {
    let expected = match record.granularity {
        Granularity::Token => trace.num_tokens(),
        Granularity::Word => trace.num_words(),
    };
    if record.scores.len() != expected {
        return Err(Error::LengthMismatch {
            context: format!(
                "{:?} scores of `{}` for example `{}`",
                record.granularity, record.method_id, record.example_id
            ),
            expected,
            actual: record.scores.len(),
        });
    }
    Ok(())
}

/// Reads a score file without cross-checking it.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    Ok(jsonl::read(path.as_ref())?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

/// Reads a score file and checks every record against `traces`.
pub fn load_scores(path: impl AsRef<Path>, traces: &[AttentionTrace]) -> Result<Vec<ScoreRecord>> {
    let by_id: HashMap<&str, &AttentionTrace> =
        traces.iter().map(|t| (t.example_id.as_str(), t)).collect();
    let records = read_scores(path)?;
    for r in &records {
        let trace = by_id
            .get(r.example_id.as_str())
            .ok_or_else(|| Error::UnknownExample(r.example_id.clone()))?;
        check_len(trace, r)?;
    }
    Ok(records)
}

pub fn write_scores(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    jsonl::write(path.as_ref(), records)
}

pub fn write_explanations(explanations: &[Explanation], path: impl AsRef<Path>) -> Result<()> {
    jsonl::write(path.as_ref(), explanations)
}

pub fn write_explanations_to(explanations: &[Explanation], w: impl std::io::Write) -> Result<()> {
    jsonl::write_to(w, explanations)
}

pub fn read_explanations(path: impl AsRef<Path>) -> Result<Vec<Explanation>> {
    Ok(jsonl::read(path.as_ref())?
        .into_iter()
        .map(|(_, e)| e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::tests::fixture;

    #[test]
    fn aggregation_takes_subtoken_max() {
        let mut t = fixture("agg");
        t.word_ids = vec![None, Some(0), Some(0), Some(1), None];
        let w = aggregate_to_words(&t, &[9.0, 0.2, 0.7, 0.4, 9.0]).unwrap();
        assert_eq!(w, [0.7, 0.4]);
    }

    #[test]
    fn aggregation_identity_and_sign() {
        let mut t = fixture("id");
        t.word_ids = vec![None, Some(0), Some(1), Some(2), None];
        assert_eq!(
            aggregate_to_words(&t, &[0.0, 0.3, 0.1, 0.2, 0.0]).unwrap(),
            [0.3, 0.1, 0.2]
        );
        t.word_ids = vec![None, Some(0), Some(1), None, None];
        assert_eq!(
            aggregate_to_words(&t, &[0.0, -1.0, -2.0, 0.0, 0.0]).unwrap(),
            [-1.0, -2.0]
        );
        assert!(aggregate_to_words(&t, &[0.0; 3]).is_err());
    }

    #[test]
    fn topk_examples() {
        let b = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<_>>();
        assert_eq!(binarize_topk(&[0.9, 0.1, 0.5, 0.5], 2), b(&[1, 0, 1, 0]));
        assert_eq!(binarize_topk(&[0.2, -0.5], 2), b(&[1, 0]));
        assert_eq!(binarize_topk(&[0.2, 0.4], 5), b(&[1, 1]));
        assert_eq!(binarize_topk(&[0.0, -0.0, -1e-9], 3), b(&[1, 1, 0]));
        assert_eq!(binarize_topk(&[-0.0, 0.0], 1), b(&[1, 0]));
        assert_eq!(binarize_topk(&[f64::NAN, 0.1], 2), b(&[0, 1]));
        assert_eq!(binarize_topk(&[], 3), b(&[]));
    }

    #[test]
    fn random_baseline_extremes_and_reproducibility() {
        let t = fixture("r");
        assert!(random_baseline(&t, 0.0, 1).unwrap().word_mask.iter().all(|&b| !b));
        assert!(random_baseline(&t, 1.0, 1).unwrap().word_mask.iter().all(|&b| b));
        assert_eq!(random_baseline(&t, 0.4, 3).unwrap(), random_baseline(&t, 0.4, 3).unwrap());
        assert!(random_baseline(&t, 1.5, 3).is_err());
    }

    #[test]
    fn random_baseline_concentrates_at_rate() {
        let mut t = fixture("big");
        let n = 10_000;
        t.tokens = vec!["w".into(); n + 1];
        t.word_ids = std::iter::once(None).chain((0..n).map(Some)).collect();
        let row = {
            let mut r = vec![0.0f32; n + 1];
            r[0] = 1.0;
            r
        };
        t.attn_task_to_token = vec![row.clone(), row.clone()];
        t.attn_token_to_task = vec![row.clone(), row];
        t.rationales.clear();
        t.validate().unwrap();
        let e = random_baseline(&t, 0.3, 42).unwrap();
        let frac = e.selected_words() as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.02, "{frac}");
        for (s, m) in e.word_scores.iter().zip(&e.word_mask) {
            assert_eq!(*m, *s > 0.7);
        }
    }

    #[test]
    fn score_files_are_checked_against_traces() {
        let dir = tempfile::tempdir().unwrap();
        let traces = vec![fixture("a"), fixture("b")];
        let good = vec![
            ScoreRecord {
                example_id: "a".into(),
                method_id: "lime".into(),
                granularity: Granularity::Token,
                scores: vec![0.0, 0.5, 0.1, 0.9, 0.0],
            },
            ScoreRecord {
                example_id: "b".into(),
                method_id: "lime".into(),
                granularity: Granularity::Word,
                scores: vec![0.3, -0.2],
            },
        ];
        let path = dir.path().join("scores.jsonl");
        write_scores(&good, &path).unwrap();
        let loaded = load_scores(&path, &traces).unwrap();
        assert_eq!(loaded, good);

        let e = explain_from_scores(&traces[0], &loaded[0], 1).unwrap();
        assert_eq!(e.word_scores, [0.5, 0.9]);
        assert_eq!(e.word_mask, [false, true]);
        let e = explain_from_scores(&traces[1], &loaded[1], 2).unwrap();
        assert_eq!(e.word_scores, [0.3, -0.2]);
        assert_eq!(e.word_mask, [true, false]);

        let mut bad = good.clone();
        bad[1].scores.push(1.0);
        write_scores(&bad, &path).unwrap();
        let err = load_scores(&path, &traces).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");

        let mut unknown = good;
        unknown[0].example_id = "zzz".into();
        write_scores(&unknown, &path).unwrap();
        assert!(matches!(load_scores(&path, &traces), Err(Error::UnknownExample(id)) if id == "zzz"));
    }
}

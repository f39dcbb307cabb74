use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::trace::AttentionTrace;

/// How several annotators' rationales become one gold mask.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    /// Positive when strictly more than half of the annotators mark the word.
    #[default]
    Majority,
    Union,
    SingleAnnotator(String),
}

impl std::fmt::Display for MergePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MergePolicy::Majority => f.write_str("majority"),
            MergePolicy::Union => f.write_str("union"),
            MergePolicy::SingleAnnotator(id) => write!(f, "single_annotator({id})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedRationale {
    pub example_id: String,
    #[serde(with = "jsonl::bits")]
    pub word_mask: Vec<bool>,
    pub policy: MergePolicy,
}

pub fn merge_rationales(trace: &AttentionTrace, policy: &MergePolicy) -> Result<MergedRationale> {
    if trace.rationales.is_empty() {
        return Err(Error::MissingRationale(trace.example_id.clone()));
    }
    let n_words = trace.num_words();
    let word_mask = match policy {
        MergePolicy::Majority => {
            let n = trace.rationales.len();
            (0..n_words)
                .map(|w| {
                    let votes = trace.rationales.iter().filter(|r| r.mask[w]).count();
                    2 * votes > n
                })
                .collect()
        }
        MergePolicy::Union => (0..n_words)
            .map(|w| trace.rationales.iter().any(|r| r.mask[w]))
            .collect(),
        MergePolicy::SingleAnnotator(id) => trace
            .rationale(id)
            .ok_or_else(|| Error::UnknownAnnotator {
                example_id: trace.example_id.clone(),
                annotator_id: id.clone(),
            })?
            .mask
            .clone(),
    };
    Ok(MergedRationale {
        example_id: trace.example_id.clone(),
        word_mask,
        policy: policy.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::tests::fixture;
    use crate::trace::AnnotatorRationale;

    fn with_annotators(masks: &[&[u8]]) -> AttentionTrace {
        let mut t = fixture("m");
        t.rationales = masks
            .iter()
            .enumerate()
            .map(|(i, m)| AnnotatorRationale {
                annotator_id: format!("a{i}"),
                mask: m.iter().map(|&b| b == 1).collect(),
            })
            .collect();
        t
    }

    #[test]
    fn majority_of_three() {
        let t = with_annotators(&[&[1, 0], &[1, 1], &[0, 0]]);
        let m = merge_rationales(&t, &MergePolicy::Majority).unwrap();
        assert_eq!(m.word_mask, [true, false]);
    }

    #[test]
    fn majority_ties_are_negative() {
        let t = with_annotators(&[&[1, 0], &[0, 0]]);
        let m = merge_rationales(&t, &MergePolicy::Majority).unwrap();
        assert_eq!(m.word_mask, [false, false]);
    }

    #[test]
    fn union_and_single() {
        let t = with_annotators(&[&[1, 0], &[0, 1]]);
        assert_eq!(
            merge_rationales(&t, &MergePolicy::Union).unwrap().word_mask,
            [true, true]
        );
        assert_eq!(
            merge_rationales(&t, &MergePolicy::SingleAnnotator("a1".into()))
                .unwrap()
                .word_mask,
            [false, true]
        );
        let one = with_annotators(&[&[0, 1]]);
        assert_eq!(
            merge_rationales(&one, &MergePolicy::Majority).unwrap().word_mask,
            [false, true]
        );
    }

    #[test]
    fn errors() {
        let t = with_annotators(&[&[1, 0]]);
        assert!(matches!(
            merge_rationales(&t, &MergePolicy::SingleAnnotator("zz".into())),
            Err(Error::UnknownAnnotator { .. })
        ));
        let none = with_annotators(&[]);
        assert!(matches!(
            merge_rationales(&none, &MergePolicy::Union),
            Err(Error::MissingRationale(_))
        ));
    }

    #[test]
    fn policy_serde_forms() {
        assert_eq!(serde_json::to_string(&MergePolicy::Majority).unwrap(), "\"majority\"");
        let p: MergePolicy = serde_json::from_str(r#"{"single_annotator":"a2"}"#).unwrap();
        assert_eq!(p, MergePolicy::SingleAnnotator("a2".into()));
    }
}

//! Per-token attention features and label projection.
//!
//! A token's feature vector is the concatenation of the attention the
//! aggregation token pays to it in each head, followed by the attention it
//! pays to the aggregation token in each head. Values are used raw.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::AttentionTrace;

/// Which halves of the feature vector are kept. Dropped halves are removed,
/// not zeroed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMask {
    #[default]
    Full,
    TaskToTokenOnly,
    TokenToTaskOnly,
}

impl FeatureMask {
    pub fn input_dim(self, num_heads: usize) -> usize {
        match self {
            FeatureMask::Full => 2 * num_heads,
            FeatureMask::TaskToTokenOnly | FeatureMask::TokenToTaskOnly => num_heads,
        }
    }

    /// Recovers the head count from a feature length, if consistent.
    pub fn num_heads(self, input_dim: usize) -> Option<usize> {
        match self {
            FeatureMask::Full if input_dim.is_multiple_of(2) && input_dim > 0 => Some(input_dim / 2),
            FeatureMask::Full => None,
            _ if input_dim > 0 => Some(input_dim),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatureVector {
    pub example_id: String,
    pub token_index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledToken {
    pub feature: TokenFeatureVector,
    pub target: bool,
}

fn token_features(trace: &AttentionTrace, j: usize, mask: FeatureMask) -> Vec<f64> {
    let task_to_token = trace.attn_task_to_token.iter().map(|row| f64::from(row[j]));
    let token_to_task = trace.attn_token_to_task.iter().map(|row| f64::from(row[j]));
    match mask {
        FeatureMask::Full => task_to_token.chain(token_to_task).collect(),
        FeatureMask::TaskToTokenOnly => task_to_token.collect(),
        FeatureMask::TokenToTaskOnly => token_to_task.collect(),
    }
}

/// One vector per token that maps to a word; special tokens are skipped.
pub fn extract_features(trace: &AttentionTrace, mask: FeatureMask) -> Vec<TokenFeatureVector> {
    trace
        .candidate_tokens()
        .map(|(j, _)| TokenFeatureVector {
            example_id: trace.example_id.clone(),
            token_index: j,
            values: token_features(trace, j, mask),
        })
        .collect()
}

/// Copies each word's rationale bit onto all of its subtokens.
pub fn project_labels(
    trace: &AttentionTrace,
    merged_rationale: &[bool],
    mask: FeatureMask,
) -> Result<Vec<LabeledToken>> {
    let words = trace.num_words();
    if merged_rationale.len() != words {
        return Err(Error::LengthMismatch {
            context: format!("rationale for example `{}`", trace.example_id),
            expected: words,
            actual: merged_rationale.len(),
        });
    }
    Ok(trace
        .candidate_tokens()
        .map(|(j, w)| LabeledToken {
            feature: TokenFeatureVector {
                example_id: trace.example_id.clone(),
                token_index: j,
                values: token_features(trace, j, mask),
            },
            target: merged_rationale[w],
        })
        .collect())
}

/// Fraction of tokens with a positive target.
pub fn compute_positive_rate(labeled: &[LabeledToken]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::EmptyInput("positive rate over zero tokens"));
    }
    let pos = labeled.iter().filter(|t| t.target).count();
    Ok(pos as f64 / labeled.len() as f64)
}

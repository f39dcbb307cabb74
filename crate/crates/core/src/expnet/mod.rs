//! The learned explainer.
//!
//! A two-layer network maps each token's attention features to an importance
//! probability. It is trained with focal loss and Adam on word rationales
//! projected to subtokens, and at inference thresholds the probabilities with
//! a fallback that always keeps the best-scoring token.

mod adam;
mod loss;
mod model;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{aggregate_to_words, Explanation};
use crate::error::{Error, Result};
use crate::features::{FeatureMask, LabeledToken};
use crate::jsonl;
use crate::trace::AttentionTrace;

pub use adam::Adam;
pub use loss::{focal_loss, PROB_EPSILON};
pub use model::{ExpNetModel, ForwardPass, Gradients};

pub const METHOD_ID: &str = "expnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub threshold: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            learning_rate: 0.001,
            batch_size: 32,
            hidden_dim: 16,
            alpha: 0.6,
            gamma: 2.0,
            threshold: 0.5,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_owned()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if self.hidden_dim < 1 {
            return fail("hidden_dim must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("gamma must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return fail("adam_epsilon must be positive");
        }
        Ok(())
    }
}

/// Provenance recorded on every trained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config: TrainingConfig,
    pub source_dataset_ids: Vec<String>,
    pub n_tokens: usize,
    pub n_positive: usize,
    pub initialization: String,
    pub loss_reduction: String,
    pub batch_unit: String,
}

/// Labeled tokens plus the feature layout they were extracted with.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub tokens: Vec<LabeledToken>,
    pub mask: FeatureMask,
    pub source_dataset_ids: Vec<String>,
}

/// Summary handed to the per-epoch observer.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub fn train(set: &TrainingSet, config: &TrainingConfig) -> Result<ExpNetModel> {
    train_with_observer(set, config, |_, _| {})
}

/// Like [`train`], calling `observe` with the model after every epoch.
pub fn train_with_observer(
    set: &TrainingSet,
    config: &TrainingConfig,
    mut observe: impl FnMut(EpochStats, &ExpNetModel),
) -> Result<ExpNetModel> {
    config.validate()?;
    let tokens = &set.tokens;
    let first = tokens
        .first()
        .ok_or(Error::EmptyInput("training requires at least one token"))?;
    let input_dim = first.feature.values.len();
    let num_heads = set.mask.num_heads(input_dim).ok_or_else(|| {
        Error::Config(format!(
            "feature length {input_dim} incompatible with mask {:?}",
            set.mask
        ))
    })?;
    if let Some(bad) = tokens.iter().find(|t| t.feature.values.len() != input_dim) {
        return Err(Error::Dimension {
            example_id: bad.feature.example_id.clone(),
            detail: format!(
                "token {} has {} features, expected {input_dim}",
                bad.feature.token_index,
                bad.feature.values.len()
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hidden_dim = config.hidden_dim;
    let mut model = ExpNetModel::zeros(num_heads, hidden_dim, set.mask);
    let bound1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
    for w in &mut model.w1 {
        *w = rng.random_range(-bound1..=bound1);
    }
    let bound2 = (6.0 / (hidden_dim + 1) as f64).sqrt();
    for w in &mut model.w2 {
        *w = rng.random_range(-bound2..=bound2);
    }
    model.train_meta = TrainMeta {
        config: config.clone(),
        source_dataset_ids: set.source_dataset_ids.clone(),
        n_tokens: tokens.len(),
        n_positive: tokens.iter().filter(|t| t.target).count(),
        initialization: "xavier_uniform_zero_bias".into(),
        loss_reduction: "mean_per_batch".into(),
        batch_unit: "token".into(),
    };

    let mut adam = Adam::new(
        model.param_count(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    );
    let mut grads = Gradients::zeros(input_dim, hidden_dim);
    let mut order: Vec<usize> = (0..tokens.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &i in idx {
                let tok = &tokens[i];
                let x = &tok.feature.values;
                let pass = model.forward_unchecked(x);
                let (loss, dloss) = focal_loss(pass.prob, tok.target, config.alpha, config.gamma);
                batch_loss += loss;
                model.accumulate_gradients(x, &pass, dloss, &mut grads);
            }
            let n = idx.len() as f64;
            batch_loss /= n;
            grads.scale(1.0 / n);
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, batch });
            }
            adam.step(model.params_mut(), grads.iter());
            epoch_loss += batch_loss * n;
        }
        observe(
            EpochStats {
                epoch,
                mean_loss: epoch_loss / tokens.len() as f64,
            },
            &model,
        );
    }
    Ok(model)
}

/// Marks every score `>= threshold`; if none qualifies, marks only the
/// highest score, the earliest index winning ties.
pub fn threshold_with_fallback(scores: &[f64], threshold: f64) -> Vec<bool> {
    let mut mask: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    if !mask.iter().any(|&b| b) {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in scores.iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        if let Some((i, _)) = best {
            mask[i] = true;
        }
    }
    mask
}

/// Scores every word-bearing token of `trace` and derives the word mask.
///
/// `token_scores` holds one probability per token; tokens without a word
/// (the aggregation token, separators) are left at 0 and never selected.
pub fn predict(model: &ExpNetModel, trace: &AttentionTrace, threshold: f64) -> Result<Explanation> {
    if trace.num_heads != model.num_heads {
        return Err(Error::Dimension {
            example_id: trace.example_id.clone(),
            detail: format!(
                "trace has {} heads, model expects {}",
                trace.num_heads, model.num_heads
            ),
        });
    }
    let candidates: Vec<(usize, usize)> = trace.candidate_tokens().collect();
    let mut features = Vec::with_capacity(model.input_dim);
    let mut token_scores = vec![0.0; trace.num_tokens()];
    let mut candidate_scores = Vec::with_capacity(candidates.len());
    for &(j, _) in &candidates {
        features.clear();
        let t2k = trace.attn_task_to_token.iter().map(|r| f64::from(r[j]));
        let k2t = trace.attn_token_to_task.iter().map(|r| f64::from(r[j]));
        match model.mask {
            FeatureMask::Full => features.extend(t2k.chain(k2t)),
            FeatureMask::TaskToTokenOnly => features.extend(t2k),
            FeatureMask::TokenToTaskOnly => features.extend(k2t),
        }
        let p = model.forward_unchecked(&features).prob;
        token_scores[j] = p;
        candidate_scores.push(p);
    }
    let token_mask = threshold_with_fallback(&candidate_scores, threshold);
    let mut word_mask = vec![false; trace.num_words()];
    for (&(_, w), &on) in candidates.iter().zip(&token_mask) {
        word_mask[w] |= on;
    }
    let word_scores = aggregate_to_words(trace, &token_scores)?;
    Ok(Explanation {
        example_id: trace.example_id.clone(),
        method_id: METHOD_ID.into(),
        token_scores: Some(token_scores),
        word_scores,
        word_mask,
    })
}

pub fn save_model(model: &ExpNetModel, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    jsonl::write_object(path.as_ref(), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ExpNetModel> {
    let model: ExpNetModel = jsonl::read_object(path.as_ref())?;
    model.validate()?;
    Ok(model)
}

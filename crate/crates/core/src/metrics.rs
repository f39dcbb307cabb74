//! Plausibility metrics against human rationales.
//!
//! Precision, recall and F1 are micro-averaged: confusion counts are summed
//! over all evaluated examples before the ratios are taken. AUROC and AUPR
//! pool every word's `(score, gold)` pair across the dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn accumulate(pred_mask: &[bool], gold_mask: &[bool]) -> Result<ConfusionCounts> {
    if pred_mask.len() != gold_mask.len() {
        return Err(Error::LengthMismatch {
            context: "prediction vs gold mask".into(),
            expected: gold_mask.len(),
            actual: pred_mask.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred_mask.iter().zip(gold_mask) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of a single set of counts.
///
/// Zero denominators: precision is 1 when nothing was predicted and nothing
/// was missed, 0 when nothing was predicted but gold positives exist; recall
/// mirrors this with false positives. F1 is 0 whenever `P + R = 0`.
pub fn prf(c: ConfusionCounts) -> PrecisionRecallF1 {
    let ratio = |num: u64, den: u64, other_err: u64| {
        if den == 0 {
            if other_err == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp, c.fn_);
    let recall = ratio(c.tp, c.tp + c.fn_, c.fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    PrecisionRecallF1 {
        precision,
        recall,
        f1,
    }
}

/// Dataset-level (micro) precision, recall and F1.
pub fn dataset_f1(counts: &[ConfusionCounts]) -> Result<PrecisionRecallF1> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("dataset F1 over zero examples"));
    }
    Ok(prf(counts.iter().copied().sum()))
}

fn check_scores(scored: &[(f64, bool)]) -> Result<()> {
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Config("NaN score in ranking metric input".into()));
    }
    Ok(())
}

/// Pooled AUROC as the Mann-Whitney statistic: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn pooled_auroc(scored: &[(f64, bool)]) -> Result<f64> {
    check_scores(scored)?;
    let n_pos = scored.iter().filter(|(_, g)| *g).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined {
            metric: "AUROC",
            reason: "needs at least one positive and one negative",
        });
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));

    // sum of mid-ranks (1-based) of the positives, accumulated in halves so
    // the sum stays integral
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| scored[k].1).count() as u128;
        // ranks i+1..=j+1 average to (i + j + 2) / 2
        pos_rank_sum2 += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    // 2U = 2 * rank_sum - n_pos (n_pos + 1)
    let u2 = pos_rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg as u128) as f64)
}

/// Pooled average precision: the step-wise area under the precision-recall
/// curve, evaluated at each distinct score threshold from high to low.
pub fn pooled_aupr(scored: &[(f64, bool)]) -> Result<f64> {
    check_scores(scored)?;
    let n_pos = scored.iter().filter(|(_, g)| *g).count();
    if n_pos == 0 {
        return Err(Error::Undefined {
            metric: "AUPR",
            reason: "needs at least one positive",
        });
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));

    let (mut tp, mut seen, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scored[order[i]].0;
        while i < order.len() && scored[order[i]].0 == s {
            tp += usize::from(scored[order[i]].1);
            seen += 1;
            i += 1;
        }
        if tp > prev_tp {
            let precision = tp as f64 / seen as f64;
            ap += (tp - prev_tp) as f64 / n_pos as f64 * precision;
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Percentile-bootstrap interval for the micro F1, resampling examples.
///
/// Replicate `r` draws from its own generator seeded with `seed + r`.
pub fn bootstrap_ci(
    per_example: &[ConfusionCounts],
    iterations: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if per_example.len() < 2 {
        return Err(Error::EmptyInput("bootstrap needs at least two examples"));
    }
    if iterations == 0 {
        return Err(Error::Config("bootstrap iterations must be positive".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    let n = per_example.len();
    let mut replicates: Vec<f64> = (0..iterations)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let sum: ConfusionCounts = (0..n)
                .map(|_| per_example[rng.random_range(0..n)])
                .sum();
            prf(sum).f1
        })
        .collect();
    replicates.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&replicates, tail), quantile(&replicates, 1.0 - tail)))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Krippendorff's alpha for binary nominal data.
///
/// `annotations[a][u]` is annotator `a`'s label for unit `u`, `None` when
/// missing. Only units with at least two labels are pairable.
pub fn krippendorff_alpha(annotations: &[Vec<Option<bool>>]) -> Result<f64> {
    if annotations.len() < 2 {
        return Err(Error::Undefined {
            metric: "Krippendorff's alpha",
            reason: "needs at least two annotators",
        });
    }
    let n_units = annotations[0].len();
    if let Some(row) = annotations.iter().find(|r| r.len() != n_units) {
        return Err(Error::LengthMismatch {
            context: "annotation matrix row".into(),
            expected: n_units,
            actual: row.len(),
        });
    }
    // coincidence matrix entries o_01 (= o_10), and value totals n_0, n_1
    let (mut o01, mut n0, mut n1) = (0.0f64, 0u64, 0u64);
    for u in 0..n_units {
        let (mut c0, mut c1) = (0u64, 0u64);
        for row in annotations {
            match row[u] {
                Some(false) => c0 += 1,
                Some(true) => c1 += 1,
                None => {}
            }
        }
        let m = c0 + c1;
        if m < 2 {
            continue;
        }
        o01 += (c0 * c1) as f64 / (m - 1) as f64;
        n0 += c0;
        n1 += c1;
    }
    let n = n0 + n1;
    if n == 0 {
        return Err(Error::Undefined {
            metric: "Krippendorff's alpha",
            reason: "no unit is labeled by two annotators",
        });
    }
    if n0 == 0 || n1 == 0 {
        return Err(Error::Undefined {
            metric: "Krippendorff's alpha",
            reason: "only one value occurs, expected disagreement is zero",
        });
    }
    // alpha = 1 - D_o / D_e with D_o = 2 o_01 / n, D_e = 2 n_0 n_1 / (n (n - 1))
    Ok(1.0 - (n - 1) as f64 * o01 / (n0 as f64 * n1 as f64))
}

/// Per-example confusion counts kept in a report for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleCounts {
    pub example_id: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_id: String,
    pub dataset_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_ci_low: f64,
    pub f1_ci_high: f64,
    pub ci_method: String,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub n_examples: usize,
    pub n_words: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_example: Option<Vec<ExampleCounts>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// One example's prediction alongside its gold rationale.
#[derive(Debug, Clone, Copy)]
pub struct ScoredExample<'a> {
    pub example_id: &'a str,
    pub word_mask: &'a [bool],
    pub word_scores: &'a [f64],
    pub gold: &'a [bool],
}

/// Evaluates one method on one dataset.
///
/// AUROC/AUPR are `None` when undefined for the pooled labels. With a
/// single example, the interval collapses to the point estimate.
pub fn evaluate(
    method_id: &str,
    dataset_id: &str,
    examples: &[ScoredExample<'_>],
    bootstrap: &BootstrapConfig,
    keep_per_example: bool,
) -> Result<EvalReport> {
    let mut counts = Vec::with_capacity(examples.len());
    let mut pooled = Vec::new();
    for ex in examples {
        let c = accumulate(ex.word_mask, ex.gold)?;
        if ex.word_scores.len() != ex.gold.len() {
            return Err(Error::LengthMismatch {
                context: format!("word scores for example `{}`", ex.example_id),
                expected: ex.gold.len(),
                actual: ex.word_scores.len(),
            });
        }
        counts.push(c);
        pooled.extend(ex.word_scores.iter().copied().zip(ex.gold.iter().copied()));
    }
    let point = dataset_f1(&counts)?;
    let (lo, hi) = if counts.len() >= 2 {
        bootstrap_ci(&counts, bootstrap.iterations, bootstrap.level, bootstrap.seed)?
    } else {
        (point.f1, point.f1)
    };
    let per_example = keep_per_example.then(|| {
        examples
            .iter()
            .zip(&counts)
            .map(|(ex, c)| ExampleCounts {
                example_id: ex.example_id.to_owned(),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
            })
            .collect()
    });
    Ok(EvalReport {
        method_id: method_id.to_owned(),
        dataset_id: dataset_id.to_owned(),
        precision: point.precision,
        recall: point.recall,
        f1: point.f1,
        f1_ci_low: lo,
        f1_ci_high: hi,
        ci_method: format!(
            "percentile bootstrap over examples, {} resamples, level {}",
            bootstrap.iterations, bootstrap.level
        ),
        auroc: pooled_auroc(&pooled).ok(),
        aupr: pooled_aupr(&pooled).ok(),
        n_examples: examples.len(),
        n_words: counts.iter().map(ConfusionCounts::total).sum(),
        per_example,
    })
}

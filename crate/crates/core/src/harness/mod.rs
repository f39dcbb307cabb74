//! Experiment orchestration: train on some datasets, explain and evaluate on
//! a held-out one, and write everything needed to audit the run.
//!
//! An experiment writes this tree under its output directory:
//!
//! ```text
//! manifest.json           run manifest (seeds, policies, K, counts)
//! model.json              trained explainer
//! gold.jsonl              merged test rationales
//! explanations/<m>.jsonl  per-method word explanations
//! reports/<m>.json        per-method EvalReport
//! html/                   written later by `render_report`
//! ```

mod merge;
mod render;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{
    explain_from_scores, load_scores, random_baseline, write_explanations, Explanation,
    RANDOM_METHOD_ID,
};
use crate::error::{Error, Result, StageExt};
use crate::expnet::{self, ExpNetModel, TrainingConfig, TrainingSet};
use crate::features::{compute_positive_rate, project_labels, FeatureMask};
use crate::jsonl;
use crate::metrics::{self, BootstrapConfig, EvalReport, ScoredExample};
use crate::trace::{filter_correct, load_manifest, AttentionTrace, DatasetManifest, Split};

pub use merge::{merge_rationales, MergePolicy, MergedRationale};
pub use render::{
    render_highlight_pages, render_report, render_results_table, report_run_dir, ResultsRow,
    ResultsTable,
};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

fn default_methods() -> Vec<String> {
    vec![expnet::METHOD_ID.into(), RANDOM_METHOD_ID.into()]
}

fn default_test_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Dataset id to manifest path.
    pub datasets: BTreeMap<String, PathBuf>,
    pub train_dataset_ids: Vec<String>,
    pub test_dataset_id: String,
    #[serde(default)]
    pub config: TrainingConfig,
    #[serde(default)]
    pub mask: FeatureMask,
    /// Built-ins `expnet` and `random`, or any method with a score file.
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Dataset id to (method id to score file).
    #[serde(default)]
    pub score_files: BTreeMap<String, BTreeMap<String, PathBuf>>,
    #[serde(default)]
    pub merge_policy: MergePolicy,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub random_seed: u64,
    #[serde(default = "default_test_split")]
    pub test_split: Split,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_dataset_ids.is_empty() {
            return Err(Error::Config("train_dataset_ids is empty".into()));
        }
        if self.train_dataset_ids.contains(&self.test_dataset_id) {
            return Err(Error::Config(format!(
                "test dataset `{}` is also a training dataset",
                self.test_dataset_id
            )));
        }
        let mut seen = BTreeSet::new();
        for id in self.train_dataset_ids.iter().chain([&self.test_dataset_id]) {
            if !self.datasets.contains_key(id) {
                return Err(Error::Config(format!("no manifest given for dataset `{id}`")));
            }
            if !seen.insert(id) {
                return Err(Error::Config(format!("dataset `{id}` listed twice")));
            }
        }
        let mut methods = BTreeSet::new();
        for m in &self.methods {
            if !methods.insert(m) {
                return Err(Error::Config(format!("method `{m}` listed twice")));
            }
            if m == "gold" {
                return Err(Error::Config("`gold` is reserved".into()));
            }
            if m != expnet::METHOD_ID && m != RANDOM_METHOD_ID && self.score_file(m).is_none() {
                return Err(Error::Config(format!(
                    "method `{m}` has no score file for dataset `{}`",
                    self.test_dataset_id
                )));
            }
        }
        self.config.validate()
    }

    fn score_file(&self, method: &str) -> Option<&PathBuf> {
        self.score_files
            .get(&self.test_dataset_id)
            .and_then(|m| m.get(method))
    }

    /// One experiment per dataset in `train_dataset_ids ∪ {test_dataset_id}`,
    /// each holding that dataset out. Outputs go to `output_dir/<held-out>`.
    pub fn leave_one_task_out(&self) -> Vec<ExperimentSpec> {
        let all: BTreeSet<&String> = self
            .train_dataset_ids
            .iter()
            .chain([&self.test_dataset_id])
            .collect();
        all.iter()
            .map(|&test| ExperimentSpec {
                train_dataset_ids: all.iter().filter(|&&d| d != test).map(|&d| d.clone()).collect(),
                test_dataset_id: test.clone(),
                output_dir: self.output_dir.join(test),
                ..self.clone()
            })
            .collect()
    }
}

/// Reads an experiment spec; relative paths resolve against the spec file's
/// directory.
pub fn load_experiment_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spec: ExperimentSpec = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    spec.datasets.values_mut().for_each(resolve);
    spec.score_files
        .values_mut()
        .flat_map(|m| m.values_mut())
        .for_each(resolve);
    resolve(&mut spec.output_dir);
    Ok(spec)
}

/// Everything a run depends on, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub train_dataset_ids: Vec<String>,
    pub test_dataset_id: String,
    pub test_split: Split,
    pub test_trace_files: Vec<PathBuf>,
    pub mask: FeatureMask,
    pub training: TrainingConfig,
    pub merge_policy: MergePolicy,
    pub threshold: f64,
    pub topk_k: usize,
    pub random_seed: u64,
    pub random_positive_rate: f64,
    pub bootstrap: BootstrapConfig,
    pub methods: Vec<String>,
    pub n_train_examples: usize,
    pub n_train_examples_filtered_out: usize,
    pub n_train_tokens: usize,
    pub n_test_examples: usize,
    pub n_test_examples_filtered_out: usize,
    pub decisions: Vec<String>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        jsonl::read_object(path.as_ref())
    }
}

/// Training data pooled from several datasets.
#[derive(Debug, Clone)]
pub struct TrainingPool {
    pub set: TrainingSet,
    pub n_examples: usize,
    pub n_filtered_out: usize,
    pub positive_rate: f64,
}

/// Loads, filters, merges and projects the training split of every training
/// dataset.
pub fn build_training_pool(
    manifests: &[DatasetManifest],
    policy: &MergePolicy,
    mask: FeatureMask,
) -> Result<TrainingPool> {
    let mut tokens = Vec::new();
    let mut n_examples = 0;
    let mut n_filtered_out = 0;
    for m in manifests {
        let traces = m.load_split(Split::Train)?;
        let total = traces.len();
        let kept = filter_correct(traces);
        n_filtered_out += total - kept.len();
        n_examples += kept.len();
        for t in &kept {
            let merged = merge_rationales(t, policy)?;
            tokens.extend(project_labels(t, &merged.word_mask, mask)?);
        }
    }
    let positive_rate = compute_positive_rate(&tokens)?;
    Ok(TrainingPool {
        set: TrainingSet {
            tokens,
            mask,
            source_dataset_ids: manifests.iter().map(|m| m.dataset_id.clone()).collect(),
        },
        n_examples,
        n_filtered_out,
        positive_rate,
    })
}

fn load_manifests<'a>(
    spec: &ExperimentSpec,
    ids: impl IntoIterator<Item = &'a String>,
) -> Result<Vec<DatasetManifest>> {
    ids.into_iter()
        .map(|id| {
            let m = load_manifest(&spec.datasets[id])?;
            if &m.dataset_id != id {
                return Err(Error::Config(format!(
                    "manifest for `{id}` declares dataset_id `{}`",
                    m.dataset_id
                )));
            }
            Ok(m)
        })
        .collect()
}

/// Trains the explainer on the spec's training datasets only.
pub fn train_from_spec(spec: &ExperimentSpec) -> Result<(ExpNetModel, TrainingPool)> {
    spec.validate().stage("spec")?;
    let manifests = load_manifests(spec, &spec.train_dataset_ids).stage("load training manifests")?;
    let pool = build_training_pool(&manifests, &spec.merge_policy, spec.mask).stage("training data")?;
    let model = expnet::train(&pool.set, &spec.config).stage("train")?;
    debug_assert!(!model
        .train_meta
        .source_dataset_ids
        .contains(&spec.test_dataset_id));
    Ok((model, pool))
}

pub fn decisions() -> Vec<String> {
    [
        "features: raw attention, no renormalization of special-token mass",
        "features: tokens with null word_id are not candidates",
        "init: Xavier uniform weights, zero biases",
        "loss: focal loss, mean over tokens in each batch, p_t clamped to [1e-7, 1-1e-7]",
        "batching: tokens shuffled globally per epoch",
        "model selection: final epoch",
        "inference: threshold with argmax fallback, earliest token wins ties",
        "binarization: word level, negatives excluded, earlier position wins ties",
        "random baseline: word level, positive rate from training tokens",
        "evaluation: correct predictions only, word level, micro F1",
        "auroc: Mann-Whitney with ties counted 1/2; aupr: step-wise average precision",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Runs the full train, explain, evaluate pipeline and writes the run tree.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<EvalReport>> {
    let (model, pool) = train_from_spec(spec)?;

    let test_manifest = load_manifests(spec, [&spec.test_dataset_id])
        .stage("load test manifest")?
        .remove(0);
    let all_test = test_manifest.load_split(spec.test_split).stage("test data")?;
    if all_test.is_empty() {
        return Err(Error::EmptyInput("no test traces")).stage("test data");
    }
    let n_test_total = all_test.len();
    let test = filter_correct(all_test.clone());
    if test.is_empty() {
        return Err(Error::EmptyInput("no correctly predicted test traces")).stage("test data");
    }
    let gold: Vec<MergedRationale> = test
        .iter()
        .map(|t| merge_rationales(t, &spec.merge_policy))
        .collect::<Result<_>>()
        .stage("merge test rationales")?;

    let k = test_manifest.avg_rationale_k;
    let threshold = spec.config.threshold;
    let mut reports = Vec::with_capacity(spec.methods.len());
    let mut all_explanations = BTreeMap::new();
    for method in &spec.methods {
        let explanations = explain_method(spec, method, &model, &test, &all_test, k, pool.positive_rate)
            .stage(format!("explain `{method}`"))?;
        let scored: Vec<ScoredExample<'_>> = explanations
            .iter()
            .zip(&gold)
            .map(|(e, g)| ScoredExample {
                example_id: &e.example_id,
                word_mask: &e.word_mask,
                word_scores: &e.word_scores,
                gold: &g.word_mask,
            })
            .collect();
        let report = metrics::evaluate(method, &spec.test_dataset_id, &scored, &spec.bootstrap, true)
            .stage(format!("evaluate `{method}`"))?;
        reports.push(report);
        all_explanations.insert(method.clone(), explanations);
    }

    let out = &spec.output_dir;
    let manifest = RunManifest {
        toolkit_version: TOOLKIT_VERSION.into(),
        train_dataset_ids: spec.train_dataset_ids.clone(),
        test_dataset_id: spec.test_dataset_id.clone(),
        test_split: spec.test_split,
        test_trace_files: test_manifest.trace_paths(spec.test_split).to_vec(),
        mask: spec.mask,
        training: spec.config.clone(),
        merge_policy: spec.merge_policy.clone(),
        threshold,
        topk_k: k,
        random_seed: spec.random_seed,
        random_positive_rate: pool.positive_rate,
        bootstrap: spec.bootstrap,
        methods: spec.methods.clone(),
        n_train_examples: pool.n_examples,
        n_train_examples_filtered_out: pool.n_filtered_out,
        n_train_tokens: pool.set.tokens.len(),
        n_test_examples: test.len(),
        n_test_examples_filtered_out: n_test_total - test.len(),
        decisions: decisions(),
    };
    (|| {
        jsonl::write_object(&out.join("manifest.json"), &manifest)?;
        expnet::save_model(&model, out.join("model.json"))?;
        jsonl::write(&out.join("gold.jsonl"), &gold)?;
        for (method, expl) in &all_explanations {
            write_explanations(expl, out.join("explanations").join(format!("{method}.jsonl")))?;
        }
        for r in &reports {
            jsonl::write_object(&out.join("reports").join(format!("{}.json", r.method_id)), r)?;
        }
        Ok(())
    })()
    .stage("write outputs")?;
    Ok(reports)
}

fn explain_method(
    spec: &ExperimentSpec,
    method: &str,
    model: &ExpNetModel,
    test: &[AttentionTrace],
    all_test: &[AttentionTrace],
    k: usize,
    positive_rate: f64,
) -> Result<Vec<Explanation>> {
    match method {
        expnet::METHOD_ID => test
            .iter()
            .map(|t| expnet::predict(model, t, spec.config.threshold))
            .collect(),
        RANDOM_METHOD_ID => test
            .iter()
            .map(|t| random_baseline(t, positive_rate, spec.random_seed))
            .collect(),
        other => {
            let path = spec
                .score_file(other)
                .ok_or_else(|| Error::Config(format!("no score file for `{other}`")))?;
            let records = load_scores(path, all_test)?;
            let by_id: HashMap<&str, _> = records
                .iter()
                .filter(|r| r.method_id == other)
                .map(|r| (r.example_id.as_str(), r))
                .collect();
            test.iter()
                .map(|t| {
                    let r = by_id
                        .get(t.example_id.as_str())
                        .ok_or_else(|| Error::UnknownExample(t.example_id.clone()))?;
                    explain_from_scores(t, r, k)
                })
                .collect()
        }
    }
}

/// Runs every fold of the leave-one-task-out protocol.
pub fn run_leave_one_task_out(spec: &ExperimentSpec) -> Result<Vec<EvalReport>> {
    let mut all = Vec::new();
    for fold in spec.leave_one_task_out() {
        all.extend(run_experiment(&fold)?);
    }
    Ok(all)
}

/// Annotator-by-word matrix pooled over `traces`: one column per word of
/// every example, `None` where an annotator did not label that example.
pub fn annotation_matrix(traces: &[AttentionTrace]) -> (Vec<String>, Vec<Vec<Option<bool>>>) {
    let annotators: Vec<String> = traces
        .iter()
        .flat_map(|t| t.rationales.iter().map(|r| r.annotator_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows = vec![Vec::new(); annotators.len()];
    for t in traces {
        let n = t.num_words();
        for (a, id) in annotators.iter().enumerate() {
            match t.rationale(id) {
                Some(r) => rows[a].extend(r.mask.iter().map(|&b| Some(b))),
                None => rows[a].extend(std::iter::repeat_n(None, n)),
            }
        }
    }
    (annotators, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub dataset_id: String,
    pub n_examples: usize,
    pub annotators: Vec<String>,
    pub n_words: usize,
    pub alpha: f64,
}

/// Krippendorff's alpha per dataset present in `traces`.
pub fn agreement(traces: &[AttentionTrace]) -> Result<Vec<AgreementReport>> {
    let mut by_dataset: BTreeMap<&str, Vec<AttentionTrace>> = BTreeMap::new();
    for t in traces {
        by_dataset.entry(&t.dataset_id).or_default().push(t.clone());
    }
    by_dataset
        .into_iter()
        .map(|(id, ts)| {
            let (annotators, rows) = annotation_matrix(&ts);
            let alpha = metrics::krippendorff_alpha(&rows).stage(format!("agreement `{id}`"))?;
            Ok(AgreementReport {
                dataset_id: id.to_owned(),
                n_examples: ts.len(),
                n_words: rows.first().map_or(0, Vec::len),
                annotators,
                alpha,
            })
        })
        .collect()
}

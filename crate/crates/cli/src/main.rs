//! `expnet-kit`: validate traces, train and apply ExpNet, binarize external
//! attribution scores, run experiments and render their results.
//!
//! Exit status is 0 on success, 1 when an input file fails validation and 2
//! for any other error (including usage errors).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use expnet_core::baseline::{
    binarize_topk, explain_from_scores, load_scores, read_scores, write_explanations,
    write_explanations_to,
};
use expnet_core::expnet::{self, load_model, save_model};
use expnet_core::harness::{self, ExperimentSpec, ResultsTable};
use expnet_core::metrics::BootstrapConfig;
use expnet_core::synthetic;
use expnet_core::trace::load_traces;
use expnet_core::{Error, Explanation, FeatureMask, Granularity, MergePolicy, Split, TrainingConfig};

#[derive(Parser)]
#[command(name = "expnet-kit", version, about = "Attention-based token importance toolkit")]
struct Cli {
    /// Overrides every seed: training, random baseline, bootstrap, generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check trace files against every format invariant.
    Validate {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Train ExpNet on an experiment's training datasets.
    Train {
        spec: PathBuf,
        /// Model file; defaults to `<output_dir>/model.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every word of every trace with a trained model.
    Explain {
        model: PathBuf,
        traces: PathBuf,
        /// Defaults to the threshold recorded in the model.
        #[arg(long)]
        threshold: Option<f64>,
        /// Explanation file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn continuous attribution scores into top-K word masks.
    Binarize {
        scores: PathBuf,
        #[arg(long)]
        k: usize,
        /// Required for token-granularity scores; also checks lengths.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment: train, explain, evaluate and write the run tree.
    Evaluate {
        spec: PathBuf,
        /// Run every fold, holding out each dataset in turn.
        #[arg(long)]
        leave_one_out: bool,
    },
    /// Render results.json, results.md and highlight pages for a run.
    Report { run_dir: PathBuf },
    /// Krippendorff's alpha between annotators, per dataset.
    Agreement {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Write a three-dataset synthetic suite and a matching experiment spec.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        examples: usize,
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> expnet_core::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Validate { traces } => {
            for path in traces {
                let n = load_traces(&path)?.len();
                println!("{}: {n} traces ok", path.display());
            }
            Ok(())
        }
        Command::Train { spec, out } => {
            let spec = load_spec(&spec, seed)?;
            let (model, pool) = harness::train_from_spec(&spec)?;
            let out = out.unwrap_or_else(|| spec.output_dir.join("model.json"));
            save_model(&model, &out)?;
            println!(
                "trained on {} tokens from {} examples of [{}] (positive rate {:.4}) -> {}",
                pool.set.tokens.len(),
                pool.n_examples,
                spec.train_dataset_ids.join(", "),
                pool.positive_rate,
                out.display()
            );
            Ok(())
        }
        Command::Explain { model, traces, threshold, out } => {
            let model = load_model(&model)?;
            let threshold = threshold.unwrap_or(model.train_meta.config.threshold);
            let explanations = load_traces(&traces)?
                .iter()
                .map(|t| expnet::predict(&model, t, threshold))
                .collect::<expnet_core::Result<Vec<_>>>()?;
            emit(&explanations, out.as_deref())
        }
        Command::Binarize { scores, k, traces, out } => {
            let explanations = match traces {
                Some(tp) => {
                    let traces = load_traces(&tp)?;
                    let records = load_scores(&scores, &traces)?;
                    let by_id: BTreeMap<_, _> =
                        traces.iter().map(|t| (t.example_id.as_str(), t)).collect();
                    records
                        .iter()
                        .map(|r| explain_from_scores(by_id[r.example_id.as_str()], r, k))
                        .collect::<expnet_core::Result<Vec<_>>>()?
                }
                None => read_scores(&scores)?
                    .into_iter()
                    .map(|r| match r.granularity {
                        Granularity::Word => Ok(Explanation {
                            word_mask: binarize_topk(&r.scores, k),
                            example_id: r.example_id,
                            method_id: r.method_id,
                            token_scores: None,
                            word_scores: r.scores,
                        }),
                        Granularity::Token => Err(Error::Config(format!(
                            "token-granularity scores for `{}` need --traces",
                            r.example_id
                        ))),
                    })
                    .collect::<expnet_core::Result<Vec<_>>>()?,
            };
            emit(&explanations, out.as_deref())
        }
        Command::Evaluate { spec, leave_one_out } => {
            let spec = load_spec(&spec, seed)?;
            let reports = if leave_one_out {
                harness::run_leave_one_task_out(&spec)?
            } else {
                harness::run_experiment(&spec)?
            };
            print!("{}", ResultsTable::from_reports(&reports).to_markdown());
            println!("run written to {}", spec.output_dir.display());
            Ok(())
        }
        Command::Report { run_dir } => {
            let table = harness::report_run_dir(&run_dir)?;
            print!("{}", table.to_markdown());
            println!(
                "wrote {} and {}",
                run_dir.join("results.json").display(),
                run_dir.join("results.md").display()
            );
            Ok(())
        }
        Command::Agreement { traces } => {
            let mut all = Vec::new();
            for p in &traces {
                all.extend(load_traces(p)?);
            }
            let reports = harness::agreement(&all)?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(())
        }
        Command::Synth { out_dir, examples, test_fraction } => synth(&out_dir, examples, test_fraction, seed),
    }
}

fn load_spec(path: &Path, seed: Option<u64>) -> expnet_core::Result<ExperimentSpec> {
    let mut spec = harness::load_experiment_spec(path)?;
    if let Some(s) = seed {
        spec.config.seed = s;
        spec.random_seed = s;
        spec.bootstrap.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn emit(explanations: &[Explanation], out: Option<&Path>) -> expnet_core::Result<()> {
    match out {
        Some(p) => write_explanations(explanations, p),
        None => {
            let stdout = std::io::stdout().lock();
            let mut w = std::io::BufWriter::new(stdout);
            write_explanations_to(explanations, &mut w)?;
            w.flush().map_err(|e| Error::Config(format!("writing stdout: {e}")))
        }
    }
}

fn synth(out_dir: &Path, examples: usize, test_fraction: f64, seed: Option<u64>) -> expnet_core::Result<()> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut specs = synthetic::default_suite(seed.unwrap_or(0));
    for s in &mut specs {
        s.n_examples = examples;
    }
    let manifests = synthetic::write_suite(out_dir, &specs, test_fraction)?;
    let ids: Vec<String> = manifests.keys().cloned().collect();
    let spec = ExperimentSpec {
        datasets: ids
            .iter()
            .map(|id| (id.clone(), PathBuf::from(id).join("manifest.json")))
            .collect(),
        train_dataset_ids: ids[..ids.len() - 1].to_vec(),
        test_dataset_id: ids[ids.len() - 1].clone(),
        config: TrainingConfig::default(),
        mask: FeatureMask::Full,
        methods: vec![expnet::METHOD_ID.into(), expnet_core::baseline::RANDOM_METHOD_ID.into()],
        score_files: BTreeMap::new(),
        merge_policy: MergePolicy::Majority,
        bootstrap: BootstrapConfig::default(),
        random_seed: 0,
        test_split: Split::Test,
        output_dir: PathBuf::from("runs"),
    };
    let path = out_dir.join("experiment.json");
    let text = serde_json::to_string_pretty(&spec)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for (id, m) in &manifests {
        println!("{id}: {}", m.display());
    }
    println!("experiment spec: {}", path.display());
    Ok(())
}

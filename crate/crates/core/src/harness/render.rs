use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{read_explanations, Explanation};
use crate::error::{Error, Result, StageExt};
use crate::jsonl;
use crate::metrics::EvalReport;
use crate::trace::{filter_correct, load_traces, AttentionTrace};

use super::{MergedRationale, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsCell {
    pub f1: f64,
    pub f1_ci_low: f64,
    pub f1_ci_high: f64,
    pub precision: f64,
    pub recall: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub method_id: String,
    /// Keyed by dataset id; datasets the method was not run on are absent.
    pub cells: BTreeMap<String, ResultsCell>,
}

/// Methods by datasets, one F1 cell (with interval) per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub datasets: Vec<String>,
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let datasets: Vec<String> = reports
            .iter()
            .map(|r| r.dataset_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut rows: Vec<ResultsRow> = Vec::new();
        for r in reports {
            let idx = match rows.iter().position(|row| row.method_id == r.method_id) {
                Some(i) => i,
                None => {
                    rows.push(ResultsRow {
                        method_id: r.method_id.clone(),
                        cells: BTreeMap::new(),
                    });
                    rows.len() - 1
                }
            };
            rows[idx].cells.insert(
                r.dataset_id.clone(),
                ResultsCell {
                    f1: r.f1,
                    f1_ci_low: r.f1_ci_low,
                    f1_ci_high: r.f1_ci_high,
                    precision: r.precision,
                    recall: r.recall,
                    auroc: r.auroc,
                    aupr: r.aupr,
                    n_examples: r.n_examples,
                },
            );
        }
        ResultsTable { datasets, rows }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for d in &self.datasets {
            let _ = write!(s, " {d} F1 | {d} P | {d} R |");
        }
        s.push_str("\n|---|");
        for _ in &self.datasets {
            s.push_str("---|---|---|");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "| {} |", row.method_id);
            for d in &self.datasets {
                match row.cells.get(d) {
                    Some(c) => {
                        let _ = write!(
                            s,
                            " {:.3} [{:.3}, {:.3}] | {:.3} | {:.3} |",
                            c.f1, c.f1_ci_low, c.f1_ci_high, c.precision, c.recall
                        );
                    }
                    None => s.push_str(" - | - | - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Writes `results.json` and `results.md` into `out_dir`.
pub fn render_results_table(reports: &[EvalReport], out_dir: &Path) -> Result<ResultsTable> {
    let table = ResultsTable::from_reports(reports);
    jsonl::write_object(&out_dir.join("results.json"), &table)?;
    let md = out_dir.join("results.md");
    std::fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(table)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn page_file_name(example_id: &str) -> String {
    let stem: String = example_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{stem}.html")
}

fn highlight_row(out: &mut String, label: &str, words: &[String], mask: Option<&[bool]>) {
    let _ = write!(out, "<tr><th>{}</th><td>", escape(label));
    match mask {
        Some(mask) => {
            for (w, &on) in words.iter().zip(mask) {
                if on {
                    let _ = write!(out, "<mark>{}</mark> ", escape(w));
                } else {
                    let _ = write!(out, "<span>{}</span> ", escape(w));
                }
            }
        }
        None => out.push_str("<em>absent</em>"),
    }
    out.push_str("</td></tr>\n");
}

/// One static page per example showing the gold rationale and each method's
/// selected words. Methods without an explanation for an example are shown
/// as absent. Returns the number of pages written.
pub fn render_highlight_pages(
    traces: &[AttentionTrace],
    gold: &[MergedRationale],
    explanations: &BTreeMap<String, Vec<Explanation>>,
    methods: &[String],
    out_dir: &Path,
) -> Result<usize> {
    let html_dir = out_dir.join("html");
    std::fs::create_dir_all(&html_dir).map_err(|e| Error::io(&html_dir, e))?;
    let gold_by_id: HashMap<&str, &MergedRationale> =
        gold.iter().map(|g| (g.example_id.as_str(), g)).collect();
    let by_method: Vec<(&String, HashMap<&str, &Explanation>)> = methods
        .iter()
        .map(|m| {
            let map = explanations
                .get(m)
                .map(|es| es.iter().map(|e| (e.example_id.as_str(), e)).collect())
                .unwrap_or_default();
            (m, map)
        })
        .collect();

    let mut index = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Explanations</title></head><body>\n<ul>\n",
    );
    for t in traces {
        let words = t.words();
        let mut page = format!(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{id}</title>\n\
             <style>mark{{background:#ffd54f}} th{{text-align:left;padding-right:1em}}</style>\n\
             </head><body>\n<h1>{id}</h1>\n<p>dataset {ds}, gold label {g}, predicted {p}</p>\n<table>\n",
            id = escape(&t.example_id),
            ds = escape(&t.dataset_id),
            g = t.label_gold,
            p = t.label_pred,
        );
        let gold_mask = gold_by_id
            .get(t.example_id.as_str())
            .map(|g| g.word_mask.as_slice());
        highlight_row(&mut page, "gold", &words, gold_mask);
        for (m, map) in &by_method {
            let mask = map
                .get(t.example_id.as_str())
                .map(|e| e.word_mask.as_slice());
            highlight_row(&mut page, m, &words, mask);
        }
        page.push_str("</table>\n</body></html>\n");
        let name = page_file_name(&t.example_id);
        let path = html_dir.join(&name);
        std::fs::write(&path, page).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(
            index,
            "<li><a href=\"{}\">{}</a></li>",
            escape(&name),
            escape(&t.example_id)
        );
    }
    index.push_str("</ul>\n</body></html>\n");
    let path = html_dir.join("index.html");
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    Ok(traces.len())
}

/// Writes the results table and highlight pages into `out_dir`.
pub fn render_report(
    reports: &[EvalReport],
    traces: &[AttentionTrace],
    gold: &[MergedRationale],
    explanations: &BTreeMap<String, Vec<Explanation>>,
    out_dir: &Path,
) -> Result<ResultsTable> {
    let mut methods: Vec<String> = Vec::new();
    for m in reports
        .iter()
        .map(|r| &r.method_id)
        .chain(explanations.keys())
    {
        if !methods.contains(m) {
            methods.push(m.clone());
        }
    }
    let table = render_results_table(reports, out_dir)?;
    render_highlight_pages(traces, gold, explanations, &methods, out_dir)?;
    Ok(table)
}

fn experiment_dirs(run_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs = Vec::new();
    if run_dir.join("manifest.json").is_file() {
        dirs.push(run_dir.to_path_buf());
    }
    let entries = std::fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut subs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    subs.sort();
    dirs.extend(subs);
    Ok(dirs)
}

/// Renders a finished run directory: highlight pages inside every experiment
/// directory found (the run directory itself or its immediate
/// subdirectories) and one results table over all of them.
pub fn report_run_dir(run_dir: &Path) -> Result<ResultsTable> {
    let dirs = experiment_dirs(run_dir)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!(
            "no experiment manifest under {}",
            run_dir.display()
        )));
    }
    let mut all_reports = Vec::new();
    for dir in &dirs {
        let manifest = RunManifest::load(dir.join("manifest.json")).stage("read run manifest")?;
        let mut reports = Vec::new();
        let mut explanations = BTreeMap::new();
        for m in &manifest.methods {
            let rp = dir.join("reports").join(format!("{m}.json"));
            if rp.is_file() {
                reports.push(jsonl::read_object::<EvalReport>(&rp)?);
            }
            let ep = dir.join("explanations").join(format!("{m}.jsonl"));
            if ep.is_file() {
                explanations.insert(m.clone(), read_explanations(&ep)?);
            }
        }
        let gold: Vec<MergedRationale> = jsonl::read(&dir.join("gold.jsonl"))?
            .into_iter()
            .map(|(_, g)| g)
            .collect();
        let mut traces = Vec::new();
        for p in &manifest.test_trace_files {
            traces.extend(load_traces(p).stage("reload test traces")?);
        }
        let traces = filter_correct(traces);
        let mut methods = manifest.methods.clone();
        methods.retain(|m| explanations.contains_key(m) || reports.iter().any(|r| &r.method_id == m));
        render_highlight_pages(&traces, &gold, &explanations, &methods, dir)?;
        all_reports.extend(reports);
    }
    render_results_table(&all_reports, run_dir)
}

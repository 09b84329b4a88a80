//! Retrieval scoring: top-K accuracy, majority-vote confusion matrices,
//! macro precision/recall/F1 and the uncertain-query report.
//!
//! Precision, recall and F1 are computed one-vs-rest per class from the
//! majority-vote predictions, then macro-averaged. A class that is never
//! predicted gets precision 0 (likewise recall for a class with no queries).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Label, PatchRecord};
use crate::error::{dim_err, Error, Result};
use crate::network::Network;
use crate::store::{FeatureStore, Neighbor, RetrievalResult};
use crate::Scalar;

pub const BENIGN: Label = Label::Class(0);
pub const MALIGNANT: Label = Label::Class(1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub queries: usize,
    pub top_k_accuracy: f64,
    /// Macro averages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Keyed by class id.
    pub per_class_precision: BTreeMap<u32, f64>,
    pub per_class_recall: BTreeMap<u32, f64>,
    pub per_class_f1: BTreeMap<u32, f64>,
    /// Class ids in confusion-matrix order.
    pub classes: Vec<u32>,
    /// Rows are true classes, columns predicted classes.
    pub confusion_matrix: Vec<Vec<u64>>,
}

fn check_inputs<T: Scalar>(results: &[RetrievalResult<T>], query_labels: &[Label], k: usize) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Data("no queries to score".into()));
    }
    if results.len() != query_labels.len() {
        return Err(dim_err!(
            "query axis: {} results but {} query labels",
            results.len(),
            query_labels.len()
        ));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if let Some(r) = results.iter().find(|r| r.neighbors.is_empty()) {
        return Err(Error::Data(format!("query {} retrieved no neighbors", r.query_id)));
    }
    Ok(())
}

/// Fraction of queries with at least one correctly labeled neighbor among
/// their first `k`.
pub fn top_k_accuracy<T: Scalar>(results: &[RetrievalResult<T>], query_labels: &[Label], k: usize) -> Result<f64> {
    check_inputs(results, query_labels, k)?;
    let hits = results
        .iter()
        .zip(query_labels)
        .filter(|(r, &label)| r.labels().take(k).any(|l| l == label))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Label counts among the first `k` neighbors, in order of first appearance.
fn vote_counts<T: Scalar>(neighbors: &[Neighbor<T>], k: usize) -> Vec<(Label, usize)> {
    let mut counts: Vec<(Label, usize)> = Vec::new();
    for n in neighbors.iter().take(k) {
        match counts.iter_mut().find(|(l, _)| *l == n.label) {
            Some((_, c)) => *c += 1,
            None => counts.push((n.label, 1)),
        }
    }
    counts
}

/// Most frequent label among the first `k` neighbors. Ties go to the tied
/// label that appears nearest the query.
pub fn majority_vote_label<T: Scalar>(result: &RetrievalResult<T>, k: usize) -> Option<Label> {
    let counts = vote_counts(&result.neighbors, k);
    let best = counts.iter().map(|&(_, c)| c).max()?;
    // counts are in order of first appearance, so the first tied entry is the nearest
    counts.into_iter().find(|&(_, c)| c == best).map(|(l, _)| l)
}

/// `(votes for the winner - votes for the runner-up) / k`. For a binary
/// store this is `|benign - malignant| / k`.
pub fn vote_margin<T: Scalar>(result: &RetrievalResult<T>, k: usize) -> f64 {
    let mut counts: Vec<usize> = vote_counts(&result.neighbors, k).into_iter().map(|(_, c)| c).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let first = counts.first().copied().unwrap_or(0);
    let second = counts.get(1).copied().unwrap_or(0);
    (first - second) as f64 / k as f64
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_at_k<T: Scalar>(results: &[RetrievalResult<T>], query_labels: &[Label], k: usize) -> Result<MetricsReport> {
    check_inputs(results, query_labels, k)?;
    let mut classes: Vec<u32> = query_labels
        .iter()
        .map(|l| l.class().ok_or_else(|| Error::Data("uncertain queries cannot be scored".into())))
        .collect::<Result<_>>()?;
    classes.sort_unstable();
    classes.dedup();
    let index_of = |label: Label| -> Result<usize> {
        label
            .class()
            .and_then(|c| classes.binary_search(&c).ok())
            .ok_or_else(|| Error::Data(format!("label {label} is not one of the query classes {classes:?}")))
    };

    let n = classes.len();
    let mut cm = vec![vec![0u64; n]; n];
    for (r, &truth) in results.iter().zip(query_labels) {
        for l in r.labels().take(k) {
            index_of(l)?;
        }
        let predicted = majority_vote_label(r, k).expect("non-empty neighbor list");
        cm[index_of(truth)?][index_of(predicted)?] += 1;
    }

    let mut per_class_precision = BTreeMap::new();
    let mut per_class_recall = BTreeMap::new();
    let mut per_class_f1 = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        let tp = cm[i][i];
        let predicted: u64 = cm.iter().map(|row| row[i]).sum();
        let actual: u64 = cm[i].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        per_class_precision.insert(c, p);
        per_class_recall.insert(c, r);
        per_class_f1.insert(c, f1);
    }
    let mean = |m: &BTreeMap<u32, f64>| m.values().sum::<f64>() / n as f64;

    Ok(MetricsReport {
        k,
        queries: results.len(),
        top_k_accuracy: top_k_accuracy(results, query_labels, k)?,
        precision: mean(&per_class_precision),
        recall: mean(&per_class_recall),
        f1: mean(&per_class_f1),
        per_class_precision,
        per_class_recall,
        per_class_f1,
        classes,
        confusion_matrix: cm,
    })
}

impl MetricsReport {
    /// Confusion matrix as CSV with a `true\pred` corner cell.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in &self.classes {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.confusion_matrix) {
            let _ = write!(out, "{c}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Aligned text table, one row per K.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let classes: Vec<u32> = reports.first().map(|r| r.classes.clone()).unwrap_or_default();
    let mut out = format!("{:>4} {:>9} {:>9} {:>9} {:>9}", "K", "accuracy", "precision", "recall", "f1");
    for c in &classes {
        let _ = write!(out, " {:>9}", format!("f1[{c}]"));
    }
    out.push('\n');
    for r in reports {
        let _ = write!(
            out,
            "{:>4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.k, r.top_k_accuracy, r.precision, r.recall, r.f1
        );
        for c in &classes {
            let _ = write!(out, " {:>9.4}", r.per_class_f1.get(c).copied().unwrap_or(0.0));
        }
        out.push('\n');
    }
    out
}

/// A retrieval result together with its query's true label, the unit of the
/// persisted JSONL result files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ScoredQuery<T> {
    pub query_label: Label,
    pub result: RetrievalResult<T>,
}

pub fn write_results_jsonl<T: Scalar>(queries: &[ScoredQuery<T>], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for q in queries {
        serde_json::to_writer(&mut out, q)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_results_jsonl<T: Scalar>(path: &Path) -> Result<Vec<ScoredQuery<T>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

/// Embeds `queries`, retrieves `max(k_list)` neighbors each from `store`, and
/// scores every K in `k_list` on prefixes of the same ranked lists.
pub fn evaluate<T: Scalar>(
    network: &Network<T>,
    store: &FeatureStore<T>,
    queries: &[PatchRecord<T>],
    k_list: &[usize],
) -> Result<(Vec<ScoredQuery<T>>, Vec<MetricsReport>)> {
    let k_max = k_list.iter().copied().max().ok_or_else(|| Error::Config("empty K list".into()))?;
    let scored: Vec<ScoredQuery<T>> = queries
        .par_iter()
        .map(|q| {
            let v = network.embed(&q.pixels)?;
            Ok(ScoredQuery {
                query_label: q.label,
                result: RetrievalResult {
                    query_id: q.patch_id.clone(),
                    neighbors: store.query_top_k(&v, k_max, None)?,
                },
            })
        })
        .collect::<Result<_>>()?;
    let reports = score(&scored, k_list)?;
    Ok((scored, reports))
}

/// Metrics at each K from already retrieved results.
pub fn score<T: Scalar>(scored: &[ScoredQuery<T>], k_list: &[usize]) -> Result<Vec<MetricsReport>> {
    let results: Vec<RetrievalResult<T>> = scored.iter().map(|s| s.result.clone()).collect();
    let labels: Vec<Label> = scored.iter().map(|s| s.query_label).collect();
    k_list.iter().map(|&k| metrics_at_k(&results, &labels, k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct UncertainRow<T> {
    pub query_id: String,
    pub neighbors: Vec<Neighbor<T>>,
    pub benign_count: usize,
    pub malignant_count: usize,
    pub suggested_label: Label,
    /// `|benign_count - malignant_count| / k`
    pub margin_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct UncertainReport<T = f64> {
    pub k: usize,
    pub per_query: Vec<UncertainRow<T>>,
}

/// Queries held-out uncertain patches against a benign/malignant store and
/// reports the label split among each query's `k` nearest patches.
pub fn uncertain_query_report<T: Scalar>(
    store: &FeatureStore<T>,
    network: &Network<T>,
    uncertain_patches: &[PatchRecord<T>],
    k: usize,
) -> Result<UncertainReport<T>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if let Some(r) = store.records().iter().find(|r| r.label != BENIGN && r.label != MALIGNANT) {
        return Err(Error::Protocol(format!(
            "store record {} has label {}, only benign (0) and malignant (1) are allowed",
            r.patch_id, r.label
        )));
    }
    if store.len() < k {
        return Err(Error::Data(format!("store holds {} records, fewer than k = {k}", store.len())));
    }
    if let Some(p) = uncertain_patches.iter().find(|p| store.get(&p.patch_id).is_some()) {
        return Err(Error::Protocol(format!("query {} is also present in the store", p.patch_id)));
    }
    let per_query = uncertain_patches
        .par_iter()
        .map(|p| {
            let v = network.embed(&p.pixels)?;
            let result = RetrievalResult {
                query_id: p.patch_id.clone(),
                neighbors: store.query_top_k(&v, k, None)?,
            };
            let benign_count = result.labels().filter(|&l| l == BENIGN).count();
            let malignant_count = k - benign_count;
            Ok(UncertainRow {
                suggested_label: majority_vote_label(&result, k).expect("k >= 1 neighbors"),
                margin_score: benign_count.abs_diff(malignant_count) as f64 / k as f64,
                query_id: result.query_id,
                neighbors: result.neighbors,
                benign_count,
                malignant_count,
            })
        })
        .collect::<Result<_>>()?;
    Ok(UncertainReport { k, per_query })
}

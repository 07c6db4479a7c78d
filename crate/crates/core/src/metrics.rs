//! Task metrics and the leaderboard aggregate.
//!
//! Retrieval is scored by AveR (the mean of Recall@1/5/10 as a percentage),
//! QA by accuracy, and captioning by CIDEr-D (consensus TF-IDF n-gram
//! similarity with count clipping and a Gaussian length penalty). The
//! Meta-Ave aggregate is the unweighted arithmetic mean over all eleven
//! per-task values, rounded half-up to two decimals at the report boundary;
//! internal arithmetic is never rounded.

use crate::corpus::{ExamplePayload, DatasetBundle, SplitId, TaskId, TaskKind, ALL_TASKS};
use crate::heads::Predictions;
use crate::textenc::split_words;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_RECALL_KS: [usize; 3] = [1, 5, 10];
const CIDER_MAX_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    AveR,
    Accuracy,
    Cider,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::AveR => "ave_r",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Cider => "cider",
        }
    }

    /// The fixed task-kind to metric mapping.
    pub fn for_task_kind(kind: TaskKind) -> MetricKind {
        match kind {
            TaskKind::Retrieval => MetricKind::AveR,
            TaskKind::Qa => MetricKind::Accuracy,
            TaskKind::Captioning => MetricKind::Cider,
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gold item missing from the ranked candidate universe")]
    GoldMissing,
    #[error("prediction and gold lists have different lengths ({predictions} vs {golds})")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("candidate {id} has no references")]
    EmptyReferenceSet { id: String },
    #[error("missing tasks in report: {0:?}")]
    MissingTask(Vec<TaskId>),
    #[error("prediction references unknown record {0}")]
    UnmatchedRecord(String),
    #[error("report value out of range for {task}: {value}")]
    ValueOutOfRange { task: TaskId, value: f64 },
}

/// 1 iff `gold` appears within the first `k` ranked entries. The gold item
/// must exist somewhere in the ranking (the candidate universe).
pub fn recall_at_k<T: PartialEq>(ranked: &[T], gold: &T, k: usize) -> Result<u8, MetricsError> {
    assert!(k >= 1, "k must be >= 1");
    let position = ranked.iter().position(|item| item == gold);
    match position {
        None => Err(MetricsError::GoldMissing),
        Some(pos) => Ok(u8::from(pos < k)),
    }
}

/// AveR over queries: `100 * mean_q mean_k recall@k`, with the K set
/// configurable (defaults to {1, 5, 10}).
pub fn ave_r_with_ks<T: PartialEq>(
    results: &[(Vec<T>, T)],
    ks: &[usize],
) -> Result<f64, MetricsError> {
    assert!(!results.is_empty(), "ave_r needs at least one query");
    assert!(!ks.is_empty());
    let mut total = 0.0;
    for (ranked, gold) in results {
        let mut per_query = 0.0;
        for &k in ks {
            per_query += recall_at_k(ranked, gold, k)? as f64;
        }
        total += per_query / ks.len() as f64;
    }
    Ok(100.0 * total / results.len() as f64)
}

pub fn ave_r<T: PartialEq>(results: &[(Vec<T>, T)]) -> Result<f64, MetricsError> {
    ave_r_with_ks(results, &DEFAULT_RECALL_KS)
}

/// Percentage of exact matches between aligned prediction and gold lists.
pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    assert!(!predictions.is_empty(), "accuracy needs at least one item");
    let matches = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count();
    Ok(100.0 * matches as f64 / predictions.len() as f64)
}

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-n term-frequency vectors for one sentence, plus the bigram-token
/// count that drives the length penalty.
struct SentenceVec {
    tf: Vec<BTreeMap<Ngram, f64>>,
    norm: Vec<f64>,
    length: usize,
}

/// Per-n document frequencies over the reference corpus. An n-gram's
/// document frequency is the number of ids whose reference set contains it,
/// so it never exceeds the corpus size.
#[derive(Debug, Clone)]
pub struct NgramStats {
    pub doc_freq: Vec<BTreeMap<Ngram, usize>>,
    pub corpus_size: usize,
}

impl NgramStats {
    pub fn from_references(references: &BTreeMap<String, Vec<String>>) -> Self {
        let mut doc_freq = vec![BTreeMap::new(); CIDER_MAX_N];
        for refs in references.values() {
            let mut seen: Vec<std::collections::BTreeSet<Ngram>> =
                vec![std::collections::BTreeSet::new(); CIDER_MAX_N];
            for text in refs {
                let tokens = split_words(text);
                for n in 1..=CIDER_MAX_N {
                    for ngram in ngram_counts(&tokens, n).into_keys() {
                        seen[n - 1].insert(ngram);
                    }
                }
            }
            for n in 0..CIDER_MAX_N {
                for ngram in &seen[n] {
                    *doc_freq[n].entry(ngram.clone()).or_insert(0) += 1;
                }
            }
        }
        Self {
            doc_freq,
            corpus_size: references.len(),
        }
    }
}

fn sentence_vec(text: &str, stats: &NgramStats, log_corpus: f64) -> SentenceVec {
    let tokens = split_words(text);
    let mut tf = Vec::with_capacity(CIDER_MAX_N);
    let mut norm = Vec::with_capacity(CIDER_MAX_N);
    let mut length = 0usize;
    for n in 1..=CIDER_MAX_N {
        let mut vec_n = BTreeMap::new();
        let mut norm_n = 0.0;
        for (ngram, count) in ngram_counts(&tokens, n) {
            let df = stats.doc_freq[n - 1].get(&ngram).copied().unwrap_or(0);
            let idf = log_corpus - (df.max(1) as f64).ln();
            let weighted = count as f64 * idf;
            norm_n += weighted * weighted;
            if n == 2 {
                length += count;
            }
            vec_n.insert(ngram, weighted);
        }
        tf.push(vec_n);
        norm.push(norm_n.sqrt());
    }
    SentenceVec { tf, norm, length }
}

fn similarity(hyp: &SentenceVec, reference: &SentenceVec) -> [f64; CIDER_MAX_N] {
    let delta = hyp.length as f64 - reference.length as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; CIDER_MAX_N];
    for n in 0..CIDER_MAX_N {
        let mut value = 0.0;
        for (ngram, &h) in &hyp.tf[n] {
            if let Some(&r) = reference.tf[n].get(ngram) {
                value += h.min(r) * r;
            }
        }
        if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
            value /= hyp.norm[n] * reference.norm[n];
        }
        out[n] = value * penalty;
    }
    out
}

/// CIDEr-D score per candidate id. The corpus for document frequencies is
/// the full reference map, so scores are consensus-weighted across ids.
pub fn cider_per_id(
    candidates: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    assert!(!references.is_empty(), "cider needs a nonempty corpus");
    for (id, refs) in references {
        if refs.is_empty() {
            return Err(MetricsError::EmptyReferenceSet { id: id.clone() });
        }
    }
    let stats = NgramStats::from_references(references);
    let log_corpus = (stats.corpus_size as f64).ln();

    let mut out = BTreeMap::new();
    for (id, text) in candidates {
        let refs = references
            .get(id)
            .ok_or_else(|| MetricsError::EmptyReferenceSet { id: id.clone() })?;
        let hyp = sentence_vec(text, &stats, log_corpus);
        let mut acc = [0.0; CIDER_MAX_N];
        for reference in refs {
            let ref_vec = sentence_vec(reference, &stats, log_corpus);
            let sim = similarity(&hyp, &ref_vec);
            for n in 0..CIDER_MAX_N {
                acc[n] += sim[n];
            }
        }
        let mean_n: f64 = acc.iter().sum::<f64>() / CIDER_MAX_N as f64;
        out.insert(id.clone(), mean_n / refs.len() as f64 * 10.0);
    }
    Ok(out)
}

/// Corpus-level CIDEr-D: the mean of per-id scores over all candidates.
pub fn cider(
    candidates: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<f64, MetricsError> {
    assert!(!candidates.is_empty(), "cider needs at least one candidate");
    let per_id = cider_per_id(candidates, references)?;
    Ok(per_id.values().sum::<f64>() / per_id.len() as f64)
}

/// Round half-up to two decimals; used only at report boundaries.
pub fn round2(value: f64) -> f64 {
    (value * 100.0).round() / 100.0
}

/// Unweighted arithmetic mean over all eleven per-task values, rounded
/// half-up to two decimals.
pub fn meta_ave(values: &BTreeMap<TaskId, f64>) -> Result<f64, MetricsError> {
    let missing: Vec<TaskId> = ALL_TASKS
        .iter()
        .copied()
        .filter(|t| !values.contains_key(t))
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingTask(missing));
    }
    let sum: f64 = ALL_TASKS.iter().map(|t| values[t]).sum();
    Ok(round2(sum / ALL_TASKS.len() as f64))
}

/// Per-task metric values plus the aggregate; one leaderboard row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub values: BTreeMap<TaskId, (MetricKind, f64)>,
    pub meta_ave: Option<f64>,
}

impl ScoreReport {
    pub fn insert(&mut self, task: TaskId, value: f64) -> Result<(), MetricsError> {
        let kind = MetricKind::for_task_kind(task.kind());
        let in_range = match kind {
            MetricKind::AveR | MetricKind::Accuracy => (0.0..=100.0).contains(&value),
            MetricKind::Cider => value >= 0.0,
        };
        if !value.is_finite() || !in_range {
            return Err(MetricsError::ValueOutOfRange { task, value });
        }
        self.values.insert(task, (kind, value));
        Ok(())
    }

    /// Compute and store the aggregate once all eleven tasks are present.
    pub fn finalize_meta_ave(&mut self) -> Result<f64, MetricsError> {
        let plain: BTreeMap<TaskId, f64> =
            self.values.iter().map(|(t, (_, v))| (*t, *v)).collect();
        let value = meta_ave(&plain)?;
        self.meta_ave = Some(value);
        Ok(value)
    }

    /// JSON form: one key per task plus an optional `meta_ave` key.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (task, (kind, value)) in &self.values {
            map.insert(
                task.as_str().to_string(),
                serde_json::json!({"metric": kind.as_str(), "value": value}),
            );
        }
        if let Some(meta) = self.meta_ave {
            map.insert("meta_ave".into(), serde_json::json!(meta));
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, MetricsError> {
        let mut report = ScoreReport::default();
        let object = value
            .as_object()
            .ok_or_else(|| MetricsError::UnmatchedRecord("report must be an object".into()))?;
        for (key, entry) in object {
            if key == "meta_ave" {
                report.meta_ave = entry.as_f64();
                continue;
            }
            let task = TaskId::parse(key)
                .ok_or_else(|| MetricsError::UnmatchedRecord(format!("unknown task {key}")))?;
            let value = entry
                .get("value")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| MetricsError::UnmatchedRecord(format!("no value for {key}")))?;
            report.insert(task, value)?;
        }
        Ok(report)
    }

    /// Merge another report's per-task values into this one.
    pub fn merge(&mut self, other: &ScoreReport) {
        for (task, (kind, value)) in &other.values {
            self.values.insert(*task, (*kind, *value));
        }
    }
}

/// Score a prediction set against the gold records of one bundle split.
pub fn score_predictions(
    bundle: &DatasetBundle,
    split: SplitId,
    predictions: &Predictions,
) -> Result<(MetricKind, f64), MetricsError> {
    let examples = bundle.examples(split);
    match predictions {
        Predictions::Retrieval(preds) => {
            let mut gold_by_query: BTreeMap<&str, &str> = BTreeMap::new();
            for ex in examples {
                if let ExamplePayload::Retrieval {
                    query_id,
                    positive_video_id,
                    ..
                } = &ex.payload
                {
                    gold_by_query.insert(query_id, positive_video_id);
                }
            }
            let mut results = Vec::with_capacity(preds.len());
            for p in preds {
                let gold = gold_by_query
                    .get(p.query_id.as_str())
                    .ok_or_else(|| MetricsError::UnmatchedRecord(p.query_id.clone()))?;
                results.push((p.ranked_video_ids.clone(), gold.to_string()));
            }
            Ok((MetricKind::AveR, ave_r(&results)?))
        }
        Predictions::Qa(preds) => {
            let mut gold_by_id: BTreeMap<&str, usize> = BTreeMap::new();
            for ex in examples {
                if let ExamplePayload::Qa { gold_index, .. } = &ex.payload {
                    gold_by_id.insert(&ex.example_id, *gold_index);
                }
            }
            let mut predicted = Vec::with_capacity(preds.len());
            let mut golds = Vec::with_capacity(preds.len());
            for p in preds {
                let gold = gold_by_id
                    .get(p.example_id.as_str())
                    .ok_or_else(|| MetricsError::UnmatchedRecord(p.example_id.clone()))?;
                predicted.push(p.predicted_index);
                golds.push(*gold);
            }
            Ok((MetricKind::Accuracy, accuracy(&predicted, &golds)?))
        }
        Predictions::Captioning(preds) => {
            let mut references: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for ex in examples {
                if let ExamplePayload::Captioning {
                    video_id,
                    references: refs,
                } = &ex.payload
                {
                    references
                        .entry(video_id.clone())
                        .or_default()
                        .extend(refs.iter().cloned());
                }
            }
            let mut candidates = BTreeMap::new();
            for p in preds {
                if !references.contains_key(&p.video_id) {
                    return Err(MetricsError::UnmatchedRecord(p.video_id.clone()));
                }
                candidates.insert(p.video_id.clone(), p.caption_text.clone());
            }
            Ok((MetricKind::Cider, cider(&candidates, &references)?))
        }
    }
}

/// Leaderboard rendering: one row per named report, columns in fixed task
/// order plus Meta-Ave, per-column maxima marked with `*`. Deterministic
/// byte-for-byte for identical input.
pub fn render_table(reports: &[(String, ScoreReport)]) -> String {
    assert!(!reports.is_empty());
    let mut columns: Vec<String> = vec!["Method".to_string()];
    columns.extend(ALL_TASKS.iter().map(|t| t.label().to_string()));
    columns.push("Meta-Ave".to_string());

    // Column maxima over present values.
    let mut best: Vec<Option<f64>> = vec![None; ALL_TASKS.len() + 1];
    for (_, report) in reports {
        for (i, task) in ALL_TASKS.iter().enumerate() {
            if let Some((_, v)) = report.values.get(task) {
                best[i] = Some(best[i].map_or(*v, |b: f64| b.max(*v)));
            }
        }
        if let Some(m) = report.meta_ave {
            let i = ALL_TASKS.len();
            best[i] = Some(best[i].map_or(m, |b: f64| b.max(m)));
        }
    }

    let mut rows: Vec<Vec<String>> = vec![columns.clone()];
    for (name, report) in reports {
        let mut row = vec![name.clone()];
        for (i, task) in ALL_TASKS.iter().enumerate() {
            row.push(match report.values.get(task) {
                None => "-".to_string(),
                Some((_, v)) => {
                    let mark = if Some(round2(*v)) == best[i].map(round2) {
                        "*"
                    } else {
                        ""
                    };
                    format!("{:.2}{mark}", round2(*v))
                }
            });
        }
        row.push(match report.meta_ave {
            None => "-".to_string(),
            Some(m) => {
                let i = ALL_TASKS.len();
                let mark = if Some(round2(m)) == best[i].map(round2) {
                    "*"
                } else {
                    ""
                };
                format!("{:.2}{mark}", round2(m))
            }
        });
        rows.push(row);
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut cells = Vec::with_capacity(row.len());
        for (c, cell) in row.iter().enumerate() {
            cells.push(format!("{:>width$}", cell, width = widths[c]));
        }
        let _ = writeln!(out, "{}", cells.join(" | "));
    }
    out
}

/// Machine-readable form of the same table.
pub fn table_json(reports: &[(String, ScoreReport)]) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = reports
        .iter()
        .map(|(name, report)| {
            let mut object = serde_json::Map::new();
            object.insert("method".into(), serde_json::json!(name));
            object.insert("report".into(), report.to_json());
            serde_json::Value::Object(object)
        })
        .collect();
    serde_json::Value::Array(rows)
}

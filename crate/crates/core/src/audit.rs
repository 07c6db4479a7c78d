//! Cross-task split-leakage detection.
//!
//! Evaluation content that also appears in a training pool inflates scores.
//! The auditor fingerprints every textual payload of every bundle, then
//! reports each eval-side fingerprint matching a train-side fingerprint from
//! a different (task, split) pair — either verbatim (after canonicalization)
//! or as a near-duplicate on the same video.

use crate::corpus::{DatasetBundle, ExamplePayload, SplitId, TaskId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

/// Lowercase, strip punctuation, collapse whitespace. Two payloads that
/// differ only in case, punctuation, or spacing canonicalize identically.
pub fn canonicalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
        } else {
            pending_space = true;
        }
    }
    out
}

fn hash_canonical(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// Where a fingerprint came from: task, split, record, and which payload of
/// the record (QA items fold question and candidates into one payload).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FingerprintSource {
    pub task_id: TaskId,
    pub split: SplitId,
    pub example_id: String,
    pub payload_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub hash: String,
    pub video_id: String,
    pub source: FingerprintSource,
    /// Canonical payload, kept for token-overlap matching.
    pub canonical: String,
}

/// Payload texts of one example as fingerprinted: retrieval → the query
/// text; QA → question plus candidates as one payload; captioning → one
/// payload per reference.
fn payloads(payload: &ExamplePayload) -> Vec<String> {
    match payload {
        ExamplePayload::Retrieval { query_text, .. } => vec![query_text.clone()],
        ExamplePayload::Qa {
            question_text,
            candidates,
            ..
        } => {
            let mut joined = question_text.clone();
            for c in candidates {
                joined.push(' ');
                joined.push_str(c);
            }
            vec![joined]
        }
        ExamplePayload::Captioning { references, .. } => references.clone(),
    }
}

/// One fingerprint per textual payload per example, across all splits.
pub fn fingerprint_bundle(bundle: &DatasetBundle) -> Vec<Fingerprint> {
    let mut out = Vec::new();
    for (split, examples) in &bundle.splits {
        for ex in examples {
            for (payload_index, text) in payloads(&ex.payload).iter().enumerate() {
                let canonical = canonicalize(text);
                out.push(Fingerprint {
                    hash: hash_canonical(&canonical),
                    video_id: ex.payload.video_id().to_string(),
                    source: FingerprintSource {
                        task_id: bundle.task_id,
                        split: *split,
                        example_id: ex.example_id.clone(),
                        payload_index,
                    },
                    canonical,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    ExactText,
    SameVideoTextOverlap,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LeakEntry {
    pub eval_side: FingerprintSource,
    pub train_side: FingerprintSource,
    pub match_kind: MatchKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    pub entries: Vec<LeakEntry>,
}

impl LeakReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries per (eval task, train task) pair.
    pub fn counts_by_task_pair(&self) -> BTreeMap<(TaskId, TaskId), usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts
                .entry((e.eval_side.task_id, e.train_side.task_id))
                .or_insert(0) += 1;
        }
        counts
    }

    pub fn summary(&self) -> String {
        if self.entries.is_empty() {
            return "no leaks detected\n".to_string();
        }
        let mut out = format!("{} leak(s) detected\n", self.entries.len());
        for ((eval, train), n) in self.counts_by_task_pair() {
            let _ = writeln!(out, "  eval {eval} <- train {train}: {n}");
        }
        out
    }
}

fn token_set(canonical: &str) -> BTreeSet<&str> {
    canonical.split(' ').filter(|t| !t.is_empty()).collect()
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.8;

/// Report every eval-side fingerprint that matches a train-side fingerprint
/// from a different (task, split) pair, either by canonical hash or by
/// sharing a video with token-Jaccard at or above `threshold`. Ordering is
/// deterministic.
pub fn audit_overlap(
    eval_bundles: &[&DatasetBundle],
    train_bundles: &[&DatasetBundle],
) -> LeakReport {
    audit_overlap_with_threshold(eval_bundles, train_bundles, DEFAULT_JACCARD_THRESHOLD)
}

pub fn audit_overlap_with_threshold(
    eval_bundles: &[&DatasetBundle],
    train_bundles: &[&DatasetBundle],
    threshold: f64,
) -> LeakReport {
    let eval_fps: Vec<Fingerprint> = eval_bundles
        .iter()
        .flat_map(|b| fingerprint_bundle(b))
        .collect();
    let train_fps: Vec<Fingerprint> = train_bundles
        .iter()
        .flat_map(|b| fingerprint_bundle(b))
        .collect();
    audit_fingerprints(&eval_fps, &train_fps, threshold)
}

/// Core matcher over pre-computed fingerprints.
pub fn audit_fingerprints(
    eval_fps: &[Fingerprint],
    train_fps: &[Fingerprint],
    threshold: f64,
) -> LeakReport {
    let mut by_hash: HashMap<&str, Vec<&Fingerprint>> = HashMap::new();
    let mut by_video: HashMap<&str, Vec<&Fingerprint>> = HashMap::new();
    for fp in train_fps {
        by_hash.entry(fp.hash.as_str()).or_default().push(fp);
        by_video.entry(fp.video_id.as_str()).or_default().push(fp);
    }

    let mut entries = BTreeSet::new();
    for eval_fp in eval_fps {
        let eval_pair = (eval_fp.source.task_id, eval_fp.source.split);
        if let Some(matches) = by_hash.get(eval_fp.hash.as_str()) {
            for train_fp in matches {
                if (train_fp.source.task_id, train_fp.source.split) == eval_pair {
                    continue;
                }
                entries.insert(LeakEntry {
                    eval_side: eval_fp.source.clone(),
                    train_side: train_fp.source.clone(),
                    match_kind: MatchKind::ExactText,
                });
            }
        }
        if let Some(candidates) = by_video.get(eval_fp.video_id.as_str()) {
            let eval_tokens = token_set(&eval_fp.canonical);
            for train_fp in candidates {
                if (train_fp.source.task_id, train_fp.source.split) == eval_pair {
                    continue;
                }
                if train_fp.hash == eval_fp.hash {
                    continue; // already reported as exact
                }
                let train_tokens = token_set(&train_fp.canonical);
                if jaccard(&eval_tokens, &train_tokens) >= threshold {
                    entries.insert(LeakEntry {
                        eval_side: eval_fp.source.clone(),
                        train_side: train_fp.source.clone(),
                        match_kind: MatchKind::SameVideoTextOverlap,
                    });
                }
            }
        }
    }

    LeakReport {
        entries: entries.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskExample;
    use crate::fixtures::{self, FixtureConfig};

    #[test]
    fn canonicalization_folds_case_punctuation_and_spacing() {
        assert_eq!(canonicalize("Hello,   World!"), "hello world");
        assert_eq!(canonicalize("a--b c"), "a b c");
        assert_eq!(canonicalize("  ...  "), "");
        assert_eq!(
            hash_canonical(&canonicalize("The cat; sat")),
            hash_canonical(&canonicalize("the CAT sat!!"))
        );
    }

    #[test]
    fn fingerprints_cover_every_payload() {
        let cfg = FixtureConfig::new(TaskId::Tvqa, 3).with_counts(4, 2, 1);
        let bundle = fixtures::generate_bundle(&cfg);
        let fps = fingerprint_bundle(&bundle);
        // QA folds question+candidates into one payload per example.
        let expected: usize = bundle.splits.values().map(Vec::len).sum();
        assert_eq!(fps.len(), expected);

        let cfg = FixtureConfig::new(TaskId::Yc2c, 4).with_counts(3, 1, 0);
        let mut bundle = fixtures::generate_bundle(&cfg);
        // Give one example an extra reference; payload count follows.
        if let ExamplePayload::Captioning { references, .. } = &mut bundle
            .splits
            .get_mut(&SplitId::Train)
            .unwrap()[0]
            .payload
        {
            references.push("another caption".into());
        }
        let oracle: usize = bundle
            .splits
            .values()
            .flatten()
            .map(|ex| match &ex.payload {
                ExamplePayload::Captioning { references, .. } => references.len(),
                _ => 1,
            })
            .sum();
        assert_eq!(fingerprint_bundle(&bundle).len(), oracle);
    }

    #[test]
    fn empty_bundle_yields_no_fingerprints() {
        let cfg = FixtureConfig::new(TaskId::Tvr, 5).with_counts(1, 0, 0);
        let mut bundle = fixtures::generate_bundle(&cfg);
        bundle.splits.get_mut(&SplitId::Train).unwrap().clear();
        assert!(fingerprint_bundle(&bundle).is_empty());
    }

    #[test]
    fn disjoint_bundles_produce_empty_report() {
        let a = fixtures::generate_bundle(&FixtureConfig::new(TaskId::VatexEnR, 10));
        let b = fixtures::generate_bundle(&FixtureConfig::new(TaskId::VatexEnC, 11));
        let report = audit_overlap(&[&a], &[&b]);
        assert!(report.is_empty(), "{:?}", report.entries);
    }

    #[test]
    fn planted_eval_query_in_other_tasks_train_is_reported_once() {
        let eval = fixtures::generate_bundle(&FixtureConfig::new(TaskId::VatexEnR, 20));
        let mut train = fixtures::generate_bundle(&FixtureConfig::new(TaskId::VatexEnC, 21));

        let leaked_text = match &eval.splits[&SplitId::Val][0].payload {
            ExamplePayload::Retrieval { query_text, .. } => query_text.clone(),
            _ => unreachable!(),
        };
        let victim_video = train.videos.keys().next().unwrap().clone();
        train
            .splits
            .get_mut(&SplitId::Train)
            .unwrap()
            .push(TaskExample {
                example_id: "planted".into(),
                payload: ExamplePayload::Captioning {
                    video_id: victim_video,
                    references: vec![leaked_text],
                },
            });

        let report = audit_overlap(&[&eval], &[&train]);
        let exact: Vec<&LeakEntry> = report
            .entries
            .iter()
            .filter(|e| e.match_kind == MatchKind::ExactText)
            .collect();
        assert_eq!(exact.len(), 1);
        let entry = exact[0];
        assert_eq!(entry.eval_side.task_id, TaskId::VatexEnR);
        assert_eq!(entry.eval_side.split, SplitId::Val);
        assert_eq!(entry.train_side.task_id, TaskId::VatexEnC);
        assert_eq!(entry.train_side.split, SplitId::Train);
        assert_eq!(entry.train_side.example_id, "planted");
    }

    #[test]
    fn swapping_sides_mirrors_the_report() {
        let a = fixtures::generate_bundle(&FixtureConfig::new(TaskId::Tvr, 30));
        let mut b = fixtures::generate_bundle(&FixtureConfig::new(TaskId::How2r, 31));
        let text = match &a.splits[&SplitId::Val][1].payload {
            ExamplePayload::Retrieval { query_text, .. } => query_text.clone(),
            _ => unreachable!(),
        };
        let vid = b.videos.keys().next().unwrap().clone();
        b.splits
            .get_mut(&SplitId::Train)
            .unwrap()
            .push(TaskExample {
                example_id: "copy".into(),
                payload: ExamplePayload::Retrieval {
                    query_id: "copy".into(),
                    query_text: text,
                    positive_video_id: vid,
                    moment: None,
                },
            });

        let fwd = audit_overlap(&[&a], &[&b]);
        let rev = audit_overlap(&[&b], &[&a]);
        let mirrored: BTreeSet<(FingerprintSource, FingerprintSource, MatchKind)> = rev
            .entries
            .iter()
            .map(|e| (e.train_side.clone(), e.eval_side.clone(), e.match_kind))
            .collect();
        let forward: BTreeSet<(FingerprintSource, FingerprintSource, MatchKind)> = fwd
            .entries
            .iter()
            .map(|e| (e.eval_side.clone(), e.train_side.clone(), e.match_kind))
            .collect();
        assert_eq!(forward, mirrored);
        assert!(!forward.is_empty());
    }

    #[test]
    fn adding_clean_examples_never_removes_entries() {
        let a = fixtures::generate_bundle(&FixtureConfig::new(TaskId::Tvr, 40));
        let mut b = fixtures::generate_bundle(&FixtureConfig::new(TaskId::Yc2r, 41));
        let text = match &a.splits[&SplitId::Val][0].payload {
            ExamplePayload::Retrieval { query_text, .. } => query_text.clone(),
            _ => unreachable!(),
        };
        let vid = b.videos.keys().next().unwrap().clone();
        b.splits
            .get_mut(&SplitId::Train)
            .unwrap()
            .push(TaskExample {
                example_id: "copy".into(),
                payload: ExamplePayload::Retrieval {
                    query_id: "copy".into(),
                    query_text: text,
                    positive_video_id: vid.clone(),
                    moment: None,
                },
            });
        let before = audit_overlap(&[&a], &[&b]);

        for i in 0..20 {
            b.splits
                .get_mut(&SplitId::Train)
                .unwrap()
                .push(TaskExample {
                    example_id: format!("clean{i}"),
                    payload: ExamplePayload::Retrieval {
                        query_id: format!("clean{i}"),
                        query_text: format!("totally unrelated fresh text number {i}"),
                        positive_video_id: vid.clone(),
                        moment: None,
                    },
                });
        }
        let after = audit_overlap(&[&a], &[&b]);
        for e in &before.entries {
            assert!(after.entries.contains(e));
        }
    }

    #[test]
    fn same_video_near_duplicate_is_flagged_below_exact() {
        let mut a = fixtures::generate_bundle(&FixtureConfig::new(TaskId::Tvc, 50));
        let mut b = fixtures::generate_bundle(&FixtureConfig::new(TaskId::Yc2c, 51));
        // Same video id in both bundles, near-identical caption text.
        let shared = "shared_video".to_string();
        let vf = a.videos.values().next().unwrap().clone();
        let mut vf_a = vf.clone();
        vf_a.video_id = shared.clone();
        a.videos.insert(shared.clone(), vf_a.clone());
        b.videos.insert(shared.clone(), vf_a);
        a.splits.get_mut(&SplitId::Val).unwrap().push(TaskExample {
            example_id: "near_a".into(),
            payload: ExamplePayload::Captioning {
                video_id: shared.clone(),
                references: vec!["a person opens the door and walks outside now".into()],
            },
        });
        b.splits
            .get_mut(&SplitId::Train)
            .unwrap()
            .push(TaskExample {
                example_id: "near_b".into(),
                payload: ExamplePayload::Captioning {
                    video_id: shared,
                    references: vec!["A person opens the door and walks outside".into()],
                },
            });
        let report = audit_overlap(&[&a], &[&b]);
        assert!(report
            .entries
            .iter()
            .any(|e| e.match_kind == MatchKind::SameVideoTextOverlap
                && e.eval_side.example_id == "near_a"
                && e.train_side.example_id == "near_b"));
    }
}

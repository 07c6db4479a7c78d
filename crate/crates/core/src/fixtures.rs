//! Seeded synthetic bundles for tests, demos, and desk-scale training runs.
//!
//! Real benchmark datasets are consumed through the same file formats; the
//! generator exists so every pipeline stage can be exercised without them.

use crate::corpus::{
    DatasetBundle, ExamplePayload, FeatureNamespace, NamespaceName, SplitId, SubtitleSegment,
    TaskExample, TaskId, TaskKind, VideoFeatures,
};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

const WORDS: [&str; 32] = [
    "person", "walks", "table", "red", "dog", "jumps", "kitchen", "opens", "door", "ball",
    "slowly", "street", "green", "holds", "cup", "window", "talks", "phone", "runs", "park",
    "small", "box", "closes", "light", "turns", "water", "pours", "plate", "sits", "chair",
    "looks", "camera",
];

#[derive(Debug, Clone)]
pub struct FixtureConfig {
    pub task_id: TaskId,
    pub seed: u64,
    pub num_videos: usize,
    pub feature_dim: usize,
    pub namespace: NamespaceName,
    pub min_frames: usize,
    pub max_frames: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub with_subtitles: bool,
    pub candidates_per_question: usize,
}

impl FixtureConfig {
    pub fn new(task_id: TaskId, seed: u64) -> Self {
        // VATEX-style bundles carry no subtitle track.
        let with_subtitles = !matches!(task_id, TaskId::VatexEnR | TaskId::VatexEnC);
        Self {
            task_id,
            seed,
            num_videos: 8,
            feature_dim: 32,
            namespace: NamespaceName::ClipVitSlowfast,
            min_frames: 2,
            max_frames: 6,
            train: 8,
            val: 4,
            test: 4,
            with_subtitles,
            candidates_per_question: 3,
        }
    }

    pub fn with_counts(mut self, train: usize, val: usize, test: usize) -> Self {
        self.train = train;
        self.val = val;
        self.test = test;
        self
    }

    pub fn with_namespace(mut self, namespace: NamespaceName, dim: usize) -> Self {
        self.namespace = namespace;
        self.feature_dim = dim;
        self
    }

    pub fn with_videos(mut self, n: usize) -> Self {
        self.num_videos = n;
        self
    }

    pub fn with_subtitles(mut self, yes: bool) -> Self {
        self.with_subtitles = yes;
        self
    }
}

fn sentence(rng: &mut ChaCha20Rng, salt: &str, words: usize) -> String {
    let mut parts = vec![salt.to_string()];
    for _ in 0..words {
        parts.push(WORDS[rng.gen_range(0..WORDS.len())].to_string());
    }
    parts.join(" ")
}

/// Generate a validated, deterministic bundle for one task.
///
/// Split texts are salted with the split name so splits are disjoint by
/// construction; the per-example salt token makes examples distinguishable.
pub fn generate_bundle(cfg: &FixtureConfig) -> DatasetBundle {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let namespace = FeatureNamespace {
        name: cfg.namespace,
        dim: cfg.feature_dim,
    };

    let mut videos = BTreeMap::new();
    let mut subtitles: BTreeMap<String, Vec<SubtitleSegment>> = BTreeMap::new();
    for i in 0..cfg.num_videos {
        let video_id = format!("{}_v{:03}", cfg.task_id, i);
        let frames = rng.gen_range(cfg.min_frames..=cfg.max_frames);
        let mat = Array2::from_shape_fn((frames, cfg.feature_dim), |_| {
            rng.gen_range(-1.0f32..1.0)
        });
        videos.insert(
            video_id.clone(),
            VideoFeatures {
                video_id: video_id.clone(),
                namespace,
                frames: mat,
            },
        );
        if cfg.with_subtitles {
            let n_segs = rng.gen_range(1..=2.min(frames));
            let mut segs = Vec::new();
            let mut cursor = 0usize;
            for s in 0..n_segs {
                if cursor >= frames {
                    break;
                }
                let end = rng.gen_range(cursor..frames);
                segs.push(SubtitleSegment {
                    video_id: video_id.clone(),
                    start_frame: cursor,
                    end_frame: end,
                    text: sentence(&mut rng, &format!("sub{i}{s}"), 3),
                });
                cursor = end + 1;
            }
            subtitles.insert(video_id, segs);
        }
    }
    let video_ids: Vec<String> = videos.keys().cloned().collect();

    let mut splits = BTreeMap::new();
    for (split, count) in [
        (SplitId::Train, cfg.train),
        (SplitId::Val, cfg.val),
        (SplitId::Test, cfg.test),
    ] {
        if count == 0 {
            continue;
        }
        let mut examples = Vec::new();
        for i in 0..count {
            let vid = video_ids[i % video_ids.len()].clone();
            let salt = format!("{}{}{}", cfg.task_id.as_str().replace('_', ""), split, i);
            let payload = match cfg.task_id.kind() {
                TaskKind::Retrieval => ExamplePayload::Retrieval {
                    query_id: format!("{}_{}_q{:03}", cfg.task_id, split, i),
                    query_text: sentence(&mut rng, &salt, 4),
                    positive_video_id: vid,
                    moment: None,
                },
                TaskKind::Qa => {
                    let n = cfg.candidates_per_question.max(2);
                    let candidates: Vec<String> = (0..n)
                        .map(|c| sentence(&mut rng, &format!("{salt}c{c}"), 3))
                        .collect();
                    ExamplePayload::Qa {
                        question_text: sentence(&mut rng, &salt, 4),
                        candidates,
                        gold_index: rng.gen_range(0..n),
                        video_id: vid,
                    }
                }
                TaskKind::Captioning => ExamplePayload::Captioning {
                    video_id: vid,
                    references: vec![sentence(&mut rng, &salt, 3)],
                },
            };
            examples.push(TaskExample {
                example_id: format!("{}_{}_e{:03}", cfg.task_id, split, i),
                payload,
            });
        }
        splits.insert(split, examples);
    }

    DatasetBundle {
        task_id: cfg.task_id,
        splits,
        videos,
        subtitles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_bundle;

    #[test]
    fn generated_bundles_are_valid_and_deterministic() {
        for task in crate::corpus::ALL_TASKS {
            let cfg = FixtureConfig::new(task, 42);
            let a = generate_bundle(&cfg);
            let b = generate_bundle(&cfg);
            assert!(validate_bundle(&a).is_empty(), "task {task}");
            assert_eq!(a.splits, b.splits);
            for (vid, vf) in &a.videos {
                assert_eq!(vf.frames, b.videos[vid].frames);
            }
        }
    }

    #[test]
    fn vatex_fixtures_have_no_subtitles() {
        let bundle = generate_bundle(&FixtureConfig::new(TaskId::VatexEnC, 7));
        assert!(bundle.subtitles.is_empty());
        let bundle = generate_bundle(&FixtureConfig::new(TaskId::Tvr, 7));
        assert!(!bundle.subtitles.is_empty());
    }
}

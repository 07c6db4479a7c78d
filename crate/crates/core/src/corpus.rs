//! Dataset-facing domain types, portable on-disk formats, and validation.
//!
//! A [`DatasetBundle`] is the unit of work for a task: per-split example
//! records, video feature matrices under a named feature family, and an
//! optional subtitle track per video. Bundles are immutable once loaded and
//! safe to share across threads.
//!
//! On-disk layout of a bundle directory:
//!
//! ```text
//! <dir>/features.json          feature manifest (namespace, dim, video list)
//! <dir>/features/<vid>.f32     raw little-endian f32, row-major, F*D values
//! <dir>/subtitles.jsonl        one SubtitleSegment per line (optional)
//! <dir>/<task>.<split>.jsonl   one TaskExample per line, per present split
//! ```

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// The eleven benchmark tasks, in leaderboard column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Tvr,
    How2r,
    Yc2r,
    VatexEnR,
    Tvqa,
    How2qa,
    Violin,
    Vlep,
    Tvc,
    Yc2c,
    VatexEnC,
}

pub const ALL_TASKS: [TaskId; 11] = [
    TaskId::Tvr,
    TaskId::How2r,
    TaskId::Yc2r,
    TaskId::VatexEnR,
    TaskId::Tvqa,
    TaskId::How2qa,
    TaskId::Violin,
    TaskId::Vlep,
    TaskId::Tvc,
    TaskId::Yc2c,
    TaskId::VatexEnC,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Retrieval,
    Qa,
    Captioning,
}

impl TaskId {
    pub fn kind(self) -> TaskKind {
        match self {
            TaskId::Tvr | TaskId::How2r | TaskId::Yc2r | TaskId::VatexEnR => TaskKind::Retrieval,
            TaskId::Tvqa | TaskId::How2qa | TaskId::Violin | TaskId::Vlep => TaskKind::Qa,
            TaskId::Tvc | TaskId::Yc2c | TaskId::VatexEnC => TaskKind::Captioning,
        }
    }

    /// Stable lowercase identifier used in file names and CLI flags.
    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Tvr => "tvr",
            TaskId::How2r => "how2r",
            TaskId::Yc2r => "yc2r",
            TaskId::VatexEnR => "vatex_en_r",
            TaskId::Tvqa => "tvqa",
            TaskId::How2qa => "how2qa",
            TaskId::Violin => "violin",
            TaskId::Vlep => "vlep",
            TaskId::Tvc => "tvc",
            TaskId::Yc2c => "yc2c",
            TaskId::VatexEnC => "vatex_en_c",
        }
    }

    /// Display label matching the leaderboard column header.
    pub fn label(self) -> &'static str {
        match self {
            TaskId::Tvr => "TVR",
            TaskId::How2r => "How2R",
            TaskId::Yc2r => "YC2R",
            TaskId::VatexEnR => "VATEX-EN-R",
            TaskId::Tvqa => "TVQA",
            TaskId::How2qa => "How2QA",
            TaskId::Violin => "VIOLIN",
            TaskId::Vlep => "VLEP",
            TaskId::Tvc => "TVC",
            TaskId::Yc2c => "YC2C",
            TaskId::VatexEnC => "VATEX-EN-C",
        }
    }

    pub fn parse(s: &str) -> Option<TaskId> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ALL_TASKS.iter().copied().find(|t| t.as_str() == norm)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitId {
    Train,
    Val,
    Test,
}

pub const ALL_SPLITS: [SplitId; 3] = [SplitId::Train, SplitId::Val, SplitId::Test];

impl SplitId {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitId::Train => "train",
            SplitId::Val => "val",
            SplitId::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<SplitId> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(SplitId::Train),
            "val" => Some(SplitId::Val),
            "test" => Some(SplitId::Test),
            _ => None,
        }
    }
}

impl fmt::Display for SplitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The visual feature family a bundle carries. Features are produced
/// externally; this crate only consumes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamespaceName {
    ClipVitSlowfast,
    ResnetSlowfast,
}

impl NamespaceName {
    pub fn as_str(self) -> &'static str {
        match self {
            NamespaceName::ClipVitSlowfast => "clip_vit_slowfast",
            NamespaceName::ResnetSlowfast => "resnet_slowfast",
        }
    }

    pub fn parse(s: &str) -> Option<NamespaceName> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clip_vit_slowfast" => Some(NamespaceName::ClipVitSlowfast),
            "resnet_slowfast" => Some(NamespaceName::ResnetSlowfast),
            _ => None,
        }
    }
}

impl fmt::Display for NamespaceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureNamespace {
    pub name: NamespaceName,
    pub dim: usize,
}

/// Frame-level feature matrix for one video: `F` frames by `dim` channels.
/// Stored as f32 so that decode/encode round-trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub namespace: FeatureNamespace,
    pub frames: Array2<f32>,
}

impl VideoFeatures {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtitleSegment {
    pub video_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub text: String,
}

/// One example record. The payload shape depends on the task kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    /// Record identifier; synthesized from file position when absent.
    #[serde(default)]
    pub example_id: String,
    #[serde(flatten)]
    pub payload: ExamplePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExamplePayload {
    Retrieval {
        query_id: String,
        query_text: String,
        positive_video_id: String,
        /// Optional moment span `[start_frame, end_frame]`, inclusive.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        moment: Option<(usize, usize)>,
    },
    Qa {
        question_text: String,
        candidates: Vec<String>,
        gold_index: usize,
        video_id: String,
    },
    Captioning {
        video_id: String,
        references: Vec<String>,
    },
}

impl ExamplePayload {
    pub fn kind(&self) -> TaskKind {
        match self {
            ExamplePayload::Retrieval { .. } => TaskKind::Retrieval,
            ExamplePayload::Qa { .. } => TaskKind::Qa,
            ExamplePayload::Captioning { .. } => TaskKind::Captioning,
        }
    }

    pub fn video_id(&self) -> &str {
        match self {
            ExamplePayload::Retrieval {
                positive_video_id, ..
            } => positive_video_id,
            ExamplePayload::Qa { video_id, .. } => video_id,
            ExamplePayload::Captioning { video_id, .. } => video_id,
        }
    }

    /// All textual payloads of the record, in declaration order.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            ExamplePayload::Retrieval { query_text, .. } => vec![query_text.as_str()],
            ExamplePayload::Qa {
                question_text,
                candidates,
                ..
            } => {
                let mut v = vec![question_text.as_str()];
                v.extend(candidates.iter().map(String::as_str));
                v
            }
            ExamplePayload::Captioning { references, .. } => {
                references.iter().map(String::as_str).collect()
            }
        }
    }
}

impl TaskExample {
    /// Identity used for split-disjointness: canonicalized payload text plus
    /// the referenced video. Canonicalization matches the audit module.
    pub fn identity(&self, task_id: TaskId) -> String {
        let canon = crate::audit::canonicalize(&self.payload.texts().join(" "));
        format!("{}|{}|{}", task_id, canon, self.payload.video_id())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub task_id: TaskId,
    pub splits: BTreeMap<SplitId, Vec<TaskExample>>,
    pub videos: BTreeMap<String, VideoFeatures>,
    pub subtitles: BTreeMap<String, Vec<SubtitleSegment>>,
}

impl DatasetBundle {
    pub fn examples(&self, split: SplitId) -> &[TaskExample] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn subtitles_for(&self, video_id: &str) -> &[SubtitleSegment] {
        self.subtitles
            .get(video_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Every textual payload in the bundle, across all splits and subtitles.
    pub fn all_texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for examples in self.splits.values() {
            for ex in examples {
                out.extend(ex.payload.texts());
            }
        }
        for segs in self.subtitles.values() {
            out.extend(segs.iter().map(|s| s.text.as_str()));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },
    #[error("feature file {path} has {actual} bytes, expected {expected} (F*D*4)")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite feature value in video {video_id}")]
    NonFinite { video_id: String },
    #[error("duplicate video id {video_id}")]
    DuplicateVideoId { video_id: String },
    #[error("bundle validation failed with {} violation(s); first: {first}", .violations.len())]
    Invalid {
        violations: Vec<Violation>,
        first: String,
    },
    #[error("no split files found for task {task} in {dir}")]
    NoSplits { task: TaskId, dir: PathBuf },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A single validation finding: which record broke which rule.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub record: String,
    pub rule: RuleKind,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    DanglingVideoRef,
    SchemaError,
    SpanOutOfRange,
    SplitOverlap,
}

impl RuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::DanglingVideoRef => "dangling_video_ref",
            RuleKind::SchemaError => "schema_error",
            RuleKind::SpanOutOfRange => "span_out_of_range",
            RuleKind::SplitOverlap => "split_overlap",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureManifest {
    namespace: String,
    dim: usize,
    videos: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    video_id: String,
    num_frames: usize,
    path: String,
}

/// Load a feature manifest plus the raw matrices it references.
///
/// Raw files are little-endian f32, row-major (frame-major), exactly
/// `F * D * 4` bytes, no header.
pub fn load_features(manifest_path: &Path) -> Result<BTreeMap<String, VideoFeatures>, CorpusError> {
    let text =
        fs::read_to_string(manifest_path).map_err(|e| CorpusError::io(manifest_path, e))?;
    let manifest: FeatureManifest =
        serde_json::from_str(&text).map_err(|e| CorpusError::Schema {
            path: manifest_path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let namespace_name =
        NamespaceName::parse(&manifest.namespace).ok_or_else(|| CorpusError::Schema {
            path: manifest_path.to_path_buf(),
            detail: format!("unknown feature namespace {:?}", manifest.namespace),
        })?;
    if manifest.dim == 0 {
        return Err(CorpusError::Schema {
            path: manifest_path.to_path_buf(),
            detail: "feature dim must be >= 1".into(),
        });
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let namespace = FeatureNamespace {
        name: namespace_name,
        dim: manifest.dim,
    };

    let mut out = BTreeMap::new();
    for entry in &manifest.videos {
        let raw_path = base.join(&entry.path);
        let bytes = fs::read(&raw_path).map_err(|e| CorpusError::io(&raw_path, e))?;
        let expected = entry.num_frames * manifest.dim * 4;
        if bytes.len() != expected {
            return Err(CorpusError::SizeMismatch {
                path: raw_path,
                expected,
                actual: bytes.len(),
            });
        }
        if entry.num_frames == 0 {
            return Err(CorpusError::Schema {
                path: raw_path,
                detail: format!("video {} declares zero frames", entry.video_id),
            });
        }
        let mut values = Vec::with_capacity(entry.num_frames * manifest.dim);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(CorpusError::NonFinite {
                    video_id: entry.video_id.clone(),
                });
            }
            values.push(v);
        }
        let frames = Array2::from_shape_vec((entry.num_frames, manifest.dim), values)
            .expect("byte count already checked");
        let features = VideoFeatures {
            video_id: entry.video_id.clone(),
            namespace,
            frames,
        };
        if out.insert(entry.video_id.clone(), features).is_some() {
            return Err(CorpusError::DuplicateVideoId {
                video_id: entry.video_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Write a feature manifest and raw files under `dir`, returning the
/// manifest path. Inverse of [`load_features`].
pub fn write_features(
    dir: &Path,
    videos: &BTreeMap<String, VideoFeatures>,
) -> Result<PathBuf, CorpusError> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| CorpusError::io(&feat_dir, e))?;
    let mut entries = Vec::new();
    let mut namespace: Option<FeatureNamespace> = None;
    for (vid, vf) in videos {
        match namespace {
            None => namespace = Some(vf.namespace),
            Some(ns) => assert_eq!(
                ns, vf.namespace,
                "all videos in one manifest must share a namespace"
            ),
        }
        let rel = format!("features/{vid}.f32");
        let raw_path = dir.join(&rel);
        let mut bytes = Vec::with_capacity(vf.frames.len() * 4);
        for &v in vf.frames.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&raw_path, bytes).map_err(|e| CorpusError::io(&raw_path, e))?;
        entries.push(ManifestEntry {
            video_id: vid.clone(),
            num_frames: vf.num_frames(),
            path: rel,
        });
    }
    let namespace = namespace.expect("write_features requires at least one video");
    let manifest = FeatureManifest {
        namespace: namespace.name.as_str().to_string(),
        dim: namespace.dim,
        videos: entries,
    };
    let manifest_path = dir.join("features.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| CorpusError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            path: path.to_path_buf(),
            detail: format!("line {}: {}", lineno + 1, e),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let mut file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    Ok(())
}

/// Load a full bundle from a directory and validate it. Any violation makes
/// the load fail; use [`validate_bundle`] directly to inspect findings.
pub fn load_task_data(task_id: TaskId, dir: &Path) -> Result<DatasetBundle, CorpusError> {
    let videos = load_features(&dir.join("features.json"))?;

    let subtitle_path = dir.join("subtitles.jsonl");
    let mut subtitles: BTreeMap<String, Vec<SubtitleSegment>> = BTreeMap::new();
    if subtitle_path.exists() {
        for seg in read_jsonl::<SubtitleSegment>(&subtitle_path)? {
            subtitles.entry(seg.video_id.clone()).or_default().push(seg);
        }
    }

    let mut splits = BTreeMap::new();
    for split in ALL_SPLITS {
        let path = dir.join(format!("{}.{}.jsonl", task_id.as_str(), split.as_str()));
        if !path.exists() {
            continue;
        }
        let mut examples = read_jsonl::<TaskExample>(&path)?;
        for (i, ex) in examples.iter_mut().enumerate() {
            if ex.example_id.is_empty() {
                ex.example_id = default_example_id(task_id, split, i, &ex.payload);
            }
            if ex.payload.kind() != task_id.kind() {
                return Err(CorpusError::Schema {
                    path: path.clone(),
                    detail: format!(
                        "record {} has kind {:?}, task {} expects {:?}",
                        ex.example_id,
                        ex.payload.kind(),
                        task_id,
                        task_id.kind()
                    ),
                });
            }
        }
        splits.insert(split, examples);
    }
    if splits.is_empty() {
        return Err(CorpusError::NoSplits {
            task: task_id,
            dir: dir.to_path_buf(),
        });
    }

    let bundle = DatasetBundle {
        task_id,
        splits,
        videos,
        subtitles,
    };
    let violations = validate_bundle(&bundle);
    if !violations.is_empty() {
        let first = format!("{}: {}", violations[0].record, violations[0].detail);
        return Err(CorpusError::Invalid { violations, first });
    }
    Ok(bundle)
}

fn default_example_id(
    task_id: TaskId,
    split: SplitId,
    index: usize,
    payload: &ExamplePayload,
) -> String {
    match payload {
        ExamplePayload::Retrieval { query_id, .. } => query_id.clone(),
        _ => format!("{}.{}.{}", task_id, split, index),
    }
}

/// Write a bundle to `dir` in the portable layout. Inverse of
/// [`load_task_data`] for well-formed bundles.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    write_features(dir, &bundle.videos)?;
    let mut segs: Vec<&SubtitleSegment> = bundle.subtitles.values().flatten().collect();
    segs.sort_by(|a, b| {
        (&a.video_id, a.start_frame, a.end_frame).cmp(&(&b.video_id, b.start_frame, b.end_frame))
    });
    if !segs.is_empty() {
        write_jsonl(&dir.join("subtitles.jsonl"), &segs)?;
    }
    for (split, examples) in &bundle.splits {
        let path = dir.join(format!("{}.{}.jsonl", bundle.task_id.as_str(), split.as_str()));
        write_jsonl(&path, examples)?;
    }
    Ok(())
}

/// Check every bundle invariant, returning violations as data. The list is
/// sorted by record id, then rule name, so output is deterministic.
pub fn validate_bundle(bundle: &DatasetBundle) -> Vec<Violation> {
    let mut violations = Vec::new();

    // Subtitle spans against the referenced video.
    for (vid, segs) in &bundle.subtitles {
        for (i, seg) in segs.iter().enumerate() {
            let record = format!("subtitle:{vid}:{i}");
            match bundle.videos.get(&seg.video_id) {
                None => violations.push(Violation {
                    record,
                    rule: RuleKind::DanglingVideoRef,
                    detail: format!("subtitle references unknown video {}", seg.video_id),
                }),
                Some(vf) => {
                    if seg.start_frame > seg.end_frame || seg.end_frame >= vf.num_frames() {
                        violations.push(Violation {
                            record,
                            rule: RuleKind::SpanOutOfRange,
                            detail: format!(
                                "subtitle span [{}, {}] invalid for {} frames",
                                seg.start_frame,
                                seg.end_frame,
                                vf.num_frames()
                            ),
                        });
                    }
                }
            }
        }
    }

    // Per-example rules.
    for (split, examples) in &bundle.splits {
        for ex in examples {
            let record = format!("{}:{}", split, ex.example_id);
            let vid = ex.payload.video_id();
            let video = bundle.videos.get(vid);
            if video.is_none() {
                violations.push(Violation {
                    record: record.clone(),
                    rule: RuleKind::DanglingVideoRef,
                    detail: format!("example references unknown video {vid}"),
                });
            }
            match &ex.payload {
                ExamplePayload::Retrieval { moment, .. } => {
                    if let (Some((start, end)), Some(vf)) = (moment, video) {
                        if start > end || *end >= vf.num_frames() {
                            violations.push(Violation {
                                record: record.clone(),
                                rule: RuleKind::SpanOutOfRange,
                                detail: format!(
                                    "moment span [{start}, {end}] invalid for {} frames",
                                    vf.num_frames()
                                ),
                            });
                        }
                    }
                }
                ExamplePayload::Qa {
                    candidates,
                    gold_index,
                    ..
                } => {
                    if candidates.len() < 2 {
                        violations.push(Violation {
                            record: record.clone(),
                            rule: RuleKind::SchemaError,
                            detail: format!("qa needs >=2 candidates, got {}", candidates.len()),
                        });
                    }
                    if *gold_index >= candidates.len() {
                        violations.push(Violation {
                            record: record.clone(),
                            rule: RuleKind::SchemaError,
                            detail: format!(
                                "gold_index {} out of range for {} candidates",
                                gold_index,
                                candidates.len()
                            ),
                        });
                    }
                }
                ExamplePayload::Captioning { references, .. } => {
                    if references.is_empty() {
                        violations.push(Violation {
                            record: record.clone(),
                            rule: RuleKind::SchemaError,
                            detail: "captioning needs >=1 reference".into(),
                        });
                    }
                }
            }
        }
    }

    // Split disjointness by example identity.
    let mut seen: BTreeMap<String, (SplitId, String)> = BTreeMap::new();
    for (split, examples) in &bundle.splits {
        for ex in examples {
            let identity = ex.identity(bundle.task_id);
            match seen.get(&identity) {
                Some((other_split, other_id)) if other_split != split => {
                    violations.push(Violation {
                        record: format!("{}:{}", split, ex.example_id),
                        rule: RuleKind::SplitOverlap,
                        detail: format!(
                            "same identity as {}:{} in split {}",
                            other_split, other_id, other_split
                        ),
                    });
                }
                Some(_) => {}
                None => {
                    seen.insert(identity, (*split, ex.example_id.clone()));
                }
            }
        }
    }

    violations.sort_by(|a, b| {
        (&a.record, a.rule.as_str())
            .cmp(&(&b.record, b.rule.as_str()))
            .then_with(|| a.detail.cmp(&b.detail))
    });
    violations.dedup();
    violations
}

/// Distinct split ids that carry at least one example.
pub fn populated_splits(bundle: &DatasetBundle) -> BTreeSet<SplitId> {
    bundle
        .splits
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, _)| *k)
        .collect()
}

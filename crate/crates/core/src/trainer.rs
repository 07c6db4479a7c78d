//! Training: the Adam optimizer, checkpointing, the per-task finetuning
//! strategy table, deterministic batch scheduling, the train step, and a
//! finite-difference gradient verification harness.

use crate::backbone::{encode_video_node, BackboneError};
use crate::corpus::{
    DatasetBundle, ExamplePayload, NamespaceName, SplitId, TaskId, TaskKind,
};
use crate::heads;
use crate::model::{EncoderKind, FwdCtx, ModelConfig, ModelState, param_specs};
use crate::tensor::NodeId;
use crate::textenc::{tokenize, TextError, Vocabulary};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step} on task {task}")]
    NonFiniteLoss {
        step: usize,
        task: TaskId,
        loss: f64,
    },
    #[error("task {task} declares finetune split {split} but it is empty or absent")]
    EmptySplit { task: TaskId, split: SplitId },
    #[error("checkpoint fingerprint {found} does not match expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("checkpoint is missing parameter {name}")]
    MissingParameter { name: String },
    #[error("checkpoint carries unknown parameter {name}")]
    UnknownParameter { name: String },
    #[error("strategy for {task} expects {expected} features but the bundle carries {found}")]
    NamespaceConflict {
        task: TaskId,
        expected: NamespaceName,
        found: NamespaceName,
    },
    #[error("invalid strategy config: {0}")]
    InvalidStrategy(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Text(#[from] TextError),
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
}

/// Adam slots. Moments materialize lazily per parameter, so a parameter
/// untouched by a task's loss receives no state and no update.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    slots: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn touched(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }
}

/// Decoupled-weight-decay Adam step over the given gradients, with global
/// gradient-norm clipping. Only parameters present in `grads` are updated.
pub fn adam_step(
    state: &mut ModelState,
    grads: &BTreeMap<String, Array2<f64>>,
    opt: &mut AdamState,
    hyper: &AdamHyper,
) {
    let global_norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let clip_scale = if global_norm > hyper.grad_clip {
        hyper.grad_clip / global_norm
    } else {
        1.0
    };

    for (name, grad) in grads {
        let slot = opt.slots.entry(name.clone()).or_insert_with(|| Moments {
            m: Array2::zeros(grad.dim()),
            v: Array2::zeros(grad.dim()),
            t: 0,
        });
        slot.t += 1;
        let g = grad * clip_scale;
        slot.m = &slot.m * hyper.beta1 + &g * (1.0 - hyper.beta1);
        slot.v = &slot.v * hyper.beta2 + &(&g * &g) * (1.0 - hyper.beta2);
        let bias1 = 1.0 - hyper.beta1.powi(slot.t as i32);
        let bias2 = 1.0 - hyper.beta2.powi(slot.t as i32);
        let param = state.get_mut(name);
        for ((p, &m), &v) in param.iter_mut().zip(slot.m.iter()).zip(slot.v.iter()) {
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            *p -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * *p);
        }
    }
}

// ---------------------------------------------------------------------------
// Finetuning strategies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    St,
    AtSt,
    Mixed,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::St => "st",
            StrategyKind::AtSt => "at_st",
            StrategyKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<StrategyKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "st" => Some(StrategyKind::St),
            "at_st" | "at-st" | "atst" => Some(StrategyKind::AtSt),
            "mixed" => Some(StrategyKind::Mixed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    St,
    At,
    AtThenSt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Scratch,
    HeroCheckpoint,
    ClipTextCheckpoint,
}

/// Per-task finetuning recipe: regime, feature family, which splits feed
/// training, initialization, and the text front end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub task_id: TaskId,
    pub regime: Regime,
    pub feature_namespace: NamespaceName,
    pub finetune_splits: BTreeSet<SplitId>,
    pub init: InitKind,
    pub text_encoder: EncoderKind,
}

/// Tasks allowed to fold their validation split into finetuning.
pub const TRAIN_VAL_TASKS: [TaskId; 3] = [TaskId::Yc2r, TaskId::Yc2c, TaskId::Tvc];

/// Tasks that use the resnet+slowfast feature family under the mixed
/// strategy.
pub const RESNET_TASKS: [TaskId; 3] = [TaskId::Yc2r, TaskId::Yc2c, TaskId::How2r];

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.finetune_splits.is_empty() {
            return Err(TrainError::InvalidStrategy(
                "finetune_splits must not be empty".into(),
            ));
        }
        if self.finetune_splits.contains(&SplitId::Test) {
            return Err(TrainError::InvalidStrategy(
                "test split never feeds finetuning".into(),
            ));
        }
        if self.finetune_splits.contains(&SplitId::Val)
            && !TRAIN_VAL_TASKS.contains(&self.task_id)
        {
            return Err(TrainError::InvalidStrategy(format!(
                "task {} may not finetune on its validation split",
                self.task_id
            )));
        }
        if self.text_encoder == EncoderKind::ClipStyle && self.init == InitKind::HeroCheckpoint {
            return Err(TrainError::InvalidStrategy(
                "clip_style text encoder is incompatible with a hero checkpoint init".into(),
            ));
        }
        Ok(())
    }
}

/// The per-task recipe table. Total and pure over all eleven tasks.
///
/// Under `Mixed`: QA tasks train jointly (AT) and everything else
/// single-task; the yc2/how2r family consumes resnet+slowfast features;
/// yc2r/yc2c/tvc fold their validation split into finetuning; and the VATEX
/// pair swaps the embedding layer for the pretrained-initialized causal text
/// encoder instead of starting from the hero checkpoint.
pub fn select_strategy(task_id: TaskId, kind: StrategyKind) -> StrategyConfig {
    let mut config = StrategyConfig {
        task_id,
        regime: Regime::St,
        feature_namespace: NamespaceName::ClipVitSlowfast,
        finetune_splits: BTreeSet::from([SplitId::Train]),
        init: InitKind::HeroCheckpoint,
        text_encoder: EncoderKind::EmbeddingLayer,
    };
    match kind {
        StrategyKind::St => {}
        StrategyKind::AtSt => config.regime = Regime::AtThenSt,
        StrategyKind::Mixed => {
            if task_id.kind() == TaskKind::Qa {
                config.regime = Regime::At;
            }
            if RESNET_TASKS.contains(&task_id) {
                config.feature_namespace = NamespaceName::ResnetSlowfast;
            }
            if TRAIN_VAL_TASKS.contains(&task_id) {
                config.finetune_splits.insert(SplitId::Val);
            }
            if matches!(task_id, TaskId::VatexEnR | TaskId::VatexEnC) {
                config.text_encoder = EncoderKind::ClipStyle;
                config.init = InitKind::ClipTextCheckpoint;
            }
        }
    }
    config
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    At,
    St,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDraw {
    pub task_id: TaskId,
    pub phase: Phase,
    pub examples: Vec<(SplitId, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub draws: Vec<ScheduleDraw>,
}

fn task_pool(
    config: &StrategyConfig,
    bundle: &DatasetBundle,
) -> Result<Vec<(SplitId, usize)>, TrainError> {
    let mut pool = Vec::new();
    for &split in &config.finetune_splits {
        let examples = bundle.examples(split);
        if examples.is_empty() {
            return Err(TrainError::EmptySplit {
                task: config.task_id,
                split,
            });
        }
        pool.extend((0..examples.len()).map(|i| (split, i)));
    }
    Ok(pool)
}

fn phase_rng(seed: u64, task: TaskId, epoch: usize, phase: Phase) -> ChaCha20Rng {
    let task_ord = task as u64;
    let phase_ord = match phase {
        Phase::At => 1u64,
        Phase::St => 2,
    };
    ChaCha20Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(task_ord.wrapping_mul(0x0000_0100_0000_01B3))
            .wrapping_add((epoch as u64).wrapping_mul(7919))
            .wrapping_add(phase_ord),
    )
}

fn epoch_batches(
    pool: &[(SplitId, usize)],
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<Vec<(SplitId, usize)>> {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    shuffled
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Build the full draw sequence. Tasks in regime `At` (or `AtThenSt`) are
/// interleaved round-robin, one batch each per cycle, with shorter tasks
/// wrapping so every member is drawn equally often; `AtThenSt` tasks then
/// get a single-task phase appended, as do pure `St` tasks.
pub fn build_schedule(
    configs: &[StrategyConfig],
    bundles: &BTreeMap<TaskId, DatasetBundle>,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TrainSchedule, TrainError> {
    let mut pools = BTreeMap::new();
    for config in configs {
        let bundle = bundles
            .get(&config.task_id)
            .unwrap_or_else(|| panic!("no bundle for task {}", config.task_id));
        pools.insert(config.task_id, task_pool(config, bundle)?);
    }

    let mut at_members: Vec<TaskId> = configs
        .iter()
        .filter(|c| matches!(c.regime, Regime::At | Regime::AtThenSt))
        .map(|c| c.task_id)
        .collect();
    at_members.sort();
    let mut st_members: Vec<TaskId> = configs
        .iter()
        .filter(|c| matches!(c.regime, Regime::St | Regime::AtThenSt))
        .map(|c| c.task_id)
        .collect();
    st_members.sort();

    let mut draws = Vec::new();

    for epoch in 0..epochs {
        let mut batches_per_task: BTreeMap<TaskId, Vec<Vec<(SplitId, usize)>>> = BTreeMap::new();
        for &task in &at_members {
            let mut rng = phase_rng(seed, task, epoch, Phase::At);
            batches_per_task.insert(task, epoch_batches(&pools[&task], batch_size, &mut rng));
        }
        let cycles = batches_per_task
            .values()
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        for cycle in 0..cycles {
            for &task in &at_members {
                let batches = &batches_per_task[&task];
                draws.push(ScheduleDraw {
                    task_id: task,
                    phase: Phase::At,
                    examples: batches[cycle % batches.len()].clone(),
                });
            }
        }
    }

    for &task in &st_members {
        for epoch in 0..epochs {
            let mut rng = phase_rng(seed, task, epoch, Phase::St);
            for batch in epoch_batches(&pools[&task], batch_size, &mut rng) {
                draws.push(ScheduleDraw {
                    task_id: task,
                    phase: Phase::St,
                    examples: batch,
                });
            }
        }
    }

    Ok(TrainSchedule { draws })
}

// ---------------------------------------------------------------------------
// Batch losses and the train step
// ---------------------------------------------------------------------------

/// One task-homogeneous batch, resolved against its bundle.
pub struct Batch<'a> {
    pub bundle: &'a DatasetBundle,
    pub encoder: EncoderKind,
    pub examples: Vec<(SplitId, usize)>,
}

/// Assemble the batch loss on a graph. Retrieval batches score their
/// queries against every video in the bundle (whole-bundle negatives); QA
/// and captioning average per-example losses.
pub fn batch_loss_node(
    ctx: &mut FwdCtx,
    batch: &Batch,
    vocab: &Vocabulary,
) -> Result<NodeId, TrainError> {
    let bundle = batch.bundle;
    assert!(!batch.examples.is_empty(), "empty batch");
    match bundle.task_id.kind() {
        TaskKind::Retrieval => {
            let video_ids: Vec<&String> = bundle.videos.keys().collect();
            let index_of: BTreeMap<&str, usize> = video_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), i))
                .collect();
            let mut video_nodes = Vec::with_capacity(video_ids.len());
            for vid in &video_ids {
                let vf = &bundle.videos[*vid];
                let video =
                    encode_video_node(ctx, vf, bundle.subtitles_for(vid), vocab, batch.encoder)?;
                video_nodes.push(video.pooled);
            }
            let mut query_nodes = Vec::with_capacity(batch.examples.len());
            let mut gold = Vec::with_capacity(batch.examples.len());
            for &(split, idx) in &batch.examples {
                let ex = &bundle.examples(split)[idx];
                if let ExamplePayload::Retrieval {
                    query_text,
                    positive_video_id,
                    ..
                } = &ex.payload
                {
                    let tokens = tokenize(query_text, vocab, ctx.cfg.max_len);
                    let q = crate::backbone::encode_query_node(ctx, &tokens, batch.encoder)?;
                    query_nodes.push(q.pooled);
                    gold.push(index_of[positive_video_id.as_str()]);
                } else {
                    unreachable!("retrieval bundle holds retrieval examples");
                }
            }
            let scores = heads::retrieval_scores_node(ctx, &query_nodes, &video_nodes);
            Ok(heads::retrieval_loss_node(ctx, scores, &gold))
        }
        TaskKind::Qa => {
            let mut losses = Vec::with_capacity(batch.examples.len());
            for &(split, idx) in &batch.examples {
                let ex = &bundle.examples(split)[idx];
                if let ExamplePayload::Qa {
                    question_text,
                    candidates,
                    gold_index,
                    video_id,
                } = &ex.payload
                {
                    let vf = &bundle.videos[video_id];
                    let video = encode_video_node(
                        ctx,
                        vf,
                        bundle.subtitles_for(video_id),
                        vocab,
                        batch.encoder,
                    )?;
                    let logits = heads::qa_logits_node(
                        ctx,
                        video.pooled,
                        question_text,
                        candidates,
                        vocab,
                        batch.encoder,
                    );
                    losses.push(heads::qa_loss_node(ctx, logits, *gold_index));
                } else {
                    unreachable!("qa bundle holds qa examples");
                }
            }
            let total = ctx.g.concat_rows(&losses);
            let sum = ctx.g.sum_all(total);
            Ok(ctx.g.scale(sum, 1.0 / losses.len() as f64))
        }
        TaskKind::Captioning => {
            let mut losses = Vec::with_capacity(batch.examples.len());
            for &(split, idx) in &batch.examples {
                let ex = &bundle.examples(split)[idx];
                if let ExamplePayload::Captioning {
                    video_id,
                    references,
                } = &ex.payload
                {
                    let vf = &bundle.videos[video_id];
                    let video = encode_video_node(
                        ctx,
                        vf,
                        bundle.subtitles_for(video_id),
                        vocab,
                        batch.encoder,
                    )?;
                    let gold = tokenize(&references[0], vocab, ctx.cfg.max_len);
                    losses.push(heads::caption_loss_node(ctx, &video, &gold));
                } else {
                    unreachable!("captioning bundle holds captioning examples");
                }
            }
            let total = ctx.g.concat_rows(&losses);
            let sum = ctx.g.sum_all(total);
            Ok(ctx.g.scale(sum, 1.0 / losses.len() as f64))
        }
    }
}

/// Loss and named gradients for one batch, without updating anything.
pub fn batch_grads(
    state: &ModelState,
    cfg: &ModelConfig,
    batch: &Batch,
    vocab: &Vocabulary,
    dropout_rng: Option<ChaCha20Rng>,
) -> Result<(f64, BTreeMap<String, Array2<f64>>), TrainError> {
    let mut ctx = match dropout_rng {
        Some(rng) => FwdCtx::train(state, cfg, rng),
        None => FwdCtx::eval(state, cfg),
    };
    let loss_node = batch_loss_node(&mut ctx, batch, vocab)?;
    let loss = ctx.g.value(loss_node)[(0, 0)];
    let grads = ctx.g.backward(loss_node);
    Ok((loss, ctx.g.named_grads(&grads)))
}

/// One optimization step: forward, backward, Adam update. Deterministic for
/// a given (state, batch, vocabulary, step, seed).
pub fn train_step(
    state: &mut ModelState,
    cfg: &ModelConfig,
    batch: &Batch,
    vocab: &Vocabulary,
    opt: &mut AdamState,
    hyper: &AdamHyper,
    step: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let rng = if cfg.dropout > 0.0 {
        Some(ChaCha20Rng::seed_from_u64(
            seed.wrapping_mul(0x0000_0100_0000_01B3)
                .wrapping_add(step as u64),
        ))
    } else {
        None
    };
    let (loss, grads) = batch_grads(state, cfg, batch, vocab, rng)?;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            task: batch.bundle.task_id,
            loss,
        });
    }
    adam_step(state, &grads, opt, hyper);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries sampled per parameter (stride-spread, deterministic).
    pub samples_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples_per_param: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn flagged(&self, tolerance: f64) -> Vec<&GroupReport> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err >= tolerance)
            .collect()
    }
}

/// Compare analytic gradients against central finite differences on a probe
/// batch. Requires dropout disabled so the loss is a pure function of the
/// parameters. Every parameter with a gradient becomes one report group.
pub fn gradient_check(
    state: &ModelState,
    cfg: &ModelConfig,
    batch: &Batch,
    vocab: &Vocabulary,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    gradient_check_impl(state, cfg, batch, vocab, opts, None)
}

/// Internal variant that can scale one group's analytic gradient, exercising
/// the harness's sensitivity to wrong gradients.
pub fn gradient_check_impl(
    state: &ModelState,
    cfg: &ModelConfig,
    batch: &Batch,
    vocab: &Vocabulary,
    opts: &GradCheckOptions,
    corrupt: Option<(&str, f64)>,
) -> Result<GradCheckReport, TrainError> {
    assert_eq!(cfg.dropout, 0.0, "gradient checks require dropout = 0");
    let (_, mut analytic) = batch_grads(state, cfg, batch, vocab, None)?;
    if let Some((name, factor)) = corrupt {
        if let Some(g) = analytic.get_mut(name) {
            *g *= factor;
        }
    }

    let loss_at = |perturbed: &ModelState| -> Result<f64, TrainError> {
        let mut ctx = FwdCtx::eval(perturbed, cfg);
        let node = batch_loss_node(&mut ctx, batch, vocab)?;
        Ok(ctx.g.value(node)[(0, 0)])
    };

    let mut groups = Vec::new();
    let mut scratch = state.clone();
    for (name, grad) in &analytic {
        let len = grad.len();
        let k = opts.samples_per_param.min(len).max(1);
        let stride = (len / k).max(1);
        let mut max_rel = 0.0f64;
        let mut checked = 0;
        for s in 0..k {
            let flat = s * stride;
            if flat >= len {
                break;
            }
            let (rows, cols) = grad.dim();
            let idx = (flat / cols, flat % cols);
            let base = state.get(name)[idx];

            scratch.get_mut(name)[idx] = base + opts.step;
            let plus = loss_at(&scratch)?;
            scratch.get_mut(name)[idx] = base - opts.step;
            let minus = loss_at(&scratch)?;
            scratch.get_mut(name)[idx] = base;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((a - numeric).abs() / denom);
            checked += 1;
            let _ = rows;
        }
        groups.push(GroupReport {
            name: name.clone(),
            max_rel_err: max_rel,
            checked,
        });
    }
    Ok(GradCheckReport { groups })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    fingerprint: String,
    seed: u64,
    params: Vec<ManifestParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    rows: usize,
    cols: usize,
}

/// Shape report listing every array a load touched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeReport {
    pub entries: Vec<(String, (usize, usize))>,
}

fn param_file(dir: &Path, name: &str) -> PathBuf {
    dir.join("params").join(format!("{name}.f32"))
}

/// Write the state as a manifest plus one raw little-endian f32 file per
/// parameter. Deterministic: identical states produce identical bytes.
pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<(), TrainError> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| TrainError::io(&params_dir, e))?;
    let mut manifest = CheckpointManifest {
        fingerprint: state.fingerprint().to_string(),
        seed: state.seed(),
        params: Vec::new(),
    };
    for (name, arr) in state.params() {
        manifest.params.push(ManifestParam {
            name: name.clone(),
            rows: arr.nrows(),
            cols: arr.ncols(),
        });
        let mut bytes = Vec::with_capacity(arr.len() * 4);
        for &v in arr.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = param_file(dir, name);
        fs::write(&path, bytes).map_err(|e| TrainError::io(&path, e))?;
    }
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| TrainError::io(&manifest_path, e))
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest, TrainError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| TrainError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Manifest(e.to_string()))
}

fn read_param(dir: &Path, p: &ManifestParam) -> Result<Array2<f64>, TrainError> {
    let path = param_file(dir, &p.name);
    let bytes = fs::read(&path).map_err(|e| TrainError::io(&path, e))?;
    if bytes.len() != p.rows * p.cols * 4 {
        return Err(TrainError::Manifest(format!(
            "parameter {} has {} bytes, expected {}",
            p.name,
            bytes.len(),
            p.rows * p.cols * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((p.rows, p.cols), values)
        .map_err(|e| TrainError::Manifest(e.to_string()))
}

/// Load a full checkpoint, verifying the config fingerprint and every
/// parameter name and shape against `expected`.
pub fn load_checkpoint(dir: &Path, expected: &ModelConfig) -> Result<ModelState, TrainError> {
    let manifest = read_manifest(dir)?;
    let expected_fp = expected.fingerprint();
    if manifest.fingerprint != expected_fp {
        return Err(TrainError::FingerprintMismatch {
            expected: expected_fp,
            found: manifest.fingerprint,
        });
    }
    let specs = param_specs(expected);
    let by_name: BTreeMap<&str, (usize, usize)> = specs
        .iter()
        .map(|s| (s.name.as_str(), (s.rows, s.cols)))
        .collect();
    let in_manifest: BTreeSet<&str> = manifest.params.iter().map(|p| p.name.as_str()).collect();
    for s in &specs {
        if !in_manifest.contains(s.name.as_str()) {
            return Err(TrainError::MissingParameter {
                name: s.name.clone(),
            });
        }
    }
    let mut params = BTreeMap::new();
    for p in &manifest.params {
        let expected_shape = by_name
            .get(p.name.as_str())
            .copied()
            .ok_or_else(|| TrainError::UnknownParameter {
                name: p.name.clone(),
            })?;
        if (p.rows, p.cols) != expected_shape {
            return Err(TrainError::ShapeMismatch {
                name: p.name.clone(),
                expected: expected_shape,
                actual: (p.rows, p.cols),
            });
        }
        params.insert(p.name.clone(), read_param(dir, p)?);
    }
    Ok(ModelState::from_parts(params, manifest.fingerprint, manifest.seed))
}

/// Load only checkpoint parameters whose names start with `prefix`, leaving
/// everything else untouched. Returns the shape report of what was loaded.
pub fn load_checkpoint_partial(
    state: &mut ModelState,
    dir: &Path,
    prefix: &str,
) -> Result<ShapeReport, TrainError> {
    let manifest = read_manifest(dir)?;
    let mut entries = Vec::new();
    for p in &manifest.params {
        if !p.name.starts_with(prefix) {
            continue;
        }
        if !state.params().contains_key(&p.name) {
            return Err(TrainError::UnknownParameter {
                name: p.name.clone(),
            });
        }
        let expected_shape = state.get(&p.name).dim();
        if (p.rows, p.cols) != expected_shape {
            return Err(TrainError::ShapeMismatch {
                name: p.name.clone(),
                expected: expected_shape,
                actual: (p.rows, p.cols),
            });
        }
        state.set(&p.name, read_param(dir, p)?);
        entries.push((p.name.clone(), (p.rows, p.cols)));
    }
    if entries.is_empty() {
        return Err(TrainError::MissingParameter {
            name: format!("{prefix}*"),
        });
    }
    Ok(ShapeReport { entries })
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Micro,
    Toy,
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Profile> {
        match s.trim().to_ascii_lowercase().as_str() {
            "micro" => Some(Profile::Micro),
            "toy" => Some(Profile::Toy),
            "full" => Some(Profile::Full),
            _ => None,
        }
    }

    pub fn model_config(
        self,
        vocab_size: usize,
        namespaces: Vec<(NamespaceName, usize)>,
    ) -> ModelConfig {
        match self {
            Profile::Micro => ModelConfig::micro(vocab_size, namespaces),
            Profile::Toy => ModelConfig::toy(vocab_size, namespaces),
            Profile::Full => ModelConfig::full(vocab_size, namespaces),
        }
    }
}

/// How to initialize the model state before training.
#[derive(Debug, Clone)]
pub enum InitSource {
    Scratch,
    Checkpoint(PathBuf),
    PartialCheckpoint(PathBuf, String),
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub profile: Profile,
    pub hyper: AdamHyper,
    pub dropout: Option<f64>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            seed: 0,
            profile: Profile::Toy,
            hyper: AdamHyper::default(),
            dropout: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub losses: Vec<f64>,
    pub draws: usize,
}

fn collect_namespaces(
    bundles: &BTreeMap<TaskId, DatasetBundle>,
) -> Result<Vec<(NamespaceName, usize)>, TrainError> {
    let mut seen: BTreeMap<NamespaceName, usize> = BTreeMap::new();
    for bundle in bundles.values() {
        for vf in bundle.videos.values() {
            match seen.get(&vf.namespace.name) {
                Some(&dim) if dim != vf.namespace.dim => {
                    return Err(TrainError::Manifest(format!(
                        "namespace {} appears with dims {dim} and {}",
                        vf.namespace.name, vf.namespace.dim
                    )));
                }
                _ => {
                    seen.insert(vf.namespace.name, vf.namespace.dim);
                }
            }
        }
    }
    Ok(seen.into_iter().collect())
}

fn check_namespace_match(
    configs: &[StrategyConfig],
    bundles: &BTreeMap<TaskId, DatasetBundle>,
) -> Result<(), TrainError> {
    for config in configs {
        let bundle = &bundles[&config.task_id];
        if let Some(vf) = bundle.videos.values().next() {
            if vf.namespace.name != config.feature_namespace {
                return Err(TrainError::NamespaceConflict {
                    task: config.task_id,
                    expected: config.feature_namespace,
                    found: vf.namespace.name,
                });
            }
        }
    }
    Ok(())
}

/// Train over explicit strategy configs and in-memory bundles. This is the
/// engine under [`run_finetune`]; tests and the leakage-effect experiment
/// drive it directly.
pub fn run_finetune_with(
    configs: &[StrategyConfig],
    bundles: &BTreeMap<TaskId, DatasetBundle>,
    init: InitSource,
    vocab_override: Option<Vocabulary>,
    opts: &TrainOpts,
) -> Result<TrainOutcome, TrainError> {
    assert!(!configs.is_empty());
    for config in configs {
        config.validate()?;
        assert!(
            bundles.contains_key(&config.task_id),
            "missing bundle for {}",
            config.task_id
        );
    }
    check_namespace_match(configs, bundles)?;

    let vocab = match vocab_override {
        Some(v) => v,
        None => {
            let texts: Vec<&str> = bundles.values().flat_map(|b| b.all_texts()).collect();
            Vocabulary::from_texts(texts)
        }
    };
    let namespaces = collect_namespaces(bundles)?;
    let mut cfg = opts.profile.model_config(vocab.len(), namespaces);
    if let Some(dropout) = opts.dropout {
        cfg = cfg.with_dropout(dropout);
    }

    let mut state = match &init {
        InitSource::Scratch => ModelState::init(&cfg, opts.seed),
        InitSource::Checkpoint(path) => load_checkpoint(path, &cfg)?,
        InitSource::PartialCheckpoint(path, prefix) => {
            let mut state = ModelState::init(&cfg, opts.seed);
            load_checkpoint_partial(&mut state, path, prefix)?;
            state
        }
    };

    let schedule = build_schedule(configs, bundles, opts.epochs, opts.batch_size, opts.seed)?;
    let encoder_by_task: BTreeMap<TaskId, EncoderKind> = configs
        .iter()
        .map(|c| (c.task_id, c.text_encoder))
        .collect();

    let mut opt = AdamState::new();
    let mut losses = Vec::with_capacity(schedule.draws.len());
    for (step, draw) in schedule.draws.iter().enumerate() {
        let batch = Batch {
            bundle: &bundles[&draw.task_id],
            encoder: encoder_by_task[&draw.task_id],
            examples: draw.examples.clone(),
        };
        let loss = train_step(
            &mut state,
            &cfg,
            &batch,
            &vocab,
            &mut opt,
            &opts.hyper,
            step,
            opts.seed,
        )?;
        losses.push(loss);
    }

    Ok(TrainOutcome {
        state,
        cfg,
        vocab,
        draws: losses.len(),
        losses,
    })
}

/// JSON-facing run configuration for a single finetune invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub task_id: TaskId,
    pub strategy: StrategyKind,
    /// Bundle directories per task. Must include `task_id`; extra entries
    /// join all-task phases where the strategy calls for them.
    pub bundle_dirs: BTreeMap<TaskId, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_out: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

fn default_profile() -> Profile {
    Profile::Toy
}

/// Deterministic training summary written next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub task_id: TaskId,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub mean_loss: f64,
    pub losses: Vec<f64>,
}

/// Full finetune pipeline from a [`RunConfig`]: load bundles, derive the
/// strategy table, train, and persist the checkpoint (with its vocabulary)
/// plus a deterministic summary.
pub fn run_finetune(run: &RunConfig) -> Result<RunSummary, TrainError> {
    let mut bundles = BTreeMap::new();
    for (&task, dir) in &run.bundle_dirs {
        bundles.insert(task, crate::corpus::load_task_data(task, dir)?);
    }
    assert!(
        bundles.contains_key(&run.task_id),
        "bundle_dirs must include the target task"
    );

    let target = select_strategy(run.task_id, run.strategy);
    let mut configs = vec![target.clone()];
    if target.regime == Regime::At {
        for &task in bundles.keys() {
            if task != run.task_id && select_strategy(task, run.strategy).regime == Regime::At {
                configs.push(select_strategy(task, run.strategy));
            }
        }
    } else if target.regime == Regime::AtThenSt {
        for &task in bundles.keys() {
            if task != run.task_id {
                let mut member = select_strategy(task, run.strategy);
                member.regime = Regime::At;
                configs.push(member);
            }
        }
    }
    configs.sort_by_key(|c| c.task_id);
    // Tasks not in the all-task pool do not train here; drop their configs.
    configs.retain(|c| c.task_id == run.task_id || c.regime != Regime::St);

    let init = match (&target.init, &run.checkpoint_in) {
        (InitKind::Scratch, _) | (_, None) => InitSource::Scratch,
        (InitKind::HeroCheckpoint, Some(path)) => InitSource::Checkpoint(path.clone()),
        (InitKind::ClipTextCheckpoint, Some(path)) => {
            InitSource::PartialCheckpoint(path.clone(), "textenc.clip.".to_string())
        }
    };
    // A full-checkpoint run must reuse the checkpoint's vocabulary: the
    // token tables are indexed by it.
    let vocab_override = match &init {
        InitSource::Checkpoint(path) | InitSource::PartialCheckpoint(path, _) => {
            Some(Vocabulary::load(&path.join("vocab.json"))?)
        }
        InitSource::Scratch => None,
    };

    let mut hyper = AdamHyper::default();
    if let Some(lr) = run.lr {
        hyper.lr = lr;
    }
    let opts = TrainOpts {
        epochs: run.epochs,
        batch_size: run.batch_size,
        seed: run.seed,
        profile: run.profile,
        hyper,
        dropout: run.dropout,
    };

    let outcome = run_finetune_with(&configs, &bundles, init, vocab_override, &opts)?;

    fs::create_dir_all(&run.checkpoint_out)
        .map_err(|e| TrainError::io(&run.checkpoint_out, e))?;
    save_checkpoint(&outcome.state, &run.checkpoint_out)?;
    outcome
        .vocab
        .save(&run.checkpoint_out.join("vocab.json"))?;

    let summary = RunSummary {
        task_id: run.task_id,
        strategy: run.strategy,
        seed: run.seed,
        steps: outcome.draws,
        final_loss: *outcome.losses.last().unwrap_or(&f64::NAN),
        mean_loss: outcome.losses.iter().sum::<f64>() / outcome.losses.len().max(1) as f64,
        losses: outcome.losses.clone(),
    };
    if let Some(report_path) = &run.report_out {
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(report_path, text).map_err(|e| TrainError::io(report_path, e))?;
    }
    Ok(summary)
}

//! The two backbone transformers: a Cross-Modal Transformer fusing frame
//! features with subtitle-text encodings inside local windows, and a
//! Temporal Transformer contextualizing the fused frames over time.
//!
//! The Cross-Modal blocks also produce query representations: query text is
//! encoded by the chosen front end and then self-attends through the same
//! blocks alone, mirroring how subtitle tokens travel through them.

use crate::corpus::{SubtitleSegment, VideoFeatures};
use crate::model::{
    attn_bias, encoder_block, masked_mean, zero_masked_rows, EncoderKind, FwdCtx, ModelConfig,
    ModelState,
};
use crate::tensor::NodeId;
use crate::textenc::{self, TextEncodingNode, TextError, TokenSequence, Vocabulary};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shape parameters of the two backbone transformers, viewed from a
/// [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub cm_layers: usize,
    pub cm_heads: usize,
    pub tt_layers: usize,
    pub tt_heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            cm_layers: self.cm_layers,
            cm_heads: self.cm_heads,
            tt_layers: self.tt_layers,
            tt_heads: self.tt_heads,
            ff_width: self.ff_width,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("feature namespace {got} ({got_dim}-dim) does not match a registered projection{expected}")]
    NamespaceMismatch {
        got: String,
        got_dim: usize,
        expected: String,
    },
    #[error("subtitle span [{start}, {end}] out of range for {frames} frames")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Frame representations after cross-modal fusion, plus the frame mask.
#[derive(Debug, Clone)]
pub struct FusedVideo {
    pub frame_reps: Array2<f64>,
    pub frame_mask: Vec<f64>,
}

/// Temporally contextualized video: per-frame representations and their
/// mask-weighted mean.
#[derive(Debug, Clone)]
pub struct ContextualizedVideo {
    pub frame_reps: Array2<f64>,
    pub pooled: Array1<f64>,
}

/// Pooled and per-token query representation.
#[derive(Debug, Clone)]
pub struct QueryRep {
    pub pooled: Array1<f64>,
    pub per_token: Array2<f64>,
}

/// Graph-side counterparts used while assembling a training loss.
#[derive(Debug, Clone)]
pub struct FusedVideoNode {
    pub frame_reps: NodeId,
    pub frame_mask: Vec<f64>,
    /// Fused subtitle-token states per segment, in input order.
    pub segment_tokens: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct ContextualizedVideoNode {
    pub frame_reps: NodeId,
    pub frame_mask: Vec<f64>,
    pub pooled: NodeId,
}

#[derive(Debug, Clone)]
pub struct QueryRepNode {
    pub pooled: NodeId,
    pub per_token: NodeId,
    pub mask: Vec<f64>,
}

/// Linear projection + LayerNorm from a feature namespace into the model
/// stream. Each registered namespace has its own projection.
pub fn project_video_node(
    ctx: &mut FwdCtx,
    features: &VideoFeatures,
) -> Result<NodeId, BackboneError> {
    let ns = features.namespace;
    let registered = ctx.cfg.namespace_dim(ns.name);
    if registered != Some(ns.dim) || features.frames.ncols() != ns.dim {
        let expected = match registered {
            Some(d) => format!("; model registers {} at {d}-dim", ns.name),
            None => format!("; model registers none for {}", ns.name),
        };
        return Err(BackboneError::NamespaceMismatch {
            got: ns.name.to_string(),
            got_dim: features.frames.ncols(),
            expected,
        });
    }
    let raw = features.frames.mapv(|v| v as f64);
    let x = ctx.g.leaf(raw);
    let prefix = format!("backbone.video_proj.{}", ns.name);
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    let gamma = ctx.p(&format!("{prefix}.ln.gamma"));
    let beta = ctx.p(&format!("{prefix}.ln.beta"));
    let x = ctx.g.matmul(x, w);
    let x = ctx.g.add_row(x, b);
    Ok(ctx.g.layer_norm(x, gamma, beta))
}

/// A subtitle-aligned fusion window: the segment's frame range plus its
/// encoded text.
pub struct AlignedSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub text: TextEncodingNode,
}

fn run_cross_modal(ctx: &mut FwdCtx, x: NodeId, mask: &[f64]) -> NodeId {
    let rows = ctx.g.shape(x).0;
    let bias = attn_bias(rows, mask, false);
    let mut x = x;
    for i in 0..ctx.cfg.cm_layers {
        x = encoder_block(
            ctx,
            &format!("backbone.cross_modal.layer{i}"),
            x,
            &bias,
            ctx.cfg.cm_heads,
        );
    }
    x
}

/// Fuse projected frames with subtitle text inside per-segment local
/// windows. Each window concatenates the segment's frames with its subtitle
/// tokens and runs the cross-modal blocks bidirectionally; frame positions
/// of the output are reassembled into the fused video. Frames outside any
/// segment pass through the same blocks in contiguous frames-only runs, so
/// videos without subtitles are handled uniformly. A frame covered by
/// several segments gets the mean of its per-window outputs.
pub fn cross_modal_fuse_node(
    ctx: &mut FwdCtx,
    projected_frames: NodeId,
    segments: &[AlignedSegment],
) -> Result<FusedVideoNode, BackboneError> {
    let frames = ctx.g.shape(projected_frames).0;
    for seg in segments {
        if seg.start_frame > seg.end_frame || seg.end_frame >= frames {
            return Err(BackboneError::SpanOutOfRange {
                start: seg.start_frame,
                end: seg.end_frame,
                frames,
            });
        }
    }

    // Per-frame output contributions, keyed by frame index.
    let mut contributions: Vec<Vec<NodeId>> = vec![Vec::new(); frames];
    let mut segment_tokens = Vec::with_capacity(segments.len());

    for seg in segments {
        let n_frames = seg.end_frame - seg.start_frame + 1;
        let frame_part = ctx
            .g
            .slice_rows(projected_frames, seg.start_frame, seg.end_frame + 1);
        let window = ctx.g.concat_rows(&[frame_part, seg.text.per_token]);
        let mut mask = vec![1.0; n_frames];
        mask.extend(seg.text.mask.iter().copied());
        let fused = run_cross_modal(ctx, window, &mask);
        let fused_frames = ctx.g.slice_rows(fused, 0, n_frames);
        let token_count = seg.text.mask.len();
        let fused_tokens = ctx.g.slice_rows(fused, n_frames, n_frames + token_count);
        segment_tokens.push(fused_tokens);
        for (offset, frame) in (seg.start_frame..=seg.end_frame).enumerate() {
            let row = ctx.g.slice_rows(fused_frames, offset, offset + 1);
            contributions[frame].push(row);
        }
    }

    // Contiguous runs of uncovered frames go through the blocks alone.
    let mut run_start = None;
    for frame in 0..=frames {
        let uncovered = frame < frames && contributions[frame].is_empty();
        match (uncovered, run_start) {
            (true, None) => run_start = Some(frame),
            (false, Some(start)) => {
                let part = ctx.g.slice_rows(projected_frames, start, frame);
                let mask = vec![1.0; frame - start];
                let fused = run_cross_modal(ctx, part, &mask);
                for (offset, f) in (start..frame).enumerate() {
                    let row = ctx.g.slice_rows(fused, offset, offset + 1);
                    contributions[f].push(row);
                }
                run_start = None;
            }
            _ => {}
        }
    }

    let mut rows = Vec::with_capacity(frames);
    for contribution in contributions {
        debug_assert!(!contribution.is_empty());
        let row = if contribution.len() == 1 {
            contribution[0]
        } else {
            let mut acc = contribution[0];
            for &extra in &contribution[1..] {
                acc = ctx.g.add(acc, extra);
            }
            ctx.g.scale(acc, 1.0 / contribution.len() as f64)
        };
        rows.push(row);
    }
    let frame_reps = ctx.g.concat_rows(&rows);
    Ok(FusedVideoNode {
        frame_reps,
        frame_mask: vec![1.0; frames],
        segment_tokens,
    })
}

/// Temporal Transformer: learned temporal position embeddings, bidirectional
/// blocks over the frame tokens, and a mask-weighted mean pool.
pub fn temporal_encode_node(ctx: &mut FwdCtx, fused: &FusedVideoNode) -> ContextualizedVideoNode {
    let frames = ctx.g.shape(fused.frame_reps).0;
    assert!(
        frames <= ctx.cfg.max_frames,
        "video has {frames} frames but the temporal position table holds {}",
        ctx.cfg.max_frames
    );
    let positions: Vec<usize> = (0..frames).collect();
    let pos_table = ctx.p("backbone.temporal.pos_table");
    let pos = ctx.g.gather_rows(pos_table, &positions);
    let mut x = ctx.g.add(fused.frame_reps, pos);
    let bias = attn_bias(frames, &fused.frame_mask, false);
    for i in 0..ctx.cfg.tt_layers {
        x = encoder_block(
            ctx,
            &format!("backbone.temporal.layer{i}"),
            x,
            &bias,
            ctx.cfg.tt_heads,
        );
    }
    let x = zero_masked_rows(ctx, x, &fused.frame_mask);
    let pooled = masked_mean(ctx, x, &fused.frame_mask);
    ContextualizedVideoNode {
        frame_reps: x,
        frame_mask: fused.frame_mask.clone(),
        pooled,
    }
}

/// Encode query text with the chosen front end, then self-attend through the
/// cross-modal blocks alone; pooled output is the masked mean.
pub fn encode_query_node(
    ctx: &mut FwdCtx,
    tokens: &TokenSequence,
    encoder: EncoderKind,
) -> Result<QueryRepNode, TextError> {
    let text = textenc::encode_text_node(ctx, tokens, encoder)?;
    let x = run_cross_modal(ctx, text.per_token, &text.mask);
    let x = zero_masked_rows(ctx, x, &text.mask);
    let pooled = masked_mean(ctx, x, &text.mask);
    Ok(QueryRepNode {
        pooled,
        per_token: x,
        mask: text.mask,
    })
}

/// Full video pipeline on the graph: project, fuse with encoded subtitles,
/// contextualize. Subtitle text is encoded by the same front end as queries.
pub fn encode_video_node(
    ctx: &mut FwdCtx,
    features: &VideoFeatures,
    subtitles: &[SubtitleSegment],
    vocab: &Vocabulary,
    encoder: EncoderKind,
) -> Result<ContextualizedVideoNode, BackboneError> {
    let projected = project_video_node(ctx, features)?;
    let mut segments = Vec::with_capacity(subtitles.len());
    for seg in subtitles {
        let tokens = textenc::tokenize(&seg.text, vocab, ctx.cfg.max_len);
        let text = textenc::encode_text_node(ctx, &tokens, encoder)?;
        segments.push(AlignedSegment {
            start_frame: seg.start_frame,
            end_frame: seg.end_frame,
            text,
        });
    }
    let fused = cross_modal_fuse_node(ctx, projected, &segments)?;
    Ok(temporal_encode_node(ctx, &fused))
}

fn pooled_to_array(ctx: &FwdCtx, id: NodeId) -> Array1<f64> {
    ctx.g.value(id).row(0).to_owned()
}

/// Evaluation entry point: contextualized video from raw features.
pub fn encode_video(
    state: &ModelState,
    cfg: &ModelConfig,
    features: &VideoFeatures,
    subtitles: &[SubtitleSegment],
    vocab: &Vocabulary,
    encoder: EncoderKind,
) -> Result<ContextualizedVideo, BackboneError> {
    let mut ctx = FwdCtx::eval(state, cfg);
    let node = encode_video_node(&mut ctx, features, subtitles, vocab, encoder)?;
    Ok(ContextualizedVideo {
        frame_reps: ctx.g.value(node.frame_reps).clone(),
        pooled: pooled_to_array(&ctx, node.pooled),
    })
}

/// Evaluation entry point: query representation from a token sequence.
pub fn encode_query(
    state: &ModelState,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
    encoder: EncoderKind,
) -> Result<QueryRep, TextError> {
    let mut ctx = FwdCtx::eval(state, cfg);
    let node = encode_query_node(&mut ctx, tokens, encoder)?;
    Ok(QueryRep {
        pooled: pooled_to_array(&ctx, node.pooled),
        per_token: ctx.g.value(node.per_token).clone(),
    })
}

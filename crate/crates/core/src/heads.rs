//! Task heads and losses: temperature-scaled cosine retrieval with a
//! symmetric contrastive loss, a per-candidate QA scorer, and an
//! autoregressive caption decoder with beam search.

use crate::backbone::{encode_query_node, ContextualizedVideo, ContextualizedVideoNode, QueryRep};
use crate::model::{attn_bias, decoder_block, EncoderKind, FwdCtx, ModelConfig, ModelState};
use crate::tensor::NodeId;
use crate::textenc::{compose_pair, TokenSequence, Vocabulary, BOS, EOS, PAD};
use ndarray::Array2;

/// Query-by-video similarity matrix; higher means more similar.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScores(pub Array2<f64>);

/// Per-candidate scores for one multiple-choice question.
#[derive(Debug, Clone, PartialEq)]
pub struct QALogits(pub Vec<f64>);

/// A decoded caption: BOS…EOS token ids and the hypothesis log-probability.
/// `truncated` marks hypotheses that hit the decode budget before EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionHypothesis {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub truncated: bool,
}

impl CaptionHypothesis {
    /// Payload tokens (between BOS and the final EOS) rendered as text.
    pub fn text(&self, vocab: &Vocabulary) -> String {
        let end = if self.truncated {
            self.ids.len()
        } else {
            self.ids.len().saturating_sub(1)
        };
        self.ids[1..end]
            .iter()
            .map(|&id| vocab.token_of(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn retrieval_temperature_scale(ctx: &mut FwdCtx) -> NodeId {
    let log_inv_tau = ctx.p("heads.retrieval.log_inv_tau");
    ctx.g.exp(log_inv_tau)
}

fn normalize_rows(ctx: &mut FwdCtx, x: NodeId) -> NodeId {
    let rows = ctx.g.shape(x).0;
    let sq = ctx.g.mul(x, x);
    let ss = ctx.g.sum_cols(sq);
    let norm = ctx.g.sqrt(ss);
    let ones = ctx.g.leaf(Array2::ones((rows, 1)));
    let inv = ctx.g.div(ones, norm);
    ctx.g.scale_rows(x, inv)
}

/// Graph-side retrieval scores from pooled representations:
/// `score(q, v) = cosine(q, v) / tau`, with the learned temperature
/// parameterized as `exp(log_inv_tau)` so it stays positive.
pub fn retrieval_scores_node(
    ctx: &mut FwdCtx,
    query_pooled: &[NodeId],
    video_pooled: &[NodeId],
) -> NodeId {
    assert!(!query_pooled.is_empty() && !video_pooled.is_empty());
    let q = ctx.g.concat_rows(query_pooled);
    let v = ctx.g.concat_rows(video_pooled);
    let qn = normalize_rows(ctx, q);
    let vn = normalize_rows(ctx, v);
    let vt = ctx.g.transpose(vn);
    let cos = ctx.g.matmul(qn, vt);
    let scale = retrieval_temperature_scale(ctx);
    ctx.g.mul_scalar(cos, scale)
}

/// Evaluation-path retrieval scores from pooled representations.
pub fn retrieval_score(
    queries: &[QueryRep],
    videos: &[ContextualizedVideo],
    state: &ModelState,
) -> RetrievalScores {
    assert!(!queries.is_empty() && !videos.is_empty());
    let inv_tau = state.get("heads.retrieval.log_inv_tau")[(0, 0)].exp();
    let mut scores = Array2::zeros((queries.len(), videos.len()));
    for (i, q) in queries.iter().enumerate() {
        let qn = q.pooled.dot(&q.pooled).sqrt();
        for (j, v) in videos.iter().enumerate() {
            let vn = v.pooled.dot(&v.pooled).sqrt();
            scores[(i, j)] = q.pooled.dot(&v.pooled) / (qn * vn) * inv_tau;
        }
    }
    RetrievalScores(scores)
}

fn cross_entropy_rows(ctx: &mut FwdCtx, scores: NodeId, targets: &[(usize, usize)]) -> NodeId {
    let logp = ctx.g.log_softmax_rows(scores);
    let picked = ctx.g.gather_elems(logp, targets);
    let total = ctx.g.sum_all(picked);
    ctx.g.scale(total, -1.0 / targets.len() as f64)
}

/// Symmetric contrastive loss: cross-entropy query→video averaged with
/// video→query, one gold video index per query.
pub fn retrieval_loss_node(ctx: &mut FwdCtx, scores: NodeId, gold: &[usize]) -> NodeId {
    let (q, v) = ctx.g.shape(scores);
    assert_eq!(q, gold.len(), "one gold per query");
    for &g in gold {
        assert!(g < v, "gold index {g} out of range for {v} videos");
    }
    let q2v_targets: Vec<(usize, usize)> = gold.iter().enumerate().map(|(i, &g)| (i, g)).collect();
    let q2v = cross_entropy_rows(ctx, scores, &q2v_targets);
    let scores_t = ctx.g.transpose(scores);
    let v2q_targets: Vec<(usize, usize)> = gold.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let v2q = cross_entropy_rows(ctx, scores_t, &v2q_targets);
    let sum = ctx.g.add(q2v, v2q);
    ctx.g.scale(sum, 0.5)
}

/// Evaluation-path retrieval loss over a score matrix.
pub fn retrieval_loss(scores: &RetrievalScores, gold: &[usize]) -> f64 {
    let s = &scores.0;
    assert_eq!(s.nrows(), gold.len());
    let log_softmax = |row: &[f64], pick: usize| -> f64 {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        row[pick] - lse
    };
    let n = gold.len() as f64;
    let mut q2v = 0.0;
    let mut v2q = 0.0;
    for (i, &g) in gold.iter().enumerate() {
        let row: Vec<f64> = s.row(i).to_vec();
        q2v -= log_softmax(&row, g) / n;
        let col: Vec<f64> = s.column(g).to_vec();
        v2q -= log_softmax(&col, i) / n;
    }
    (q2v + v2q) / 2.0
}

/// Graph-side QA logits: each candidate is paired with the question,
/// encoded as a query, concatenated with the pooled video representation,
/// and scored by a two-layer MLP. Returns a `C×1` logits column.
pub fn qa_logits_node(
    ctx: &mut FwdCtx,
    video_pooled: NodeId,
    question: &str,
    candidates: &[String],
    vocab: &Vocabulary,
    encoder: EncoderKind,
) -> NodeId {
    assert!(candidates.len() >= 2, "qa needs at least two candidates");
    let w1 = ctx.p("heads.qa.w1");
    let b1 = ctx.p("heads.qa.b1");
    let w2 = ctx.p("heads.qa.w2");
    let b2 = ctx.p("heads.qa.b2");
    let mut logits = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let tokens = compose_pair(question, candidate, vocab, ctx.cfg.max_len);
        let query = encode_query_node(ctx, &tokens, encoder).expect("composed sequence is valid");
        let joint = ctx.g.concat_cols(&[query.pooled, video_pooled]);
        let h = ctx.g.matmul(joint, w1);
        let h = ctx.g.add_row(h, b1);
        let h = ctx.g.gelu(h);
        let out = ctx.g.matmul(h, w2);
        let out = ctx.g.add_row(out, b2);
        logits.push(out);
    }
    ctx.g.concat_rows(&logits)
}

/// Cross-entropy of the gold candidate against the QA logits column.
pub fn qa_loss_node(ctx: &mut FwdCtx, logits: NodeId, gold_index: usize) -> NodeId {
    let row = ctx.g.transpose(logits);
    cross_entropy_rows(ctx, row, &[(0, gold_index)])
}

/// Evaluation-path QA forward pass.
pub fn qa_forward(
    state: &ModelState,
    cfg: &ModelConfig,
    video: &ContextualizedVideo,
    question: &str,
    candidates: &[String],
    vocab: &Vocabulary,
    encoder: EncoderKind,
) -> QALogits {
    let mut ctx = FwdCtx::eval(state, cfg);
    let pooled = ctx.g.leaf(video.pooled.clone().insert_axis(ndarray::Axis(0)));
    let node = qa_logits_node(&mut ctx, pooled, question, candidates, vocab, encoder);
    QALogits(ctx.g.value(node).column(0).to_vec())
}

/// Decoder forward over a teacher-forced input prefix: token + position
/// embeddings, causal self-attention, cross-attention over the video frame
/// representations, and a weight-tied output projection. Returns `T×V`
/// logits.
pub fn caption_logits_node(
    ctx: &mut FwdCtx,
    input_ids: &[u32],
    memory: NodeId,
    memory_mask: &[f64],
) -> NodeId {
    assert!(!input_ids.is_empty());
    assert!(
        input_ids.len() <= ctx.cfg.max_len,
        "decoder input exceeds max_len"
    );
    let ids: Vec<usize> = input_ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let input_mask: Vec<f64> = input_ids
        .iter()
        .map(|&id| if id == PAD { 0.0 } else { 1.0 })
        .collect();

    let table = ctx.p("heads.caption.token_table");
    let pos_table = ctx.p("heads.caption.pos_table");
    let tok = ctx.g.gather_rows(table, &ids);
    let pos = ctx.g.gather_rows(pos_table, &positions);
    let mut x = ctx.g.add(tok, pos);

    let self_bias = attn_bias(ids.len(), &input_mask, true);
    let memory_bias = attn_bias(ids.len(), memory_mask, false);
    for i in 0..ctx.cfg.dec_layers {
        x = decoder_block(
            ctx,
            &format!("heads.caption.layer{i}"),
            x,
            &self_bias,
            memory,
            &memory_bias,
            ctx.cfg.dec_heads,
        );
    }
    let gamma = ctx.p("heads.caption.final_ln.gamma");
    let beta = ctx.p("heads.caption.final_ln.beta");
    let x = ctx.g.layer_norm(x, gamma, beta);
    let tied = ctx.g.transpose(table);
    ctx.g.matmul(x, tied)
}

/// Teacher-forced mean cross-entropy over non-PAD target positions.
/// `gold` must begin with BOS and close with EOS.
pub fn caption_loss_node(
    ctx: &mut FwdCtx,
    video: &ContextualizedVideoNode,
    gold: &TokenSequence,
) -> NodeId {
    assert_eq!(gold.ids.first(), Some(&BOS), "gold must begin with BOS");
    assert!(
        gold.ids.contains(&EOS),
        "gold must contain a closing EOS token"
    );
    let input = &gold.ids[..gold.ids.len() - 1];
    let targets = &gold.ids[1..];
    let logits = caption_logits_node(ctx, input, video.frame_reps, &video.frame_mask);
    let picks: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(pos, &t)| (pos, t as usize))
        .collect();
    cross_entropy_rows(ctx, logits, &picks)
}

/// Evaluation-path caption loss.
pub fn caption_loss(
    state: &ModelState,
    cfg: &ModelConfig,
    video: &ContextualizedVideo,
    gold: &TokenSequence,
) -> f64 {
    let mut ctx = FwdCtx::eval(state, cfg);
    let node = leaf_video(&mut ctx, video);
    let loss = caption_loss_node(&mut ctx, &node, gold);
    ctx.g.value(loss)[(0, 0)]
}

fn leaf_video(ctx: &mut FwdCtx, video: &ContextualizedVideo) -> ContextualizedVideoNode {
    let frames = ctx.g.leaf(video.frame_reps.clone());
    let pooled = ctx.g.leaf(video.pooled.clone().insert_axis(ndarray::Axis(0)));
    ContextualizedVideoNode {
        frame_reps: frames,
        frame_mask: vec![1.0; video.frame_reps.nrows()],
        pooled,
    }
}

/// Prediction-file records, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RetrievalPrediction {
    pub query_id: String,
    pub ranked_video_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QaPrediction {
    pub example_id: String,
    pub predicted_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CaptionPrediction {
    pub video_id: String,
    pub caption_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Retrieval(Vec<RetrievalPrediction>),
    Qa(Vec<QaPrediction>),
    Captioning(Vec<CaptionPrediction>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Retrieval(v) => v.len(),
            Predictions::Qa(v) => v.len(),
            Predictions::Captioning(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_jsonl(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut file = std::fs::File::create(path)?;
        match self {
            Predictions::Retrieval(v) => {
                for p in v {
                    writeln!(file, "{}", serde_json::to_string(p).expect("serializes"))?;
                }
            }
            Predictions::Qa(v) => {
                for p in v {
                    writeln!(file, "{}", serde_json::to_string(p).expect("serializes"))?;
                }
            }
            Predictions::Captioning(v) => {
                for p in v {
                    writeln!(file, "{}", serde_json::to_string(p).expect("serializes"))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl(
        kind: crate::corpus::TaskKind,
        path: &std::path::Path,
    ) -> Result<Predictions, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let lines = text.lines().filter(|l| !l.trim().is_empty());
        match kind {
            crate::corpus::TaskKind::Retrieval => {
                let mut out = Vec::new();
                for line in lines {
                    out.push(serde_json::from_str(line).map_err(|e| e.to_string())?);
                }
                Ok(Predictions::Retrieval(out))
            }
            crate::corpus::TaskKind::Qa => {
                let mut out = Vec::new();
                for line in lines {
                    out.push(serde_json::from_str(line).map_err(|e| e.to_string())?);
                }
                Ok(Predictions::Qa(out))
            }
            crate::corpus::TaskKind::Captioning => {
                let mut out = Vec::new();
                for line in lines {
                    out.push(serde_json::from_str(line).map_err(|e| e.to_string())?);
                }
                Ok(Predictions::Captioning(out))
            }
        }
    }
}

/// Produce prediction records for one split of a bundle: full rankings for
/// retrieval queries, argmax candidate indices for QA, and decoded captions
/// (one per distinct video) for captioning.
pub fn evaluate_task(
    state: &ModelState,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    bundle: &crate::corpus::DatasetBundle,
    split: crate::corpus::SplitId,
    encoder: EncoderKind,
    beam: usize,
    decode_max_len: usize,
) -> Result<Predictions, crate::backbone::BackboneError> {
    use crate::backbone::{encode_query, encode_video};
    use crate::corpus::ExamplePayload;
    use crate::textenc::tokenize;

    let examples = bundle.examples(split);
    match bundle.task_id.kind() {
        crate::corpus::TaskKind::Retrieval => {
            let mut videos = Vec::new();
            let mut video_ids = Vec::new();
            for (vid, vf) in &bundle.videos {
                videos.push(encode_video(
                    state,
                    cfg,
                    vf,
                    bundle.subtitles_for(vid),
                    vocab,
                    encoder,
                )?);
                video_ids.push(vid.clone());
            }
            let mut out = Vec::new();
            for ex in examples {
                if let ExamplePayload::Retrieval {
                    query_id,
                    query_text,
                    ..
                } = &ex.payload
                {
                    let tokens = tokenize(query_text, vocab, cfg.max_len);
                    let q = encode_query(state, cfg, &tokens, encoder)?;
                    let scores = retrieval_score(std::slice::from_ref(&q), &videos, state);
                    let mut order: Vec<usize> = (0..video_ids.len()).collect();
                    order.sort_by(|&a, &b| {
                        scores.0[(0, b)]
                            .partial_cmp(&scores.0[(0, a)])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then_with(|| video_ids[a].cmp(&video_ids[b]))
                    });
                    out.push(RetrievalPrediction {
                        query_id: query_id.clone(),
                        ranked_video_ids: order.into_iter().map(|i| video_ids[i].clone()).collect(),
                    });
                }
            }
            Ok(Predictions::Retrieval(out))
        }
        crate::corpus::TaskKind::Qa => {
            let mut out = Vec::new();
            for ex in examples {
                if let ExamplePayload::Qa {
                    question_text,
                    candidates,
                    video_id,
                    ..
                } = &ex.payload
                {
                    let video = encode_video(
                        state,
                        cfg,
                        &bundle.videos[video_id],
                        bundle.subtitles_for(video_id),
                        vocab,
                        encoder,
                    )?;
                    let logits =
                        qa_forward(state, cfg, &video, question_text, candidates, vocab, encoder);
                    let predicted_index = logits
                        .0
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    out.push(QaPrediction {
                        example_id: ex.example_id.clone(),
                        predicted_index,
                    });
                }
            }
            Ok(Predictions::Qa(out))
        }
        crate::corpus::TaskKind::Captioning => {
            let mut seen = std::collections::BTreeSet::new();
            let mut out = Vec::new();
            for ex in examples {
                if let ExamplePayload::Captioning { video_id, .. } = &ex.payload {
                    if !seen.insert(video_id.clone()) {
                        continue;
                    }
                    let video = encode_video(
                        state,
                        cfg,
                        &bundle.videos[video_id],
                        bundle.subtitles_for(video_id),
                        vocab,
                        encoder,
                    )?;
                    let hyp = caption_decode(state, cfg, &video, beam, decode_max_len);
                    out.push(CaptionPrediction {
                        video_id: video_id.clone(),
                        caption_text: hyp.text(vocab),
                    });
                }
            }
            Ok(Predictions::Captioning(out))
        }
    }
}

#[derive(Debug, Clone)]
struct Beam {
    ids: Vec<u32>,
    log_prob: f64,
}

fn next_token_log_probs(
    state: &ModelState,
    cfg: &ModelConfig,
    prefix: &[u32],
    video: &ContextualizedVideo,
) -> Vec<f64> {
    let mut ctx = FwdCtx::eval(state, cfg);
    let node = leaf_video(&mut ctx, video);
    let logits = caption_logits_node(&mut ctx, prefix, node.frame_reps, &node.frame_mask);
    let row: Vec<f64> = ctx
        .g
        .value(logits)
        .row(prefix.len() - 1)
        .to_vec();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - lse).collect()
}

/// Beam-search caption decoding; `beam == 1` is exactly greedy argmax
/// rollout. Returns the highest log-probability completed hypothesis, or a
/// truncated one (flagged, never an error) if no beam reaches EOS within
/// `max_len` total tokens.
pub fn caption_decode(
    state: &ModelState,
    cfg: &ModelConfig,
    video: &ContextualizedVideo,
    beam: usize,
    max_len: usize,
) -> CaptionHypothesis {
    assert!(beam >= 1, "beam width must be >= 1");
    assert!(
        (3..=cfg.max_len).contains(&max_len),
        "decode budget must be in [3, cfg.max_len]"
    );
    // PAD and BOS are never emitted; EOS completes a hypothesis.
    let allowed: Vec<u32> = (0..cfg.vocab_size as u32)
        .filter(|&id| id != PAD && id != BOS)
        .collect();

    let mut alive = vec![Beam {
        ids: vec![BOS],
        log_prob: 0.0,
    }];
    let mut done: Vec<Beam> = Vec::new();
    let mut truncated: Vec<Beam> = Vec::new();

    while !alive.is_empty() {
        let mut expansions: Vec<Beam> = Vec::new();
        for hyp in &alive {
            if hyp.ids.len() >= max_len {
                truncated.push(hyp.clone());
                continue;
            }
            let log_probs = next_token_log_probs(state, cfg, &hyp.ids, video);
            for &cand in &allowed {
                let mut ids = hyp.ids.clone();
                ids.push(cand);
                expansions.push(Beam {
                    ids,
                    log_prob: hyp.log_prob + log_probs[cand as usize],
                });
            }
        }
        // Deterministic order: best log-prob first, ids as tie-break.
        expansions.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.ids.cmp(&b.ids))
        });
        expansions.truncate(beam);
        alive = Vec::new();
        for hyp in expansions {
            if *hyp.ids.last().unwrap() == EOS {
                done.push(hyp);
            } else {
                alive.push(hyp);
            }
        }
    }

    let best = |pool: &[Beam]| -> Option<Beam> {
        pool.iter()
            .max_by(|a, b| {
                a.log_prob
                    .partial_cmp(&b.log_prob)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| b.ids.cmp(&a.ids))
            })
            .cloned()
    };
    if let Some(hyp) = best(&done) {
        CaptionHypothesis {
            ids: hyp.ids,
            log_prob: hyp.log_prob,
            truncated: false,
        }
    } else {
        let hyp = best(&truncated).expect("at least one hypothesis exists");
        CaptionHypothesis {
            ids: hyp.ids,
            log_prob: hyp.log_prob,
            truncated: true,
        }
    }
}

/// Exhaustive decode oracle: enumerate every candidate sequence up to
/// `max_len` and return the best by the same completion rules. Only viable
/// for tiny vocabularies; used to certify beam search.
pub fn caption_decode_exhaustive(
    state: &ModelState,
    cfg: &ModelConfig,
    video: &ContextualizedVideo,
    max_len: usize,
) -> CaptionHypothesis {
    let allowed: Vec<u32> = (0..cfg.vocab_size as u32)
        .filter(|&id| id != PAD && id != BOS)
        .collect();
    let mut best_done: Option<Beam> = None;
    let mut best_truncated: Option<Beam> = None;
    let mut stack = vec![Beam {
        ids: vec![BOS],
        log_prob: 0.0,
    }];
    while let Some(hyp) = stack.pop() {
        if hyp.ids.len() >= max_len {
            let better = best_truncated
                .as_ref()
                .map(|b| hyp.log_prob > b.log_prob)
                .unwrap_or(true);
            if better {
                best_truncated = Some(hyp);
            }
            continue;
        }
        let log_probs = next_token_log_probs(state, cfg, &hyp.ids, video);
        for &cand in &allowed {
            let mut ids = hyp.ids.clone();
            ids.push(cand);
            let next = Beam {
                ids,
                log_prob: hyp.log_prob + log_probs[cand as usize],
            };
            if cand == EOS {
                let better = best_done
                    .as_ref()
                    .map(|b| next.log_prob > b.log_prob)
                    .unwrap_or(true);
                if better {
                    best_done = Some(next);
                }
            } else {
                stack.push(next);
            }
        }
    }
    if let Some(hyp) = best_done {
        CaptionHypothesis {
            ids: hyp.ids,
            log_prob: hyp.log_prob,
            truncated: false,
        }
    } else {
        let hyp = best_truncated.expect("at least one hypothesis");
        CaptionHypothesis {
            ids: hyp.ids,
            log_prob: hyp.log_prob,
            truncated: true,
        }
    }
}

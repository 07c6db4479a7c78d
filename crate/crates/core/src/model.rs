//! Model configuration, the named-parameter store, and shared forward-pass
//! machinery (transformer blocks, masking, pooling) used by the text
//! encoders, the backbone, and the task heads.
//!
//! Parameter names form a stable dotted hierarchy (`textenc.*`,
//! `backbone.*`, `heads.*`), which is what checkpointing and partial
//! initialization key on.

use crate::corpus::NamespaceName;
use crate::tensor::{Graph, NodeId, MASK_BIAS};
use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Which text-encoding front end feeds the backbone. The two are
/// interchangeable: same input contract, same output shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    EmbeddingLayer,
    ClipStyle,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::EmbeddingLayer => "embedding_layer",
            EncoderKind::ClipStyle => "clip_style",
        }
    }

    pub fn parse(s: &str) -> Option<EncoderKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "embedding_layer" => Some(EncoderKind::EmbeddingLayer),
            "clip_style" => Some(EncoderKind::ClipStyle),
            _ => None,
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full network shape. One config builds every parameter of the model:
/// both text front ends, the two backbone transformers, and all three
/// task heads, so a single checkpoint can serve any task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    /// Token budget for every text sequence (includes BOS/EOS).
    pub max_len: usize,
    /// Temporal position-table size; videos may not exceed this many frames.
    pub max_frames: usize,
    pub clip_layers: usize,
    pub clip_heads: usize,
    pub d_encoder: usize,
    pub cm_layers: usize,
    pub cm_heads: usize,
    pub tt_layers: usize,
    pub tt_heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub qa_hidden: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    /// Registered visual feature families and their input dims.
    pub namespaces: Vec<(NamespaceName, usize)>,
}

impl ModelConfig {
    /// Small profile used by tests and desk-scale runs.
    pub fn toy(vocab_size: usize, namespaces: Vec<(NamespaceName, usize)>) -> Self {
        Self {
            d_model: 32,
            vocab_size,
            max_len: 24,
            max_frames: 64,
            clip_layers: 2,
            clip_heads: 2,
            d_encoder: 16,
            cm_layers: 2,
            cm_heads: 2,
            tt_layers: 2,
            tt_heads: 2,
            ff_width: 64,
            dropout: 0.1,
            qa_hidden: 32,
            dec_layers: 2,
            dec_heads: 2,
            namespaces,
        }
    }

    /// Full-scale profile: 12-layer 8-head text encoder over a 512-wide
    /// stream. Impractical without accelerators; shipped for completeness.
    pub fn full(vocab_size: usize, namespaces: Vec<(NamespaceName, usize)>) -> Self {
        Self {
            d_model: 768,
            vocab_size,
            max_len: 64,
            max_frames: 512,
            clip_layers: 12,
            clip_heads: 8,
            d_encoder: 512,
            cm_layers: 6,
            cm_heads: 12,
            tt_layers: 3,
            tt_heads: 12,
            ff_width: 3072,
            dropout: 0.1,
            qa_hidden: 768,
            dec_layers: 2,
            dec_heads: 8,
            namespaces,
        }
    }

    /// Even smaller shape for gradient checking, where every forward pass
    /// runs many times.
    pub fn micro(vocab_size: usize, namespaces: Vec<(NamespaceName, usize)>) -> Self {
        Self {
            d_model: 8,
            vocab_size,
            max_len: 10,
            max_frames: 8,
            clip_layers: 1,
            clip_heads: 2,
            d_encoder: 8,
            cm_layers: 1,
            cm_heads: 2,
            tt_layers: 1,
            tt_heads: 2,
            ff_width: 16,
            dropout: 0.0,
            qa_hidden: 8,
            dec_layers: 1,
            dec_heads: 2,
            namespaces,
        }
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn namespace_dim(&self, name: NamespaceName) -> Option<usize> {
        self.namespaces
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, d)| *d)
    }

    fn clip_ff(&self) -> usize {
        self.d_encoder * 4
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model % self.cm_heads != 0 || self.d_model % self.tt_heads != 0 {
            return Err("d_model must be divisible by both backbone head counts".into());
        }
        if self.d_encoder % self.clip_heads != 0 {
            return Err("d_encoder must be divisible by clip_heads".into());
        }
        if self.d_model % self.dec_heads != 0 {
            return Err("d_model must be divisible by dec_heads".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must be in [0, 1)".into());
        }
        if self.max_len < 3 {
            return Err("max_len must be >= 3".into());
        }
        Ok(())
    }

    /// Shape fingerprint: a stable digest of every field that affects
    /// parameter names or shapes. Dropout is excluded (it changes training,
    /// not shapes), so checkpoints stay loadable across dropout settings.
    pub fn fingerprint(&self) -> String {
        let mut shape = self.clone();
        shape.dropout = 0.0;
        let json = serde_json::to_string(&shape).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

fn spec(name: String, rows: usize, cols: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name,
        rows,
        cols,
        init,
    }
}

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, width: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push(spec(format!("{prefix}.{w}"), width, width, Init::Normal));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        out.push(spec(format!("{prefix}.{b}"), 1, width, Init::Zeros));
    }
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, width: usize) {
    out.push(spec(format!("{prefix}.gamma"), 1, width, Init::Ones));
    out.push(spec(format!("{prefix}.beta"), 1, width, Init::Zeros));
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, ff: usize) {
    out.push(spec(format!("{prefix}.w1"), width, ff, Init::Normal));
    out.push(spec(format!("{prefix}.b1"), 1, ff, Init::Zeros));
    out.push(spec(format!("{prefix}.w2"), ff, width, Init::Normal));
    out.push(spec(format!("{prefix}.b2"), 1, width, Init::Zeros));
}

fn encoder_block_specs(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, ff: usize) {
    ln_specs(out, &format!("{prefix}.ln1"), width);
    attn_specs(out, &format!("{prefix}.attn"), width);
    ln_specs(out, &format!("{prefix}.ln2"), width);
    ffn_specs(out, &format!("{prefix}.ffn"), width, ff);
}

fn decoder_block_specs(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, ff: usize) {
    ln_specs(out, &format!("{prefix}.ln1"), width);
    attn_specs(out, &format!("{prefix}.self_attn"), width);
    ln_specs(out, &format!("{prefix}.ln2"), width);
    attn_specs(out, &format!("{prefix}.cross_attn"), width);
    ln_specs(out, &format!("{prefix}.ln3"), width);
    ffn_specs(out, &format!("{prefix}.ffn"), width, ff);
}

/// Every parameter of the model, in a fixed declaration order. This list is
/// the single source of truth for names and shapes: initialization walks it
/// with a seeded RNG, and checkpoint loading verifies against it.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();

    // Plain embedding front end.
    out.push(spec("textenc.embed.token_table".into(), cfg.vocab_size, d, Init::Normal));
    out.push(spec("textenc.embed.pos_table".into(), cfg.max_len, d, Init::Normal));
    ln_specs(&mut out, "textenc.embed.ln", d);

    // Causal transformer front end.
    let de = cfg.d_encoder;
    out.push(spec("textenc.clip.token_table".into(), cfg.vocab_size, de, Init::Normal));
    out.push(spec("textenc.clip.pos_table".into(), cfg.max_len, de, Init::Normal));
    for i in 0..cfg.clip_layers {
        encoder_block_specs(&mut out, &format!("textenc.clip.layer{i}"), de, cfg.clip_ff());
    }
    ln_specs(&mut out, "textenc.clip.final_ln", de);
    out.push(spec("textenc.clip.proj.w".into(), de, d, Init::Normal));
    out.push(spec("textenc.clip.proj.b".into(), 1, d, Init::Zeros));

    // Per-namespace video projections.
    for (ns, dim) in &cfg.namespaces {
        let prefix = format!("backbone.video_proj.{ns}");
        out.push(spec(format!("{prefix}.w"), *dim, d, Init::Normal));
        out.push(spec(format!("{prefix}.b"), 1, d, Init::Zeros));
        ln_specs(&mut out, &format!("{prefix}.ln"), d);
    }

    for i in 0..cfg.cm_layers {
        encoder_block_specs(&mut out, &format!("backbone.cross_modal.layer{i}"), d, cfg.ff_width);
    }

    out.push(spec("backbone.temporal.pos_table".into(), cfg.max_frames, d, Init::Normal));
    for i in 0..cfg.tt_layers {
        encoder_block_specs(&mut out, &format!("backbone.temporal.layer{i}"), d, cfg.ff_width);
    }

    // Retrieval temperature: score = cosine * exp(log_inv_tau).
    out.push(spec(
        "heads.retrieval.log_inv_tau".into(),
        1,
        1,
        Init::Const((1.0f64 / 0.07).ln()),
    ));

    out.push(spec("heads.qa.w1".into(), 2 * d, cfg.qa_hidden, Init::Normal));
    out.push(spec("heads.qa.b1".into(), 1, cfg.qa_hidden, Init::Zeros));
    out.push(spec("heads.qa.w2".into(), cfg.qa_hidden, 1, Init::Normal));
    out.push(spec("heads.qa.b2".into(), 1, 1, Init::Zeros));

    // Caption decoder; the token table doubles as the output projection.
    out.push(spec("heads.caption.token_table".into(), cfg.vocab_size, d, Init::Normal));
    out.push(spec("heads.caption.pos_table".into(), cfg.max_len, d, Init::Normal));
    for i in 0..cfg.dec_layers {
        decoder_block_specs(&mut out, &format!("heads.caption.layer{i}"), d, cfg.ff_width);
    }
    ln_specs(&mut out, "heads.caption.final_ln", d);

    out
}

/// Ordered named-parameter store for the full network, plus the config
/// fingerprint and RNG seed it was built from.
#[derive(Debug, Clone)]
pub struct ModelState {
    params: BTreeMap<String, Array2<f64>>,
    fingerprint: String,
    seed: u64,
}

impl ModelState {
    /// Deterministically initialize every parameter from a seed. Walks
    /// [`param_specs`] in order with one ChaCha stream, so identical
    /// (config, seed) pairs always produce identical states.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut params = BTreeMap::new();
        for s in param_specs(cfg) {
            let arr = match s.init {
                Init::Normal => {
                    Array2::from_shape_fn((s.rows, s.cols), |_| normal.sample(&mut rng))
                }
                Init::Zeros => Array2::zeros((s.rows, s.cols)),
                Init::Ones => Array2::ones((s.rows, s.cols)),
                Init::Const(c) => Array2::from_elem((s.rows, s.cols), c),
            };
            params.insert(s.name, arr);
        }
        Self {
            params,
            fingerprint: cfg.fingerprint(),
            seed,
        }
    }

    pub fn from_parts(
        params: BTreeMap<String, Array2<f64>>,
        fingerprint: String,
        seed: u64,
    ) -> Self {
        Self {
            params,
            fingerprint,
            seed,
        }
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) {
        let slot = self.get_mut(name);
        assert_eq!(slot.dim(), value.dim(), "shape change for {name}");
        *slot = value;
    }

    pub fn params(&self) -> &BTreeMap<String, Array2<f64>> {
        &self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// One forward pass: an autodiff graph bound to a parameter store. In
/// training mode a dropout RNG is attached; evaluation passes are pure.
pub struct FwdCtx<'a> {
    pub g: Graph,
    pub state: &'a ModelState,
    pub cfg: &'a ModelConfig,
    dropout: f64,
    rng: Option<ChaCha20Rng>,
}

impl<'a> FwdCtx<'a> {
    pub fn eval(state: &'a ModelState, cfg: &'a ModelConfig) -> Self {
        Self {
            g: Graph::new(),
            state,
            cfg,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(state: &'a ModelState, cfg: &'a ModelConfig, rng: ChaCha20Rng) -> Self {
        Self {
            g: Graph::new(),
            state,
            cfg,
            dropout: cfg.dropout,
            rng: Some(rng),
        }
    }

    /// Parameter leaf node, registered once per name per graph.
    pub fn p(&mut self, name: &str) -> NodeId {
        let value = self.state.get(name).clone();
        self.g.named_leaf(name, value)
    }

    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        if self.dropout <= 0.0 {
            return x;
        }
        let rng = self.rng.as_mut().expect("train mode has an RNG");
        let p = self.dropout;
        let keep = 1.0 / (1.0 - p);
        let dim = self.g.shape(x);
        let mask = Array2::from_shape_fn(dim, |_| {
            if rand::Rng::gen_bool(rng, p) {
                0.0
            } else {
                keep
            }
        });
        let m = self.g.leaf(mask);
        self.g.mul(x, m)
    }
}

/// Additive attention-bias matrix from key validity (and optionally a causal
/// constraint): `0` where attention is allowed, [`MASK_BIAS`] elsewhere.
pub fn attn_bias(rows: usize, key_mask: &[f64], causal: bool) -> Array2<f64> {
    let cols = key_mask.len();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let blocked = key_mask[j] == 0.0 || (causal && j > i);
        if blocked {
            MASK_BIAS
        } else {
            0.0
        }
    })
}

/// Multi-head self/cross attention with learned projections. `bias` is the
/// additive mask (query rows × key cols).
pub fn multi_head_attention(
    ctx: &mut FwdCtx,
    prefix: &str,
    queries: NodeId,
    keys_values: NodeId,
    bias: &Array2<f64>,
    heads: usize,
) -> NodeId {
    let (_, width) = ctx.g.shape(queries);
    assert_eq!(width % heads, 0, "width {width} not divisible by {heads} heads");
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let wq = ctx.p(&format!("{prefix}.wq"));
    let bq = ctx.p(&format!("{prefix}.bq"));
    let wk = ctx.p(&format!("{prefix}.wk"));
    let bk = ctx.p(&format!("{prefix}.bk"));
    let wv = ctx.p(&format!("{prefix}.wv"));
    let bv = ctx.p(&format!("{prefix}.bv"));
    let wo = ctx.p(&format!("{prefix}.wo"));
    let bo = ctx.p(&format!("{prefix}.bo"));

    let q = ctx.g.matmul(queries, wq);
    let q = ctx.g.add_row(q, bq);
    let k = ctx.g.matmul(keys_values, wk);
    let k = ctx.g.add_row(k, bk);
    let v = ctx.g.matmul(keys_values, wv);
    let v = ctx.g.add_row(v, bv);

    let bias_node = ctx.g.leaf(bias.clone());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = ctx.g.slice_cols(q, lo, hi);
        let kh = ctx.g.slice_cols(k, lo, hi);
        let vh = ctx.g.slice_cols(v, lo, hi);
        let kt = ctx.g.transpose(kh);
        let scores = ctx.g.matmul(qh, kt);
        let scores = ctx.g.scale(scores, scale);
        let scores = ctx.g.add(scores, bias_node);
        let attn = ctx.g.softmax_rows(scores);
        head_outputs.push(ctx.g.matmul(attn, vh));
    }
    let merged = ctx.g.concat_cols(&head_outputs);
    let out = ctx.g.matmul(merged, wo);
    ctx.g.add_row(out, bo)
}

fn layer_norm_at(ctx: &mut FwdCtx, prefix: &str, x: NodeId) -> NodeId {
    let gamma = ctx.p(&format!("{prefix}.gamma"));
    let beta = ctx.p(&format!("{prefix}.beta"));
    ctx.g.layer_norm(x, gamma, beta)
}

fn feed_forward(ctx: &mut FwdCtx, prefix: &str, x: NodeId) -> NodeId {
    let w1 = ctx.p(&format!("{prefix}.w1"));
    let b1 = ctx.p(&format!("{prefix}.b1"));
    let w2 = ctx.p(&format!("{prefix}.w2"));
    let b2 = ctx.p(&format!("{prefix}.b2"));
    let h = ctx.g.matmul(x, w1);
    let h = ctx.g.add_row(h, b1);
    let h = ctx.g.gelu(h);
    let h = ctx.g.matmul(h, w2);
    ctx.g.add_row(h, b2)
}

/// Pre-norm transformer encoder block: `x + Attn(LN(x))`, then
/// `x + FFN(LN(x))`.
pub fn encoder_block(
    ctx: &mut FwdCtx,
    prefix: &str,
    x: NodeId,
    bias: &Array2<f64>,
    heads: usize,
) -> NodeId {
    let normed = layer_norm_at(ctx, &format!("{prefix}.ln1"), x);
    let attn = multi_head_attention(ctx, &format!("{prefix}.attn"), normed, normed, bias, heads);
    let attn = ctx.dropout(attn);
    let x = ctx.g.add(x, attn);
    let normed = layer_norm_at(ctx, &format!("{prefix}.ln2"), x);
    let ffn = feed_forward(ctx, &format!("{prefix}.ffn"), normed);
    let ffn = ctx.dropout(ffn);
    ctx.g.add(x, ffn)
}

/// Pre-norm transformer decoder block: causal self-attention, then
/// cross-attention over `memory`, then the feed-forward sublayer.
pub fn decoder_block(
    ctx: &mut FwdCtx,
    prefix: &str,
    x: NodeId,
    self_bias: &Array2<f64>,
    memory: NodeId,
    memory_bias: &Array2<f64>,
    heads: usize,
) -> NodeId {
    let normed = layer_norm_at(ctx, &format!("{prefix}.ln1"), x);
    let attn = multi_head_attention(
        ctx,
        &format!("{prefix}.self_attn"),
        normed,
        normed,
        self_bias,
        heads,
    );
    let attn = ctx.dropout(attn);
    let x = ctx.g.add(x, attn);

    let normed = layer_norm_at(ctx, &format!("{prefix}.ln2"), x);
    let cross = multi_head_attention(
        ctx,
        &format!("{prefix}.cross_attn"),
        normed,
        memory,
        memory_bias,
        heads,
    );
    let cross = ctx.dropout(cross);
    let x = ctx.g.add(x, cross);

    let normed = layer_norm_at(ctx, &format!("{prefix}.ln3"), x);
    let ffn = feed_forward(ctx, &format!("{prefix}.ffn"), normed);
    let ffn = ctx.dropout(ffn);
    ctx.g.add(x, ffn)
}

/// Mask-weighted mean over rows: `1×d` from `n×d` given a 0/1 row mask.
pub fn masked_mean(ctx: &mut FwdCtx, x: NodeId, mask: &[f64]) -> NodeId {
    let n = mask.len();
    assert_eq!(ctx.g.shape(x).0, n);
    let nnz: f64 = mask.iter().sum();
    assert!(nnz > 0.0, "masked_mean needs at least one unmasked row");
    let col = Array2::from_shape_fn((n, 1), |(i, _)| mask[i]);
    let col = ctx.g.leaf(col);
    let weighted = ctx.g.scale_rows(x, col);
    let summed = ctx.g.sum_rows(weighted);
    ctx.g.scale(summed, 1.0 / nnz)
}

/// Zero out rows whose mask is 0.
pub fn zero_masked_rows(ctx: &mut FwdCtx, x: NodeId, mask: &[f64]) -> NodeId {
    let n = mask.len();
    let col = Array2::from_shape_fn((n, 1), |(i, _)| mask[i]);
    let col = ctx.g.leaf(col);
    ctx.g.scale_rows(x, col)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NamespaceName;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::toy(40, vec![(NamespaceName::ClipVitSlowfast, 32)])
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = toy_cfg();
        let a = ModelState::init(&cfg, 7);
        let b = ModelState::init(&cfg, 7);
        let c = ModelState::init(&cfg, 8);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!(a.all_finite());
    }

    #[test]
    fn param_names_are_unique_and_prefixed() {
        let cfg = toy_cfg();
        let specs = param_specs(&cfg);
        let mut names = std::collections::BTreeSet::new();
        for s in &specs {
            assert!(names.insert(s.name.clone()), "duplicate name {}", s.name);
            assert!(
                s.name.starts_with("textenc.")
                    || s.name.starts_with("backbone.")
                    || s.name.starts_with("heads."),
                "unexpected prefix in {}",
                s.name
            );
        }
        let state = ModelState::init(&cfg, 1);
        assert_eq!(state.params().len(), specs.len());
    }

    #[test]
    fn fingerprint_tracks_shapes_not_dropout() {
        let cfg = toy_cfg();
        let same = cfg.clone().with_dropout(0.0);
        assert_eq!(cfg.fingerprint(), same.fingerprint());
        let mut other = cfg.clone();
        other.d_model = 16;
        other.cm_heads = 2;
        assert_ne!(cfg.fingerprint(), other.fingerprint());
    }

    #[test]
    fn attn_bias_blocks_future_and_padding() {
        let bias = attn_bias(3, &[1.0, 1.0, 0.0], true);
        assert_eq!(bias[(0, 0)], 0.0);
        assert_eq!(bias[(0, 1)], MASK_BIAS); // future
        assert_eq!(bias[(2, 2)], MASK_BIAS); // padded key
        assert_eq!(bias[(2, 1)], 0.0);
    }
}

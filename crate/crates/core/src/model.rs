//! Dual-stream multimodal transformer with an autoregressive action decoder.
//!
//! Each encoder layer runs cross-attention in both directions (text attends
//! to the grid, the grid attends to the text), then modality-specific
//! self-attention where only the text side consumes the syntax mask, then a
//! feed-forward block per stream. Every sublayer is followed by a residual
//! connection and layer normalization. With weight sharing on, a single
//! encoder-layer parameter set is applied at every depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{mix_seed, Episode};
use crate::grammar::{GrammarError, VOCABULARY};
use crate::gridworld::{visual_tokens, Action, World, WorldTensor, CELL_FEATURES, GRID_SIZE};
use crate::syntax::{mask_from_constituency, parse_constituency, AttentionMask};
use crate::tensor::checkpoint::{self, Checkpoint, CheckpointError};
use crate::tensor::{Graph, ParamId, ParamSet, Real, Tensor, TensorError, Var};

pub const SOS: usize = 5;
pub const EOS: usize = 6;
pub const PAD: usize = 7;
pub const ACTION_VOCAB: usize = 8;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("mask covers {mask} tokens but the command has {tokens}")]
    MaskSize { mask: usize, tokens: usize },
    #[error("decoder prefix must start with SOS")]
    MissingSos,
    #[error("checkpoint parameter {0} missing or misshapen")]
    BadParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Dependency,
    Constituency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub dropout: f64,
    pub share_encoder_weights: bool,
    pub use_text_mask: bool,
    pub mask_source: MaskSource,
    pub max_decode_len: usize,
    pub max_text_len: usize,
    pub text_vocab: usize,
    pub action_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            d_hidden: 256,
            n_heads: 8,
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            dropout: 0.1,
            share_encoder_weights: true,
            use_text_mask: true,
            mask_source: MaskSource::Dependency,
            max_decode_len: 64,
            max_text_len: 48,
            text_vocab: VOCABULARY.len(),
            action_vocab: ACTION_VOCAB,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.d_hidden == 0 || self.n_heads == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            return bad("layer counts must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.action_vocab != ACTION_VOCAB || self.text_vocab < VOCABULARY.len() {
            return bad("vocabulary sizes do not match the grammar and action set");
        }
        if self.max_decode_len == 0 || self.max_text_len == 0 {
            return bad("length limits must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayerIds {
    t2v: AttnIds,
    v2t: AttnIds,
    norm_t_cross: NormIds,
    norm_v_cross: NormIds,
    text_self: AttnIds,
    vis_self: AttnIds,
    norm_t_self: NormIds,
    norm_v_self: NormIds,
    ffn_t: FfnIds,
    ffn_v: FfnIds,
    norm_t_ffn: NormIds,
    norm_v_ffn: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayerIds {
    self_attn: AttnIds,
    norm_self: NormIds,
    cross: AttnIds,
    norm_cross: NormIds,
    ffn: FfnIds,
    norm_ffn: NormIds,
}

#[derive(Clone, Debug)]
struct Layout {
    text_tok: ParamId,
    text_pos: ParamId,
    vis_w: ParamId,
    vis_b: ParamId,
    vis_row: ParamId,
    vis_col: ParamId,
    encoder: Vec<EncoderLayerIds>,
    decoder: Vec<DecoderLayerIds>,
    act_tok: ParamId,
    act_pos: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
}

struct Builder<'a, T, R> {
    params: &'a mut ParamSet<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Xavier => {
                let (fi, fo) = (shape[0], shape.get(1).copied().unwrap_or(1));
                let limit = (6.0 / (fi + fo) as f64).sqrt();
                (0..n).map(|_| T::from_f64(self.rng.random_range(-limit..limit))).collect()
            }
        };
        self.params.push(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIds {
        let mut w = |s: &str| self.add(format!("{p}.{s}"), vec![d, d], Init::Xavier);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |s: &str| self.add(format!("{p}.{s}"), vec![d], Init::Zeros);
        AttnIds { wq, bq: b("bq"), wk, bk: b("bk"), wv, bv: b("bv"), wo, bo: b("bo") }
    }

    fn norm(&mut self, p: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{p}.gamma"), vec![d], Init::Ones),
            beta: self.add(format!("{p}.beta"), vec![d], Init::Zeros),
        }
    }

    fn ffn(&mut self, p: &str, d: usize, h: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{p}.w1"), vec![d, h], Init::Xavier),
            b1: self.add(format!("{p}.b1"), vec![h], Init::Zeros),
            w2: self.add(format!("{p}.w2"), vec![h, d], Init::Xavier),
            b2: self.add(format!("{p}.b2"), vec![d], Init::Zeros),
        }
    }

    fn encoder_layer(&mut self, p: &str, d: usize, h: usize) -> EncoderLayerIds {
        EncoderLayerIds {
            t2v: self.attn(&format!("{p}.t2v_cross"), d),
            v2t: self.attn(&format!("{p}.v2t_cross"), d),
            norm_t_cross: self.norm(&format!("{p}.norm_t_cross"), d),
            norm_v_cross: self.norm(&format!("{p}.norm_v_cross"), d),
            text_self: self.attn(&format!("{p}.text_self"), d),
            vis_self: self.attn(&format!("{p}.vis_self"), d),
            norm_t_self: self.norm(&format!("{p}.norm_t_self"), d),
            norm_v_self: self.norm(&format!("{p}.norm_v_self"), d),
            ffn_t: self.ffn(&format!("{p}.ffn_t"), d, h),
            ffn_v: self.ffn(&format!("{p}.ffn_v"), d, h),
            norm_t_ffn: self.norm(&format!("{p}.norm_t_ffn"), d),
            norm_v_ffn: self.norm(&format!("{p}.norm_v_ffn"), d),
        }
    }

    fn decoder_layer(&mut self, p: &str, d: usize, h: usize) -> DecoderLayerIds {
        DecoderLayerIds {
            self_attn: self.attn(&format!("{p}.self_attn"), d),
            norm_self: self.norm(&format!("{p}.norm_self"), d),
            cross: self.attn(&format!("{p}.cross"), d),
            norm_cross: self.norm(&format!("{p}.norm_cross"), d),
            ffn: self.ffn(&format!("{p}.ffn"), d, h),
            norm_ffn: self.norm(&format!("{p}.norm_ffn"), d),
        }
    }
}

fn build_layout<T: Real>(cfg: &ModelConfig, params: &mut ParamSet<T>, seed: u64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { params, rng: &mut rng };
    let (d, h) = (cfg.d_model, cfg.d_hidden);
    let text_tok = b.add("text.token".into(), vec![cfg.text_vocab, d], Init::Xavier);
    let text_pos = b.add("text.position".into(), vec![cfg.max_text_len, d], Init::Xavier);
    let vis_w = b.add("visual.proj.w".into(), vec![CELL_FEATURES, d], Init::Xavier);
    let vis_b = b.add("visual.proj.b".into(), vec![d], Init::Zeros);
    let vis_row = b.add("visual.row".into(), vec![GRID_SIZE, d], Init::Xavier);
    let vis_col = b.add("visual.col".into(), vec![GRID_SIZE, d], Init::Xavier);
    let encoder = if cfg.share_encoder_weights {
        vec![b.encoder_layer("encoder.shared", d, h)]
    } else {
        (0..cfg.n_encoder_layers).map(|i| b.encoder_layer(&format!("encoder.layers.{i}"), d, h)).collect()
    };
    let decoder = (0..cfg.n_decoder_layers).map(|i| b.decoder_layer(&format!("decoder.layers.{i}"), d, h)).collect();
    let act_tok = b.add("action.token".into(), vec![cfg.action_vocab, d], Init::Xavier);
    let act_pos = b.add("action.position".into(), vec![cfg.max_decode_len + 1, d], Init::Xavier);
    let out_w = b.add("output.w".into(), vec![d, cfg.action_vocab], Init::Xavier);
    let out_b = b.add("output.b".into(), vec![cfg.action_vocab], Init::Zeros);
    Layout { text_tok, text_pos, vis_w, vis_b, vis_row, vis_col, encoder, decoder, act_tok, act_pos, out_w, out_b }
}

/// One visual token: a cell's feature vector and its grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisualToken {
    pub features: [f64; CELL_FEATURES],
    pub row: usize,
    pub col: usize,
}

pub fn world_tokens(world: &World) -> Vec<VisualToken> {
    visual_tokens(world)
        .into_iter()
        .enumerate()
        .map(|(i, features)| VisualToken { features, row: i / GRID_SIZE, col: i % GRID_SIZE })
        .collect()
}

pub fn world_array_tokens(array: &WorldTensor) -> Vec<VisualToken> {
    let mut out = Vec::with_capacity(GRID_SIZE * GRID_SIZE);
    for (row, cells) in array.iter().enumerate() {
        for (col, features) in cells.iter().enumerate() {
            out.push(VisualToken { features: *features, row, col });
        }
    }
    out
}

/// Everything the model reads for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub text_ids: Vec<usize>,
    pub visual: Vec<VisualToken>,
    pub mask: AttentionMask,
}

impl ModelInput {
    pub fn from_episode(ep: &Episode, source: MaskSource) -> Result<Self, ModelError> {
        let mask = match source {
            MaskSource::Dependency => ep.mask.clone(),
            MaskSource::Constituency => mask_from_constituency(&parse_constituency(&ep.ast, &ep.tokens)?),
        };
        Ok(Self { text_ids: ep.tokens.ids(), visual: world_tokens(&ep.world), mask })
    }
}

pub fn action_ids(actions: &[Action]) -> Vec<usize> {
    actions.iter().map(|a| a.index()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    TextSelf,
    T2vCross,
    V2tCross,
    VisSelf,
    DecSelf,
    DecCross,
}

impl AttnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnKind::TextSelf => "text_self",
            AttnKind::T2vCross => "t2v_cross",
            AttnKind::V2tCross => "v2t_cross",
            AttnKind::VisSelf => "vis_self",
            AttnKind::DecSelf => "dec_self",
            AttnKind::DecCross => "dec_cross",
        }
    }
}

/// One recorded attention probability matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub kind: AttnKind,
    pub matrix: Vec<Vec<f64>>,
}

/// Per-layer keys and values of the tokens decoded so far.
pub struct DecoderCache {
    cross: Vec<(Var, Var)>,
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    len: usize,
}

/// Model parameters together with their configuration.
#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let layout = build_layout(&cfg, &mut params, seed);
        Ok(Self { cfg, params, layout })
    }

    /// Rebuilds a model from a configuration and named parameters.
    pub fn from_parts(cfg: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.params.len() {
            return Err(ModelError::BadParameter(format!("expected {} tensors, found {}", model.params.len(), params.len())));
        }
        for p in model.params.iter_mut() {
            let id = params.find(&p.name).ok_or_else(|| ModelError::BadParameter(p.name.clone()))?;
            let src = params.get(id);
            if src.tensor.shape() != p.tensor.shape() {
                return Err(ModelError::BadParameter(p.name.clone()));
            }
            p.tensor = src.tensor.clone();
            p.trainable = src.trainable;
        }
        Ok(model)
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self, ModelError> {
        let cfg: ModelConfig = serde_json::from_str(&ckpt.config_json)?;
        Self::from_parts(cfg, ckpt.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(checkpoint::load(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        checkpoint::save(path, &serde_json::to_string(&self.cfg)?, &self.params)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&serde_json::to_string(&self.cfg).expect("config serializes"), &self.params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.params.count_params(trainable_only)
    }

    /// Element count of the encoder-layer parameters, each counted once.
    pub fn encoder_param_count(&self) -> usize {
        self.prefix_count("encoder.")
    }

    /// Element count of one encoder layer's parameter set.
    pub fn single_encoder_layer_count(&self) -> usize {
        let prefix = if self.cfg.share_encoder_weights { "encoder.shared." } else { "encoder.layers.0." };
        self.prefix_count(prefix)
    }

    fn prefix_count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.tensor.len()).sum()
    }

    /// An unshared copy whose every encoder layer starts as the shared layer.
    pub fn unshare(&self) -> Result<Self, ModelError> {
        if !self.cfg.share_encoder_weights {
            return Ok(self.clone());
        }
        let cfg = ModelConfig { share_encoder_weights: false, ..self.cfg.clone() };
        let mut out = Self::new(cfg, 0)?;
        for p in out.params.iter_mut() {
            let source = match p.name.strip_prefix("encoder.layers.") {
                Some(rest) => format!("encoder.shared.{}", rest.split_once('.').expect("layer suffix").1),
                None => p.name.clone(),
            };
            let id = self.params.find(&source).ok_or(ModelError::BadParameter(source))?;
            p.tensor = self.params.get(id).tensor.clone();
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Greedy decoding: argmax per step until EOS or `max_len` actions.
    pub fn greedy_decode(&self, input: &ModelInput, max_len: usize) -> Result<Vec<Action>, ModelError> {
        let mut fwd = Forward::new(self, false, 0);
        let (t, v) = fwd.encode_input(input)?;
        let max_len = max_len.min(self.cfg.max_decode_len);
        let mut cache = fwd.start_decoding(t, v)?;
        let mut token = SOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = fwd.decode_next(&mut cache, token)?;
            let last = fwd.graph.value(logits).data();
            let mut best = 0;
            for (k, &z) in last.iter().enumerate() {
                if z > last[best] {
                    best = k;
                }
            }
            match Action::from_index(best) {
                Some(a) => {
                    out.push(a);
                    token = best;
                }
                None => break,
            }
        }
        Ok(out)
    }
}

/// A forward pass over one [`Graph`], binding each parameter to a graph
/// leaf the first time it is used.
pub struct Forward<'m, T: Real> {
    pub graph: Graph<T>,
    model: &'m Model<T>,
    bound: Vec<Option<Var>>,
    seed: u64,
    dropout_calls: u64,
    record: Option<Vec<AttentionMap>>,
}

impl<'m, T: Real> Forward<'m, T> {
    pub fn new(model: &'m Model<T>, training: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new().with_training(training),
            model,
            bound: vec![None; model.params.len()],
            seed,
            dropout_calls: 0,
            record: None,
        }
    }

    /// Keeps a copy of every attention probability matrix computed from now on.
    pub fn record_attention(&mut self) {
        self.record = Some(Vec::new());
    }

    pub fn take_attention(&mut self) -> Vec<AttentionMap> {
        self.record.take().unwrap_or_default()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.model.params.get(id);
        let v = if p.trainable { self.graph.param(p.tensor.clone()) } else { self.graph.constant(p.tensor.clone()) };
        self.bound[id.0] = Some(v);
        v
    }

    /// The graph variable of a named parameter, if the pass has used it.
    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.model.params.find(name).and_then(|id| self.bound[id.0])
    }

    /// Gradients per parameter after [`Graph::backward`], in parameter order.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| self.graph.grad(v)).map(<[T]>::to_vec)).collect()
    }

    fn dropout(&mut self, x: Var) -> Var {
        let seed = mix_seed(self.seed, 0xD80, self.dropout_calls);
        self.dropout_calls += 1;
        self.graph.dropout(x, self.model.cfg.dropout, seed)
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, ModelError> {
        let (w, b) = (self.param(w), self.param(b));
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_row(y, b)?)
    }

    fn norm(&mut self, x: Var, ids: NormIds) -> Result<Var, ModelError> {
        let y = self.graph.layernorm(x, LN_EPS);
        let (g, b) = (self.param(ids.gamma), self.param(ids.beta));
        let y = self.graph.mul_row(y, g)?;
        Ok(self.graph.add_row(y, b)?)
    }

    /// `norm(x + dropout(sublayer))`.
    fn residual(&mut self, x: Var, sub: Var, ids: NormIds) -> Result<Var, ModelError> {
        let sub = self.dropout(sub);
        let sum = self.graph.add(x, sub)?;
        self.norm(sum, ids)
    }

    fn ffn(&mut self, x: Var, ids: FfnIds) -> Result<Var, ModelError> {
        let h = self.linear(x, ids.w1, ids.b1)?;
        let h = self.graph.relu(h);
        let h = self.dropout(h);
        self.linear(h, ids.w2, ids.b2)
    }

    fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        ids: AttnIds,
        mask: Option<&AttentionMask>,
        tag: Option<(usize, AttnKind)>,
    ) -> Result<Var, ModelError> {
        let n = self.graph.shape(q_in)[0];
        let m = self.graph.shape(kv_in)[0];
        if let Some(mask) = mask {
            if mask.len() != n || n != m {
                return Err(ModelError::MaskSize { mask: mask.len(), tokens: n });
            }
        }
        let q = self.query(q_in, ids)?;
        let (kt, v) = self.keys_values(kv_in, ids)?;
        self.attend(q, kt, v, ids, mask, tag)
    }

    /// Scaled query projection.
    fn query(&mut self, x: Var, ids: AttnIds) -> Result<Var, ModelError> {
        let dh = self.model.cfg.d_model / self.model.cfg.n_heads;
        let q = self.linear(x, ids.wq, ids.bq)?;
        Ok(self.graph.scale(q, T::from_f64(1.0 / (dh as f64).sqrt())))
    }

    /// Transposed key projection and value projection.
    fn keys_values(&mut self, x: Var, ids: AttnIds) -> Result<(Var, Var), ModelError> {
        let k = self.linear(x, ids.wk, ids.bk)?;
        let kt = self.graph.transpose(k)?;
        let v = self.linear(x, ids.wv, ids.bv)?;
        Ok((kt, v))
    }

    fn attend(
        &mut self,
        q: Var,
        kt: Var,
        v: Var,
        ids: AttnIds,
        mask: Option<&AttentionMask>,
        tag: Option<(usize, AttnKind)>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.model.cfg;
        let (heads, dh) = (cfg.n_heads, cfg.d_model / cfg.n_heads);
        let n = self.graph.shape(q)[0];
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = self.graph.slice(q, 1, lo, hi)?;
            let kh = self.graph.slice(kt, 0, lo, hi)?;
            let scores = self.graph.matmul(qh, kh)?;
            let probs = match mask {
                Some(mask) => self.graph.masked_softmax(scores, mask.as_slice())?,
                None => self.graph.softmax_lastdim(scores),
            };
            if let (Some(rec), Some((layer, kind))) = (self.record.as_mut(), tag) {
                let value = self.graph.value(probs);
                let matrix = (0..n).map(|i| value.row(i).iter().map(|x| x.as_f64()).collect()).collect();
                rec.push(AttentionMap { layer, head: h, kind, matrix });
            }
            let probs = self.dropout(probs);
            let vh = self.graph.slice(v, 1, lo, hi)?;
            outs.push(self.graph.matmul(probs, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { self.graph.concat(&outs, 1)? };
        self.linear(cat, ids.wo, ids.bo)
    }

    /// Text self-attention of encoder layer `layer` applied on its own, with
    /// `mask` when the model uses text masks.
    pub fn text_self_attention(&mut self, layer: usize, x: Var, mask: &AttentionMask) -> Result<Var, ModelError> {
        let ids = self.encoder_ids(layer).text_self;
        let mask = self.effective_mask(mask);
        self.attention(x, x, ids, Some(&mask), None)
    }

    fn encoder_ids(&self, layer: usize) -> EncoderLayerIds {
        let enc = &self.model.layout.encoder;
        enc[if self.model.cfg.share_encoder_weights { 0 } else { layer }]
    }

    fn effective_mask(&self, mask: &AttentionMask) -> AttentionMask {
        if self.model.cfg.use_text_mask {
            mask.clone()
        } else {
            AttentionMask::all_true(mask.len())
        }
    }

    pub fn embed_text(&mut self, ids: &[usize]) -> Result<Var, ModelError> {
        let cfg = &self.model.cfg;
        if ids.len() > cfg.max_text_len {
            return Err(ModelError::TooLong { len: ids.len(), max: cfg.max_text_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= cfg.text_vocab) {
            return Err(ModelError::OutOfVocab { id, vocab: cfg.text_vocab });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let (tok, pos) = (self.param(self.model.layout.text_tok), self.param(self.model.layout.text_pos));
        let a = self.graph.embedding_gather(tok, ids)?;
        let b = self.graph.embedding_gather(pos, &positions)?;
        let sum = self.graph.add(a, b)?;
        Ok(self.dropout(sum))
    }

    /// Linear projection of each cell plus its row and column embeddings.
    pub fn embed_visual(&mut self, tokens: &[VisualToken]) -> Result<Var, ModelError> {
        let feats: Vec<f64> = tokens.iter().flat_map(|t| t.features).collect();
        let x = self.graph.constant(Tensor::from_f64(vec![tokens.len(), CELL_FEATURES], &feats)?);
        let l = &self.model.layout;
        let (vw, vb, vr, vc) = (l.vis_w, l.vis_b, l.vis_row, l.vis_col);
        let proj = self.linear(x, vw, vb)?;
        let rows: Vec<usize> = tokens.iter().map(|t| t.row).collect();
        let cols: Vec<usize> = tokens.iter().map(|t| t.col).collect();
        let (rt, ct) = (self.param(vr), self.param(vc));
        let re = self.graph.embedding_gather(rt, &rows)?;
        let ce = self.graph.embedding_gather(ct, &cols)?;
        let s = self.graph.add(proj, re)?;
        Ok(self.graph.add(s, ce)?)
    }

    pub fn embed_world(&mut self, array: &WorldTensor) -> Result<Var, ModelError> {
        self.embed_visual(&world_array_tokens(array))
    }

    fn encoder_layer(&mut self, layer: usize, t: Var, v: Var, mask: &AttentionMask) -> Result<(Var, Var), ModelError> {
        let ids = self.encoder_ids(layer);
        let t_cross = self.attention(t, v, ids.t2v, None, Some((layer, AttnKind::T2vCross)))?;
        let v_cross = self.attention(v, t, ids.v2t, None, Some((layer, AttnKind::V2tCross)))?;
        let t = self.residual(t, t_cross, ids.norm_t_cross)?;
        let v = self.residual(v, v_cross, ids.norm_v_cross)?;

        let t_self = self.attention(t, t, ids.text_self, Some(mask), Some((layer, AttnKind::TextSelf)))?;
        let v_self = self.attention(v, v, ids.vis_self, None, Some((layer, AttnKind::VisSelf)))?;
        let t = self.residual(t, t_self, ids.norm_t_self)?;
        let v = self.residual(v, v_self, ids.norm_v_self)?;

        let t_ff = self.ffn(t, ids.ffn_t)?;
        let v_ff = self.ffn(v, ids.ffn_v)?;
        let t = self.residual(t, t_ff, ids.norm_t_ffn)?;
        let v = self.residual(v, v_ff, ids.norm_v_ffn)?;
        Ok((t, v))
    }

    /// Runs every encoder layer. The mask is ignored when the model has text
    /// masking switched off.
    pub fn encode(&mut self, text: Var, vis: Var, mask: &AttentionMask) -> Result<(Var, Var), ModelError> {
        let n = self.graph.shape(text)[0];
        if mask.len() != n {
            return Err(ModelError::MaskSize { mask: mask.len(), tokens: n });
        }
        let mask = self.effective_mask(mask);
        let (mut t, mut v) = (text, vis);
        for layer in 0..self.model.cfg.n_encoder_layers {
            (t, v) = self.encoder_layer(layer, t, v, &mask)?;
        }
        Ok((t, v))
    }

    pub fn encode_input(&mut self, input: &ModelInput) -> Result<(Var, Var), ModelError> {
        let t = self.embed_text(&input.text_ids)?;
        let v = self.embed_visual(&input.visual)?;
        self.encode(t, v, &input.mask)
    }

    /// Decoder logits for every prefix position.
    pub fn decode(&mut self, text_enc: Var, vis_enc: Var, prefix: &[usize]) -> Result<Var, ModelError> {
        let cfg = &self.model.cfg;
        if prefix.first() != Some(&SOS) {
            return Err(ModelError::MissingSos);
        }
        if prefix.len() > cfg.max_decode_len + 1 {
            return Err(ModelError::TooLong { len: prefix.len(), max: cfg.max_decode_len + 1 });
        }
        if let Some(&id) = prefix.iter().find(|&&id| id >= cfg.action_vocab) {
            return Err(ModelError::OutOfVocab { id, vocab: cfg.action_vocab });
        }
        let l = self.model.layout.clone();
        let memory = self.graph.concat(&[text_enc, vis_enc], 0)?;
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let (tok, pos) = (self.param(l.act_tok), self.param(l.act_pos));
        let a = self.graph.embedding_gather(tok, prefix)?;
        let b = self.graph.embedding_gather(pos, &positions)?;
        let x = self.graph.add(a, b)?;
        let mut x = self.dropout(x);
        let causal = AttentionMask::causal(prefix.len());
        for (i, ids) in l.decoder.iter().enumerate() {
            let s = self.attention(x, x, ids.self_attn, Some(&causal), Some((i, AttnKind::DecSelf)))?;
            x = self.residual(x, s, ids.norm_self)?;
            let c = self.attention(x, memory, ids.cross, None, Some((i, AttnKind::DecCross)))?;
            x = self.residual(x, c, ids.norm_cross)?;
            let f = self.ffn(x, ids.ffn)?;
            x = self.residual(x, f, ids.norm_ffn)?;
        }
        self.linear(x, l.out_w, l.out_b)
    }

    /// Starts incremental decoding over encoder outputs.
    pub fn start_decoding(&mut self, text_enc: Var, vis_enc: Var) -> Result<DecoderCache, ModelError> {
        let memory = self.graph.concat(&[text_enc, vis_enc], 0)?;
        let layers = self.model.layout.decoder.clone();
        let mut cross = Vec::with_capacity(layers.len());
        for ids in &layers {
            cross.push(self.keys_values(memory, ids.cross)?);
        }
        Ok(DecoderCache { cross, keys: vec![None; layers.len()], values: vec![None; layers.len()], len: 0 })
    }

    /// Feeds one more prefix token and returns the logits at its position,
    /// equal to the last row of [`Forward::decode`] over the whole prefix.
    pub fn decode_next(&mut self, cache: &mut DecoderCache, token: usize) -> Result<Var, ModelError> {
        let cfg = &self.model.cfg;
        if cache.len == 0 && token != SOS {
            return Err(ModelError::MissingSos);
        }
        if cache.len > cfg.max_decode_len {
            return Err(ModelError::TooLong { len: cache.len + 1, max: cfg.max_decode_len + 1 });
        }
        if token >= cfg.action_vocab {
            return Err(ModelError::OutOfVocab { id: token, vocab: cfg.action_vocab });
        }
        let l = self.model.layout.clone();
        let (tok, pos) = (self.param(l.act_tok), self.param(l.act_pos));
        let a = self.graph.embedding_gather(tok, &[token])?;
        let b = self.graph.embedding_gather(pos, &[cache.len])?;
        let mut x = self.graph.add(a, b)?;
        for (i, ids) in l.decoder.iter().enumerate() {
            let q = self.query(x, ids.self_attn)?;
            let k = self.linear(x, ids.self_attn.wk, ids.self_attn.bk)?;
            let v = self.linear(x, ids.self_attn.wv, ids.self_attn.bv)?;
            let k = match cache.keys[i] {
                Some(prev) => self.graph.concat(&[prev, k], 0)?,
                None => k,
            };
            let v = match cache.values[i] {
                Some(prev) => self.graph.concat(&[prev, v], 0)?,
                None => v,
            };
            cache.keys[i] = Some(k);
            cache.values[i] = Some(v);
            let kt = self.graph.transpose(k)?;
            let s = self.attend(q, kt, v, ids.self_attn, None, None)?;
            x = self.residual(x, s, ids.norm_self)?;
            let q = self.query(x, ids.cross)?;
            let (mkt, mv) = cache.cross[i];
            let c = self.attend(q, mkt, mv, ids.cross, None, None)?;
            x = self.residual(x, c, ids.norm_cross)?;
            let f = self.ffn(x, ids.ffn)?;
            x = self.residual(x, f, ids.norm_ffn)?;
        }
        cache.len += 1;
        self.linear(x, l.out_w, l.out_b)
    }

    /// Teacher-forced mean cross-entropy over every action token and EOS of
    /// every episode in the batch.
    pub fn batch_loss(&mut self, batch: &[(&ModelInput, &[usize])]) -> Result<Var, ModelError> {
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for (input, actions) in batch {
            let (t, v) = self.encode_input(input)?;
            let mut prefix = Vec::with_capacity(actions.len() + 1);
            prefix.push(SOS);
            prefix.extend_from_slice(actions);
            logits.push(self.decode(t, v, &prefix)?);
            targets.extend_from_slice(actions);
            targets.push(EOS);
        }
        let all = self.graph.concat(&logits, 0)?;
        Ok(self.graph.cross_entropy(all, &targets, PAD)?)
    }
}

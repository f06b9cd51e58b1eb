//! Single-stream multi-modal transformer encoder.
//!
//! Text tokens and image patches are embedded into one sequence,
//! `[CLS] knowledge [SEP] question [SEP] patch_1 .. patch_m`, summed with
//! position and segment embeddings, passed through pre-norm transformer
//! blocks and pooled at the `[CLS]` position by a small MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{CLS_ID, SEP_ID};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

/// Nonlinearity of the hidden layer of the pooling MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolActivation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_segments: usize,
    /// Side length of the square patch grid.
    pub patch_grid: usize,
    /// Length of one flattened patch vector.
    pub patch_dim: usize,
    pub activation: Activation,
    pub pool_activation: PoolActivation,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            vocab_size: 64,
            max_seq_len: 40,
            n_segments: 2,
            patch_grid: 4,
            patch_dim: 8,
            activation: Activation::Gelu,
            pool_activation: PoolActivation::Tanh,
            ln_eps: 1e-9,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("patch_grid", self.patch_grid),
            ("patch_dim", self.patch_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.n_segments != 2 {
            return Err(Error::Config("n_segments must be 2 (text, image)".into()));
        }
        if self.max_seq_len < 3 + self.patch_count() {
            return Err(Error::Config(format!(
                "max_seq_len {} cannot hold [CLS], two [SEP] and {} patches",
                self.max_seq_len,
                self.patch_count()
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Positions reserved for text; patches use the static positions after it.
    pub fn text_capacity(&self) -> usize {
        self.max_seq_len - self.patch_count()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// One encoder input sequence with its index vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalInput {
    pub token_ids: Vec<usize>,
    /// `[m, patch_dim]`; `None` for text-only input.
    pub patch_values: Option<Tensor>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// One flag per text position; empty when no knowledge span is present.
    pub knowledge_mask: Vec<bool>,
}

impl MultiModalInput {
    /// Lays out `[CLS] K [SEP] Q [SEP]` (or `[CLS] Q [SEP]` without knowledge)
    /// followed by the patches at their static positions.
    pub fn new(
        knowledge: Option<&[usize]>,
        question: &[usize],
        patches: Option<&Tensor>,
        config: &EncoderConfig,
    ) -> Result<Self> {
        let mut token_ids = vec![CLS_ID];
        let mut knowledge_mask = Vec::new();
        if let Some(k) = knowledge {
            token_ids.extend_from_slice(k);
            token_ids.push(SEP_ID);
            knowledge_mask = vec![false; token_ids.len()];
            knowledge_mask[1..1 + k.len()].fill(true);
        }
        token_ids.extend_from_slice(question);
        token_ids.push(SEP_ID);
        if !knowledge_mask.is_empty() {
            knowledge_mask.resize(token_ids.len(), false);
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of size {}",
                config.vocab_size
            )));
        }
        if token_ids.len() > config.text_capacity() {
            return Err(Error::Input(format!(
                "{} text tokens exceed capacity {} (max_seq_len {} minus {} patches)",
                token_ids.len(),
                config.text_capacity(),
                config.max_seq_len,
                config.patch_count()
            )));
        }
        let mut position_ids: Vec<usize> = (0..token_ids.len()).collect();
        let mut segment_ids = vec![0; token_ids.len()];
        if let Some(p) = patches {
            let expected = [config.patch_count(), config.patch_dim];
            if p.shape() != expected {
                return Err(Error::Input(format!(
                    "patch tensor shape {:?}, expected {expected:?}",
                    p.shape()
                )));
            }
            position_ids.extend((0..config.patch_count()).map(|j| config.text_capacity() + j));
            segment_ids.extend(std::iter::repeat(1).take(config.patch_count()));
        }
        Ok(Self {
            token_ids,
            patch_values: patches.cloned(),
            position_ids,
            segment_ids,
            knowledge_mask,
        })
    }

    /// Knowledge sentence alone: no question span and no patches.
    pub fn knowledge_only(tokens: &[usize], config: &EncoderConfig) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("empty knowledge token sequence".into()));
        }
        Self::new(Some(tokens), &[], None, config)
    }

    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn has_knowledge(&self) -> bool {
        !self.knowledge_mask.is_empty()
    }
}

/// A tokenized question with its image patches.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionImage {
    pub question: Vec<usize>,
    /// `[m, patch_dim]`.
    pub patches: Tensor,
}

impl QuestionImage {
    pub fn input(&self, knowledge: Option<&[usize]>, config: &EncoderConfig) -> Result<MultiModalInput> {
        MultiModalInput::new(knowledge, &self.question, Some(&self.patches), config)
    }
}

#[derive(Clone, Debug)]
pub struct BlockParameters {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_fc1: ParamId,
    pub b_fc1: ParamId,
    pub w_fc2: ParamId,
    pub b_fc2: ParamId,
}

fn init_pool(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> [ParamId; 4] {
    let std = 1.0 / (d as f64).sqrt();
    [
        store.add_normal(format!("{prefix}.pool_w1"), &[d, d], std, rng),
        store.add(format!("{prefix}.pool_b1"), Tensor::zeros(&[d])),
        store.add_normal(format!("{prefix}.pool_w2"), &[d, d], std, rng),
        store.add(format!("{prefix}.pool_b2"), Tensor::zeros(&[d])),
    ]
}

/// Parameter layout of one encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncoderParameters {
    pub config: EncoderConfig,
    pub word: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub blocks: Vec<BlockParameters>,
    pub pool_w1: ParamId,
    pub pool_b1: ParamId,
    pub pool_w2: ParamId,
    pub pool_b2: ParamId,
}

impl EncoderParameters {
    /// Registers a randomly initialised encoder under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = d * config.mlp_ratio;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let word = store.add_normal(format!("{prefix}.word"), &[config.vocab_size, d], 1.0, rng);
        let patch_w = store.add_normal(
            format!("{prefix}.patch_w"),
            &[config.patch_dim, d],
            inv(config.patch_dim),
            rng,
        );
        let patch_b = store.add(format!("{prefix}.patch_b"), Tensor::zeros(&[d]));
        let position =
            store.add_normal(format!("{prefix}.position"), &[config.max_seq_len, d], 0.5, rng);
        let segment = store.add_normal(format!("{prefix}.segment"), &[config.n_segments, d], 0.5, rng);
        let out_std = inv(d) / ((2 * config.layers) as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.block{l}");
                BlockParameters {
                    ln1_gain: store.add(format!("{p}.ln1_gain"), Tensor::ones(&[d])),
                    ln1_bias: store.add(format!("{p}.ln1_bias"), Tensor::zeros(&[d])),
                    w_qkv: store.add_normal(format!("{p}.w_qkv"), &[d, 3 * d], inv(d), rng),
                    b_qkv: store.add(format!("{p}.b_qkv"), Tensor::zeros(&[3 * d])),
                    w_out: store.add_normal(format!("{p}.w_out"), &[d, d], out_std, rng),
                    b_out: store.add(format!("{p}.b_out"), Tensor::zeros(&[d])),
                    ln2_gain: store.add(format!("{p}.ln2_gain"), Tensor::ones(&[d])),
                    ln2_bias: store.add(format!("{p}.ln2_bias"), Tensor::zeros(&[d])),
                    w_fc1: store.add_normal(format!("{p}.w_fc1"), &[d, h], inv(d), rng),
                    b_fc1: store.add(format!("{p}.b_fc1"), Tensor::zeros(&[h])),
                    w_fc2: store.add_normal(
                        format!("{p}.w_fc2"),
                        &[h, d],
                        inv(h) / ((2 * config.layers) as f64).sqrt(),
                        rng,
                    ),
                    b_fc2: store.add(format!("{p}.b_fc2"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        let [pool_w1, pool_b1, pool_w2, pool_b2] = init_pool(store, prefix, d, rng);
        Ok(Self {
            config: config.clone(),
            word,
            patch_w,
            patch_b,
            position,
            segment,
            blocks,
            pool_w1,
            pool_b1,
            pool_w2,
            pool_b2,
        })
    }

    /// The same embeddings and blocks with a freshly initialised pooling MLP
    /// registered under `prefix`.
    pub fn with_pool(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Self {
        let [pool_w1, pool_b1, pool_w2, pool_b2] = init_pool(store, prefix, self.config.d_model, rng);
        Self {
            pool_w1,
            pool_b1,
            pool_w2,
            pool_b2,
            ..self.clone()
        }
    }

    /// Every parameter id owned by this encoder, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.word, self.patch_w, self.patch_b, self.position, self.segment];
        for b in &self.blocks {
            ids.extend([
                b.ln1_gain, b.ln1_bias, b.w_qkv, b.b_qkv, b.w_out, b.b_out, b.ln2_gain,
                b.ln2_bias, b.w_fc1, b.b_fc1, b.w_fc2, b.b_fc2,
            ]);
        }
        ids.extend([self.pool_w1, self.pool_b1, self.pool_w2, self.pool_b2]);
        ids
    }
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Pooled `[d]` representation.
    pub pooled: Var,
    /// Final hidden states `[s, d]`.
    pub hidden: Var,
    /// `attention[block][head]`, each `[s, s]` and row-stochastic.
    pub attention: Vec<Vec<Var>>,
}

/// Sum of token-or-patch, position and segment embeddings, `[s, d]`.
pub fn embed(
    g: &mut Graph,
    bound: &Bound,
    params: &EncoderParameters,
    input: &MultiModalInput,
) -> Result<Var> {
    let config = &params.config;
    if input.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence of length {} exceeds max_seq_len {}",
            input.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = input.token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    let words = g.gather(bound[params.word], &input.token_ids)?;
    let tokens = match &input.patch_values {
        Some(p) => {
            let patches = g.constant(p.clone());
            let proj = g.matmul(patches, bound[params.patch_w])?;
            let proj = g.add_row(proj, bound[params.patch_b])?;
            g.concat_rows(&[words, proj])?
        }
        None => words,
    };
    let pos = g.gather(bound[params.position], &input.position_ids)?;
    let seg = g.gather(bound[params.segment], &input.segment_ids)?;
    let e = g.add(tokens, pos)?;
    Ok(g.add(e, seg)?)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

/// One pre-norm block: `x + MSA(LN(x))`, then `h + MLP(LN(h))`.
/// Returns the output and the per-head attention weights.
pub fn encode_block(
    g: &mut Graph,
    bound: &Bound,
    block: &BlockParameters,
    config: &EncoderConfig,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let d = config.d_model;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let h = g.layer_norm(x, bound[block.ln1_gain], bound[block.ln1_bias], config.ln_eps)?;
    let qkv = linear(g, h, bound[block.w_qkv], bound[block.b_qkv])?;
    let mut heads = Vec::with_capacity(config.heads);
    let mut maps = Vec::with_capacity(config.heads);
    for head in 0..config.heads {
        let q = g.slice_cols(qkv, head * dh, dh)?;
        let k = g.slice_cols(qkv, d + head * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores)?;
        heads.push(g.matmul(weights, v)?);
        maps.push(weights);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let attn = linear(g, merged, bound[block.w_out], bound[block.b_out])?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, bound[block.ln2_gain], bound[block.ln2_bias], config.ln_eps)?;
    let h = linear(g, h, bound[block.w_fc1], bound[block.b_fc1])?;
    let h = match config.activation {
        Activation::Gelu => g.gelu(h),
        Activation::Relu => g.relu(h),
    };
    let h = linear(g, h, bound[block.w_fc2], bound[block.b_fc2])?;
    Ok((g.add(x, h)?, maps))
}

/// Embeds, runs every block and pools the `[CLS]` row.
pub fn encode(
    g: &mut Graph,
    bound: &Bound,
    params: &EncoderParameters,
    input: &MultiModalInput,
) -> Result<Encoded> {
    let mut x = embed(g, bound, params, input)?;
    let mut attention = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, maps) = encode_block(g, bound, block, &params.config, x)?;
        x = next;
        attention.push(maps);
    }
    let cls = g.row(x, 0)?;
    let h = linear(g, cls, bound[params.pool_w1], bound[params.pool_b1])?;
    let h = match params.config.pool_activation {
        PoolActivation::Tanh => g.tanh(h),
        PoolActivation::Identity => h,
    };
    let pooled = linear(g, h, bound[params.pool_w2], bound[params.pool_b2])?;
    Ok(Encoded {
        pooled,
        hidden: x,
        attention,
    })
}

/// Encodes a knowledge sentence on its own (no question, no image).
pub fn encode_text_only(
    g: &mut Graph,
    bound: &Bound,
    params: &EncoderParameters,
    tokens: &[usize],
) -> Result<Encoded> {
    let input = MultiModalInput::knowledge_only(tokens, &params.config)?;
    encode(g, bound, params, &input)
}

/// Forward-only pooled vector, for inference paths.
pub fn encode_pooled(
    store: &ParamStore,
    params: &EncoderParameters,
    input: &MultiModalInput,
) -> Result<Tensor> {
    Ok(encode_pooled_all(store, params, std::slice::from_ref(input))?.remove(0))
}

/// [`encode_pooled`] over many inputs, binding the parameters once.
pub fn encode_pooled_all(
    store: &ParamStore,
    params: &EncoderParameters,
    inputs: &[MultiModalInput],
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let base = g.len();
    inputs
        .iter()
        .map(|input| {
            let out = encode(&mut g, &bound, params, input)?;
            let pooled = g.value(out.pooled).clone();
            g.truncate(base);
            Ok(pooled)
        })
        .collect()
}

//! Answer prediction and the loss-gap objective.
//!
//! The reader classifies over a fixed answer space from the encoding of
//! `(knowledge, question, image)`. Running it once more without knowledge
//! gives the gap `delta = L_QI - L_QIK`: how much a retrieved entry lowered
//! the answer loss. The gap weights the reader loss and labels the retriever.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderConfig, EncoderParameters, MultiModalInput, QuestionImage};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::params::{Bound, ParamId, ParamStore};
use crate::retriever::{
    rank, rescore, retriever_loss_with_targets, KnowledgeIndex, PseudoLabel, RetrieverParameters,
};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered, duplicate-free list of candidate answers.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerSpace {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerSpace {
    pub fn new(answers: Vec<String>) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::Input("empty answer space".into()));
        }
        let mut index = HashMap::new();
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate answer {a:?}")));
            }
        }
        Ok(Self { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, id: usize) -> &str {
        &self.answers[id]
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.answers.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(fs::read_to_string(path)?.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    /// Hidden width of the answer head; `None` for a single linear layer.
    pub head_hidden: Option<usize>,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self { head_hidden: None }
    }
}

/// Reader encoder plus answer head. The head is a list of affine layers
/// with GELU between them.
#[derive(Clone, Debug)]
pub struct ReaderParameters {
    pub encoder: EncoderParameters,
    pub head: Vec<(ParamId, ParamId)>,
    pub n_answers: usize,
}

impl ReaderParameters {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        encoder: &EncoderConfig,
        reader: &ReaderConfig,
        n_answers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_answers == 0 {
            return Err(Error::Config("answer space must be non-empty".into()));
        }
        let enc = EncoderParameters::init(store, &format!("{prefix}.encoder"), encoder, rng)?;
        let d = encoder.d_model;
        let widths = match reader.head_hidden {
            Some(0) => return Err(Error::Config("head_hidden must be positive".into())),
            Some(h) => vec![d, h, n_answers],
            None => vec![d, n_answers],
        };
        let head = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = 1.0 / (w[0] as f64).sqrt();
                let wid = store.add_normal(format!("{prefix}.head{i}.w"), &[w[0], w[1]], std, rng);
                let bid = store.add(format!("{prefix}.head{i}.b"), Tensor::zeros(&[w[1]]));
                (wid, bid)
            })
            .collect();
        Ok(Self {
            encoder: enc,
            head,
            n_answers,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        for &(w, b) in &self.head {
            ids.extend([w, b]);
        }
        ids
    }
}

/// Answer logits for one encoder input.
pub fn logits(g: &mut Graph, bound: &Bound, reader: &ReaderParameters, input: &MultiModalInput) -> Result<Var> {
    let mut h = encode(g, bound, &reader.encoder, input)?.pooled;
    for (i, &(w, b)) in reader.head.iter().enumerate() {
        if i > 0 {
            h = g.gelu(h);
        }
        h = g.matmul(h, bound[w])?;
        h = g.add_row(h, bound[b])?;
    }
    Ok(h)
}

/// Logits over the answer space with their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerDistribution {
    pub logits: Vec<f64>,
}

impl AnswerDistribution {
    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Highest-scoring answer; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Forward-only prediction, with the entry's tokens in the knowledge span
/// when given.
pub fn predict(
    store: &ParamStore,
    reader: &ReaderParameters,
    qi: &QuestionImage,
    knowledge: Option<&[usize]>,
) -> Result<AnswerDistribution> {
    let input = qi.input(knowledge, &reader.encoder.config)?;
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let out = logits(&mut g, &bound, reader, &input)?;
    Ok(AnswerDistribution {
        logits: g.value(out).data().to_vec(),
    })
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    if label >= n {
        return Err(Error::Input(format!("label {label} outside answer space of {n}")));
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.index(lp, label)?;
    Ok(g.neg(picked))
}

/// `(delta, l_qik, l_qi)` from two forwards sharing the reader parameters.
pub fn loss_gap(
    store: &ParamStore,
    reader: &ReaderParameters,
    qi: &QuestionImage,
    knowledge: &[usize],
    label: usize,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let cfg = &reader.encoder.config;
    let with_k = logits(&mut g, &bound, reader, &qi.input(Some(knowledge), cfg)?)?;
    let l_qik = cross_entropy(&mut g, with_k, label)?;
    let without = logits(&mut g, &bound, reader, &qi.input(None, cfg)?)?;
    let l_qi = cross_entropy(&mut g, without, label)?;
    let (l_qik, l_qi) = (g.scalar_value(l_qik), g.scalar_value(l_qi));
    Ok((l_qi - l_qik, l_qik, l_qi))
}

/// How the loss gap weights a reader instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceWeight {
    /// `sigmoid(delta)`.
    Smooth,
    /// `1` when `delta > 0`, else `0`.
    Binary,
}

impl InstanceWeight {
    pub fn weight(self, delta: f64) -> f64 {
        match self {
            InstanceWeight::Smooth => sigmoid(delta),
            InstanceWeight::Binary => {
                if delta > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `w(delta) * l_qik` with the gap detached from the graph.
pub fn weighted_reader_loss(g: &mut Graph, delta: Var, l_qik: Var, mode: InstanceWeight) -> Result<Var> {
    let frozen = g.stop_gradient(delta);
    let w = match mode {
        InstanceWeight::Smooth => g.sigmoid(frozen),
        InstanceWeight::Binary => {
            let d = g.scalar_value(frozen);
            g.constant(Tensor::scalar(mode.weight(d)))
        }
    };
    Ok(g.mul(w, l_qik)?)
}

/// Mean of the per-entry weighted reader losses plus `lambda * l_ret`.
pub fn combined_loss(g: &mut Graph, weighted: &[Var], l_ret: Var, lambda: f64) -> Result<Var> {
    if weighted.is_empty() {
        return Err(Error::Contract("combined loss over zero entries".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("negative lambda {lambda}")));
    }
    let mut sum = weighted[0];
    for &w in &weighted[1..] {
        sum = g.add(sum, w)?;
    }
    let mean = g.scale(sum, 1.0 / weighted.len() as f64);
    let ret = g.scale(l_ret, lambda);
    Ok(g.add(mean, ret)?)
}

/// Per-instance record of every loss term, one slot per retrieved entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub entry_ids: Vec<usize>,
    pub l_qik: Vec<f64>,
    pub l_qi: f64,
    pub delta: Vec<f64>,
    pub sigma_delta: Vec<f64>,
    pub tanh_delta: Vec<f64>,
    pub similarities: Vec<f64>,
    pub l_ret: f64,
    pub reader: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_qi, self.l_ret, self.reader, self.total]
            .iter()
            .chain(&self.l_qik)
            .chain(&self.similarities)
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub weight: InstanceWeight,
    pub label: PseudoLabel,
}

/// The joint objective for one training instance and its retrieved entries.
pub struct InstanceLoss {
    pub total: Var,
    pub bundle: LossBundle,
}

#[allow(clippy::too_many_arguments)]
pub fn instance_loss(
    g: &mut Graph,
    bound: &Bound,
    retriever: &RetrieverParameters,
    reader: &ReaderParameters,
    kb: &KnowledgeBase,
    qi: &QuestionImage,
    label: usize,
    entry_ids: &[usize],
    settings: LossSettings,
) -> Result<InstanceLoss> {
    if entry_ids.is_empty() {
        return Err(Error::Contract("no retrieved entries".into()));
    }
    let cfg = &reader.encoder.config;
    let without = logits(g, bound, reader, &qi.input(None, cfg)?)?;
    let l_qi = cross_entropy(g, without, label)?;

    let mut weighted = Vec::with_capacity(entry_ids.len());
    let mut l_qik = Vec::with_capacity(entry_ids.len());
    let mut deltas = Vec::with_capacity(entry_ids.len());
    for &id in entry_ids {
        let entry = kb
            .get(id)
            .ok_or_else(|| Error::Input(format!("unknown knowledge entry {id}")))?;
        let with_k = logits(g, bound, reader, &qi.input(Some(&entry.token_ids), cfg)?)?;
        let ce = cross_entropy(g, with_k, label)?;
        let delta = g.sub(l_qi, ce)?;
        weighted.push(weighted_reader_loss(g, delta, ce, settings.weight)?);
        l_qik.push(g.scalar_value(ce));
        deltas.push(g.scalar_value(delta));
    }

    let retrieval_input = qi.input(None, &retriever.query.config)?;
    let sims = rescore(g, bound, retriever, kb, &retrieval_input, entry_ids)?;
    let targets: Vec<f64> = deltas.iter().map(|&d| settings.label.target(d)).collect();
    let l_ret = retriever_loss_with_targets(g, &targets, &sims)?;
    let total = combined_loss(g, &weighted, l_ret, settings.lambda)?;
    let reader_value = weighted.iter().map(|&w| g.scalar_value(w)).sum::<f64>() / weighted.len() as f64;

    let bundle = LossBundle {
        entry_ids: entry_ids.to_vec(),
        l_qik,
        l_qi: g.scalar_value(l_qi),
        sigma_delta: deltas.iter().map(|&d| sigmoid(d)).collect(),
        tanh_delta: deltas.iter().map(|d| d.tanh()).collect(),
        delta: deltas,
        similarities: sims.iter().map(|&s| g.scalar_value(s)).collect(),
        l_ret: g.scalar_value(l_ret),
        reader: reader_value,
        total: g.scalar_value(total),
    };
    Ok(InstanceLoss { total, bundle })
}

/// Answer and top-1 entry for one question.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub answer: usize,
    pub entry_id: usize,
    pub distribution: AnswerDistribution,
}

/// Retrieves the single best entry and reads it together with the question
/// and image.
pub fn infer(
    store: &ParamStore,
    retriever: &RetrieverParameters,
    reader: &ReaderParameters,
    kb: &KnowledgeBase,
    qi: &QuestionImage,
    index: &KnowledgeIndex,
) -> Result<Inference> {
    if index.is_empty() {
        return Err(Error::RetrievalImpossible("empty index".into()));
    }
    let query = crate::encoder::encode_pooled(store, &retriever.query, &qi.input(None, &retriever.query.config)?)?;
    let top = rank(query.data(), index, 1)?;
    let entry_id = top.entry_ids[0];
    let entry = kb
        .get(entry_id)
        .ok_or_else(|| Error::Input(format!("index row {entry_id} has no knowledge entry")))?;
    let distribution = predict(store, reader, qi, Some(&entry.token_ids))?;
    Ok(Inference {
        answer: distribution.argmax(),
        entry_id,
        distribution,
    })
}

//! Dense retrieval over the knowledge base.
//!
//! The image-question pair and every knowledge sentence are encoded into
//! `d`-dimensional vectors and ranked by cosine similarity. The retriever is
//! trained by regressing the similarities of the retrieved entries onto
//! pseudo relevance labels derived from the reader's loss gap.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode, encode_pooled, encode_pooled_all, encode_text_only, EncoderParameters, MultiModalInput};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// How a loss gap becomes a regression target for the similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabel {
    /// `tanh(delta)`.
    Smooth,
    /// `+1` when `delta > 0`, else `-1`.
    Binary,
}

impl PseudoLabel {
    pub fn target(self, delta: f64) -> f64 {
        match self {
            PseudoLabel::Smooth => delta.tanh(),
            PseudoLabel::Binary => {
                if delta > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Query-side and knowledge-side encoders. When shared, both fields hold
/// the same parameter ids.
#[derive(Clone, Debug)]
pub struct RetrieverParameters {
    pub query: EncoderParameters,
    pub knowledge: EncoderParameters,
}

impl RetrieverParameters {
    pub fn shared(encoder: EncoderParameters) -> Self {
        Self {
            query: encoder.clone(),
            knowledge: encoder,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.query.word == self.knowledge.word
    }

    pub fn param_ids(&self) -> Vec<crate::params::ParamId> {
        let mut ids = self.query.param_ids();
        if !self.is_shared() {
            ids.extend(self.knowledge.param_ids());
        }
        ids
    }
}

/// Encoded knowledge vectors, row `i` for entry `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeIndex {
    vectors: Tensor,
    norms: Vec<f64>,
    version: u64,
}

impl KnowledgeIndex {
    pub fn from_vectors(vectors: Tensor, version: u64) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::Input(format!(
                "index must be a matrix, got shape {:?}",
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Numeric("non-finite knowledge vector".into()));
        }
        let norms = (0..vectors.rows()).map(|i| norm(vectors.row(i))).collect();
        Ok(Self {
            vectors,
            norms,
            version,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.last_dim()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// Parameter version the index was built at.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Scales one row in place; used by invariance tests.
    pub fn scale_row(&mut self, i: usize, alpha: f64) {
        let d = self.dim();
        for v in &mut self.vectors.data_mut()[i * d..(i + 1) * d] {
            *v *= alpha;
        }
        self.norms[i] = norm(self.vectors.row(i));
    }
}

/// Ordered top-t entries with their similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub entry_ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.entry_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.entry_ids.contains(&id)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Plain cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Differentiable cosine similarity of two `[d]` vectors.
pub fn cosine_sim(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    cosine(g.value(a).data(), g.value(b).data())?;
    let ab = g.mul(a, b)?;
    let dot = g.sum(ab);
    let aa = g.mul(a, a)?;
    let aa = g.sum(aa);
    let bb = g.mul(b, b)?;
    let bb = g.sum(bb);
    let denom = g.mul(aa, bb)?;
    let denom = g.sqrt(denom)?;
    let sim = g.div(dot, denom)?;
    Ok(g.clamp(sim, -1.0, 1.0))
}

/// Encodes every knowledge entry with frozen parameters. Rows are written
/// at fixed offsets, so the result does not depend on the thread count.
pub fn build_index(
    store: &ParamStore,
    params: &EncoderParameters,
    kb: &KnowledgeBase,
    version: u64,
) -> Result<KnowledgeIndex> {
    if kb.is_empty() {
        return Err(Error::RetrievalImpossible("empty knowledge base".into()));
    }
    let d = params.config.d_model;
    let mut data = vec![0.0; kb.len() * d];
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = kb.len().div_ceil(workers);
    let entries = kb.entries();
    thread::scope(|scope| {
        let handles: Vec<_> = data
            .chunks_mut(chunk * d)
            .zip(entries.chunks(chunk))
            .map(|(rows, batch)| {
                scope.spawn(move || -> Result<()> {
                    let inputs = batch
                        .iter()
                        .map(|entry| MultiModalInput::knowledge_only(&entry.token_ids, &params.config))
                        .collect::<Result<Vec<_>>>()?;
                    let pooled = encode_pooled_all(store, params, &inputs)?;
                    for (row, v) in rows.chunks_mut(d).zip(&pooled) {
                        row.copy_from_slice(v.data());
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("index worker panicked"))
    })?;
    KnowledgeIndex::from_vectors(Tensor::new(vec![kb.len(), d], data)?, version)
}

/// Top-t entries for an already encoded query. Ties go to the lower id.
pub fn rank(query: &[f64], index: &KnowledgeIndex, t: usize) -> Result<RetrievalResult> {
    if t == 0 || t > index.len() {
        return Err(Error::Input(format!(
            "cannot retrieve {t} entries from an index of {}",
            index.len()
        )));
    }
    if query.len() != index.dim() {
        return Err(Error::Input(format!(
            "query dimension {} does not match index dimension {}",
            query.len(),
            index.dim()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::Numeric("degenerate query vector".into()));
    }
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|i| {
            let n = index.norms[i];
            if n == 0.0 {
                return Err(Error::Numeric(format!("zero-norm knowledge vector {i}")));
            }
            let dot: f64 = query.iter().zip(index.row(i)).map(|(a, b)| a * b).sum();
            Ok((i, (dot / (qn * n)).clamp(-1.0, 1.0)))
        })
        .collect::<Result<_>>()?;
    let by_score = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if t < scored.len() {
        scored.select_nth_unstable_by(t - 1, by_score);
        scored.truncate(t);
    }
    scored.sort_by(by_score);
    Ok(RetrievalResult {
        entry_ids: scored.iter().map(|s| s.0).collect(),
        scores: scored.iter().map(|s| s.1).collect(),
    })
}

/// Encodes the image-question pair (knowledge span empty) and ranks the index.
pub fn retrieve(
    store: &ParamStore,
    params: &RetrieverParameters,
    qi: &MultiModalInput,
    index: &KnowledgeIndex,
    t: usize,
) -> Result<RetrievalResult> {
    if index.is_empty() {
        return Err(Error::RetrievalImpossible("empty index".into()));
    }
    if qi.has_knowledge() {
        return Err(Error::Input("retrieval query must not carry a knowledge span".into()));
    }
    let query = encode_pooled(store, &params.query, qi)?;
    rank(query.data(), index, t)
}

/// Differentiable similarities between the query and the selected entries,
/// recomputed with the current parameters.
pub fn rescore(
    g: &mut Graph,
    bound: &Bound,
    params: &RetrieverParameters,
    kb: &KnowledgeBase,
    qi: &MultiModalInput,
    entry_ids: &[usize],
) -> Result<Vec<Var>> {
    let q = encode(g, bound, &params.query, qi)?.pooled;
    entry_ids
        .iter()
        .map(|&id| {
            let entry = kb
                .get(id)
                .ok_or_else(|| Error::Input(format!("unknown knowledge entry {id}")))?;
            let k = encode_text_only(g, bound, &params.knowledge, &entry.token_ids)?.pooled;
            cosine_sim(g, q, k)
        })
        .collect()
}

/// Mean squared deviation of each similarity from its target. Targets are
/// constants, so gradients reach only the similarities.
pub fn retriever_loss_with_targets(g: &mut Graph, targets: &[f64], scores: &[Var]) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::Contract("retriever loss over zero entries".into()));
    }
    if targets.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} targets for {} scores",
            targets.len(),
            scores.len()
        )));
    }
    let mut terms = Vec::with_capacity(scores.len());
    for (&target, &s) in targets.iter().zip(scores) {
        let c = g.constant(Tensor::scalar(target));
        let diff = g.sub(c, s)?;
        terms.push(g.mul(diff, diff)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / scores.len() as f64))
}

/// Loss with one gap shared by every retrieved entry: `mean (tanh(delta) - s_i)^2`.
pub fn retriever_loss(g: &mut Graph, delta: f64, scores: &[Var]) -> Result<Var> {
    let targets = vec![delta.tanh(); scores.len()];
    retriever_loss_with_targets(g, &targets, scores)
}

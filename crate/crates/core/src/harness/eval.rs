//! Accuracy and retrieval recall over a split.

use std::fs;
use std::path::Path;

use crate::encoder::encode_pooled;
use crate::error::{Error, Result};
use crate::harness::data::{vqa_accuracy, Example, TaskData};
use crate::harness::model::Model;
use crate::reader::{loss_gap, predict, sigmoid};
use crate::retriever::{build_index, rank, KnowledgeIndex};

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub question_id: usize,
    pub predicted: String,
    pub answer: String,
    /// Top-1 entry read by the model; `None` without explicit knowledge.
    pub entry_id: Option<usize>,
    pub delta: f64,
    pub sigma_delta: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub recall_at_1: f64,
    pub recall_at_t: f64,
    pub t: usize,
    pub predictions: Vec<PredictionRow>,
}

/// What a system returns for one question: its ranked entries (best first)
/// and its answer.
pub struct Answered {
    pub ranked: Vec<usize>,
    pub answer: String,
    pub entry_id: Option<usize>,
    pub delta: f64,
}

/// Aggregates accuracy over all questions and recall over those that need
/// knowledge. `ranked` must hold at least `t` entries whenever it is non-empty.
pub fn score_split(
    split: &[Example],
    t: usize,
    mut answer: impl FnMut(usize, &Example) -> Result<Answered>,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let (mut acc, mut hit1, mut hit_t, mut needing) = (0.0, 0usize, 0usize, 0usize);
    let mut predictions = Vec::with_capacity(split.len());
    for (qid, ex) in split.iter().enumerate() {
        let out = answer(qid, ex)?;
        let a = vqa_accuracy(&out.answer, &ex.annotators);
        acc += a;
        if ex.needs_knowledge {
            needing += 1;
            hit1 += usize::from(out.ranked.first() == Some(&ex.gold_entry_id));
            hit_t += usize::from(out.ranked.iter().take(t).any(|&id| id == ex.gold_entry_id));
        }
        predictions.push(PredictionRow {
            question_id: qid,
            predicted: out.answer,
            answer: ex.annotators[0].clone(),
            entry_id: out.entry_id,
            delta: out.delta,
            sigma_delta: sigmoid(out.delta),
            accuracy: a,
        });
    }
    let recall = |hits: usize| if needing == 0 { f64::NAN } else { hits as f64 / needing as f64 };
    Ok(EvalReport {
        accuracy: acc / split.len() as f64,
        recall_at_1: recall(hit1),
        recall_at_t: recall(hit_t),
        t,
        predictions,
    })
}

/// Evaluates the model on `split`. With `use_knowledge` the reader reads
/// the top-1 retrieved entry; otherwise it sees question and image only.
/// Retrieval recall is reported in both cases. `with_gaps` adds the loss
/// gap of the read entry to each prediction row.
pub fn evaluate(
    model: &Model,
    data: &TaskData,
    split: &[Example],
    t: usize,
    use_knowledge: bool,
    index: Option<&KnowledgeIndex>,
    with_gaps: bool,
) -> Result<EvalReport> {
    let built;
    let index = match index {
        Some(i) => i,
        None => {
            built = build_index(&model.store, &model.retriever.knowledge, &data.kb, 0)?;
            &built
        }
    };
    let retriever_cfg = &model.retriever.query.config;
    score_split(split, t, |_, ex| {
        let query = encode_pooled(&model.store, &model.retriever.query, &ex.qi.input(None, retriever_cfg)?)?;
        let ranked = rank(query.data(), index, t.min(index.len()))?.entry_ids;
        let (knowledge, entry_id) = if use_knowledge {
            let e = &data.kb.entries()[ranked[0]];
            (Some(e.token_ids.as_slice()), Some(e.id))
        } else {
            (None, None)
        };
        let dist = predict(&model.store, &model.reader, &ex.qi, knowledge)?;
        let delta = match (with_gaps, knowledge) {
            (true, Some(k)) => loss_gap(&model.store, &model.reader, &ex.qi, k, ex.label)?.0,
            _ => f64::NAN,
        };
        Ok(Answered {
            ranked,
            answer: data.answers.answer(dist.argmax()).to_string(),
            entry_id,
            delta,
        })
    })
}

/// Writes `question_id,predicted,answer,entry_id,delta,sigma_delta,accuracy`.
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::from("question_id,predicted,answer,entry_id,delta,sigma_delta,accuracy\n");
    for r in rows {
        let entry = r.entry_id.map_or(String::new(), |e| e.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.question_id, r.predicted, r.answer, entry, r.delta, r.sigma_delta, r.accuracy
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

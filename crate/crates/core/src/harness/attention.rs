//! Attention of the reader's classification token over image patches.

use std::fs;
use std::path::Path;

use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::harness::data::TaskData;
use crate::harness::model::Model;
use crate::harness::plot::heat_map;
use crate::reader::{infer, AnswerDistribution};
use crate::retriever::{build_index, KnowledgeIndex};
use crate::tensor::Graph;

/// Last-block attention of the first position, one `g × g` grid per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub grid: usize,
    /// Patch weights per head, row-major over the grid.
    pub heads: Vec<Vec<f64>>,
    /// Full first-position attention row per head.
    pub rows: Vec<Vec<f64>>,
}

/// Reader attention for a question read together with `knowledge`.
pub fn cls_patch_attention(model: &Model, qi: &crate::encoder::QuestionImage, knowledge: Option<&[usize]>) -> Result<AttentionMap> {
    let cfg = &model.reader.encoder.config;
    let input = qi.input(knowledge, cfg)?;
    let mut g = Graph::new();
    let bound = model.store.bind_frozen(&mut g);
    let enc = encode(&mut g, &bound, &model.reader.encoder, &input)?;
    let last = enc
        .attention
        .last()
        .ok_or_else(|| Error::Input("encoder has no blocks".into()))?;
    let (start, m) = (input.text_len(), cfg.patch_count());
    let mut heads = Vec::with_capacity(last.len());
    let mut rows = Vec::with_capacity(last.len());
    for &map in last {
        let row = g.value(map).row(0).to_vec();
        heads.push(row[start..start + m].to_vec());
        rows.push(row);
    }
    Ok(AttentionMap {
        grid: cfg.patch_grid,
        heads,
        rows,
    })
}

/// For each validation question: a CSV of `head,row,col,weight`, one heat map
/// per head and a summary with the retrieved entry and the prediction.
pub fn export_attention(model: &Model, data: &TaskData, question_ids: &[usize], out_dir: &Path) -> Result<()> {
    if let Some(&bad) = question_ids.iter().find(|&&q| q >= data.val.len()) {
        return Err(Error::Input(format!(
            "unknown question id {bad} (validation split has {})",
            data.val.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let index: KnowledgeIndex = build_index(&model.store, &model.retriever.knowledge, &data.kb, 0)?;
    for &q in question_ids {
        let ex = &data.val[q];
        let inference = infer(&model.store, &model.retriever, &model.reader, &data.kb, &ex.qi, &index)?;
        let entry = &data.kb.entries()[inference.entry_id];
        let map = cls_patch_attention(model, &ex.qi, Some(&entry.token_ids))?;
        let mut csv = String::from("head,row,col,weight\n");
        for (h, weights) in map.heads.iter().enumerate() {
            for (cell, w) in weights.iter().enumerate() {
                csv.push_str(&format!("{h},{},{},{w}\n", cell / map.grid, cell % map.grid));
            }
            heat_map(weights, map.grid, map.grid, 16)?.save_ppm(&out_dir.join(format!("q{q}_head{h}.ppm")))?;
        }
        fs::write(out_dir.join(format!("q{q}_attention.csv")), csv)?;
        let question: Vec<&str> = ex.qi.question.iter().map(|&t| data.vocab.token(t).unwrap_or("?")).collect();
        let summary = format!(
            "question: {}\nretrieved: {}\npredicted: {}\nanswer: {}\nconfidence: {:.4}\n",
            question.join(" "),
            entry.sentence,
            data.answers.answer(inference.answer),
            ex.annotators[0],
            confidence(&inference.distribution)
        );
        fs::write(out_dir.join(format!("q{q}_summary.txt")), summary)?;
    }
    Ok(())
}

fn confidence(d: &AnswerDistribution) -> f64 {
    d.probabilities()[d.argmax()]
}

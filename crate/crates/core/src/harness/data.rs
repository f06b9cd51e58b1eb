//! Tokenized datasets, the on-disk task layout and the VQA accuracy metric.

use std::fs;
use std::path::Path;

use crate::encoder::QuestionImage;
use crate::error::{Error, Result};
use crate::knowledge::{read_triplets, write_triplets, KnowledgeBase, Vocabulary};
use crate::reader::AnswerSpace;
use crate::synth::{read_jsonl, write_jsonl, QaInstance, SynthData};

/// Annotators per question.
pub const ANNOTATORS: usize = 10;

/// `min(1, matches / 3)` where `matches` counts annotators giving the prediction.
pub fn vqa_accuracy<S: AsRef<str>>(prediction: &str, annotators: &[S]) -> f64 {
    let matches = annotators.iter().filter(|a| a.as_ref() == prediction).count();
    (matches as f64 / 3.0).min(1.0)
}

/// One question ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub qi: QuestionImage,
    pub label: usize,
    pub gold_entry_id: usize,
    pub needs_knowledge: bool,
    pub annotators: Vec<String>,
}

/// Train and validation examples with the knowledge base and vocabularies.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub kb: KnowledgeBase,
    pub answers: AnswerSpace,
    pub vocab: Vocabulary,
    pub patch_grid: usize,
    pub patch_dim: usize,
}

fn to_examples(instances: &[QaInstance], vocab: &Vocabulary, answers: &AnswerSpace) -> Result<Vec<Example>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let label = answers
                .id(&inst.answer)
                .ok_or_else(|| Error::Input(format!("question {i}: answer {:?} not in answer space", inst.answer)))?;
            Ok(Example {
                qi: QuestionImage {
                    question: vocab.tokenize(&inst.question),
                    patches: inst.image.clone(),
                },
                label,
                gold_entry_id: inst.gold_entry_id,
                needs_knowledge: inst.needs_knowledge,
                annotators: vec![inst.answer.clone(); ANNOTATORS],
            })
        })
        .collect()
}

impl TaskData {
    /// Tokenizes raw instances. The vocabulary covers knowledge sentences,
    /// every question and every answer.
    pub fn from_instances(
        train: &[QaInstance],
        val: &[QaInstance],
        triplets: &[crate::knowledge::Triplet],
        answers: AnswerSpace,
    ) -> Result<Self> {
        let probe = Vocabulary::build(["x"])?;
        let sentences: Vec<String> = KnowledgeBase::from_triplets(triplets, &probe)?
            .entries()
            .iter()
            .map(|e| e.sentence.clone())
            .collect();
        let vocab = Vocabulary::build(
            sentences
                .iter()
                .map(String::as_str)
                .chain(train.iter().chain(val).map(|i| i.question.as_str()))
                .chain(answers.answers().iter().map(String::as_str)),
        )?;
        Self::with_vocab(train, val, triplets, answers, vocab)
    }

    fn with_vocab(
        train: &[QaInstance],
        val: &[QaInstance],
        triplets: &[crate::knowledge::Triplet],
        answers: AnswerSpace,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let first = train
            .first()
            .or(val.first())
            .ok_or_else(|| Error::Input("no instances".into()))?;
        let cells = first.image.rows();
        let patch_grid = (cells as f64).sqrt().round() as usize;
        if patch_grid * patch_grid != cells {
            return Err(Error::Input(format!("{cells} patches do not form a square grid")));
        }
        let patch_dim = first.image.last_dim();
        if let Some(bad) = train
            .iter()
            .chain(val)
            .find(|i| i.image.shape() != [cells, patch_dim])
        {
            return Err(Error::Input(format!(
                "image shape {:?} differs from {:?}",
                bad.image.shape(),
                [cells, patch_dim]
            )));
        }
        let kb = KnowledgeBase::from_triplets(triplets, &vocab)?;
        if let Some(bad) = train.iter().chain(val).find(|i| i.gold_entry_id >= kb.len()) {
            return Err(Error::Input(format!(
                "gold entry {} outside knowledge base of {}",
                bad.gold_entry_id,
                kb.len()
            )));
        }
        Ok(Self {
            train: to_examples(train, &vocab, &answers)?,
            val: to_examples(val, &vocab, &answers)?,
            kb,
            answers,
            vocab,
            patch_grid,
            patch_dim,
        })
    }

    pub fn from_synth(data: &SynthData) -> Result<Self> {
        Self::from_instances(&data.train, &data.val, &data.triplets, data.answers.clone())
    }

    /// Longest `[CLS] K [SEP] Q [SEP]` text over all pairings.
    pub fn max_text_len(&self) -> usize {
        let q = self
            .train
            .iter()
            .chain(&self.val)
            .map(|e| e.qi.question.len())
            .max()
            .unwrap_or(0);
        let k = self.kb.entries().iter().map(|e| e.token_ids.len()).max().unwrap_or(0);
        3 + q + k
    }
}

/// File names inside a task directory.
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const KNOWLEDGE_FILE: &str = "knowledge.tsv";
pub const ANSWERS_FILE: &str = "answers.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Writes a generated task as JSONL splits, knowledge TSV, answers and vocabulary.
pub fn write_task_dir(dir: &Path, data: &SynthData) -> Result<TaskData> {
    fs::create_dir_all(dir)?;
    let task = TaskData::from_synth(data)?;
    write_jsonl(&dir.join(TRAIN_FILE), &data.train, data.world.patch_grid)?;
    write_jsonl(&dir.join(VAL_FILE), &data.val, data.world.patch_grid)?;
    write_triplets(&dir.join(KNOWLEDGE_FILE), &data.triplets)?;
    data.answers.save(&dir.join(ANSWERS_FILE))?;
    task.vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(task)
}

pub fn read_task_dir(dir: &Path) -> Result<TaskData> {
    let train = read_jsonl(&dir.join(TRAIN_FILE))?;
    let val = read_jsonl(&dir.join(VAL_FILE))?;
    let triplets = read_triplets(&dir.join(KNOWLEDGE_FILE))?;
    let answers = AnswerSpace::load(&dir.join(ANSWERS_FILE))?;
    let vocab_path = dir.join(VOCAB_FILE);
    if vocab_path.exists() {
        TaskData::with_vocab(&train, &val, &triplets, answers, Vocabulary::load(&vocab_path)?)
    } else {
        TaskData::from_instances(&train, &val, &triplets, answers)
    }
}

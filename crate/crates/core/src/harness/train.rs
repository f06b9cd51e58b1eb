//! The joint training loop.

use std::fs;
use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::encode_pooled;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::data::{Example, TaskData};
use crate::harness::eval::{evaluate, write_predictions, EvalReport};
use crate::harness::model::{Model, ModelSpec};
use crate::harness::optim::AdamW;
use crate::params::{Bound, ParamId};
use crate::reader::{cross_entropy, instance_loss, logits, LossSettings};
use crate::retriever::{build_index, rank, KnowledgeIndex};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// One optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub reader_loss: f64,
    /// Absent when the reader trains without retrieved knowledge.
    pub retriever_loss: Option<f64>,
    pub total_loss: f64,
    /// Fraction of (instance, entry) pairs with a negative loss gap.
    pub neg_delta_fraction: Option<f64>,
}

/// Epoch means of the step records plus validation numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub reader_loss: f64,
    pub retriever_loss: Option<f64>,
    pub total_loss: f64,
    pub neg_delta_fraction: Option<f64>,
    pub val_accuracy: f64,
    pub val_recall_at_1: f64,
    pub val_recall_at_t: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl MetricsLog {
    pub const HEADER: &'static str = "kind,epoch,step,lr,reader_loss,retriever_loss,total_loss,neg_delta_fraction,val_accuracy,val_recall1,val_recall_t";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for s in &self.steps {
            out.push_str(&format!(
                "step,{},{},{},{},{},{},{},,,\n",
                s.epoch,
                s.step,
                s.lr,
                s.reader_loss,
                opt(s.retriever_loss),
                s.total_loss,
                opt(s.neg_delta_fraction)
            ));
        }
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch,{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.step,
                e.lr,
                e.reader_loss,
                opt(e.retriever_loss),
                e.total_loss,
                opt(e.neg_delta_fraction),
                e.val_accuracy,
                e.val_recall_at_1,
                e.val_recall_at_t
            ));
        }
        out
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Loss terms of one instance, reduced for logging.
#[derive(Clone, Copy, Debug, Default)]
struct InstanceStats {
    reader: f64,
    retriever: f64,
    total: f64,
    negative_gaps: usize,
    gaps: usize,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    data: &'a TaskData,
    trainable: Vec<ParamId>,
    mask: Vec<bool>,
    run_dir: Option<&'a Path>,
}

impl Trainer<'_> {
    fn settings(&self) -> LossSettings {
        LossSettings {
            lambda: self.config.lambda,
            weight: self.config.smoothing_mode.instance_weight(),
            label: self.config.smoothing_mode.pseudo_label(),
        }
    }

    /// Loss and parameter gradients for one example.
    fn instance(&self, model: &Model, index: Option<&KnowledgeIndex>, ex: &Example) -> Result<(Vec<Tensor>, InstanceStats)> {
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, |id| self.mask[id.index()]);
        let (loss, stats) = self.guard(self.forward(&mut g, &bound, model, index, ex), "loss")?;
        g.backward(loss)?;
        let grads = self
            .trainable
            .iter()
            .map(|&id| {
                g.grad(bound[id])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape()))
            })
            .collect();
        Ok((grads, stats))
    }

    fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        model: &Model,
        index: Option<&KnowledgeIndex>,
        ex: &Example,
    ) -> Result<(Var, InstanceStats)> {
        Ok(if let Some(index) = index {
            let query_input = ex.qi.input(None, &model.retriever.query.config)?;
            let query = encode_pooled(&model.store, &model.retriever.query, &query_input)?;
            let t = self.config.t.min(index.len());
            let selected = rank(query.data(), index, t)?.entry_ids;
            let out = instance_loss(
                g,
                bound,
                &model.retriever,
                &model.reader,
                &self.data.kb,
                &ex.qi,
                ex.label,
                &selected,
                self.settings(),
            )?;
            if !out.bundle.is_finite() {
                return Err(self.abort(&serde_json::to_string_pretty(&out.bundle)?));
            }
            let b = &out.bundle;
            let stats = InstanceStats {
                reader: b.reader,
                retriever: b.l_ret,
                total: b.total,
                negative_gaps: b.delta.iter().filter(|&&d| d < 0.0).count(),
                gaps: b.delta.len(),
            };
            (out.total, stats)
        } else {
            let input = ex.qi.input(None, &model.reader.encoder.config)?;
            let out = logits(g, bound, &model.reader, &input)?;
            let ce = cross_entropy(g, out, ex.label)?;
            let v = g.scalar_value(ce);
            if !v.is_finite() {
                return Err(self.abort(&format!("{{\"l_qi\": {v}}}")));
            }
            let stats = InstanceStats {
                reader: v,
                total: v,
                ..InstanceStats::default()
            };
            (ce, stats)
        })
    }

    /// Turns a non-finite intermediate value into an abort.
    fn guard<T>(&self, r: Result<T>, stage: &str) -> Result<T> {
        match r {
            Err(Error::Tensor(e @ TensorError::NonFinite { .. })) => {
                Err(self.abort(&serde_json::json!({ "stage": stage, "error": e.to_string() }).to_string()))
            }
            other => other,
        }
    }

    fn abort(&self, dump: &str) -> Error {
        if let Some(dir) = self.run_dir {
            let path = dir.join("abort_bundle.json");
            if let Err(e) = fs::write(&path, dump) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Error::Aborted(format!("non-finite loss; offending bundle: {dump}"))
    }

    /// Per-instance results in batch order, computed on up to `threads` workers.
    fn batch(
        &self,
        model: &Model,
        index: Option<&KnowledgeIndex>,
        batch: &[&Example],
    ) -> Result<Vec<(Vec<Tensor>, InstanceStats)>> {
        let workers = self.config.threads.min(batch.len()).max(1);
        if workers == 1 {
            return batch.iter().map(|ex| self.instance(model, index, ex)).collect();
        }
        let chunk = batch.len().div_ceil(workers);
        thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|ex| self.instance(model, index, ex))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("gradient worker panicked")?);
            }
            Ok(out)
        })
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Evaluates on the validation split the way training reports it.
pub fn validate(model: &Model, config: &TrainConfig, data: &TaskData, index: Option<&KnowledgeIndex>) -> Result<EvalReport> {
    evaluate(
        model,
        data,
        &data.val,
        config.t.min(data.kb.len()),
        config.use_explicit_knowledge,
        index,
        false,
    )
}

/// Trains a fresh model. With a run directory, writes the config snapshot,
/// per-epoch checkpoints, `metrics.csv` and the final `predictions.csv`.
pub fn train(config: &TrainConfig, data: &TaskData, run_dir: Option<&Path>) -> Result<(Model, MetricsLog)> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(&ModelSpec::for_task(config, data), &mut rng)?;
    train_model(&mut model, config, data, run_dir, &mut rng).map(|log| (model, log))
}

fn train_model(
    model: &mut Model,
    config: &TrainConfig,
    data: &TaskData,
    run_dir: Option<&Path>,
    rng: &mut ChaCha8Rng,
) -> Result<MetricsLog> {
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("config.txt"), config.to_kv())?;
    }
    let mut trainable = model.reader_ids();
    if config.use_explicit_knowledge && config.lambda > 0.0 {
        trainable.extend(model.retriever_ids());
    }
    trainable.sort_by_key(|id| id.index());
    trainable.dedup();
    let mut mask = vec![false; model.store.len()];
    for id in &trainable {
        mask[id.index()] = true;
    }
    let trainer = Trainer {
        config,
        data,
        trainable,
        mask,
        run_dir,
    };

    let mut optimizer = AdamW::new(&model.store, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
    let mut log = MetricsLog::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut index: Option<KnowledgeIndex> = None;
    let mut step = 0usize;
    let mut last_report = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(rng);
        let first_step = log.steps.len();
        for batch_ids in order.chunks(config.batch_size) {
            if config.use_explicit_knowledge && (index.is_none() || step % config.index_refresh_steps == 0) {
                let built = build_index(&model.store, &model.retriever.knowledge, &data.kb, step as u64);
                index = Some(trainer.guard(built, "index")?);
            }
            let batch: Vec<&Example> = batch_ids.iter().map(|&i| &data.train[i]).collect();
            let results = trainer.batch(model, index.as_ref(), &batch)?;

            let scale = 1.0 / results.len() as f64;
            let mut grads: Vec<Tensor> = trainer
                .trainable
                .iter()
                .map(|&id| Tensor::zeros(model.store.get(id).shape()))
                .collect();
            for (instance_grads, _) in &results {
                for (acc, gi) in grads.iter_mut().zip(instance_grads) {
                    for (a, x) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += x;
                    }
                }
            }
            for gsum in &mut grads {
                gsum.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            optimizer.step(&mut model.store, &trainer.trainable, &grads, lr);

            let stats: Vec<InstanceStats> = results.iter().map(|r| r.1).collect();
            let gaps: usize = stats.iter().map(|s| s.gaps).sum();
            let knowledge = config.use_explicit_knowledge;
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                reader_loss: mean(stats.iter().map(|s| s.reader)),
                retriever_loss: knowledge.then(|| mean(stats.iter().map(|s| s.retriever))),
                total_loss: mean(stats.iter().map(|s| s.total)),
                neg_delta_fraction: knowledge
                    .then(|| stats.iter().map(|s| s.negative_gaps).sum::<usize>() as f64 / gaps as f64),
            });
            step += 1;
        }

        if config.use_explicit_knowledge {
            let built = build_index(&model.store, &model.retriever.knowledge, &data.kb, step as u64);
            index = Some(trainer.guard(built, "index")?);
        }
        let report = trainer.guard(validate(model, config, data, index.as_ref()), "validation")?;
        let epoch_steps = &log.steps[first_step..];
        log.epochs.push(EpochRecord {
            epoch,
            step,
            lr,
            reader_loss: mean(epoch_steps.iter().map(|s| s.reader_loss)),
            retriever_loss: config
                .use_explicit_knowledge
                .then(|| mean(epoch_steps.iter().filter_map(|s| s.retriever_loss))),
            total_loss: mean(epoch_steps.iter().map(|s| s.total_loss)),
            neg_delta_fraction: config
                .use_explicit_knowledge
                .then(|| mean(epoch_steps.iter().filter_map(|s| s.neg_delta_fraction))),
            val_accuracy: report.accuracy,
            val_recall_at_1: report.recall_at_1,
            val_recall_at_t: report.recall_at_t,
        });
        log::info!(
            "epoch {epoch}: reader {:.4} retriever {:?} val acc {:.4} recall@1 {:.4}",
            log.epochs[epoch].reader_loss,
            log.epochs[epoch].retriever_loss,
            report.accuracy,
            report.recall_at_1
        );
        if let Some(dir) = run_dir {
            model.save(&dir.join("checkpoints").join(format!("epoch_{epoch}.ckpt")), config)?;
            fs::write(dir.join("metrics.csv"), log.to_csv())?;
        }
        last_report = Some(report);
    }

    if let Some(dir) = run_dir {
        let report = match last_report {
            Some(r) => r,
            None => validate(model, config, data, None)?,
        };
        write_predictions(&dir.join("predictions.csv"), &report.predictions)?;
        fs::write(dir.join("metrics.csv"), log.to_csv())?;
    }
    Ok(log)
}

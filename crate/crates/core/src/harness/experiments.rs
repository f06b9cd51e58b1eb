//! Ablations and one-parameter sweeps over the training configuration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::{SmoothingMode, TrainConfig};
use crate::harness::data::TaskData;
use crate::harness::model::{Model, ModelSpec};
use crate::harness::plot::line_plot;
use crate::harness::train::{train, validate};

/// Validation numbers of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub name: String,
    pub accuracy: f64,
    pub recall_at_1: f64,
    pub recall_at_t: f64,
}

fn run(name: &str, config: &TrainConfig, data: &TaskData, dir: Option<PathBuf>) -> Result<RunResult> {
    let (model, log) = train(config, data, dir.as_deref())?;
    let (accuracy, recall_at_1, recall_at_t) = match log.final_epoch() {
        Some(e) => (e.val_accuracy, e.val_recall_at_1, e.val_recall_at_t),
        None => {
            let r = validate(&model, config, data, None)?;
            (r.accuracy, r.recall_at_1, r.recall_at_t)
        }
    };
    log::info!("{name}: accuracy {accuracy:.4} recall@1 {recall_at_1:.4}");
    Ok(RunResult {
        name: name.to_string(),
        accuracy,
        recall_at_1,
        recall_at_t,
    })
}

/// The ablation grid: every smoothing mode, no retriever supervision, no
/// explicit knowledge, and an untrained question-image model.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out: Vec<(String, TrainConfig)> = SmoothingMode::ALL
        .iter()
        .map(|&mode| {
            (
                mode.name().to_string(),
                TrainConfig {
                    smoothing_mode: mode,
                    ..base.clone()
                },
            )
        })
        .collect();
    out.push((
        "lambda_zero".into(),
        TrainConfig {
            lambda: 0.0,
            ..base.clone()
        },
    ));
    out.push((
        "no_explicit_knowledge".into(),
        TrainConfig {
            use_explicit_knowledge: false,
            ..base.clone()
        },
    ));
    out.push((
        "random_qi".into(),
        TrainConfig {
            use_explicit_knowledge: false,
            epochs: 0,
            ..base.clone()
        },
    ));
    out
}

pub fn results_csv(first_column: &str, rows: &[RunResult]) -> String {
    let mut out = format!("{first_column},accuracy,recall1,recall_t\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.name, r.accuracy, r.recall_at_1, r.recall_at_t));
    }
    out
}

/// Runs the ablation grid under one seed. With an output directory, each run
/// gets its own subdirectory and the table is written to `ablation.csv`.
pub fn ablate(base: &TrainConfig, data: &TaskData, out_dir: Option<&Path>) -> Result<Vec<RunResult>> {
    let rows = ablation_configs(base)
        .iter()
        .map(|(name, cfg)| run(name, cfg, data, out_dir.map(|d| d.join(name))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        fs::write(dir.join("ablation.csv"), results_csv("variant", &rows))?;
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    T,
    Lambda,
}

impl SweepParam {
    pub fn values(self) -> Vec<f64> {
        match self {
            SweepParam::T => (1..=5).map(f64::from).collect(),
            SweepParam::Lambda => (0..=10).map(f64::from).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::T => "t",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(SweepParam::T),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(Error::Config(format!("cannot sweep {other:?} (t, lambda)"))),
        }
    }

    fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            SweepParam::T => cfg.t = value as usize,
            SweepParam::Lambda => cfg.lambda = value,
        }
        cfg
    }
}

/// One run per sweep value under the base seed. Writes `sweep_<param>.csv`
/// and a line plot `sweep_<param>.ppm` of accuracy and recall@1.
pub fn sweep(param: SweepParam, base: &TrainConfig, data: &TaskData, out_dir: Option<&Path>) -> Result<Vec<RunResult>> {
    let values = param.values();
    let rows = values
        .iter()
        .map(|&v| {
            let sub = out_dir.map(|d| d.join(format!("{}_{v}", param.name())));
            let mut r = run(&format!("{}={v}", param.name()), &param.apply(base, v), data, sub)?;
            r.name = v.to_string();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        fs::write(dir.join(format!("sweep_{}.csv", param.name())), results_csv(param.name(), &rows))?;
        let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let rec: Vec<f64> = rows.iter().map(|r| r.recall_at_1).collect();
        line_plot(&values, &[&acc, &rec], 320, 240)?.save_ppm(&dir.join(format!("sweep_{}.ppm", param.name())))?;
    }
    Ok(rows)
}

/// Validation numbers of a freshly initialised model.
pub fn untrained(config: &TrainConfig, data: &TaskData) -> Result<RunResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::init(&ModelSpec::for_task(config, data), &mut rng)?;
    let r = validate(&model, config, data, None)?;
    Ok(RunResult {
        name: "untrained".into(),
        accuracy: r.accuracy,
        recall_at_1: r.recall_at_1,
        recall_at_t: r.recall_at_t,
    })
}

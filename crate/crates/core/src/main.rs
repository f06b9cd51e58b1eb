use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kbvqa::error::{Error, Result};
use kbvqa::harness::attention::export_attention;
use kbvqa::harness::eval::write_predictions;
use kbvqa::harness::experiments::{ablate, sweep, SweepParam};
use kbvqa::harness::{evaluate, read_task_dir, train, write_task_dir, Model, SmoothingMode, TrainConfig};
use kbvqa::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "kbvqa", version, about = "Retriever-reader knowledge-based VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task directory.
    Generate(GenerateArgs),
    /// Train one model into a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Entries counted for recall@t; defaults to the checkpoint's t.
        #[arg(long)]
        t: Option<usize>,
        /// Where to write per-question predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train every ablation variant and write `ablation.csv`.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train once per value of `t` (1..=5) or `lambda` (0..=10).
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export reader attention maps for validation questions.
    ExportAttn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated validation question ids.
        #[arg(long, value_delimiter = ',', required = true)]
        questions: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    kb_size: Option<usize>,
    #[arg(long)]
    knowledge_fraction: Option<f64>,
    #[arg(long)]
    named_fraction: Option<f64>,
    #[arg(long)]
    n_entities: Option<usize>,
    #[arg(long)]
    patch_grid: Option<usize>,
    #[arg(long)]
    patch_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    val_fact_fraction: Option<f64>,
}

impl GenerateArgs {
    fn synth_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            seed: self.seed.unwrap_or(d.seed),
            n_train: self.n_train.unwrap_or(d.n_train),
            n_val: self.n_val.unwrap_or(d.n_val),
            kb_size: self.kb_size.unwrap_or(d.kb_size),
            knowledge_fraction: self.knowledge_fraction.unwrap_or(d.knowledge_fraction),
            named_fraction: self.named_fraction.unwrap_or(d.named_fraction),
            n_entities: self.n_entities.unwrap_or(d.n_entities),
            patch_grid: self.patch_grid.unwrap_or(d.patch_grid),
            patch_dim: self.patch_dim.unwrap_or(d.patch_dim),
            noise: self.noise.unwrap_or(d.noise),
            val_fact_fraction: self.val_fact_fraction.unwrap_or(d.val_fact_fraction),
        }
    }
}

/// Training settings: a preset, then a config file, then individual flags.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    /// `key = value` file using the field names of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    smoothing_mode: Option<SmoothingMode>,
    #[arg(long)]
    share_encoders: Option<bool>,
    #[arg(long)]
    use_explicit_knowledge: Option<bool>,
    #[arg(long)]
    index_refresh_steps: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<SmoothingMode, String> {
    SmoothingMode::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("unknown smoothing mode {s:?}"))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut config = TrainConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            config = config.merge_kv(&fs::read_to_string(path)?)?;
        }
        let mut kv = String::new();
        let mut set = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                kv.push_str(&format!("{key} = {v}\n"));
            }
        };
        set("t", self.t.map(|v| v.to_string()));
        set("lambda", self.lambda.map(|v| v.to_string()));
        set("lr", self.lr.map(|v| v.to_string()));
        set("lr_decay", self.lr_decay.map(|v| v.to_string()));
        set("weight_decay", self.weight_decay.map(|v| v.to_string()));
        set("beta1", self.beta1.map(|v| v.to_string()));
        set("beta2", self.beta2.map(|v| v.to_string()));
        set("adam_eps", self.adam_eps.map(|v| v.to_string()));
        set("epochs", self.epochs.map(|v| v.to_string()));
        set("batch_size", self.batch_size.map(|v| v.to_string()));
        set("seed", self.seed.map(|v| v.to_string()));
        set("smoothing_mode", self.smoothing_mode.map(|v| v.name().to_string()));
        set("share_encoders", self.share_encoders.map(|v| v.to_string()));
        set("use_explicit_knowledge", self.use_explicit_knowledge.map(|v| v.to_string()));
        set("index_refresh_steps", self.index_refresh_steps.map(|v| v.to_string()));
        set("d_model", self.d_model.map(|v| v.to_string()));
        set("layers", self.layers.map(|v| v.to_string()));
        set("heads", self.heads.map(|v| v.to_string()));
        set("mlp_ratio", self.mlp_ratio.map(|v| v.to_string()));
        set("head_hidden", self.head_hidden.map(|v| v.to_string()));
        set("threads", self.threads.map(|v| v.to_string()));
        config.merge_kv(&kv)
    }
}

fn eval_checkpoint(data: &Path, checkpoint: &Path, t: Option<usize>, predictions: Option<&Path>) -> Result<()> {
    let data = read_task_dir(data)?;
    let (model, config) = Model::load(checkpoint)?;
    let t = t.unwrap_or(config.t).min(data.kb.len());
    let report = evaluate(&model, &data, &data.val, t, config.use_explicit_knowledge, None, true)?;
    println!(
        "accuracy {:.4} recall@1 {:.4} recall@{t} {:.4}",
        report.accuracy, report.recall_at_1, report.recall_at_t
    );
    if let Some(path) = predictions {
        write_predictions(path, &report.predictions)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let synth = generate(&args.synth_config())?;
            let task = write_task_dir(&args.out, &synth)?;
            println!(
                "wrote {} train, {} val, {} knowledge entries to {}",
                task.train.len(),
                task.val.len(),
                task.kb.len(),
                args.out.display()
            );
        }
        Command::Train { data, run_dir, config } => {
            let config = config.resolve()?;
            let data = read_task_dir(&data)?;
            let (_, log) = train(&config, &data, Some(&run_dir))?;
            if let Some(e) = log.final_epoch() {
                println!(
                    "epoch {} accuracy {:.4} recall@1 {:.4} recall@t {:.4}",
                    e.epoch, e.val_accuracy, e.val_recall_at_1, e.val_recall_at_t
                );
            }
        }
        Command::Eval {
            data,
            checkpoint,
            t,
            predictions,
        } => eval_checkpoint(&data, &checkpoint, t, predictions.as_deref())?,
        Command::Ablate { data, out, config } => {
            let config = config.resolve()?;
            let data = read_task_dir(&data)?;
            fs::create_dir_all(&out)?;
            for r in ablate(&config, &data, Some(&out))? {
                println!("{} accuracy {:.4} recall@1 {:.4}", r.name, r.accuracy, r.recall_at_1);
            }
        }
        Command::Sweep {
            param,
            data,
            out,
            config,
        } => {
            let param = SweepParam::parse(&param)?;
            let config = config.resolve()?;
            let data = read_task_dir(&data)?;
            fs::create_dir_all(&out)?;
            for r in sweep(param, &config, &data, Some(&out))? {
                println!("{}={} accuracy {:.4} recall@1 {:.4}", param.name(), r.name, r.accuracy, r.recall_at_1);
            }
        }
        Command::ExportAttn {
            data,
            checkpoint,
            questions,
            out,
        } => {
            let data = read_task_dir(&data)?;
            let (model, _) = Model::load(&checkpoint)?;
            export_attention(&model, &data, &questions, &out)?;
            println!("wrote attention for {} questions to {}", questions.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Aborted(_)) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}

//! The retriever and reader together with their parameter store.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParameters};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::data::TaskData;
use crate::params::{read_checkpoint_config, ParamId, ParamStore};
use crate::reader::{ReaderConfig, ReaderParameters};
use crate::retriever::RetrieverParameters;

/// Everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub reader: ReaderConfig,
    pub n_answers: usize,
    /// One backbone for the reader and both retriever branches; the retriever
    /// keeps its own pooling MLP. Otherwise three independent encoders.
    pub share_encoders: bool,
}

impl ModelSpec {
    pub fn for_task(config: &TrainConfig, data: &TaskData) -> Self {
        let m = data.patch_grid * data.patch_grid;
        let encoder = EncoderConfig {
            d_model: config.d_model,
            layers: config.layers,
            heads: config.heads,
            mlp_ratio: config.mlp_ratio,
            vocab_size: data.vocab.len(),
            max_seq_len: data.max_text_len() + m,
            patch_grid: data.patch_grid,
            patch_dim: data.patch_dim,
            ..EncoderConfig::default()
        };
        Self {
            encoder,
            reader: ReaderConfig {
                head_hidden: (config.head_hidden > 0).then_some(config.head_hidden),
            },
            n_answers: data.answers.len(),
            share_encoders: config.share_encoders,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub retriever: RetrieverParameters,
    pub reader: ReaderParameters,
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    model: ModelSpec,
    train: TrainConfig,
}

impl Model {
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let reader = ReaderParameters::init(&mut store, "reader", &spec.encoder, &spec.reader, spec.n_answers, rng)?;
        let retriever = if spec.share_encoders {
            RetrieverParameters::shared(reader.encoder.with_pool(&mut store, "retriever", rng))
        } else {
            RetrieverParameters {
                query: EncoderParameters::init(&mut store, "retriever.query", &spec.encoder, rng)?,
                knowledge: EncoderParameters::init(&mut store, "retriever.knowledge", &spec.encoder, rng)?,
            }
        };
        Ok(Self {
            spec: spec.clone(),
            store,
            retriever,
            reader,
        })
    }

    pub fn retriever_ids(&self) -> Vec<ParamId> {
        self.retriever.param_ids()
    }

    pub fn reader_ids(&self) -> Vec<ParamId> {
        self.reader.param_ids()
    }

    pub fn save(&self, path: &Path, train: &TrainConfig) -> Result<()> {
        let config = CheckpointConfig {
            model: self.spec.clone(),
            train: train.clone(),
        };
        self.store.save(path, &serde_json::to_value(config)?)
    }

    /// Rebuilds the model from a checkpoint, returning its training config.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let header: CheckpointConfig = serde_json::from_value(read_checkpoint_config(path)?)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint config: {e}")))?;
        // Values are overwritten by the checkpoint; the seed is irrelevant.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(&header.model, &mut rng)?;
        model.store.load(path)?;
        Ok((model, header.train))
    }
}

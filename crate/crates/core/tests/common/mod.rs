#![allow(dead_code)]

use kbvqa::harness::{TaskData, TrainConfig};
use kbvqa::synth::{generate, SynthConfig};

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        seed: 3,
        n_train: 48,
        n_val: 16,
        kb_size: 40,
        n_entities: 6,
        ..SynthConfig::default()
    }
}

pub fn tiny_task() -> TaskData {
    TaskData::from_synth(&generate(&tiny_synth()).unwrap()).unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        d_model: 8,
        layers: 1,
        heads: 2,
        ..TrainConfig::desk()
    }
}

#![allow(dead_code)]

use std::path::PathBuf;

use cbhir_cli::commands::{self, SynthArgs, TrainArgs};

/// Synthetic dataset, a briefly trained desk checkpoint and its store.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub store: PathBuf,
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    let store = dir.path().join("store.jsonl");
    commands::synth(&SynthArgs {
        n_per_class: 8,
        size: 32,
        seed: 3,
        out: data.clone(),
    })
    .unwrap();
    commands::train(&TrainArgs {
        data: data.clone(),
        preset: "desk".into(),
        epochs: 3,
        seed: 3,
        out: ckpt.clone(),
        input_size: Some(32),
        train_fraction: 0.7,
        batch_size: None,
        margin: None,
        checkpoint_every: None,
        quiet: true,
    })
    .unwrap();
    commands::index(&ckpt, &data, &store).unwrap();
    Fixture { dir, data, ckpt, store }
}

#![allow(dead_code)]

use nextact::checkpoint::ModelBundle;
use nextact::features::{ContextMask, SampleCache};
use nextact::harness::{run_experiment, Experiment};
use nextact::synth::{generate_dataset, Corpus, ScenarioConfig};
use nextact::training::TrainConfig;

/// A small corpus and a quickly trained, calibrated and evaluated model.
pub struct Fixture {
    pub corpus: Corpus,
    pub cache: SampleCache,
    pub experiment: Experiment,
}

impl Fixture {
    pub fn bundle(&self) -> &ModelBundle {
        &self.experiment.bundle
    }
}

pub fn small_fixture(n_cases: usize, seed: u64) -> Fixture {
    let scenario = ScenarioConfig::default_scenario();
    let corpus = generate_dataset(&scenario, n_cases, seed).unwrap();
    let cache = SampleCache::build(&corpus.manifest, &corpus.cases, (8, 1, 1), 5, seed, ContextMask::FULL).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 15,
        hidden: vec![32, 16],
        embed_dim: 8,
        seed,
        ..TrainConfig::default()
    };
    let experiment = run_experiment(&cache, &cfg, |_| {}).unwrap();
    Fixture {
        corpus,
        cache,
        experiment,
    }
}

//! Shared fixtures for the benchmarks.

use plrn_core::config::{SyntheticConfig, TrainConfig};
use plrn_core::data::generate;
use plrn_core::model::{Plrn, Prepared};
use plrn_core::params::ParameterStore;

/// A freshly initialized model and `samples` prepared synthetic samples.
pub fn model_fixture(cfg: &TrainConfig, samples: usize) -> (Plrn, ParameterStore, Vec<Prepared>) {
    let syn = SyntheticConfig { samples, ..Default::default() };
    let (data, _) = generate(&syn).expect("synthetic data");
    let (model, store) = Plrn::new(cfg, data.vocab.len(), syn.raw_dim).expect("model");
    let xs = data
        .samples
        .iter()
        .map(|s| model.prepare(s, data.video(s).expect("video"), &data.vocab).expect("sample"))
        .collect();
    (model, store, xs)
}

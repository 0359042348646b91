#![allow(dead_code)]

use amda_autodiff::Tensor;
use amda_core::corpus::{generate, Domain, ScenarioSpec, Split};
use amda_core::encoders::{FeatureSequence, Modality};
use amda_core::trainer::TrainData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random sequence whose last `pad` rows are padding.
pub fn sequence(rng: &mut ChaCha8Rng, len: usize, dim: usize, pad: usize, modality: Modality) -> FeatureSequence {
    let valid: Vec<bool> = (0..len).map(|i| i < len - pad).collect();
    FeatureSequence::new(randn(rng, len, dim), valid, modality).unwrap()
}

/// A small in-memory corpus split into training data.
pub fn tiny_data(spec: &ScenarioSpec) -> TrainData {
    let corpus = generate(spec).unwrap();
    let pick = |d: Domain, s: Split, labeled: bool| {
        corpus
            .samples
            .iter()
            .filter(|x| x.domain == d && x.split == s)
            .cloned()
            .map(|mut x| {
                if !labeled {
                    x.boundary = None;
                    x.class = None;
                }
                x
            })
            .collect::<Vec<_>>()
    };
    TrainData {
        source_train: pick(Domain::Source, Split::Train, true),
        target_train: pick(Domain::Target, Split::Train, false),
        source_test: pick(Domain::Source, Split::Test, true),
        target_test: pick(Domain::Target, Split::Test, true),
    }
}

pub fn tiny_spec(n_frames: usize, train: usize, test: usize) -> ScenarioSpec {
    ScenarioSpec {
        n_frames,
        visual_dim: 6,
        text_dim: 5,
        classes: 3,
        train_per_domain: train,
        test_per_domain: test,
        query_min: 2,
        query_max: 4,
        tokens_per_class: 2,
        seed: 17,
        ..ScenarioSpec::default()
    }
}

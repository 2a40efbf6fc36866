//! Shared fixtures for the benchmarks: an untrained desk-scale model and a
//! short synthetic sequence.

use exitrack::harness::{generate_sequence, Sequence, SequenceSpec};
use exitrack::{Model, ViTConfig};

pub fn desk_model() -> Model {
    Model::new(ViTConfig::default(), 0).expect("default config is valid")
}

pub fn sequence(length: usize) -> Sequence {
    let spec = SequenceSpec {
        length,
        seed: 7,
        ..Default::default()
    };
    generate_sequence(&spec).expect("default spec is valid").into_sequence("bench")
}

//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use steerscope::attribution::PatchSample;
use steerscope::model::{Arch, Model, ModelConfig};
use steerscope::rng::substream;
use steerscope::steering::{Method, SteeringVector};
use steerscope::task::Label;
use steerscope::tensor::Tensor;

pub fn small_config(arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 12,
        vocab: 10,
        max_seq: 12,
        ..ModelConfig::default()
    }
}

/// Random init scaled up so attention is far from uniform.
pub fn model(config: &ModelConfig, seed: u64, scale: f64) -> Model {
    let mut m = Model::init(config, &mut substream(seed, "test-init")).unwrap();
    for t in m.tensors_mut() {
        *t = t.scale(scale);
    }
    m
}

pub fn uniform(rng: &mut impl Rng, n: usize, half_width: f64) -> Vec<f64> {
    (0..n).map(|_| half_width * (rng.random::<f64>() * 2.0 - 1.0)).collect()
}

pub fn vector(d: usize, layer: usize, alpha: f64, seed: u64) -> SteeringVector {
    let mut rng = substream(seed, "test-vector");
    SteeringVector {
        values: Tensor::vector(uniform(&mut rng, d, 1.0)),
        layer,
        position: None,
        alpha,
        method: Method::Dim,
    }
}

/// Random prompts and responses, alternating classes, with the
/// class-signed coefficient.
pub fn samples(vocab: usize, n: usize, alpha: f64, seed: u64) -> Vec<PatchSample> {
    let mut rng = substream(seed, "test-samples");
    let mut toks = |len| -> Vec<usize> { (0..len).map(|_| rng.random_range(0..vocab)).collect() };
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Harmful } else { Label::Harmless };
            PatchSample {
                prompt: toks(3),
                steered: toks(3),
                base: toks(3),
                label,
                coef: SteeringVector::flip_sign(label) * alpha,
            }
        })
        .collect()
}

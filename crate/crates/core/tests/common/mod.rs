#![allow(dead_code)]

pub mod checks;

use advanchor_core::denoiser::ModelConfig;
use advanchor_core::prompts::Vocabulary;
use advanchor_core::sampler::SamplerConfig;
use advanchor_core::unlearner::UnlearnConfig;
use advanchor_core::weights::BaseModel;
use advanchor_grad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_model() -> ModelConfig {
    ModelConfig {
        channels: [8, 16, 16],
        time_dim: 16,
        embed_dim: 8,
        attn_dim: 8,
        groups: 4,
        ..ModelConfig::default()
    }
}

/// Untrained model with random weights and embeddings.
pub fn random_base(seed: u64) -> BaseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_model();
    let weights = cfg.init_weights(&mut rng).unwrap();
    let vocab = Vocabulary::random(cfg.embed_dim, 1.0, &mut rng);
    BaseModel { weights, vocab }
}

pub fn quick_unlearn() -> UnlearnConfig {
    UnlearnConfig {
        outer_steps: 3,
        s: 4,
        sampler: SamplerConfig {
            num_steps: 4,
            ..SamplerConfig::default()
        },
        ..UnlearnConfig::default()
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

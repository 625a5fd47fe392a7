//! Deterministic skipped-step sampler with classifier-free guidance.

use advanchor_grad::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::IMAGE_SHAPE;
use crate::denoiser::{CondBatch, Denoiser};
use crate::error::{LabError, Result};
use crate::prompts::PromptEmbedding;
use crate::prompts::{embed_prompt, empty_prompt};
use crate::schedule::NoiseSchedule;
use crate::weights::{BaseModel, DenoiserWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            guidance_scale: 3.0,
            deterministic: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.steps() {
            return Err(LabError::Config(format!(
                "sampler steps {} outside [1, {}]",
                self.num_steps,
                schedule.steps()
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(LabError::Config(format!(
                "guidance scale {} must be finite and non-negative",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Evenly skipped timesteps from `T` down, e.g. T=1000, n=50 gives 1000, 980, ..., 20.
pub fn skipped_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(LabError::InvalidArgument(format!(
            "cannot take {n} steps from a {total}-step schedule"
        )));
    }
    Ok((0..n).map(|i| total - (i * total) / n).collect())
}

/// Independent RNG seed for one image stream.
pub fn stream_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// `s·ε_c + (1−s)·ε_∅`, which is exactly `ε_∅` at `s = 0` and exactly `ε_c` at `s = 1`.
pub fn guide(eps_cond: f32, eps_empty: f32, scale: f32) -> f32 {
    scale * eps_cond + (1.0 - scale) * eps_empty
}

/// Generate one image per prompt; image `i` draws its noise from `seeds[i]`.
pub fn sample_batch(
    den: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    prompts: &[&PromptEmbedding],
    empty: &PromptEmbedding,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<Tensor<f64>>> {
    cfg.validate(schedule)?;
    if prompts.len() != seeds.len() || prompts.is_empty() {
        return Err(LabError::InvalidArgument(format!(
            "{} prompts for {} seeds",
            prompts.len(),
            seeds.len()
        )));
    }
    let b = prompts.len();
    let n = IMAGE_SHAPE.iter().product::<usize>();
    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| ChaCha8Rng::seed_from_u64(s))
        .collect();
    let mut x: Vec<f64> = Vec::with_capacity(b * n);
    for rng in rngs.iter_mut() {
        x.extend((0..n).map(|_| -> f64 { StandardNormal.sample(rng) }));
    }
    let cond = CondBatch::<f32>::from_prompts(prompts)?;
    let unc = CondBatch::<f32>::repeat(empty, b)?;
    let both = CondBatch::concat(&cond, &unc);
    let ts = skipped_timesteps(schedule.steps(), cfg.num_steps)?;
    let scale = cfg.guidance_scale as f32;
    let mut shape2 = vec![2 * b];
    shape2.extend_from_slice(&IMAGE_SHAPE);
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let xs: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let x2 = Tensor::new(shape2.clone(), [xs.as_slice(), xs.as_slice()].concat());
        let eps2 = den.predict(&x2, &vec![t; 2 * b], &both)?;
        if !eps2.all_finite() {
            return Err(LabError::Numerical(format!(
                "non-finite noise prediction at t={t}"
            )));
        }
        let (ec, eu) = eps2.data().split_at(b * n);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sigma = if cfg.deterministic {
            0.0
        } else {
            ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt()
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        for (bi, rng) in rngs.iter_mut().enumerate() {
            for j in bi * n..(bi + 1) * n {
                let e = guide(ec[j], eu[j], scale) as f64;
                let x0 = ((x[j] - sb * e) / sa).clamp(-1.0, 1.0);
                let e = (x[j] - sa * x0) / sb;
                let z: f64 = if sigma > 0.0 {
                    StandardNormal.sample(rng)
                } else {
                    0.0
                };
                x[j] = ab_prev.sqrt() * x0 + dir * e + sigma * z;
            }
        }
    }
    Ok(x.chunks(n)
        .map(|c| {
            Tensor::new(
                IMAGE_SHAPE.to_vec(),
                c.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            )
        })
        .collect())
}

/// Generate a single image from `cond`.
pub fn sample(
    weights: &DenoiserWeights,
    cond: &PromptEmbedding,
    empty_cond: &PromptEmbedding,
    cfg: &SamplerConfig,
) -> Result<Tensor<f64>> {
    if !weights.all_finite() {
        return Err(LabError::Numerical(
            "denoiser weights contain NaN or Inf".into(),
        ));
    }
    let schedule = weights.config().schedule()?;
    let den = Denoiser::<f32>::new(weights);
    let mut out = sample_batch(&den, &schedule, &[cond], empty_cond, cfg, &[cfg.seed])?;
    Ok(out.remove(0))
}

/// Sample one image per token prompt in chunks of 32; image `i` uses `seeds[i]`.
pub fn generate(
    base: &BaseModel,
    prompts: &[Vec<String>],
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<Tensor<f64>>> {
    generate_with(&base.weights, &base.vocab, prompts, seeds, cfg)
}

/// [`generate`] with weights that differ from the vocabulary's base model.
pub fn generate_with(
    weights: &DenoiserWeights,
    vocab: &crate::prompts::Vocabulary,
    prompts: &[Vec<String>],
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<Tensor<f64>>> {
    if prompts.len() != seeds.len() {
        return Err(LabError::InvalidArgument(format!(
            "{} prompts for {} seeds",
            prompts.len(),
            seeds.len()
        )));
    }
    if !weights.all_finite() {
        return Err(LabError::Numerical(
            "denoiser weights contain NaN or Inf".into(),
        ));
    }
    let schedule = weights.config().schedule()?;
    let den = Denoiser::<f32>::new(weights);
    let empty = empty_prompt(vocab)?;
    let embedded = prompts
        .iter()
        .map(|p| embed_prompt(p, vocab, ""))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(prompts.len());
    for (chunk, sc) in embedded.chunks(32).zip(seeds.chunks(32)) {
        let refs: Vec<&PromptEmbedding> = chunk.iter().collect();
        out.extend(sample_batch(&den, &schedule, &refs, &empty, cfg, sc)?);
    }
    Ok(out)
}

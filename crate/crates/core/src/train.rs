//! Base-model training: noise-prediction regression with conditioning dropout.

use advanchor_grad::{Adam, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::data::{
    check_coverage, style_attributes, LabeledImage, PALETTES, SHAPES, STYLES, TEXTURES,
};
use crate::denoiser::{CondBatch, Denoiser, ModelConfig};
use crate::error::{LabError, Result};
use crate::prompts::{
    embed_prompt, PromptEmbedding, Vocabulary, EMPTY_TOKEN, FILLER_TOKENS, MASK_TEMPLATE,
};
use crate::schedule::diffuse;
use crate::weights::{BaseModel, DenoiserWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Probability of replacing a prompt by the empty prompt.
    pub dropout: f64,
    pub grad_clip: f64,
    /// Per-sample loss weight `min(1/ᾱ_t, cap)`; values ≤ 1 give the plain noise MSE.
    pub weight_cap: f64,
    /// EMA decay of the returned weights; 0 returns the raw weights.
    pub ema_decay: f64,
    pub embed_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            lr: 2e-3,
            warmup: 100,
            dropout: 0.1,
            grad_clip: 1.0,
            weight_cap: 25.0,
            ema_decay: 0.995,
            embed_std: 1.0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LabError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(LabError::Config(
                "steps, batch_size and lr must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(LabError::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup > 0 {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        } else {
            1.0
        };
        let progress = step as f64 / self.steps as f64;
        let cosine = 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * warm * cosine
    }
}

/// A training prompt for an image of `(style, shape)`. Covers the full-concept form,
/// bare concept words, the mask template, filler prefixes, attribute bags and the
/// generic parent words, so that every anchor form has seen data.
pub fn training_prompt(style: usize, shape: usize, rng: &mut impl Rng) -> Vec<String> {
    let s = STYLES[style].to_string();
    let h = SHAPES[shape].to_string();
    let (p, t) = style_attributes(style);
    let (pal, tex) = (PALETTES[p].to_string(), TEXTURES[t].to_string());
    let a = || "a".to_string();
    let u: f64 = rng.gen();
    let v = |items: &[&String]| items.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    match u {
        u if u < 0.34 => vec![a(), s, h],
        u if u < 0.42 => vec![s],
        u if u < 0.48 => vec![s, h],
        u if u < 0.53 => vec![h],
        u if u < 0.62 => MASK_TEMPLATE[..3]
            .iter()
            .map(|x| x.to_string())
            .chain([s])
            .collect(),
        u if u < 0.65 => MASK_TEMPLATE[..3]
            .iter()
            .map(|x| x.to_string())
            .chain([h])
            .collect(),
        u if u < 0.76 => {
            let k = rng.gen_range(1..=FILLER_TOKENS.len());
            FILLER_TOKENS[..k]
                .iter()
                .map(|x| x.to_string())
                .chain([s])
                .collect()
        }
        u if u < 0.92 => {
            let mut bag = match rng.gen_range(0..3) {
                0 => v(&[&pal]),
                1 => v(&[&tex]),
                _ => v(&[&pal, &tex]),
            };
            if rng.gen_bool(0.5) {
                bag.push(h);
            }
            bag
        }
        u if u < 0.96 => vec!["painting".into()],
        _ => vec![a(), "thing".into()],
    }
}

/// Loss trace and the trained model.
pub struct TrainOutcome {
    pub model: BaseModel,
    pub loss_trace: Vec<f64>,
}

/// Global-norm clip of a gradient list in place; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
    norm
}

fn ema_update(ema: &mut Tensor<f64>, value: &Tensor<f64>, decay: f64) {
    for (e, &v) in ema.data_mut().iter_mut().zip(value.data()) {
        *e = decay * *e + (1.0 - decay) * v;
    }
}

/// Train denoiser weights and the token embedding table from scratch.
pub fn train_base(
    dataset: &[LabeledImage],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_coverage(dataset)?;
    model_cfg.validate()?;
    let schedule = model_cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = model_cfg.init_weights(&mut rng)?;
    let mut vocab = Vocabulary::random(model_cfg.embed_dim, cfg.embed_std, &mut rng);
    let names: Vec<String> = weights.names().map(String::from).collect();
    let mut opt = Adam::<f64>::new(cfg.lr);
    let mut ema_w = weights.clone();
    let mut ema_table = vocab.table().clone();
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    let img_len = dataset[0].pixels.len();

    for step in 0..cfg.steps {
        let mut x0 = Vec::with_capacity(cfg.batch_size * img_len);
        let mut prompts: Vec<PromptEmbedding> = Vec::with_capacity(cfg.batch_size);
        let mut ids: Vec<Vec<usize>> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let img = dataset.choose(&mut rng).expect("non-empty dataset");
            x0.extend_from_slice(img.pixels.data());
            let tokens = if rng.gen_bool(cfg.dropout) {
                vec![EMPTY_TOKEN.to_string()]
            } else {
                training_prompt(img.style, img.shape, &mut rng)
            };
            ids.push(tokens.iter().map(|t| vocab.id(t)).collect::<Result<_>>()?);
            prompts.push(embed_prompt(&tokens, &vocab, EMPTY_TOKEN)?);
        }
        let b = cfg.batch_size;
        let x0 = Tensor::new(vec![b, 3, 16, 16], x0);
        let t: Vec<usize> = (0..b)
            .map(|_| rng.gen_range(1..=schedule.steps()))
            .collect();
        let eps = Tensor::from_fn(x0.shape(), |_| StandardNormal.sample(&mut rng));
        let ns = diffuse(&x0, &t, &eps, &schedule)?;

        let den = Denoiser::<f32>::new(&weights);
        let refs: Vec<&PromptEmbedding> = prompts.iter().collect();
        let cond = CondBatch::<f32>::from_prompts(&refs)?;
        let mut tape = Tape::<f32>::new();
        let fp = den.forward(&mut tape, &ns.xt.cast(), &t, &cond, true, &|_| true)?;
        let pred = tape.value(fp.out);
        let per = pred.item_len();
        let w: Vec<f64> = t
            .iter()
            .map(|&s| Ok((1.0 / schedule.alpha_bar(s)?).min(cfg.weight_cap).max(1.0)))
            .collect::<Result<_>>()?;
        let norm = w.iter().sum::<f64>() * per as f64;
        let mut loss = 0.0;
        let seed = Tensor::from_fn(pred.shape(), |i| {
            let d = pred.data()[i] as f64 - ns.eps.data()[i];
            let wi = w[i / per];
            loss += wi * d * d;
            (2.0 * wi * d / norm) as f32
        });
        loss /= norm;
        if !loss.is_finite() {
            return Err(LabError::Numerical(format!(
                "training loss diverged at step {step}"
            )));
        }
        let mut grads = tape.backward(fp.out, seed);
        let mut gs: Vec<Tensor<f64>> = names
            .iter()
            .map(|k| {
                grads
                    .take(fp.params[k])
                    .expect("trainable parameter")
                    .cast()
            })
            .collect();
        let gcond = grads.take(fp.cond).expect("conditioning gradient");
        let d = model_cfg.embed_dim;
        let lmax = gcond.dim(1);
        let mut gtable = Tensor::<f64>::zeros(vocab.table().shape());
        for (bi, row_ids) in ids.iter().enumerate() {
            for (li, &id) in row_ids.iter().enumerate() {
                let src = &gcond.data()[(bi * lmax + li) * d..(bi * lmax + li + 1) * d];
                for (g, &s) in gtable.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                    *g += s as f64;
                }
            }
        }
        gs.push(gtable);
        clip_global_norm(&mut gs, cfg.grad_clip);
        opt.lr = cfg.lr_at(step);
        {
            let mut params: Vec<&mut Tensor<f64>> = weights.iter_mut().map(|(_, t)| t).collect();
            params.push(vocab.table_mut());
            let grefs: Vec<&Tensor<f64>> = gs.iter().collect();
            opt.step(&mut params, &grefs);
        }
        let decay = if cfg.ema_decay > 0.0 {
            cfg.ema_decay
                .min((1.0 + step as f64) / (10.0 + step as f64))
        } else {
            0.0
        };
        for ((_, e), (_, w)) in ema_w.iter_mut().zip(weights.iter()) {
            ema_update(e, w, decay);
        }
        ema_update(&mut ema_table, vocab.table(), decay);
        loss_trace.push(loss);
        on_step(step, loss);
        if step % 250 == 0 || step + 1 == cfg.steps {
            info!(step, loss, "base training");
        }
    }
    let final_weights: DenoiserWeights = if cfg.ema_decay > 0.0 { ema_w } else { weights };
    if cfg.ema_decay > 0.0 {
        *vocab.table_mut() = ema_table;
    }
    Ok(TrainOutcome {
        model: BaseModel {
            weights: final_weights,
            vocab,
        },
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, DataConfig};

    #[test]
    fn training_prompts_cover_every_form_and_stay_in_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = Vocabulary::random(4, 1.0, &mut rng);
        let mut lens = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let p = training_prompt(0, 1, &mut rng);
            for t in &p {
                vocab.id(t).unwrap();
            }
            assert!(p.len() <= ModelConfig::default().max_prompt_len);
            lens.insert(p.len());
        }
        assert!(lens.contains(&1) && lens.contains(&9));
    }

    #[test]
    fn dropout_out_of_range_is_rejected() {
        let cfg = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let r = train_base(
            &[],
            &ModelConfig::default(),
            &TrainConfig::default(),
            |_, _| {},
        );
        assert!(matches!(r, Err(LabError::EmptyDataset)));
    }

    #[test]
    fn short_runs_are_reproducible() {
        let data = generate_corpus(&DataConfig {
            images_per_concept: 1,
            ..DataConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train_base(&data, &ModelConfig::default(), &cfg, |_, _| {}).unwrap();
        let b = train_base(&data, &ModelConfig::default(), &cfg, |_, _| {}).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.model, b.model);
    }
}

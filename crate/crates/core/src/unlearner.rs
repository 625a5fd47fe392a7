//! Cross-attention fine-tuning that aligns the model's prediction on the undesirable
//! prompt with the frozen model's prediction on an anchor.

use std::sync::Arc;
use std::time::Instant;

use advanchor_grad::{Adam, Float, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::advanchor::{
    optimize_perturbation_with, perturbation_step, AdvContext, AdvLossVariant, AdversarialAnchor,
    StopRecord,
};
use crate::data::{Concept, LabeledImage, IMAGE_SHAPE};
use crate::denoiser::{CondBatch, Denoiser};
use crate::error::{LabError, Result};
use crate::prompts::{
    build_anchor_prompt, concept_prompt, concept_prompt_cycle, embed_prompt, empty_prompt,
    paired_source_prompt, AnchorSpec, AnchorTable, PromptEmbedding,
};
use crate::sampler::{generate_with, stream_seed, SamplerConfig};
use crate::schedule::{diffuse, NoiseSchedule, NoisySample};
use crate::weights::{is_cross_attention, BaseModel, DenoiserWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Alternating,
    Sequential,
    Cyclical,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::Alternating,
        Strategy::Sequential,
        Strategy::Cyclical,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Alternating => "alternating",
            Strategy::Sequential => "sequential",
            Strategy::Cyclical => "cyclical",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Sample the concept's images from the base model.
    SelfGenerated,
    /// Use rendered corpus images that carry the concept.
    Provided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub concept: String,
    pub strategy: Strategy,
    /// Inner iteration budget per input.
    #[serde(rename = "S")]
    pub s: usize,
    pub lambda: f64,
    pub lr_theta: f64,
    pub lr_adv: f64,
    pub outer_steps: usize,
    /// Images per input.
    pub batch_size: usize,
    pub loss_variant: AdvLossVariant,
    /// `adversarial`, or a fixed anchor.
    pub anchor: AnchorSpec,
    pub dataset_source: DatasetSource,
    pub init_scale: f64,
    /// Sampler used to self-generate the dataset.
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub runs: usize,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            concept: "style_A".into(),
            strategy: Strategy::Alternating,
            s: 30,
            lambda: 10.0,
            lr_theta: 6e-4,
            lr_adv: 2e-2,
            outer_steps: 50,
            batch_size: 1,
            loss_variant: AdvLossVariant::V1,
            anchor: AnchorSpec::Adversarial,
            dataset_source: DatasetSource::SelfGenerated,
            init_scale: 1e-3,
            sampler: SamplerConfig {
                num_steps: 25,
                ..SamplerConfig::default()
            },
            seed: 0,
            runs: 3,
        }
    }
}

impl UnlearnConfig {
    /// The learning rates reported for large latent diffusion models.
    pub fn large_model_rates() -> Self {
        Self {
            lr_theta: 1e-5,
            lr_adv: 1e-4,
            sampler: SamplerConfig::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if Concept::from_token(&self.concept).is_none() {
            return bad(format!("unknown concept `{}`", self.concept));
        }
        if self.s == 0 {
            return bad("S must be at least 1".into());
        }
        for (n, v) in [("lr_theta", self.lr_theta), ("lr_adv", self.lr_adv)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{n} must be positive, got {v}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.outer_steps == 0 || self.batch_size == 0 || self.runs == 0 {
            return bad("outer_steps, batch_size and runs must be at least 1".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!(
                "init_scale must be non-negative, got {}",
                self.init_scale
            ));
        }
        Ok(())
    }

    pub fn is_adversarial(&self) -> bool {
        self.anchor == AnchorSpec::Adversarial
    }

    /// Seed of run `r` in a multi-run experiment.
    pub fn run_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

/// Trainable cross-attention view over a working copy plus the frozen snapshot.
#[derive(Clone, Debug)]
pub struct WeightPartition {
    current: DenoiserWeights,
    theta_ori: Arc<DenoiserWeights>,
    op_names: Vec<String>,
}

/// Split weights into the cross-attention set and the rest; snapshot the original.
pub fn partition_weights(weights: &DenoiserWeights) -> Result<WeightPartition> {
    let op_names = weights.cross_attention_names();
    if op_names.is_empty() {
        return Err(LabError::InvalidArgument(
            "no cross-attention parameters to fine-tune".into(),
        ));
    }
    Ok(WeightPartition {
        current: weights.clone(),
        theta_ori: Arc::new(weights.clone()),
        op_names,
    })
}

impl WeightPartition {
    pub fn theta_op_names(&self) -> &[String] {
        &self.op_names
    }

    pub fn current(&self) -> &DenoiserWeights {
        &self.current
    }

    pub fn theta_ori(&self) -> &Arc<DenoiserWeights> {
        &self.theta_ori
    }

    /// Mutable handles on the trainable tensors, in `theta_op_names` order.
    pub fn theta_op_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut out = Vec::with_capacity(self.op_names.len());
        for (name, t) in self.current.iter_mut() {
            if is_cross_attention(name) {
                out.push(t);
            }
        }
        out
    }

    pub fn frozen_hash(&self) -> String {
        self.current.hash_where(|n| !is_cross_attention(n))
    }

    pub fn into_weights(self) -> DenoiserWeights {
        self.current
    }
}

/// One batch for the alignment step, with both frozen-model targets cached.
pub struct AlignmentBatch<T> {
    pub xt: Tensor<T>,
    pub t: Vec<usize>,
    pub e_pu: Vec<PromptEmbedding>,
    /// `f(x_t, e_anchor; θ_ori)`.
    pub target: Tensor<T>,
    /// `f(x_t, e_∅; θ_ori)`.
    pub eps_empty: Tensor<T>,
}

/// Losses and cross-attention gradients of one alignment step.
pub struct AlignmentGrad {
    pub l_op: f64,
    pub l_reg: f64,
    pub grads: Vec<Tensor<f64>>,
}

/// Per-sample ℓ2 norms of `a − b` and the gradient of their batch mean times `w`.
fn mean_norm_grad<T: Float>(a: &[T], b: &[T], batch: usize, w: f64, seed: &mut [T]) -> f64 {
    let n = a.len() / batch;
    let mut total = 0.0;
    for i in 0..batch {
        let r = i * n..(i + 1) * n;
        let norm = a[r.clone()]
            .iter()
            .zip(&b[r.clone()])
            .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        total += norm;
        if norm > 0.0 {
            let c = w / (norm * batch as f64);
            for ((s, x), y) in seed[r.clone()].iter_mut().zip(&a[r.clone()]).zip(&b[r]) {
                *s = T::lit(c * (x.as_f64() - y.as_f64()));
            }
        }
    }
    total / batch as f64
}

/// `L_op + L_reg` on the current weights and its gradient with respect to every
/// cross-attention parameter, in partition order.
pub fn alignment_loss_grad<T: Float>(
    current: &Denoiser<T>,
    op_names: &[String],
    batch: &AlignmentBatch<T>,
    empty: &PromptEmbedding,
    lambda: f64,
) -> Result<AlignmentGrad> {
    let b = batch.e_pu.len();
    let refs: Vec<&PromptEmbedding> = batch.e_pu.iter().collect();
    let cond = CondBatch::concat(
        &CondBatch::from_prompts(&refs)?,
        &CondBatch::repeat(empty, b)?,
    );
    let xt2 = Tensor::concat(&[&batch.xt, &batch.xt]);
    let t2 = [batch.t.as_slice(), batch.t.as_slice()].concat();
    let mut tape = Tape::new();
    let fp = current.forward(&mut tape, &xt2, &t2, &cond, false, &is_cross_attention)?;
    let pred = tape.value(fp.out);
    if pred.shape()[1..] != batch.target.shape()[1..] || batch.target.dim(0) != b {
        return Err(LabError::ShapeMismatch {
            expected: pred.shape().to_vec(),
            got: batch.target.shape().to_vec(),
        });
    }
    let half = pred.len() / 2;
    let mut seed = Tensor::zeros(pred.shape());
    let (s_op, s_reg) = seed.data_mut().split_at_mut(half);
    let l_op = mean_norm_grad(&pred.data()[..half], batch.target.data(), b, 1.0, s_op);
    let l_reg = lambda
        * mean_norm_grad(
            &pred.data()[half..],
            batch.eps_empty.data(),
            b,
            lambda,
            s_reg,
        );
    if !(l_op.is_finite() && l_reg.is_finite()) {
        return Err(LabError::Numerical(format!(
            "alignment loss diverged: {l_op} + {l_reg}"
        )));
    }
    let mut g = tape.backward(fp.out, seed);
    let grads = op_names
        .iter()
        .map(|n| {
            g.take(fp.params[n])
                .map(|t| t.cast())
                .unwrap_or_else(|| Tensor::zeros(tape.value(fp.params[n]).shape()))
        })
        .collect();
    Ok(AlignmentGrad { l_op, l_reg, grads })
}

fn batch_norm_mean(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let n = a.dim(0);
    let mut sink = vec![0.0; a.len()];
    mean_norm_grad(a.data(), b.data(), n, 1.0, &mut sink)
}

/// Batch-mean ℓ2 distance between the current model on `e_pu` and the frozen model on
/// `e_anchor`, in double precision.
pub fn unlearn_loss(
    sample: &NoisySample,
    e_pu: &[PromptEmbedding],
    e_anchor: &[PromptEmbedding],
    part: &WeightPartition,
) -> Result<f64> {
    let cur =
        Denoiser::<f64>::new(&part.current).predict(&sample.xt, &sample.t, &cond_of(e_pu)?)?;
    let ori = Denoiser::<f64>::new(&part.theta_ori).predict(
        &sample.xt,
        &sample.t,
        &cond_of(e_anchor)?,
    )?;
    Ok(batch_norm_mean(&cur, &ori))
}

/// `λ` times the batch-mean ℓ2 drift of the empty-prompt prediction.
pub fn reg_loss(
    sample: &NoisySample,
    e_empty: &PromptEmbedding,
    part: &WeightPartition,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(LabError::InvalidArgument(format!("lambda {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let cond = CondBatch::repeat(e_empty, sample.batch())?;
    let cur = Denoiser::<f64>::new(&part.current).predict(&sample.xt, &sample.t, &cond)?;
    let ori = Denoiser::<f64>::new(&part.theta_ori).predict(&sample.xt, &sample.t, &cond)?;
    Ok(lambda * batch_norm_mean(&cur, &ori))
}

fn cond_of<T: Float>(prompts: &[PromptEmbedding]) -> Result<CondBatch<T>> {
    let refs: Vec<&PromptEmbedding> = prompts.iter().collect();
    CondBatch::from_prompts(&refs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub input: usize,
    pub l_op: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// One evaluation of the adversarial loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    /// Position in the global visit order.
    pub visit: usize,
    pub input: usize,
    /// Inner iteration on this input at evaluation time.
    pub iteration: usize,
    pub value: f64,
    pub stepped: bool,
    pub e_adv_norm: f64,
    pub fingerprint: String,
}

/// Inner-loop outcome for one input, with the perturbation fingerprint on entry and exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStop {
    pub input: usize,
    pub start_fingerprint: String,
    pub end_fingerprint: String,
    pub record: StopRecord,
}

pub struct UnlearnResult {
    pub weights: DenoiserWeights,
    pub e_adv: Option<Vec<f64>>,
    pub loss_trace: Vec<LossRecord>,
    pub anchor_trace: Vec<AnchorRecord>,
    pub stops: Vec<InputStop>,
    pub config: UnlearnConfig,
    pub theta_ori_hash: String,
    pub frozen_hash: String,
    pub wall_clock_secs: f64,
}

impl UnlearnResult {
    /// Median inner iterations over inputs.
    pub fn median_stop_iteration(&self) -> Option<f64> {
        let mut v: Vec<usize> = self
            .stops
            .iter()
            .map(|s| s.record.iterations_used)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_unstable();
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        })
    }

    /// Fraction of inputs whose loss reached ≤ 0 within budget.
    pub fn reached_fraction(&self) -> Option<f64> {
        if self.stops.is_empty() {
            return None;
        }
        Some(
            self.stops.iter().filter(|s| s.record.reached).count() as f64 / self.stops.len() as f64,
        )
    }
}

/// One training input: images plus their undesirable prompts.
struct Input {
    x0: Tensor<f64>,
    e_pu: Vec<PromptEmbedding>,
    tokens: Vec<Vec<String>>,
}

fn build_inputs(
    base: &BaseModel,
    cfg: &UnlearnConfig,
    corpus: Option<&[LabeledImage]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Input>> {
    let concept = Concept::from_token(&cfg.concept)
        .ok_or_else(|| LabError::UnknownToken(cfg.concept.clone()))?;
    let n = cfg.outer_steps * cfg.batch_size;
    let mut prompts: Vec<Vec<String>> = (0..n)
        .map(|k| match &cfg.anchor {
            AnchorSpec::Adversarial => Ok(concept_prompt_cycle(concept, k)),
            spec => paired_source_prompt(spec, &cfg.concept),
        })
        .collect::<Result<_>>()?;
    let images: Vec<Tensor<f64>> = match cfg.dataset_source {
        DatasetSource::SelfGenerated => {
            let seeds: Vec<u64> = (0..n as u64)
                .map(|i| stream_seed(cfg.seed, "unlearn-data", i))
                .collect();
            generate_with(&base.weights, &base.vocab, &prompts, &seeds, &cfg.sampler)?
        }
        DatasetSource::Provided => {
            let pool: Vec<&LabeledImage> = corpus
                .unwrap_or(&[])
                .iter()
                .filter(|im| im.label_of(concept.kind) == concept.index)
                .collect();
            if pool.is_empty() {
                return Err(LabError::EmptyDataset);
            }
            let mut out = Vec::with_capacity(n);
            for p in prompts.iter_mut() {
                let im = pool[rng.gen_range(0..pool.len())];
                if cfg.is_adversarial() {
                    *p = concept_prompt(im.style, im.shape);
                }
                out.push(im.pixels.clone());
            }
            out
        }
    };
    let mut inputs = Vec::with_capacity(cfg.outer_steps);
    for k in 0..cfg.outer_steps {
        let r = k * cfg.batch_size..(k + 1) * cfg.batch_size;
        let refs: Vec<Tensor<f64>> = images[r.clone()].to_vec();
        let tokens: Vec<Vec<String>> = prompts[r].to_vec();
        let e_pu = tokens
            .iter()
            .map(|p| embed_prompt(p, &base.vocab, &cfg.concept))
            .collect::<Result<_>>()?;
        inputs.push(Input {
            x0: Tensor::stack(&refs),
            e_pu,
            tokens,
        });
    }
    Ok(inputs)
}

fn noise(x0: &Tensor<f64>, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<NoisySample> {
    let b = x0.dim(0);
    let t: Vec<usize> = (0..b)
        .map(|_| rng.gen_range(1..=schedule.steps()))
        .collect();
    let eps = Tensor::from_fn(x0.shape(), |_| StandardNormal.sample(&mut *rng));
    diffuse(x0, &t, &eps, schedule)
}

/// Mutable state of one run.
struct Run<'a> {
    cfg: &'a UnlearnConfig,
    schedule: NoiseSchedule,
    ori: Denoiser<f32>,
    empty: PromptEmbedding,
    part: WeightPartition,
    opt: Adam<f64>,
    anchor: Option<AdversarialAnchor>,
    fixed_anchor: Option<PromptEmbedding>,
    loss_trace: Vec<LossRecord>,
    anchor_trace: Vec<AnchorRecord>,
    stops: Vec<InputStop>,
    visits: usize,
}

impl<'a> Run<'a> {
    /// Run the inner loop on one input and log every evaluation.
    fn perturb(&mut self, k: usize, sample: &NoisySample, input: &Input) -> Result<()> {
        let ctx = AdvContext::new(
            &self.ori,
            sample.xt.cast(),
            sample.t.clone(),
            input.e_pu.clone(),
            &self.empty,
        )?;
        let anchor = self.anchor.as_mut().expect("adversarial run");
        let start_fingerprint = anchor.fingerprint();
        let mut evals = Vec::new();
        let rec = optimize_perturbation_with(
            &ctx,
            anchor,
            self.cfg.loss_variant,
            self.cfg.s,
            |i, out, a| evals.push((i, out, a.norm(), a.fingerprint())),
        )?;
        let end_fingerprint = anchor.fingerprint();
        drop(ctx);
        for (iteration, out, e_adv_norm, fingerprint) in evals {
            self.anchor_trace.push(AnchorRecord {
                visit: self.visits,
                input: k,
                iteration,
                value: out.value,
                stepped: out.stepped,
                e_adv_norm,
                fingerprint,
            });
            self.visits += 1;
        }
        debug!(
            input = k,
            iters = rec.iterations_used,
            stop = rec.stop_value,
            "perturbation"
        );
        self.stops.push(InputStop {
            input: k,
            start_fingerprint,
            end_fingerprint,
            record: rec,
        });
        Ok(())
    }

    /// One Adam step on the cross-attention weights against the current anchor.
    fn align(&mut self, step: usize, k: usize, sample: &NoisySample, input: &Input) -> Result<()> {
        let xt: Tensor<f32> = sample.xt.cast();
        let anchored: Vec<PromptEmbedding> = match (&self.anchor, &self.fixed_anchor) {
            (Some(a), _) => input
                .e_pu
                .iter()
                .map(|p| crate::advanchor::apply_perturbation(p, a.e_adv()))
                .collect::<Result<_>>()?,
            (None, Some(f)) => vec![f.clone(); input.e_pu.len()],
            (None, None) => unreachable!("run has an anchor"),
        };
        let target = self.ori.predict(&xt, &sample.t, &cond_of(&anchored)?)?;
        let eps_empty = self.ori.predict(
            &xt,
            &sample.t,
            &CondBatch::repeat(&self.empty, input.e_pu.len())?,
        )?;
        let batch = AlignmentBatch {
            xt,
            t: sample.t.clone(),
            e_pu: input.e_pu.clone(),
            target,
            eps_empty,
        };
        let current = Denoiser::<f32>::new(self.part.current());
        let names = self.part.theta_op_names().to_vec();
        let g = alignment_loss_grad(&current, &names, &batch, &self.empty, self.cfg.lambda)?;
        {
            let mut params = self.part.theta_op_mut();
            let grefs: Vec<&Tensor<f64>> = g.grads.iter().collect();
            self.opt.step(&mut params, &grefs);
        }
        if !self.part.current().all_finite() {
            return Err(LabError::Numerical(format!(
                "weights diverged at step {step}"
            )));
        }
        self.loss_trace.push(LossRecord {
            step,
            input: k,
            l_op: g.l_op,
            l_reg: g.l_reg,
            total: g.l_op + g.l_reg,
        });
        Ok(())
    }
}

/// Erase `cfg.concept` from `base` with the configured anchor and strategy.
pub fn run_unlearning(
    base: &BaseModel,
    table: &AnchorTable,
    cfg: &UnlearnConfig,
    corpus: Option<&[LabeledImage]>,
) -> Result<UnlearnResult> {
    cfg.validate()?;
    base.vocab.id(&cfg.concept)?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = base.weights.config().schedule()?;
    let empty = empty_prompt(&base.vocab)?;
    let part = partition_weights(&base.weights)?;
    let theta_ori_hash = part.theta_ori().content_hash();
    let frozen_before = part.frozen_hash();

    let (anchor, fixed_anchor) = match &cfg.anchor {
        AnchorSpec::Adversarial => (
            Some(AdversarialAnchor::random(
                base.vocab.dim(),
                cfg.init_scale,
                cfg.lr_adv,
                &mut rng,
            )?),
            None,
        ),
        spec => {
            let tokens = build_anchor_prompt(spec, &cfg.concept, &base.vocab, table)?;
            (None, Some(embed_prompt(&tokens, &base.vocab, "")?))
        }
    };
    let inputs = build_inputs(base, cfg, corpus, &mut rng)?;
    info!(
        concept = %cfg.concept,
        strategy = cfg.strategy.name(),
        anchor = %cfg.anchor.label(),
        inputs = inputs.len(),
        first_prompt = ?inputs[0].tokens[0],
        "unlearning"
    );
    let mut run = Run {
        cfg,
        schedule,
        ori: Denoiser::new(&base.weights),
        empty,
        part,
        opt: Adam::new(cfg.lr_theta),
        anchor,
        fixed_anchor,
        loss_trace: Vec::with_capacity(cfg.outer_steps),
        anchor_trace: Vec::new(),
        stops: Vec::new(),
        visits: 0,
    };

    let adversarial = run.anchor.is_some();
    match (cfg.strategy, adversarial) {
        (Strategy::Alternating, _) | (_, false) => {
            for (k, input) in inputs.iter().enumerate() {
                let sample = noise(&input.x0, &run.schedule, &mut rng)?;
                if adversarial {
                    run.perturb(k, &sample, input)?;
                }
                run.align(k, k, &sample, input)?;
            }
        }
        (Strategy::Sequential, true) => {
            for (k, input) in inputs.iter().enumerate() {
                let sample = noise(&input.x0, &run.schedule, &mut rng)?;
                run.perturb(k, &sample, input)?;
            }
            phase_two(&mut run, &inputs, &mut rng)?;
        }
        (Strategy::Cyclical, true) => {
            let samples = inputs
                .iter()
                .map(|i| noise(&i.x0, &run.schedule, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            cyclical_phase_one(&mut run, &inputs, &samples)?;
            phase_two(&mut run, &inputs, &mut rng)?;
        }
    }

    let frozen_hash = run.part.frozen_hash();
    if frozen_hash != frozen_before {
        return Err(LabError::Numerical(
            "non-cross-attention weights changed".into(),
        ));
    }
    if run.part.theta_ori().content_hash() != theta_ori_hash {
        return Err(LabError::Numerical("frozen snapshot changed".into()));
    }
    Ok(UnlearnResult {
        weights: run.part.into_weights(),
        e_adv: run.anchor.map(|a| a.e_adv().to_vec()),
        loss_trace: run.loss_trace,
        anchor_trace: run.anchor_trace,
        stops: run.stops,
        config: cfg.clone(),
        theta_ori_hash,
        frozen_hash,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Fine-tune over all inputs with the final perturbation, on fresh noise.
fn phase_two(run: &mut Run, inputs: &[Input], rng: &mut ChaCha8Rng) -> Result<()> {
    for (k, input) in inputs.iter().enumerate() {
        let sample = noise(&input.x0, &run.schedule, rng)?;
        run.align(k, k, &sample, input)?;
    }
    Ok(())
}

/// Round-robin single steps until a full pass takes no step or the budget is spent.
fn cyclical_phase_one(run: &mut Run, inputs: &[Input], samples: &[NoisySample]) -> Result<()> {
    let budget = run.cfg.s * inputs.len();
    let ctxs = inputs
        .iter()
        .zip(samples)
        .map(|(i, s)| {
            AdvContext::new(
                &run.ori,
                s.xt.cast(),
                s.t.clone(),
                i.e_pu.clone(),
                &run.empty,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_input: Vec<(String, String, StopRecord)> = Vec::with_capacity(inputs.len());
    let mut spent = 0;
    let mut trace = Vec::new();
    let anchor = run.anchor.as_mut().expect("adversarial run");
    'outer: loop {
        let mut any_step = false;
        for (k, ctx) in ctxs.iter().enumerate() {
            if spent == budget {
                // Budget gone: one last evaluation per input, continuing the cycle, so
                // every stop value reflects the final perturbation.
                let n = ctxs.len();
                for k in (k..n).chain(0..k) {
                    let value = ctxs[k].loss(anchor.e_adv(), run.cfg.loss_variant)?;
                    let (_, fp_out, rec) = &mut per_input[k];
                    trace.push((
                        k,
                        rec.iterations_used,
                        value,
                        false,
                        anchor.norm(),
                        anchor.fingerprint(),
                    ));
                    rec.values.push(value);
                    rec.stop_value = value;
                    rec.reached = value <= 0.0;
                    *fp_out = anchor.fingerprint();
                }
                break 'outer;
            }
            let fp_in = anchor.fingerprint();
            let out = perturbation_step(ctx, anchor, run.cfg.loss_variant)?;
            if per_input.len() <= k {
                per_input.push((
                    fp_in,
                    String::new(),
                    StopRecord {
                        start_value: out.value,
                        stop_value: out.value,
                        iterations_used: 0,
                        reached: false,
                        values: Vec::new(),
                    },
                ));
            }
            let rec = &mut per_input[k].2;
            trace.push((
                k,
                rec.iterations_used,
                out.value,
                out.stepped,
                anchor.norm(),
                anchor.fingerprint(),
            ));
            rec.values.push(out.value);
            rec.stop_value = out.value;
            rec.reached = out.value <= 0.0;
            if out.stepped {
                rec.iterations_used += 1;
                spent += 1;
                any_step = true;
            }
            per_input[k].1 = anchor.fingerprint();
        }
        if !any_step && per_input.len() == inputs.len() {
            break;
        }
    }
    anchor.iterations_used = spent.min(run.cfg.s);
    drop(ctxs);
    for (k, iteration, value, stepped, norm, fingerprint) in trace {
        run.anchor_trace.push(AnchorRecord {
            visit: run.visits,
            input: k,
            iteration,
            value,
            stepped,
            e_adv_norm: norm,
            fingerprint,
        });
        run.visits += 1;
    }
    for (k, (start_fingerprint, end_fingerprint, record)) in per_input.into_iter().enumerate() {
        run.stops.push(InputStop {
            input: k,
            start_fingerprint,
            end_fingerprint,
            record,
        });
    }
    Ok(())
}

/// Noised batch of `n` images of shape [`IMAGE_SHAPE`], for tests and examples.
pub fn random_sample(
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<NoisySample> {
    let mut shape = vec![n];
    shape.extend_from_slice(&IMAGE_SHAPE);
    let x0 = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    noise(&x0, schedule, rng)
}

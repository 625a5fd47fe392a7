//! Universal embedding perturbations that decorrelate the frozen model's prediction
//! from its prediction on the undesirable prompt.

use advanchor_grad::{Adam, Float, Tape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{CondBatch, Denoiser};
use crate::error::{LabError, Result};
use crate::prompts::PromptEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvLossVariant {
    /// Cosine between the anchored and original predictions.
    V1,
    /// Cosine between their guidance deltas against the empty prompt.
    V2,
}

impl AdvLossVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AdvLossVariant::V1 => "v1",
            AdvLossVariant::V2 => "v2",
        }
    }
}

/// The run-wide perturbation `e_adv` and its optimizer state.
#[derive(Clone, Debug)]
pub struct AdversarialAnchor {
    e_adv: Vec<f64>,
    pub init_scale: f64,
    /// Loss value when the last optimization stopped.
    pub stop_value: f64,
    /// Steps taken by the last optimization.
    pub iterations_used: usize,
    opt: Adam<f64>,
}

impl AdversarialAnchor {
    /// Gaussian initialization with standard deviation `init_scale`.
    pub fn random(dim: usize, init_scale: f64, lr: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(LabError::InvalidArgument(format!(
                "init scale {init_scale}"
            )));
        }
        let e_adv = if init_scale == 0.0 {
            vec![0.0; dim]
        } else {
            let normal = Normal::new(0.0, init_scale).expect("finite std");
            (0..dim).map(|_| normal.sample(rng)).collect()
        };
        Ok(Self::from_vector(e_adv, init_scale, lr))
    }

    pub fn from_vector(e_adv: Vec<f64>, init_scale: f64, lr: f64) -> Self {
        Self {
            e_adv,
            init_scale,
            stop_value: f64::NAN,
            iterations_used: 0,
            opt: Adam::new(lr),
        }
    }

    pub fn e_adv(&self) -> &[f64] {
        &self.e_adv
    }

    pub fn dim(&self) -> usize {
        self.e_adv.len()
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    pub fn norm(&self) -> f64 {
        self.e_adv.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Short content hash of `e_adv`, used to trace hand-over between inputs.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.e_adv {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    fn step(&mut self, grad: Vec<f64>) {
        let mut p = Tensor::new(vec![self.e_adv.len()], std::mem::take(&mut self.e_adv));
        let g = Tensor::new(vec![grad.len()], grad);
        self.opt.step(&mut [&mut p], &[&g]);
        self.e_adv = p.into_data();
    }
}

/// Add `e_adv` at concept positions; every other row is copied unchanged.
pub fn apply_perturbation(e_pu: &PromptEmbedding, e_adv: &[f64]) -> Result<PromptEmbedding> {
    if e_adv.len() != e_pu.dim() {
        return Err(LabError::ShapeMismatch {
            expected: vec![e_pu.dim()],
            got: vec![e_adv.len()],
        });
    }
    let d = e_pu.dim();
    let mut out = e_pu.clone();
    for i in e_pu.masked_positions() {
        for (v, a) in out.vectors.data_mut()[i * d..(i + 1) * d]
            .iter_mut()
            .zip(e_adv)
        {
            *v += a;
        }
    }
    Ok(out)
}

/// Cosine similarity; errors on a zero vector.
pub fn cosine(a: &[f64], b: &[f64], what: &'static str) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(LabError::ZeroNorm(what));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Cosine and its gradient with respect to `a`: `b/(|a||b|) − cos·a/|a|²`.
pub fn cosine_grad(a: &[f64], b: &[f64], what: &'static str) -> Result<(f64, Vec<f64>)> {
    let c = cosine(a, b, what)?;
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nab = na2.sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((
        c,
        a.iter()
            .zip(b)
            .map(|(&x, &y)| y / nab - c * x / na2)
            .collect(),
    ))
}

fn check_same<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.rank() == 0 || a.dim(0) == 0 {
        return Err(LabError::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn item_f64<T: Float>(t: &Tensor<T>, i: usize) -> Vec<f64> {
    t.item(i).iter().map(|v| v.as_f64()).collect()
}

/// Batch mean of per-sample cosine between anchored and original predictions, with its
/// gradient with respect to `eps_anchor`.
pub fn adv_loss_v1_grad<T: Float>(
    eps_anchor: &Tensor<T>,
    eps_pu: &Tensor<T>,
) -> Result<(f64, Tensor<f64>)> {
    check_same(eps_anchor, eps_pu)?;
    let b = eps_anchor.dim(0);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(eps_anchor.len());
    for i in 0..b {
        let (c, g) = cosine_grad(&item_f64(eps_anchor, i), &item_f64(eps_pu, i), "prediction")?;
        total += c;
        grad.extend(g.into_iter().map(|v| v / b as f64));
    }
    Ok((
        total / b as f64,
        Tensor::new(eps_anchor.shape().to_vec(), grad),
    ))
}

/// Batch mean of per-sample cosine between the guidance deltas
/// `eps_anchor − eps_empty` and `eps_pu − eps_empty`, with its gradient.
pub fn adv_loss_v2_grad<T: Float>(
    eps_anchor: &Tensor<T>,
    eps_pu: &Tensor<T>,
    eps_empty: &Tensor<T>,
) -> Result<(f64, Tensor<f64>)> {
    check_same(eps_anchor, eps_pu)?;
    check_same(eps_anchor, eps_empty)?;
    let b = eps_anchor.dim(0);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(eps_anchor.len());
    for i in 0..b {
        let e = item_f64(eps_empty, i);
        let da: Vec<f64> = item_f64(eps_anchor, i)
            .iter()
            .zip(&e)
            .map(|(x, y)| x - y)
            .collect();
        let dp: Vec<f64> = item_f64(eps_pu, i)
            .iter()
            .zip(&e)
            .map(|(x, y)| x - y)
            .collect();
        let (c, g) = cosine_grad(&da, &dp, "guidance delta")?;
        total += c;
        grad.extend(g.into_iter().map(|v| v / b as f64));
    }
    Ok((
        total / b as f64,
        Tensor::new(eps_anchor.shape().to_vec(), grad),
    ))
}

pub fn adv_loss_v1<T: Float>(eps_anchor: &Tensor<T>, eps_pu: &Tensor<T>) -> Result<f64> {
    adv_loss_v1_grad(eps_anchor, eps_pu).map(|r| r.0)
}

pub fn adv_loss_v2<T: Float>(
    eps_anchor: &Tensor<T>,
    eps_pu: &Tensor<T>,
    eps_empty: &Tensor<T>,
) -> Result<f64> {
    adv_loss_v2_grad(eps_anchor, eps_pu, eps_empty).map(|r| r.0)
}

/// One noised batch with the frozen model's cached predictions.
pub struct AdvContext<'a, T> {
    pub theta_ori: &'a Denoiser<T>,
    pub xt: Tensor<T>,
    pub t: Vec<usize>,
    pub e_pu: Vec<PromptEmbedding>,
    /// `f(x_t, e_pu; θ_ori)`.
    pub eps_pu: Tensor<T>,
    /// `f(x_t, e_∅; θ_ori)`.
    pub eps_empty: Tensor<T>,
}

impl<'a, T: Float> AdvContext<'a, T> {
    /// Precompute both frozen-model targets for `xt`.
    pub fn new(
        theta_ori: &'a Denoiser<T>,
        xt: Tensor<T>,
        t: Vec<usize>,
        e_pu: Vec<PromptEmbedding>,
        empty: &PromptEmbedding,
    ) -> Result<Self> {
        let refs: Vec<&PromptEmbedding> = e_pu.iter().collect();
        let eps_pu = theta_ori.predict(&xt, &t, &CondBatch::from_prompts(&refs)?)?;
        let eps_empty = theta_ori.predict(&xt, &t, &CondBatch::repeat(empty, e_pu.len())?)?;
        Ok(Self {
            theta_ori,
            xt,
            t,
            e_pu,
            eps_pu,
            eps_empty,
        })
    }

    pub fn anchored(&self, e_adv: &[f64]) -> Result<Vec<PromptEmbedding>> {
        self.e_pu
            .iter()
            .map(|p| apply_perturbation(p, e_adv))
            .collect()
    }

    /// Loss value and its gradient with respect to `e_adv`.
    pub fn loss_and_grad(&self, e_adv: &[f64], variant: AdvLossVariant) -> Result<(f64, Vec<f64>)> {
        let anchored = self.anchored(e_adv)?;
        let refs: Vec<&PromptEmbedding> = anchored.iter().collect();
        let cond = CondBatch::<T>::from_prompts(&refs)?;
        let mut tape = Tape::new();
        let fp = self
            .theta_ori
            .forward(&mut tape, &self.xt, &self.t, &cond, true, &|_| false)?;
        let pred = tape.value(fp.out);
        let (value, seed) = match variant {
            AdvLossVariant::V1 => adv_loss_v1_grad(pred, &self.eps_pu)?,
            AdvLossVariant::V2 => adv_loss_v2_grad(pred, &self.eps_pu, &self.eps_empty)?,
        };
        if !value.is_finite() {
            return Err(LabError::Numerical(format!("adversarial loss is {value}")));
        }
        let grads = tape.backward(fp.out, seed.cast());
        let gc = grads.get(fp.cond).expect("conditioning requires grad");
        let (lmax, d) = (gc.dim(1), gc.dim(2));
        let mut g = vec![0.0; d];
        for (b, p) in self.e_pu.iter().enumerate() {
            for i in p.masked_positions() {
                let row = &gc.data()[(b * lmax + i) * d..(b * lmax + i + 1) * d];
                for (acc, v) in g.iter_mut().zip(row) {
                    *acc += v.as_f64();
                }
            }
        }
        Ok((value, g))
    }

    pub fn loss(&self, e_adv: &[f64], variant: AdvLossVariant) -> Result<f64> {
        let anchored = self.anchored(e_adv)?;
        let refs: Vec<&PromptEmbedding> = anchored.iter().collect();
        let pred = self
            .theta_ori
            .predict(&self.xt, &self.t, &CondBatch::from_prompts(&refs)?)?;
        match variant {
            AdvLossVariant::V1 => adv_loss_v1(&pred, &self.eps_pu),
            AdvLossVariant::V2 => adv_loss_v2(&pred, &self.eps_pu, &self.eps_empty),
        }
    }
}

/// Outcome of one call to [`perturbation_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Loss value before any update.
    pub value: f64,
    pub stepped: bool,
}

/// Evaluate the loss at the current `e_adv` and, unless it is already ≤ 0, take one
/// Adam step that descends it.
pub fn perturbation_step<T: Float>(
    ctx: &AdvContext<T>,
    anchor: &mut AdversarialAnchor,
    variant: AdvLossVariant,
) -> Result<StepOutcome> {
    let (value, grad) = ctx.loss_and_grad(&anchor.e_adv, variant)?;
    if value <= 0.0 {
        return Ok(StepOutcome {
            value,
            stepped: false,
        });
    }
    anchor.step(grad);
    Ok(StepOutcome {
        value,
        stepped: true,
    })
}

/// Summary of one inner optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub start_value: f64,
    pub stop_value: f64,
    pub iterations_used: usize,
    /// Whether the loss reached ≤ 0 within budget.
    pub reached: bool,
    /// Every evaluated loss value, in order.
    pub values: Vec<f64>,
}

/// Descend the cosine loss on `e_adv` for at most `s` steps, stopping the first time it
/// is ≤ 0. The frozen model and cached targets are never modified.
pub fn optimize_perturbation<T: Float>(
    ctx: &AdvContext<T>,
    anchor: &mut AdversarialAnchor,
    variant: AdvLossVariant,
    s: usize,
) -> Result<StopRecord> {
    optimize_perturbation_with(ctx, anchor, variant, s, |_, _, _| {})
}

/// [`optimize_perturbation`] that reports every evaluation, with the anchor as it stands
/// after that evaluation's step.
pub fn optimize_perturbation_with<T: Float>(
    ctx: &AdvContext<T>,
    anchor: &mut AdversarialAnchor,
    variant: AdvLossVariant,
    s: usize,
    mut on_eval: impl FnMut(usize, StepOutcome, &AdversarialAnchor),
) -> Result<StopRecord> {
    if s == 0 {
        return Err(LabError::InvalidArgument("S must be at least 1".into()));
    }
    let mut values = Vec::new();
    let mut iters = 0;
    loop {
        if iters == s {
            let value = ctx.loss(&anchor.e_adv, variant)?;
            on_eval(
                iters,
                StepOutcome {
                    value,
                    stepped: false,
                },
                anchor,
            );
            values.push(value);
            break;
        }
        let out = perturbation_step(ctx, anchor, variant)?;
        on_eval(iters, out, anchor);
        values.push(out.value);
        if !out.stepped {
            break;
        }
        iters += 1;
    }
    let stop_value = *values.last().expect("at least one evaluation");
    if !stop_value.is_finite() {
        return Err(LabError::Numerical(format!(
            "adversarial loss is {stop_value}"
        )));
    }
    anchor.stop_value = stop_value;
    anchor.iterations_used = iters;
    Ok(StopRecord {
        start_value: values[0],
        stop_value,
        iterations_used: iters,
        reached: stop_value <= 0.0,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        let n = rows[0].len();
        Tensor::new(
            vec![rows.len(), n],
            rows.iter().flat_map(|r| r.to_vec()).collect(),
        )
    }

    #[test]
    fn v1_reference_values() {
        let a = t(&[&[1.0, 2.0, -1.0]]);
        assert!((adv_loss_v1(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((adv_loss_v1(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let b = t(&[&[2.0, -1.0, 0.0]]);
        assert_eq!(adv_loss_v1(&a, &b).unwrap(), 0.0);
        let z = t(&[&[0.0, 0.0, 0.0]]);
        assert!(matches!(adv_loss_v1(&z, &a), Err(LabError::ZeroNorm(_))));
    }

    #[test]
    fn v2_reference_values() {
        let a = t(&[&[1.0, 2.0, -1.0]]);
        let e = t(&[&[0.5, 0.5, 0.5]]);
        assert!((adv_loss_v2(&a, &a, &e).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            adv_loss_v2(&e, &a, &e),
            Err(LabError::ZeroNorm(_))
        ));
    }

    #[test]
    fn losses_average_over_batch() {
        let a = t(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = t(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert_eq!(adv_loss_v1(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn perturbation_touches_masked_rows_only() {
        let p = PromptEmbedding {
            tokens: vec!["a".into(), "c".into(), "b".into()],
            vectors: Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3),
            concept_mask: vec![false, true, false],
        };
        let u = [0.25, -1.5];
        let out = apply_perturbation(&p, &u).unwrap();
        assert_eq!(out.vector(0), p.vector(0));
        assert_eq!(out.vector(2), p.vector(2));
        assert_eq!(
            out.vector(1),
            &[p.vector(1)[0] + 0.25, p.vector(1)[1] - 1.5]
        );
        assert_eq!(apply_perturbation(&p, &[0.0, 0.0]).unwrap(), p);
        assert!(apply_perturbation(&p, &[0.0]).is_err());
    }

    #[test]
    fn cosine_gradient_is_orthogonal_to_a() {
        let a = [0.3, -1.2, 2.0];
        let b = [1.0, 0.4, -0.7];
        let (_, g) = cosine_grad(&a, &b, "x").unwrap();
        let dot: f64 = g.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!(dot.abs() < 1e-14);
    }
}

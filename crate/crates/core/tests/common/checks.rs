//! Finite-difference checks shared by the gradient tests and the acceptance suite.

use advanchor_core::advanchor::{AdvContext, AdvLossVariant};
use advanchor_core::data::IMAGE_SHAPE;
use advanchor_core::denoiser::{CondBatch, Denoiser};
use advanchor_core::prompts::{embed_prompt, empty_prompt, PromptEmbedding};
use advanchor_core::schedule::diffuse;
use advanchor_core::unlearner::{
    alignment_loss_grad, partition_weights, reg_loss, unlearn_loss, AlignmentBatch, WeightPartition,
};
use advanchor_core::weights::{is_cross_attention, BaseModel, DenoiserWeights};
use advanchor_grad::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rand_tensor, rel_err};

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const COORDS: usize = 20;

/// Worst relative error over the checked coordinates, or the first coordinate over `TOL`.
pub type Check = Result<f64, String>;

fn track(
    worst: &mut f64,
    what: impl FnOnce() -> String,
    analytic: f64,
    numeric: f64,
) -> Result<(), String> {
    let e = rel_err(analytic, numeric);
    *worst = worst.max(e);
    if e > TOL {
        return Err(format!(
            "{}: analytic {analytic} vs numeric {numeric}",
            what()
        ));
    }
    Ok(())
}

fn batch(
    base: &BaseModel,
    rng: &mut ChaCha8Rng,
    b: usize,
) -> (Tensor<f64>, Vec<usize>, Vec<PromptEmbedding>) {
    let mut shape = vec![b];
    shape.extend(IMAGE_SHAPE);
    let xt = rand_tensor(rng, &shape, 1.0);
    let t: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=1000)).collect();
    let prompts = [
        ["a", "style_A", "circle"],
        ["style_A", "square", "painting"],
    ];
    let e_pu = (0..b)
        .map(|i| embed_prompt(&prompts[i % 2], &base.vocab, "style_A").unwrap())
        .collect();
    (xt, t, e_pu)
}

/// Parameter (mostly cross-attention) and conditioning gradients of `Σ w·f(x_t, c)`.
pub fn denoiser(base: &BaseModel, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xt, t, e_pu) = batch(base, &mut rng, 2);
    let refs: Vec<&PromptEmbedding> = e_pu.iter().collect();
    let cond = CondBatch::<f64>::from_prompts(&refs).unwrap();
    let net = Denoiser::<f64>::new(&base.weights);
    let mut tape = Tape::new();
    let fp = net
        .forward(&mut tape, &xt, &t, &cond, true, &|_| true)
        .unwrap();
    let w = rand_tensor(&mut rng, tape.value(fp.out).shape(), 1.0);
    let grads = tape.backward(fp.out, w.clone());

    let objective = |weights: &DenoiserWeights, cond: &CondBatch<f64>| -> f64 {
        let out = Denoiser::<f64>::new(weights)
            .predict(&xt, &t, cond)
            .unwrap();
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let mut worst = 0.0;
    let names: Vec<String> = base.weights.names().map(String::from).collect();
    let cross: Vec<&String> = names.iter().filter(|n| is_cross_attention(n)).collect();
    let other: Vec<&String> = names.iter().filter(|n| !is_cross_attention(n)).collect();
    for k in 0..COORDS {
        // Mostly cross-attention coordinates, which unlearning trains.
        let name = if k % 4 == 3 {
            other[rng.gen_range(0..other.len())]
        } else {
            cross[rng.gen_range(0..cross.len())]
        };
        let len = base.weights.get(name).unwrap().len();
        let j = rng.gen_range(0..len);
        let analytic = grads.get(fp.params[name]).unwrap().data()[j];
        let mut plus = base.weights.clone();
        plus.get_mut(name).unwrap().data_mut()[j] += H;
        let mut minus = base.weights.clone();
        minus.get_mut(name).unwrap().data_mut()[j] -= H;
        let numeric = (objective(&plus, &cond) - objective(&minus, &cond)) / (2.0 * H);
        track(&mut worst, || format!("{name}[{j}]"), analytic, numeric)?;
    }

    let g_cond = grads.get(fp.cond).unwrap();
    for _ in 0..COORDS {
        let j = rng.gen_range(0..cond.data.len());
        let mut plus = cond.clone();
        plus.data.data_mut()[j] += H;
        let mut minus = cond.clone();
        minus.data.data_mut()[j] -= H;
        let numeric =
            (objective(&base.weights, &plus) - objective(&base.weights, &minus)) / (2.0 * H);
        track(
            &mut worst,
            || format!("cond[{j}]"),
            g_cond.data()[j],
            numeric,
        )?;
    }
    Ok(worst)
}

/// Gradient of the adversarial loss with respect to the perturbation.
pub fn adversarial(base: &BaseModel, variant: AdvLossVariant, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xt, t, e_pu) = batch(base, &mut rng, 2);
    let ori = Denoiser::<f64>::new(&base.weights);
    let empty = empty_prompt(&base.vocab).unwrap();
    let ctx = AdvContext::new(&ori, xt, t, e_pu, &empty).unwrap();
    let dim = base.vocab.dim();
    let e_adv: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (value, grad) = ctx.loss_and_grad(&e_adv, variant).unwrap();
    if (value - ctx.loss(&e_adv, variant).unwrap()).abs() > 1e-12 {
        return Err("loss_and_grad value disagrees with loss".into());
    }
    let mut worst = 0.0;
    for k in 0..COORDS {
        let j = (k * 7 + seed as usize) % dim;
        let mut plus = e_adv.clone();
        plus[j] += H;
        let mut minus = e_adv.clone();
        minus[j] -= H;
        let numeric =
            (ctx.loss(&plus, variant).unwrap() - ctx.loss(&minus, variant).unwrap()) / (2.0 * H);
        track(
            &mut worst,
            || format!("{variant:?} e_adv[{j}]"),
            grad[j],
            numeric,
        )?;
    }
    Ok(worst)
}

/// Gradient of `L_op + λ·L_reg` with respect to the cross-attention weights, checked
/// against the double-precision loss functions.
pub fn alignment(base: &BaseModel, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 2;
    let (_, t, e_pu) = batch(base, &mut rng, b);
    let mut shape = vec![b];
    shape.extend(IMAGE_SHAPE);
    let x0 = rand_tensor(&mut rng, &shape, 1.0);
    let eps = rand_tensor(&mut rng, &shape, 1.0);
    let schedule = base.weights.config().schedule().unwrap();
    let sample = diffuse(&x0, &t, &eps, &schedule).unwrap();
    let empty = empty_prompt(&base.vocab).unwrap();
    let anchor: Vec<PromptEmbedding> = e_pu
        .iter()
        .map(|p| {
            let toks: Vec<&str> = p
                .tokens
                .iter()
                .map(|s| {
                    if s == "style_A" {
                        "painting"
                    } else {
                        s.as_str()
                    }
                })
                .collect();
            embed_prompt(&toks, &base.vocab, "").unwrap()
        })
        .collect();

    let mut part = partition_weights(&base.weights).unwrap();
    // Move off θ_ori so both norms are nonzero.
    for tns in part.theta_op_mut() {
        for v in tns.data_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
    }
    let lambda = 10.0;
    let ori = Denoiser::<f64>::new(part.theta_ori());
    let a_refs: Vec<&PromptEmbedding> = anchor.iter().collect();
    let ab = AlignmentBatch {
        xt: sample.xt.clone(),
        t: t.clone(),
        e_pu: e_pu.clone(),
        target: ori
            .predict(&sample.xt, &t, &CondBatch::from_prompts(&a_refs).unwrap())
            .unwrap(),
        eps_empty: ori
            .predict(&sample.xt, &t, &CondBatch::repeat(&empty, b).unwrap())
            .unwrap(),
    };
    let cur = Denoiser::<f64>::new(part.current());
    let names = part.theta_op_names().to_vec();
    let g = alignment_loss_grad(&cur, &names, &ab, &empty, lambda).unwrap();

    let total = |p: &WeightPartition| -> f64 {
        unlearn_loss(&sample, &e_pu, &anchor, p).unwrap()
            + reg_loss(&sample, &empty, p, lambda).unwrap()
    };
    if rel_err(g.l_op + g.l_reg, total(&part)) > 1e-10 || g.l_op <= 0.0 || g.l_reg <= 0.0 {
        return Err(format!(
            "loss values disagree: {} + {} vs {}",
            g.l_op,
            g.l_reg,
            total(&part)
        ));
    }

    let mut worst = 0.0;
    for _ in 0..COORDS {
        let i = rng.gen_range(0..names.len());
        let j = rng.gen_range(0..g.grads[i].len());
        let mut plus = part.clone();
        plus.theta_op_mut()[i].data_mut()[j] += H;
        let mut minus = part.clone();
        minus.theta_op_mut()[i].data_mut()[j] -= H;
        let numeric = (total(&plus) - total(&minus)) / (2.0 * H);
        track(
            &mut worst,
            || format!("{}[{j}]", names[i]),
            g.grads[i].data()[j],
            numeric,
        )?;
    }
    Ok(worst)
}

//! Small cross-attention U-Net that predicts the injected noise.
//!
//! Layout at 16×16 input, channels `c0 < c1 < c2`:
//!
//! ```text
//! conv_in (c0,16²) ─────────────────────────────────────────┐ skip h0
//! down1 (c1,8²) → enc1.res → enc1.xattn ───────────────┐ skip h1
//! down2 (c2,4²) → enc2.res → enc2.xattn                 │    │
//! up2 conv (c1,4²) → ×2 → +h1 → dec1.res → dec1.xattn ──┘    │
//! up1 conv (c0,8²) → ×2 → +h0 → dec0.res ────────────────────┘
//! out.norm → silu → out.conv (3,16²)
//! ```

use advanchor_grad::{Float, Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::error::{LabError, Result};
use crate::prompts::PromptEmbedding;
use crate::schedule::NoiseSchedule;
use crate::weights::DenoiserWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    pub time_dim: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub groups: usize,
    pub max_prompt_len: usize,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            time_dim: 64,
            embed_dim: 32,
            attn_dim: 32,
            groups: 8,
            max_prompt_len: 12,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .channels
            .iter()
            .any(|&c| c == 0 || c % self.groups != 0)
        {
            return Err(LabError::Config(format!(
                "channels {:?} must be positive multiples of groups={}",
                self.channels, self.groups
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 || self.embed_dim == 0 || self.attn_dim == 0
        {
            return Err(LabError::Config(
                "time_dim must be even; dims must be positive".into(),
            ));
        }
        if self.max_prompt_len == 0 {
            return Err(LabError::Config("max_prompt_len must be positive".into()));
        }
        self.schedule().map(|_| ())
    }

    fn freq_dim(&self) -> usize {
        self.channels[0] * 2
    }

    /// Every parameter name with its shape, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c0, c1, c2] = self.channels;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let mut p = |name: &str, shape: &[usize]| v.push((name.to_string(), shape.to_vec()));
        p("time.lin1.w", &[self.time_dim, self.freq_dim()]);
        p("time.lin1.b", &[self.time_dim]);
        p("time.lin2.w", &[self.time_dim, self.time_dim]);
        p("time.lin2.b", &[self.time_dim]);
        p("conv_in.w", &[c0, IMAGE_CHANNELS, 3, 3]);
        p("conv_in.b", &[c0]);
        p("down1.w", &[c1, c0, 3, 3]);
        p("down1.b", &[c1]);
        let mut out = v;
        self.res_shapes(&mut out, "enc1.res", c1);
        self.xattn_shapes(&mut out, "enc1.xattn", c1);
        out.push(("down2.w".into(), vec![c2, c1, 3, 3]));
        out.push(("down2.b".into(), vec![c2]));
        self.res_shapes(&mut out, "enc2.res", c2);
        self.xattn_shapes(&mut out, "enc2.xattn", c2);
        out.push(("up2.w".into(), vec![c1, c2, 3, 3]));
        out.push(("up2.b".into(), vec![c1]));
        self.res_shapes(&mut out, "dec1.res", c1);
        self.xattn_shapes(&mut out, "dec1.xattn", c1);
        out.push(("up1.w".into(), vec![c0, c1, 3, 3]));
        out.push(("up1.b".into(), vec![c0]));
        self.res_shapes(&mut out, "dec0.res", c0);
        out.push(("out.norm.g".into(), vec![c0]));
        out.push(("out.norm.b".into(), vec![c0]));
        out.push(("out.conv.w".into(), vec![IMAGE_CHANNELS, c0, 3, 3]));
        out.push(("out.conv.b".into(), vec![IMAGE_CHANNELS]));
        out
    }

    fn res_shapes(&self, v: &mut Vec<(String, Vec<usize>)>, pre: &str, c: usize) {
        for (n, s) in [
            ("norm1.g", vec![c]),
            ("norm1.b", vec![c]),
            ("conv1.w", vec![c, c, 3, 3]),
            ("conv1.b", vec![c]),
            ("temb.w", vec![c, self.time_dim]),
            ("temb.b", vec![c]),
            ("norm2.g", vec![c]),
            ("norm2.b", vec![c]),
            ("conv2.w", vec![c, c, 3, 3]),
            ("conv2.b", vec![c]),
        ] {
            v.push((format!("{pre}.{n}"), s));
        }
    }

    fn xattn_shapes(&self, v: &mut Vec<(String, Vec<usize>)>, pre: &str, c: usize) {
        let (a, d) = (self.attn_dim, self.embed_dim);
        for (n, s) in [
            ("norm.g", vec![c]),
            ("norm.b", vec![c]),
            ("to_q.w", vec![a, c]),
            ("to_k.w", vec![a, d]),
            ("to_v.w", vec![a, d]),
            ("to_out.w", vec![c, a]),
            ("to_out.b", vec![c]),
        ] {
            v.push((format!("{pre}.{n}"), s));
        }
    }

    /// Random initial weights: fan-in scaled Gaussians, unit norm gains, zero biases.
    pub fn init_weights(&self, rng: &mut impl Rng) -> Result<DenoiserWeights> {
        self.validate()?;
        let mut params = IndexMap::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("out.conv") {
                    0.1
                } else {
                    1.0
                };
                let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
                Tensor::new(shape.clone(), (0..n).map(|_| normal.sample(rng)).collect())
            };
            params.insert(name, t);
        }
        DenoiserWeights::new(self.clone(), params)
    }
}

/// Padded batch of prompt embeddings: `(B, L, d)` plus true lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct CondBatch<T> {
    pub data: Tensor<T>,
    pub lens: Vec<usize>,
}

impl<T: Float> CondBatch<T> {
    pub fn from_prompts(prompts: &[&PromptEmbedding]) -> Result<Self> {
        let first = prompts
            .first()
            .ok_or_else(|| LabError::InvalidArgument("empty prompt batch".into()))?;
        let d = first.dim();
        let lmax = prompts.iter().map(|p| p.len()).max().unwrap_or(0);
        let mut data = vec![T::zero(); prompts.len() * lmax * d];
        for (b, p) in prompts.iter().enumerate() {
            if p.dim() != d || p.is_empty() {
                return Err(LabError::ShapeMismatch {
                    expected: vec![p.len().max(1), d],
                    got: p.vectors.shape().to_vec(),
                });
            }
            for (i, v) in p.vectors.data().iter().enumerate() {
                data[b * lmax * d + i] = T::lit(*v);
            }
        }
        Ok(Self {
            data: Tensor::new(vec![prompts.len(), lmax, d], data),
            lens: prompts.iter().map(|p| p.len()).collect(),
        })
    }

    /// The same prompt repeated `n` times.
    pub fn repeat(prompt: &PromptEmbedding, n: usize) -> Result<Self> {
        Self::from_prompts(&vec![prompt; n])
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn concat(a: &Self, b: &Self) -> Self {
        let (la, lb) = (a.data.dim(1), b.data.dim(1));
        let d = a.data.dim(2);
        let l = la.max(lb);
        let mut data = Vec::with_capacity((a.batch() + b.batch()) * l * d);
        for (src, ls) in [(a, la), (b, lb)] {
            for bi in 0..src.batch() {
                data.extend_from_slice(&src.data.data()[bi * ls * d..(bi + 1) * ls * d]);
                data.extend(std::iter::repeat(T::zero()).take((l - ls) * d));
            }
        }
        let mut lens = a.lens.clone();
        lens.extend_from_slice(&b.lens);
        Self {
            data: Tensor::new(vec![a.batch() + b.batch(), l, d], data),
            lens,
        }
    }
}

/// Sinusoidal features of the timestep, `[sin(t·f_i), cos(t·f_i)]`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

/// Denoiser weights cast to the working precision.
pub struct Denoiser<T> {
    cfg: ModelConfig,
    params: IndexMap<String, Tensor<T>>,
}

/// Tape handles of one forward pass.
pub struct ForwardPass {
    pub out: Var,
    pub cond: Var,
    pub params: IndexMap<String, Var>,
}

impl<T: Float> Denoiser<T> {
    pub fn new(weights: &DenoiserWeights) -> Self {
        Self {
            cfg: weights.config().clone(),
            params: weights
                .iter()
                .map(|(n, t)| (n.to_string(), t.cast()))
                .collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_inputs(&self, xt: &Tensor<T>, t: &[usize], cond: &CondBatch<T>) -> Result<()> {
        let b = xt.shape().first().copied().unwrap_or(0);
        if xt.shape() != [b, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] || b == 0 {
            return Err(LabError::ShapeMismatch {
                expected: vec![b.max(1), IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
                got: xt.shape().to_vec(),
            });
        }
        if t.len() != b || cond.batch() != b {
            return Err(LabError::InvalidArgument(format!(
                "batch of {b} images with {} timesteps and {} prompts",
                t.len(),
                cond.batch()
            )));
        }
        if cond.data.dim(2) != self.cfg.embed_dim {
            return Err(LabError::ShapeMismatch {
                expected: vec![b, cond.data.dim(1), self.cfg.embed_dim],
                got: cond.data.shape().to_vec(),
            });
        }
        if cond
            .lens
            .iter()
            .any(|&l| l == 0 || l > self.cfg.max_prompt_len)
        {
            return Err(LabError::InvalidArgument(format!(
                "prompt lengths {:?} outside [1, {}]",
                cond.lens, self.cfg.max_prompt_len
            )));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > self.cfg.schedule_steps) {
            return Err(LabError::TimestepOutOfRange {
                t: bad,
                max: self.cfg.schedule_steps,
            });
        }
        Ok(())
    }

    /// Record a forward pass. Parameters for which `trainable` is true, and the
    /// conditioning if `cond_grad`, become gradient-carrying leaves.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        xt: &Tensor<T>,
        t: &[usize],
        cond: &CondBatch<T>,
        cond_grad: bool,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<ForwardPass> {
        self.check_inputs(xt, t, cond)?;
        let mut pv = IndexMap::with_capacity(self.params.len());
        for (name, value) in &self.params {
            pv.insert(name.clone(), tape.leaf(value.clone(), trainable(name)));
        }
        let cv = tape.leaf(cond.data.clone(), cond_grad);
        let x = tape.leaf(xt.clone(), false);
        let out = self.graph(tape, &pv, x, t, cv, &cond.lens);
        Ok(ForwardPass {
            out,
            cond: cv,
            params: pv,
        })
    }

    /// Noise prediction without recording gradients.
    pub fn predict(&self, xt: &Tensor<T>, t: &[usize], cond: &CondBatch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, xt, t, cond, false, &|_| false)?;
        Ok(tape.value(fp.out).clone())
    }

    fn graph(
        &self,
        tape: &mut Tape<T>,
        p: &IndexMap<String, Var>,
        x: Var,
        t: &[usize],
        cond: Var,
        lens: &[usize],
    ) -> Var {
        let g = self.cfg.groups;
        let fd = self.cfg.freq_dim();
        let feats: Vec<T> = t
            .iter()
            .flat_map(|&s| timestep_features(s, fd))
            .map(T::lit)
            .collect();
        let tf = tape.leaf(Tensor::new(vec![t.len(), fd], feats), false);
        let temb = tape.linear(tf, p["time.lin1.w"], Some(p["time.lin1.b"]));
        let temb = tape.silu(temb);
        let temb = tape.linear(temb, p["time.lin2.w"], Some(p["time.lin2.b"]));
        let temb = tape.silu(temb);

        let h0 = tape.conv2d(x, p["conv_in.w"], Some(p["conv_in.b"]), 1, 1);
        let h = tape.conv2d(h0, p["down1.w"], Some(p["down1.b"]), 2, 1);
        let h = res_block(tape, p, "enc1.res", h, temb, g);
        let h1 = xattn_block(tape, p, "enc1.xattn", h, cond, lens, g);
        let h = tape.conv2d(h1, p["down2.w"], Some(p["down2.b"]), 2, 1);
        let h = res_block(tape, p, "enc2.res", h, temb, g);
        let h = xattn_block(tape, p, "enc2.xattn", h, cond, lens, g);
        let h = tape.conv2d(h, p["up2.w"], Some(p["up2.b"]), 1, 1);
        let h = tape.upsample2x(h);
        let h = tape.add(h, h1);
        let h = res_block(tape, p, "dec1.res", h, temb, g);
        let h = xattn_block(tape, p, "dec1.xattn", h, cond, lens, g);
        let h = tape.conv2d(h, p["up1.w"], Some(p["up1.b"]), 1, 1);
        let h = tape.upsample2x(h);
        let h = tape.add(h, h0);
        let h = res_block(tape, p, "dec0.res", h, temb, g);
        let h = tape.group_norm(h, p["out.norm.g"], p["out.norm.b"], g, 1e-5);
        let h = tape.silu(h);
        tape.conv2d(h, p["out.conv.w"], Some(p["out.conv.b"]), 1, 1)
    }
}

fn res_block<T: Float>(
    tape: &mut Tape<T>,
    p: &IndexMap<String, Var>,
    pre: &str,
    x: Var,
    temb: Var,
    groups: usize,
) -> Var {
    let k = |n: &str| p[&format!("{pre}.{n}")];
    let h = tape.group_norm(x, k("norm1.g"), k("norm1.b"), groups, 1e-5);
    let h = tape.silu(h);
    let h = tape.conv2d(h, k("conv1.w"), Some(k("conv1.b")), 1, 1);
    let tproj = tape.linear(temb, k("temb.w"), Some(k("temb.b")));
    let h = tape.add_channel(h, tproj);
    let h = tape.group_norm(h, k("norm2.g"), k("norm2.b"), groups, 1e-5);
    let h = tape.silu(h);
    let h = tape.conv2d(h, k("conv2.w"), Some(k("conv2.b")), 1, 1);
    tape.add(x, h)
}

fn xattn_block<T: Float>(
    tape: &mut Tape<T>,
    p: &IndexMap<String, Var>,
    pre: &str,
    x: Var,
    cond: Var,
    lens: &[usize],
    groups: usize,
) -> Var {
    let k = |n: &str| p[&format!("{pre}.{n}")];
    let (h, w) = (tape.value(x).dim(2), tape.value(x).dim(3));
    let n = tape.group_norm(x, k("norm.g"), k("norm.b"), groups, 1e-5);
    let tokens = tape.to_tokens(n);
    let q = tape.linear(tokens, k("to_q.w"), None);
    let kk = tape.linear(cond, k("to_k.w"), None);
    let v = tape.linear(cond, k("to_v.w"), None);
    let a = tape.attention(q, kk, v, lens);
    let o = tape.linear(a, k("to_out.w"), Some(k("to_out.b")));
    let o = tape.from_tokens(o, h, w);
    tape.add(x, o)
}

/// Single-image noise prediction in double precision.
pub fn denoise_predict(
    xt: &Tensor<f64>,
    t: usize,
    cond: &PromptEmbedding,
    weights: &DenoiserWeights,
) -> Result<Tensor<f64>> {
    let mut shape = vec![1];
    shape.extend_from_slice(xt.shape());
    let x = xt.clone().reshape(&shape);
    let c = CondBatch::from_prompts(&[cond])?;
    let out = Denoiser::<f64>::new(weights).predict(&x, &[t], &c)?;
    Ok(out.reshape(xt.shape()))
}

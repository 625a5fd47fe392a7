//! Small convolutional concept classifier with style and shape heads.

use std::fs;
use std::path::Path;

use advanchor_grad::{Adam, Float, Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::data::{ConceptKind, IMAGE_CHANNELS, IMAGE_SIZE, SHAPES, STYLES};
use crate::error::{LabError, Result};
use crate::sampler::{generate, stream_seed, SamplerConfig};
use crate::weights::{read_archive, write_archive, BaseModel};

/// Width of the pooled feature vector used by the Fréchet distance.
pub const FEATURE_DIM: usize = 16;
const C1: usize = 16;
const C2: usize = 32;

fn param_shapes() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("conv1.w", vec![C1, IMAGE_CHANNELS, 3, 3]),
        ("conv1.b", vec![C1]),
        ("conv2.w", vec![C2, C1, 3, 3]),
        ("conv2.b", vec![C2]),
        ("conv3.w", vec![C2, C2, 3, 3]),
        ("conv3.b", vec![C2]),
        ("feat.w", vec![FEATURE_DIM, C2]),
        ("feat.b", vec![FEATURE_DIM]),
        ("style.w", vec![STYLES.len(), FEATURE_DIM]),
        ("style.b", vec![STYLES.len()]),
        ("shape.w", vec![SHAPES.len(), FEATURE_DIM]),
        ("shape.b", vec![SHAPES.len()]),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights {
    params: IndexMap<String, Tensor<f64>>,
}

/// Classifier outputs for a set of images.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ImageFeatures {
    /// Pooled `FEATURE_DIM` vectors.
    pub pooled: Vec<Vec<f64>>,
    /// Flattened intermediate `(32, 8, 8)` maps.
    pub spatial: Vec<Vec<f64>>,
    pub style_pred: Vec<usize>,
    pub shape_pred: Vec<usize>,
}

impl ImageFeatures {
    pub fn len(&self) -> usize {
        self.pooled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pooled.is_empty()
    }

    pub fn predictions(&self, kind: ConceptKind) -> &[usize] {
        match kind {
            ConceptKind::Style => &self.style_pred,
            ConceptKind::Shape => &self.shape_pred,
        }
    }

    fn extend(&mut self, other: ImageFeatures) {
        self.pooled.extend(other.pooled);
        self.spatial.extend(other.spatial);
        self.style_pred.extend(other.style_pred);
        self.shape_pred.extend(other.shape_pred);
    }
}

struct Heads {
    spatial: Var,
    pooled: Var,
    style: Var,
    shape: Var,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ClassifierWeights {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal =
                        Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                };
                (name.to_string(), t)
            })
            .collect();
        Self { params }
    }

    /// Accepts parameters in any order; they are stored in forward order.
    pub fn from_params(mut params: IndexMap<String, Tensor<f64>>) -> Result<Self> {
        let mut ordered = IndexMap::new();
        for (name, shape) in param_shapes() {
            match params.swap_remove(name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    ordered.insert(name.to_string(), t);
                }
                Some(t) => {
                    return Err(LabError::ShapeMismatch {
                        expected: shape,
                        got: t.shape().to_vec(),
                    })
                }
                None => return Err(LabError::InvalidArgument(format!("missing `{name}`"))),
            }
        }
        if let Some(extra) = params.keys().next() {
            return Err(LabError::InvalidArgument(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(Self { params: ordered })
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<f64>> {
        &self.params
    }

    fn graph<T: Float>(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        trainable: bool,
    ) -> (Heads, Vec<Var>) {
        let p: Vec<Var> = self
            .params
            .values()
            .map(|v| tape.leaf(v.cast(), trainable))
            .collect();
        let x = tape.leaf(images.clone(), false);
        let h = tape.conv2d(x, p[0], Some(p[1]), 1, 1);
        let h = tape.silu(h);
        let h = tape.conv2d(h, p[2], Some(p[3]), 2, 1);
        let spatial = tape.silu(h);
        let h = tape.conv2d(spatial, p[4], Some(p[5]), 2, 1);
        let h = tape.silu(h);
        let h = tape.avg_pool(h);
        let h = tape.linear(h, p[6], Some(p[7]));
        let pooled = tape.silu(h);
        let style = tape.linear(pooled, p[8], Some(p[9]));
        let shape = tape.linear(pooled, p[10], Some(p[11]));
        (
            Heads {
                spatial,
                pooled,
                style,
                shape,
            },
            p,
        )
    }

    /// Features and predictions for `(3, 16, 16)` images.
    pub fn features(&self, images: &[Tensor<f64>]) -> Result<ImageFeatures> {
        let mut out = ImageFeatures::default();
        for chunk in images.chunks(64) {
            let x = stack_images(chunk)?;
            let mut tape = Tape::<f32>::new();
            let (h, _) = self.graph(&mut tape, &x, false);
            let rows = |v: Var| -> Vec<Vec<f64>> {
                let t = tape.value(v);
                let n = t.item_len();
                t.data()
                    .chunks(n)
                    .map(|r| r.iter().map(|&v| v as f64).collect())
                    .collect()
            };
            let style = rows(h.style);
            let shape = rows(h.shape);
            out.extend(ImageFeatures {
                pooled: rows(h.pooled),
                spatial: rows(h.spatial),
                style_pred: style.iter().map(|r| argmax(r)).collect(),
                shape_pred: shape.iter().map(|r| argmax(r)).collect(),
            });
        }
        if out.pooled.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LabError::Numerical("non-finite classifier features".into()));
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        write_archive(
            &dir.join("classifier.safetensors"),
            self.params.iter().map(|(k, v)| (k.as_str(), v)),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_params(read_archive(&dir.join("classifier.safetensors"))?)
    }
}

fn stack_images(images: &[Tensor<f64>]) -> Result<Tensor<f32>> {
    let shape = [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    let mut data = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
    for img in images {
        if img.shape() != shape {
            return Err(LabError::ShapeMismatch {
                expected: shape.to_vec(),
                got: img.shape().to_vec(),
            });
        }
        data.extend(img.data().iter().map(|&v| v as f32));
    }
    Ok(Tensor::new(
        vec![images.len(), IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
        data,
    ))
}

/// Mean softmax cross-entropy over rows of `logits`, and its gradient.
pub fn cross_entropy(logits: &Tensor<f32>, labels: &[usize]) -> (f64, Tensor<f32>) {
    let k = logits.dim(1);
    let n = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        loss += -(row[y] as f64 - m - z.ln());
        for (j, &v) in row.iter().enumerate() {
            let p = (v as f64 - m).exp() / z;
            grad.data_mut()[i * k + j] = ((p - if j == y { 1.0 } else { 0.0 }) / n) as f32;
        }
    }
    (loss / n, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Generated images per (style, shape) pair.
    pub images_per_pair: usize,
    pub holdout_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gate: f64,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            images_per_pair: 40,
            holdout_fraction: 0.25,
            steps: 800,
            batch_size: 64,
            lr: 3e-3,
            gate: 0.9,
            sampler: SamplerConfig::default(),
            seed: 11,
        }
    }
}

/// Per-concept accuracies on the training and held-out splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_accuracy: IndexMap<String, f64>,
    pub heldout_accuracy: IndexMap<String, f64>,
    /// `[true style][predicted style]` counts on the held-out split.
    pub style_confusion: Vec<Vec<usize>>,
    pub shape_confusion: Vec<Vec<usize>>,
    pub gate: f64,
}

impl ClassifierReport {
    pub fn passes(&self) -> bool {
        self.heldout_accuracy.values().all(|&a| a >= self.gate)
    }

    /// Error listing every concept below the gate.
    pub fn check_gate(&self) -> Result<()> {
        let failing: Vec<String> = self
            .heldout_accuracy
            .iter()
            .filter(|(_, &a)| a < self.gate)
            .map(|(c, a)| format!("{c}={a:.3}"))
            .collect();
        if failing.is_empty() {
            Ok(())
        } else {
            Err(LabError::GateFailed(format!(
                "held-out accuracy below {}: {}",
                self.gate,
                failing.join(", ")
            )))
        }
    }
}

/// Labeled generations used for classifier training.
pub struct LabeledGenerations {
    pub images: Vec<Tensor<f64>>,
    pub styles: Vec<usize>,
    pub shapes: Vec<usize>,
}

/// Sample `images_per_pair` images for each `(style, shape)` from `a <style> <shape>`.
pub fn generate_labeled(base: &BaseModel, cfg: &ClassifierConfig) -> Result<LabeledGenerations> {
    let mut prompts = Vec::new();
    let mut seeds = Vec::new();
    let mut styles = Vec::new();
    let mut shapes = Vec::new();
    for s in 0..STYLES.len() {
        for h in 0..SHAPES.len() {
            for k in 0..cfg.images_per_pair {
                prompts.push(crate::prompts::concept_prompt(s, h));
                seeds.push(stream_seed(
                    cfg.seed,
                    &format!("clf/{}/{}", STYLES[s], SHAPES[h]),
                    k as u64,
                ));
                styles.push(s);
                shapes.push(h);
            }
        }
    }
    let images = generate(base, &prompts, &seeds, &cfg.sampler)?;
    Ok(LabeledGenerations {
        images,
        styles,
        shapes,
    })
}

fn accuracy_table(
    feats: &ImageFeatures,
    styles: &[usize],
    shapes: &[usize],
) -> IndexMap<String, f64> {
    let mut out = IndexMap::new();
    for (s, name) in STYLES.iter().enumerate() {
        let idx: Vec<usize> = (0..styles.len()).filter(|&i| styles[i] == s).collect();
        let hit = idx.iter().filter(|&&i| feats.style_pred[i] == s).count();
        out.insert(name.to_string(), hit as f64 / idx.len().max(1) as f64);
    }
    for (h, name) in SHAPES.iter().enumerate() {
        let idx: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i] == h).collect();
        let hit = idx.iter().filter(|&&i| feats.shape_pred[i] == h).count();
        out.insert(name.to_string(), hit as f64 / idx.len().max(1) as f64);
    }
    out
}

fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

/// Fit the classifier on labeled images; the last `holdout_fraction` of each pair is held out.
pub fn fit_classifier(
    data: &LabeledGenerations,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierWeights, ClassifierReport)> {
    if data.images.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let per_pair = cfg.images_per_pair;
    let n_hold = ((per_pair as f64) * cfg.holdout_fraction).round() as usize;
    if n_hold == 0 || n_hold >= per_pair {
        return Err(LabError::Config(
            "holdout must leave both splits non-empty".into(),
        ));
    }
    let (train_idx, hold_idx): (Vec<usize>, Vec<usize>) =
        (0..data.images.len()).partition(|i| i % per_pair < per_pair - n_hold);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = ClassifierWeights::init(cfg.seed);
    let mut opt = Adam::<f64>::new(cfg.lr);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| *train_idx.choose(&mut rng).expect("non-empty train split"))
            .collect();
        let imgs: Vec<Tensor<f64>> = batch.iter().map(|&i| data.images[i].clone()).collect();
        let x = stack_images(&imgs)?;
        let mut tape = Tape::<f32>::new();
        let (h, pv) = clf.graph(&mut tape, &x, true);
        let ys: Vec<usize> = batch.iter().map(|&i| data.styles[i]).collect();
        let yh: Vec<usize> = batch.iter().map(|&i| data.shapes[i]).collect();
        let (ls, gs) = cross_entropy(tape.value(h.style), &ys);
        let (lh, gh) = cross_entropy(tape.value(h.shape), &yh);
        if !(ls + lh).is_finite() {
            return Err(LabError::Numerical(format!(
                "classifier loss diverged at step {step}"
            )));
        }
        let mut g1 = tape.backward(h.style, gs);
        let mut g2 = tape.backward(h.shape, gh);
        let grads: Vec<Tensor<f64>> = pv
            .iter()
            .map(|&v| {
                // Each head reaches only its own output layer.
                let mut g = Tensor::<f64>::zeros(tape.value(v).shape());
                for part in [g1.take(v), g2.take(v)].into_iter().flatten() {
                    g.add_assign(&part.cast());
                }
                g
            })
            .collect();
        let mut params: Vec<&mut Tensor<f64>> = clf.params.values_mut().collect();
        let grefs: Vec<&Tensor<f64>> = grads.iter().collect();
        opt.step(&mut params, &grefs);
        if step % 200 == 0 {
            info!(step, loss = ls + lh, "classifier training");
        }
    }
    let pick = |idx: &[usize]| -> Vec<Tensor<f64>> {
        idx.iter().map(|&i| data.images[i].clone()).collect()
    };
    let labels = |idx: &[usize]| -> (Vec<usize>, Vec<usize>) {
        (
            idx.iter().map(|&i| data.styles[i]).collect(),
            idx.iter().map(|&i| data.shapes[i]).collect(),
        )
    };
    let ftr = clf.features(&pick(&train_idx))?;
    let (str_, shr) = labels(&train_idx);
    let fho = clf.features(&pick(&hold_idx))?;
    let (sho, shh) = labels(&hold_idx);
    let report = ClassifierReport {
        train_accuracy: accuracy_table(&ftr, &str_, &shr),
        heldout_accuracy: accuracy_table(&fho, &sho, &shh),
        style_confusion: confusion(&sho, &fho.style_pred, STYLES.len()),
        shape_confusion: confusion(&shh, &fho.shape_pred, SHAPES.len()),
        gate: cfg.gate,
    };
    Ok((clf, report))
}

/// Generate labeled samples from `base` and fit the classifier on them.
pub fn train_classifier(
    base: &BaseModel,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierWeights, ClassifierReport)> {
    let data = generate_labeled(base, cfg)?;
    fit_classifier(&data, cfg)
}

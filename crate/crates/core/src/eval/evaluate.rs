//! Erase/preserve evaluation of unlearned weights against the base model.

use std::fs;
use std::path::Path;

use advanchor_grad::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::data::{Concept, STYLES};
use crate::error::{LabError, Result};
use crate::eval::classifier::{ClassifierReport, ClassifierWeights, ImageFeatures};
use crate::eval::metrics::{accuracy, frechet_distance, paired_cosine_distance};
use crate::prompts::concept_prompt_cycle;
use crate::sampler::{generate_with, stream_seed, SamplerConfig};
use crate::weights::{BaseModel, DenoiserWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub seeds_per_concept: usize,
    pub images_per_seed: usize,
    pub concepts_erase: Vec<String>,
    pub concepts_preserve: Vec<String>,
    pub runs: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            seeds_per_concept: 50,
            images_per_seed: 4,
            concepts_erase: vec![STYLES[0].into()],
            concepts_preserve: STYLES[1..].iter().map(|s| s.to_string()).collect(),
            runs: 3,
            sampler: SamplerConfig::default(),
            seed: 1234,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.seeds_per_concept == 0 || self.images_per_seed == 0 || self.runs == 0 {
            return Err(LabError::Config(
                "seeds_per_concept, images_per_seed and runs must be at least 1".into(),
            ));
        }
        if self.concepts_erase.is_empty() {
            return Err(LabError::Config(
                "no concepts to evaluate erasure on".into(),
            ));
        }
        for c in self.concepts_erase.iter().chain(&self.concepts_preserve) {
            if Concept::from_token(c).is_none() {
                return Err(LabError::Config(format!("unknown concept `{c}`")));
            }
        }
        Ok(())
    }

    pub fn images_per_concept(&self) -> usize {
        self.seeds_per_concept * self.images_per_seed
    }

    /// The same protocol with `concept` erased and its siblings preserved.
    pub fn for_concept(&self, concept: &str) -> Result<Self> {
        let c = Concept::from_token(concept)
            .ok_or_else(|| LabError::UnknownToken(concept.to_string()))?;
        Ok(Self {
            concepts_erase: vec![concept.to_string()],
            concepts_preserve: c
                .siblings()
                .into_iter()
                .filter(|s| *s != c)
                .map(|s| s.token().to_string())
                .collect(),
            ..self.clone()
        })
    }

    fn prompts_and_seeds(&self, concept: Concept, tag: &str) -> (Vec<Vec<String>>, Vec<u64>) {
        let mut prompts = Vec::with_capacity(self.images_per_concept());
        let mut seeds = Vec::with_capacity(self.images_per_concept());
        for s in 0..self.seeds_per_concept {
            for j in 0..self.images_per_seed {
                prompts.push(concept_prompt_cycle(concept, s));
                let idx = (s * self.images_per_seed + j) as u64;
                seeds.push(stream_seed(
                    self.seed,
                    &format!("{tag}/{}", concept.token()),
                    idx,
                ));
            }
        }
        (prompts, seeds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Erase,
    Preserve,
}

impl Side {
    pub fn name(&self) -> &'static str {
        match self {
            Side::Erase => "erase",
            Side::Preserve => "preserve",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub fid_analog: f64,
    pub acc: f64,
    pub lpips_analog: f64,
}

impl MetricSet {
    pub fn mean(sets: &[MetricSet]) -> MetricSet {
        let n = sets.len().max(1) as f64;
        MetricSet {
            fid_analog: sets.iter().map(|m| m.fid_analog).sum::<f64>() / n,
            acc: sets.iter().map(|m| m.acc).sum::<f64>() / n,
            lpips_analog: sets.iter().map(|m| m.lpips_analog).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRow {
    pub concept: String,
    pub side: Side,
    /// Before-model ACC.
    pub baseline_acc: f64,
    pub runs: Vec<MetricSet>,
    pub mean: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub erase_acc: f64,
    pub erase_fid_analog: f64,
    pub erase_lpips_analog: f64,
    pub preserve_acc: f64,
    /// Mean of `baseline_acc − acc` over preserved concepts.
    pub preserve_acc_drop: f64,
    pub preserve_fid_analog: f64,
    pub preserve_lpips_analog: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub rows: Vec<ConceptRow>,
    /// FID-analog between two disjoint before-model sample sets, per erased concept.
    pub noise_floor: IndexMap<String, f64>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn row(&self, concept: &str) -> Option<&ConceptRow> {
        self.rows.iter().find(|r| r.concept == concept)
    }

    pub fn side(&self, side: Side) -> impl Iterator<Item = &ConceptRow> {
        self.rows.iter().filter(move |r| r.side == side)
    }

    /// Long-format CSV: `run, concept, side, metric, value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["run", "concept", "side", "metric", "value"])?;
        for row in &self.rows {
            let mut put = |run: String, metric: &str, value: f64| {
                w.write_record([
                    run,
                    row.concept.clone(),
                    row.side.name().into(),
                    metric.into(),
                    value.to_string(),
                ])
            };
            put("baseline".into(), "acc", row.baseline_acc)?;
            for (r, m) in row.runs.iter().enumerate() {
                put(r.to_string(), "fid_analog", m.fid_analog)?;
                put(r.to_string(), "acc", m.acc)?;
                put(r.to_string(), "lpips_analog", m.lpips_analog)?;
            }
            put("mean".into(), "fid_analog", row.mean.fid_analog)?;
            put("mean".into(), "acc", row.mean.acc)?;
            put("mean".into(), "lpips_analog", row.mean.lpips_analog)?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| LabError::Serde(e.to_string()))
    }

    /// Write `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        fs::write(&csv_path, self.to_csv()?).map_err(|e| LabError::io(&csv_path, e))?;
        let json_path = dir.join("report.json");
        fs::write(&json_path, serde_json::to_string_pretty(self)?)
            .map_err(|e| LabError::io(&json_path, e))
    }
}

/// Generated images of one concept and their classifier features.
#[derive(Clone)]
pub struct ConceptSamples {
    pub images: Vec<Tensor<f64>>,
    pub features: ImageFeatures,
}

/// Holds before-model references so several unlearned models can be scored cheaply.
pub struct Evaluator<'a> {
    base: &'a BaseModel,
    clf: &'a ClassifierWeights,
    protocol: EvalProtocol,
    before: IndexMap<String, ConceptSamples>,
    floor: IndexMap<String, f64>,
}

impl<'a> Evaluator<'a> {
    /// Fails when the classifier did not pass its gate.
    pub fn new(
        base: &'a BaseModel,
        clf: &'a ClassifierWeights,
        clf_report: &ClassifierReport,
        protocol: EvalProtocol,
    ) -> Result<Self> {
        clf_report.check_gate()?;
        protocol.validate()?;
        let mut ev = Self {
            base,
            clf,
            protocol,
            before: IndexMap::new(),
            floor: IndexMap::new(),
        };
        let concepts: Vec<String> = ev
            .protocol
            .concepts_erase
            .iter()
            .chain(&ev.protocol.concepts_preserve)
            .cloned()
            .collect();
        for c in concepts {
            if !ev.before.contains_key(&c) {
                let s = ev.samples(&base.weights, &c, "eval")?;
                ev.before.insert(c, s);
            }
        }
        for c in ev.protocol.concepts_erase.clone() {
            let other = ev.samples(&base.weights, &c, "floor")?;
            let f = frechet_distance(&ev.before[&c].features.pooled, &other.features.pooled)?;
            ev.floor.insert(c, f);
        }
        Ok(ev)
    }

    pub fn protocol(&self) -> &EvalProtocol {
        &self.protocol
    }

    pub fn before(&self, concept: &str) -> Option<&ConceptSamples> {
        self.before.get(concept)
    }

    pub fn noise_floor(&self) -> &IndexMap<String, f64> {
        &self.floor
    }

    /// Sample the protocol's images of `concept` from `weights`.
    pub fn samples(
        &self,
        weights: &DenoiserWeights,
        concept: &str,
        tag: &str,
    ) -> Result<ConceptSamples> {
        let c = Concept::from_token(concept)
            .ok_or_else(|| LabError::UnknownToken(concept.to_string()))?;
        let (prompts, seeds) = self.protocol.prompts_and_seeds(c, tag);
        let images = generate_with(
            weights,
            &self.base.vocab,
            &prompts,
            &seeds,
            &self.protocol.sampler,
        )?;
        let features = self.clf.features(&images)?;
        Ok(ConceptSamples { images, features })
    }

    fn score(&self, concept: &str, after: &ConceptSamples) -> Result<MetricSet> {
        let c = Concept::from_token(concept)
            .ok_or_else(|| LabError::UnknownToken(concept.to_string()))?;
        let before = &self.before[concept];
        Ok(MetricSet {
            fid_analog: frechet_distance(&after.features.pooled, &before.features.pooled)?,
            acc: accuracy(after.features.predictions(c.kind), c.index)?,
            lpips_analog: paired_cosine_distance(
                &after.features.spatial,
                &before.features.spatial,
            )?,
        })
    }

    /// Score every configured concept for each unlearned model (one per run).
    pub fn evaluate(&self, afters: &[&DenoiserWeights]) -> Result<EvalReport> {
        if afters.is_empty() {
            return Err(LabError::InvalidArgument(
                "no unlearned weights to evaluate".into(),
            ));
        }
        let sides = self
            .protocol
            .concepts_erase
            .iter()
            .map(|c| (c, Side::Erase))
            .chain(
                self.protocol
                    .concepts_preserve
                    .iter()
                    .map(|c| (c, Side::Preserve)),
            );
        let mut rows = Vec::new();
        for (concept, side) in sides {
            let c = Concept::from_token(concept).expect("validated concept");
            let baseline_acc =
                accuracy(self.before[concept].features.predictions(c.kind), c.index)?;
            let mut runs = Vec::with_capacity(afters.len());
            for w in afters {
                let after = self.samples(w, concept, "eval")?;
                runs.push(self.score(concept, &after)?);
            }
            let mean = MetricSet::mean(&runs);
            info!(concept = %concept, side = side.name(), acc = mean.acc, fid = mean.fid_analog, "evaluated");
            rows.push(ConceptRow {
                concept: concept.clone(),
                side,
                baseline_acc,
                runs,
                mean,
            });
        }
        let summary = summarize(&rows);
        Ok(EvalReport {
            protocol: self.protocol.clone(),
            rows,
            noise_floor: self.floor.clone(),
            summary,
        })
    }
}

fn summarize(rows: &[ConceptRow]) -> EvalSummary {
    let mean_of = |side: Side, f: &dyn Fn(&ConceptRow) -> f64| -> f64 {
        let v: Vec<f64> = rows.iter().filter(|r| r.side == side).map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    EvalSummary {
        erase_acc: mean_of(Side::Erase, &|r| r.mean.acc),
        erase_fid_analog: mean_of(Side::Erase, &|r| r.mean.fid_analog),
        erase_lpips_analog: mean_of(Side::Erase, &|r| r.mean.lpips_analog),
        preserve_acc: mean_of(Side::Preserve, &|r| r.mean.acc),
        preserve_acc_drop: mean_of(Side::Preserve, &|r| r.baseline_acc - r.mean.acc),
        preserve_fid_analog: mean_of(Side::Preserve, &|r| r.mean.fid_analog),
        preserve_lpips_analog: mean_of(Side::Preserve, &|r| r.mean.lpips_analog),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_for_concept_preserves_siblings() {
        let p = EvalProtocol::default().for_concept("circle").unwrap();
        assert_eq!(p.concepts_erase, vec!["circle"]);
        assert_eq!(p.concepts_preserve, vec!["square", "triangle", "cross"]);
        assert!(EvalProtocol::default().for_concept("nope").is_err());
    }

    #[test]
    fn metric_mean_is_arithmetic() {
        let a = MetricSet {
            fid_analog: 1.0,
            acc: 0.5,
            lpips_analog: 0.25,
        };
        let b = MetricSet {
            fid_analog: 3.0,
            acc: 0.0,
            lpips_analog: 0.75,
        };
        assert_eq!(
            MetricSet::mean(&[a, b]),
            MetricSet {
                fid_analog: 2.0,
                acc: 0.25,
                lpips_analog: 0.5
            }
        );
    }

    #[test]
    fn zero_counts_are_rejected() {
        let p = EvalProtocol {
            images_per_seed: 0,
            ..EvalProtocol::default()
        };
        assert!(p.validate().is_err());
    }
}

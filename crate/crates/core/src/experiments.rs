//! Packaged studies: anchor taxonomy, strategy ablation and the S sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::advanchor::AdvLossVariant;
use crate::config::SweepConfig;
use crate::error::{LabError, Result};
use crate::eval::metrics::spearman;
use crate::eval::{ClassifierReport, ClassifierWeights, EvalProtocol, EvalReport, Evaluator};
use crate::prompts::{anchor_similarity, AnchorSpec, AnchorTable};
use crate::rundir::write_csv;
use crate::unlearner::{run_unlearning, Strategy, UnlearnConfig, UnlearnResult};
use crate::weights::BaseModel;

/// Everything an experiment needs besides its configs.
pub struct Lab {
    pub base: BaseModel,
    pub clf: ClassifierWeights,
    pub clf_report: ClassifierReport,
    pub table: AnchorTable,
}

impl Lab {
    pub fn evaluator(&self, protocol: &EvalProtocol, concept: &str) -> Result<Evaluator<'_>> {
        Evaluator::new(
            &self.base,
            &self.clf,
            &self.clf_report,
            protocol.for_concept(concept)?,
        )
    }
}

/// Map `f` over `items` on up to `threads` threads; output order follows input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(
                h.join()
                    .map_err(|_| LabError::Numerical("worker thread panicked".into()))??,
            );
        }
        Ok(out)
    })
}

/// Run `cfg` once per seed and evaluate all runs together.
pub fn unlearn_runs(
    lab: &Lab,
    ev: &Evaluator,
    cfg: &UnlearnConfig,
    seeds: &[u64],
    parallel: usize,
) -> Result<(Vec<UnlearnResult>, EvalReport)> {
    let results = par_map(seeds, parallel, |&seed| {
        let c = UnlearnConfig {
            seed,
            ..cfg.clone()
        };
        run_unlearning(&lab.base, &lab.table, &c, None)
    })?;
    let afters: Vec<_> = results.iter().map(|r| &r.weights).collect();
    let report = ev.evaluate(&afters)?;
    Ok((results, report))
}

/// Seeds of `n` runs starting at `cfg.seed`.
pub fn run_seeds(cfg: &UnlearnConfig, n: usize) -> Vec<u64> {
    (0..n).map(|r| cfg.run_seed(r)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub erase_acc: f64,
    pub erase_fid_analog: f64,
    pub erase_lpips_analog: f64,
    pub preserve_acc: f64,
    pub preserve_acc_drop: f64,
    pub preserve_fid_analog: f64,
    pub preserve_lpips_analog: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        let s = &r.summary;
        Self {
            erase_acc: s.erase_acc,
            erase_fid_analog: s.erase_fid_analog,
            erase_lpips_analog: s.erase_lpips_analog,
            preserve_acc: s.preserve_acc,
            preserve_acc_drop: s.preserve_acc_drop,
            preserve_fid_analog: s.preserve_fid_analog,
            preserve_lpips_analog: s.preserve_lpips_analog,
        }
    }
}

// ---- anchor study ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRow {
    pub axis: String,
    pub spec: String,
    /// Cosine between the mean anchor embedding and the concept embedding.
    pub similarity: f64,
    pub replication: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorTrends {
    pub replication: usize,
    /// Spearman correlation between anchor similarity and preserve-ACC.
    pub o1_spearman: Option<f64>,
    /// Preserve-ACC at the longest prefix ≥ at prefix 0.
    pub o2_endpoint_nondecreasing: bool,
    /// Preserve-ACC non-decreasing across every prefix step.
    pub o2_monotone: bool,
    /// Exclusive erase-ACC minus inclusive erase-ACC.
    pub o3_erase_gap: f64,
    /// Exclusive preserve-ACC minus inclusive preserve-ACC.
    pub o3_preserve_gap: f64,
    pub o3_exclusive_wins: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorStudy {
    pub concept: String,
    pub rows: Vec<AnchorRow>,
    pub trends: Vec<AnchorTrends>,
}

/// The three sweep axes for `concept`.
pub fn anchor_axes(
    concept: &str,
    table: &AnchorTable,
    sweep: &SweepConfig,
) -> Result<Vec<(&'static str, Vec<AnchorSpec>)>> {
    let a = table.get(concept)?;
    let words = if sweep.word_anchors.is_empty() {
        vec![
            a.closest.clone(),
            a.imitated.clone(),
            a.parent.clone(),
            a.least_similar.clone(),
        ]
    } else {
        sweep.word_anchors.clone()
    };
    let prefix_word = if sweep.prefix_word.is_empty() {
        a.parent.clone()
    } else {
        sweep.prefix_word.clone()
    };
    let axes = vec![
        (
            "o1",
            words
                .into_iter()
                .map(|word| AnchorSpec::Word { word })
                .collect::<Vec<_>>(),
        ),
        (
            "o2",
            sweep
                .prefix_lengths
                .iter()
                .map(|&prefix_len| AnchorSpec::Long {
                    prefix_len,
                    word: prefix_word.clone(),
                })
                .collect(),
        ),
        (
            "o3",
            vec![
                AnchorSpec::DescInclusive { attributes: None },
                AnchorSpec::DescExclusive { attributes: None },
            ],
        ),
    ];
    for (axis, specs) in &axes {
        if specs.len() < 2 {
            return Err(LabError::Config(format!(
                "anchor axis {axis} needs at least two specs"
            )));
        }
    }
    Ok(axes)
}

/// One fixed-anchor run per spec and replication, each evaluated on its own.
pub fn ablate_anchors(
    lab: &Lab,
    cfg: &UnlearnConfig,
    protocol: &EvalProtocol,
    sweep: &SweepConfig,
    parallel: usize,
) -> Result<AnchorStudy> {
    let axes = anchor_axes(&cfg.concept, &lab.table, sweep)?;
    let ev = lab.evaluator(protocol, &cfg.concept)?;
    let mut jobs = Vec::new();
    for r in 0..sweep.replications {
        for (axis, specs) in &axes {
            for spec in specs {
                jobs.push((r, *axis, spec.clone()));
            }
        }
    }
    let rows = par_map(&jobs, parallel, |(r, axis, spec)| {
        let seed = cfg.run_seed(*r);
        let c = UnlearnConfig {
            anchor: spec.clone(),
            seed,
            ..cfg.clone()
        };
        let res = run_unlearning(&lab.base, &lab.table, &c, None)?;
        let report = ev.evaluate(&[&res.weights])?;
        let similarity = anchor_similarity(spec, &cfg.concept, &lab.base.vocab, &lab.table)?;
        info!(axis, spec = %spec.label(), replication = r, erase = report.summary.erase_acc, preserve = report.summary.preserve_acc, "anchor run");
        Ok(AnchorRow {
            axis: axis.to_string(),
            spec: spec.label(),
            similarity,
            replication: *r,
            seed,
            metrics: Metrics::from(&report),
        })
    })?;
    let trends = (0..sweep.replications)
        .map(|r| anchor_trends(&rows, r))
        .collect();
    Ok(AnchorStudy {
        concept: cfg.concept.clone(),
        rows,
        trends,
    })
}

fn anchor_trends(rows: &[AnchorRow], r: usize) -> AnchorTrends {
    let axis = |a: &str| -> Vec<&AnchorRow> {
        rows.iter()
            .filter(|x| x.axis == a && x.replication == r)
            .collect()
    };
    let o1 = axis("o1");
    let sims: Vec<f64> = o1.iter().map(|x| x.similarity).collect();
    let accs: Vec<f64> = o1.iter().map(|x| x.metrics.preserve_acc).collect();
    let o2: Vec<f64> = axis("o2").iter().map(|x| x.metrics.preserve_acc).collect();
    let o3 = axis("o3");
    let (inc, exc) = (&o3[0].metrics, &o3[1].metrics);
    let erase_gap = exc.erase_acc - inc.erase_acc;
    let preserve_gap = exc.preserve_acc - inc.preserve_acc;
    AnchorTrends {
        replication: r,
        o1_spearman: spearman(&sims, &accs),
        o2_endpoint_nondecreasing: o2.last() >= o2.first(),
        o2_monotone: o2.windows(2).all(|w| w[1] >= w[0]),
        o3_erase_gap: erase_gap,
        o3_preserve_gap: preserve_gap,
        o3_exclusive_wins: erase_gap < 0.0 && preserve_gap.abs() <= 0.05,
    }
}

// ---- strategy ablation and S sweep ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub variant: String,
    #[serde(rename = "S")]
    pub s: usize,
    pub runs: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub median_stop_iteration: f64,
    pub reached_fraction: f64,
    /// Inputs per inner-iteration count, `0..=S`, joined with `;`.
    pub stop_histogram: String,
    pub base_hash: String,
    pub finite: bool,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Table row for one configuration evaluated over several runs.
pub fn strategy_row(
    cfg: &UnlearnConfig,
    base_hash: &str,
    results: &[UnlearnResult],
    report: &EvalReport,
) -> StrategyRow {
    let mut iters: Vec<f64> = results
        .iter()
        .flat_map(|r| r.stops.iter().map(|s| s.record.iterations_used as f64))
        .collect();
    let n_stops = iters.len().max(1) as f64;
    let reached = results
        .iter()
        .flat_map(|r| &r.stops)
        .filter(|s| s.record.reached)
        .count() as f64
        / n_stops;
    let mut hist = vec![0usize; cfg.s + 1];
    for &i in &iters {
        hist[(i as usize).min(cfg.s)] += 1;
    }
    let finite = results
        .iter()
        .all(|r| r.loss_trace.iter().all(|l| l.total.is_finite()) && r.weights.all_finite());
    StrategyRow {
        strategy: cfg.strategy.name().into(),
        variant: cfg.loss_variant.name().into(),
        s: cfg.s,
        runs: results.len(),
        metrics: Metrics::from(report),
        median_stop_iteration: median(&mut iters),
        reached_fraction: reached,
        stop_histogram: hist
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";"),
        base_hash: base_hash.to_string(),
        finite,
    }
}

/// All strategies × both loss variants with shared seeds.
pub fn compare_strategies(
    lab: &Lab,
    cfg: &UnlearnConfig,
    protocol: &EvalProtocol,
    parallel: usize,
) -> Result<Vec<StrategyRow>> {
    let ev = lab.evaluator(protocol, &cfg.concept)?;
    let seeds = run_seeds(cfg, cfg.runs);
    let base_hash = lab.base.weights.content_hash();
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        for variant in [AdvLossVariant::V1, AdvLossVariant::V2] {
            let c = UnlearnConfig {
                strategy,
                loss_variant: variant,
                anchor: AnchorSpec::Adversarial,
                ..cfg.clone()
            };
            let (results, report) = unlearn_runs(lab, &ev, &c, &seeds, parallel)?;
            rows.push(strategy_row(&c, &base_hash, &results, &report));
        }
    }
    Ok(rows)
}

/// Alternating strategy over the S grid, both variants.
pub fn sweep_s(
    lab: &Lab,
    cfg: &UnlearnConfig,
    protocol: &EvalProtocol,
    grid: &[usize],
    parallel: usize,
) -> Result<Vec<StrategyRow>> {
    if grid.is_empty() {
        return Err(LabError::Config("empty S grid".into()));
    }
    let ev = lab.evaluator(protocol, &cfg.concept)?;
    let seeds = run_seeds(cfg, cfg.runs);
    let base_hash = lab.base.weights.content_hash();
    let mut rows = Vec::new();
    for &s in grid {
        for variant in [AdvLossVariant::V1, AdvLossVariant::V2] {
            let c = UnlearnConfig {
                s,
                strategy: Strategy::Alternating,
                loss_variant: variant,
                anchor: AnchorSpec::Adversarial,
                ..cfg.clone()
            };
            let (results, report) = unlearn_runs(lab, &ev, &c, &seeds, parallel)?;
            rows.push(strategy_row(&c, &base_hash, &results, &report));
        }
    }
    Ok(rows)
}

pub fn write_strategy_rows(path: &Path, rows: &[StrategyRow]) -> Result<()> {
    write_csv(path, rows, &["strategy"])
}

pub fn write_anchor_study(dir: &Path, study: &AnchorStudy) -> Result<()> {
    write_csv(&dir.join("anchors.csv"), &study.rows, &["axis"])?;
    write_csv(
        &dir.join("anchor_trends.csv"),
        &study.trends,
        &["replication"],
    )?;
    crate::rundir::write_json(&dir.join("anchors.json"), study)
}

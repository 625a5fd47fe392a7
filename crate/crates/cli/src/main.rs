mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advanchor_core::config::LabConfig;
use advanchor_core::data::generate_corpus;
use advanchor_core::eval::{train_classifier, ClassifierReport, ClassifierWeights, Evaluator};
use advanchor_core::experiments::{
    ablate_anchors, compare_strategies, run_seeds, sweep_s, write_anchor_study,
    write_strategy_rows, Lab,
};
use advanchor_core::rundir::{
    file_hash, list_runs, prepare_dir, read_json, read_unlearn_run, write_aggregate_manifest,
    write_json, write_text, write_unlearn_run,
};
use advanchor_core::train::train_base;
use advanchor_core::unlearner::run_unlearning;
use advanchor_core::weights::BaseModel;
use advanchor_core::{LabError, Result};
use clap::{Parser, Subcommand};
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(
    name = "advanchor",
    version,
    about = "Concept unlearning with adversarial anchors on a toy diffusion model"
)]
struct Cli {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; each command has its own default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the seed of the command's stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the number of independent runs (or anchor-study replications).
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
    /// Replace an existing output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base denoiser and token embeddings on the synthetic corpus.
    TrainBase,
    /// Fit the concept classifier on base-model samples and check its gate.
    TrainClassifier,
    /// Unlearn the configured concept from the base model.
    Unlearn,
    /// Score a finished unlearning run (or a multi-run directory).
    Evaluate { run_dir: PathBuf },
    /// Fixed-anchor study over similarity, shared prefix and attribute bags.
    AblateAnchors,
    /// Every strategy with both adversarial losses.
    CompareStrategies,
    /// Alternating strategy over the configured S grid.
    SweepS,
    /// Render PNG plots for the CSV files in a directory.
    Plot { dir: PathBuf },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<LabConfig> {
    let mut cfg = match &cli.config {
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.classifier.seed = seed;
        cfg.unlearn.seed = seed;
    }
    if let Some(runs) = cli.runs {
        cfg.unlearn.runs = runs;
        cfg.sweep.replications = runs;
    }
    if cli.parallel == 0 {
        return Err(LabError::Config("--parallel must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &Path) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| default.to_path_buf())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Plot { dir } => {
            for d in plot_targets(dir)? {
                for f in plot::plot_dir(&d)? {
                    info!(file = %f.display(), "plot written");
                }
            }
            Ok(())
        }
        Command::Evaluate { run_dir } => evaluate(cli, run_dir),
        Command::TrainBase => {
            let cfg = load_config(cli)?;
            train_base_cmd(cli, &cfg)
        }
        Command::TrainClassifier => {
            let cfg = load_config(cli)?;
            train_classifier_cmd(cli, &cfg)
        }
        Command::Unlearn => {
            let cfg = load_config(cli)?;
            unlearn(cli, &cfg)
        }
        Command::AblateAnchors => {
            let cfg = load_config(cli)?;
            let lab = load_lab(&cfg)?;
            let dir = out_dir(cli, Path::new("runs/ablate-anchors"));
            prepare_dir(&dir, cli.force)?;
            write_text(&dir.join("config.json"), &cfg.to_json()?)?;
            let study = ablate_anchors(&lab, &cfg.unlearn, &cfg.eval, &cfg.sweep, cli.parallel)?;
            write_anchor_study(&dir, &study)?;
            for t in &study.trends {
                info!(replication = t.replication, o1_spearman = ?t.o1_spearman, o2_monotone = t.o2_monotone, o3_exclusive_wins = t.o3_exclusive_wins, "anchor trends");
            }
            plot::plot_dir(&dir)?;
            Ok(())
        }
        Command::CompareStrategies => {
            let cfg = load_config(cli)?;
            let lab = load_lab(&cfg)?;
            let dir = out_dir(cli, Path::new("runs/compare-strategies"));
            prepare_dir(&dir, cli.force)?;
            write_text(&dir.join("config.json"), &cfg.to_json()?)?;
            let rows = compare_strategies(&lab, &cfg.unlearn, &cfg.eval, cli.parallel)?;
            write_strategy_rows(&dir.join("strategies.csv"), &rows)?;
            plot::plot_dir(&dir)?;
            Ok(())
        }
        Command::SweepS => {
            let cfg = load_config(cli)?;
            let lab = load_lab(&cfg)?;
            let dir = out_dir(cli, Path::new("runs/sweep-s"));
            prepare_dir(&dir, cli.force)?;
            write_text(&dir.join("config.json"), &cfg.to_json()?)?;
            let rows = sweep_s(
                &lab,
                &cfg.unlearn,
                &cfg.eval,
                &cfg.sweep.s_grid,
                cli.parallel,
            )?;
            write_strategy_rows(&dir.join("sweep_s.csv"), &rows)?;
            plot::plot_dir(&dir)?;
            Ok(())
        }
    }
}

fn train_base_cmd(cli: &Cli, cfg: &LabConfig) -> Result<()> {
    let dir = out_dir(cli, &cfg.paths.base);
    prepare_dir(&dir, cli.force)?;
    let corpus = generate_corpus(&cfg.data)?;
    info!(
        images = corpus.len(),
        steps = cfg.train.steps,
        "training base model"
    );
    let log_every = (cfg.train.steps / 20).max(1);
    let outcome = train_base(&corpus, &cfg.model, &cfg.train, |step, loss| {
        if step % log_every == 0 {
            info!(step, loss, "train");
        }
    })?;
    outcome.model.save(&dir)?;
    let mut trace = String::from("step,loss\n");
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{l}\n"));
    }
    write_text(&dir.join("train_loss.csv"), &trace)?;
    write_text(&dir.join("config.json"), &cfg.to_json()?)?;
    write_manifest(
        &dir,
        &[
            "config.json",
            "denoiser.safetensors",
            "denoiser.json",
            "vocab.json",
            "train_loss.csv",
        ],
    )
}

fn write_manifest(dir: &Path, files: &[&str]) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for f in files {
        hashes.insert(f.to_string(), file_hash(&dir.join(f))?);
    }
    write_json(&dir.join("manifest.json"), &hashes)
}

fn train_classifier_cmd(cli: &Cli, cfg: &LabConfig) -> Result<()> {
    let base = BaseModel::load(&cfg.paths.base)?;
    let dir = out_dir(cli, &cfg.paths.classifier);
    prepare_dir(&dir, cli.force)?;
    let (clf, report) = train_classifier(&base, &cfg.classifier)?;
    clf.save(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("config.json"), &cfg.to_json()?)?;
    write_manifest(
        &dir,
        &["config.json", "classifier.safetensors", "report.json"],
    )?;
    for (concept, acc) in &report.heldout_accuracy {
        info!(concept = %concept, acc, "held-out accuracy");
    }
    report.check_gate()
}

fn load_classifier(dir: &Path) -> Result<(ClassifierWeights, ClassifierReport)> {
    let clf = ClassifierWeights::load(dir)?;
    let report: ClassifierReport = read_json(&dir.join("report.json"))?;
    Ok((clf, report))
}

fn load_lab(cfg: &LabConfig) -> Result<Lab> {
    let base = BaseModel::load(&cfg.paths.base)?;
    let (clf, clf_report) = load_classifier(&cfg.paths.classifier)?;
    clf_report.check_gate()?;
    Ok(Lab {
        base,
        clf,
        clf_report,
        table: cfg.anchors.clone(),
    })
}

fn unlearn(cli: &Cli, cfg: &LabConfig) -> Result<()> {
    let base = BaseModel::load(&cfg.paths.base)?;
    let dir = out_dir(cli, Path::new("runs/unlearn"));
    prepare_dir(&dir, cli.force)?;
    let seeds = run_seeds(&cfg.unlearn, cfg.unlearn.runs);
    let single = seeds.len() == 1;
    let subdirs: Vec<String> = (0..seeds.len()).map(|i| format!("run_{i}")).collect();
    let jobs: Vec<(u64, PathBuf)> = seeds
        .iter()
        .zip(&subdirs)
        .map(|(&s, d)| (s, if single { dir.clone() } else { dir.join(d) }))
        .collect();
    advanchor_core::experiments::par_map(&jobs, cli.parallel, |(seed, d)| {
        let mut c = cfg.clone();
        c.unlearn.seed = *seed;
        c.unlearn.runs = 1;
        prepare_dir(d, true)?;
        let res = run_unlearning(&base, &cfg.anchors, &c.unlearn, None)?;
        info!(seed, secs = res.wall_clock_secs, median_stop = ?res.median_stop_iteration(), reached = ?res.reached_fraction(), "run finished");
        write_unlearn_run(d, &c, &base, &res)?;
        Ok(())
    })?;
    if !single {
        write_aggregate_manifest(&dir, &subdirs, &seeds)?;
    }
    Ok(())
}

fn evaluate(cli: &Cli, run_dir: &Path) -> Result<()> {
    let runs = list_runs(run_dir)?;
    let arts = runs
        .iter()
        .map(|d| read_unlearn_run(d))
        .collect::<Result<Vec<_>>>()?;
    let first = &arts[0];
    let cfg = match &cli.config {
        Some(_) => load_config(cli)?,
        None => first.config.clone(),
    };
    for a in &arts[1..] {
        if a.before.weights.content_hash() != first.before.weights.content_hash() {
            return Err(LabError::InvalidArgument(
                "sub-runs start from different base models".into(),
            ));
        }
    }
    let (clf, clf_report) = load_classifier(&cfg.paths.classifier)?;
    let protocol = cfg.eval.for_concept(&first.config.unlearn.concept)?;
    let ev = Evaluator::new(&first.before, &clf, &clf_report, protocol)?;
    let afters: Vec<_> = arts.iter().map(|a| &a.after).collect();
    let report = ev.evaluate(&afters)?;
    let dir = out_dir(cli, run_dir);
    if dir.join("report.csv").exists() && !cli.force {
        return Err(LabError::RunDirExists(dir));
    }
    std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    report.write(&dir)?;
    let s = &report.summary;
    info!(
        erase_acc = s.erase_acc,
        preserve_acc = s.preserve_acc,
        preserve_drop = s.preserve_acc_drop,
        "report written"
    );
    Ok(())
}

/// `dir` itself plus the sub-runs of an aggregate directory.
fn plot_targets(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(LabError::MissingArtifact(dir.to_path_buf()));
    }
    let mut out = vec![dir.to_path_buf()];
    if let Ok(runs) = list_runs(dir) {
        out.extend(runs.into_iter().filter(|r| r != dir));
    } else {
        warn!(dir = %dir.display(), "no manifest; plotting top-level CSVs only");
    }
    Ok(out)
}

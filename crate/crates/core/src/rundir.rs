//! Run directories: config echo, weights before/after, traces and a hash manifest.

use std::fs;
use std::path::{Path, PathBuf};

use advanchor_grad::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::LabConfig;
use crate::error::{LabError, Result};
use crate::unlearner::UnlearnResult;
use crate::weights::{
    load_weights, read_archive, save_weights, write_archive, BaseModel, DenoiserWeights,
};

/// SHA-256 object id of `bytes` as git computes it for a blob.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(git_blob_hash(
        &fs::read(path).map_err(|e| LabError::io(path, e))?,
    ))
}

/// Create `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists()
        && fs::read_dir(dir)
            .map_err(|e| LabError::io(dir, e))?
            .next()
            .is_some();
    if occupied {
        if !force {
            return Err(LabError::RunDirExists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_str(
        &fs::read_to_string(path).map_err(|e| LabError::io(path, e))?,
    )?)
}

/// Serialize records as CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| LabError::Serde(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub concept: String,
    pub seed: u64,
    /// Hashes of the base checkpoint and config that produced the run.
    pub inputs: IndexMap<String, String>,
    /// Hash of every file written, by relative path.
    pub outputs: IndexMap<String, String>,
    pub theta_ori_hash: String,
    pub frozen_hash: String,
}

const OUTPUT_FILES: [&str; 11] = [
    "config.json",
    "before/denoiser.safetensors",
    "before/denoiser.json",
    "before/vocab.json",
    "after/denoiser.safetensors",
    "after/denoiser.json",
    "loss_trace.csv",
    "anchor_trace.csv",
    "stops.json",
    "e_adv.safetensors",
    "e_adv.json",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PerturbationMeta {
    dim: usize,
    init_scale: f64,
    lr: f64,
    variant: String,
    norm: f64,
}

/// Persist one unlearning run into a prepared directory.
pub fn write_unlearn_run(
    dir: &Path,
    lab: &LabConfig,
    base: &BaseModel,
    result: &UnlearnResult,
) -> Result<RunManifest> {
    let mut echo = lab.clone();
    echo.unlearn = result.config.clone();
    write_text(&dir.join("config.json"), &echo.to_json()?)?;
    base.save(&dir.join("before"))?;
    save_weights(&result.weights, &dir.join("after"), "denoiser")?;
    write_csv(
        &dir.join("loss_trace.csv"),
        &result.loss_trace,
        &["step", "input", "l_op", "l_reg", "total"],
    )?;
    write_csv(
        &dir.join("anchor_trace.csv"),
        &result.anchor_trace,
        &[
            "visit",
            "input",
            "iteration",
            "value",
            "stepped",
            "e_adv_norm",
            "fingerprint",
        ],
    )?;
    write_json(&dir.join("stops.json"), &result.stops)?;
    if let Some(e) = &result.e_adv {
        let t = Tensor::new(vec![e.len()], e.clone());
        write_archive(&dir.join("e_adv.safetensors"), [("e_adv", &t)])?;
        write_json(
            &dir.join("e_adv.json"),
            &PerturbationMeta {
                dim: e.len(),
                init_scale: result.config.init_scale,
                lr: result.config.lr_adv,
                variant: result.config.loss_variant.name().into(),
                norm: e.iter().map(|v| v * v).sum::<f64>().sqrt(),
            },
        )?;
    }
    let mut inputs = IndexMap::new();
    inputs.insert("base_denoiser".into(), base.weights.content_hash());
    inputs.insert(
        "vocab".into(),
        git_blob_hash(base.vocab.to_json()?.as_bytes()),
    );
    inputs.insert("config".into(), file_hash(&dir.join("config.json"))?);
    let mut outputs = IndexMap::new();
    for f in OUTPUT_FILES {
        let p = dir.join(f);
        if p.exists() {
            outputs.insert(f.to_string(), file_hash(&p)?);
        }
    }
    let manifest = RunManifest {
        concept: result.config.concept.clone(),
        seed: result.config.seed,
        inputs,
        outputs,
        theta_ori_hash: result.theta_ori_hash.clone(),
        frozen_hash: result.frozen_hash.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Weights and config of a completed run.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: LabConfig,
    /// The base model the run started from, vocabulary included.
    pub before: BaseModel,
    pub after: DenoiserWeights,
    pub e_adv: Option<Vec<f64>>,
}

pub fn read_unlearn_run(dir: &Path) -> Result<RunArtifacts> {
    let config = LabConfig::load(&dir.join("config.json"))?;
    let before = BaseModel::load(&dir.join("before"))?;
    let after = load_weights(&dir.join("after"), "denoiser")?;
    let p = dir.join("e_adv.safetensors");
    let e_adv = if p.exists() {
        read_archive(&p)?
            .swap_remove("e_adv")
            .map(|t| t.into_data())
    } else {
        None
    };
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        config,
        before,
        after,
        e_adv,
    })
}

/// Manifest of a multi-run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateManifest {
    pub runs: Vec<String>,
    pub seeds: Vec<u64>,
    /// Hash of each sub-run's manifest.
    pub manifests: IndexMap<String, String>,
}

pub fn write_aggregate_manifest(
    dir: &Path,
    subdirs: &[String],
    seeds: &[u64],
) -> Result<AggregateManifest> {
    let mut manifests = IndexMap::new();
    for s in subdirs {
        manifests.insert(s.clone(), file_hash(&dir.join(s).join("manifest.json"))?);
    }
    let m = AggregateManifest {
        runs: subdirs.to_vec(),
        seeds: seeds.to_vec(),
        manifests,
    };
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(m)
}

/// Run directories under `dir`: the sub-runs of an aggregate, or `dir` itself.
pub fn list_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let agg = dir.join("manifest.json");
    if !agg.exists() {
        return Err(LabError::MissingArtifact(agg));
    }
    if dir.join("after").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let m: AggregateManifest = read_json(&agg)?;
    Ok(m.runs.iter().map(|r| dir.join(r)).collect())
}

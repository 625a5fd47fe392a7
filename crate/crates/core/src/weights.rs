//! Named denoiser parameters, cross-attention tags and checkpoint I/O.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use advanchor_grad::Tensor;
use indexmap::IndexMap;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::ModelConfig;
use crate::error::{LabError, Result};
use crate::prompts::Vocabulary;

const XATTN_PROJECTIONS: [&str; 4] = ["to_q", "to_k", "to_v", "to_out"];

/// Whether a parameter belongs to a cross-attention projection. Depends on the name only.
pub fn is_cross_attention(name: &str) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    parts.contains(&"xattn") && parts.iter().any(|p| XATTN_PROJECTIONS.contains(p))
}

/// Ordered named parameters of one denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    config: ModelConfig,
    params: IndexMap<String, Tensor<f64>>,
}

impl DenoiserWeights {
    pub fn new(config: ModelConfig, params: IndexMap<String, Tensor<f64>>) -> Result<Self> {
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(LabError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| LabError::InvalidArgument(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(LabError::ShapeMismatch {
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if !params.keys().any(|k| is_cross_attention(k)) {
            return Err(LabError::InvalidArgument(
                "no cross-attention parameters".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f64>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn cross_attention_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| is_cross_attention(k))
            .cloned()
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }

    /// SHA-256 over names, shapes and little-endian values of the selected parameters.
    pub fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            if !keep(name) {
                continue;
            }
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn content_hash(&self) -> String {
        self.hash_where(|_| true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub cross_attention: bool,
}

/// JSON side-car of a weight archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub sha256: String,
}

fn f64_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Write named f64 tensors as a safetensors archive.
pub fn write_archive<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f64>)>,
) -> Result<()> {
    let items: Vec<(&str, &Tensor<f64>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(n, t)| (n, t, f64_bytes(t.data())))
        .collect();
    let views = items
        .iter()
        .map(|(n, t, b)| {
            TensorView::new(Dtype::F64, t.shape().to_vec(), b)
                .map(|v| (n.to_string(), v))
                .map_err(|e| LabError::Serde(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let blob = safetensors::serialize(views, &None).map_err(|e| LabError::Serde(e.to_string()))?;
    fs::write(path, blob).map_err(|e| LabError::io(path, e))
}

/// Read every tensor of a safetensors archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<IndexMap<String, Tensor<f64>>> {
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.to_path_buf()));
    }
    let blob = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let st = SafeTensors::deserialize(&blob).map_err(|e| LabError::Serde(e.to_string()))?;
    let mut out = IndexMap::new();
    let mut names = st.names();
    names.sort();
    for name in names {
        let view = st
            .tensor(name)
            .map_err(|e| LabError::Serde(format!("{name}: {e}")))?;
        if view.dtype() != Dtype::F64 {
            return Err(LabError::Serde(format!("{name}: expected f64 data")));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.insert(name.to_string(), Tensor::new(view.shape().to_vec(), data));
    }
    Ok(out)
}

/// Write `<stem>.safetensors` and `<stem>.json` into `dir`.
pub fn save_weights(weights: &DenoiserWeights, dir: &Path, stem: &str) -> Result<WeightManifest> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    write_archive(&dir.join(format!("{stem}.safetensors")), weights.iter())?;
    let manifest = WeightManifest {
        model: weights.config().clone(),
        params: weights
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                cross_attention: is_cross_attention(n),
            })
            .collect(),
        sha256: weights.content_hash(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| LabError::io(&json_path, e))?;
    Ok(manifest)
}

pub fn load_weights(dir: &Path, stem: &str) -> Result<DenoiserWeights> {
    let json_path = dir.join(format!("{stem}.json"));
    let st_path = dir.join(format!("{stem}.safetensors"));
    if !json_path.exists() {
        return Err(LabError::MissingArtifact(json_path));
    }
    let manifest: WeightManifest = serde_json::from_str(
        &fs::read_to_string(&json_path).map_err(|e| LabError::io(&json_path, e))?,
    )?;
    let mut stored = read_archive(&st_path)?;
    let mut params = IndexMap::new();
    for entry in &manifest.params {
        let t = stored
            .swap_remove(&entry.name)
            .ok_or_else(|| LabError::Serde(format!("{}: missing from archive", entry.name)))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(LabError::Serde(format!("{}: unexpected shape", entry.name)));
        }
        params.insert(entry.name.clone(), t);
    }
    let w = DenoiserWeights::new(manifest.model, params)?;
    if w.content_hash() != manifest.sha256 {
        return Err(LabError::Serde(format!(
            "{}: content hash mismatch",
            st_path.display()
        )));
    }
    Ok(w)
}

/// A trained text-to-image model: denoiser weights plus the frozen vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub weights: DenoiserWeights,
    pub vocab: Vocabulary,
}

impl BaseModel {
    pub fn save(&self, dir: &Path) -> Result<HashMap<String, String>> {
        let m = save_weights(&self.weights, dir, "denoiser")?;
        let vpath = dir.join("vocab.json");
        let vjson = self.vocab.to_json()?;
        fs::write(&vpath, &vjson).map_err(|e| LabError::io(&vpath, e))?;
        let mut hashes = HashMap::new();
        hashes.insert("denoiser".to_string(), m.sha256);
        hashes.insert(
            "vocab".to_string(),
            hex::encode(Sha256::digest(vjson.as_bytes())),
        );
        Ok(hashes)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let weights = load_weights(dir, "denoiser")?;
        let vpath = dir.join("vocab.json");
        if !vpath.exists() {
            return Err(LabError::MissingArtifact(vpath));
        }
        let vocab = Vocabulary::from_json(
            &fs::read_to_string(&vpath).map_err(|e| LabError::io(&vpath, e))?,
        )?;
        if vocab.dim() != weights.config().embed_dim {
            return Err(LabError::ShapeMismatch {
                expected: vec![vocab.len(), weights.config().embed_dim],
                got: vocab.table().shape().to_vec(),
            });
        }
        Ok(Self { weights, vocab })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tags_follow_names() {
        assert!(is_cross_attention("enc1.xattn.to_q.w"));
        assert!(is_cross_attention("dec1.xattn.to_out.b"));
        assert!(!is_cross_attention("enc1.xattn.norm.g"));
        assert!(!is_cross_attention("enc1.res.conv1.w"));
        assert!(!is_cross_attention("to_q"));
    }

    #[test]
    fn default_model_has_three_cross_attention_blocks() {
        let w = ModelConfig::default()
            .init_weights(&mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let names = w.cross_attention_names();
        assert_eq!(names.len(), 15);
        for blk in ["enc1", "enc2", "dec1"] {
            assert_eq!(names.iter().filter(|n| n.starts_with(blk)).count(), 5);
        }
    }

    #[test]
    fn archive_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelConfig::default()
            .init_weights(&mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let m = save_weights(&w, dir.path(), "w").unwrap();
        let back = load_weights(dir.path(), "w").unwrap();
        assert_eq!(back, w);
        assert_eq!(m.sha256, back.content_hash());
        assert!(m.params.iter().any(|p| p.cross_attention));
    }

    #[test]
    fn missing_archive_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_weights(dir.path(), "nope"),
            Err(LabError::MissingArtifact(_))
        ));
    }
}

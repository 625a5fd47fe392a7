//! Token vocabulary, prompt embeddings and the anchor taxonomy.

use std::collections::HashMap;

use advanchor_grad::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Concept, ConceptKind, PALETTES, SHAPES, STYLES, TEXTURES};
use crate::error::{LabError, Result};

pub const EMPTY_TOKEN: &str = "<empty>";
pub const GENERIC_TOKENS: [&str; 5] = ["a", "picture", "of", "painting", "thing"];
pub const FILLER_TOKENS: [&str; 8] = [
    "an", "artwork", "made", "with", "careful", "clean", "simple", "strokes",
];

/// Template with a single concept slot, used by `mask` anchors.
pub const MASK_TEMPLATE: [&str; 4] = ["a", "picture", "of", MASK_SLOT];
const MASK_SLOT: &str = "{}";

/// Default token list: styles, shapes, attributes, generic words, fillers, empty.
pub fn default_tokens() -> Vec<String> {
    STYLES
        .iter()
        .chain(SHAPES.iter())
        .chain(PALETTES.iter())
        .chain(TEXTURES.iter())
        .chain(GENERIC_TOKENS.iter())
        .chain(FILLER_TOKENS.iter())
        .chain(std::iter::once(&EMPTY_TOKEN))
        .map(|s| s.to_string())
        .collect()
}

/// Ordered tokens and their embedding rows `(V, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    table: Tensor<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    tokens: Vec<String>,
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, table: Tensor<f64>) -> Result<Self> {
        if table.rank() != 2 || table.dim(0) != tokens.len() || table.dim(1) == 0 {
            return Err(LabError::ShapeMismatch {
                expected: vec![tokens.len(), table.shape().get(1).copied().unwrap_or(0)],
                got: table.shape().to_vec(),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LabError::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        if !index.contains_key(EMPTY_TOKEN) {
            return Err(LabError::InvalidArgument(format!(
                "vocabulary lacks the empty token `{EMPTY_TOKEN}`"
            )));
        }
        Ok(Self {
            tokens,
            index,
            table,
        })
    }

    /// Default tokens with Gaussian rows of the given std.
    pub fn random(dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let tokens = default_tokens();
        let normal = Normal::new(0.0, std).expect("finite std");
        let table = Tensor::from_fn(&[tokens.len(), dim], |_| normal.sample(rng));
        Self::new(tokens, table).expect("default vocabulary is well formed")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.dim(1)
    }

    pub fn table(&self) -> &Tensor<f64> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor<f64> {
        &mut self.table
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| LabError::UnknownToken(token.to_string()))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn embedding(&self, token: &str) -> Result<&[f64]> {
        let d = self.dim();
        let i = self.id(token)?;
        Ok(&self.table.data()[i * d..(i + 1) * d])
    }

    pub fn to_json(&self) -> Result<String> {
        let d = self.dim();
        let file = VocabularyFile {
            tokens: self.tokens.clone(),
            dim: d,
            embeddings: self.table.data().chunks(d).map(|r| r.to_vec()).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(s)?;
        if file.embeddings.iter().any(|r| r.len() != file.dim) {
            return Err(LabError::Serde("ragged embedding rows".into()));
        }
        let data = file.embeddings.into_iter().flatten().collect();
        Self::new(
            file.tokens.clone(),
            Tensor::new(vec![file.tokens.len(), file.dim], data),
        )
    }
}

/// Embedded prompt plus the positions holding the concept token.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<String>,
    /// `(L, d)`.
    pub vectors: Tensor<f64>,
    pub concept_mask: Vec<bool>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1)
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.item(i)
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.concept_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }
}

/// Look up each token's row; mark positions equal to `concept`.
pub fn embed_prompt<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    concept: &str,
) -> Result<PromptEmbedding> {
    if tokens.is_empty() {
        return Err(LabError::InvalidArgument("empty token sequence".into()));
    }
    let d = vocab.dim();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for t in tokens {
        data.extend_from_slice(vocab.embedding(t.as_ref())?);
    }
    Ok(PromptEmbedding {
        tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        vectors: Tensor::new(vec![tokens.len(), d], data),
        concept_mask: tokens.iter().map(|t| t.as_ref() == concept).collect(),
    })
}

/// The empty prompt `[<empty>]`.
pub fn empty_prompt(vocab: &Vocabulary) -> Result<PromptEmbedding> {
    embed_prompt(&[EMPTY_TOKEN], vocab, EMPTY_TOKEN).map(|mut p| {
        p.concept_mask = vec![false];
        p
    })
}

/// Per-concept analog tokens and attribute declarations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptAnchors {
    pub closest: String,
    pub imitated: String,
    pub parent: String,
    pub least_similar: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub defining_attributes: Vec<String>,
}

/// Static anchor table keyed by concept token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorTable(pub IndexMap<String, ConceptAnchors>);

impl AnchorTable {
    pub fn get(&self, concept: &str) -> Result<&ConceptAnchors> {
        self.0
            .get(concept)
            .ok_or_else(|| LabError::Config(format!("anchor table has no entry for `{concept}`")))
    }

    /// Check every referenced token against `vocab`.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (concept, a) in &self.0 {
            let refs = [
                concept,
                &a.closest,
                &a.imitated,
                &a.parent,
                &a.least_similar,
            ];
            for t in refs
                .into_iter()
                .chain(&a.attributes)
                .chain(&a.defining_attributes)
            {
                vocab.id(t)?;
            }
            if let Some(d) = a
                .defining_attributes
                .iter()
                .find(|d| !a.attributes.contains(d))
            {
                return Err(LabError::Config(format!(
                    "`{concept}`: defining attribute `{d}` is not among its attributes"
                )));
            }
        }
        Ok(())
    }
}

impl Default for AnchorTable {
    fn default() -> Self {
        let mut m = IndexMap::new();
        // (concept, closest, imitated, least_similar)
        let styles = [
            ("style_A", "style_B", "style_C", "style_F"),
            ("style_B", "style_A", "style_D", "style_E"),
            ("style_C", "style_D", "style_A", "style_F"),
            ("style_D", "style_C", "style_B", "style_E"),
            ("style_E", "style_F", "style_C", "style_B"),
            ("style_F", "style_E", "style_D", "style_A"),
        ];
        for (i, (c, close, imit, least)) in styles.into_iter().enumerate() {
            let (p, t) = crate::data::style_attributes(i);
            m.insert(
                c.to_string(),
                ConceptAnchors {
                    closest: close.into(),
                    imitated: imit.into(),
                    parent: "painting".into(),
                    least_similar: least.into(),
                    attributes: vec![PALETTES[p].into(), TEXTURES[t].into()],
                    defining_attributes: vec![PALETTES[p].into()],
                },
            );
        }
        let shapes = [
            ("circle", "square", "triangle", "cross"),
            ("square", "circle", "cross", "triangle"),
            ("triangle", "square", "circle", "cross"),
            ("cross", "square", "triangle", "circle"),
        ];
        for (c, close, imit, least) in shapes {
            m.insert(
                c.to_string(),
                ConceptAnchors {
                    closest: close.into(),
                    imitated: imit.into(),
                    parent: "thing".into(),
                    least_similar: least.into(),
                    attributes: vec![],
                    defining_attributes: vec![],
                },
            );
        }
        AnchorTable(m)
    }
}

/// How the anchor prompt is built from the concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnchorSpec {
    Word {
        word: String,
    },
    Mask {
        word: String,
    },
    Long {
        prefix_len: usize,
        word: String,
    },
    /// Attribute bag; defaults to the concept's declared attributes.
    DescInclusive {
        #[serde(default)]
        attributes: Option<Vec<String>>,
    },
    /// Attribute bag minus the concept's defining attributes.
    DescExclusive {
        #[serde(default)]
        attributes: Option<Vec<String>>,
    },
    Adversarial,
}

impl AnchorSpec {
    pub fn label(&self) -> String {
        match self {
            AnchorSpec::Word { word } => format!("word:{word}"),
            AnchorSpec::Mask { word } => format!("mask:{word}"),
            AnchorSpec::Long { prefix_len, word } => format!("long{prefix_len}:{word}"),
            AnchorSpec::DescInclusive { .. } => "desc_inclusive".into(),
            AnchorSpec::DescExclusive { .. } => "desc_exclusive".into(),
            AnchorSpec::Adversarial => "adversarial".into(),
        }
    }
}

fn mask_fill(word: &str) -> Vec<String> {
    MASK_TEMPLATE
        .iter()
        .map(|t| if *t == MASK_SLOT { word } else { t }.to_string())
        .collect()
}

fn long_prefix(prefix_len: usize) -> Result<Vec<String>> {
    if prefix_len > FILLER_TOKENS.len() {
        return Err(LabError::InvalidArgument(format!(
            "prefix length {prefix_len} exceeds the {} available fillers",
            FILLER_TOKENS.len()
        )));
    }
    Ok(FILLER_TOKENS[..prefix_len]
        .iter()
        .map(|s| s.to_string())
        .collect())
}

fn desc_attributes(
    attributes: &Option<Vec<String>>,
    concept: &str,
    table: &AnchorTable,
) -> Result<Vec<String>> {
    match attributes {
        Some(a) => Ok(a.clone()),
        None => Ok(table.get(concept)?.attributes.clone()),
    }
}

/// Anchor prompt tokens for `spec`. `Adversarial` has no fixed token form.
pub fn build_anchor_prompt(
    spec: &AnchorSpec,
    concept: &str,
    vocab: &Vocabulary,
    table: &AnchorTable,
) -> Result<Vec<String>> {
    vocab.id(concept)?;
    let tokens = match spec {
        AnchorSpec::Word { word } => vec![word.clone()],
        AnchorSpec::Mask { word } => mask_fill(word),
        AnchorSpec::Long { prefix_len, word } => {
            let mut t = long_prefix(*prefix_len)?;
            t.push(word.clone());
            t
        }
        AnchorSpec::DescInclusive { attributes } => desc_attributes(attributes, concept, table)?,
        AnchorSpec::DescExclusive { attributes } => {
            let defining = &table.get(concept)?.defining_attributes;
            desc_attributes(attributes, concept, table)?
                .into_iter()
                .filter(|a| !defining.contains(a))
                .collect()
        }
        AnchorSpec::Adversarial => {
            return Err(LabError::InvalidArgument(
                "adversarial anchors are derived from embeddings, not tokens".into(),
            ))
        }
    };
    for t in &tokens {
        vocab.id(t)?;
    }
    if tokens.is_empty() {
        // An empty attribute bag anchors to the unconditional prompt.
        return Ok(vec![EMPTY_TOKEN.to_string()]);
    }
    Ok(tokens)
}

/// The undesirable prompt paired with a fixed anchor: `[c_u]`, the mask template, or the
/// shared prefix followed by `c_u`.
pub fn paired_source_prompt(spec: &AnchorSpec, concept: &str) -> Result<Vec<String>> {
    Ok(match spec {
        AnchorSpec::Mask { .. } => mask_fill(concept),
        AnchorSpec::Long { prefix_len, .. } => {
            let mut t = long_prefix(*prefix_len)?;
            t.push(concept.to_string());
            t
        }
        _ => vec![concept.to_string()],
    })
}

/// Positions where a fixed anchor may differ from its paired source prompt.
pub fn declared_slots(
    spec: &AnchorSpec,
    source: &[String],
    anchor: &[String],
    concept: &str,
) -> Vec<usize> {
    let n = source.len().max(anchor.len());
    match spec {
        AnchorSpec::DescInclusive { .. } | AnchorSpec::DescExclusive { .. } => (0..n).collect(),
        _ => (0..n)
            .filter(|&i| source.get(i).map(|t| t == concept).unwrap_or(true))
            .collect(),
    }
}

/// The `a <style> <shape>` prompt.
pub fn concept_prompt(style: usize, shape: usize) -> Vec<String> {
    vec!["a".into(), STYLES[style].into(), SHAPES[shape].into()]
}

/// Prompts containing `concept`, cycling the other axis: the `k`-th one pairs it with
/// sibling index `k mod n`.
pub fn concept_prompt_cycle(concept: Concept, k: usize) -> Vec<String> {
    match concept.kind {
        ConceptKind::Style => concept_prompt(concept.index, k % SHAPES.len()),
        ConceptKind::Shape => concept_prompt(k % STYLES.len(), concept.index),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine between an anchor's mean token embedding and the concept embedding.
pub fn anchor_similarity(
    spec: &AnchorSpec,
    concept: &str,
    vocab: &Vocabulary,
    table: &AnchorTable,
) -> Result<f64> {
    let tokens = build_anchor_prompt(spec, concept, vocab, table)?;
    let d = vocab.dim();
    let mut mean = vec![0.0; d];
    for t in &tokens {
        for (m, v) in mean.iter_mut().zip(vocab.embedding(t)?) {
            *m += v / tokens.len() as f64;
        }
    }
    Ok(cosine(&mean, vocab.embedding(concept)?))
}

/// Specs sorted by [`anchor_similarity`], descending; ties keep input order.
pub fn anchor_similarity_rank(
    specs: &[AnchorSpec],
    concept: &str,
    vocab: &Vocabulary,
    table: &AnchorTable,
) -> Result<Vec<(AnchorSpec, f64)>> {
    if specs.len() < 2 {
        return Err(LabError::InvalidArgument(
            "similarity ranking needs at least two specs".into(),
        ));
    }
    let mut scored = specs
        .iter()
        .map(|s| Ok((s.clone(), anchor_similarity(s, concept, vocab, table)?)))
        .collect::<Result<Vec<_>>>()?;
    // Stable sort keeps declaration order among equal scores.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(scored)
}

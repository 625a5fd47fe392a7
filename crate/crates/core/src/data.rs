//! Synthetic labeled corpus: six palette/texture styles × four shapes on 16×16 RGB.
//!
//! Striped styles draw horizontal two-pixel bands across the background; the shape
//! itself is always solid so its silhouette stays readable.

use std::fs;
use std::path::Path;

use advanchor_grad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 16;
pub const IMAGE_SHAPE: [usize; 3] = [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE];

pub const STYLES: [&str; 6] = [
    "style_A", "style_B", "style_C", "style_D", "style_E", "style_F",
];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const PALETTES: [&str; 3] = ["warm", "cool", "verdant"];
pub const TEXTURES: [&str; 2] = ["striped", "plain"];

/// Palette and texture index of each style: A=(warm, striped), B=(warm, plain), ...
pub fn style_attributes(style: usize) -> (usize, usize) {
    (style / 2, style % 2)
}

pub fn style_from_attributes(palette: usize, texture: usize) -> usize {
    palette * 2 + texture
}

/// Foreground and background RGB in [0, 1] for each palette.
const PALETTE_RGB: [([f64; 3], [f64; 3]); 3] = [
    ([0.95, 0.45, 0.10], [0.35, 0.06, 0.05]),
    ([0.20, 0.55, 0.95], [0.04, 0.10, 0.35]),
    ([0.40, 0.90, 0.25], [0.05, 0.28, 0.10]),
];

/// Kind of concept a token names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Style,
    Shape,
}

/// A style or shape concept, by index into [`STYLES`] / [`SHAPES`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Concept {
    pub kind: ConceptKind,
    pub index: usize,
}

impl Concept {
    pub fn from_token(token: &str) -> Option<Self> {
        if let Some(i) = STYLES.iter().position(|s| *s == token) {
            return Some(Concept {
                kind: ConceptKind::Style,
                index: i,
            });
        }
        SHAPES.iter().position(|s| *s == token).map(|i| Concept {
            kind: ConceptKind::Shape,
            index: i,
        })
    }

    pub fn token(&self) -> &'static str {
        match self.kind {
            ConceptKind::Style => STYLES[self.index],
            ConceptKind::Shape => SHAPES[self.index],
        }
    }

    /// All concepts of the same kind, in declaration order.
    pub fn siblings(&self) -> Vec<Concept> {
        let n = match self.kind {
            ConceptKind::Style => STYLES.len(),
            ConceptKind::Shape => SHAPES.len(),
        };
        (0..n)
            .map(|index| Concept {
                kind: self.kind,
                index,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub style: usize,
    pub shape: usize,
    /// `(3, 16, 16)` in [-1, 1].
    pub pixels: Tensor<f64>,
}

impl LabeledImage {
    pub fn label_of(&self, kind: ConceptKind) -> usize {
        match kind {
            ConceptKind::Style => self.style,
            ConceptKind::Shape => self.shape,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Images rendered per (style, shape) pair.
    pub images_per_concept: usize,
    pub seed: u64,
    /// Max absolute shift of the shape center, in pixels.
    #[serde(default = "default_jitter")]
    pub position_jitter: f64,
    /// Max absolute per-channel color perturbation.
    #[serde(default = "default_color_jitter")]
    pub color_jitter: f64,
}

fn default_jitter() -> f64 {
    1.0
}

fn default_color_jitter() -> f64 {
    0.05
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            images_per_concept: 48,
            seed: 17,
            position_jitter: default_jitter(),
            color_jitter: default_color_jitter(),
        }
    }
}

fn inside(shape: usize, dx: f64, dy: f64, size: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= (5.0 * size).powi(2),
        1 => dx.abs() <= 4.8 * size && dy.abs() <= 4.8 * size,
        2 => {
            let top = -5.2 * size;
            let bottom = 4.6 * size;
            dy >= top && dy <= bottom && dx.abs() <= (dy - top) * 0.6
        }
        _ => {
            let (arm, half) = (1.7 * size, 5.6 * size);
            (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
        }
    }
}

/// Render one image of `(style, shape)` with random jitter drawn from `rng`.
pub fn render(style: usize, shape: usize, cfg: &DataConfig, rng: &mut impl Rng) -> Tensor<f64> {
    let (palette, texture) = style_attributes(style);
    let (fg0, bg0) = PALETTE_RGB[palette];
    let mut jitter = |c: [f64; 3]| -> [f64; 3] {
        let mut out = c;
        for v in &mut out {
            *v = (*v + rng.gen_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0);
        }
        out
    };
    let fg = jitter(fg0);
    let bg = jitter(bg0);
    let pj = cfg.position_jitter;
    let cx = 8.0
        + if pj > 0.0 {
            rng.gen_range(-pj..=pj)
        } else {
            0.0
        };
    let cy = 8.0
        + if pj > 0.0 {
            rng.gen_range(-pj..=pj)
        } else {
            0.0
        };
    let size = rng.gen_range(0.92..=1.05);
    let n = IMAGE_SIZE;
    let mut px = vec![0.0; IMAGE_CHANNELS * n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let stripe = texture == 0 && (y / 2) % 2 == 1;
            let color = if inside(shape, dx, dy, size) {
                fg
            } else if stripe {
                [0, 1, 2].map(|c| 0.6 * bg[c] + 0.4 * fg[c])
            } else {
                bg
            };
            for c in 0..IMAGE_CHANNELS {
                px[(c * n + y) * n + x] = color[c] * 2.0 - 1.0;
            }
        }
    }
    Tensor::new(IMAGE_SHAPE.to_vec(), px)
}

/// Deterministic corpus covering every (style, shape) pair.
pub fn generate_corpus(cfg: &DataConfig) -> Result<Vec<LabeledImage>> {
    if cfg.images_per_concept == 0 {
        return Err(LabError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(STYLES.len() * SHAPES.len() * cfg.images_per_concept);
    for style in 0..STYLES.len() {
        for shape in 0..SHAPES.len() {
            for _ in 0..cfg.images_per_concept {
                out.push(LabeledImage {
                    style,
                    shape,
                    pixels: render(style, shape, cfg, &mut rng),
                });
            }
        }
    }
    Ok(out)
}

/// Check that every (style, shape) pair has at least one image.
pub fn check_coverage(corpus: &[LabeledImage]) -> Result<()> {
    if corpus.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let mut seen = [[false; 4]; 6];
    for img in corpus {
        if img.style >= STYLES.len() || img.shape >= SHAPES.len() {
            return Err(LabError::InvalidArgument(format!(
                "label out of range: ({}, {})",
                img.style, img.shape
            )));
        }
        seen[img.style][img.shape] = true;
    }
    for (s, row) in seen.iter().enumerate() {
        for (h, &ok) in row.iter().enumerate() {
            if !ok {
                return Err(LabError::MissingConcept {
                    style: STYLES[s].to_string(),
                    shape: SHAPES[h].to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Convert a `(3, H, W)` tensor in [-1, 1] to an 8-bit RGB image.
pub fn to_rgb_image(pixels: &Tensor<f64>) -> image::RgbImage {
    let (h, w) = (pixels.dim(1), pixels.dim(2));
    let d = pixels.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let ch = |c: usize| {
            (((d[(c * h + y) * w + x] + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([ch(0), ch(1), ch(2)])
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    path: String,
    style: String,
    shape: String,
}

/// Write every image as PNG plus an `index.csv` of `(path, style, shape)`.
pub fn write_png_dataset(corpus: &[LabeledImage], dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| LabError::io(&img_dir, e))?;
    let index_path = dir.join("index.csv");
    let mut w = csv::Writer::from_path(&index_path)?;
    for (i, img) in corpus.iter().enumerate() {
        let name = format!(
            "images/{i:05}_{}_{}.png",
            STYLES[img.style], SHAPES[img.shape]
        );
        let path = dir.join(&name);
        to_rgb_image(&img.pixels)
            .save(&path)
            .map_err(|e| LabError::Serde(format!("{}: {e}", path.display())))?;
        w.serialize(IndexRow {
            path: name,
            style: STYLES[img.style].to_string(),
            shape: SHAPES[img.shape].to_string(),
        })?;
    }
    w.flush().map_err(|e| LabError::io(&index_path, e))?;
    Ok(())
}

/// Read a dataset written by [`write_png_dataset`].
pub fn read_png_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let index_path = dir.join("index.csv");
    let mut r = csv::Reader::from_path(&index_path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: IndexRow = row?;
        let style = STYLES
            .iter()
            .position(|s| *s == row.style)
            .ok_or_else(|| LabError::UnknownToken(row.style.clone()))?;
        let shape = SHAPES
            .iter()
            .position(|s| *s == row.shape)
            .ok_or_else(|| LabError::UnknownToken(row.shape.clone()))?;
        let path = dir.join(&row.path);
        let img = image::open(&path)
            .map_err(|e| LabError::Serde(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut px = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                px[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
        out.push(LabeledImage {
            style,
            shape,
            pixels: Tensor::new(vec![3, h, w], px),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_covers_all_pairs_and_is_deterministic() {
        let cfg = DataConfig {
            images_per_concept: 2,
            ..DataConfig::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.len(), 48);
        assert_eq!(a, b);
        check_coverage(&a).unwrap();
        assert!(a
            .iter()
            .all(|i| i.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn missing_pair_is_reported() {
        let cfg = DataConfig {
            images_per_concept: 1,
            ..DataConfig::default()
        };
        let mut c = generate_corpus(&cfg).unwrap();
        c.retain(|i| !(i.style == 2 && i.shape == 3));
        match check_coverage(&c) {
            Err(LabError::MissingConcept { style, shape }) => {
                assert_eq!(style, "style_C");
                assert_eq!(shape, "cross");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(check_coverage(&[]), Err(LabError::EmptyDataset)));
    }

    #[test]
    fn styles_map_to_attribute_pairs() {
        for s in 0..STYLES.len() {
            let (p, t) = style_attributes(s);
            assert_eq!(style_from_attributes(p, t), s);
        }
    }

    #[test]
    fn png_roundtrip_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            images_per_concept: 1,
            ..DataConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        write_png_dataset(&c, dir.path()).unwrap();
        let back = read_png_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), c.len());
        for (a, b) in c.iter().zip(&back) {
            assert_eq!((a.style, a.shape), (b.style, b.shape));
            for (x, y) in a.pixels.data().iter().zip(b.pixels.data()) {
                assert!((x - y).abs() <= 2.0 / 255.0);
            }
        }
    }
}

//! ACC, Fréchet distance and perceptual distance over classifier features.

use advanchor_grad::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::Concept;
use crate::error::{LabError, Result};
use crate::eval::classifier::ClassifierWeights;

/// Fraction of `predictions` equal to `label`.
pub fn accuracy(predictions: &[usize], label: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    Ok(predictions.iter().filter(|&&p| p == label).count() as f64 / predictions.len() as f64)
}

/// Fraction of `images` the classifier assigns to `concept`.
pub fn classify_accuracy(
    images: &[Tensor<f64>],
    concept: Concept,
    clf: &ClassifierWeights,
) -> Result<f64> {
    if images.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let f = clf.features(images)?;
    accuracy(f.predictions(concept.kind), concept.index)
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(LabError::InvalidArgument(
            "feature rows must be non-empty and equal length".into(),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LabError::Numerical("non-finite features".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Sample mean and unbiased covariance of the rows.
pub fn mean_cov(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let x = to_matrix(rows)?;
    let n = x.nrows();
    if n < 2 {
        return Err(LabError::InvalidArgument(
            "need at least two samples".into(),
        ));
    }
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n as f64);
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (n - 1) as f64;
    Ok((mu, cov))
}

/// PSD square root by eigendecomposition, negative eigenvalues clipped to 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets, with the cross term
/// `Tr((Σ_A Σ_B)^½)` computed as `Tr((√Σ_A Σ_B √Σ_A)^½)`, clamped at 0.
pub fn frechet_from_stats(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() {
        return Err(LabError::ShapeMismatch {
            expected: vec![mu_a.len()],
            got: vec![mu_b.len()],
        });
    }
    let sa = psd_sqrt(cov_a);
    let cross = psd_sqrt(&(&sa * cov_b * &sa)).trace();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(LabError::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between two feature sets; each needs more samples than dimensions.
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let d = feats_a.first().map(|r| r.len()).unwrap_or(0);
    for (side, f) in [("first", feats_a), ("second", feats_b)] {
        if f.len() < d + 1 || f.is_empty() {
            return Err(LabError::InvalidArgument(format!(
                "{side} set has {} samples, need at least {}",
                f.len(),
                d + 1
            )));
        }
    }
    if feats_a == feats_b {
        return Ok(0.0);
    }
    let (ma, ca) = mean_cov(feats_a)?;
    let (mb, cb) = mean_cov(feats_b)?;
    let ab = frechet_from_stats(&ma, &ca, &mb, &cb)?;
    let ba = frechet_from_stats(&mb, &cb, &ma, &ca)?;
    // The two orderings agree analytically; averaging makes the result exactly symmetric.
    Ok(0.5 * (ab + ba))
}

/// Mean `1 − cos` between paired feature vectors; pairs of zero vectors count as equal.
pub fn paired_cosine_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LabError::InvalidArgument(format!(
            "paired sets differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(LabError::ShapeMismatch {
                expected: vec![x.len()],
                got: vec![y.len()],
            });
        }
        if x == y {
            continue;
        }
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += if nx == 0.0 || ny == 0.0 {
            1.0
        } else {
            1.0 - dot / (nx * ny)
        };
    }
    Ok(total / a.len() as f64)
}

/// Perceptual distance between seed-aligned image sets, on intermediate features.
pub fn perceptual_distance(
    images_a: &[Tensor<f64>],
    images_b: &[Tensor<f64>],
    clf: &ClassifierWeights,
) -> Result<f64> {
    if images_a.len() != images_b.len() {
        return Err(LabError::InvalidArgument(format!(
            "paired sets differ in size ({} vs {})",
            images_a.len(),
            images_b.len()
        )));
    }
    let fa = clf.features(images_a)?;
    let fb = clf.features(images_b)?;
    paired_cosine_distance(&fa.spatial, &fb.spatial)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn spearman_extremes() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[0, 1, 1, 2], 1).unwrap(), 0.5);
        assert!(accuracy(&[], 0).is_err());
    }

    #[test]
    fn orthogonal_pairs_have_unit_distance() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let b = vec![vec![0.0, 3.0], vec![-1.0, 0.0]];
        assert_eq!(paired_cosine_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(paired_cosine_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn one_dimensional_mean_shift() {
        let (m0, c) = (
            DVector::from_vec(vec![0.0]),
            DMatrix::from_vec(1, 1, vec![1.0]),
        );
        let m1 = DVector::from_vec(vec![1.0]);
        assert!((frechet_from_stats(&m0, &c, &m1, &c).unwrap() - 1.0).abs() < 1e-12);
    }
}

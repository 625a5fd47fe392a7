//! Metrics against independent reference computations.

mod common;

use advanchor_core::data::{Concept, IMAGE_SHAPE};
use advanchor_core::eval::{
    classify_accuracy, frechet_distance, perceptual_distance, ClassifierWeights,
};
use advanchor_grad::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Matrix square root by the Denman–Beavers iteration; needs no eigendecomposition.
fn sqrtm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if delta < 1e-14 * y.norm() {
            break;
        }
    }
    y
}

fn stats(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mu = DVector::zeros(d);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    (mu, cov / (n as f64 - 1.0))
}

fn reference_fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let cross = sqrtm(&(&ca * &cb));
    (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace()
}

fn gaussian_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    shift: f64,
    mix: &DMatrix<f64>,
) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            (mix * z).iter().map(|v| v + shift).collect()
        })
        .collect()
}

#[test]
fn frechet_matches_denman_beavers_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = 6;
    for case in 0..5 {
        let mix_a = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else {
                rng.gen_range(-0.3..0.3)
            }
        });
        let mix_b = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                0.5 + case as f64 * 0.3
            } else {
                rng.gen_range(-0.3..0.3)
            }
        });
        let a = gaussian_rows(&mut rng, 40, d, 0.0, &mix_a);
        let b = gaussian_rows(&mut rng, 55, d, 0.2 * case as f64, &mix_b);
        let got = frechet_distance(&a, &b).unwrap();
        let want = reference_fid(&a, &b);
        assert!(
            (got - want).abs() <= 1e-8 * want.max(1.0),
            "case {case}: {got} vs {want}"
        );
    }
}

#[test]
fn frechet_of_pure_mean_shift_is_squared_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let a = gaussian_rows(&mut rng, 30, 4, 0.0, &DMatrix::identity(4, 4));
    let shift = [1.0, -2.0, 0.5, 0.0];
    let b: Vec<Vec<f64>> = a
        .iter()
        .map(|r| r.iter().zip(shift).map(|(x, s)| x + s).collect())
        .collect();
    let want: f64 = shift.iter().map(|s| s * s).sum();
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
}

fn images(rng: &mut ChaCha8Rng, n: usize) -> Vec<Tensor<f64>> {
    (0..n)
        .map(|_| common::rand_tensor(rng, &IMAGE_SHAPE, 1.0))
        .collect()
}

#[test]
fn perceptual_distance_is_mean_paired_cosine_distance_of_spatial_features() {
    let clf = ClassifierWeights::init(5);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let a = images(&mut rng, 6);
    let b = images(&mut rng, 6);
    let (fa, fb) = (clf.features(&a).unwrap(), clf.features(&b).unwrap());
    let want = fa
        .spatial
        .iter()
        .zip(&fb.spatial)
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            1.0 - dot / (nx * ny)
        })
        .sum::<f64>()
        / 6.0;
    let got = perceptual_distance(&a, &b, &clf).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert_eq!(perceptual_distance(&a, &a, &clf).unwrap(), 0.0);
    assert!(perceptual_distance(&a, &b[..5], &clf).is_err());
}

#[test]
fn classify_accuracy_counts_argmax_hits() {
    let clf = ClassifierWeights::init(6);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let imgs = images(&mut rng, 12);
    let f = clf.features(&imgs).unwrap();
    for token in ["style_A", "style_D", "circle", "cross"] {
        let c = Concept::from_token(token).unwrap();
        let preds = f.predictions(c.kind);
        let want = preds.iter().filter(|&&p| p == c.index).count() as f64 / 12.0;
        assert_eq!(classify_accuracy(&imgs, c, &clf).unwrap(), want);
    }
    assert!(classify_accuracy(&[], Concept::from_token("circle").unwrap(), &clf).is_err());
}

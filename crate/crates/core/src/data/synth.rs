//! Synthetic in-memory datasets for tests: one oriented sinusoidal
//! grating per class (distinct angle, frequency, and phase) with
//! per-sample amplitude jitter and pixel noise. Classes are linearly
//! well separated by construction while single samples still vary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BASE_AMPLITUDE: f64 = 0.8;
const NOISE: f64 = 0.1;

/// Builds `classes * per_class` samples of extent 3 x size x size in
/// class-major order with ids `synth-<class>-<index>`. Identical
/// arguments produce bitwise-identical datasets.
pub fn synth_dataset<T: Scalar>(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset<T>> {
    if classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    if per_class == 0 || size == 0 {
        return Err(Error::Config("synthetic data needs positive per-class count and size".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut images = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let theta = std::f64::consts::PI * k as f64 / classes as f64;
        let freq = (2 + k) as f64;
        let phase = 0.35 * k as f64;
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        for i in 0..per_class {
            let amp = BASE_AMPLITUDE * rng.gen_range(0.9..1.1);
            let mut data = Vec::with_capacity(3 * size * size);
            for _c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let u = (x as f64 * cos_t + y as f64 * sin_t) / size as f64;
                        let v = amp * (2.0 * std::f64::consts::PI * freq * u + phase).sin()
                            + rng.gen_range(-NOISE..NOISE);
                        data.push(T::from_f64(v));
                    }
                }
            }
            ids.push(format!("synth-{k}-{i}"));
            labels.push(k);
            images.push(Tensor::from_vec(vec![3, size, size], data)?);
        }
    }
    let names = (0..classes).map(|k| format!("C{k}")).collect();
    Dataset::from_memory(names, ids, labels, images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_labels_and_naming() {
        let ds = synth_dataset::<f64>(2, 20, 8, 3).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.classes(), &["C0".to_string(), "C1".to_string()]);
        assert_eq!(ds.labels().iter().filter(|&&l| l == 0).count(), 20);
        assert_eq!(ds.labels().iter().filter(|&&l| l == 1).count(), 20);
        assert_eq!(ds.id(0), "synth-0-0");
        assert_eq!(ds.id(39), "synth-1-19");
        assert_eq!(ds.fetch(0).unwrap().shape(), &[3, 8, 8]);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_dataset::<f64>(3, 4, 12, 9).unwrap();
        let b = synth_dataset::<f64>(3, 4, 12, 9).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.fetch(i).unwrap().data(), b.fetch(i).unwrap().data());
        }
        let c = synth_dataset::<f64>(3, 4, 12, 10).unwrap();
        assert_ne!(a.fetch(0).unwrap().data(), c.fetch(0).unwrap().data());
    }

    #[test]
    fn values_stay_in_normalized_range() {
        let ds = synth_dataset::<f64>(4, 3, 16, 1).unwrap();
        for i in 0..ds.len() {
            assert!(ds.fetch(i).unwrap().data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(matches!(synth_dataset::<f64>(1, 5, 8, 0), Err(Error::Config(_))));
        assert!(synth_dataset::<f64>(2, 0, 8, 0).is_err());
        assert!(synth_dataset::<f64>(2, 5, 0, 0).is_err());
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let (classes, per_class) = (3, 10);
        let ds = synth_dataset::<f64>(classes, per_class, 16, 42).unwrap();
        let dim = 3 * 16 * 16;
        let mut centroids = vec![vec![0.0f64; dim]; classes];
        for i in 0..ds.len() {
            let img = ds.fetch(i).unwrap();
            for (c, v) in centroids[ds.label(i)].iter_mut().zip(img.data()) {
                *c += v / per_class as f64;
            }
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let img = ds.fetch(i).unwrap();
            let best = (0..classes)
                .min_by(|&a, &b| {
                    let da: f64 = img.data().iter().zip(&centroids[a]).map(|(v, c)| (v - c) * (v - c)).sum();
                    let db: f64 = img.data().iter().zip(&centroids[b]).map(|(v, c)| (v - c) * (v - c)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.label(i) {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / ds.len() as f64;
        assert!(accuracy >= 0.9, "nearest-centroid accuracy {accuracy}");
    }
}

//! Synthetic feature bundles for tests, verification and benchmarks.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::client::FeatureBundle;
use crate::linalg::Matrix;
use crate::registry::ClassId;

/// Isotropic Gaussian blobs, class `c` centred at `scale·e_c`.
/// Needs `width ≥ classes`. Samples are interleaved by class.
pub fn gaussian_blobs(
    tag: &str,
    classes: usize,
    per_class: usize,
    width: usize,
    scale: f64,
    noise: f64,
    rng: &mut impl Rng,
) -> FeatureBundle {
    assert!(width >= classes, "need one axis per class");
    let n = classes * per_class;
    let labels: Vec<ClassId> = (0..n).map(|i| ClassId((i % classes) as u64)).collect();
    let features = Matrix::from_fn(n, width, |r, c| {
        let centre = if c == r % classes { scale } else { 0.0 };
        let z: f64 = StandardNormal.sample(rng);
        centre + noise * z
    });
    FeatureBundle::from_labels(tag, features, labels)
}

/// Shape of a random federation.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationShape {
    pub clients: usize,
    pub width: usize,
    pub classes: usize,
    /// Inclusive range of per-client sample counts.
    pub samples: (usize, usize),
}

/// Random clients over a shared class space. Each client holds a random
/// non-empty subset of the classes and draws its labels from it; features
/// are standard normal plus a class-dependent offset.
pub fn random_federation(shape: &FederationShape, rng: &mut impl Rng) -> Vec<FeatureBundle> {
    let FederationShape { clients, width, classes, samples: (lo, hi) } = *shape;
    let offsets = Matrix::from_fn(classes, width, |_, _| StandardNormal.sample(rng));
    (0..clients)
        .map(|k| {
            let n = rng.random_range(lo..=hi);
            let held = rng.random_range(1..=classes.min(n));
            let mut own: Vec<usize> = sample(rng, classes, held).into_vec();
            own.sort_unstable();
            // Every held class appears at least once.
            let labels: Vec<usize> = (0..n)
                .map(|i| if i < held { own[i] } else { own[rng.random_range(0..held)] })
                .collect();
            let features = Matrix::from_fn(n, width, |r, c| {
                let z: f64 = StandardNormal.sample(rng);
                z + offsets[(labels[r], c)]
            });
            FeatureBundle::from_labels(
                format!("client-{k}"),
                features,
                labels.into_iter().map(|c| ClassId(c as u64)).collect(),
            )
        })
        .collect()
}

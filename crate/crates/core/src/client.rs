//! Analytic local training. A client turns its extracted features and the
//! encoders it received at registration into the upload payload: two ridge
//! models and its regularized Gram matrix, from a single factorization.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gram_regularized, LinalgError, Matrix, SpdFactor};
use crate::registry::{encode_labels, ClassId, SplitResult};

/// A client's feature matrix (one row per sample) with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub features: Matrix,
    pub labels: Vec<ClassId>,
    pub declared_classes: BTreeSet<ClassId>,
    pub client_tag: String,
}

impl FeatureBundle {
    /// Builds a bundle whose declared classes are exactly the labels present.
    pub fn from_labels(tag: impl Into<String>, features: Matrix, labels: Vec<ClassId>) -> Self {
        let declared_classes = labels.iter().copied().collect();
        Self { features, labels, declared_classes, client_tag: tag.into() }
    }

    pub fn samples(&self) -> usize {
        self.features.rows()
    }

    pub fn embedding_width(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoSamples,
    ZeroWidth,
    LabelCount { labels: usize, rows: usize },
    UndeclaredClass(ClassId),
    NonFinite { row: usize, col: usize },
    NoDeclaredClasses,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSamples => write!(f, "bundle has no samples"),
            Violation::ZeroWidth => write!(f, "feature width is zero"),
            Violation::LabelCount { labels, rows } => {
                write!(f, "{labels} labels for {rows} feature rows")
            }
            Violation::UndeclaredClass(c) => write!(f, "undeclared class {c}"),
            Violation::NonFinite { row, col } => write!(f, "non-finite feature at ({row},{col})"),
            Violation::NoDeclaredClasses => write!(f, "no declared classes"),
        }
    }
}

/// Every problem with `bundle`, in a stable order. Empty means valid.
pub fn validate_bundle(bundle: &FeatureBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    let (rows, cols) = bundle.features.shape();
    if rows == 0 {
        out.push(Violation::NoSamples);
    }
    if cols == 0 {
        out.push(Violation::ZeroWidth);
    }
    if bundle.labels.len() != rows {
        out.push(Violation::LabelCount { labels: bundle.labels.len(), rows });
    }
    if bundle.declared_classes.is_empty() {
        out.push(Violation::NoDeclaredClasses);
    }
    let mut reported = BTreeSet::new();
    for &label in &bundle.labels {
        if !bundle.declared_classes.contains(&label) && reported.insert(label) {
            out.push(Violation::UndeclaredClass(label));
        }
    }
    for r in 0..rows {
        for (c, v) in bundle.features.row(r).iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFinite { row: r, col: c });
            }
        }
    }
    out
}

/// What a client sends to the server. Every field is `l_e × something`;
/// nothing here scales with the client's sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate {
    /// Ridge model on the known-class block, `l_e × d_{k−1}`.
    pub w_known: Matrix,
    /// Ridge model on the new-class block, `l_e × (d_k − d_{k−1})`.
    pub w_unknown: Matrix,
    /// `FᵀF + γI`, `l_e × l_e`.
    pub gram: Matrix,
    /// Round the client believes it is in. Advisory only.
    pub round_hint: u64,
}

impl LocalUpdate {
    pub fn embedding_width(&self) -> usize {
        self.gram.rows()
    }

    /// Number of `f64` values in the payload: `l_e² + l_e·d_k`.
    pub fn payload_len(&self) -> usize {
        self.gram.as_slice().len() + self.w_known.as_slice().len() + self.w_unknown.as_slice().len()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("invalid bundle: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidBundle(Vec<Violation>),
    #[error("split does not match bundle: {0}")]
    SplitMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Trains both local models and the Gram matrix in one pass.
pub fn local_train(
    bundle: &FeatureBundle,
    split: &SplitResult,
    gamma: f64,
) -> Result<LocalUpdate, ClientError> {
    let violations = validate_bundle(bundle);
    if !violations.is_empty() {
        return Err(ClientError::InvalidBundle(violations));
    }
    for &c in &bundle.declared_classes {
        if !split.known_encoder.contains(c) && !split.unknown_encoder.contains(c) {
            return Err(ClientError::SplitMismatch(format!("class {c} is in neither encoder")));
        }
    }

    let f = &bundle.features;
    let y_known = encode_labels(&bundle.labels, &split.known_encoder);
    let y_unknown = encode_labels(&bundle.labels, &split.unknown_encoder);
    let targets = y_known.hstack(&y_unknown)?;

    let gram = gram_regularized(f, gamma)?;
    let factor = SpdFactor::new(&gram)?;
    let weights = factor.solve(&f.t_matmul(&targets)?)?;

    let d_known = split.known_width();
    Ok(LocalUpdate {
        w_known: weights.column_range(0, d_known),
        w_unknown: weights.column_range(d_known, weights.cols()),
        gram,
        round_hint: split.round,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{assert_close, frobenius_rel_error, ridge_solve};
    use crate::registry::ClassRegistry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[u64]) -> Vec<ClassId> {
        v.iter().map(|&i| ClassId(i)).collect()
    }

    fn split_for(reg: &mut ClassRegistry, bundle: &FeatureBundle) -> SplitResult {
        reg.register(&bundle.declared_classes).unwrap()
    }

    #[test]
    fn scalar_unknown_class() {
        let bundle = FeatureBundle::from_labels("c", Matrix::from_rows(&[[1.0], [1.0]]), ids(&[4, 4]));
        let mut reg = ClassRegistry::new();
        let split = split_for(&mut reg, &bundle);
        let up = local_train(&bundle, &split, 0.0).unwrap();
        assert_close(&up.w_unknown, &Matrix::from_rows(&[[1.0]]), 1e-15);
        assert_eq!(up.w_known.shape(), (1, 0));
        assert_eq!(up.gram, Matrix::from_rows(&[[2.0]]));
    }

    #[test]
    fn all_known_gives_empty_unknown_block() {
        let mut reg = ClassRegistry::new();
        reg.register(&ids(&[1, 2]).into_iter().collect()).unwrap();
        let bundle = FeatureBundle::from_labels("c", Matrix::identity(2), ids(&[1, 2]));
        let split = split_for(&mut reg, &bundle);
        let up = local_train(&bundle, &split, 1.0).unwrap();
        assert_eq!(up.w_unknown.shape(), (2, 0));
        assert_close(&up.w_known, &Matrix::identity(2).scale(0.5), 1e-15);
    }

    #[test]
    fn identity_features_both_unknown() {
        let bundle = FeatureBundle::from_labels("c", Matrix::identity(2), ids(&[0, 1]));
        let mut reg = ClassRegistry::new();
        let split = split_for(&mut reg, &bundle);
        let up = local_train(&bundle, &split, 1.0).unwrap();
        assert_close(&up.w_unknown, &Matrix::identity(2).scale(0.5), 1e-15);
        assert_eq!(up.gram, Matrix::identity(2).scale(2.0));
    }

    #[test]
    fn validation_messages() {
        let ok = FeatureBundle::from_labels("c", Matrix::identity(2), ids(&[0, 1]));
        assert!(validate_bundle(&ok).is_empty());

        let mut bad = ok.clone();
        bad.labels[1] = ClassId(9);
        let v = validate_bundle(&bad);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "undeclared class 9");

        let mut nan = ok.clone();
        nan.features = Matrix::from_raw(2, 2, vec![1.0, 0.0, f64::NAN, 1.0]);
        let v = validate_bundle(&nan);
        assert_eq!(v[0].to_string(), "non-finite feature at (1,0)");

        let empty = FeatureBundle::from_labels("c", Matrix::zeros(0, 3), vec![]);
        let v = validate_bundle(&empty);
        assert!(v.contains(&Violation::NoSamples));
        assert!(v.contains(&Violation::NoDeclaredClasses));
    }

    #[test]
    fn rank_deficient_at_zero_gamma() {
        let bundle = FeatureBundle::from_labels("c", Matrix::from_rows(&[[1.0, 2.0, 3.0]]), ids(&[0]));
        let mut reg = ClassRegistry::new();
        let split = split_for(&mut reg, &bundle);
        assert!(matches!(
            local_train(&bundle, &split, 0.0),
            Err(ClientError::Linalg(LinalgError::NotPositiveDefinite { .. }))
        ));
    }

    #[test]
    fn split_mismatch_is_rejected() {
        let bundle = FeatureBundle::from_labels("c", Matrix::identity(2), ids(&[0, 1]));
        let mut reg = ClassRegistry::new();
        let split = reg.register(&ids(&[0]).into_iter().collect()).unwrap();
        assert!(matches!(local_train(&bundle, &split, 1.0), Err(ClientError::SplitMismatch(_))));
    }

    fn random_bundle(rng: &mut ChaCha8Rng, n: usize, l: usize, classes: u64) -> FeatureBundle {
        let f = Matrix::from_fn(n, l, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|_| ClassId(rng.random_range(0..classes))).collect();
        FeatureBundle::from_labels("r", f, labels)
    }

    #[test]
    fn single_factorization_matches_two_ridge_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut reg = ClassRegistry::new();
        let first = random_bundle(&mut rng, 20, 6, 4);
        split_for(&mut reg, &first);
        let bundle = random_bundle(&mut rng, 25, 6, 8);
        let split = split_for(&mut reg, &bundle);
        let gamma = 0.3;
        let up = local_train(&bundle, &split, gamma).unwrap();
        let yk = encode_labels(&bundle.labels, &split.known_encoder);
        let yu = encode_labels(&bundle.labels, &split.unknown_encoder);
        let wk = ridge_solve(&bundle.features, &yk, gamma).unwrap();
        let wu = ridge_solve(&bundle.features, &yu, gamma).unwrap();
        assert!(frobenius_rel_error(&up.w_known, &wk).unwrap() <= 1e-12);
        assert!(frobenius_rel_error(&up.w_unknown, &wu).unwrap() <= 1e-12);
    }

    #[test]
    fn payload_shapes_do_not_depend_on_sample_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [3, 30, 300] {
            let bundle = random_bundle(&mut rng, n, 5, 3);
            let mut reg = ClassRegistry::new();
            let split = split_for(&mut reg, &bundle);
            let up = local_train(&bundle, &split, 1.0).unwrap();
            assert_eq!(up.gram.shape(), (5, 5));
            assert_eq!(up.w_known.rows(), 5);
            assert_eq!(up.w_unknown.shape(), (5, split.unknown_width()));
            assert_eq!(up.payload_len(), 25 + 5 * split.total_width());
        }
    }

    #[test]
    fn duplicating_samples_is_invariant_at_zero_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bundle = random_bundle(&mut rng, 40, 6, 5);
        let doubled = FeatureBundle::from_labels(
            "d",
            Matrix::vstack(&[&bundle.features, &bundle.features]).unwrap(),
            bundle.labels.iter().chain(&bundle.labels).copied().collect(),
        );
        let mut reg = ClassRegistry::new();
        let split = split_for(&mut reg, &bundle);
        let a = local_train(&bundle, &split, 0.0).unwrap();
        let b = local_train(&doubled, &split, 0.0).unwrap();
        assert!(frobenius_rel_error(&b.w_unknown, &a.w_unknown).unwrap() <= 1e-9);
        assert!(frobenius_rel_error(&b.w_known, &a.w_known).unwrap() <= 1e-9);
    }
}

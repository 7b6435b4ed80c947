//! Centralized references for the equivalence checks.
//!
//! Everything here is computed directly on pooled data and shares nothing
//! with the recursive path except the linear algebra kernels. Labels are
//! re-encoded straight from the registry's column assignment.

use std::ops::Range;

use thiserror::Error;

use crate::client::FeatureBundle;
use crate::linalg::{ridge_solve, LinalgError, Matrix};
use crate::registry::{ClassId, ClassRegistry, RegistryError};
use crate::server::GlobalModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("bundle {tag} has embedding width {got}, expected {expected}")]
    WidthMismatch { tag: String, expected: usize, got: usize },
    #[error("nothing to pool")]
    Empty,
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// All clients' samples stacked in one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledDataset {
    pub features: Matrix,
    pub labels: Vec<ClassId>,
    /// Which client each run of rows came from. The ranges partition `0..N`.
    pub provenance: Vec<(String, Range<usize>)>,
}

impl PooledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks the bundles vertically in list order.
pub fn pool(bundles: &[FeatureBundle]) -> Result<PooledDataset, OracleError> {
    let first = bundles.first().ok_or(OracleError::Empty)?;
    let width = first.embedding_width();
    let mut provenance = Vec::with_capacity(bundles.len());
    let mut labels = Vec::new();
    let mut start = 0;
    for b in bundles {
        if b.embedding_width() != width {
            return Err(OracleError::WidthMismatch {
                tag: b.client_tag.clone(),
                expected: width,
                got: b.embedding_width(),
            });
        }
        let end = start + b.samples();
        provenance.push((b.client_tag.clone(), start..end));
        labels.extend_from_slice(&b.labels);
        start = end;
    }
    let blocks: Vec<&Matrix> = bundles.iter().map(|b| &b.features).collect();
    Ok(PooledDataset { features: Matrix::vstack(&blocks)?, labels, provenance })
}

/// Ridge regression over the pooled data against the registry's full
/// encoder: `(FᵀF + γI)⁻¹FᵀY`.
pub fn joint_solution(
    pooled: &PooledDataset,
    registry: &ClassRegistry,
    gamma: f64,
) -> Result<GlobalModel, OracleError> {
    let width = registry.width();
    let mut targets = vec![0.0; pooled.len() * width];
    for (row, &label) in pooled.labels.iter().enumerate() {
        let col = registry.global_column_of(label)?;
        targets[row * width + col] = 1.0;
    }
    let targets = Matrix::new(pooled.len(), width, targets)?;
    let weights = ridge_solve(&pooled.features, &targets, gamma)?;
    Ok(GlobalModel {
        weights,
        column_classes: registry.encoder().classes().to_vec(),
        round: pooled.provenance.len() as u64,
    })
}

/// Row `i` of the result is row `perm[i]` of the input.
pub fn permute_rows(pooled: &PooledDataset, perm: &[usize]) -> Result<PooledDataset, OracleError> {
    let n = pooled.len();
    if perm.len() != n {
        return Err(OracleError::InvalidPermutation(format!(
            "length {} for {n} rows",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(OracleError::InvalidPermutation(format!("index {p} repeated or out of range")));
        }
    }

    let mut owner = vec![0usize; n];
    for (i, (_, range)) in pooled.provenance.iter().enumerate() {
        owner[range.clone()].iter_mut().for_each(|o| *o = i);
    }
    let mut provenance: Vec<(String, Range<usize>)> = Vec::new();
    for (new_row, &old_row) in perm.iter().enumerate() {
        let tag = &pooled.provenance[owner[old_row]].0;
        match provenance.last_mut() {
            Some((last, range)) if last == tag && range.end == new_row => range.end += 1,
            _ => provenance.push((tag.clone(), new_row..new_row + 1)),
        }
    }

    Ok(PooledDataset {
        features: pooled.features.select_rows(perm),
        labels: perm.iter().map(|&p| pooled.labels[p]).collect(),
        provenance,
    })
}

/// Cuts the pooled rows into consecutive client bundles of the given sizes.
/// Declared classes are the labels each group actually holds.
pub fn regroup(pooled: &PooledDataset, sizes: &[usize]) -> Result<Vec<FeatureBundle>, OracleError> {
    if sizes.iter().sum::<usize>() != pooled.len() || sizes.contains(&0) {
        return Err(OracleError::InvalidGrouping(format!(
            "sizes {sizes:?} do not split {} rows into non-empty groups",
            pooled.len()
        )));
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for (i, &size) in sizes.iter().enumerate() {
        let rows: Vec<usize> = (start..start + size).collect();
        out.push(FeatureBundle::from_labels(
            format!("group-{i}"),
            pooled.features.select_rows(&rows),
            pooled.labels[start..start + size].to_vec(),
        ));
        start += size;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{assert_close, frobenius_rel_error};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle(tag: &str, rows: usize, rng: &mut ChaCha8Rng) -> FeatureBundle {
        let f = Matrix::from_fn(rows, 3, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..rows).map(|_| ClassId(rng.random_range(0..4))).collect();
        FeatureBundle::from_labels(tag, f, labels)
    }

    fn registry_for(p: &PooledDataset) -> ClassRegistry {
        let mut reg = ClassRegistry::new();
        reg.register(&p.labels.iter().copied().collect()).unwrap();
        reg
    }

    #[test]
    fn pool_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = pool(&[bundle("c1", 1, &mut rng), bundle("c2", 1, &mut rng)]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.provenance, vec![("c1".to_string(), 0..1), ("c2".to_string(), 1..2)]);

        let single = bundle("only", 4, &mut rng);
        let p = pool(std::slice::from_ref(&single)).unwrap();
        assert_eq!(p.features, single.features);
        assert_eq!(p.labels, single.labels);

        let p = pool(&[bundle("a", 2, &mut rng), bundle("b", 3, &mut rng), bundle("c", 1, &mut rng)])
            .unwrap();
        assert_eq!(p.len(), 6);
        let ranges: Vec<_> = p.provenance.iter().map(|(_, r)| r.clone()).collect();
        assert_eq!(ranges, vec![0..2, 2..5, 5..6]);
    }

    #[test]
    fn pool_rejects_width_mismatch() {
        let a = FeatureBundle::from_labels("a", Matrix::identity(2), vec![ClassId(0), ClassId(1)]);
        let b = FeatureBundle::from_labels("b", Matrix::identity(3), vec![ClassId(0); 3]);
        assert!(matches!(pool(&[a, b]), Err(OracleError::WidthMismatch { .. })));
        assert_eq!(pool(&[]), Err(OracleError::Empty));
    }

    #[test]
    fn joint_solution_examples() {
        let b = FeatureBundle::from_labels("s", Matrix::from_rows(&[[1.0], [1.0]]), vec![ClassId(0); 2]);
        let p = pool(&[b]).unwrap();
        let w = joint_solution(&p, &registry_for(&p), 0.0).unwrap();
        assert_close(&w.weights, &Matrix::from_rows(&[[1.0]]), 1e-15);

        // Orthonormal square F with Y = F: rows e_0, e_1 labelled 0, 1.
        let b = FeatureBundle::from_labels("o", Matrix::identity(2), vec![ClassId(0), ClassId(1)]);
        let p = pool(&[b]).unwrap();
        assert_eq!(joint_solution(&p, &registry_for(&p), 0.0).unwrap().weights, Matrix::identity(2));
    }

    #[test]
    fn joint_solution_unknown_class() {
        let b = FeatureBundle::from_labels("s", Matrix::identity(2), vec![ClassId(0), ClassId(8)]);
        let p = pool(&[b]).unwrap();
        let mut reg = ClassRegistry::new();
        reg.register(&[ClassId(0)].into_iter().collect()).unwrap();
        assert!(matches!(
            joint_solution(&p, &reg, 1.0),
            Err(OracleError::Registry(RegistryError::UnknownClass(ClassId(8))))
        ));
    }

    #[test]
    fn registration_order_only_permutes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = pool(&[bundle("a", 10, &mut rng), bundle("b", 7, &mut rng)]).unwrap();
        let mut forward = ClassRegistry::new();
        let mut backward = ClassRegistry::new();
        for c in 0..4 {
            forward.register(&[ClassId(c)].into_iter().collect()).unwrap();
            backward.register(&[ClassId(3 - c)].into_iter().collect()).unwrap();
        }
        let a = joint_solution(&p, &forward, 0.1).unwrap().aligned_by_class();
        let b = joint_solution(&p, &backward, 0.1).unwrap().aligned_by_class();
        assert_eq!(a.0, b.0);
        assert!(frobenius_rel_error(&a.1, &b.1).unwrap() < 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = pool(&[bundle("a", 3, &mut rng), bundle("b", 2, &mut rng)]).unwrap();
        let reg = registry_for(&p);
        let base = joint_solution(&p, &reg, 0.5).unwrap().weights;

        let id: Vec<usize> = (0..5).collect();
        assert_eq!(permute_rows(&p, &id).unwrap(), p);

        let mut swap = id.clone();
        swap.swap(0, 1);
        let w = joint_solution(&permute_rows(&p, &swap).unwrap(), &reg, 0.5).unwrap().weights;
        assert!(frobenius_rel_error(&w, &base).unwrap() <= 1e-12);

        let rev: Vec<usize> = (0..5).rev().collect();
        let reversed = permute_rows(&p, &rev).unwrap();
        assert_eq!(
            reversed.provenance,
            vec![("b".to_string(), 0..2), ("a".to_string(), 2..5)]
        );
        let w = joint_solution(&reversed, &reg, 0.5).unwrap().weights;
        assert!(frobenius_rel_error(&w, &base).unwrap() <= 1e-12);

        let mut shuffled = id.clone();
        shuffled.shuffle(&mut rng);
        let w = joint_solution(&permute_rows(&p, &shuffled).unwrap(), &reg, 0.5).unwrap().weights;
        assert!(frobenius_rel_error(&w, &base).unwrap() <= 1e-12);
    }

    #[test]
    fn permutation_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = pool(&[bundle("a", 3, &mut rng)]).unwrap();
        assert!(permute_rows(&p, &[0, 1]).is_err());
        assert!(permute_rows(&p, &[0, 0, 1]).is_err());
        assert!(permute_rows(&p, &[0, 1, 3]).is_err());
    }

    #[test]
    fn regroup_preserves_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = pool(&[bundle("a", 6, &mut rng)]).unwrap();
        let groups = regroup(&p, &[2, 1, 3]).unwrap();
        assert_eq!(groups.len(), 3);
        assert_eq!(pool(&groups).unwrap().features, p.features);
        assert!(regroup(&p, &[2, 2]).is_err());
        assert!(regroup(&p, &[6, 0]).is_err());
    }
}

//! Recursive global aggregation.
//!
//! The server keeps two matrices whatever the number of clients or samples:
//! the running sum `R̃_k` of the clients' regularized Gram matrices and the
//! Global Knowledge Matrix `G_k = R̃_k⁻¹·F₁:ₖᵀY₁:ₖ`. Each upload is folded in
//! with
//!
//! ```text
//! G_k = [ A_k·G_{k−1} + B_k·Ŵ_k   B_k·W̌_k ]
//! A_k = I − R̃_{k−1}⁻¹ R_k (I − R̃_k⁻¹ R_k)
//! B_k = I − R_k⁻¹ R̃_{k−1} (I − R̃_k⁻¹ R̃_{k−1})
//! ```
//!
//! which simplifies to `A_k = R̃_k⁻¹R̃_{k−1}` and `B_k = R̃_k⁻¹R_k`. The default
//! path uses the simplified form (one factorization per round, no `R_k⁻¹`);
//! [`AggregationMode::Literal`] evaluates the expressions as written and is
//! kept for cross-checking.
//!
//! The global model is recovered on demand as
//! `W_k = [R̃_k − (k−1)γI]⁻¹ R̃_k G_k`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::LocalUpdate;
use crate::linalg::{check_gamma, LinalgError, Matrix, SpdFactor};
use crate::registry::{ClassId, ClassRegistry, RegistryError, SplitResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("update does not fit server state: {0}")]
    DimensionMismatch(String),
    #[error("expected the update for round {expected}, got round {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("no client has been aggregated yet")]
    NoRounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AggregationMode {
    /// `A_k·X = R̃_k⁻¹R̃_{k−1}X`, `B_k·X = R̃_k⁻¹R_kX`.
    #[default]
    Simplified,
    /// The recursion exactly as written, with every inverse applied by a
    /// solve. Needs `R_k` and `R̃_{k−1}` to be positive definite.
    Literal,
}

/// The aggregated classifier `W_k` with its column → class labelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub weights: Matrix,
    pub column_classes: Vec<ClassId>,
    pub round: u64,
}

impl GlobalModel {
    /// Weights with columns reordered by ascending class id, so models built
    /// from different registration orders can be compared directly.
    pub fn aligned_by_class(&self) -> (Vec<ClassId>, Matrix) {
        let mut order: Vec<usize> = (0..self.column_classes.len()).collect();
        order.sort_by_key(|&i| self.column_classes[i]);
        let classes = order.iter().map(|&i| self.column_classes[i]).collect();
        (classes, self.weights.select_columns(&order))
    }

    pub fn embedding_width(&self) -> usize {
        self.weights.rows()
    }
}

/// Server-side state. Its size is `O(l_e² + l_e·d_k)`; no per-sample data is
/// ever stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    round: u64,
    gamma: f64,
    embedding_width: usize,
    r_tilde: Matrix,
    gkm: Matrix,
    registry: ClassRegistry,
}

impl ServerState {
    /// `R̃_0 = 0`, `G_0` empty.
    pub fn new(embedding_width: usize, gamma: f64) -> Result<Self, ServerError> {
        check_gamma(gamma)?;
        if embedding_width == 0 {
            return Err(ServerError::DimensionMismatch("embedding width must be positive".into()));
        }
        Ok(Self {
            round: 0,
            gamma,
            embedding_width,
            r_tilde: Matrix::zeros(embedding_width, embedding_width),
            gkm: Matrix::zeros(embedding_width, 0),
            registry: ClassRegistry::new(),
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn embedding_width(&self) -> usize {
        self.embedding_width
    }

    pub fn r_tilde(&self) -> &Matrix {
        &self.r_tilde
    }

    /// Global Knowledge Matrix `G_k`.
    pub fn knowledge(&self) -> &Matrix {
        &self.gkm
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    /// Number of `f64` values the state holds: `l_e² + l_e·d_k`.
    pub fn stored_values(&self) -> usize {
        self.r_tilde.as_slice().len() + self.gkm.as_slice().len()
    }

    /// Known/unknown split for a registering client. Rounds are assigned in
    /// registration order.
    pub fn register(&mut self, declared: &BTreeSet<ClassId>) -> Result<SplitResult, ServerError> {
        Ok(self.registry.register(declared)?)
    }

    /// Folds one upload in with the simplified recursion.
    pub fn aggregate(&mut self, update: &LocalUpdate, split: &SplitResult) -> Result<(), ServerError> {
        self.aggregate_with(update, split, AggregationMode::Simplified)
    }

    /// Folds one upload in with the recursion as literally written.
    pub fn aggregate_literal(
        &mut self,
        update: &LocalUpdate,
        split: &SplitResult,
    ) -> Result<(), ServerError> {
        self.aggregate_with(update, split, AggregationMode::Literal)
    }

    /// On error the state is left untouched.
    pub fn aggregate_with(
        &mut self,
        update: &LocalUpdate,
        split: &SplitResult,
        mode: AggregationMode,
    ) -> Result<(), ServerError> {
        self.check_update(update, split)?;
        let r_k = &update.gram;

        let (r_tilde, gkm) = if self.round == 0 {
            // First round: nothing is known yet, G_1 = W̌_1.
            (r_k.clone(), update.w_unknown.clone())
        } else {
            let r_tilde = self.r_tilde.add(r_k)?;
            let (known, new) = match mode {
                AggregationMode::Simplified => {
                    let factor = SpdFactor::new(&r_tilde)?;
                    let rhs_known = self.r_tilde.matmul(&self.gkm)?.add(&r_k.matmul(&update.w_known)?)?;
                    let rhs_new = r_k.matmul(&update.w_unknown)?;
                    let both = factor.solve(&rhs_known.hstack(&rhs_new)?)?;
                    let d_known = self.gkm.cols();
                    (both.column_range(0, d_known), both.column_range(d_known, both.cols()))
                }
                AggregationMode::Literal => {
                    let (a, b) = literal_coefficients(&self.r_tilde, r_k, &r_tilde)?;
                    let known = a.matmul(&self.gkm)?.add(&b.matmul(&update.w_known)?)?;
                    (known, b.matmul(&update.w_unknown)?)
                }
            };
            (r_tilde, known.hstack(&new)?)
        };

        self.r_tilde = r_tilde;
        self.gkm = gkm;
        self.round += 1;
        Ok(())
    }

    /// Folds a batch in registration order, whatever order it arrived in.
    pub fn batch_aggregate(
        &mut self,
        updates: &[(LocalUpdate, SplitResult)],
    ) -> Result<(), ServerError> {
        let mut order: Vec<&(LocalUpdate, SplitResult)> = updates.iter().collect();
        order.sort_by_key(|(_, s)| s.round);
        for (update, split) in order {
            self.aggregate(update, split)?;
        }
        Ok(())
    }

    /// Recovers `W_k` from `(R̃_k, G_k, k)`.
    pub fn finalize(&self) -> Result<GlobalModel, ServerError> {
        if self.round == 0 {
            return Err(ServerError::NoRounds);
        }
        // With k = 1 or γ = 0 the bracket equals R̃_k and W_k = G_k.
        let weights = if self.round == 1 || self.gamma == 0.0 {
            self.gkm.clone()
        } else {
            let mut bracket = self.r_tilde.clone();
            bracket.add_diagonal(-((self.round - 1) as f64) * self.gamma);
            SpdFactor::new(&bracket)?.solve(&self.r_tilde.matmul(&self.gkm)?)?
        };
        let column_classes = self.registry.encoder().classes()[..self.gkm.cols()].to_vec();
        Ok(GlobalModel { weights, column_classes, round: self.round })
    }

    fn check_update(&self, update: &LocalUpdate, split: &SplitResult) -> Result<(), ServerError> {
        let l = self.embedding_width;
        if split.round != self.round + 1 {
            return Err(ServerError::OutOfOrder { expected: self.round + 1, got: split.round });
        }
        if update.gram.shape() != (l, l) {
            return Err(ServerError::DimensionMismatch(format!(
                "Gram matrix is {:?}, expected {l}x{l}",
                update.gram.shape()
            )));
        }
        if update.w_known.shape() != (l, split.known_width()) {
            return Err(ServerError::DimensionMismatch(format!(
                "known-class model is {:?}, expected {l}x{}",
                update.w_known.shape(),
                split.known_width()
            )));
        }
        if update.w_unknown.shape() != (l, split.unknown_width()) {
            return Err(ServerError::DimensionMismatch(format!(
                "new-class model is {:?}, expected {l}x{}",
                update.w_unknown.shape(),
                split.unknown_width()
            )));
        }
        if split.known_width() != self.gkm.cols() {
            return Err(ServerError::DimensionMismatch(format!(
                "split assumes {} known classes, server has aggregated {}",
                split.known_width(),
                self.gkm.cols()
            )));
        }
        Ok(())
    }
}

/// `(A_k, B_k)` evaluated term by term.
fn literal_coefficients(
    r_prev: &Matrix,
    r_k: &Matrix,
    r_tilde: &Matrix,
) -> Result<(Matrix, Matrix), LinalgError> {
    let l = r_k.rows();
    let eye = Matrix::identity(l);
    let prev = SpdFactor::new(r_prev)?;
    let local = SpdFactor::new(r_k)?;
    let total = SpdFactor::new(r_tilde)?;

    let inner_a = eye.sub(&total.solve(r_k)?)?;
    let a = eye.sub(&prev.solve(&r_k.matmul(&inner_a)?)?)?;

    let inner_b = eye.sub(&total.solve(r_prev)?)?;
    let b = eye.sub(&local.solve(&r_prev.matmul(&inner_b)?)?)?;
    Ok((a, b))
}

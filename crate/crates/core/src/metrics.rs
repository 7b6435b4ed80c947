//! Prediction and the continual-learning metrics computed from an accuracy
//! grid `A[j][i]` (accuracy of the round-`i` model on task `j`'s test set).
//!
//! Rounds and tasks are 1-based throughout this module, matching how the
//! metrics are usually written.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::registry::ClassId;
use crate::server::GlobalModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("feature width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("metric needs round >= {need}, got {got}")]
    RoundTooSmall { need: usize, got: usize },
    #[error("round {round} is beyond the grid ({rounds} rounds)")]
    RoundOutOfRange { round: usize, rounds: usize },
    #[error("accuracy for task {task} at round {round} has not been recorded")]
    MissingEntry { task: usize, round: usize },
    #[error("every retention term had a zero denominator")]
    NoValidTerms,
}

/// Argmax class per row; ties go to the smallest class id.
pub fn predict(model: &GlobalModel, features: &Matrix) -> Result<Vec<ClassId>, MetricsError> {
    if features.cols() != model.embedding_width() {
        return Err(MetricsError::WidthMismatch {
            expected: model.embedding_width(),
            got: features.cols(),
        });
    }
    let logits = features.matmul(&model.weights).expect("widths checked");
    Ok((0..logits.rows())
        .map(|r| {
            let mut best: Option<(f64, ClassId)> = None;
            for (col, &v) in logits.row(r).iter().enumerate() {
                let class = model.column_classes[col];
                best = match best {
                    Some((bv, bc)) if bv > v || (bv == v && bc < class) => Some((bv, bc)),
                    _ => Some((v, class)),
                };
            }
            best.map(|(_, c)| c).unwrap_or(ClassId(u64::MAX))
        })
        .collect())
}

/// Fraction of rows predicted correctly. An empty test set scores 0.
pub fn accuracy(model: &GlobalModel, features: &Matrix, labels: &[ClassId]) -> Result<f64, MetricsError> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, features)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Lower-triangular accuracy grid; entry `(j, i)` exists only for `j ≤ i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    rounds: usize,
    /// `entries[i-1][j-1]` is `A[j][i]`.
    entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyGrid {
    pub fn new(rounds: usize) -> Self {
        Self { rounds, entries: (1..=rounds).map(|i| vec![None; i]).collect() }
    }

    /// Builds a grid from columns: `columns[i-1][j-1] = A[j][i]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let mut g = Self::new(columns.len());
        for (i, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), i + 1, "column {} must have {} entries", i + 1, i + 1);
            for (j, &a) in col.iter().enumerate() {
                g.set(j + 1, i + 1, a);
            }
        }
        g
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Records `A[task][round]`, clamped to `[0, 1]`.
    pub fn set(&mut self, task: usize, round: usize, acc: f64) {
        assert!(task >= 1 && task <= round && round <= self.rounds, "({task}, {round}) outside grid");
        self.entries[round - 1][task - 1] = Some(acc.clamp(0.0, 1.0));
    }

    pub fn get(&self, task: usize, round: usize) -> Result<f64, MetricsError> {
        if round == 0 || round > self.rounds {
            return Err(MetricsError::RoundOutOfRange { round, rounds: self.rounds });
        }
        if task == 0 || task > round {
            return Err(MetricsError::MissingEntry { task, round });
        }
        self.entries[round - 1][task - 1].ok_or(MetricsError::MissingEntry { task, round })
    }
}

/// `A_i = (1/i) Σ_{j≤i} A[j][i]`.
pub fn average_accuracy(grid: &AccuracyGrid, i: usize) -> Result<f64, MetricsError> {
    if i < 1 {
        return Err(MetricsError::RoundTooSmall { need: 1, got: i });
    }
    mean((1..=i).map(|j| grid.get(j, i)))
}

/// Which way round the retention ratio is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RetentionOrientation {
    /// `A[j][j] / A[j][i]`.
    #[default]
    FirstOverCurrent,
    /// `A[j][i] / A[j][j]`; values above 1 mean accuracy on old tasks grew.
    CurrentOverFirst,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retention {
    pub value: f64,
    /// Terms dropped because their denominator was zero.
    pub excluded: usize,
}

/// `F_i = (1/(i−1)) Σ_{j<i} A[j][j] / A[j][i]` (or the reciprocal ratio).
/// Terms with a zero denominator are left out and counted.
pub fn knowledge_retention(
    grid: &AccuracyGrid,
    i: usize,
    orientation: RetentionOrientation,
) -> Result<Retention, MetricsError> {
    if i < 2 {
        return Err(MetricsError::RoundTooSmall { need: 2, got: i });
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for j in 1..i {
        let first = grid.get(j, j)?;
        let current = grid.get(j, i)?;
        let (num, den) = match orientation {
            RetentionOrientation::FirstOverCurrent => (first, current),
            RetentionOrientation::CurrentOverFirst => (current, first),
        };
        if den == 0.0 {
            excluded += 1;
        } else {
            sum += num / den;
            used += 1;
        }
    }
    if excluded > 0 {
        log::warn!("knowledge retention at round {i}: {excluded} zero-denominator term(s) excluded");
    }
    if used == 0 {
        return Err(MetricsError::NoValidTerms);
    }
    Ok(Retention { value: sum / used as f64, excluded })
}

/// `S_i = (1/(i−1)) Σ_{k=2..i} (1/(k−1)) Σ_{j<k} A[j][k]`.
pub fn stability(grid: &AccuracyGrid, i: usize) -> Result<f64, MetricsError> {
    if i < 2 {
        return Err(MetricsError::RoundTooSmall { need: 2, got: i });
    }
    mean((2..=i).map(|k| mean((1..k).map(|j| grid.get(j, k)))))
}

/// `P_i = (1/i) Σ_{j≤i} A[j][j]`.
pub fn plasticity(grid: &AccuracyGrid, i: usize) -> Result<f64, MetricsError> {
    if i < 1 {
        return Err(MetricsError::RoundTooSmall { need: 1, got: i });
    }
    mean((1..=i).map(|j| grid.get(j, j)))
}

fn mean(values: impl Iterator<Item = Result<f64, MetricsError>>) -> Result<f64, MetricsError> {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in values {
        s += v?;
        n += 1;
    }
    Ok(s / n as f64)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub average_accuracy: f64,
    pub retention: Option<f64>,
    pub stability: Option<f64>,
    pub plasticity: f64,
}

/// Metrics for every round of a complete grid.
pub fn summarize(grid: &AccuracyGrid, orientation: RetentionOrientation) -> Result<Vec<RoundMetrics>, MetricsError> {
    (1..=grid.rounds())
        .map(|i| {
            Ok(RoundMetrics {
                round: i,
                average_accuracy: average_accuracy(grid, i)?,
                retention: if i >= 2 {
                    match knowledge_retention(grid, i, orientation) {
                        Ok(r) => Some(r.value),
                        Err(MetricsError::NoValidTerms) => None,
                        Err(e) => return Err(e),
                    }
                } else {
                    None
                },
                stability: if i >= 2 { Some(stability(grid, i)?) } else { None },
                plasticity: plasticity(grid, i)?,
            })
        })
        .collect()
}

/// Comma-separated table with a header row; missing values are empty.
pub fn metrics_table(rows: &[RoundMetrics]) -> String {
    let mut out = String::from("round,average_accuracy,knowledge_retention,stability,plasticity\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{:.6}",
            r.round,
            r.average_accuracy,
            opt(r.retention),
            opt(r.stability),
            r.plasticity
        );
    }
    out
}

/// The raw grid, one row per task, one column per round.
pub fn grid_table(grid: &AccuracyGrid) -> String {
    let mut out = String::from("task");
    for i in 1..=grid.rounds() {
        let _ = write!(out, ",round_{i}");
    }
    out.push('\n');
    for j in 1..=grid.rounds() {
        let _ = write!(out, "{j}");
        for i in 1..=grid.rounds() {
            match grid.get(j, i) {
                Ok(a) => {
                    let _ = write!(out, ",{a:.6}");
                }
                Err(_) => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

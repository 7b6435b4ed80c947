//! Server-side class space: known/unknown class splitting and the
//! append-only one-hot encoders handed to each registering client.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

/// Dataset-level label. Stable for the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u64);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for ClassId {
    fn from(v: u64) -> Self {
        ClassId(v)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("class {0} has not been registered")]
    UnknownClass(ClassId),
    #[error("a client must declare at least one class")]
    EmptyDeclaration,
    #[error("invalid encoder map: {0}")]
    InvalidEncoder(String),
}

/// Injective `ClassId → column` assignment with columns `0..width`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassId>", into = "Vec<ClassId>")]
pub struct EncoderMap {
    /// `columns[i]` is the class owning column `i`.
    columns: Vec<ClassId>,
    index: BTreeMap<ClassId, usize>,
}

impl TryFrom<Vec<ClassId>> for EncoderMap {
    type Error = RegistryError;

    fn try_from(columns: Vec<ClassId>) -> Result<Self, Self::Error> {
        let pairs: Vec<(ClassId, usize)> = columns.into_iter().zip(0..).collect();
        Self::from_pairs(&pairs)
    }
}

impl From<EncoderMap> for Vec<ClassId> {
    fn from(map: EncoderMap) -> Self {
        map.columns
    }
}

impl EncoderMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map from `(class, column)` pairs, checking injectivity and
    /// that the columns are exactly `0..len`.
    pub fn from_pairs(pairs: &[(ClassId, usize)]) -> Result<Self, RegistryError> {
        let width = pairs.len();
        let mut columns = vec![None; width];
        let mut index = BTreeMap::new();
        for &(class, col) in pairs {
            if col >= width {
                return Err(RegistryError::InvalidEncoder(format!(
                    "column {col} out of range for width {width}"
                )));
            }
            if columns[col].is_some() {
                return Err(RegistryError::InvalidEncoder(format!("column {col} assigned twice")));
            }
            if index.insert(class, col).is_some() {
                return Err(RegistryError::InvalidEncoder(format!("class {class} assigned twice")));
            }
            columns[col] = Some(class);
        }
        Ok(Self { columns: columns.into_iter().map(Option::unwrap).collect(), index })
    }

    /// Assigns the next free column to each class, in iteration order.
    fn from_ordered(classes: impl IntoIterator<Item = ClassId>) -> Self {
        let mut map = Self::new();
        for c in classes {
            map.push(c);
        }
        map
    }

    fn push(&mut self, class: ClassId) -> usize {
        let col = self.columns.len();
        self.columns.push(class);
        self.index.insert(class, col);
        col
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column_of(&self, class: ClassId) -> Option<usize> {
        self.index.get(&class).copied()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.index.contains_key(&class)
    }

    /// Classes in column order.
    pub fn classes(&self) -> &[ClassId] {
        &self.columns
    }

    /// `(class, column)` pairs sorted by class id; this is the wire form.
    pub fn sorted_pairs(&self) -> Vec<(ClassId, usize)> {
        self.index.iter().map(|(&c, &i)| (c, i)).collect()
    }
}

/// Outcome of one registration: which declared classes the server has seen
/// before and the two encoders the client must use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    /// 1-based registration index; this is the aggregation round.
    pub round: u64,
    pub known: BTreeSet<ClassId>,
    /// New classes, ascending.
    pub unknown: Vec<ClassId>,
    /// Global encoder as it stood before this registration (width d_{k−1}).
    pub known_encoder: EncoderMap,
    /// Encoder over the new classes only (width d_k − d_{k−1}).
    pub unknown_encoder: EncoderMap,
}

impl SplitResult {
    pub fn known_width(&self) -> usize {
        self.known_encoder.width()
    }

    pub fn unknown_width(&self) -> usize {
        self.unknown_encoder.width()
    }

    /// d_k after this registration.
    pub fn total_width(&self) -> usize {
        self.known_width() + self.unknown_width()
    }
}

/// Global class space. Registration must be serialized; reads are free.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    encoder: EncoderMap,
    registrations: u64,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Splits `declared` into known and unknown classes and appends the
    /// unknown ones, ascending, after the existing columns.
    pub fn register(&mut self, declared: &BTreeSet<ClassId>) -> Result<SplitResult, RegistryError> {
        if declared.is_empty() {
            return Err(RegistryError::EmptyDeclaration);
        }
        let known_encoder = self.encoder.clone();
        let (known, unknown): (BTreeSet<ClassId>, BTreeSet<ClassId>) =
            declared.iter().partition(|c| self.encoder.contains(**c));
        let unknown: Vec<ClassId> = unknown.into_iter().collect();
        for &c in &unknown {
            self.encoder.push(c);
        }
        self.registrations += 1;
        Ok(SplitResult {
            round: self.registrations,
            known,
            unknown_encoder: EncoderMap::from_ordered(unknown.iter().copied()),
            unknown,
            known_encoder,
        })
    }

    pub fn global_column_of(&self, class: ClassId) -> Result<usize, RegistryError> {
        self.encoder.column_of(class).ok_or(RegistryError::UnknownClass(class))
    }

    /// d_k: number of distinct classes registered so far.
    pub fn width(&self) -> usize {
        self.encoder.width()
    }

    pub fn encoder(&self) -> &EncoderMap {
        &self.encoder
    }

    pub fn registrations(&self) -> u64 {
        self.registrations
    }
}

/// One-hot rows for `labels` under `enc`. Labels outside the encoder's
/// domain give all-zero rows.
pub fn encode_labels(labels: &[ClassId], enc: &EncoderMap) -> Matrix {
    let mut y = Matrix::zeros(labels.len(), enc.width());
    for (i, &label) in labels.iter().enumerate() {
        if let Some(col) = enc.column_of(label) {
            y[(i, col)] = 1.0;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[u64]) -> BTreeSet<ClassId> {
        ids.iter().map(|&i| ClassId(i)).collect()
    }

    fn ids(v: &[u64]) -> Vec<ClassId> {
        v.iter().map(|&i| ClassId(i)).collect()
    }

    #[test]
    fn first_registration_is_all_unknown() {
        let mut reg = ClassRegistry::new();
        let split = reg.register(&set(&[3, 1])).unwrap();
        assert!(split.known.is_empty());
        assert_eq!(split.unknown, ids(&[1, 3]));
        assert_eq!(split.total_width(), 2);
        assert_eq!(reg.global_column_of(ClassId(1)).unwrap(), 0);
        assert_eq!(reg.global_column_of(ClassId(3)).unwrap(), 1);
        assert_eq!(split.round, 1);
    }

    #[test]
    fn second_registration_splits() {
        let mut reg = ClassRegistry::new();
        reg.register(&set(&[1, 3])).unwrap();
        let split = reg.register(&set(&[3, 7])).unwrap();
        assert_eq!(split.known, set(&[3]));
        assert_eq!(split.unknown, ids(&[7]));
        assert_eq!(split.known_width(), 2);
        assert_eq!(split.known_encoder.column_of(ClassId(3)), Some(1));
        assert_eq!(split.unknown_width(), 1);
        assert_eq!(split.unknown_encoder.column_of(ClassId(7)), Some(0));
        assert_eq!(split.total_width(), 3);
        assert_eq!(reg.global_column_of(ClassId(1)).unwrap(), 0);
        assert_eq!(reg.global_column_of(ClassId(3)).unwrap(), 1);
        assert_eq!(reg.global_column_of(ClassId(7)).unwrap(), 2);
    }

    #[test]
    fn all_known_registration() {
        let mut reg = ClassRegistry::new();
        reg.register(&set(&[1, 3])).unwrap();
        let split = reg.register(&set(&[1])).unwrap();
        assert_eq!(split.known, set(&[1]));
        assert!(split.unknown.is_empty());
        assert_eq!(split.unknown_width(), 0);
        assert_eq!(reg.width(), 2);
    }

    #[test]
    fn unregistered_class_errors() {
        let reg = ClassRegistry::new();
        assert_eq!(reg.global_column_of(ClassId(5)), Err(RegistryError::UnknownClass(ClassId(5))));
        let mut reg = reg;
        assert_eq!(reg.register(&BTreeSet::new()), Err(RegistryError::EmptyDeclaration));
    }

    #[test]
    fn encode_examples() {
        let enc = EncoderMap::from_pairs(&[(ClassId(1), 0), (ClassId(3), 1)]).unwrap();
        let y = encode_labels(&ids(&[3, 1, 3]), &enc);
        assert_eq!(y, Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(encode_labels(&ids(&[7]), &enc), Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(encode_labels(&[], &enc).shape(), (0, 2));
        assert_eq!(encode_labels(&ids(&[1, 2]), &EncoderMap::new()).shape(), (2, 0));
    }

    #[test]
    fn from_pairs_validates() {
        assert!(EncoderMap::from_pairs(&[(ClassId(1), 1)]).is_err());
        assert!(EncoderMap::from_pairs(&[(ClassId(1), 0), (ClassId(2), 0)]).is_err());
        assert!(EncoderMap::from_pairs(&[(ClassId(1), 0), (ClassId(1), 1)]).is_err());
        let enc = EncoderMap::from_pairs(&[(ClassId(9), 1), (ClassId(4), 0)]).unwrap();
        assert_eq!(enc.classes(), &ids(&[4, 9])[..]);
        assert_eq!(enc.sorted_pairs(), vec![(ClassId(4), 0), (ClassId(9), 1)]);
    }

    proptest! {
        #[test]
        fn append_only_and_block_structure(
            rounds in proptest::collection::vec(proptest::collection::btree_set(0u64..40, 1..8), 1..12)
        ) {
            let mut reg = ClassRegistry::new();
            let mut first_seen: BTreeMap<ClassId, usize> = BTreeMap::new();
            let mut prev_width = 0;
            for declared in rounds {
                let declared: BTreeSet<ClassId> = declared.into_iter().map(ClassId).collect();
                let before = reg.encoder().clone();
                let split = reg.register(&declared).unwrap();
                prop_assert!(split.known.iter().all(|c| !split.unknown.contains(c)));
                prop_assert_eq!(reg.width(), prev_width + split.unknown.len());
                prop_assert!(split.unknown.windows(2).all(|w| w[0] < w[1]));
                prev_width = reg.width();

                // Padded encodings: known classes keep [old 0], new ones get [0 new].
                let after = reg.encoder();
                for c in before.classes().iter().chain(&split.unknown) {
                    let new_row = encode_labels(&[*c], after);
                    let mut expected = vec![0.0; after.width()];
                    if let Some(col) = before.column_of(*c) {
                        expected[col] = 1.0;
                    } else {
                        let col = split.unknown_encoder.column_of(*c).unwrap();
                        expected[before.width() + col] = 1.0;
                    }
                    prop_assert_eq!(new_row.as_slice(), &expected[..]);
                }
                for (&c, &col) in &first_seen {
                    prop_assert_eq!(reg.global_column_of(c).unwrap(), col);
                }
                for &c in &split.unknown {
                    first_seen.insert(c, reg.global_column_of(c).unwrap());
                }
                prop_assert_eq!(reg.width(), first_seen.len());
            }
        }
    }
}

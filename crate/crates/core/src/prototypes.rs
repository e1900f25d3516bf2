//! Class prototypes in the teacher feature space and the per-row
//! prototype-affinity weights used to reweight the training loss.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cache::{sample_rows, WeightedCache};
use crate::data_store::EmbeddingSet;
use crate::error::{NtuaError, Result};
use crate::pseudo_labeling::PseudoLabelSet;
use crate::scalar::Scalar;

/// Per-class mean of teacher features. Prototypes are not renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    pub prototypes: Array2<T>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }
}

/// One weight per cache row, in cache row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AffinityWeights<T> {
    pub omega: Vec<T>,
}

impl<T: Scalar> AffinityWeights<T> {
    pub fn ones(rows: usize) -> Self {
        Self {
            omega: vec![T::one(); rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.omega.len()
    }

    pub fn as_array(&self) -> Array1<T> {
        Array1::from(self.omega.clone())
    }
}

struct TeacherRow {
    feature: usize,
    label: usize,
}

/// Teacher feature row and teacher label for every sample row of the cache.
fn teacher_rows<T: Scalar>(
    teacher_features: &EmbeddingSet,
    teacher_pl: &PseudoLabelSet<T>,
    cache: &WeightedCache<T>,
) -> Result<Vec<Option<TeacherRow>>> {
    if teacher_pl.num_classes != cache.num_classes() {
        return Err(NtuaError::DimMismatch {
            context: "teacher classes",
            expected: cache.num_classes(),
            found: teacher_pl.num_classes,
        });
    }
    let features = sample_rows(cache, teacher_features)?;
    let labels = teacher_pl.index_by_id();
    features
        .into_iter()
        .zip(cache.origins())
        .map(|(feature, origin)| match (feature, origin.sample_id()) {
            (Some(feature), Some(id)) => {
                let t = *labels
                    .get(id)
                    .ok_or_else(|| NtuaError::MissingTeacher(id.to_string()))?;
                Ok(Some(TeacherRow {
                    feature,
                    label: teacher_pl.labels[t],
                }))
            }
            _ => Ok(None),
        })
        .collect()
}

pub fn compute_prototypes<T: Scalar>(
    teacher_features: &EmbeddingSet,
    teacher_pl: &PseudoLabelSet<T>,
    cache: &WeightedCache<T>,
) -> Result<PrototypeSet<T>> {
    let n = cache.num_classes();
    let d = teacher_features.dim();
    let mut sums = Array2::<T>::zeros((n, d));
    let mut counts = vec![0usize; n];
    for row in teacher_rows(teacher_features, teacher_pl, cache)?.into_iter().flatten() {
        let f = teacher_features.row(row.feature);
        let mut s = sums.row_mut(row.label);
        s.zip_mut_with(&f, |acc, &x| *acc += T::from_f32_exact(x));
        counts[row.label] += 1;
    }
    for (mut s, &c) in sums.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            let denom = T::from_usize(c).expect("count fits in scalar");
            s.mapv_inplace(|x| x / denom);
        }
    }
    Ok(PrototypeSet {
        prototypes: sums,
        counts,
    })
}

/// `omega_i = clamp(f_i · p[label_i], 0, 1)`; fallback rows get 1 and rows of an
/// empty class get 0.
pub fn affinity_weights<T: Scalar>(
    teacher_features: &EmbeddingSet,
    teacher_pl: &PseudoLabelSet<T>,
    cache: &WeightedCache<T>,
    protos: &PrototypeSet<T>,
) -> Result<AffinityWeights<T>> {
    if protos.dim() != teacher_features.dim() {
        return Err(NtuaError::DimMismatch {
            context: "prototype dimension",
            expected: teacher_features.dim(),
            found: protos.dim(),
        });
    }
    let omega = teacher_rows(teacher_features, teacher_pl, cache)?
        .into_iter()
        .map(|row| match row {
            None => T::one(),
            Some(row) if protos.counts[row.label] == 0 => T::zero(),
            Some(row) => {
                let f = teacher_features.row(row.feature);
                let p = protos.prototypes.row(row.label);
                let dot = f
                    .iter()
                    .zip(p.iter())
                    .fold(T::zero(), |acc, (&x, &y)| acc + T::from_f32_exact(x) * y);
                dot.max(T::zero()).min(T::one())
            }
        })
        .collect();
    Ok(AffinityWeights { omega })
}

//! Zero-shot pseudo-labels, their confidences, and per-class shot selection.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data_store::{ClassifierWeights, EmbeddingSet};
use crate::error::{NtuaError, Result};
use crate::scalar::{argmax, cast_matrix, Scalar};

/// Softmax temperature used when none is given: logits are scaled by 100.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Student,
    Teacher,
    Synthetic,
}

/// Hard pseudo-labels with the probability the model assigned to each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PseudoLabelSet<T> {
    pub source: LabelSource,
    pub num_classes: usize,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub confidences: Vec<T>,
}

impl<T: Scalar> PseudoLabelSet<T> {
    pub fn new(
        source: LabelSource,
        num_classes: usize,
        ids: Vec<String>,
        labels: Vec<usize>,
        confidences: Vec<T>,
    ) -> Result<Self> {
        let pl = Self {
            source,
            num_classes,
            ids,
            labels,
            confidences,
        };
        pl.validate()?;
        Ok(pl)
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.labels.len() || self.confidences.len() != self.labels.len() {
            return Err(NtuaError::DimMismatch {
                context: "pseudo-label columns",
                expected: self.labels.len(),
                found: self.ids.len().min(self.confidences.len()),
            });
        }
        for (row, (&label, &c)) in self.labels.iter().zip(&self.confidences).enumerate() {
            if label >= self.num_classes {
                return Err(NtuaError::LabelOutOfRange {
                    row,
                    label,
                    num_classes: self.num_classes,
                });
            }
            if !(c > T::zero() && c <= T::one()) {
                return Err(NtuaError::invalid(format!(
                    "confidence {c} at row {row} is outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Row index for a sample id.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn index_by_id(&self) -> std::collections::HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }
}

/// `features · Wᵀ`.
pub fn zero_shot_logits<T: Scalar>(features: ArrayView2<'_, T>, classifier: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if features.ncols() != classifier.ncols() {
        return Err(NtuaError::DimMismatch {
            context: "zero-shot logits",
            expected: classifier.ncols(),
            found: features.ncols(),
        });
    }
    Ok(features.dot(&classifier.t()))
}

/// Row-wise softmax of `logits / temperature`, max-subtracted.
pub fn softmax_probs<T: Scalar>(logits: ArrayView2<'_, T>, temperature: T) -> Result<Array2<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(NtuaError::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut out = logits.to_owned();
    for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        if let Some(col) = row.iter().position(|x| !x.is_finite()) {
            return Err(NtuaError::NonFinite { row: r, col });
        }
        row.mapv_inplace(|x| x / temperature);
        let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    Ok(out)
}

/// Labels and confidences from an already computed probability matrix.
pub fn labels_from_probs<T: Scalar>(
    probs: ArrayView2<'_, T>,
    ids: Vec<String>,
    source: LabelSource,
) -> Result<PseudoLabelSet<T>> {
    let mut labels = Vec::with_capacity(probs.nrows());
    let mut confidences = Vec::with_capacity(probs.nrows());
    for row in probs.rows() {
        let (label, conf) =
            argmax(row.iter().copied()).ok_or_else(|| NtuaError::invalid("probability rows are empty"))?;
        labels.push(label);
        confidences.push(conf);
    }
    PseudoLabelSet::new(source, probs.ncols(), ids, labels, confidences)
}

pub fn make_pseudo_labels<T: Scalar>(
    features: &EmbeddingSet,
    classifier: &ClassifierWeights,
    temperature: T,
    source: LabelSource,
) -> Result<PseudoLabelSet<T>> {
    let f: Array2<T> = cast_matrix(features.features());
    let w: Array2<T> = cast_matrix(classifier.matrix());
    let logits = zero_shot_logits(f.view(), w.view())?;
    let probs = softmax_probs(logits.view(), temperature)?;
    labels_from_probs(probs.view(), features.ids().to_vec(), source)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub class: usize,
    /// Row in the pseudo-label set (and its embedding set).
    pub index: usize,
}

/// A class that got fewer than `k` real samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deficiency {
    pub class: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSelection {
    pub shots_per_class: usize,
    pub num_classes: usize,
    /// Class-major, confidence-descending within a class.
    pub selected: Vec<Shot>,
    pub padded: Vec<Deficiency>,
}

/// The `k` most confident samples of each pseudo-class; ties go to the lower index.
pub fn select_top_k<T: Scalar>(pl: &PseudoLabelSet<T>, k: usize) -> Result<ShotSelection> {
    if k == 0 {
        return Err(NtuaError::invalid("shots per class must be at least 1"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pl.num_classes];
    for (i, &label) in pl.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut selected = Vec::new();
    let mut padded = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        // stable: equal confidences keep ascending index order
        members.sort_by(|&a, &b| {
            pl.confidences[b]
                .partial_cmp(&pl.confidences[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        members.truncate(k);
        if members.len() < k {
            padded.push(Deficiency {
                class,
                missing: k - members.len(),
            });
        }
        selected.extend(members.into_iter().map(|index| Shot { class, index }));
    }
    Ok(ShotSelection {
        shots_per_class: k,
        num_classes: pl.num_classes,
        selected,
        padded,
    })
}

/// Classifier rows standing in for samples a class could not supply.
#[derive(Debug, Clone, PartialEq)]
pub struct FallbackRows<T> {
    pub keys: Array2<T>,
    pub classes: Vec<usize>,
    pub confidences: Vec<T>,
}

impl<T: Scalar> FallbackRows<T> {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

pub fn fallback_rows<T: Scalar>(classifier: &ClassifierWeights, padded: &[Deficiency]) -> Result<FallbackRows<T>> {
    let w: Array2<T> = cast_matrix(classifier.matrix());
    let total: usize = padded.iter().map(|d| d.missing).sum();
    let mut keys = Array2::zeros((total, classifier.dim()));
    let mut classes = Vec::with_capacity(total);
    let mut r = 0;
    for d in padded {
        if d.class >= classifier.num_classes() {
            return Err(NtuaError::LabelOutOfRange {
                row: r,
                label: d.class,
                num_classes: classifier.num_classes(),
            });
        }
        for _ in 0..d.missing {
            keys.row_mut(r).assign(&w.row(d.class));
            classes.push(d.class);
            r += 1;
        }
    }
    Ok(FallbackRows {
        keys,
        confidences: vec![T::one(); total],
        classes,
    })
}

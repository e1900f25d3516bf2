//! The weighted key-value cache and its retrieval logits.
//!
//! Keys are feature rows, values are one-hot pseudo-labels (stored as class
//! indices), and each row carries a confidence weight in (0, 1]. Retrieval
//! for a query `q` is
//!
//! ```text
//! cache(q)   = alpha * (phi(q · Kᵀ) ⊙ c) · V      (c = weights, or all ones)
//! adapter(q) = cache(q) + q · Wᵀ
//! phi(x)     = exp(-beta * (1 - x))
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data_store::{
    self, check_magic, get_f32_vec, get_f64, get_str, get_u32, get_u64, put_f32_slice, put_f64, put_str, put_u32,
    put_u64, ClassifierWeights, EmbeddingSet, FORMAT_VERSION, NORM_TOLERANCE,
};
use crate::error::{NtuaError, Result};
use crate::pseudo_labeling::{zero_shot_logits, FallbackRows, PseudoLabelSet, ShotSelection};
use crate::scalar::{cast_matrix, Scalar};

pub const CACHE_MAGIC: [u8; 4] = *b"NTUC";
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 5.5;

/// Where a cache row came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RowOrigin {
    /// A real sample; `index` is its row in the embedding set it was selected from.
    Sample { index: usize, id: String },
    /// A classifier row standing in for a missing sample.
    Fallback,
}

impl RowOrigin {
    pub fn sample_id(&self) -> Option<&str> {
        match self {
            RowOrigin::Sample { id, .. } => Some(id),
            RowOrigin::Fallback => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCache<T> {
    pub(crate) keys: Array2<T>,
    pub(crate) labels: Vec<usize>,
    pub(crate) weights: Array1<T>,
    pub(crate) origins: Vec<RowOrigin>,
    pub(crate) alpha: T,
    pub(crate) beta: T,
    pub(crate) num_classes: usize,
}

impl<T: Scalar> WeightedCache<T> {
    /// Checks one-hot values, unit-norm keys and weights in (0, 1].
    pub fn new(
        keys: Array2<T>,
        labels: Vec<usize>,
        weights: Array1<T>,
        origins: Vec<RowOrigin>,
        alpha: T,
        beta: T,
        num_classes: usize,
    ) -> Result<Self> {
        let cache = Self::from_parts(keys, labels, weights, origins, alpha, beta, num_classes)?;
        let tol = T::from_f64_lossy(NORM_TOLERANCE);
        for (row, k) in cache.keys.rows().into_iter().enumerate() {
            let norm = k.dot(&k).sqrt();
            if !((norm - T::one()).abs() <= tol) {
                return Err(NtuaError::NormViolation {
                    row,
                    norm: norm.to_f64_lossy(),
                    tolerance: NORM_TOLERANCE,
                });
            }
        }
        Ok(cache)
    }

    /// Like [`WeightedCache::new`] but keys may have drifted off the unit sphere.
    pub fn from_parts(
        keys: Array2<T>,
        labels: Vec<usize>,
        weights: Array1<T>,
        origins: Vec<RowOrigin>,
        alpha: T,
        beta: T,
        num_classes: usize,
    ) -> Result<Self> {
        let rows = keys.nrows();
        if rows == 0 {
            return Err(NtuaError::EmptyCache);
        }
        for (context, n) in [
            ("cache values", labels.len()),
            ("cache weights", weights.len()),
            ("cache origins", origins.len()),
        ] {
            if n != rows {
                return Err(NtuaError::DimMismatch {
                    context,
                    expected: rows,
                    found: n,
                });
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(NtuaError::LabelOutOfRange {
                    row,
                    label,
                    num_classes,
                });
            }
        }
        for (row, &w) in weights.iter().enumerate() {
            if !(w > T::zero() && w <= T::one()) {
                return Err(NtuaError::invalid(format!(
                    "cache weight {w} at row {row} is outside (0, 1]"
                )));
            }
        }
        if !(alpha >= T::zero()) || !(beta > T::zero()) {
            return Err(NtuaError::invalid(format!(
                "alpha must be >= 0 and beta > 0 (got {alpha}, {beta})"
            )));
        }
        Ok(Self {
            keys,
            labels,
            weights,
            origins,
            alpha,
            beta,
            num_classes,
        })
    }

    pub fn rows(&self) -> usize {
        self.keys.nrows()
    }

    pub fn dim(&self) -> usize {
        self.keys.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn keys(&self) -> &Array2<T> {
        &self.keys
    }

    /// Pseudo-label class of every row.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn weights(&self) -> &Array1<T> {
        &self.weights
    }

    pub fn origins(&self) -> &[RowOrigin] {
        &self.origins
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn set_alpha(&mut self, alpha: T) {
        self.alpha = alpha;
    }

    /// The dense one-hot value matrix (rows × classes).
    pub fn values(&self) -> Array2<T> {
        let mut v = Array2::zeros((self.rows(), self.num_classes));
        for (r, &c) in self.labels.iter().enumerate() {
            v[[r, c]] = T::one();
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> WeightedCache<U> {
        let conv = |x: T| U::from_f64_lossy(x.to_f64_lossy());
        WeightedCache {
            keys: self.keys.mapv(conv),
            labels: self.labels.clone(),
            weights: self.weights.mapv(conv),
            origins: self.origins.clone(),
            alpha: conv(self.alpha),
            beta: conv(self.beta),
            num_classes: self.num_classes,
        }
    }

    /// `phi(Q · Kᵀ)`, optionally scaled column-wise by the row weights.
    pub fn affinities(&self, queries: ArrayView2<'_, T>, use_weights: bool) -> Result<Array2<T>> {
        if queries.ncols() != self.dim() {
            return Err(NtuaError::DimMismatch {
                context: "cache query",
                expected: self.dim(),
                found: queries.ncols(),
            });
        }
        let beta = self.beta;
        let mut a = queries.dot(&self.keys.t()).mapv(|x| phi(x, beta));
        if use_weights {
            for mut row in a.rows_mut() {
                row.zip_mut_with(&self.weights, |x, &w| *x *= w);
            }
        }
        Ok(a)
    }

    /// Sums affinity columns into their value classes and scales by alpha.
    pub(crate) fn gather_classes(&self, affinities: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::zeros((affinities.nrows(), self.num_classes));
        for (a, mut o) in affinities.rows().into_iter().zip(out.rows_mut()) {
            for (&x, &c) in a.iter().zip(&self.labels) {
                o[c] += x;
            }
        }
        out.mapv_inplace(|x| self.alpha * x);
        out
    }
}

/// `exp(-beta * (1 - x))`.
pub fn phi<T: Scalar>(x: T, beta: T) -> T {
    (-beta * (T::one() - x)).exp()
}

/// Assembles the cache: for each class in order, its selected samples
/// (confidence-descending) followed by that class's fallback rows.
pub fn build_cache<T: Scalar>(
    selection: &ShotSelection,
    features: &EmbeddingSet,
    pl: &PseudoLabelSet<T>,
    fallback: &FallbackRows<T>,
    alpha: T,
    beta: T,
) -> Result<WeightedCache<T>> {
    if features.rows() != pl.rows() {
        return Err(NtuaError::DimMismatch {
            context: "features vs pseudo-labels",
            expected: pl.rows(),
            found: features.rows(),
        });
    }
    if !fallback.is_empty() && fallback.keys.ncols() != features.dim() {
        return Err(NtuaError::DimMismatch {
            context: "fallback rows",
            expected: features.dim(),
            found: fallback.keys.ncols(),
        });
    }
    let n = pl.num_classes;
    let d = features.dim();
    let rows = selection.selected.len() + fallback.len();
    let mut keys = Array2::zeros((rows, d));
    let mut labels = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    let mut origins = Vec::with_capacity(rows);

    let f: Array2<T> = cast_matrix(features.features());
    for class in 0..n {
        for shot in selection.selected.iter().filter(|s| s.class == class) {
            if shot.index >= pl.rows() {
                return Err(NtuaError::invalid(format!(
                    "selected index {} out of range",
                    shot.index
                )));
            }
            if pl.labels[shot.index] != class {
                return Err(NtuaError::invalid(format!(
                    "sample {} is selected for class {class} but pseudo-labeled {}",
                    shot.index, pl.labels[shot.index]
                )));
            }
            keys.row_mut(labels.len()).assign(&f.row(shot.index));
            labels.push(class);
            weights.push(pl.confidences[shot.index]);
            origins.push(RowOrigin::Sample {
                index: shot.index,
                id: pl.ids[shot.index].clone(),
            });
        }
        for (r, _) in fallback.classes.iter().enumerate().filter(|(_, &c)| c == class) {
            keys.row_mut(labels.len()).assign(&fallback.keys.row(r));
            labels.push(class);
            weights.push(fallback.confidences[r]);
            origins.push(RowOrigin::Fallback);
        }
    }
    if labels.len() != rows {
        return Err(NtuaError::invalid(
            "selection or fallback refers to a class outside the label set",
        ));
    }
    WeightedCache::new(keys, labels, Array1::from(weights), origins, alpha, beta, n)
}

/// `alpha * (phi(Q · Kᵀ) [⊙ c]) · V` for a batch of queries.
pub fn cache_logits<T: Scalar>(
    queries: ArrayView2<'_, T>,
    cache: &WeightedCache<T>,
    use_weights: bool,
) -> Result<Array2<T>> {
    let a = cache.affinities(queries, use_weights)?;
    Ok(cache.gather_classes(a.view()))
}

/// Cache logits plus `clip_scale * Q · Wᵀ`.
pub fn adapter_logits_scaled<T: Scalar>(
    queries: ArrayView2<'_, T>,
    cache: &WeightedCache<T>,
    classifier: ArrayView2<'_, T>,
    use_weights: bool,
    clip_scale: T,
) -> Result<Array2<T>> {
    if classifier.nrows() != cache.num_classes {
        return Err(NtuaError::DimMismatch {
            context: "classifier classes",
            expected: cache.num_classes,
            found: classifier.nrows(),
        });
    }
    let mut logits = cache_logits(queries, cache, use_weights)?;
    let zs = zero_shot_logits(queries, classifier)?;
    if clip_scale == T::one() {
        logits += &zs;
    } else {
        logits.zip_mut_with(&zs, |l, &z| *l += clip_scale * z);
    }
    Ok(logits)
}

/// Cache logits plus the zero-shot term `Q · Wᵀ`.
pub fn adapter_logits<T: Scalar>(
    queries: ArrayView2<'_, T>,
    cache: &WeightedCache<T>,
    classifier: ArrayView2<'_, T>,
    use_weights: bool,
) -> Result<Array2<T>> {
    adapter_logits_scaled(queries, cache, classifier, use_weights, T::one())
}

/// Replaces values and weights of sample rows with the teacher's labels and
/// confidences. Keys and fallback rows are left alone.
pub fn refine_cache<T: Scalar>(cache: &WeightedCache<T>, teacher: &PseudoLabelSet<T>) -> Result<WeightedCache<T>> {
    if teacher.num_classes != cache.num_classes {
        return Err(NtuaError::DimMismatch {
            context: "teacher classes",
            expected: cache.num_classes,
            found: teacher.num_classes,
        });
    }
    let index = teacher.index_by_id();
    let mut refined = cache.clone();
    for (r, origin) in cache.origins.iter().enumerate() {
        if let Some(id) = origin.sample_id() {
            let t = *index.get(id).ok_or_else(|| NtuaError::MissingTeacher(id.to_string()))?;
            refined.labels[r] = teacher.labels[t];
            refined.weights[r] = teacher.confidences[t];
        }
    }
    Ok(refined)
}

/// Row lookup from cache rows into an embedding set, by sample id.
pub(crate) fn sample_rows<T>(cache: &WeightedCache<T>, set: &EmbeddingSet) -> Result<Vec<Option<usize>>> {
    let index: HashMap<&str, usize> = set.id_index();
    cache
        .origins
        .iter()
        .map(|o| match o.sample_id() {
            Some(id) => index
                .get(id)
                .copied()
                .map(Some)
                .ok_or_else(|| NtuaError::MissingFeature(id.to_string())),
            None => Ok(None),
        })
        .collect()
}

/// Query features for every cache row: the sample's feature from `features`,
/// or the classifier row of its class for fallback rows.
pub fn cache_queries<T: Scalar>(
    cache: &WeightedCache<T>,
    features: &EmbeddingSet,
    classifier: &ClassifierWeights,
) -> Result<Array2<T>> {
    if features.dim() != cache.dim() || classifier.dim() != cache.dim() {
        return Err(NtuaError::DimMismatch {
            context: "training queries",
            expected: cache.dim(),
            found: features.dim(),
        });
    }
    let rows = sample_rows(cache, features)?;
    let mut q = Array2::zeros((cache.rows(), cache.dim()));
    for (r, src) in rows.into_iter().enumerate() {
        let row = match src {
            Some(i) => features.row(i),
            None => classifier.matrix().row(cache.labels[r]),
        };
        q.row_mut(r).assign(&row.mapv(T::from_f32_exact));
    }
    Ok(q)
}

// ---------------------------------------------------------------------------
// Cache file:
//   "NTUC" | version u32 | rows u64 | dim u32 | classes u32 | alpha f64 | beta f64
//   keys rows*dim f32 | labels rows u32 | weights rows f64
//   origins rows * (tag u8, index u64, id string)
// Keys are stored as binary32; weights and hyperparameters as binary64.

pub fn write_cache_to<T: Scalar>(cache: &WeightedCache<T>, out: &mut impl Write) -> Result<()> {
    out.write_all(&CACHE_MAGIC)?;
    put_u32(out, FORMAT_VERSION)?;
    put_u64(out, cache.rows() as u64)?;
    put_u32(out, cache.dim() as u32)?;
    put_u32(out, cache.num_classes as u32)?;
    put_f64(out, cache.alpha.to_f64_lossy())?;
    put_f64(out, cache.beta.to_f64_lossy())?;
    put_f32_slice(out, cache.keys.iter().map(|x| x.to_f32_lossy()))?;
    for &l in &cache.labels {
        put_u32(out, l as u32)?;
    }
    for &w in &cache.weights {
        put_f64(out, w.to_f64_lossy())?;
    }
    for origin in &cache.origins {
        match origin {
            RowOrigin::Sample { index, id } => {
                out.write_all(&[0])?;
                put_u64(out, *index as u64)?;
                put_str(out, id)?;
            }
            RowOrigin::Fallback => {
                out.write_all(&[1])?;
                put_u64(out, 0)?;
                put_str(out, "")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_cache_from<T: Scalar>(input: &mut impl Read) -> Result<WeightedCache<T>> {
    check_magic(input, CACHE_MAGIC)?;
    let rows = get_u64(input, "cache rows")? as usize;
    let dim = get_u32(input, "cache dim")? as usize;
    let classes = get_u32(input, "cache classes")? as usize;
    let alpha = get_f64(input, "alpha")?;
    let beta = get_f64(input, "beta")?;
    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| NtuaError::Truncated("cache size overflow".into()))?;
    let keys = get_f32_vec(input, count, "cache keys")?;
    let mut labels = Vec::new();
    for _ in 0..rows {
        labels.push(get_u32(input, "cache labels")? as usize);
    }
    let mut weights = Vec::new();
    for _ in 0..rows {
        weights.push(T::from_f64_lossy(get_f64(input, "cache weights")?));
    }
    let mut origins = Vec::new();
    for _ in 0..rows {
        let [tag] = data_store::get_array::<1>(input, "origin tag")?;
        let index = get_u64(input, "origin index")? as usize;
        let id = get_str(input, "origin id")?;
        origins.push(match tag {
            0 => RowOrigin::Sample { index, id },
            1 => RowOrigin::Fallback,
            t => return Err(NtuaError::invalid(format!("unknown row origin tag {t}"))),
        });
    }
    let keys = Array2::from_shape_vec((rows, dim), keys).map_err(|e| NtuaError::invalid(e.to_string()))?;
    WeightedCache::from_parts(
        keys.mapv(T::from_f32_exact),
        labels,
        Array1::from(weights),
        origins,
        T::from_f64_lossy(alpha),
        T::from_f64_lossy(beta),
        classes,
    )
}

pub fn write_cache<T: Scalar>(cache: &WeightedCache<T>, path: &Path) -> Result<()> {
    write_cache_to(cache, &mut data_store::create(path)?)
}

pub fn read_cache<T: Scalar>(path: &Path) -> Result<WeightedCache<T>> {
    read_cache_from(&mut data_store::open(path)?)
}

//! Accuracy reports, the end-to-end pipeline, and the four-variant ablation.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::cache::{adapter_logits, build_cache, refine_cache, WeightedCache, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::data_store::{ClassifierWeights, EmbeddingSet, GroundTruthLabels};
use crate::error::{NtuaError, Result};
use crate::prototypes::{affinity_weights, compute_prototypes, AffinityWeights};
use crate::pseudo_labeling::{
    fallback_rows, make_pseudo_labels, select_top_k, LabelSource, PseudoLabelSet, DEFAULT_TEMPERATURE,
};
use crate::scalar::{argmax, cast_matrix, Scalar};
use crate::trainer::{train_keys, TrainConfig, TrainReport};

/// Test rows handled per parallel task. Fixed so results do not depend on
/// the thread count.
const EVAL_CHUNK: usize = 64;

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub name: String,
    pub total: usize,
    pub correct: usize,
    /// Zero for classes absent from the test split.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub alpha: f64,
    pub beta: f64,
    pub cache_rows: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub use_cache_weights: bool,
    pub total: usize,
    pub correct: usize,
    /// `correct / total`, rounded to 4 decimals.
    pub accuracy: f64,
    /// Accuracy of the other inference mode (weights toggled), same rounding.
    pub accuracy_other_mode: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub config: EvalEcho,
}

impl EvalReport {
    pub fn exact_accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Argmax of the adapter logits for every query row.
pub fn predict<T: Scalar>(
    cache: &WeightedCache<T>,
    queries: ArrayView2<'_, T>,
    classifier: ArrayView2<'_, T>,
    use_weights: bool,
) -> Result<Vec<usize>> {
    let chunks: Vec<_> = queries.axis_chunks_iter(Axis(0), EVAL_CHUNK).collect();
    let parts: Vec<Result<Vec<usize>>> = chunks
        .into_par_iter()
        .map(|q| {
            let logits = adapter_logits(q, cache, classifier, use_weights)?;
            Ok(logits
                .rows()
                .into_iter()
                .map(|r| argmax(r.iter().copied()).map_or(0, |(c, _)| c))
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(queries.nrows());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    cache: &WeightedCache<T>,
    test: &EmbeddingSet,
    labels: &GroundTruthLabels,
    classifier: &ClassifierWeights,
    use_weights: bool,
) -> Result<EvalReport> {
    evaluate_split("test", cache, test, labels, classifier, use_weights)
}

pub fn evaluate_split<T: Scalar>(
    split: &str,
    cache: &WeightedCache<T>,
    test: &EmbeddingSet,
    labels: &GroundTruthLabels,
    classifier: &ClassifierWeights,
    use_weights: bool,
) -> Result<EvalReport> {
    if test.rows() == 0 {
        return Err(NtuaError::EmptyTestSet);
    }
    if labels.rows() != test.rows() {
        return Err(NtuaError::DimMismatch {
            context: "test labels",
            expected: test.rows(),
            found: labels.rows(),
        });
    }
    let n = cache.num_classes();
    if classifier.num_classes() != n || labels.num_classes != n {
        return Err(NtuaError::DimMismatch {
            context: "evaluation classes",
            expected: n,
            found: classifier.num_classes(),
        });
    }
    let q: Array2<T> = cast_matrix(test.features());
    let w: Array2<T> = cast_matrix(classifier.matrix());
    let pred = predict(cache, q.view(), w.view(), use_weights)?;
    let other = predict(cache, q.view(), w.view(), !use_weights)?;

    let mut confusion = vec![vec![0usize; n]; n];
    for (&y, &p) in labels.labels.iter().zip(&pred) {
        confusion[y][p] += 1;
    }
    let correct = (0..n).map(|c| confusion[c][c]).sum::<usize>();
    let other_correct = labels.labels.iter().zip(&other).filter(|(y, p)| y == p).count();
    let total = test.rows();
    let per_class = (0..n)
        .map(|c| {
            let t = confusion[c].iter().sum::<usize>();
            ClassAccuracy {
                class: c,
                name: classifier.class_names()[c].clone(),
                total: t,
                correct: confusion[c][c],
                accuracy: if t == 0 {
                    0.0
                } else {
                    round4(confusion[c][c] as f64 / t as f64)
                },
            }
        })
        .collect();
    Ok(EvalReport {
        split: split.to_string(),
        use_cache_weights: use_weights,
        total,
        correct,
        accuracy: round4(correct as f64 / total as f64),
        accuracy_other_mode: round4(other_correct as f64 / total as f64),
        per_class,
        confusion,
        config: EvalEcho {
            alpha: cache.alpha().to_f64_lossy(),
            beta: cache.beta().to_f64_lossy(),
            cache_rows: cache.rows(),
            num_classes: n,
        },
    })
}

// ---------------------------------------------------------------------------
// Pipeline and ablation.

/// The four cumulative ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Student pseudo-labels, unweighted cache, unweighted loss.
    #[serde(rename = "KC")]
    Kc,
    /// Teacher-refined values, unweighted.
    #[serde(rename = "KCR")]
    Kcr,
    /// Refined values with confidence weights in the cache.
    #[serde(rename = "KCR+CKC")]
    KcrCkc,
    /// All of the above plus the prototype-affinity weighted loss.
    #[serde(rename = "KCR+CKC+omega")]
    KcrCkcOmega,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Kc, Variant::Kcr, Variant::KcrCkc, Variant::KcrCkcOmega];

    pub fn refines(self) -> bool {
        self != Variant::Kc
    }

    pub fn weighted_cache(self) -> bool {
        matches!(self, Variant::KcrCkc | Variant::KcrCkcOmega)
    }

    pub fn omega(self) -> bool {
        self == Variant::KcrCkcOmega
    }
}

/// Which cache weighting the final prediction uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceWeights {
    /// Plain affinities, as in the unweighted retrieval formula.
    Off,
    /// Confidence-scaled affinities.
    On,
    /// Scale at inference exactly when the variant trained with weights.
    MatchTraining,
}

impl InferenceWeights {
    pub fn resolve(self, variant: Variant) -> bool {
        match self {
            InferenceWeights::Off => false,
            InferenceWeights::On => true,
            InferenceWeights::MatchTraining => variant.weighted_cache(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub shots: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Softmax temperature for pseudo-labels computed from features.
    pub temperature: f64,
    pub inference: InferenceWeights,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            temperature: DEFAULT_TEMPERATURE,
            inference: InferenceWeights::Off,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub initial_cache: WeightedCache<f64>,
    pub omega: Option<AffinityWeights<f64>>,
    pub cache: WeightedCache<f64>,
    pub train: TrainReport,
    pub eval: EvalReport,
}

fn student_labels(bundle: &Bundle, cfg: &PipelineConfig) -> Result<PseudoLabelSet<f64>> {
    match &bundle.student_pl {
        Some(pl) => Ok(pl.clone()),
        None => make_pseudo_labels(&bundle.train, &bundle.classifier, cfg.temperature, LabelSource::Student),
    }
}

fn teacher_labels(bundle: &Bundle, cfg: &PipelineConfig) -> Result<PseudoLabelSet<f64>> {
    match &bundle.teacher_pl {
        Some(pl) => Ok(pl.clone()),
        None => make_pseudo_labels(
            &bundle.teacher_train,
            &bundle.classifier,
            cfg.temperature,
            LabelSource::Teacher,
        ),
    }
}

/// The cache every variant starts from: top-k student samples plus fallbacks.
pub fn initial_cache(bundle: &Bundle, cfg: &PipelineConfig) -> Result<WeightedCache<f64>> {
    let pl = student_labels(bundle, cfg)?;
    let sel = select_top_k(&pl, cfg.shots)?;
    let fb = fallback_rows(&bundle.classifier, &sel.padded)?;
    build_cache(&sel, &bundle.train, &pl, &fb, cfg.alpha, cfg.beta)
}

pub fn run_variant(bundle: &Bundle, variant: Variant, cfg: &PipelineConfig) -> Result<VariantOutcome> {
    bundle.validate()?;
    let mut cache = initial_cache(bundle, cfg)?;
    let start = cache.clone();
    let mut omega = None;
    if variant.refines() {
        let teacher = teacher_labels(bundle, cfg)?;
        cache = refine_cache(&cache, &teacher)?;
        if variant.omega() {
            let protos = compute_prototypes(&bundle.teacher_train, &teacher, &cache)?;
            omega = Some(affinity_weights(&bundle.teacher_train, &teacher, &cache, &protos)?);
        }
    }
    let train_cfg = TrainConfig {
        use_weights_in_loss: variant.weighted_cache(),
        include_omega: variant.omega(),
        ..cfg.train.clone()
    };
    let (trained, report) = train_keys(&cache, &bundle.train, omega.as_ref(), &bundle.classifier, &train_cfg)?;
    let eval = evaluate(
        &trained,
        &bundle.test,
        &bundle.test_labels,
        &bundle.classifier,
        cfg.inference.resolve(variant),
    )?;
    Ok(VariantOutcome {
        variant,
        initial_cache: start,
        omega,
        cache: trained,
        train: report,
        eval,
    })
}

/// The full method (refinement, weighted cache, prototype-weighted loss).
pub fn run_pipeline(bundle: &Bundle, cfg: &PipelineConfig) -> Result<VariantOutcome> {
    run_variant(bundle, Variant::KcrCkcOmega, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl From<&EvalReport> for VariantScore {
    fn from(r: &EvalReport) -> Self {
        Self {
            correct: r.correct,
            total: r.total,
            accuracy: r.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seed: u64,
    pub shots: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    #[serde(rename = "KC")]
    pub kc: VariantScore,
    #[serde(rename = "KCR")]
    pub kcr: VariantScore,
    #[serde(rename = "KCR+CKC")]
    pub kcr_ckc: VariantScore,
    #[serde(rename = "KCR+CKC+omega")]
    pub kcr_ckc_omega: VariantScore,
}

impl AblationResult {
    pub fn score(&self, v: Variant) -> VariantScore {
        match v {
            Variant::Kc => self.kc,
            Variant::Kcr => self.kcr,
            Variant::KcrCkc => self.kcr_ckc,
            Variant::KcrCkcOmega => self.kcr_ckc_omega,
        }
    }
}

/// Runs all four variants on the same bundle with the same seed.
pub fn run_ablation(bundle: &Bundle, cfg: &PipelineConfig) -> Result<AblationResult> {
    let mut scores = Vec::with_capacity(4);
    for v in Variant::ALL {
        scores.push(VariantScore::from(&run_variant(bundle, v, cfg)?.eval));
    }
    Ok(AblationResult {
        seed: cfg.train.seed,
        shots: cfg.shots,
        train_rows: bundle.train.rows(),
        test_rows: bundle.test.rows(),
        kc: scores[0],
        kcr: scores[1],
        kcr_ckc: scores[2],
        kcr_ckc_omega: scores[3],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config: PipelineConfig,
    pub runs: Vec<AblationResult>,
    /// Mean exact accuracy per variant, rounded to 4 decimals.
    pub mean_accuracy: MeanAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAccuracy {
    #[serde(rename = "KC")]
    pub kc: f64,
    #[serde(rename = "KCR")]
    pub kcr: f64,
    #[serde(rename = "KCR+CKC")]
    pub kcr_ckc: f64,
    #[serde(rename = "KCR+CKC+omega")]
    pub kcr_ckc_omega: f64,
}

/// Repeats the ablation with training seeds `base_seed..base_seed + count`.
pub fn run_ablation_seeds(bundle: &Bundle, cfg: &PipelineConfig, count: usize) -> Result<AblationSummary> {
    let mut runs = Vec::with_capacity(count);
    for i in 0..count {
        let mut c = cfg.clone();
        c.train.seed = cfg.train.seed.wrapping_add(i as u64);
        runs.push(run_ablation(bundle, &c)?);
    }
    let mean = |v: Variant| {
        if runs.is_empty() {
            return 0.0;
        }
        let s: f64 = runs
            .iter()
            .map(|r| {
                let sc = r.score(v);
                sc.correct as f64 / sc.total as f64
            })
            .sum();
        round4(s / runs.len() as f64)
    };
    let mean_accuracy = MeanAccuracy {
        kc: mean(Variant::Kc),
        kcr: mean(Variant::Kcr),
        kcr_ckc: mean(Variant::KcrCkc),
        kcr_ckc_omega: mean(Variant::KcrCkcOmega),
    };
    Ok(AblationSummary {
        config: cfg.clone(),
        runs,
        mean_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::RowOrigin;
    use ndarray::{array, Array1};

    fn basis_classifier() -> ClassifierWeights {
        ClassifierWeights::new(array![[1.0f32, 0.0], [0.0, 1.0]], vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn zero_alpha_matches_zero_shot_accuracy() {
        let w = basis_classifier();
        let test = EmbeddingSet::with_default_ids(array![[0.6f32, 0.8], [0.8, 0.6], [1.0, 0.0]], "t").unwrap();
        let y = GroundTruthLabels::new(vec![1, 1, 0], 2).unwrap();
        // a misleading cache that zero alpha must silence
        let cache = WeightedCache::new(
            array![[0.6, 0.8]],
            vec![0],
            array![1.0],
            vec![RowOrigin::Fallback],
            0.0,
            5.5,
            2,
        )
        .unwrap();
        let r = evaluate(&cache, &test, &y, &w, false).unwrap();
        assert_eq!(r.correct, 2);
        assert_eq!(r.accuracy, 0.6667);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn self_retrieval_with_large_alpha_is_perfect() {
        let w = basis_classifier();
        let keys = array![[0.8f32, 0.6], [0.6, 0.8], [0.28, 0.96], [0.96, 0.28]];
        let test = EmbeddingSet::with_default_ids(keys.clone(), "t").unwrap();
        // every label disagrees with the zero-shot classifier
        let y = GroundTruthLabels::new(vec![1, 0, 0, 1], 2).unwrap();
        let cache = WeightedCache::new(
            keys.mapv(f64::from),
            y.labels.clone(),
            Array1::ones(4),
            vec![RowOrigin::Fallback; 4],
            1000.0,
            50.0,
            2,
        )
        .unwrap();
        let r = evaluate(&cache, &test, &y, &w, false).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let zs = evaluate(&WeightedCache { alpha: 0.0, ..cache }, &test, &y, &w, false).unwrap();
        assert_eq!(zs.accuracy, 0.0);
    }

    #[test]
    fn per_class_accuracy_averages_to_top1() {
        let w = basis_classifier();
        let test = EmbeddingSet::with_default_ids(
            array![[0.6f32, 0.8], [0.8, 0.6], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
            "t",
        )
        .unwrap();
        let y = GroundTruthLabels::new(vec![1, 1, 0, 0, 1], 2).unwrap();
        let cache = WeightedCache::new(
            array![[1.0, 0.0]],
            vec![0],
            array![0.5],
            vec![RowOrigin::Fallback],
            0.0,
            5.5,
            2,
        )
        .unwrap();
        let r = evaluate(&cache, &test, &y, &w, true).unwrap();
        let weighted: usize = r.per_class.iter().map(|c| c.correct).sum();
        assert_eq!(weighted, r.correct);
        assert_eq!(r.per_class.iter().map(|c| c.total).sum::<usize>(), r.total);
    }

    #[test]
    fn single_row_accuracy_is_zero_or_one() {
        let w = basis_classifier();
        let test = EmbeddingSet::with_default_ids(array![[0.6f32, 0.8]], "t").unwrap();
        let cache = WeightedCache::new(
            array![[1.0, 0.0]],
            vec![0],
            array![0.5],
            vec![RowOrigin::Fallback],
            1.0,
            5.5,
            2,
        )
        .unwrap();
        for label in 0..2 {
            let r = evaluate(
                &cache,
                &test,
                &GroundTruthLabels::new(vec![label], 2).unwrap(),
                &w,
                false,
            )
            .unwrap();
            assert!(r.accuracy == 0.0 || r.accuracy == 1.0);
        }
    }

    #[test]
    fn empty_test_set_is_refused() {
        let w = basis_classifier();
        let test = EmbeddingSet::new(Array2::zeros((0, 2)), vec![]).unwrap();
        let cache = WeightedCache::new(
            array![[1.0, 0.0]],
            vec![0],
            array![0.5],
            vec![RowOrigin::Fallback],
            1.0,
            5.5,
            2,
        )
        .unwrap();
        let y = GroundTruthLabels::new(vec![], 2).unwrap();
        assert!(matches!(
            evaluate(&cache, &test, &y, &w, false),
            Err(NtuaError::EmptyTestSet)
        ));
    }
}

//! Seeded synthetic embedding problems with controllable pseudo-label noise.
//!
//! All randomness comes from one `ChaCha8Rng` seeded with `SynthSpec::seed`
//! (`rand_chacha`'s 8-round ChaCha stream, `seed_from_u64`). Draw order:
//!
//! 1. class directions: `classes` standard-normal vectors of length `dim`,
//!    orthonormalized with modified Gram-Schmidt;
//! 2. classifier rows: `normalize(direction + classifier_shift * g)`, class by class;
//! 3. training pool, class-major: for every sample a student feature then a
//!    teacher feature, each `normalize(direction + g / concentration)`;
//! 4. test set, class-major, same model as the student features;
//! 5. per training sample, in order: flip draw, teacher flip draw, student
//!    wrong class, teacher wrong class, student confidence draw, teacher
//!    confidence draw.
//!
//! A wrong label is uniform over the other classes. A confidence draw `u` in
//! (0, 1] becomes `rho/2 + (1 - rho/2) u` for a correct label and
//! `(1 - rho/2) u` for a wrong one, so `rho = 0` makes confidence independent
//! of correctness and `rho = 1` separates the two groups at 0.5.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::data_store::{ClassifierWeights, EmbeddingSet, GroundTruthLabels};
use crate::error::{NtuaError, Result};
use crate::pseudo_labeling::{LabelSource, PseudoLabelSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub shots: usize,
    pub dim: usize,
    /// Unlabeled training samples generated per class (the selection pool).
    pub pool_per_class: usize,
    pub test_per_class: usize,
    /// Higher values pull samples closer to their class direction.
    pub concentration: f64,
    /// Gaussian scale separating the classifier rows from the class directions.
    pub classifier_shift: f64,
    pub eta_student: f64,
    pub eta_teacher: f64,
    pub rho: f64,
    /// Teacher flips reuse the student's flip draw, so teacher errors are a
    /// subset of student errors whenever `eta_teacher <= eta_student`.
    pub nested: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            shots: 16,
            dim: 64,
            pool_per_class: 16,
            test_per_class: 100,
            concentration: 4.0,
            classifier_shift: 0.2,
            eta_student: 0.4,
            eta_teacher: 0.1,
            rho: 0.9,
            nested: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 {
            return Err(NtuaError::invalid("classes and dim must be positive"));
        }
        if self.dim < self.classes {
            return Err(NtuaError::invalid(format!(
                "dim {} is smaller than the number of classes {}; cannot place orthogonal class directions",
                self.dim, self.classes
            )));
        }
        if self.shots == 0 {
            return Err(NtuaError::invalid("shots must be positive"));
        }
        for (name, v) in [
            ("eta_student", self.eta_student),
            ("eta_teacher", self.eta_teacher),
            ("rho", self.rho),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(NtuaError::invalid(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.concentration > 0.0) || !(self.classifier_shift >= 0.0) {
            return Err(NtuaError::invalid(
                "concentration must be > 0 and classifier_shift >= 0",
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn to_rows(rows: &[Array1<f64>], dim: usize) -> Array2<f32> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.assign(&src.mapv(|x| x as f32));
    }
    m
}

fn orthonormal_directions(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Array1<f64>> {
    let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(n);
    while dirs.len() < n {
        let mut v = gaussian(rng, dim);
        for u in &dirs {
            let p = v.dot(u);
            v.scaled_add(-p, u);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            dirs.push(v / norm);
        }
    }
    dirs
}

fn confidence(u: f64, correct: bool, rho: f64) -> f64 {
    if correct {
        rho / 2.0 + (1.0 - rho / 2.0) * u
    } else {
        (1.0 - rho / 2.0) * u
    }
}

fn wrong_class(rng: &mut ChaCha8Rng, truth: usize, n: usize) -> usize {
    if n < 2 {
        return truth;
    }
    let k = rng.random_range(0..n - 1);
    if k >= truth {
        k + 1
    } else {
        k
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Bundle> {
    spec.validate()?;
    let n = spec.classes;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let dirs = orthonormal_directions(&mut rng, n, d);
    let w_rows: Vec<_> = dirs
        .iter()
        .map(|dir| normalized(dir + &(gaussian(&mut rng, d) * spec.classifier_shift)))
        .collect();
    let class_names = (0..n).map(|c| format!("class_{c}")).collect();
    let classifier = ClassifierWeights::new(to_rows(&w_rows, d), class_names)?;

    let sample = |rng: &mut ChaCha8Rng, c: usize| normalized(&dirs[c] + &(gaussian(rng, d) / spec.concentration));

    let mut student = Vec::new();
    let mut teacher = Vec::new();
    let mut truth = Vec::new();
    for c in 0..n {
        for _ in 0..spec.pool_per_class {
            student.push(sample(&mut rng, c));
            teacher.push(sample(&mut rng, c));
            truth.push(c);
        }
    }
    let mut test = Vec::new();
    let mut test_truth = Vec::new();
    for c in 0..n {
        for _ in 0..spec.test_per_class {
            test.push(sample(&mut rng, c));
            test_truth.push(c);
        }
    }

    let mut s_labels = Vec::with_capacity(truth.len());
    let mut s_conf = Vec::with_capacity(truth.len());
    let mut t_labels = Vec::with_capacity(truth.len());
    let mut t_conf = Vec::with_capacity(truth.len());
    for &y in &truth {
        let flip: f64 = rng.random();
        let flip_teacher: f64 = rng.random();
        let wrong_s = wrong_class(&mut rng, y, n);
        let wrong_t = wrong_class(&mut rng, y, n);
        let us = 1.0 - rng.random::<f64>();
        let ut = 1.0 - rng.random::<f64>();

        let s_wrong = n > 1 && flip < spec.eta_student;
        let (t_wrong, t_class) = if spec.nested {
            (n > 1 && flip < spec.eta_teacher, wrong_s)
        } else {
            (n > 1 && flip_teacher < spec.eta_teacher, wrong_t)
        };
        s_labels.push(if s_wrong { wrong_s } else { y });
        s_conf.push(confidence(us, !s_wrong, spec.rho));
        t_labels.push(if t_wrong { t_class } else { y });
        t_conf.push(confidence(ut, !t_wrong, spec.rho));
    }

    let train = EmbeddingSet::with_default_ids(to_rows(&student, d), "train_")?;
    let ids = train.ids().to_vec();
    let teacher_train = EmbeddingSet::new(to_rows(&teacher, d), ids.clone())?;
    let test = EmbeddingSet::with_default_ids(to_rows(&test, d), "test_")?;

    Ok(Bundle {
        classifier,
        train,
        teacher_train,
        test,
        test_labels: GroundTruthLabels::new(test_truth, n)?,
        train_labels: Some(GroundTruthLabels::new(truth, n)?),
        student_pl: Some(PseudoLabelSet::new(
            LabelSource::Synthetic,
            n,
            ids.clone(),
            s_labels,
            s_conf,
        )?),
        teacher_pl: Some(PseudoLabelSet::new(LabelSource::Synthetic, n, ids, t_labels, t_conf)?),
    })
}

/// Mean confidence of correct and incorrect pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGap {
    pub correct: usize,
    pub incorrect: usize,
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
    /// `mean_correct - mean_incorrect`; `None` when either group is empty.
    pub gap: Option<f64>,
}

pub fn verify_figure4_shape<T: crate::scalar::Scalar>(
    pl: &PseudoLabelSet<T>,
    truth: &GroundTruthLabels,
) -> Result<ConfidenceGap> {
    if pl.rows() != truth.rows() {
        return Err(NtuaError::DimMismatch {
            context: "pseudo-labels vs ground truth",
            expected: truth.rows(),
            found: pl.rows(),
        });
    }
    let (mut sc, mut nc, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for ((&l, &c), &y) in pl.labels.iter().zip(&pl.confidences).zip(&truth.labels) {
        if l == y {
            sc += c.to_f64_lossy();
            nc += 1;
        } else {
            si += c.to_f64_lossy();
            ni += 1;
        }
    }
    let mean_correct = (nc > 0).then(|| sc / nc as f64);
    let mean_incorrect = (ni > 0).then(|| si / ni as f64);
    Ok(ConfidenceGap {
        correct: nc,
        incorrect: ni,
        mean_correct,
        mean_incorrect,
        gap: mean_correct.zip(mean_incorrect).map(|(a, b)| a - b),
    })
}

//! A complete set of pipeline inputs, stored as a directory plus manifest.

use std::path::Path;

use crate::data_store::{
    read_classifier, read_embeddings, read_json, read_labels, read_manifest, write_classifier, write_embeddings,
    write_json, write_labels, write_manifest, BundleManifest, ClassifierWeights, EmbeddingSet, GroundTruthLabels,
    SplitEntry, SplitKind,
};
use crate::error::{NtuaError, Result};
use crate::pseudo_labeling::PseudoLabelSet;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Split names used in bundle manifests.
pub mod split {
    pub const CLASSIFIER: &str = "classifier";
    pub const TRAIN: &str = "train";
    pub const TEACHER_TRAIN: &str = "teacher_train";
    pub const TEST: &str = "test";
    pub const TEST_LABELS: &str = "test_labels";
    pub const TRAIN_LABELS: &str = "train_labels";
    pub const STUDENT_PL: &str = "student_pl";
    pub const TEACHER_PL: &str = "teacher_pl";
}

/// Everything the full pipeline and the ablation need. Pseudo-label splits
/// are optional; when absent they are computed from the features.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub classifier: ClassifierWeights,
    pub train: EmbeddingSet,
    pub teacher_train: EmbeddingSet,
    pub test: EmbeddingSet,
    pub test_labels: GroundTruthLabels,
    pub train_labels: Option<GroundTruthLabels>,
    pub student_pl: Option<PseudoLabelSet<f64>>,
    pub teacher_pl: Option<PseudoLabelSet<f64>>,
}

impl Bundle {
    pub fn validate(&self) -> Result<()> {
        let d = self.classifier.dim();
        for (context, set) in [
            ("train", &self.train),
            ("teacher_train", &self.teacher_train),
            ("test", &self.test),
        ] {
            if set.dim() != d {
                return Err(NtuaError::DimMismatch {
                    context,
                    expected: d,
                    found: set.dim(),
                });
            }
        }
        if self.teacher_train.ids() != self.train.ids() {
            return Err(NtuaError::invalid(
                "teacher features must share sample ids with the training features",
            ));
        }
        if self.test.rows() != self.test_labels.rows() {
            return Err(NtuaError::DimMismatch {
                context: "test labels",
                expected: self.test.rows(),
                found: self.test_labels.rows(),
            });
        }
        Ok(())
    }

    /// Writes every split plus `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<BundleManifest> {
        std::fs::create_dir_all(dir).map_err(|source| NtuaError::File {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut manifest = BundleManifest::new(self.classifier.dim(), self.classifier.class_names().to_vec());
        let mut add = |name: &str, kind: SplitKind, file: &str, rows: usize| {
            manifest.splits.insert(
                name.to_string(),
                SplitEntry {
                    kind,
                    path: file.into(),
                    rows,
                },
            );
        };
        write_classifier(&self.classifier, &dir.join("classifier.bin"))?;
        add(
            split::CLASSIFIER,
            SplitKind::Classifier,
            "classifier.bin",
            self.classifier.num_classes(),
        );
        write_embeddings(&self.train, &dir.join("train.bin"))?;
        add(split::TRAIN, SplitKind::Embeddings, "train.bin", self.train.rows());
        write_embeddings(&self.teacher_train, &dir.join("teacher_train.bin"))?;
        add(
            split::TEACHER_TRAIN,
            SplitKind::Embeddings,
            "teacher_train.bin",
            self.teacher_train.rows(),
        );
        write_embeddings(&self.test, &dir.join("test.bin"))?;
        add(split::TEST, SplitKind::Embeddings, "test.bin", self.test.rows());
        write_labels(&self.test_labels, &dir.join("test_labels.json"))?;
        add(
            split::TEST_LABELS,
            SplitKind::Labels,
            "test_labels.json",
            self.test_labels.rows(),
        );
        if let Some(y) = &self.train_labels {
            write_labels(y, &dir.join("train_labels.json"))?;
            add(split::TRAIN_LABELS, SplitKind::Labels, "train_labels.json", y.rows());
        }
        if let Some(pl) = &self.student_pl {
            write_json(pl, &dir.join("student_pl.json"))?;
            add(split::STUDENT_PL, SplitKind::PseudoLabels, "student_pl.json", pl.rows());
        }
        if let Some(pl) = &self.teacher_pl {
            write_json(pl, &dir.join("teacher_pl.json"))?;
            add(split::TEACHER_PL, SplitKind::PseudoLabels, "teacher_pl.json", pl.rows());
        }
        write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Loads a bundle from its manifest file.
    pub fn read(manifest_path: &Path) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let path = |name: &str| manifest.resolve(base, name);
        let optional = |name: &str| manifest.splits.contains_key(name).then(|| path(name)).transpose();

        let classifier = read_classifier(&path(split::CLASSIFIER)?)?;
        if classifier.class_names() != manifest.class_names.as_slice() {
            return Err(NtuaError::invalid("classifier class names differ from the manifest"));
        }
        let bundle = Bundle {
            classifier,
            train: read_embeddings(&path(split::TRAIN)?)?,
            teacher_train: read_embeddings(&path(split::TEACHER_TRAIN)?)?,
            test: read_embeddings(&path(split::TEST)?)?,
            test_labels: read_labels(&path(split::TEST_LABELS)?)?,
            train_labels: optional(split::TRAIN_LABELS)?.map(|p| read_labels(&p)).transpose()?,
            student_pl: optional(split::STUDENT_PL)?.map(|p| read_pl(&p)).transpose()?,
            teacher_pl: optional(split::TEACHER_PL)?.map(|p| read_pl(&p)).transpose()?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

fn read_pl(path: &Path) -> Result<PseudoLabelSet<f64>> {
    let pl: PseudoLabelSet<f64> = read_json(path)?;
    pl.validate()?;
    Ok(pl)
}

//! On-disk formats for embedding sets, classifier weights, labels and bundles.
//!
//! Matrix files share one little-endian layout:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "NTUA"
//! 4       4           version (u32, currently 1)
//! 8       8           rows (u64)
//! 16      4           dim (u32)
//! 20      rows*dim*4  row-major binary32 payload
//! ...     variable    rows entries of (u32 byte length, UTF-8 bytes)
//! ```
//!
//! Embedding sets put sample ids in the trailing table, classifier files put
//! class names there. Anything after the last declared table entry is ignored.
//! Labels, pseudo-labels and reports are JSON.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{NtuaError, Result};

pub const MAGIC: [u8; 4] = *b"NTUA";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
/// Allowed deviation of a stored row's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Unit-norm feature rows with one opaque id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Array2<f32>,
    ids: Vec<String>,
}

impl EmbeddingSet {
    /// Validates shape and row norms.
    pub fn new(features: Array2<f32>, ids: Vec<String>) -> Result<Self> {
        let set = Self::new_unchecked(features, ids)?;
        check_unit_rows(set.features.view())?;
        Ok(set)
    }

    /// Validates shape only. [`write_embeddings`] still refuses bad norms.
    pub fn new_unchecked(features: Array2<f32>, ids: Vec<String>) -> Result<Self> {
        if ids.len() != features.nrows() {
            return Err(NtuaError::DimMismatch {
                context: "sample ids",
                expected: features.nrows(),
                found: ids.len(),
            });
        }
        if features.ncols() == 0 {
            return Err(NtuaError::invalid("embedding dimension must be positive"));
        }
        Ok(Self { features, ids })
    }

    /// L2-normalizes every row first. Zero rows are refused.
    pub fn from_unnormalized(mut features: Array2<f32>, ids: Vec<String>) -> Result<Self> {
        for (i, mut row) in features.rows_mut().into_iter().enumerate() {
            let norm = row_norm(row.view());
            if norm == 0.0 || !norm.is_finite() {
                return Err(NtuaError::NormViolation {
                    row: i,
                    norm,
                    tolerance: NORM_TOLERANCE,
                });
            }
            row.mapv_inplace(|x| (x as f64 / norm) as f32);
        }
        Self::new(features, ids)
    }

    /// Ids default to `{prefix}{index}`.
    pub fn with_default_ids(features: Array2<f32>, prefix: &str) -> Result<Self> {
        let ids = (0..features.nrows()).map(|i| format!("{prefix}{i}")).collect();
        Self::new(features, ids)
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.features.row(i)
    }

    /// Row index of every id.
    pub fn id_index(&self) -> std::collections::HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_unit_rows(self.features.view())
    }
}

/// The zero-shot classifier: one unit-norm row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    matrix: Array2<f32>,
    class_names: Vec<String>,
}

impl ClassifierWeights {
    pub fn new(matrix: Array2<f32>, class_names: Vec<String>) -> Result<Self> {
        let w = Self::new_unchecked(matrix, class_names)?;
        check_unit_rows(w.matrix.view())?;
        Ok(w)
    }

    pub fn new_unchecked(matrix: Array2<f32>, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != matrix.nrows() {
            return Err(NtuaError::DimMismatch {
                context: "class names",
                expected: matrix.nrows(),
                found: class_names.len(),
            });
        }
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(NtuaError::invalid(
                "classifier needs at least one class and one dimension",
            ));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(NtuaError::DuplicateClassName(name.clone()));
            }
        }
        Ok(Self { matrix, class_names })
    }

    pub fn from_unnormalized(matrix: Array2<f32>, class_names: Vec<String>) -> Result<Self> {
        let set = EmbeddingSet::from_unnormalized(matrix, class_names.clone())?;
        Self::new(set.features, class_names)
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn validate(&self) -> Result<()> {
        check_unit_rows(self.matrix.view())
    }
}

/// Ground-truth class indices, used for evaluation only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabels {
    pub num_classes: usize,
    pub labels: Vec<usize>,
}

impl GroundTruthLabels {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let gt = Self { num_classes, labels };
        gt.validate()?;
        Ok(gt)
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (row, &label) in self.labels.iter().enumerate() {
            if label >= self.num_classes {
                return Err(NtuaError::LabelOutOfRange {
                    row,
                    label,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn row_norm(row: ArrayView1<'_, f32>) -> f64 {
    row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub(crate) fn check_unit_rows(m: ArrayView2<'_, f32>) -> Result<()> {
    for (row, r) in m.rows().into_iter().enumerate() {
        let norm = row_norm(r);
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(NtuaError::NormViolation {
                row,
                norm,
                tolerance: NORM_TOLERANCE,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Byte-level primitives, shared with the cache file format.

pub(crate) fn put_u32(out: &mut impl Write, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

pub(crate) fn put_u64(out: &mut impl Write, v: u64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64(out: &mut impl Write, v: f64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f32_slice(out: &mut impl Write, values: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn put_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| std::io::Error::other("string longer than u32::MAX bytes"))?;
    put_u32(out, len)?;
    out.write_all(s.as_bytes())
}

/// Reads exactly `n` bytes without trusting `n` for preallocation.
pub(crate) fn take_bytes(input: &mut impl Read, n: u64, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    input.take(n).read_to_end(&mut buf)?;
    if buf.len() as u64 != n {
        return Err(NtuaError::Truncated(format!(
            "{what}: expected {n} bytes, got {}",
            buf.len()
        )));
    }
    Ok(buf)
}

pub(crate) fn get_array<const N: usize>(input: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let bytes = take_bytes(input, N as u64, what)?;
    Ok(bytes.try_into().expect("length checked"))
}

pub(crate) fn get_u32(input: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(get_array(input, what)?))
}

pub(crate) fn get_u64(input: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(get_array(input, what)?))
}

pub(crate) fn get_f64(input: &mut impl Read, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(get_array(input, what)?))
}

pub(crate) fn get_f32_vec(input: &mut impl Read, count: usize, what: &str) -> Result<Vec<f32>> {
    let nbytes = (count as u64)
        .checked_mul(4)
        .ok_or_else(|| NtuaError::Truncated(format!("{what}: size overflow")))?;
    let bytes = take_bytes(input, nbytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

pub(crate) fn get_str(input: &mut impl Read, what: &str) -> Result<String> {
    let len = get_u32(input, what)?;
    let bytes = take_bytes(input, len as u64, what)?;
    Ok(String::from_utf8(bytes)?)
}

pub(crate) fn check_magic(input: &mut impl Read, expected: [u8; 4]) -> Result<()> {
    let found: [u8; 4] = get_array(input, "magic")?;
    if found != expected {
        return Err(NtuaError::BadMagic { expected, found });
    }
    let version = get_u32(input, "version")?;
    if version != FORMAT_VERSION {
        return Err(NtuaError::UnsupportedVersion(version));
    }
    Ok(())
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| NtuaError::File {
            path: path.to_path_buf(),
            source,
        })
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| NtuaError::File {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Matrix files.

struct MatrixHeader {
    rows: usize,
    dim: usize,
}

fn write_matrix_file(out: &mut impl Write, m: &Array2<f32>, names: &[String]) -> Result<()> {
    out.write_all(&MAGIC)?;
    put_u32(out, FORMAT_VERSION)?;
    put_u64(out, m.nrows() as u64)?;
    let dim = u32::try_from(m.ncols()).map_err(|_| NtuaError::invalid("dimension exceeds u32"))?;
    put_u32(out, dim)?;
    put_f32_slice(out, m.iter().copied())?;
    for name in names {
        put_str(out, name)?;
    }
    out.flush()?;
    Ok(())
}

fn read_header(input: &mut impl Read) -> Result<MatrixHeader> {
    check_magic(input, MAGIC)?;
    let rows = get_u64(input, "row count")?;
    let dim = get_u32(input, "dimension")? as usize;
    let rows = usize::try_from(rows).map_err(|_| NtuaError::Truncated("row count exceeds address space".into()))?;
    Ok(MatrixHeader { rows, dim })
}

fn read_matrix_file(input: &mut impl Read) -> Result<(Array2<f32>, Vec<String>)> {
    let header = read_header(input)?;
    let count = header
        .rows
        .checked_mul(header.dim)
        .ok_or_else(|| NtuaError::Truncated("payload size overflow".into()))?;
    let payload = get_f32_vec(input, count, "matrix payload")?;
    let mut names = Vec::new();
    for _ in 0..header.rows {
        names.push(get_str(input, "id table")?);
    }
    let m =
        Array2::from_shape_vec((header.rows, header.dim), payload).map_err(|e| NtuaError::invalid(e.to_string()))?;
    Ok((m, names))
}

/// Row count and dimension from a matrix file header, without reading the payload.
pub fn peek_matrix_header(path: &Path) -> Result<(usize, usize)> {
    let mut input = open(path)?;
    let h = read_header(&mut input)?;
    Ok((h.rows, h.dim))
}

pub fn write_embeddings_to(set: &EmbeddingSet, out: &mut impl Write) -> Result<()> {
    set.validate()?;
    write_matrix_file(out, &set.features, &set.ids)
}

pub fn read_embeddings_from(input: &mut impl Read) -> Result<EmbeddingSet> {
    let (m, ids) = read_matrix_file(input)?;
    if m.ncols() == 0 {
        return Err(NtuaError::invalid("embedding dimension must be positive"));
    }
    EmbeddingSet::new(m, ids)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_embeddings_to(set, &mut create(path)?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    read_embeddings_from(&mut open(path)?)
}

pub fn write_classifier_to(w: &ClassifierWeights, out: &mut impl Write) -> Result<()> {
    w.validate()?;
    write_matrix_file(out, &w.matrix, &w.class_names)
}

pub fn read_classifier_from(input: &mut impl Read) -> Result<ClassifierWeights> {
    let (m, names) = read_matrix_file(input)?;
    ClassifierWeights::new(m, names)
}

pub fn write_classifier(w: &ClassifierWeights, path: &Path) -> Result<()> {
    write_classifier_to(w, &mut create(path)?)
}

pub fn read_classifier(path: &Path) -> Result<ClassifierWeights> {
    read_classifier_from(&mut open(path)?)
}

// ---------------------------------------------------------------------------
// JSON documents.

pub fn write_json<V: Serialize>(value: &V, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    Ok(serde_json::from_reader(open(path)?)?)
}

pub fn write_labels(labels: &GroundTruthLabels, path: &Path) -> Result<()> {
    labels.validate()?;
    write_json(labels, path)
}

pub fn read_labels(path: &Path) -> Result<GroundTruthLabels> {
    let labels: GroundTruthLabels = read_json(path)?;
    labels.validate()?;
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Bundle manifest.

/// What a manifest split points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Embeddings,
    Classifier,
    Labels,
    PseudoLabels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub kind: SplitKind,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub dim: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub splits: BTreeMap<String, SplitEntry>,
}

#[derive(Deserialize)]
struct RowCount {
    labels: Vec<serde::de::IgnoredAny>,
}

impl BundleManifest {
    pub fn new(dim: usize, class_names: Vec<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dim,
            num_classes: class_names.len(),
            class_names,
            splits: BTreeMap::new(),
        }
    }

    pub fn resolve(&self, base_dir: &Path, split: &str) -> Result<PathBuf> {
        let entry = self
            .splits
            .get(split)
            .ok_or_else(|| NtuaError::invalid(format!("manifest has no split {split:?}")))?;
        Ok(base_dir.join(&entry.path))
    }

    /// Checks that every split exists and that row counts match the files.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(NtuaError::UnsupportedVersion(self.format_version));
        }
        if self.class_names.len() != self.num_classes {
            return Err(NtuaError::DimMismatch {
                context: "manifest class names",
                expected: self.num_classes,
                found: self.class_names.len(),
            });
        }
        for (name, entry) in &self.splits {
            let path = base_dir.join(&entry.path);
            if !path.exists() {
                return Err(NtuaError::invalid(format!(
                    "split {name:?}: {} does not exist",
                    path.display()
                )));
            }
            let rows = match entry.kind {
                SplitKind::Embeddings | SplitKind::Classifier => {
                    let (rows, dim) = peek_matrix_header(&path)?;
                    if dim != self.dim {
                        return Err(NtuaError::DimMismatch {
                            context: "manifest split dimension",
                            expected: self.dim,
                            found: dim,
                        });
                    }
                    rows
                }
                SplitKind::Labels | SplitKind::PseudoLabels => read_json::<RowCount>(&path)?.labels.len(),
            };
            if rows != entry.rows {
                return Err(NtuaError::invalid(format!(
                    "split {name:?}: manifest says {} rows, file has {rows}",
                    entry.rows
                )));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(manifest: &BundleManifest, path: &Path) -> Result<()> {
    write_json(manifest, path)
}

pub fn read_manifest(path: &Path) -> Result<BundleManifest> {
    let manifest: BundleManifest = read_json(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.validate(base)?;
    Ok(manifest)
}

/// Parses whitespace-separated decimal rows, one per non-empty line.
pub fn parse_text_matrix(text: &str) -> Result<Array2<f32>> {
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut n = 0;
        for tok in line.split_whitespace() {
            let v: f32 = tok
                .parse()
                .map_err(|_| NtuaError::invalid(format!("line {}: bad number {tok:?}", lineno + 1)))?;
            if !v.is_finite() {
                return Err(NtuaError::invalid(format!("line {}: non-finite value", lineno + 1)));
            }
            data.push(v);
            n += 1;
        }
        match dim {
            None => dim = Some(n),
            Some(d) if d != n => {
                return Err(NtuaError::DimMismatch {
                    context: "text matrix row width",
                    expected: d,
                    found: n,
                })
            }
            _ => {}
        }
        rows += 1;
    }
    let dim = dim.ok_or_else(|| NtuaError::invalid("text matrix has no rows"))?;
    Array2::from_shape_vec((rows, dim), data).map_err(|e| NtuaError::invalid(e.to_string()))
}

/// Reads a text file of one name per line (blank lines skipped).
pub fn read_name_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|source| NtuaError::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bytes_of(set: &EmbeddingSet) -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings_to(set, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_set_is_header_only() {
        let set = EmbeddingSet::new(Array2::zeros((0, 4)), vec![]).unwrap();
        let buf = bytes_of(&set);
        assert_eq!(buf.len(), HEADER_LEN);
        assert_eq!(&buf[..4], b"NTUA");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &0u64.to_le_bytes());
        assert_eq!(&buf[16..20], &4u32.to_le_bytes());
        let back = read_embeddings_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn unit_row_payload_bytes() {
        let set = EmbeddingSet::new(array![[1.0f32, 0.0, 0.0, 0.0]], vec!["a".into()]).unwrap();
        let buf = bytes_of(&set);
        assert_eq!(
            &buf[HEADER_LEN..HEADER_LEN + 16],
            &[0x00, 0x00, 0x80, 0x3F, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]
        );
        // id table: length 1, then "a"
        assert_eq!(&buf[HEADER_LEN + 16..], &[1, 0, 0, 0, b'a']);
    }

    #[test]
    fn bad_magic_is_reported() {
        let set = EmbeddingSet::new(array![[0.0f32, 1.0]], vec!["x".into()]).unwrap();
        let mut buf = bytes_of(&set);
        buf[..4].copy_from_slice(b"XXXX");
        let err = read_embeddings_from(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, NtuaError::BadMagic { found, .. } if &found == b"XXXX"));
    }

    #[test]
    fn wrong_version_is_reported() {
        let set = EmbeddingSet::new(array![[0.0f32, 1.0]], vec!["x".into()]).unwrap();
        let mut buf = bytes_of(&set);
        buf[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = read_embeddings_from(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, NtuaError::UnsupportedVersion(7)));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let set = EmbeddingSet::new(array![[0.6f32, 0.8], [1.0, 0.0]], vec!["a".into(), "b".into()]).unwrap();
        let buf = bytes_of(&set);
        for cut in [3, 19, HEADER_LEN + 5, buf.len() - 1] {
            let err = read_embeddings_from(&mut &buf[..cut]).unwrap_err();
            assert!(matches!(err, NtuaError::Truncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn norm_violation_names_the_row() {
        let set = EmbeddingSet::new(
            array![[1.0f32, 0.0], [0.0, 1.0], [0.6, 0.8]],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let mut buf = bytes_of(&set);
        // scale row 1 by 0.5
        let off = HEADER_LEN + 8 + 4;
        buf[off..off + 4].copy_from_slice(&0.5f32.to_le_bytes());
        let err = read_embeddings_from(&mut buf.as_slice()).unwrap_err();
        match err {
            NtuaError::NormViolation { row, norm, .. } => {
                assert_eq!(row, 1);
                assert!((norm - 0.5).abs() < 1e-9);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn write_refuses_norm_violation() {
        let set = EmbeddingSet::new_unchecked(array![[0.5f32, 0.0]], vec!["a".into()]).unwrap();
        let mut buf = Vec::new();
        let err = write_embeddings_to(&set, &mut buf).unwrap_err();
        assert!(matches!(err, NtuaError::NormViolation { row: 0, .. }));
    }

    #[test]
    fn reader_ignores_trailing_bytes() {
        let set = EmbeddingSet::new(array![[0.0f32, 1.0]], vec!["z".into()]).unwrap();
        let mut buf = bytes_of(&set);
        buf.extend_from_slice(&[0xde, 0xad, 0xbe, 0xef, 1, 2, 3]);
        assert_eq!(read_embeddings_from(&mut buf.as_slice()).unwrap(), set);
    }

    #[test]
    fn classifier_rejects_duplicate_names() {
        let err =
            ClassifierWeights::new(array![[1.0f32, 0.0], [0.0, 1.0]], vec!["cat".into(), "cat".into()]).unwrap_err();
        assert!(matches!(err, NtuaError::DuplicateClassName(n) if n == "cat"));
    }

    #[test]
    fn classifier_round_trip() {
        let w =
            ClassifierWeights::from_unnormalized(array![[3.0f32, 4.0], [1.0, 1.0]], vec!["dog".into(), "cat".into()])
                .unwrap();
        let mut buf = Vec::new();
        write_classifier_to(&w, &mut buf).unwrap();
        assert_eq!(read_classifier_from(&mut buf.as_slice()).unwrap(), w);
        buf[0] = b'Y';
        assert!(matches!(
            read_classifier_from(&mut buf.as_slice()),
            Err(NtuaError::BadMagic { .. })
        ));
    }

    #[test]
    fn label_range_is_checked() {
        assert!(GroundTruthLabels::new(vec![0, 2, 1], 3).is_ok());
        let err = GroundTruthLabels::new(vec![0, 3], 3).unwrap_err();
        assert!(matches!(err, NtuaError::LabelOutOfRange { row: 1, label: 3, .. }));
    }

    #[test]
    fn text_matrix_parsing() {
        let m = parse_text_matrix("1 2 3\n\n# comment\n4 5 6\n").unwrap();
        assert_eq!(m, array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert!(parse_text_matrix("1 2\n3\n").is_err());
        assert!(parse_text_matrix("1 abc\n").is_err());
    }

    #[test]
    fn zero_row_cannot_be_normalized() {
        let err = EmbeddingSet::from_unnormalized(array![[0.0f32, 0.0]], vec!["a".into()]).unwrap_err();
        assert!(matches!(err, NtuaError::NormViolation { row: 0, .. }));
    }

    #[test]
    fn manifest_checks_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let set = EmbeddingSet::with_default_ids(array![[1.0f32, 0.0], [0.0, 1.0]], "s").unwrap();
        write_embeddings(&set, &dir.path().join("train.bin")).unwrap();
        write_labels(
            &GroundTruthLabels::new(vec![0, 1], 2).unwrap(),
            &dir.path().join("y.json"),
        )
        .unwrap();
        let mut manifest = BundleManifest::new(2, vec!["a".into(), "b".into()]);
        manifest.splits.insert(
            "train".into(),
            SplitEntry {
                kind: SplitKind::Embeddings,
                path: "train.bin".into(),
                rows: 2,
            },
        );
        manifest.splits.insert(
            "train_labels".into(),
            SplitEntry {
                kind: SplitKind::Labels,
                path: "y.json".into(),
                rows: 2,
            },
        );
        let mpath = dir.path().join("manifest.json");
        write_manifest(&manifest, &mpath).unwrap();
        assert_eq!(read_manifest(&mpath).unwrap(), manifest);

        manifest.splits.get_mut("train").unwrap().rows = 3;
        write_manifest(&manifest, &mpath).unwrap();
        assert!(read_manifest(&mpath).is_err());

        manifest.splits.get_mut("train").unwrap().rows = 2;
        manifest.splits.get_mut("train_labels").unwrap().path = "missing.json".into();
        write_manifest(&manifest, &mpath).unwrap();
        assert!(read_manifest(&mpath).is_err());
    }
}

//! Embedding bundles: the in-memory data model, its on-disk directory
//! format, validation, train/test views and concept-label budgets.
//!
//! A bundle directory holds (all multi-byte values little-endian):
//!
//! | file                 | contents                                   |
//! |----------------------|--------------------------------------------|
//! | `manifest.json`      | [`Manifest`]                               |
//! | `image_features.f32` | n × d_joint, rows L2-normalized            |
//! | `patch_features.f32` | n × d_patch, raw                           |
//! | `text_features.f32`  | c × d_joint, rows L2-normalized            |
//! | `class_labels.u32`   | n class ids                                |
//! | `concept_labels.f32` | n × c in [0, 1] (only with concept labels) |
//! | `labeled_mask.u8`    | n bytes of 0/1 (only with concept labels)  |

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::Mat;

pub const BUNDLE_VERSION: u32 = 1;
pub const NORM_TOLERANCE: f64 = 1e-3;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_FEATURES_FILE: &str = "image_features.f32";
pub const PATCH_FEATURES_FILE: &str = "patch_features.f32";
pub const TEXT_FEATURES_FILE: &str = "text_features.f32";
pub const CLASS_LABELS_FILE: &str = "class_labels.u32";
pub const CONCEPT_LABELS_FILE: &str = "concept_labels.f32";
pub const LABELED_MASK_FILE: &str = "labeled_mask.u8";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Split> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Row-major `f32` matrix as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct F32Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl F32Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "F32Matrix::new",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(F32Matrix { rows, cols, data })
    }

    /// Rounds an `f64` matrix to `f32` storage.
    pub fn from_mat(m: &Mat) -> Self {
        F32Matrix {
            rows: m.rows(),
            cols: m.cols(),
            data: m.to_f32(),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_f32(self.rows, self.cols, &self.data).expect("shape checked at construction")
    }

    pub fn select_rows(&self, indices: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| f64::from(v)));
        }
        Mat::from_vec(indices.len(), self.cols, data).expect("row gather keeps shape")
    }

    fn bits_eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub n_samples: usize,
    pub d_joint: usize,
    pub d_patch: usize,
    pub n_concepts: usize,
    pub n_classes: usize,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    /// One tag per sample: 0 = train, 1 = test.
    pub split: Vec<u8>,
    pub has_concept_labels: bool,
    /// How concept labels were produced, e.g. `"binary_class_broadcast"` or
    /// `"soft_instance"`. Free text, recorded for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_label_encoding: Option<String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_samples", self.n_samples),
            ("d_joint", self.d_joint),
            ("d_patch", self.d_patch),
            ("n_concepts", self.n_concepts),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Manifest(format!("{name} must be > 0")));
            }
        }
        if self.concept_names.len() != self.n_concepts {
            return Err(Error::Manifest(format!(
                "{} concept names for n_concepts = {}",
                self.concept_names.len(),
                self.n_concepts
            )));
        }
        if self.class_names.len() != self.n_classes {
            return Err(Error::Manifest(format!(
                "{} class names for n_classes = {}",
                self.class_names.len(),
                self.n_classes
            )));
        }
        if self.split.len() != self.n_samples {
            return Err(Error::Manifest(format!(
                "{} split tags for n_samples = {}",
                self.split.len(),
                self.n_samples
            )));
        }
        if let Some(i) = self
            .split
            .iter()
            .position(|&t| Split::from_tag(t).is_none())
        {
            return Err(Error::Manifest(format!(
                "split tag {} at index {i} is not 0 (train) or 1 (test)",
                self.split[i]
            )));
        }
        Ok(())
    }

    pub fn split_of(&self, i: usize) -> Split {
        Split::from_tag(self.split[i]).expect("validated split tag")
    }
}

/// Precomputed embeddings for one dataset plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub manifest: Manifest,
    pub image_features: F32Matrix,
    pub patch_features: F32Matrix,
    pub text_features: F32Matrix,
    pub class_labels: Vec<u32>,
    pub concept_labels: Option<F32Matrix>,
    pub labeled_mask: Vec<bool>,
}

fn check_unit_rows(file: &str, m: &F32Matrix) -> Result<()> {
    for r in 0..m.rows {
        let norm = m
            .row(r)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized {
                file: file.to_string(),
                row: r,
                norm,
                tolerance: NORM_TOLERANCE,
            });
        }
    }
    Ok(())
}

fn check_finite(file: &str, m: &F32Matrix) -> Result<()> {
    if let Some(i) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidValue {
            file: file.to_string(),
            index: i,
            reason: format!("non-finite value {}", m.data[i]),
        });
    }
    Ok(())
}

fn check_shape(file: &str, m: &F32Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows != rows || m.cols != cols {
        return Err(Error::SizeMismatch {
            file: file.to_string(),
            expected: rows * cols * 4,
            found: m.data.len() * 4,
            detail: format!("{rows}x{cols} f32, have {}x{}", m.rows, m.cols),
        });
    }
    Ok(())
}

impl EmbeddingBundle {
    pub fn n_samples(&self) -> usize {
        self.manifest.n_samples
    }

    pub fn n_concepts(&self) -> usize {
        self.manifest.n_concepts
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }

    pub fn d_joint(&self) -> usize {
        self.manifest.d_joint
    }

    pub fn d_patch(&self) -> usize {
        self.manifest.d_patch
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.class_labels[i] as usize
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.manifest.split_of(i)
    }

    /// Checks every bundle invariant; errors name the offending file and index.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        let (n, c) = (m.n_samples, m.n_concepts);
        check_shape(IMAGE_FEATURES_FILE, &self.image_features, n, m.d_joint)?;
        check_shape(PATCH_FEATURES_FILE, &self.patch_features, n, m.d_patch)?;
        check_shape(TEXT_FEATURES_FILE, &self.text_features, c, m.d_joint)?;
        check_finite(PATCH_FEATURES_FILE, &self.patch_features)?;
        check_unit_rows(IMAGE_FEATURES_FILE, &self.image_features)?;
        check_unit_rows(TEXT_FEATURES_FILE, &self.text_features)?;

        if self.class_labels.len() != n {
            return Err(Error::SizeMismatch {
                file: CLASS_LABELS_FILE.into(),
                expected: n * 4,
                found: self.class_labels.len() * 4,
                detail: format!("{n} u32"),
            });
        }
        if let Some(i) = self
            .class_labels
            .iter()
            .position(|&y| y as usize >= m.n_classes)
        {
            return Err(Error::InvalidValue {
                file: CLASS_LABELS_FILE.into(),
                index: i,
                reason: format!(
                    "class {} out of range for {} classes",
                    self.class_labels[i], m.n_classes
                ),
            });
        }

        if self.labeled_mask.len() != n {
            return Err(Error::SizeMismatch {
                file: LABELED_MASK_FILE.into(),
                expected: n,
                found: self.labeled_mask.len(),
                detail: format!("{n} u8"),
            });
        }
        match (&self.concept_labels, m.has_concept_labels) {
            (Some(g), true) => {
                check_shape(CONCEPT_LABELS_FILE, g, n, c)?;
                if let Some(i) = g
                    .data
                    .iter()
                    .position(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
                {
                    return Err(Error::InvalidValue {
                        file: CONCEPT_LABELS_FILE.into(),
                        index: i,
                        reason: format!("concept label {} outside [0, 1]", g.data[i]),
                    });
                }
            }
            (None, false) => {
                if let Some(i) = self.labeled_mask.iter().position(|&b| b) {
                    return Err(Error::InvalidValue {
                        file: LABELED_MASK_FILE.into(),
                        index: i,
                        reason: "sample marked labeled but bundle has no concept labels".into(),
                    });
                }
            }
            (Some(_), false) => {
                return Err(Error::Manifest(
                    "concept labels present but has_concept_labels is false".into(),
                ))
            }
            (None, true) => {
                return Err(Error::Manifest(
                    "has_concept_labels is true but no concept labels".into(),
                ))
            }
        }
        Ok(())
    }

    /// Bitwise equality (distinguishes `0.0` from `-0.0`).
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.manifest == other.manifest
            && self.image_features.bits_eq(&other.image_features)
            && self.patch_features.bits_eq(&other.patch_features)
            && self.text_features.bits_eq(&other.text_features)
            && self.class_labels == other.class_labels
            && self.labeled_mask == other.labeled_mask
            && match (&self.concept_labels, &other.concept_labels) {
                (Some(a), Some(b)) => a.bits_eq(b),
                (None, None) => true,
                _ => false,
            }
    }

    pub fn full_view(&self) -> SampleView<'_> {
        SampleView {
            bundle: self,
            indices: (0..self.n_samples()).collect(),
        }
    }

    pub fn view(&self, indices: Vec<usize>) -> Result<SampleView<'_>> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.n_samples()) {
            return Err(Error::shape(
                "SampleView",
                format!("index {i} out of {} samples", self.n_samples()),
            ));
        }
        Ok(SampleView {
            bundle: self,
            indices,
        })
    }

    /// Train and test views, partitioned by the manifest's split tags.
    pub fn split_views(&self) -> Result<(SampleView<'_>, SampleView<'_>)> {
        let (train, test): (Vec<usize>, Vec<usize>) =
            (0..self.n_samples()).partition(|&i| self.split_of(i) == Split::Train);
        if train.is_empty() {
            return Err(Error::Empty("train split".into()));
        }
        if test.is_empty() {
            return Err(Error::Empty("test split".into()));
        }
        Ok((
            SampleView {
                bundle: self,
                indices: train,
            },
            SampleView {
                bundle: self,
                indices: test,
            },
        ))
    }

    pub fn train_view(&self) -> Result<SampleView<'_>> {
        let train: Vec<usize> = (0..self.n_samples())
            .filter(|&i| self.split_of(i) == Split::Train)
            .collect();
        if train.is_empty() {
            return Err(Error::Empty("train split".into()));
        }
        Ok(SampleView {
            bundle: self,
            indices: train,
        })
    }
}

/// A subset of a bundle's samples, by index. Borrowed; copies nothing.
#[derive(Clone, Debug)]
pub struct SampleView<'a> {
    bundle: &'a EmbeddingBundle,
    indices: Vec<usize>,
}

impl<'a> SampleView<'a> {
    pub fn bundle(&self) -> &'a EmbeddingBundle {
        self.bundle
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn class_labels(&self) -> Vec<usize> {
        self.indices
            .iter()
            .map(|&i| self.bundle.class_of(i))
            .collect()
    }

    pub fn image_features(&self) -> Mat {
        self.bundle.image_features.select_rows(&self.indices)
    }

    pub fn patch_features(&self) -> Mat {
        self.bundle.patch_features.select_rows(&self.indices)
    }

    pub fn concept_labels(&self) -> Option<Mat> {
        self.bundle
            .concept_labels
            .as_ref()
            .map(|g| g.select_rows(&self.indices))
    }

    /// Sample indices grouped by class (bundle indices, ascending).
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.bundle.n_classes()];
        for &i in &self.indices {
            groups[self.bundle.class_of(i)].push(i);
        }
        groups
    }
}

/// Number of concept-labeled train samples per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBudget {
    pub per_class_count: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Returns a copy whose labeled mask marks exactly `per_class_count`
/// uniformly drawn train samples of every class. Concept labels stay in
/// place for evaluation.
pub fn apply_label_budget(
    bundle: &EmbeddingBundle,
    budget: LabelBudget,
) -> Result<EmbeddingBundle> {
    if !bundle.manifest.has_concept_labels {
        return Err(Error::Config(
            "label budget needs a bundle with concept labels".into(),
        ));
    }
    let m = budget.per_class_count;
    let mut per_class = vec![Vec::new(); bundle.n_classes()];
    for i in 0..bundle.n_samples() {
        if bundle.split_of(i) == Split::Train {
            per_class[bundle.class_of(i)].push(i);
        }
    }
    if let Some((class, members)) = per_class
        .iter()
        .enumerate()
        .filter(|(_, v)| v.len() < m)
        .min_by_key(|(_, v)| v.len())
    {
        return Err(Error::Budget {
            requested: m,
            class,
            available: members.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut mask = vec![false; bundle.n_samples()];
    for members in &per_class {
        for pick in rand::seq::index::sample(&mut rng, members.len(), m) {
            mask[members[pick]] = true;
        }
    }
    let mut out = bundle.clone();
    out.labeled_mask = mask;
    Ok(out)
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let dir = dir.as_ref();
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported bundle version {} (expected {BUNDLE_VERSION})",
            manifest.version
        )));
    }
    manifest.validate()?;
    let (n, c) = (manifest.n_samples, manifest.n_concepts);
    let read_matrix = |file: &str, rows: usize, cols: usize| -> Result<F32Matrix> {
        let data = io::read_f32(&dir.join(file), rows * cols, &format!("{rows}x{cols} f32"))?;
        F32Matrix::new(rows, cols, data)
    };

    let image_features = read_matrix(IMAGE_FEATURES_FILE, n, manifest.d_joint)?;
    let patch_features = read_matrix(PATCH_FEATURES_FILE, n, manifest.d_patch)?;
    let text_features = read_matrix(TEXT_FEATURES_FILE, c, manifest.d_joint)?;
    let class_labels = io::read_u32(&dir.join(CLASS_LABELS_FILE), n, &format!("{n} u32"))?;

    let (concept_labels, labeled_mask) = if manifest.has_concept_labels {
        let g = read_matrix(CONCEPT_LABELS_FILE, n, c)?;
        let raw = io::read_u8(&dir.join(LABELED_MASK_FILE), n, &format!("{n} u8"))?;
        let mut mask = Vec::with_capacity(n);
        for (i, &b) in raw.iter().enumerate() {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                _ => {
                    return Err(Error::InvalidValue {
                        file: LABELED_MASK_FILE.into(),
                        index: i,
                        reason: format!("mask byte {b} is not 0 or 1"),
                    })
                }
            }
        }
        (Some(g), mask)
    } else {
        (None, vec![false; n])
    };

    let bundle = EmbeddingBundle {
        manifest,
        image_features,
        patch_features,
        text_features,
        class_labels,
        concept_labels,
        labeled_mask,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes the bundle directory. Each file is replaced atomically; optional
/// files are removed when the bundle has no concept labels.
pub fn save_bundle(bundle: &EmbeddingBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    io::ensure_dir(dir)?;
    io::write_f32(&dir.join(IMAGE_FEATURES_FILE), &bundle.image_features.data)?;
    io::write_f32(&dir.join(PATCH_FEATURES_FILE), &bundle.patch_features.data)?;
    io::write_f32(&dir.join(TEXT_FEATURES_FILE), &bundle.text_features.data)?;
    io::write_u32(&dir.join(CLASS_LABELS_FILE), &bundle.class_labels)?;
    match &bundle.concept_labels {
        Some(g) => {
            io::write_f32(&dir.join(CONCEPT_LABELS_FILE), &g.data)?;
            let mask: Vec<u8> = bundle.labeled_mask.iter().map(|&b| u8::from(b)).collect();
            io::write_atomic(&dir.join(LABELED_MASK_FILE), &mask)?;
        }
        None => {
            io::remove_if_present(&dir.join(CONCEPT_LABELS_FILE))?;
            io::remove_if_present(&dir.join(LABELED_MASK_FILE))?;
        }
    }
    // manifest last: a directory with a manifest is complete
    io::write_json(&dir.join(MANIFEST_FILE), &bundle.manifest)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Small hand-built bundle: `k` classes, `per_class` samples each, the
    /// first `train_per_class` of every class in train.
    pub(crate) fn tiny_bundle(
        k: usize,
        per_class: usize,
        train_per_class: usize,
    ) -> EmbeddingBundle {
        let n = k * per_class;
        let (d, dp, c) = (3, 4, 2);
        let mut image = Vec::new();
        let mut patch = Vec::new();
        let mut labels = Vec::new();
        let mut split = Vec::new();
        let mut concepts = Vec::new();
        for class in 0..k {
            for j in 0..per_class {
                let axis = (class + j) % d;
                for a in 0..d {
                    image.push(if a == axis { 1.0 } else { 0.0 });
                }
                for a in 0..dp {
                    patch.push(((class * 7 + j * 3 + a * a) % 11) as f32 * 0.1);
                }
                labels.push(class as u32);
                split.push(u8::from(j >= train_per_class));
                concepts.extend([(class % 2) as f32, 1.0 - (class % 2) as f32]);
            }
        }
        EmbeddingBundle {
            manifest: Manifest {
                version: BUNDLE_VERSION,
                n_samples: n,
                d_joint: d,
                d_patch: dp,
                n_concepts: c,
                n_classes: k,
                concept_names: vec!["red wing".into(), "long beak".into()],
                class_names: (0..k).map(|i| format!("class_{i}")).collect(),
                split,
                has_concept_labels: true,
                concept_label_encoding: None,
            },
            image_features: F32Matrix::new(n, d, image).unwrap(),
            patch_features: F32Matrix::new(n, dp, patch).unwrap(),
            text_features: F32Matrix::new(c, d, vec![1.0, 0.0, 0.0, 0.0, 0.6, 0.8]).unwrap(),
            class_labels: labels,
            concept_labels: Some(F32Matrix::new(n, c, concepts).unwrap()),
            labeled_mask: vec![false; n],
        }
    }

    #[test]
    fn tiny_bundle_is_valid() {
        tiny_bundle(4, 5, 3).validate().unwrap();
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle(3, 4, 2);
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert!(b.bit_identical(&back));
    }

    #[test]
    fn absent_concept_labels_emit_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle(2, 3, 2);
        save_bundle(&b, dir.path()).unwrap();
        b.concept_labels = None;
        b.manifest.has_concept_labels = false;
        save_bundle(&b, dir.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(
            names,
            [
                CLASS_LABELS_FILE,
                IMAGE_FEATURES_FILE,
                MANIFEST_FILE,
                PATCH_FEATURES_FILE,
                TEXT_FEATURES_FILE
            ]
        );
        let back = load_bundle(dir.path()).unwrap();
        assert!(!back.manifest.has_concept_labels);
        assert!(back.labeled_mask.iter().all(|&m| !m));
    }

    #[test]
    fn truncated_features_are_a_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle(2, 5, 3);
        save_bundle(&b, dir.path()).unwrap();
        let path = dir.path().join(IMAGE_FEATURES_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3 * 4]).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::SizeMismatch { file, .. }) => assert_eq!(file, IMAGE_FEATURES_FILE),
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&tiny_bundle(2, 3, 2), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(TEXT_FEATURES_FILE)).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_unnormalized_rows_and_bad_labels() {
        let mut b = tiny_bundle(2, 3, 2);
        b.image_features.data[3 * 4] = 0.5;
        match b.validate() {
            Err(Error::NotNormalized { file, row, .. }) => {
                assert_eq!(file, IMAGE_FEATURES_FILE);
                assert_eq!(row, 4);
            }
            other => panic!("{other:?}"),
        }
        let mut b = tiny_bundle(2, 3, 2);
        b.class_labels[5] = 2;
        assert!(matches!(
            b.validate(),
            Err(Error::InvalidValue { index: 5, .. })
        ));
        let mut b = tiny_bundle(2, 3, 2);
        b.concept_labels.as_mut().unwrap().data[1] = 1.5;
        assert!(matches!(
            b.validate(),
            Err(Error::InvalidValue { index: 1, .. })
        ));
        let mut b = tiny_bundle(2, 3, 2);
        b.manifest.split[0] = 2;
        assert!(matches!(b.validate(), Err(Error::Manifest(_))));
    }

    #[test]
    fn budget_edges() {
        let b = tiny_bundle(4, 12, 10);
        let none = apply_label_budget(
            &b,
            LabelBudget {
                per_class_count: 0,
                seed: 1,
            },
        )
        .unwrap();
        assert!(none.labeled_mask.iter().all(|&m| !m));

        let all = apply_label_budget(
            &b,
            LabelBudget {
                per_class_count: 10,
                seed: 1,
            },
        )
        .unwrap();
        for i in 0..b.n_samples() {
            assert_eq!(all.labeled_mask[i], b.split_of(i) == Split::Train);
        }
        assert!(matches!(
            apply_label_budget(
                &b,
                LabelBudget {
                    per_class_count: 11,
                    seed: 1
                }
            ),
            Err(Error::Budget { available: 10, .. })
        ));
    }

    #[test]
    fn budget_is_stratified_and_deterministic() {
        let b = tiny_bundle(4, 10, 10);
        let budget = LabelBudget {
            per_class_count: 3,
            seed: 7,
        };
        let first = apply_label_budget(&b, budget).unwrap();
        assert_eq!(first.labeled_mask.iter().filter(|&&m| m).count(), 12);
        for class in 0..4 {
            let count = (0..b.n_samples())
                .filter(|&i| b.class_of(i) == class && first.labeled_mask[i])
                .count();
            assert_eq!(count, 3);
        }
        assert_eq!(apply_label_budget(&b, budget).unwrap(), first);
    }

    #[test]
    fn split_views_partition() {
        let mut b = tiny_bundle(2, 5, 3);
        let (train, test) = b.split_views().unwrap();
        assert_eq!((train.len(), test.len()), (6, 4));
        b.manifest.split = vec![0; b.n_samples()];
        assert!(matches!(b.split_views(), Err(Error::Empty(_))));
    }
}

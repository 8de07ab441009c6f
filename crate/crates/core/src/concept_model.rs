//! Concept scoring and the linear class head.
//!
//! Raw scores are image/text cosine similarities. Enhanced scores add a
//! learned residual from layer-normalized pooled patch features:
//!
//! ```text
//! C = raw_scale · (image · textᵀ) + LN(patch) · W_cp
//! K = C · W_k
//! ```
//!
//! Neither linear map has a bias.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SampleView;
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{layer_norm_rows, Mat, LAYER_NORM_EPS};

pub const MODEL_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";
pub const W_CP_FILE: &str = "w_cp.f64";
pub const W_K_FILE: &str = "w_k.f64";

/// Concept scores, one row per evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptScores(pub Mat);

/// Class logits, one row per evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLogits(pub Mat);

impl ConceptScores {
    pub fn mat(&self) -> &Mat {
        &self.0
    }
}

impl ClassLogits {
    pub fn mat(&self) -> &Mat {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptModel {
    /// Patch → concept projection, d_patch × c.
    pub w_cp: Mat,
    /// Concept → class head, c × k.
    pub w_k: Mat,
    pub seed: u64,
    /// Multiplier on raw cosine scores; 1.0 leaves them unscaled.
    pub raw_scale: f64,
}

impl ConceptModel {
    pub fn d_patch(&self) -> usize {
        self.w_cp.rows()
    }

    pub fn n_concepts(&self) -> usize {
        self.w_k.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.w_k.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_cp.cols() != self.w_k.rows() {
            return Err(Error::shape(
                "ConceptModel",
                format!(
                    "w_cp is {:?} but w_k is {:?}",
                    self.w_cp.shape(),
                    self.w_k.shape()
                ),
            ));
        }
        if !self.w_cp.is_finite() || !self.w_k.is_finite() || !self.raw_scale.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// Errors unless the model's dimensions fit the bundle behind `view`.
    pub fn check_compatible(&self, view: &SampleView<'_>) -> Result<()> {
        let b = view.bundle();
        if self.d_patch() != b.d_patch()
            || self.n_concepts() != b.n_concepts()
            || self.n_classes() != b.n_classes()
        {
            return Err(Error::shape(
                "ConceptModel",
                format!(
                    "model (d_patch {}, c {}, k {}) vs bundle (d_patch {}, c {}, k {})",
                    self.d_patch(),
                    self.n_concepts(),
                    self.n_classes(),
                    b.d_patch(),
                    b.n_concepts(),
                    b.n_classes()
                ),
            ));
        }
        Ok(())
    }

    pub fn bit_identical(&self, other: &Self) -> bool {
        let same = |a: &Mat, b: &Mat| {
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        };
        same(&self.w_cp, &other.w_cp)
            && same(&self.w_k, &other.w_k)
            && self.seed == other.seed
            && self.raw_scale.to_bits() == other.raw_scale.to_bits()
    }
}

/// `W_cp = 0` so the model starts at the frozen raw scores; `W_k` uniform in
/// `[-1/√c, 1/√c]`.
pub fn init_model(d_patch: usize, c: usize, k: usize, seed: u64) -> Result<ConceptModel> {
    if d_patch == 0 || c == 0 || k == 0 {
        return Err(Error::Config(format!(
            "model dimensions must be positive (d_patch {d_patch}, c {c}, k {k})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (c as f64).sqrt();
    let w_k = Mat::from_fn(c, k, |_, _| rng.random_range(-bound..=bound));
    Ok(ConceptModel {
        w_cp: Mat::zeros(d_patch, c),
        w_k,
        seed,
        raw_scale: 1.0,
    })
}

/// Per-sample inputs that do not depend on trainable parameters.
#[derive(Clone, Debug)]
pub struct ScoreInputs {
    /// Scaled raw scores, n × c.
    pub raw: Mat,
    /// Layer-normalized patch features, n × d_patch.
    pub normed_patch: Mat,
}

impl ScoreInputs {
    pub fn from_view(view: &SampleView<'_>, raw_scale: f64) -> Self {
        ScoreInputs {
            raw: raw_scores(view, raw_scale).0,
            normed_patch: layer_norm_rows(&view.patch_features(), LAYER_NORM_EPS),
        }
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    pub fn enhanced(&self, model: &ConceptModel) -> Result<ConceptScores> {
        if model.w_cp.rows() != self.normed_patch.cols() || model.w_cp.cols() != self.raw.cols() {
            return Err(Error::shape(
                "enhanced_scores",
                format!(
                    "w_cp {:?} for patch width {} and {} concepts",
                    model.w_cp.shape(),
                    self.normed_patch.cols(),
                    self.raw.cols()
                ),
            ));
        }
        let mut scores = self.normed_patch.matmul(&model.w_cp)?;
        // raw first, then the residual, matching the left-to-right sum
        for (s, r) in scores.data_mut().iter_mut().zip(self.raw.data()) {
            *s += r;
        }
        Ok(ConceptScores(scores))
    }
}

/// `raw_scale · image_features · text_featuresᵀ` over the view's samples.
pub fn raw_scores(view: &SampleView<'_>, raw_scale: f64) -> ConceptScores {
    let text = view.bundle().text_features.to_mat();
    let raw = view
        .image_features()
        .matmul_t(&text)
        .expect("bundle validated: image and text share d_joint");
    if raw_scale == 1.0 {
        ConceptScores(raw)
    } else {
        ConceptScores(raw.scale(raw_scale))
    }
}

pub fn enhanced_scores(view: &SampleView<'_>, model: &ConceptModel) -> Result<ConceptScores> {
    model.check_compatible(view)?;
    ScoreInputs::from_view(view, model.raw_scale).enhanced(model)
}

pub fn class_logits(scores: &ConceptScores, model: &ConceptModel) -> Result<ClassLogits> {
    if scores.0.cols() != model.w_k.rows() {
        return Err(Error::shape(
            "class_logits",
            format!(
                "{} score columns for a head over {} concepts",
                scores.0.cols(),
                model.w_k.rows()
            ),
        ));
    }
    Ok(ClassLogits(scores.0.matmul(&model.w_k)?))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    version: u32,
    d_patch: usize,
    n_concepts: usize,
    n_classes: usize,
    seed: u64,
    raw_scale: f64,
}

pub fn save_model(model: &ConceptModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    model.validate()?;
    io::ensure_dir(dir)?;
    io::write_f64(&dir.join(W_CP_FILE), model.w_cp.data())?;
    io::write_f64(&dir.join(W_K_FILE), model.w_k.data())?;
    io::write_json(
        &dir.join(MODEL_FILE),
        &ModelHeader {
            version: MODEL_VERSION,
            d_patch: model.d_patch(),
            n_concepts: model.n_concepts(),
            n_classes: model.n_classes(),
            seed: model.seed,
            raw_scale: model.raw_scale,
        },
    )
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ConceptModel> {
    let dir = dir.as_ref();
    let h: ModelHeader = io::read_json(&dir.join(MODEL_FILE))?;
    if h.version != MODEL_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported model version {}",
            h.version
        )));
    }
    let (dp, c, k) = (h.d_patch, h.n_concepts, h.n_classes);
    let w_cp = io::read_f64(&dir.join(W_CP_FILE), dp * c, &format!("{dp}x{c} f64"))?;
    let w_k = io::read_f64(&dir.join(W_K_FILE), c * k, &format!("{c}x{k} f64"))?;
    let model = ConceptModel {
        w_cp: Mat::from_vec(dp, c, w_cp)?,
        w_k: Mat::from_vec(c, k, w_k)?,
        seed: h.seed,
        raw_scale: h.raw_scale,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::tiny_bundle;
    use crate::numerics::layer_norm;

    #[test]
    fn unit_rows_score_one_and_zero() {
        let b = tiny_bundle(2, 3, 2);
        let raw = raw_scores(&b.full_view(), 1.0);
        // sample 0 has image axis 0, identical to text row 0 and orthogonal to row 1
        assert_eq!(raw.0.row(0), &[1.0, 0.0]);
        assert_eq!(raw.0.get(1, 0), 0.0);
        assert_eq!(raw.0.get(2, 0), 0.0);
    }

    #[test]
    fn zero_projection_gives_raw_scores() {
        let b = tiny_bundle(3, 4, 2);
        let view = b.full_view();
        let model = init_model(b.d_patch(), b.n_concepts(), b.n_classes(), 3).unwrap();
        assert_eq!(
            enhanced_scores(&view, &model).unwrap(),
            raw_scores(&view, 1.0)
        );
    }

    #[test]
    fn constant_patch_rows_add_nothing() {
        let mut b = tiny_bundle(2, 2, 1);
        for v in b.patch_features.data.iter_mut() {
            *v = 2.5;
        }
        let view = b.full_view();
        let mut model = init_model(b.d_patch(), b.n_concepts(), b.n_classes(), 0).unwrap();
        model.w_cp = Mat::from_fn(4, 2, |i, j| (i + 3 * j) as f64 - 2.0);
        assert_eq!(
            enhanced_scores(&view, &model).unwrap(),
            raw_scores(&view, 1.0)
        );
    }

    #[test]
    fn enhanced_matches_term_by_term_oracle() {
        let b = tiny_bundle(3, 4, 2);
        let view = b.full_view();
        let mut model = init_model(b.d_patch(), b.n_concepts(), b.n_classes(), 0).unwrap();
        model.w_cp = Mat::from_fn(4, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.37 - 0.6);
        let got = enhanced_scores(&view, &model).unwrap();
        for i in 0..b.n_samples() {
            let img: Vec<f64> = b.image_features.row(i).iter().map(|&v| v as f64).collect();
            let patch: Vec<f64> = b.patch_features.row(i).iter().map(|&v| v as f64).collect();
            let ln = layer_norm(&patch, 1e-5);
            for j in 0..2 {
                let txt: Vec<f64> = b.text_features.row(j).iter().map(|&v| v as f64).collect();
                let mut want = 0.0;
                for d in 0..3 {
                    want += img[d] * txt[d];
                }
                for d in 0..4 {
                    want += ln[d] * model.w_cp.get(d, j);
                }
                assert!((got.0.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_cases() {
        let scores = ConceptScores(Mat::from_fn(3, 2, |i, j| (i as f64) - j as f64 * 0.5));
        let mut model = init_model(4, 2, 2, 1).unwrap();
        model.w_k = Mat::zeros(2, 2);
        assert_eq!(class_logits(&scores, &model).unwrap().0, Mat::zeros(3, 2));
        model.w_k = Mat::identity(2);
        assert_eq!(class_logits(&scores, &model).unwrap().0, scores.0);
        model.w_k = Mat::zeros(3, 2);
        assert!(class_logits(&scores, &model).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_model(5, 6, 3, 42).unwrap();
        let b = init_model(5, 6, 3, 42).unwrap();
        let c = init_model(5, 6, 3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.w_k, c.w_k);
        let bound = 1.0 / 6f64.sqrt();
        assert!(a.w_k.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.w_cp, Mat::zeros(5, 6));
        assert!(init_model(0, 1, 1, 0).is_err());
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = init_model(4, 3, 2, 9).unwrap();
        m.w_cp = Mat::from_fn(4, 3, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0));
        m.raw_scale = 100.0;
        save_model(&m, dir.path()).unwrap();
        assert!(load_model(dir.path()).unwrap().bit_identical(&m));
    }
}

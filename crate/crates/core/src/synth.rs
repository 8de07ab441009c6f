//! Synthetic bundles with planted concept structure.
//!
//! Every sample starts from its class prototype `p` (a binary row with `a`
//! active concepts) plus gaussian noise, `z = p + σ·ε`. Features are linear
//! images of `z`:
//!
//! ```text
//! image = normalize(z · A · T + s · h_class)
//! patch = z · P + σ · ε'
//! ```
//!
//! `T` holds the concept text rows, `A = ρ·I + (1 − ρ)·R` blends in a random
//! concept mixing so raw image/text scores are only partly aligned with the
//! planted concepts (`ρ = 1` aligns them fully), and `P` is a random patch
//! map. Confounder classes carry an extra direction `h_class` orthogonal to
//! every text row. Those directions, plus orthogonal distractors, are
//! offered as candidate concepts for intervention.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingBundle, F32Matrix, Manifest, BUNDLE_VERSION};
use crate::error::{Error, Result};
use crate::intervention::CandidateConcepts;
use crate::io;
use crate::metrics::concept_accuracy;
use crate::numerics::{norm, Mat};

pub const TRUTH_FILE: &str = "truth.json";
const MAX_ROW_TRIES: usize = 10_000;
const MAX_MATRIX_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confounder {
    pub classes: (usize, usize),
    /// Fraction of the first class's active concepts the second one shares.
    pub overlap: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Every sample carries its class prototype.
    #[default]
    ClassBroadcast,
    /// Every sample carries its own noisy concept vector clipped to [0, 1].
    Instance,
}

impl LabelMode {
    pub fn encoding(self) -> &'static str {
        match self {
            LabelMode::ClassBroadcast => "binary_class_broadcast",
            LabelMode::Instance => "soft_instance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub k: usize,
    pub c: usize,
    pub samples_per_class: usize,
    pub d_joint: usize,
    pub d_patch: usize,
    pub active_per_class: usize,
    pub noise_sigma: f64,
    pub confounder: Option<Confounder>,
    pub test_fraction: f64,
    pub seed: u64,
    /// `ρ` in `[0, 1]`: weight of the identity in the concept mixing.
    pub alignment: f64,
    /// Bound on pairwise `|cos|` between text rows; default `min(0.5, 1/(2a))`.
    pub max_text_cos: Option<f64>,
    /// Length of the confounder-specific direction added to image features.
    pub hidden_strength: f64,
    /// Candidate concepts unrelated to any class.
    pub n_distractors: usize,
    pub label_mode: LabelMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            k: 6,
            c: 12,
            samples_per_class: 20,
            d_joint: 128,
            d_patch: 48,
            active_per_class: 3,
            noise_sigma: 0.1,
            confounder: None,
            test_fraction: 0.5,
            seed: 0,
            alignment: 0.5,
            max_text_cos: None,
            hidden_strength: 0.5,
            n_distractors: 8,
            label_mode: LabelMode::ClassBroadcast,
        }
    }
}

fn binomial_at_least(n: usize, r: usize, target: usize) -> bool {
    let mut acc: u128 = 1;
    for i in 0..r as u128 {
        acc = acc * (n as u128 - i) / (i + 1);
        if acc >= target as u128 {
            return true;
        }
    }
    acc >= target as u128
}

impl SynthSpec {
    /// The default benchmark with classes 0 and 1 confounded at overlap 0.9.
    pub fn confounder_benchmark() -> Self {
        SynthSpec {
            confounder: Some(Confounder {
                classes: (0, 1),
                overlap: 0.9,
            }),
            ..SynthSpec::default()
        }
    }

    pub fn text_cos_bound(&self) -> f64 {
        self.max_text_cos
            .unwrap_or_else(|| 0.5f64.min(1.0 / (2.0 * self.active_per_class.max(1) as f64)))
    }

    pub fn n_hidden(&self) -> usize {
        if self.confounder.is_some() {
            2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.k == 0 || self.c == 0 || self.d_joint == 0 || self.d_patch == 0 {
            return bad("k, c, d_joint and d_patch must be > 0".into());
        }
        if self.active_per_class == 0 || self.active_per_class > self.c {
            return bad(format!(
                "active_per_class must be in 1..={}, got {}",
                self.c, self.active_per_class
            ));
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be >= 2".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.alignment) {
            return bad(format!(
                "alignment must be in [0, 1], got {}",
                self.alignment
            ));
        }
        if !(self.hidden_strength >= 0.0 && self.hidden_strength.is_finite()) {
            return bad("hidden_strength must be >= 0".into());
        }
        let bound = self.text_cos_bound();
        if !(bound > 0.0 && bound <= 1.0) {
            return bad(format!("max_text_cos must be in (0, 1], got {bound}"));
        }
        if let Some(cf) = &self.confounder {
            let (a, b) = cf.classes;
            if a == b || a >= self.k || b >= self.k {
                return bad(format!(
                    "confounder classes ({a}, {b}) must be distinct and < k"
                ));
            }
            if !(0.0..=1.0).contains(&cf.overlap) {
                return bad(format!(
                    "confounder overlap must be in [0, 1], got {}",
                    cf.overlap
                ));
            }
        }
        if !binomial_at_least(self.c, self.active_per_class, self.k) {
            return bad(format!(
                "{} classes need distinct prototypes, but only C({}, {}) exist",
                self.k, self.c, self.active_per_class
            ));
        }
        if self.d_patch < self.c {
            return bad(format!(
                "d_patch {} < c {}: patch map cannot be full rank",
                self.d_patch, self.c
            ));
        }
        let needed = self.c + self.n_hidden() + self.n_distractors;
        if self.d_joint < needed {
            return bad(format!(
                "d_joint {} < {needed} (concepts + hidden directions + distractors)",
                self.d_joint
            ));
        }
        Ok(())
    }

    fn shared_count(&self, overlap: f64) -> usize {
        let a = self.active_per_class as f64;
        // tolerate binary rounding in overlap·a before taking the ceiling
        ((overlap * a - 1e-9).ceil().max(0.0) as usize).min(self.active_per_class)
    }

    fn n_test_per_class(&self) -> usize {
        let n = self.samples_per_class;
        ((self.test_fraction * n as f64).round() as usize).clamp(1, n - 1)
    }
}

/// Generator state needed to judge recovery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub spec: SynthSpec,
    /// k × c, entries 0 or 1.
    pub class_concept_prototypes: Mat,
    /// c × d_joint: `A · T`.
    pub mixing_joint: Mat,
    /// c × d_patch.
    pub mixing_patch: Mat,
    /// Classes that carry a hidden direction, in confounder order.
    pub hidden_classes: Vec<usize>,
    pub candidate_names: Vec<String>,
    /// Candidate rows, unit length, `d_joint` wide.
    pub candidate_features: Mat,
    /// For each candidate, the class whose hidden direction it is.
    pub candidate_class: Vec<Option<usize>>,
}

impl PlantedTruth {
    pub fn candidates(&self) -> CandidateConcepts {
        CandidateConcepts {
            names: self.candidate_names.clone(),
            text_features: F32Matrix::from_mat(&self.candidate_features),
        }
    }

    /// Prototype row of every sample's class, `n × c`.
    pub fn planted_concepts(&self, bundle: &EmbeddingBundle) -> Result<Mat> {
        self.check(bundle)?;
        let idx: Vec<usize> = bundle.class_labels.iter().map(|&y| y as usize).collect();
        Ok(self.class_concept_prototypes.select_rows(&idx))
    }

    /// Candidate indices that are a hidden direction of one of `classes`.
    pub fn planted_candidates_for(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.candidate_class.len())
            .filter(|&j| self.candidate_class[j].is_some_and(|c| classes.contains(&c)))
            .collect()
    }

    fn check(&self, bundle: &EmbeddingBundle) -> Result<()> {
        let (k, c) = self.class_concept_prototypes.shape();
        if k != bundle.n_classes() || c != bundle.n_concepts() {
            return Err(Error::shape(
                "planted truth",
                format!(
                    "prototypes {k}x{c} vs bundle with {} classes and {} concepts",
                    bundle.n_classes(),
                    bundle.n_concepts()
                ),
            ));
        }
        Ok(())
    }
}

pub fn save_truth(truth: &PlantedTruth, path: impl AsRef<Path>) -> Result<()> {
    io::write_json(path.as_ref(), truth)
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<PlantedTruth> {
    io::read_json(path.as_ref())
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Random unit rows with pairwise `|cos| < bound`, one row at a time.
fn text_rows<R: Rng>(rng: &mut R, c: usize, d: usize, bound: f64) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    for r in 0..c {
        let mut placed = false;
        for _ in 0..MAX_ROW_TRIES {
            let mut v = gaussian_vec(rng, d);
            if unit(&mut v) == 0.0 {
                continue;
            }
            let ok = rows
                .iter()
                .all(|u| crate::numerics::dot(u, &v).abs() < bound);
            if ok {
                rows.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Synth(format!(
                "could not place text row {r} with |cos| < {bound} in {d} dimensions \
                 after {MAX_ROW_TRIES} tries; raise d_joint or max_text_cos"
            )));
        }
    }
    Ok(rows)
}

/// Random unit vector orthogonal to every row of `basis` (orthonormal rows).
fn orthogonal_unit<R: Rng>(rng: &mut R, basis: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    for _ in 0..MAX_ROW_TRIES {
        let mut v = gaussian_vec(rng, d);
        // two passes keep the residual orthogonal to working precision
        for _ in 0..2 {
            for b in basis {
                let p = crate::numerics::dot(b, &v);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if unit(&mut v) > 1e-6 {
            return Ok(v);
        }
    }
    Err(Error::Synth(
        "no direction orthogonal to the existing span".into(),
    ))
}

fn orthonormal_basis(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for _ in 0..2 {
            for b in &basis {
                let p = crate::numerics::dot(b, &v);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if unit(&mut v) > 1e-9 {
            basis.push(v);
        }
    }
    basis
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn matrix_rank(m: &Mat, tol: f64) -> usize {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs()))
            .expect("nonempty range");
        if a.get(pivot, col).abs() <= tol {
            continue;
        }
        for j in 0..cols {
            let (x, y) = (a.get(rank, j), a.get(pivot, j));
            a.set(rank, j, y);
            a.set(pivot, j, x);
        }
        for i in rank + 1..rows {
            let f = a.get(i, col) / a.get(rank, col);
            for j in col..cols {
                let v = a.get(i, j) - f * a.get(rank, j);
                a.set(i, j, v);
            }
        }
        rank += 1;
    }
    rank
}

fn full_rank_matrix<R: Rng>(
    rng: &mut R,
    what: &str,
    rows: usize,
    mut make: impl FnMut(&mut R) -> Mat,
) -> Result<Mat> {
    for _ in 0..MAX_MATRIX_TRIES {
        let m = make(rng);
        if matrix_rank(&m, 1e-8) == rows {
            return Ok(m);
        }
    }
    Err(Error::Synth(format!(
        "{what} stayed rank deficient after {MAX_MATRIX_TRIES} draws"
    )))
}

fn prototypes<R: Rng>(rng: &mut R, spec: &SynthSpec) -> Result<Vec<Vec<usize>>> {
    let (c, a) = (spec.c, spec.active_per_class);
    let draw = |rng: &mut R| {
        let mut s = index::sample(rng, c, a).into_vec();
        s.sort_unstable();
        s
    };
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(spec.k);
    for class in 0..spec.k {
        let mut placed = false;
        for _ in 0..MAX_ROW_TRIES {
            let s = draw(rng);
            if !sets.contains(&s) {
                sets.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Synth(format!(
                "no distinct prototype left for class {class}"
            )));
        }
    }
    if let Some(cf) = &spec.confounder {
        let (p, q) = cf.classes;
        let shared = spec.shared_count(cf.overlap);
        let outside: Vec<usize> = (0..c).filter(|j| !sets[p].contains(j)).collect();
        let mut placed = false;
        for _ in 0..MAX_ROW_TRIES {
            let mut base = sets[p].clone();
            base.shuffle(rng);
            let mut s: Vec<usize> = base[..shared].to_vec();
            let extra = index::sample(rng, outside.len(), a - shared);
            s.extend(extra.iter().map(|i| outside[i]));
            s.sort_unstable();
            let clash = sets
                .iter()
                .enumerate()
                .any(|(other, t)| other != p && other != q && *t == s);
            if !clash {
                sets[q] = s;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Synth(
                "could not place the confounder prototype".into(),
            ));
        }
    }
    Ok(sets)
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

/// Builds a bundle (all samples concept-labeled) and the planted truth.
pub fn generate(spec: &SynthSpec) -> Result<(EmbeddingBundle, PlantedTruth)> {
    spec.validate()?;
    let (k, c, d, dp) = (spec.k, spec.c, spec.d_joint, spec.d_patch);
    let sigma = spec.noise_sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let text = text_rows(&mut rng, c, d, spec.text_cos_bound())?;
    let text_mat = Mat::from_rows(&text)?;
    let rho = spec.alignment;
    let scale = 1.0 / (c as f64).sqrt();
    let mixing = full_rank_matrix(&mut rng, "concept mixing", c, |rng| {
        Mat::from_fn(c, c, |i, j| {
            let r: f64 = rng.sample::<f64, _>(StandardNormal) * scale;
            f64::from(i == j) * rho + (1.0 - rho) * r
        })
    })?;
    let mixing_joint = mixing.matmul(&text_mat)?;
    let mixing_patch = full_rank_matrix(&mut rng, "patch map", c, |rng| {
        Mat::from_fn(c, dp, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
    })?;

    let mut basis = orthonormal_basis(&text);
    let mut hidden = Vec::new();
    let hidden_classes: Vec<usize> = spec
        .confounder
        .map(|cf| vec![cf.classes.0, cf.classes.1])
        .unwrap_or_default();
    for _ in &hidden_classes {
        let h = orthogonal_unit(&mut rng, &basis, d)?;
        basis.push(h.clone());
        hidden.push(h);
    }
    let mut distractors = Vec::new();
    for _ in 0..spec.n_distractors {
        let v = orthogonal_unit(&mut rng, &basis, d)?;
        basis.push(v.clone());
        distractors.push(v);
    }

    let sets = prototypes(&mut rng, spec)?;
    let proto = Mat::from_fn(k, c, |i, j| f64::from(sets[i].contains(&j)));

    let class_names: Vec<String> = (0..k)
        .map(|i| format!("class_{i:0w$}", w = digits(k)))
        .collect();
    let concept_names: Vec<String> = (0..c)
        .map(|j| format!("concept_{j:0w$}", w = digits(c)))
        .collect();

    // candidates: hidden cues and distractors in a seeded order
    let mut cands: Vec<(String, Vec<f64>, Option<usize>)> = hidden_classes
        .iter()
        .zip(&hidden)
        .map(|(&cls, h)| (format!("cue_{}", class_names[cls]), h.clone(), Some(cls)))
        .collect();
    let w = digits(spec.n_distractors);
    cands.extend(
        distractors
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("distractor_{i:0w$}"), v, None)),
    );
    cands.shuffle(&mut rng);

    let spc = spec.samples_per_class;
    let n = k * spc;
    let n_test = spec.n_test_per_class();
    let mut image = Vec::with_capacity(n * d);
    let mut patch = Vec::with_capacity(n * dp);
    let mut labels = Vec::with_capacity(n * c);
    let mut class_labels = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for class in 0..k {
        let hidden_dir = hidden_classes
            .iter()
            .position(|&h| h == class)
            .map(|i| &hidden[i]);
        let mut order: Vec<usize> = (0..spc).collect();
        order.shuffle(&mut rng);
        let mut is_test = vec![false; spc];
        for &j in &order[..n_test] {
            is_test[j] = true;
        }
        for test in is_test {
            let z: Vec<f64> = (0..c)
                .map(|j| proto.get(class, j) + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let zm = Mat::from_vec(1, c, z.clone())?;
            let mut x = zm.matmul(&mixing_joint)?.into_data();
            if let Some(h) = hidden_dir {
                let s = spec.hidden_strength + sigma * rng.sample::<f64, _>(StandardNormal);
                x.iter_mut().zip(h).for_each(|(xi, hi)| *xi += s * hi);
            }
            if unit(&mut x) == 0.0 {
                return Err(Error::Synth(format!("zero image feature in class {class}")));
            }
            image.extend(x.iter().map(|&v| v as f32));
            let p = zm.matmul(&mixing_patch)?.into_data();
            patch.extend(
                p.iter()
                    .map(|&v| (v + sigma * rng.sample::<f64, _>(StandardNormal)) as f32),
            );
            match spec.label_mode {
                LabelMode::ClassBroadcast => {
                    labels.extend(proto.row(class).iter().map(|&v| v as f32))
                }
                LabelMode::Instance => labels.extend(z.iter().map(|&v| v.clamp(0.0, 1.0) as f32)),
            }
            class_labels.push(class as u32);
            split.push(u8::from(test));
        }
    }

    let text_f32: Vec<f32> = text.iter().flatten().map(|&v| v as f32).collect();
    let bundle = EmbeddingBundle {
        manifest: Manifest {
            version: BUNDLE_VERSION,
            n_samples: n,
            d_joint: d,
            d_patch: dp,
            n_concepts: c,
            n_classes: k,
            concept_names,
            class_names,
            split,
            has_concept_labels: true,
            concept_label_encoding: Some(spec.label_mode.encoding().into()),
        },
        image_features: F32Matrix::new(n, d, image)?,
        patch_features: F32Matrix::new(n, dp, patch)?,
        text_features: F32Matrix::new(c, d, text_f32)?,
        class_labels,
        concept_labels: Some(F32Matrix::new(n, c, labels)?),
        labeled_mask: vec![true; n],
    };
    bundle.validate()?;

    let candidate_rows: Vec<Vec<f64>> = cands.iter().map(|(_, v, _)| v.clone()).collect();
    let candidate_features = if candidate_rows.is_empty() {
        Mat::zeros(0, d)
    } else {
        Mat::from_rows(&candidate_rows)?
    };
    let truth = PlantedTruth {
        spec: spec.clone(),
        class_concept_prototypes: proto,
        mixing_joint,
        mixing_patch,
        hidden_classes,
        candidate_names: cands.iter().map(|(n, _, _)| n.clone()).collect(),
        candidate_features,
        candidate_class: cands.iter().map(|(_, _, c)| *c).collect(),
    };
    Ok((bundle, truth))
}

/// Concept accuracy of the noiseless planted concepts against the bundle's
/// labels, on the test split when there is one and on all samples otherwise.
/// No model scoring the same samples can do better.
pub fn oracle_concept_accuracy(bundle: &EmbeddingBundle, truth: &PlantedTruth) -> Result<f64> {
    let labels = bundle
        .concept_labels
        .as_ref()
        .ok_or_else(|| Error::Empty("bundle has no concept labels".into()))?;
    let planted = truth.planted_concepts(bundle)?;
    let rows: Vec<usize> = match bundle.split_views() {
        Ok((_, test)) => test.indices().to_vec(),
        Err(_) => (0..bundle.n_samples()).collect(),
    };
    concept_accuracy(&planted.select_rows(&rows), &labels.select_rows(&rows))
}

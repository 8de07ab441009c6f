//! Class-level intervention.
//!
//! 1. Rank class pairs by confusion mass in the test error matrix.
//! 2. For each confounding class, pick the candidate concepts with the
//!    highest mean raw score over its training images.
//! 3. Append raw scores of the picked concepts to the enhanced scores.
//! 4. Train the class head jointly with an auxiliary head that maps the new
//!    scores onto the confounding classes only, starting from zero.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept_model::{ConceptModel, ConceptScores, ScoreInputs};
use crate::corpus::{EmbeddingBundle, F32Matrix, SampleView};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{error_matrix, ErrorMatrix};
use crate::numerics::{adam_step, top_k, AdamConfig, AdamState, Mat};
use crate::trainer::ce_loss;

pub const CANDIDATES_JSON: &str = "candidates.json";
pub const CANDIDATES_F32: &str = "candidates.f32";
pub const HEAD_JSON: &str = "head.json";
pub const W_PRIME_FILE: &str = "w_prime.f64";
const CANDIDATES_VERSION: u32 = 1;
const NORM_TOLERANCE: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfoundingPair {
    pub class_a: usize,
    pub class_b: usize,
    /// `counts[a][b] + counts[b][a]`.
    pub confusion_mass: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRanking {
    /// By `counts[a][b] + counts[b][a]`.
    #[default]
    Symmetric,
    /// By the larger of the two directed counts.
    Directed,
}

/// Top `n_pairs` class pairs with disjoint classes, chosen greedily in rank
/// order. Ties go to the lexicographically smaller `(min, max)` pair. Returns
/// fewer than `n_pairs` when the nonzero pairs run out.
pub fn find_confounding_pairs(em: &ErrorMatrix, n_pairs: usize) -> Result<Vec<ConfoundingPair>> {
    find_confounding_pairs_with(em, n_pairs, PairRanking::Symmetric)
}

pub fn find_confounding_pairs_with(
    em: &ErrorMatrix,
    n_pairs: usize,
    ranking: PairRanking,
) -> Result<Vec<ConfoundingPair>> {
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be >= 1".into()));
    }
    let k = em.n_classes();
    let mut ranked = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let mass = em.symmetric_mass(a, b);
            if mass == 0 {
                continue;
            }
            let key = match ranking {
                PairRanking::Symmetric => mass,
                PairRanking::Directed => em.counts[a][b].max(em.counts[b][a]),
            };
            ranked.push((key, a, b, mass));
        }
    }
    if ranked.is_empty() {
        return Err(Error::NoConfusions);
    }
    ranked.sort_by(|x, y| y.0.cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used = vec![false; k];
    let mut pairs = Vec::new();
    for (_, a, b, mass) in ranked {
        if pairs.len() == n_pairs {
            break;
        }
        if used[a] || used[b] {
            continue;
        }
        used[a] = true;
        used[b] = true;
        pairs.push(ConfoundingPair {
            class_a: a,
            class_b: b,
            confusion_mass: mass,
        });
    }
    Ok(pairs)
}

/// Confounding classes in pair order: `a₀, b₀, a₁, b₁, …`.
pub fn confounding_classes(pairs: &[ConfoundingPair]) -> Vec<usize> {
    pairs.iter().flat_map(|p| [p.class_a, p.class_b]).collect()
}

/// Named concept embeddings offered for expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateConcepts {
    pub names: Vec<String>,
    /// One L2-normalized row per name, `d_joint` wide.
    pub text_features: F32Matrix,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidatesHeader {
    version: u32,
    d_joint: usize,
    names: Vec<String>,
}

impl CandidateConcepts {
    pub fn new(names: Vec<String>, text_features: F32Matrix) -> Result<Self> {
        let c = CandidateConcepts {
            names,
            text_features,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn empty(d_joint: usize) -> Self {
        CandidateConcepts {
            names: Vec::new(),
            text_features: F32Matrix {
                rows: 0,
                cols: d_joint,
                data: Vec::new(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn d_joint(&self) -> usize {
        self.text_features.cols
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.text_features;
        if f.rows != self.names.len() || f.data.len() != f.rows * f.cols {
            return Err(Error::SizeMismatch {
                file: CANDIDATES_F32.into(),
                expected: self.names.len() * f.cols,
                found: f.data.len(),
                detail: format!("{} names, {} columns", self.names.len(), f.cols),
            });
        }
        let mut seen = HashSet::new();
        for (i, name) in self.names.iter().enumerate() {
            if name.is_empty() || !seen.insert(name.as_str()) {
                return Err(Error::InvalidValue {
                    file: CANDIDATES_JSON.into(),
                    index: i,
                    reason: format!("candidate name {name:?} is empty or repeated"),
                });
            }
        }
        for r in 0..f.rows {
            let norm = f
                .row(r)
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > f64::from(NORM_TOLERANCE) {
                return Err(Error::NotNormalized {
                    file: CANDIDATES_F32.into(),
                    row: r,
                    norm,
                    tolerance: f64::from(NORM_TOLERANCE),
                });
            }
        }
        Ok(())
    }

    /// Checks width and that no name repeats a base concept.
    pub fn check_against(&self, bundle: &EmbeddingBundle) -> Result<()> {
        if self.d_joint() != bundle.d_joint() {
            return Err(Error::shape(
                "candidate concepts",
                format!(
                    "width {} vs bundle d_joint {}",
                    self.d_joint(),
                    bundle.d_joint()
                ),
            ));
        }
        let base: HashSet<&str> = bundle
            .manifest
            .concept_names
            .iter()
            .map(String::as_str)
            .collect();
        if let Some(i) = self.names.iter().position(|n| base.contains(n.as_str())) {
            return Err(Error::InvalidValue {
                file: CANDIDATES_JSON.into(),
                index: i,
                reason: format!("candidate {:?} is already a base concept", self.names[i]),
            });
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> CandidateConcepts {
        let cols = self.text_features.cols;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.text_features.row(i));
        }
        CandidateConcepts {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            text_features: F32Matrix {
                rows: indices.len(),
                cols,
                data,
            },
        }
    }
}

pub fn save_candidates(candidates: &CandidateConcepts, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    candidates.validate()?;
    io::ensure_dir(dir)?;
    io::write_f32(&dir.join(CANDIDATES_F32), &candidates.text_features.data)?;
    io::write_json(
        &dir.join(CANDIDATES_JSON),
        &CandidatesHeader {
            version: CANDIDATES_VERSION,
            d_joint: candidates.d_joint(),
            names: candidates.names.clone(),
        },
    )
}

pub fn load_candidates(dir: impl AsRef<Path>) -> Result<CandidateConcepts> {
    let dir = dir.as_ref();
    let h: CandidatesHeader = io::read_json(&dir.join(CANDIDATES_JSON))?;
    if h.version != CANDIDATES_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported candidates version {}",
            h.version
        )));
    }
    if h.d_joint == 0 {
        return Err(Error::Manifest("candidates d_joint must be > 0".into()));
    }
    let n = h.names.len();
    let data = io::read_f32(
        &dir.join(CANDIDATES_F32),
        n * h.d_joint,
        &format!("{n}x{} f32", h.d_joint),
    )?;
    CandidateConcepts::new(h.names, F32Matrix::new(n, h.d_joint, data)?)
}

/// Indices (ascending) of the union over confounding classes of each class's
/// `per_class` best candidates by mean raw score on the view's samples.
pub fn select_expansion_indices(
    view: &SampleView<'_>,
    pairs: &[ConfoundingPair],
    candidates: &CandidateConcepts,
    per_class: usize,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate concept set".into()));
    }
    if per_class == 0 || per_class > candidates.len() {
        return Err(Error::Config(format!(
            "per_class must be in 1..={}, got {per_class}",
            candidates.len()
        )));
    }
    if candidates.d_joint() != view.bundle().d_joint() {
        return Err(Error::shape(
            "select_expansion_concepts",
            format!(
                "candidate width {} vs d_joint {}",
                candidates.d_joint(),
                view.bundle().d_joint()
            ),
        ));
    }
    let features = candidates.text_features.to_mat();
    let groups = view.by_class();
    let mut chosen = vec![false; candidates.len()];
    for class in confounding_classes(pairs) {
        let members = groups.get(class).filter(|g| !g.is_empty()).ok_or_else(|| {
            Error::Empty(format!(
                "confounding class {class} has no samples in the view"
            ))
        })?;
        let images = view.bundle().image_features.select_rows(members);
        let scores = images.matmul_t(&features)?;
        let mut mean = vec![0.0; candidates.len()];
        for row in scores.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        for j in top_k(&mean, per_class) {
            chosen[j] = true;
        }
    }
    Ok((0..candidates.len()).filter(|&j| chosen[j]).collect())
}

pub fn select_expansion_concepts(
    view: &SampleView<'_>,
    pairs: &[ConfoundingPair],
    candidates: &CandidateConcepts,
    per_class: usize,
) -> Result<CandidateConcepts> {
    let idx = select_expansion_indices(view, pairs, candidates, per_class)?;
    Ok(candidates.subset(&idx))
}

/// `raw_scale · image · selectedᵀ`, the scores the auxiliary head reads.
pub fn new_concept_scores(
    view: &SampleView<'_>,
    selected: &CandidateConcepts,
    raw_scale: f64,
) -> Result<Mat> {
    if selected.d_joint() != view.bundle().d_joint() {
        return Err(Error::shape(
            "expanded_scores",
            format!(
                "selected width {} vs d_joint {}",
                selected.d_joint(),
                view.bundle().d_joint()
            ),
        ));
    }
    let raw = view
        .image_features()
        .matmul_t(&selected.text_features.to_mat())?;
    Ok(if raw_scale == 1.0 {
        raw
    } else {
        raw.scale(raw_scale)
    })
}

/// Base enhanced scores followed by raw scores of the selected concepts;
/// width `c + |selected|`.
pub fn expanded_scores(
    view: &SampleView<'_>,
    model: &ConceptModel,
    selected: &CandidateConcepts,
) -> Result<ConceptScores> {
    let base = crate::concept_model::enhanced_scores(view, model)?.0;
    let extra = new_concept_scores(view, selected, model.raw_scale)?;
    Ok(ConceptScores(base.hconcat(&extra)?))
}

/// Auxiliary head over the new concepts, feeding only the confounding classes.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionHead {
    /// `c' × m`, one column per confounding class.
    pub w_prime: Mat,
    pub class_ids: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadHeader {
    n_new_concepts: usize,
    class_ids: Vec<usize>,
}

impl InterventionHead {
    pub fn zeros(n_new: usize, class_ids: Vec<usize>) -> Self {
        InterventionHead {
            w_prime: Mat::zeros(n_new, class_ids.len()),
            class_ids,
        }
    }

    /// `base + scatter(new_scores · w_prime)` into the confounding columns.
    pub fn apply(&self, base_logits: &Mat, new_scores: &Mat) -> Result<Mat> {
        if new_scores.rows() != base_logits.rows() || new_scores.cols() != self.w_prime.rows() {
            return Err(Error::shape(
                "intervention logits",
                format!(
                    "base {:?}, new scores {:?}, w_prime {:?}",
                    base_logits.shape(),
                    new_scores.shape(),
                    self.w_prime.shape()
                ),
            ));
        }
        if let Some(&c) = self.class_ids.iter().find(|&&c| c >= base_logits.cols()) {
            return Err(Error::shape(
                "intervention logits",
                format!("class {c} outside {} logit columns", base_logits.cols()),
            ));
        }
        let aux = new_scores.matmul(&self.w_prime)?;
        let mut out = base_logits.clone();
        for i in 0..out.rows() {
            for (m, &c) in self.class_ids.iter().enumerate() {
                let v = out.get(i, c) + aux.get(i, m);
                out.set(i, c, v);
            }
        }
        Ok(out)
    }
}

pub fn save_head(head: &InterventionHead, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    io::ensure_dir(dir)?;
    io::write_f64(&dir.join(W_PRIME_FILE), head.w_prime.data())?;
    io::write_json(
        &dir.join(HEAD_JSON),
        &HeadHeader {
            n_new_concepts: head.w_prime.rows(),
            class_ids: head.class_ids.clone(),
        },
    )
}

pub fn load_head(dir: impl AsRef<Path>) -> Result<InterventionHead> {
    let dir = dir.as_ref();
    let h: HeadHeader = io::read_json(&dir.join(HEAD_JSON))?;
    let (r, m) = (h.n_new_concepts, h.class_ids.len());
    let data = io::read_f64(&dir.join(W_PRIME_FILE), r * m, &format!("{r}x{m} f64"))?;
    Ok(InterventionHead {
        w_prime: Mat::from_vec(r, m, data)?,
        class_ids: h.class_ids,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub n_pairs: usize,
    /// Candidates kept per confounding class.
    pub per_class: usize,
    pub ranking: PairRanking,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            n_pairs: 1,
            per_class: 2,
            ranking: PairRanking::Symmetric,
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.per_class == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_pairs, per_class and batch_size must be >= 1".into(),
            ));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassErrorRow {
    pub class_id: usize,
    pub class_name: String,
    pub n_samples: u64,
    pub errors_before: u64,
    pub errors_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectedConfusion {
    pub from: usize,
    pub to: usize,
    pub before: u64,
    pub after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub class_a: usize,
    pub class_b: usize,
    pub mass_before: u64,
    pub mass_after: u64,
    pub a_as_b: DirectedConfusion,
    pub b_as_a: DirectedConfusion,
}

/// Before/after comparison on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub split: String,
    pub n_evaluated: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub n_new_concepts: usize,
    pub new_concepts: Vec<String>,
    pub classes: Vec<ClassErrorRow>,
    pub pairs: Vec<PairOutcome>,
    pub error_matrix_before: ErrorMatrix,
    pub error_matrix_after: ErrorMatrix,
}

fn build_report(
    bundle: &EmbeddingBundle,
    pairs: &[ConfoundingPair],
    selected: &CandidateConcepts,
    before: ErrorMatrix,
    after: ErrorMatrix,
) -> InterventionReport {
    let classes = confounding_classes(pairs)
        .into_iter()
        .map(|c| ClassErrorRow {
            class_id: c,
            class_name: bundle.manifest.class_names[c].clone(),
            n_samples: before.class_total(c),
            errors_before: before.class_errors(c),
            errors_after: after.class_errors(c),
        })
        .collect();
    let directed = |from: usize, to: usize| DirectedConfusion {
        from,
        to,
        before: before.counts[from][to],
        after: after.counts[from][to],
    };
    let pair_rows = pairs
        .iter()
        .map(|p| PairOutcome {
            class_a: p.class_a,
            class_b: p.class_b,
            mass_before: before.symmetric_mass(p.class_a, p.class_b),
            mass_after: after.symmetric_mass(p.class_a, p.class_b),
            a_as_b: directed(p.class_a, p.class_b),
            b_as_a: directed(p.class_b, p.class_a),
        })
        .collect();
    InterventionReport {
        split: "test".into(),
        n_evaluated: before.total() as usize,
        accuracy_before: before.accuracy(),
        accuracy_after: after.accuracy(),
        n_new_concepts: selected.len(),
        new_concepts: selected.names.clone(),
        classes,
        pairs: pair_rows,
        error_matrix_before: before,
        error_matrix_after: after,
    }
}

/// Fixed per-sample inputs of the retraining objective.
struct HeadInputs {
    scores: Mat,
    new_scores: Mat,
    labels: Vec<usize>,
}

impl HeadInputs {
    fn new(
        view: &SampleView<'_>,
        model: &ConceptModel,
        selected: &CandidateConcepts,
    ) -> Result<Self> {
        Ok(HeadInputs {
            scores: ScoreInputs::from_view(view, model.raw_scale)
                .enhanced(model)?
                .0,
            new_scores: new_concept_scores(view, selected, model.raw_scale)?,
            labels: view.class_labels(),
        })
    }

    fn logits(&self, model: &ConceptModel, head: &InterventionHead) -> Result<Mat> {
        head.apply(&self.scores.matmul(&model.w_k)?, &self.new_scores)
    }
}

/// Joint cross-entropy retraining of `w_k` and `w_prime` on the train split,
/// with `w_cp` frozen. Reports before/after on the test split.
pub fn intervene_and_retrain(
    bundle: &EmbeddingBundle,
    model: &ConceptModel,
    pairs: &[ConfoundingPair],
    selected: &CandidateConcepts,
    config: &InterventionConfig,
) -> Result<(ConceptModel, InterventionHead, InterventionReport)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("no confounding pairs".into()));
    }
    let (train_view, test_view) = bundle.split_views()?;
    model.check_compatible(&train_view)?;
    let k = bundle.n_classes();
    let class_ids = confounding_classes(pairs);
    let train_groups = train_view.by_class();
    for &c in &class_ids {
        if c >= k || train_groups.get(c).is_none_or(|g| g.is_empty()) {
            return Err(Error::Empty(format!(
                "confounding class {c} has no train samples"
            )));
        }
    }

    let train = HeadInputs::new(&train_view, model, selected)?;
    let test = HeadInputs::new(&test_view, model, selected)?;
    let mut head = InterventionHead::zeros(selected.len(), class_ids);
    let before = error_matrix(&test.logits(model, &head)?, &test.labels, k)?;

    let mut model = model.clone();
    let mut adam_k = AdamState::for_param(&model.w_k, config.adam);
    let mut adam_p = AdamState::for_param(&head.w_prime, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let scores = train.scores.select_rows(chunk);
            let new_scores = train.new_scores.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let logits = head.apply(&scores.matmul(&model.w_k)?, &new_scores)?;
            let (_, d_logits) = ce_loss(&logits, &labels)?;
            let grad_k = scores.t_matmul(&d_logits)?;
            let d_aux = Mat::from_fn(chunk.len(), head.class_ids.len(), |i, m| {
                d_logits.get(i, head.class_ids[m])
            });
            let grad_p = new_scores.t_matmul(&d_aux)?;
            adam_step(&mut model.w_k, &grad_k, &mut adam_k)?;
            adam_step(&mut head.w_prime, &grad_p, &mut adam_p)?;
        }
    }

    let after = error_matrix(&test.logits(&model, &head)?, &test.labels, k)?;
    let report = build_report(bundle, pairs, selected, before, after);
    Ok((model, head, report))
}

/// Everything produced by [`run_intervention`].
#[derive(Clone, Debug)]
pub struct InterventionOutcome {
    pub pairs: Vec<ConfoundingPair>,
    pub selected: CandidateConcepts,
    pub model: ConceptModel,
    pub head: InterventionHead,
    pub report: InterventionReport,
}

/// Test error matrix → pairs → selection on train images → retraining.
pub fn run_intervention(
    bundle: &EmbeddingBundle,
    model: &ConceptModel,
    candidates: &CandidateConcepts,
    config: &InterventionConfig,
) -> Result<InterventionOutcome> {
    config.validate()?;
    candidates.validate()?;
    candidates.check_against(bundle)?;
    let (train_view, test_view) = bundle.split_views()?;
    let scores = crate::concept_model::enhanced_scores(&test_view, model)?;
    let logits = scores.0.matmul(&model.w_k)?;
    let em = error_matrix(&logits, &test_view.class_labels(), bundle.n_classes())?;
    let pairs = find_confounding_pairs_with(&em, config.n_pairs, config.ranking)?;
    let selected = select_expansion_concepts(&train_view, &pairs, candidates, config.per_class)?;
    let (model, head, report) = intervene_and_retrain(bundle, model, &pairs, &selected, config)?;
    Ok(InterventionOutcome {
        pairs,
        selected,
        model,
        head,
        report,
    })
}

/// Mean raw score of every candidate over each class's samples, `k × n`.
/// Rows of classes absent from the view stay zero.
pub fn class_candidate_affinity(
    view: &SampleView<'_>,
    candidates: &CandidateConcepts,
) -> Result<Mat> {
    let features = candidates.text_features.to_mat();
    let mut out = Mat::zeros(view.bundle().n_classes(), candidates.len());
    for (c, members) in view.by_class().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let scores = view
            .bundle()
            .image_features
            .select_rows(members)
            .matmul_t(&features)?;
        for j in 0..candidates.len() {
            let total: f64 = (0..members.len()).map(|i| scores.get(i, j)).sum();
            out.set(c, j, total / members.len() as f64);
        }
    }
    Ok(out)
}

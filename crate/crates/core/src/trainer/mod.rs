//! Contrastive semi-supervised (CSS) training of the concept projection and
//! class head.
//!
//! The objective on a batch of same-class image pairs is
//! `contrastive + cross-entropy + concept`, each term switchable. Gradients
//! are analytic; see the gradient-check tests for the finite-difference
//! oracle.

mod loss;
mod sampler;

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{ce_loss, concept_loss, contrastive_loss};
pub use sampler::{sample_pair_batch, PairBatch, PairSampler};

use crate::concept_model::{init_model, ConceptModel, ScoreInputs};
use crate::corpus::{EmbeddingBundle, SampleView};
use crate::error::{Error, Result};
use crate::metrics;
use crate::numerics::{adam_step, AdamConfig, AdamState, Mat};

/// Largest default number of pairs per batch.
pub const DEFAULT_MAX_PAIRS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub contrastive: bool,
    pub ce: bool,
    pub concept: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            contrastive: true,
            ce: true,
            concept: true,
        }
    }
}

impl LossToggles {
    pub const NONE: LossToggles = LossToggles {
        contrastive: false,
        ce: false,
        concept: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Concept-loss magnitude multiplier.
    pub gamma: f64,
    /// Pairs per batch; `None` means `min(32, eligible classes)`.
    pub pairs_per_batch: Option<usize>,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub losses: LossToggles,
    /// Also anchor the second image of every pair.
    pub symmetric_anchors: bool,
    /// Multiplier applied to raw cosine scores.
    pub raw_scale: f64,
    /// Evaluate accuracies every this many epochs (the last epoch always);
    /// 0 evaluates only the last epoch.
    pub eval_every: usize,
    /// Keep `w_cp` at zero, giving a linear probe on raw scores.
    pub freeze_projection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.1,
            gamma: 100.0,
            pairs_per_batch: None,
            epochs: 100,
            adam: AdamConfig::default(),
            seed: 0,
            losses: LossToggles::default(),
            symmetric_anchors: false,
            raw_scale: 1.0,
            eval_every: 1,
            freeze_projection: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !(self.raw_scale > 0.0 && self.raw_scale.is_finite()) {
            return Err(Error::Config(format!(
                "raw_scale must be > 0, got {}",
                self.raw_scale
            )));
        }
        if self.pairs_per_batch == Some(0) {
            return Err(Error::Config("pairs_per_batch must be >= 1".into()));
        }
        self.adam.validate()
    }

    /// Pairs per batch for a train split with `eligible` usable classes.
    pub fn resolve_pairs(&self, eligible: usize) -> Result<usize> {
        let n = self
            .pairs_per_batch
            .unwrap_or_else(|| DEFAULT_MAX_PAIRS.min(eligible));
        if n == 0 || n > eligible {
            return Err(Error::InsufficientClasses {
                needed: n.max(1),
                available: eligible,
            });
        }
        Ok(n)
    }
}

/// Loss values and parameter gradients for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_contrastive: f64,
    pub l_ce: f64,
    pub l_concept: f64,
    pub l_total: f64,
    pub grad_w_cp: Mat,
    pub grad_w_k: Mat,
}

/// Everything the objective reads from a bundle, precomputed once.
#[derive(Clone, Debug)]
pub struct TrainingData {
    inputs: ScoreInputs,
    class_labels: Vec<usize>,
    concept_labels: Option<Mat>,
}

impl TrainingData {
    /// Indexed by bundle sample index, so batches address it directly.
    pub fn new(bundle: &EmbeddingBundle, raw_scale: f64) -> Self {
        let view = bundle.full_view();
        TrainingData {
            inputs: ScoreInputs::from_view(&view, raw_scale),
            class_labels: view.class_labels(),
            concept_labels: bundle.concept_labels.as_ref().map(|g| g.to_mat()),
        }
    }

    pub fn inputs(&self) -> &ScoreInputs {
        &self.inputs
    }

    fn batch_inputs(&self, indices: &[usize]) -> ScoreInputs {
        ScoreInputs {
            raw: self.inputs.raw.select_rows(indices),
            normed_patch: self.inputs.normed_patch.select_rows(indices),
        }
    }
}

/// Composes enhanced scores → the enabled loss terms and back-propagates
/// into both parameter blocks. Disabled terms contribute exactly zero.
pub fn total_loss_and_grads(
    data: &TrainingData,
    model: &ConceptModel,
    batch: &PairBatch,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let rows = batch.indices.len();
    if rows != 2 * batch.n_pairs() || batch.supervised_flags.len() != rows {
        return Err(Error::shape(
            "total_loss_and_grads",
            format!(
                "{rows} indices, {} pairs, {} flags",
                batch.n_pairs(),
                batch.supervised_flags.len()
            ),
        ));
    }
    if let Some(&i) = batch
        .indices
        .iter()
        .find(|&&i| i >= data.class_labels.len())
    {
        return Err(Error::shape(
            "total_loss_and_grads",
            format!("sample index {i} out of range"),
        ));
    }
    let inputs = data.batch_inputs(&batch.indices);
    let scores = inputs.enhanced(model)?.0;
    let c = scores.cols();
    let mut d_scores = Mat::zeros(rows, c);
    let mut grad_w_k = Mat::zeros(model.w_k.rows(), model.w_k.cols());

    let mut l_contrastive = 0.0;
    if config.losses.contrastive {
        let (l, g) = contrastive_loss(&scores, config.tau, config.symmetric_anchors)?;
        l_contrastive = l;
        d_scores.add_assign(&g)?;
    }

    let mut l_ce = 0.0;
    if config.losses.ce {
        let labels: Vec<usize> = batch
            .indices
            .iter()
            .map(|&i| data.class_labels[i])
            .collect();
        let logits = scores.matmul(&model.w_k)?;
        let (l, d_logits) = ce_loss(&logits, &labels)?;
        l_ce = l;
        grad_w_k = scores.t_matmul(&d_logits)?;
        d_scores.add_assign(&d_logits.matmul_t(&model.w_k)?)?;
    }

    let mut l_concept = 0.0;
    if config.losses.concept {
        if let Some(all_labels) = &data.concept_labels {
            if batch.supervised_flags.iter().any(|&f| f) {
                let labels = all_labels.select_rows(&batch.indices);
                let (l, g) = concept_loss(&scores, &labels, &batch.supervised_flags, config.gamma)?;
                l_concept = l;
                d_scores.add_assign(&g)?;
            }
        }
    }

    let grad_w_cp = inputs.normed_patch.t_matmul(&d_scores)?;
    let l_total = l_contrastive + l_ce + l_concept;
    if !l_total.is_finite() || !grad_w_cp.is_finite() || !grad_w_k.is_finite() {
        return Err(Error::NonFinite("CSS loss or gradient".into()));
    }
    Ok(LossBreakdown {
        l_contrastive,
        l_ce,
        l_concept,
        l_total,
        grad_w_cp,
        grad_w_k,
    })
}

/// Per-epoch training record. Accuracies are percentages; `None` when not
/// evaluated that epoch or not computable (no test split / no concept labels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_contrastive: f64,
    pub l_ce: f64,
    pub l_concept: f64,
    pub l_total: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub concept_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub pairs_per_batch: usize,
    pub batches_per_epoch: usize,
    pub n_train: usize,
    pub n_labeled_train: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_model_path: Option<String>,
    /// Not serialized: reports must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Class accuracy and top-a concept accuracy of `model` on `indices`.
pub fn evaluate_indices(
    data: &TrainingData,
    model: &ConceptModel,
    indices: &[usize],
) -> Result<(f64, Option<f64>)> {
    let inputs = data.batch_inputs(indices);
    let scores = inputs.enhanced(model)?.0;
    let logits = scores.matmul(&model.w_k)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.class_labels[i]).collect();
    let class_acc = metrics::classification_accuracy(&logits, &labels)?;
    let concept_acc = match &data.concept_labels {
        Some(g) => metrics::concept_accuracy(&scores, &g.select_rows(indices)).ok(),
        None => None,
    };
    Ok((class_acc, concept_acc))
}

/// Runs `epochs × ⌈n_train / 2n⌉` sample → loss → Adam steps on both
/// parameter blocks, starting from [`init_model`] with the config seed.
pub fn train(
    bundle: &EmbeddingBundle,
    config: &TrainConfig,
) -> Result<(ConceptModel, TrainReport)> {
    config.validate()?;
    bundle.validate()?;
    let train_view = bundle.train_view()?;
    let test_indices: Vec<usize> = match bundle.split_views() {
        Ok((_, test)) => test.indices().to_vec(),
        Err(_) => Vec::new(),
    };
    let sampler = PairSampler::new(&train_view);
    let n_pairs = config.resolve_pairs(sampler.eligible_classes())?;
    let batches_per_epoch = train_view.len().div_ceil(2 * n_pairs);

    let started = Instant::now();
    let data = TrainingData::new(bundle, config.raw_scale);
    let mut model = init_model(
        bundle.d_patch(),
        bundle.n_concepts(),
        bundle.n_classes(),
        config.seed,
    )?;
    model.raw_scale = config.raw_scale;
    let mut adam_cp = AdamState::for_param(&model.w_cp, config.adam);
    let mut adam_k = AdamState::for_param(&model.w_k, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // keep the sampling stream apart from the init stream of the same seed
    rng.set_stream(1);

    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let (mut lc, mut lce, mut lcon, mut lt) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..batches_per_epoch {
            let batch = sampler.sample(n_pairs, &mut rng)?;
            let b = total_loss_and_grads(&data, &model, &batch, config)?;
            if !config.freeze_projection {
                adam_step(&mut model.w_cp, &b.grad_w_cp, &mut adam_cp)?;
            }
            adam_step(&mut model.w_k, &b.grad_w_k, &mut adam_k)?;
            lc += b.l_contrastive;
            lce += b.l_ce;
            lcon += b.l_concept;
            lt += b.l_total;
        }
        let inv = 1.0 / batches_per_epoch as f64;
        let evaluate =
            epoch == config.epochs || (config.eval_every > 0 && epoch % config.eval_every == 0);
        let (train_acc, test_acc, concept_acc) = if evaluate {
            let (train_acc, _) = evaluate_indices(&data, &model, train_view.indices())?;
            if test_indices.is_empty() {
                (Some(train_acc), None, None)
            } else {
                let (test_acc, concept_acc) = evaluate_indices(&data, &model, &test_indices)?;
                (Some(train_acc), Some(test_acc), concept_acc)
            }
        } else {
            (None, None, None)
        };
        records.push(EpochRecord {
            epoch,
            l_contrastive: lc * inv,
            l_ce: lce * inv,
            l_concept: lcon * inv,
            l_total: lt * inv,
            train_acc,
            test_acc,
            concept_acc,
        });
    }

    let report = TrainReport {
        config: config.clone(),
        pairs_per_batch: n_pairs,
        batches_per_epoch,
        n_train: train_view.len(),
        n_labeled_train: train_view
            .indices()
            .iter()
            .filter(|&&i| bundle.labeled_mask[i])
            .count(),
        epochs: records,
        final_model_path: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Accuracy evaluation over an arbitrary view, for callers outside training.
pub fn evaluate_view(view: &SampleView<'_>, model: &ConceptModel) -> Result<(f64, Option<f64>)> {
    model.check_compatible(view)?;
    let data = TrainingData::new(view.bundle(), model.raw_scale);
    evaluate_indices(&data, model, view.indices())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::tiny_bundle;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use rand::Rng;

    fn random_model(rng: &mut ChaCha8Rng, dp: usize, c: usize, k: usize) -> ConceptModel {
        let mut m = init_model(dp, c, k, 1).unwrap();
        m.w_cp = Mat::from_fn(dp, c, |_, _| rng.random_range(-0.5..0.5));
        m.w_k = Mat::from_fn(c, k, |_, _| rng.random_range(-1.0..1.0));
        m
    }

    fn labeled_tiny() -> EmbeddingBundle {
        let mut b = tiny_bundle(4, 5, 5);
        for (i, m) in b.labeled_mask.iter_mut().enumerate() {
            *m = i % 3 != 0;
        }
        b
    }

    #[test]
    fn all_toggles_off_is_zero() {
        let b = labeled_tiny();
        let data = TrainingData::new(&b, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, b.d_patch(), b.n_concepts(), b.n_classes());
        let batch = sample_pair_batch(&b.train_view().unwrap(), 3, &mut rng).unwrap();
        let cfg = TrainConfig {
            losses: LossToggles::NONE,
            ..TrainConfig::default()
        };
        let out = total_loss_and_grads(&data, &model, &batch, &cfg).unwrap();
        assert_eq!(out.l_total, 0.0);
        assert!(out.grad_w_cp.data().iter().all(|&v| v == 0.0));
        assert!(out.grad_w_k.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ce_only_from_zero_projection_is_a_probe() {
        let b = labeled_tiny();
        let data = TrainingData::new(&b, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = init_model(b.d_patch(), b.n_concepts(), b.n_classes(), 2).unwrap();
        let batch = sample_pair_batch(&b.train_view().unwrap(), 4, &mut rng).unwrap();
        let cfg = TrainConfig {
            losses: LossToggles {
                ce: true,
                ..LossToggles::NONE
            },
            ..TrainConfig::default()
        };
        let out = total_loss_and_grads(&data, &model, &batch, &cfg).unwrap();
        assert_eq!(out.l_total, out.l_ce);
        assert!(out.grad_w_cp.is_finite());
        let fd = finite_diff_grad(
            |w| {
                let mut m = model.clone();
                m.w_cp = w.clone();
                total_loss_and_grads(&data, &m, &batch, &cfg)
                    .unwrap()
                    .l_total
            },
            &model.w_cp,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&out.grad_w_cp, &fd, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let b = labeled_tiny();
        let data = TrainingData::new(&b, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_model(&mut rng, b.d_patch(), b.n_concepts(), b.n_classes());
        let batch = sample_pair_batch(&b.train_view().unwrap(), 4, &mut rng).unwrap();
        let cfg = TrainConfig::default();
        let out = total_loss_and_grads(&data, &model, &batch, &cfg).unwrap();
        assert_eq!(out.l_total, out.l_contrastive + out.l_ce + out.l_concept);
        let fd_cp = finite_diff_grad(
            |w| {
                let mut m = model.clone();
                m.w_cp = w.clone();
                total_loss_and_grads(&data, &m, &batch, &cfg)
                    .unwrap()
                    .l_total
            },
            &model.w_cp,
            1e-5,
        )
        .unwrap();
        let fd_k = finite_diff_grad(
            |w| {
                let mut m = model.clone();
                m.w_k = w.clone();
                total_loss_and_grads(&data, &m, &batch, &cfg)
                    .unwrap()
                    .l_total
            },
            &model.w_k,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&out.grad_w_cp, &fd_cp, 1e-6).unwrap() < 1e-4);
        assert!(max_relative_error(&out.grad_w_k, &fd_k, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let b = labeled_tiny();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 11,
            ..TrainConfig::default()
        };
        let (model, report) = train(&b, &cfg).unwrap();
        assert_eq!(
            model,
            init_model(b.d_patch(), b.n_concepts(), b.n_classes(), 11).unwrap()
        );
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let b = labeled_tiny();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let (m1, r1) = train(&b, &cfg).unwrap();
        let (m2, r2) = train(&b, &cfg).unwrap();
        assert!(m1.bit_identical(&m2));
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(r1.epochs.len(), 5);
    }

    #[test]
    fn too_many_pairs_is_infeasible() {
        let b = labeled_tiny();
        let cfg = TrainConfig {
            pairs_per_batch: Some(5),
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&b, &cfg),
            Err(Error::InsufficientClasses {
                needed: 5,
                available: 4
            })
        ));
    }
}

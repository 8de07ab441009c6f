//! The demo operations on synthetic bundles, independent of the JS glue.

use cbm_align::concept_model::{enhanced_scores, raw_scores, ConceptModel};
use cbm_align::corpus::{apply_label_budget, EmbeddingBundle, LabelBudget};
use cbm_align::intervention::{run_intervention, InterventionConfig};
use cbm_align::metrics::{classification_accuracy, concept_accuracy};
use cbm_align::numerics::Mat;
use cbm_align::synth::{generate, Confounder, SynthSpec};
use cbm_align::trainer::{train, TrainConfig};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

/// Upper bounds that keep a single call interactive in the browser.
const MAX_EPOCHS: usize = 1000;
const MAX_GRID: usize = 8;
const MAX_SEEDS: usize = 5;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("bad parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Core(#[from] cbm_align::Error),
}

pub type DemoResult<T> = Result<T, DemoError>;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub seed: u64,
    pub alignment: f64,
    pub noise_sigma: f64,
    /// Share of active concepts the confounded pair has in common.
    pub overlap: f64,
    pub epochs: usize,
    /// Labels per class for the budget curve.
    pub grid: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            seed: 0,
            alignment: 0.5,
            noise_sigma: 0.1,
            overlap: 0.9,
            epochs: 200,
            grid: vec![0, 2, 5, 10],
            seeds: vec![0, 1, 2],
        }
    }
}

impl Params {
    fn validate(&self) -> DemoResult<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(DemoError::Params(format!(
                "epochs must be in 1..={MAX_EPOCHS}"
            )));
        }
        if self.grid.is_empty() || self.grid.len() > MAX_GRID {
            return Err(DemoError::Params(format!(
                "grid needs 1..={MAX_GRID} entries"
            )));
        }
        if self.seeds.is_empty() || self.seeds.len() > MAX_SEEDS {
            return Err(DemoError::Params(format!(
                "seeds needs 1..={MAX_SEEDS} entries"
            )));
        }
        Ok(())
    }

    fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            alignment: self.alignment,
            noise_sigma: self.noise_sigma,
            ..SynthSpec::default()
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            seed,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }
}

pub fn parse(params: &str) -> DemoResult<Params> {
    let p: Params = if params.trim().is_empty() {
        Params::default()
    } else {
        serde_json::from_str(params).map_err(|e| DemoError::Params(e.to_string()))?
    };
    p.validate()?;
    Ok(p)
}

fn class_means(scores: &Mat, classes: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; scores.cols()]; k];
    let mut counts = vec![0usize; k];
    for (r, &y) in classes.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(scores.row(r)) {
            *s += v;
        }
    }
    for (row, &n) in sums.iter_mut().zip(&counts) {
        row.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    sums
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

fn trained(bundle: &EmbeddingBundle, cfg: &TrainConfig) -> DemoResult<ConceptModel> {
    Ok(train(bundle, cfg)?.0)
}

/// Class-mean concept scores on the test split, before and after training
/// with full concept labels.
pub fn concept_scores(p: &Params) -> DemoResult<Value> {
    let (bundle, truth) = generate(&p.spec(p.seed))?;
    let model = trained(&bundle, &p.train_config(p.seed))?;
    let (_, test) = bundle.split_views()?;
    let classes = test.class_labels();
    let labels = test
        .concept_labels()
        .expect("synthetic bundles carry labels");
    let raw = raw_scores(&test, model.raw_scale).0;
    let enhanced = enhanced_scores(&test, &model)?.0;
    let k = bundle.n_classes();
    Ok(json!({
        "class_names": bundle.manifest.class_names,
        "concept_names": bundle.manifest.concept_names,
        "prototypes": rows(&truth.class_concept_prototypes),
        "raw_class_means": class_means(&raw, &classes, k),
        "trained_class_means": class_means(&enhanced, &classes, k),
        "raw_concept_accuracy": concept_accuracy(&raw, &labels)?,
        "trained_concept_accuracy": concept_accuracy(&enhanced, &labels)?,
        "trained_class_accuracy": classification_accuracy(&enhanced.matmul(&model.w_k)?, &classes)?,
        "n_test": test.len(),
    }))
}

/// Mean test accuracies for every grid point, averaged over seeds.
pub fn label_budget_curve(p: &Params) -> DemoResult<Value> {
    let mut points = Vec::with_capacity(p.grid.len());
    for &m in &p.grid {
        let (mut concept, mut class) = (0.0, 0.0);
        for &seed in &p.seeds {
            let (bundle, _) = generate(&p.spec(seed))?;
            let bundle = apply_label_budget(
                &bundle,
                LabelBudget {
                    per_class_count: m,
                    seed,
                },
            )?;
            let (_, report) = train(&bundle, &p.train_config(seed))?;
            let last = report.last().expect("epochs >= 1");
            concept += last.concept_acc.unwrap_or(f64::NAN);
            class += last.test_acc.unwrap_or(f64::NAN);
        }
        let n = p.seeds.len() as f64;
        points.push(json!({
            "labels_per_class": m,
            "concept_accuracy": concept / n,
            "class_accuracy": class / n,
        }));
    }
    Ok(json!({ "seeds": p.seeds, "points": points }))
}

/// Trains on a benchmark whose first two classes share most concepts, then
/// runs the intervention on the most confused pair.
pub fn intervention(p: &Params) -> DemoResult<Value> {
    if !(0.0..=1.0).contains(&p.overlap) {
        return Err(DemoError::Params("overlap must be in [0, 1]".into()));
    }
    let spec = SynthSpec {
        confounder: Some(Confounder {
            classes: (0, 1),
            overlap: p.overlap,
        }),
        ..p.spec(p.seed)
    };
    let (bundle, truth) = generate(&spec)?;
    let model = trained(&bundle, &p.train_config(p.seed))?;
    let cfg = InterventionConfig {
        seed: p.seed,
        ..InterventionConfig::default()
    };
    let out = run_intervention(&bundle, &model, &truth.candidates(), &cfg)?;
    let r = &out.report;
    Ok(json!({
        "class_names": bundle.manifest.class_names,
        "planted_pair": [0, 1],
        "pairs": r.pairs,
        "new_concepts": r.new_concepts,
        "accuracy_before": r.accuracy_before,
        "accuracy_after": r.accuracy_after,
        "error_matrix_before": r.error_matrix_before.counts,
        "error_matrix_after": r.error_matrix_after.counts,
    }))
}

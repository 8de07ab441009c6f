//! Published full-scale results shipped as static data, for comparison rows
//! in reports. None of these values gate anything.

use serde::{Deserialize, Serialize};

use crate::metrics::{ConceptMetric, EvalReport, ReportSource};

/// Raw JSON of the bundled reference file.
pub const REFERENCE_JSON: &str = include_str!("../data/reference_values.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetAccuracy {
    pub dataset: String,
    pub class_accuracy: f64,
    pub concept_accuracy: f64,
    pub n_concepts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distributional {
    pub truthfulness: f64,
    pub sparseness: f64,
    pub discriminability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionalPair {
    pub css: Distributional,
    pub clip: Distributional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassErrors {
    pub name: String,
    pub test_count: u64,
    pub errors_before: u64,
    pub errors_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub from: String,
    pub to: String,
    pub before: u64,
    pub after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReference {
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub classes: Vec<ClassErrors>,
    pub confusions: Vec<Confusion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub source: String,
    pub note: String,
    pub frozen_clip_concept_scores: Vec<DatasetAccuracy>,
    pub css_trained: Vec<DatasetAccuracy>,
    pub distributional_cub_test: DistributionalPair,
    pub intervention_cub: InterventionReference,
}

pub fn reference_values() -> ReferenceValues {
    serde_json::from_str(REFERENCE_JSON).expect("bundled reference file is valid")
}

/// Reference rows for the report tables, labelled `reference:<model>:<dataset>`.
pub fn reference_reports() -> Vec<EvalReport> {
    let r = reference_values();
    let rows = |model: &str, v: &[DatasetAccuracy]| {
        v.iter()
            .map(|d| EvalReport {
                label: format!("reference:{model}:{}", d.dataset),
                source: ReportSource::Reference,
                class_accuracy: Some(d.class_accuracy),
                concept_accuracy: Some(d.concept_accuracy),
                concept_metric: ConceptMetric::TopA,
                n_evaluated: 0,
                per_class_accuracy: Vec::new(),
            })
            .collect::<Vec<_>>()
    };
    let mut out = rows("clip", &r.frozen_clip_concept_scores);
    out.extend(rows("css", &r.css_trained));
    out
}

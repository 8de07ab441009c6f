//! Classification and concept accuracy, the per-class error matrix, and
//! distributional statistics of concept-score clouds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{argmax, softmax, top_k, Mat};

/// Label value at or above which a concept counts as present.
pub const ACTIVE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptMetric {
    /// Per sample: overlap between the `a` top-scoring concepts and the `a`
    /// active ground-truth concepts, divided by `a`.
    #[default]
    TopA,
    /// Per entry: `(score >= 0.5) == (label >= 0.5)`.
    Thresholded,
}

impl ConceptMetric {
    pub fn name(self) -> &'static str {
        match self {
            ConceptMetric::TopA => "top_a",
            ConceptMetric::Thresholded => "thresholded",
        }
    }
}

/// How score rows are normalized before distributional statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    #[default]
    Softmax,
    Raw,
}

impl ScoreNormalization {
    pub fn apply(self, m: &Mat) -> Mat {
        match self {
            ScoreNormalization::Softmax => crate::numerics::softmax_rows(m),
            ScoreNormalization::Raw => m.clone(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreNormalization::Softmax => "softmax",
            ScoreNormalization::Raw => "raw",
        }
    }
}

/// Percentage of rows whose argmax (ties to the lowest index) equals the label.
pub fn classification_accuracy(logits: &Mat, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::Empty("classification_accuracy: no rows".into()));
    }
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "classification_accuracy",
            format!("{} rows for {} labels", logits.rows(), labels.len()),
        ));
    }
    let correct = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Top-a concept accuracy. Rows without any active label are skipped.
pub fn concept_accuracy(scores: &Mat, labels: &Mat) -> Result<f64> {
    if scores.shape() != labels.shape() {
        return Err(Error::shape(
            "concept_accuracy",
            format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape()),
        ));
    }
    let mut total = 0.0;
    let mut evaluated = 0usize;
    for (s, g) in scores.row_iter().zip(labels.row_iter()) {
        let active: Vec<bool> = g.iter().map(|&v| v >= ACTIVE_THRESHOLD).collect();
        let a = active.iter().filter(|&&b| b).count();
        if a == 0 {
            continue;
        }
        let hits = top_k(s, a).into_iter().filter(|&j| active[j]).count();
        total += hits as f64 / a as f64;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Empty(
            "concept_accuracy: no row has an active concept".into(),
        ));
    }
    Ok(100.0 * total / evaluated as f64)
}

/// Fraction of (sample, concept) entries where thresholded score and label agree.
pub fn concept_accuracy_thresholded(scores: &Mat, labels: &Mat, threshold: f64) -> Result<f64> {
    if scores.shape() != labels.shape() {
        return Err(Error::shape(
            "concept_accuracy_thresholded",
            format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape()),
        ));
    }
    if scores.data().is_empty() {
        return Err(Error::Empty("concept_accuracy_thresholded".into()));
    }
    let agree = scores
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(&s, &g)| (s >= threshold) == (g >= ACTIVE_THRESHOLD))
        .count();
    Ok(100.0 * agree as f64 / scores.data().len() as f64)
}

pub fn concept_accuracy_with(metric: ConceptMetric, scores: &Mat, labels: &Mat) -> Result<f64> {
    match metric {
        ConceptMetric::TopA => concept_accuracy(scores, labels),
        ConceptMetric::Thresholded => {
            concept_accuracy_thresholded(scores, labels, ACTIVE_THRESHOLD)
        }
    }
}

/// `counts[a][b]` = number of samples of true class `a` predicted as `b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ErrorMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn class_total(&self, a: usize) -> u64 {
        self.counts[a].iter().sum()
    }

    pub fn class_errors(&self, a: usize) -> u64 {
        self.class_total(a) - self.counts[a][a]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_classes()).map(|a| self.counts[a][a]).sum()
    }

    pub fn off_diagonal(&self) -> u64 {
        self.total() - self.correct()
    }

    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct() as f64 / self.total().max(1) as f64
    }

    /// `counts[a][b] + counts[b][a]`.
    pub fn symmetric_mass(&self, a: usize, b: usize) -> u64 {
        self.counts[a][b] + self.counts[b][a]
    }

    /// Accuracy per class, `None` for classes with no samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.n_classes())
            .map(|a| {
                let t = self.class_total(a);
                (t > 0).then(|| 100.0 * self.counts[a][a] as f64 / t as f64)
            })
            .collect()
    }

    /// Square table with a `true\predicted` corner cell and class names on
    /// both axes.
    pub fn to_csv(&self, class_names: &[String]) -> Result<Vec<u8>> {
        let mut records = Vec::with_capacity(self.n_classes() + 1);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(class_names.iter().cloned());
        records.push(header);
        for (a, row) in self.counts.iter().enumerate() {
            let mut r = vec![class_names[a].clone()];
            r.extend(row.iter().map(u64::to_string));
            records.push(r);
        }
        io::csv_records(records)
    }
}

pub fn error_matrix(logits: &Mat, labels: &[usize], n_classes: usize) -> Result<ErrorMatrix> {
    if labels.len() != logits.rows() || logits.cols() != n_classes {
        return Err(Error::shape(
            "error_matrix",
            format!(
                "logits {:?} for {} labels over {n_classes} classes",
                logits.shape(),
                labels.len()
            ),
        ));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (row, &y) in logits.row_iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::shape(
                "error_matrix",
                format!("label {y} out of range for {n_classes} classes"),
            ));
        }
        counts[y][argmax(row)] += 1;
    }
    Ok(ErrorMatrix { counts })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean per-row L2 distance between two equally shaped matrices.
pub fn mean_row_distance(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(Error::shape(
            "mean_row_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let total: f64 = a.row_iter().zip(b.row_iter()).map(|(x, y)| l2(x, y)).sum();
    Ok(total / a.rows() as f64)
}

/// Instance-averaged L2 distance between normalized scores and normalized labels.
pub fn truthfulness(scores: &Mat, labels: &Mat, norm: ScoreNormalization) -> Result<f64> {
    mean_row_distance(&norm.apply(scores), &norm.apply(labels))
}

fn class_groups(classes: &[usize], n_rows: usize) -> Result<Vec<Vec<usize>>> {
    if classes.len() != n_rows {
        return Err(Error::shape(
            "class grouping",
            format!("{n_rows} rows for {} class labels", classes.len()),
        ));
    }
    let k = classes.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &c) in classes.iter().enumerate() {
        groups[c].push(i);
    }
    // classes absent from the evaluated rows do not count
    groups.retain(|g| !g.is_empty());
    Ok(groups)
}

/// Class-averaged mean over concepts of the intra-class population standard
/// deviation of normalized scores.
pub fn sparseness(scores: &Mat, classes: &[usize], norm: ScoreNormalization) -> Result<f64> {
    let s = norm.apply(scores);
    let groups = class_groups(classes, s.rows())?;
    if groups.is_empty() {
        return Err(Error::Empty("sparseness: no samples".into()));
    }
    let c = s.cols();
    let mut total = 0.0;
    for g in &groups {
        let n = g.len() as f64;
        let mut per_class = 0.0;
        for j in 0..c {
            let mean = g.iter().map(|&i| s.get(i, j)).sum::<f64>() / n;
            let var = g.iter().map(|&i| (s.get(i, j) - mean).powi(2)).sum::<f64>() / n;
            per_class += var.sqrt();
        }
        total += per_class / c as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Per-class mean rows of the normalized scores, for present classes only.
pub fn class_centroids(scores: &Mat, classes: &[usize]) -> Result<Vec<Vec<f64>>> {
    let groups = class_groups(classes, scores.rows())?;
    Ok(groups
        .iter()
        .map(|g| {
            let mut centroid = vec![0.0; scores.cols()];
            for &i in g {
                for (acc, v) in centroid.iter_mut().zip(scores.row(i)) {
                    *acc += v;
                }
            }
            centroid.iter_mut().for_each(|v| *v /= g.len() as f64);
            centroid
        })
        .collect())
}

/// Mean pairwise L2 distance between class centroids of normalized scores.
pub fn discriminability(scores: &Mat, classes: &[usize], norm: ScoreNormalization) -> Result<f64> {
    let centroids = class_centroids(&norm.apply(scores), classes)?;
    let k = centroids.len();
    if k < 2 {
        return Err(Error::Empty(format!(
            "discriminability needs at least 2 classes, got {k}"
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in a + 1..k {
            total += l2(&centroids[a], &centroids[b]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionalReport {
    pub normalization: ScoreNormalization,
    /// Needs concept labels; lower is better.
    pub truthfulness: Option<f64>,
    /// Lower is better.
    pub sparseness: f64,
    /// Higher is better.
    pub discriminability: f64,
}

pub fn distributional_report(
    scores: &Mat,
    classes: &[usize],
    labels: Option<&Mat>,
    norm: ScoreNormalization,
) -> Result<DistributionalReport> {
    Ok(DistributionalReport {
        normalization: norm,
        truthfulness: labels.map(|g| truthfulness(scores, g, norm)).transpose()?,
        sparseness: sparseness(scores, classes, norm)?,
        discriminability: discriminability(scores, classes, norm)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSource {
    #[default]
    Measured,
    /// Published value shipped for side-by-side comparison.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub source: ReportSource,
    pub class_accuracy: Option<f64>,
    pub concept_accuracy: Option<f64>,
    pub concept_metric: ConceptMetric,
    pub n_evaluated: usize,
    pub per_class_accuracy: Vec<Option<f64>>,
}

pub const REPORT_CSV_HEADER: &str =
    "label,source,class_accuracy,concept_accuracy,concept_metric,n_evaluated";

#[derive(Serialize)]
struct ReportRow<'a> {
    label: &'a str,
    source: ReportSource,
    class_accuracy: Option<f64>,
    concept_accuracy: Option<f64>,
    concept_metric: ConceptMetric,
    n_evaluated: usize,
}

pub fn reports_to_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let rows: Vec<ReportRow<'_>> = reports
        .iter()
        .map(|r| ReportRow {
            label: &r.label,
            source: r.source,
            class_accuracy: r.class_accuracy,
            concept_accuracy: r.concept_accuracy,
            concept_metric: r.concept_metric,
            n_evaluated: r.n_evaluated,
        })
        .collect();
    io::csv_bytes(&REPORT_CSV_HEADER.split(',').collect::<Vec<_>>(), &rows)
}

/// Writes `<stem>.json` and `<stem>.csv` under `dir`.
pub fn emit_reports(reports: &[EvalReport], dir: &Path, stem: &str) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_json(&dir.join(format!("{stem}.json")), &reports)?;
    io::write_atomic(&dir.join(format!("{stem}.csv")), &reports_to_csv(reports)?)
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    io::read_json(path)
}

/// Softmax-normalized copy of one row; exposed for oracle comparisons.
pub fn softmax_row(v: &[f64]) -> Vec<f64> {
    softmax(v)
}

use cbm_align::concept_model::{enhanced_scores, load_model, raw_scores};
use cbm_align::corpus::{apply_label_budget, load_bundle, EmbeddingBundle, SampleView, Split};
use cbm_align::intervention::{find_confounding_pairs_with, load_candidates, run_intervention};
use cbm_align::io::{csv_bytes, csv_records};
use cbm_align::metrics::{
    classification_accuracy, concept_accuracy_with, distributional_report, error_matrix,
    reports_to_csv, DistributionalReport, EvalReport, ReportSource,
};
use cbm_align::numerics::{top_k, Mat};
use cbm_align::reference::reference_reports;
use cbm_align::synth::{generate, oracle_concept_accuracy, TRUTH_FILE};
use cbm_align::trainer::{train, EpochRecord, TrainReport};
use cbm_align::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, SplitSel};
use crate::error::CliResult;
use crate::output::Outputs;

pub fn select_view<'a>(bundle: &'a EmbeddingBundle, split: SplitSel) -> CliResult<SampleView<'a>> {
    let want = match split {
        SplitSel::All => return Ok(bundle.full_view()),
        SplitSel::Train => Split::Train,
        SplitSel::Test => Split::Test,
    };
    let idx: Vec<usize> = (0..bundle.n_samples())
        .filter(|&i| bundle.split_of(i) == want)
        .collect();
    if idx.is_empty() {
        return Err(Error::Empty(format!("no samples in the {split:?} split")).into());
    }
    Ok(bundle.view(idx)?)
}

fn load_inputs(cfg: &RunConfig) -> CliResult<EmbeddingBundle> {
    let bundle = load_bundle(cfg.bundle_path()?)?;
    Ok(match cfg.label_budget {
        Some(b) => apply_label_budget(&bundle, b)?,
        None => bundle,
    })
}

pub fn synth(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let (mut bundle, truth) = generate(&cfg.synth)?;
    if let Some(b) = cfg.label_budget {
        bundle = apply_label_budget(&bundle, b)?;
    }
    out.bundle("bundle", &bundle)?;
    out.json(TRUTH_FILE, &truth)?;
    let candidates = truth.candidates();
    if !candidates.is_empty() {
        out.candidates("candidates", &candidates)?;
    }
    let (_, test) = bundle.split_views()?;
    let labels = test
        .concept_labels()
        .expect("synthetic bundles carry labels");
    out.json(
        "synth_summary.json",
        &json!({
            "n_samples": bundle.n_samples(),
            "n_classes": bundle.n_classes(),
            "n_concepts": bundle.n_concepts(),
            "n_candidates": candidates.len(),
            "n_labeled": bundle.labeled_mask.iter().filter(|&&m| m).count(),
            "oracle_concept_accuracy": oracle_concept_accuracy(&bundle, &truth)?,
            "raw_concept_accuracy_test": concept_accuracy_with(
                cfg.eval.concept_metric,
                &raw_scores(&test, 1.0).0,
                &labels,
            )?,
        }),
    )
}

#[derive(Serialize)]
struct TopKRow<'a> {
    sample: usize,
    class: &'a str,
    source: &'static str,
    rank: usize,
    concept: &'a str,
    score: f64,
}

pub fn score(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let bundle = load_bundle(cfg.bundle_path()?)?;
    let view = select_view(&bundle, cfg.score.split)?;
    let model = cfg
        .model
        .as_ref()
        .map(|_| cfg.model_path().and_then(|p| Ok(load_model(p)?)))
        .transpose()?;
    let raw_scale = model.as_ref().map_or(1.0, |m| m.raw_scale);
    let mut tables: Vec<(&'static str, Mat)> = vec![("raw", raw_scores(&view, raw_scale).0)];
    if let Some(m) = &model {
        tables.push(("enhanced", enhanced_scores(&view, m)?.0));
    }
    let k = cfg.score.top_k.min(bundle.n_concepts());
    let names = &bundle.manifest.concept_names;
    let mut rows = Vec::new();
    for (source, scores) in &tables {
        let f32s: Vec<f32> = scores.data().iter().map(|&v| v as f32).collect();
        out.f32s(&format!("scores_{source}.f32"), &f32s)?;
        for (r, &sample) in view.indices().iter().enumerate() {
            for (rank, j) in top_k(scores.row(r), k).into_iter().enumerate() {
                rows.push(TopKRow {
                    sample,
                    class: &bundle.manifest.class_names[bundle.class_of(sample)],
                    source,
                    rank: rank + 1,
                    concept: &names[j],
                    score: scores.get(r, j),
                });
            }
        }
    }
    out.bytes(
        "top_k.csv",
        &csv_bytes(
            &["sample", "class", "source", "rank", "concept", "score"],
            &rows,
        )?,
    )?;
    out.json(
        "scores.json",
        &json!({
            "split": cfg.score.split,
            "rows": view.len(),
            "cols": bundle.n_concepts(),
            "dtype": "f32",
            "layout": "row-major, little-endian",
            "raw_scale": raw_scale,
            "files": tables.iter().map(|(s, _)| format!("scores_{s}.f32")).collect::<Vec<_>>(),
            "sample_indices": view.indices(),
            "concept_names": names,
        }),
    )
}

#[derive(Serialize)]
struct EpochCsvRow {
    epoch: usize,
    l_contrastive: f64,
    l_ce: f64,
    l_concept: f64,
    l_total: f64,
    train_acc: Option<f64>,
    test_acc: Option<f64>,
    concept_acc: Option<f64>,
}

impl From<&EpochRecord> for EpochCsvRow {
    fn from(e: &EpochRecord) -> Self {
        EpochCsvRow {
            epoch: e.epoch,
            l_contrastive: e.l_contrastive,
            l_ce: e.l_ce,
            l_concept: e.l_concept,
            l_total: e.l_total,
            train_acc: e.train_acc,
            test_acc: e.test_acc,
            concept_acc: e.concept_acc,
        }
    }
}

pub const TRAIN_CSV_HEADER: [&str; 8] = [
    "epoch",
    "l_contrastive",
    "l_ce",
    "l_concept",
    "l_total",
    "train_acc",
    "test_acc",
    "concept_acc",
];

pub fn train_report_csv(report: &TrainReport) -> CliResult<Vec<u8>> {
    let rows: Vec<EpochCsvRow> = report.epochs.iter().map(EpochCsvRow::from).collect();
    Ok(csv_bytes(&TRAIN_CSV_HEADER, &rows)?)
}

pub fn train_cmd(cfg: &RunConfig, out: &mut Outputs) -> CliResult<f64> {
    let bundle = load_inputs(cfg)?;
    let (model, mut report) = train(&bundle, &cfg.train)?;
    out.model("model", &model)?;
    report.final_model_path = Some("model".into());
    out.json("train_report.json", &report)?;
    out.bytes("train_report.csv", &train_report_csv(&report)?)?;
    Ok(report.wall_clock_secs)
}

fn distributional(
    scores: &Mat,
    view: &SampleView<'_>,
    cfg: &RunConfig,
) -> CliResult<Option<DistributionalReport>> {
    let classes = view.class_labels();
    let present = classes
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if present < 2 {
        return Ok(None);
    }
    let labels = view.concept_labels();
    Ok(Some(distributional_report(
        scores,
        &classes,
        labels.as_ref(),
        cfg.eval.normalization,
    )?))
}

pub fn eval(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let bundle = load_inputs(cfg)?;
    let model = load_model(cfg.model_path()?)?;
    let view = select_view(&bundle, cfg.eval.split)?;
    let classes = view.class_labels();
    let labels = view.concept_labels();
    let enhanced = enhanced_scores(&view, &model)?.0;
    let raw = raw_scores(&view, model.raw_scale).0;
    let k = bundle.n_classes();

    let mut reports = Vec::new();
    for (name, scores) in [("enhanced", &enhanced), ("raw", &raw)] {
        let logits = scores.matmul(&model.w_k)?;
        let em = error_matrix(&logits, &classes, k)?;
        let concept = match &labels {
            Some(g) => Some(concept_accuracy_with(cfg.eval.concept_metric, scores, g)?),
            None => None,
        };
        reports.push(EvalReport {
            label: format!("{name}:{}", split_name(cfg.eval.split)),
            source: ReportSource::Measured,
            class_accuracy: Some(classification_accuracy(&logits, &classes)?),
            concept_accuracy: concept,
            concept_metric: cfg.eval.concept_metric,
            n_evaluated: view.len(),
            per_class_accuracy: em.per_class_accuracy(),
        });
    }
    if cfg.eval.include_reference {
        reports.extend(reference_reports());
    }
    out.json("eval_report.json", &reports)?;
    out.bytes("eval_report.csv", &reports_to_csv(&reports)?)?;

    out.json(
        "distributional.json",
        &json!({
            "normalization": cfg.eval.normalization,
            "split": cfg.eval.split,
            "enhanced": distributional(&enhanced, &view, cfg)?,
            "raw": distributional(&raw, &view, cfg)?,
        }),
    )?;
    out.json(
        "eval_summary.json",
        &json!({
            "split": cfg.eval.split,
            "concept_metric": cfg.eval.concept_metric,
            "normalization": cfg.eval.normalization,
            "w_cp_is_zero": model.w_cp.max_abs() == 0.0,
            "note": if model.w_cp.max_abs() == 0.0 {
                "w_cp = 0: enhanced scores equal raw scores"
            } else {
                "w_cp trained"
            },
        }),
    )
}

fn split_name(s: SplitSel) -> &'static str {
    match s {
        SplitSel::Train => "train",
        SplitSel::Test => "test",
        SplitSel::All => "all",
    }
}

pub fn analyze(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let bundle = load_inputs(cfg)?;
    let model = load_model(cfg.model_path()?)?;
    let view = select_view(&bundle, cfg.eval.split)?;
    let logits = enhanced_scores(&view, &model)?.0.matmul(&model.w_k)?;
    let em = error_matrix(&logits, &view.class_labels(), bundle.n_classes())?;
    out.json("error_matrix.json", &em)?;
    out.bytes(
        "error_matrix.csv",
        &em.to_csv(&bundle.manifest.class_names)?,
    )?;

    let mut ranked = Vec::new();
    for a in 0..em.n_classes() {
        for b in a + 1..em.n_classes() {
            let mass = em.symmetric_mass(a, b);
            if mass > 0 {
                ranked.push(json!({
                    "class_a": a,
                    "class_b": b,
                    "a_as_b": em.counts[a][b],
                    "b_as_a": em.counts[b][a],
                    "confusion_mass": mass,
                }));
            }
        }
    }
    ranked.sort_by(|x, y| {
        y["confusion_mass"]
            .as_u64()
            .cmp(&x["confusion_mass"].as_u64())
            .then(x["class_a"].as_u64().cmp(&y["class_a"].as_u64()))
            .then(x["class_b"].as_u64().cmp(&y["class_b"].as_u64()))
    });
    let selected = match find_confounding_pairs_with(
        &em,
        cfg.intervention.n_pairs,
        cfg.intervention.ranking,
    ) {
        Ok(p) => p,
        Err(Error::NoConfusions) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    out.json(
        "confounding.json",
        &json!({
            "split": cfg.eval.split,
            "ranking": cfg.intervention.ranking,
            "accuracy": em.accuracy(),
            "no_confusions": em.off_diagonal() == 0,
            "selected": selected,
            "ranked_pairs": ranked,
        }),
    )
}

pub fn intervene(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let bundle = load_inputs(cfg)?;
    let model = load_model(cfg.model_path()?)?;
    let candidates = load_candidates(cfg.candidates_path()?)?;
    let outcome = run_intervention(&bundle, &model, &candidates, &cfg.intervention)?;
    out.model("model", &outcome.model)?;
    out.head("head", &outcome.head)?;
    out.candidates("selected", &outcome.selected)?;
    out.json("intervention_report.json", &outcome.report)?;

    let r = &outcome.report;
    let names = &bundle.manifest.class_names;
    let mut records: Vec<Vec<String>> = vec![vec!["row".into(), "before".into(), "after".into()]];
    for pair in &r.pairs {
        for c in r
            .classes
            .iter()
            .filter(|c| c.class_id == pair.class_a || c.class_id == pair.class_b)
        {
            records.push(vec![
                format!("total errors for {} ({})", c.class_name, c.n_samples),
                c.errors_before.to_string(),
                c.errors_after.to_string(),
            ]);
        }
        for d in [&pair.a_as_b, &pair.b_as_a] {
            records.push(vec![
                format!("{} misclassified as {}", names[d.from], names[d.to]),
                d.before.to_string(),
                d.after.to_string(),
            ]);
        }
    }
    records.push(vec![
        "classification accuracy (%)".into(),
        r.accuracy_before.to_string(),
        r.accuracy_after.to_string(),
    ]);
    out.bytes("intervention_report.csv", &csv_records(records)?)?;
    Ok(())
}

/// Seed each subcommand reports in its run manifest.
pub fn primary_seed(cfg: &RunConfig, command: &str) -> serde_json::Value {
    match command {
        "synth" => json!(cfg.synth.seed),
        "intervene" => json!(cfg.intervention.seed),
        "sweep" => json!(cfg.sweep.seeds),
        _ => json!(cfg.train.seed),
    }
}

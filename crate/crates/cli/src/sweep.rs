//! Label-budget sweep: train once per (labels per class, seed) cell and
//! aggregate test accuracies across seeds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cbm_align::corpus::{apply_label_budget, load_bundle, EmbeddingBundle, LabelBudget};
use cbm_align::io::csv_bytes;
use cbm_align::synth::{generate, SynthSpec};
use cbm_align::trainer::{train, TrainConfig, TrainReport};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::Outputs;

pub const THREADS_ENV: &str = "CBM_ALIGN_THREADS";

#[derive(Clone, Debug, Serialize)]
pub struct SweepRun {
    pub labels_per_class: usize,
    pub seed: u64,
    pub class_accuracy: f64,
    pub concept_accuracy: Option<f64>,
    pub n_labeled_train: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    pub labels_per_class: usize,
    pub n_seeds: usize,
    pub class_accuracy_mean: f64,
    pub class_accuracy_std: f64,
    pub concept_accuracy_mean: Option<f64>,
    pub concept_accuracy_std: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate(m: usize, runs: &[&SweepRun]) -> SweepCell {
    let (cm, cs) = mean_std(&runs.iter().map(|r| r.class_accuracy).collect::<Vec<_>>());
    let concept: Option<Vec<f64>> = runs.iter().map(|r| r.concept_accuracy).collect();
    let (km, ks) = match concept {
        Some(v) => {
            let (a, b) = mean_std(&v);
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    SweepCell {
        labels_per_class: m,
        n_seeds: runs.len(),
        class_accuracy_mean: cm,
        class_accuracy_std: cs,
        concept_accuracy_mean: km,
        concept_accuracy_std: ks,
    }
}

fn thread_count(jobs: usize) -> usize {
    let requested = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    requested.unwrap_or(avail).min(jobs).max(1)
}

type CellResult = CliResult<(SweepRun, TrainReport)>;

fn run_cell(
    shared: Option<&EmbeddingBundle>,
    synth: &SynthSpec,
    train_cfg: &TrainConfig,
    m: usize,
    seed: u64,
) -> CellResult {
    let generated;
    let base = match shared {
        Some(b) => b,
        None => {
            generated = generate(&SynthSpec {
                seed,
                ..synth.clone()
            })?
            .0;
            &generated
        }
    };
    let bundle = apply_label_budget(
        base,
        LabelBudget {
            per_class_count: m,
            seed,
        },
    )?;
    let (_, report) = train(
        &bundle,
        &TrainConfig {
            seed,
            ..train_cfg.clone()
        },
    )?;
    let last = report
        .last()
        .ok_or_else(|| CliError::Config("sweep needs train.epochs >= 1".into()))?;
    let class_accuracy = last
        .test_acc
        .ok_or_else(|| CliError::Config("sweep needs a bundle with a test split".into()))?;
    let run = SweepRun {
        labels_per_class: m,
        seed,
        class_accuracy,
        concept_accuracy: last.concept_acc,
        n_labeled_train: report.n_labeled_train,
    };
    Ok((run, report))
}

pub fn sweep(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let s = &cfg.sweep;
    if s.grid.is_empty() || s.seeds.is_empty() {
        return Err(CliError::Config(
            "sweep.grid and sweep.seeds must be non-empty".into(),
        ));
    }
    let shared = match &cfg.bundle {
        Some(_) => Some(load_bundle(cfg.bundle_path()?)?),
        None => None,
    };
    let jobs: Vec<(usize, u64)> = s
        .grid
        .iter()
        .flat_map(|&m| s.seeds.iter().map(move |&seed| (m, seed)))
        .collect();

    // results land in job order regardless of which thread finishes first
    let slots: Vec<Mutex<Option<CellResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..thread_count(jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(m, seed)) = jobs.get(j) else { break };
                let r = run_cell(shared.as_ref(), &cfg.synth, &cfg.train, m, seed);
                *slots[j].lock().expect("sweep slot poisoned") = Some(r);
            });
        }
    });

    let mut runs = Vec::with_capacity(jobs.len());
    for slot in slots {
        let (run, report) = slot
            .into_inner()
            .expect("sweep slot poisoned")
            .expect("every job ran")?;
        out.json(
            &format!(
                "runs/labels_{}/seed_{}/train_report.json",
                run.labels_per_class, run.seed
            ),
            &report,
        )?;
        runs.push(run);
    }

    let cells: Vec<SweepCell> = s
        .grid
        .iter()
        .map(|&m| {
            let of_m: Vec<&SweepRun> = runs.iter().filter(|r| r.labels_per_class == m).collect();
            aggregate(m, &of_m)
        })
        .collect();

    out.bytes(
        "sweep.csv",
        &csv_bytes(
            &[
                "labels_per_class",
                "n_seeds",
                "class_accuracy_mean",
                "class_accuracy_std",
                "concept_accuracy_mean",
                "concept_accuracy_std",
            ],
            &cells,
        )?,
    )?;
    out.bytes(
        "sweep_runs.csv",
        &csv_bytes(
            &[
                "labels_per_class",
                "seed",
                "class_accuracy",
                "concept_accuracy",
                "n_labeled_train",
            ],
            &runs,
        )?,
    )?;
    out.json(
        "sweep.json",
        &json!({
            "bundle": if shared.is_some() { "shared" } else { "synthetic per seed" },
            "grid": s.grid,
            "seeds": s.seeds,
            "cells": cells,
            "runs": runs,
        }),
    )
}

use cbm_align::concept_model::{class_logits, enhanced_scores};
use cbm_align::intervention::{
    class_candidate_affinity, find_confounding_pairs, intervene_and_retrain, new_concept_scores,
    run_intervention, select_expansion_indices, ConfoundingPair, InterventionConfig,
    InterventionHead,
};
use cbm_align::synth::{generate, SynthSpec};
use cbm_align::trainer::{train, TrainConfig};

fn trained(
    seed: u64,
) -> (
    cbm_align::corpus::EmbeddingBundle,
    cbm_align::synth::PlantedTruth,
    cbm_align::concept_model::ConceptModel,
) {
    let spec = SynthSpec {
        seed,
        ..SynthSpec::confounder_benchmark()
    };
    let (bundle, truth) = generate(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let (model, _) = train(&bundle, &cfg).unwrap();
    (bundle, truth, model)
}

#[test]
fn selection_finds_planted_cues() {
    let (bundle, truth, _) = trained(0);
    let train_view = bundle.train_view().unwrap();
    let pair = [ConfoundingPair {
        class_a: 0,
        class_b: 1,
        confusion_mass: 1,
    }];
    let mut got = select_expansion_indices(&train_view, &pair, &truth.candidates(), 1).unwrap();
    got.sort_unstable();
    assert_eq!(got, truth.planted_candidates_for(&[0, 1]));

    // the affinity table agrees: each cue is its class's best candidate
    let aff = class_candidate_affinity(&train_view, &truth.candidates()).unwrap();
    for (j, owner) in truth.candidate_class.iter().enumerate() {
        if let Some(class) = owner {
            let best = cbm_align::numerics::argmax(aff.row(*class));
            assert_eq!(best, j);
        }
    }
}

#[test]
fn zero_head_reproduces_base_logits_bitwise() {
    let (bundle, truth, model) = trained(1);
    let view = bundle.full_view();
    let base = class_logits(&enhanced_scores(&view, &model).unwrap(), &model)
        .unwrap()
        .0;
    let selected = truth.candidates();
    let new = new_concept_scores(&view, &selected, model.raw_scale).unwrap();
    let head = InterventionHead::zeros(selected.len(), vec![0, 1]);
    let out = head.apply(&base, &new).unwrap();
    assert!(out
        .data()
        .iter()
        .zip(base.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn zero_epochs_change_nothing() {
    let (bundle, truth, model) = trained(2);
    let pairs = [ConfoundingPair {
        class_a: 0,
        class_b: 1,
        confusion_mass: 1,
    }];
    let cfg = InterventionConfig {
        epochs: 0,
        ..InterventionConfig::default()
    };
    let (m, head, report) =
        intervene_and_retrain(&bundle, &model, &pairs, &truth.candidates(), &cfg).unwrap();
    assert!(m.bit_identical(&model));
    assert_eq!(head.w_prime.max_abs(), 0.0);
    assert_eq!(report.error_matrix_before, report.error_matrix_after);
}

#[test]
fn pipeline_reduces_planted_confusion() {
    for seed in 0..3 {
        let (bundle, truth, model) = trained(seed);
        let cfg = InterventionConfig {
            seed,
            ..InterventionConfig::default()
        };
        let out = run_intervention(&bundle, &model, &truth.candidates(), &cfg).unwrap();
        assert_eq!((out.pairs[0].class_a, out.pairs[0].class_b), (0, 1));
        let r = &out.report;
        assert!(
            r.pairs[0].mass_after < r.pairs[0].mass_before,
            "seed {seed}: {r:?}"
        );
        assert!(r.accuracy_after >= r.accuracy_before - 0.5);
        let em = &r.error_matrix_before;
        assert_eq!(
            find_confounding_pairs(em, 1).unwrap()[0].confusion_mass,
            r.pairs[0].mass_before
        );
    }
}

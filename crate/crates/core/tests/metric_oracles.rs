//! Library metrics against straightforward reimplementations on random inputs.

use cbm_align::metrics::{
    classification_accuracy, concept_accuracy, discriminability, error_matrix, sparseness,
    truthfulness, ScoreNormalization,
};
use cbm_align::numerics::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 20;
const C: usize = 8;

fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn oracle_truthfulness(s: &Mat, g: &Mat) -> f64 {
    let mut total = 0.0;
    for (a, b) in rows(s).iter().zip(rows(g)) {
        let (a, b) = (oracle_softmax(a), oracle_softmax(&b));
        let mut sq = 0.0;
        for j in 0..a.len() {
            sq += (a[j] - b[j]) * (a[j] - b[j]);
        }
        total += sq.sqrt();
    }
    total / s.rows() as f64
}

fn oracle_sparseness(s: &Mat, y: &[usize], k: usize) -> f64 {
    let s: Vec<Vec<f64>> = rows(s).iter().map(|r| oracle_softmax(r)).collect();
    let mut per_class = Vec::new();
    for class in 0..k {
        let members: Vec<&Vec<f64>> = s
            .iter()
            .zip(y)
            .filter(|(_, &c)| c == class)
            .map(|(r, _)| r)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for j in 0..C {
            let vals: Vec<f64> = members.iter().map(|r| r[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            acc += var.sqrt();
        }
        per_class.push(acc / C as f64);
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

fn oracle_discriminability(s: &Mat, y: &[usize], k: usize) -> f64 {
    let s: Vec<Vec<f64>> = rows(s).iter().map(|r| oracle_softmax(r)).collect();
    let mut centroids = Vec::new();
    for class in 0..k {
        let members: Vec<&Vec<f64>> = s
            .iter()
            .zip(y)
            .filter(|(_, &c)| c == class)
            .map(|(r, _)| r)
            .collect();
        if members.is_empty() {
            continue;
        }
        centroids.push(
            (0..C)
                .map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64)
                .collect::<Vec<f64>>(),
        );
    }
    let mut total = 0.0;
    let mut count = 0;
    for a in 0..centroids.len() {
        for b in 0..centroids.len() {
            if a < b {
                let d: f64 = (0..C)
                    .map(|j| (centroids[a][j] - centroids[b][j]).powi(2))
                    .sum();
                total += d.sqrt();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Sort-based top-a with ties toward the lower index.
fn oracle_concept_accuracy(s: &Mat, g: &Mat) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..s.rows() {
        let active: Vec<usize> = (0..C).filter(|&j| g.get(i, j) >= 0.5).collect();
        if active.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..C).collect();
        order.sort_by(|&a, &b| {
            s.get(i, b)
                .partial_cmp(&s.get(i, a))
                .unwrap()
                .then(a.cmp(&b))
        });
        let hits = order[..active.len()]
            .iter()
            .filter(|j| active.contains(j))
            .count();
        total += hits as f64 / active.len() as f64;
        n += 1;
    }
    100.0 * total / n as f64
}

fn random_case(seed: u64) -> (Mat, Mat, Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 4;
    let s = Mat::from_fn(N, C, |_, _| rng.random_range(-3.0..3.0));
    let g = Mat::from_fn(N, C, |_, _| f64::from(rng.random_bool(0.3)));
    let y: Vec<usize> = (0..N)
        .map(|i| if i < k { i } else { rng.random_range(0..k) })
        .collect();
    (s, g, y, k)
}

#[test]
fn distributional_metrics_match_loops() {
    for seed in 0..50 {
        let (s, g, y, k) = random_case(seed);
        let norm = ScoreNormalization::Softmax;
        assert!((truthfulness(&s, &g, norm).unwrap() - oracle_truthfulness(&s, &g)).abs() < 1e-12);
        assert!((sparseness(&s, &y, norm).unwrap() - oracle_sparseness(&s, &y, k)).abs() < 1e-12);
        assert!(
            (discriminability(&s, &y, norm).unwrap() - oracle_discriminability(&s, &y, k)).abs()
                < 1e-12
        );
    }
}

#[test]
fn concept_accuracy_matches_sort_oracle() {
    for seed in 0..50 {
        let (s, g, _, _) = random_case(seed);
        // coarse grid values force ties
        let coarse = Mat::from_fn(N, C, |i, j| (s.get(i, j) * 2.0).round());
        assert!(
            (concept_accuracy(&s, &g).unwrap() - oracle_concept_accuracy(&s, &g)).abs() < 1e-12
        );
        assert!(
            (concept_accuracy(&coarse, &g).unwrap() - oracle_concept_accuracy(&coarse, &g)).abs()
                < 1e-12
        );
    }
}

#[test]
fn error_matrix_matches_counting_loop() {
    for seed in 0..50 {
        let (s, _, y, _) = random_case(seed);
        let k = C;
        let labels: Vec<usize> = y.iter().map(|&c| c * 2).collect();
        let em = error_matrix(&s, &labels, k).unwrap();
        let mut counts = vec![vec![0u64; k]; k];
        for i in 0..N {
            let mut best = 0;
            for j in 1..k {
                if s.get(i, j) > s.get(i, best) {
                    best = j;
                }
            }
            counts[labels[i]][best] += 1;
        }
        assert_eq!(em.counts, counts);
        let acc = classification_accuracy(&s, &labels).unwrap();
        let correct: u64 = (0..k).map(|a| counts[a][a]).sum();
        assert_eq!(acc, 100.0 * correct as f64 / N as f64);
    }
}

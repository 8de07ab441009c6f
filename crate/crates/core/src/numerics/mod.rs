//! Dense linear algebra, normalization functions, Adam and a central
//! finite-difference gradient checker.
//!
//! Training arithmetic is `f64` throughout; bundles are `f32` on disk only.

mod adam;
mod gradcheck;
mod mat;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use mat::{dot, matmul, norm, transpose, Mat};

use crate::error::{Error, Result};

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization without a learnable affine: `(v - mean) / sqrt(var + eps)`
/// with the population variance.
pub fn layer_norm(v: &[f64], eps: f64) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.iter().map(|x| (x - mean) * inv).collect()
}

/// Applies [`layer_norm`] to every row.
pub fn layer_norm_rows(m: &Mat, eps: f64) -> Mat {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&layer_norm(m.row(r), eps));
    }
    out
}

/// `max + ln Σ exp(v - max)`; exact for a single element.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&softmax(m.row(r)));
    }
    out
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_sim",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 {
        return Err(Error::ZeroNorm {
            what: "cosine_sim lhs",
            row: 0,
        });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm {
            what: "cosine_sim rhs",
            row: 0,
        });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, largest first; ties toward the lower index.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    // -0.0 and 0.0 must tie, which total_cmp alone would not do
    let key = |x: f64| if x == 0.0 { 0.0 } else { x };
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| key(v[b]).total_cmp(&key(v[a])).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn signed_zeros_tie_in_top_k() {
        assert_eq!(top_k(&[-0.0, 0.0, -1.0], 1), vec![0]);
        assert_eq!(top_k(&[0.0, -0.0, 2.0], 2), vec![2, 0]);
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        assert_eq!(layer_norm(&[5.0; 4], 1e-5), vec![0.0; 4]);
    }

    #[test]
    fn layer_norm_unit_input_is_fixed_point() {
        assert_eq!(layer_norm(&[1.0, -1.0], 0.0), vec![1.0, -1.0]);
    }

    #[test]
    fn layer_norm_moments_on_random_768() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..768).map(|_| rng.random_range(-3.0..7.0)).collect();
        let y = layer_norm(&v, 1e-5);
        let moments = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (
                m,
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64,
            )
        };
        let (_, var_in) = moments(&v);
        let (mean, var) = moments(&y);
        assert!(mean.abs() < 1e-12);
        assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[2.0; 4]), vec![0.25; 4]);
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let v = [0.3, -1.2, 4.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 1000.0).collect();
        for (a, b) in softmax(&v).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_cases() {
        let v = [0.5, -2.0, 1.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        let c = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn single_element_log_sum_exp_is_exact() {
        for x in [-3.7, 0.0, 12.25, 1e-3] {
            assert_eq!(log_sum_exp(&[x]), x);
        }
    }

    #[test]
    fn ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(top_k(&[0.5, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1e4f64..1e4, 1..64)) {
            let s: f64 = softmax(&v).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn layer_norm_mean_is_zero(v in prop::collection::vec(-1e3f64..1e3, 2..128)) {
            let y = layer_norm(&v, LAYER_NORM_EPS);
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }
}

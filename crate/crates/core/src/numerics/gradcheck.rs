use super::Mat;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `at`:
/// `(f(x + h·e_ij) - f(x - h·e_ij)) / 2h` for every entry.
pub fn finite_diff_grad(mut f: impl FnMut(&Mat) -> f64, at: &Mat, h: f64) -> Result<Mat> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut x = at.clone();
    let mut grad = Mat::zeros(at.rows(), at.cols());
    for idx in 0..at.data().len() {
        let orig = x.data()[idx];
        x.data_mut()[idx] = orig + h;
        let plus = f(&x);
        x.data_mut()[idx] = orig - h;
        let minus = f(&x);
        x.data_mut()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at perturbed entry {idx}: f(+h)={plus}, f(-h)={minus}"
            )));
        }
        grad.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest entrywise [`relative_error`] between two same-shaped matrices.
pub fn max_relative_error(analytic: &Mat, numeric: &Mat, floor: f64) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape(
            "max_relative_error",
            format!("{:?} vs {:?}", analytic.shape(), numeric.shape()),
        ));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Mat::from_fn(3, 4, |i, j| (i as f64) - 0.3 * j as f64);
        let g = finite_diff_grad(|m| m.data().iter().sum(), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_x() {
        let x = Mat::from_fn(2, 5, |i, j| (i * 5 + j) as f64 * 0.7 - 3.0);
        let g = finite_diff_grad(
            |m| 0.5 * m.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_non_finite_objective() {
        let x = Mat::zeros(1, 1);
        let res = finite_diff_grad(|m| 1.0 / m.get(0, 0).max(0.0), &x, 1e-5);
        assert!(matches!(res, Err(Error::NonFinite(_))));
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }

    proptest! {
        // f(x) = ½ xᵀ A x + bᵀ x, gradient ½(A + Aᵀ)x + b.
        #[test]
        fn quadratic_forms_within_10_h_squared(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Mat::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Mat::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
            let f = |m: &Mat| {
                let v = m.data();
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += 0.5 * v[i] * a.get(i, j) * v[j];
                    }
                    s += b[i] * v[i];
                }
                s
            };
            let h = 1e-4;
            let g = finite_diff_grad(f, &x, h).unwrap();
            for i in 0..n {
                let mut want = b[i];
                for j in 0..n {
                    want += 0.5 * (a.get(i, j) + a.get(j, i)) * x.data()[j];
                }
                prop_assert!((g.data()[i] - want).abs() < 10.0 * h * h);
            }
        }
    }
}

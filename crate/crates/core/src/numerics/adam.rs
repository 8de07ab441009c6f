use serde::{Deserialize, Serialize};

use super::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Mat,
    pub second_moment: Mat,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: Mat::zeros(rows, cols),
            second_moment: Mat::zeros(rows, cols),
            step_count: 0,
        }
    }

    pub fn for_param(param: &Mat, config: AdamConfig) -> Self {
        Self::new(param.rows(), param.cols(), config)
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Mat, grad: &Mat, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                state.first_moment.shape()
            ),
        ));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_everything_at_rest() {
        let mut p = Mat::from_vec(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        adam_step(&mut p, &Mat::zeros(2, 2), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.first_moment, Mat::zeros(2, 2));
        assert_eq!(st.second_moment, Mat::zeros(2, 2));
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = Mat::from_vec(1, 1, vec![1.0]).unwrap();
        let mut st = AdamState::for_param(&p, cfg);
        adam_step(&mut p, &Mat::from_vec(1, 1, vec![1.0]).unwrap(), &mut st).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn repeated_runs_agree() {
        let run = || {
            let mut p = Mat::from_vec(1, 3, vec![0.5, -0.5, 2.0]).unwrap();
            let mut st = AdamState::for_param(&p, AdamConfig::default());
            for i in 0..25 {
                let g = Mat::from_fn(1, 3, |_, j| ((i * 3 + j) as f64).sin());
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut p = Mat::zeros(2, 2);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &Mat::zeros(2, 3), &mut st).is_err());
    }

    proptest! {
        #[test]
        fn zero_gradient_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 1..20), steps in 1usize..5) {
            let n = vals.len();
            let mut p = Mat::from_vec(1, n, vals).unwrap();
            let before = p.clone();
            let mut st = AdamState::for_param(&p, AdamConfig::default());
            for _ in 0..steps {
                adam_step(&mut p, &Mat::zeros(1, n), &mut st).unwrap();
            }
            prop_assert_eq!(p, before);
        }
    }
}

//! Adam optimizer over the model's four parameter arrays.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::netcore::{ModelParameters, ParameterGradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Optimizer state: step counter plus first/second moment estimates, which
/// share the parameter shapes and start at zero.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: ParameterGradients,
    pub second_moment: ParameterGradients,
}

impl AdamState {
    pub fn new(feature_dim: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: ParameterGradients::zeros(feature_dim),
            second_moment: ParameterGradients::zeros(feature_dim),
        }
    }
}

fn update_matrix(
    theta: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    cfg: &AdamConfig,
    bias1: f64,
    bias2: f64,
) {
    for ((t, g), (m, v)) in theta
        .iter_mut()
        .zip(grad.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *t -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

fn update_vector(
    theta: &mut Array1<f64>,
    grad: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    cfg: &AdamConfig,
    bias1: f64,
    bias2: f64,
) {
    for ((t, g), (m, v)) in theta
        .iter_mut()
        .zip(grad.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *t -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

fn update_scalar(
    theta: &mut f64,
    grad: f64,
    m: &mut f64,
    v: &mut f64,
    cfg: &AdamConfig,
    bias1: f64,
    bias2: f64,
) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
    let m_hat = *m / bias1;
    let v_hat = *v / bias2;
    *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
}

/// One Adam update with bias-corrected moments:
/// `θ ← θ − lr · m̂ / (√v̂ + ε)`. Non-finite gradients are rejected with
/// parameters and state untouched.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &ParameterGradients,
    state: &mut AdamState,
) -> Result<()> {
    if params.feature_dim() != grads.b_fc.len()
        || params.feature_dim() != state.first_moment.b_fc.len()
    {
        return Err(Error::Shape(format!(
            "feature dimensions disagree: params {}, grads {}, state {}",
            params.feature_dim(),
            grads.b_fc.len(),
            state.first_moment.b_fc.len()
        )));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient entry".into()));
    }

    state.step_count += 1;
    let cfg = state.config;
    let bias1 = 1.0 - cfg.beta1.powi(state.step_count as i32);
    let bias2 = 1.0 - cfg.beta2.powi(state.step_count as i32);
    update_matrix(
        &mut params.w_fc,
        &grads.w_fc,
        &mut state.first_moment.w_fc,
        &mut state.second_moment.w_fc,
        &cfg,
        bias1,
        bias2,
    );
    update_vector(
        &mut params.b_fc,
        &grads.b_fc,
        &mut state.first_moment.b_fc,
        &mut state.second_moment.b_fc,
        &cfg,
        bias1,
        bias2,
    );
    update_vector(
        &mut params.w_ar,
        &grads.w_ar,
        &mut state.first_moment.w_ar,
        &mut state.second_moment.w_ar,
        &cfg,
        bias1,
        bias2,
    );
    update_scalar(
        &mut params.b_ar,
        grads.b_ar,
        &mut state.first_moment.b_ar,
        &mut state.second_moment.b_ar,
        &cfg,
        bias1,
        bias2,
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::xavier_init;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Scalar Adam recurrence used as an independent cross-check.
    fn scalar_adam(grads: &[f64], cfg: &AdamConfig) -> f64 {
        let (mut theta, mut m, mut v) = (0.0, 0.0, 0.0);
        for (step, g) in grads.iter().enumerate() {
            let t = (step + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        theta
    }

    fn scalar_setup() -> (ModelParameters, AdamState) {
        let mut params = xavier_init(1, 0);
        params.w_fc[[0, 0]] = 0.0;
        params.w_ar[0] = 0.0;
        let state = AdamState::new(1, AdamConfig::default());
        (params, state)
    }

    fn unit_grads() -> ParameterGradients {
        let mut g = ParameterGradients::zeros(1);
        g.b_ar = 1.0;
        g
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let params0 = xavier_init(3, 5);
        let mut params = params0.clone();
        let mut state = AdamState::new(3, AdamConfig::default());
        adam_step(&mut params, &ParameterGradients::zeros(3), &mut state).unwrap();
        assert_eq!(params, params0);
        assert_eq!(state.step_count, 1);
        assert_eq!(state.first_moment, ParameterGradients::zeros(3));
        assert_eq!(state.second_moment, ParameterGradients::zeros(3));
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let (mut params, mut state) = scalar_setup();
        adam_step(&mut params, &unit_grads(), &mut state).unwrap();
        // m̂ = v̂ = 1 after bias correction, so θ ≈ −lr.
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!(approx(params.b_ar, expected, 1e-15));
        assert!(approx(params.b_ar, -9.99999995e-5, 1e-9));
        assert!(approx(params.b_ar, scalar_adam(&[1.0], &state.config), 1e-15));
        // untouched arrays stay put
        assert_eq!(params.w_fc[[0, 0]], 0.0);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let (mut params, mut state) = scalar_setup();
        adam_step(&mut params, &unit_grads(), &mut state).unwrap();
        adam_step(&mut params, &unit_grads(), &mut state).unwrap();
        assert!(approx(params.b_ar, -2e-4, 1e-6));
        assert!(approx(
            params.b_ar,
            scalar_adam(&[1.0, 1.0], &state.config),
            1e-15
        ));
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn zero_betas_reduce_to_sign_gradient() {
        let cfg = AdamConfig {
            beta1: 0.0,
            beta2: 0.0,
            ..AdamConfig::default()
        };
        for g in [3.0, -0.2, 0.7] {
            let (mut params, _) = scalar_setup();
            let mut state = AdamState::new(1, cfg);
            let mut grads = ParameterGradients::zeros(1);
            grads.b_ar = g;
            adam_step(&mut params, &grads, &mut state).unwrap();
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!(approx(params.b_ar, expected, 1e-18));
        }
    }

    #[test]
    fn update_opposes_first_moment() {
        let mut params = xavier_init(4, 9);
        let before = params.clone();
        let mut state = AdamState::new(4, AdamConfig::default());
        let mut grads = ParameterGradients::zeros(4);
        for (i, v) in grads.w_ar.iter_mut().enumerate() {
            *v = (i as f64 - 1.5) * 0.3;
        }
        adam_step(&mut params, &grads, &mut state).unwrap();
        for i in 0..4 {
            let delta = params.w_ar[i] - before.w_ar[i];
            let m_hat = state.first_moment.w_ar[i];
            if m_hat != 0.0 {
                assert!(delta * m_hat < 0.0, "update must oppose m̂");
            } else {
                assert_eq!(delta, 0.0);
            }
        }
        assert!(state.second_moment.w_ar.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_finite_gradients_are_rejected_without_touching_state() {
        let params0 = xavier_init(2, 1);
        let mut params = params0.clone();
        let mut state = AdamState::new(2, AdamConfig::default());
        let mut grads = ParameterGradients::zeros(2);
        grads.w_fc[[0, 1]] = f64::NAN;
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
        assert_eq!(params, params0);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut params = xavier_init(3, 4);
            let mut state = AdamState::new(3, AdamConfig::default());
            for step in 0..5 {
                let mut grads = ParameterGradients::zeros(3);
                grads.w_fc.fill(0.01 * (step + 1) as f64);
                grads.b_fc.fill(-0.02);
                adam_step(&mut params, &grads, &mut state).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }
}

//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{PrepoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: default_eps(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PrepoError::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// One minimizing update: `θ ← θ(1 - lr·wd) - lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(
    params: &mut [f64],
    gradient: &[f64],
    state: &mut AdamWState,
    config: &AdamWConfig,
) -> Result<()> {
    let n = params.len();
    if gradient.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(PrepoError::SizeMismatch(format!(
            "params {n}, gradient {}, moments {}/{}",
            gradient.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let decay = 1.0 - config.learning_rate * config.weight_decay;
    for i in 0..n {
        let g = gradient[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        params[i] = params[i] * decay - config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![0.3, -1.2];
        let mut s = AdamWState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn decay_only_scales_parameters() {
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.01, ..Default::default() };
        let mut p = vec![2.0, -4.0];
        let mut s = AdamWState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - 0.001), -4.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn first_step_hand_trace() {
        // m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g², step = lr g / (|g| + ε)
        let cfg = AdamWConfig { learning_rate: 1e-3, weight_decay: 0.0, ..Default::default() };
        let g = 0.5;
        let mut p = vec![1.0];
        let mut s = AdamWState::new(1);
        adamw_step(&mut p, &[g], &mut s, &cfg).unwrap();
        let want = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
        assert!((s.first_moment[0] - 0.05).abs() < 1e-15);
        assert!((s.second_moment[0] - 0.00025).abs() < 1e-15);

        let mut q = vec![1.0];
        let mut s = AdamWState::new(1);
        adamw_step(&mut q, &[-3.0], &mut s, &cfg).unwrap();
        assert!((q[0] - (1.0 + 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn second_step_hand_trace() {
        let cfg = AdamWConfig { learning_rate: 1e-2, weight_decay: 0.1, ..Default::default() };
        let mut p = vec![1.0];
        let mut s = AdamWState::new(1);
        adamw_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        let p1 = 1.0 * (1.0 - 1e-3) - 1e-2 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - p1).abs() < 1e-15);
        adamw_step(&mut p, &[2.0], &mut s, &cfg).unwrap();
        let m = 0.9 * 0.1 + 0.1 * 2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64 * 0.999);
        let p2 = p1 * (1.0 - 1e-3) - 1e-2 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - p2).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut s = AdamWState::new(3);
        assert!(adamw_step(&mut p, &[0.0; 2], &mut s, &AdamWConfig::default()).is_err());
    }
}

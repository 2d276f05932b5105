use crate::error::{NumError, Result};
use crate::params::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators aligned with a [`ParamStore`]. Buffers get empty
/// accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |e: &crate::params::ParamEntry| {
            if e.trainable {
                vec![0.0; e.value.len()]
            } else {
                Vec::new()
            }
        };
        Self {
            config,
            step: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    /// Bias-corrected Adam update of every trainable entry.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(NumError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![store.len()],
            });
        }
        let ids: Vec<_> = store.trainable_ids().collect();
        for &id in &ids {
            let g = grads
                .get(id)
                .ok_or_else(|| NumError::MissingGradient(store.name(id).to_string()))?;
            if g.len() != store.get(id).len() || self.m[id.index()].len() != g.len() {
                return Err(NumError::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(value), true).unwrap();
        store
    }

    fn grads_of(g: f64) -> ParamGrads {
        ParamGrads::from_raw(vec![Some(vec![g])])
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [3.0, -0.02] {
            let mut store = single(1.0);
            let mut state = AdamState::new(&store, AdamConfig { lr: 0.1, ..AdamConfig::default() });
            state.step(&mut store, &grads_of(g)).unwrap();
            let moved = store.get(store.id("w").unwrap()).data()[0] - 1.0;
            // m_hat / sqrt(v_hat) = g / |g| on the first step (eps aside)
            assert!((moved + 0.1 * g.signum()).abs() < 1e-6, "moved {moved}");
            assert_eq!(state.step, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_moments() {
        let mut store = single(0.5);
        let mut state = AdamState::new(&store, AdamConfig::default());
        state.step(&mut store, &grads_of(2.0)).unwrap();
        let after_first = store.get(store.id("w").unwrap()).data()[0];
        let (m1, v1) = (state.m[0][0], state.v[0][0]);
        let mut frozen = store.clone();
        let mut zero_state = AdamState::new(&frozen, AdamConfig::default());
        zero_state.step(&mut frozen, &grads_of(0.0)).unwrap();
        assert_eq!(frozen.get(frozen.id("w").unwrap()).data()[0], after_first);

        state.step(&mut store, &grads_of(0.0)).unwrap();
        assert!(state.m[0][0].abs() < m1.abs());
        assert!(state.v[0][0] < v1);
    }

    #[test]
    fn two_steps_with_constant_gradient_match_hand_recurrence() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let g = 0.5;
        let mut store = single(0.0);
        let mut state = AdamState::new(&store, AdamConfig { lr, beta1: b1, beta2: b2, eps });
        let mut trace = Vec::new();
        for _ in 0..2 {
            state.step(&mut store, &grads_of(g)).unwrap();
            trace.push(store.get(store.id("w").unwrap()).data()[0]);
        }
        // Hand recurrence: m1 = 0.1 g, v1 = 0.001 g^2; m2 = 0.19 g, v2 = 0.001999 g^2.
        let step1 = lr * (0.1 * g / 0.1) / ((0.001 * g * g / 0.001).sqrt() + eps);
        let step2 = lr * (0.19 * g / 0.19) / ((0.001999 * g * g / 0.001999).sqrt() + eps);
        assert!((trace[0] + step1).abs() < 1e-12);
        assert!((trace[1] + step1 + step2).abs() < 1e-12);
        assert!(trace[1] < trace[0] && trace[0] < 0.0);
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut store = single(0.0);
        let mut state = AdamState::new(&store, AdamConfig::default());
        let empty = ParamGrads::from_raw(vec![None]);
        let err = state.step(&mut store, &empty).unwrap_err();
        assert_eq!(err, NumError::MissingGradient("w".into()));
        assert_eq!(state.step, 0);
    }
}

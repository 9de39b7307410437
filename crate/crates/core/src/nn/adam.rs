//! Adam with bias correction over a flat parameter vector.

use super::tensor::Real;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::BadHyper(format!("{self:?}")))
        }
    }
}

/// First/second moment estimates, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(param_count: usize, cfg: AdamConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update: `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
    /// bias-corrected, then `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "adam over {} parameters got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        // lr premultiplied by the bias corrections so the inner loop is short
        let corr1 = 1.0 - self.cfg.beta1.powi(t);
        let corr2 = 1.0 - self.cfg.beta2.powi(t);
        let alpha = T::from_f64(self.cfg.lr / corr1);
        let vscale = T::from_f64(1.0 / corr2);
        let eps = T::from_f64(self.cfg.epsilon);

        for ((p, &g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - alpha * *m / ((*v * vscale).sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new(3, AdamConfig::default()).unwrap();
        let mut p = vec![1.0f64, -2.0, 0.5];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_in_grad_direction() {
        // m_hat = g, v_hat = g^2, so the first update is lr * sign(g).
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(2, cfg).unwrap();
        let mut p = vec![0.0f64, 0.0];
        st.step(&mut p, &[3.7, -0.004]).unwrap();
        assert!((p[0] + cfg.lr).abs() < 1e-6 * cfg.lr);
        assert!((p[1] - cfg.lr).abs() < 1e-5 * cfg.lr);
    }

    #[test]
    fn identical_runs_are_identical() {
        let grads = [[0.4f64, -1.0], [0.1, 0.2], [-0.3, 0.9]];
        let run = || {
            let mut st = AdamState::new(2, AdamConfig::default()).unwrap();
            let mut p = vec![0.25f64, -0.75];
            for g in &grads {
                st.step(&mut p, g).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_and_hyper_validation() {
        let mut st = AdamState::new(2, AdamConfig::default()).unwrap();
        let mut p = vec![0.0f64; 3];
        assert!(matches!(st.step(&mut p, &[0.0; 3]), Err(NnError::ShapeMismatch(_))));
        assert!(AdamState::<f64>::new(1, AdamConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(AdamState::<f64>::new(1, AdamConfig { beta1: 1.0, ..Default::default() }).is_err());
    }
}

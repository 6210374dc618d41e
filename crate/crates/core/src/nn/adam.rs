//! Adam optimizer with bias-corrected moment estimates.

/// Hyperparameters; `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8` unless
/// overridden.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over aligned parameter and gradient tensors.
///
/// # Panics
/// Panics if the tensor lists are not aligned with the state.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.len(), g.len());
        assert_eq!(p.len(), m.len());
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut state = AdamState::new(&[3]);
        adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::with_lr(0.1));
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, the first update is -lr * g/(|g| + eps') which
        // is lr * sign(g) up to the epsilon term.
        let mut p = vec![0.0, 0.0];
        let g = vec![3.7, -0.004];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::with_lr(0.01));
        assert_abs_diff_eq!(p[0], -0.01, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 0.01, epsilon = 1e-6);
    }

    #[test]
    fn identical_sequences_are_bit_identical() {
        let run = || {
            let mut p = vec![0.5, -0.5, 0.25];
            let mut state = AdamState::new(&[3]);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::with_lr(0.02));
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut p = vec![4.0, -3.0];
        let mut state = AdamState::new(&[2]);
        for _ in 0..3000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::with_lr(0.05));
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
    }
}

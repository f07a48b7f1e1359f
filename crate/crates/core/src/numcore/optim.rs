use crate::error::{Error, Result};

use super::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad Adam hyper-parameters: {self:?}")))
        }
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.numel()).collect();
        Self {
            config,
            step_count: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, param: usize) -> &[T] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[T] {
        &self.v[param]
    }

    /// Clears the moments of selected coordinates of one parameter.
    pub fn reset_moments(&mut self, param: usize, indices: &[usize]) {
        for &i in indices {
            self.m[param][i] = T::zero();
            self.v[param][i] = T::zero();
        }
    }

    /// One bias-corrected update of every tensor in `params` using its
    /// accumulated gradient. Tensors without a gradient are left untouched
    /// but still share the step counter.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (pi, p) in params.iter().enumerate() {
            if p.numel() != self.m[pi].len() {
                return Err(Error::invalid(format!("parameter {pi} changed size")));
            }
            if let Some(g) = p.grad() {
                if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { param: pi, index: i, value: v.as_f64() });
                }
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bias1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (lr, eps, wd) = (T::from_f64(c.lr), T::from_f64(c.eps), T::from_f64(c.weight_decay));
        for (pi, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] + wd * *w;
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Single-vector convenience form of [`AdamState::step`].
pub fn adam_step<T: Element>(state: &mut AdamState<T>, params: &mut [T], grads: &[T]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid("params and grads differ in length"));
    }
    let mut t = Tensor::new([params.len()], params.to_vec())?;
    t.accumulate_grad(grads);
    let mut one = [t];
    state.step(&mut one)?;
    params.copy_from_slice(one[0].data());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize, cfg: AdamConfig) -> AdamState<f64> {
        AdamState::new(cfg, [&Tensor::<f64>::zeros([n])])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = state(3, AdamConfig { lr: 0.1, ..Default::default() });
        let mut p = [1.0, -2.0, 3.0];
        adam_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut s = state(1, cfg);
        let mut p = [1.0];
        adam_step(&mut s, &mut p, &[1.0]).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0f64.sqrt() + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_is_coupled_into_the_gradient() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut s = state(1, cfg);
        let mut p = [2.0];
        adam_step(&mut s, &mut p, &[0.0]).unwrap();
        // g' = 0 + 0.5 * 2 = 1 -> same step as a unit gradient
        assert!((p[0] - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert!((s.first_moment(0)[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut s = state(2, AdamConfig::default());
        let mut p = [0.0, 0.0];
        let err = adam_step(&mut s, &mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn identical_inputs_give_identical_bits() {
        let cfg = AdamConfig { lr: 0.01, weight_decay: 1e-4, ..Default::default() };
        let run = || {
            let mut s = AdamState::<f32>::new(cfg, [&Tensor::zeros([5])]);
            let mut p = [0.3f32, -0.1, 0.7, 1.1, -2.0];
            for k in 0..20 {
                let g: Vec<f32> = p.iter().map(|w| w * 0.5 + k as f32 * 0.01).collect();
                adam_step(&mut s, &mut p, &g).unwrap();
            }
            p.map(f32::to_bits)
        };
        assert_eq!(run(), run());
    }
}

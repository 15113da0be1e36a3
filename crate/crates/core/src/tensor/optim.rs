use super::{Array, Real};
use crate::error::{Error, Result};

/// Adam hyperparameters. L2 regularisation is classic (added to the gradient
/// before the moment updates), not decoupled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 5e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every array in `params` using its `grad`.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Array<T>>,
    {
        let params: Vec<&mut Array<T>> = params.into_iter().collect();
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::contract(format!("adam_step: parameter {i} has no gradient")));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::ZERO; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::contract("adam_step: parameter list changed between steps"));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let (wd, lr_t, eps_t) = (T::from_f64(weight_decay), T::from_f64(lr), T::from_f64(eps));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        for (k, p) in params.into_iter().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j] + wd * *theta;
                m[j] = b1t * m[j] + ob1 * g;
                v[j] = b2t * v[j] + ob2 * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *theta -= lr_t * mhat / (vhat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Array<f64> {
        let mut a = Array::scalar(v).with_grad();
        a.grad_mut().unwrap()[0] = g;
        a
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = param(0.5, 1.0);
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.step([&mut p]).unwrap();
        let want = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - 0.5 - want).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn l2_term_enters_gradient() {
        // wd·θ = 5e-3 acts as the gradient: first step is -lr·sign.
        let mut p = param(1000.0, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step([&mut p]).unwrap();
        let g = 5e-6 * 1000.0;
        let want = 1000.0 - 1e-4 * g / (g + 1e-8);
        assert!((p.item() - want).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Array::scalar(1.0f64);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step([&mut p]), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_descends_monotonically_after_warmup() {
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut p = param(1.0, 0.0);
        let mut trace = Vec::new();
        for _ in 0..100 {
            let th = p.item();
            p.grad_mut().unwrap()[0] = 2.0 * th;
            opt.step([&mut p]).unwrap();
            trace.push(p.item().abs());
        }
        for w in trace[5..].windows(2) {
            assert!(w[1] < w[0], "{:?}", w);
        }
    }
}

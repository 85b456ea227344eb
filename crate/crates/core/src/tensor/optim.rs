use super::{Element, Tensor};
use crate::error::{Error, Result};

/// lr0 · ½(1 + cos(π·t/T)) — anneals to exactly 0 at t = T, no restarts.
pub fn cosine_lr(t: u64, total: u64, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine_lr: total steps must be > 0".into()));
    }
    if t > total {
        return Err(Error::Config(format!("cosine_lr: step {} beyond total {}", t, total)));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

fn require_grad<E: Element>(name: &str, p: &Tensor<E>) -> Result<Vec<E>> {
    p.grad().ok_or_else(|| Error::MissingGrad { name: name.to_string() })
}

/// Momentum SGD with decoupled-from-nothing (classic) L2 weight decay:
/// buf ← μ·buf + (g + λ·p); p ← p − lr·buf.
pub struct Sgd<E: Element> {
    params: Vec<(String, Tensor<E>)>,
    momentum: E,
    weight_decay: E,
    bufs: Vec<Vec<E>>,
    steps: u64,
}

impl<E: Element> Sgd<E> {
    pub fn new(params: Vec<(String, Tensor<E>)>, momentum: E, weight_decay: E) -> Self {
        let bufs = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
        Sgd { params, momentum, weight_decay, bufs, steps: 0 }
    }

    pub fn step(&mut self, lr: E) -> Result<()> {
        for ((name, p), buf) in self.params.iter().zip(self.bufs.iter_mut()) {
            let g = require_grad(name, p)?;
            let mut pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g[i] + self.weight_decay * pd[i];
                buf[i] = self.momentum * buf[i] + gi;
                pd[i] = pd[i] - lr * buf[i];
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &[(String, Tensor<E>)] {
        &self.params
    }
}

/// Adam with bias correction; weight decay added to the gradient (L2 style,
/// not decoupled).
pub struct Adam<E: Element> {
    params: Vec<(String, Tensor<E>)>,
    beta1: E,
    beta2: E,
    weight_decay: E,
    eps: E,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    steps: u64,
}

impl<E: Element> Adam<E> {
    pub fn new(params: Vec<(String, Tensor<E>)>, betas: (E, E), weight_decay: E) -> Self {
        let m = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
        Adam {
            params,
            beta1: betas.0,
            beta2: betas.1,
            weight_decay,
            eps: E::from_f64(1e-8),
            m,
            v,
            steps: 0,
        }
    }

    pub fn step(&mut self, lr: E) -> Result<()> {
        self.steps += 1;
        let t = E::from_f64(self.steps as f64);
        let bc1 = E::one() - self.beta1.powf(t);
        let bc2 = E::one() - self.beta2.powf(t);
        for ((name, p), (m, v)) in self.params.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = require_grad(name, p)?;
            let mut pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g[i] + self.weight_decay * pd[i];
                m[i] = self.beta1 * m[i] + (E::one() - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (E::one() - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &[(String, Tensor<E>)] {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, value: f64) -> (Vec<(String, Tensor<f64>)>, Tensor<f64>) {
        let p = Tensor::scalar(value).requires_grad();
        (vec![(name.to_string(), p.clone())], p)
    }

    #[test]
    fn sgd_plain_step() {
        let (params, p) = single("w", 0.0);
        let mut opt = Sgd::new(params, 0.0, 0.0);
        p.accumulate_grad(&[1.0]);
        opt.step(0.1).unwrap();
        assert!((p.to_vec()[0] + 0.1).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero() {
        let (params, p) = single("w", 1.0);
        let mut opt = Sgd::new(params, 0.0, 0.1);
        p.accumulate_grad(&[0.0]);
        opt.step(1.0).unwrap();
        assert!((p.to_vec()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let (params, p) = single("w", 0.0);
        let mut opt = Sgd::new(params, 0.9, 0.0);
        p.accumulate_grad(&[1.0]);
        opt.step(0.1).unwrap();
        opt.zero_grads();
        p.accumulate_grad(&[1.0]);
        opt.step(0.1).unwrap();
        // buf1 = 1, buf2 = 1.9 → p = -(0.1 + 0.19)
        assert!((p.to_vec()[0] + 0.29).abs() < 1e-12);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let (params, p) = single("alpha", 0.0);
        let mut opt = Adam::new(params, (0.5, 0.999), 0.0);
        p.accumulate_grad(&[2.0]);
        opt.step(0.1).unwrap();
        // m=1.0, v=0.004, mhat=2.0, vhat=4.0 → Δ = -0.1·2/(2+1e-8)
        let want = -0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.to_vec()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let (params, _p) = single("cell.alpha", 0.0);
        let mut opt = Sgd::new(params, 0.0, 0.0);
        let err = opt.step(0.1).unwrap_err();
        assert_eq!(err.to_string(), "gradient missing for parameter 'cell.alpha'");
    }

    #[test]
    fn zero_grads_is_explicit() {
        let (params, p) = single("w", 0.0);
        let opt = Sgd::new(params, 0.0, 0.0);
        p.accumulate_grad(&[1.0]);
        assert!(p.grad().is_some());
        opt.zero_grads();
        assert!(p.grad().is_none());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0, 100, 0.1).unwrap() - 0.1).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-12);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-12);
        assert!(cosine_lr(101, 100, 0.1).is_err());
        assert!(cosine_lr(0, 0, 0.1).is_err());
    }
}

//! Parameter storage, AdamW and the learning-rate schedule.

use crate::autodiff::{Gradients, Mat};
use crate::error::{Error, Result};

/// Named trainable matrices. Biases and layer-norm parameters are
/// registered with `decay = false`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.decay.push(decay);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn decays(&self, id: usize) -> bool {
        self.decay[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Zero gradient buffers shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values
            .iter()
            .map(|v| Mat::zeros(v.raw_dim()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Adds the parameter gradients of one backward pass into `acc`.
pub fn accumulate_grads(acc: &mut [Mat], grads: &Gradients) {
    for (pid, g) in grads.params() {
        acc[pid] += g;
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Linear warmup to `peak` followed by linear decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    /// Learning rate for the 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step as f64 + 1.0;
        if step < self.warmup {
            self.peak * s / self.warmup as f64
        } else if self.total <= self.warmup {
            self.peak
        } else {
            let rest = (self.total - self.warmup) as f64;
            self.peak * ((self.total as f64 - step as f64) / rest).max(0.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One decoupled-weight-decay Adam update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter().enumerate() {
            let decay = if params.decays(id) {
                self.weight_decay
            } else {
                0.0
            };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * (mh / (vh.sqrt() + eps) + decay * *p);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LinearSchedule {
            peak: 1.0,
            warmup: 4,
            total: 12,
        };
        assert!((s.lr_at(0) - 0.25).abs() < 1e-12);
        assert!((s.lr_at(3) - 1.0).abs() < 1e-12);
        assert!(s.lr_at(8) < s.lr_at(5));
        assert_eq!(s.lr_at(12), 0.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![array![[3.0, 0.0]], array![[0.0, 4.0]]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().map(|m| m.iter().map(|x| x * x).sum::<f64>()).sum();
        assert!((after.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", array![[3.0, -2.0]], false);
        let mut opt = AdamW::new(&ps, 0.0);
        for _ in 0..2000 {
            let g = vec![ps.get(id) * 2.0];
            opt.step(&mut ps, &g, 0.01).unwrap();
        }
        assert!(ps.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut ps = ParamStore::new();
        ps.add("w", array![[1.0]], true);
        let mut opt = AdamW::new(&ps, 0.01);
        assert!(matches!(
            opt.step(&mut ps, &[array![[f64::NAN]]], 0.1),
            Err(Error::Numerical(_))
        ));
    }
}

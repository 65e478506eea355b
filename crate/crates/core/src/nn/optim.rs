//! AdamW with decoupled weight decay and a warmup-then-linear-decay schedule.

use ndarray::{Array2, Zip};

use super::tape::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_fraction).round() as usize).min(total_steps);
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    /// Rate for zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak * (step + 1) as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            self.peak * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Advances the bias-correction clock; call once per optimizer step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates tensor `slot` in place.
    pub fn update(&mut self, slot: usize, value: &mut Array2<f64>, grad: &Array2<f64>, lr: f64, decay: bool) {
        while self.m.len() <= slot {
            self.m.push(Array2::zeros((0, 0)));
            self.v.push(Array2::zeros((0, 0)));
        }
        if self.m[slot].dim() != value.dim() {
            self.m[slot] = Array2::zeros(value.raw_dim());
            self.v[slot] = Array2::zeros(value.raw_dim());
        }
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let wd = if decay { lr * self.weight_decay } else { 0.0 };
        Zip::from(value)
            .and(grad)
            .and(&mut self.m[slot])
            .and(&mut self.v[slot])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= wd * *p + lr * update;
            });
    }

    /// One step over every tensor of a parameter set (slots `offset..`).
    pub fn step_params(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64, offset: usize) {
        for (i, (p, g)) in params.iter_mut().zip(&grads.0).enumerate() {
            self.update(offset + i, &mut p.value, g, lr, p.decay);
        }
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [&mut Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            **g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::new(1.0, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(100), 0.0);
        let flat = LinearSchedule::new(2.0, 0.0, 4);
        assert_eq!(flat.lr(0), 2.0);
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let mut ps = ParamSet::new();
        ps.add("w", array![[1.0, -2.0]], true);
        let before = ps.clone();
        let mut grads = ps.zero_grads();
        grads.0[0] = array![[0.5, 0.5]];
        let mut opt = AdamW::new(0.05);
        opt.tick();
        opt.step_params(&mut ps, &grads, 0.0, 0);
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_moves_by_rate() {
        let mut w = array![[1.0, 1.0]];
        let mut opt = AdamW::new(0.0);
        opt.tick();
        opt.update(0, &mut w, &array![[3.0, -0.2]], 0.01, false);
        assert!((w[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut w = array![[2.0]];
        let mut opt = AdamW::new(0.5);
        opt.tick();
        opt.update(0, &mut w, &array![[0.0]], 0.1, true);
        assert!((w[[0, 0]] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut a = array![[3.0]];
        let mut b = array![[4.0]];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[[0, 0]] - 0.6).abs() < 1e-12 && (b[[0, 0]] - 0.8).abs() < 1e-12);
    }
}

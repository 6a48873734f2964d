use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Decoupled-weight-decay Adam with per-slot moment buffers.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            betas: (0.9, 0.98),
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Starts a new optimizer step; call before the [`update`](Self::update)s of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates parameter slot `slot` in place.
    pub fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if self.t == 0 {
            return Err(Error::contract("AdamW::update before begin_step"));
        }
        param.expect_same_shape(grad)?;
        if self.m.len() <= slot {
            self.m.resize(slot + 1, None);
            self.v.resize(slot + 1, None);
        }
        let m = self.m[slot].get_or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = self.v[slot].get_or_insert_with(|| Tensor::zeros(grad.shape()));
        m.expect_same_shape(grad)?;
        let (b1, b2) = (T::lit(self.betas.0), T::lit(self.betas.1));
        let c1 = T::one() - b1.powi(self.t as i32);
        let c2 = T::one() - b2.powi(self.t as i32);
        let (lr, eps, wd) = (T::lit(lr), T::lit(self.eps), T::lit(self.weight_decay));
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
        }
        Ok(())
    }
}

/// Single-tensor AdamW step on fresh moment state, for scripted traces.
pub fn adam_step<T: Scalar>(opt: &mut AdamW<T>, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("one gradient per parameter required"));
    }
    opt.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        opt.update(i, p, g, lr)?;
    }
    Ok(())
}

/// Linear warm-up over the first 1% of `total` steps, then cosine decay to
/// 10% of `peak` at the final step.
pub fn lr_at(step: usize, total: usize, peak: f64) -> f64 {
    let total = total.max(1);
    let warm = total.div_ceil(100).max(1);
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    let floor = 0.1 * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut opt = AdamW::<f64>::new(0.0);
        let mut p = vec![Tensor::from_slice(&[1.0, -2.0])];
        adam_step(&mut opt, &mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut opt = AdamW::<f64>::new(0.0);
        let mut p = vec![Tensor::from_slice(&[0.0, 0.0, 0.0])];
        adam_step(&mut opt, &mut p, &[Tensor::from_slice(&[3.0, -0.01, 1e3])], 0.01).unwrap();
        for (&v, want) in p[0].data().iter().zip([-0.01, 0.01, -0.01]) {
            assert!((v - want).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut opt = AdamW::<f64>::new(0.0);
        let mut p = vec![Tensor::from_slice(&[1.0])];
        let g = [Tensor::from_slice(&[0.5])];
        adam_step(&mut opt, &mut p, &g, 0.1).unwrap();
        let after_one = p[0].item();
        adam_step(&mut opt, &mut p, &g, 0.1).unwrap();
        assert!(after_one < 1.0 && p[0].item() < after_one);
    }

    #[test]
    fn schedule_shape() {
        let total = 1000;
        assert!((lr_at(0, total, 1.0) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, total, 1.0) - 1.0).abs() < 1e-12);
        assert!((lr_at(999, total, 1.0) - 0.1).abs() < 1e-3);
        let mid = lr_at(505, total, 1.0);
        assert!((mid - 0.55).abs() < 1e-2);
        for s in 10..999 {
            assert!(lr_at(s + 1, total, 1.0) <= lr_at(s, total, 1.0));
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::from_slice(&[3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].l2_norm() - 1.0).abs() < 1e-12);
    }
}

//! AdamW with decoupled weight decay and global gradient-norm clipping.

use super::schedule::ParamGroup;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moment buffers for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One tensor's update inputs.
pub struct Slot<'a> {
    pub param: &'a mut [f64],
    pub grad: &'a [f64],
    pub group: ParamGroup,
    pub decay: bool,
}

impl AdamW {
    /// Applies one step. `t` is the 1-based step count for bias correction;
    /// `lr_for` maps a group to its learning rate; `scale` multiplies every
    /// gradient (clipping).
    pub fn step(&self, t: usize, slots: Vec<Slot<'_>>, moments: &mut [Moments], lr_for: impl Fn(ParamGroup) -> f64, scale: f64) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (slot, mo) in slots.into_iter().zip(moments.iter_mut()) {
            let lr = lr_for(slot.group);
            let wd = if slot.decay { self.weight_decay } else { 0.0 };
            for k in 0..slot.param.len() {
                let g = slot.grad[k] * scale;
                mo.m[k] = self.beta1 * mo.m[k] + (1.0 - self.beta1) * g;
                mo.v[k] = self.beta2 * mo.v[k] + (1.0 - self.beta2) * g * g;
                let mhat = mo.m[k] / bc1;
                let vhat = mo.v[k] / bc2;
                let p = &mut slot.param[k];
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *p);
            }
        }
    }
}

/// Factor that rescales gradients to a global norm of at most `max_norm`.
pub fn clip_scale(grads: &[&[f64]], max_norm: f64) -> (f64, f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    (norm, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![1.0, -1.0];
        let g = vec![0.5, -2.0];
        let mut mo = vec![Moments::new(2)];
        opt.step(
            1,
            vec![Slot {
                param: &mut p,
                grad: &g,
                group: ParamGroup::Base,
                decay: false,
            }],
            &mut mo,
            |_| 0.1,
            1.0,
        );
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let (n, s) = clip_scale(&[&[3.0], &[4.0]], 1.0);
        assert_eq!(n, 5.0);
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(clip_scale(&[&[0.1]], 1.0).1, 1.0);
    }
}

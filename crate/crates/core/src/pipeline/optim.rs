use crate::nn::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Adam. Weight decay is either decoupled from the adaptive step
/// (`p -= lr * wd * p`) or folded into the gradient as an L2 term.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = params
            .iter()
            .map(|(_, _, p)| Mat::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled: true,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` means no
    /// gradient reached it (only weight decay applies).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref();
            for j in 0..p.len() {
                let w = p.data()[j];
                let mut grad = g.map_or(0.0, |g| g.data()[j]);
                if !self.decoupled {
                    grad += self.weight_decay * w;
                }
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * grad;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * grad * grad;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mut step = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                if self.decoupled {
                    step += self.weight_decay * w;
                }
                p.data_mut()[j] -= lr * step;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Mat::sum_sq)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Linear warmup to `base` over `warmup` steps, then constant.
pub fn learning_rate(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(&store, 0.0);
        let g = Mat::from_vec(1, 3, vec![0.3, -4.0, 0.0]);
        adam.step(&mut store, &[Some(g)], 0.1);
        let w = store.get(store.find("w").unwrap());
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(w.data()[2], 0.5);
    }

    #[test]
    fn decoupled_decay_does_not_scale_with_the_gradient() {
        // A parameter with no gradient: folded L2 decay takes a full
        // normalized step, decoupled decay only shrinks by lr * wd.
        for (decoupled, expected) in [(true, 1.0 - 0.1 * 0.01), (false, 1.0 - 0.1)] {
            let mut store = ParamStore::new();
            let id = store.add("w", Mat::from_vec(1, 1, vec![1.0]));
            let mut adam = Adam::new(&store, 0.01);
            adam.decoupled = decoupled;
            adam.step(&mut store, &[None], 0.1);
            assert!((store.get(id).item() - expected).abs() < 1e-6, "decoupled={decoupled}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::from_vec(1, 2, vec![3.0, -5.0]));
        let mut adam = Adam::new(&store, 0.0);
        for _ in 0..2000 {
            let g = store.get(id).map(|v| 2.0 * (v - 1.0));
            adam.step(&mut store, &[Some(g)], 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Some(Mat::from_vec(1, 2, vec![3.0, 0.0])), None, Some(Mat::from_vec(1, 1, vec![4.0]))];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().map(Mat::sum_sq).sum();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(learning_rate(1.0, 0, 4), 0.25);
        assert_eq!(learning_rate(1.0, 3, 4), 1.0);
        assert_eq!(learning_rate(1.0, 10, 4), 1.0);
        assert_eq!(learning_rate(0.5, 0, 0), 0.5);
    }
}

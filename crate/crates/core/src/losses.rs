//! Reconstruction and slot contrastive losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::slot_attention::SlotSequence;
use crate::tensor::Mat;

/// Slot norms below this are treated as degenerate.
pub const MIN_SLOT_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastTarget {
    #[default]
    Fused,
    Initial,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau: f64,
    pub contrast_on: ContrastTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            tau: 0.5,
            contrast_on: ContrastTarget::Fused,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("loss.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_norms(s: &Mat, frame: usize) -> Result<()> {
    for k in 0..s.rows() {
        let norm = s.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_SLOT_NORM) {
            return Err(Error::DegenerateSlot { frame, slot: k, norm });
        }
    }
    Ok(())
}

/// Cosine similarity minus identity for one frame's slots (`K x K`).
pub fn cosine_similarity_var<'g>(s: Var<'g>, frame: usize) -> Result<Var<'g>> {
    check_norms(&s.value(), frame)?;
    let inv_norm = s.square().sum_cols().sqrt().recip();
    let u = s.mul_col(inv_norm);
    let k = s.rows();
    Ok(u.matmul_nt(u).sub(s.graph().constant(Mat::identity(k))))
}

pub fn cosine_similarity_matrix(s: &Mat) -> Result<Mat> {
    let g = Graph::new();
    let c = cosine_similarity_var(g.constant(s.clone()), 0)?;
    let mut out = (*c.value()).clone();
    // The diagonal is zero by definition; remove rounding residue.
    for i in 0..out.rows() {
        out.set(i, i, 0.0);
    }
    Ok(out)
}

/// `(1/(T K^2)) sum_t sum_ij -log softmax_j(-C_t/tau)_ij`.
pub fn slot_contrastive_loss_var<'g>(frames: &[Var<'g>], tau: f64) -> Result<Var<'g>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty slot sequence".into()))?;
    let k = first.rows();
    let mut total: Option<Var<'g>> = None;
    for (t, s) in frames.iter().enumerate() {
        let c = cosine_similarity_var(*s, t)?;
        let term = c.scale(-1.0 / tau).log_softmax_rows().sum();
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    let norm = (frames.len() * k * k) as f64;
    Ok(total.expect("non-empty").scale(-1.0 / norm))
}

pub fn slot_contrastive_loss(s: &SlotSequence, tau: f64) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = s.frames.iter().map(|f| g.constant(f.clone())).collect();
    Ok(slot_contrastive_loss_var(&vars, tau)?.value().item())
}

/// Mean squared error over every element of every frame.
pub fn reconstruction_loss_var<'g>(recon: &[Var<'g>], target: &[Var<'g>]) -> Result<Var<'g>> {
    if recon.len() != target.len() || recon.is_empty() {
        return Err(Error::shape("reconstruction frames", target.len(), recon.len()));
    }
    let mut total: Option<Var<'g>> = None;
    let mut count = 0usize;
    for (r, x) in recon.iter().zip(target) {
        if r.shape() != x.shape() {
            return Err(Error::shape(
                "reconstruction frame",
                format!("{:?}", x.shape()),
                format!("{:?}", r.shape()),
            ));
        }
        count += r.rows() * r.cols();
        let term = r.sub(*x).square().sum();
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / count as f64))
}

pub fn reconstruction_loss(recon: &[Mat], target: &[Mat]) -> Result<f64> {
    let g = Graph::new();
    let r: Vec<_> = recon.iter().map(|m| g.constant(m.clone())).collect();
    let x: Vec<_> = target.iter().map(|m| g.constant(m.clone())).collect();
    Ok(reconstruction_loss_var(&r, &x)?.value().item())
}

pub fn total_loss(recon: f64, contrast: f64, cfg: &LossConfig) -> Result<f64> {
    if !recon.is_finite() || !contrast.is_finite() {
        return Err(Error::NonFinite {
            context: "loss terms".into(),
        });
    }
    Ok(recon + cfg.alpha * contrast)
}

pub fn total_loss_var<'g>(recon: Var<'g>, contrast: Option<Var<'g>>, alpha: f64) -> Var<'g> {
    match contrast {
        Some(c) if alpha != 0.0 => recon.add(c.scale(alpha)),
        _ => recon,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_normal_mat;
    use crate::slot_attention::Stage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cos_oracle(s: &Mat) -> Mat {
        let k = s.rows();
        Mat::from_fn(k, k, |i, j| {
            let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for c in 0..s.cols() {
                dot += s.get(i, c) * s.get(j, c);
                ni += s.get(i, c) * s.get(i, c);
                nj += s.get(j, c) * s.get(j, c);
            }
            dot / (ni.sqrt() * nj.sqrt()) - if i == j { 1.0 } else { 0.0 }
        })
    }

    fn loss_oracle(frames: &[Mat], tau: f64) -> f64 {
        let k = frames[0].rows();
        let mut total = 0.0;
        for s in frames {
            let c = cos_oracle(s);
            for i in 0..k {
                let denom: f64 = (0..k).map(|m| (-c.get(i, m) / tau).exp()).sum();
                for j in 0..k {
                    total -= ((-c.get(i, j) / tau).exp() / denom).ln();
                }
            }
        }
        total / (frames.len() * k * k) as f64
    }

    #[test]
    fn identical_unit_vectors() {
        let s = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let c = cosine_similarity_matrix(&s).unwrap();
        assert_eq!(c, Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
    }

    #[test]
    fn orthogonal_vectors_give_zero() {
        let s = Mat::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, -3.0, 0.0]]);
        let c = cosine_similarity_matrix(&s).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn cosine_matches_double_loop() {
        let s = rng_normal_mat(&mut ChaCha8Rng::seed_from_u64(1), 3, 6);
        let c = cosine_similarity_matrix(&s).unwrap();
        assert!(c.max_abs_diff(&cos_oracle(&s)) < 1e-7);
        for i in 0..3 {
            assert_eq!(c.get(i, i), 0.0);
        }
    }

    #[test]
    fn zero_slot_is_reported() {
        let s = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let err = cosine_similarity_matrix(&s).unwrap_err();
        assert!(matches!(err, Error::DegenerateSlot { slot: 1, .. }));
    }

    #[test]
    fn orthonormal_slots_give_ln_k() {
        for tau in [0.1, 0.5, 2.0] {
            for t in [1, 3] {
                let frames = vec![Mat::identity(4); t];
                let l = slot_contrastive_loss(&SlotSequence::new(frames, Stage::Fused), tau).unwrap();
                assert!((l - 4f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_pair_closed_form() {
        let s = Mat::from_rows(&[vec![0.3, -1.2, 0.5], vec![0.3, -1.2, 0.5]]);
        let l = slot_contrastive_loss(&SlotSequence::new(vec![s], Stage::Fused), 1.0).unwrap();
        let expected = (1.0 + 2.0 * (1.0 + (-1f64).exp()).ln()) / 2.0;
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.81326).abs() < 1e-5);
        assert!(2f64.ln() < l);
    }

    #[test]
    fn loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<Mat> = (0..3).map(|_| rng_normal_mat(&mut rng, 4, 5)).collect();
        let l = slot_contrastive_loss(&SlotSequence::new(frames.clone(), Stage::Fused), 0.5).unwrap();
        assert!((l - loss_oracle(&frames, 0.5)).abs() < 1e-10);
    }

    #[test]
    fn reconstruction_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Mat> = (0..2).map(|_| rng_normal_mat(&mut rng, 4, 3)).collect();
        let b: Vec<Mat> = a.iter().map(|m| m.map(|v| v + 1.0)).collect();
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert!((reconstruction_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<Mat> = (0..2).map(|_| rng_normal_mat(&mut rng, 4, 3)).collect();
        assert_eq!(
            reconstruction_loss(&a, &c).unwrap(),
            reconstruction_loss(&c, &a).unwrap()
        );
        let bad = vec![Mat::zeros(4, 2), Mat::zeros(4, 3)];
        assert!(matches!(
            reconstruction_loss(&bad, &a),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn reconstruction_gradient_is_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Mat> = (0..2).map(|_| rng_normal_mat(&mut rng, 3, 2)).collect();
        let r: Vec<Mat> = (0..2).map(|_| rng_normal_mat(&mut rng, 3, 2)).collect();
        let g = Graph::new();
        let rv: Vec<_> = r.iter().map(|m| g.var(m.clone())).collect();
        let xv: Vec<_> = x.iter().map(|m| g.constant(m.clone())).collect();
        let loss = reconstruction_loss_var(&rv, &xv).unwrap();
        let grads = g.backward(loss);
        for t in 0..2 {
            let expected = r[t].zip_map(&x[t], |a, b| 2.0 * (a - b) / 12.0);
            assert!(grads.wrt(rv[t]).unwrap().max_abs_diff(&expected) < 1e-15);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = LossConfig::default();
        assert!((total_loss(1.0, 2.0, &cfg).unwrap() - 1.02).abs() < 1e-15);
        let zero = LossConfig { alpha: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(0.7, 5.0, &zero).unwrap(), 0.7);
        assert!(matches!(total_loss(f64::NAN, 1.0, &cfg), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let s = rng_normal_mat(&mut ChaCha8Rng::seed_from_u64(5), 3, 5);
        let g = Graph::new();
        let v = g.var(s.clone());
        let grads = g.backward(slot_contrastive_loss_var(&[v], 0.5).unwrap());
        let an = grads.wrt(v).unwrap();
        let f = |m: &Mat| loss_oracle(std::slice::from_ref(m), 0.5);
        let h = 1e-6;
        for i in 0..s.len() {
            let mut p = s.clone();
            p.data_mut()[i] += h;
            let mut m = s.clone();
            m.data_mut()[i] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            let a = an.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-3, "entry {i}: analytic {a} numeric {num}");
        }
    }

    proptest::proptest! {
        #[test]
        fn rescaling_a_slot_leaves_loss_unchanged(
            seed in 0u64..1000, slot in 0usize..3, scale in 0.01f64..100.0
        ) {
            let s = rng_normal_mat(&mut ChaCha8Rng::seed_from_u64(seed), 3, 4);
            let mut r = s.clone();
            for v in r.row_mut(slot) {
                *v *= scale;
            }
            let a = slot_contrastive_loss(&SlotSequence::new(vec![s], Stage::Fused), 0.5).unwrap();
            let b = slot_contrastive_loss(&SlotSequence::new(vec![r], Stage::Fused), 0.5).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

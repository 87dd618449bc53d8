//! Temporal slot transformer: learned temporal position embeddings, frame
//! masking, and a non-causal pre-norm transformer over all `T*K` slot
//! tokens. The same module predicts the next frame's slots by masking a
//! blank final position.
//!
//! Tokens are laid out frame-major (`row = t*K + k`) and carry no slot-index
//! embedding, so the encoder is equivariant to a consistent relabeling of
//! slots. Because a masked frame's `K` tokens are all exactly zero, full
//! attention alone cannot tell them apart; each block therefore starts with
//! attention restricted to the token's own slot track (same `k`, all `t`),
//! which gives each masked token its identity from its own trajectory,
//! followed by full attention over every token.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Mlp, MultiHeadAttention, ParamBuilder, ParamId, ParamStore};
use crate::slot_attention::{SlotSequence, SlotSet, Stage};
use crate::tensor::Mat;

/// Which frames survive masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalMask {
    /// `true` = kept.
    pub kept: Vec<bool>,
}

impl TemporalMask {
    pub fn all_kept(t: usize) -> Self {
        Self { kept: vec![true; t] }
    }

    /// Only the final frame masked.
    pub fn last_masked(t: usize) -> Self {
        let mut kept = vec![true; t];
        if let Some(last) = kept.last_mut() {
            *last = false;
        }
        Self { kept }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    pub fn masked_frames(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&t| !self.kept[t]).collect()
    }
}

/// Masks `min(round(gamma * T), T - 1)` frames chosen uniformly without
/// replacement.
pub fn sample_frame_mask(t: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Result<TemporalMask> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "masking ratio must lie in [0, 1), got {gamma}"
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("cannot mask an empty sequence".into()));
    }
    let count = ((gamma * t as f64).round() as usize).min(t - 1);
    let mut kept = vec![true; t];
    for i in sample(rng, t, count) {
        kept[i] = false;
    }
    Ok(TemporalMask { kept })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMixing {
    /// Full attention over all tokens only.
    Full,
    /// Attention within each slot's temporal track only.
    Track,
    /// Track attention followed by full attention in every block.
    TrackAndFull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TstConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_multiplier: usize,
    pub d_slot: usize,
    pub max_t: usize,
    pub mixing: TokenMixing,
}

impl TstConfig {
    pub fn new(d_slot: usize) -> Self {
        Self {
            n_layers: 3,
            n_heads: 8,
            ffn_multiplier: 4,
            d_slot,
            max_t: 32,
            mixing: TokenMixing::TrackAndFull,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_slot % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_slot {} is not divisible by n_heads {}",
                self.d_slot, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_t == 0 || self.ffn_multiplier == 0 {
            return Err(Error::InvalidArgument(
                "TST needs at least one layer, max_t >= 1 and ffn_multiplier >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    track_norm: Option<LayerNorm>,
    track_attn: Option<MultiHeadAttention>,
    full_norm: Option<LayerNorm>,
    full_attn: Option<MultiHeadAttention>,
    ffn_norm: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct TemporalSlotTransformer {
    pub cfg: TstConfig,
    /// `max_t x d_slot`; row `t` is the embedding for frame `t`.
    pub pos: ParamId,
    blocks: Vec<Block>,
}

impl TemporalSlotTransformer {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: TstConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_slot;
        let pos = pb.normal("pos", cfg.max_t, d, 0.02);
        let track = matches!(cfg.mixing, TokenMixing::Track | TokenMixing::TrackAndFull);
        let full = matches!(cfg.mixing, TokenMixing::Full | TokenMixing::TrackAndFull);
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let mut lb = pb.sub(&format!("layer{i}"));
                Block {
                    track_norm: track.then(|| LayerNorm::new(&mut lb.sub("track_norm"), d)),
                    track_attn: track
                        .then(|| MultiHeadAttention::new(&mut lb.sub("track_attn"), d, d, cfg.n_heads)),
                    full_norm: full.then(|| LayerNorm::new(&mut lb.sub("full_norm"), d)),
                    full_attn: full
                        .then(|| MultiHeadAttention::new(&mut lb.sub("full_attn"), d, d, cfg.n_heads)),
                    ffn_norm: LayerNorm::new(&mut lb.sub("ffn_norm"), d),
                    ffn: Mlp::new(
                        &mut lb.sub("ffn"),
                        &[d, cfg.ffn_multiplier * d, d],
                        Activation::Gelu,
                    ),
                }
            })
            .collect();
        Ok(Self { cfg, pos, blocks })
    }

    fn check_shapes(&self, frames: &[Var<'_>]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("empty slot sequence".into()));
        }
        if frames.len() > self.cfg.max_t {
            return Err(Error::SequenceTooLong {
                len: frames.len(),
                max: self.cfg.max_t,
            });
        }
        let (k, d) = frames[0].shape();
        for f in frames {
            if f.shape() != (k, self.cfg.d_slot) || d != self.cfg.d_slot {
                return Err(Error::shape(
                    "TST input frame",
                    format!("({k}, {})", self.cfg.d_slot),
                    format!("{:?}", f.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Adds row `t` of the positional table to every slot of frame `t`.
    pub fn add_temporal_pos<'g>(&self, frames: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        self.check_shapes(frames)?;
        let g = frames[0].graph();
        let table = g.param(self.pos);
        Ok(frames
            .iter()
            .enumerate()
            .map(|(t, f)| f.add_row(table.slice_rows(t, 1)))
            .collect())
    }

    /// Replaces masked frames with exact zeros; kept frames pass through.
    pub fn apply_mask<'g>(frames: &[Var<'g>], mask: &TemporalMask) -> Result<Vec<Var<'g>>> {
        if frames.len() != mask.len() {
            return Err(Error::shape("temporal mask", frames.len(), mask.len()));
        }
        Ok(frames
            .iter()
            .zip(&mask.kept)
            .map(|(&f, &kept)| {
                if kept {
                    f
                } else {
                    let (r, c) = f.shape();
                    f.graph().constant(Mat::zeros(r, c))
                }
            })
            .collect())
    }

    fn track_mask(t: usize, k: usize) -> Mat {
        Mat::from_fn(t * k, t * k, |i, j| {
            if i % k == j % k {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    /// Encoder over all `T*K` tokens; output has the input's shape.
    pub fn forward<'g>(&self, frames: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        self.check_shapes(frames)?;
        let g = frames[0].graph();
        let (t, k) = (frames.len(), frames[0].rows());
        let track_mask = self
            .blocks
            .first()
            .and_then(|b| b.track_attn.as_ref())
            .map(|_| g.constant(Self::track_mask(t, k)));
        let mut x = g.vstack(frames);
        for b in &self.blocks {
            if let (Some(norm), Some(attn)) = (&b.track_norm, &b.track_attn) {
                let h = norm.forward(x);
                x = x.add(attn.forward_masked(h, h, track_mask));
            }
            if let (Some(norm), Some(attn)) = (&b.full_norm, &b.full_attn) {
                let h = norm.forward(x);
                x = x.add(attn.forward(h, h));
            }
            x = x.add(b.ffn.forward(b.ffn_norm.forward(x)));
        }
        Ok((0..t).map(|i| x.slice_rows(i * k, k)).collect())
    }

    /// Positions, masks and encodes a sequence of initial slots.
    pub fn fuse<'g>(&self, frames: &[Var<'g>], mask: &TemporalMask) -> Result<Vec<Var<'g>>> {
        let pos = self.add_temporal_pos(frames)?;
        let masked = Self::apply_mask(&pos, mask)?;
        self.forward(&masked)
    }

    /// Slots for the frame after `history`: a blank frame is appended and
    /// masked, and the encoder output at that position is returned.
    pub fn predict_next<'g>(&self, history: &[Var<'g>]) -> Result<Var<'g>> {
        if history.is_empty() {
            return Err(Error::InvalidArgument(
                "next-slot prediction needs at least one frame of history".into(),
            ));
        }
        let t = history.len() + 1;
        if t > self.cfg.max_t {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.cfg.max_t,
            });
        }
        let g = history[0].graph();
        let (k, d) = history[0].shape();
        let mut frames = history.to_vec();
        frames.push(g.constant(Mat::zeros(k, d)));
        let out = self.fuse(&frames, &TemporalMask::last_masked(t))?;
        Ok(*out.last().expect("non-empty"))
    }

    // Value-level wrappers.

    pub fn add_temporal_pos_seq(&self, params: &ParamStore, s: &SlotSequence) -> Result<SlotSequence> {
        let g = Graph::with_params(params);
        let vars = constants(&g, s);
        let out = self.add_temporal_pos(&vars)?;
        Ok(SlotSequence::new(values(&out), Stage::Positioned))
    }

    pub fn apply_mask_seq(s: &SlotSequence, mask: &TemporalMask) -> Result<SlotSequence> {
        if s.t() != mask.len() {
            return Err(Error::shape("temporal mask", s.t(), mask.len()));
        }
        let frames = s
            .frames
            .iter()
            .zip(&mask.kept)
            .map(|(f, &kept)| if kept { f.clone() } else { Mat::zeros(f.rows(), f.cols()) })
            .collect();
        Ok(SlotSequence::new(frames, Stage::Masked))
    }

    pub fn tst_forward(&self, params: &ParamStore, s_masked: &SlotSequence) -> Result<SlotSequence> {
        let g = Graph::with_params(params);
        let vars = constants(&g, s_masked);
        let out = self.forward(&vars)?;
        Ok(SlotSequence::new(values(&out), Stage::Fused))
    }

    pub fn predict_next_slot(&self, params: &ParamStore, history: &SlotSequence) -> Result<SlotSet> {
        let g = Graph::with_params(params);
        let vars = constants(&g, history);
        let out = self.predict_next(&vars)?;
        Ok(SlotSet {
            slots: (*out.value()).clone(),
            frame_index: history.t(),
        })
    }
}

fn constants<'g>(g: &'g Graph<'g>, s: &SlotSequence) -> Vec<Var<'g>> {
    s.frames.iter().map(|m| g.constant(m.clone())).collect()
}

fn values(vars: &[Var<'_>]) -> Vec<Mat> {
    vars.iter().map(|v| (*v.value()).clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_normal_mat;
    use rand::SeedableRng;

    fn build(cfg: TstConfig) -> (ParamStore, TemporalSlotTransformer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let tst = TemporalSlotTransformer::new(&mut pb.sub("tst"), cfg).unwrap();
        (store, tst)
    }

    fn small_cfg() -> TstConfig {
        TstConfig {
            n_layers: 2,
            n_heads: 2,
            ffn_multiplier: 2,
            d_slot: 8,
            max_t: 6,
            mixing: TokenMixing::TrackAndFull,
        }
    }

    fn seq(t: usize, k: usize, d: usize, seed: u64) -> SlotSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SlotSequence::new(
            (0..t).map(|_| rng_normal_mat(&mut rng, k, d)).collect(),
            Stage::Initial,
        )
    }

    #[test]
    fn mask_counts_follow_rounding_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_frame_mask(5, 0.0, &mut rng).unwrap().num_masked(), 0);
        assert_eq!(sample_frame_mask(4, 0.5, &mut rng).unwrap().num_masked(), 2);
        assert_eq!(sample_frame_mask(2, 0.9, &mut rng).unwrap().num_masked(), 1);
        assert_eq!(sample_frame_mask(5, 0.15, &mut rng).unwrap().num_masked(), 1);
        assert!(sample_frame_mask(5, 1.0, &mut rng).is_err());
        assert!(sample_frame_mask(5, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_is_seeded() {
        let a = sample_frame_mask(10, 0.3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_frame_mask(10, 0.3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_table_leaves_slots_unchanged() {
        let (mut store, tst) = build(small_cfg());
        *store.get_mut(tst.pos) = Mat::zeros(6, 8);
        let s = seq(3, 2, 8, 1);
        let p = tst.add_temporal_pos_seq(&store, &s).unwrap();
        assert_eq!(p.frames, s.frames);
        assert_eq!(p.stage, Stage::Positioned);
    }

    #[test]
    fn slots_in_a_frame_share_the_offset() {
        let (store, tst) = build(small_cfg());
        let s = seq(3, 2, 8, 1);
        let p = tst.add_temporal_pos_seq(&store, &s).unwrap();
        for t in 0..3 {
            for c in 0..8 {
                let d0 = p.frames[t].get(0, c) - s.frames[t].get(0, c);
                let d1 = p.frames[t].get(1, c) - s.frames[t].get(1, c);
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_long_sequences_are_rejected() {
        let (store, tst) = build(small_cfg());
        let err = tst.add_temporal_pos_seq(&store, &seq(7, 2, 8, 1)).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 7, max: 6 }));
        let err = tst.predict_next_slot(&store, &seq(6, 2, 8, 1)).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { .. }));
    }

    #[test]
    fn masking_is_exact() {
        let s = seq(4, 3, 8, 2);
        let mask = TemporalMask {
            kept: vec![true, true, false, true],
        };
        let m = TemporalSlotTransformer::apply_mask_seq(&s, &mask).unwrap();
        assert!(m.frames[2].data().iter().all(|v| v.to_bits() == 0));
        for t in [0, 1, 3] {
            assert_eq!(m.frames[t], s.frames[t]);
        }
        let all = TemporalSlotTransformer::apply_mask_seq(&s, &TemporalMask::all_kept(4)).unwrap();
        assert_eq!(all.frames, s.frames);
    }

    #[test]
    fn forward_preserves_shape_and_slot_permutation() {
        let (store, tst) = build(small_cfg());
        let s = seq(4, 3, 8, 9);
        let out = tst.tst_forward(&store, &s).unwrap();
        assert_eq!(out.t(), 4);
        assert_eq!(out.frames[0].shape(), (3, 8));
        let perm = [1, 2, 0];
        let sp = SlotSequence::new(
            s.frames.iter().map(|f| f.permute_rows(&perm)).collect(),
            Stage::Masked,
        );
        let outp = tst.tst_forward(&store, &sp).unwrap();
        for t in 0..4 {
            assert!(out.frames[t].permute_rows(&perm).max_abs_diff(&outp.frames[t]) < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let mut cfg = small_cfg();
        cfg.n_heads = 3;
        assert!(TemporalSlotTransformer::new(&mut pb, cfg).is_err());
    }

    #[test]
    fn track_attention_separates_masked_slots() {
        let (store, tst) = build(small_cfg());
        let s = seq(4, 3, 8, 3);
        let mask = TemporalMask {
            kept: vec![true, false, true, true],
        };
        let g = Graph::with_params(&store);
        let vars: Vec<_> = s.frames.iter().map(|m| g.constant(m.clone())).collect();
        let out = tst.fuse(&vars, &mask).unwrap();
        let f = out[1].value();
        assert!(f.slice_rows(0, 1).max_abs_diff(&f.slice_rows(1, 1)) > 1e-6);

        // With full attention only, the zeroed tokens are indistinguishable.
        let mut cfg = small_cfg();
        cfg.mixing = TokenMixing::Full;
        let (store, tst) = build(cfg);
        let g = Graph::with_params(&store);
        let vars: Vec<_> = s.frames.iter().map(|m| g.constant(m.clone())).collect();
        let out = tst.fuse(&vars, &mask).unwrap();
        let f = out[1].value();
        assert!(f.slice_rows(0, 1).max_abs_diff(&f.slice_rows(1, 1)) < 1e-12);
    }

    #[test]
    fn next_slot_prediction_shape_and_determinism() {
        let (store, tst) = build(small_cfg());
        let h = seq(3, 4, 8, 6);
        let a = tst.predict_next_slot(&store, &h).unwrap();
        let b = tst.predict_next_slot(&store, &h).unwrap();
        assert_eq!(a.slots.shape(), (4, 8));
        assert_eq!(a, b);
        assert_eq!(a.frame_index, 3);
    }
}

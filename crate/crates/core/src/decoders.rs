//! Slot decoders: per-frame slots to reconstructed patch features plus
//! `K`-channel soft segmentation masks.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder, ParamId, ParamStore};
use crate::slot_attention::{SlotSequence, SlotSet};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Mlp,
    Mixer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub d_slot: usize,
    pub feature_dim: usize,
    pub n_positions: usize,
    pub hidden: usize,
    /// Hidden layers in the broadcast / render MLP.
    pub mlp_layers: usize,
    /// Cross-attention blocks in the mixer's allocation transformer.
    pub mixer_blocks: usize,
}

/// Decoder output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFrame {
    pub x_recon: Mat,
    /// `K x N`, columns sum to one.
    pub soft_masks: Mat,
    /// Per-position argmax over slots, ties to the lowest index.
    pub labels: Vec<usize>,
}

/// Argmax over the slot axis of a `K x N` mask; ties go to the lower slot.
pub fn argmax_slots(soft: &Mat) -> Vec<usize> {
    (0..soft.cols())
        .map(|n| {
            let mut best = 0;
            for k in 1..soft.rows() {
                if soft.get(k, n) > soft.get(best, n) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MlpBroadcastDecoder {
    pub pos: ParamId,
    mlp: Mlp,
    n: usize,
    feature_dim: usize,
}

impl MlpBroadcastDecoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &DecoderConfig) -> Self {
        let mut dims = vec![cfg.d_slot];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.mlp_layers));
        dims.push(cfg.feature_dim + 1);
        Self {
            pos: pb.normal("pos", cfg.n_positions, cfg.d_slot, 1.0),
            mlp: Mlp::new(&mut pb.sub("mlp"), &dims, Activation::Relu),
            n: cfg.n_positions,
            feature_dim: cfg.feature_dim,
        }
    }

    /// Returns `(x_recon (N x D), masks (K x N))`.
    pub fn decode<'g>(&self, slots: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let g = slots.graph();
        let k = slots.rows();
        let pos = g.param(self.pos);
        if pos.rows() != self.n {
            return Err(Error::shape("decoder positions", self.n, pos.rows()));
        }
        let tokens = slots.repeat_rows(self.n).add(pos.tile(k));
        let out = self.mlp.forward(tokens);
        let x_hat = out.slice_cols(0, self.feature_dim);
        let alpha = out.slice_cols(self.feature_dim, 1).reshape(k, self.n);
        let masks = alpha.softmax_cols();
        let x = x_hat
            .mul_col(masks.reshape(k * self.n, 1))
            .sum_blocks(k);
        Ok((x, masks))
    }

    /// Per-slot reconstructions `x_hat` (`K*N x D`, slot-major) and logits.
    pub fn per_slot<'g>(&self, slots: Var<'g>) -> (Var<'g>, Var<'g>) {
        let g = slots.graph();
        let k = slots.rows();
        let tokens = slots.repeat_rows(self.n).add(g.param(self.pos).tile(k));
        let out = self.mlp.forward(tokens);
        (
            out.slice_cols(0, self.feature_dim),
            out.slice_cols(self.feature_dim, 1).reshape(k, self.n),
        )
    }
}

#[derive(Clone, Debug)]
struct AllocationBlock {
    query_norm: LayerNorm,
    slot_norm: LayerNorm,
    attn: MultiHeadAttention,
    mlp_norm: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct MixerDecoder {
    pub pos: ParamId,
    blocks: Vec<AllocationBlock>,
    mix_query_norm: LayerNorm,
    mix_slot_norm: LayerNorm,
    mix_q: Linear,
    mix_k: Linear,
    render: Mlp,
    n: usize,
}

impl MixerDecoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &DecoderConfig) -> Self {
        let d = cfg.d_slot;
        let blocks = (0..cfg.mixer_blocks)
            .map(|i| {
                let mut b = pb.sub(&format!("alloc{i}"));
                AllocationBlock {
                    query_norm: LayerNorm::new(&mut b.sub("query_norm"), d),
                    slot_norm: LayerNorm::new(&mut b.sub("slot_norm"), d),
                    attn: MultiHeadAttention::new(&mut b.sub("attn"), d, d, 1),
                    mlp_norm: LayerNorm::new(&mut b.sub("mlp_norm"), d),
                    mlp: Mlp::new(&mut b.sub("mlp"), &[d, 2 * d, d], Activation::Gelu),
                }
            })
            .collect();
        let mut dims = vec![d];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.mlp_layers));
        dims.push(cfg.feature_dim);
        Self {
            pos: pb.normal("pos", cfg.n_positions, d, 1.0),
            blocks,
            mix_query_norm: LayerNorm::new(&mut pb.sub("mix_query_norm"), d),
            mix_slot_norm: LayerNorm::new(&mut pb.sub("mix_slot_norm"), d),
            mix_q: Linear::new(&mut pb.sub("mix_q"), d, d, false),
            mix_k: Linear::new(&mut pb.sub("mix_k"), d, d, false),
            render: Mlp::new(&mut pb.sub("render"), &dims, Activation::Relu),
            n: cfg.n_positions,
        }
    }

    /// Position queries cross-attend to the slots: `f` is `N x d_slot`.
    pub fn allocate<'g>(&self, slots: Var<'g>) -> Result<Var<'g>> {
        let g = slots.graph();
        let mut f = g.param(self.pos);
        if f.rows() != self.n || f.cols() != slots.cols() {
            return Err(Error::shape(
                "mixer allocation",
                format!("({}, {})", self.n, slots.cols()),
                format!("{:?}", f.shape()),
            ));
        }
        for b in &self.blocks {
            let ctx = b.slot_norm.forward(slots);
            f = f.add(b.attn.forward(b.query_norm.forward(f), ctx));
            f = f.add(b.mlp.forward(b.mlp_norm.forward(f)));
        }
        Ok(f)
    }

    /// Single-head attention of `f` over the slots. Returns
    /// `(m = A_mix s (N x d_slot), A_mix (N x K))`.
    pub fn mix<'g>(&self, f: Var<'g>, slots: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        if f.cols() != slots.cols() {
            return Err(Error::shape("mixer mix", slots.cols(), f.cols()));
        }
        let q = self.mix_q.forward(self.mix_query_norm.forward(f));
        let k = self.mix_k.forward(self.mix_slot_norm.forward(slots));
        let d = q.cols() as f64;
        let a_mix = q.matmul_nt(k).scale(1.0 / d.sqrt()).softmax_rows();
        Ok((a_mix.matmul(slots), a_mix))
    }

    pub fn render<'g>(&self, m: Var<'g>) -> Var<'g> {
        let g = m.graph();
        self.render.forward(m.add(g.param(self.pos)))
    }

    pub fn decode<'g>(&self, slots: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let f = self.allocate(slots)?;
        let (m, a_mix) = self.mix(f, slots)?;
        Ok((self.render(m), a_mix.t()))
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Mlp(MlpBroadcastDecoder),
    Mixer(MixerDecoder),
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &DecoderConfig) -> Self {
        match cfg.kind {
            DecoderKind::Mlp => Decoder::Mlp(MlpBroadcastDecoder::new(pb, cfg)),
            DecoderKind::Mixer => Decoder::Mixer(MixerDecoder::new(pb, cfg)),
        }
    }

    /// `(x_recon (N x D), soft masks (K x N))` for one frame.
    pub fn decode<'g>(&self, slots: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        match self {
            Decoder::Mlp(d) => d.decode(slots),
            Decoder::Mixer(d) => d.decode(slots),
        }
    }

    pub fn decode_frame(&self, params: &ParamStore, s: &SlotSet) -> Result<DecodedFrame> {
        let g = Graph::with_params(params);
        let (x, m) = self.decode(g.constant(s.slots.clone()))?;
        let soft = (*m.value()).clone();
        Ok(DecodedFrame {
            x_recon: (*x.value()).clone(),
            labels: argmax_slots(&soft),
            soft_masks: soft,
        })
    }

    /// Decodes each frame independently.
    pub fn decode_sequence(
        &self,
        params: &ParamStore,
        s: &SlotSequence,
        grid: (usize, usize),
        patch_size: usize,
    ) -> Result<(Vec<Mat>, MaskSet)> {
        let mut recon = Vec::with_capacity(s.t());
        let mut soft = Vec::with_capacity(s.t());
        for (t, slots) in s.frames.iter().enumerate() {
            let d = self.decode_frame(
                params,
                &SlotSet {
                    slots: slots.clone(),
                    frame_index: t,
                },
            )?;
            recon.push(d.x_recon);
            soft.push(d.soft_masks);
        }
        Ok((recon, MaskSet::new(soft, grid, patch_size)?))
    }
}

/// Soft slot masks for a clip on the patch grid, with pixel-level hard
/// labels derived by argmax and nearest-neighbour upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    /// One `K x N` matrix per frame.
    pub soft: Vec<Mat>,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

impl MaskSet {
    pub fn new(soft: Vec<Mat>, grid: (usize, usize), patch_size: usize) -> Result<Self> {
        let n = grid.0 * grid.1;
        let k = soft.first().map_or(0, Mat::rows);
        for m in &soft {
            if m.shape() != (k, n) {
                return Err(Error::shape(
                    "mask set frame",
                    format!("({k}, {n})"),
                    format!("{:?}", m.shape()),
                ));
            }
        }
        Ok(Self {
            soft,
            grid,
            patch_size,
        })
    }

    pub fn t(&self) -> usize {
        self.soft.len()
    }

    pub fn k(&self) -> usize {
        self.soft.first().map_or(0, Mat::rows)
    }

    pub fn height(&self) -> usize {
        self.grid.0 * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid.1 * self.patch_size
    }

    pub fn patch_labels(&self, t: usize) -> Vec<usize> {
        argmax_slots(&self.soft[t])
    }

    /// `H x W` slot indices for frame `t`.
    pub fn pixel_labels(&self, t: usize) -> Vec<usize> {
        upsample_labels(&self.patch_labels(t), self.grid, self.patch_size)
    }

    /// `T x H x W` slot indices.
    pub fn label_video(&self) -> Vec<usize> {
        (0..self.t()).flat_map(|t| self.pixel_labels(t)).collect()
    }
}

/// Nearest-neighbour upsampling of grid labels to pixels.
pub fn upsample_labels<T: Copy>(labels: &[T], (gh, gw): (usize, usize), patch: usize) -> Vec<T> {
    let (h, w) = (gh * patch, gw * patch);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(labels[(y / patch) * gw + x / patch]);
        }
    }
    out
}

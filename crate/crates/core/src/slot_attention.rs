//! Competitive slot attention over patch features, with the frame-to-frame
//! recurrence that seeds each frame's slots from the previous frame.
//!
//! One iteration computes
//!
//! ```text
//! A     = softmax_over_slots(q k^T / sqrt(d_slot))      (K x N)
//! A_hat = A / sum_n A                                   (rows sum to 1)
//! u     = A_hat v                                       (K x d_slot)
//! ```
//!
//! and then refines the slots with a GRU (input `u`, state = previous
//! slots) plus a residual MLP, or returns `u` directly when the refinement
//! cell is disabled.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{rng_normal_mat, Activation, GruCell, LayerNorm, Linear, Mlp, ParamBuilder, ParamId};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotInit {
    StandardGaussian,
    LearnedGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineCell {
    GruMlp,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotSet {
    pub slots: Mat,
    pub frame_index: usize,
}

impl SlotSet {
    pub fn k(&self) -> usize {
        self.slots.rows()
    }

    pub fn d_slot(&self) -> usize {
        self.slots.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Initial,
    Positioned,
    Masked,
    Fused,
}

/// Slots for a whole clip, one `K x d_slot` matrix per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSequence {
    pub frames: Vec<Mat>,
    pub stage: Stage,
}

impl SlotSequence {
    pub fn new(frames: Vec<Mat>, stage: Stage) -> Self {
        Self { frames, stage }
    }

    pub fn t(&self) -> usize {
        self.frames.len()
    }

    pub fn k(&self) -> usize {
        self.frames[0].rows()
    }

    pub fn d_slot(&self) -> usize {
        self.frames[0].cols()
    }

    /// Moves to a later stage; stages only advance.
    pub fn advance(self, stage: Stage) -> Result<Self> {
        if stage <= self.stage {
            return Err(Error::InvalidArgument(format!(
                "slot sequence cannot go from {:?} to {:?}",
                self.stage, stage
            )));
        }
        Ok(Self {
            frames: self.frames,
            stage,
        })
    }
}

/// Attention maps from one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Softmax over slots; columns sum to one.
    pub a: Mat,
    /// `a` normalized over positions; rows sum to one (or are zero).
    pub a_hat: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAttentionConfig {
    pub k: usize,
    pub d_slot: usize,
    pub feature_dim: usize,
    pub grid: (usize, usize),
    pub n_first: usize,
    pub n_later: usize,
    pub init: SlotInit,
    pub refine: RefineCell,
    pub mlp_hidden: usize,
    /// Layer norm and a two-layer MLP on the position-embedded features
    /// before keys and values.
    #[serde(default)]
    pub feature_mlp: bool,
}

impl SlotAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_slot == 0 {
            return Err(Error::InvalidArgument(format!(
                "slot attention needs K >= 1 and d_slot >= 1 (got K={}, d_slot={})",
                self.k, self.d_slot
            )));
        }
        if self.n_first == 0 || self.n_later == 0 {
            return Err(Error::InvalidArgument(
                "iteration counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub cfg: SlotAttentionConfig,
    input_norm: LayerNorm,
    input_proj: Linear,
    pos_proj: Linear,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    slot_norm: LayerNorm,
    gru: GruCell,
    mlp_norm: LayerNorm,
    mlp: Mlp,
    init_mu: Option<ParamId>,
    init_log_sigma: Option<ParamId>,
    feature_mlp: Option<(LayerNorm, Mlp)>,
}

/// Keys and values for one frame, computed once and shared by all
/// iterations on that frame.
#[derive(Clone, Copy)]
pub struct FrameInputs<'g> {
    pub k: Var<'g>,
    pub v: Var<'g>,
}

/// Normalized `[y, x, 1 - y, 1 - x]` coordinates of each grid cell.
pub fn coordinate_grid((h, w): (usize, usize)) -> Mat {
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    Mat::from_fn(h * w, 4, |n, c| {
        let (y, x) = (norm(n / w, h), norm(n % w, w));
        match c {
            0 => y,
            1 => x,
            2 => 1.0 - y,
            _ => 1.0 - x,
        }
    })
}

impl SlotAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: SlotAttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_slot;
        let (init_mu, init_log_sigma) = match cfg.init {
            SlotInit::LearnedGaussian => {
                let bound = (6.0 / (1.0 + d as f64)).sqrt();
                (
                    Some(pb.uniform("init_mu", 1, d, bound)),
                    Some(pb.uniform("init_log_sigma", 1, d, bound)),
                )
            }
            SlotInit::StandardGaussian => (None, None),
        };
        Ok(Self {
            input_norm: LayerNorm::new(&mut pb.sub("input_norm"), cfg.feature_dim),
            input_proj: Linear::new(&mut pb.sub("input_proj"), cfg.feature_dim, d, true),
            pos_proj: Linear::new(&mut pb.sub("pos_proj"), 4, d, true),
            to_q: Linear::new(&mut pb.sub("to_q"), d, d, false),
            to_k: Linear::new(&mut pb.sub("to_k"), d, d, false),
            to_v: Linear::new(&mut pb.sub("to_v"), d, d, false),
            slot_norm: LayerNorm::new(&mut pb.sub("slot_norm"), d),
            gru: GruCell::new(&mut pb.sub("gru"), d, d),
            mlp_norm: LayerNorm::new(&mut pb.sub("mlp_norm"), d),
            mlp: Mlp::new(&mut pb.sub("mlp"), &[d, cfg.mlp_hidden, d], Activation::Relu),
            init_mu,
            init_log_sigma,
            feature_mlp: cfg.feature_mlp.then(|| {
                (
                    LayerNorm::new(&mut pb.sub("feature_norm"), d),
                    Mlp::new(&mut pb.sub("feature_mlp"), &[d, d, d], Activation::Relu),
                )
            }),
            cfg,
        })
    }

    /// Initial slots for the first frame.
    pub fn init_slots<'g>(&self, g: &'g Graph<'g>, rng: &mut ChaCha8Rng) -> Var<'g> {
        let noise = rng_normal_mat(rng, self.cfg.k, self.cfg.d_slot);
        match (self.init_mu, self.init_log_sigma) {
            (Some(mu), Some(ls)) => {
                let eps = g.constant(noise);
                eps.mul_row(g.param(ls).exp()).add_row(g.param(mu))
            }
            _ => g.constant(noise),
        }
    }

    /// Feature conditioning: layer norm, projection to `d_slot`, and a
    /// learned embedding of the patch coordinates, then keys and values.
    pub fn prepare<'g>(&self, x: Var<'g>) -> Result<FrameInputs<'g>> {
        let g = x.graph();
        let (n, dx) = x.shape();
        let (gh, gw) = self.cfg.grid;
        if n != gh * gw || dx != self.cfg.feature_dim {
            return Err(Error::shape(
                "slot attention input",
                format!("({}, {})", gh * gw, self.cfg.feature_dim),
                format!("({n}, {dx})"),
            ));
        }
        let pos = self.pos_proj.forward(g.constant(coordinate_grid(self.cfg.grid)));
        let mut h = self.input_proj.forward(self.input_norm.forward(x)).add(pos);
        if let Some((norm, mlp)) = &self.feature_mlp {
            h = mlp.forward(norm.forward(h));
        }
        Ok(FrameInputs {
            k: self.to_k.forward(h),
            v: self.to_v.forward(h),
        })
    }

    /// One attention-and-refine iteration. Returns `(slots, A, A_hat)`.
    pub fn step<'g>(
        &self,
        inputs: FrameInputs<'g>,
        slots: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let d = self.cfg.d_slot as f64;
        let q = self.to_q.forward(self.slot_norm.forward(slots));
        let logits = q.matmul_nt(inputs.k).scale(1.0 / d.sqrt());
        let a = logits.softmax_cols();
        if !a.value().all_finite() {
            return Err(Error::NonFinite {
                context: "slot attention weights".into(),
            });
        }
        let a_hat = a.row_normalize();
        let readout = a_hat.matmul(inputs.v);
        let next = match self.cfg.refine {
            RefineCell::None => readout,
            RefineCell::GruMlp => {
                let h = self.gru.forward(readout, slots);
                h.add(self.mlp.forward(self.mlp_norm.forward(h)))
            }
        };
        if !next.value().all_finite() {
            return Err(Error::NonFinite {
                context: "refined slots".into(),
            });
        }
        Ok((next, a, a_hat))
    }

    pub fn run<'g>(
        &self,
        inputs: FrameInputs<'g>,
        init: Var<'g>,
        n_iters: usize,
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        if n_iters == 0 {
            return Err(Error::InvalidArgument("n_iters must be >= 1".into()));
        }
        let mut s = init;
        let mut last = None;
        for i in 0..n_iters {
            let (next, a, a_hat) = self.step(inputs, s).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} at iteration {i}"),
                },
                other => other,
            })?;
            s = next;
            last = Some((a, a_hat));
        }
        let (a, a_hat) = last.expect("at least one iteration");
        Ok((s, a, a_hat))
    }

    /// Slots for every frame, frame `t > 0` seeded by frame `t - 1`.
    pub fn recurrent<'g>(
        &self,
        frames: &[Var<'g>],
        init: Var<'g>,
    ) -> Result<(Vec<Var<'g>>, Vec<(Var<'g>, Var<'g>)>)> {
        let mut slots = Vec::with_capacity(frames.len());
        let mut records = Vec::with_capacity(frames.len());
        let mut s = init;
        for (t, &x) in frames.iter().enumerate() {
            let iters = if t == 0 { self.cfg.n_first } else { self.cfg.n_later };
            let inputs = self.prepare(x)?;
            let (next, a, a_hat) = self.run(inputs, s, iters).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context}, frame {t}"),
                },
                other => other,
            })?;
            slots.push(next);
            records.push((a, a_hat));
            s = next;
        }
        Ok((slots, records))
    }
}

/// Samples `K x d_slot` slots for the standard-Gaussian mode.
pub fn init_slots(k: usize, d_slot: usize, rng: &mut ChaCha8Rng) -> Result<SlotSet> {
    if k == 0 || d_slot == 0 {
        return Err(Error::InvalidArgument(format!(
            "init_slots needs K >= 1 and d_slot >= 1 (got {k}, {d_slot})"
        )));
    }
    Ok(SlotSet {
        slots: rng_normal_mat(rng, k, d_slot),
        frame_index: 0,
    })
}

impl SlotAttention {
    /// Value-level single step.
    pub fn slot_attention_step(
        &self,
        params: &crate::nn::ParamStore,
        x: &Mat,
        s: &SlotSet,
    ) -> Result<(SlotSet, AttentionRecord)> {
        self.run_slot_attention(params, x, s, 1)
    }

    pub fn run_slot_attention(
        &self,
        params: &crate::nn::ParamStore,
        x: &Mat,
        s: &SlotSet,
        n_iters: usize,
    ) -> Result<(SlotSet, AttentionRecord)> {
        let g = Graph::with_params(params);
        let inputs = self.prepare(g.constant(x.clone()))?;
        let (out, a, a_hat) = self.run(inputs, g.constant(s.slots.clone()), n_iters)?;
        Ok((
            SlotSet {
                slots: (*out.value()).clone(),
                frame_index: s.frame_index,
            },
            AttentionRecord {
                a: (*a.value()).clone(),
                a_hat: (*a_hat.value()).clone(),
            },
        ))
    }

    /// Value-level recurrence over a whole clip.
    pub fn recurrent_video_slots(
        &self,
        params: &crate::nn::ParamStore,
        features: &crate::features::FeatureSequence,
        rng: &mut ChaCha8Rng,
    ) -> Result<(SlotSequence, Vec<AttentionRecord>)> {
        let g = Graph::with_params(params);
        let xs: Vec<Var<'_>> = features
            .frames
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect();
        let init = self.init_slots(&g, rng);
        let (slots, records) = self.recurrent(&xs, init)?;
        Ok((
            SlotSequence::new(
                slots.iter().map(|s| (*s.value()).clone()).collect(),
                Stage::Initial,
            ),
            records
                .iter()
                .map(|(a, ah)| AttentionRecord {
                    a: (*a.value()).clone(),
                    a_hat: (*ah.value()).clone(),
                })
                .collect(),
        ))
    }
}

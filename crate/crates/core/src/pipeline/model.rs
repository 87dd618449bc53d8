use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::decoders::{Decoder, DecoderConfig, MaskSet};
use crate::error::{Error, Result};
use crate::features::{encode_frames, EncoderConfig, FeatureSequence, VideoClip};
use crate::losses::{reconstruction_loss_var, slot_contrastive_loss_var, ContrastTarget};
use crate::nn::{ParamBuilder, ParamStore};
use crate::slot_attention::{SlotAttention, SlotAttentionConfig, SlotSequence, Stage};
use crate::tensor::Mat;
use crate::tst::{sample_frame_mask, TemporalMask, TemporalSlotTransformer, TstConfig};

use super::config::{EncoderMode, MaskMode, RunConfig};

/// The full model: recurrent slot attention, optional temporal slot
/// transformer, and a decoder.
#[derive(Clone, Debug)]
pub struct SlotBert {
    pub cfg: RunConfig,
    pub sa: SlotAttention,
    pub tst: Option<TemporalSlotTransformer>,
    pub decoder: Decoder,
    pub feature_dim: usize,
    pub grid: (usize, usize),
}

/// Graph outputs for one clip.
pub struct ForwardOut<'g> {
    pub initial: Vec<Var<'g>>,
    pub fused: Vec<Var<'g>>,
    pub recon: Vec<Var<'g>>,
    pub masks: Vec<Var<'g>>,
    pub targets: Vec<Var<'g>>,
    pub frame_mask: TemporalMask,
}

pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub recon: Var<'g>,
    pub contrast: Option<Var<'g>>,
    pub slot_recon: Option<Var<'g>>,
}

/// How one forward pass perturbs its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub frames: TemporalMask,
    /// Per frame, the patches zeroed before slot attention.
    pub patches: Option<Vec<Vec<usize>>>,
}

impl Corruption {
    pub fn none(t: usize) -> Self {
        Self {
            frames: TemporalMask::all_kept(t),
            patches: None,
        }
    }
}

pub const PARAM_STREAM: u64 = 0;

impl SlotBert {
    /// Builds the model and its parameters from `optim.seed`.
    pub fn build(cfg: &RunConfig) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let m = &cfg.model;
        let grid = cfg.grid();
        let feature_dim = encoder_config(cfg, None).feature_dim(m.channels);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
        rng.set_stream(PARAM_STREAM);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let sa = SlotAttention::new(
            &mut pb.sub("sa"),
            SlotAttentionConfig {
                k: m.k,
                d_slot: m.d_slot,
                feature_dim,
                grid,
                n_first: m.n_first,
                n_later: m.n_later,
                init: m.slot_init,
                refine: m.refine_cell,
                mlp_hidden: m.sa_mlp_hidden,
                feature_mlp: m.sa_feature_mlp,
            },
        )?;
        let tst = if cfg.ablation.use_tst {
            Some(TemporalSlotTransformer::new(
                &mut pb.sub("tst"),
                TstConfig {
                    n_layers: m.tst_layers,
                    n_heads: m.tst_heads,
                    ffn_multiplier: m.tst_ffn_multiplier,
                    d_slot: m.d_slot,
                    max_t: m.max_t,
                    mixing: m.tst_mixing,
                },
            )?)
        } else {
            None
        };
        let decoder = Decoder::new(
            &mut pb.sub("decoder"),
            &DecoderConfig {
                kind: m.decoder,
                d_slot: m.d_slot,
                feature_dim,
                n_positions: grid.0 * grid.1,
                hidden: m.decoder_hidden,
                mlp_layers: m.decoder_layers,
                mixer_blocks: m.mixer_blocks,
            },
        );
        Ok((
            Self {
                cfg: cfg.clone(),
                sa,
                tst,
                decoder,
                feature_dim,
                grid,
            },
            store,
        ))
    }

    pub fn window(&self) -> usize {
        self.cfg.optim.train_frames
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<FeatureSequence> {
        let m = &self.cfg.model;
        if (clip.height, clip.width, clip.channels) != (m.image_height, m.image_width, m.channels) {
            return Err(Error::shape(
                "clip size",
                format!("{}x{}x{}", m.image_height, m.image_width, m.channels),
                format!("{}x{}x{}", clip.height, clip.width, clip.channels),
            ));
        }
        encode_frames(clip, &encoder_config(&self.cfg, Some(&clip.clip_id)))
    }

    /// Samples the training-time corruption for a `t`-frame clip.
    pub fn sample_corruption(&self, t: usize, rng: &mut ChaCha8Rng) -> Result<Corruption> {
        let gamma = self.cfg.loss.gamma;
        Ok(match self.cfg.ablation.mask_mode {
            MaskMode::Slots if self.tst.is_some() => Corruption {
                frames: sample_frame_mask(t, gamma, rng)?,
                patches: None,
            },
            MaskMode::Features => {
                let n = self.grid.0 * self.grid.1;
                let count = ((gamma * n as f64).round() as usize).min(n - 1);
                let patches = (0..t)
                    .map(|_| {
                        let mut v = sample(rng, n, count).into_vec();
                        v.sort_unstable();
                        v
                    })
                    .collect();
                Corruption {
                    frames: TemporalMask::all_kept(t),
                    patches: Some(patches),
                }
            }
            _ => Corruption::none(t),
        })
    }

    /// Slot attention over every frame with recurrent initialization.
    pub fn initial_slots<'g>(
        &self,
        g: &'g Graph<'g>,
        inputs: &[Var<'g>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Var<'g>>> {
        let init = self.sa.init_slots(g, rng);
        Ok(self.sa.recurrent(inputs, init)?.0)
    }

    pub fn fuse<'g>(&self, initial: &[Var<'g>], mask: &TemporalMask) -> Result<Vec<Var<'g>>> {
        match &self.tst {
            Some(tst) => tst.fuse(initial, mask),
            None => Ok(initial.to_vec()),
        }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<'g>,
        features: &[Mat],
        corruption: &Corruption,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOut<'g>> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("empty clip".into()));
        }
        let targets: Vec<Var<'g>> = features.iter().map(|f| g.constant(f.clone())).collect();
        let inputs: Vec<Var<'g>> = match &corruption.patches {
            None => targets.clone(),
            Some(p) => features
                .iter()
                .zip(p)
                .map(|(f, drop)| {
                    let mut x = f.clone();
                    for &n in drop {
                        x.row_mut(n).fill(0.0);
                    }
                    g.constant(x)
                })
                .collect(),
        };
        let initial = self.initial_slots(g, &inputs, rng)?;
        let fused = self.fuse(&initial, &corruption.frames)?;
        let mut recon = Vec::with_capacity(fused.len());
        let mut masks = Vec::with_capacity(fused.len());
        for s in &fused {
            let (x, m) = self.decoder.decode(*s)?;
            recon.push(x);
            masks.push(m);
        }
        Ok(ForwardOut {
            initial,
            fused,
            recon,
            masks,
            targets,
            frame_mask: corruption.frames.clone(),
        })
    }

    pub fn loss<'g>(&self, out: &ForwardOut<'g>) -> Result<LossTerms<'g>> {
        let recon = reconstruction_loss_var(&out.recon, &out.targets)?;
        let contrast = if self.cfg.ablation.use_contrast && self.cfg.loss.alpha > 0.0 {
            let tau = self.cfg.loss.tau;
            Some(match self.cfg.loss.contrast_on {
                ContrastTarget::Fused => slot_contrastive_loss_var(&out.fused, tau)?,
                ContrastTarget::Initial => slot_contrastive_loss_var(&out.initial, tau)?,
                ContrastTarget::Both => slot_contrastive_loss_var(&out.fused, tau)?
                    .add(slot_contrastive_loss_var(&out.initial, tau)?),
            })
        } else {
            None
        };
        let slot_recon = self.slot_recon_loss(out);
        let mut total = match contrast {
            Some(c) => recon.add(c.scale(self.cfg.loss.alpha)),
            None => recon,
        };
        if let Some(s) = slot_recon {
            total = total.add(s.scale(self.cfg.loss.slot_recon));
        }
        Ok(LossTerms {
            total,
            recon,
            contrast,
            slot_recon,
        })
    }

    /// Mean squared error between fused and (fixed) initial slots on the
    /// masked frames. `None` when the term is off or nothing was masked.
    fn slot_recon_loss<'g>(&self, out: &ForwardOut<'g>) -> Option<Var<'g>> {
        if self.cfg.loss.slot_recon <= 0.0 || self.tst.is_none() {
            return None;
        }
        let masked: Vec<usize> = (0..out.fused.len())
            .filter(|&t| !out.frame_mask.kept[t])
            .collect();
        let first = out.fused.first()?;
        let g = first.graph();
        let mut acc: Option<Var<'g>> = None;
        for &t in &masked {
            let target = g.constant((*out.initial[t].value()).clone());
            let e = out.fused[t].sub(target).square().mean();
            acc = Some(match acc {
                Some(a) => a.add(e),
                None => e,
            });
        }
        acc.map(|a| a.scale(1.0 / masked.len() as f64))
    }

    /// Uncorrupted forward pass; returns soft masks and fused slots.
    pub fn infer(
        &self,
        params: &ParamStore,
        features: &[Mat],
        rng: &mut ChaCha8Rng,
    ) -> Result<(MaskSet, SlotSequence, Vec<Mat>)> {
        let g = Graph::with_params(params);
        let out = self.forward(&g, features, &Corruption::none(features.len()), rng)?;
        let soft = out.masks.iter().map(|m| (*m.value()).clone()).collect();
        let slots = out.fused.iter().map(|s| (*s.value()).clone()).collect();
        let recon = out.recon.iter().map(|r| (*r.value()).clone()).collect();
        Ok((
            MaskSet::new(soft, self.grid, self.cfg.model.patch_size)?,
            SlotSequence::new(slots, Stage::Fused),
            recon,
        ))
    }
}

/// Encoder settings for the run, with the external feature file for
/// `clip_id` when features are precomputed.
pub fn encoder_config(cfg: &RunConfig, clip_id: Option<&str>) -> EncoderConfig {
    let m = &cfg.model;
    match m.encoder {
        EncoderMode::Pixel => EncoderConfig::PixelPatch {
            patch_size: m.patch_size,
            projection_dim: m.projection_dim,
            projection_seed: m.projection_seed,
        },
        EncoderMode::External => EncoderConfig::External {
            path: std::path::Path::new(&cfg.data.features_dir)
                .join(format!("{}.sbft", clip_id.unwrap_or("clip"))),
            dim: m.external_dim,
            patch_size: m.patch_size,
        },
    }
}

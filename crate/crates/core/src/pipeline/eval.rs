use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoders::MaskSet;
use crate::error::{Error, Result};
use crate::features::VideoClip;
use crate::metrics::{evaluate_clip, ClipMetrics, LabelMaskVideo, Matching, MetricsReport, METRIC_NAMES};
use crate::nn::ParamStore;
use crate::slot_attention::{SlotSequence, Stage};
use crate::tensor::Mat;
use crate::tst::TemporalMask;

use super::config::{EvalSection, InitMode};
use super::model::SlotBert;
use super::train::ClipStore;

pub const EVAL_STREAM: u64 = 2;

/// RNG for evaluation repeat `r`; each repeat gets its own slot-init noise.
pub fn eval_rng(seed: u64, repeat: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1_000_003 * (repeat as u64 + 1)));
    rng.set_stream(EVAL_STREAM);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation, so a single value has `std = 0`.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerVideo {
    pub clip_id: String,
    pub frames: usize,
    /// Means over repeats of each metric defined for the clip.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub repeats: usize,
    pub matching: Matching,
    pub metrics: BTreeMap<String, MeanStd>,
    pub videos: usize,
    pub frames: usize,
    pub per_video: Vec<PerVideo>,
}

impl EvalReport {
    /// Builds the report from per-repeat, per-clip scores.
    pub fn from_runs(config_hash: &str, matching: Matching, runs: Vec<Vec<ClipMetrics>>) -> Self {
        let repeats = runs.len();
        let reports: Vec<MetricsReport> = runs.into_iter().map(MetricsReport::aggregate).collect();
        let mut metrics = BTreeMap::new();
        for name in METRIC_NAMES {
            let vals: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.get(name))
                .filter(|v| v.is_finite())
                .collect();
            if !vals.is_empty() {
                metrics.insert(name.to_string(), MeanStd::of(&vals));
            }
        }
        let per_video: Vec<PerVideo> = reports
            .first()
            .map(|first| {
                (0..first.per_video.len())
                    .map(|i| {
                        let mut m = BTreeMap::new();
                        for name in METRIC_NAMES {
                            let vals: Vec<f64> = reports
                                .iter()
                                .filter_map(|r| r.per_video[i].get(name))
                                .collect();
                            if !vals.is_empty() {
                                m.insert(name.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
                            }
                        }
                        PerVideo {
                            clip_id: first.per_video[i].clip_id.clone(),
                            frames: first.per_video[i].frames,
                            metrics: m,
                        }
                    })
                    .collect()
            })
            .unwrap_or_default();
        let videos = per_video.len();
        let frames = per_video.iter().map(|p: &PerVideo| p.frames).sum();
        Self {
            config_hash: config_hash.to_string(),
            repeats,
            matching,
            metrics,
            videos,
            frames,
            per_video,
        }
    }

    pub fn mean(&self, name: &str) -> f64 {
        self.metrics.get(name).map_or(f64::NAN, |m| m.mean)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Masks for a whole clip: one pass when it fits in the training window,
/// otherwise sliding-window inference.
pub fn predict_masks(
    model: &SlotBert,
    params: &ParamStore,
    clip: &VideoClip,
    eval: &EvalSection,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSet> {
    let feats = model.encode(clip)?;
    if feats.t() <= model.window() {
        Ok(model.infer(params, &feats.frames, rng)?.0)
    } else {
        Ok(infer_long(model, params, &feats.frames, eval.window, eval.stride, eval.init_mode, rng)?.masks)
    }
}

pub fn ground_truth(clip: &VideoClip) -> Result<LabelMaskVideo> {
    let labels = clip.gt_masks.clone().ok_or_else(|| {
        Error::InvalidArgument(format!("clip {} has no ground-truth masks", clip.clip_id))
    })?;
    LabelMaskVideo::new(clip.t, clip.height, clip.width, labels)
}

/// Runs `eval.repeats` inference passes over every clip and scores them.
pub fn evaluate(
    model: &SlotBert,
    params: &ParamStore,
    clips: &ClipStore,
    eval: &EvalSection,
    config_hash: &str,
) -> Result<EvalReport> {
    let n = if eval.max_clips > 0 {
        clips.len().min(eval.max_clips)
    } else {
        clips.len()
    };
    let metrics_cfg = crate::metrics::MetricsConfig {
        matching: eval.matching,
        ari_pooling: eval.ari_pooling,
    };
    let mut runs = Vec::with_capacity(eval.repeats);
    for r in 0..eval.repeats {
        let mut rng = eval_rng(model.cfg.optim.seed, r);
        let mut per_clip = Vec::with_capacity(n);
        for i in 0..n {
            let clip = clips.get(i);
            let gt = ground_truth(&clip)?;
            let masks = predict_masks(model, params, &clip, eval, &mut rng)?;
            per_clip.push(evaluate_clip(&clip.clip_id, &masks, &gt, &metrics_cfg)?);
        }
        runs.push(per_clip);
    }
    Ok(EvalReport::from_runs(config_hash, eval.matching, runs))
}

/// Window start positions: every `stride` frames, plus a final window
/// flush with the end of the clip.
pub fn window_starts(t_long: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = t_long - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("at least one window") != last {
        starts.push(last);
    }
    starts
}

/// For each frame, the index of the window in which it sits closest to
/// the centre (ties go to the earlier window).
pub fn assign_frames(t_long: usize, window: usize, starts: &[usize]) -> Vec<usize> {
    (0..t_long)
        .map(|f| {
            let mut best: Option<(usize, usize)> = None;
            for (wi, &s) in starts.iter().enumerate() {
                if f < s || f >= s + window {
                    continue;
                }
                // Twice the distance to the centre, to stay in integers.
                let d = (2 * f).abs_diff(2 * s + window - 1);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((wi, d));
                }
            }
            best.expect("every frame is covered").0
        })
        .collect()
}

pub struct LongInference {
    pub masks: MaskSet,
    /// Fused slots for each frame, from the window that produced its mask.
    pub slots: SlotSequence,
    /// Start of the window each frame's output came from.
    pub source_window: Vec<usize>,
}

/// Sliding-window inference over a clip longer than the training window.
///
/// Initial slots are computed once per frame and carried between windows.
/// A frame entering a window is seeded either by the previous frame's
/// slots (`Rnn`) or by the TST's next-slot prediction from the `W - 1`
/// frames before it (`Predict`).
pub fn infer_long(
    model: &SlotBert,
    params: &ParamStore,
    features: &[Mat],
    window: usize,
    stride: usize,
    init_mode: InitMode,
    rng: &mut ChaCha8Rng,
) -> Result<LongInference> {
    if window != model.window() {
        return Err(Error::InvalidArgument(format!(
            "window {window} differs from the trained window {}",
            model.window()
        )));
    }
    let t_long = features.len();
    if t_long < window {
        return Err(Error::InvalidArgument(format!(
            "clip of {t_long} frames is shorter than the window {window}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let tst = match (init_mode, &model.tst) {
        (InitMode::Predict, None) => {
            return Err(Error::InvalidArgument(
                "next-slot initialization needs the TST".into(),
            ))
        }
        (_, t) => t.as_ref(),
    };
    let starts = window_starts(t_long, window, stride);
    let owner = assign_frames(t_long, window, &starts);
    let sa = &model.sa;
    let mut initial: Vec<Mat> = Vec::with_capacity(t_long);
    let mut soft: Vec<Option<Mat>> = vec![None; t_long];
    let mut fused_out: Vec<Option<Mat>> = vec![None; t_long];
    for (wi, &s) in starts.iter().enumerate() {
        while initial.len() < s + window {
            let f = initial.len();
            let g = Graph::with_params(params);
            let inputs = sa.prepare(g.constant(features[f].clone()))?;
            let (init, iters): (Var<'_>, usize) = if f == 0 {
                (sa.init_slots(&g, rng), sa.cfg.n_first)
            } else if f < window || init_mode == InitMode::Rnn {
                (g.constant(initial[f - 1].clone()), sa.cfg.n_later)
            } else {
                let tst = tst.expect("checked above");
                let hist: Vec<Var<'_>> = initial[f + 1 - window..f]
                    .iter()
                    .map(|m| g.constant(m.clone()))
                    .collect();
                (tst.predict_next(&hist)?, sa.cfg.n_later)
            };
            let (slots, _, _) = sa.run(inputs, init, iters)?;
            initial.push((*slots.value()).clone());
        }
        let g = Graph::with_params(params);
        let vars: Vec<Var<'_>> = initial[s..s + window]
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect();
        let fused = model.fuse(&vars, &TemporalMask::all_kept(window))?;
        for (j, fv) in fused.iter().enumerate() {
            let f = s + j;
            if owner[f] != wi {
                continue;
            }
            let (_, m) = model.decoder.decode(*fv)?;
            soft[f] = Some((*m.value()).clone());
            fused_out[f] = Some((*fv.value()).clone());
        }
    }
    let soft: Vec<Mat> = soft.into_iter().map(|m| m.expect("every frame assigned")).collect();
    let slots: Vec<Mat> = fused_out.into_iter().map(|m| m.expect("every frame assigned")).collect();
    Ok(LongInference {
        masks: MaskSet::new(soft, model.grid, model.cfg.model.patch_size)?,
        slots: SlotSequence::new(slots, Stage::Fused),
        source_window: owner.iter().map(|&w| starts[w]).collect(),
    })
}

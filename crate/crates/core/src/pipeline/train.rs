use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::RawClip;
use crate::error::{Error, Result};
use crate::features::VideoClip;
use crate::nn::ParamStore;
use crate::tensor::Mat;

use super::checkpoint;
use super::config::RunConfig;
use super::eval::{evaluate, EvalReport};
use super::model::SlotBert;
use super::optim::{clip_global_norm, learning_rate, Adam};

pub const TRAIN_STREAM: u64 = 1;

/// Clips held either as 8-bit data or already decoded.
#[derive(Clone, Debug)]
pub enum ClipStore {
    Raw(Vec<RawClip>),
    Video(Vec<VideoClip>),
}

impl ClipStore {
    pub fn len(&self) -> usize {
        match self {
            ClipStore::Raw(v) => v.len(),
            ClipStore::Video(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> VideoClip {
        match self {
            ClipStore::Raw(v) => v[i].to_video_clip(),
            ClipStore::Video(v) => v[i].clone(),
        }
    }

    pub fn clip_id(&self, i: usize) -> &str {
        match self {
            ClipStore::Raw(v) => &v[i].clip_id,
            ClipStore::Video(v) => &v[i].clip_id,
        }
    }

    pub fn take(&self, n: usize) -> ClipStore {
        match self {
            ClipStore::Raw(v) => ClipStore::Raw(v.iter().take(n).cloned().collect()),
            ClipStore::Video(v) => ClipStore::Video(v.iter().take(n).cloned().collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub contrast: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoints, the step log and the final report go here.
    pub out_dir: Option<&'a Path>,
    /// Held-out clips evaluated after the last step.
    pub eval_clips: Option<&'a ClipStore>,
}

pub struct TrainResult {
    pub model: SlotBert,
    pub params: ParamStore,
    pub log: Vec<StepLog>,
    pub rng: ChaCha8Rng,
    pub report: Option<EvalReport>,
}

pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    rng
}

/// The `train_frames`-long training window of a clip.
fn training_window(cfg: &RunConfig, clip: VideoClip, rng: &mut ChaCha8Rng) -> Result<VideoClip> {
    let w = cfg.optim.train_frames;
    if clip.t < w {
        return Err(Error::InvalidArgument(format!(
            "clip {} has {} frames, training needs {w}",
            clip.clip_id, clip.t
        )));
    }
    let start = if cfg.optim.random_crop {
        rng.random_range(0..=clip.t - w)
    } else {
        0
    };
    Ok(if start == 0 && clip.t == w {
        clip
    } else {
        clip.window(start, w)
    })
}

/// Loss value and parameter gradients for one clip.
pub fn clip_gradients(
    model: &SlotBert,
    params: &ParamStore,
    features: &[Mat],
    rng: &mut ChaCha8Rng,
) -> Result<(StepLog, Vec<Option<Mat>>)> {
    let g = Graph::with_params(params);
    let corruption = model.sample_corruption(features.len(), rng)?;
    let out = model.forward(&g, features, &corruption, rng)?;
    let terms = model.loss(&out)?;
    let log = StepLog {
        step: 0,
        total: terms.total.value().item(),
        recon: terms.recon.value().item(),
        contrast: terms.contrast.map(|c| c.value().item()),
        grad_norm: 0.0,
        lr: 0.0,
    };
    let mut grads: Vec<Option<Mat>> = vec![None; params.len()];
    if log.total.is_finite() {
        for (pid, grad) in g.backward(terms.total).into_param_grads() {
            grads[pid.0] = Some(grad);
        }
    }
    Ok((log, grads))
}

pub fn train(cfg: &RunConfig, clips: &ClipStore, opts: TrainOptions<'_>) -> Result<TrainResult> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no training clips".into()));
    }
    let (model, mut params) = SlotBert::build(cfg)?;
    let mut rng = training_rng(cfg.optim.seed);
    let mut adam = Adam::new(&params, cfg.optim.weight_decay);
    adam.decoupled = cfg.optim.decoupled_decay;
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.optim.steps);
    let mut log_file = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let b = cfg.optim.batch_size;
    for step in 0..cfg.optim.steps {
        let mut batch = Vec::with_capacity(b);
        while batch.len() < b {
            if order.is_empty() {
                order = (0..clips.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; params.len()];
        let mut entry = StepLog {
            step,
            total: 0.0,
            recon: 0.0,
            contrast: None,
            grad_norm: 0.0,
            lr: learning_rate(cfg.optim.lr, step, cfg.optim.warmup_steps),
        };
        for &ci in &batch {
            let clip = training_window(cfg, clips.get(ci), &mut rng)?;
            let feats = model.encode(&clip)?;
            let (l, g) = clip_gradients(&model, &params, &feats.frames, &mut rng)?;
            if !l.total.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| clips.clip_id(i)).collect();
                if let Some(dir) = opts.out_dir {
                    let dump = serde_json::json!({
                        "step": step,
                        "clips": ids,
                        "recon": l.recon,
                        "contrast": l.contrast,
                    });
                    let p = dir.join("nonfinite_batch.json");
                    fs::write(&p, dump.to_string()).map_err(|e| Error::io(&p, e))?;
                }
                return Err(Error::NonFinite {
                    context: format!("training loss at step {step}, batch {ids:?}"),
                });
            }
            let s = 1.0 / b as f64;
            entry.total += s * l.total;
            entry.recon += s * l.recon;
            if let Some(c) = l.contrast {
                *entry.contrast.get_or_insert(0.0) += s * c;
            }
            for (acc, g) in grads.iter_mut().zip(g) {
                if let Some(mut g) = g {
                    g.scale_assign(s);
                    match acc {
                        Some(a) => a.add_assign(&g),
                        None => *acc = Some(g),
                    }
                }
            }
        }
        entry.grad_norm = clip_global_norm(&mut grads, cfg.optim.grad_clip);
        adam.step(&mut params, &grads, entry.lr);
        if cfg.optim.log_every > 0 && (step % cfg.optim.log_every == 0 || step + 1 == cfg.optim.steps) {
            log::info!(
                "step {step}: total {:.6} recon {:.6} contrast {:?} |g| {:.4}",
                entry.total,
                entry.recon,
                entry.contrast,
                entry.grad_norm
            );
        }
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry).expect("log serializes"))
                .map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(entry);
        if let (Some(dir), true) = (
            opts.out_dir,
            cfg.optim.checkpoint_every > 0 && (step + 1) % cfg.optim.checkpoint_every == 0,
        ) {
            checkpoint::save(
                &dir.join(format!("checkpoint_step{}.sbck", step + 1)),
                cfg,
                &params,
                step as u64 + 1,
                &rng,
                serde_json::json!({ "loss": log.last().map(|l| l.total) }),
            )?;
        }
    }
    let report = match opts.eval_clips {
        Some(c) if !c.is_empty() => Some(evaluate(&model, &params, c, &cfg.eval, &cfg.hash())?),
        _ => None,
    };
    if let Some(dir) = opts.out_dir {
        let metrics = serde_json::json!({
            "final_loss": log.last().map(|l| l.total),
            "eval": report.as_ref().map(|r| &r.metrics),
        });
        checkpoint::save(
            &dir.join("checkpoint.sbck"),
            cfg,
            &params,
            cfg.optim.steps as u64,
            &rng,
            metrics,
        )?;
        if let Some(r) = &report {
            r.write(&dir.join("eval_report.json"))?;
        }
    }
    Ok(TrainResult {
        model,
        params,
        log,
        rng,
        report,
    })
}

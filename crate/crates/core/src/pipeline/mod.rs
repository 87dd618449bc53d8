//! Training, evaluation, checkpoints and mask export for the full model.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod export;
pub mod model;
pub mod optim;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use config::{InitMode, MaskMode, RunConfig, Variant};
pub use eval::{evaluate, infer_long, EvalReport, LongInference, MeanStd};
pub use export::{export_masks, read_export, ExportManifest, ExportOptions};
pub use model::SlotBert;
pub use train::{train, ClipStore, StepLog, TrainOptions, TrainResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config_hash: String,
    pub final_loss: f64,
    pub metrics: BTreeMap<String, MeanStd>,
}

/// Trains and evaluates each variant under `out_dir/<variant>/`, then
/// writes `out_dir/summary.json`.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    train_clips: &ClipStore,
    eval_clips: &ClipStore,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = v.apply(base);
        let dir = out_dir.join(v.name());
        log::info!("ablation variant {}", v.name());
        let res = train(
            &cfg,
            train_clips,
            TrainOptions {
                out_dir: Some(&dir),
                eval_clips: Some(eval_clips),
            },
        )?;
        let report = res
            .report
            .ok_or_else(|| Error::InvalidArgument("ablation needs evaluation clips".into()))?;
        rows.push(AblationRow {
            variant: v.name().to_string(),
            config_hash: cfg.hash(),
            final_loss: res.log.last().map_or(f64::NAN, |l| l.total),
            metrics: report.metrics,
        });
    }
    let p = out_dir.join("summary.json");
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(&p, serde_json::to_string_pretty(&rows).expect("summary serializes"))
        .map_err(|e| Error::io(&p, e))?;
    Ok(rows)
}

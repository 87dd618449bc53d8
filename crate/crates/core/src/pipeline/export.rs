//! Writing predicted masks to disk.
//!
//! Layout: `frames/NNNN.png` with 8-bit labels (0 unused, slot `k` stored as
//! `k + 1`), optional `soft_masks.sbft` holding the `(T, N, K)` slot
//! probabilities per patch, and `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, FeatureBlock};
use crate::data::{decode_png, encode_png};
use crate::decoders::MaskSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub clip_id: String,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub window: usize,
    pub stride: usize,
    pub init_mode: String,
    pub frames: Vec<String>,
    pub soft_masks: Option<String>,
}

pub struct ExportOptions {
    pub window: usize,
    pub stride: usize,
    pub init_mode: String,
    pub soft: bool,
}

pub fn export_masks(dir: &Path, clip_id: &str, masks: &MaskSet, opts: &ExportOptions) -> Result<ExportManifest> {
    let k = masks.k();
    if k > 255 {
        return Err(Error::InvalidArgument(format!(
            "{k} slots do not fit in 8-bit label images"
        )));
    }
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let (h, w) = (masks.height(), masks.width());
    let mut frames = Vec::with_capacity(masks.t());
    for t in 0..masks.t() {
        let labels: Vec<u8> = masks.pixel_labels(t).iter().map(|&s| s as u8 + 1).collect();
        let name = format!("frames/{t:04}.png");
        let p = dir.join(&name);
        fs::write(&p, encode_png(&labels, w, h, png::ColorType::Grayscale)?)
            .map_err(|e| Error::io(&p, e))?;
        frames.push(name);
    }
    let soft_masks = if opts.soft {
        let n = masks.grid.0 * masks.grid.1;
        let mut data = Vec::with_capacity(masks.t() * n * k);
        for m in &masks.soft {
            // Stored as (N, K): the transpose of the slot-major mask.
            for i in 0..n {
                for s in 0..k {
                    data.push(m.get(s, i) as f32);
                }
            }
        }
        let block = FeatureBlock::new(masks.t(), n, k, data)?;
        container::write_block(&dir.join("soft_masks.sbft"), &block, clip_id)?;
        Some("soft_masks.sbft".to_string())
    } else {
        None
    };
    let manifest = ExportManifest {
        clip_id: clip_id.to_string(),
        k,
        height: h,
        width: w,
        grid: masks.grid,
        patch_size: masks.patch_size,
        window: opts.window,
        stride: opts.stride,
        init_mode: opts.init_mode.clone(),
        frames,
        soft_masks,
    };
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub struct ExportedMasks {
    pub manifest: ExportManifest,
    /// Per frame, slot index of every pixel.
    pub labels: Vec<Vec<usize>>,
    pub soft: Option<FeatureBlock>,
}

pub fn read_export(dir: &Path) -> Result<ExportedMasks> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: ExportManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
    let mut labels = Vec::with_capacity(manifest.frames.len());
    for name in &manifest.frames {
        let fp = dir.join(name);
        let bytes = fs::read(&fp).map_err(|e| Error::io(&fp, e))?;
        let (data, w, h, ch) = decode_png(&fp, &bytes)?;
        if (w, h, ch) != (manifest.width, manifest.height, 1) {
            return Err(Error::format(&fp, "label image size does not match the manifest"));
        }
        let frame = data
            .iter()
            .map(|&v| {
                if v == 0 || v as usize > manifest.k {
                    Err(Error::format(&fp, format!("label {v} out of range")))
                } else {
                    Ok(v as usize - 1)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        labels.push(frame);
    }
    let soft = match &manifest.soft_masks {
        Some(name) => Some(container::read_block(&dir.join(name))?.0),
        None => None,
    };
    Ok(ExportedMasks {
        manifest,
        labels,
        soft,
    })
}

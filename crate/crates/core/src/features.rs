//! Video clips and the patch-level feature targets the model reconstructs.
//!
//! The default encoder flattens non-overlapping `P x P` pixel patches in
//! (row, column, channel) order, optionally followed by a frozen random
//! projection. Features computed elsewhere (for example by a pretrained
//! backbone) can be loaded through the SBFT container instead.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, FeatureBlock};
use crate::error::{Error, Result};
use crate::nn::rng_normal_mat;
use crate::tensor::Mat;

/// A short video with optional instance labels.
///
/// `frames` is `T x H x W x C` row-major in `[0, 1]`; `gt_masks` is
/// `T x H x W` with 0 as background.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: Vec<f64>,
    pub frame_rate_hint: Option<f64>,
    pub gt_masks: Option<Vec<u32>>,
}

impl VideoClip {
    pub fn new(
        clip_id: impl Into<String>,
        (t, height, width, channels): (usize, usize, usize, usize),
        frames: Vec<f64>,
        gt_masks: Option<Vec<u32>>,
    ) -> Result<Self> {
        if t == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "clip dimensions must be positive, got T={t} H={height} W={width} C={channels}"
            )));
        }
        if frames.len() != t * height * width * channels {
            return Err(Error::shape(
                "clip frames",
                t * height * width * channels,
                frames.len(),
            ));
        }
        if let Some(m) = &gt_masks {
            if m.len() != t * height * width {
                return Err(Error::shape("clip masks", t * height * width, m.len()));
            }
        }
        Ok(Self {
            clip_id: clip_id.into(),
            t,
            height,
            width,
            channels,
            frames,
            frame_rate_hint: None,
            gt_masks,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let sz = self.height * self.width * self.channels;
        &self.frames[t * sz..(t + 1) * sz]
    }

    pub fn mask(&self, t: usize) -> Option<&[u32]> {
        let sz = self.height * self.width;
        self.gt_masks.as_ref().map(|m| &m[t * sz..(t + 1) * sz])
    }

    /// The first `len` frames (and masks).
    pub fn truncated(&self, len: usize) -> VideoClip {
        self.window(0, len)
    }

    pub fn window(&self, start: usize, len: usize) -> VideoClip {
        assert!(start + len <= self.t && len >= 1, "window out of range");
        let fsz = self.height * self.width * self.channels;
        let msz = self.height * self.width;
        VideoClip {
            clip_id: self.clip_id.clone(),
            t: len,
            height: self.height,
            width: self.width,
            channels: self.channels,
            frames: self.frames[start * fsz..(start + len) * fsz].to_vec(),
            frame_rate_hint: self.frame_rate_hint,
            gt_masks: self
                .gt_masks
                .as_ref()
                .map(|m| m[start * msz..(start + len) * msz].to_vec()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    PixelPatch,
    External,
}

/// Per-frame patch features, `T` matrices of shape `N x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<Mat>,
    pub grid: (usize, usize),
    pub source: FeatureSource,
}

impl FeatureSequence {
    pub fn new(frames: Vec<Mat>, grid: (usize, usize), source: FeatureSource) -> Result<Self> {
        let n = grid.0 * grid.1;
        let d = frames.first().map_or(0, Mat::cols);
        if frames.is_empty() {
            return Err(Error::InvalidArgument("feature sequence has no frames".into()));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != (n, d) {
                return Err(Error::shape(
                    format!("features of frame {t}"),
                    format!("({n}, {d})"),
                    format!("{:?}", f.shape()),
                ));
            }
            if !f.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("features of frame {t}"),
                });
            }
        }
        Ok(Self {
            frames,
            grid,
            source,
        })
    }

    pub fn t(&self) -> usize {
        self.frames.len()
    }

    pub fn n(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn d(&self) -> usize {
        self.frames[0].cols()
    }

    pub fn window(&self, start: usize, len: usize) -> FeatureSequence {
        FeatureSequence {
            frames: self.frames[start..start + len].to_vec(),
            grid: self.grid,
            source: self.source,
        }
    }

    pub fn to_block(&self) -> FeatureBlock {
        let data = self
            .frames
            .iter()
            .flat_map(|m| m.data().iter().map(|&v| v as f32))
            .collect();
        FeatureBlock {
            t: self.t(),
            n: self.n(),
            d: self.d(),
            data,
        }
    }
}

/// Splits an `H x W x C` frame into `N = (H/P)(W/P)` flattened patches.
///
/// Patch `n` covers grid cell `(n / w, n % w)` with `w = W/P`; within a
/// patch values are ordered by (row, column, channel).
pub fn patchify(
    frame: &[f64],
    (height, width, channels): (usize, usize, usize),
    patch: usize,
) -> Result<Mat> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::NotDivisible {
            height,
            width,
            patch,
        });
    }
    if frame.len() != height * width * channels {
        return Err(Error::shape("frame", height * width * channels, frame.len()));
    }
    let (gh, gw) = (height / patch, width / patch);
    let pd = patch * patch * channels;
    let mut out = Mat::zeros(gh * gw, pd);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for py in 0..patch {
                let y = gy * patch + py;
                let src = (y * width + gx * patch) * channels;
                let dst = py * patch * channels;
                row[dst..dst + patch * channels]
                    .copy_from_slice(&frame[src..src + patch * channels]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Mat,
    (height, width, channels): (usize, usize, usize),
    patch: usize,
) -> Result<Vec<f64>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::NotDivisible {
            height,
            width,
            patch,
        });
    }
    let (gh, gw) = (height / patch, width / patch);
    let expected = (gh * gw, patch * patch * channels);
    if patches.shape() != expected {
        return Err(Error::shape(
            "patch grid",
            format!("{expected:?}"),
            format!("{:?}", patches.shape()),
        ));
    }
    let mut frame = vec![0.0; height * width * channels];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row(gy * gw + gx);
            for py in 0..patch {
                let y = gy * patch + py;
                let dst = (y * width + gx * patch) * channels;
                let src = py * patch * channels;
                frame[dst..dst + patch * channels]
                    .copy_from_slice(&row[src..src + patch * channels]);
            }
        }
    }
    Ok(frame)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EncoderConfig {
    /// Raw patches, optionally through a frozen Gaussian projection to
    /// `projection_dim` columns (0 disables it).
    PixelPatch {
        patch_size: usize,
        projection_dim: usize,
        projection_seed: u64,
    },
    /// Precomputed features in the SBFT container.
    External { path: PathBuf, dim: usize, patch_size: usize },
}

impl EncoderConfig {
    pub fn pixel(patch_size: usize) -> Self {
        EncoderConfig::PixelPatch {
            patch_size,
            projection_dim: 0,
            projection_seed: 0,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self {
            EncoderConfig::PixelPatch { patch_size, .. }
            | EncoderConfig::External { patch_size, .. } => *patch_size,
        }
    }

    /// Feature width for a clip with `channels` colour channels.
    pub fn feature_dim(&self, channels: usize) -> usize {
        match self {
            EncoderConfig::PixelPatch {
                patch_size,
                projection_dim,
                ..
            } => {
                if *projection_dim > 0 {
                    *projection_dim
                } else {
                    patch_size * patch_size * channels
                }
            }
            EncoderConfig::External { dim, .. } => *dim,
        }
    }
}

/// Deterministic projection used by the pixel-patch encoder, scaled so a
/// unit-variance input keeps unit variance.
pub fn projection_matrix(in_dim: usize, out_dim: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = rng_normal_mat(&mut rng, in_dim, out_dim);
    m.scale_assign(1.0 / (in_dim as f64).sqrt());
    m
}

pub fn encode_frames(clip: &VideoClip, encoder: &EncoderConfig) -> Result<FeatureSequence> {
    let p = encoder.patch_size();
    if p == 0 || clip.height % p != 0 || clip.width % p != 0 {
        return Err(Error::NotDivisible {
            height: clip.height,
            width: clip.width,
            patch: p,
        });
    }
    let grid = (clip.height / p, clip.width / p);
    match encoder {
        EncoderConfig::PixelPatch {
            projection_dim,
            projection_seed,
            ..
        } => {
            let dims = (clip.height, clip.width, clip.channels);
            let proj = (*projection_dim > 0).then(|| {
                projection_matrix(p * p * clip.channels, *projection_dim, *projection_seed)
            });
            let frames = (0..clip.t)
                .map(|t| {
                    let patches = patchify(clip.frame(t), dims, p)?;
                    Ok(match &proj {
                        Some(w) => patches.matmul(w),
                        None => patches,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            FeatureSequence::new(frames, grid, FeatureSource::PixelPatch)
        }
        EncoderConfig::External { path, dim, .. } => {
            load_external_features(path, (clip.t, grid.0 * grid.1, *dim), grid)
        }
    }
}

/// Loads a SBFT block, checking it against `(T, N, D)`.
pub fn load_external_features(
    path: &Path,
    expected: (usize, usize, usize),
    grid: (usize, usize),
) -> Result<FeatureSequence> {
    let (block, _) = container::read_block(path)?;
    if block.shape() != expected {
        return Err(Error::shape(
            format!("external features {}", path.display()),
            format!("(T, N, D) = {expected:?}"),
            format!("{:?}", block.shape()),
        ));
    }
    if grid.0 * grid.1 != block.n {
        return Err(Error::shape("feature grid", block.n, grid.0 * grid.1));
    }
    let (n, d) = (block.n, block.d);
    let frames = block
        .data
        .chunks_exact(n * d)
        .map(|c| Mat::from_vec(n, d, c.iter().map(|&v| v as f64).collect()))
        .collect();
    FeatureSequence::new(frames, grid, FeatureSource::External)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_frame_gives_zero_patches() {
        let p = patchify(&[0.0; 16], (4, 4, 1), 2).unwrap();
        assert_eq!(p.shape(), (4, 4));
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_is_raster_order() {
        let p = patchify(&[1.0, 2.0, 3.0, 4.0], (2, 2, 1), 2).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patch_index_follows_grid_cell() {
        // 4x4 single channel, value = 10*row + col.
        let frame: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let p = patchify(&frame, (4, 4, 1), 2).unwrap();
        // patch 1 is grid cell (0, 1): rows 0-1, cols 2-3
        assert_eq!(p.row(1), &[2.0, 3.0, 12.0, 13.0]);
        // patch 2 is grid cell (1, 0)
        assert_eq!(p.row(2), &[20.0, 21.0, 30.0, 31.0]);
    }

    #[test]
    fn not_divisible_names_dimensions() {
        let err = patchify(&[0.0; 30], (5, 6, 1), 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains('6') && msg.contains('2'), "{msg}");
    }

    proptest! {
        #[test]
        fn patchify_round_trips(vals in proptest::collection::vec(0.0f64..1.0, 48)) {
            let p = patchify(&vals, (4, 4, 3), 2).unwrap();
            let back = unpatchify(&p, (4, 4, 3), 2).unwrap();
            prop_assert_eq!(back, vals);
        }
    }

    fn gray_clip(t: usize, h: usize, w: usize) -> VideoClip {
        VideoClip::new("gray", (t, h, w, 3), vec![0.5; t * h * w * 3], None).unwrap()
    }

    #[test]
    fn constant_clip_has_identical_rows() {
        let f = encode_frames(&gray_clip(2, 16, 16), &EncoderConfig::pixel(8)).unwrap();
        let first = f.frames[0].row(0).to_vec();
        for m in &f.frames {
            for r in 0..m.rows() {
                assert_eq!(m.row(r), first.as_slice());
            }
        }
    }

    #[test]
    fn default_shapes() {
        let f = encode_frames(&gray_clip(5, 64, 64), &EncoderConfig::pixel(8)).unwrap();
        assert_eq!((f.t(), f.n(), f.d()), (5, 64, 192));
        assert_eq!(f.grid, (8, 8));
    }

    #[test]
    fn projection_is_deterministic() {
        let clip = VideoClip::new(
            "r",
            (2, 8, 8, 3),
            (0..384).map(|i| (i % 7) as f64 / 7.0).collect(),
            None,
        )
        .unwrap();
        let enc = EncoderConfig::PixelPatch {
            patch_size: 4,
            projection_dim: 16,
            projection_seed: 9,
        };
        let a = encode_frames(&clip, &enc).unwrap();
        let b = encode_frames(&clip, &enc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.d(), 16);
    }

    #[test]
    fn external_shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sbft");
        let block = FeatureBlock::new(5, 63, 192, vec![0.0; 5 * 63 * 192]).unwrap();
        container::write_block(&path, &block, "c").unwrap();
        let enc = EncoderConfig::External {
            path: path.clone(),
            dim: 192,
            patch_size: 8,
        };
        let err = encode_frames(&gray_clip(5, 64, 64), &enc).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(5, 64, 192)"), "{msg}");
    }

    #[test]
    fn external_values_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sbft");
        let data: Vec<f32> = (0..2 * 4 * 3).map(|i| i as f32 * 0.25 - 1.0).collect();
        let block = FeatureBlock::new(2, 4, 3, data.clone()).unwrap();
        container::write_block(&path, &block, "c").unwrap();
        let f = load_external_features(&path, (2, 4, 3), (2, 2)).unwrap();
        assert_eq!(f.source, FeatureSource::External);
        assert_eq!(f.to_block().data, data);
    }
}

//! Synthetic multi-sprite videos with instance masks, and their on-disk
//! dataset layout.
//!
//! ```text
//! DIR/manifest.json            spec echo, clip list, sha256 per file
//! DIR/clips/NNNN/frames/NNNN.png   RGB8
//! DIR/clips/NNNN/masks/NNNN.png    gray8 instance ids, 0 = background
//! DIR/clips/NNNN/meta.json         sprite trajectories
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Solid,
    DriftingGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteSpec {
    pub num_videos: usize,
    /// Extra clips generated after the training clips and marked held out.
    #[serde(default)]
    pub eval_videos: usize,
    pub frames_per_clip: usize,
    pub image_size: (usize, usize),
    pub sprite_count: (usize, usize),
    pub shapes: Vec<Shape>,
    pub size_range: (usize, usize),
    pub velocity_range: (f64, f64),
    pub palette: Vec<[u8; 3]>,
    pub background: Background,
    pub occlusion: bool,
    pub enter_exit: bool,
    pub seed: u64,
}

pub const DEFAULT_PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

impl Default for SpriteSpec {
    fn default() -> Self {
        Self {
            num_videos: 500,
            eval_videos: 50,
            frames_per_clip: 5,
            image_size: (64, 64),
            sprite_count: (2, 3),
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle, Shape::Bar],
            size_range: (12, 20),
            velocity_range: (1.0, 3.0),
            palette: DEFAULT_PALETTE.to_vec(),
            background: Background::Solid,
            occlusion: false,
            enter_exit: false,
            seed: 0,
        }
    }
}

impl SpriteSpec {
    /// Drifting background, occlusion and sprites entering or leaving.
    pub fn hard() -> Self {
        Self {
            background: Background::DriftingGradient,
            occlusion: true,
            enter_exit: true,
            ..Self::default()
        }
    }

    /// Parses and validates a JSON spec.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("sprite spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("sprite spec: {m}")));
        let (h, w) = self.image_size;
        if self.frames_per_clip == 0 || h == 0 || w == 0 {
            return bad("frames and image size must be positive".into());
        }
        let (lo, hi) = self.sprite_count;
        if lo == 0 || lo > hi {
            return bad(format!("sprite_count range ({lo}, {hi}) is invalid"));
        }
        if hi > 255 {
            return bad("at most 255 sprites fit in an 8-bit mask".into());
        }
        let (smin, smax) = self.size_range;
        if smin == 0 || smin > smax || 2 * smax >= h.min(w) {
            return bad(format!(
                "size_range ({smin}, {smax}) must be non-empty and below half the image side"
            ));
        }
        let (vmin, vmax) = self.velocity_range;
        if !(0.0 <= vmin && vmin <= vmax && vmax < smin as f64) {
            return bad(format!(
                "velocity_range ({vmin}, {vmax}) must be ordered and below the smallest sprite size"
            ));
        }
        if self.shapes.is_empty() {
            return bad("no shapes".into());
        }
        if self.palette.len() < hi {
            return bad(format!("palette needs at least {hi} colours"));
        }
        Ok(())
    }

    pub fn total_videos(&self) -> usize {
        self.num_videos + self.eval_videos
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteTrack {
    pub id: u32,
    pub shape: Shape,
    pub size: usize,
    pub color: [u8; 3],
    pub velocity: (f64, f64),
    /// Centre `(y, x)` in pixels for every frame.
    pub centers: Vec<(f64, f64)>,
    pub bounces: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: String,
    pub sprites: Vec<SpriteTrack>,
}

/// A generated clip in 8-bit form.
#[derive(Clone, Debug, PartialEq)]
pub struct RawClip {
    pub clip_id: String,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    /// `T x H x W x 3`.
    pub frames: Vec<u8>,
    /// `T x H x W`.
    pub masks: Vec<u8>,
    pub meta: ClipMeta,
}

impl RawClip {
    pub fn to_video_clip(&self) -> VideoClip {
        let frames = self.frames.iter().map(|&v| v as f64 / 255.0).collect();
        let masks = self.masks.iter().map(|&v| v as u32).collect();
        VideoClip::new(
            self.clip_id.clone(),
            (self.t, self.height, self.width, 3),
            frames,
            Some(masks),
        )
        .expect("raw clip dimensions are consistent")
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn mask(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.masks[t * n..(t + 1) * n]
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:04}")
}

fn covers(shape: Shape, size: usize, dy: f64, dx: f64) -> bool {
    let r = size as f64 / 2.0;
    match shape {
        Shape::Square => dy.abs() <= r && dx.abs() <= r,
        Shape::Circle => dy * dy + dx * dx <= r * r,
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        Shape::Bar => dy.abs() <= r / 3.0 && dx.abs() <= r,
    }
}

/// Pixels covered by a sprite centred at `c` (pixel centres at +0.5).
fn raster(track: &SpriteTrack, c: (f64, f64), h: usize, w: usize) -> Vec<usize> {
    let r = track.size as f64 / 2.0 + 1.0;
    let y0 = ((c.0 - r).floor().max(0.0)) as usize;
    let x0 = ((c.1 - r).floor().max(0.0)) as usize;
    let y1 = ((c.0 + r).ceil().max(0.0) as usize).min(h);
    let x1 = ((c.1 + r).ceil().max(0.0) as usize).min(w);
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if covers(track.shape, track.size, y as f64 + 0.5 - c.0, x as f64 + 0.5 - c.1) {
                out.push(y * w + x);
            }
        }
    }
    out
}

fn background_pixel(spec: &SpriteSpec, phase: (f64, f64), y: usize, x: usize, t: usize) -> [u8; 3] {
    match spec.background {
        Background::Solid => [24, 24, 24],
        Background::DriftingGradient => {
            let (h, w) = spec.image_size;
            let u = (y as f64 / h as f64) + 0.5 * (x as f64 / w as f64);
            let s = (std::f64::consts::TAU * (u + phase.0 + 0.06 * t as f64 * phase.1)).sin();
            let v = 0.5 + 0.5 * s;
            [
                (20.0 + 60.0 * v) as u8,
                (30.0 + 40.0 * (1.0 - v)) as u8,
                (40.0 + 50.0 * v) as u8,
            ]
        }
    }
}

fn simulate(track: &mut SpriteTrack, start: (f64, f64), t: usize, (h, w): (usize, usize)) {
    let r = track.size as f64 / 2.0;
    let (mut y, mut x) = start;
    let (mut vy, mut vx) = track.velocity;
    track.centers.clear();
    for _ in 0..t {
        track.centers.push((y, x));
        y += vy;
        x += vx;
        if track.bounces {
            if y - r < 0.0 || y + r > h as f64 {
                vy = -vy;
                y = if y - r < 0.0 { 2.0 * r - y } else { 2.0 * (h as f64 - r) - y };
            }
            if x - r < 0.0 || x + r > w as f64 {
                vx = -vx;
                x = if x - r < 0.0 { 2.0 * r - x } else { 2.0 * (w as f64 - r) - x };
            }
        }
    }
}

const MAX_PLACEMENT_TRIES: usize = 10_000;

/// Generates clip `index` of the dataset described by `spec`.
pub fn generate_clip(spec: &SpriteSpec, index: usize) -> Result<RawClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = spec.image_size;
    let t = spec.frames_per_clip;
    let count = rng.random_range(spec.sprite_count.0..=spec.sprite_count.1);
    let mut colors: Vec<[u8; 3]> = spec.palette.clone();
    // Partial shuffle so each clip gets distinct colours.
    for i in 0..count {
        let j = rng.random_range(i..colors.len());
        colors.swap(i, j);
    }
    let phase = (rng.random::<f64>(), if rng.random_bool(0.5) { 1.0 } else { -1.0 });

    let mut tracks: Vec<SpriteTrack> = Vec::with_capacity(count);
    let mut occupied: Vec<Vec<bool>> = vec![vec![false; h * w]; t];
    for i in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
            let size = rng.random_range(spec.size_range.0..=spec.size_range.1);
            let speed = rng.random_range(spec.velocity_range.0..=spec.velocity_range.1);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let r = size as f64 / 2.0;
            let transient = spec.enter_exit && rng.random_bool(0.5);
            let (start, velocity) = if transient {
                // Start just across an edge and head inward so the sprite
                // enters, crosses and may leave.
                let along = rng.random_range(r..(w as f64 - r));
                let s = speed.max(1.0);
                let inset = rng.random_range(0.0..=r);
                match rng.random_range(0..4) {
                    0 => ((-inset, along), (s, speed * angle.cos())),
                    1 => ((h as f64 + inset, along), (-s, speed * angle.cos())),
                    2 => ((along.min(h as f64 - r), -inset), (speed * angle.sin(), s)),
                    _ => ((along.min(h as f64 - r), w as f64 + inset), (speed * angle.sin(), -s)),
                }
            } else {
                let y = rng.random_range(r..(h as f64 - r));
                let x = rng.random_range(r..(w as f64 - r));
                ((y, x), (speed * angle.sin(), speed * angle.cos()))
            };
            let mut track = SpriteTrack {
                id: i as u32 + 1,
                shape,
                size,
                color: colors[i],
                velocity,
                centers: Vec::new(),
                bounces: !transient,
            };
            simulate(&mut track, start, t, (h, w));
            let pixels: Vec<Vec<usize>> = track.centers.iter().map(|&c| raster(&track, c, h, w)).collect();
            if pixels.iter().all(Vec::is_empty) {
                continue;
            }
            if !spec.occlusion
                && pixels
                    .iter()
                    .zip(&occupied)
                    .any(|(px, occ)| px.iter().any(|&p| occ[p]))
            {
                continue;
            }
            for (px, occ) in pixels.iter().zip(occupied.iter_mut()) {
                for &p in px {
                    occ[p] = true;
                }
            }
            tracks.push(track);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InvalidArgument(format!(
                "could not place sprite {} of clip {index} without overlap",
                i + 1
            )));
        }
    }

    let mut frames = vec![0u8; t * h * w * 3];
    let mut masks = vec![0u8; t * h * w];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let o = ((f * h + y) * w + x) * 3;
                frames[o..o + 3].copy_from_slice(&background_pixel(spec, phase, y, x, f));
            }
        }
        // Later sprites are drawn on top.
        for track in &tracks {
            for p in raster(track, track.centers[f], h, w) {
                masks[f * h * w + p] = track.id as u8;
                let o = (f * h * w + p) * 3;
                frames[o..o + 3].copy_from_slice(&track.color);
            }
        }
    }
    let id = clip_id(index);
    Ok(RawClip {
        clip_id: id.clone(),
        t,
        height: h,
        width: w,
        frames,
        masks,
        meta: ClipMeta {
            clip_id: id,
            sprites: tracks,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub clip_id: String,
    pub dir: String,
    pub split: Split,
    pub frames: usize,
    /// Relative path to sha256 hex digest.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: Option<SpriteSpec>,
    pub image_size: (usize, usize),
    pub clips: Vec<ManifestClip>,
}

pub const MANIFEST_FORMAT: &str = "slotbert-sprites-v1";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_png(data: &[u8], w: usize, h: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png header: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::InvalidArgument(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Decodes an 8-bit PNG, returning `(pixels, width, height, channels)`.
pub fn decode_png(path: &Path, bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit samples"));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::format(path, format!("unsupported colour type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize, channels))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one clip under `root/dir` and returns its manifest entry.
pub fn write_clip(root: &Path, dir: &str, clip: &RawClip, split: Split) -> Result<ManifestClip> {
    let mut checksums = BTreeMap::new();
    let (h, w) = (clip.height, clip.width);
    for f in 0..clip.t {
        for (kind, data, color) in [
            ("frames", clip.frame(f), png::ColorType::Rgb),
            ("masks", clip.mask(f), png::ColorType::Grayscale),
        ] {
            let rel = format!("{dir}/{kind}/{f:04}.png");
            let bytes = encode_png(data, w, h, color)?;
            write_file(&root.join(&rel), &bytes)?;
            checksums.insert(rel, sha256_hex(&bytes));
        }
    }
    let rel = format!("{dir}/meta.json");
    let meta = serde_json::to_vec_pretty(&clip.meta).expect("meta serializes");
    write_file(&root.join(&rel), &meta)?;
    checksums.insert(rel, sha256_hex(&meta));
    Ok(ManifestClip {
        clip_id: clip.clip_id.clone(),
        dir: dir.to_string(),
        split,
        frames: clip.t,
        checksums,
    })
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_file(&root.join("manifest.json"), text.as_bytes())
}

/// Generates every clip of `spec` into `out_dir`.
pub fn write_dataset(spec: &SpriteSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut clips = Vec::with_capacity(spec.total_videos());
    for i in 0..spec.total_videos() {
        let clip = generate_clip(spec, i)?;
        let split = if i < spec.num_videos { Split::Train } else { Split::Eval };
        clips.push(write_clip(out_dir, &format!("clips/{i:04}"), &clip, split)?);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        spec: Some(spec.clone()),
        image_size: spec.image_size,
        clips,
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::format(&path, format!("unknown format {:?}", manifest.format)));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.clips.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.clips[i].split == split)
            .collect()
    }

    fn read_checked(&self, entry: &ManifestClip, rel: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = entry
            .checksums
            .get(rel)
            .ok_or_else(|| Error::format(&path, "file not listed in manifest"))?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Checksum { path });
        }
        Ok(bytes)
    }

    pub fn load(&self, index: usize) -> Result<RawClip> {
        let entry = &self.manifest.clips[index];
        let (h, w) = self.manifest.image_size;
        let t = entry.frames;
        let mut frames = Vec::with_capacity(t * h * w * 3);
        let mut masks = Vec::with_capacity(t * h * w);
        for f in 0..t {
            for (kind, channels, out) in [("frames", 3, &mut frames), ("masks", 1, &mut masks)] {
                let rel = format!("{}/{kind}/{f:04}.png", entry.dir);
                let bytes = self.read_checked(entry, &rel)?;
                let path = self.root.join(&rel);
                let (px, pw, ph, pc) = decode_png(&path, &bytes)?;
                if (pw, ph, pc) != (w, h, channels) {
                    return Err(Error::format(
                        &path,
                        format!("expected {w}x{h}x{channels}, found {pw}x{ph}x{pc}"),
                    ));
                }
                out.extend_from_slice(&px);
            }
        }
        let rel = format!("{}/meta.json", entry.dir);
        let meta_bytes = self.read_checked(entry, &rel)?;
        let meta: ClipMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::format(self.root.join(&rel), e.to_string()))?;
        Ok(RawClip {
            clip_id: entry.clip_id.clone(),
            t,
            height: h,
            width: w,
            frames,
            masks,
            meta,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<RawClip>> {
        self.indices(split).into_iter().map(|i| self.load(i)).collect()
    }
}

pub fn read_dataset(dir: &Path) -> Result<Vec<RawClip>> {
    let ds = Dataset::open(dir)?;
    (0..ds.len()).map(|i| ds.load(i)).collect()
}

/// Reads a clip directory holding `frames/NNNN.png` and optionally
/// `masks/NNNN.png`, without a manifest.
pub fn read_clip_dir(dir: &Path) -> Result<VideoClip> {
    let frames_dir = dir.join("frames");
    let mut names: Vec<String> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::io(&frames_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::format(&frames_dir, "no frames found"));
    }
    let mut frames = Vec::new();
    let mut masks: Option<Vec<u32>> = Some(Vec::new());
    let mut dims = None;
    for name in &names {
        let path = frames_dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (px, w, h, c) = decode_png(&path, &bytes)?;
        if c != 3 {
            return Err(Error::format(&path, "expected an RGB frame"));
        }
        if *dims.get_or_insert((h, w)) != (h, w) {
            return Err(Error::format(&path, "frame size differs from the first frame"));
        }
        frames.extend(px.iter().map(|&v| v as f64 / 255.0));
        let mpath = dir.join("masks").join(name);
        if let (Some(m), true) = (masks.as_mut(), mpath.exists()) {
            let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let (mp, mw, mh, mc) = decode_png(&mpath, &bytes)?;
            if (mw, mh, mc) != (w, h, 1) {
                return Err(Error::format(&mpath, "mask size differs from its frame"));
            }
            m.extend(mp.iter().map(|&v| v as u32));
        } else {
            masks = None;
        }
    }
    let (h, w) = dims.expect("at least one frame");
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into());
    VideoClip::new(id, (names.len(), h, w, 3), frames, masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SpriteSpec {
        SpriteSpec {
            num_videos: 3,
            eval_videos: 2,
            ..SpriteSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_clip(&SpriteSpec::hard(), 7).unwrap();
        let b = generate_clip(&SpriteSpec::hard(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_clip(&SpriteSpec::hard(), 8).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn two_sprites_without_occlusion_stay_separate() {
        let spec = SpriteSpec {
            sprite_count: (2, 2),
            ..SpriteSpec::default()
        };
        for i in 0..20 {
            let clip = generate_clip(&spec, i).unwrap();
            for f in 0..clip.t {
                let mut ids: Vec<u8> = clip.mask(f).iter().copied().filter(|&v| v != 0).collect();
                ids.sort();
                ids.dedup();
                assert_eq!(ids, vec![1, 2]);
            }
        }
    }

    #[test]
    fn foreground_pixels_carry_sprite_colour() {
        let spec = SpriteSpec::default();
        for i in 0..10 {
            let clip = generate_clip(&spec, i).unwrap();
            let n = clip.height * clip.width;
            for f in 0..clip.t {
                for p in 0..n {
                    let id = clip.mask(f)[p];
                    if id == 0 {
                        continue;
                    }
                    let color = clip.meta.sprites[id as usize - 1].color;
                    assert_eq!(&clip.frame(f)[p * 3..p * 3 + 3], &color);
                }
            }
        }
    }

    #[test]
    fn centroids_follow_the_trajectory() {
        let spec = SpriteSpec {
            shapes: vec![Shape::Square, Shape::Circle],
            ..SpriteSpec::default()
        };
        for i in 0..10 {
            let clip = generate_clip(&spec, i).unwrap();
            let (h, w) = (clip.height, clip.width);
            for s in &clip.meta.sprites {
                for f in 0..clip.t {
                    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                    for p in 0..h * w {
                        if clip.mask(f)[p] == s.id as u8 {
                            sy += (p / w) as f64 + 0.5;
                            sx += (p % w) as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                    let (cy, cx) = s.centers[f];
                    assert!((sy / n - cy).abs() <= 1.0 && (sx / n - cx).abs() <= 1.0);
                    if f > 0 {
                        let (py, px) = s.centers[f - 1];
                        let step = ((cy - py).powi(2) + (cx - px).powi(2)).sqrt();
                        let speed = s.velocity.0.hypot(s.velocity.1);
                        assert!(step <= speed + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let manifest = write_dataset(&spec, dir.path()).unwrap();
        assert_eq!(manifest.clips.len(), 5);
        for c in &manifest.clips {
            assert_eq!(c.checksums.len(), 2 * c.frames + 1);
        }
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.indices(Split::Eval), vec![3, 4]);
        for i in 0..5 {
            assert_eq!(ds.load(i).unwrap(), generate_clip(&spec, i).unwrap());
        }
    }

    #[test]
    fn corrupted_mask_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small(), dir.path()).unwrap();
        let victim = dir.path().join("clips/0001/masks/0002.png");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        match ds.load(1).unwrap_err() {
            Error::Checksum { path } => assert!(path.ends_with("clips/0001/masks/0002.png")),
            e => panic!("unexpected error {e}"),
        }
        assert!(ds.load(0).is_ok());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let spec = SpriteSpec {
            size_range: (10, 40),
            ..SpriteSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = SpriteSpec {
            sprite_count: (3, 2),
            ..SpriteSpec::default()
        };
        assert!(generate_clip(&spec, 0).is_err());
    }

    #[test]
    fn clip_dirs_load_without_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(&SpriteSpec::default(), 0).unwrap();
        write_clip(dir.path(), "one", &clip, Split::Eval).unwrap();
        let v = read_clip_dir(&dir.path().join("one")).unwrap();
        let expected = clip.to_video_clip();
        assert_eq!(v.clip_id, "one");
        assert_eq!(v.frames, expected.frames);
        assert_eq!(v.gt_masks, expected.gt_masks);
    }
}

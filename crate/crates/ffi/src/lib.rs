//! C ABI over the slotbert library.
//!
//! Every fallible call returns a [`SlotbertStatus`]; on failure the message
//! is available from [`slotbert_last_error`] on the same thread. Objects are
//! handed out as opaque pointers and must be released with the matching
//! `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slotbert::data::{write_dataset, SpriteSpec};
use slotbert::decoders::MaskSet;
use slotbert::features::VideoClip;
use slotbert::metrics::{evaluate_clip, Matching, MetricsConfig};
use slotbert::pipeline::{checkpoint, eval, export_masks, infer_long, Checkpoint, ExportOptions, InitMode};
use slotbert::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotbertStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    Config = 7,
    Checksum = 8,
    BufferTooSmall = 9,
    Panic = 99,
}

impl From<&Error> for SlotbertStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => SlotbertStatus::Io,
            Error::Format { .. } | Error::UnsupportedDtype { .. } | Error::Truncated { .. } => {
                SlotbertStatus::Format
            }
            Error::ShapeMismatch { .. } | Error::NotDivisible { .. } => SlotbertStatus::Shape,
            Error::NonFinite { .. } | Error::DegenerateSlot { .. } => SlotbertStatus::NonFinite,
            Error::Config(_) => SlotbertStatus::Config,
            Error::Checksum { .. } => SlotbertStatus::Checksum,
            Error::InvalidArgument(_) | Error::SequenceTooLong { .. } => SlotbertStatus::InvalidArgument,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotbertInitMode {
    Rnn = 0,
    Predict = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotbertMatching {
    BestOverlap = 0,
    Hungarian = 1,
}

/// A loaded checkpoint.
pub struct SlotbertModel {
    ckpt: Checkpoint,
}

/// A video clip, optionally with ground-truth masks.
pub struct SlotbertClip {
    clip: VideoClip,
}

/// Soft slot masks for every frame of a clip.
pub struct SlotbertMasks {
    masks: MaskSet,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlotbertModelInfo {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub window: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotbertInferOptions {
    /// Sliding-window stride for clips longer than the trained window.
    pub stride: usize,
    pub init_mode: SlotbertInitMode,
    /// Seed for the slot initialization noise.
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlotbertMaskShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_slots: usize,
    pub grid_height: usize,
    pub grid_width: usize,
}

/// Clip scores. Metrics that are undefined for the clip are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlotbertMetrics {
    pub fg_ari: f64,
    pub mbo_v: f64,
    pub mbo_f: f64,
    pub mbhd: f64,
    pub corloc: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SlotbertStatus, msg: impl Into<String>) -> SlotbertStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), SlotbertStatus>) -> SlotbertStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlotbertStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SlotbertStatus::Panic, msg)
        }
    }
}

fn lib<T>(r: slotbert::Result<T>) -> Result<T, SlotbertStatus> {
    r.map_err(|e| fail((&e).into(), e.to_string()))
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, SlotbertStatus> {
    if p.is_null() {
        return Err(fail(SlotbertStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SlotbertStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, SlotbertStatus> {
    p.as_ref()
        .ok_or_else(|| fail(SlotbertStatus::NullPointer, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), SlotbertStatus> {
    if out.is_null() {
        return Err(fail(SlotbertStatus::NullPointer, "output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slotbert_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn slotbert_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub unsafe extern "C" fn slotbert_model_load(
    path: *const c_char,
    out: *mut *mut SlotbertModel,
) -> SlotbertStatus {
    guard(|| {
        let path = cstr(path, "path")?;
        let ckpt = lib(checkpoint::load(&PathBuf::from(path)))?;
        put(out, SlotbertModel { ckpt })
    })
}

#[no_mangle]
pub unsafe extern "C" fn slotbert_model_free(model: *mut SlotbertModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn slotbert_model_info(
    model: *const SlotbertModel,
    out: *mut SlotbertModelInfo,
) -> SlotbertStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if out.is_null() {
            return Err(fail(SlotbertStatus::NullPointer, "output pointer is null"));
        }
        let c = &m.ckpt.config.model;
        *out = SlotbertModelInfo {
            num_slots: c.k,
            slot_dim: c.d_slot,
            window: m.ckpt.model.window(),
            image_height: c.image_height,
            image_width: c.image_width,
            channels: c.channels,
            patch_size: c.patch_size,
        };
        Ok(())
    })
}

/// Builds a clip from `T x H x W x 3` RGB bytes. `masks` may be NULL;
/// otherwise it holds `T x H x W` instance ids with 0 as background.
#[no_mangle]
pub unsafe extern "C" fn slotbert_clip_from_rgb8(
    clip_id: *const c_char,
    frames: usize,
    height: usize,
    width: usize,
    rgb: *const u8,
    masks: *const u32,
    out: *mut *mut SlotbertClip,
) -> SlotbertStatus {
    guard(|| {
        let id = cstr(clip_id, "clip_id")?;
        if rgb.is_null() {
            return Err(fail(SlotbertStatus::NullPointer, "rgb is null"));
        }
        let n = frames * height * width;
        let px = std::slice::from_raw_parts(rgb, n * 3);
        let gt = (!masks.is_null()).then(|| std::slice::from_raw_parts(masks, n).to_vec());
        let clip = lib(VideoClip::new(
            id,
            (frames, height, width, 3),
            px.iter().map(|&v| v as f64 / 255.0).collect(),
            gt,
        ))?;
        put(out, SlotbertClip { clip })
    })
}

/// Reads a clip directory with `frames/NNNN.png` and optional `masks/NNNN.png`.
#[no_mangle]
pub unsafe extern "C" fn slotbert_clip_load_dir(
    dir: *const c_char,
    out: *mut *mut SlotbertClip,
) -> SlotbertStatus {
    guard(|| {
        let dir = cstr(dir, "dir")?;
        let clip = lib(slotbert::data::read_clip_dir(&PathBuf::from(dir)))?;
        put(out, SlotbertClip { clip })
    })
}

#[no_mangle]
pub unsafe extern "C" fn slotbert_clip_free(clip: *mut SlotbertClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Segments a clip. Clips longer than the trained window use sliding
/// windows with the given stride and initialization mode.
#[no_mangle]
pub unsafe extern "C" fn slotbert_infer(
    model: *const SlotbertModel,
    clip: *const SlotbertClip,
    options: SlotbertInferOptions,
    out: *mut *mut SlotbertMasks,
) -> SlotbertStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let c = deref(clip, "clip")?;
        let mut ev = m.ckpt.config.eval.clone();
        ev.window = m.ckpt.model.window();
        ev.stride = options.stride;
        ev.init_mode = match options.init_mode {
            SlotbertInitMode::Rnn => InitMode::Rnn,
            SlotbertInitMode::Predict => InitMode::Predict,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let feats = lib(m.ckpt.model.encode(&c.clip))?;
        let masks = if feats.t() <= ev.window {
            lib(m.ckpt.model.infer(&m.ckpt.params, &feats.frames, &mut rng))?.0
        } else {
            lib(infer_long(
                &m.ckpt.model,
                &m.ckpt.params,
                &feats.frames,
                ev.window,
                ev.stride,
                ev.init_mode,
                &mut rng,
            ))?
            .masks
        };
        put(out, SlotbertMasks { masks })
    })
}

#[no_mangle]
pub unsafe extern "C" fn slotbert_masks_free(masks: *mut SlotbertMasks) {
    if !masks.is_null() {
        drop(Box::from_raw(masks));
    }
}

#[no_mangle]
pub unsafe extern "C" fn slotbert_masks_shape(
    masks: *const SlotbertMasks,
    out: *mut SlotbertMaskShape,
) -> SlotbertStatus {
    guard(|| {
        let m = &deref(masks, "masks")?.masks;
        if out.is_null() {
            return Err(fail(SlotbertStatus::NullPointer, "output pointer is null"));
        }
        *out = SlotbertMaskShape {
            frames: m.t(),
            height: m.height(),
            width: m.width(),
            num_slots: m.k(),
            grid_height: m.grid.0,
            grid_width: m.grid.1,
        };
        Ok(())
    })
}

/// Writes `T x H x W` pixel labels (slot index + 1) into `out`.
#[no_mangle]
pub unsafe extern "C" fn slotbert_masks_labels(
    masks: *const SlotbertMasks,
    out: *mut u32,
    len: usize,
) -> SlotbertStatus {
    guard(|| {
        let m = &deref(masks, "masks")?.masks;
        let need = m.t() * m.height() * m.width();
        if out.is_null() {
            return Err(fail(SlotbertStatus::NullPointer, "output buffer is null"));
        }
        if len < need {
            return Err(fail(
                SlotbertStatus::BufferTooSmall,
                format!("need {need} labels, buffer holds {len}"),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (d, &s) in dst.iter_mut().zip(&m.label_video()) {
            *d = s as u32 + 1;
        }
        Ok(())
    })
}

/// Writes frame `frame`'s `K x N` soft masks (slot-major) into `out`.
#[no_mangle]
pub unsafe extern "C" fn slotbert_masks_soft(
    masks: *const SlotbertMasks,
    frame: usize,
    out: *mut f32,
    len: usize,
) -> SlotbertStatus {
    guard(|| {
        let m = &deref(masks, "masks")?.masks;
        if frame >= m.t() {
            return Err(fail(
                SlotbertStatus::InvalidArgument,
                format!("frame {frame} out of range for {} frames", m.t()),
            ));
        }
        let src = m.soft[frame].data();
        if out.is_null() {
            return Err(fail(SlotbertStatus::NullPointer, "output buffer is null"));
        }
        if len < src.len() {
            return Err(fail(
                SlotbertStatus::BufferTooSmall,
                format!("need {} values, buffer holds {len}", src.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, src.len());
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s as f32;
        }
        Ok(())
    })
}

/// Writes label PNGs, optional soft masks and a manifest under `dir`.
#[no_mangle]
pub unsafe extern "C" fn slotbert_masks_export(
    masks: *const SlotbertMasks,
    clip_id: *const c_char,
    dir: *const c_char,
    soft: bool,
) -> SlotbertStatus {
    guard(|| {
        let m = &deref(masks, "masks")?.masks;
        let id = cstr(clip_id, "clip_id")?;
        let dir = cstr(dir, "dir")?;
        let opts = ExportOptions {
            window: m.t(),
            stride: 1,
            init_mode: "rnn".into(),
            soft,
        };
        lib(export_masks(&PathBuf::from(dir), id, m, &opts))?;
        Ok(())
    })
}

/// Scores masks against the clip's ground truth.
#[no_mangle]
pub unsafe extern "C" fn slotbert_evaluate(
    masks: *const SlotbertMasks,
    clip: *const SlotbertClip,
    matching: SlotbertMatching,
    out: *mut SlotbertMetrics,
) -> SlotbertStatus {
    guard(|| {
        let m = &deref(masks, "masks")?.masks;
        let c = &deref(clip, "clip")?.clip;
        if out.is_null() {
            return Err(fail(SlotbertStatus::NullPointer, "output pointer is null"));
        }
        let gt = lib(eval::ground_truth(c))?;
        let cfg = MetricsConfig {
            matching: match matching {
                SlotbertMatching::BestOverlap => Matching::BestOverlap,
                SlotbertMatching::Hungarian => Matching::Hungarian,
            },
            ..MetricsConfig::default()
        };
        let r = lib(evaluate_clip(&c.clip_id, m, &gt, &cfg))?;
        *out = SlotbertMetrics {
            fg_ari: r.fg_ari,
            mbo_v: r.mbo_v.unwrap_or(f64::NAN),
            mbo_f: r.mbo_f.unwrap_or(f64::NAN),
            mbhd: r.mbhd.unwrap_or(f64::NAN),
            corloc: r.corloc.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Renders a synthetic dataset. `spec_json` may be NULL for the default
/// spec. The number of clips written is stored in `clips` if non-NULL.
#[no_mangle]
pub unsafe extern "C" fn slotbert_generate_dataset(
    spec_json: *const c_char,
    out_dir: *const c_char,
    clips: *mut usize,
) -> SlotbertStatus {
    guard(|| {
        let spec = if spec_json.is_null() {
            SpriteSpec::default()
        } else {
            let text = cstr(spec_json, "spec_json")?;
            lib(SpriteSpec::from_json(text))?
        };
        let dir = cstr(out_dir, "out_dir")?;
        let manifest = lib(write_dataset(&spec, &PathBuf::from(dir)))?;
        if !clips.is_null() {
            *clips = manifest.clips.len();
        }
        Ok(())
    })
}


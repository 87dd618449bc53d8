//! Run configuration as flat `key = value` text.
//!
//! Keys are dotted (`model.k`, `optim.lr`, ...). Blank lines and `#`
//! comments are ignored; unknown keys are errors. The canonical text lists
//! every key in a fixed order and its sha256 is the config hash.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoders::DecoderKind;
use crate::error::{Error, Result};
use crate::losses::{ContrastTarget, LossConfig};
use crate::metrics::{AriPooling, Matching, MetricsConfig};
use crate::slot_attention::{RefineCell, SlotInit};
use crate::tst::TokenMixing;

pub const SEED_ENV: &str = "SLOTBERT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Pixel,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Whole frames of slot tokens are masked before the TST.
    Slots,
    /// Random feature patches are zeroed before slot attention.
    Features,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Rnn,
    Predict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub k: usize,
    pub d_slot: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub encoder: EncoderMode,
    pub projection_dim: usize,
    pub projection_seed: u64,
    pub external_dim: usize,
    pub decoder: DecoderKind,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub mixer_blocks: usize,
    pub sa_mlp_hidden: usize,
    pub sa_feature_mlp: bool,
    pub tst_layers: usize,
    pub tst_heads: usize,
    pub tst_ffn_multiplier: usize,
    pub max_t: usize,
    pub tst_mixing: TokenMixing,
    pub refine_cell: RefineCell,
    pub slot_init: SlotInit,
    pub n_first: usize,
    pub n_later: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSection {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub contrast_on: ContrastTarget,
    /// Weight of the optional masked-slot reconstruction term.
    pub slot_recon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSection {
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay outside the adaptive step instead of as an L2
    /// gradient term.
    pub decoupled_decay: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub train_frames: usize,
    pub random_crop: bool,
    pub log_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSection {
    pub use_tst: bool,
    pub use_contrast: bool,
    pub mask_mode: MaskMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub path: String,
    /// Directory of `<clip_id>.sbft` files for the external encoder.
    pub features_dir: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub repeats: usize,
    pub matching: Matching,
    pub window: usize,
    pub stride: usize,
    pub init_mode: InitMode,
    pub ari_pooling: AriPooling,
    /// Cap on evaluated clips; 0 means all.
    pub max_clips: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub ablation: AblationSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection {
                k: 7,
                d_slot: 64,
                patch_size: 8,
                image_height: 64,
                image_width: 64,
                channels: 3,
                encoder: EncoderMode::Pixel,
                projection_dim: 0,
                projection_seed: 0,
                external_dim: 0,
                decoder: DecoderKind::Mlp,
                decoder_hidden: 512,
                decoder_layers: 4,
                mixer_blocks: 2,
                sa_mlp_hidden: 128,
                sa_feature_mlp: true,
                tst_layers: 3,
                tst_heads: 8,
                tst_ffn_multiplier: 4,
                max_t: 32,
                tst_mixing: TokenMixing::TrackAndFull,
                refine_cell: RefineCell::GruMlp,
                slot_init: SlotInit::LearnedGaussian,
                n_first: 3,
                n_later: 2,
            },
            loss: LossSection {
                alpha: 0.01,
                tau: 0.5,
                gamma: 0.15,
                contrast_on: ContrastTarget::Fused,
                slot_recon: 0.0,
            },
            optim: OptimSection {
                lr: 1e-4,
                weight_decay: 1e-5,
                decoupled_decay: true,
                batch_size: 4,
                steps: 5000,
                seed: 0,
                grad_clip: 1.0,
                warmup_steps: 0,
                train_frames: 5,
                random_crop: false,
                log_every: 50,
                checkpoint_every: 0,
            },
            ablation: AblationSection {
                use_tst: true,
                use_contrast: true,
                mask_mode: MaskMode::Slots,
            },
            data: DataSection {
                path: String::new(),
                features_dir: String::new(),
            },
            eval: EvalSection {
                repeats: 3,
                matching: Matching::BestOverlap,
                window: 5,
                stride: 1,
                init_mode: InitMode::Rnn,
                ari_pooling: AriPooling::Video,
                max_clips: 0,
            },
        }
    }
}

fn parse_value<T: DeserializeOwned>(key: &str, raw: &str) -> Result<T> {
    serde_json::from_str(raw)
        .or_else(|_| serde_json::from_value(serde_json::Value::String(raw.to_string())))
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn format_value<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("config values serialize") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

macro_rules! config_keys {
    ($( $key:literal => $sec:ident . $field:ident ),* $(,)?) => {
        /// Every recognised key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => self.$sec.$field = parse_value(key, value)?, )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( ($key, format_value(&self.$sec.$field)) ),*]
            }
        }
    };
}

config_keys! {
    "model.k" => model.k,
    "model.d_slot" => model.d_slot,
    "model.patch_size" => model.patch_size,
    "model.image_height" => model.image_height,
    "model.image_width" => model.image_width,
    "model.channels" => model.channels,
    "model.encoder" => model.encoder,
    "model.projection_dim" => model.projection_dim,
    "model.projection_seed" => model.projection_seed,
    "model.external_dim" => model.external_dim,
    "model.decoder" => model.decoder,
    "model.decoder_hidden" => model.decoder_hidden,
    "model.decoder_layers" => model.decoder_layers,
    "model.mixer_blocks" => model.mixer_blocks,
    "model.sa_mlp_hidden" => model.sa_mlp_hidden,
    "model.sa_feature_mlp" => model.sa_feature_mlp,
    "model.tst_layers" => model.tst_layers,
    "model.tst_heads" => model.tst_heads,
    "model.tst_ffn_multiplier" => model.tst_ffn_multiplier,
    "model.max_t" => model.max_t,
    "model.tst_mixing" => model.tst_mixing,
    "model.refine_cell" => model.refine_cell,
    "model.slot_init" => model.slot_init,
    "model.n_first" => model.n_first,
    "model.n_later" => model.n_later,
    "loss.alpha" => loss.alpha,
    "loss.tau" => loss.tau,
    "loss.gamma" => loss.gamma,
    "loss.contrast_on" => loss.contrast_on,
    "loss.slot_recon" => loss.slot_recon,
    "optim.lr" => optim.lr,
    "optim.weight_decay" => optim.weight_decay,
    "optim.decoupled_decay" => optim.decoupled_decay,
    "optim.batch_size" => optim.batch_size,
    "optim.steps" => optim.steps,
    "optim.seed" => optim.seed,
    "optim.grad_clip" => optim.grad_clip,
    "optim.warmup_steps" => optim.warmup_steps,
    "optim.train_frames" => optim.train_frames,
    "optim.random_crop" => optim.random_crop,
    "optim.log_every" => optim.log_every,
    "optim.checkpoint_every" => optim.checkpoint_every,
    "ablation.use_tst" => ablation.use_tst,
    "ablation.use_contrast" => ablation.use_contrast,
    "ablation.mask_mode" => ablation.mask_mode,
    "data.path" => data.path,
    "data.features_dir" => data.features_dir,
    "eval.repeats" => eval.repeats,
    "eval.matching" => eval.matching,
    "eval.window" => eval.window,
    "eval.stride" => eval.stride,
    "eval.init_mode" => eval.init_mode,
    "eval.ari_pooling" => eval.ari_pooling,
    "eval.max_clips" => eval.max_clips,
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            self.optim.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.model.image_height / self.model.patch_size,
            self.model.image_width / self.model.patch_size,
        )
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.loss.alpha,
            tau: self.loss.tau,
            contrast_on: self.loss.contrast_on,
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            matching: self.eval.matching,
            ari_pooling: self.eval.ari_pooling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if m.k == 0 || m.k > 255 {
            return bad(format!("model.k must be in 1..=255, got {}", m.k));
        }
        if m.patch_size == 0
            || m.image_height % m.patch_size != 0
            || m.image_width % m.patch_size != 0
        {
            return Err(Error::NotDivisible {
                height: m.image_height,
                width: m.image_width,
                patch: m.patch_size,
            });
        }
        if m.encoder == EncoderMode::External && m.external_dim == 0 {
            return bad("model.external_dim must be set for the external encoder".into());
        }
        if self.ablation.use_tst && m.d_slot % m.tst_heads.max(1) != 0 {
            return bad(format!(
                "model.d_slot {} must be divisible by model.tst_heads {}",
                m.d_slot, m.tst_heads
            ));
        }
        if !(0.0..1.0).contains(&self.loss.gamma) {
            return bad(format!("loss.gamma must be in [0, 1), got {}", self.loss.gamma));
        }
        if !(self.loss.slot_recon >= 0.0 && self.loss.slot_recon.is_finite()) {
            return bad(format!("loss.slot_recon must be non-negative, got {}", self.loss.slot_recon));
        }
        self.loss_config().validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || o.batch_size == 0 || o.train_frames == 0 {
            return bad("optim.lr, optim.batch_size and optim.train_frames must be positive".into());
        }
        if self.ablation.use_tst && o.train_frames + 1 > m.max_t {
            return bad(format!(
                "model.max_t {} must exceed optim.train_frames {} to allow next-slot prediction",
                m.max_t, o.train_frames
            ));
        }
        let e = &self.eval;
        if e.repeats == 0 || e.window == 0 || e.stride == 0 {
            return bad("eval.repeats, eval.window and eval.stride must be positive".into());
        }
        if e.init_mode == InitMode::Predict && !self.ablation.use_tst {
            return bad("eval.init_mode = predict needs the TST".into());
        }
        Ok(())
    }
}

/// Named ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTst,
    NoContrast,
    NoTstNoContrast,
    MaskFeatures,
    NoSlotMasks,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoTst,
        Variant::NoContrast,
        Variant::NoTstNoContrast,
        Variant::MaskFeatures,
        Variant::NoSlotMasks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTst => "no_tst",
            Variant::NoContrast => "no_contrast",
            Variant::NoTstNoContrast => "no_tst_no_contrast",
            Variant::MaskFeatures => "mask_features",
            Variant::NoSlotMasks => "no_slot_masks",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Self::parse)
            .collect()
    }

    /// `base` with this variant's ablation switches.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let a = &mut cfg.ablation;
        a.use_tst = true;
        a.use_contrast = true;
        a.mask_mode = MaskMode::Slots;
        match self {
            Variant::Full => {}
            Variant::NoTst => a.use_tst = false,
            Variant::NoContrast => a.use_contrast = false,
            Variant::NoTstNoContrast => {
                a.use_tst = false;
                a.use_contrast = false;
            }
            Variant::MaskFeatures => a.mask_mode = MaskMode::Features,
            Variant::NoSlotMasks => a.mask_mode = MaskMode::None,
        }
        if !cfg.ablation.use_tst {
            cfg.eval.init_mode = InitMode::Rnn;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# comment\nmodel.k = 4\n\nmodel.decoder = mixer  # trailing\noptim.lr=3e-4\nablation.use_tst = false\n",
        )
        .unwrap();
        assert_eq!(cfg.model.k, 4);
        assert_eq!(cfg.model.decoder, DecoderKind::Mixer);
        assert_eq!(cfg.optim.lr, 3e-4);
        assert!(!cfg.ablation.use_tst);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(RunConfig::parse("model.kk = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.k = three"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model.decoder = cnn"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("loss.tau", "0.25").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        assert!(RunConfig::parse("model.patch_size = 7").is_err());
        assert!(RunConfig::parse("model.d_slot = 30").is_err());
        assert!(RunConfig::parse("ablation.use_tst = false\neval.init_mode = predict").is_err());
    }

    #[test]
    fn variants_set_switches() {
        let base = RunConfig::default();
        let v = Variant::NoTstNoContrast.apply(&base);
        assert!(!v.ablation.use_tst && !v.ablation.use_contrast);
        assert_eq!(Variant::MaskFeatures.apply(&base).ablation.mask_mode, MaskMode::Features);
        assert_eq!(
            Variant::parse_list("full, no_tst").unwrap(),
            vec![Variant::Full, Variant::NoTst]
        );
        assert!(Variant::parse_list("full,bogus").is_err());
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slotbert::data::{read_clip_dir, write_dataset, Dataset, Split, SpriteSpec};
use slotbert::metrics::Matching;
use slotbert::pipeline::{
    checkpoint, eval, export_masks, infer_long, run_ablation, train, ClipStore, ExportOptions,
    InitMode, RunConfig, TrainOptions, Variant,
};
use slotbert::{Error, Result};

#[derive(Parser)]
#[command(name = "slotbert", version, about = "Slot-based object-centric video segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic sprite dataset. `--spec` takes a JSON file or
    /// one of the built-in names `default` and `hard`.
    GenData {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split and evaluate on the eval split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides `data.path` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against ground-truth masks.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A dataset directory (its eval split is used) or a single clip directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_parser = parse_matching)]
        matching: Option<Matching>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Segment one clip and write its masks.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, value_parser = parse_init)]
        init: Option<InitMode>,
        #[arg(long)]
        export: PathBuf,
        /// Also write per-patch slot probabilities.
        #[arg(long)]
        soft: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate each ablation variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "full,no_tst,no_contrast,mask_features,no_slot_masks")]
        variants: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_matching(s: &str) -> std::result::Result<Matching, String> {
    match s {
        "best_overlap" => Ok(Matching::BestOverlap),
        "hungarian" => Ok(Matching::Hungarian),
        _ => Err(format!("expected best_overlap or hungarian, got {s:?}")),
    }
}

fn parse_init(s: &str) -> std::result::Result<InitMode, String> {
    match s {
        "rnn" => Ok(InitMode::Rnn),
        "predict" => Ok(InitMode::Predict),
        _ => Err(format!("expected rnn or predict, got {s:?}")),
    }
}

fn load_spec(s: &str) -> Result<SpriteSpec> {
    match s {
        "default" => Ok(SpriteSpec::default()),
        "hard" => Ok(SpriteSpec::hard()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.into(),
                source: e,
            })?;
            SpriteSpec::from_json(&text)
        }
    }
}

fn data_dir(cli: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    match cli {
        Some(p) => Ok(p.to_path_buf()),
        None if !cfg.data.path.is_empty() => Ok(PathBuf::from(&cfg.data.path)),
        None => Err(Error::Config("no dataset: pass --data or set data.path".into())),
    }
}

/// Train and eval splits of a dataset directory.
fn load_splits(dir: &Path) -> Result<(ClipStore, ClipStore)> {
    let ds = Dataset::open(dir)?;
    Ok((
        ClipStore::Raw(ds.load_split(Split::Train)?),
        ClipStore::Raw(ds.load_split(Split::Eval)?),
    ))
}

/// Clips to evaluate: a dataset's eval split (all clips if it has none),
/// or a single clip directory.
fn load_eval_clips(dir: &Path) -> Result<ClipStore> {
    if dir.join("manifest.json").exists() {
        let ds = Dataset::open(dir)?;
        let mut idx = ds.indices(Split::Eval);
        if idx.is_empty() {
            idx = (0..ds.len()).collect();
        }
        Ok(ClipStore::Raw(idx.into_iter().map(|i| ds.load(i)).collect::<Result<_>>()?))
    } else {
        Ok(ClipStore::Video(vec![read_clip_dir(dir)?]))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, out } => {
            let spec = load_spec(&spec)?;
            let manifest = write_dataset(&spec, &out)?;
            println!("wrote {} clips to {}", manifest.clips.len(), out.display());
        }
        Cmd::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let (train_clips, eval_clips) = load_splits(&data_dir(data.as_deref(), &cfg)?)?;
            let res = train(
                &cfg,
                &train_clips,
                TrainOptions {
                    out_dir: Some(&out),
                    eval_clips: Some(&eval_clips),
                },
            )?;
            if let Some(l) = res.log.last() {
                println!("final loss {:.6} (recon {:.6})", l.total, l.recon);
            }
            if let Some(r) = &res.report {
                print_metrics(r);
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            report,
            matching,
            repeats,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let mut ev = ck.config.eval.clone();
            if let Some(m) = matching {
                ev.matching = m;
            }
            if let Some(r) = repeats {
                ev.repeats = r;
            }
            let clips = load_eval_clips(&data)?;
            let missing: Vec<usize> = (0..clips.len())
                .filter(|&i| clips.get(i).gt_masks.is_none())
                .collect();
            if !missing.is_empty() {
                // Without ground truth there is nothing to score; write the
                // masks so the run is not wasted.
                let dir = report.with_extension("masks");
                let mut rng = eval::eval_rng(ck.config.optim.seed, 0);
                for i in missing {
                    let clip = clips.get(i);
                    let masks = eval::predict_masks(&ck.model, &ck.params, &clip, &ev, &mut rng)?;
                    export_masks(&dir.join(&clip.clip_id), &clip.clip_id, &masks, &export_opts(&ev, false))?;
                }
                return Err(Error::InvalidArgument(format!(
                    "clips without ground-truth masks; no metrics computed, masks written to {}",
                    dir.display()
                )));
            }
            let r = eval::evaluate(&ck.model, &ck.params, &clips, &ev, &ck.header.config_hash)?;
            r.write(&report)?;
            print_metrics(&r);
        }
        Cmd::Infer {
            ckpt,
            clip,
            window,
            stride,
            init,
            export,
            soft,
            seed,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let mut ev = ck.config.eval.clone();
            ev.window = window.unwrap_or(ck.model.window());
            ev.stride = stride.unwrap_or(ev.stride);
            ev.init_mode = init.unwrap_or(ev.init_mode);
            let clip = read_clip_dir(&clip)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = ck.model.encode(&clip)?;
            let masks = if feats.t() == ev.window || feats.t() < ck.model.window() {
                if ev.window != ck.model.window() {
                    return Err(Error::InvalidArgument(format!(
                        "window {} differs from the trained window {}",
                        ev.window,
                        ck.model.window()
                    )));
                }
                ck.model.infer(&ck.params, &feats.frames, &mut rng)?.0
            } else {
                infer_long(&ck.model, &ck.params, &feats.frames, ev.window, ev.stride, ev.init_mode, &mut rng)?
                    .masks
            };
            let m = export_masks(&export, &clip.clip_id, &masks, &export_opts(&ev, soft))?;
            println!("wrote {} frames to {}", m.frames.len(), export.display());
        }
        Cmd::Ablate {
            config,
            variants,
            data,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let variants = Variant::parse_list(&variants)?;
            let (train_clips, eval_clips) = load_splits(&data_dir(data.as_deref(), &cfg)?)?;
            let rows = run_ablation(&cfg, &variants, &train_clips, &eval_clips, &out)?;
            for r in rows {
                let get = |n: &str| r.metrics.get(n).map_or(f64::NAN, |m| m.mean);
                println!(
                    "{:<20} fg_ari {:.4}  mbo_v {:.4}  mbo_f {:.4}",
                    r.variant,
                    get("fg_ari"),
                    get("mbo_v"),
                    get("mbo_f")
                );
            }
        }
    }
    Ok(())
}

fn export_opts(ev: &slotbert::pipeline::config::EvalSection, soft: bool) -> ExportOptions {
    ExportOptions {
        window: ev.window,
        stride: ev.stride,
        init_mode: match ev.init_mode {
            InitMode::Rnn => "rnn".into(),
            InitMode::Predict => "predict".into(),
        },
        soft,
    }
}

fn print_metrics(r: &eval::EvalReport) {
    for (name, m) in &r.metrics {
        println!("{name:<16} {:.4} ± {:.4}", m.mean, m.std);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slotbert::autograd::Graph;
use slotbert::data::{generate_clip, SpriteSpec};
use slotbert::pipeline::{
    eval, infer_long, run_ablation, train, ClipStore, InitMode, RunConfig, SlotBert, TrainOptions,
    Variant,
};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.k = 3;
    cfg.model.d_slot = 8;
    cfg.model.decoder_hidden = 16;
    cfg.model.decoder_layers = 2;
    cfg.model.sa_mlp_hidden = 16;
    cfg.model.tst_layers = 1;
    cfg.model.tst_heads = 2;
    cfg.model.tst_ffn_multiplier = 2;
    cfg.optim.lr = 1e-3;
    cfg.optim.steps = 20;
    cfg.eval.repeats = 1;
    cfg
}

fn clips(range: std::ops::Range<usize>) -> ClipStore {
    let spec = SpriteSpec::default();
    ClipStore::Raw(range.map(|i| generate_clip(&spec, i).unwrap()).collect())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn smoke_run_lowers_the_loss() {
    let mut cfg = tiny_config();
    cfg.optim.steps = 50;
    let res = train(&cfg, &clips(0..4), TrainOptions::default()).unwrap();
    let mean = |s: &[slotbert::pipeline::StepLog]| s.iter().map(|l| l.recon).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&res.log[..10]), mean(&res.log[40..]));
    assert!(last < first, "recon went from {first} to {last}");
    assert!(res.log.iter().all(|l| l.total.is_finite()));
}

#[test]
fn without_tst_and_contrast_the_loss_is_reconstruction() {
    let cfg = Variant::NoTstNoContrast.apply(&tiny_config());
    let (model, params) = SlotBert::build(&cfg).unwrap();
    assert!(model.tst.is_none());
    assert!(params.iter().all(|(_, name, _)| !name.contains("tst")));
    let clip = generate_clip(&SpriteSpec::default(), 0).unwrap().to_video_clip();
    let feats = model.encode(&clip).unwrap().frames;
    let g = Graph::with_params(&params);
    let mut r = rng(0);
    let corruption = model.sample_corruption(feats.len(), &mut r).unwrap();
    let out = model.forward(&g, &feats, &corruption, &mut r).unwrap();
    let terms = model.loss(&out).unwrap();
    assert!(terms.contrast.is_none());
    assert_eq!(terms.total.value().item(), terms.recon.value().item());
}

#[test]
fn feature_masking_trains() {
    let mut cfg = Variant::MaskFeatures.apply(&tiny_config());
    cfg.optim.steps = 3;
    let (model, _) = SlotBert::build(&cfg).unwrap();
    let c = model.sample_corruption(5, &mut rng(1)).unwrap();
    let patches = c.patches.expect("feature masking drops patches");
    assert!(patches.iter().all(|p| !p.is_empty()));
    assert!(c.frames.kept.iter().all(|&k| k));
    let res = train(&cfg, &clips(0..2), TrainOptions::default()).unwrap();
    assert_eq!(res.log.len(), 3);
}

#[test]
fn long_inference_with_one_window_matches_a_single_pass() {
    let cfg = tiny_config();
    let (model, params) = SlotBert::build(&cfg).unwrap();
    let clip = generate_clip(&SpriteSpec::default(), 3).unwrap().to_video_clip();
    let feats = model.encode(&clip).unwrap().frames;
    let (masks, slots, _) = model.infer(&params, &feats, &mut rng(9)).unwrap();
    let long = infer_long(&model, &params, &feats, 5, 1, InitMode::Rnn, &mut rng(9)).unwrap();
    assert_eq!(long.source_window, vec![0; 5]);
    for t in 0..5 {
        assert!(long.masks.soft[t].max_abs_diff(&masks.soft[t]) < 1e-12);
        assert!(long.slots.frames[t].max_abs_diff(&slots.frames[t]) < 1e-12);
    }
}

#[test]
fn long_inference_covers_every_frame_once() {
    let cfg = tiny_config();
    let (model, params) = SlotBert::build(&cfg).unwrap();
    let spec = SpriteSpec { frames_per_clip: 11, ..SpriteSpec::default() };
    let clip = generate_clip(&spec, 0).unwrap().to_video_clip();
    let feats = model.encode(&clip).unwrap().frames;
    for mode in [InitMode::Rnn, InitMode::Predict] {
        for stride in [1, 2, 5] {
            let out = infer_long(&model, &params, &feats, 5, stride, mode, &mut rng(0)).unwrap();
            assert_eq!(out.masks.t(), 11);
            assert_eq!(out.slots.t(), 11);
            for (t, &w) in out.source_window.iter().enumerate() {
                assert!(w <= t && t < w + 5, "frame {t} taken from window at {w}");
            }
        }
    }
    assert!(infer_long(&model, &params, &feats, 4, 1, InitMode::Rnn, &mut rng(0)).is_err());
}

#[test]
fn single_repeat_evaluation_has_zero_std() {
    let cfg = tiny_config();
    let (model, params) = SlotBert::build(&cfg).unwrap();
    let r = eval::evaluate(&model, &params, &clips(0..2), &cfg.eval, "h").unwrap();
    assert_eq!(r.repeats, 1);
    assert!(r.metrics.values().all(|m| m.std == 0.0));
    assert_eq!(r.per_video.len(), 2);

    let mut ev = cfg.eval.clone();
    ev.repeats = 2;
    let a = eval::evaluate(&model, &params, &clips(0..2), &ev, "h").unwrap();
    let b = eval::evaluate(&model, &params, &clips(0..2), &ev, "h").unwrap();
    assert_eq!(a.mean("mbo_v"), b.mean("mbo_v"));
}

#[test]
fn ablation_writes_one_row_per_variant() {
    let mut cfg = tiny_config();
    cfg.optim.steps = 2;
    let dir = tempfile::tempdir().unwrap();
    let rows = run_ablation(&cfg, &[Variant::Full, Variant::NoTst], &clips(0..2), &clips(2..3), dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].variant, "no_tst");
    assert!(dir.path().join("summary.json").exists());
    assert!(dir.path().join("full").join("checkpoint.sbck").exists());
}

#[test]
fn cli_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_slotbert");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).env("RUST_LOG", "warn").output().unwrap();
        (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
    };

    std::fs::write(
        d.join("spec.json"),
        r#"{"num_videos": 3, "eval_videos": 2, "frames_per_clip": 5, "image_size": [64, 64],
            "sprite_count": [1, 2], "shapes": ["square", "circle"], "size_range": [10, 14],
            "velocity_range": [1.0, 2.0], "palette": [[255, 0, 0], [0, 255, 0]],
            "background": "solid", "occlusion": false, "enter_exit": false, "seed": 2}"#,
    )
    .unwrap();
    let data = d.join("data");
    let (ok, log) = run(&["gen-data", "--spec", d.join("spec.json").to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(ok, "{log}");

    std::fs::write(
        d.join("run.cfg"),
        "model.k = 3\nmodel.d_slot = 8\nmodel.decoder_hidden = 16\nmodel.decoder_layers = 2\n\
         model.sa_mlp_hidden = 16\nmodel.tst_layers = 1\nmodel.tst_heads = 2\noptim.steps = 3\neval.repeats = 1\n",
    )
    .unwrap();
    let run_dir = d.join("run");
    let (ok, log) = run(&["train", "--config", d.join("run.cfg").to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert!(ok, "{log}");
    let ckpt = run_dir.join("checkpoint.sbck");
    assert!(ckpt.exists());

    let report = d.join("report.json");
    let (ok, log) = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--report", report.to_str().unwrap(), "--matching", "hungarian"]);
    assert!(ok, "{log}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["matching"], "hungarian");
    assert_eq!(r["videos"], 2);

    let clip_dir = std::fs::read_dir(data.join("clips")).unwrap().next().unwrap().unwrap().path();
    let export = d.join("masks");
    let (ok, log) = run(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--clip", clip_dir.to_str().unwrap(), "--export", export.to_str().unwrap(), "--soft"]);
    assert!(ok, "{log}");
    let back = slotbert::pipeline::read_export(&export).unwrap();
    assert_eq!(back.labels.len(), 5);
    assert!(back.soft.is_some());

    let (ok, log) = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--report", report.to_str().unwrap(), "--matching", "nearest"]);
    assert!(!ok);
    assert!(log.contains("best_overlap"), "{log}");
}

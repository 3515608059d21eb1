use std::path::Path;

use autodiff::Tensor;
use std4d::checkpoint;
use std4d::consistency::FeatureExtractor;
use std4d::gs4d::{construct_4d, ConstructConfig, PriorBank};
use std4d::harness::config::{PriorSource, RunConfig, StageSelect};
use std4d::harness::pipeline::{
    construct, evaluate, load_construct, load_scenes, load_teacher, load_vae, parse_eval_csv,
    pretrain_teachers, summary_from_csv, synth, teacher_prior_bank, train, EvalTarget,
};
use std4d::harness::run::RunDir;
use std4d::harness::scene::{synth_dataset, OrbitConfig, SceneSpec};
use std4d::orster::TeacherKind;
use std4d::Error;

/// Two views, three frames at 16x16 and a handful of steps per stage.
fn tiny(root: &Path, id: &str) -> RunConfig {
    let text = format!(
        r#"
[run]
id = "{id}"
root = "{}"
[data]
scenes = 2
[data.orbit]
views = 2
frames = 3
resolution = 16
[vae]
steps = 30
batch = 4
[model]
hidden = 8
fusion_hidden = 8
[teachers]
steps = 10
val_draws = 4
[stage1]
steps = 8
[stage2]
steps = 6
[stage3]
steps = 4
[stage4]
steps = 6
[construct]
num_points = 48
coarse_iters = 12
fine_iters = 6
[eval]
draws = 3
"#,
        root.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

fn stage(cfg: &RunConfig, k: u8) -> RunConfig {
    let mut c = cfg.clone();
    c.run.stage = StageSelect::One(k);
    c
}

fn prepared(root: &Path, id: &str) -> RunConfig {
    let cfg = tiny(root, id);
    let run = RunDir::open(&cfg).unwrap();
    synth(&cfg, &run).unwrap();
    pretrain_teachers(&cfg, &run).unwrap();
    cfg
}

#[test]
fn stages_need_their_predecessors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "pre");
    let run = RunDir::open(&cfg).unwrap();
    // no dataset yet
    assert!(matches!(
        pretrain_teachers(&cfg, &run),
        Err(Error::Prerequisite(_))
    ));
    synth(&cfg, &run).unwrap();
    // no autoencoder yet
    assert!(matches!(
        train(&stage(&cfg, 1), &run),
        Err(Error::Prerequisite(_))
    ));
    pretrain_teachers(&cfg, &run).unwrap();
    match train(&stage(&cfg, 2), &run) {
        Err(e @ Error::Prerequisite(_)) => {
            assert!(e.to_string().contains("stage1.ckpt"), "{e}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        construct(&cfg, &run, Some(0), true),
        Err(Error::Prerequisite(_))
    ));
}

#[test]
fn zero_step_teachers_are_written_and_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "zero");
    cfg.teachers.steps = 0;
    let run = RunDir::open(&cfg).unwrap();
    synth(&cfg, &run).unwrap();
    let report = pretrain_teachers(&cfg, &run).unwrap();
    for t in [&report.teacher_3d, &report.teacher_video] {
        assert!(t.untrained);
        assert_eq!(t.trained_steps, 0);
        assert_eq!(t.val_initial, t.val_final);
    }
    let t = load_teacher(&cfg, &run, TeacherKind::Video).unwrap();
    assert_eq!(t.trained_steps, 0);
}

#[test]
fn teacher_checkpoints_load_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path(), "tch");
    let run = RunDir::open(&cfg).unwrap();
    for (kind, file) in [
        (TeacherKind::MultiView, "teacher_3d.ckpt"),
        (TeacherKind::Video, "teacher_video.ckpt"),
    ] {
        let t = load_teacher(&cfg, &run, kind).unwrap();
        assert_eq!(t.trained_steps, 10);
        let mut p = t.params.clone();
        p.insert("meta.trained_steps", Tensor::scalar(10.0));
        let stored = std::fs::read(run.checkpoint(file)).unwrap();
        assert_eq!(checkpoint::encode(&p), stored);
    }
}

#[test]
fn full_run_then_stage_three_rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path(), "full");
    let run = RunDir::open(&cfg).unwrap();
    let reports = train(&cfg, &run).unwrap();
    assert_eq!(reports.len(), 4);
    for k in 1..=4 {
        assert!(run.checkpoint(&format!("stage{k}.ckpt")).is_file());
    }
    let rows = run.metrics().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[0].step <= w[1].step));
    assert_eq!(rows[3].step, 8 + 6 + 4 + 6);

    let first = std::fs::read(run.checkpoint("stage3.ckpt")).unwrap();
    train(&stage(&cfg, 3), &run).unwrap();
    let second = std::fs::read(run.checkpoint("stage3.ckpt")).unwrap();
    assert_eq!(first, second);
    // the rerun continues the step counter
    let rows = run.metrics().unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4].step, rows[3].step + 4);

    let m = run.manifest().unwrap();
    assert_eq!(m.commands.last().unwrap(), "train:stage3");
    assert!(m.artifacts.contains_key("checkpoints/stage4.ckpt"));
    assert!(!m.artifacts.contains_key("timing.csv"));
    assert_eq!(m.config_sha256.len(), 64);

    // conditional student evaluates through the text condition
    let s = evaluate(&cfg, &run, EvalTarget::Model(None)).unwrap();
    assert_eq!(s.rows, 2 * 2 * 3);
    assert!(s.psnr_mean.is_finite());
}

#[test]
fn disabled_transfer_stage_carries_weights_over() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path(), "skip");
    let run = RunDir::open(&cfg).unwrap();
    train(&stage(&cfg, 1), &run).unwrap();
    drop(run);
    cfg.stage2.enabled = false;
    // a different configuration needs its own directory
    assert!(matches!(RunDir::open(&cfg), Err(Error::Config(_))));
    cfg.run.id = "skip2".into();
    let run = RunDir::open(&cfg).unwrap();
    let src = dir.path().join("skip");
    for f in ["data", "frames", "checkpoints"] {
        copy_dir(&src.join(f), &run.path().join(f));
    }
    let r = train(&stage(&cfg, 2), &run).unwrap();
    assert!(r[0].skipped);
    let s1 = checkpoint::load(&run.checkpoint("stage1.ckpt")).unwrap();
    let s2 = checkpoint::load(&run.checkpoint("stage2.ckpt")).unwrap();
    for (k, v) in s1.iter() {
        assert_eq!(s2.get(k).unwrap(), v);
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let p = e.path();
        if p.is_dir() {
            copy_dir(&p, &to.join(e.file_name()));
        } else {
            std::fs::copy(&p, to.join(e.file_name())).unwrap();
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_partial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(dir.path(), "nan");
    let run = RunDir::open(&cfg).unwrap();
    train(&stage(&cfg, 1), &run).unwrap();
    let good = std::fs::read(run.checkpoint("stage1.ckpt")).unwrap();
    drop(run);
    let run_dir = dir.path().join("nan");
    std::fs::remove_file(run_dir.join("config.toml")).unwrap();
    cfg.stage3.lr = 1e200;
    let run = RunDir::open(&cfg).unwrap();
    train(&stage(&cfg, 2), &run).unwrap();
    match train(&stage(&cfg, 3), &run) {
        Err(e @ Error::Numerical(_)) => assert_eq!(e.exit_code(), 4),
        other => panic!("{other:?}"),
    }
    let partial = checkpoint::load(&run.checkpoint("stage3.partial.ckpt")).unwrap();
    assert!(partial.all_finite());
    assert!(!run.checkpoint("stage3.ckpt").exists());
    assert_eq!(std::fs::read(run.checkpoint("stage1.ckpt")).unwrap(), good);
}

#[test]
fn ground_truth_self_evaluation_and_summary_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "gt");
    let run = RunDir::open(&cfg).unwrap();
    synth(&cfg, &run).unwrap();
    let s = evaluate(&cfg, &run, EvalTarget::GroundTruth).unwrap();
    assert_eq!(s.psnr_mean, f64::INFINITY);
    assert_eq!(s.psnr_min, f64::INFINITY);
    assert_eq!(s.ssim_min, 1.0);
    assert_eq!(s.temporal_error, 0.0);
    let csv = std::fs::read_to_string(run.path().join("eval/gt.csv")).unwrap();
    let rows = parse_eval_csv(&csv).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows
        .iter()
        .all(|r| r.psnr == f64::INFINITY && r.ssim == 1.0));
    let stored = std::fs::read_to_string(run.path().join("eval/gt_summary.toml")).unwrap();
    assert_eq!(summary_from_csv(&csv).unwrap(), stored);
    assert!(stored.contains("psnr_mean = inf"));
}

#[test]
fn run_directory_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "lock");
    let run = RunDir::open(&cfg).unwrap();
    assert!(RunDir::open(&cfg).is_err());
    drop(run);
    RunDir::open(&cfg).unwrap();
}

#[test]
fn synth_is_reproducible_across_directories() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(&dir.path().join("a"), "r");
    let b = tiny(&dir.path().join("b"), "r");
    for c in [&a, &b] {
        synth(c, &RunDir::open(c).unwrap()).unwrap();
    }
    let pa = dir.path().join("a/r");
    let pb = dir.path().join("b/r");
    for f in [
        "frames/gt/scene1/v1_t2.ppm",
        "data/scene0.json",
        "config.toml",
    ] {
        assert_eq!(
            std::fs::read(pa.join(f)).unwrap(),
            std::fs::read(pb.join(f)).unwrap()
        );
    }
    let ma = std::fs::read(pa.join("manifest.json")).unwrap();
    let mb = std::fs::read(pb.join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn construct_round_trip_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "cons");
    let run = RunDir::open(&cfg).unwrap();
    synth(&cfg, &run).unwrap();
    let r = construct(&cfg, &run, Some(1), false).unwrap();
    assert_eq!(r.len(), 1);
    let (out, priors) = load_construct(&cfg, &run, 1).unwrap();
    assert!(priors.is_empty());
    assert_eq!(out.gaussians.len(), 48);
    assert!(matches!(
        load_construct(&cfg, &run, 0),
        Err(Error::Prerequisite(_))
    ));
}

#[test]
fn construction_prefers_true_frame_order_over_a_shuffle() {
    let orbit = OrbitConfig {
        views: 3,
        frames: 4,
        resolution: 16,
        ..Default::default()
    };
    let cfg = ConstructConfig {
        num_points: 96,
        coarse_iters: 120,
        fine_iters: 60,
        ..Default::default()
    };
    let fx = FeatureExtractor::new(7, 16);
    let mut wins = 0;
    for seed in [3u64, 4, 5] {
        let ds = synth_dataset(&SceneSpec::random(seed), &orbit).unwrap();
        let cams = ds.cameras().unwrap();
        let order = [0usize, 3, 1, 2];
        let views: Vec<Tensor> = (0..3)
            .map(|v| {
                let seq = ds.video.index_axis0(v).unwrap();
                let frames: Vec<Tensor> =
                    order.iter().map(|&t| seq.index_axis0(t).unwrap()).collect();
                Tensor::stack(&frames).unwrap()
            })
            .collect();
        let shuffled = Tensor::stack(&views).unwrap();
        let none = PriorBank::empty(16);
        let fit = |video: &Tensor| {
            let out = construct_4d(video, &ds.static_video, &cams, &none, &fx, &cfg).unwrap();
            let r = out.render_video(&none, &cams, 4, [0.0; 3]).unwrap();
            std4d::harness::pipeline::mean_psnr(&r, video).unwrap()
        };
        let (true_order, control) = (fit(&ds.video), fit(&shuffled));
        if true_order > control {
            wins += 1;
        }
    }
    assert_eq!(wins, 3);
}

#[test]
fn prior_banks_are_centred_with_unit_rms() {
    use rand::SeedableRng;
    let cfg = std4d::model::ModelConfig::default();
    let model = std4d::model::Std4dModel::new(cfg, 3).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let z = Tensor::randn(cfg.latent_shape().to_vec(), 1.0, &mut rng);
    let bank = std4d::harness::pipeline::prior_bank(&model, &z).unwrap();
    for t in [&bank.o_s, &bank.o_t] {
        let (n, d) = (t.shape()[0], t.shape()[1]);
        assert_eq!(d, cfg.tap_dim);
        for j in 0..d {
            let m: f64 = (0..n).map(|i| t.data()[i * d + j]).sum::<f64>() / n as f64;
            assert!(m.abs() < 1e-12, "column {j} mean {m}");
        }
        assert!((t.norm_sq() / t.numel() as f64 - 1.0).abs() < 1e-12);
    }
}

#[test]
fn teacher_priors_need_only_the_teachers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "tpri");
    cfg.priors.source = PriorSource::Teachers;
    let run = RunDir::open(&cfg).unwrap();
    synth(&cfg, &run).unwrap();
    pretrain_teachers(&cfg, &run).unwrap();
    construct(&cfg, &run, Some(0), true).unwrap();
    let (_, stored) = load_construct(&cfg, &run, 0).unwrap();
    let vae = load_vae(&cfg, &run).unwrap();
    let scenes = load_scenes(&cfg, &run).unwrap();
    let expected = teacher_prior_bank(
        &load_teacher(&cfg, &run, TeacherKind::MultiView).unwrap(),
        &load_teacher(&cfg, &run, TeacherKind::Video).unwrap(),
        &vae.encode(&scenes[0].video).unwrap(),
    )
    .unwrap();
    assert_eq!(stored.o_s, expected.o_s);
    assert_eq!(stored.o_t, expected.o_t);
    assert!(!stored.is_empty());
}

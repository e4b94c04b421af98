use std::path::{Path, PathBuf};
use std::process::Command;

use gacn::datagen::read_manifest;
use gacn::io::{read_image, write_image};
use gacn::net::fuse_images;
use gacn::trainer::read_log;
use gacn::{FusionConfig, FusionNet, Tensor};
use gacn_cli::{
    cmd_eval, cmd_fuse, cmd_fuse_stack, cmd_gen_data, cmd_synth, cmd_train, EvalArgs, FuseArgs,
    FuseStackArgs, GenDataArgs, Orientation, Preset, StrategyArg, SynthArgs, TrainArgs, EXIT_DATA,
    EXIT_USAGE,
};

fn gacn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gacn"))
        .args(args)
        .env("GACN_THREADS", "1")
        .output()
        .unwrap()
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap()
}

fn texture(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    let s = seed as f64;
    Tensor::from_fn([1, c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        0.5 + 0.4
            * ((0.7 + 0.1 * s) * x as f64 + ch as f64).sin()
            * ((0.45 + 0.05 * s) * y as f64).cos()
    })
}

fn weights(dir: &Path) -> PathBuf {
    let p = dir.join("w.gacn");
    FusionConfig::default().init_weights(5).save(&p).unwrap();
    p
}

fn train_args(manifest: PathBuf, out: PathBuf) -> TrainArgs {
    TrainArgs {
        manifest,
        out,
        preset: Preset::Desk,
        seed: 3,
        epochs: Some(1),
        batch_size: Some(2),
        lambda: None,
        lr: None,
        orientation: Orientation::Abs,
        resume: false,
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&gacn(&["no-such-command"])), EXIT_USAGE);
    assert_eq!(code(&gacn(&["fuse", "--a", "x.png"])), EXIT_USAGE);
    assert_eq!(
        code(&gacn(&[
            "train",
            "--manifest",
            "m.tsv",
            "--out",
            "o",
            "--orientation",
            "sideways"
        ])),
        EXIT_USAGE
    );
    assert_eq!(code(&gacn(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = gacn(&[
        "train",
        "--manifest",
        &format!("{d}/missing.tsv"),
        "--out",
        d,
    ]);
    assert_eq!(code(&out), EXIT_DATA);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.tsv"));
    let bad = dir.path().join("bad.gacn");
    std::fs::write(&bad, b"GACNW but not really").unwrap();
    let img = dir.path().join("a.png");
    write_image(&img, &texture(16, 16, 1, 0)).unwrap();
    let i = img.to_str().unwrap();
    let out = gacn(&[
        "fuse",
        "--a",
        i,
        "--b",
        i,
        "--weights",
        bad.to_str().unwrap(),
        "--out",
        &format!("{d}/f.png"),
    ]);
    assert_eq!(code(&out), EXIT_DATA);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.gacn"), "{err}");
}

#[test]
fn selfcheck_exits_zero() {
    let out = gacn(&["selfcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("all 9 checks passed"));
}

#[test]
fn gen_data_needs_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks) = (dir.path().join("img"), dir.path().join("mask"));
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&masks).unwrap();
    write_image(&images.join("x.png"), &texture(40, 40, 3, 1)).unwrap();
    let args = GenDataArgs {
        images: images.clone(),
        masks: masks.clone(),
        out: dir.path().join("out"),
        seed: 0,
        preset: Preset::Desk,
    };
    assert!(cmd_gen_data(&args).is_err());
    let missing = GenDataArgs {
        masks: dir.path().join("nope"),
        ..args
    };
    assert!(cmd_gen_data(&missing).is_err());
}

#[test]
fn gen_data_filters_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks) = (dir.path().join("img"), dir.path().join("mask"));
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&masks).unwrap();
    for (k, frac) in [0.3, 0.5, 0.0].into_iter().enumerate() {
        write_image(
            &images.join(format!("p{k}.png")),
            &texture(60, 80, 3, k as u64),
        )
        .unwrap();
        let m = Tensor::from_fn([1, 1, 60, 80], |i| {
            ((i % 80) as f64 / 80.0 < frac) as u8 as f64
        });
        write_image(&masks.join(format!("p{k}.png")), &m).unwrap();
    }
    let run = |out: &str| {
        cmd_gen_data(&GenDataArgs {
            images: images.clone(),
            masks: masks.clone(),
            out: dir.path().join(out),
            seed: 4,
            preset: Preset::Desk,
        })
        .unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!((a.accepted, a.rejected), (2, 1));
    assert_eq!(a.entries, b.entries);
    let ma = read_manifest(&dir.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(
        ma,
        read_manifest(&dir.path().join("b/manifest.tsv")).unwrap()
    );
    assert_eq!(ma.len(), 2);
    let s = ma[0].load(&dir.path().join("a")).unwrap();
    assert_eq!(s.near.shape(), &[1, 1, 160, 160]);
}

#[test]
fn synth_train_smoke_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let summary = cmd_synth(&SynthArgs {
        count: 4,
        out: data.clone(),
        seed: 1,
        preset: Preset::Desk,
    })
    .unwrap();
    assert_eq!(summary.accepted, 4);
    let run = dir.path().join("run");
    let log = cmd_train(&train_args(data.join("manifest.tsv"), run.clone())).unwrap();
    assert_eq!(log.len(), 1);
    assert!(run.join("checkpoint.gacn").is_file() && run.join("best.gacn").is_file());
    assert_eq!(read_log(&run.join("metrics.csv")).unwrap().len(), 1);
    let resumed = cmd_train(&TrainArgs {
        epochs: Some(2),
        resume: true,
        ..train_args(data.join("manifest.tsv"), run.clone())
    })
    .unwrap();
    assert_eq!(resumed.len(), 2);
    assert_eq!(resumed[0], log[0]);
    let err = cmd_train(&train_args(dir.path().join("none.tsv"), run)).unwrap_err();
    assert!(format!("{err:#}").contains("none.tsv"));
}

#[test]
fn fuse_identical_inputs_and_emit_maps() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    for c in [1, 3] {
        let img = texture(24, 28, c, 2);
        let p = dir.path().join(format!("in{c}.png"));
        write_image(&p, &img).unwrap();
        let out = dir.path().join(format!("fused{c}.png"));
        cmd_fuse(&FuseArgs {
            a: p.clone(),
            b: p.clone(),
            weights: w.clone(),
            out: out.clone(),
            emit_dm: c == 3,
        })
        .unwrap();
        let (src, fused) = (read_image(&p).unwrap(), read_image(&out).unwrap());
        assert_eq!(fused.shape(), src.shape());
        let worst = src
            .data()
            .iter()
            .zip(fused.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0 + 1e-12);
    }
    assert!(dir.path().join("fused3_dm_initial.png").is_file());
    assert!(dir.path().join("fused3_dm_final.png").is_file());
    assert!(!dir.path().join("fused1_dm_final.png").exists());
    let other = dir.path().join("small.png");
    write_image(&other, &texture(20, 28, 1, 2)).unwrap();
    let err = cmd_fuse(&FuseArgs {
        a: dir.path().join("in1.png"),
        b: other,
        weights: w,
        out: dir.path().join("x.png"),
        emit_dm: false,
    });
    assert!(err.is_err());
}

#[test]
fn fuse_stack_counts_and_two_image_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    let stack = dir.path().join("stack");
    std::fs::create_dir_all(&stack).unwrap();
    write_image(&stack.join("00.png"), &texture(20, 20, 1, 3)).unwrap();
    let args = |strategy, out: &str| FuseStackArgs {
        dir: stack.clone(),
        weights: w.clone(),
        out: dir.path().join(out),
        strategy,
        bench: None,
        bench_csv: None,
    };
    assert!(cmd_fuse_stack(&args(StrategyArg::Calibrated, "one.png")).is_err());
    write_image(&stack.join("01.png"), &texture(20, 20, 1, 6)).unwrap();
    let c = cmd_fuse_stack(&args(StrategyArg::Calibrated, "two.png")).unwrap();
    assert_eq!((c.extraction, c.decision), (2, 1));
    let (a, b) = (
        read_image(&stack.join("00.png")).unwrap(),
        read_image(&stack.join("01.png")).unwrap(),
    );
    let net = FusionNet::load(FusionConfig::default(), &w).unwrap();
    let (_, maps) = net.fuse_gray(&a, &b).unwrap();
    let hard = maps.final_dm.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
    assert_eq!(
        read_image(&dir.path().join("two.png")).unwrap(),
        fuse_images(&hard, &a, &b).unwrap()
    );
    for k in 2..5 {
        write_image(
            &stack.join(format!("{k:02}.png")),
            &texture(20, 20, 1, 3 * k),
        )
        .unwrap();
    }
    let s = cmd_fuse_stack(&args(StrategyArg::Serial, "serial.png")).unwrap();
    assert_eq!((s.extraction, s.decision), (8, 4));
    let mut bench = args(StrategyArg::Calibrated, "cal.png");
    bench.bench = Some(1);
    let c = cmd_fuse_stack(&bench).unwrap();
    assert_eq!((c.extraction, c.decision), (5, 4));
    let csv = std::fs::read_to_string(dir.path().join("cal_bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("serial,5,8,4,") && csv.contains("calibrated,5,5,4,"));
}

#[test]
fn eval_writes_one_row_per_pair_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    let pairs = dir.path().join("pairs");
    std::fs::create_dir_all(&pairs).unwrap();
    for k in 0..3u64 {
        write_image(&pairs.join(format!("s{k}_a.png")), &texture(20, 24, 1, k)).unwrap();
        write_image(
            &pairs.join(format!("s{k}_b.png")),
            &texture(20, 24, 1, k + 5),
        )
        .unwrap();
    }
    let out = dir.path().join("report.csv");
    let fused_dir = dir.path().join("fused");
    let report = cmd_eval(&EvalArgs {
        pairs_dir: pairs.clone(),
        weights: w.clone(),
        out: out.clone(),
        with_average: true,
        save_fused: Some(fused_dir.clone()),
    })
    .unwrap();
    assert_eq!(report.rows.len(), 6);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 7);
    assert!(fused_dir.join("s1_fused.png").is_file() && fused_dir.join("s1_diff.png").is_file());
    assert!(report.rows.iter().all(|r| (0.0..=0.98667).contains(&r.qg)));
    write_image(&pairs.join("s9_a.png"), &texture(20, 24, 1, 9)).unwrap();
    let orphan = cmd_eval(&EvalArgs {
        pairs_dir: pairs,
        weights: w,
        out,
        with_average: false,
        save_fused: None,
    });
    assert!(orphan.is_err());
}

#[test]
fn error_kinds_map_to_exit_codes() {
    use gacn_cli::{exit_code, EXIT_NUMERICAL};
    let numerical = anyhow::Error::new(gacn::Error::Numerical("nan".into())).context("training");
    assert_eq!(exit_code(&numerical), EXIT_NUMERICAL);
    let data = anyhow::Error::new(gacn::Error::InvalidArgument("x".into()));
    assert_eq!(exit_code(&data), EXIT_DATA);
    assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_DATA);
}

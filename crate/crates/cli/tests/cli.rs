use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbpfa::image::{load_image, save_image, YCbCrImage};
use cbpfa::load_model;
use cbpfa::synthetic::scene;

fn cbpfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbpfa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run cbpfa")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn image_dir(root: &Path, name: &str, seeds: &[u64], size: usize) -> PathBuf {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    for &s in seeds {
        save_image(
            &YCbCrImage::from_luma(scene(size, size, s)),
            dir.join(format!("img{s}.png")),
        )
        .unwrap();
    }
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_GIBBS: [&str; 12] = [
    "--method",
    "gibbs",
    "--burn-in",
    "2",
    "--collect",
    "2",
    "--k",
    "16",
    "--train-stride",
    "4",
    "--seed",
    "7",
];

#[test]
fn gibbs_smoke_writes_a_loadable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = image_dir(tmp.path(), "train", &[1, 2, 3], 32);
    let model = tmp.path().join("m.cbpd");
    let mut args = vec!["train", "--input", s(&dir), "--output", s(&model)];
    args.extend(TINY_GIBBS);
    let out = cbpfa(&args);
    assert!(out.status.success(), "{}", text(&out));
    let est = load_model(&model).unwrap();
    assert_eq!(est.k(), 16);
    assert_eq!(est.meta.patch_size, 8);
    assert_eq!(est.meta.provenance.method, "gibbs");
    let trace = std::fs::read_to_string(tmp.path().join("m.cbpd.trace.csv")).unwrap();
    assert!(trace.starts_with("sweep,loglik,used_elements,gamma,alpha"));
    assert_eq!(trace.lines().count(), 1 + 4);
}

#[test]
fn same_seed_gives_identical_model_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = image_dir(tmp.path(), "train", &[4, 5, 6], 32);
    let mut files = Vec::new();
    for (name, threads) in [("a.cbpd", "1"), ("b.cbpd", "3")] {
        let model = tmp.path().join(name);
        let mut args = vec!["train", "--input", s(&dir), "--output", s(&model), "--threads", threads];
        args.extend(TINY_GIBBS);
        let out = cbpfa(&args);
        assert!(out.status.success(), "{}", text(&out));
        files.push(std::fs::read(&model).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn online_training_runs_with_schedule_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = image_dir(tmp.path(), "train", &[1, 2], 32);
    let model = tmp.path().join("o.cbpd");
    let out = cbpfa(&[
        "train",
        "--input",
        s(&dir),
        "--output",
        s(&model),
        "--method",
        "online",
        "--mini-batch",
        "100",
        "--kappa",
        "0.501",
        "--rho0",
        "3",
        "--k",
        "16",
        "--train-stride",
        "2",
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let trace = std::fs::read_to_string(tmp.path().join("o.cbpd.trace.csv")).unwrap();
    assert!(trace.starts_with("t,rho,elbo_batch_estimate,used_elements,heldout_psnr_optional"));
}

#[test]
fn help_lists_defaults() {
    let out = cbpfa(&["train", "--help"]);
    let help = text(&out);
    for needle in [
        "--kappa",
        "[default: 0.501]",
        "--mini-batch",
        "[default: 5000]",
        "--max-patches",
        "[default: 100000]",
        "[default: 512]",
    ] {
        assert!(help.contains(needle), "missing {needle} in\n{help}");
    }
    let help = text(&cbpfa(&["sr", "--help"]));
    for needle in [
        "--stride",
        "--bp-c",
        "--code-mode",
        "--ground-truth",
        "--seed",
        "--threads",
    ] {
        assert!(help.contains(needle), "missing {needle} in\n{help}");
    }
}

#[test]
fn flags_override_config_file_and_bad_values_fail_early() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = image_dir(tmp.path(), "train", &[1], 32);
    let model = tmp.path().join("m.cbpd");
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, format!("input = {:?}\nkappa = 0.3\nk = 16\n", s(&dir))).unwrap();

    let out = cbpfa(&["--config", s(&cfg), "train", "--output", s(&model)]);
    assert!(!out.status.success());
    assert!(text(&out).contains("kappa"), "{}", text(&out));
    assert!(!model.exists());

    let mut args = vec!["--config", s(&cfg), "train", "--output", s(&model), "--kappa", "0.7"];
    args.extend(TINY_GIBBS);
    let out = cbpfa(&args);
    assert!(out.status.success(), "{}", text(&out));
    assert_eq!(load_model(&model).unwrap().k(), 16);
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "kapa = 0.6\n").unwrap();
    let out = cbpfa(&[
        "--config",
        s(&cfg),
        "downscale",
        "--input",
        "x.png",
        "--output",
        "y.png",
    ]);
    assert!(!out.status.success());
    assert!(text(&out).contains("kapa"), "{}", text(&out));
}

#[test]
fn downscale_crops_then_halves() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("in.png");
    save_image(&YCbCrImage::from_luma(scene(33, 21, 2)), &src).unwrap();
    let dst = tmp.path().join("out.png");
    let out = cbpfa(&["downscale", "--input", s(&src), "--output", s(&dst), "--ratio", "2"]);
    assert!(out.status.success(), "{}", text(&out));
    let img = load_image(&dst).unwrap();
    assert_eq!((img.width(), img.height()), (16, 10));
}

#[test]
fn sr_and_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let train = image_dir(tmp.path(), "train", &[1, 2, 3], 32);
    let test = image_dir(tmp.path(), "test", &[9, 10], 32);
    let model = tmp.path().join("m.cbpd");
    let mut args = vec!["train", "--input", s(&train), "--output", s(&model)];
    args.extend(TINY_GIBBS);
    assert!(cbpfa(&args).status.success());

    let gt = test.join("img9.png");
    let lr = tmp.path().join("lr.png");
    assert!(cbpfa(&["downscale", "--input", s(&gt), "--output", s(&lr)])
        .status
        .success());
    let hr = tmp.path().join("hr.png");
    let out = cbpfa(&[
        "sr",
        "--model",
        s(&model),
        "--input",
        s(&lr),
        "--output",
        s(&hr),
        "--ground-truth",
        s(&gt),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("bicubic"));
    let img = load_image(&hr).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    let report = tmp.path().join("report.csv");
    let out = cbpfa(&[
        "eval",
        "--input",
        s(&test),
        "--model",
        s(&model),
        "--output",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("image,method,psnr_db,seconds"));
    assert_eq!(lines.count(), 2 * 4);
    assert!(report.with_extension("txt").exists());
}

#[test]
fn eval_fails_on_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cbpfa(&["eval", "--input", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(text(&out).contains("no images"), "{}", text(&out));
}

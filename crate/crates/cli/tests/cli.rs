use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vdvae_sr::checkpoint;
use vdvae_sr::image::{load_image, save_png, RgbImage};
use vdvae_sr::toydata::{toy_images, write_toy_dataset};
use vdvae_sr::training::is_encoder_tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdvae-sr"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn data(root: &Path, size: usize) -> PathBuf {
    let dir = root.join(format!("data{size}"));
    write_toy_dataset(&dir, 3, size, 11).unwrap();
    dir
}

fn train_base(root: &Path, name: &str, steps: u32, seed: u32) -> PathBuf {
    let run_dir = root.join(name);
    let data = data(root, 16);
    ok(&[
        "train-base",
        "--data-dir",
        s(&data),
        "--run-dir",
        s(&run_dir),
        "--preset",
        "tiny16",
        "--max-steps",
        &steps.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    run_dir
}

fn train_sr(root: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let run_dir = root.join(name);
    let data = data(root, 16);
    let mut args = vec!["train-sr", "--data-dir", s(&data), "--run-dir", s(&run_dir), "--max-steps", "10"];
    args.extend_from_slice(extra);
    ok(&args);
    run_dir
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = run(&["train-base", "--data-dir", s(&missing), "--run-dir", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    assert_eq!(run(&["train-base"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let data = data(tmp.path(), 16);
    let bad_key = run(&[
        "train-base",
        "--data-dir",
        s(&data),
        "--run-dir",
        s(&tmp.path().join("r")),
        "--set",
        "train.nonsense=1",
    ]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_base_is_reproducible_and_feeds_train_sr() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_base(tmp.path(), "a", 100, 3);
    let b = train_base(tmp.path(), "b", 100, 3);
    assert_eq!(dir_bytes(&a.join("checkpoint")), dir_bytes(&b.join("checkpoint")));
    assert_eq!(fs::read_to_string(a.join("metrics.csv")).unwrap().lines().count(), 101);

    // The persisted config alone reproduces the run.
    let c = tmp.path().join("c");
    ok(&[
        "train-base",
        "--data-dir",
        s(&tmp.path().join("data16")),
        "--run-dir",
        s(&c),
        "--config",
        s(&a.join("run_config.toml")),
    ]);
    assert_eq!(dir_bytes(&a.join("checkpoint")), dir_bytes(&c.join("checkpoint")));

    let sr = train_sr(tmp.path(), "sr", &["--pretrained", s(&a.join("checkpoint"))]);
    let ckpt = checkpoint::load(sr.join("checkpoint")).unwrap();
    assert!(ckpt.sr.is_some());
}

#[test]
fn train_sr_modes_freezing_and_import_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let base = train_base(tmp.path(), "base", 5, 1).join("checkpoint");

    let scratch = run(&[
        "train-sr",
        "--data-dir",
        s(&data(tmp.path(), 16)),
        "--run-dir",
        s(&tmp.path().join("scratch")),
        "--preset",
        "tiny16",
        "--max-steps",
        "3",
    ]);
    assert!(scratch.status.success());
    assert!(stderr(&scratch).contains("from scratch"), "{}", stderr(&scratch));

    let ablation = train_sr(
        tmp.path(),
        "ablation",
        &["--pretrained", s(&base), "--condition-mode", "posterior_only"],
    );
    let manifest = fs::read_to_string(ablation.join("run.toml")).unwrap();
    assert!(manifest.contains("condition_mode = \"posterior_only\""), "{manifest}");
    assert!(manifest.contains("frozen_unchanged = true"), "{manifest}");
    let trained = checkpoint::load(ablation.join("checkpoint")).unwrap();
    let pretrained = checkpoint::load(&base).unwrap();
    let mut encoder = 0;
    for (name, t) in trained.params.iter().filter(|(n, _)| is_encoder_tensor(n)) {
        assert_eq!(t, pretrained.params.get(name).unwrap(), "{name}");
        encoder += 1;
    }
    assert!(encoder > 0);

    let mismatch = run(&[
        "train-sr",
        "--data-dir",
        s(&tmp.path().join("data16")),
        "--run-dir",
        s(&tmp.path().join("mismatch")),
        "--pretrained",
        s(&base),
        "--preset",
        "tiny16",
        "--set",
        "model.width=12",
    ]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(stderr(&mismatch).contains("offending tensors"), "{}", stderr(&mismatch));
}

#[test]
fn super_resolve_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let base = train_base(tmp.path(), "base", 5, 1).join("checkpoint");
    let model = train_sr(tmp.path(), "sr", &["--pretrained", s(&base)]).join("checkpoint");
    let input = tmp.path().join("in.png");
    save_png(&toy_images(1, 64, 5)[0], &input).unwrap();
    let sr = |out: &str, t: &str, extra: &[&str]| {
        let path = tmp.path().join(out);
        let mut args = vec![
            "super-resolve",
            "--model",
            s(&model),
            "--input",
            s(&input),
            "--output",
            s(&path),
            "--temperature",
            t,
            "--seed",
        ];
        args.push(if out.ends_with("b.png") { "9" } else { "1" });
        args.extend_from_slice(extra);
        ok(&args);
        path
    };
    let a = sr("t0a.png", "0", &[]);
    let b = sr("t0b.png", "0", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(load_image(&a).unwrap().shape(), (256, 256));
    let overlapped = sr("ov.png", "0.5", &["--overlap", "2"]);
    assert_eq!(load_image(&overlapped).unwrap().shape(), (256, 256));

    let wrong = run(&[
        "super-resolve",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--output",
        s(&tmp.path().join("x.png")),
        "--patch-size",
        "16",
    ]);
    assert_eq!(wrong.status.code(), Some(1));
    assert!(stderr(&wrong).contains("patch size"));

    let uncond = run(&[
        "super-resolve",
        "--model",
        s(&base),
        "--input",
        s(&input),
        "--output",
        s(&tmp.path().join("y.png")),
    ]);
    assert_eq!(uncond.status.code(), Some(1));
}

#[test]
fn patch_size_comparison_harness() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data(tmp.path(), 64);
    let model = |name: &str, res: &str, image: &str| {
        let run_dir = tmp.path().join(name);
        ok(&[
            "train-sr",
            "--data-dir",
            s(&data),
            "--run-dir",
            s(&run_dir),
            "--preset",
            "tiny16",
            "--set",
            &format!("model.image_size={image}"),
            "--set",
            &format!("model.resolutions={res}"),
            "--set",
            "model.z_channels=[2,2,2,2]",
            "--max-steps",
            "1",
        ]);
        run_dir.join("checkpoint")
    };
    let small = model("p16", "[8,16,32,64]", "64");
    let large = model("p64", "[32,64,128,256]", "256");
    let input = tmp.path().join("in.png");
    save_png(&toy_images(1, 64, 8)[0], &input).unwrap();
    let outputs: Vec<RgbImage> = [(small, "16"), (large, "64")]
        .iter()
        .map(|(m, p)| {
            let out = tmp.path().join(format!("out{p}.png"));
            ok(&[
                "super-resolve",
                "--model",
                s(m),
                "--input",
                s(&input),
                "--output",
                s(&out),
                "--patch-size",
                p,
                "--temperature",
                "0.1",
            ]);
            load_image(&out).unwrap()
        })
        .collect();
    assert_eq!(outputs[0].shape(), (256, 256));
    assert_eq!(outputs[1].shape(), (256, 256));
    assert_ne!(outputs[0], outputs[1]);
}

#[test]
fn evaluate_and_sweep_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let set = tmp.path().join("set");
    write_toy_dataset(&set, 2, 32, 4).unwrap();
    let out = tmp.path().join("identity");
    ok(&["evaluate", "--method", "identity", "--dataset", s(&set), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.ends_with(",inf,1.000000,0")), "{csv}");
    let summary = fs::read_to_string(out.join("summary.toml")).unwrap();
    for key in ["shave = 4", "temperature = 0.1", "seed = 0", "color_convention"] {
        assert!(summary.contains(key), "{key} missing from {summary}");
    }
    assert!(out.join("run_config.toml").is_file());

    let base = train_base(tmp.path(), "base", 5, 1).join("checkpoint");
    let model = train_sr(tmp.path(), "sr", &["--pretrained", s(&base)]).join("checkpoint");
    let sweep = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--model",
        s(&model),
        "--dataset",
        s(&set),
        "--out",
        s(&sweep),
        "--temps",
        "0.1,0.8",
    ]);
    let csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(sweep.join("sweep.png").is_file());
    let bad = run(&["sweep", "--model", s(&model), "--dataset", s(&set), "--out", s(&sweep), "--temps", "2"]);
    assert_eq!(bad.status.code(), Some(2));

    fs::write(set.join("broken.png"), b"garbage").unwrap();
    let partial = tmp.path().join("partial");
    let res = run(&["evaluate", "--method", "bicubic", "--dataset", s(&set), "--out", s(&partial)]);
    assert_eq!(res.status.code(), Some(1));
    let csv = fs::read_to_string(partial.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.contains("broken,,,1"));
}

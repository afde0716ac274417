use std::path::Path;
use std::process::{Command, Output};

use geoedit_core::backbone::{checkpoint, Denoiser, DenoiserConfig, NoiseSchedule};
use geoedit_core::imaging::{save_mask_png, save_png, ImageBuffer, MaskBuffer};

fn geoedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoedit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("GEOEDIT_CHECKPOINT")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny 8×8 checkpoint plus a scene with a 3×3 object.
fn fixture(dir: &Path) {
    let net = Denoiser::new(DenoiserConfig::tiny(), NoiseSchedule::default()).unwrap();
    checkpoint::save(&net, serde_json::json!({ "steps": 0 }), &dir.join("tiny.ckpt")).unwrap();
    let img = ImageBuffer::from_fn(8, 8, |y, x| if (2..5).contains(&y) && (1..4).contains(&x) { [0.8, 0.2, 0.1] } else { [0.3, 0.5, 0.4] });
    save_png(&img, dir.join("scene.png")).unwrap();
    save_mask_png(&MaskBuffer::from_fn(8, 8, |y, x| (2..5).contains(&y) && (1..4).contains(&x)), dir.join("mask.png")).unwrap();
}

fn edit_args<'a>(dir: &'a Path, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "edit",
        "--image",
        p(&dir.join("scene.png")),
        "--source-mask",
        p(&dir.join("mask.png")),
        "--checkpoint",
        p(&dir.join("tiny.ckpt")),
        "--steps",
        "5",
        "--tau0",
        "2",
        "--out",
        out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run(args: &[String]) -> Output {
    geoedit(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn help_documents_defaults() {
    let out = geoedit(&["edit", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["--source-mask", "--completion-mask", "--prompt", "--tau0", "--guidance-scale", "[default: 50]", "[default: 7.5]", "13 with a completion mask, 25 without"] {
        assert!(text.contains(needle), "{needle} missing from help");
    }
}

#[test]
fn edit_is_deterministic_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mv = ["--op", "move", "--direction", "right", "--magnitude", "0.25", "--seed", "3"];
    let o = run(&edit_args(dir.path(), p(&a), &mv));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run(&edit_args(dir.path(), p(&b), &mv)).status.success());
    // manifest.json carries timings, so only the images are compared
    for f in ["output.png", "coarse.png", "background.png", "target_mask.png", "composite.png"] {
        assert!(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let json = r#"{"op":"move","direction":"e","magnitude":0.25}"#;
    let c = dir.path().join("c");
    let o = run(&edit_args(dir.path(), p(&c), &["--instruction", json, "--seed", "3"]));
    assert!(o.status.success());
    assert!(std::fs::read(a.join("output.png")).unwrap() == std::fs::read(c.join("output.png")).unwrap());

    let bad = run(&edit_args(dir.path(), p(&c), &["--op", "move", "--direction", "cw", "--magnitude", "0.1"]));
    assert_eq!(bad.status.code(), Some(2));
    let far = run(&edit_args(dir.path(), p(&c), &["--op", "move", "--direction", "w", "--magnitude", "0.4"]));
    assert_eq!(far.status.code(), Some(3));
    let mut missing = edit_args(dir.path(), p(&c), &["--op", "resize", "--direction", "shrink", "--magnitude", "0.8"]);
    let i = missing.iter().position(|s| s == "--checkpoint").unwrap();
    missing[i + 1] = p(&dir.path().join("nope.ckpt")).to_string();
    assert_eq!(run(&missing).status.code(), Some(4));
    let mut gone = edit_args(dir.path(), p(&c), &["--op", "resize", "--direction", "shrink", "--magnitude", "0.8"]);
    gone[2] = p(&dir.path().join("absent.png")).to_string();
    assert_eq!(run(&gone).status.code(), Some(2));
}

#[test]
fn bench_generation_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(geoedit(&["gen-data", "--n", "3", "--seed", "1", "--out", p(&data)]).status.success());
    let (b1, b2) = (dir.path().join("b1"), dir.path().join("b2"));
    for b in [&b1, &b2] {
        let o = geoedit(&["gen-bench", "--images", p(&data), "--seed", "5", "--out", p(b)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(b1.join("manifest.json")).unwrap(), std::fs::read(b2.join("manifest.json")).unwrap());

    // eval on a manifest over 8×8 images with the tiny checkpoint
    fixture(dir.path());
    let small = dir.path().join("small");
    std::fs::create_dir_all(&small).unwrap();
    std::fs::copy(dir.path().join("scene.png"), small.join("scene.png")).unwrap();
    std::fs::copy(dir.path().join("mask.png"), small.join("mask.png")).unwrap();
    std::fs::write(small.join("index.json"), r#"[{"image":"scene.png","mask":"mask.png","label":"box","caption":"a box"}]"#).unwrap();
    let bench = dir.path().join("bench");
    assert!(geoedit(&["gen-bench", "--images", p(&small), "--seed", "2", "--out", p(&bench)]).status.success());
    let out = dir.path().join("eval");
    let (manifest, ckpt) = (bench.join("manifest.json"), dir.path().join("tiny.ckpt"));
    let args = [
        "eval", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--steps", "4", "--tau0", "2",
        "--embedder", "random", "--limit", "3", "--jobs", "2", "--out", p(&out),
    ];
    let o = geoedit(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv1 = std::fs::read(out.join("report.csv")).unwrap();
    let sum1 = std::fs::read(out.join("summary.json")).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv1).lines().count(), 4);
    // second run resumes from the per-sample cache and reproduces the reports
    assert!(geoedit(&args).status.success());
    assert_eq!(std::fs::read(out.join("report.csv")).unwrap(), csv1);
    assert_eq!(std::fs::read(out.join("summary.json")).unwrap(), sum1);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use canonix::image_io::{read_pnm, write_pnm};
use canonix::pipeline::checkpoint::sha256_hex;
use canonix::Tensor;

fn canonix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canonix"))
        .args(args)
        .output()
        .expect("spawn canonix")
}

fn ok(args: &[&str]) -> Output {
    let out = canonix(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn hashes(dir: &Path, files: &[&str]) -> Vec<String> {
    files.iter().map(|f| sha256_hex(&fs::read(dir.join(f)).unwrap())).collect()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--preset", "smoke", "--out", s(&a)]);
    ok(&["gen-data", "--preset", "smoke", "--out", s(&b)]);
    let files = ["dataset.json", "train.cxt", "val.cxt", "test.cxt"];
    assert_eq!(hashes(&a, &files), hashes(&b, &files));
    assert!(a.join("run_manifest.json").exists());
    assert!(!a.join(".canonix.lock").exists());
    let c = tmp.path().join("c");
    ok(&["gen-data", "--preset", "smoke", "--seed", "1", "--out", s(&c)]);
    assert_ne!(hashes(&a, &files[1..2]), hashes(&c, &files[1..2]));
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"data": {"image_sise": 32}}"#).unwrap();
    let out = canonix(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("data.image_sise"), "{err}");

    fs::write(&cfg, r#"{"eval": {"samples": 0}}"#).unwrap();
    let out = canonix(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = canonix(&["train", "--data", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_inputs_are_runtime_or_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = canonix(&[
        "eval",
        "--checkpoint",
        s(&tmp.path().join("nope")),
        "--data",
        s(&golden().join("data")),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn smoke_train_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--preset", "smoke", "--out", s(&data)]);

    let full = tmp.path().join("full");
    let t0 = Instant::now();
    ok(&["train", "--preset", "smoke", "--data", s(&data), "--out", s(&full)]);
    assert!(t0.elapsed() < Duration::from_secs(120));
    for f in ["checkpoint.json", "model.cxa", "optimizer.cxa", "epochs.csv"] {
        assert!(full.join("model").join(f).exists(), "{f}");
    }

    let part = tmp.path().join("part");
    let out = canonix(&[
        "train",
        "--preset",
        "smoke",
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--stop-after-epochs",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = canonix(&["train", "--preset", "smoke", "--data", s(&data), "--out", s(&part)]);
    assert_eq!(out.status.code(), Some(1), "existing stages need --resume");
    ok(&["train", "--preset", "smoke", "--data", s(&data), "--out", s(&part), "--resume"]);
    for stage in ["baseline", "model"] {
        let files = ["checkpoint.json", "model.cxa", "optimizer.cxa", "epochs.csv"];
        assert_eq!(
            hashes(&full.join(stage), &files),
            hashes(&part.join(stage), &files),
            "{stage}"
        );
    }

    let ckpt = full.join("model");
    for samples in ["1", "8"] {
        let ev = tmp.path().join(format!("eval{samples}"));
        ok(&[
            "eval", "--preset", "smoke", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev), "--orbit",
            "--samples", samples,
        ]);
        let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
        let mut r = csv::Reader::from_reader(csv.as_bytes());
        let h: Vec<&str> = r.headers().unwrap().iter().take(6).collect();
        assert_eq!(h, ["model", "testset", "samples", "top1", "correct", "total"]);
        let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|x| &x[2] == samples));
        let summary = fs::read_to_string(ev.join("summary.txt")).unwrap();
        assert!(summary.contains('%'), "{summary}");
    }

    let ev = tmp.path().join("sweep");
    ok(&[
        "eval", "--preset", "smoke", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev), "--orbit",
        "--sweep-samples", "1,2,4,8,16",
    ]);
    let sweep = fs::read_to_string(ev.join("sweep.csv")).unwrap();
    let orbit: Vec<&str> = sweep.lines().filter(|l| l.contains(",orbit,")).collect();
    let counts: Vec<&str> = orbit.iter().map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(counts, ["1", "2", "4", "8", "16"]);
}

#[test]
fn golden_checkpoint_reproduces_stored_metrics() {
    let g = golden();
    let tmp = tempfile::tempdir().unwrap();
    ok(&[
        "eval",
        "--config",
        s(&g.join("config.json")),
        "--checkpoint",
        s(&g.join("model")),
        "--data",
        s(&g.join("data")),
        "--out",
        s(tmp.path()),
        "--orbit",
        "--sheared-orbit",
        "--sweep-samples",
        "1,2,4",
    ]);
    for f in ["metrics.csv", "sweep.csv"] {
        assert_eq!(
            fs::read_to_string(tmp.path().join(f)).unwrap(),
            fs::read_to_string(g.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn identity_checkpoint_canonicalizes_to_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("id.json");
    fs::write(
        &cfg,
        r#"{"data": {"image_size": 16},
            "model": {"tokenizer": {"image_size": 16, "patch_size": 4, "embed_dim": 8},
                      "localizer": {"depth": 1, "scale_bias_init": -40.0}}}"#,
    )
    .unwrap();
    let ckpt = tmp.path().join("ckpt");
    ok(&["init", "--config", s(&cfg), "--out", s(&ckpt)]);

    let imgs: Vec<PathBuf> = (0..3)
        .map(|k| {
            let data: Vec<f64> = (0..256).map(|i| ((i * 37 + k * 11) % 256) as f64 / 255.0).collect();
            let p = tmp.path().join(format!("in{k}.pgm"));
            write_pnm(&p, &Tensor::new(vec![1, 16, 16], data).unwrap()).unwrap();
            p
        })
        .collect();
    let out = tmp.path().join("canon");
    let mut args = vec!["canonicalize", "--checkpoint", s(&ckpt), "--out", s(&out)];
    args.extend(imgs.iter().map(|p| s(p)));
    let stdout = String::from_utf8(ok(&args).stdout).unwrap();

    for (k, p) in imgs.iter().enumerate() {
        let produced = out.join(format!("in{k}.canonical.pgm"));
        assert_eq!(fs::read(&produced).unwrap(), fs::read(p).unwrap());
        assert_eq!(read_pnm(&produced).unwrap(), read_pnm(p).unwrap());
    }
    let report = fs::read_to_string(out.join("components.csv")).unwrap();
    assert_eq!(report, stdout);
    let mut r = csv::Reader::from_reader(report.as_bytes());
    let h: Vec<&str> = r.headers().unwrap().iter().skip(2).take(5).collect();
    assert_eq!(h, ["theta", "sx", "sy", "hx", "hy"]);
    for rec in r.records() {
        let rec = rec.unwrap();
        let v: Vec<f64> = (2..7).map(|i| rec[i].parse().unwrap()).collect();
        assert_eq!(v, [0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}

#[test]
fn canonicalize_rejects_wrong_size_images() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("big.pgm");
    write_pnm(&img, &Tensor::zeros(&[1, 20, 20])).unwrap();
    let out = canonix(&[
        "canonicalize",
        "--checkpoint",
        s(&golden().join("model")),
        "--out",
        s(&tmp.path().join("o")),
        s(&img),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selfcheck_flags_an_injected_backward_fault() {
    let out = ok(&["selfcheck", "--suite", "loss_anchors", "--suite", "group_laws"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("loss_anchors") && table.contains("group_laws"));

    let out = canonix(&["selfcheck", "--suite", "gradients", "--inject-fault", "tanh"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("gradients"), "{err}");
}

#[test]
fn busy_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(".canonix.lock"), "").unwrap();
    let out = canonix(&["gen-data", "--preset", "smoke", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
}

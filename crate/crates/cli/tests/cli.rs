use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use spinterp::schema::SynthDescriptor;
use spinterp_cli::manifest::{sidecar, RunManifest};

fn spinterp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinterp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim().lines().count(), 1, "one-line error expected: {text}");
    serde_json::from_str(text.trim()).expect("error line is JSON")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spinterp(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn other_descriptor(dir: &Path) -> std::path::PathBuf {
    let doc = SynthDescriptor::builtin_document().replace("name = \"mini-fm\"", "name = \"other-fm\"");
    let path = dir.join("other.toml");
    std::fs::write(&path, doc).unwrap();
    path
}

#[test]
fn dataset_checksums_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["dataset", "--n", "1000", "--seed", "7", "--out", "a.bin"]);
    ok(d, &["dataset", "--n", "1000", "--seed", "7", "--out", "b.bin"]);
    let (ma, mb) = (read_manifest(&sidecar(&d.join("a.bin"))), read_manifest(&sidecar(&d.join("b.bin"))));
    assert_eq!(ma.outputs[0].sha256, mb.outputs[0].sha256);
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.seed, Some(7));
    assert_eq!(std::fs::read(d.join("a.bin")).unwrap(), std::fs::read(d.join("b.bin")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = spinterp(d, &["dataset", "--descriptor", "missing.toml", "--n", "20", "--out", "c.bin"]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_error(&out);
    assert!(e["error"]["message"].as_str().unwrap().contains("missing.toml"));

    let out = spinterp(d, &["dataset", "--n", "5", "--out", "c.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_error(&out)["error"]["message"].as_str().unwrap().contains("n ≥ 10"));

    let out = spinterp(d, &["train", "--corpus", "nothing.bin", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_error(&out)["error"]["message"].as_str().unwrap().contains("nothing.bin"));

    let out = spinterp(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    stderr_error(&out);

    ok(d, &["dataset", "--n", "10", "--out", "c.bin"]);
    std::fs::write(d.join("bad.toml"), "epochs = 2\nwarp_factor = 9\n").unwrap();
    let out = spinterp(d, &["train", "--corpus", "c.bin", "--config", "bad.toml", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_error(&out)["error"]["message"].as_str().unwrap().contains("bad.toml"));

    let out = spinterp(d, &["train", "--corpus", "c.bin", "--batch-size", "0", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    stderr_error(&out);
}

#[test]
fn smoke_profile_trains_quickly_and_resumes_without_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["dataset", "--n", "64", "--seed", "1", "--out", "c.bin"]);

    let start = Instant::now();
    ok(d, &["train", "--corpus", "c.bin", "--epochs", "20", "--out", "smoke"]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "smoke profile took {elapsed:.1} s");
    let history = std::fs::read_to_string(d.join("smoke/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 21);
    let m = read_manifest(&d.join("smoke/manifest.json"));
    assert_eq!(m.command, "train");
    assert_eq!(m.outputs.len(), 3);

    std::fs::write(d.join("cfg.toml"), "epochs = 4\nbatch_size = 16\n[model]\nlatent_dim = 8\n").unwrap();
    let common = ["train", "--corpus", "c.bin", "--config", "cfg.toml", "--seed", "5"];
    let with = |extra: &[&str]| -> Vec<String> { common.iter().chain(extra).map(|s| s.to_string()).collect() };
    let args = with(&["--out", "full"]);
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    let args = with(&["--out", "part", "--stop-after", "2"]);
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(std::fs::read_to_string(d.join("part/history.csv")).unwrap().lines().count(), 3);
    let args = with(&["--out", "part", "--resume", "part/last.ckpt"]);
    ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());

    let full = std::fs::read_to_string(d.join("full/history.csv")).unwrap();
    let resumed = std::fs::read_to_string(d.join("part/history.csv")).unwrap();
    assert_eq!(full, resumed);
    let epochs: Vec<&str> = resumed.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);
    // Flags win over the config file.
    let cfg = read_manifest(&d.join("full/manifest.json")).config;
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["epochs"], 4);
    assert_eq!(cfg["model"]["latent_dim"], 8);
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["dataset", "--n", "10", "--out", "c.bin"]);
    let out = spinterp(
        d,
        &["train", "--corpus", "c.bin", "--epochs", "3", "--batch-size", "4", "--beta", "1e308", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let e = stderr_error(&out);
    assert_eq!(e["error"]["kind"], "non_finite");
    assert!(e["error"]["message"].as_str().unwrap().contains("step"));
}

#[test]
fn descriptor_mismatch_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let other = other_descriptor(d);
    let other = other.to_str().unwrap();
    ok(d, &["dataset", "--n", "20", "--out", "builtin.bin"]);
    ok(d, &["dataset", "--descriptor", other, "--n", "20", "--out", "other.bin"]);

    let out = spinterp(d, &["train", "--corpus", "builtin.bin", "--descriptor", other, "--out", "run"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_error(&out)["error"]["kind"], "descriptor_mismatch");

    ok(d, &["train", "--corpus", "builtin.bin", "--epochs", "1", "--out", "run"]);
    let out = spinterp(d, &["eval-interp", "--checkpoint", "run/best.ckpt", "--corpus", "other.bin", "--pairs", "1", "--out", "ev"]);
    assert_eq!(out.status.code(), Some(4));
    stderr_error(&out);

    let out = spinterp(
        d,
        &["train", "--corpus", "other.bin", "--descriptor", other, "--epochs", "1", "--resume", "run/last.ckpt", "--out", "run2"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_interp_outputs_and_cached_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["dataset", "--n", "100", "--seed", "2", "--out", "c.bin"]);
    ok(d, &["train", "--corpus", "c.bin", "--epochs", "1", "--out", "run"]);
    ok(d, &["eval-interp", "--checkpoint", "run/best.ckpt", "--corpus", "c.bin", "--pairs", "5", "--steps", "9", "--out", "ev"]);

    let wavs = std::fs::read_dir(d.join("ev/audio"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
        .count();
    assert_eq!(wavs, 2 * 5 * 9);
    let features = std::fs::read_to_string(d.join("ev/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 1 + 2 * 5 * 9);
    let report = std::fs::read_to_string(d.join("ev/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 48);
    let m = read_manifest(&d.join("ev/manifest.json"));
    assert!(m.outputs.len() > 2 * 5 * 9);

    ok(d, &["eval-interp", "--from-features", "ev/features.csv", "--out", "cached"]);
    for f in ["report.csv", "report.txt"] {
        assert_eq!(std::fs::read(d.join("ev").join(f)).unwrap(), std::fs::read(d.join("cached").join(f)).unwrap());
    }

    let summary = ok(d, &["eval-interp", "--from-features", "ev/features.csv", "--candidate", "reference", "--out", "self"]);
    assert!(summary.contains("(0 improved)"), "{summary}");
    let own = std::fs::read_to_string(d.join("self/report.csv")).unwrap();
    assert!(own.lines().skip(1).all(|l| l.ends_with(",0")));

    let out = spinterp(d, &["eval-interp", "--checkpoint", "run/best.ckpt", "--corpus", "c.bin", "--pairs", "6", "--out", "too-many"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["error"]["kind"], "insufficient_data");
}

#[test]
fn render_writes_wavs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["dataset", "--n", "20", "--out", "c.bin"]);
    ok(d, &["render", "--corpus", "c.bin", "--split", "train", "--limit", "3", "--out", "wav"]);
    let m = read_manifest(&d.join("wav/manifest.json"));
    assert_eq!(m.outputs.len(), 3);
    let bytes = std::fs::read(d.join(&m.outputs[0].path)).unwrap();
    assert_eq!(&bytes[..4], b"RIFF");

    std::fs::write(d.join("p.txt"), "oops\n").unwrap();
    let out = spinterp(d, &["render", "--presets", "p.txt", "--out", "wav2"]);
    assert_eq!(out.status.code(), Some(2));
    stderr_error(&out);
}

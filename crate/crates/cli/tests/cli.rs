use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use vistrans::Image;

const SMALL: &str = "\
seed = 5

[model]
d_model = 16
d_ff = 24
heads = 2
vit_layers = 1
mt_layers = 1
text_layers = 1
s2c_layers = 1
code_layers = 1
codebook_size = 16
codebook_dim = 4
subword_vocab = 64
head_channels = 4
perceptual_channels = 2,3,4

[stage1]
epochs = 2
batch_size = 2
warmup = 2

[stage2]
epochs = 2
batch_size = 2
warmup = 2

[eval]
recognizer_steps = 4
recognizer_synth = 8
";

fn vistrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vistrans")).args(args).output().expect("spawn vistrans")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn config(&self) -> PathBuf {
        self.root.join("small.conf")
    }
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn stage1(&self) -> PathBuf {
        self.root.join("s1")
    }
    fn stage2(&self) -> PathBuf {
        self.root.join("s2")
    }
}

/// Synthesizes four examples and trains both stages once for all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { root: dir.path().to_owned(), _dir: dir };
        fs::write(f.config(), SMALL).unwrap();
        let conf = f.config();
        let out = vistrans(&["synth", "--config", p(&conf), "--count", "4", "--out", p(&f.data())]);
        assert!(out.status.success(), "synth: {}", text(&out.stderr));
        let out = vistrans(&["train-stage1", "--config", p(&conf), "--data", p(&f.data()), "--out", p(&f.stage1())]);
        assert!(out.status.success(), "stage1: {}", text(&out.stderr));
        let ck1 = f.stage1().join("stage1.vtck");
        let out = vistrans(&["train-stage2", "--checkpoint", p(&ck1), "--data", p(&f.data()), "--out", p(&f.stage2())]);
        assert!(out.status.success(), "stage2: {}", text(&out.stderr));
        f
    })
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(vistrans(&["--help"]).status.code(), Some(0));
    assert_eq!(vistrans(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = vistrans(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_names_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "seed = 1\n\n[model]\nd_model = 16\nwidht = 512\n").unwrap();
    let out = vistrans(&["synth", "--config", p(&conf), "--count", "1", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("model.widht"), "{err}");
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.vtck");
    let out = vistrans(&["inspect", "--checkpoint", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("does not exist"));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.vtck");
    fs::write(&bad, b"VTCK\x09\x00\x00\x00").unwrap();
    let out = vistrans(&["inspect", "--checkpoint", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage1_loss_log_is_deterministic() {
    let f = fixture();
    let again = f.root.join("s1-again");
    let out = vistrans(&["train-stage1", "--config", p(&f.config()), "--data", p(&f.data()), "--out", p(&again)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let a = fs::read(f.stage1().join("stage1_loss.csv")).unwrap();
    let b = fs::read(again.join("stage1_loss.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(
        fs::read(f.stage1().join("stage1.vtck")).unwrap(),
        fs::read(again.join("stage1.vtck")).unwrap()
    );
}

#[test]
fn translate_needs_stage2_checkpoint() {
    let f = fixture();
    let ck1 = f.stage1().join("stage1.vtck");
    let src = first_png(&f.data());
    let out = vistrans(&["translate", "--checkpoint", p(&ck1), "--input", p(&src), "--lang", "de", "--out", p(&f.root.join("t0"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).to_lowercase().contains("stage"), "{}", text(&out.stderr));
}

#[test]
fn inspect_reports_lineage() {
    let f = fixture();
    let out = vistrans(&["inspect", "--checkpoint", p(&f.stage2().join("stage2.vtck"))]);
    assert!(out.status.success());
    let s = text(&out.stdout);
    assert!(s.contains("stage       stage2"), "{s}");
    assert!(s.contains("parent"), "{s}");
    assert!(s.contains("[model]"), "{s}");
}

#[test]
fn translate_writes_outputs() {
    let f = fixture();
    let ck2 = f.stage2().join("stage2.vtck");
    let out_dir = f.root.join("t1");
    let src = first_png(&f.data());
    let out = vistrans(&["translate", "--checkpoint", p(&ck2), "--input", p(&src), "--lang", "fr", "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let img = Image::read_png(&out_dir.join("output.png")).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (32, 512, 3));
    assert!(out_dir.join("codes.png").is_file());
    let info: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("translation.json")).unwrap()).unwrap();
    assert_eq!(info["lang"], "fr");
    assert!(info["text"].is_string());
}

#[test]
fn translate_rejects_wrong_canvas() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("short.png");
    Image::filled(31, 512, &[1.0, 1.0, 1.0]).write_png(&src).unwrap();
    let ck2 = f.stage2().join("stage2.vtck");
    let out = vistrans(&["translate", "--checkpoint", p(&ck2), "--input", p(&src), "--lang", "de", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("canvas must be 32x512x3"), "{err}");
    assert!(err.contains("31x512"), "{err}");
    assert!(!dir.path().join("output.png").exists());
}

#[test]
fn translate_rejects_unknown_language() {
    let f = fixture();
    let out = vistrans(&[
        "translate",
        "--checkpoint",
        p(&f.stage2().join("stage2.vtck")),
        "--input",
        p(&first_png(&f.data())),
        "--lang",
        "xx",
        "--out",
        p(&f.root.join("t2")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("xx"));
}

#[test]
fn evaluate_system_and_golden() {
    let f = fixture();
    let ck2 = f.stage2().join("stage2.vtck");
    let out_dir = f.root.join("eval");
    let out = vistrans(&[
        "evaluate",
        "--checkpoint",
        p(&ck2),
        "--data",
        p(&f.data()),
        "--train-data",
        p(&f.data()),
        "--out",
        p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let rec = out_dir.join("recognizer.vtck");
    assert!(rec.is_file());
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["mode"], "system");
    assert!(metrics["average_bleu"].is_number());

    let out = vistrans(&[
        "evaluate",
        "--golden",
        "--config",
        p(&f.config()),
        "--recognizer",
        p(&rec),
        "--data",
        p(&f.data()),
        "--out",
        p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let golden: serde_json::Value =
        serde_json::from_slice(&fs::read(out_dir.join("metrics_golden.json")).unwrap()).unwrap();
    assert_eq!(golden["mode"], "golden");
    assert_eq!(golden["system"], "golden");
}

fn first_png(dir: &Path) -> PathBuf {
    let mut found: Vec<PathBuf> = walk(dir).into_iter().filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
    found.sort();
    found.into_iter().find(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with("_src.png"))).expect("a source png")
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

use std::path::Path;
use std::process::{Command, Output};

use siclip::blocks::BlockGeometry;
use siclip::encoders::{ImageEncoderConfig, ModelConfig, StemStage, TextEncoderConfig};
use siclip::train::TrainConfig;

fn siclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siclip")).args(args).output().expect("spawn siclip")
}

fn ok(args: &[&str]) -> String {
    let out = siclip(args);
    assert!(
        out.status.success(),
        "siclip {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_toml(dir: &Path) -> String {
    TrainConfig {
        seed: 3,
        epochs: 1,
        batch_size: 8,
        warmup_steps: 1,
        train_manifest: dir.join("train"),
        eval_manifest: Some(dir.join("eval")),
        model: ModelConfig {
            geometry: BlockGeometry::new(16, 2),
            embed_dim: 8,
            image: ImageEncoderConfig {
                image_size: 32,
                stem: vec![StemStage { channels: 8, stride: 4 }, StemStage { channels: 16, stride: 4 }],
                n_blocks: 2,
            },
            text: TextEncoderConfig {
                vocab_size: 64,
                max_len: 16,
                n_blocks: 1,
            },
            ..Default::default()
        },
        ..Default::default()
    }
    .to_toml()
    .unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["gen-data", "--out", p(&d.join("train")), "--n", "24", "--captions", "2", "--seed", "1"]);
    ok(&["gen-data", "--out", p(&d.join("eval")), "--n", "8", "--seed", "2", "--eval"]);
    let cfg = d.join("cfg.toml");
    std::fs::write(&cfg, tiny_toml(d)).unwrap();

    ok(&["train", "--config", p(&cfg), "--out-dir", p(&d.join("run"))]);
    let ckpt = d.join("run/final.ckpt");
    assert!(ckpt.exists());
    assert!(d.join("run/config.toml").exists());
    assert_eq!(
        header(&d.join("run/metrics.csv")),
        "kind,step,epoch,lr,l_clip,l_fd,l_ic,l_crd,l_pm,l_total,r1_i2t,r1_t2i,loader_mode"
    );

    let eval = ok(&["eval", "--checkpoint", p(&ckpt), "--manifest", p(&d.join("eval"))]);
    assert!(eval.contains("n=8"), "{eval}");

    let js = d.join("js.csv");
    ok(&["analyze-js", "--checkpoint", p(&ckpt), "--manifest", p(&d.join("eval")), "--probe", "4", "--out", p(&js)]);
    let js_text = std::fs::read_to_string(&js).unwrap();
    assert_eq!(js_text.lines().next(), Some("pair_index,js_nats,clipped_mass"));
    assert_eq!(js_text.lines().count(), 2);

    let params = d.join("params.csv");
    ok(&["params", "--checkpoint", p(&ckpt), "--out", p(&params)]);
    let params_text = std::fs::read_to_string(&params).unwrap();
    assert_eq!(params_text.lines().next(), Some("module,trainable,frozen,total"));
    assert!(params_text.lines().last().unwrap().starts_with("total,"));
}

#[test]
fn bench_writes_both_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench.csv");
    ok(&[
        "bench", "--d", "16", "--heads", "2", "--n", "4", "--batch", "2", "--blocks", "2", "--reps", "3", "--warmup",
        "1", "--out", p(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let kinds: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(kinds, ["sasp", "preln"]);
}

#[test]
fn config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let printed = ok(&["config", "--teacher"]);
    let path = tmp.path().join("t.toml");
    std::fs::write(&path, &printed).unwrap();
    assert_eq!(ok(&["config", "--config", p(&path)]), printed);
    let teacher = TrainConfig::load(&path).unwrap();
    assert_eq!(teacher.epochs, TrainConfig::teacher_default().epochs);
}

#[test]
fn errors_exit_nonzero() {
    let out = siclip(&["eval", "--checkpoint", "/nonexistent.ckpt", "--manifest", "/nonexistent"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent"));
    let out = siclip(&["ablate", "--teacher", "t", "--single-caption", "s", "--loss-epoch", "0", "--out-dir", "o"]);
    assert!(!out.status.success());
}

use std::path::Path;
use std::process::{Command, Output};

use anfc_core::config::{ModelConfig, RunConfig, TrainConfig};
use anfc_core::image_io::{read_png, synthetic, write_png};
use anfc_core::model::Model;
use anfc_core::DType;

fn anfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anfc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn anfc")
}

fn json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let start = text.find('{').expect("json on stdout");
    serde_json::from_str(&text[start..]).expect("valid json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(anfc(&["--bogus"]).status.code(), Some(2));
    assert_eq!(anfc(&["encode", "--input", "a.png"]).status.code(), Some(2));
    assert_eq!(anfc(&["train", "--mode", "laplace"]).status.code(), Some(2));
    assert_eq!(anfc(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.safetensors");
    let out = anfc(&[
        "decode",
        "--model",
        s(&missing),
        "--input",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn encode_decode_round_trip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::tiny();
    cfg.residual_head = true;
    let model = Model::new(cfg, DType::F32, 3).unwrap();
    let model_path = dir.path().join("model.safetensors");
    model.save(&model_path).unwrap();
    let input = dir.path().join("crop.png");
    write_png(&input, &synthetic(2, 64, 128, DType::F32).unwrap()).unwrap();
    let out_dir = dir.path().join("out");

    for residual in ["off", "on"] {
        let enc = anfc(&[
            "encode",
            "--model",
            s(&model_path),
            "--input",
            s(&input),
            "--residual",
            residual,
            "--out",
            s(&out_dir),
        ]);
        assert!(
            enc.status.success(),
            "{}",
            String::from_utf8_lossy(&enc.stderr)
        );
        let v = json(&enc);
        let stream = out_dir.join("crop.anfc");
        let bytes = std::fs::metadata(&stream).unwrap().len();
        assert_eq!(v["bytes"].as_u64(), Some(bytes));
        assert_eq!(v["bpp"].as_f64(), Some(bytes as f64 * 8.0 / (64.0 * 128.0)));

        let dec = anfc(&[
            "decode",
            "--model",
            s(&model_path),
            "--input",
            s(&stream),
            "--out",
            s(&out_dir),
        ]);
        assert!(
            dec.status.success(),
            "{}",
            String::from_utf8_lossy(&dec.stderr)
        );
        let decoded = read_png(&out_dir.join("crop.png"), DType::F32).unwrap();
        let direct = anfc_core::codec::decode_image(
            &model,
            &std::fs::read(&stream).unwrap(),
            &Default::default(),
        )
        .unwrap();
        let a = anfc_core::image_io::to_rgb8(&decoded).unwrap();
        let b = anfc_core::image_io::to_rgb8(&direct.image).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn train_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    write_png(
        &data.join("a.png"),
        &synthetic(0, 64, 64, DType::F32).unwrap(),
    )
    .unwrap();
    let run = RunConfig {
        model: ModelConfig::tiny(),
        train: TrainConfig {
            batch_size: 1,
            crop_size: 64,
            max_steps: 3,
            log_every: 1,
            checkpoint_every: 0,
            ..TrainConfig::default()
        },
        data: None,
    };
    let config = dir.path().join("run.toml");
    std::fs::write(&config, run.to_toml_string().unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = anfc(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--mode",
        "gaussian",
        "--num-steps",
        "1",
        "--seed",
        "5",
        "--out",
        s(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(json(&out)["steps"].as_u64(), Some(3));
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let model = Model::load(&out_dir.join("model.safetensors"), DType::F32).unwrap();
    assert_eq!(model.config().flow.num_steps, 1);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = anfc(&["selftest", "--out", s(dir.path())]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{text}{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(
        text.lines().filter(|l| l.starts_with("PASS")).count() >= 8,
        "{text}"
    );
}

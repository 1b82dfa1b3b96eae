#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ivif_rlhf::data_pipeline::Manifest;
use ivif_rlhf_cli::run_cli;
use ivif_rlhf_cli::service::{router, Store};
use sha2::{Digest, Sha256};

/// A small, fast configuration for end-to-end command runs.
pub const DEMO_CONFIG: &str = r#"
seed = 3

[data]
splits = [1.0, 0.0, 0.0]

[reward.train]
epochs = 2

[policy.model]
channels = [4, 4, 4]

[policy.pretrain]
epochs = 2

[grpo]
epochs = 2
"#;

pub fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("ivif-rlhf").chain(args.iter().copied()))
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes the demo config and a synthetic dataset under `root`, then cleans
/// and splits it. Returns `(config, manifest, annotations dir)`.
pub fn prepare(root: &Path, pairs: usize) -> (PathBuf, PathBuf, PathBuf) {
    let config = root.join("run.toml");
    std::fs::write(&config, DEMO_CONFIG).unwrap();
    let data = root.join("data");
    let clusters = root.join("clusters.json");
    let manifest = root.join("manifest.json");
    let n = pairs.to_string();
    assert_eq!(cli(&["synthesize", "--config", s(&config), "--out", s(&data), "--pairs", &n, "--size", "32"]), 0);
    assert_eq!(cli(&["dedup", "--config", s(&config), "--input", s(&data.join("pairs")), "--out", s(&clusters)]), 0);
    let fused: Vec<String> = ivif_rlhf::synthetic::METHODS
        .iter()
        .map(|m| format!("{m}={}", data.join("fused").join(m).display()))
        .collect();
    assert_eq!(
        cli(&[
            "build-manifest",
            "--config",
            s(&config),
            "--clusters",
            s(&clusters),
            "--fused-dirs",
            &fused.join(","),
            "--out",
            s(&manifest),
        ]),
        0
    );
    (config, manifest, data.join("annotations"))
}

pub fn sha256(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Starts the annotation service on an ephemeral port; returns its base URL.
pub async fn spawn_service(manifest: &Path, store_dir: &Path) -> String {
    let manifest = Manifest::load(manifest).unwrap();
    let store = Arc::new(Store::open(store_dir, &manifest).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(store)).await.unwrap() });
    format!("http://{addr}")
}

/// A valid annotation document for a 32x32 image.
pub fn annotation(sharpness: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "scores": {
            "Thermal Retention": 4,
            "Texture Preservation": 3,
            "Artifacts": 2,
            "Sharpness": sharpness,
            "Overall Score": 3
        },
        "shapes": [{"label": "Artifacts", "points": [[10, 12], [14, 12]], "shape_type": "circle"}]
    })
}

/// Runs every training subcommand twice into separate directories and
/// returns the checksums of the history files of both runs.
pub fn training_checksums() -> (Vec<String>, Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let (config, manifest, annotations) = prepare(dir.path(), 2);
    let run = |tag: &str| {
        let out = dir.path().join(tag);
        let (c, m) = (s(&config), s(&manifest));
        let reward = out.join("reward.json");
        let policy = out.join("policy.json");
        let tuned = out.join("tuned.json");
        assert_eq!(cli(&["train-reward", "--config", c, "--manifest", m, "--annotations", s(&annotations), "--out", s(&reward)]), 0);
        assert_eq!(cli(&["pretrain-fusion", "--config", c, "--manifest", m, "--out", s(&policy)]), 0);
        assert_eq!(
            cli(&["finetune-grpo", "--config", c, "--policy", s(&policy), "--reward", s(&reward), "--manifest", m, "--out", s(&tuned)]),
            0
        );
        ["reward.json.history.csv", "policy.json.history.csv", "tuned.json.history.csv", "tuned.json"]
            .iter()
            .map(|f| sha256(&out.join(f)))
            .collect::<Vec<_>>()
    };
    (run("a"), run("b"))
}

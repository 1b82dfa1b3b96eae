mod common;

use common::{cli, prepare, s, training_checksums};

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["train-reward", "--help"]), 0);
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["train-reward", "--annotations", "a", "--out", "b"]), 1);
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[grpo]\nbetta = 1.0\n").unwrap();
    let out = dir.path().join("x");
    assert_eq!(cli(&["synthesize", "--config", s(&config), "--out", s(&out)]), 1);
}

#[test]
fn missing_inputs_exit_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("out.json");
    let code = cli(&["pretrain-fusion", "--manifest", s(&missing), "--out", s(&out)]);
    assert_ne!(code, 0);
    assert!(!out.exists());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (config, manifest, annotations) = prepare(root, 3);
    let c = s(&config);
    let m = s(&manifest);
    let reward = root.join("reward.json");
    let policy = root.join("policy.json");
    let tuned = root.join("tuned.json");
    assert_eq!(cli(&["train-reward", "--config", c, "--manifest", m, "--annotations", s(&annotations), "--out", s(&reward)]), 0);
    assert_eq!(cli(&["pretrain-fusion", "--config", c, "--manifest", m, "--out", s(&policy)]), 0);
    assert_eq!(
        cli(&["finetune-grpo", "--config", c, "--policy", s(&policy), "--reward", s(&reward), "--manifest", m, "--out", s(&tuned)]),
        0
    );
    let history = std::fs::read_to_string(root.join("tuned.json.history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,mean_reward,surrogate,kl,lr"));
    assert_eq!(history.lines().count(), 4);

    let report = root.join("eval.json");
    let eval_dir = root.join("eval");
    assert_eq!(
        cli(&[
            "eval-reward", "--config", c, "--ckpt", s(&reward), "--manifest", m,
            "--annotations", s(&annotations), "--report", s(&report), "--out-dir", s(&eval_dir),
        ]),
        0
    );
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let first = &doc["triplets"][0];
    assert!(first["scores"]["Overall Score"].is_number());
    assert!(first["discrepancy"]["score_err"].is_number());
    assert!(std::path::Path::new(first["overlay"].as_str().unwrap()).exists());

    let metrics = root.join("metrics.csv");
    assert_eq!(cli(&["evaluate", "--config", c, "--manifest", m, "--report", s(&metrics)]), 0);
    let table = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(table.lines().next(), Some("triplet_id,CC,PSNR,Qabf,SSIM"));
    let per_policy = root.join("policy_metrics.csv");
    assert_eq!(cli(&["evaluate", "--config", c, "--manifest", m, "--policy", s(&tuned), "--report", s(&per_policy)]), 0);
    assert!(std::fs::read_to_string(&per_policy).unwrap().lines().count() < table.lines().count());

    let pair = root.join("data").join("pairs");
    let fused = root.join("fused.png");
    assert_eq!(
        cli(&[
            "fuse", "--ckpt", s(&tuned),
            "--visible", s(&pair.join("visible").join("scene000.png")),
            "--infrared", s(&pair.join("infrared").join("scene000.png")),
            "--out", s(&fused),
        ]),
        0
    );
    assert_eq!(ivif_rlhf::image::probe_dims(&fused).unwrap(), (32, 32));
    let overlays = root.join("overlays");
    assert_eq!(cli(&["export-overlays", "--config", c, "--reward", s(&reward), "--manifest", m, "--out", s(&overlays)]), 0);
    assert!(std::fs::read_dir(&overlays).unwrap().count() > 0);
}

#[test]
fn training_commands_are_deterministic() {
    let (a, b) = training_checksums();
    assert_eq!(a, b);
}

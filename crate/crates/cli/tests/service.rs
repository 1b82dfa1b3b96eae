mod common;

use common::{annotation, prepare, spawn_service};
use ivif_rlhf::data_pipeline::Manifest;
use ivif_rlhf_cli::service::{read_events, replay, Store};
use serde_json::{json, Value};

async fn post(client: &reqwest::Client, url: String, body: &Value) -> (u16, Value) {
    let resp = client.post(url).json(body).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn annotation_workflow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest, _) = prepare(dir.path(), 2);
    let store_dir = dir.path().join("store");
    let base = spawn_service(&manifest, &store_dir).await;
    let client = reqwest::Client::new();

    let listing: Value = client.get(format!("{base}/tasks")).send().await.unwrap().json().await.unwrap();
    let tasks = listing["tasks"].as_array().unwrap();
    assert!(tasks.len() >= 3);
    assert!(tasks.iter().all(|t| t["status"] == "pending"));
    let ids: Vec<String> = tasks.iter().map(|t| t["triplet_id"].as_str().unwrap().to_string()).collect();

    let detail: Value = client.get(format!("{base}/tasks/{}", ids[0])).send().await.unwrap().json().await.unwrap();
    assert_eq!((detail["width"].as_u64(), detail["height"].as_u64()), (Some(32), Some(32)));
    let png = client.get(format!("{base}{}", detail["images"]["fused"].as_str().unwrap())).send().await.unwrap();
    assert_eq!(png.status().as_u16(), 200);
    assert!(png.bytes().await.unwrap().starts_with(b"\x89PNG"));

    let (code, body) = post(&client, format!("{base}/tasks/{}/annotation", ids[0]), &annotation(json!(7))).await;
    assert_eq!(code, 400);
    assert!(body["field"].as_str().unwrap().contains("Sharpness"), "{body}");

    let missing = client.get(format!("{base}/tasks/nope")).send().await.unwrap();
    assert_eq!(missing.status().as_u16(), 404);
    let (code, _) = post(&client, format!("{base}/tasks/nope/annotation"), &annotation(json!(3))).await;
    assert_eq!(code, 404);

    let (code, task) = post(&client, format!("{base}/tasks/{}/annotation", ids[0]), &annotation(json!(3))).await;
    assert_eq!(code, 200);
    assert_eq!(task["status"], "in_review");
    let (code, _) = post(&client, format!("{base}/tasks/{}/review", ids[0]), &json!({"decision": "maybe"})).await;
    assert_eq!(code, 400);
    let (code, task) = post(&client, format!("{base}/tasks/{}/review", ids[0]), &json!({"decision": "accept", "reviewer": "r1"})).await;
    assert_eq!(code, 200);
    assert_eq!(task["status"], "accepted");
    assert_eq!(task["record"]["reviewed"], true);
    let (code, _) = post(&client, format!("{base}/tasks/{}/annotation", ids[0]), &annotation(json!(3))).await;
    assert_eq!(code, 409);

    let mut auto = annotation(json!(4));
    auto["auto_annotated"] = json!(true);
    let (code, task) = post(&client, format!("{base}/tasks/{}/annotation", ids[1]), &auto).await;
    assert_eq!((code, task["status"].as_str()), (200, Some("auto_annotated")));
    let (code, _) = post(&client, format!("{base}/tasks/{}/review", ids[1]), &json!({"decision": "reject"})).await;
    assert_eq!(code, 409);

    let filtered: Value =
        client.get(format!("{base}/tasks?status=accepted")).send().await.unwrap().json().await.unwrap();
    assert_eq!(filtered["tasks"].as_array().unwrap().len(), 1);
    let export: Value = client.get(format!("{base}/export")).send().await.unwrap().json().await.unwrap();
    assert_eq!(export["count"], 1);
    assert_eq!(export["records"][0]["scores"]["Sharpness"], 3);

    let manifest = Manifest::load(&manifest).unwrap();
    let replayed = replay(&manifest, &read_events(&store_dir).unwrap()).unwrap();
    assert_eq!(replayed, Store::snapshot(&store_dir).unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest, _) = prepare(dir.path(), 1);
    let store_dir = dir.path().join("store");
    let base = spawn_service(&manifest, &store_dir).await;
    let client = reqwest::Client::new();
    let id = Manifest::load(&manifest).unwrap().entries[0].triplet_id.clone();
    for round in 0..5 {
        let url = format!("{base}/tasks/{id}/annotation");
        let body = annotation(json!(3));
        let (a, b) = tokio::join!(post(&client, url.clone(), &body), post(&client, url, &body));
        let mut codes = [a.0, b.0];
        codes.sort();
        assert_eq!(codes, [200, 409], "round {round}");
        // Send the task back to pending for the next round.
        let (code, _) = post(&client, format!("{base}/tasks/{id}/review"), &json!({"decision": "reject"})).await;
        assert_eq!(code, 200);
    }
    let manifest = Manifest::load(&manifest).unwrap();
    let events = read_events(&store_dir).unwrap();
    assert_eq!(events.len(), 10);
    assert_eq!(replay(&manifest, &events).unwrap(), Store::snapshot(&store_dir).unwrap());
}

#[tokio::test]
async fn restart_keeps_state() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest_path, _) = prepare(dir.path(), 1);
    let store_dir = dir.path().join("store");
    let manifest = Manifest::load(&manifest_path).unwrap();
    let id = manifest.entries[0].triplet_id.clone();
    {
        let store = Store::open(&store_dir, &manifest).unwrap();
        store
            .submit(&id, ivif_rlhf_cli::service::Action::Annotate { body: annotation(json!(2)) })
            .await
            .unwrap();
    }
    let store = Store::open(&store_dir, &manifest).unwrap();
    let task = store.get(&id).await.unwrap();
    assert_eq!(task.record.unwrap()["scores"]["Sharpness"], 2);
    assert_eq!(read_events(&store_dir).unwrap().len(), 1);
}

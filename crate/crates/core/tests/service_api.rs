use std::time::Duration;

use charfunnel::backends::{BackendConfig, Backends, ImagePayload, SimulatedBackend, SimulatedOptions};
use charfunnel::clustering;
use charfunnel::embedding::Embedding;
use charfunnel::pipeline::{Coordinator, IterationRecord, RunConfig, RunLog, RunObserver};
use charfunnel::projection::pca_2d;
use charfunnel::service::{ServiceHandle, ServiceOptions};
use nalgebra::{DMatrix, SymmetricEigen};
use reqwest::StatusCode;
use serde_json::{json, Value};

mod common;
use common::{client, poll_run};

fn start() -> ServiceHandle {
    ServiceHandle::start("127.0.0.1:0", ServiceOptions::default()).unwrap()
}

fn create(base: &str, job: Value) -> String {
    let resp = client().post(format!("{base}/api/runs")).json(&job).send().unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    resp.json::<Value>().unwrap()["run_id"].as_str().unwrap().to_string()
}

fn terminal(base: &str, run_id: &str) -> Value {
    poll_run(base, run_id, Duration::from_secs(120), |b| b["state"] == "terminal")
}

fn awaiting(base: &str, run_id: &str, iteration: usize) -> Value {
    poll_run(base, run_id, Duration::from_secs(60), |b| {
        b["state"] == "terminal" || b["pending_selection"]["iteration"] == iteration
    })
}

fn post_selection(base: &str, run_id: &str, k: usize, cluster: Value) -> (StatusCode, Value) {
    let resp = client()
        .post(format!("{base}/api/runs/{run_id}/iterations/{k}/selection"))
        .json(&json!({ "cluster_id": cluster }))
        .send()
        .unwrap();
    let status = resp.status();
    (status, resp.json().unwrap_or(Value::Null))
}

fn clusters(base: &str, run_id: &str, k: usize) -> (StatusCode, Value) {
    let resp = client()
        .get(format!("{base}/api/runs/{run_id}/iterations/{k}/clusters"))
        .send()
        .unwrap();
    let status = resp.status();
    (status, resp.json().unwrap_or(Value::Null))
}

#[derive(Default)]
struct Collect {
    sets: Vec<Vec<Embedding>>,
}

impl RunObserver for Collect {
    fn iteration_completed(&mut self, _: &IterationRecord, embeddings: &[Embedding], _: &[ImagePayload]) {
        self.sets.push(embeddings.to_vec());
    }
}

fn local_run(config: RunConfig) -> (RunLog, Vec<Vec<Embedding>>) {
    let backend = SimulatedBackend::new(&SimulatedOptions::default()).unwrap();
    let mut collect = Collect::default();
    let log = Coordinator::new(config, Backends::from_backend(&backend))
        .unwrap()
        .with_backend_config(BackendConfig::default())
        .with_observer(&mut collect)
        .run();
    (log, collect.sets)
}

#[test]
fn healthz() {
    let service = start();
    let body: Value = client()
        .get(format!("{}/api/healthz", service.url()))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(body, json!({ "status": "ok" }));
}

#[test]
fn invalid_configs_are_rejected_with_field_errors() {
    let service = start();
    for (job, field) in [
        (json!({ "prompt": "p", "n_images": 0 }), "n_images"),
        (json!({ "prompt": "p", "n_images": 4, "d_size_c": 5 }), "d_size_c"),
        (json!({ "prompt": "p", "ablations": { "reinit": 1 } }), "ablations.reinit"),
    ] {
        let resp = client()
            .post(format!("{}/api/runs", service.url()))
            .json(&job)
            .send()
            .unwrap();
        assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
        let body: Value = resp.json().unwrap();
        assert_eq!(body["fields"][0]["field"], field, "{body}");
    }
    let resp = client()
        .post(format!("{}/api/runs", service.url()))
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[test]
fn unknown_ids_are_not_found() {
    let service = start();
    let base = service.url();
    let c = client();
    assert_eq!(c.get(format!("{base}/api/runs/nope")).send().unwrap().status(), StatusCode::NOT_FOUND);
    assert_eq!(clusters(&base, "nope", 0).0, StatusCode::NOT_FOUND);
    assert_eq!(c.get(format!("{base}/api/payloads/nope")).send().unwrap().status(), StatusCode::NOT_FOUND);
    assert_eq!(post_selection(&base, "nope", 0, json!(0)).0, StatusCode::NOT_FOUND);
}

#[test]
fn auto_run_reaches_terminal_and_rejects_selection() {
    let service = start();
    let base = service.url();
    let id = create(&base, json!({ "prompt": "a ginger cat", "rng_seed": 4 }));
    let first = client().get(format!("{base}/api/runs/{id}")).send().unwrap().json::<Value>().unwrap();
    assert!(matches!(first["state"].as_str().unwrap(), "pending" | "running" | "terminal"));

    let done = terminal(&base, &id);
    assert_eq!(done["status"], "converged");
    assert_eq!(done["log"]["run_id"], id.as_str());
    let (status, body) = post_selection(&base, &id, 0, json!(0));
    assert_eq!(status, StatusCode::CONFLICT, "{body}");

    let (status, _) = clusters(&base, &id, 99);
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn cluster_view_matches_independent_clustering() {
    let service = start();
    let base = service.url();
    let id = create(&base, json!({ "prompt": "a ginger cat", "rng_seed": 8 }));
    let done = terminal(&base, &id);
    let log: RunLog = serde_json::from_value(done["log"].clone()).unwrap();

    let mut config = RunConfig::new("a ginger cat");
    config.rng_seed = Some(8);
    let (local, sets) = local_run(config);
    assert_eq!(common::stable_json(&local), common::stable_json(&log));

    for (k, record) in log.iterations.iter().enumerate() {
        let (status, view) = clusters(&base, &id, k);
        assert_eq!(status, StatusCode::OK);
        let set = &sets[k];
        let independent = clustering::kmeans_pp(set, record.k_requested.unwrap(), record.clustering_seed.unwrap()).unwrap();
        let cards = view["clusters"].as_array().unwrap();
        assert_eq!(cards.len(), independent.clusters.len());
        let projection = pca_2d(set).unwrap();
        for (card, cluster) in cards.iter().zip(&independent.clusters) {
            assert_eq!(card["id"], cluster.id);
            assert_eq!(card["size"], cluster.size());
            assert!((card["cohesion"].as_f64().unwrap() - cluster.cohesion).abs() < 1e-9);
            assert_eq!(card["eligible"], cluster.size() > 5);
            let reps = card["representatives"].as_array().unwrap();
            assert!(!reps.is_empty() && reps.len() <= 5);
            for (point, &m) in card["member_points_2d"].as_array().unwrap().iter().zip(&cluster.members) {
                for axis in 0..2 {
                    assert!((point[axis].as_f64().unwrap() - projection.coords[m][axis]).abs() < 1e-9);
                }
            }
        }
        assert_eq!(view["chosen_cluster"], json!(record.chosen_cluster));
    }
}

#[test]
fn payloads_render_latents_as_vectors() {
    let service = start();
    let base = service.url();
    let id = create(&base, json!({ "prompt": "p", "rng_seed": 2, "d_iter": 1 }));
    terminal(&base, &id);
    let (_, view) = clusters(&base, &id, 0);
    let rep = &view["clusters"][0]["representatives"][0];
    assert_eq!(rep["uri"], format!("/api/payloads/{}", rep["id"].as_str().unwrap()));
    let body: Value = client()
        .get(format!("{base}{}", rep["uri"].as_str().unwrap()))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(body["latent"].as_array().unwrap().len(), 64);
}

#[test]
fn manual_selection_flow() {
    let service = start();
    let base = service.url();
    let id = create(&base, json!({ "prompt": "p", "rng_seed": 11, "selection_mode": "manual", "d_min_c": 6 }));

    let waiting = awaiting(&base, &id, 0);
    assert_eq!(waiting["state"], "awaiting_selection", "{waiting}");
    assert_eq!(waiting["selection_pending"], true);
    let (status, view) = clusters(&base, &id, 0);
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["selection_pending"], true);
    let cards = view["clusters"].as_array().unwrap();
    let small = cards.iter().find(|c| c["eligible"] == false).expect("a filtered cluster");
    let eligible: Vec<&Value> = cards.iter().filter(|c| c["eligible"] == true).collect();
    let pick = eligible.last().unwrap()["id"].clone();

    let (status, body) = post_selection(&base, &id, 0, small["id"].clone());
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("cluster below minimum size"), "{body}");
    let (status, _) = post_selection(&base, &id, 0, json!(9999));
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = post_selection(&base, &id, 1, pick.clone());
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = post_selection(&base, &id, 0, json!("three"));
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = post_selection(&base, &id, 0, pick.clone());
    assert_eq!(status, StatusCode::OK);
    let (status, _) = post_selection(&base, &id, 0, pick.clone());
    assert_eq!(status, StatusCode::CONFLICT, "a selection is consumed once");

    let mut k = 1;
    loop {
        let body = awaiting(&base, &id, k);
        if body["state"] == "terminal" {
            break;
        }
        let suggested = body["pending_selection"]["suggested"].clone();
        assert_eq!(post_selection(&base, &id, k, suggested).0, StatusCode::OK);
        k += 1;
    }
    let done = terminal(&base, &id);
    assert_eq!(done["status"], "converged");
    let first = &done["log"]["iterations"][0];
    assert_eq!(first["selection_source"], "manual");
    assert_eq!(first["chosen_cluster"], pick);
    assert_eq!(post_selection(&base, &id, k, json!(0)).0, StatusCode::CONFLICT);
}

#[test]
fn ablated_clustering_has_no_cluster_view() {
    let service = start();
    let base = service.url();
    let id = create(&base, json!({ "prompt": "p", "rng_seed": 1, "d_iter": 1, "ablations": { "no_clustering": true } }));
    terminal(&base, &id);
    assert_eq!(clusters(&base, &id, 0).0, StatusCode::NOT_FOUND);
}

#[test]
fn shutdown_interrupts_waiting_runs_and_exports_logs() {
    let export = tempfile::tempdir().unwrap();
    let service = ServiceHandle::start(
        "127.0.0.1:0",
        ServiceOptions {
            export_dir: Some(export.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let base = service.url();
    let id = create(&base, json!({ "prompt": "p", "rng_seed": 3, "selection_mode": "manual" }));
    awaiting(&base, &id, 0);
    let state = service.state().clone();
    service.shutdown().unwrap();

    let view = state.get_run(&id).unwrap();
    assert_eq!(serde_json::to_value(view.status).unwrap(), "interrupted");
    let dir = export.path().join(&id);
    let log: RunLog = serde_json::from_str(&std::fs::read_to_string(dir.join("runlog.json")).unwrap()).unwrap();
    assert_eq!(log.run_id, id);
    assert!(log.iterations.is_empty());
}

#[test]
fn concurrent_runs_are_isolated() {
    let service = start();
    let base = service.url();
    let ids: Vec<String> = (0..4)
        .map(|s| create(&base, json!({ "prompt": "p", "rng_seed": 20 + s })))
        .collect();
    for (s, id) in ids.iter().enumerate() {
        let done = terminal(&base, id);
        let log: RunLog = serde_json::from_value(done["log"].clone()).unwrap();
        let mut config = RunConfig::new("p");
        config.rng_seed = Some(20 + s as u64);
        let (local, _) = local_run(config);
        assert_eq!(common::stable_json(&local), common::stable_json(&log));
    }
}

#[test]
fn pca_explained_variance_matches_covariance_eigenvalues() {
    let mut rng = common::rng(77);
    for trial in 0..20 {
        let n = 30 + trial * 5;
        let set = common::random_unit_set(&mut rng, n, 64);
        let projection = pca_2d(&set).unwrap();

        let mean = common::brute_centroid(&set);
        let centered = DMatrix::from_fn(n, 64, |i, j| set[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for c in 0..2 {
            assert!(
                (projection.explained_variance[c] - eig[c]).abs() < 1e-7,
                "trial {trial} component {c}: {} vs {}",
                projection.explained_variance[c],
                eig[c]
            );
        }
    }
}

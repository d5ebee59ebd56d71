//! Starts the REST service, creates a manual-selection run and steers it by
//! posting cluster choices, the way the browser client does.
//!
//!     cargo run --example manual_selection_service

use std::time::Duration;

use charfunnel::service::{ServiceHandle, ServiceOptions};
use serde_json::{json, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let service = ServiceHandle::start("127.0.0.1:0", ServiceOptions::default())?;
    let base = service.url();
    let http = reqwest::blocking::Client::new();
    println!("service at {base}");

    let created: Value = http
        .post(format!("{base}/api/runs"))
        .json(&json!({ "prompt": "a ginger cat", "rng_seed": 5, "selection_mode": "manual" }))
        .send()?
        .json()?;
    let id = created["run_id"].as_str().ok_or("no run id")?.to_string();
    println!("created {id}");

    loop {
        let run: Value = http.get(format!("{base}/api/runs/{id}")).send()?.json()?;
        if run["state"] == "terminal" {
            println!("finished: {}", run["status"]);
            break;
        }
        let Some(k) = run["pending_selection"]["iteration"].as_u64() else {
            std::thread::sleep(Duration::from_millis(50));
            continue;
        };
        let view: Value = http
            .get(format!("{base}/api/runs/{id}/iterations/{k}/clusters"))
            .send()?
            .json()?;
        let clusters = view["clusters"].as_array().ok_or("no clusters")?;
        // take the largest eligible cluster rather than the suggestion
        let pick = clusters
            .iter()
            .filter(|c| c["eligible"] == true)
            .max_by_key(|c| c["size"].as_u64())
            .ok_or("nothing selectable")?;
        println!(
            "iteration {k}: {} clusters, suggested {}, choosing {} (size {}, cohesion {:.4})",
            clusters.len(),
            view["suggested"],
            pick["id"],
            pick["size"],
            pick["cohesion"].as_f64().unwrap_or(f64::NAN)
        );
        let resp = http
            .post(format!("{base}/api/runs/{id}/iterations/{k}/selection"))
            .json(&json!({ "cluster_id": pick["id"] }))
            .send()?;
        println!("  -> {}", resp.status());
    }
    service.shutdown()?;
    Ok(())
}

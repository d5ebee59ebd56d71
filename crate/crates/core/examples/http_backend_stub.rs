//! The HTTP backend against the bundled stub server: a short run, then a
//! transient failure that the client retries.
//!
//!     cargo run --example http_backend_stub

use charfunnel::backends::stub::{StubEndpoint, StubFixtures, StubServer};
use charfunnel::backends::{Backends, Generator, HttpBackend, HttpOptions};
use charfunnel::pipeline::{self, Convergence, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let stub = StubServer::start(StubFixtures::bundled())?;
    println!("stub listening at {}", stub.url());
    let backend = HttpBackend::new(HttpOptions {
        url: stub.url(),
        backoff_ms: 10,
        ..Default::default()
    })?;

    let mut config = RunConfig::new("a ginger cat");
    config.n_images = 6;
    config.d_size_c = 2;
    config.d_min_c = 1;
    config.rng_seed = Some(1);
    config.convergence = Convergence::Absolute(1.0);
    config.d_iter = 2;
    let log = pipeline::run(config, Backends::from_backend(&backend))?;
    println!("status {:?}, final model {:?}", log.status, log.final_representation);

    stub.fail_next(StubEndpoint::Generate, 2, 503, "warming up");
    let images = backend.generate(&backend.initial_representation(), "a ginger cat", 2, 9)?;
    println!("generated {} images after two 503s", images.len());
    for r in stub.requests() {
        println!("{} {}", r.path, r.body);
    }
    Ok(())
}

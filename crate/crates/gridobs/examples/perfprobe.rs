use gridobs::bench::make_synthetic_network;
use gridobs::fg::SweepConfig;
use gridobs::islands::{detect_islands, ProbePolicy};
use gridobs::model::generate_measurement_config;
use std::time::Instant;

fn main() {
    let cfg = SweepConfig::default();
    let net = make_synthetic_network(10000, 2.8, 42).unwrap();
    for &red in &[1.5f64, 2.0, 2.5, 3.0, 3.3] {
        let ms = generate_measurement_config(&net, red, 7).unwrap();
        let t = Instant::now();
        let det = detect_islands(&net, &ms, ProbePolicy::LowestId, &cfg).unwrap();
        println!(
            "red={} m={} k={} rejected={} updates={} in {:?}",
            red,
            ms.len(),
            det.partition.n_islands(),
            det.rejected_rows.len(),
            det.message_updates,
            t.elapsed()
        );
    }
}

//! Synthetic networks and the timing harness comparing detection methods.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

use crate::model::{ModelError, PowerNetwork};

// ============================================================================
// Synthetic networks
// ============================================================================

/// Generates a connected random network: a uniform random recursive tree on
/// `buses` nodes, then distinct extra edges drawn uniformly until the edge
/// count reaches `round(avg_degree * buses / 2)` (capped at the complete
/// graph). Deterministic in `(buses, avg_degree, seed)`.
pub fn make_synthetic_network(
    buses: usize,
    avg_degree: f64,
    seed: u64,
) -> Result<PowerNetwork, ModelError> {
    assert!(buses >= 2, "a network needs at least two buses");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut present = HashSet::new();
    for i in 1..buses {
        let parent = rng.gen_range(0..i);
        edges.push((parent, i));
        present.insert((parent, i));
    }
    let complete = buses * (buses - 1) / 2;
    let target = ((avg_degree * buses as f64 / 2.0).round() as usize)
        .clamp(buses - 1, complete);
    while edges.len() < target {
        let a = rng.gen_range(0..buses);
        let b = rng.gen_range(0..buses);
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if present.insert(key) {
            edges.push(key);
        }
    }
    PowerNetwork::from_edges(buses, &edges)
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_network_is_deterministic() {
        let a = make_synthetic_network(30, 2.5, 7).unwrap();
        let b = make_synthetic_network(30, 2.5, 7).unwrap();
        let ea: Vec<(usize, usize)> = a.branches().iter().map(|br| (br.from, br.to)).collect();
        let eb: Vec<(usize, usize)> = b.branches().iter().map(|br| (br.from, br.to)).collect();
        assert_eq!(ea, eb);
        let c = make_synthetic_network(30, 2.5, 8).unwrap();
        let ec: Vec<(usize, usize)> = c.branches().iter().map(|br| (br.from, br.to)).collect();
        assert_ne!(ea, ec);
    }

    #[test]
    fn synthetic_network_hits_edge_target() {
        let net = make_synthetic_network(6, 2.0, 3).unwrap();
        assert_eq!(net.n_branches(), 6);
        let net = make_synthetic_network(100, 3.0, 11).unwrap();
        assert_eq!(net.n_branches(), 150);
        // Sparse request still yields a spanning tree.
        let net = make_synthetic_network(10, 0.5, 5).unwrap();
        assert_eq!(net.n_branches(), 9);
        // Dense request caps at the complete graph.
        let net = make_synthetic_network(4, 5.0, 5).unwrap();
        assert_eq!(net.n_branches(), 6);
    }

    #[test]
    fn synthetic_network_edges_are_simple() {
        let net = make_synthetic_network(40, 3.5, 123).unwrap();
        let mut seen = HashSet::new();
        for br in net.branches() {
            assert_ne!(br.from, br.to);
            let key = (br.from.min(br.to), br.from.max(br.to));
            assert!(seen.insert(key), "duplicate edge {key:?}");
        }
    }
}

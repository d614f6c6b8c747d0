//! Fixtures for the benchmarks.

use rand::Rng;
use reasongraph::rng;
use reasongraph::scg::{ConceptDetection, HypothesisSet, Scg};

/// One hypothesis per class with random detected nodes.
pub fn random_hypotheses(n_classes: usize, n_nodes: usize, dim: usize, seed: u64) -> HypothesisSet {
    let mut r = rng::stream(seed, "bench/hyp", 0);
    let graphs = (0..n_classes)
        .map(|c| {
            let nodes = (0..n_nodes)
                .map(|k| ConceptDetection {
                    concept_id: k,
                    detected: true,
                    feature: (0..dim).map(|_| r.random_range(0.0..2.0)).collect(),
                    location: [r.random_range(0.0..1.0), r.random_range(0.0..1.0)],
                    distance: Some(1.0),
                    bbox: None,
                    level: None,
                })
                .collect();
            Scg::from_nodes(c, None, nodes)
        })
        .collect();
    HypothesisSet { image_id: None, graphs }
}

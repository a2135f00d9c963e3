//! Builds the anchor gradient on the synthetic benchmark and scores the
//! domain pool against it, printing the most conflicting and the safest
//! samples and writing the geometry table as CSV.
//!
//! ```bash
//! cargo run --example anchor_and_scoring
//! ```

use ogs::bench::{gen_synthetic_tasks, standard_bench};
use ogs::geometry::{build_anchor_gradient, score_pool};
use ogs::pipeline::{pretrained_init, select_anchor_ids, ExperimentConfig};

fn main() {
    let pools = gen_synthetic_tasks(&standard_bench()).unwrap();
    let config = ExperimentConfig::default();

    // The navigator starts pretrained on the general pool, which is where
    // its gradients carry meaningful geometry.
    let (navigator, _) =
        pretrained_init(&config.navigator, &config, &pools.general, "navigator-init").unwrap();

    let anchor_ids = select_anchor_ids(&config, &pools, &navigator).unwrap();
    let anchor_samples: Vec<_> = pools
        .general
        .iter()
        .filter(|s| anchor_ids.contains(&s.id))
        .cloned()
        .collect();
    let anchor = build_anchor_gradient(&config.navigator, &navigator, &anchor_samples).unwrap();
    println!(
        "anchor over {} general samples, |g_ref| = {:.4}",
        anchor.anchor_ids.len(),
        anchor.g_ref.norm()
    );

    let table = score_pool(&config.navigator, &navigator, &pools.domain, &anchor).unwrap();
    let mut by_conf: Vec<_> = table.records.iter().collect();
    by_conf.sort_by(|a, b| b.conf.total_cmp(&a.conf));
    println!("\nmost conflicting domain samples (training them forgets):");
    for r in by_conf.iter().take(5) {
        println!("  id {:>3}  conf {:+.3}  orth {:.3}  |g| {:.3}", r.sample_id, r.conf, r.orth, r.grad_norm);
    }

    let mut by_orth: Vec<_> = table.records.iter().collect();
    by_orth.sort_by(|a, b| b.orth.total_cmp(&a.orth));
    println!("most orthogonal domain samples (free to train):");
    for r in by_orth.iter().take(5) {
        println!("  id {:>3}  conf {:+.3}  orth {:.3}  |g| {:.3}", r.sample_id, r.conf, r.orth, r.grad_norm);
    }

    let out = std::env::temp_dir().join("ogs-example-geometry.csv");
    std::fs::write(&out, table.to_csv()).unwrap();
    println!("\nfull table written to {}", out.display());
}

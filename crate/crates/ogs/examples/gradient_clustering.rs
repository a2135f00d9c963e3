//! Clusters the domain pool's unit gradient directions and prints the
//! per-cluster geometry statistics the policy sees as state features.
//!
//! ```bash
//! cargo run --example gradient_clustering
//! ```

use ogs::bench::{gen_synthetic_tasks, standard_bench};
use ogs::geometry::{build_anchor_gradient, score_pool_with_directions};
use ogs::model::Sample;
use ogs::pipeline::{pretrained_init, ExperimentConfig};
use ogs::selection::cluster_pool;

fn main() {
    let pools = gen_synthetic_tasks(&standard_bench()).unwrap();
    let config = ExperimentConfig::default();
    let (navigator, _) =
        pretrained_init(&config.navigator, &config, &pools.general, "navigator-init").unwrap();
    let anchor_samples: Vec<Sample> = pools.general.iter().take(40).cloned().collect();
    let anchor = build_anchor_gradient(&config.navigator, &navigator, &anchor_samples).unwrap();

    let (mut table, directions) =
        score_pool_with_directions(&config.navigator, &navigator, &pools.domain, &anchor).unwrap();

    let k = 5;
    let assignment = cluster_pool(&mut table, &directions, k, 11).unwrap();
    println!(
        "k-means over {} unit gradient directions, k = {k}, converged after {} iterations\n",
        directions.len(),
        assignment.iterations_run
    );

    println!("{:>7} {:>6} {:>10} {:>10}", "cluster", "size", "mean orth", "mean conf");
    for c in 0..k {
        let members: Vec<_> = table
            .records
            .iter()
            .filter(|r| r.cluster == Some(c))
            .collect();
        if members.is_empty() {
            println!("{c:>7} {:>6} {:>10} {:>10}", 0, "-", "-");
            continue;
        }
        let n = members.len() as f64;
        let orth: f64 = members.iter().map(|r| r.orth).sum::<f64>() / n;
        let conf: f64 = members.iter().map(|r| r.conf).sum::<f64>() / n;
        println!("{c:>7} {:>6} {orth:>10.3} {conf:>+10.3}", members.len());
    }
    println!(
        "\nhigh-conflict clusters bundle the samples whose updates would overwrite\n\
         the anchor direction; the selection policy learns to route around them."
    );
}

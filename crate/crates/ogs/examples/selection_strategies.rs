//! The three selection strategies side by side: orthogonal protection over
//! the domain pool, conflict-aware replay over the general pool, and the
//! hybrid batch that mixes them at a ratio alpha.
//!
//! ```bash
//! cargo run --example selection_strategies
//! ```

use ogs::bench::{gen_synthetic_tasks, standard_bench};
use ogs::geometry::{build_anchor_gradient, score_pool};
use ogs::model::{batch_mean_gradient, GradOrigin, Sample};
use ogs::pipeline::{pretrained_init, ExperimentConfig};
use ogs::selection::{mix_batch, select_orthogonal, select_replay};

fn main() {
    let pools = gen_synthetic_tasks(&standard_bench()).unwrap();
    let config = ExperimentConfig::default();
    let (navigator, _) =
        pretrained_init(&config.navigator, &config, &pools.general, "navigator-init").unwrap();
    let anchor_samples: Vec<Sample> = pools.general.iter().take(40).cloned().collect();
    let anchor = build_anchor_gradient(&config.navigator, &navigator, &anchor_samples).unwrap();

    let domain = score_pool(&config.navigator, &navigator, &pools.domain, &anchor).unwrap();

    let orth = select_orthogonal(&domain, 0.7);
    println!(
        "orthogonal protection (tau_orth = 0.7): {} of {} domain samples qualify",
        orth.selected_ids.len(),
        domain.records.len()
    );

    // Replay targets general samples whose gradients oppose recent domain
    // updates, so the general pool is scored against the domain pool's mean
    // gradient rather than the anchor.
    let domain_direction = ogs::geometry::AnchorArtifacts {
        anchor_ids: vec![],
        g_ref: ogs::model::GradientVector {
            values: batch_mean_gradient(&config.navigator, &navigator, &pools.domain)
                .unwrap()
                .values,
            origin: GradOrigin::Anchor,
        },
        params_snapshot_id: 0,
    };
    let general =
        score_pool(&config.navigator, &navigator, &pools.general, &domain_direction).unwrap();
    let replay = select_replay(&general, 0.1);
    println!(
        "conflict-aware replay (tau_conf = 0.1): {} of {} general samples are under attack",
        replay.selected_ids.len(),
        general.records.len()
    );

    for alpha in [1.0, 0.75, 0.5, 0.0] {
        let batch = mix_batch(&orth.selected_ids, &replay.selected_ids, alpha, 16, 42).unwrap();
        let n_domain = batch
            .iter()
            .filter(|id| domain.records.iter().any(|r| r.sample_id == **id))
            .count();
        println!(
            "alpha {alpha:>4}: batch of {} = {} protected domain + {} replay",
            batch.len(),
            n_domain,
            batch.len() - n_domain
        );
    }

    println!("\nserialized selection:\n{}", ogs::report::to_canonical_json(&orth).unwrap());
}

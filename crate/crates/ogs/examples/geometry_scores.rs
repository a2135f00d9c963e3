//! Gradient-geometry scores on hand-picked vectors: orthogonality, conflict,
//! the safety classification, and the first-order loss-change prediction.
//!
//! ```bash
//! cargo run --example geometry_scores
//! ```

use ogs::geometry::{
    classify_safety, conflict_score, orthogonality_score, predict_general_loss_delta,
};
use ogs::model::{GradOrigin, GradientVector};

fn gv(values: &[f64]) -> GradientVector {
    GradientVector {
        values: values.to_vec(),
        origin: GradOrigin::PerSample,
    }
}

fn main() {
    let anchor = gv(&[1.0, 0.0]);
    let cases = [
        ("aligned ", gv(&[2.0, 0.0])),
        ("opposed ", gv(&[-1.0, 0.0])),
        ("diagonal", gv(&[1.0, 1.0])),
        ("vertical", gv(&[0.0, 3.0])),
    ];

    println!("anchor gradient: {:?}", anchor.values);
    println!("{:<9} {:>7} {:>7}  class", "sample", "orth", "conf");
    for (name, g) in &cases {
        let orth = orthogonality_score(g, &anchor).unwrap();
        let conf = conflict_score(g, &anchor).unwrap();
        println!(
            "{name:<9} {orth:>7.4} {conf:>7.4}  {:?}",
            classify_safety(conf, 0.1)
        );
    }

    // First-order view: stepping along a domain gradient changes the general
    // loss by -eta <g_gen, g_dom> plus a second-order term. On the quadratic
    // L(theta) = 0.5 ||theta||^2 the leftover is exactly 0.5 eta^2 ||g_dom||^2.
    let theta = [0.8, -0.4, 0.2];
    let g_dom = [0.5, 0.1, -0.3];
    let eta = 1e-2;
    let l = |v: &[f64]| 0.5 * v.iter().map(|x| x * x).sum::<f64>();
    let stepped: Vec<f64> = theta.iter().zip(&g_dom).map(|(t, g)| t - eta * g).collect();
    let actual = l(&stepped) - l(&theta);
    let predicted = predict_general_loss_delta(&gv(&theta), &gv(&g_dom), eta).unwrap();
    println!("\nfirst-order prediction on a quadratic:");
    println!("  actual    change: {actual:+.8}");
    println!("  predicted change: {predicted:+.8}");
    println!(
        "  residual {:+.2e} vs 0.5*eta^2*||g_dom||^2 = {:+.2e}",
        actual - predicted,
        0.5 * eta * eta * g_dom.iter().map(|g| g * g).sum::<f64>()
    );
}

//! Runs the verification suite: first-order interference scaling, greedy
//! optimality against exhaustive enumeration, the navigator/target overhead
//! ratio, and cross-scale rank transferability.
//!
//! ```bash
//! cargo run --example theory_checks
//! ```

use ogs::verify::{run_suite, CheckSelection, VerifySuite};

fn main() {
    let suite = VerifySuite::default();
    println!(
        "eta ladder {:?}, {} trials, transfer threshold {}\n",
        suite.eta_ladder, suite.trials, suite.gamma_min
    );
    let card = run_suite(&suite, CheckSelection::All).unwrap();
    for entry in &card.entries {
        println!(
            "{:<28} {}",
            entry.name,
            if entry.pass { "PASS" } else { "FAIL" }
        );
        println!("    {}\n", entry.stats);
    }
    println!("all checks pass: {}", card.all_pass());
}

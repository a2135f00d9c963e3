//! PPO with a Lagrangian constraint on a two-armed bandit.
//!
//! Arm A pays reward 1 at cost 1; arm B pays 0.3 at cost 0. With a cost
//! budget epsilon = 0.5 the best feasible policy mixes the arms so expected
//! cost sits at the budget. The dual variable lambda rises while the policy
//! overspends and relaxes once it is safe.
//!
//! ```bash
//! cargo run --example constrained_bandit
//! ```

use ogs::policy::{
    action_probabilities, dual_update, policy_action, ppo_update, state_dim, value_estimates,
    ActionMode, DualState, PolicyHyper, PolicyParams, PolicyState, TrajectoryStep, ALPHA_BUCKETS,
};
use ogs::seed::indexed_seed;

fn main() {
    let k = 2;
    let mut policy = PolicyParams::new(k, state_dim(k), 1).unwrap();
    let hyper = PolicyHyper {
        gamma: 1.0,
        gae_lambda: 1.0,
        clip_ratio: 0.2,
        ppo_epochs: 4,
        policy_lr: 0.005,
    };
    let mut dual = DualState {
        lambda: 0.0,
        epsilon: 0.5,
        eta_lambda: 0.1,
    };
    let state = PolicyState {
        features: vec![0.0; state_dim(k)],
    };

    println!("{:>5} {:>8} {:>8} {:>8}", "iter", "P(armA)", "cost", "lambda");
    let batch = 64;
    for it in 0..200usize {
        let mut episodes = Vec::with_capacity(batch);
        let mut mean_cost = 0.0;
        for b in 0..batch {
            let s = indexed_seed(1, "bandit-demo", (it * batch + b) as u64);
            let (action, log_prob) = policy_action(&policy, &state, s, ActionMode::Sample).unwrap();
            let (reward, cost) = if action.cluster == 0 { (1.0, 1.0) } else { (0.3, 0.0) };
            mean_cost += cost / batch as f64;
            let (v, vc) = value_estimates(&policy, &state).unwrap();
            episodes.push(vec![TrajectoryStep {
                state: state.clone(),
                action,
                reward,
                cost,
                log_prob,
                value_estimate: v,
                cost_value_estimate: vc,
            }]);
        }
        let (updated, _) = ppo_update(&policy, &episodes, &dual, &hyper).unwrap();
        policy = updated;
        dual = dual_update(&dual, mean_cost);

        if it % 20 == 0 || it == 199 {
            let probs = action_probabilities(&policy, &state).unwrap();
            let p_a: f64 = probs[..ALPHA_BUCKETS.len()].iter().sum();
            println!("{it:>5} {p_a:>8.3} {mean_cost:>8.3} {:>8.3}", dual.lambda);
        }
    }

    let probs = action_probabilities(&policy, &state).unwrap();
    let p_a: f64 = probs[..ALPHA_BUCKETS.len()].iter().sum();
    println!(
        "\nfinal policy: P(arm A) = {p_a:.3}, expected cost = {p_a:.3} (budget 0.5)\n\
         the multiplier settled near the indifference point where the penalized\n\
         rewards of the two arms match."
    );
}

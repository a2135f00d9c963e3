//! Constrained selection policy: a categorical head over (cluster, mixing
//! ratio) actions trained with PPO plus a Lagrangian penalty on accumulated
//! general-capability cost.
//!
//! The state is a fixed layout `[domain_perf, general_perf, per-cluster orth
//! means, per-cluster conf means, progress]` of length `2 + 2K + 1`. The
//! action factorizes into a cluster index and a bucket of the mixing ratio
//! `alpha`, realized as one joint categorical distribution of `K * 5`
//! entries. Reward and cost advantages come from separate value heads via
//! generalized advantage estimation; the dual variable follows projected
//! ascent on measured constraint violation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryTable;
use crate::model::{
    backward_from_output_gradient, forward, init_params, sgd_step, Activation, GradOrigin,
    GradientVector, LossKind, ModelParams, ModelSpec,
};
use crate::report::to_canonical_json;
use crate::seed;
use crate::selection::ClusterAssignment;

/// Discrete mixing ratios the policy can pick.
pub const ALPHA_BUCKETS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Width of the two hidden layers of every policy-side network.
const HIDDEN: usize = 32;

/// Fixed-layout CMDP state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub features: Vec<f64>,
}

impl PolicyState {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Expected state length for `k` clusters.
pub fn state_dim(k: usize) -> usize {
    2 + 2 * k + 1
}

/// Builds the state vector from held-out performance (negated losses, higher
/// is better), per-cluster geometry means over the given table, and training
/// progress `t / t_max`. Empty clusters contribute zero means.
pub fn encode_state(
    domain_perf: f64,
    general_perf: f64,
    table: &GeometryTable,
    assignment: &ClusterAssignment,
    k: usize,
    t: usize,
    t_max: usize,
) -> PolicyState {
    let mut orth_sum = vec![0.0; k];
    let mut conf_sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for rec in &table.records {
        if let Some(c) = assignment.cluster_of(rec.sample_id) {
            if c < k {
                orth_sum[c] += rec.orth;
                conf_sum[c] += rec.conf;
                count[c] += 1;
            }
        }
    }
    let mut features = Vec::with_capacity(state_dim(k));
    features.push(domain_perf);
    features.push(general_perf);
    for c in 0..k {
        features.push(if count[c] == 0 { 0.0 } else { orth_sum[c] / count[c] as f64 });
    }
    for c in 0..k {
        features.push(if count[c] == 0 { 0.0 } else { conf_sum[c] / count[c] as f64 });
    }
    features.push(if t_max == 0 { 0.0 } else { t as f64 / t_max as f64 });
    PolicyState { features }
}

/// A joint (cluster, alpha-bucket) action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub cluster: usize,
    pub alpha_bucket: usize,
}

impl Action {
    pub fn alpha(&self) -> f64 {
        ALPHA_BUCKETS[self.alpha_bucket]
    }

    pub fn flat_index(&self) -> usize {
        self.cluster * ALPHA_BUCKETS.len() + self.alpha_bucket
    }

    pub fn from_flat_index(index: usize) -> Action {
        Action {
            cluster: index / ALPHA_BUCKETS.len(),
            alpha_bucket: index % ALPHA_BUCKETS.len(),
        }
    }
}

/// One collected transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: PolicyState,
    pub action: Action,
    pub reward: f64,
    pub cost: f64,
    pub log_prob: f64,
    pub value_estimate: f64,
    pub cost_value_estimate: f64,
}

/// Lagrange multiplier state for the constrained objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualState {
    pub lambda: f64,
    pub epsilon: f64,
    pub eta_lambda: f64,
}

impl Default for DualState {
    fn default() -> Self {
        DualState {
            lambda: 0.0,
            epsilon: 0.0,
            eta_lambda: 0.05,
        }
    }
}

impl DualState {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("dual.lambda must be >= 0".into()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config("dual.epsilon must be >= 0".into()));
        }
        if self.eta_lambda <= 0.0 {
            return Err(Error::Config("dual.eta_lambda must be > 0".into()));
        }
        Ok(())
    }
}

/// PPO hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyHyper {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub ppo_epochs: usize,
    pub policy_lr: f64,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        PolicyHyper {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            ppo_epochs: 4,
            policy_lr: 0.02,
        }
    }
}

impl PolicyHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("policy.gamma must be in (0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("policy.gae_lambda must be in [0,1]".into()));
        }
        if self.clip_ratio <= 0.0 {
            return Err(Error::Config("policy.clip_ratio must be > 0".into()));
        }
        if self.ppo_epochs == 0 {
            return Err(Error::Config("policy.ppo_epochs must be >= 1".into()));
        }
        if self.policy_lr <= 0.0 {
            return Err(Error::Config("policy.policy_lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Policy network plus the two value heads, all built on the dense model
/// stack (two tanh hidden layers of width 32).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub k: usize,
    pub state_dim: usize,
    pi_spec: ModelSpec,
    value_spec: ModelSpec,
    pi: ModelParams,
    value: ModelParams,
    cost_value: ModelParams,
}

impl PolicyParams {
    pub fn new(k: usize, state_dim: usize, seed_value: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("policy needs k >= 1 clusters".into()));
        }
        let pi_spec = ModelSpec::new(
            vec![state_dim, HIDDEN, HIDDEN, k * ALPHA_BUCKETS.len()],
            Activation::Tanh,
            LossKind::SquaredError,
        )?;
        let value_spec = ModelSpec::new(
            vec![state_dim, HIDDEN, HIDDEN, 1],
            Activation::Tanh,
            LossKind::SquaredError,
        )?;
        Ok(PolicyParams {
            k,
            state_dim,
            pi: init_params(&pi_spec, seed::indexed_seed(seed_value, "policy-pi", 0)),
            value: init_params(&value_spec, seed::indexed_seed(seed_value, "policy-v", 0)),
            cost_value: init_params(&value_spec, seed::indexed_seed(seed_value, "policy-vc", 0)),
            pi_spec,
            value_spec,
        })
    }

    pub fn action_count(&self) -> usize {
        self.k * ALPHA_BUCKETS.len()
    }

    /// Test/diagnostic access to the raw logit-network parameters.
    pub fn logit_params(&self) -> &ModelParams {
        &self.pi
    }

    /// Replaces the logit network with explicit parameters (used by tests and
    /// for hand-built policies).
    pub fn with_logit_values(mut self, values: Vec<f64>) -> Result<Self> {
        self.pi = ModelParams::new(&self.pi_spec, values)?;
        Ok(self)
    }

    pub fn pi_param_count(&self) -> usize {
        self.pi_spec.param_count()
    }
}

/// Raw logits for a state; errors on non-finite values.
pub fn policy_logits(policy: &PolicyParams, state: &PolicyState) -> Result<Vec<f64>> {
    if state.len() != policy.state_dim {
        return Err(Error::DimensionMismatch {
            what: "policy state",
            expected: policy.state_dim,
            got: state.len(),
        });
    }
    let logits = forward(&policy.pi_spec, &policy.pi, &state.features)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::PolicyDivergence("non-finite logits".into()));
    }
    Ok(logits)
}

fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_total = total.ln() + m;
    let log_probs: Vec<f64> = logits.iter().map(|z| z - log_total).collect();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    (log_probs, probs)
}

/// Action probabilities under the current policy.
pub fn action_probabilities(policy: &PolicyParams, state: &PolicyState) -> Result<Vec<f64>> {
    let logits = policy_logits(policy, state)?;
    Ok(log_softmax(&logits).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Argmax,
}

/// Draws or argmaxes an action. Sampling walks the CDF with one uniform draw
/// from a stream derived from `rng_seed`; argmax ties break on the lowest
/// flat index.
pub fn policy_action(
    policy: &PolicyParams,
    state: &PolicyState,
    rng_seed: u64,
    mode: ActionMode,
) -> Result<(Action, f64)> {
    let logits = policy_logits(policy, state)?;
    let (log_probs, probs) = log_softmax(&logits);
    let index = match mode {
        ActionMode::Argmax => {
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Sample => {
            use rand::Rng;
            let mut rng = seed::component_rng(rng_seed, "policy-action");
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    Ok((Action::from_flat_index(index), log_probs[index]))
}

/// Value and cost-value estimates for a state.
pub fn value_estimates(policy: &PolicyParams, state: &PolicyState) -> Result<(f64, f64)> {
    let v = forward(&policy.value_spec, &policy.value, &state.features)?[0];
    let vc = forward(&policy.value_spec, &policy.cost_value, &state.features)?[0];
    Ok((v, vc))
}

/// Per-step reward and cost. Reward is the change in domain performance;
/// cost is the degradation of general performance below the phase-start
/// baseline, floored at zero.
pub fn compute_reward_cost(
    perf_before: (f64, f64),
    perf_after: (f64, f64),
    baseline_general: f64,
) -> (f64, f64) {
    let reward = perf_after.0 - perf_before.0;
    let cost = (baseline_general - perf_after.1).max(0.0);
    (reward, cost)
}

/// The unconstrained objective value `return - lambda * (cost - epsilon)`.
pub fn lagrangian_value(discounted_return: f64, discounted_cost: f64, dual: &DualState) -> f64 {
    discounted_return - dual.lambda * (discounted_cost - dual.epsilon)
}

/// Projected dual ascent: `lambda' = max(0, lambda + eta * (J_C - epsilon))`.
pub fn dual_update(dual: &DualState, measured_cost: f64) -> DualState {
    DualState {
        lambda: (dual.lambda + dual.eta_lambda * (measured_cost - dual.epsilon)).max(0.0),
        ..*dual
    }
}

/// Discounted sum of per-step costs of one episode.
pub fn discounted_cost(episode: &[TrajectoryStep], gamma: f64) -> f64 {
    episode
        .iter()
        .enumerate()
        .map(|(t, s)| gamma.powi(t as i32) * s.cost)
        .sum()
}

/// Discounted sum of per-step rewards of one episode.
pub fn discounted_return(episode: &[TrajectoryStep], gamma: f64) -> f64 {
    episode
        .iter()
        .enumerate()
        .map(|(t, s)| gamma.powi(t as i32) * s.reward)
        .sum()
}

/// Diagnostics from one PPO update.
#[derive(Debug, Clone, Default)]
pub struct PpoStats {
    pub steps: usize,
    /// `(raw ratio, clipped ratio)` per step, from the last epoch.
    pub surrogate_ratios: Vec<(f64, f64)>,
}

/// Clipped-surrogate PPO ascent on `reward advantage - lambda * cost
/// advantage`, with both advantages from generalized advantage estimation on
/// the stored value estimates. The combined advantages are normalized to
/// zero mean and unit variance across the batch (skipped for batches of one
/// step or a degenerate spread, so single-step updates keep their raw sign).
/// Runs `ppo_epochs` full-batch passes over all steps and also regresses
/// both value heads onto their returns.
pub fn ppo_update(
    policy: &PolicyParams,
    episodes: &[Vec<TrajectoryStep>],
    dual: &DualState,
    hyper: &PolicyHyper,
) -> Result<(PolicyParams, PpoStats)> {
    hyper.validate()?;
    let total_steps: usize = episodes.iter().map(|e| e.len()).sum();
    if total_steps == 0 {
        return Err(Error::InvalidInput("ppo_update needs at least one step".into()));
    }

    struct Flat<'a> {
        episode: usize,
        state: &'a PolicyState,
        action_index: usize,
        logp_old: f64,
        advantage: f64,
        return_r: f64,
        return_c: f64,
    }

    let mut flats: Vec<Flat> = Vec::with_capacity(total_steps);
    for (e_idx, ep) in episodes.iter().enumerate() {
        let n = ep.len();
        let mut running_r = 0.0;
        let mut running_c = 0.0;
        let mut adv_r = vec![0.0; n];
        let mut adv_c = vec![0.0; n];
        for t in (0..n).rev() {
            let (next_v, next_vc) = if t + 1 < n {
                (ep[t + 1].value_estimate, ep[t + 1].cost_value_estimate)
            } else {
                (0.0, 0.0)
            };
            let delta_r = ep[t].reward + hyper.gamma * next_v - ep[t].value_estimate;
            let delta_c = ep[t].cost + hyper.gamma * next_vc - ep[t].cost_value_estimate;
            running_r = delta_r + hyper.gamma * hyper.gae_lambda * running_r;
            running_c = delta_c + hyper.gamma * hyper.gae_lambda * running_c;
            adv_r[t] = running_r;
            adv_c[t] = running_c;
        }
        for t in 0..n {
            flats.push(Flat {
                episode: e_idx,
                state: &ep[t].state,
                action_index: ep[t].action.flat_index(),
                logp_old: ep[t].log_prob,
                advantage: adv_r[t] - dual.lambda * adv_c[t],
                return_r: adv_r[t] + ep[t].value_estimate,
                return_c: adv_c[t] + ep[t].cost_value_estimate,
            });
        }
    }

    let n = flats.len() as f64;
    if flats.len() >= 2 {
        let mean = flats.iter().map(|f| f.advantage).sum::<f64>() / n;
        let var = flats
            .iter()
            .map(|f| (f.advantage - mean) * (f.advantage - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std > 1e-8 {
            for f in &mut flats {
                f.advantage = (f.advantage - mean) / std;
            }
        }
    }
    let clip = hyper.clip_ratio;
    let mut pi = policy.pi.clone();
    let mut value = policy.value.clone();
    let mut cost_value = policy.cost_value.clone();
    let mut stats = PpoStats {
        steps: flats.len(),
        surrogate_ratios: Vec::new(),
    };

    for _epoch in 0..hyper.ppo_epochs {
        let mut g_pi = vec![0.0; policy.pi_spec.param_count()];
        let mut g_v = vec![0.0; policy.value_spec.param_count()];
        let mut g_vc = vec![0.0; policy.value_spec.param_count()];
        stats.surrogate_ratios.clear();

        for f in &flats {
            let logits = forward(&policy.pi_spec, &pi, &f.state.features)?;
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::OptimizationDivergence {
                    episode: f.episode,
                    reason: "non-finite logits during ppo epoch".into(),
                });
            }
            let (log_probs, probs) = log_softmax(&logits);
            let ratio = (log_probs[f.action_index] - f.logp_old).exp();
            let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
            stats.surrogate_ratios.push((ratio, clipped));

            let unclipped_active = if f.advantage >= 0.0 {
                ratio <= 1.0 + clip
            } else {
                ratio >= 1.0 - clip
            };
            if unclipped_active && f.advantage != 0.0 {
                // d(-ratio * A)/dlogits = A * ratio * (probs - onehot).
                let scale = f.advantage * ratio / n;
                let mut d_logits: Vec<f64> = probs.iter().map(|p| scale * p).collect();
                d_logits[f.action_index] -= scale;
                let g =
                    backward_from_output_gradient(&policy.pi_spec, &pi, &f.state.features, &d_logits)?;
                for (acc, v) in g_pi.iter_mut().zip(&g) {
                    *acc += v;
                }
            }

            let v_out = forward(&policy.value_spec, &value, &f.state.features)?[0];
            let d_v = [2.0 * (v_out - f.return_r) / n];
            let g = backward_from_output_gradient(&policy.value_spec, &value, &f.state.features, &d_v)?;
            for (acc, v) in g_v.iter_mut().zip(&g) {
                *acc += v;
            }

            let vc_out = forward(&policy.value_spec, &cost_value, &f.state.features)?[0];
            let d_vc = [2.0 * (vc_out - f.return_c) / n];
            let g = backward_from_output_gradient(
                &policy.value_spec,
                &cost_value,
                &f.state.features,
                &d_vc,
            )?;
            for (acc, v) in g_vc.iter_mut().zip(&g) {
                *acc += v;
            }
        }

        for (name, g) in [("pi", &g_pi), ("value", &g_v), ("cost-value", &g_vc)] {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::OptimizationDivergence {
                    episode: 0,
                    reason: format!("non-finite {name} gradient"),
                });
            }
        }
        pi = step(&pi, &g_pi, hyper.policy_lr)?;
        value = step(&value, &g_v, hyper.policy_lr)?;
        cost_value = step(&cost_value, &g_vc, hyper.policy_lr)?;
    }

    Ok((
        PolicyParams {
            k: policy.k,
            state_dim: policy.state_dim,
            pi_spec: policy.pi_spec.clone(),
            value_spec: policy.value_spec.clone(),
            pi,
            value,
            cost_value,
        },
        stats,
    ))
}

fn step(params: &ModelParams, grad: &[f64], lr: f64) -> Result<ModelParams> {
    sgd_step(
        params,
        &GradientVector {
            values: grad.to_vec(),
            origin: GradOrigin::BatchMean,
        },
        lr,
    )
}

/// Versioned checkpoint carrying everything needed to reproduce argmax
/// actions bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub k: usize,
    pub state_dim: usize,
    pub alpha_buckets: Vec<f64>,
    pub pi_spec: ModelSpec,
    pub value_spec: ModelSpec,
    pub pi_values: Vec<f64>,
    pub value_values: Vec<f64>,
    pub cost_value_values: Vec<f64>,
}

pub fn to_checkpoint_json(policy: &PolicyParams) -> Result<String> {
    to_canonical_json(&PolicyCheckpoint {
        version: 1,
        k: policy.k,
        state_dim: policy.state_dim,
        alpha_buckets: ALPHA_BUCKETS.to_vec(),
        pi_spec: policy.pi_spec.clone(),
        value_spec: policy.value_spec.clone(),
        pi_values: policy.pi.values().to_vec(),
        value_values: policy.value.values().to_vec(),
        cost_value_values: policy.cost_value.values().to_vec(),
    })
}

pub fn from_checkpoint_json(text: &str) -> Result<PolicyParams> {
    let ck: PolicyCheckpoint = serde_json::from_str(text)?;
    if ck.version != 1 {
        return Err(Error::Parse(format!("unsupported policy checkpoint version {}", ck.version)));
    }
    if ck.alpha_buckets != ALPHA_BUCKETS.to_vec() {
        return Err(Error::Parse("checkpoint alpha buckets mismatch".into()));
    }
    Ok(PolicyParams {
        k: ck.k,
        state_dim: ck.state_dim,
        pi: ModelParams::new(&ck.pi_spec, ck.pi_values)?,
        value: ModelParams::new(&ck.value_spec, ck.value_values)?,
        cost_value: ModelParams::new(&ck.value_spec, ck.cost_value_values)?,
        pi_spec: ck.pi_spec,
        value_spec: ck.value_spec,
    })
}

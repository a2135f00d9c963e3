//! The three-phase training pipeline.
//!
//! Phase 0 builds the anchor, scores both pools against it on the navigator,
//! and clusters their gradient directions. Phase 1 trains the selection
//! policy with PPO-Lagrangian over repeated navigator fine-tuning episodes,
//! always resetting the navigator to its initial parameters. Phase 2 applies
//! the frozen argmax policy to the target model with plain SGD; the target
//! never projects gradients and pays geometry costs only for state encoding
//! (a one-time scoring pass plus periodic subsample refreshes).
//!
//! Every randomized choice draws from a stream derived from the single run
//! seed via the component-name splitting rule in [`crate::seed`], so a
//! `(config, seed)` pair reproduces its run report bit-exactly. Wall time is
//! recorded on reports but excluded from serialization to keep that true.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_anchor_gradient, conflict_score, score_pool_with_directions, AnchorArtifacts,
    GeometryRecord, GeometryTable,
};
use crate::model::{
    batch_mean_gradient, init_params, mean_loss, per_sample_gradient, sgd_step, GradOrigin,
    GradientVector, ModelParams, ModelSpec, PoolTag, Sample,
};
use crate::policy::{
    self, compute_reward_cost, discounted_cost, dual_update, encode_state, policy_action,
    ppo_update, value_estimates, Action, ActionMode, DualState, PolicyHyper, PolicyParams,
    PolicyState, TrajectoryStep,
};
use crate::report::to_canonical_json;
use crate::seed;
use crate::selection::{
    cluster_pool, draw_without_replacement, select_orthogonal, select_replay, ClusterAssignment,
    SelectionConfig,
};

/// Which reference gradient conflict-aware replay scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayReference {
    /// Exponential moving average (decay 0.9) of recent domain batch-mean
    /// gradients, seeded with the domain pool's mean gradient at phase start.
    RecentEma,
    /// The cached anchor gradient itself.
    Anchor,
}

/// Everything a full run needs besides the pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub navigator: ModelSpec,
    pub target: ModelSpec,
    pub anchor_size: usize,
    pub use_active_anchor: bool,
    pub replay_reference: ReplayReference,
    /// When false, phases skip reinforcement learning entirely and the
    /// target phase uses a greedy cluster choice with `static_alpha`.
    pub use_rl_policy: bool,
    pub static_alpha: f64,
    pub selection: SelectionConfig,
    pub policy: PolicyHyper,
    pub dual: DualState,
    pub episodes: usize,
    pub steps: usize,
    pub target_steps: usize,
    pub learning_rate: f64,
    /// Margin of the capability constraint: the final flag requires the
    /// general performance to be at least the baseline plus `delta`.
    pub delta: f64,
    /// Held-out evaluation cadence in the target phase (the navigator phase
    /// evaluates every step because rewards need per-step deltas).
    pub eval_every: usize,
    /// Steps between geometry refreshes (10% per-cluster subsample).
    pub cluster_refresh_every: usize,
    /// Recompute the anchor gradient at current parameters on every
    /// geometry refresh instead of keeping the phase-start cache.
    pub refresh_anchor: bool,
    /// Plain-SGD steps on the general pool that produce the pretrained
    /// starting parameters of both models. The capability baseline is
    /// measured after this, so the constraint protects pretrained general
    /// skill rather than a random initialization. Zero disables it.
    pub pretrain_general_steps: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            navigator: ModelSpec::new(
                vec![16, 16, 1],
                crate::model::Activation::Tanh,
                crate::model::LossKind::SquaredError,
            )
            .unwrap(),
            target: ModelSpec::new(
                vec![16, 128, 1],
                crate::model::Activation::Tanh,
                crate::model::LossKind::SquaredError,
            )
            .unwrap(),
            anchor_size: 40,
            use_active_anchor: false,
            replay_reference: ReplayReference::RecentEma,
            use_rl_policy: true,
            static_alpha: 0.8,
            selection: SelectionConfig::default(),
            policy: PolicyHyper::default(),
            dual: DualState::default(),
            episodes: 30,
            steps: 40,
            target_steps: 200,
            learning_rate: 0.05,
            delta: 0.0,
            eval_every: 1,
            cluster_refresh_every: 10,
            refresh_anchor: false,
            pretrain_general_steps: 6,
            seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.policy.validate()?;
        self.dual.validate()?;
        if self.navigator.param_count() > self.target.param_count() {
            return Err(Error::Config(format!(
                "navigator parameter count {} exceeds target parameter count {}",
                self.navigator.param_count(),
                self.target.param_count()
            )));
        }
        if self.navigator.input_width() != self.target.input_width() {
            return Err(Error::Config("navigator and target input widths differ".into()));
        }
        if self.anchor_size == 0 {
            return Err(Error::Config("anchor_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !self.delta.is_finite() {
            return Err(Error::Config("delta must be finite".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.cluster_refresh_every == 0 {
            return Err(Error::Config("cluster_refresh_every must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.static_alpha) {
            return Err(Error::Config("static_alpha must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Stable hex hash of the canonical config serialization.
    pub fn hash(&self) -> String {
        let json = to_canonical_json(self).expect("config serializes");
        format!("{:016x}", seed::fnv1a64(json.as_bytes()))
    }
}

/// Training pools plus fixed held-out evaluation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPools {
    pub domain: Vec<Sample>,
    pub general: Vec<Sample>,
    pub domain_eval: Vec<Sample>,
    pub general_eval: Vec<Sample>,
}

impl TaskPools {
    pub fn validate(&self) -> Result<()> {
        for (name, pool) in [("domain", &self.domain), ("general", &self.general)] {
            if pool.is_empty() {
                return Err(Error::InvalidInput(format!("{name} pool is empty")));
            }
            let mut ids: Vec<u64> = pool.iter().map(|s| s.id).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != pool.len() {
                return Err(Error::InvalidInput(format!("duplicate ids in {name} pool")));
            }
        }
        if self.domain_eval.is_empty() || self.general_eval.is_empty() {
            return Err(Error::InvalidInput("evaluation sets must be non-empty".into()));
        }
        Ok(())
    }

    /// Identity hash over all sample ids, for cross-method pool checks.
    pub fn id_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for pool in [&self.domain, &self.general, &self.domain_eval, &self.general_eval] {
            for s in pool {
                bytes.extend_from_slice(&s.id.to_le_bytes());
            }
            bytes.push(0xfe);
        }
        seed::fnv1a64(&bytes)
    }
}

/// Held-out losses at a step, with the capability-constraint flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfSnapshot {
    pub step: usize,
    pub domain_loss: f64,
    pub general_loss: f64,
    pub constraint_satisfied: bool,
}

/// FLOP estimates under the proportional-cost rule (model-side work only;
/// the tiny policy networks are not metered).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseFlops {
    /// Batch gradients and parameter updates of the actual training loop.
    pub training: f64,
    /// Geometry work: anchor building, pool scoring, clustering, refreshes.
    pub scoring: f64,
    /// Held-out evaluation forwards.
    pub eval: f64,
    /// General-pool pretraining that produces the starting parameters.
    pub setup: f64,
}

impl PhaseFlops {
    pub fn total(&self) -> f64 {
        self.training + self.scoring + self.eval + self.setup
    }

    fn add(&mut self, other: PhaseFlops) {
        self.training += other.training;
        self.scoring += other.scoring;
        self.eval += other.eval;
        self.setup += other.setup;
    }
}

/// Forward pass cost for `n` samples on a `p`-parameter model.
pub fn fwd_flops(p: usize, n: usize) -> f64 {
    2.0 * p as f64 * n as f64
}

/// Forward+backward cost for `n` per-sample gradients.
pub fn grad_flops(p: usize, n: usize) -> f64 {
    6.0 * p as f64 * n as f64
}

/// One parameter update.
pub fn update_flops(p: usize) -> f64 {
    2.0 * p as f64
}

/// `n` dot products / cosines against `p`-dimensional vectors.
pub fn dot_flops(p: usize, n: usize) -> f64 {
    2.0 * p as f64 * n as f64
}

/// One row of the per-step trace. In the target phase `lambda` is fixed at
/// zero (no dual updates happen there) and rewards/costs appear only on
/// evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub cluster: usize,
    pub alpha: f64,
    pub reward: f64,
    pub cost: f64,
    pub lambda: f64,
    pub domain_loss: f64,
    pub general_loss: f64,
}

/// Deterministic record of one phase run (an episode or the target phase).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub phase: String,
    /// Content identity of the parameters this phase started from; every
    /// episode must match the phase-0 navigator exactly.
    pub params_start_id: String,
    /// Held-out general loss of the phase-start parameters; per-step costs
    /// measure degradation below this level.
    pub baseline_general_loss: f64,
    pub aborted: bool,
    pub trace: Vec<TraceRow>,
    pub final_snapshot: PerfSnapshot,
    pub flops: PhaseFlops,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunReport {
    /// Fixed-column CSV of the trace.
    pub fn trace_csv(&self) -> String {
        let mut w = crate::report::CsvWriter::new(&[
            "step",
            "cluster",
            "alpha",
            "reward",
            "cost",
            "lambda",
            "domain_loss",
            "general_loss",
        ]);
        for r in &self.trace {
            w.row(&[
                r.step.to_string(),
                r.cluster.to_string(),
                crate::report::fmt_f64(r.alpha),
                crate::report::fmt_f64(r.reward),
                crate::report::fmt_f64(r.cost),
                crate::report::fmt_f64(r.lambda),
                crate::report::fmt_f64(r.domain_loss),
                crate::report::fmt_f64(r.general_loss),
            ]);
        }
        w.finish()
    }
}

/// Output of phase 0.
#[derive(Debug, Clone)]
pub struct Phase0Artifacts {
    pub anchor: AnchorArtifacts,
    pub domain_table: GeometryTable,
    pub general_table: GeometryTable,
    pub domain_assignment: ClusterAssignment,
    pub general_assignment: ClusterAssignment,
    /// Mean domain-pool gradient at the navigator snapshot (seeds the replay
    /// reference and active anchor selection).
    pub domain_mean_grad: GradientVector,
    /// Cached unit gradient directions of the general pool, in pool order.
    pub general_directions: Vec<Vec<f64>>,
    pub navigator_init: ModelParams,
    pub flops: PhaseFlops,
}

/// Output of phase 1.
#[derive(Debug, Clone)]
pub struct Phase1Output {
    pub policy: PolicyParams,
    pub dual: DualState,
    pub episode_reports: Vec<RunReport>,
    pub flops: PhaseFlops,
}

/// Full-run report: phase-1 episodes plus the target phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRunReport {
    pub config_hash: String,
    pub pool_hash: String,
    pub phase0_flops: PhaseFlops,
    pub episodes: Vec<RunReport>,
    pub target: RunReport,
}

/// Plain SGD over a fixed sample set: seeded shuffled epochs, `batch_size`
/// samples per step. This is the standard fine-tuning loop shared by
/// pretraining, the baselines, and nothing else; no geometry is consulted.
pub fn sft_train(
    spec: &ModelSpec,
    init: &ModelParams,
    samples: &[&Sample],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed_value: u64,
) -> Result<ModelParams> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("sft_train needs a non-empty sample set".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("sft_train needs batch_size >= 1".into()));
    }
    let mut params = init.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = samples.len();
    let mut epoch = 0u64;
    for _ in 0..steps {
        let mut batch: Vec<Sample> = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor >= order.len() {
                let mut rng = seed::indexed_rng(seed_value, "sft-shuffle", epoch);
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
                epoch += 1;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        let g = batch_mean_gradient(spec, &params, &batch)?;
        params = sgd_step(&params, &g, lr)?;
    }
    Ok(params)
}

/// Pretrains fresh parameters on the general pool, producing the starting
/// point both phases and all comparison methods share. Returns the
/// parameters and the FLOPs spent.
pub fn pretrained_init(
    spec: &ModelSpec,
    config: &ExperimentConfig,
    general: &[Sample],
    seed_name: &str,
) -> Result<(ModelParams, f64)> {
    let fresh = init_params(spec, seed::component_seed(config.seed, seed_name));
    if config.pretrain_general_steps == 0 {
        return Ok((fresh, 0.0));
    }
    let refs: Vec<&Sample> = general.iter().collect();
    let p = spec.param_count();
    let params = sft_train(
        spec,
        &fresh,
        &refs,
        config.pretrain_general_steps,
        config.selection.batch_size,
        config.learning_rate,
        seed::indexed_seed(config.seed, seed_name, 1),
    )?;
    let flops = config.pretrain_general_steps as f64
        * (grad_flops(p, config.selection.batch_size) + update_flops(p));
    Ok((params, flops))
}

/// Mean held-out losses with the capability-constraint flag
/// `-general_loss >= -baseline_general_loss + delta`.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams,
    domain_eval: &[Sample],
    general_eval: &[Sample],
    baseline_general_loss: f64,
    delta: f64,
    step: usize,
) -> Result<PerfSnapshot> {
    let domain_loss = mean_loss(spec, params, domain_eval)?;
    let general_loss = mean_loss(spec, params, general_eval)?;
    Ok(PerfSnapshot {
        step,
        domain_loss,
        general_loss,
        constraint_satisfied: -general_loss >= -baseline_general_loss + delta,
    })
}

/// Picks the anchor sample ids: the general samples whose gradients most
/// oppose the domain pool's mean gradient when active selection is on,
/// otherwise the first `anchor_size` general samples in pool order. The two
/// coincide when nothing conflicts, because the active ranking breaks its
/// ties on ascending id.
pub fn select_anchor_ids(
    config: &ExperimentConfig,
    pools: &TaskPools,
    navigator: &ModelParams,
) -> Result<Vec<u64>> {
    if config.anchor_size > pools.general.len() {
        return Err(Error::Config(format!(
            "anchor_size {} exceeds general pool size {}",
            config.anchor_size,
            pools.general.len()
        )));
    }
    if config.use_active_anchor {
        crate::geometry::active_anchor_select(
            &config.navigator,
            navigator,
            &pools.general,
            &pools.domain,
            config.anchor_size,
        )
    } else {
        let mut ids: Vec<u64> = pools.general.iter().map(|s| s.id).collect();
        ids.truncate(config.anchor_size);
        Ok(ids)
    }
}

/// Phase 0: anchor construction (active selection when configured), pool
/// scoring against the cached anchor gradient, and k-means clustering of
/// both pools' gradient directions.
pub fn phase0_preprocess(config: &ExperimentConfig, pools: &TaskPools) -> Result<Phase0Artifacts> {
    config.validate()?;
    pools.validate()?;
    let k = config.selection.k;
    if k > pools.domain.len() || k > pools.general.len() {
        return Err(Error::Config(format!(
            "cluster count {k} exceeds a pool size ({} domain / {} general)",
            pools.domain.len(),
            pools.general.len()
        )));
    }
    if config.anchor_size > pools.general.len() {
        return Err(Error::Config(format!(
            "anchor_size {} exceeds general pool size {}",
            config.anchor_size,
            pools.general.len()
        )));
    }

    let p_n = config.navigator.param_count();
    let mut flops = PhaseFlops::default();
    let (navigator_init, pretrain_flops) =
        pretrained_init(&config.navigator, config, &pools.general, "navigator-init")?;
    flops.setup += pretrain_flops;

    let domain_mean_grad = batch_mean_gradient(&config.navigator, &navigator_init, &pools.domain)?;
    flops.scoring += grad_flops(p_n, pools.domain.len());

    let anchor_ids = select_anchor_ids(config, pools, &navigator_init)?;
    if config.use_active_anchor {
        flops.scoring += grad_flops(p_n, pools.general.len()) + dot_flops(p_n, pools.general.len());
    }
    let by_id: BTreeMap<u64, &Sample> = pools.general.iter().map(|s| (s.id, s)).collect();
    let anchor_samples: Vec<Sample> = anchor_ids
        .iter()
        .map(|id| (*by_id.get(id).expect("anchor id from pool")).clone())
        .collect();
    let anchor = build_anchor_gradient(&config.navigator, &navigator_init, &anchor_samples)?;
    flops.scoring += grad_flops(p_n, anchor_samples.len());

    let (mut domain_table, domain_dirs) =
        score_pool_with_directions(&config.navigator, &navigator_init, &pools.domain, &anchor)?;
    let (mut general_table, general_dirs) =
        score_pool_with_directions(&config.navigator, &navigator_init, &pools.general, &anchor)?;
    flops.scoring += grad_flops(p_n, pools.domain.len() + pools.general.len())
        + dot_flops(p_n, pools.domain.len() + pools.general.len());

    let domain_assignment = cluster_pool(
        &mut domain_table,
        &domain_dirs,
        k,
        seed::component_seed(config.seed, "cluster-domain"),
    )?;
    let general_assignment = cluster_pool(
        &mut general_table,
        &general_dirs,
        k,
        seed::component_seed(config.seed, "cluster-general"),
    )?;
    flops.scoring += 3.0
        * p_n as f64
        * k as f64
        * (pools.domain.len() as f64 * domain_assignment.iterations_run as f64
            + pools.general.len() as f64 * general_assignment.iterations_run as f64);

    Ok(Phase0Artifacts {
        anchor,
        domain_table,
        general_table,
        domain_assignment,
        general_assignment,
        domain_mean_grad,
        general_directions: general_dirs,
        navigator_init,
        flops,
    })
}

/// Replay scores of the general pool against a reference direction, computed
/// from cached unit directions.
fn replay_table_from_directions(
    base: &GeometryTable,
    directions: &[Vec<f64>],
    reference: &[f64],
) -> GeometryTable {
    let ref_norm = crate::model::norm(reference);
    let records = base
        .records
        .iter()
        .zip(directions)
        .map(|(rec, dir)| {
            let conf = if ref_norm < crate::geometry::DEGENERATE_NORM
                || rec.grad_norm < crate::geometry::DEGENERATE_NORM
            {
                0.0
            } else {
                let dot: f64 = dir.iter().zip(reference).map(|(a, b)| a * b).sum();
                (-(dot / ref_norm)).clamp(-1.0, 1.0)
            };
            GeometryRecord {
                sample_id: rec.sample_id,
                orth: 1.0 - conf.abs(),
                conf,
                grad_norm: rec.grad_norm,
                cluster: rec.cluster,
            }
        })
        .collect();
    GeometryTable {
        records,
        anchor_snapshot: base.anchor_snapshot,
        pool: base.pool,
    }
}

/// A temporary table holding only the records of one cluster.
fn cluster_view(table: &GeometryTable, assignment: &ClusterAssignment, cluster: usize) -> GeometryTable {
    GeometryTable {
        records: table
            .records
            .iter()
            .filter(|r| assignment.cluster_of(r.sample_id) == Some(cluster))
            .cloned()
            .collect(),
        anchor_snapshot: table.anchor_snapshot,
        pool: table.pool,
    }
}

/// 10% per-cluster stratified subsample of a pool (at least one member per
/// non-empty cluster), deterministic in the provided stream.
fn refresh_subsample<R: Rng>(rng: &mut R, assignment: &ClusterAssignment, k: usize) -> Vec<u64> {
    let mut picked = Vec::new();
    for c in 0..k {
        let members = assignment.members(c);
        if members.is_empty() {
            continue;
        }
        let take = ((members.len() as f64 * 0.1).ceil() as usize).max(1);
        let mut ids = members;
        for i in 0..take.min(ids.len()) {
            let j = rng.gen_range(i..ids.len());
            ids.swap(i, j);
        }
        picked.extend_from_slice(&ids[..take.min(ids.len())]);
    }
    picked
}

/// Fraction of the phase-start median gradient norm below which a sample is
/// treated as gradient-exhausted and excluded from batch candidates.
const EXHAUSTED_NORM_FRACTION: f64 = 0.1;

/// Shared per-episode / per-phase training state over one model.
struct LoopState<'a> {
    spec: &'a ModelSpec,
    params: ModelParams,
    domain_table: GeometryTable,
    general_table: GeometryTable,
    general_directions: Vec<Vec<f64>>,
    /// EMA of recent domain batch-mean gradients (replay reference).
    ema: Vec<f64>,
    replay_table: GeometryTable,
    by_id: BTreeMap<u64, &'a Sample>,
    /// The protected direction scores are computed against; static unless
    /// the anchor-refresh switch recomputes it at refresh points.
    anchor_ref: Vec<f64>,
    /// Anchor samples, kept for anchor refreshes.
    anchor_samples: Vec<Sample>,
    /// Norm floor below which refreshed records stop being candidates.
    norm_floor: f64,
    /// Domain ids of the most recent batch, refreshed preferentially.
    last_batch_domain_ids: Vec<u64>,
}

impl<'a> LoopState<'a> {
    fn refresh_geometry(
        &mut self,
        config: &ExperimentConfig,
        domain_assignment: &ClusterAssignment,
        general_assignment: &ClusterAssignment,
        rng_seed: u64,
        flops: &mut PhaseFlops,
    ) -> Result<()> {
        let k = config.selection.k;
        let p = self.spec.param_count();
        let mut rng = seed::component_rng(rng_seed, "refresh");

        if config.refresh_anchor {
            let refreshed = batch_mean_gradient(self.spec, &self.params, &self.anchor_samples)?;
            flops.scoring += grad_flops(p, self.anchor_samples.len());
            self.anchor_ref = refreshed.values;
        }
        let anchor_gv = GradientVector {
            values: self.anchor_ref.clone(),
            origin: GradOrigin::Anchor,
        };

        // Domain side: recompute scores of the stratified subsample plus the
        // samples trained most recently (their gradients changed the most).
        let mut domain_ids = refresh_subsample(&mut rng, domain_assignment, k);
        domain_ids.extend_from_slice(&self.last_batch_domain_ids);
        domain_ids.sort_unstable();
        domain_ids.dedup();
        for id in domain_ids {
            let sample = *self.by_id.get(&id).expect("domain id");
            let g = per_sample_gradient(self.spec, &self.params, sample)?;
            flops.scoring += grad_flops(p, 1) + dot_flops(p, 1);
            let conf = conflict_score(&g, &anchor_gv)?;
            if let Some(rec) = self.domain_table.records.iter_mut().find(|r| r.sample_id == id) {
                rec.conf = conf;
                rec.orth = 1.0 - conf.abs();
                rec.grad_norm = g.norm();
            }
        }

        // General side: refresh the subsample's cached directions and anchor
        // scores, then rebuild replay scores from the cache.
        for id in refresh_subsample(&mut rng, general_assignment, k) {
            let sample = *self.by_id.get(&id).expect("general id");
            let g = per_sample_gradient(self.spec, &self.params, sample)?;
            flops.scoring += grad_flops(p, 1) + dot_flops(p, 1);
            let conf = conflict_score(&g, &anchor_gv)?;
            let norm = g.norm();
            if let Some(idx) = self
                .general_table
                .records
                .iter()
                .position(|r| r.sample_id == id)
            {
                let rec = &mut self.general_table.records[idx];
                rec.conf = conf;
                rec.orth = 1.0 - conf.abs();
                rec.grad_norm = norm;
                self.general_directions[idx] = if norm < crate::geometry::DEGENERATE_NORM {
                    vec![0.0; g.values.len()]
                } else {
                    g.values.iter().map(|v| v / norm).collect()
                };
            }
        }
        self.rebuild_replay_table(config, flops);
        Ok(())
    }

    fn rebuild_replay_table(&mut self, config: &ExperimentConfig, flops: &mut PhaseFlops) {
        let reference = match config.replay_reference {
            ReplayReference::RecentEma => &self.ema,
            ReplayReference::Anchor => &self.anchor_ref,
        };
        flops.scoring += dot_flops(self.spec.param_count(), self.general_table.records.len());
        self.replay_table =
            replay_table_from_directions(&self.general_table, &self.general_directions, reference);
    }

    /// A copy of the domain table without gradient-exhausted records.
    fn live_domain_view(&self) -> GeometryTable {
        GeometryTable {
            records: self
                .domain_table
                .records
                .iter()
                .filter(|r| r.grad_norm >= self.norm_floor)
                .cloned()
                .collect(),
            anchor_snapshot: self.domain_table.anchor_snapshot,
            pool: self.domain_table.pool,
        }
    }

    /// Assembles the step batch for an action. The orthogonal share
    /// (`alpha` of the batch) draws from the chosen cluster's qualifying
    /// samples first and backfills from the pool-wide orthogonal candidates,
    /// so an exhausted cluster yields its slots to the rest of the safe
    /// subspace; the remainder comes from replay candidates. Samples whose
    /// refreshed gradient norm fell under the exhaustion floor are skipped.
    /// When nothing qualifies anywhere the batch falls back to a uniform
    /// draw from the cluster (or the whole domain pool if the cluster is
    /// empty).
    fn assemble_batch(
        &self,
        config: &ExperimentConfig,
        domain_assignment: &ClusterAssignment,
        action: Action,
        alpha: f64,
        mix_seed: u64,
        fallback_seed: u64,
    ) -> Vec<u64> {
        let live = self.live_domain_view();
        let cluster = cluster_view(&live, domain_assignment, action.cluster);
        let in_cluster = select_orthogonal(&cluster, config.selection.tau_orth).selected_ids;
        let pool_wide: Vec<u64> = select_orthogonal(&live, config.selection.tau_orth)
            .selected_ids
            .into_iter()
            .filter(|id| !in_cluster.contains(id))
            .collect();
        let replay = select_replay(&self.replay_table, config.selection.tau_conf).selected_ids;

        let batch_size = config.selection.batch_size;
        let want_orth = ((alpha * batch_size as f64).round_ties_even() as usize).min(batch_size);
        let mut rng = seed::component_rng(mix_seed, "assemble-batch");
        let mut batch = draw_without_replacement(&mut rng, &in_cluster, want_orth);
        if batch.len() < want_orth {
            batch.extend(draw_without_replacement(&mut rng, &pool_wide, want_orth - batch.len()));
        }
        if batch.len() < batch_size {
            batch.extend(draw_without_replacement(&mut rng, &replay, batch_size - batch.len()));
        }
        if batch.len() < batch_size {
            // Replay ran short: hand remaining slots back to the safe pool.
            let taken: std::collections::BTreeSet<u64> = batch.iter().copied().collect();
            let rest: Vec<u64> = in_cluster
                .iter()
                .chain(&pool_wide)
                .copied()
                .filter(|id| !taken.contains(id))
                .collect();
            batch.extend(draw_without_replacement(&mut rng, &rest, batch_size - batch.len()));
        }
        if !batch.is_empty() {
            return batch;
        }
        let mut pool: Vec<u64> = domain_assignment.members(action.cluster);
        if pool.is_empty() {
            pool = self.domain_table.records.iter().map(|r| r.sample_id).collect();
        }
        let mut rng = seed::component_rng(fallback_seed, "fallback-batch");
        let take = batch_size.min(pool.len());
        for i in 0..take {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(take);
        pool
    }

    /// One SGD step on the assembled batch. Returns the per-batch flops and
    /// updates the replay EMA from the batch's domain members.
    fn train_step(
        &mut self,
        config: &ExperimentConfig,
        batch_ids: &[u64],
        flops: &mut PhaseFlops,
    ) -> Result<()> {
        let p = self.spec.param_count();
        let mut mean = vec![0.0; p];
        let mut domain_mean = vec![0.0; p];
        let mut domain_count = 0usize;
        for id in batch_ids {
            let sample = *self.by_id.get(id).expect("batch id");
            let g = per_sample_gradient(self.spec, &self.params, sample)?;
            for (m, v) in mean.iter_mut().zip(&g.values) {
                *m += v;
            }
            if sample.pool == PoolTag::Domain {
                for (m, v) in domain_mean.iter_mut().zip(&g.values) {
                    *m += v;
                }
                domain_count += 1;
            }
        }
        flops.training += grad_flops(p, batch_ids.len());
        self.last_batch_domain_ids = batch_ids
            .iter()
            .filter(|id| self.by_id.get(id).is_some_and(|s| s.pool == PoolTag::Domain))
            .copied()
            .collect();
        let n = batch_ids.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        self.params = sgd_step(
            &self.params,
            &GradientVector {
                values: mean,
                origin: GradOrigin::BatchMean,
            },
            config.learning_rate,
        )?;
        flops.training += update_flops(p);

        if domain_count > 0 {
            for (e, d) in self.ema.iter_mut().zip(&domain_mean) {
                *e = 0.9 * *e + 0.1 * (d / domain_count as f64);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn loop_state<'a>(
    spec: &'a ModelSpec,
    params: ModelParams,
    pools: &'a TaskPools,
    domain_table: GeometryTable,
    general_table: GeometryTable,
    general_directions: Vec<Vec<f64>>,
    ema: Vec<f64>,
    config: &ExperimentConfig,
    anchor_ref: Vec<f64>,
    anchor_samples: Vec<Sample>,
    flops: &mut PhaseFlops,
) -> LoopState<'a> {
    let by_id: BTreeMap<u64, &Sample> = pools
        .domain
        .iter()
        .chain(&pools.general)
        .map(|s| (s.id, s))
        .collect();
    let mut norms: Vec<f64> = domain_table.records.iter().map(|r| r.grad_norm).collect();
    norms.sort_by(|a, b| a.total_cmp(b));
    let median = norms.get(norms.len() / 2).copied().unwrap_or(0.0);
    let mut state = LoopState {
        spec,
        params,
        domain_table,
        general_table,
        general_directions,
        ema,
        replay_table: GeometryTable {
            records: vec![],
            anchor_snapshot: 0,
            pool: PoolTag::General,
        },
        by_id,
        anchor_ref,
        anchor_samples,
        norm_floor: EXHAUSTED_NORM_FRACTION * median,
        last_batch_domain_ids: Vec::new(),
    };
    state.rebuild_replay_table(config, flops);
    state
}

/// Phase 1: learn the selection policy on the navigator. Every episode
/// resets the navigator to its phase-0 initial parameters, rolls out
/// `steps` policy-driven SGD steps, then applies one PPO update and one dual
/// update on the episode's discounted cost.
pub fn phase1_train_policy(
    config: &ExperimentConfig,
    pools: &TaskPools,
    artifacts: &Phase0Artifacts,
) -> Result<Phase1Output> {
    let k = config.selection.k;
    let mut flops = PhaseFlops::default();
    let p_n = config.navigator.param_count();

    let mut policy = PolicyParams::new(
        k,
        policy::state_dim(k),
        seed::component_seed(config.seed, "policy-init"),
    )?;
    let mut dual = config.dual;
    let config_hash = config.hash();

    // Baseline: the navigator's general loss before any fine-tuning.
    let baseline = evaluate(
        &config.navigator,
        &artifacts.navigator_init,
        &pools.domain_eval,
        &pools.general_eval,
        f64::INFINITY,
        config.delta,
        0,
    )?;
    flops.eval += fwd_flops(p_n, pools.domain_eval.len() + pools.general_eval.len());
    let baseline_general_loss = baseline.general_loss;

    let mut episode_reports = Vec::with_capacity(config.episodes);
    let mut aborted = 0usize;

    for e in 0..config.episodes {
        let started = Instant::now();
        let mut ep_flops = PhaseFlops::default();
        let outcome = run_navigator_episode(
            config,
            pools,
            artifacts,
            &policy,
            &dual,
            baseline_general_loss,
            e,
            &mut ep_flops,
        );
        match outcome {
            Ok((trajectory, trace, final_snapshot, start_id)) => {
                if config.use_rl_policy && !trajectory.is_empty() {
                    let (updated, _stats) = ppo_update(&policy, std::slice::from_ref(&trajectory), &dual, &config.policy)?;
                    policy = updated;
                    let j_c = discounted_cost(&trajectory, config.policy.gamma);
                    dual = dual_update(&dual, j_c);
                }
                episode_reports.push(RunReport {
                    config_hash: config_hash.clone(),
                    phase: format!("episode-{e}"),
                    params_start_id: format!("{:016x}", start_id),
                    baseline_general_loss,
                    aborted: false,
                    trace,
                    final_snapshot,
                    flops: ep_flops,
                    wall_time: started.elapsed(),
                });
            }
            Err(Error::DegenerateSample { .. }) | Err(Error::TrainingDivergence(_)) | Err(Error::PolicyDivergence(_)) => {
                aborted += 1;
                // The aborted flag carries the failure; losses report the
                // episode-start state so the record stays serializable.
                episode_reports.push(RunReport {
                    config_hash: config_hash.clone(),
                    phase: format!("episode-{e}"),
                    params_start_id: format!("{:016x}", artifacts.navigator_init.content_id()),
                    baseline_general_loss,
                    aborted: true,
                    trace: vec![],
                    final_snapshot: PerfSnapshot {
                        step: 0,
                        domain_loss: baseline.domain_loss,
                        general_loss: baseline.general_loss,
                        constraint_satisfied: -baseline.general_loss
                            >= -baseline.general_loss + config.delta,
                    },
                    flops: ep_flops,
                    wall_time: started.elapsed(),
                });
            }
            Err(other) => return Err(other),
        }
        flops.add(*episode_reports.last().map(|r| &r.flops).unwrap());
    }

    if config.episodes > 0 && aborted as f64 > 0.2 * config.episodes as f64 {
        return Err(Error::TrainingDivergence(format!(
            "{aborted} of {} episodes aborted",
            config.episodes
        )));
    }

    Ok(Phase1Output {
        policy,
        dual,
        episode_reports,
        flops,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_navigator_episode(
    config: &ExperimentConfig,
    pools: &TaskPools,
    artifacts: &Phase0Artifacts,
    policy: &PolicyParams,
    dual: &DualState,
    baseline_general_loss: f64,
    episode: usize,
    flops: &mut PhaseFlops,
) -> Result<(Vec<TrajectoryStep>, Vec<TraceRow>, PerfSnapshot, u64)> {
    let k = config.selection.k;
    let p_n = config.navigator.param_count();
    let by_id: BTreeMap<u64, &Sample> = pools.general.iter().map(|s| (s.id, s)).collect();
    let anchor_samples: Vec<Sample> = artifacts
        .anchor
        .anchor_ids
        .iter()
        .map(|id| (*by_id.get(id).expect("anchor id")).clone())
        .collect();

    // Exact reset to the phase-0 navigator.
    let mut state = loop_state(
        &config.navigator,
        artifacts.navigator_init.clone(),
        pools,
        artifacts.domain_table.clone(),
        artifacts.general_table.clone(),
        artifacts.general_directions.clone(),
        artifacts.domain_mean_grad.values.clone(),
        config,
        artifacts.anchor.g_ref.values.clone(),
        anchor_samples,
        flops,
    );
    let start_id = state.params.content_id();

    let mut perf = evaluate(
        &config.navigator,
        &state.params,
        &pools.domain_eval,
        &pools.general_eval,
        baseline_general_loss,
        config.delta,
        0,
    )?;
    flops.eval += fwd_flops(p_n, pools.domain_eval.len() + pools.general_eval.len());
    let baseline_general_perf = -baseline_general_loss;

    let mut trajectory = Vec::with_capacity(config.steps);
    let mut trace = Vec::with_capacity(config.steps);

    for t in 0..config.steps {
        if t > 0 && t % config.cluster_refresh_every == 0 {
            state.refresh_geometry(
                config,
                &artifacts.domain_assignment,
                &artifacts.general_assignment,
                seed::indexed_seed(config.seed, "phase1-refresh", (episode * config.steps + t) as u64),
                flops,
            )?;
        }

        let policy_state = encode_state(
            -perf.domain_loss,
            -perf.general_loss,
            &state.domain_table,
            &artifacts.domain_assignment,
            k,
            t,
            config.steps,
        );
        let step_index = (episode * config.steps + t) as u64;
        let (action, log_prob) = policy_action(
            policy,
            &policy_state,
            seed::indexed_seed(config.seed, "phase1-action", step_index),
            ActionMode::Sample,
        )?;
        let alpha = action.alpha();
        let batch_ids = state.assemble_batch(
            config,
            &artifacts.domain_assignment,
            action,
            alpha,
            seed::indexed_seed(config.seed, "phase1-mix", step_index),
            seed::indexed_seed(config.seed, "phase1-fallback", step_index),
        );
        state.train_step(config, &batch_ids, flops)?;

        let new_perf = evaluate(
            &config.navigator,
            &state.params,
            &pools.domain_eval,
            &pools.general_eval,
            baseline_general_loss,
            config.delta,
            t + 1,
        )?;
        flops.eval += fwd_flops(p_n, pools.domain_eval.len() + pools.general_eval.len());

        let (reward, cost) = compute_reward_cost(
            (-perf.domain_loss, -perf.general_loss),
            (-new_perf.domain_loss, -new_perf.general_loss),
            baseline_general_perf,
        );
        let (value_estimate, cost_value_estimate) = value_estimates(policy, &policy_state)?;
        trajectory.push(TrajectoryStep {
            state: policy_state,
            action,
            reward,
            cost,
            log_prob,
            value_estimate,
            cost_value_estimate,
        });
        trace.push(TraceRow {
            step: t,
            cluster: action.cluster,
            alpha,
            reward,
            cost,
            lambda: dual.lambda,
            domain_loss: new_perf.domain_loss,
            general_loss: new_perf.general_loss,
        });
        perf = new_perf;
    }

    Ok((trajectory, trace, perf, start_id))
}

/// Phase 2: apply the frozen policy to the target with plain SGD. The target
/// pools are scored once at phase start (against a target-side anchor built
/// from the same anchor sample ids), phase-0 cluster structure is reused by
/// sample id, and geometry statistics refresh on the configured cadence.
pub fn phase2_apply(
    config: &ExperimentConfig,
    pools: &TaskPools,
    artifacts: &Phase0Artifacts,
    policy: &PolicyParams,
) -> Result<(ModelParams, RunReport)> {
    let started = Instant::now();
    let k = config.selection.k;
    let p_t = config.target.param_count();
    let mut flops = PhaseFlops::default();
    let config_hash = config.hash();

    let (target_init, pretrain_flops) =
        pretrained_init(&config.target, config, &pools.general, "target-init")?;
    flops.setup += pretrain_flops;
    let by_id: BTreeMap<u64, &Sample> = pools.general.iter().map(|s| (s.id, s)).collect();
    let anchor_samples: Vec<Sample> = artifacts
        .anchor
        .anchor_ids
        .iter()
        .map(|id| (*by_id.get(id).expect("anchor id")).clone())
        .collect();
    let target_anchor = build_anchor_gradient(&config.target, &target_init, &anchor_samples)?;
    flops.scoring += grad_flops(p_t, anchor_samples.len());

    let (mut domain_table, _) =
        score_pool_with_directions(&config.target, &target_init, &pools.domain, &target_anchor)?;
    let (mut general_table, general_dirs) =
        score_pool_with_directions(&config.target, &target_init, &pools.general, &target_anchor)?;
    flops.scoring += grad_flops(p_t, pools.domain.len() + pools.general.len())
        + dot_flops(p_t, pools.domain.len() + pools.general.len());

    // Reuse phase-0 clusters by sample id.
    for rec in &mut domain_table.records {
        rec.cluster = artifacts.domain_assignment.cluster_of(rec.sample_id);
    }
    for rec in &mut general_table.records {
        rec.cluster = artifacts.general_assignment.cluster_of(rec.sample_id);
    }

    let domain_mean = batch_mean_gradient(&config.target, &target_init, &pools.domain)?;
    flops.scoring += grad_flops(p_t, pools.domain.len());

    let baseline = evaluate(
        &config.target,
        &target_init,
        &pools.domain_eval,
        &pools.general_eval,
        f64::INFINITY,
        config.delta,
        0,
    )?;
    flops.eval += fwd_flops(p_t, pools.domain_eval.len() + pools.general_eval.len());
    let baseline_general_loss = baseline.general_loss;
    let baseline_general_perf = -baseline_general_loss;

    let target_start_id = format!("{:016x}", target_init.content_id());
    let mut state = loop_state(
        &config.target,
        target_init,
        pools,
        domain_table,
        general_table,
        general_dirs,
        domain_mean.values,
        config,
        target_anchor.g_ref.values.clone(),
        anchor_samples,
        &mut flops,
    );

    let mut trace = Vec::with_capacity(config.target_steps);
    let mut last_eval = baseline;

    for t in 0..config.target_steps {
        if t > 0 && t % config.cluster_refresh_every == 0 {
            state.refresh_geometry(
                config,
                &artifacts.domain_assignment,
                &artifacts.general_assignment,
                seed::indexed_seed(config.seed, "phase2-refresh", t as u64),
                &mut flops,
            )?;
        }

        let policy_state = encode_state(
            -last_eval.domain_loss,
            -last_eval.general_loss,
            &state.domain_table,
            &artifacts.domain_assignment,
            k,
            t,
            config.target_steps,
        );
        let (action, alpha) = if config.use_rl_policy {
            let (a, _) = policy_action(policy, &policy_state, 0, ActionMode::Argmax)?;
            (a, a.alpha())
        } else {
            (static_greedy_action(&policy_state, k), config.static_alpha)
        };
        let batch_ids = state.assemble_batch(
            config,
            &artifacts.domain_assignment,
            action,
            alpha,
            seed::indexed_seed(config.seed, "phase2-mix", t as u64),
            seed::indexed_seed(config.seed, "phase2-fallback", t as u64),
        );
        state.train_step(config, &batch_ids, &mut flops)?;

        let evaluated = t % config.eval_every == 0 || t + 1 == config.target_steps;
        let (reward, cost) = if evaluated {
            let snap = evaluate(
                &config.target,
                &state.params,
                &pools.domain_eval,
                &pools.general_eval,
                baseline_general_loss,
                config.delta,
                t + 1,
            )?;
            flops.eval += fwd_flops(p_t, pools.domain_eval.len() + pools.general_eval.len());
            let rc = compute_reward_cost(
                (-last_eval.domain_loss, -last_eval.general_loss),
                (-snap.domain_loss, -snap.general_loss),
                baseline_general_perf,
            );
            last_eval = snap;
            rc
        } else {
            (0.0, 0.0)
        };
        trace.push(TraceRow {
            step: t,
            cluster: action.cluster,
            alpha,
            reward,
            cost,
            lambda: 0.0,
            domain_loss: last_eval.domain_loss,
            general_loss: last_eval.general_loss,
        });
    }

    let final_snapshot = PerfSnapshot {
        step: config.target_steps,
        domain_loss: last_eval.domain_loss,
        general_loss: last_eval.general_loss,
        constraint_satisfied: -last_eval.general_loss >= -baseline_general_loss + config.delta,
    };
    let params = state.params;
    Ok((
        params,
        RunReport {
            config_hash,
            phase: "target".into(),
            params_start_id: target_start_id,
            baseline_general_loss,
            aborted: false,
            trace,
            final_snapshot,
            flops,
            wall_time: started.elapsed(),
        },
    ))
}

/// Static fallback when RL is disabled: the cluster with the highest mean
/// orthogonality (ties to the lowest index), read from the encoded state.
fn static_greedy_action(state: &PolicyState, k: usize) -> Action {
    let orth_means = &state.features[2..2 + k];
    let mut best = 0;
    for (i, &v) in orth_means.iter().enumerate() {
        if v > orth_means[best] {
            best = i;
        }
    }
    Action {
        cluster: best,
        alpha_bucket: 0,
    }
}

/// Runs phases 0 through 2 end to end.
pub fn run_full(config: &ExperimentConfig, pools: &TaskPools) -> Result<FullRunReport> {
    let artifacts = phase0_preprocess(config, pools)?;
    let (episodes, policy) = if config.use_rl_policy && config.episodes > 0 {
        let phase1 = phase1_train_policy(config, pools, &artifacts)?;
        (phase1.episode_reports, phase1.policy)
    } else {
        (
            vec![],
            PolicyParams::new(
                config.selection.k,
                policy::state_dim(config.selection.k),
                seed::component_seed(config.seed, "policy-init"),
            )?,
        )
    };
    let (_, target_report) = phase2_apply(config, pools, &artifacts, &policy)?;
    Ok(FullRunReport {
        config_hash: config.hash(),
        pool_hash: format!("{:016x}", pools.id_hash()),
        phase0_flops: artifacts.flops,
        episodes,
        target: target_report,
    })
}

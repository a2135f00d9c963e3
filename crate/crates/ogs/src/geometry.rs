//! Anchor gradients and gradient-geometry scores.
//!
//! The anchor gradient is the mean gradient over a curated set of general
//! samples; it is the direction in parameter space we protect. Every
//! candidate sample is then scored against it:
//!
//! - orthogonality `1 - |cos(g, g_ref)|`: proximity to the hyperplane
//!   perpendicular to the anchor (1 = perfectly safe direction),
//! - conflict `-cos(g, g_ref)`: positive when an update on the sample opposes
//!   the anchor, negative when it helps it.
//!
//! Gradients with norm below [`DEGENERATE_NORM`] have no direction; by
//! convention they score orth = 1, conf = 0 and carry `grad_norm = 0` so
//! callers can filter them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, batch_mean_gradient, per_sample_gradient, GradOrigin, GradientVector, ModelParams,
    ModelSpec, PoolTag, Sample,
};
use crate::report::{fmt_f64, CsvWriter};

/// Norm threshold below which a gradient is treated as directionless.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// The cached anchor: which samples built it, the mean gradient, and the
/// identity of the parameter snapshot it was computed at.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorArtifacts {
    pub anchor_ids: Vec<u64>,
    pub g_ref: GradientVector,
    pub params_snapshot_id: u64,
}

/// Per-sample geometry relative to an anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub sample_id: u64,
    pub orth: f64,
    pub conf: f64,
    pub grad_norm: f64,
    pub cluster: Option<usize>,
}

/// All geometry records for one pool against one anchor snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryTable {
    pub records: Vec<GeometryRecord>,
    pub anchor_snapshot: u64,
    pub pool: PoolTag,
}

impl GeometryTable {
    pub fn record(&self, sample_id: u64) -> Option<&GeometryRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    /// Fixed-column CSV rendering: sample_id,pool,orth,conf,grad_norm,cluster
    /// with 17-significant-digit floats and an empty cluster field when the
    /// record is unclustered.
    pub fn to_csv(&self) -> String {
        let mut w = CsvWriter::new(&["sample_id", "pool", "orth", "conf", "grad_norm", "cluster"]);
        for r in &self.records {
            w.row(&[
                r.sample_id.to_string(),
                self.pool.to_string(),
                fmt_f64(r.orth),
                fmt_f64(r.conf),
                fmt_f64(r.grad_norm),
                r.cluster.map(|c| c.to_string()).unwrap_or_default(),
            ]);
        }
        w.finish()
    }

    /// Parses the CSV produced by [`GeometryTable::to_csv`]. The anchor
    /// snapshot is not part of the CSV and is restored as 0.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty geometry csv".into()))?;
        if header != "sample_id,pool,orth,conf,grad_norm,cluster" {
            return Err(Error::Parse(format!("unexpected geometry header: {header}")));
        }
        let mut pool = None;
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::Parse(format!("row {}: expected 6 fields", n + 2)));
            }
            let row_pool = match fields[1] {
                "domain" => PoolTag::Domain,
                "general" => PoolTag::General,
                other => return Err(Error::Parse(format!("row {}: bad pool {other}", n + 2))),
            };
            match pool {
                None => pool = Some(row_pool),
                Some(p) if p == row_pool => {}
                Some(_) => return Err(Error::Parse("mixed pools in one table".into())),
            }
            let parse_f = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: bad {what} `{s}`", n + 2)))
            };
            records.push(GeometryRecord {
                sample_id: fields[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}: bad id", n + 2)))?,
                orth: parse_f(fields[2], "orth")?,
                conf: parse_f(fields[3], "conf")?,
                grad_norm: parse_f(fields[4], "grad_norm")?,
                cluster: if fields[5].is_empty() {
                    None
                } else {
                    Some(
                        fields[5]
                            .parse()
                            .map_err(|_| Error::Parse(format!("row {}: bad cluster", n + 2)))?,
                    )
                },
            });
        }
        Ok(GeometryTable {
            records,
            anchor_snapshot: 0,
            pool: pool.ok_or_else(|| Error::Parse("geometry csv has no rows".into()))?,
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    let d = model::dot(a, b)?;
    let na = model::norm(a);
    let nb = model::norm(b);
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(None);
    }
    // Clamp against rounding just past +/-1.
    Ok(Some((d / (na * nb)).clamp(-1.0, 1.0)))
}

/// `1 - |cos(g, g_ref)|`, in [0, 1]; degenerate norms score 1.
pub fn orthogonality_score(g: &GradientVector, g_ref: &GradientVector) -> Result<f64> {
    Ok(match cosine(&g.values, &g_ref.values)? {
        Some(c) => 1.0 - c.abs(),
        None => 1.0,
    })
}

/// `-cos(g, g_ref)`, in [-1, 1]; degenerate norms score 0.
pub fn conflict_score(g: &GradientVector, g_ref: &GradientVector) -> Result<f64> {
    Ok(match cosine(&g.values, &g_ref.values)? {
        Some(c) => -c,
        None => 0.0,
    })
}

/// First-order prediction of the general-loss change under the update
/// `theta - eta * g_dom`: returns `-eta * <g_gen, g_dom>`.
pub fn predict_general_loss_delta(
    g_gen: &GradientVector,
    g_dom: &GradientVector,
    eta: f64,
) -> Result<f64> {
    if eta <= 0.0 {
        return Err(Error::InvalidInput(format!("eta must be positive, got {eta}")));
    }
    Ok(-eta * g_gen.dot(g_dom)?)
}

/// Three-way classification of a conflict score against a tolerance band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Safety {
    Conflict,
    Orthogonal,
    Synergy,
}

pub fn classify_safety(conf: f64, tol: f64) -> Safety {
    if conf > tol {
        Safety::Conflict
    } else if conf < -tol {
        Safety::Synergy
    } else {
        Safety::Orthogonal
    }
}

/// Mean gradient over the anchor set, cached with the snapshot identity of
/// the parameters it was computed at. Fails if the mean gradient vanishes
/// (an anchor with no direction protects nothing).
pub fn build_anchor_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    anchor_samples: &[Sample],
) -> Result<AnchorArtifacts> {
    if anchor_samples.is_empty() {
        return Err(Error::InvalidInput("empty anchor set".into()));
    }
    let mean = batch_mean_gradient(spec, params, anchor_samples)?;
    let norm = mean.norm();
    if norm < DEGENERATE_NORM {
        return Err(Error::AnchorCollapse { norm });
    }
    Ok(AnchorArtifacts {
        anchor_ids: anchor_samples.iter().map(|s| s.id).collect(),
        g_ref: GradientVector {
            values: mean.values,
            origin: GradOrigin::Anchor,
        },
        params_snapshot_id: params.content_id(),
    })
}

/// Greedy active anchor selection: rank general samples by the cosine of
/// their gradient against the domain pool's mean gradient, ascending (most
/// conflicted first), and keep the `k` lowest. Ties break on ascending id.
///
/// The exact subset objective is combinatorial; this per-sample ranking is
/// the greedy relaxation, and tests quantify its gap on tiny instances.
pub fn active_anchor_select(
    spec: &ModelSpec,
    params: &ModelParams,
    gen_pool: &[Sample],
    domain_pool: &[Sample],
    k: usize,
) -> Result<Vec<u64>> {
    if gen_pool.is_empty() || domain_pool.is_empty() {
        return Err(Error::InvalidInput("active anchor selection needs non-empty pools".into()));
    }
    if k == 0 || k > gen_pool.len() {
        return Err(Error::InvalidInput(format!(
            "anchor size {k} out of range for general pool of {}",
            gen_pool.len()
        )));
    }
    let g_dom = batch_mean_gradient(spec, params, domain_pool)?;
    let mut ranked: Vec<(f64, u64)> = Vec::with_capacity(gen_pool.len());
    for s in gen_pool {
        let g = per_sample_gradient(spec, params, s)?;
        let c = cosine(&g.values, &g_dom.values)?.unwrap_or(0.0);
        ranked.push((c, s.id));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Scores every sample of a pool against the anchor. One record per sample,
/// in pool order; `orth = 1 - |conf|` holds for every record.
pub fn score_pool(
    spec: &ModelSpec,
    params: &ModelParams,
    pool: &[Sample],
    anchor: &AnchorArtifacts,
) -> Result<GeometryTable> {
    Ok(score_pool_with_directions(spec, params, pool, anchor)?.0)
}

/// Like [`score_pool`] but also returns each sample's unit gradient
/// direction (zero vector for degenerate gradients), for clustering.
pub fn score_pool_with_directions(
    spec: &ModelSpec,
    params: &ModelParams,
    pool: &[Sample],
    anchor: &AnchorArtifacts,
) -> Result<(GeometryTable, Vec<Vec<f64>>)> {
    if anchor.g_ref.values.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            what: "anchor gradient",
            expected: spec.param_count(),
            got: anchor.g_ref.values.len(),
        });
    }
    let pool_tag = pool.first().map(|s| s.pool).unwrap_or(PoolTag::Domain);
    let mut records = Vec::with_capacity(pool.len());
    let mut directions = Vec::with_capacity(pool.len());
    for s in pool {
        let g = per_sample_gradient(spec, params, s)?;
        let norm = g.norm();
        let conf = conflict_score(&g, &anchor.g_ref)?;
        let orth = 1.0 - conf.abs();
        records.push(GeometryRecord {
            sample_id: s.id,
            orth,
            conf,
            grad_norm: norm,
            cluster: None,
        });
        if norm < DEGENERATE_NORM {
            directions.push(vec![0.0; g.values.len()]);
        } else {
            directions.push(g.values.iter().map(|v| v / norm).collect());
        }
    }
    Ok((
        GeometryTable {
            records,
            anchor_snapshot: anchor.params_snapshot_id,
            pool: pool_tag,
        },
        directions,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation, LossKind, Target};
    use crate::seed;
    use rand::Rng;

    fn gv(values: Vec<f64>) -> GradientVector {
        GradientVector {
            values,
            origin: GradOrigin::PerSample,
        }
    }

    #[test]
    fn orthogonality_trivial_cases() {
        let g = gv(vec![1.0, 0.0]);
        assert_eq!(orthogonality_score(&g, &g).unwrap(), 0.0);
        let perp = gv(vec![0.0, 1.0]);
        assert_eq!(orthogonality_score(&g, &perp).unwrap(), 1.0);
        let diag = gv(vec![1.0, 1.0]);
        let got = orthogonality_score(&diag, &g).unwrap();
        assert!((got - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn conflict_trivial_cases() {
        let g = gv(vec![0.3, -0.4]);
        let neg = gv(vec![-0.3, 0.4]);
        assert!((conflict_score(&neg, &g).unwrap() - 1.0).abs() < 1e-15);
        assert!((conflict_score(&g, &g).unwrap() + 1.0).abs() < 1e-15);
        let diag = gv(vec![1.0, 1.0]);
        let axis = gv(vec![1.0, 0.0]);
        assert!((conflict_score(&diag, &axis).unwrap() + 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_norms_use_the_convention() {
        let zero = gv(vec![0.0, 0.0]);
        let g = gv(vec![1.0, 2.0]);
        assert_eq!(orthogonality_score(&zero, &g).unwrap(), 1.0);
        assert_eq!(orthogonality_score(&g, &zero).unwrap(), 1.0);
        assert_eq!(conflict_score(&zero, &g).unwrap(), 0.0);
    }

    #[test]
    fn scores_reject_dimension_mismatch() {
        let a = gv(vec![1.0, 0.0]);
        let b = gv(vec![1.0, 0.0, 0.0]);
        assert!(orthogonality_score(&a, &b).is_err());
        assert!(conflict_score(&a, &b).is_err());
    }

    #[test]
    fn identity_orth_equals_one_minus_abs_conf_randomized() {
        let mut rng = seed::component_rng(5, "geometry-identity");
        for dim in [2usize, 10, 1000] {
            for _ in 0..200 {
                let a = gv((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let b = gv((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let orth = orthogonality_score(&a, &b).unwrap();
                let conf = conflict_score(&a, &b).unwrap();
                assert!((0.0..=1.0).contains(&orth));
                assert!((-1.0..=1.0).contains(&conf));
                assert!((orth - (1.0 - conf.abs())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_are_scale_invariant_and_antisymmetric() {
        let mut rng = seed::component_rng(6, "geometry-scale");
        for _ in 0..100 {
            let dim = 8;
            let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = rng.gen_range(0.01..100.0);
            let d = rng.gen_range(0.01..100.0);
            let scaled_a = gv(a.iter().map(|v| v * c).collect());
            let scaled_b = gv(b.iter().map(|v| v * d).collect());
            let (ga, gb) = (gv(a.clone()), gv(b.clone()));
            assert!(
                (orthogonality_score(&scaled_a, &scaled_b).unwrap()
                    - orthogonality_score(&ga, &gb).unwrap())
                .abs()
                    < 1e-12
            );
            assert!(
                (conflict_score(&scaled_a, &scaled_b).unwrap() - conflict_score(&ga, &gb).unwrap())
                    .abs()
                    < 1e-12
            );
            let neg_a = gv(a.iter().map(|v| -v).collect());
            assert!(
                (conflict_score(&neg_a, &gb).unwrap() + conflict_score(&ga, &gb).unwrap()).abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn classify_safety_band() {
        assert_eq!(classify_safety(0.5, 0.1), Safety::Conflict);
        assert_eq!(classify_safety(0.0, 0.1), Safety::Orthogonal);
        assert_eq!(classify_safety(-0.05, 0.1), Safety::Orthogonal);
        assert_eq!(classify_safety(-0.5, 0.1), Safety::Synergy);
    }

    #[test]
    fn predict_delta_arithmetic() {
        let g_gen = gv(vec![2.0, 0.0]);
        let g_dom = gv(vec![1.0, 0.0]);
        let got = predict_general_loss_delta(&g_gen, &g_dom, 0.1).unwrap();
        assert!((got + 0.2).abs() < 1e-15);
        let perp = gv(vec![0.0, 3.0]);
        assert_eq!(predict_general_loss_delta(&g_gen, &perp, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn predict_delta_quadratic_closed_form() {
        // L_gen(theta) = 0.5 ||theta||^2, so g_gen = theta and
        // actual - predicted = 0.5 eta^2 ||g_dom||^2 exactly.
        let mut rng = seed::component_rng(8, "quadratic-check");
        let dim = 12;
        let theta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g_dom_vals: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eta = 1e-2;
        let l = |v: &[f64]| 0.5 * v.iter().map(|x| x * x).sum::<f64>();
        let stepped: Vec<f64> = theta
            .iter()
            .zip(&g_dom_vals)
            .map(|(t, g)| t - eta * g)
            .collect();
        let actual = l(&stepped) - l(&theta);
        let predicted =
            predict_general_loss_delta(&gv(theta.clone()), &gv(g_dom_vals.clone()), eta).unwrap();
        let second_order = 0.5 * eta * eta * g_dom_vals.iter().map(|g| g * g).sum::<f64>();
        assert!((actual - predicted - second_order).abs() < 1e-14);
    }

    fn toy_sample(id: u64, x: f64, y: f64) -> Sample {
        Sample {
            id,
            features: vec![x],
            target: Target::Regression(vec![y]),
            pool: PoolTag::General,
        }
    }

    fn linear_spec() -> ModelSpec {
        ModelSpec::new(vec![1, 1], Activation::Identity, LossKind::SquaredError).unwrap()
    }

    #[test]
    fn anchor_of_single_sample_equals_its_gradient() {
        let spec = linear_spec();
        let params = ModelParams::new(&spec, vec![1.0, 0.0]).unwrap();
        let s = toy_sample(9, 2.0, 0.0);
        let anchor = build_anchor_gradient(&spec, &params, std::slice::from_ref(&s)).unwrap();
        let g = per_sample_gradient(&spec, &params, &s).unwrap();
        assert_eq!(anchor.g_ref.values, g.values);
        assert_eq!(anchor.g_ref.origin, GradOrigin::Anchor);
        assert_eq!(anchor.anchor_ids, vec![9]);
        assert_eq!(anchor.params_snapshot_id, params.content_id());
    }

    #[test]
    fn anchor_collapse_on_cancellation() {
        let spec = linear_spec();
        let params = ModelParams::new(&spec, vec![1.0, 0.0]).unwrap();
        let up = toy_sample(0, 1.5, 1.5 - 0.25);
        let down = toy_sample(1, 1.5, 1.5 + 0.25);
        assert!(matches!(
            build_anchor_gradient(&spec, &params, &[up, down]),
            Err(Error::AnchorCollapse { .. })
        ));
    }

    #[test]
    fn anchor_recomputation_is_exact() {
        let spec =
            ModelSpec::new(vec![2, 4, 1], Activation::Tanh, LossKind::SquaredError).unwrap();
        let params = init_params(&spec, 31);
        let mut rng = seed::component_rng(31, "anchor-repro");
        let samples: Vec<Sample> = (0..10)
            .map(|i| Sample {
                id: i,
                features: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                target: Target::Regression(vec![rng.gen_range(-1.0..1.0)]),
                pool: PoolTag::General,
            })
            .collect();
        let a = build_anchor_gradient(&spec, &params, &samples).unwrap();
        let b = build_anchor_gradient(&spec, &params, &samples).unwrap();
        assert_eq!(a.g_ref.values, b.g_ref.values);
        assert_eq!(a.params_snapshot_id, b.params_snapshot_id);
    }

    #[test]
    fn anchor_of_400_samples_matches_explicit_sum() {
        // Anchor set of 400 exemplars, checked against a brute-force
        // sum / 400 accumulated coordinatewise.
        let spec =
            ModelSpec::new(vec![3, 4, 1], Activation::Tanh, LossKind::SquaredError).unwrap();
        let params = init_params(&spec, 40);
        let mut rng = seed::component_rng(40, "anchor-400");
        let samples: Vec<Sample> = (0..400)
            .map(|i| Sample {
                id: i,
                features: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: Target::Regression(vec![rng.gen_range(-1.0..1.0)]),
                pool: PoolTag::General,
            })
            .collect();
        let anchor = build_anchor_gradient(&spec, &params, &samples).unwrap();
        let mut sum = vec![0.0; spec.param_count()];
        for s in &samples {
            let g = per_sample_gradient(&spec, &params, s).unwrap();
            for (a, v) in sum.iter_mut().zip(&g.values) {
                *a += v;
            }
        }
        for (i, s) in sum.iter().enumerate() {
            assert!((anchor.g_ref.values[i] - s / 400.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn active_anchor_whole_pool_and_argmin() {
        let spec = linear_spec();
        let params = ModelParams::new(&spec, vec![0.0, 0.0]).unwrap();
        // Gradients at w=0,b=0 for sample (x, y): -2y * (x, 1).
        // Domain mean gradient direction is set by its samples; general
        // samples then have known cosines against it.
        let domain = vec![toy_sample(100, 1.0, 1.0)]; // grad -2(1,1)
        let gen_pool = vec![
            toy_sample(0, 1.0, 1.0),   // aligned with domain: cos 1
            toy_sample(1, 1.0, -1.0),  // opposite: cos -1
            toy_sample(2, -1.0, 1.0),  // grad -2(-1,1): cos 0
        ];
        let all = active_anchor_select(&spec, &params, &gen_pool, &domain, 3).unwrap();
        assert_eq!(all.len(), 3);
        let picked = active_anchor_select(&spec, &params, &gen_pool, &domain, 1).unwrap();
        assert_eq!(picked, vec![1]);
    }

    #[test]
    fn active_anchor_greedy_vs_exhaustive_oracle() {
        // Tiny instances: compare the greedy objective against the exact
        // subset optimum and record the gap; greedy must either match an
        // optimum or be flagged suboptimal by the oracle, never better.
        let spec =
            ModelSpec::new(vec![2, 3, 1], Activation::Tanh, LossKind::SquaredError).unwrap();
        let params = init_params(&spec, 55);
        let mut rng = seed::component_rng(55, "active-anchor-oracle");
        let mut suboptimal = 0;
        for trial in 0..10u64 {
            let gen_pool: Vec<Sample> = (0..8)
                .map(|i| Sample {
                    id: i,
                    features: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    target: Target::Regression(vec![rng.gen_range(-1.0..1.0)]),
                    pool: PoolTag::General,
                })
                .collect();
            let domain: Vec<Sample> = (0..4)
                .map(|i| Sample {
                    id: 100 + i,
                    features: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    target: Target::Regression(vec![rng.gen_range(-1.0..1.0)]),
                    pool: PoolTag::Domain,
                })
                .collect();
            let k = 1 + (trial as usize % 3);
            let picked = active_anchor_select(&spec, &params, &gen_pool, &domain, k).unwrap();

            let g_dom = batch_mean_gradient(&spec, &params, &domain).unwrap();
            let grads: Vec<GradientVector> = gen_pool
                .iter()
                .map(|s| per_sample_gradient(&spec, &params, s).unwrap())
                .collect();
            let subset_cos = |ids: &[usize]| {
                let mut mean = vec![0.0; grads[0].values.len()];
                for &i in ids {
                    for (m, v) in mean.iter_mut().zip(&grads[i].values) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= ids.len() as f64;
                }
                cosine(&mean, &g_dom.values).unwrap().unwrap_or(0.0)
            };
            // Exhaustive minimum over all C(8, k) subsets.
            let mut best = f64::INFINITY;
            let mut stack: Vec<Vec<usize>> = vec![vec![]];
            while let Some(prefix) = stack.pop() {
                if prefix.len() == k {
                    best = best.min(subset_cos(&prefix));
                    continue;
                }
                let start = prefix.last().map_or(0, |l| l + 1);
                for next in start..gen_pool.len() {
                    let mut p = prefix.clone();
                    p.push(next);
                    stack.push(p);
                }
            }
            let picked_idx: Vec<usize> = picked.iter().map(|id| *id as usize).collect();
            let greedy_obj = subset_cos(&picked_idx);
            assert!(greedy_obj >= best - 1e-12, "greedy beat the exhaustive optimum");
            if greedy_obj > best + 1e-12 {
                suboptimal += 1;
            }
        }
        // The gap exists on some instances; just record it.
        println!("active-anchor greedy suboptimal on {suboptimal}/10 tiny instances");
    }

    #[test]
    fn score_pool_matches_standalone_scores() {
        let spec =
            ModelSpec::new(vec![2, 4, 1], Activation::Tanh, LossKind::SquaredError).unwrap();
        let params = init_params(&spec, 61);
        let mut rng = seed::component_rng(61, "score-pool");
        let pool: Vec<Sample> = (0..100)
            .map(|i| Sample {
                id: i,
                features: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                target: Target::Regression(vec![rng.gen_range(-1.0..1.0)]),
                pool: PoolTag::Domain,
            })
            .collect();
        let anchor_samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                id: 1000 + i,
                features: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                target: Target::Regression(vec![rng.gen_range(-1.0..1.0)]),
                pool: PoolTag::General,
            })
            .collect();
        let anchor = build_anchor_gradient(&spec, &params, &anchor_samples).unwrap();
        let table = score_pool(&spec, &params, &pool, &anchor).unwrap();
        assert_eq!(table.records.len(), 100);
        for idx in [0usize, 17, 42, 76, 99] {
            let g = per_sample_gradient(&spec, &params, &pool[idx]).unwrap();
            let orth = orthogonality_score(&g, &anchor.g_ref).unwrap();
            let conf = conflict_score(&g, &anchor.g_ref).unwrap();
            let rec = &table.records[idx];
            assert!((rec.orth - orth).abs() < 1e-15);
            assert!((rec.conf - conf).abs() < 1e-15);
            assert!((rec.orth - (1.0 - rec.conf.abs())).abs() < 1e-15);
            assert!((rec.grad_norm - g.norm()).abs() < 1e-15);
        }
    }

    #[test]
    fn score_pool_on_anchor_set_itself() {
        let spec =
            ModelSpec::new(vec![2, 4, 1], Activation::Tanh, LossKind::SquaredError).unwrap();
        let params = init_params(&spec, 62);
        let mut rng = seed::component_rng(62, "score-anchor-pool");
        let anchor_samples: Vec<Sample> = (0..20)
            .map(|i| Sample {
                id: i,
                features: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                target: Target::Regression(vec![rng.gen_range(-1.0..1.0)]),
                pool: PoolTag::General,
            })
            .collect();
        let anchor = build_anchor_gradient(&spec, &params, &anchor_samples).unwrap();
        let table = score_pool(&spec, &params, &anchor_samples, &anchor).unwrap();
        let mean_conf: f64 =
            table.records.iter().map(|r| r.conf).sum::<f64>() / table.records.len() as f64;
        assert!(mean_conf <= 0.0, "anchor set conflicts with itself: {mean_conf}");

        // Single-sample anchor: that sample's conflict with itself is -1.
        let single = build_anchor_gradient(&spec, &params, &anchor_samples[..1]).unwrap();
        let t1 = score_pool(&spec, &params, &anchor_samples[..1], &single).unwrap();
        assert!((t1.records[0].conf + 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_pool_gives_empty_table() {
        let spec = linear_spec();
        let params = ModelParams::new(&spec, vec![1.0, 0.0]).unwrap();
        let s = toy_sample(0, 1.0, 0.0);
        let anchor = build_anchor_gradient(&spec, &params, &[s]).unwrap();
        let table = score_pool(&spec, &params, &[], &anchor).unwrap();
        assert!(table.records.is_empty());
    }

    #[test]
    fn csv_round_trips() {
        let table = GeometryTable {
            records: vec![
                GeometryRecord {
                    sample_id: 3,
                    orth: 0.25,
                    conf: 0.75,
                    grad_norm: 1.5,
                    cluster: Some(2),
                },
                GeometryRecord {
                    sample_id: 4,
                    orth: 1.0,
                    conf: 0.0,
                    grad_norm: 0.0,
                    cluster: None,
                },
            ],
            anchor_snapshot: 0,
            pool: PoolTag::Domain,
        };
        let csv = table.to_csv();
        assert!(csv.starts_with("sample_id,pool,orth,conf,grad_norm,cluster\n"));
        let back = GeometryTable::from_csv(&csv).unwrap();
        assert_eq!(back, table);
    }
}

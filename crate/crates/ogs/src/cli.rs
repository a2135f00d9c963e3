//! Command-line surface.
//!
//! One thin binary fronts the library: every subcommand reads the same TOML
//! configuration (all keys optional), derives its randomness from one run
//! seed, writes data files under the output directory only, and reports
//! diagnostics on stderr. Exit codes: 0 success, 1 validation problems
//! (bad flags, config errors, refusing to overwrite), 2 runtime failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, Method};
use crate::config::{load_config, FileConfig};
use crate::error::{Error, Result};
use crate::geometry::{build_anchor_gradient, score_pool, AnchorArtifacts, GeometryTable};
use crate::model::Sample;
use crate::pipeline::{self, pretrained_init, FullRunReport, TaskPools};
use crate::report::{to_canonical_json, write_output};
use crate::selection::{greedy_topk_by_alignment, select_orthogonal, select_replay};
use crate::verify::{run_suite, CheckSelection};

/// Environment variable with the default output directory.
pub const OUT_DIR_ENV: &str = "OGS_OUT_DIR";

fn default_config_help() -> String {
    format!(
        "Configuration defaults (every key in the TOML file is optional):\n\n{}",
        FileConfig::default().to_toml().unwrap_or_default()
    )
}

#[derive(Parser)]
#[command(
    name = "ogs",
    about = "Gradient-geometry data selection on synthetic continual-learning tasks",
    long_about = "Scores candidate samples by the orthogonality and conflict of their \
gradients against a protected anchor direction, learns a constrained selection policy on a \
small navigator model, and fine-tunes a larger target with the resulting curriculum. \
Subcommands cover the benchmark generator, geometry scoring, selection strategies, policy \
training, full runs, method comparisons, and the verification suite.",
    version,
    after_long_help = default_config_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; omitted means all defaults.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the run seed (also reseeds the benchmark and verify suite).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to $OGS_OUT_DIR, then ./out).
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Machine-readable summaries on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark pools (writes pools.json).
    GenBench {
        #[command(flatten)]
        common: Common,
    },
    /// Build the anchor gradient on the navigator (writes anchor.json).
    Anchor {
        #[command(flatten)]
        common: Common,
        /// Pools file from gen-bench; regenerated from config when omitted.
        #[arg(long, value_name = "FILE")]
        pools: Option<PathBuf>,
    },
    /// Score both pools against the anchor (writes geometry CSVs).
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        pools: Option<PathBuf>,
    },
    /// Run one selection strategy over a geometry CSV (writes selection.json).
    Select {
        #[command(flatten)]
        common: Common,
        /// Geometry table CSV produced by `score`.
        #[arg(long, value_name = "FILE")]
        table: PathBuf,
        /// orthogonal | replay | greedy-alignment
        #[arg(long)]
        strategy: String,
        /// Budget for greedy-alignment (defaults to selection.budget_k).
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train the selection policy on the navigator (writes policy.json).
    TrainPolicy {
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline: preprocessing, policy learning, target application
    /// (writes report.json and trace.csv).
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Compare selection methods across seeds (writes comparison.json/csv).
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods: ogs, ogs-static, random, similarity,
        /// magnitude-band, checkpoint-dot.
        #[arg(long, default_value = "ogs,similarity,random")]
        methods: String,
        /// Comma-separated run seeds.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
    },
    /// Run the verification suite (writes scorecard.json).
    Verify {
        #[command(flatten)]
        common: Common,
        /// all | first-order | bilevel | overhead | transferability
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Summarize an existing run report (writes trace.csv and summary).
    Report {
        #[command(flatten)]
        common: Common,
        /// report.json produced by `run`.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Parse(_) => 1,
        Error::DimensionMismatch { .. } => 1,
        _ => 2,
    }
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load(common: &Common) -> Result<FileConfig> {
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    Ok(config)
}

fn load_pools(config: &FileConfig, path: &Option<PathBuf>) -> Result<TaskPools> {
    let pools = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", p.display())))?;
            let file: PoolsFile = serde_json::from_str(&text)?;
            file.pools
        }
        None => bench::gen_synthetic_tasks(&config.bench_spec()?)?,
    };
    pools.validate()?;
    Ok(pools)
}

/// Serialized pools plus the generator settings that produced them.
#[derive(serde::Serialize, serde::Deserialize)]
struct PoolsFile {
    bench: bench::BenchSpec,
    #[serde(flatten)]
    pools: TaskPools,
}

fn note(common: &Common, msg: &str) {
    if !common.json {
        eprintln!("{msg}");
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenBench { common } => {
            let config = load(&common)?;
            let spec = config.bench_spec()?;
            let pools = bench::gen_synthetic_tasks(&spec)?;
            let stats = bench::measure_pool_geometry(&config.experiment()?, &pools, 0.1)?;
            let out = out_dir(&common).join("pools.json");
            write_output(
                &out,
                &to_canonical_json(&PoolsFile { bench: spec, pools })?,
                common.force,
            )?;
            emit_summary(
                &common,
                &serde_json::json!({
                    "pools": out.display().to_string(),
                    "mean_domain_cosine": stats.mean_domain_cosine,
                    "conflict_fraction_measured": stats.conflict_fraction_measured,
                }),
            )?;
            Ok(())
        }
        Command::Anchor { common, pools } => {
            let config = load(&common)?;
            let exp = config.experiment()?;
            let pools = load_pools(&config, &pools)?;
            let (nav, _) = pretrained_init(&exp.navigator, &exp, &pools.general, "navigator-init")?;
            let anchor = build_anchor(&exp, &pools, &nav)?;
            let out = out_dir(&common).join("anchor.json");
            write_output(&out, &to_canonical_json(&anchor)?, common.force)?;
            emit_summary(
                &common,
                &serde_json::json!({
                    "anchor": out.display().to_string(),
                    "anchor_samples": anchor.anchor_ids.len(),
                }),
            )?;
            Ok(())
        }
        Command::Score { common, pools } => {
            let config = load(&common)?;
            let exp = config.experiment()?;
            let pools = load_pools(&config, &pools)?;
            let (nav, _) = pretrained_init(&exp.navigator, &exp, &pools.general, "navigator-init")?;
            let anchor = build_anchor(&exp, &pools, &nav)?;
            let domain = score_pool(&exp.navigator, &nav, &pools.domain, &anchor)?;
            let general = score_pool(&exp.navigator, &nav, &pools.general, &anchor)?;
            let dir = out_dir(&common);
            let domain_path = dir.join("geometry_domain.csv");
            let general_path = dir.join("geometry_general.csv");
            write_output(&domain_path, &domain.to_csv(), common.force)?;
            write_output(&general_path, &general.to_csv(), common.force)?;
            emit_summary(
                &common,
                &serde_json::json!({
                    "domain": domain_path.display().to_string(),
                    "general": general_path.display().to_string(),
                }),
            )?;
            Ok(())
        }
        Command::Select {
            common,
            table,
            strategy,
            budget,
        } => {
            let config = load(&common)?;
            let text = std::fs::read_to_string(&table)
                .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", table.display())))?;
            let table = GeometryTable::from_csv(&text)?;
            let sel = config.selection;
            let result = match strategy.as_str() {
                "orthogonal" => select_orthogonal(&table, sel.tau_orth),
                "replay" => select_replay(&table, sel.tau_conf),
                "greedy-alignment" => {
                    // Alignment is the inner product against the anchor
                    // gradient, recovered up to the constant anchor norm as
                    // -conf * grad_norm.
                    let scored: Vec<(u64, f64)> = table
                        .records
                        .iter()
                        .map(|r| (r.sample_id, -r.conf * r.grad_norm))
                        .collect();
                    greedy_topk_by_alignment(&scored, budget.unwrap_or(sel.budget_k))?
                }
                other => {
                    return Err(Error::InvalidInput(format!(
                        "unknown strategy `{other}` (orthogonal | replay | greedy-alignment)"
                    )))
                }
            };
            let out = out_dir(&common).join("selection.json");
            write_output(&out, &to_canonical_json(&result)?, common.force)?;
            emit_summary(
                &common,
                &serde_json::json!({
                    "selection": out.display().to_string(),
                    "selected": result.selected_ids.len(),
                }),
            )?;
            Ok(())
        }
        Command::TrainPolicy { common } => {
            let config = load(&common)?;
            let exp = config.experiment()?;
            let pools = load_pools(&config, &None)?;
            let artifacts = pipeline::phase0_preprocess(&exp, &pools)?;
            let phase1 = pipeline::phase1_train_policy(&exp, &pools, &artifacts)?;
            let dir = out_dir(&common);
            let policy_path = dir.join("policy.json");
            write_output(
                &policy_path,
                &crate::policy::to_checkpoint_json(&phase1.policy)?,
                common.force,
            )?;
            let episodes_path = dir.join("episodes.csv");
            let mut csv = crate::report::CsvWriter::new(&[
                "episode",
                "steps",
                "total_reward",
                "total_cost",
                "lambda",
                "aborted",
            ]);
            for (i, ep) in phase1.episode_reports.iter().enumerate() {
                csv.row(&[
                    i.to_string(),
                    ep.trace.len().to_string(),
                    crate::report::fmt_f64(ep.trace.iter().map(|t| t.reward).sum::<f64>()),
                    crate::report::fmt_f64(ep.trace.iter().map(|t| t.cost).sum::<f64>()),
                    crate::report::fmt_f64(ep.trace.last().map(|t| t.lambda).unwrap_or(0.0)),
                    ep.aborted.to_string(),
                ]);
            }
            write_output(&episodes_path, &csv.finish(), common.force)?;
            emit_summary(
                &common,
                &serde_json::json!({
                    "policy": policy_path.display().to_string(),
                    "episodes": episodes_path.display().to_string(),
                    "final_lambda": phase1.dual.lambda,
                }),
            )?;
            Ok(())
        }
        Command::Run { common } => {
            let config = load(&common)?;
            let exp = config.experiment()?;
            let pools = load_pools(&config, &None)?;
            let report = pipeline::run_full(&exp, &pools)?;
            let dir = out_dir(&common);
            let report_path = dir.join("report.json");
            let json = to_canonical_json(&report)?;
            if report_path.exists() && !common.force {
                // Deterministic-replay check: compare bytes against the
                // existing report instead of overwriting it.
                let existing = std::fs::read_to_string(&report_path)?;
                if existing == json {
                    note(
                        &common,
                        &format!(
                            "report exists and matches byte-for-byte; leaving {} untouched",
                            report_path.display()
                        ),
                    );
                    emit_summary(&common, &run_summary(&report, &report_path))?;
                    return Ok(());
                }
                return Err(Error::TrainingDivergence(format!(
                    "existing {} differs from this run's report; rerun with --force to replace it",
                    report_path.display()
                )));
            }
            write_output(&report_path, &json, common.force)?;
            write_output(&dir.join("trace.csv"), &report.target.trace_csv(), common.force)?;
            emit_summary(&common, &run_summary(&report, &report_path))?;
            Ok(())
        }
        Command::Compare {
            common,
            methods,
            seeds,
        } => {
            let config = load(&common)?;
            let exp = config.experiment()?;
            let bench_spec = config.bench_spec()?;
            let methods: Vec<Method> = methods
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse())
                .collect::<Result<_>>()?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::InvalidInput(format!("bad seed `{s}`")))
                })
                .collect::<Result<_>>()?;
            let report = bench::run_comparison(&bench_spec, &exp, &methods, &seeds)?;
            let dir = out_dir(&common);
            let json_path = dir.join("comparison.json");
            write_output(&json_path, &to_canonical_json(&report)?, common.force)?;
            write_output(&dir.join("comparison.csv"), &report.to_csv(), common.force)?;
            let mut means = BTreeMap::new();
            for &m in &methods {
                let rows = report.rows_for(m);
                if rows.is_empty() {
                    continue;
                }
                let n = rows.len() as f64;
                means.insert(
                    m.to_string(),
                    serde_json::json!({
                        "domain_loss": rows.iter().map(|r| r.domain_loss).sum::<f64>() / n,
                        "general_degradation":
                            rows.iter().map(|r| r.general_degradation).sum::<f64>() / n,
                    }),
                );
            }
            emit_summary(
                &common,
                &serde_json::json!({
                    "comparison": json_path.display().to_string(),
                    "means": means,
                }),
            )?;
            Ok(())
        }
        Command::Verify { common, suite } => {
            let config = load(&common)?;
            let which: CheckSelection = suite.parse()?;
            let card = run_suite(&config.verify_suite()?, which)?;
            let out = out_dir(&common).join("scorecard.json");
            write_output(&out, &card.to_json()?, common.force)?;
            for entry in &card.entries {
                note(
                    &common,
                    &format!("{}: {}", entry.name, if entry.pass { "PASS" } else { "FAIL" }),
                );
            }
            emit_summary(
                &common,
                &serde_json::json!({
                    "scorecard": out.display().to_string(),
                    "all_pass": card.all_pass(),
                }),
            )?;
            if card.all_pass() {
                Ok(())
            } else {
                Err(Error::TrainingDivergence(
                    "verification suite has failing checks".into(),
                ))
            }
        }
        Command::Report { common, input } => {
            let text = std::fs::read_to_string(&input)
                .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", input.display())))?;
            let report: FullRunReport = serde_json::from_str(&text)?;
            let dir = out_dir(&common);
            write_output(&dir.join("trace.csv"), &report.target.trace_csv(), common.force)?;
            let summary = run_summary(&report, &input);
            write_output(
                &dir.join("summary.json"),
                &to_canonical_json(&summary)?,
                common.force,
            )?;
            emit_summary(&common, &summary)?;
            Ok(())
        }
    }
}

fn build_anchor(
    exp: &pipeline::ExperimentConfig,
    pools: &TaskPools,
    nav: &crate::model::ModelParams,
) -> Result<AnchorArtifacts> {
    let anchor_ids = pipeline::select_anchor_ids(exp, pools, nav)?;
    let by_id: BTreeMap<u64, &Sample> = pools.general.iter().map(|s| (s.id, s)).collect();
    let samples: Vec<Sample> = anchor_ids
        .iter()
        .filter_map(|id| by_id.get(id).map(|s| (*s).clone()))
        .collect();
    build_anchor_gradient(&exp.navigator, nav, &samples)
}

fn run_summary(report: &FullRunReport, path: &Path) -> serde_json::Value {
    serde_json::json!({
        "report": path.display().to_string(),
        "config_hash": report.config_hash,
        "episodes": report.episodes.len(),
        "final_domain_loss": report.target.final_snapshot.domain_loss,
        "final_general_loss": report.target.final_snapshot.general_loss,
        "constraint_satisfied": report.target.final_snapshot.constraint_satisfied,
        "phase2_training_flops": report.target.flops.training,
        "phase2_scoring_flops": report.target.flops.scoring,
    })
}

fn emit_summary(common: &Common, value: &serde_json::Value) -> Result<()> {
    if common.json {
        println!("{}", to_canonical_json(value)?);
    } else {
        eprintln!("{}", serde_json::to_string_pretty(value)?);
    }
    Ok(())
}

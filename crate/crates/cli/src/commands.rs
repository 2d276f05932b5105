use std::path::Path;
use std::time::Instant;

use mstop_core::ddtm::DdtmParams;
use mstop_core::inference::{infer, InferConfig, Strategy};
use mstop_core::instance::{generate, load_dataset, write_dataset, GenConfig, Instance};
use mstop_core::oracle::{brute_force_enum, solve_exact, tsili_solve, verify, Solution, BRUTE_FORCE_MAX_N, EXACT_MAX_N};
use mstop_core::seeds::derive;
use mstop_core::trainer::{train_with, EpochReport};
use mstop_numkit::load_checkpoint;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::output::{gap_pct, render_table, Staging};
use crate::settings::{EvalRun, GenerateRun, Reference, RunConfig, SolveMethod, SolveRun, TrainRun, MODEL_FILE};

/// Largest n solved exactly without `--allow-large`.
pub const EXACT_SOFT_MAX_N: usize = 20;
/// Largest n enumerated without `--allow-large`.
pub const BRUTE_SOFT_MAX_N: usize = 6;

pub const METRICS: &str = "metrics.csv";
pub const RESULTS: &str = "results.jsonl";
pub const TIMINGS: &str = "timings.csv";
pub const DATASET: &str = "dataset.jsonl";
pub const TABLE: &str = "table.txt";

/// Runs `run` into `staging`; returns the names of the files written.
pub fn execute(run: &RunConfig, staging: &Staging) -> Result<Vec<&'static str>> {
    match run {
        RunConfig::Generate(g) => cmd_generate(g, staging),
        RunConfig::Solve(s) => cmd_solve(s, staging),
        RunConfig::Train(t) => cmd_train(t, staging),
        RunConfig::Eval(e) => cmd_eval(e, staging),
    }
}

#[derive(Serialize)]
struct Timing<'a> {
    stage: &'a str,
    seconds: f64,
}

fn fmt_gap(g: f64) -> String {
    format!("{g:.2}")
}

fn load(path: &Path) -> Result<Vec<Instance>> {
    Ok(load_dataset(path)?)
}

// ---------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct GenerateMetrics {
    count: usize,
    n: usize,
    k: usize,
    t_max: f64,
    prize_mode: String,
    seed: u64,
    mean_total_prize: f64,
}

pub fn generate_instances(g: &GenerateRun) -> Result<Vec<Instance>> {
    (0..g.count)
        .map(|i| {
            Ok(generate(&GenConfig {
                n: g.n,
                k: g.k,
                t_max: g.t_max,
                prize_mode: g.prize_mode,
                seed: derive(g.seed, i as u64),
            })?)
        })
        .collect()
}

fn cmd_generate(g: &GenerateRun, staging: &Staging) -> Result<Vec<&'static str>> {
    let instances = generate_instances(g)?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &instances)?;
    staging.write(DATASET, &buf)?;
    let total: f64 = instances.iter().map(|i| i.customers.iter().map(|c| c.prize).sum::<f64>()).sum();
    staging.write_csv(
        METRICS,
        &[GenerateMetrics {
            count: g.count,
            n: g.n,
            k: g.k,
            t_max: g.t_max,
            prize_mode: g.prize_mode.to_string(),
            seed: g.seed,
            mean_total_prize: if g.count == 0 { 0.0 } else { total / g.count as f64 },
        }],
    )?;
    println!(
        "generated count={} n={} K={} t_max={} prize_mode={} seed={}",
        g.count, g.n, g.k, g.t_max, g.prize_mode, g.seed
    );
    Ok(vec![DATASET, METRICS])
}

// ---------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct SolveRecord<'a> {
    instance: usize,
    method: &'a str,
    objective: f64,
    gap_pct: String,
    optimal: bool,
    expansions: u64,
    routes: &'a [Vec<usize>],
}

#[derive(Serialize)]
struct SolveMetrics<'a> {
    method: &'a str,
    count: usize,
    mean_objective: f64,
    mean_gap_pct: String,
    proven_optimal: usize,
}

fn check_limits(methods: &[SolveMethod], n: usize, allow_large: bool) -> Result<()> {
    for m in methods {
        let (soft, hard) = match m {
            SolveMethod::Exact => (EXACT_SOFT_MAX_N, EXACT_MAX_N),
            SolveMethod::Brute => (BRUTE_SOFT_MAX_N, BRUTE_FORCE_MAX_N),
            SolveMethod::Tsili => continue,
        };
        let limit = if allow_large { hard } else { soft };
        if n > limit {
            let hint = if allow_large || soft == hard { "" } else { " (pass --allow-large to raise it)" };
            return Err(CliError::Usage(format!(
                "{} supports n <= {limit}, dataset has n = {n}{hint}",
                m.name()
            )));
        }
    }
    Ok(())
}

fn solve_one(inst: &Instance, method: SolveMethod, run: &SolveRun, index: usize) -> Result<Solution> {
    let sol = match method {
        SolveMethod::Exact => solve_exact(inst, run.budget)?,
        SolveMethod::Brute => brute_force_enum(inst)?,
        SolveMethod::Tsili => tsili_solve(inst, &run.tsili, derive(run.seed, index as u64))?,
    };
    let report = verify(inst, &sol);
    if let Some(v) = report.first() {
        return Err(CliError::Runtime(format!(
            "instance {index}: {} solution violates {}: {}",
            method.name(),
            v.constraint,
            v.detail
        )));
    }
    Ok(sol)
}

fn cmd_solve(run: &SolveRun, staging: &Staging) -> Result<Vec<&'static str>> {
    let instances = load(&run.dataset)?;
    let n_max = instances.iter().map(Instance::n).max().unwrap_or(0);
    check_limits(&run.methods, n_max, run.allow_large)?;

    let solved: Vec<Vec<(Solution, f64)>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            run.methods
                .iter()
                .map(|&m| {
                    let t = Instant::now();
                    let s = solve_one(inst, m, run, i)?;
                    Ok((s, t.elapsed().as_secs_f64()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut sums = vec![(0.0, 0.0, 0usize, 0.0); run.methods.len()];
    for (i, per) in solved.iter().enumerate() {
        let best = per.iter().map(|(s, _)| s.objective).fold(0.0, f64::max);
        for (j, (sol, secs)) in per.iter().enumerate() {
            let gap = gap_pct(best, sol.objective);
            sums[j].0 += sol.objective;
            sums[j].1 += gap;
            sums[j].2 += usize::from(sol.optimal);
            sums[j].3 += secs;
            records.push(SolveRecord {
                instance: i,
                method: run.methods[j].name(),
                objective: sol.objective,
                gap_pct: fmt_gap(gap),
                optimal: sol.optimal,
                expansions: sol.expansions,
                routes: &sol.routes,
            });
        }
    }
    let count = instances.len();
    let denom = count.max(1) as f64;
    let mut metrics = Vec::new();
    let mut timings = Vec::new();
    for (m, (obj, gap, opt, secs)) in run.methods.iter().zip(&sums) {
        metrics.push(SolveMetrics {
            method: m.name(),
            count,
            mean_objective: obj / denom,
            mean_gap_pct: fmt_gap(gap / denom),
            proven_optimal: *opt,
        });
        timings.push(Timing {
            stage: m.name(),
            seconds: *secs,
        });
        println!(
            "{:<6} count={count} mean_objective={:.4} mean_gap={:.2}% proven_optimal={opt} time={secs:.2}s",
            m.name(),
            obj / denom,
            gap / denom
        );
    }
    staging.write_jsonl(RESULTS, &records)?;
    staging.write_csv(METRICS, &metrics)?;
    staging.write_csv(TIMINGS, &timings)?;
    Ok(vec![RESULTS, METRICS, TIMINGS])
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    mean_reward: Option<f64>,
    mean_baseline: Option<f64>,
    mean_entropy: Option<f64>,
    grad_norm: Option<f64>,
    validation: f64,
    raw_instances: usize,
    baseline_validation: Option<f64>,
    baseline_syncs: usize,
}

impl From<&EpochReport> for EpochRow {
    fn from(r: &EpochReport) -> Self {
        Self {
            epoch: r.epoch,
            mean_reward: Some(r.mean_reward),
            mean_baseline: Some(r.mean_baseline),
            mean_entropy: Some(r.mean_entropy),
            grad_norm: Some(r.grad_norm),
            validation: r.validation,
            raw_instances: r.raw_instances,
            baseline_validation: r.baseline_validation,
            baseline_syncs: r.baseline_syncs,
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    alpha: f64,
    baseline: String,
    initial_validation: f64,
    final_validation: f64,
    best_validation: f64,
    raw_instances: usize,
    trajectories: usize,
}

fn cmd_train(run: &TrainRun, staging: &Staging) -> Result<Vec<&'static str>> {
    let cfg = &run.train;
    println!(
        "train n={} K={} baseline={} alpha={} lr={} epochs={} steps={} batch={} k_aug={}",
        cfg.n, cfg.k, cfg.baseline, cfg.alpha, cfg.lr, cfg.epochs, cfg.steps_per_epoch, cfg.batch, cfg.k_aug
    );
    let params = DdtmParams::new(run.model, cfg.model_seed)?;
    staging.write_json(MODEL_FILE, &run.model)?;
    let epochs = cfg.epochs;
    let outcome = train_with(cfg, params, Some(staging.dir()), &mut |r| {
        println!(
            "epoch {:>3}/{epochs} reward {:.4} baseline {:.4} entropy {:.4} grad {:.4} validation {:.4} ({:.1}s)",
            r.epoch, r.mean_reward, r.mean_baseline, r.mean_entropy, r.grad_norm, r.validation, r.wall_secs
        );
    })?;

    let mut rows = vec![EpochRow {
        epoch: 0,
        mean_reward: None,
        mean_baseline: None,
        mean_entropy: None,
        grad_norm: None,
        validation: outcome.initial_validation,
        raw_instances: 0,
        baseline_validation: None,
        baseline_syncs: 0,
    }];
    rows.extend(outcome.reports.iter().map(EpochRow::from));
    staging.write_csv(METRICS, &rows)?;
    let summary = TrainSummary {
        epochs,
        alpha: cfg.alpha,
        baseline: cfg.baseline.to_string(),
        initial_validation: outcome.initial_validation,
        final_validation: outcome.reports.last().map_or(outcome.initial_validation, |r| r.validation),
        best_validation: outcome.best_validation,
        raw_instances: outcome.reports.iter().map(|r| r.raw_instances).sum(),
        trajectories: epochs * cfg.steps_per_epoch * cfg.batch,
    };
    staging.write_jsonl(RESULTS, &[summary])?;
    let timings: Vec<Timing> = outcome
        .reports
        .iter()
        .map(|r| Timing {
            stage: "epoch",
            seconds: r.wall_secs,
        })
        .collect();
    staging.write_csv(TIMINGS, &timings)?;
    Ok(vec![MODEL_FILE, METRICS, RESULTS, TIMINGS, "best.ckpt", "last.ckpt"])
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct EvalRecord<'a> {
    instance: usize,
    method: &'a str,
    objective: f64,
    gap_pct: String,
    trajectories: usize,
    order: &'a [usize],
    transform: &'a str,
    routes: &'a [Vec<usize>],
}

#[derive(Serialize)]
struct EvalMetrics<'a> {
    method: &'a str,
    count: usize,
    mean_objective: f64,
    mean_gap_pct: String,
    trajectories: usize,
}

struct Evaluated {
    solution: Solution,
    order: Vec<usize>,
    transform: &'static str,
    trajectories: usize,
    secs: f64,
}

pub fn load_params(run: &EvalRun) -> Result<DdtmParams> {
    let mut params = DdtmParams::new(run.model, run.model_seed)?;
    if let Some(path) = &run.checkpoint {
        let ckpt = load_checkpoint(path).map_err(|source| CliError::Checkpoint {
            path: path.clone(),
            source,
        })?;
        ckpt.restore(&mut params.store).map_err(|source| CliError::Checkpoint {
            path: path.clone(),
            source,
        })?;
    }
    Ok(params)
}

fn cmd_eval(run: &EvalRun, staging: &Staging) -> Result<Vec<&'static str>> {
    let instances = load(&run.dataset)?;
    let params = load_params(run)?;
    let n_max = instances.iter().map(Instance::n).max().unwrap_or(0);
    let use_exact = match run.reference {
        Reference::Exact => {
            check_limits(&[SolveMethod::Exact], n_max, true)?;
            true
        }
        Reference::Auto => n_max <= EXACT_SOFT_MAX_N,
        Reference::Best => false,
    };

    let evaluated: Vec<(Vec<Evaluated>, Option<(Solution, f64)>)> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let per = run
                .strategies
                .iter()
                .map(|&strategy| {
                    let t = Instant::now();
                    let cfg = InferConfig {
                        strategy,
                        width: run.width,
                        seed: derive(run.seed, i as u64),
                        include_greedy: run.include_greedy,
                    };
                    let r = infer(inst, &params, &cfg)?;
                    if let Some(v) = verify(inst, &r.solution).first() {
                        return Err(CliError::Runtime(format!(
                            "instance {i}: {strategy} solution violates {}: {}",
                            v.constraint, v.detail
                        )));
                    }
                    Ok(Evaluated {
                        solution: r.solution,
                        order: r.order,
                        transform: r.transform,
                        trajectories: r.trajectories,
                        secs: t.elapsed().as_secs_f64(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let exact = if use_exact {
                let t = Instant::now();
                Some((solve_exact(inst, run.budget)?, t.elapsed().as_secs_f64()))
            } else {
                None
            };
            Ok((per, exact))
        })
        .collect::<Result<_>>()?;

    let reference_name = if use_exact { "exact" } else { "best" };
    let count = instances.len();
    let denom = count.max(1) as f64;
    let mut records = Vec::new();
    let mut sums = vec![(0.0, 0.0, 0usize, 0.0); run.strategies.len()];
    let (mut ref_sum, mut ref_secs) = (0.0, 0.0);
    for (i, (per, exact)) in evaluated.iter().enumerate() {
        let best = per.iter().map(|e| e.solution.objective).fold(0.0, f64::max);
        let reference = exact.as_ref().map_or(best, |(s, _)| s.objective.max(best));
        ref_sum += reference;
        if let Some((s, secs)) = exact {
            ref_secs += secs;
            records.push(EvalRecord {
                instance: i,
                method: "exact",
                objective: s.objective,
                gap_pct: fmt_gap(gap_pct(reference, s.objective)),
                trajectories: 0,
                order: &[],
                transform: "",
                routes: &s.routes,
            });
        }
        for (j, e) in per.iter().enumerate() {
            let gap = gap_pct(reference, e.solution.objective);
            sums[j].0 += e.solution.objective;
            sums[j].1 += gap;
            sums[j].2 += e.trajectories;
            sums[j].3 += e.secs;
            records.push(EvalRecord {
                instance: i,
                method: strategy_name(run.strategies[j]),
                objective: e.solution.objective,
                gap_pct: fmt_gap(gap),
                trajectories: e.trajectories,
                order: &e.order,
                transform: e.transform,
                routes: &e.solution.routes,
            });
        }
    }

    let mut metrics = vec![EvalMetrics {
        method: reference_name,
        count,
        mean_objective: ref_sum / denom,
        mean_gap_pct: fmt_gap(0.0),
        trajectories: 0,
    }];
    let mut timings = vec![Timing {
        stage: reference_name,
        seconds: ref_secs,
    }];
    let mut table = vec![vec![
        reference_name.to_string(),
        format!("{:.4}", ref_sum / denom),
        "0.00%".into(),
        format!("{ref_secs:.2}s"),
    ]];
    for (s, (obj, gap, traj, secs)) in run.strategies.iter().zip(&sums) {
        metrics.push(EvalMetrics {
            method: strategy_name(*s),
            count,
            mean_objective: obj / denom,
            mean_gap_pct: fmt_gap(gap / denom),
            trajectories: *traj,
        });
        timings.push(Timing {
            stage: strategy_name(*s),
            seconds: *secs,
        });
        table.push(vec![
            strategy_name(*s).to_string(),
            format!("{:.4}", obj / denom),
            format!("{:.2}%", gap / denom),
            format!("{secs:.2}s"),
        ]);
    }
    let text = render_table(&["Method", "Obj.", "Gap", "Time"], &table);
    print!("{text}");
    staging.write_jsonl(RESULTS, &records)?;
    staging.write_csv(METRICS, &metrics)?;
    staging.write_csv(TIMINGS, &timings)?;
    staging.write(TABLE, text.as_bytes())?;
    Ok(vec![RESULTS, METRICS, TIMINGS, TABLE])
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Greedy => "greedy",
        Strategy::Sampling => "sampling",
        Strategy::Perm => "perm",
        Strategy::PermAug => "perm-aug",
    }
}

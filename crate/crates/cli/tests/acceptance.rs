//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use mstop_core::ddtm::{DdtmConfig, DdtmParams};
use mstop_core::env::{trajectory_from_actions, State};
use mstop_core::inference::{infer, InferConfig, Strategy};
use mstop_core::instance::{augment, dist, generate, GenConfig, Instance, PrizeMode, Transform};
use mstop_core::oracle::{brute_force_enum, solve_exact, verify};
use mstop_core::seeds::derive;
use mstop_core::trainer::{make_batch, reinforce_step, train, BaselineKind, TrainConfig, TrainOutcome};
use mstop_numkit::gradcheck::check_all_kinds;
use mstop_numkit::{AdamConfig, AdamState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn tiny_instance(seed: u64) -> Instance {
    let cfg = TrainConfig::tiny(0);
    generate(&GenConfig {
        n: cfg.n,
        k: cfg.k,
        t_max: cfg.t_max,
        prize_mode: cfg.prize_mode,
        seed,
    })
    .unwrap()
}

fn random_walk(inst: &Instance, order: &[usize], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = State::reset(inst, order).unwrap();
    let mut actions = Vec::new();
    while !s.is_terminal() {
        let mask = s.feasible_mask().unwrap();
        let options: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
        let a = options[rng.gen_range(0..options.len())];
        s.step(a).unwrap();
        actions.push(a);
    }
    actions
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn final_validation(o: &TrainOutcome) -> f64 {
    o.reports.last().map_or(o.initial_validation, |r| r.validation)
}

fn arm_d(seed: u64) -> TrainConfig {
    TrainConfig::tiny(seed)
}

fn arm_a(seed: u64) -> TrainConfig {
    TrainConfig {
        baseline: BaselineKind::GreedyRollout,
        alpha: 0.0,
        k_aug: 1,
        ..TrainConfig::tiny(seed)
    }
}

fn run_arm(cfg: &TrainConfig, seed: u64) -> TrainOutcome {
    let t = Instant::now();
    let params = DdtmParams::new(DdtmConfig::default(), cfg.model_seed).unwrap();
    let out = train(cfg, params, None).unwrap();
    println!(
        "  trained {} seed {}: validation {:.4} -> {:.4} in {:.0}s",
        cfg.baseline,
        seed,
        out.initial_validation,
        final_validation(&out),
        t.elapsed().as_secs_f64()
    );
    out
}

/// Arm D, seed 0; shared by criteria 5, 6 and 7.
fn tiny_run() -> &'static TrainOutcome {
    static RUN: OnceLock<TrainOutcome> = OnceLock::new();
    RUN.get_or_init(|| run_arm(&arm_d(0), 0))
}

fn criterion_1() -> Outcome {
    let mut mismatches = Vec::new();
    for n in 4..=6 {
        let found: Vec<String> = (0..100u64)
            .into_par_iter()
            .filter_map(|i| {
                let inst = generate(&GenConfig {
                    n,
                    k: 2,
                    t_max: 1.5,
                    prize_mode: if i % 2 == 0 { PrizeMode::Constant } else { PrizeMode::Uniform },
                    seed: derive(1, (n as u64) * 1000 + i),
                })
                .unwrap();
                let e = solve_exact(&inst, u64::MAX).unwrap().objective;
                let b = brute_force_enum(&inst).unwrap().objective;
                (e != b).then(|| format!("n={n} i={i}: exact {e} vs brute {b}"))
            })
            .collect();
        mismatches.extend(found);
    }
    if mismatches.is_empty() {
        Ok("300 instances, identical objectives".into())
    } else {
        Err(format!("{} mismatches, first {}", mismatches.len(), mismatches[0]))
    }
}

fn criterion_2() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (idx, mode, target, tol) in [(0, PrizeMode::Constant, 5.35, 0.10), (1, PrizeMode::Uniform, 2.88, 0.06)] {
        let root = derive(2, idx);
        let objs: Vec<f64> = (0..1000u64)
            .into_par_iter()
            .map(|i| {
                let inst = generate(&GenConfig::from_preset("mstop10", mode, derive(root, i)).unwrap()).unwrap();
                let s = solve_exact(&inst, u64::MAX).unwrap();
                assert!(s.optimal);
                s.objective
            })
            .collect();
        let mean = objs.iter().sum::<f64>() / objs.len() as f64;
        ok &= (mean - target).abs() <= tol;
        parts.push(format!("{mode}: mean {mean:.4} (target {target} +/- {tol})"));
    }
    let msg = parts.join(", ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_3() -> Outcome {
    let kinds = check_all_kinds(100);
    let worst_kind = kinds.iter().map(|k| k.worst).fold(0.0, f64::max);
    let failed: Vec<String> = kinds
        .iter()
        .filter(|k| !k.passed())
        .map(|k| format!("{} ({:?})", k.kind, k.first_failure))
        .collect();
    let mut losses = Vec::new();
    for (adv, alpha) in [(0.7, 0.5), (0.0, 1.0), (-1.3, 0.01)] {
        let c = mstop_core::ddtm::gradcheck::check_surrogate(100, 3, adv, alpha).map_err(|e| e.to_string())?;
        losses.push(c);
    }
    let worst_loss = losses.iter().map(|c| c.worst).fold(0.0, f64::max);
    let loss_failed = losses.iter().filter(|c| !c.passed()).count();
    let msg = format!(
        "{} kinds worst rel err {worst_kind:.2e}; surrogate loss worst rel err {worst_loss:.2e}",
        kinds.len()
    );
    if failed.is_empty() && loss_failed == 0 {
        Ok(msg)
    } else {
        Err(format!("{msg}; failing kinds {failed:?}; failing loss checks {loss_failed}"))
    }
}

fn criterion_4() -> Outcome {
    let errors: Vec<String> = (0..100u64)
        .into_par_iter()
        .filter_map(|i| {
            let mode = if i % 2 == 0 { PrizeMode::Constant } else { PrizeMode::Uniform };
            let inst = generate(&GenConfig::from_preset("mstop10", mode, derive(4, i)).unwrap()).unwrap();
            let points = |x: &Instance| {
                let mut p = vec![x.depot];
                p.extend(x.customers.iter().map(|c| c.pos));
                p.extend(x.vehicles.iter().map(|v| v.start));
                p
            };
            let base_pts = points(&inst);
            let base_obj = solve_exact(&inst, u64::MAX).unwrap().objective;
            let order: Vec<usize> = (0..inst.k()).collect();
            let actions = random_walk(&inst, &order, derive(40, i));
            let base_reward = trajectory_from_actions(&inst, &order, &actions, None).unwrap().reward;
            for (t, copy) in Transform::ALL.iter().zip(augment(&inst)) {
                let pts = points(&copy);
                for a in 0..pts.len() {
                    for b in a + 1..pts.len() {
                        let d = (dist(pts[a], pts[b]) - dist(base_pts[a], base_pts[b])).abs();
                        if d > 1e-12 {
                            return Some(format!("(a) instance {i} {}: distance off by {d:e}", t.label()));
                        }
                    }
                }
                let obj = solve_exact(&copy, u64::MAX).unwrap().objective;
                if (obj - base_obj).abs() > 1e-9 {
                    return Some(format!("(b) instance {i} {}: exact {obj} vs {base_obj}", t.label()));
                }
                let r = trajectory_from_actions(&copy, &order, &actions, None).unwrap().reward;
                if r != base_reward {
                    return Some(format!("(c) instance {i} {}: reward {r} vs {base_reward}", t.label()));
                }
            }
            None
        })
        .collect();
    if errors.is_empty() {
        Ok("100 instances x 8 maps: distances, exact objectives and replayed rewards preserved".into())
    } else {
        Err(format!("{} failures, first {}", errors.len(), errors[0]))
    }
}

fn criterion_5() -> Outcome {
    let random = DdtmParams::new(DdtmConfig::default(), derive(5, 0)).unwrap();
    let trained = &tiny_run().params;
    let mut strict = [0usize; 2];
    for (label, params) in [("random", &random), ("trained", trained)] {
        let errors: Vec<String> = (0..200u64)
            .into_par_iter()
            .filter_map(|i| {
                let inst = tiny_instance(derive(5, 1000 + i));
                let mut objs = [0.0; 3];
                for (slot, s) in objs.iter_mut().zip([Strategy::Greedy, Strategy::Perm, Strategy::PermAug]) {
                    let r = infer(&inst, params, &InferConfig::with_strategy(s)).unwrap();
                    if let Some(v) = verify(&inst, &r.solution).first() {
                        return Some(format!("{label} instance {i} {s}: {} {}", v.constraint, v.detail));
                    }
                    *slot = r.solution.objective;
                }
                (objs[0] > objs[1] || objs[1] > objs[2]).then(|| format!("{label} instance {i}: {objs:?}"))
            })
            .collect();
        if let Some(e) = errors.first() {
            return Err(format!("{} violations, first {e}", errors.len()));
        }
        strict[usize::from(label == "trained")] = 200;
    }
    Ok(format!(
        "{} random-parameter and {} trained-parameter instances nested and verified",
        strict[0], strict[1]
    ))
}

fn criterion_6() -> Outcome {
    let run = tiny_run();
    let (initial, last) = (run.initial_validation, final_validation(run));
    let gaps: Vec<f64> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let inst = tiny_instance(1_000_000 + i);
            let exact = solve_exact(&inst, u64::MAX).unwrap().objective;
            let got = infer(&inst, &run.params, &InferConfig::with_strategy(Strategy::PermAug))
                .unwrap()
                .solution
                .objective;
            if exact > 0.0 {
                100.0 * (exact - got) / exact
            } else {
                0.0
            }
        })
        .collect();
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let msg = format!("(a) validation {initial:.4} -> {last:.4}; (b) x8N! mean gap {gap:.2}% (limit 25%)");
    if last > initial && gap <= 25.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7() -> Outcome {
    let mut d = vec![final_validation(tiny_run())];
    let mut ratio_ok = true;
    let mut a = Vec::new();
    for seed in 0..3 {
        if seed > 0 {
            d.push(final_validation(&run_arm(&arm_d(seed), seed)));
        }
        let out_a = run_arm(&arm_a(seed), seed);
        a.push(final_validation(&out_a));
        let cfg_d = arm_d(seed);
        let raw_d = cfg_d.raw_instances_per_epoch();
        for r in &out_a.reports {
            ratio_ok &= r.raw_instances == 8 * raw_d;
        }
        if seed == 0 {
            for r in &tiny_run().reports {
                ratio_ok &= r.raw_instances == raw_d;
            }
        }
    }
    let (md, ma) = (median(d.clone()), median(a.clone()));
    let msg = format!(
        "median D {md:.4} {d:.4?} vs median A {ma:.4} {a:.4?}; raw instances per epoch D {} = A {} / 8: {ratio_ok}",
        arm_d(0).raw_instances_per_epoch(),
        arm_a(0).raw_instances_per_epoch()
    );
    if md >= ma && ratio_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_8() -> Outcome {
    for baseline in [BaselineKind::InstanceAug, BaselineKind::GreedyRollout] {
        let cfg = TrainConfig {
            alpha: 0.0,
            baseline,
            k_aug: if baseline == BaselineKind::InstanceAug { 8 } else { 1 },
            ..TrainConfig::tiny(8)
        };
        let mut params = DdtmParams::new(DdtmConfig::default(), cfg.model_seed).unwrap();
        let frozen = params.clone();
        let before = params.store.clone();
        let mut adam = AdamState::new(&params.store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        for step in 0..10u64 {
            let mut items = make_batch(&cfg, step).unwrap();
            for it in &mut items {
                for c in &mut it.instance.customers {
                    c.prize = 0.0;
                }
            }
            reinforce_step(&mut params, &mut adam, &items, &cfg, Some(&frozen), step as usize).map_err(|e| e.to_string())?;
        }
        for id in params.store.trainable_ids() {
            if params.store.get(id) != before.get(id) {
                return Err(format!("{baseline}: parameter {} moved", params.store.name(id)));
            }
        }
    }
    Ok("10 steps with zero prizes and alpha = 0 leave every trainable parameter bit-identical".into())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["mstop"];
    full.extend_from_slice(args);
    match mstop_cli::run(full) {
        0 => Ok(()),
        code => Err(format!("`mstop {}` exited with {code}", args.join(" "))),
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for f in names {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{}: {e}", a.join(f).display()))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{}: {e}", b.join(f).display()))?;
        if x != y {
            return Err(format!("{} differs from its rerun", a.join(f).display()));
        }
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let (gen, sol, tr, ev) = (p("gen"), p("solve"), p("train"), p("eval"));
    let dataset = format!("{gen}/dataset.jsonl");
    let ckpt = format!("{tr}/best.ckpt");
    let runs: [Vec<&str>; 4] = [
        vec!["generate", "--n", "7", "--k", "2", "--t-max", "1.5", "--prize-mode", "uniform", "--count", "12", "--seed", "9", "--out", &gen],
        vec!["solve", "--dataset", &dataset, "--methods", "exact,brute,tsili", "--allow-large", "--out", &sol],
        vec![
            "train", "--epochs", "2", "--steps", "3", "--batch", "16", "--val-size", "16", "--n", "7", "--t-max", "1.5",
            "--seed", "9", "--out", &tr,
        ],
        vec![
            "eval", "--dataset", &dataset, "--checkpoint", &ckpt, "--strategies", "greedy,sampling,perm,perm-aug",
            "--width", "32", "--out", &ev,
        ],
    ];
    for (i, args) in runs.iter().enumerate() {
        let mut args = args.clone();
        let workers = if i % 2 == 0 { "1" } else { "3" };
        args.extend(["--workers", workers]);
        cli(&args)?;
    }
    for dir in [&gen, &sol, &tr, &ev] {
        let manifest = format!("{dir}/manifest.json");
        let again = format!("{dir}-rerun");
        cli(&["rerun", &manifest, "--out", &again, "--workers", "2"])?;
        let results = if dir == &gen { "dataset.jsonl" } else { "results.jsonl" };
        same_files(Path::new(dir), Path::new(&again), &["metrics.csv", results])?;
    }
    Ok("generate, solve, train and eval reruns are byte-identical".into())
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "oracle equivalence", criterion_1),
        (2, "exact mstop10 means", criterion_2),
        (3, "gradient suite", criterion_3),
        (4, "augmentation invariance", criterion_4),
        (5, "inference dominance", criterion_5),
        (6, "training signal", criterion_6),
        (7, "ablation direction", criterion_7),
        (8, "null gradient", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let mut lines = Vec::new();
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(msg) => format!("PASS criterion {id} ({name}): {msg} [{secs:.1}s]"),
            Err(msg) => format!("FAIL criterion {id} ({name}): {msg} [{secs:.1}s]"),
        };
        println!("{line}");
        lines.push((outcome.is_ok(), line));
    }
    println!("\nacceptance summary");
    for (_, l) in &lines {
        println!("{l}");
    }
    if lines.iter().any(|(ok, _)| !ok) {
        std::process::exit(1);
    }
}

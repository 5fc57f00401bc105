//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use ceres_core::ceres::{labels_consistent, run_ppo, stream_rng, CeresConfig, CeresRun};
use ceres_core::constraint_net::{
    constraint_loss, is_separated, separation_accuracy, synthetic::GroundTruth, train_constraints,
    ConstraintTrainConfig,
};
use ceres_core::demo::{scripted_dataset, DemoSource};
use ceres_core::env::{ControlMode, ObservationMode};
use ceres_core::geometry::{assemble, kkt_residual, project_action_kkt, ActionBox, LinearConstraintSet};
use ceres_core::metrics::{write_metrics_csv, MetricsRow};
use ceres_core::ppo::PpoConfig;
use ceres_core::{ConstraintNet, Env, EnvConfig, LabeledDemo};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const RL_ITERATIONS: usize = 20;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

/// One-sided sign test: P(at least `wins` of `n` fair coin flips).
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn random_set(rng: &mut ChaCha8Rng, bounds: &ActionBox) -> LinearConstraintSet {
    let n_in = rng.gen_range(1..=6);
    let angles: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let offsets: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let interior: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
    assemble(&angles, &offsets, &interior, bounds)
}

const GRID: f64 = 1e-3;

/// Radius around `a` that must contain the projection: the interior point
/// is feasible, so the projection is no farther than it.
fn search_radius(a: &[f64], set: &LinearConstraintSet) -> f64 {
    let c = set.interior_point();
    (c[0] - a[0]).hypot(c[1] - a[1]) + 2.0 * GRID
}

/// Nearest feasible candidate among points spaced 1e-3 apart along every
/// constraint line, plus all pairwise line intersections.
fn boundary_grid_projection(a: &[f64], set: &LinearConstraintSet) -> [f64; 2] {
    if set.is_satisfied(a, 0.0) {
        return [a[0], a[1]];
    }
    let r = search_radius(a, set);
    let lines: Vec<([f64; 2], f64)> = set.rows().iter().zip(set.offsets()).map(|(n, &b)| ([n[0], n[1]], b)).collect();
    let mut candidates = Vec::new();
    for &(n, b) in &lines {
        let foot = [b * n[0], b * n[1]];
        let dir = [-n[1], n[0]];
        let s_a = dir[0] * (a[0] - foot[0]) + dir[1] * (a[1] - foot[1]);
        let steps = (r / GRID).ceil() as i64;
        for k in -steps..=steps {
            let s = s_a + k as f64 * GRID;
            candidates.push([foot[0] + s * dir[0], foot[1] + s * dir[1]]);
        }
    }
    for (i, &(n, b)) in lines.iter().enumerate() {
        for &(m, c) in &lines[i + 1..] {
            let det = n[0] * m[1] - n[1] * m[0];
            if det.abs() > 1e-12 {
                candidates.push([(b * m[1] - c * n[1]) / det, (n[0] * c - m[0] * b) / det]);
            }
        }
    }
    let dist = |p: &[f64; 2]| (p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2);
    candidates
        .into_iter()
        .filter(|p| set.is_satisfied(p, 1e-12))
        .min_by(|p, q| dist(p).total_cmp(&dist(q)))
        .expect("feasible candidate")
}

/// Distance from `a` to the nearest feasible point of the 1e-3 lattice.
fn lattice_distance(a: &[f64], set: &LinearConstraintSet) -> f64 {
    let r = search_radius(a, set);
    let (i0, i1) = (((a[0] - r) / GRID).floor() as i64, ((a[0] + r) / GRID).ceil() as i64);
    let (j0, j1) = (((a[1] - r) / GRID).floor() as i64, ((a[1] + r) / GRID).ceil() as i64);
    let mut best = f64::INFINITY;
    for i in i0..=i1 {
        let x = i as f64 * GRID;
        for j in j0..=j1 {
            let y = j as f64 * GRID;
            let d = (x - a[0]).hypot(y - a[1]);
            if d < best && set.is_satisfied(&[x, y], 0.0) {
                best = d;
            }
        }
    }
    best
}

fn qp_oracle() -> Check {
    let bounds = ActionBox::symmetric(0.1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: Vec<(LinearConstraintSet, Vec<f64>)> = (0..1000)
        .map(|_| {
            let set = random_set(&mut rng, &bounds);
            let a = vec![rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
            (set, a)
        })
        .collect();
    let start = Instant::now();
    let projections: Vec<_> = cases.iter().map(|(set, a)| project_action_kkt(a, set)).collect();
    let elapsed = start.elapsed();
    let (mut worst_gap, mut worst_kkt, mut worst_excess, mut errors) = (0.0f64, 0.0f64, f64::NEG_INFINITY, 0);
    for ((set, a), p) in cases.iter().zip(projections) {
        let Ok(p) = p else {
            errors += 1;
            continue;
        };
        let g = boundary_grid_projection(a, set);
        worst_gap = worst_gap.max((g[0] - p.action[0]).hypot(g[1] - p.action[1]));
        let d = (p.action[0] - a[0]).hypot(p.action[1] - a[1]);
        worst_excess = worst_excess.max(d - lattice_distance(a, set));
        worst_kkt = worst_kkt.max(kkt_residual(a, set, &p));
    }
    check(
        "QP oracle equivalence",
        errors == 0 && worst_gap < 2e-3 && worst_kkt < 1e-6 && worst_excess <= 1e-12 && elapsed < Duration::from_secs(10),
        format!(
            "1000 sets: max L2 gap to 1e-3 boundary-grid oracle {worst_gap:.2e} (< 2e-3), \
             no feasible 1e-3 lattice point closer than the projection (max excess {worst_excess:.1e}), \
             max KKT residual {worst_kkt:.2e} (< 1e-6), solver time {elapsed:.2?} (< 10 s), failures {errors}"
        ),
    )
}

fn loss_of(net: &ConstraintNet, demo: &LabeledDemo) -> f64 {
    constraint_loss(&net.predict(&demo.state), demo)
}

fn gradient_integrity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut configs, mut checked, mut worst) = (0, 0, 0.0f64);
    while configs < 100 {
        let n_act = if configs % 2 == 0 { 2 } else { 3 };
        let n_in = rng.gen_range(1..=4);
        let net = ConstraintNet::new(4, n_in, &[6, 5], ActionBox::symmetric(0.1, n_act), &mut rng);
        let state: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let action: Vec<f64> = (0..n_act).map(|_| rng.gen_range(-0.15..0.15)).collect();
        let demo = LabeledDemo::new(state, action, rng.gen_bool(0.5));
        let mut g = net.predict(&demo.state).constraint_values(&demo.action);
        g.sort_by(|a, b| b.total_cmp(a));
        let kink = g.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())).min(if g.len() > 1 { g[0] - g[1] } else { f64::INFINITY });
        if kink < 1e-3 || loss_of(&net, &demo) == 0.0 {
            continue;
        }
        let mut grads = vec![0.0; net.mlp().n_params()];
        net.loss_and_grad(&demo, 1.0, &mut grads);
        let h = 1e-5;
        for (p, &analytic) in grads.iter().enumerate() {
            let (mut plus, mut minus) = (net.clone(), net.clone());
            plus.mlp_mut().params_mut()[p] += h;
            minus.mlp_mut().params_mut()[p] -= h;
            let fd = (loss_of(&plus, &demo) - loss_of(&minus, &demo)) / (2.0 * h);
            checked += 1;
            let scale = fd.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((fd - analytic).abs() / scale);
        }
        configs += 1;
    }
    check(
        "gradient integrity",
        worst < 1e-4,
        format!("{configs} configurations, {checked} parameters, max relative error {worst:.2e} (< 1e-4)"),
    )
}

fn loss_accuracy_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bounds = ActionBox::symmetric(0.1, 2);
    let (mut mismatches, mut zero_loss) = (0, 0);
    for _ in 0..1000 {
        let net = ConstraintNet::new(3, rng.gen_range(1..=3), &[4], bounds.clone(), &mut rng);
        let size = rng.gen_range(1..6);
        let batch: Vec<LabeledDemo> = (0..size)
            .map(|_| {
                let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a = vec![rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
                LabeledDemo::new(s, a, rng.gen_bool(0.5))
            })
            .collect();
        let loss: f64 = batch.iter().map(|d| loss_of(&net, d)).sum();
        let acc = separation_accuracy(&net, &batch);
        zero_loss += usize::from(loss == 0.0);
        if (loss == 0.0) != (acc == 1.0)
            || batch.iter().any(|d| (loss_of(&net, d) == 0.0) != is_separated(&net.predict(&d.state), d))
        {
            mismatches += 1;
        }
    }
    check(
        "loss/accuracy equivalence",
        mismatches == 0,
        format!("1000 batches ({zero_loss} with zero loss), {mismatches} mismatches"),
    )
}

fn synthetic_recovery() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bounds = ActionBox::symmetric(0.1, 2);
    let truth = GroundTruth::new(4, 2, bounds.clone(), &mut rng);
    let demos = truth.generate(10_000, &mut rng);
    let net = ConstraintNet::new(4, 2, &[64, 64], bounds, &mut rng);
    let config = ConstraintTrainConfig { epochs: 40, report_accuracy: false, ..Default::default() };
    let (net, _) = train_constraints(net, &demos, config, ChaCha8Rng::seed_from_u64(6)).expect("training");
    let acc = separation_accuracy(&net, &demos);
    let elapsed = start.elapsed();
    check(
        "synthetic constraint recovery",
        acc >= 0.95 && elapsed < Duration::from_secs(300),
        format!("n_in=2, 10^4 demos: accuracy {acc:.4} (>= 0.95) in {elapsed:.1?} (< 5 min)"),
    )
}

fn maze_pipeline(cfg: &EnvConfig) -> (Check, ConstraintNet) {
    let mut env = Env::new(cfg.clone(), 8).expect("env");
    let set = scripted_dataset(&mut env, 500, 16).expect("dataset");
    let counts = set.counts();
    let demos = set.labeled();
    let config = ConstraintTrainConfig { n_in: 2, epochs: 10, report_accuracy: false, ..Default::default() };
    let net = ConstraintNet::new(cfg.n_obs(ObservationMode::Full), 2, &[64, 64], cfg.action_box(), &mut stream_rng(1, 0));
    let (net, history) = train_constraints(net, &demos, config.clone(), stream_rng(1, 1)).expect("training");
    let acc = separation_accuracy(&net, &demos);
    let batches = counts.negatives.div_ceil(config.negatives_per_batch);
    let covered = history.iter().all(|h| h.batches == batches);
    let positive_passes = (batches * config.positives_per_batch) as f64 / counts.positives as f64;
    let reference_ratio = 15994.0 / 7228.0;
    let pass = acc >= 0.9
        && covered
        && config.positives_per_batch == 32
        && config.negatives_per_batch == 32
        && (1.5..3.0).contains(&counts.ratio())
        && (reference_ratio - 2.21f64).abs() < 5e-3;
    let detail = format!(
        "{} positives / {} negatives (ratio {:.2}; reference counts 15994/7228 = {reference_ratio:.2}), \
         32+32 batches, {batches} batches per epoch covering each negative once, positives drawn {positive_passes:.2}x per epoch; \
         accuracy after {} epochs {acc:.4} (>= 0.9)",
        counts.positives,
        counts.negatives,
        counts.ratio(),
        history.len()
    );
    (check("maze pipeline reproduction", pass, detail), net)
}

fn guided_ppo_ordering(cfg: &EnvConfig, net: &ConstraintNet) -> Check {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let (_, vanilla) = run_ppo(cfg, PpoConfig::default(), None, RL_ITERATIONS, seed).expect("ppo");
        let (_, guided) = run_ppo(cfg, PpoConfig::default(), Some(net.clone()), RL_ITERATIONS, seed).expect("ppo");
        let (v0, g0) = (&vanilla[0], &guided[0]);
        let (vl, gl) = (vanilla.last().unwrap(), guided.last().unwrap());
        let vf = mean(vanilla.iter().map(|r| r.failure_rate));
        let gf = mean(guided.iter().map(|r| r.failure_rate));
        let win = g0.mean_reward > v0.mean_reward && gl.mean_reward > vl.mean_reward && gf < vf;
        wins += usize::from(win);
        lines.push(format!(
            "seed {seed}: reward first {:.2} vs {:.2}, last {:.2} vs {:.2}, failure {gf:.3} vs {vf:.3}",
            g0.mean_reward, v0.mean_reward, gl.mean_reward, vl.mean_reward
        ));
    }
    let p = sign_test_p(wins, SEEDS as usize);
    check(
        "constraint-guided PPO ordering (static maze)",
        p < 0.05,
        format!(
            "guided beats vanilla on {wins}/{SEEDS} seeds, sign test p = {p:.4} (< 0.05), {} env steps per run\n    {}",
            RL_ITERATIONS * PpoConfig::default().steps_per_iter,
            lines.join("\n    ")
        ),
    )
}

fn ceres_ordering_and_labels() -> (Check, Check) {
    let cfg = EnvConfig::random_obstacles(ControlMode::Position, ObservationMode::Reduced);
    let mut wins = 0;
    let mut lines = Vec::new();
    let (mut trajectories, mut inconsistent, mut segments, mut over_bound, mut double_labeled) = (0, 0, 0, 0, 0);
    for seed in 0..SEEDS {
        let (_, ppo) = run_ppo(&cfg, PpoConfig::default(), None, RL_ITERATIONS, seed).expect("ppo");
        let config = CeresConfig { iterations: RL_ITERATIONS, audit: true, ..Default::default() };
        let mut run = CeresRun::new(&cfg, config, seed).expect("ceres");
        let rows: Vec<MetricsRow> = (0..RL_ITERATIONS).map(|_| run.iterate().expect("iteration")).collect();
        assert_eq!(rows.last().unwrap().env_steps, ppo.last().unwrap().env_steps);
        let pf = mean(ppo.iter().map(|r| r.failure_rate));
        let cf = mean(rows.iter().map(|r| r.failure_rate));
        wins += usize::from(cf < pf);
        lines.push(format!(
            "seed {seed}: mean failure CERES {cf:.3} vs PPO {pf:.3}, final {:.3} vs {:.3}, activation {:.2}",
            rows.last().unwrap().failure_rate,
            ppo.last().unwrap().failure_rate,
            rows.last().unwrap().activation_prob
        ));

        for labels in run.audit_labels().values() {
            trajectories += 1;
            inconsistent += usize::from(!labels_consistent(labels));
        }
        for p in run.audit_probes() {
            segments += 1;
            let bound = (p.segment_len as f64).log2().ceil() as usize + 1;
            over_bound += usize::from(p.probes > bound);
        }
        let set = run.buffer.to_demo_set(&cfg.hash(), cfg.n_obs(ObservationMode::Full), cfg.n_act());
        let mut seen: BTreeMap<(u64, usize), u8> = BTreeMap::new();
        for r in set.records.iter().filter(|r| r.source == DemoSource::CeresDirect) {
            let key = (r.trajectory_id.expect("id"), r.step_index.expect("index"));
            if let Some(prev) = seen.insert(key, r.indicator) {
                double_labeled += usize::from(prev != r.indicator);
            }
        }
    }
    let p = sign_test_p(wins, SEEDS as usize);
    let ordering = check(
        "CERES vs PPO failure ordering (random obstacles)",
        p < 0.05,
        format!(
            "CERES lower mean failure rate at matched env steps on {wins}/{SEEDS} seeds, sign test p = {p:.4} (< 0.05)\n    {}",
            lines.join("\n    ")
        ),
    );
    let labels = check(
        "label consistency",
        inconsistent == 0 && over_bound == 0 && double_labeled == 0 && trajectories > 0 && segments > 0,
        format!(
            "{trajectories} trajectories ({inconsistent} break transitivity), {segments} probed segments \
             ({over_bound} above ceil(log2 L)+1 probes), {double_labeled} demos with both labels"
        ),
    );
    (ordering, labels)
}

fn determinism() -> Check {
    let cfg = EnvConfig::random_obstacles(ControlMode::Position, ObservationMode::Reduced);
    let small = PpoConfig { steps_per_iter: 512, hidden: vec![32, 32], ..Default::default() };
    let config = CeresConfig {
        iterations: 4,
        recovery_steps_per_iter: 512,
        direct: small.clone(),
        recovery: small.clone(),
        ..Default::default()
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let mut bytes = Vec::new();
    for (k, seed) in [11u64, 11, 12].into_iter().enumerate() {
        let (_, ceres_rows) = ceres_core::ceres::ceres_loop(&cfg, config.clone(), seed, &mut |_, _| {}).expect("ceres");
        let (_, ppo_rows) = run_ppo(&cfg, small.clone(), None, 4, seed).expect("ppo");
        let a = dir.path().join(format!("ceres_{k}.csv"));
        let b = dir.path().join(format!("ppo_{k}.csv"));
        write_metrics_csv(&a, &ceres_rows).expect("csv");
        write_metrics_csv(&b, &ppo_rows).expect("csv");
        bytes.push((std::fs::read(a).expect("read"), std::fs::read(b).expect("read")));
    }
    let same = bytes[0] == bytes[1];
    let differs = bytes[0] != bytes[2];
    check(
        "determinism",
        same && differs,
        format!("repeated seed gives identical CERES and PPO metrics CSVs: {same}; another seed differs: {differs}"),
    )
}

fn main() {
    let start = Instant::now();
    let maze = EnvConfig::static_maze();
    let mut checks = Vec::new();
    let mut report = |c: Check| {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        checks.push(c.pass);
    };
    report(qp_oracle());
    report(gradient_integrity());
    report(loss_accuracy_equivalence());
    report(synthetic_recovery());
    let (pipeline, net) = maze_pipeline(&maze);
    report(pipeline);
    report(guided_ppo_ordering(&maze, &net));
    let (ordering, labels) = ceres_ordering_and_labels();
    report(ordering);
    report(labels);
    report(determinism());
    let failed = checks.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed in {:.1?}", checks.len() - failed, start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}

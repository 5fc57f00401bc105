use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ceres_core::ceres::{ceres_loop, execute_action, run_ppo, stream_rng, ActivationRule, ConstraintFilter, CeresConfig};
use ceres_core::constraint_net::{train_constraints, ConstraintTrainConfig, EpochStats};
use ceres_core::demo::{load_demos, save_demos, scripted_dataset};
use ceres_core::env::{Env, EnvConfig, ObservationMode};
use ceres_core::metrics::{write_metrics_csv, EpisodeStats, EpisodeSummary, MetricsRow};
use ceres_core::{ConstraintNet, GaussianPolicy, PpoAgent};
use serde::Serialize;

use crate::args::*;
use crate::plot::{self, Series};

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenDemos(a) => gen_demos(a).map(|_| ()),
        Command::TrainConstraints(a) => train_constraint_net(a).map(|_| ()),
        Command::TrainRl(a) => train_rl(a).map(|_| ()),
        Command::Ceres(a) => ceres(a).map(|_| ()),
        Command::Eval(a) => {
            let summary = eval(a)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Serve(a) => crate::serve::run(a),
    }
}

fn prepare_dir(dir: &Path, command: &Command, env: &EnvConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(command)?)?;
    env.save(&dir.join("env.toml"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenDemosSummary {
    pub positives: usize,
    pub negatives: usize,
    pub ratio: f64,
}

pub fn gen_demos(args: &GenDemosArgs) -> Result<GenDemosSummary> {
    let cfg = args.env.resolve()?;
    let mut env = Env::new(cfg, args.seed)?;
    let set = scripted_dataset(&mut env, args.trajectories, args.samples_per_state)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let counts = save_demos(&set, &args.out)?;
    let summary = GenDemosSummary {
        positives: counts.positives,
        negatives: counts.negatives,
        ratio: counts.ratio(),
    };
    println!(
        "wrote {} positives, {} negatives (negative:positive = {:.2}) to {}",
        summary.positives,
        summary.negatives,
        summary.ratio,
        args.out.display()
    );
    Ok(summary)
}

fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for h in history {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train_constraint_net(args: &TrainConstraintsArgs) -> Result<(ConstraintNet, Vec<EpochStats>)> {
    let cfg = args.env.resolve()?;
    let set = load_demos(&args.demos)?;
    set.expect_dims(cfg.n_obs(ObservationMode::Full), cfg.n_act())?;
    if set.header.env_config_hash != cfg.hash() {
        log::warn!("demonstrations were recorded under a different environment configuration");
    }
    prepare_dir(&args.out_dir, &Command::TrainConstraints(args.clone()), &cfg)?;
    let demos = set.labeled();
    let config = ConstraintTrainConfig {
        n_in: args.n_in,
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        hidden: args.hidden.clone(),
        ..Default::default()
    };
    let net = ConstraintNet::new(
        cfg.n_obs(ObservationMode::Full),
        args.n_in,
        &args.hidden,
        cfg.action_box(),
        &mut stream_rng(args.seed, 0),
    );
    let (net, history) = train_constraints(net, &demos, config, stream_rng(args.seed, 1))?;
    for h in &history {
        log::info!("epoch {}: loss {:.5}, accuracy {:.4}", h.epoch, h.mean_loss, h.accuracy);
    }
    net.save(&args.out_dir.join("constraint_net.json"))?;
    write_history_csv(&args.out_dir.join("constraint_training.csv"), &history)?;
    let loss: Vec<(f64, f64)> = history.iter().map(|h| (h.epoch as f64, h.mean_loss)).collect();
    let acc: Vec<(f64, f64)> = history.iter().map(|h| (h.epoch as f64, h.accuracy)).collect();
    fs::write(
        args.out_dir.join("constraint_training.svg"),
        plot::svg(
            &[
                ("mean loss", vec![Series { label: "loss", points: loss }]),
                ("separation accuracy", vec![Series { label: "accuracy", points: acc }]),
            ],
            "epoch",
        ),
    )?;
    if let Some(last) = history.last() {
        println!("trained {} epochs; final accuracy {:.4}", last.epoch, last.accuracy);
    }
    Ok((net, history))
}

fn metrics_plot(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| (r.iteration as f64, f(r))).collect::<Vec<_>>();
    let svg = plot::svg(
        &[
            ("mean episode reward", vec![Series { label: "reward", points: col(|r| r.mean_reward) }]),
            (
                "episode outcomes",
                vec![
                    Series { label: "failure rate", points: col(|r| r.failure_rate) },
                    Series { label: "success rate", points: col(|r| r.success_rate) },
                    Series { label: "activation", points: col(|r| r.activation_prob) },
                ],
            ),
        ],
        "iteration",
    );
    fs::write(dir.join("metrics.svg"), svg)?;
    Ok(())
}

fn log_row(r: &MetricsRow) {
    log::info!(
        "iter {:>4} steps {:>8} reward {:>8.3} success {:.3} failure {:.3} len {:>6.1} act {:.3}",
        r.iteration,
        r.env_steps,
        r.mean_reward,
        r.success_rate,
        r.failure_rate,
        r.mean_ep_len,
        r.activation_prob
    );
}

fn load_constraints(path: &Path) -> Result<ConstraintNet> {
    ConstraintNet::load(path).with_context(|| format!("loading constraint net {}", path.display()))
}

pub fn train_rl(args: &TrainRlArgs) -> Result<Vec<MetricsRow>> {
    let cfg = args.env.resolve()?;
    let constraints = args.constraints.as_deref().map(load_constraints).transpose()?;
    prepare_dir(&args.out_dir, &Command::TrainRl(args.clone()), &cfg)?;
    let (run, rows) = run_ppo(&cfg, args.ppo.config(), constraints, args.iterations, args.seed)?;
    rows.iter().for_each(log_row);
    write_metrics_csv(&args.out_dir.join("metrics.csv"), &rows)?;
    metrics_plot(&args.out_dir, &rows)?;
    run.agent.policy.save(&args.out_dir.join("policy.json"))?;
    run.agent.value.save(&args.out_dir.join("value.json"))?;
    Ok(rows)
}

pub fn ceres_config(args: &CeresArgs) -> CeresConfig {
    let mut config = CeresConfig {
        n_s: args.n_s,
        n_a: args.n_a,
        iterations: args.iterations,
        constrain_recovery: args.constrain_recovery,
        recovery_steps_per_iter: args.recovery_steps,
        direct: args.ppo.config(),
        recovery: args.ppo.config(),
        ..Default::default()
    };
    if let Some(p) = args.fixed_activation {
        config.activation = ActivationRule::Fixed(p);
    }
    config.constraint.n_in = args.n_in;
    config
}

pub fn ceres(args: &CeresArgs) -> Result<Vec<MetricsRow>> {
    let cfg = args.env.resolve()?;
    let config = ceres_config(args);
    prepare_dir(&args.out_dir, &Command::Ceres(args.clone()), &cfg)?;
    let full = cfg.n_obs(ObservationMode::Full);
    let mut checkpoint_error = None;
    let (run, rows) = ceres_loop(&cfg, config, args.seed, &mut |run, row| {
        log_row(row);
        let d = run.last_details;
        log::debug!(
            "recovery steps {} episodes {} survival {:.3}; buffer +{} -{}; queue {}",
            d.recovery_steps,
            d.recovery_episodes,
            d.recovery_survival_rate,
            d.buffer_positives,
            d.buffer_negatives,
            d.queue_states
        );
        if args.checkpoint_every > 0 && run.iteration() % args.checkpoint_every == 0 && checkpoint_error.is_none() {
            let dir = args.out_dir.join("checkpoints").join(format!("iter_{}", run.iteration()));
            let result = fs::create_dir_all(&dir).map_err(anyhow::Error::from).and_then(|_| {
                run.direct.policy.save(&dir.join("direct_policy.json"))?;
                run.recovery.policy.save(&dir.join("recovery_policy.json"))?;
                run.constraint_net().save(&dir.join("constraint_net.json"))?;
                Ok(())
            });
            checkpoint_error = result.err();
        }
    })?;
    if let Some(e) = checkpoint_error {
        return Err(e.context("writing checkpoint"));
    }
    write_metrics_csv(&args.out_dir.join("metrics.csv"), &rows)?;
    metrics_plot(&args.out_dir, &rows)?;
    run.direct.policy.save(&args.out_dir.join("direct_policy.json"))?;
    run.recovery.policy.save(&args.out_dir.join("recovery_policy.json"))?;
    run.constraint_net().save(&args.out_dir.join("constraint_net.json"))?;
    save_demos(&run.buffer.to_demo_set(&cfg.hash(), full, cfg.n_act()), &args.out_dir.join("demos.jsonl"))?;
    println!(
        "{} iterations; buffer has {} positives and {} negatives",
        rows.len(),
        run.buffer.positives(),
        run.buffer.negatives()
    );
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub failure_rate: f64,
    pub mean_ep_len: f64,
}

pub fn eval(args: &EvalArgs) -> Result<EvalSummary> {
    let cfg = args.env.resolve()?;
    let policy = match &args.policy {
        Some(path) => GaussianPolicy::load(path).with_context(|| format!("loading policy {}", path.display()))?,
        None => {
            let agent = PpoAgent::new(
                cfg.policy_obs_dim(),
                cfg.action_box().half_widths(),
                ceres_core::PpoConfig::default(),
                &mut stream_rng(args.seed, 0),
            )?;
            agent.policy
        }
    };
    if policy.mean_net.input_dim() != cfg.policy_obs_dim() || policy.n_act() != cfg.n_act() {
        bail!(
            "policy expects {} observations, environment provides {}",
            policy.mean_net.input_dim(),
            cfg.policy_obs_dim()
        );
    }
    let constraints = args.constraints.as_deref().map(load_constraints).transpose()?;
    let bounds = cfg.action_box();
    let mut env = Env::new(cfg, args.seed)?;
    let mut policy_rng = stream_rng(args.seed, 1);
    let mut filter_rng = stream_rng(args.seed, 2);
    let mut episodes = Vec::with_capacity(args.episodes);
    for _ in 0..args.episodes {
        let mut obs = env.reset()?;
        let mut summary = EpisodeSummary { episode_return: 0.0, length: 0, success: false, failure: false };
        loop {
            let raw = if args.deterministic {
                policy.mean(&obs)
            } else {
                policy.sample_action(&obs, &mut policy_rng).0
            };
            let filter = constraints.as_ref().map(|net| ConstraintFilter { net, activation: 1.0 });
            let (action, _) = execute_action(&raw, &env.full_observation(), &bounds, filter, &mut filter_rng);
            let step = env.step(&action)?;
            summary.episode_return += step.reward;
            summary.length += 1;
            obs = step.observation;
            if step.end {
                summary.success = step.info.success;
                summary.failure = step.info.failure;
                break;
            }
        }
        episodes.push(summary);
    }
    let stats = EpisodeStats::of(&episodes);
    let summary = EvalSummary {
        episodes: stats.episodes,
        mean_reward: stats.mean_reward,
        success_rate: stats.success_rate,
        failure_rate: stats.failure_rate,
        mean_ep_len: stats.mean_ep_len,
    };
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

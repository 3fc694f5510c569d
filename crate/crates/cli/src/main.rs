use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::RngCore;
use serde_json::json;

use rand_distr::{Distribution, Normal};
use sgddpg_core::checkpoint::Checkpoint;
use sgddpg_core::env::{crossed_bottom, Environment, Pendulum, PendulumState, SwingUpController, MAX_TORQUE};
use sgddpg_core::harness::{self, stream_rng, Stream, TrainConfig, Trainer};
use sgddpg_core::selftest::{run_selftest, SelftestOptions};
use sgddpg_core::Error;

/// Marks failures caused by bad input rather than by the run itself.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn usage_from(e: Error) -> anyhow::Error {
    usage(e.to_string())
}

fn cli() -> Command {
    let mut train = Command::new("train")
        .about("Train an agent and write metrics, a run summary and checkpoints")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("JSON file with dotted keys"),
        )
        .arg(
            Arg::new("steps")
                .long("steps")
                .value_name("N")
                .help("Alias for --train.total_steps"),
        )
        .arg(Arg::new("gp-mode").long("gp-mode").value_name("online|fixed"))
        .arg(
            Arg::new("vanilla")
                .long("vanilla")
                .action(ArgAction::SetTrue)
                .help("Plain DDPG without safety terms"),
        )
        .arg(
            Arg::new("out-dir")
                .long("out-dir")
                .value_name("DIR")
                .default_value("run"),
        )
        .arg(
            Arg::new("checkpoint-interval")
                .long("checkpoint-interval")
                .value_name("STEPS")
                .value_parser(clap::value_parser!(usize))
                .default_value("10000"),
        );
    for key in TrainConfig::keys() {
        let key: &'static str = Box::leak(key.into_boxed_str());
        train = train.arg(Arg::new(key).long(key).value_name("VALUE").hide(key.contains('.')));
    }
    Command::new("sgddpg")
        .about("Safety-guided DDPG with Gaussian-process confidence bounds")
        .subcommand_required(true)
        .subcommand(train)
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpointed policy")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .required(true)
                        .value_name("FILE"),
                )
                .arg(
                    Arg::new("episodes")
                        .long("episodes")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("5"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0"),
                ),
        )
        .subcommand(
            Command::new("gp-selftest")
                .about("Check the GP stack against dense oracles and finite differences")
                .arg(
                    Arg::new("trials")
                        .long("trials")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("200"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0"),
                )
                .arg(
                    Arg::new("inject-fault")
                        .long("inject-fault")
                        .action(ArgAction::SetTrue)
                        .hide(true),
                ),
        )
        .subcommand(
            Command::new("record")
                .about("Record a trajectory file from a checkpoint or the scripted swing-up controller")
                .arg(
                    Arg::new("policy")
                        .long("policy")
                        .value_name("FILE|scripted")
                        .default_value("scripted"),
                )
                .arg(
                    Arg::new("steps")
                        .long("steps")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("1000"),
                )
                .arg(Arg::new("out").long("out").required(true).value_name("FILE"))
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0"),
                )
                .arg(
                    Arg::new("noise")
                        .long("noise")
                        .value_parser(clap::value_parser!(f64))
                        .default_value("0")
                        .help("Gaussian torque noise added to the scripted controller"),
                ),
        )
}

fn load_config(m: &ArgMatches) -> anyhow::Result<TrainConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {path}: {e}")))?;
            TrainConfig::from_json_str(&text).map_err(usage_from)?
        }
        None => TrainConfig::default(),
    };
    for key in TrainConfig::keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set_str(&key, v).map_err(usage_from)?;
        }
    }
    if let Some(v) = m.get_one::<String>("steps") {
        cfg.set_str("train.total_steps", v).map_err(usage_from)?;
    }
    if let Some(v) = m.get_one::<String>("gp-mode") {
        cfg.set_str("gp.mode", v).map_err(usage_from)?;
    }
    if m.get_flag("vanilla") {
        cfg.vanilla = true;
    }
    cfg.validate().map_err(usage_from)?;
    if let Some(p) = &cfg.init_trajectory {
        if !Path::new(p).exists() {
            bail!(usage(format!("init trajectory {p} does not exist")));
        }
    }
    Ok(cfg)
}

fn cmd_train(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = load_config(m)?;
    let out_dir = PathBuf::from(m.get_one::<String>("out-dir").expect("defaulted"));
    std::fs::create_dir_all(&out_dir).map_err(|e| usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let interval = *m.get_one::<usize>("checkpoint-interval").expect("defaulted");

    let mut trainer = Trainer::from_config(cfg.clone()).map_err(|e| match e {
        Error::Parse { .. } | Error::Io(_) | Error::Config(_) => usage_from(e),
        other => other.into(),
    })?;
    let mut next_checkpoint = interval;
    while !trainer.is_finished() {
        trainer.run_episode()?;
        let step = trainer.state().step;
        if interval > 0 && step >= next_checkpoint {
            trainer
                .checkpoint()
                .save(&out_dir.join(format!("checkpoint-{step}.ckpt")))?;
            next_checkpoint = (step / interval + 1) * interval;
        }
        if let Some(r) = trainer.records().last() {
            log::info!(
                "step {} episode {} return {:.1} catastrophes {}",
                r.step,
                r.episode,
                r.episode_return,
                r.cumulative_catastrophes
            );
        }
    }
    trainer.checkpoint().save(&out_dir.join("final.ckpt"))?;
    let summary = harness::write_run_outputs(&out_dir, &cfg, trainer.records())?;
    eprintln!(
        "finished {} steps: final return {}, {} catastrophes",
        summary["steps"], summary["final_return"], summary["total_catastrophes"]
    );
    println!("{summary}");
    Ok(())
}

fn load_checkpoint(path: &str) -> anyhow::Result<(Checkpoint, TrainConfig)> {
    let ckpt = Checkpoint::load(Path::new(path)).map_err(|e| usage(format!("cannot load checkpoint {path}: {e}")))?;
    let cfg = TrainConfig::from_json_str(&ckpt.config.to_string())
        .map_err(|e| usage(format!("checkpoint {path} has an invalid config: {e}")))?;
    Ok((ckpt, cfg))
}

fn cmd_eval(m: &ArgMatches) -> anyhow::Result<()> {
    let (ckpt, cfg) = load_checkpoint(m.get_one::<String>("checkpoint").expect("required"))?;
    let episodes = *m.get_one::<usize>("episodes").expect("defaulted");
    if episodes == 0 {
        bail!(usage("--episodes must be positive"));
    }
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let mut env = Pendulum::new(cfg.pendulum);
    if ckpt.nets.state_dim() != env.state_dim() || ckpt.nets.action_dim() != env.action_dim() {
        bail!(usage("checkpoint does not match the pendulum dimensions"));
    }
    let res = harness::evaluate(&ckpt.nets, &mut env, episodes, &mut stream_rng(seed, Stream::Eval))?;
    eprintln!(
        "mean return {:.3} over {episodes} episodes, {} catastrophes",
        res.mean_return, res.catastrophes
    );
    println!(
        "{}",
        json!({"mean_return": res.mean_return, "catastrophes": res.catastrophes, "episodes": episodes, "seed": seed})
    );
    Ok(())
}

fn cmd_selftest(m: &ArgMatches) -> anyhow::Result<bool> {
    let opts = SelftestOptions {
        trials: *m.get_one::<usize>("trials").expect("defaulted"),
        seed: *m.get_one::<u64>("seed").expect("defaulted"),
        inject_fault: m.get_flag("inject-fault"),
    };
    if opts.trials == 0 {
        bail!(usage("--trials must be positive"));
    }
    let results = run_selftest(&opts)?;
    let mut rows = Vec::new();
    for r in &results {
        eprintln!(
            "{:<4} {:<45} {:>12.3e} (tolerance {:.0e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.value,
            r.tolerance
        );
        rows.push(json!({"check": r.name, "passed": r.passed, "value": r.value, "tolerance": r.tolerance}));
    }
    let all = results.iter().all(|r| r.passed);
    println!("{}", json!({"passed": all, "trials": opts.trials, "checks": rows}));
    Ok(all)
}

fn cmd_record(m: &ArgMatches) -> anyhow::Result<()> {
    let steps = *m.get_one::<usize>("steps").expect("defaulted");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let noise = *m.get_one::<f64>("noise").expect("defaulted");
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let policy = m.get_one::<String>("policy").expect("defaulted");
    if !(noise >= 0.0 && noise.is_finite()) {
        bail!(usage("--noise must be non-negative"));
    }
    // fail on an unwritable destination before spending time on the rollout
    std::fs::write(&out, "").map_err(|e| usage(format!("cannot write {}: {e}", out.display())))?;

    let mut rng = stream_rng(seed, Stream::Env);
    let transitions = if policy == "scripted" {
        let params = TrainConfig::default().pendulum;
        let mut env = Pendulum::new(params);
        let ctrl = SwingUpController::default();
        let normal = Normal::new(0.0, noise).context("torque noise")?;
        let policy = |s: &[f64], rng: &mut dyn RngCore| {
            let state = PendulumState::from_slice(s)?;
            let mut a = ctrl.action(state, &params);
            if noise > 0.0 {
                a += normal.sample(rng);
            }
            Ok(vec![a.clamp(-MAX_TORQUE, MAX_TORQUE)])
        };
        harness::rollout(&mut env, steps, policy, &mut rng)?
    } else {
        let (ckpt, cfg) = load_checkpoint(policy)?;
        let mut env = Pendulum::new(cfg.pendulum);
        harness::rollout(&mut env, steps, |s, _| ckpt.nets.policy(s), &mut rng)?
    };
    if transitions.is_empty() {
        std::fs::write(&out, harness::trajectory::header(2, 1) + "\n")?;
    } else {
        harness::write_trajectory(&out, &transitions)?;
    }
    let total_return: f64 = transitions.iter().map(|t| t.r).sum();
    let episodes = transitions.iter().filter(|t| t.done).count();
    let catastrophes = transitions
        .iter()
        .filter(|t| crossed_bottom(t.s[0], t.s_next[0]))
        .count();
    eprintln!("wrote {} rows to {}", transitions.len(), out.display());
    println!(
        "{}",
        json!({"rows": transitions.len(), "total_return": total_return, "episodes": episodes, "catastrophes": catastrophes, "out": out.display().to_string()})
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m).map(|_| true),
        Some(("eval", m)) => cmd_eval(m).map(|_| true),
        Some(("gp-selftest", m)) => cmd_selftest(m),
        Some(("record", m)) => cmd_record(m).map(|_| true),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

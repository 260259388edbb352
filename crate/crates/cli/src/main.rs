use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use dual_ac::driver::{ablation_suite, final_return, run_experiment, tabular_env, DualAcConfig};
use dual_ac::function_approx::TabularSoftmaxPolicy;
use dual_ac::io::{load_checkpoint, load_config, JsonlSink};
use dual_ac::mdp::{dual_flow_residual, duality_gap, policy_return, LpOracle, TabularMdp};
use dual_ac::Error;

#[derive(Parser)]
#[command(name = "dual-ac", version, about = "Dual actor-critic training and tabular oracle checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Environment: chain2, chain5, gridworld, pendulum or mdp:<file.json>.
    #[arg(long)]
    env: String,
    /// TOML file with DualAcConfig fields; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent, streaming metrics.jsonl and checkpoint.json to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Run the full variant against every ablation over several seeds.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Final iterations averaged per run.
        #[arg(long, default_value_t = 10)]
        window: usize,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Solve a tabular MDP exactly and report the primal/dual certificate.
    /// `--env random` draws a random MDP from --seed.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Compare a trained tabular checkpoint against the oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn config(common: &Common, iterations: Option<usize>) -> Result<DualAcConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => DualAcConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn train(common: &Common, iterations: Option<usize>) -> Result<(), Error> {
    let cfg = config(common, iterations)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", common.env, cfg.seed)));
    let mut sink = JsonlSink::new(&out)?;
    let records = run_experiment(&cfg, &common.env, &mut sink)?;
    match final_return(&records, 10) {
        Some(f) => println!(
            "{} seed {}: {} iterations, final return {f:.4} -> {}",
            common.env,
            cfg.seed,
            records.len(),
            out.display()
        ),
        None => println!("{}: no iterations run, initial checkpoint in {}", common.env, out.display()),
    }
    Ok(())
}

fn ablation(common: &Common, n_seeds: u64, window: usize, iterations: Option<usize>) -> Result<(), Error> {
    let cfg = config(common, iterations)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + n_seeds).collect();
    let table = ablation_suite(&cfg, &common.env, &seeds, window)?;
    println!("{:<16} {:>12} {:>10}", "variant", "mean", "+-");
    for s in &table.summary {
        println!("{:<16} {:>12.4} {:>10.4}", s.variant, s.mean, s.half_width);
    }
    if let Some(out) = &common.out {
        let value = serde_json::to_value(&table).map_err(|e| Error::Parse(e.to_string()))?;
        write_json(out, "ablation.json", &value)?;
    }
    Ok(())
}

fn oracle_mdp(common: &Common) -> Result<TabularMdp, Error> {
    if common.env == "random" {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
        return TabularMdp::random(10, 3, 0.9, &mut rng);
    }
    let cfg = config(common, None)?;
    Ok(tabular_env(&common.env, &cfg)?.mdp().clone())
}

fn oracle_check(common: &Common, checkpoint: Option<&Path>) -> Result<(), Error> {
    let mdp = oracle_mdp(common)?;
    let oracle = LpOracle::solve(&mdp, 1e-12)?;
    let gap = duality_gap(&mdp, &oracle.v_star, &oracle.rho_star)?;
    let flow = dual_flow_residual(&mdp, &oracle.rho_star)?;
    let ret = policy_return(&mdp, &oracle.pi_star)?;
    let actions: Vec<usize> = (0..mdp.n_states()).map(|s| oracle.pi_star.mode(s)).collect();
    println!(
        "{}: {} states, {} actions, gamma {}",
        common.env,
        mdp.n_states(),
        mdp.n_actions(),
        mdp.gamma()
    );
    println!("optimal return {ret:.8}  duality gap {gap:.3e}  flow residual {flow:.3e}");
    println!("optimal actions {actions:?}");
    let mut report = serde_json::json!({
        "env": common.env,
        "gamma": mdp.gamma(),
        "optimal_return": ret,
        "duality_gap": gap,
        "flow_residual": flow,
        "v_star": oracle.v_star.0,
        "optimal_actions": actions,
    });
    if let Some(path) = checkpoint {
        let ckpt = load_checkpoint(path)?;
        let policy = TabularSoftmaxPolicy::new(mdp.n_states(), mdp.n_actions(), ckpt.policy_params)?.to_tabular();
        let learned = policy_return(&mdp, &policy)?;
        let greedy: Vec<usize> = (0..mdp.n_states()).map(|s| policy.mode(s)).collect();
        let agree = greedy.iter().zip(&actions).filter(|(a, b)| a == b).count();
        println!(
            "checkpoint iteration {}: return {learned:.6} ({:.2}% of optimal), greedy agrees on {agree}/{} states",
            ckpt.iteration,
            100.0 * learned / ret,
            mdp.n_states()
        );
        report["checkpoint_return"] = learned.into();
        report["checkpoint_greedy_actions"] = greedy.into();
    }
    if let Some(out) = &common.out {
        write_json(out, "oracle.json", &report)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, iterations } => train(common, *iterations),
        Command::Ablation {
            common,
            seeds,
            window,
            iterations,
        } => ablation(common, *seeds, *window, *iterations),
        Command::OracleCheck { common, checkpoint } => oracle_check(common, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Iteration { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use traitor_core::harness::{
    cmd_evaluate, cmd_heatmap, cmd_pretrain_rnd, cmd_pretrain_victims, cmd_train_traitors,
    cmd_verify, CommandOutput, Method, RunConfig, VerifySuite,
};
use traitor_core::oracle::{value_iteration, verify_invariance, FiniteMdp};
use traitor_core::Error;

#[derive(Parser)]
#[command(
    name = "traitor",
    version,
    about = "Traitor-agent attacks on cooperative multi-agent learners"
)]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Attack method: none, stop, random, minus_r, rnd_only, cuda2.
    #[arg(long, global = true)]
    method: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim team without traitors.
    PretrainVictims,
    /// Pre-train the RND predictor with random traitors.
    PretrainRnd,
    /// Train traitors against the frozen victims.
    TrainTraitors,
    /// Evaluate victims against trained or scripted traitors.
    Evaluate {
        /// Override the number of evaluation episodes.
        #[arg(long)]
        episodes: Option<u64>,
    },
    /// Build visit-count heatmaps from replay logs.
    Heatmap {
        /// Replay logs; defaults to the method's logs in the output directory.
        #[arg(long, num_args = 1..)]
        logs: Vec<PathBuf>,
    },
    /// Run the verification suites.
    Verify {
        /// all, invariance, counterexample, gradients, monotonicity, telescoping or tabular.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Also solve a finite MDP file and check shaping invariance on it.
        #[arg(long)]
        mdp: Option<PathBuf>,
    },
}

enum Failure {
    Validation(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => Failure::Io(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut run = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        run.out_dir = out.clone();
    }
    if let Some(m) = &cli.method {
        run.method = m.parse::<Method>()?;
    }
    run.validate()?;
    Ok(run)
}

fn report(out: &CommandOutput) {
    for note in &out.notes {
        println!("{note}");
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
}

/// Solves the MDP and checks invariance under a fixed pseudo-random potential.
fn verify_mdp_file(path: &PathBuf) -> Result<bool, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let mdp = FiniteMdp::from_text(&text)?;
    let sol = value_iteration(&mdp, 1e-12)?;
    let phi: Vec<f64> = (0..mdp.num_states)
        .map(|s| ((s * 7919 % 23) as f64) - 11.0)
        .collect();
    let rep = verify_invariance(&mdp, &phi, true, 1e-12)?;
    let ok = rep.q_residual_max < 1e-6 && rep.greedy_sets_equal;
    println!(
        "{} {}: {} states, {} iterations, V = {:?}, shaped Q residual {:.3e}",
        if ok { "PASS" } else { "FAIL" },
        path.display(),
        mdp.num_states,
        sol.iterations,
        sol.v,
        rep.q_residual_max
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool, Failure> {
    let mut cfg = load_config(&cli)?;
    let out = match cli.command {
        Command::PretrainVictims => cmd_pretrain_victims(&cfg)?,
        Command::PretrainRnd => cmd_pretrain_rnd(&cfg)?,
        Command::TrainTraitors => cmd_train_traitors(&cfg)?,
        Command::Evaluate { episodes } => {
            if let Some(n) = episodes {
                cfg.eval_episodes = n;
            }
            cfg.validate()?;
            cmd_evaluate(&cfg)?
        }
        Command::Heatmap { logs } => {
            if !logs.is_empty() {
                cfg.replay_logs = logs;
            }
            cmd_heatmap(&cfg)?
        }
        Command::Verify { suite, mdp } => {
            let suite: VerifySuite = suite.parse()?;
            let (rep, out) = cmd_verify(&cfg, suite)?;
            print!("{}", rep.to_text());
            let mut ok = rep.all_passed();
            if let Some(path) = mdp {
                ok &= verify_mdp_file(&path)?;
            }
            report(&out);
            return Ok(ok);
        }
    };
    report(&out);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

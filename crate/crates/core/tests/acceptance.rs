//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p traitor-core --test acceptance`. The attack
//! ordering criterion trains victims, an RND module and traitors for every
//! method over five seeds, so a full run takes about an hour on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use traitor_core::env::ScenarioConfig;
use traitor_core::gradcheck;
use traitor_core::harness::{
    cmd_evaluate, cmd_heatmap, cmd_pretrain_rnd, cmd_pretrain_victims, cmd_train_traitors,
    cmd_verify, invariance_sweep, load_victim, mean_std, metrics_csv, tabular_oracle_agreement,
    train_traitors, Method, PotentialKind, RunConfig, TraitorRun, VerifySuite,
};
use traitor_core::learners::{LearnerKind, QModel};
use traitor_core::oracle::{terminal_counterexample, verify_invariance};
use traitor_core::rnd::{novelty_separation, pretrain_rnd, RndModule};
use traitor_core::tmdp::{TmdpSpec, VictimPolicy};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(passed: bool, secs: f64, budget: f64) -> bool {
    passed && secs < budget
}

fn invariance() -> Outcome {
    let t = Instant::now();
    let (passed, worst) = invariance_sweep(100, 0x1a7).expect("sweep runs");
    let secs = t.elapsed().as_secs_f64();
    outcome(
        within(passed == 100, secs, 60.0),
        format!("{passed}/100 MDPs, worst |Q' - (Q* - phi)| {worst:.2e}, {secs:.2} s (limit 60 s)"),
    )
}

fn counterexample() -> Outcome {
    let t = Instant::now();
    let (mdp, phi) = terminal_counterexample();
    let off = verify_invariance(&mdp, &phi, false, 1e-12).expect("solvable");
    let on = verify_invariance(&mdp, &phi, true, 1e-12).expect("solvable");
    let secs = t.elapsed().as_secs_f64();
    let ok = !off.greedy_sets_equal && on.greedy_sets_equal && on.q_residual_max < 1e-6;
    outcome(
        within(ok, secs, 1.0),
        format!(
            "without terminal zero greedy {:?} vs unshaped {:?}; with it {:?}; {secs:.4} s (limit 1 s)",
            off.shaped.greedy[0], off.unshaped.greedy[0], on.shaped.greedy[0]
        ),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (seed, dims) in [
        &[3, 4, 5, 2][..],
        &[8, 16, 16, 4][..],
        &[5, 7, 3][..],
        &[12, 32, 1][..],
    ]
    .iter()
    .enumerate()
    {
        let e = gradcheck::mlp_max_rel_error(dims, 100 + seed as u64).unwrap();
        worst = worst.max(e);
    }
    parts.push(format!("mlp {worst:.2e}"));
    let mse = gradcheck::mse_max_rel_error(16, 3).unwrap();
    parts.push(format!("mse {mse:.2e}"));
    let mut vdn: f64 = 0.0;
    let mut qmix: f64 = 0.0;
    for seed in 0..3 {
        vdn = vdn.max(gradcheck::value_loss_max_rel_error(LearnerKind::Vdn, seed).unwrap());
        qmix = qmix.max(gradcheck::value_loss_max_rel_error(LearnerKind::QmixLite, seed).unwrap());
    }
    parts.push(format!("vdn loss {vdn:.2e}"));
    parts.push(format!("qmix_lite loss {qmix:.2e}"));
    let mixer = gradcheck::mixer_input_max_rel_error(21).unwrap();
    parts.push(format!("mixer inputs {mixer:.2e}"));
    let all = worst.max(mse).max(vdn).max(qmix).max(mixer);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        within(all < 1e-4, secs, 30.0),
        format!(
            "max relative error {} ({secs:.2} s, limit 30 s)",
            parts.join(", ")
        ),
    )
}

fn monotonicity() -> Outcome {
    let least = gradcheck::qmix_min_partial(1000, 0x30e).unwrap();
    outcome(
        least >= -1e-9,
        format!("smallest partial over 1000 samples {least:.3e}"),
    )
}

fn tabular() -> Outcome {
    let t = tabular_oracle_agreement(20_000, 10).unwrap();
    let bound = t.optimum + 3.0 * t.learned_std_err;
    outcome(
        t.sup_norm < 1e-4 && t.learned_return <= bound + 1e-12,
        format!(
            "{} states, sup-norm {:.2e}, learned return {:.6} <= optimum {:.6} + 3 sigma",
            t.states, t.sup_norm, t.learned_return, t.optimum
        ),
    )
}

/// Files written under `dir`, by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_run(dir: &Path) -> RunConfig {
    let text = "\
grid_width = 8
grid_height = 6
num_victims = 3
num_traitors = 1
num_enemies = 3
max_health = 3
max_steps = 25
learner = vdn
hidden = 16,16
seeds = 3,4
victim_steps = 2000
victim_eval_every = 1000
rnd_episodes = 10
traitor_episodes = 20
eval_episodes = 5
eval_every = 200
";
    let mut run = RunConfig::from_text(text, dir).unwrap();
    run.out_dir = dir.to_path_buf();
    run
}

fn every_subcommand(dir: &Path) -> traitor_core::Result<()> {
    let mut run = small_run(dir);
    cmd_pretrain_victims(&run)?;
    cmd_pretrain_rnd(&run)?;
    for m in Method::ALL {
        run.method = m;
        cmd_train_traitors(&run)?;
        cmd_evaluate(&run)?;
        cmd_heatmap(&run)?;
    }
    cmd_verify(&run, VerifySuite::Counterexample)?;
    Ok(())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = every_subcommand(a.path()).and_then(|_| every_subcommand(b.path())) {
        return outcome(false, format!("subcommand failed: {e}"));
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&String> = sa.keys().filter(|k| sa.get(*k) != sb.get(*k)).collect();
    outcome(
        differing.is_empty() && sa.len() == sb.len() && sa.len() > 20,
        if differing.is_empty() {
            format!(
                "{} output files byte-identical across two runs of every subcommand",
                sa.len()
            )
        } else {
            format!("files differ: {differing:?}")
        },
    )
}

/// Default-scale attack experiment shared by the heavier criteria.
struct Pipeline {
    run: RunConfig,
    victim: QModel,
    victim_win_rate: f64,
    rnd: RndModule,
    separation: Vec<f64>,
    runs: BTreeMap<Method, Vec<TraitorRun>>,
    secs: f64,
}

fn pipeline(dir: &Path) -> traitor_core::Result<Pipeline> {
    let t = Instant::now();
    let mut run = RunConfig {
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    eprintln!("  pretraining victims ({} steps)", run.victim_steps);
    cmd_pretrain_victims(&run)?;
    let kept = fs::read_to_string(dir.join("victims_checkpoint.txt"))?;
    let victim_win_rate: f64 = kept
        .lines()
        .find_map(|l| l.strip_prefix("win_rate = "))
        .and_then(|v| v.parse().ok())
        .expect("victim summary records a win rate");
    let (_, victim) = load_victim(
        &fs::read_to_string(run.victim_checkpoint_path())?,
        &run.scenario,
    )?;
    eprintln!("  victim greedy win rate {victim_win_rate:.3}; pretraining RND");
    cmd_pretrain_rnd(&run)?;
    let rnd =
        RndModule::from_checkpoint(&fs::read_to_string(run.rnd_checkpoint_path())?, run.rnd_opt)?;
    let spec = TmdpSpec::new(
        run.scenario.clone(),
        VictimPolicy::Greedy(victim.clone()),
        run.gamma(),
    )?;
    let mut separation = Vec::new();
    for seed in 0..5 {
        let fresh =
            RndModule::for_scenario(&run.scenario, run.rnd_include_traitors, run.rnd_opt, seed)?;
        let m = pretrain_rnd(&spec, fresh, run.rnd_episodes, seed)?;
        separation.push(novelty_separation(&spec, &m, 500, 1000 + seed)?.ratio());
    }
    let mut runs = BTreeMap::new();
    for method in [
        Method::None,
        Method::Stop,
        Method::Random,
        Method::MinusR,
        Method::Cuda2,
    ] {
        run.method = method;
        let mut per_seed = Vec::new();
        for &seed in &run.seeds {
            let r = train_traitors(&run, &victim, Some(&rnd), seed)?;
            eprintln!(
                "  {method} seed {seed}: win rate {:.3} after {} steps",
                r.final_row().win_rate,
                r.steps
            );
            per_seed.push(r);
        }
        runs.insert(method, per_seed);
    }
    run.method = Method::Cuda2;
    Ok(Pipeline {
        run,
        victim,
        victim_win_rate,
        rnd,
        separation,
        runs,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn telescoping(p: &Pipeline) -> Outcome {
    let cuda2 = &p.runs[&Method::Cuda2];
    let episodes: Vec<usize> = cuda2.iter().map(|r| r.residuals.len()).collect();
    let worst = cuda2
        .iter()
        .map(|r| r.max_abs_residual())
        .fold(0.0, f64::max);
    let drifted = cuda2.iter().all(|r| {
        let first = r.residuals.first().map(|e| e.phi_s0);
        r.residuals.iter().any(|e| Some(e.phi_s0) != first)
    });
    outcome(
        worst < 1e-9 && episodes.iter().all(|&n| n >= 2000) && drifted,
        format!("max |U_F - (U - phi(s0))| {worst:.2e} over {episodes:?} episodes per seed, drifting potential: {drifted}"),
    )
}

fn separation(p: &Pipeline) -> Outcome {
    let ok = p.separation.iter().filter(|&&r| r >= 2.0).count();
    let ratios: Vec<String> = p.separation.iter().map(|r| format!("{r:.2}")).collect();
    outcome(
        ok == 5,
        format!(
            "unvisited/visited novelty ratios [{}], {ok}/5 >= 2",
            ratios.join(", ")
        ),
    )
}

fn ordering(p: &Pipeline) -> Outcome {
    let mean = |m: Method| -> f64 {
        let xs: Vec<f64> = p.runs[&m].iter().map(|r| r.final_row().win_rate).collect();
        mean_std(&xs).0
    };
    let (none, stop, random, minus_r, cuda2) = (
        mean(Method::None),
        mean(Method::Stop),
        mean(Method::Random),
        mean(Method::MinusR),
        mean(Method::Cuda2),
    );
    let strong = p.victim_win_rate >= 0.9;
    let ok = strong
        && none >= stop
        && cuda2 <= minus_r
        && minus_r <= random
        && cuda2 <= none - 0.15
        && p.secs < 7200.0;
    outcome(
        ok,
        format!(
            "victim checkpoint {:.3} (needs >= 0.9); mean win rate none {none:.3}, stop {stop:.3}, random {random:.3}, \
             minus_r {minus_r:.3}, cuda2 {cuda2:.3}; pipeline {:.0} s (limit 7200 s)",
            p.victim_win_rate, p.secs
        ),
    )
}

fn zero_potential_equivalence(p: &Pipeline) -> Outcome {
    let minus = RunConfig {
        method: Method::MinusR,
        traitor_episodes: 300,
        seeds: vec![0],
        ..p.run.clone()
    };
    let zero = RunConfig {
        method: Method::Cuda2,
        potential: PotentialKind::Zero,
        ..minus.clone()
    };
    let a = train_traitors(&minus, &p.victim, Some(&p.rnd), 0).unwrap();
    let b = train_traitors(&zero, &p.victim, Some(&p.rnd), 0).unwrap();
    // every column except the method name itself
    let body = |csv: String| -> String {
        csv.lines()
            .skip(1)
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    };
    let (ca, cb) = (metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    let same_metrics =
        body(ca.clone()) == body(cb.clone()) && ca.lines().count() == cb.lines().count();
    let same_weights = a.checkpoint() == b.checkpoint();
    outcome(
        same_metrics && same_weights,
        format!(
            "{} metrics rows identical: {same_metrics}; traitor checkpoints identical: {same_weights}",
            ca.lines().count() - 1
        ),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |id: u32, name: &str, o: Outcome| {
        all &= o.passed;
        println!(
            "{} {id:>2} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    type Criterion = (u32, &'static str, fn() -> Outcome);
    let quick: [Criterion; 4] = [
        (1, "policy invariance", invariance),
        (2, "terminal counterexample", counterexample),
        (4, "gradient correctness", gradients),
        (5, "qmix_lite monotonicity", monotonicity),
    ];
    for (id, name, f) in &quick[..2] {
        report(*id, name, f());
    }
    let dir = tempfile::tempdir().unwrap();
    eprintln!(
        "building the default-scale attack experiment ({})",
        ScenarioConfig::default().to_text().replace('\n', "; ")
    );
    let pipe = pipeline(dir.path());
    match &pipe {
        Ok(p) => report(3, "telescoping identity", telescoping(p)),
        Err(e) => report(
            3,
            "telescoping identity",
            outcome(false, format!("pipeline failed: {e}")),
        ),
    }
    for (id, name, f) in &quick[2..] {
        report(*id, name, f());
    }
    match &pipe {
        Ok(p) => report(6, "rnd novelty separation", separation(p)),
        Err(e) => report(
            6,
            "rnd novelty separation",
            outcome(false, format!("pipeline failed: {e}")),
        ),
    }
    report(7, "tabular-oracle agreement", tabular());
    match &pipe {
        Ok(p) => {
            report(8, "directional attack ordering", ordering(p));
            report(
                9,
                "zero-potential equivalence",
                zero_potential_equivalence(p),
            );
        }
        Err(e) => {
            report(
                8,
                "directional attack ordering",
                outcome(false, format!("pipeline failed: {e}")),
            );
            report(
                9,
                "zero-potential equivalence",
                outcome(false, format!("pipeline failed: {e}")),
            );
        }
    }
    report(10, "determinism", determinism());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

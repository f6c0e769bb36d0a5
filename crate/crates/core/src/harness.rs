//! Experiment orchestration: run configuration, traitor training under every
//! attack method, evaluation with replay logs, heatmaps, verification suites,
//! and the file-writing commands behind the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{
    reset, AgentAction, EnemyBehavior, ScenarioConfig, SpawnLayout, Team, WorldState,
};
use crate::error::{invalid, parse_err, Error, Result};
use crate::learners::{
    epsilon_greedy, eval_reset_seed, mix_seed, read_learner_checkpoint, tabular_update,
    train_reset_seed, train_victims, write_learner_checkpoint, AgentNet, CheckpointMeta,
    EvalSchedule, JointTransition, Learner, LearnerConfig, LearnerKind, QModel, QTable,
    VICTIM_FEATURES,
};
use crate::nnet::OptConfig;
use crate::oracle::{
    decode_joint_action, num_joint_actions, random_mdp, terminal_counterexample, tmdp_to_mdp,
    value_iteration, verify_invariance, MAX_ENUMERATED_STATES,
};
use crate::rnd::{novelty_separation, pretrain_rnd, RndModule};
use crate::shaping::{compose, shaped_return, PotentialHandle, ShapedTransition};
use crate::textio::parse_key_values;
use crate::tmdp::{
    tmdp_step, traitor_objective_estimate, GreedyTraitors, RandomTraitors, StopTraitors, TmdpSpec,
    TraitorPolicy, TraitorTransition, VictimPolicy,
};
use crate::{gradcheck, learners};

pub const METRICS_HEADER: &str =
    "method,seed,step,win_rate,allied_deaths,traitor_return,shaping_residual_max";
pub const REPLAY_HEADER: &str =
    "episode,t,actions,reward,done,positions,r_V,r_T,phi_s,phi_s_next,F,r_shaped";
pub const VICTIM_METRICS_HEADER: &str = "step,win_rate,allied_deaths,team_return";

/// Attack method. `None` evaluates the victims on the scenario with the
/// traitors removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    None,
    Stop,
    Random,
    MinusR,
    RndOnly,
    Cuda2,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::Stop,
        Method::Random,
        Method::MinusR,
        Method::RndOnly,
        Method::Cuda2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Stop => "stop",
            Method::Random => "random",
            Method::MinusR => "minus_r",
            Method::RndOnly => "rnd_only",
            Method::Cuda2 => "cuda2",
        }
    }

    /// Whether traitors are trained.
    pub fn learns(self) -> bool {
        matches!(self, Method::MinusR | Method::RndOnly | Method::Cuda2)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method `{s}`")))
    }
}

/// Potential used by `cuda2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PotentialKind {
    /// Novelty of the drifting RND predictor.
    Rnd,
    /// `Φ ≡ 0`; `cuda2` then reduces to `minus_r`.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub method: Method,
    pub potential: PotentialKind,
    pub learner: LearnerConfig,
    pub seeds: Vec<u64>,
    pub victim_steps: u64,
    /// Evaluation cadence of victim pre-training, in env steps.
    pub victim_eval_every: u64,
    /// Save the best evaluated victim snapshot instead of the final one.
    pub victim_keep_best: bool,
    pub rnd_episodes: u64,
    pub rnd_opt: OptConfig,
    pub rnd_include_traitors: bool,
    /// Traitor training budget in episodes.
    pub traitor_episodes: u64,
    pub eval_episodes: u64,
    /// Evaluation cadence of traitor training, in env steps.
    pub eval_every: u64,
    pub eval_seed: u64,
    pub out_dir: PathBuf,
    pub victim_checkpoint: Option<PathBuf>,
    pub rnd_checkpoint: Option<PathBuf>,
    pub traitor_checkpoint: Option<PathBuf>,
    pub replay_logs: Vec<PathBuf>,
    /// Write every training step of learning methods to a shaping log.
    pub shaping_log: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            method: Method::Cuda2,
            potential: PotentialKind::Rnd,
            learner: LearnerConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            victim_steps: 200_000,
            victim_eval_every: 20_000,
            victim_keep_best: true,
            rnd_episodes: 300,
            rnd_opt: OptConfig::adam(1e-3),
            rnd_include_traitors: false,
            traitor_episodes: 2000,
            eval_episodes: 200,
            eval_every: 5000,
            eval_seed: 20_240_601,
            out_dir: PathBuf::from("runs"),
            victim_checkpoint: None,
            rnd_checkpoint: None,
            traitor_checkpoint: None,
            replay_logs: Vec::new(),
            shaping_log: false,
        }
    }
}

const SCENARIO_KEYS: [&str; 14] = [
    "grid_width",
    "grid_height",
    "num_victims",
    "num_traitors",
    "num_enemies",
    "max_health",
    "attack_range",
    "attack_damage",
    "max_steps",
    "win_bonus",
    "layout",
    "seed",
    "enemy_behavior",
    "spawns",
];

impl RunConfig {
    /// Parses `key = value` text. Scenario keys may appear inline; a
    /// `scenario = PATH` line loads a scenario file first (inline keys
    /// override it). Relative paths resolve against `base`.
    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut scenario_pairs = Vec::new();
        let mut inline = Vec::new();
        let resolve = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (line, key, value) in parse_key_values(text)? {
            let num = |v: &str| -> Result<u64> {
                v.parse()
                    .map_err(|_| parse_err(line, format!("`{key}` expects an integer")))
            };
            let real = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| parse_err(line, format!("`{key}` expects a number")))
            };
            let flag = |v: &str| -> Result<bool> {
                match v {
                    "true" | "1" => Ok(true),
                    "false" | "0" => Ok(false),
                    _ => Err(parse_err(line, format!("`{key}` expects true or false"))),
                }
            };
            let bad = |e: Error| match e {
                Error::InvalidArgument(m) => parse_err(line, m),
                other => other,
            };
            match key.as_str() {
                "scenario" => {
                    let text = fs::read_to_string(resolve(&value))?;
                    scenario_pairs = parse_key_values(&text)?;
                }
                k if SCENARIO_KEYS.contains(&k) => inline.push((line, key.clone(), value.clone())),
                "method" => c.method = value.parse().map_err(bad)?,
                "potential" => {
                    c.potential = match value.as_str() {
                        "rnd" => PotentialKind::Rnd,
                        "zero" => PotentialKind::Zero,
                        _ => return Err(parse_err(line, "potential must be `rnd` or `zero`")),
                    }
                }
                "learner" => c.learner.kind = value.parse().map_err(bad)?,
                "seeds" => {
                    c.seeds = value
                        .split(',')
                        .map(|s| num(s.trim()))
                        .collect::<Result<_>>()?;
                }
                "victim_steps" => c.victim_steps = num(&value)?,
                "victim_eval_every" => c.victim_eval_every = num(&value)?,
                "victim_keep_best" => c.victim_keep_best = flag(&value)?,
                "rnd_episodes" => c.rnd_episodes = num(&value)?,
                "rnd_lr" => c.rnd_opt.lr = real(&value)?,
                "rnd_include_traitors" => c.rnd_include_traitors = flag(&value)?,
                "traitor_episodes" => c.traitor_episodes = num(&value)?,
                "eval_episodes" => c.eval_episodes = num(&value)?,
                "eval_every" => c.eval_every = num(&value)?,
                "eval_seed" => c.eval_seed = num(&value)?,
                "gamma" => c.learner.gamma = real(&value)?,
                "lr" => c.learner.opt.lr = real(&value)?,
                "hidden" => {
                    c.learner.hidden = value
                        .split(',')
                        .map(|s| num(s.trim()).map(|v| v as usize))
                        .collect::<Result<_>>()?;
                }
                "batch_size" => c.learner.batch_size = num(&value)? as usize,
                "replay_capacity" => c.learner.replay_capacity = num(&value)? as usize,
                "eps_start" => c.learner.eps.start = real(&value)?,
                "eps_end" => c.learner.eps.end = real(&value)?,
                "eps_decay_steps" => c.learner.eps.decay_steps = num(&value)?,
                "target_sync_updates" => c.learner.target_sync_updates = num(&value)?,
                "train_interval" => c.learner.train_interval = num(&value)?,
                "grad_clip" => c.learner.grad_clip = real(&value)?,
                "double_q" => c.learner.double_q = flag(&value)?,
                "mixer_embed" => c.learner.mixer_embed = num(&value)? as usize,
                "tabular_alpha" => c.learner.tabular_alpha = real(&value)?,
                "out_dir" => c.out_dir = resolve(&value),
                "victim_checkpoint" => c.victim_checkpoint = Some(resolve(&value)),
                "rnd_checkpoint" => c.rnd_checkpoint = Some(resolve(&value)),
                "traitor_checkpoint" => c.traitor_checkpoint = Some(resolve(&value)),
                "replay_logs" => {
                    c.replay_logs = value.split(',').map(|s| resolve(s.trim())).collect()
                }
                "shaping_log" => c.shaping_log = flag(&value)?,
                _ => return Err(parse_err(line, format!("unknown key `{key}`"))),
            }
        }
        scenario_pairs.extend(inline);
        c.scenario = ScenarioConfig::from_pairs(&scenario_pairs)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if !(0.0..1.0).contains(&self.learner.gamma) {
            return Err(invalid("gamma must lie in [0, 1)"));
        }
        if self.eval_episodes == 0 {
            return Err(invalid("eval_episodes must be positive"));
        }
        if self.learner.train_interval == 0 || self.learner.batch_size == 0 {
            return Err(invalid("train_interval and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.learner.gamma
    }

    /// Whether this method and potential need an RND checkpoint.
    pub fn needs_rnd(&self) -> bool {
        match self.method {
            Method::RndOnly => true,
            Method::Cuda2 => self.potential == PotentialKind::Rnd,
            _ => false,
        }
    }

    pub fn victim_checkpoint_path(&self) -> PathBuf {
        self.victim_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("victims.ckpt"))
    }

    pub fn rnd_checkpoint_path(&self) -> PathBuf {
        self.rnd_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("rnd.ckpt"))
    }

    fn tag(&self, seed: u64) -> String {
        format!("{}_seed{seed}", self.method)
    }

    pub fn traitor_checkpoint_path(&self, seed: u64) -> PathBuf {
        self.traitor_checkpoint.clone().unwrap_or_else(|| {
            self.out_dir
                .join(format!("traitors_{}.ckpt", self.tag(seed)))
        })
    }

    /// Scenario the method is played on.
    pub fn play_scenario(&self) -> ScenarioConfig {
        match self.method {
            Method::None => self.scenario.without_traitors(),
            _ => self.scenario.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: Method,
    pub seed: u64,
    pub step: u64,
    pub win_rate: f64,
    pub allied_deaths: f64,
    pub traitor_return: f64,
    pub shaping_residual_max: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.3e}",
            self.method,
            self.seed,
            self.step,
            self.win_rate,
            self.allied_deaths,
            self.traitor_return,
            self.shaping_residual_max
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Greedy evaluation outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub episodes: u64,
    pub win_rate: f64,
    /// Mean dead allied units (victims and traitors) at episode end.
    pub allied_deaths: f64,
    /// Mean undiscounted `Σ r_T`.
    pub traitor_return: f64,
    /// Largest `|U_F − (U − Φ(s_0))|` when a potential was supplied.
    pub residual_max: f64,
}

fn positions_field(state: &WorldState) -> String {
    state
        .units
        .iter()
        .map(|u| {
            if u.alive {
                format!("{}:{}", u.x, u.y)
            } else {
                "-".into()
            }
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn actions_field(joint: &[Option<AgentAction>]) -> String {
    joint
        .iter()
        .map(|a| a.map_or_else(|| "-".to_string(), |a| a.code()))
        .collect::<Vec<_>>()
        .join(";")
}

/// One replay-log line for a (possibly shaped) transition.
pub fn replay_line(episode: u64, st: &ShapedTransition) -> String {
    let b = &st.base;
    format!(
        "{episode},{},{},{},{},{},{},{},{},{},{},{}",
        b.t,
        actions_field(&b.joint),
        b.r_v,
        b.done as u8,
        positions_field(&b.state),
        b.r_v,
        b.r_t,
        st.phi_s,
        st.phi_s_next,
        st.f,
        st.r_shaped
    )
}

fn potential_of(
    rnd: Option<&RndModule>,
    config: &ScenarioConfig,
    state: &WorldState,
) -> Result<f64> {
    match rnd {
        Some(module) => PotentialHandle::Rnd { module, config }.eval(config, state, state.t),
        None => PotentialHandle::zero().eval(config, state, state.t),
    }
}

/// Plays `episodes` evaluation episodes with greedy victims. Episode `k`
/// starts from `eval_reset_seed(seed, k)`. With `potential`, the frozen
/// novelty is logged as a potential and residuals are checked.
pub fn evaluate_attack(
    spec: &TmdpSpec,
    policy: &mut dyn TraitorPolicy,
    potential: Option<&RndModule>,
    episodes: u64,
    seed: u64,
    mut log: Option<&mut String>,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let cfg = &spec.scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xe7a1));
    let (mut wins, mut deaths, mut ret, mut residual_max) = (0u64, 0.0, 0.0, 0.0f64);
    for k in 0..episodes {
        let mut s = reset(cfg, eval_reset_seed(seed, k))?;
        let mut phi_s = potential_of(potential, cfg, &s)?;
        let mut episode = Vec::new();
        loop {
            let a = policy.act(spec, &s, &mut rng)?;
            let tr = tmdp_step(spec, &s, &a, &mut rng)?;
            let phi_next = if tr.done {
                0.0
            } else {
                potential_of(potential, cfg, &tr.next_state)?
            };
            let st = compose(tr, phi_s, phi_next, spec.gamma);
            phi_s = phi_next;
            ret += st.base.r_t;
            if let Some(out) = log.as_deref_mut() {
                out.push_str(&replay_line(k, &st));
                out.push('\n');
            }
            s = st.base.next_state.clone();
            let done = st.base.done;
            let won = st.base.won;
            episode.push(st);
            if done {
                wins += won as u64;
                deaths += s
                    .units
                    .iter()
                    .filter(|u| u.team.is_ally() && !u.alive)
                    .count() as f64;
                break;
            }
        }
        residual_max = residual_max.max(shaped_return(&episode, spec.gamma)?.residual.abs());
    }
    let n = episodes as f64;
    Ok(EvalSummary {
        episodes,
        win_rate: wins as f64 / n,
        allied_deaths: deaths / n,
        traitor_return: ret / n,
        residual_max,
    })
}

/// Checks a victim checkpoint against the scenario and returns its model.
pub fn load_victim(text: &str, scenario: &ScenarioConfig) -> Result<(CheckpointMeta, QModel)> {
    let (meta, model) = read_learner_checkpoint(text)?;
    if meta.role != "victim" {
        return Err(invalid(format!(
            "expected a victim checkpoint, got role `{}`",
            meta.role
        )));
    }
    if meta.scenario_hash != scenario.victim_signature() {
        return Err(invalid(
            "victim checkpoint was trained on a different scenario",
        ));
    }
    Ok((meta, model))
}

pub fn load_traitors(text: &str, scenario: &ScenarioConfig) -> Result<(CheckpointMeta, QModel)> {
    let (meta, model) = read_learner_checkpoint(text)?;
    if meta.role != "traitor" {
        return Err(invalid(format!(
            "expected a traitor checkpoint, got role `{}`",
            meta.role
        )));
    }
    if meta.scenario_hash != scenario.content_hash() {
        return Err(invalid(
            "traitor checkpoint was trained on a different scenario",
        ));
    }
    Ok((meta, model))
}

/// Residual bookkeeping of one shaped training episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeResidual {
    pub episode: u64,
    pub steps: usize,
    pub u: f64,
    pub u_f: f64,
    pub phi_s0: f64,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct TraitorRun {
    pub method: Method,
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    pub residuals: Vec<EpisodeResidual>,
    pub learner: Option<Learner>,
    pub meta: Option<CheckpointMeta>,
    pub steps: u64,
    pub episodes: u64,
    pub shaping_log: Option<String>,
}

impl TraitorRun {
    pub fn checkpoint(&self) -> Option<String> {
        match (&self.learner, &self.meta) {
            (Some(l), Some(m)) => Some(write_learner_checkpoint(m, &l.q_model())),
            _ => None,
        }
    }

    pub fn final_row(&self) -> &MetricsRow {
        self.metrics
            .last()
            .expect("every run records at least one row")
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.residual.abs())
            .fold(0.0, f64::max)
    }
}

/// Evaluation stream of run seed `seed`; shared by every method so
/// comparisons are paired.
pub fn eval_stream(run: &RunConfig, seed: u64) -> u64 {
    mix_seed(run.eval_seed, seed)
}

fn eval_row(
    run: &RunConfig,
    spec: &TmdpSpec,
    policy: &mut dyn TraitorPolicy,
    seed: u64,
    step: u64,
    residual: f64,
) -> Result<MetricsRow> {
    let e = evaluate_attack(
        spec,
        policy,
        None,
        run.eval_episodes,
        eval_stream(run, seed),
        None,
    )?;
    Ok(MetricsRow {
        method: run.method,
        seed,
        step,
        win_rate: e.win_rate,
        allied_deaths: e.allied_deaths,
        traitor_return: e.traitor_return,
        shaping_residual_max: residual,
    })
}

/// Trains (or, for scripted methods, just evaluates) traitors against the
/// frozen `victim` model. Learning methods run `run.traitor_episodes`
/// episodes and evaluate at step 0, every `run.eval_every` env steps, and at
/// the end.
///
/// Per step of `cuda2`: `phi_s = Φ(s_n; θ_n)` is carried from the previous
/// step, the predictor is updated on `s_n`, the env steps, and
/// `phi_s_next = Φ(s_{n+1}; θ_{n+1})` (0 when terminal). `rnd_only` adds the
/// post-update novelty of `s_{n+1}` to `−r_V`.
pub fn train_traitors(
    run: &RunConfig,
    victim: &QModel,
    rnd: Option<&RndModule>,
    seed: u64,
) -> Result<TraitorRun> {
    run.validate()?;
    let cfg = run.play_scenario();
    let spec = TmdpSpec::new(
        cfg.clone(),
        VictimPolicy::Greedy(victim.clone()),
        run.gamma(),
    )?;
    let mut out = TraitorRun {
        method: run.method,
        seed,
        metrics: Vec::new(),
        residuals: Vec::new(),
        learner: None,
        meta: None,
        steps: 0,
        episodes: 0,
        shaping_log: None,
    };
    match run.method {
        Method::None | Method::Stop => {
            out.metrics
                .push(eval_row(run, &spec, &mut StopTraitors, seed, 0, 0.0)?);
            return Ok(out);
        }
        Method::Random => {
            out.metrics
                .push(eval_row(run, &spec, &mut RandomTraitors, seed, 0, 0.0)?);
            return Ok(out);
        }
        _ => {}
    }
    if cfg.num_traitors == 0 {
        return Err(invalid("traitor training needs at least one traitor"));
    }
    let mut rnd: Option<RndModule> = if run.needs_rnd() {
        let m =
            rnd.ok_or_else(|| invalid(format!("method {} needs an RND checkpoint", run.method)))?;
        if m.input_width() != crate::rnd::trimmed_width(&cfg, m.include_traitors()) {
            return Err(invalid("RND checkpoint does not match the scenario"));
        }
        Some(m.clone())
    } else {
        None
    };
    let shaped = run.method == Method::Cuda2;
    let lcfg = &run.learner;
    let space = spec.traitor_space();
    let n_agents = cfg.num_traitors;
    let mut learner = Learner::new(
        lcfg,
        learners::feature_len(&cfg, crate::tmdp::TRAITOR_FEATURES),
        crate::env::global_state_len(&cfg),
        n_agents,
        space.len(),
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a17));
    let mut log = run.shaping_log.then(|| format!("{REPLAY_HEADER}\n"));
    let mut window_residual = 0.0f64;
    let greedy_row = |learner: &Learner, step: u64, residual: f64| -> Result<MetricsRow> {
        eval_row(
            run,
            &spec,
            &mut GreedyTraitors(learner.q_model()),
            seed,
            step,
            residual,
        )
    };
    out.metrics.push(greedy_row(&learner, 0, 0.0)?);
    let mut steps = 0u64;
    for ep in 0..run.traitor_episodes {
        let mut s = reset(&cfg, train_reset_seed(seed, ep))?;
        let mut inputs = spec.traitor_inputs(&s)?;
        let mut phi_s = if shaped {
            potential_of(rnd.as_ref(), &cfg, &s)?
        } else {
            0.0
        };
        let mut episode: Vec<ShapedTransition> = Vec::new();
        loop {
            let eps = lcfg.eps.value(steps);
            let mut ids = vec![0usize; n_agents];
            let mut acts = vec![None; n_agents];
            for k in 0..n_agents {
                if inputs.alive[k] {
                    let q = learner.q_values(&inputs.features[k], k)?;
                    ids[k] = epsilon_greedy(&q, &inputs.legal[k], eps, &mut rng)?;
                    acts[k] = space.action(ids[k]);
                }
            }
            if let Some(m) = rnd.as_mut() {
                let x = m.trim(&cfg, &s);
                m.update(&x)?;
            }
            let tr: TraitorTransition = tmdp_step(&spec, &s, &acts, &mut rng)?;
            let st = match run.method {
                Method::Cuda2 => {
                    let phi_next = if tr.done {
                        0.0
                    } else {
                        potential_of(rnd.as_ref(), &cfg, &tr.next_state)?
                    };
                    let st = compose(tr, phi_s, phi_next, run.gamma());
                    phi_s = phi_next;
                    st
                }
                Method::RndOnly => {
                    let m = rnd.as_ref().expect("checked above");
                    let bonus = m.novelty(&m.trim(&cfg, &tr.next_state))?;
                    let r_t = tr.r_t;
                    ShapedTransition {
                        base: tr,
                        phi_s: 0.0,
                        phi_s_next: 0.0,
                        f: 0.0,
                        r_shaped: r_t + bonus,
                    }
                }
                _ => {
                    let r_t = tr.r_t;
                    ShapedTransition {
                        base: tr,
                        phi_s: 0.0,
                        phi_s_next: 0.0,
                        f: 0.0,
                        r_shaped: r_t,
                    }
                }
            };
            let next = spec.traitor_inputs(&st.base.next_state)?;
            let jt = JointTransition {
                features: inputs.features,
                alive: inputs.alive,
                actions: ids,
                state: st.base.s.clone(),
                reward: st.r_shaped,
                next_features: next.features.clone(),
                next_alive: next.alive.clone(),
                next_legal: next.legal.clone(),
                next_state: st.base.s_next.clone(),
                done: st.base.done,
            };
            learner.record(lcfg, jt, &mut rng)?;
            steps += 1;
            if let Some(l) = log.as_mut() {
                l.push_str(&replay_line(ep, &st));
                l.push('\n');
            }
            inputs = next;
            s = st.base.next_state.clone();
            let done = st.base.done;
            episode.push(st);
            let at_eval = run.eval_every > 0 && steps.is_multiple_of(run.eval_every);
            if done && shaped {
                let sr = shaped_return(&episode, run.gamma())?;
                window_residual = window_residual.max(sr.residual.abs());
                out.residuals.push(EpisodeResidual {
                    episode: ep,
                    steps: episode.len(),
                    u: sr.u,
                    u_f: sr.u_f,
                    phi_s0: episode[0].phi_s,
                    residual: sr.residual,
                });
            }
            if at_eval {
                out.metrics
                    .push(greedy_row(&learner, steps, window_residual)?);
                window_residual = 0.0;
            }
            if done {
                break;
            }
        }
    }
    if out.metrics.last().map(|r| r.step) != Some(steps) {
        out.metrics
            .push(greedy_row(&learner, steps, window_residual)?);
    }
    out.meta = Some(CheckpointMeta {
        kind: lcfg.kind,
        role: "traitor".into(),
        scenario_hash: cfg.content_hash(),
        seed,
        steps,
    });
    out.learner = Some(learner);
    out.steps = steps;
    out.episodes = run.traitor_episodes;
    out.shaping_log = log;
    Ok(out)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub const SUMMARY_HEADER: &str = "method,seeds,win_rate_mean,win_rate_std,allied_deaths_mean,allied_deaths_std,traitor_return_mean,traitor_return_std";

/// One summary line over the final rows of several seeds.
pub fn summary_line(method: Method, finals: &[&MetricsRow]) -> String {
    let col =
        |f: fn(&MetricsRow) -> f64| mean_std(&finals.iter().map(|r| f(r)).collect::<Vec<_>>());
    let (w, ws) = col(|r| r.win_rate);
    let (d, ds) = col(|r| r.allied_deaths);
    let (t, ts) = col(|r| r.traitor_return);
    format!(
        "{method},{},{w:.4},{ws:.4},{d:.4},{ds:.4},{t:.4},{ts:.4}",
        finals.len()
    )
}

/// Per-cell visit counts of one team.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub team: Team,
    /// `counts[y][x]`.
    pub counts: Vec<Vec<u64>>,
    pub episodes: u64,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, team: Team) -> Self {
        Self {
            width,
            height,
            team,
            counts: vec![vec![0; width]; height],
            episodes: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `width height`, the team tag, then one row per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n{}\n", self.width, self.height, self.team.tag());
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    /// L1 distance between the two grids after normalizing each to sum 1.
    pub fn normalized_l1(&self, other: &Heatmap) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(invalid("heatmaps have different shapes"));
        }
        let (a, b) = (self.total().max(1) as f64, other.total().max(1) as f64);
        Ok(self
            .counts
            .iter()
            .flatten()
            .zip(other.counts.iter().flatten())
            .map(|(&x, &y)| (x as f64 / a - y as f64 / b).abs())
            .sum())
    }
}

/// Accumulates victim and traitor visit counts over replay logs. Every
/// logged line counts the pre-step position of each alive unit once.
pub fn heatmaps_from_logs(scenario: &ScenarioConfig, logs: &[&str]) -> Result<(Heatmap, Heatmap)> {
    let (w, h) = (scenario.grid_width, scenario.grid_height);
    let mut victims = Heatmap::new(w, h, Team::Victim);
    let mut traitors = Heatmap::new(w, h, Team::Traitor);
    for log in logs {
        let mut lines = log.lines().enumerate();
        match lines.next() {
            Some((_, head)) if head == REPLAY_HEADER => {}
            _ => return Err(parse_err(1, "missing replay-log header")),
        }
        let mut last_episode = None;
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 12 {
                return Err(parse_err(
                    n,
                    format!("expected 12 fields, got {}", fields.len()),
                ));
            }
            let episode: u64 = fields[0].parse().map_err(|_| parse_err(n, "bad episode"))?;
            if last_episode != Some(episode) {
                victims.episodes += 1;
                traitors.episodes += 1;
                last_episode = Some(episode);
            }
            let cells: Vec<&str> = fields[5].split(';').collect();
            if cells.len() != scenario.num_units() {
                return Err(parse_err(
                    n,
                    format!("expected {} positions", scenario.num_units()),
                ));
            }
            for (u, cell) in cells.iter().enumerate() {
                if *cell == "-" {
                    continue;
                }
                let (x, y) = cell
                    .split_once(':')
                    .and_then(|(x, y)| Some((x.parse::<usize>().ok()?, y.parse::<usize>().ok()?)))
                    .ok_or_else(|| parse_err(n, format!("bad position `{cell}`")))?;
                if x >= w || y >= h {
                    return Err(parse_err(n, format!("position `{cell}` is off the grid")));
                }
                match scenario.team_of(u) {
                    Team::Victim => victims.counts[y][x] += 1,
                    Team::Traitor => traitors.counts[y][x] += 1,
                    Team::Enemy => {}
                }
            }
        }
    }
    Ok((victims, traitors))
}

/// Outcome of tabular Q-learning against the exact solution of a tiny
/// traitor process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TabularAgreement {
    pub states: usize,
    pub sup_norm: f64,
    pub optimum: f64,
    pub learned_return: f64,
    pub learned_std_err: f64,
}

/// Tiny deterministic traitor process on a 5×2 grid. The victim at (0,0)
/// prefers attacking, then moving east, and walks toward a holding enemy at
/// (4,0); the traitor at (2,1) can block its path.
pub fn tiny_tmdp(gamma: f64) -> Result<TmdpSpec> {
    let cfg = ScenarioConfig {
        grid_width: 5,
        grid_height: 2,
        num_victims: 1,
        num_traitors: 1,
        num_enemies: 1,
        max_health: 2,
        max_steps: 6,
        layout: SpawnLayout::Explicit(vec![(0, 0), (2, 1), (4, 0)]),
        enemy_behavior: EnemyBehavior::Hold,
        ..ScenarioConfig::default()
    };
    let mut victim_net = AgentNet::new(
        learners::feature_len(&cfg, VICTIM_FEATURES),
        1,
        crate::env::ActionSpace::for_team(&cfg, Team::Victim).len(),
        &[4],
        17,
    )?;
    victim_net.params.for_each_param_mut(|v| *v = 0.0);
    // noop, north, south, east, west, attack
    let last = victim_net
        .params
        .layers_mut()
        .last_mut()
        .expect("network has layers");
    last.bias.copy_from_slice(&[0.0, 0.1, 0.2, 0.5, 0.3, 1.0]);
    TmdpSpec::new(cfg, VictimPolicy::Greedy(QModel::Net(victim_net)), gamma)
}

struct IndexedGreedy<'a> {
    table: &'a QTable,
    index: &'a std::collections::HashMap<(WorldState, bool), usize>,
    n_actions: usize,
}

impl TraitorPolicy for IndexedGreedy<'_> {
    fn act(
        &mut self,
        spec: &TmdpSpec,
        state: &WorldState,
        _: &mut ChaCha8Rng,
    ) -> Result<Vec<Option<AgentAction>>> {
        let s = self
            .index
            .get(&(state.clone(), false))
            .ok_or_else(|| invalid("state outside the enumerated process"))?;
        let row = self.table.row(*s as u64);
        let best = (0..self.n_actions).fold(0, |b, a| if row[a] > row[b] { a } else { b });
        Ok(decode_joint_action(spec, state, best))
    }
}

/// Tabular Q-learning on the tiny process, compared with value iteration on
/// its enumeration. Each of the `episodes` rollouts starts from a uniformly
/// drawn non-terminal state and acts uniformly at random; the per-pair step
/// size is `100 / (100 + n)`.
pub fn tabular_oracle_agreement(episodes: u64, seed: u64) -> Result<TabularAgreement> {
    let spec = tiny_tmdp(0.9)?;
    let e = tmdp_to_mdp(&spec, 0, MAX_ENUMERATED_STATES)?;
    let sol = value_iteration(&e.mdp, 1e-12)?;
    let n_actions = num_joint_actions(&spec);
    let mut table = QTable::new(n_actions);
    let mut visits: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7ab1));
    let starts: Vec<usize> = (0..e.mdp.num_states)
        .filter(|&i| !e.mdp.terminal[i])
        .collect();
    for _ in 0..episodes {
        let mut s = e.states[starts[rng.random_range(0..starts.len())]]
            .0
            .clone();
        loop {
            let si = e.index[&(s.clone(), false)];
            let a = rng.random_range(0..n_actions);
            let acts = decode_joint_action(&spec, &s, a);
            let tr = tmdp_step(&spec, &s, &acts, &mut rng)?;
            let ni = e.index[&(tr.next_state.clone(), tr.done)];
            let n = visits.entry((si, a)).or_insert(0);
            *n += 1;
            let alpha = 100.0 / (100.0 + *n as f64);
            tabular_update(
                &mut table, si as u64, a, tr.r_t, ni as u64, tr.done, alpha, spec.gamma,
            );
            s = tr.next_state;
            if tr.done {
                break;
            }
        }
    }
    let mut sup: f64 = 0.0;
    for si in (0..e.mdp.num_states).filter(|&i| !e.mdp.terminal[i]) {
        for a in 0..n_actions {
            sup = sup.max((table.get(si as u64, a) - sol.q[si][a]).abs());
        }
    }
    let mut policy = IndexedGreedy {
        table: &table,
        index: &e.index,
        n_actions,
    };
    // reset seeds do not matter for an explicit layout
    let est = traitor_objective_estimate(&spec, &mut policy, 50, seed)?;
    Ok(TabularAgreement {
        states: e.mdp.num_states,
        sup_norm: sup,
        optimum: sol.v[e.initial],
        learned_return: est.mean,
        learned_std_err: est.std_err,
    })
}

/// Named verification suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifySuite {
    All,
    Invariance,
    Counterexample,
    Gradients,
    Monotonicity,
    Telescoping,
    Tabular,
}

impl FromStr for VerifySuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => VerifySuite::All,
            "invariance" => VerifySuite::Invariance,
            "counterexample" => VerifySuite::Counterexample,
            "gradients" => VerifySuite::Gradients,
            "monotonicity" => VerifySuite::Monotonicity,
            "telescoping" => VerifySuite::Telescoping,
            "tabular" => VerifySuite::Tabular,
            other => return Err(invalid(format!("unknown verify suite `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}: {}\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                )
            })
            .collect()
    }
}

/// Sweep of `count` random MDPs with random frozen potentials, terminal-zero
/// on. Returns `(cases passed, worst residual)`.
pub fn invariance_sweep(count: usize, seed: u64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(2..=20);
        let a = rng.random_range(1..=5);
        let mdp = random_mdp(&mut rng, n, a)?;
        let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let rep = verify_invariance(&mdp, &phi, true, 1e-12)?;
        worst = worst.max(rep.q_residual_max);
        if rep.q_residual_max < 1e-6 && rep.greedy_sets_equal {
            passed += 1;
        }
    }
    Ok((passed, worst))
}

/// Short `cuda2` run on a small scenario with a fresh, drifting RND
/// predictor; returns the largest absolute episode residual and the number
/// of episodes.
pub fn telescoping_check(episodes: u64, seed: u64) -> Result<(f64, usize)> {
    let scenario = ScenarioConfig {
        grid_width: 8,
        grid_height: 5,
        num_victims: 3,
        num_traitors: 1,
        num_enemies: 3,
        max_health: 3,
        max_steps: 30,
        ..ScenarioConfig::default()
    };
    let run = RunConfig {
        scenario: scenario.clone(),
        method: Method::Cuda2,
        learner: LearnerConfig {
            kind: LearnerKind::Vdn,
            hidden: vec![16, 16],
            ..LearnerConfig::default()
        },
        traitor_episodes: episodes,
        eval_episodes: 2,
        eval_every: 0,
        ..RunConfig::default()
    };
    let victim = AgentNet::new(
        learners::feature_len(&scenario, VICTIM_FEATURES),
        scenario.num_victims,
        crate::env::ActionSpace::for_team(&scenario, Team::Victim).len(),
        &[16],
        seed,
    )?;
    let rnd = RndModule::for_scenario(&scenario, false, OptConfig::adam(1e-3), seed)?;
    let out = train_traitors(&run, &QModel::Net(victim), Some(&rnd), seed)?;
    Ok((out.max_abs_residual(), out.residuals.len()))
}

pub fn run_verify(suite: VerifySuite) -> Result<VerifyReport> {
    let mut rep = VerifyReport::default();
    let want = |s: VerifySuite| suite == VerifySuite::All || suite == s;
    if want(VerifySuite::Invariance) {
        let (passed, worst) = invariance_sweep(100, 0x1a7)?;
        rep.push(
            "invariance",
            passed == 100,
            format!("{passed}/100 random MDPs invariant, worst Q residual {worst:.3e}"),
        );
    }
    if want(VerifySuite::Counterexample) {
        let (mdp, phi) = terminal_counterexample();
        let off = verify_invariance(&mdp, &phi, false, 1e-12)?;
        let on = verify_invariance(&mdp, &phi, true, 1e-12)?;
        rep.push(
            "counterexample",
            !off.greedy_sets_equal && on.greedy_sets_equal,
            format!(
                "terminal-zero off flips the policy (expected): {}; terminal-zero on restores it: {}",
                !off.greedy_sets_equal, on.greedy_sets_equal
            ),
        );
    }
    if want(VerifySuite::Gradients) {
        let mut worst: f64 = 0.0;
        for (k, dims) in [&[3, 4, 5, 2][..], &[8, 16, 16, 4][..], &[5, 7, 3][..]]
            .iter()
            .enumerate()
        {
            worst = worst.max(gradcheck::mlp_max_rel_error(dims, k as u64)?);
        }
        worst = worst.max(gradcheck::mse_max_rel_error(9, 3)?);
        let vdn = gradcheck::value_loss_max_rel_error(LearnerKind::Vdn, 5)?;
        let qmix = gradcheck::value_loss_max_rel_error(LearnerKind::QmixLite, 6)?;
        let mixer = gradcheck::mixer_input_max_rel_error(7)?;
        let all = worst.max(vdn).max(qmix).max(mixer);
        rep.push(
            "gradients",
            all < 1e-4,
            format!("max relative error: mlp {worst:.2e}, vdn {vdn:.2e}, qmix_lite {qmix:.2e}, mixer inputs {mixer:.2e}"),
        );
    }
    if want(VerifySuite::Monotonicity) {
        let least = gradcheck::qmix_min_partial(1000, 8)?;
        rep.push(
            "monotonicity",
            least >= -1e-9,
            format!("smallest dQ_tot/dQ_i over 1000 samples: {least:.3e}"),
        );
    }
    if want(VerifySuite::Telescoping) {
        let (worst, n) = telescoping_check(40, 9)?;
        rep.push(
            "telescoping",
            worst < 1e-9 && n == 40,
            format!("{n} shaped episodes, max |U_F - (U - phi_s0)| = {worst:.3e}"),
        );
    }
    if want(VerifySuite::Tabular) {
        let t = tabular_oracle_agreement(20_000, 10)?;
        let ok =
            t.sup_norm < 1e-4 && t.learned_return <= t.optimum + 3.0 * t.learned_std_err + 1e-9;
        rep.push(
            "tabular",
            ok,
            format!(
                "{} states, sup-norm {:.3e}, learned return {:.6} vs optimum {:.6}",
                t.states, t.sup_norm, t.learned_return, t.optimum
            ),
        );
    }
    Ok(rep)
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

/// What a command wrote.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    /// Short human-readable lines.
    pub notes: Vec<String>,
}

/// Trains victims with the first seed. Writes `victims.ckpt` (by default the
/// best evaluated snapshot), the evaluation curve `victims_metrics.csv`, and
/// `victims_checkpoint.txt` recording which snapshot was kept.
pub fn cmd_pretrain_victims(run: &RunConfig) -> Result<CommandOutput> {
    let seed = run.seeds[0];
    let schedule = EvalSchedule {
        every_steps: run.victim_eval_every,
        episodes: run.eval_episodes,
        seed: eval_stream(run, seed),
    };
    let t = train_victims(
        &run.scenario,
        &run.learner,
        run.victim_steps,
        seed,
        Some(schedule),
    )?;
    let mut csv = format!("{VICTIM_METRICS_HEADER}\n");
    for (step, e) in &t.curve {
        csv.push_str(&format!(
            "{step},{:.4},{:.4},{:.4}\n",
            e.win_rate, e.allied_deaths, e.team_return
        ));
    }
    let mut out = CommandOutput::default();
    let (ckpt, kept) = match (&t.best, run.victim_keep_best) {
        (Some((at, e, _)), true) => (t.best_checkpoint(), Some((*at, e.win_rate))),
        _ => (
            t.checkpoint(),
            t.final_eval().map(|e| (t.meta.steps, e.win_rate)),
        ),
    };
    out.files.push(write(&run.victim_checkpoint_path(), &ckpt)?);
    out.files
        .push(write(&run.out_dir.join("victims_metrics.csv"), &csv)?);
    if let Some((at, w)) = kept {
        let summary = format!(
            "checkpoint_step = {at}\nwin_rate = {w:.4}\neval_episodes = {}\n",
            run.eval_episodes
        );
        out.files.push(write(
            &run.out_dir.join("victims_checkpoint.txt"),
            &summary,
        )?);
    }
    if let Some((at, w)) = kept {
        out.notes.push(format!(
            "victims: {} steps, {} episodes, saved the step-{at} snapshot with greedy win rate {w:.3}",
            t.meta.steps, t.episodes
        ));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

/// Pre-trains RND under random traitors and writes `rnd.ckpt` plus a
/// novelty-separation report.
pub fn cmd_pretrain_rnd(run: &RunConfig) -> Result<CommandOutput> {
    let seed = run.seeds[0];
    let (_, victim) = load_victim(&read(&run.victim_checkpoint_path())?, &run.scenario)?;
    let spec = TmdpSpec::new(
        run.scenario.clone(),
        VictimPolicy::Greedy(victim),
        run.gamma(),
    )?;
    let module =
        RndModule::for_scenario(&run.scenario, run.rnd_include_traitors, run.rnd_opt, seed)?;
    let module = pretrain_rnd(&spec, module, run.rnd_episodes, seed)?;
    let sep = novelty_separation(&spec, &module, 500, mix_seed(seed, 0x5e9))?;
    let mut out = CommandOutput::default();
    out.files
        .push(write(&run.rnd_checkpoint_path(), &module.to_checkpoint())?);
    let report = format!(
        "visited_mean_novelty = {:.6e}\nunvisited_mean_novelty = {:.6e}\nratio = {:.4}\nsamples = {}\n",
        sep.visited,
        sep.unvisited,
        sep.ratio(),
        sep.samples
    );
    out.files
        .push(write(&run.out_dir.join("rnd_separation.txt"), &report)?);
    out.notes.push(format!(
        "rnd: {} episodes, novelty ratio unvisited/visited {:.2}",
        module.episodes,
        sep.ratio()
    ));
    Ok(out)
}

fn load_rnd(run: &RunConfig) -> Result<Option<RndModule>> {
    if !run.needs_rnd() {
        return Ok(None);
    }
    let path = run.rnd_checkpoint_path();
    if !path.exists() {
        return Err(invalid(format!(
            "method {} needs an RND checkpoint; {} does not exist",
            run.method,
            path.display()
        )));
    }
    Ok(Some(RndModule::from_checkpoint(
        &read(&path)?,
        run.rnd_opt,
    )?))
}

/// Trains traitors for every seed. Writes per-seed metrics, checkpoints,
/// residual logs and a cross-seed summary.
pub fn cmd_train_traitors(run: &RunConfig) -> Result<CommandOutput> {
    let (_, victim) = load_victim(&read(&run.victim_checkpoint_path())?, &run.scenario)?;
    let rnd = load_rnd(run)?;
    let mut out = CommandOutput::default();
    let mut runs = Vec::new();
    for &seed in &run.seeds {
        let r = train_traitors(run, &victim, rnd.as_ref(), seed)?;
        let tag = run.tag(seed);
        out.files.push(write(
            &run.out_dir.join(format!("metrics_{tag}.csv")),
            &metrics_csv(&r.metrics),
        )?);
        if let Some(ck) = r.checkpoint() {
            out.files
                .push(write(&run.traitor_checkpoint_path(seed), &ck)?);
        }
        if run.method == Method::Cuda2 {
            let mut s = String::from("episode,steps,u,u_f,phi_s0,residual\n");
            for e in &r.residuals {
                s.push_str(&format!(
                    "{},{},{},{},{},{:e}\n",
                    e.episode, e.steps, e.u, e.u_f, e.phi_s0, e.residual
                ));
            }
            out.files.push(write(
                &run.out_dir.join(format!("residuals_{tag}.csv")),
                &s,
            )?);
        }
        if let Some(log) = &r.shaping_log {
            out.files
                .push(write(&run.out_dir.join(format!("shaping_{tag}.csv")), log)?);
        }
        let f = r.final_row();
        out.notes.push(format!(
            "{} seed {seed}: {} steps, win rate {:.3}, max residual {:.2e}",
            run.method,
            r.steps,
            f.win_rate,
            r.max_abs_residual()
        ));
        runs.push(r);
    }
    let finals: Vec<&MetricsRow> = runs.iter().map(|r| r.final_row()).collect();
    let summary = format!("{SUMMARY_HEADER}\n{}\n", summary_line(run.method, &finals));
    out.files.push(write(
        &run.out_dir.join(format!("summary_{}.csv", run.method)),
        &summary,
    )?);
    Ok(out)
}

/// Evaluates the method for every seed and writes one metrics row and a
/// replay log per seed.
pub fn cmd_evaluate(run: &RunConfig) -> Result<CommandOutput> {
    let cfg = run.play_scenario();
    let (_, victim) = load_victim(&read(&run.victim_checkpoint_path())?, &run.scenario)?;
    let spec = TmdpSpec::new(cfg.clone(), VictimPolicy::Greedy(victim), run.gamma())?;
    let potential = match run.method {
        Method::Cuda2 | Method::RndOnly
            if run.potential == PotentialKind::Rnd && run.rnd_checkpoint_path().exists() =>
        {
            Some(RndModule::from_checkpoint(
                &read(&run.rnd_checkpoint_path())?,
                run.rnd_opt,
            )?)
        }
        _ => None,
    };
    let mut out = CommandOutput::default();
    let mut rows = Vec::new();
    for &seed in &run.seeds {
        let (mut policy, step): (Box<dyn TraitorPolicy>, u64) = match run.method {
            Method::None | Method::Stop => (Box::new(StopTraitors), 0),
            Method::Random => (Box::new(RandomTraitors), 0),
            _ => {
                let (meta, model) =
                    load_traitors(&read(&run.traitor_checkpoint_path(seed))?, &cfg)?;
                (Box::new(GreedyTraitors(model)), meta.steps)
            }
        };
        let mut log = format!("{REPLAY_HEADER}\n");
        let e = evaluate_attack(
            &spec,
            policy.as_mut(),
            potential.as_ref(),
            run.eval_episodes,
            eval_stream(run, seed),
            Some(&mut log),
        )?;
        let row = MetricsRow {
            method: run.method,
            seed,
            step,
            win_rate: e.win_rate,
            allied_deaths: e.allied_deaths,
            traitor_return: e.traitor_return,
            shaping_residual_max: e.residual_max,
        };
        let tag = run.tag(seed);
        out.files.push(write(
            &run.out_dir.join(format!("eval_{tag}.csv")),
            &metrics_csv(std::slice::from_ref(&row)),
        )?);
        out.files
            .push(write(&run.out_dir.join(format!("replay_{tag}.csv")), &log)?);
        out.notes.push(format!(
            "{} seed {seed}: win rate {:.3}, allied deaths {:.2}, traitor return {:.2}",
            run.method, row.win_rate, row.allied_deaths, row.traitor_return
        ));
        rows.push(row);
    }
    let refs: Vec<&MetricsRow> = rows.iter().collect();
    let summary = format!("{SUMMARY_HEADER}\n{}\n", summary_line(run.method, &refs));
    out.files.push(write(
        &run.out_dir.join(format!("eval_summary_{}.csv", run.method)),
        &summary,
    )?);
    Ok(out)
}

/// Builds victim and traitor heatmaps from the configured replay logs, or
/// from the method's per-seed replay logs in the output directory.
pub fn cmd_heatmap(run: &RunConfig) -> Result<CommandOutput> {
    let paths: Vec<PathBuf> = if run.replay_logs.is_empty() {
        run.seeds
            .iter()
            .map(|&s| run.out_dir.join(format!("replay_{}.csv", run.tag(s))))
            .collect()
    } else {
        run.replay_logs.clone()
    };
    let texts: Vec<String> = paths.iter().map(|p| read(p)).collect::<Result<_>>()?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let (v, t) = heatmaps_from_logs(&run.play_scenario(), &refs)?;
    let mut out = CommandOutput::default();
    for map in [&v, &t] {
        let name = format!("heatmap_{}_{}.txt", run.method, map.team.tag());
        out.files
            .push(write(&run.out_dir.join(name), &map.to_text())?);
    }
    out.notes.push(format!(
        "{} logs: {} victim and {} traitor unit-steps",
        paths.len(),
        v.total(),
        t.total()
    ));
    Ok(out)
}

/// Runs a verification suite and writes `verify_report.txt`.
pub fn cmd_verify(run: &RunConfig, suite: VerifySuite) -> Result<(VerifyReport, CommandOutput)> {
    let rep = run_verify(suite)?;
    let mut out = CommandOutput::default();
    out.files.push(write(
        &run.out_dir.join("verify_report.txt"),
        &rep.to_text(),
    )?);
    Ok((rep, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::train_victims;

    fn small_scenario() -> ScenarioConfig {
        ScenarioConfig {
            grid_width: 8,
            grid_height: 5,
            num_victims: 3,
            num_traitors: 1,
            num_enemies: 3,
            max_health: 3,
            max_steps: 25,
            ..ScenarioConfig::default()
        }
    }

    fn small_run(method: Method) -> RunConfig {
        RunConfig {
            scenario: small_scenario(),
            method,
            learner: LearnerConfig {
                kind: LearnerKind::Vdn,
                hidden: vec![16, 16],
                batch_size: 16,
                eps: learners::EpsSchedule {
                    start: 1.0,
                    end: 0.05,
                    decay_steps: 500,
                },
                ..LearnerConfig::default()
            },
            seeds: vec![1],
            traitor_episodes: 30,
            eval_episodes: 10,
            eval_every: 200,
            ..RunConfig::default()
        }
    }

    fn victim_model(run: &RunConfig) -> QModel {
        train_victims(&run.scenario, &run.learner, 300, 3, None)
            .unwrap()
            .model()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("cuda3".parse::<Method>().is_err());
    }

    #[test]
    fn run_config_parses_keys_and_inline_scenario() {
        let text = "method = minus_r\nseeds = 3, 4\nnum_traitors = 1\nlearner = qmix_lite\nhidden = 8,8\ntraitor_episodes = 7\n";
        let c = RunConfig::from_text(text, Path::new("/tmp")).unwrap();
        assert_eq!(c.method, Method::MinusR);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.scenario.num_traitors, 1);
        assert_eq!(c.learner.kind, LearnerKind::QmixLite);
        assert_eq!(c.learner.hidden, vec![8, 8]);
        assert_eq!(c.traitor_episodes, 7);
        let err = RunConfig::from_text("x = 1\n", Path::new("."));
        assert!(matches!(err, Err(Error::Parse { line: 1, .. })));
        let err = RunConfig::from_text("\nmethod = nope\n", Path::new("."));
        assert!(matches!(err, Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn metrics_header_is_exact() {
        let rows = [MetricsRow {
            method: Method::Stop,
            seed: 2,
            step: 0,
            win_rate: 0.5,
            allied_deaths: 1.25,
            traitor_return: -3.0,
            shaping_residual_max: 0.0,
        }];
        assert_eq!(
            metrics_csv(&rows),
            "method,seed,step,win_rate,allied_deaths,traitor_return,shaping_residual_max\nstop,2,0,0.5000,1.2500,-3.0000,0.000e0\n"
        );
    }

    #[test]
    fn stop_logs_only_noops() {
        let run = small_run(Method::Stop);
        let victim = victim_model(&run);
        let spec = TmdpSpec::new(run.scenario.clone(), VictimPolicy::Greedy(victim), 0.99).unwrap();
        let mut log = format!("{REPLAY_HEADER}\n");
        evaluate_attack(&spec, &mut StopTraitors, None, 5, 1, Some(&mut log)).unwrap();
        let traitor = run.scenario.traitor_indices().start;
        for line in log.lines().skip(1) {
            let actions: Vec<&str> = line.split(',').nth(2).unwrap().split(';').collect();
            assert!(actions[traitor] == "n" || actions[traitor] == "-");
        }
    }

    #[test]
    fn none_method_matches_victim_evaluation() {
        let run = small_run(Method::None);
        let victim = victim_model(&run);
        let r = train_traitors(&run, &victim, None, 1).unwrap();
        let direct = learners::evaluate_victims(
            &run.scenario.without_traitors(),
            &victim,
            10,
            eval_stream(&run, 1),
        )
        .unwrap();
        assert_eq!(r.final_row().win_rate, direct.win_rate);
        assert_eq!(r.final_row().allied_deaths, direct.allied_deaths);
    }

    #[test]
    fn cuda2_requires_rnd_and_keeps_residuals_tiny() {
        let run = small_run(Method::Cuda2);
        let victim = victim_model(&run);
        assert!(matches!(
            train_traitors(&run, &victim, None, 1),
            Err(Error::InvalidArgument(_))
        ));
        let rnd = RndModule::for_scenario(&run.scenario, false, OptConfig::adam(1e-3), 4).unwrap();
        let r = train_traitors(&run, &victim, Some(&rnd), 1).unwrap();
        assert_eq!(r.residuals.len(), 30);
        assert!(r.max_abs_residual() < 1e-9);
        assert!(r.residuals.iter().any(|e| e.phi_s0 > 0.0));
        assert!(r.metrics.len() >= 2);
    }

    #[test]
    fn zero_potential_cuda2_equals_minus_r() {
        let minus = small_run(Method::MinusR);
        let victim = victim_model(&minus);
        let zero = RunConfig {
            method: Method::Cuda2,
            potential: PotentialKind::Zero,
            ..minus.clone()
        };
        let a = train_traitors(&minus, &victim, None, 1).unwrap();
        let b = train_traitors(&zero, &victim, None, 1).unwrap();
        let strip = |csv: String| -> Vec<String> {
            csv.lines()
                .map(|l| {
                    l.split_once(',')
                        .map(|(_, rest)| rest.to_string())
                        .unwrap_or_default()
                })
                .collect()
        };
        assert_eq!(
            strip(metrics_csv(&a.metrics)),
            strip(metrics_csv(&b.metrics))
        );
        assert_eq!(a.checkpoint(), b.checkpoint());
    }

    #[test]
    fn training_is_deterministic() {
        let run = small_run(Method::RndOnly);
        let victim = victim_model(&run);
        let rnd = RndModule::for_scenario(&run.scenario, false, OptConfig::adam(1e-3), 4).unwrap();
        let a = train_traitors(&run, &victim, Some(&rnd), 1).unwrap();
        let b = train_traitors(&run, &victim, Some(&rnd), 1).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.checkpoint(), b.checkpoint());
    }

    #[test]
    fn heatmap_counts_alive_unit_steps() {
        let cfg = ScenarioConfig {
            grid_width: 5,
            grid_height: 6,
            num_victims: 1,
            num_traitors: 1,
            num_enemies: 1,
            ..ScenarioConfig::default()
        };
        let log = format!("{REPLAY_HEADER}\n0,0,n;n;n,0,1,3:4;-;4:5,0,-0,0,0,0,-0\n");
        let (v, t) = heatmaps_from_logs(&cfg, &[&log]).unwrap();
        assert_eq!(v.total(), 1);
        assert_eq!(v.counts[4][3], 1);
        assert_eq!(t.total(), 0);
        assert_eq!(
            v.to_text().lines().take(2).collect::<Vec<_>>(),
            vec!["5 6", "victim"]
        );
        let bad = format!("{REPLAY_HEADER}\n0,0,n;n;n,0,1,3:4;-,0,0,0,0,0,0\n");
        assert!(matches!(
            heatmaps_from_logs(&cfg, &[&bad]),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn heatmap_total_matches_logged_alive_units() {
        let run = small_run(Method::Random);
        let victim = victim_model(&run);
        let spec = TmdpSpec::new(run.scenario.clone(), VictimPolicy::Greedy(victim), 0.99).unwrap();
        let mut log = format!("{REPLAY_HEADER}\n");
        evaluate_attack(&spec, &mut RandomTraitors, None, 4, 2, Some(&mut log)).unwrap();
        let (v, t) = heatmaps_from_logs(&run.scenario, &[&log]).unwrap();
        let mut expected = 0u64;
        for line in log.lines().skip(1) {
            let pos = line.split(',').nth(5).unwrap();
            let cells: Vec<&str> = pos.split(';').collect();
            expected += cells[..4].iter().filter(|c| **c != "-").count() as u64;
        }
        assert_eq!(v.total() + t.total(), expected);
        assert_eq!(v.episodes, 4);
    }

    #[test]
    fn tabular_learning_matches_the_oracle() {
        let t = tabular_oracle_agreement(20_000, 10).unwrap();
        assert!(t.sup_norm < 1e-4, "{t:?}");
        assert!(t.learned_return <= t.optimum + 3.0 * t.learned_std_err + 1e-9);
        assert!((t.learned_return - t.optimum).abs() < 1e-6);
    }

    #[test]
    fn invariance_sweep_passes() {
        let (passed, worst) = invariance_sweep(20, 3).unwrap();
        assert_eq!(passed, 20, "{worst}");
    }

    #[test]
    fn evaluation_refuses_zero_episodes() {
        let spec = tiny_tmdp(0.9).unwrap();
        assert!(evaluate_attack(&spec, &mut StopTraitors, None, 0, 0, None).is_err());
    }
}

//! Value-based multi-agent learners: tabular independent Q-learning, VDN and
//! a small QMIX variant, with epsilon-greedy exploration, uniform replay and
//! periodically synced target networks.

mod qmix;
mod replay;
mod tabular;
mod value;
mod victims;

pub use qmix::{qmix_mix, QmixMixer};
pub use replay::ReplayBuffer;
pub use tabular::{feature_key as tabular_feature_key, tabular_update, QTable, TabularLearner};
pub use value::{LossAndGrads, Mixer, ValueLearner};
pub use victims::{
    eval_reset_seed, evaluate_victims, feature_len, greedy_team_actions, mix_seed, team_inputs,
    train_reset_seed, train_victims, EvalSchedule, FeatureKind, TeamInputs, VictimEval,
    VictimTraining, VICTIM_FEATURES,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, parse_err, Error, Result};
use crate::nnet::{MlpParams, OptConfig};
use crate::textio::LineCursor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LearnerKind {
    Tabular,
    Vdn,
    QmixLite,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Tabular => "tabular",
            LearnerKind::Vdn => "vdn",
            LearnerKind::QmixLite => "qmix_lite",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(LearnerKind::Tabular),
            "vdn" => Ok(LearnerKind::Vdn),
            "qmix_lite" | "qmix" => Ok(LearnerKind::QmixLite),
            other => Err(invalid(format!("unknown learner kind `{other}`"))),
        }
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Index of the largest legal value; ties go to the lowest index.
pub fn argmax_legal(q: &[f64], legal: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in q.iter().zip(legal).enumerate() {
        if ok && best.is_none_or(|b| v > q[b]) {
            best = Some(i);
        }
    }
    best
}

/// With probability `eps` a uniformly random legal action, otherwise the
/// greedy legal action.
pub fn epsilon_greedy<R: Rng>(q: &[f64], legal: &[bool], eps: f64, rng: &mut R) -> Result<usize> {
    if q.len() != legal.len() {
        return Err(invalid("q-values and legal mask differ in length"));
    }
    let n_legal = legal.iter().filter(|&&l| l).count();
    if n_legal == 0 {
        return Err(invalid("no legal action available"));
    }
    if eps > 0.0 && rng.random::<f64>() < eps {
        let k = rng.random_range(0..n_legal);
        return Ok(legal
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .nth(k)
            .map(|(i, _)| i)
            .unwrap());
    }
    Ok(argmax_legal(q, legal).unwrap())
}

/// Shared per-agent Q-network. The network input is the agent's feature
/// vector with a one-hot agent id appended.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentNet {
    pub params: MlpParams,
    pub n_agents: usize,
    pub feature_dim: usize,
    pub n_actions: usize,
}

impl AgentNet {
    pub fn new(
        feature_dim: usize,
        n_agents: usize,
        n_actions: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let mut dims = vec![feature_dim + n_agents];
        dims.extend_from_slice(hidden);
        dims.push(n_actions);
        Ok(Self {
            params: MlpParams::init(&dims, seed)?,
            n_agents,
            feature_dim,
            n_actions,
        })
    }

    pub fn input(&self, features: &[f64], agent: usize) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim || agent >= self.n_agents {
            return Err(invalid(format!(
                "agent net expects {} features for {} agents, got {} features for agent {agent}",
                self.feature_dim,
                self.n_agents,
                features.len()
            )));
        }
        let mut x = Vec::with_capacity(self.feature_dim + self.n_agents);
        x.extend_from_slice(features);
        x.extend((0..self.n_agents).map(|i| if i == agent { 1.0 } else { 0.0 }));
        Ok(x)
    }

    pub fn q_values(&self, features: &[f64], agent: usize) -> Result<Vec<f64>> {
        self.params.forward(&self.input(features, agent)?)
    }
}

/// A frozen or trainable per-agent action-value function.
#[derive(Clone, Debug, PartialEq)]
pub enum QModel {
    Net(AgentNet),
    Table(TabularLearner),
}

impl QModel {
    pub fn q_values(&self, features: &[f64], agent: usize) -> Result<Vec<f64>> {
        match self {
            QModel::Net(n) => n.q_values(features, agent),
            QModel::Table(t) => Ok(t.q_values(features, agent)),
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            QModel::Net(n) => n.n_agents,
            QModel::Table(t) => t.n_agents(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            QModel::Net(n) => n.n_actions,
            QModel::Table(t) => t.n_actions(),
        }
    }
}

/// One team step in learner terms. Per-agent vectors are indexed by agent
/// ordinal within the team; entries for dead agents are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransition {
    pub features: Vec<Vec<f64>>,
    pub alive: Vec<bool>,
    pub actions: Vec<usize>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub next_features: Vec<Vec<f64>>,
    pub next_alive: Vec<bool>,
    pub next_legal: Vec<Vec<bool>>,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub hidden: Vec<usize>,
    pub opt: OptConfig,
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub eps: EpsSchedule,
    /// Target networks are synced every this many gradient updates.
    pub target_sync_updates: u64,
    /// One gradient update every this many environment steps.
    pub train_interval: u64,
    pub grad_clip: f64,
    /// Double Q-learning targets.
    pub double_q: bool,
    pub mixer_embed: usize,
    /// Step size for the tabular learner.
    pub tabular_alpha: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            kind: LearnerKind::QmixLite,
            hidden: vec![64, 64],
            opt: OptConfig::adam(1e-3),
            gamma: 0.99,
            batch_size: 32,
            replay_capacity: 50_000,
            eps: EpsSchedule {
                start: 1.0,
                end: 0.05,
                decay_steps: 50_000,
            },
            target_sync_updates: 200,
            train_interval: 2,
            grad_clip: 10.0,
            double_q: true,
            mixer_embed: 16,
            tabular_alpha: 0.1,
        }
    }
}

/// A learner of any kind behind one interface.
#[derive(Clone, Debug)]
pub enum Learner {
    Tabular(TabularLearner),
    Value(Box<ValueLearner>),
}

impl Learner {
    pub fn new(
        config: &LearnerConfig,
        feature_dim: usize,
        state_dim: usize,
        n_agents: usize,
        n_actions: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(match config.kind {
            LearnerKind::Tabular => Learner::Tabular(TabularLearner::new(n_agents, n_actions)),
            _ => Learner::Value(Box::new(ValueLearner::new(
                config,
                feature_dim,
                state_dim,
                n_agents,
                n_actions,
                seed,
            )?)),
        })
    }

    pub fn q_values(&self, features: &[f64], agent: usize) -> Result<Vec<f64>> {
        match self {
            Learner::Tabular(t) => Ok(t.q_values(features, agent)),
            Learner::Value(v) => v.agent.q_values(features, agent),
        }
    }

    /// Feeds one transition; returns the loss when a gradient update ran.
    pub fn record<R: Rng>(
        &mut self,
        config: &LearnerConfig,
        tr: JointTransition,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        match self {
            Learner::Tabular(t) => {
                t.learn(&tr, config.tabular_alpha, config.gamma);
                Ok(None)
            }
            Learner::Value(v) => v.record(config, tr, rng),
        }
    }

    /// Snapshot of the per-agent value function used for acting.
    pub fn q_model(&self) -> QModel {
        match self {
            Learner::Tabular(t) => QModel::Table(t.clone()),
            Learner::Value(v) => QModel::Net(v.agent.clone()),
        }
    }
}

/// Metadata stored alongside a saved per-agent value function.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub kind: LearnerKind,
    pub role: String,
    pub scenario_hash: u64,
    pub seed: u64,
    pub steps: u64,
}

/// Learner checkpoint: `LEARNER v1` metadata header followed by either an
/// `NNET v1` block or a `TABULAR v1` block.
pub fn write_learner_checkpoint(meta: &CheckpointMeta, model: &QModel) -> String {
    let mut s = format!(
        "LEARNER v1\nkind: {}\nrole: {}\nscenario_hash: {}\nseed: {}\nsteps: {}\n",
        meta.kind, meta.role, meta.scenario_hash, meta.seed, meta.steps
    );
    match model {
        QModel::Net(n) => {
            s.push_str(&format!(
                "agents: {}\nfeatures: {}\nactions: {}\n",
                n.n_agents, n.feature_dim, n.n_actions
            ));
            n.params.write_checkpoint(&mut s);
        }
        QModel::Table(t) => t.write_checkpoint(&mut s),
    }
    s
}

pub fn read_learner_checkpoint(text: &str) -> Result<(CheckpointMeta, QModel)> {
    let mut cur = LineCursor::new(text);
    let (n, header) = cur.next_line()?;
    if header != "LEARNER v1" {
        return Err(parse_err(n, "expected `LEARNER v1`"));
    }
    let field = |cur: &mut LineCursor<'_>, key: &str| -> Result<(usize, String)> {
        let (n, v) = cur.expect_prefixed(key)?;
        Ok((n, v.to_string()))
    };
    let (n, kind) = field(&mut cur, "kind")?;
    let kind = kind
        .parse::<LearnerKind>()
        .map_err(|e| parse_err(n, e.to_string()))?;
    let (_, role) = field(&mut cur, "role")?;
    let num = |cur: &mut LineCursor<'_>, key: &str| -> Result<u64> {
        let (n, v) = cur.expect_prefixed(key)?;
        v.parse()
            .map_err(|_| parse_err(n, format!("bad `{key}` value")))
    };
    let scenario_hash = num(&mut cur, "scenario_hash")?;
    let seed = num(&mut cur, "seed")?;
    let steps = num(&mut cur, "steps")?;
    let meta = CheckpointMeta {
        kind,
        role,
        scenario_hash,
        seed,
        steps,
    };
    let model = if kind == LearnerKind::Tabular {
        QModel::Table(TabularLearner::read_checkpoint(&mut cur)?)
    } else {
        let n_agents = num(&mut cur, "agents")? as usize;
        let feature_dim = num(&mut cur, "features")? as usize;
        let n_actions = num(&mut cur, "actions")? as usize;
        let line = cur.peek().map(|(n, _)| n).unwrap_or(0);
        let params = MlpParams::read_checkpoint(&mut cur)?;
        if params.input_dim() != feature_dim + n_agents || params.output_dim() != n_actions {
            return Err(parse_err(
                line,
                "network shape does not match agent metadata",
            ));
        }
        QModel::Net(AgentNet {
            params,
            n_agents,
            feature_dim,
            n_actions,
        })
    };
    if let Some((n, _)) = cur.peek() {
        return Err(parse_err(n, "trailing content after learner checkpoint"));
    }
    Ok((meta, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_picks_argmax_with_low_index_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            epsilon_greedy(&[1.0, 3.0, 2.0], &[true; 3], 0.0, &mut rng).unwrap(),
            1
        );
        assert_eq!(
            epsilon_greedy(&[5.0, 5.0], &[true; 2], 0.0, &mut rng).unwrap(),
            0
        );
        assert_eq!(
            epsilon_greedy(&[1.0, 3.0, 2.0], &[true, false, true], 0.0, &mut rng).unwrap(),
            2
        );
        assert!(epsilon_greedy(&[1.0], &[false], 0.5, &mut rng).is_err());
    }

    #[test]
    fn full_exploration_is_uniform_over_legal() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let legal = [true, false, true, true, false];
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[epsilon_greedy(&[0.0, 9.0, 1.0, 2.0, 3.0], &legal, 1.0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[1] + counts[4], 0);
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for i in [0, 2, 3] {
            assert!(
                (counts[i] as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn eps_schedule_interpolates_then_clamps() {
        let s = EpsSchedule {
            start: 1.0,
            end: 0.05,
            decay_steps: 100,
        };
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(50) - 0.525).abs() < 1e-12);
        assert_eq!(s.value(100), 0.05);
        assert_eq!(s.value(10_000), 0.05);
    }

    #[test]
    fn learner_checkpoint_round_trip() {
        let net = AgentNet::new(4, 2, 3, &[5], 9).unwrap();
        let meta = CheckpointMeta {
            kind: LearnerKind::Vdn,
            role: "victim".into(),
            scenario_hash: 123,
            seed: 9,
            steps: 10,
        };
        let text = write_learner_checkpoint(&meta, &QModel::Net(net.clone()));
        let (m, model) = read_learner_checkpoint(&text).unwrap();
        assert_eq!(m, meta);
        assert_eq!(model, QModel::Net(net));
        assert!(read_learner_checkpoint(&text.replace("agents: 2", "agents: 3")).is_err());
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    argmax_legal, epsilon_greedy, CheckpointMeta, JointTransition, Learner, LearnerConfig, QModel,
};
use crate::env::{
    global_state, global_state_len, observation_len, observe_view, reset, scripted_enemy_policy,
    step, ActionSpace, AgentAction, ObsView, ScenarioConfig, Team, WorldState,
};
use crate::error::{invalid, Result};

/// Per-agent learner inputs for one team at one state. Dead agents get a
/// zero feature vector and an all-false legal mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TeamInputs {
    pub units: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub alive: Vec<bool>,
    pub legal: Vec<Vec<bool>>,
}

/// How a team's agents see the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Egocentric observation with the given view.
    Egocentric(ObsView),
    /// The full global state, identical for every agent.
    Global,
}

pub fn feature_len(config: &ScenarioConfig, kind: FeatureKind) -> usize {
    match kind {
        FeatureKind::Egocentric(view) => observation_len(config, view),
        FeatureKind::Global => global_state_len(config),
    }
}

pub fn team_inputs(
    config: &ScenarioConfig,
    state: &WorldState,
    team: Team,
    kind: FeatureKind,
) -> Result<TeamInputs> {
    let units: Vec<usize> = match team {
        Team::Victim => config.victim_indices().collect(),
        Team::Traitor => config.traitor_indices().collect(),
        Team::Enemy => config.enemy_indices().collect(),
    };
    let space = ActionSpace::for_team(config, team);
    let width = feature_len(config, kind);
    let global = matches!(kind, FeatureKind::Global).then(|| global_state(config, state));
    let mut out = TeamInputs {
        units: units.clone(),
        features: Vec::with_capacity(units.len()),
        alive: Vec::with_capacity(units.len()),
        legal: Vec::with_capacity(units.len()),
    };
    for &u in &units {
        if state.units[u].alive {
            let f = match (&global, kind) {
                (Some(g), _) => g.clone(),
                (None, FeatureKind::Egocentric(view)) => observe_view(config, state, u, view)?,
                (None, FeatureKind::Global) => unreachable!(),
            };
            out.features.push(f);
            out.alive.push(true);
            out.legal.push(space.legal_mask(config, state, u)?);
        } else {
            out.features.push(vec![0.0; width]);
            out.alive.push(false);
            out.legal.push(vec![false; space.len()]);
        }
    }
    Ok(out)
}

/// Greedy actions for every alive victim under a frozen value function.
pub fn greedy_team_actions(
    config: &ScenarioConfig,
    model: &QModel,
    inputs: &TeamInputs,
    team: Team,
) -> Result<Vec<(usize, AgentAction)>> {
    let space = ActionSpace::for_team(config, team);
    let mut out = Vec::new();
    for (k, &u) in inputs.units.iter().enumerate() {
        if !inputs.alive[k] {
            continue;
        }
        let q = model.q_values(&inputs.features[k], k)?;
        let id = argmax_legal(&q, &inputs.legal[k]).ok_or_else(|| invalid("no legal action"))?;
        out.push((u, space.action(id).unwrap()));
    }
    Ok(out)
}

/// Victim-side input layout: egocentric features that never include
/// traitors, so one network serves scenarios with and without them.
pub const VICTIM_FEATURES: FeatureKind = FeatureKind::Egocentric(ObsView::NoTraitors);

/// Reset seed of evaluation episode `k` for evaluation stream `seed`. Every
/// method evaluated with the same `seed` sees the same starting positions.
pub fn eval_reset_seed(seed: u64, k: u64) -> u64 {
    mix_seed(seed ^ 0x5eed_e7a1_0000_0000, k)
}

/// Reset seed of training episode `k` for run seed `seed`.
pub fn train_reset_seed(seed: u64, k: u64) -> u64 {
    mix_seed(seed ^ 0x7a11_0000_0000_0000, k)
}

/// SplitMix64 finalizer over a seed/index pair.
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VictimEval {
    pub episodes: u64,
    pub wins: u64,
    pub win_rate: f64,
    /// Mean number of allied units (victims and traitors) dead at episode end.
    pub allied_deaths: f64,
    /// Mean undiscounted victim-team return.
    pub team_return: f64,
}

/// Greedy victims against the scripted enemies on `config`; traitors, if
/// any, stay put.
pub fn evaluate_victims(
    config: &ScenarioConfig,
    model: &QModel,
    episodes: u64,
    seed: u64,
) -> Result<VictimEval> {
    if episodes == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let mut wins = 0;
    let mut deaths = 0.0;
    let mut ret = 0.0;
    for k in 0..episodes {
        let mut s = reset(config, eval_reset_seed(seed, k))?;
        loop {
            let inputs = team_inputs(config, &s, Team::Victim, VICTIM_FEATURES)?;
            let mut assign = scripted_enemy_policy(config, &s);
            assign.extend(greedy_team_actions(config, model, &inputs, Team::Victim)?);
            let out = step(config, &s, &crate::env::joint_action(&s, &assign))?;
            ret += out.reward;
            s = out.next_state;
            if out.done {
                wins += out.won as u64;
                deaths += s
                    .units
                    .iter()
                    .filter(|u| u.team.is_ally() && !u.alive)
                    .count() as f64;
                break;
            }
        }
    }
    let n = episodes as f64;
    Ok(VictimEval {
        episodes,
        wins,
        win_rate: wins as f64 / n,
        allied_deaths: deaths / n,
        team_return: ret / n,
    })
}

/// Periodic greedy evaluation during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSchedule {
    pub every_steps: u64,
    pub episodes: u64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct VictimTraining {
    pub learner: Learner,
    pub meta: CheckpointMeta,
    /// `(env step, evaluation)` at every scheduled point and at the end.
    pub curve: Vec<(u64, VictimEval)>,
    pub episodes: u64,
    /// Highest-scoring evaluated snapshot: `(env step, evaluation, model)`.
    /// Ties keep the earlier snapshot.
    pub best: Option<(u64, VictimEval, QModel)>,
}

impl VictimTraining {
    pub fn model(&self) -> QModel {
        self.learner.q_model()
    }

    pub fn checkpoint(&self) -> String {
        super::write_learner_checkpoint(&self.meta, &self.model())
    }

    pub fn final_eval(&self) -> Option<&VictimEval> {
        self.curve.last().map(|(_, e)| e)
    }

    /// Checkpoint of the best evaluated snapshot, or of the final model when
    /// nothing was evaluated.
    pub fn best_checkpoint(&self) -> String {
        match &self.best {
            Some((at, _, model)) => {
                let meta = CheckpointMeta {
                    steps: *at,
                    ..self.meta.clone()
                };
                super::write_learner_checkpoint(&meta, model)
            }
            None => self.checkpoint(),
        }
    }
}

/// Episodic epsilon-greedy training of the victim team on `scenario` with
/// traitors removed, for exactly `total_steps` environment steps.
pub fn train_victims(
    scenario: &ScenarioConfig,
    lcfg: &LearnerConfig,
    total_steps: u64,
    seed: u64,
    eval: Option<EvalSchedule>,
) -> Result<VictimTraining> {
    let config = scenario.without_traitors();
    config.validate()?;
    let n_agents = config.num_victims;
    let space = ActionSpace::for_team(&config, Team::Victim);
    let mut learner = Learner::new(
        lcfg,
        feature_len(&config, VICTIM_FEATURES),
        global_state_len(&config),
        n_agents,
        space.len(),
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xacc7));
    let mut curve = Vec::new();
    let mut steps = 0u64;
    let mut episodes = 0u64;
    let mut best: Option<(u64, VictimEval, QModel)> = None;
    let mut evaluate =
        |learner: &Learner, curve: &mut Vec<(u64, VictimEval)>, at: u64| -> Result<()> {
            if let Some(e) = eval {
                let model = learner.q_model();
                let result = evaluate_victims(&config, &model, e.episodes, e.seed)?;
                if best
                    .as_ref()
                    .is_none_or(|(_, b, _)| result.win_rate > b.win_rate)
                {
                    best = Some((at, result, model));
                }
                curve.push((at, result));
            }
            Ok(())
        };
    while steps < total_steps {
        let mut s = reset(&config, train_reset_seed(seed, episodes))?;
        episodes += 1;
        let mut inputs = team_inputs(&config, &s, Team::Victim, VICTIM_FEATURES)?;
        loop {
            let eps = lcfg.eps.value(steps);
            let mut actions = vec![0usize; n_agents];
            let mut assign = scripted_enemy_policy(&config, &s);
            for k in 0..n_agents {
                if !inputs.alive[k] {
                    continue;
                }
                let q = learner.q_values(&inputs.features[k], k)?;
                actions[k] = epsilon_greedy(&q, &inputs.legal[k], eps, &mut rng)?;
                assign.push((inputs.units[k], space.action(actions[k]).unwrap()));
            }
            let out = step(&config, &s, &crate::env::joint_action(&s, &assign))?;
            let next = team_inputs(&config, &out.next_state, Team::Victim, VICTIM_FEATURES)?;
            let tr = JointTransition {
                features: inputs.features,
                alive: inputs.alive,
                actions,
                state: global_state(&config, &s),
                reward: out.reward,
                next_features: next.features.clone(),
                next_alive: next.alive.clone(),
                next_legal: next.legal.clone(),
                next_state: global_state(&config, &out.next_state),
                done: out.done,
            };
            learner.record(lcfg, tr, &mut rng)?;
            steps += 1;
            if let Some(e) = eval {
                if e.every_steps > 0 && steps.is_multiple_of(e.every_steps) && steps < total_steps {
                    evaluate(&learner, &mut curve, steps)?;
                }
            }
            s = out.next_state;
            inputs = next;
            if out.done || steps >= total_steps {
                break;
            }
        }
    }
    evaluate(&learner, &mut curve, steps)?;
    let meta = CheckpointMeta {
        kind: lcfg.kind,
        role: "victim".to_string(),
        scenario_hash: config.victim_signature(),
        seed,
        steps,
    };
    Ok(VictimTraining {
        learner,
        meta,
        curve,
        episodes,
        best,
    })
}

//! Traitor-side decision process: the environment with a frozen victim
//! policy folded in, seen from the traitors, whose reward is the negated
//! victim team reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{
    global_state, joint_action, legal_actions, reset, scripted_enemy_policy, step, ActionSpace,
    AgentAction, JointAction, ScenarioConfig, Team, WorldState,
};
use crate::error::{invalid, Result};
use crate::learners::{
    epsilon_greedy, greedy_team_actions, mix_seed, team_inputs, FeatureKind, QModel, TeamInputs,
    VICTIM_FEATURES,
};

/// How the victims act inside the traitor process. The model is never
/// modified here.
#[derive(Clone, Debug, PartialEq)]
pub enum VictimPolicy {
    /// Argmax of the frozen value function over legal actions.
    Greedy(QModel),
    /// Epsilon-greedy sampling from the frozen value function.
    Sampled { model: QModel, eps: f64 },
    /// Uniform over legal actions.
    Uniform,
    /// Victims never act.
    Noop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmdpSpec {
    pub scenario: ScenarioConfig,
    pub victim: VictimPolicy,
    pub gamma: f64,
}

/// Inputs for traitor learners: every traitor sees the global state.
pub const TRAITOR_FEATURES: FeatureKind = FeatureKind::Global;

impl TmdpSpec {
    pub fn new(scenario: ScenarioConfig, victim: VictimPolicy, gamma: f64) -> Result<Self> {
        scenario.validate()?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        if let VictimPolicy::Greedy(m) | VictimPolicy::Sampled { model: m, .. } = &victim {
            let actions = ActionSpace::for_team(&scenario, Team::Victim).len();
            if m.n_agents() != scenario.num_victims || m.n_actions() != actions {
                return Err(invalid(format!(
                    "victim model has {} agents and {} actions; scenario needs {} and {actions}",
                    m.n_agents(),
                    m.n_actions(),
                    scenario.num_victims
                )));
            }
        }
        Ok(Self {
            scenario,
            victim,
            gamma,
        })
    }

    pub fn traitor_indices(&self) -> std::ops::Range<usize> {
        self.scenario.traitor_indices()
    }

    pub fn num_traitors(&self) -> usize {
        self.scenario.num_traitors
    }

    pub fn traitor_space(&self) -> ActionSpace {
        ActionSpace::for_team(&self.scenario, Team::Traitor)
    }

    pub fn traitor_inputs(&self, state: &WorldState) -> Result<TeamInputs> {
        team_inputs(&self.scenario, state, Team::Traitor, TRAITOR_FEATURES)
    }

    /// Actions of every alive victim; dead victims get none.
    pub fn victim_actions<R: Rng>(
        &self,
        state: &WorldState,
        rng: &mut R,
    ) -> Result<Vec<(usize, AgentAction)>> {
        let cfg = &self.scenario;
        match &self.victim {
            VictimPolicy::Greedy(model) => {
                let inputs = team_inputs(cfg, state, Team::Victim, VICTIM_FEATURES)?;
                greedy_team_actions(cfg, model, &inputs, Team::Victim)
            }
            VictimPolicy::Sampled { model, eps } => {
                let inputs = team_inputs(cfg, state, Team::Victim, VICTIM_FEATURES)?;
                let space = ActionSpace::for_team(cfg, Team::Victim);
                let mut out = Vec::new();
                for (k, &u) in inputs.units.iter().enumerate() {
                    if inputs.alive[k] {
                        let q = model.q_values(&inputs.features[k], k)?;
                        let id = epsilon_greedy(&q, &inputs.legal[k], *eps, rng)?;
                        out.push((u, space.action(id).unwrap()));
                    }
                }
                Ok(out)
            }
            VictimPolicy::Uniform => {
                let mut out = Vec::new();
                for u in cfg.victim_indices().filter(|&u| state.units[u].alive) {
                    let legal = legal_actions(cfg, state, u)?;
                    out.push((u, legal[rng.random_range(0..legal.len())]));
                }
                Ok(out)
            }
            VictimPolicy::Noop => Ok(cfg
                .victim_indices()
                .filter(|&u| state.units[u].alive)
                .map(|u| (u, AgentAction::Noop))
                .collect()),
        }
    }
}

/// One step of the traitor process. `r_t == -r_v` always.
#[derive(Clone, Debug, PartialEq)]
pub struct TraitorTransition {
    pub state: WorldState,
    pub next_state: WorldState,
    /// Global state vectors of `state` and `next_state`.
    pub s: Vec<f64>,
    pub s_next: Vec<f64>,
    /// One entry per traitor; `None` for traitors that were dead.
    pub traitor_actions: Vec<Option<AgentAction>>,
    /// Executed action of every unit.
    pub joint: JointAction,
    pub r_v: f64,
    pub r_t: f64,
    pub done: bool,
    pub won: bool,
    /// Timestep of `state`.
    pub t: u32,
}

/// Combines frozen victim actions, the given traitor actions and the
/// scripted enemies into one environment step. Traitor moves into walls or
/// occupied cells are accepted and leave the traitor in place, as in
/// [`step`].
pub fn tmdp_step<R: Rng>(
    spec: &TmdpSpec,
    state: &WorldState,
    traitor_actions: &[Option<AgentAction>],
    rng: &mut R,
) -> Result<TraitorTransition> {
    let cfg = &spec.scenario;
    if traitor_actions.len() != cfg.num_traitors {
        return Err(invalid(format!(
            "expected {} traitor actions, got {}",
            cfg.num_traitors,
            traitor_actions.len()
        )));
    }
    let mut assign = scripted_enemy_policy(cfg, state);
    assign.extend(spec.victim_actions(state, rng)?);
    for (k, (u, a)) in spec.traitor_indices().zip(traitor_actions).enumerate() {
        match (state.units[u].alive, a) {
            (true, Some(AgentAction::Attack(_))) => {
                return Err(invalid(format!("traitor {k} cannot attack")));
            }
            (true, Some(a)) => assign.push((u, *a)),
            (true, None) => return Err(invalid(format!("missing action for alive traitor {k}"))),
            (false, Some(_)) => return Err(invalid(format!("action given for dead traitor {k}"))),
            (false, None) => {}
        }
    }
    let joint = joint_action(state, &assign);
    let out = step(cfg, state, &joint)?;
    Ok(TraitorTransition {
        joint,
        s: global_state(cfg, state),
        s_next: global_state(cfg, &out.next_state),
        state: state.clone(),
        next_state: out.next_state,
        traitor_actions: traitor_actions.to_vec(),
        r_v: out.reward,
        r_t: -out.reward,
        done: out.done,
        won: out.won,
        t: state.t,
    })
}

/// A traitor controller used for rollouts.
pub trait TraitorPolicy {
    fn act(
        &mut self,
        spec: &TmdpSpec,
        state: &WorldState,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Option<AgentAction>>>;
}

/// Traitors stand still.
#[derive(Clone, Copy, Debug, Default)]
pub struct StopTraitors;

/// Uniform over each traitor's legal actions.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomTraitors;

/// Greedy with respect to a traitor value function over global-state inputs.
#[derive(Clone, Debug)]
pub struct GreedyTraitors(pub QModel);

fn alive_mask<'a>(
    spec: &TmdpSpec,
    state: &'a WorldState,
) -> impl Iterator<Item = (usize, bool)> + 'a {
    spec.traitor_indices()
        .map(move |u| (u, state.units[u].alive))
}

impl TraitorPolicy for StopTraitors {
    fn act(
        &mut self,
        spec: &TmdpSpec,
        state: &WorldState,
        _: &mut ChaCha8Rng,
    ) -> Result<Vec<Option<AgentAction>>> {
        Ok(alive_mask(spec, state)
            .map(|(_, a)| a.then_some(AgentAction::Noop))
            .collect())
    }
}

impl TraitorPolicy for RandomTraitors {
    fn act(
        &mut self,
        spec: &TmdpSpec,
        state: &WorldState,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Option<AgentAction>>> {
        alive_mask(spec, state)
            .map(|(u, alive)| {
                if !alive {
                    return Ok(None);
                }
                let legal = legal_actions(&spec.scenario, state, u)?;
                Ok(Some(legal[rng.random_range(0..legal.len())]))
            })
            .collect()
    }
}

impl TraitorPolicy for GreedyTraitors {
    fn act(
        &mut self,
        spec: &TmdpSpec,
        state: &WorldState,
        _: &mut ChaCha8Rng,
    ) -> Result<Vec<Option<AgentAction>>> {
        let inputs = spec.traitor_inputs(state)?;
        let chosen = greedy_team_actions(&spec.scenario, &self.0, &inputs, Team::Traitor)?;
        let mut out = vec![None; spec.num_traitors()];
        for (u, a) in chosen {
            out[u - spec.traitor_indices().start] = Some(a);
        }
        Ok(out)
    }
}

/// Monte-Carlo estimate of the discounted traitor return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveEstimate {
    pub mean: f64,
    /// Standard error of the mean (0 for a single episode).
    pub std_err: f64,
    pub episodes: u64,
}

/// Mean over `episodes` rollouts of `Σ_n γ^n r_T,n`. Episode `k` resets with
/// a seed derived from `(seed, k)`.
pub fn traitor_objective_estimate(
    spec: &TmdpSpec,
    policy: &mut dyn TraitorPolicy,
    episodes: u64,
    seed: u64,
) -> Result<ObjectiveEstimate> {
    if episodes == 0 {
        return Err(invalid("objective estimate needs at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0b7e));
    let mut returns = Vec::with_capacity(episodes as usize);
    for k in 0..episodes {
        let mut s = reset(&spec.scenario, mix_seed(seed, k))?;
        let mut g = 0.0;
        let mut disc = 1.0;
        loop {
            let a = policy.act(spec, &s, &mut rng)?;
            let tr = tmdp_step(spec, &s, &a, &mut rng)?;
            g += disc * tr.r_t;
            disc *= spec.gamma;
            s = tr.next_state;
            if tr.done {
                break;
            }
        }
        returns.push(g);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_err = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(ObjectiveEstimate {
        mean,
        std_err,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SpawnLayout;
    use crate::learners::{AgentNet, TabularLearner};
    use std::collections::HashMap;

    fn line(cells: &[(i32, i32)], n_v: usize, n_t: usize, n_e: usize) -> ScenarioConfig {
        ScenarioConfig {
            grid_width: 4,
            grid_height: 2,
            num_victims: n_v,
            num_traitors: n_t,
            num_enemies: n_e,
            max_health: 3,
            max_steps: 3,
            win_bonus: 20.0,
            layout: SpawnLayout::Explicit(cells.to_vec()),
            ..ScenarioConfig::default()
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn greedy_victims_are_deterministic_and_skip_the_dead() {
        let cfg = line(&[(0, 0), (1, 0), (0, 1), (3, 1)], 2, 1, 1);
        let net = AgentNet::new(
            crate::learners::feature_len(&cfg, VICTIM_FEATURES),
            2,
            6,
            &[4],
            3,
        )
        .unwrap();
        let spec = TmdpSpec::new(cfg.clone(), VictimPolicy::Greedy(QModel::Net(net)), 0.9).unwrap();
        let mut s = reset(&cfg, 0).unwrap();
        let a = spec.victim_actions(&s, &mut rng()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(
            a,
            spec.victim_actions(&s, &mut ChaCha8Rng::seed_from_u64(99))
                .unwrap()
        );
        s.units[1].alive = false;
        s.units[1].health = 0;
        let a = spec.victim_actions(&s, &mut rng()).unwrap();
        assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn mismatched_victim_model_is_rejected() {
        let cfg = line(&[(0, 0), (1, 0), (0, 1), (3, 1)], 2, 1, 1);
        let model = QModel::Table(TabularLearner::new(3, 6));
        assert!(TmdpSpec::new(cfg.clone(), VictimPolicy::Greedy(model), 0.9).is_err());
        assert!(TmdpSpec::new(cfg, VictimPolicy::Uniform, 1.0).is_err());
    }

    #[test]
    fn uniform_victim_frequencies_within_three_sigma() {
        // victim at (1,0) next to an enemy at (2,0): noop, three moves
        // (north is out of bounds) and one attack are legal
        let cfg = line(&[(1, 0), (0, 1), (2, 0)], 1, 1, 1);
        let spec = TmdpSpec::new(cfg.clone(), VictimPolicy::Uniform, 0.9).unwrap();
        let s = reset(&cfg, 0).unwrap();
        let legal = legal_actions(&cfg, &s, 0).unwrap();
        assert_eq!(legal.len(), 5);
        let n = 10_000;
        let mut counts: HashMap<AgentAction, usize> = HashMap::new();
        let mut r = rng();
        for _ in 0..n {
            let a = spec.victim_actions(&s, &mut r).unwrap();
            *counts.entry(a[0].1).or_default() += 1;
        }
        let p = 1.0 / legal.len() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for a in &legal {
            let c = counts.get(a).copied().unwrap_or(0) as f64;
            assert!((c - n as f64 * p).abs() <= 3.0 * sigma, "{a:?}: {c}");
        }
        assert_eq!(counts.len(), legal.len());
    }

    #[test]
    fn traitor_reward_is_negated_victim_reward() {
        // victim and enemy adjacent; victim forced to attack via a table
        let cfg = line(&[(1, 0), (0, 1), (2, 0)], 1, 1, 1);
        let mut table = TabularLearner::new(1, 6);
        let s = reset(&cfg, 0).unwrap();
        let f = team_inputs(&cfg, &s, Team::Victim, VICTIM_FEATURES).unwrap();
        table.set_value(0, &f.features[0], 5, 1.0);
        let spec =
            TmdpSpec::new(cfg.clone(), VictimPolicy::Greedy(QModel::Table(table)), 0.9).unwrap();
        let tr = tmdp_step(&spec, &s, &[Some(AgentAction::Noop)], &mut rng()).unwrap();
        assert_eq!(tr.r_v, 1.0);
        assert_eq!(tr.r_t, -1.0);
        assert_eq!(tr.r_t + tr.r_v, 0.0);
        assert!(tmdp_step(&spec, &s, &[Some(AgentAction::Attack(0))], &mut rng()).is_err());
        assert!(tmdp_step(&spec, &s, &[None], &mut rng()).is_err());
        assert!(tmdp_step(&spec, &s, &[], &mut rng()).is_err());
    }

    #[test]
    fn winning_step_pays_damage_and_bonus() {
        // two victims adjacent to an enemy with 2 health both attack: 2 damage
        // kills it and the win bonus of 20 is paid
        let mut cfg = line(&[(1, 0), (2, 1), (0, 1), (2, 0)], 2, 1, 1);
        cfg.max_health = 2;
        let s = reset(&cfg, 0).unwrap();
        let f = team_inputs(&cfg, &s, Team::Victim, VICTIM_FEATURES).unwrap();
        let mut table = TabularLearner::new(2, 6);
        table.set_value(0, &f.features[0], 5, 1.0);
        table.set_value(1, &f.features[1], 5, 1.0);
        let spec =
            TmdpSpec::new(cfg.clone(), VictimPolicy::Greedy(QModel::Table(table)), 0.9).unwrap();
        let tr = tmdp_step(&spec, &s, &[Some(AgentAction::Noop)], &mut rng()).unwrap();
        assert!(tr.done && tr.won);
        assert_eq!(tr.r_t, -22.0);
    }

    #[test]
    fn dead_traitors_do_not_stop_the_episode() {
        let cfg = line(&[(1, 0), (0, 1), (2, 0)], 1, 1, 1);
        let spec = TmdpSpec::new(cfg.clone(), VictimPolicy::Noop, 0.9).unwrap();
        let mut s = reset(&cfg, 0).unwrap();
        s.units[1].alive = false;
        s.units[1].health = 0;
        let tr = tmdp_step(&spec, &s, &[None], &mut rng()).unwrap();
        assert_eq!(tr.r_t, -tr.r_v);
        assert!(tmdp_step(&spec, &s, &[Some(AgentAction::Noop)], &mut rng()).is_err());
    }

    #[test]
    fn horizon_one_and_zero_reward_objectives() {
        let cfg = line(&[(1, 0), (0, 1), (2, 0)], 1, 1, 1);
        let mut table = TabularLearner::new(1, 6);
        let s = reset(&cfg, 0).unwrap();
        let f = team_inputs(&cfg, &s, Team::Victim, VICTIM_FEATURES).unwrap();
        table.set_value(0, &f.features[0], 5, 1.0);
        let mut g0 =
            TmdpSpec::new(cfg.clone(), VictimPolicy::Greedy(QModel::Table(table)), 0.0).unwrap();
        g0.scenario.max_steps = 1;
        let est = traitor_objective_estimate(&g0, &mut StopTraitors, 3, 1).unwrap();
        assert_eq!(est.mean, -1.0);

        // victims idle and enemies hold far away: nothing ever happens
        let mut quiet = line(&[(0, 0), (1, 1), (3, 0)], 1, 1, 1);
        quiet.enemy_behavior = crate::env::EnemyBehavior::Hold;
        let spec = TmdpSpec::new(quiet, VictimPolicy::Noop, 0.9).unwrap();
        let est = traitor_objective_estimate(&spec, &mut RandomTraitors, 20, 2).unwrap();
        assert_eq!(est.mean, 0.0);
        assert!(traitor_objective_estimate(&spec, &mut RandomTraitors, 0, 2).is_err());
    }

    /// Exact expected discounted return of uniform victims and uniform
    /// traitors by recursion over all action combinations.
    fn exact_value(spec: &TmdpSpec, s: &WorldState, memo: &mut HashMap<WorldState, f64>) -> f64 {
        if let Some(v) = memo.get(s) {
            return *v;
        }
        let cfg = &spec.scenario;
        let mut branches: Vec<(f64, Vec<(usize, AgentAction)>)> =
            vec![(1.0, scripted_enemy_policy(cfg, s))];
        for u in cfg.victim_indices().chain(cfg.traitor_indices()) {
            if !s.units[u].alive {
                continue;
            }
            let legal = legal_actions(cfg, s, u).unwrap();
            let p = 1.0 / legal.len() as f64;
            branches = branches
                .into_iter()
                .flat_map(|(q, assign)| {
                    legal.iter().map(move |a| {
                        let mut next = assign.clone();
                        next.push((u, *a));
                        (q * p, next)
                    })
                })
                .collect();
        }
        let mut v = 0.0;
        for (p, assign) in branches {
            let out = step(cfg, s, &joint_action(s, &assign)).unwrap();
            let cont = if out.done {
                0.0
            } else {
                exact_value(spec, &out.next_state, memo)
            };
            v += p * (-out.reward + spec.gamma * cont);
        }
        memo.insert(s.clone(), v);
        v
    }

    #[test]
    fn monte_carlo_matches_exhaustive_expectation() {
        let mut cfg = line(&[(1, 0), (0, 0), (2, 0)], 1, 1, 1);
        cfg.max_health = 2;
        cfg.max_steps = 4;
        let spec = TmdpSpec::new(cfg.clone(), VictimPolicy::Uniform, 0.9).unwrap();
        let exact = exact_value(&spec, &reset(&cfg, 0).unwrap(), &mut HashMap::new());
        let est = traitor_objective_estimate(&spec, &mut RandomTraitors, 4000, 5).unwrap();
        assert!(exact < 0.0);
        assert!(
            (est.mean - exact).abs() <= 3.0 * est.std_err,
            "mc {} ± {} vs exact {exact}",
            est.mean,
            est.std_err
        );
    }

    #[test]
    fn stopped_traitors_match_standing_units() {
        let cfg = line(&[(1, 0), (0, 1), (3, 0)], 1, 1, 1);
        let spec = TmdpSpec::new(cfg.clone(), VictimPolicy::Uniform, 0.9).unwrap();
        let mut r1 = rng();
        let mut r2 = rng();
        let mut s = reset(&cfg, 0).unwrap();
        let mut plain = s.clone();
        loop {
            let a = StopTraitors.act(&spec, &s, &mut r1).unwrap();
            let tr = tmdp_step(&spec, &s, &a, &mut r1).unwrap();
            // same victim draws, traitor held by an explicit noop
            let mut assign = scripted_enemy_policy(&cfg, &plain);
            assign.extend(spec.victim_actions(&plain, &mut r2).unwrap());
            let out = step(&cfg, &plain, &joint_action(&plain, &assign)).unwrap();
            assert_eq!(out.next_state, tr.next_state);
            s = tr.next_state;
            plain = out.next_state;
            if tr.done {
                break;
            }
        }
    }
}

//! Exact finite-MDP tools: value iteration, shaped MDPs, invariance checks and
//! enumeration of tiny traitor processes.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::env::{
    legal_actions, reset, scripted_enemy_policy, step, AgentAction, WorldState, NUM_MOVE_ACTIONS,
};
use crate::error::{invalid, parse_err, Error, Result};
use crate::learners::{argmax_legal, team_inputs, QModel, VICTIM_FEATURES};
use crate::textio::{fmt_f64, LineCursor};
use crate::tmdp::{TmdpSpec, VictimPolicy};

/// Tie band for greedy action sets.
pub const TIE_TOL: f64 = 1e-9;

/// Largest state count `tmdp_to_mdp` will enumerate.
pub const MAX_ENUMERATED_STATES: usize = 50_000;

/// Sparse transition row: `(next state, probability)` pairs.
pub type Row = Vec<(usize, f64)>;

/// Explicit tabular MDP. Terminal states are absorbing with reward 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transitions[s][a]`.
    pub transitions: Vec<Vec<Row>>,
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
    pub horizon: Option<u32>,
}

impl FiniteMdp {
    /// An MDP whose terminal states already self-loop with reward 0.
    pub fn new(
        transitions: Vec<Vec<Row>>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let mdp = Self {
            num_states: transitions.len(),
            num_actions: transitions.first().map_or(0, |r| r.len()),
            transitions,
            rewards,
            gamma,
            terminal,
            horizon: None,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn absorbing_row(s: usize) -> Row {
        vec![(s, 1.0)]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_states;
        if n == 0 || self.num_actions == 0 {
            return Err(invalid("an MDP needs at least one state and one action"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.transitions.len() != n || self.rewards.len() != n || self.terminal.len() != n {
            return Err(invalid(
                "transition, reward and terminal tables disagree on the state count",
            ));
        }
        for s in 0..n {
            if self.transitions[s].len() != self.num_actions
                || self.rewards[s].len() != self.num_actions
            {
                return Err(invalid(format!(
                    "state {s} has the wrong number of actions"
                )));
            }
            for (a, row) in self.transitions[s].iter().enumerate() {
                let mut sum = 0.0;
                for &(t, p) in row {
                    if t >= n || !(0.0..=1.0 + 1e-12).contains(&p) {
                        return Err(invalid(format!(
                            "bad transition entry at state {s} action {a}"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(invalid(format!("P[{s}][{a}] sums to {sum}")));
                }
                if self.terminal[s] && (row.as_slice() != [(s, 1.0)] || self.rewards[s][a] != 0.0) {
                    return Err(invalid(format!(
                        "terminal state {s} must self-loop with reward 0"
                    )));
                }
            }
        }
        Ok(())
    }

    fn backup(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        if self.terminal[s] {
            return 0.0;
        }
        self.rewards[s][a]
            + self.gamma
                * self.transitions[s][a]
                    .iter()
                    .map(|&(t, p)| p * v[t])
                    .sum::<f64>()
    }

    /// Text form: `FMDP v1`, `states:`, `actions:`, `gamma:`, `terminal:`
    /// lines, then for every non-terminal state and action a `p: s a t:prob
    /// ...` line and an `r: s a value` line. Terminal rows are implied.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "FMDP v1\nstates: {}\nactions: {}\ngamma: {}\n",
            self.num_states,
            self.num_actions,
            fmt_f64(self.gamma)
        );
        let terms: Vec<String> = (0..self.num_states)
            .filter(|&s| self.terminal[s])
            .map(|s| s.to_string())
            .collect();
        out.push_str(&format!("terminal: {}\n", terms.join(" ")).replace(" \n", "\n"));
        if let Some(k) = self.horizon {
            out.push_str(&format!("horizon: {k}\n"));
        }
        for s in (0..self.num_states).filter(|&s| !self.terminal[s]) {
            for a in 0..self.num_actions {
                let row: Vec<String> = self.transitions[s][a]
                    .iter()
                    .map(|(t, p)| format!("{t}:{}", fmt_f64(*p)))
                    .collect();
                out.push_str(&format!("p: {s} {a} {}\n", row.join(" ")));
                out.push_str(&format!("r: {s} {a} {}\n", fmt_f64(self.rewards[s][a])));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cur = LineCursor::new(text);
        let (n, h) = cur.next_line()?;
        if h != "FMDP v1" {
            return Err(parse_err(n, "expected `FMDP v1`"));
        }
        let num = |cur: &mut LineCursor<'_>, key: &str| -> Result<(usize, String)> {
            let (n, v) = cur.expect_prefixed(key)?;
            Ok((n, v.to_string()))
        };
        let (ln, v) = num(&mut cur, "states")?;
        let states: usize = v.parse().map_err(|_| parse_err(ln, "bad state count"))?;
        let (ln, v) = num(&mut cur, "actions")?;
        let actions: usize = v.parse().map_err(|_| parse_err(ln, "bad action count"))?;
        let (ln, v) = num(&mut cur, "gamma")?;
        let gamma: f64 = v.parse().map_err(|_| parse_err(ln, "bad gamma"))?;
        let (ln, v) = num(&mut cur, "terminal")?;
        let mut terminal = vec![false; states];
        for tok in v.split_whitespace() {
            let s: usize = tok
                .parse()
                .map_err(|_| parse_err(ln, "bad terminal index"))?;
            *terminal
                .get_mut(s)
                .ok_or_else(|| parse_err(ln, "terminal index out of range"))? = true;
        }
        let mut horizon = None;
        if cur.peek().is_some_and(|(_, l)| l.starts_with("horizon:")) {
            let (ln, v) = num(&mut cur, "horizon")?;
            horizon = Some(v.parse().map_err(|_| parse_err(ln, "bad horizon"))?);
        }
        let mut transitions: Vec<Vec<Option<Row>>> = vec![vec![None; actions]; states];
        let mut rewards: Vec<Vec<Option<f64>>> = vec![vec![None; actions]; states];
        while !cur.is_empty() {
            let (ln, line) = cur.next_line()?;
            let (key, rest) = line
                .split_once(':')
                .ok_or_else(|| parse_err(ln, "expected `p:` or `r:`"))?;
            let mut toks = rest.split_whitespace();
            let mut index = |what: &str, bound: usize| -> Result<usize> {
                let i: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err(ln, format!("missing {what}")))?;
                if i >= bound {
                    return Err(parse_err(ln, format!("{what} out of range")));
                }
                Ok(i)
            };
            let s = index("state", states)?;
            let a = index("action", actions)?;
            if terminal[s] {
                return Err(parse_err(
                    ln,
                    "terminal rows are implied and may not be given",
                ));
            }
            match key {
                "p" => {
                    let row: Result<Row> = toks
                        .map(|t| {
                            let (x, p) = t
                                .split_once(':')
                                .ok_or_else(|| parse_err(ln, "expected `state:prob`"))?;
                            Ok((
                                x.parse().map_err(|_| parse_err(ln, "bad next state"))?,
                                p.parse().map_err(|_| parse_err(ln, "bad probability"))?,
                            ))
                        })
                        .collect();
                    transitions[s][a] = Some(row?);
                }
                "r" => {
                    let v: f64 = toks
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err(ln, "bad reward"))?;
                    rewards[s][a] = Some(v);
                }
                other => return Err(parse_err(ln, format!("unknown row kind `{other}`"))),
            }
        }
        let mut p = Vec::with_capacity(states);
        let mut r = Vec::with_capacity(states);
        for s in 0..states {
            if terminal[s] {
                p.push(vec![Self::absorbing_row(s); actions]);
                r.push(vec![0.0; actions]);
                continue;
            }
            let mut prow = Vec::with_capacity(actions);
            let mut rrow = Vec::with_capacity(actions);
            for a in 0..actions {
                match (transitions[s][a].take(), rewards[s][a]) {
                    (Some(t), Some(v)) => {
                        prow.push(t);
                        rrow.push(v);
                    }
                    _ => {
                        return Err(invalid(format!(
                            "state {s} action {a} lacks a `p:` or `r:` row"
                        )))
                    }
                }
            }
            p.push(prow);
            r.push(rrow);
        }
        let mut mdp = Self::new(p, r, gamma, terminal)?;
        mdp.horizon = horizon;
        Ok(mdp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Actions within [`TIE_TOL`] of the best, per state.
    pub greedy: Vec<Vec<usize>>,
    pub iterations: usize,
}

fn greedy_sets(q: &[Vec<f64>]) -> Vec<Vec<usize>> {
    q.iter()
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..row.len())
                .filter(|&a| row[a] >= best - TIE_TOL)
                .collect()
        })
        .collect()
}

/// Bellman optimality backups until the sup-norm change of `V` drops below
/// `tol`. The returned `Q` is one backup of the final `V`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<Solution> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    mdp.validate()?;
    let mut v = vec![0.0; mdp.num_states];
    let mut q = vec![vec![0.0; mdp.num_actions]; mdp.num_states];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta: f64 = 0.0;
        let mut next = vec![0.0; mdp.num_states];
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                q[s][a] = mdp.backup(s, a, &v);
            }
            next[s] = q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((next[s] - v[s]).abs());
        }
        v = next;
        if delta < tol {
            break;
        }
    }
    Ok(Solution {
        greedy: greedy_sets(&q),
        q,
        v,
        iterations,
    })
}

/// Largest `|Q(s,a) − (R + γ P max Q)(s,a)|`.
pub fn bellman_residual(mdp: &FiniteMdp, q: &[Vec<f64>]) -> f64 {
    let v: Vec<f64> = q
        .iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut worst: f64 = 0.0;
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            worst = worst.max((mdp.backup(s, a, &v) - q[s][a]).abs());
        }
    }
    worst
}

/// `R'(s,a) = R(s,a) + γ Σ P(s'|s,a) Φ̃(s') − Φ(s)` on non-terminal rows, with
/// `Φ̃(s') = 0` for terminal `s'` when `terminal_zero`, else `Φ(s')`.
/// Terminal rows stay absorbing with reward 0.
pub fn shape_mdp(mdp: &FiniteMdp, phi: &[f64], terminal_zero: bool) -> Result<FiniteMdp> {
    if phi.len() != mdp.num_states {
        return Err(invalid(format!(
            "potential has {} entries for {} states",
            phi.len(),
            mdp.num_states
        )));
    }
    let tilde: Vec<f64> = (0..mdp.num_states)
        .map(|s| {
            if terminal_zero && mdp.terminal[s] {
                0.0
            } else {
                phi[s]
            }
        })
        .collect();
    let mut out = mdp.clone();
    for s in (0..mdp.num_states).filter(|&s| !mdp.terminal[s]) {
        for a in 0..mdp.num_actions {
            let next: f64 = mdp.transitions[s][a]
                .iter()
                .map(|&(t, p)| p * tilde[t])
                .sum();
            out.rewards[s][a] = mdp.rewards[s][a] + mdp.gamma * next - phi[s];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    /// `max |Q'(s,a) − (Q(s,a) − Φ(s))|` over non-terminal states; terminal
    /// states are never shaped, so `Q' = Q = 0` there.
    pub q_residual_max: f64,
    pub greedy_sets_equal: bool,
    pub unshaped: Solution,
    pub shaped: Solution,
}

pub fn verify_invariance(
    mdp: &FiniteMdp,
    phi: &[f64],
    terminal_zero: bool,
    tol: f64,
) -> Result<InvarianceReport> {
    let shaped_mdp = shape_mdp(mdp, phi, terminal_zero)?;
    let unshaped = value_iteration(mdp, tol)?;
    let shaped = value_iteration(&shaped_mdp, tol)?;
    let mut worst: f64 = 0.0;
    for s in (0..mdp.num_states).filter(|&s| !mdp.terminal[s]) {
        for a in 0..mdp.num_actions {
            worst = worst.max((shaped.q[s][a] - (unshaped.q[s][a] - phi[s])).abs());
        }
    }
    Ok(InvarianceReport {
        q_residual_max: worst,
        greedy_sets_equal: unshaped.greedy == shaped.greedy,
        unshaped,
        shaped,
    })
}

/// Random MDP: Dirichlet(1) transition rows (normalized unit exponentials),
/// rewards uniform in [−1, 1], γ uniform in [0.5, 0.99], and
/// `round(0.1·n)` terminal states chosen uniformly.
pub fn random_mdp<R: Rng>(rng: &mut R, num_states: usize, num_actions: usize) -> Result<FiniteMdp> {
    if num_states == 0 || num_actions == 0 {
        return Err(invalid("random MDP needs states and actions"));
    }
    let gamma = rng.random_range(0.5..0.99);
    let mut order: Vec<usize> = (0..num_states).collect();
    order.shuffle(rng);
    let n_term = (num_states as f64 * 0.1).round() as usize;
    let mut terminal = vec![false; num_states];
    for &s in &order[..n_term] {
        terminal[s] = true;
    }
    let mut p = Vec::with_capacity(num_states);
    let mut r = Vec::with_capacity(num_states);
    for s in 0..num_states {
        if terminal[s] {
            p.push(vec![FiniteMdp::absorbing_row(s); num_actions]);
            r.push(vec![0.0; num_actions]);
            continue;
        }
        let mut prow = Vec::with_capacity(num_actions);
        let mut rrow = Vec::with_capacity(num_actions);
        for _ in 0..num_actions {
            let w: Vec<f64> = (0..num_states).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = w.iter().sum();
            let mut row: Row = w.iter().enumerate().map(|(t, x)| (t, x / total)).collect();
            // fold rounding error into the largest entry so the row sums to 1
            let sum: f64 = row.iter().map(|e| e.1).sum();
            let big = (0..row.len())
                .max_by(|&i, &j| row[i].1.total_cmp(&row[j].1))
                .unwrap();
            row[big].1 += 1.0 - sum;
            prow.push(row);
            rrow.push(rng.random_range(-1.0..=1.0));
        }
        p.push(prow);
        r.push(rrow);
    }
    FiniteMdp::new(p, r, gamma, terminal)
}

/// Three-state episodic MDP where a large potential on one terminal state
/// flips the greedy action unless terminal potentials are zeroed. From state
/// 0, action 0 reaches terminal state 1 with reward 1 and action 1 reaches
/// terminal state 2 with reward 0; `Φ = [0, 0, 10]`, `γ = 0.9`.
pub fn terminal_counterexample() -> (FiniteMdp, Vec<f64>) {
    let p = vec![
        vec![vec![(1, 1.0)], vec![(2, 1.0)]],
        vec![FiniteMdp::absorbing_row(1); 2],
        vec![FiniteMdp::absorbing_row(2); 2],
    ];
    let r = vec![vec![1.0, 0.0], vec![0.0; 2], vec![0.0; 2]];
    let mdp = FiniteMdp::new(p, r, 0.9, vec![false, true, true]).expect("well-formed");
    (mdp, vec![0.0, 0.0, 10.0])
}

/// Traitor-side MDP of a tiny scenario with the enumerated world states.
#[derive(Clone, Debug)]
pub struct EnumeratedTmdp {
    pub mdp: FiniteMdp,
    /// `(world state, terminal)` of every MDP state.
    pub states: Vec<(WorldState, bool)>,
    pub index: HashMap<(WorldState, bool), usize>,
    pub initial: usize,
}

impl EnumeratedTmdp {
    /// Index of a non-terminal world state.
    pub fn state_index(&self, s: &WorldState) -> Option<usize> {
        self.index.get(&(s.clone(), false)).copied()
    }
}

/// Traitor joint action number `a` as one move per traitor, in base 5 with
/// the first traitor as the least significant digit. Dead traitors get `None`.
pub fn decode_joint_action(
    spec: &TmdpSpec,
    state: &WorldState,
    mut a: usize,
) -> Vec<Option<AgentAction>> {
    spec.traitor_indices()
        .map(|u| {
            let digit = a % NUM_MOVE_ACTIONS;
            a /= NUM_MOVE_ACTIONS;
            state.units[u].alive.then_some(AgentAction::MOVES[digit])
        })
        .collect()
}

pub fn num_joint_actions(spec: &TmdpSpec) -> usize {
    NUM_MOVE_ACTIONS.pow(spec.num_traitors() as u32)
}

/// A victim joint action (unit index, action) and its probability.
type Branch = (f64, Vec<(usize, AgentAction)>);

/// Distribution over victim joint actions under the frozen policy.
fn victim_branches(spec: &TmdpSpec, state: &WorldState) -> Result<Vec<Branch>> {
    let cfg = &spec.scenario;
    let alive: Vec<usize> = cfg
        .victim_indices()
        .filter(|&u| state.units[u].alive)
        .collect();
    let per_unit: Vec<Vec<(f64, AgentAction)>> = match &spec.victim {
        VictimPolicy::Noop => alive
            .iter()
            .map(|_| vec![(1.0, AgentAction::Noop)])
            .collect(),
        VictimPolicy::Uniform => alive
            .iter()
            .map(|&u| {
                let legal = legal_actions(cfg, state, u)?;
                let p = 1.0 / legal.len() as f64;
                Ok(legal.into_iter().map(|a| (p, a)).collect())
            })
            .collect::<Result<_>>()?,
        VictimPolicy::Greedy(model) => greedy_choices(spec, model, state, 0.0)?,
        VictimPolicy::Sampled { model, eps } => greedy_choices(spec, model, state, *eps)?,
    };
    let mut branches = vec![(1.0, Vec::new())];
    for (k, options) in per_unit.iter().enumerate() {
        let unit = alive[k];
        branches = branches
            .into_iter()
            .flat_map(|(p, assign)| {
                options.iter().map(move |&(q, a)| {
                    let mut next = assign.clone();
                    next.push((unit, a));
                    (p * q, next)
                })
            })
            .collect();
    }
    Ok(branches)
}

fn greedy_choices(
    spec: &TmdpSpec,
    model: &QModel,
    state: &WorldState,
    eps: f64,
) -> Result<Vec<Vec<(f64, AgentAction)>>> {
    let cfg = &spec.scenario;
    let inputs = team_inputs(cfg, state, crate::env::Team::Victim, VICTIM_FEATURES)?;
    let space = crate::env::ActionSpace::for_team(cfg, crate::env::Team::Victim);
    let mut out = Vec::new();
    for k in 0..inputs.units.len() {
        if !inputs.alive[k] {
            continue;
        }
        let q = model.q_values(&inputs.features[k], k)?;
        let best =
            argmax_legal(&q, &inputs.legal[k]).ok_or_else(|| invalid("no legal victim action"))?;
        let legal: Vec<usize> = (0..q.len()).filter(|&i| inputs.legal[k][i]).collect();
        let mut options = Vec::new();
        for &i in &legal {
            let p = eps / legal.len() as f64 + if i == best { 1.0 - eps } else { 0.0 };
            if p > 0.0 {
                options.push((p, space.action(i).unwrap()));
            }
        }
        out.push(options);
    }
    Ok(out)
}

/// Enumerates every world state reachable from `reset(scenario, seed)` under
/// all traitor joint moves, with victims and enemies folded into the
/// transition kernel. Rewards are `−r_V`. Every state reached by a
/// terminating step becomes its own absorbing terminal state. Traitor moves
/// into walls leave the traitor in place.
pub fn tmdp_to_mdp(spec: &TmdpSpec, seed: u64, max_states: usize) -> Result<EnumeratedTmdp> {
    let cfg = &spec.scenario;
    let n_actions = num_joint_actions(spec);
    let start = reset(cfg, seed)?;
    let mut states: Vec<(WorldState, bool)> = vec![(start.clone(), false)];
    let mut index: HashMap<(WorldState, bool), usize> = HashMap::new();
    index.insert((start, false), 0);
    let mut rows: Vec<Option<(Vec<Row>, Vec<f64>)>> = vec![None];
    let mut queue = VecDeque::from([0usize]);
    while let Some(si) = queue.pop_front() {
        let s = states[si].0.clone();
        let branches = victim_branches(spec, &s)?;
        let enemies = scripted_enemy_policy(cfg, &s);
        let mut prow = Vec::with_capacity(n_actions);
        let mut rrow = Vec::with_capacity(n_actions);
        for a in 0..n_actions {
            let traitors = decode_joint_action(spec, &s, a);
            let mut dist: HashMap<usize, f64> = HashMap::new();
            let mut reward = 0.0;
            for (p, victims) in &branches {
                let mut assign = enemies.clone();
                assign.extend(victims.iter().copied());
                for (u, t) in spec.traitor_indices().zip(&traitors) {
                    if let Some(t) = t {
                        assign.push((u, *t));
                    }
                }
                let out = step(cfg, &s, &crate::env::joint_action(&s, &assign))?;
                reward += p * -out.reward;
                let key = (out.next_state, out.done);
                let ti = match index.get(&key) {
                    Some(&i) => i,
                    None => {
                        if states.len() >= max_states {
                            return Err(Error::Capacity(format!(
                                "more than {max_states} reachable states"
                            )));
                        }
                        let i = states.len();
                        index.insert(key.clone(), i);
                        if !key.1 {
                            queue.push_back(i);
                        }
                        states.push(key);
                        rows.push(None);
                        i
                    }
                };
                *dist.entry(ti).or_default() += p;
            }
            let mut row: Row = dist.into_iter().collect();
            row.sort_by_key(|e| e.0);
            prow.push(row);
            rrow.push(reward);
        }
        rows[si] = Some((prow, rrow));
    }
    let mut p = Vec::with_capacity(states.len());
    let mut r = Vec::with_capacity(states.len());
    let mut terminal = Vec::with_capacity(states.len());
    for (i, (_, done)) in states.iter().enumerate() {
        terminal.push(*done);
        match rows[i].take() {
            Some((prow, rrow)) => {
                p.push(prow);
                r.push(rrow);
            }
            None => {
                p.push(vec![FiniteMdp::absorbing_row(i); n_actions]);
                r.push(vec![0.0; n_actions]);
            }
        }
    }
    let mut mdp = FiniteMdp::new(p, r, spec.gamma, terminal)?;
    mdp.horizon = Some(cfg.max_steps);
    Ok(EnumeratedTmdp {
        mdp,
        states,
        index,
        initial: 0,
    })
}

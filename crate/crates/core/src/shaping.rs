//! Potential-based reward shaping on traitor transitions.

use std::collections::BTreeMap;

use crate::env::{global_state, ScenarioConfig, WorldState};
use crate::error::{invalid, Result};
use crate::learners::tabular_feature_key;
use crate::rnd::RndModule;
use crate::tmdp::TraitorTransition;

/// Stable id of a world state for tabular potentials: a hash of its global
/// state vector.
pub fn state_id(config: &ScenarioConfig, state: &WorldState) -> u64 {
    tabular_feature_key(&global_state(config, state))
}

/// A potential function over states, optionally indexed by time.
///
/// An `Rnd` handle borrows one snapshot of a module; its time index is the
/// predictor version held by that snapshot, so evaluating the potential at a
/// later time means building a new handle after the predictor moved.
#[derive(Clone, Debug)]
pub enum PotentialHandle<'a> {
    Constant {
        value: f64,
        time_indexed: bool,
    },
    /// Values keyed by state id; missing ids read as 0.
    Tabular {
        values: BTreeMap<u64, f64>,
        time_indexed: bool,
    },
    /// Values keyed by `(state id, t)`; missing keys read as 0.
    TimeTabular(BTreeMap<(u64, u32), f64>),
    Rnd {
        module: &'a RndModule,
        config: &'a ScenarioConfig,
    },
}

impl PotentialHandle<'_> {
    pub fn zero() -> Self {
        PotentialHandle::Constant {
            value: 0.0,
            time_indexed: true,
        }
    }

    pub fn is_time_indexed(&self) -> bool {
        match self {
            PotentialHandle::Constant { time_indexed, .. }
            | PotentialHandle::Tabular { time_indexed, .. } => *time_indexed,
            PotentialHandle::TimeTabular(_) | PotentialHandle::Rnd { .. } => true,
        }
    }

    /// `Φ(s, t)`.
    pub fn eval(&self, config: &ScenarioConfig, state: &WorldState, t: u32) -> Result<f64> {
        match self {
            PotentialHandle::Constant { value, .. } => Ok(*value),
            PotentialHandle::Tabular { values, .. } => {
                Ok(values.get(&state_id(config, state)).copied().unwrap_or(0.0))
            }
            PotentialHandle::TimeTabular(values) => Ok(values
                .get(&(state_id(config, state), t))
                .copied()
                .unwrap_or(0.0)),
            PotentialHandle::Rnd {
                module,
                config: own,
            } => module.novelty(&module.trim(own, state)),
        }
    }
}

/// `F = γΦ(s') − Φ(s)` for a potential that ignores time.
pub fn static_pbrs(
    phi: &PotentialHandle<'_>,
    config: &ScenarioConfig,
    s: &WorldState,
    s_next: &WorldState,
    gamma: f64,
) -> Result<f64> {
    if phi.is_time_indexed() {
        return Err(invalid(
            "static shaping needs a potential without a time index",
        ));
    }
    Ok(gamma * phi.eval(config, s_next, 0)? - phi.eval(config, s, 0)?)
}

/// Potential over `(state id, action id)` pairs.
pub type AdvicePotential = BTreeMap<(u64, usize), f64>;

/// `F = γΦ(s', a') − Φ(s, a)`; every key must be present.
pub fn advice_pbrs(
    phi: &AdvicePotential,
    s: u64,
    a: usize,
    s_next: u64,
    a_next: usize,
    gamma: f64,
) -> Result<f64> {
    let get = |k: (u64, usize)| {
        phi.get(&k).copied().ok_or_else(|| {
            invalid(format!(
                "advice potential has no entry for state {} action {}",
                k.0, k.1
            ))
        })
    };
    Ok(gamma * get((s_next, a_next))? - get((s, a))?)
}

/// Shaping term with the two potentials it was computed from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shaping {
    pub f: f64,
    pub phi_s: f64,
    pub phi_s_next: f64,
}

/// `F = γ·Φ(s', t') − Φ(s, t)` with `Φ(s', t') = 0` when `s'` is terminal.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_pbrs(
    phi: &PotentialHandle<'_>,
    config: &ScenarioConfig,
    s: &WorldState,
    t: u32,
    s_next: &WorldState,
    t_next: u32,
    gamma: f64,
    s_next_terminal: bool,
) -> Result<Shaping> {
    if !phi.is_time_indexed() {
        return Err(invalid("dynamic shaping needs a time-indexed potential"));
    }
    if t_next != t + 1 {
        return Err(invalid(format!(
            "time index must advance by one, got {t} -> {t_next}"
        )));
    }
    let phi_s = phi.eval(config, s, t)?;
    let phi_s_next = if s_next_terminal {
        0.0
    } else {
        phi.eval(config, s_next, t_next)?
    };
    Ok(Shaping {
        f: gamma * phi_s_next - phi_s,
        phi_s,
        phi_s_next,
    })
}

/// A traitor transition with its logged potentials and shaped reward.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapedTransition {
    pub base: TraitorTransition,
    pub phi_s: f64,
    /// Zero whenever `base.done`.
    pub phi_s_next: f64,
    pub f: f64,
    pub r_shaped: f64,
}

/// Builds a shaped transition from potentials that were logged when the
/// states were visited. A terminal transition always gets `phi_s_next = 0`.
pub fn compose(
    base: TraitorTransition,
    phi_s: f64,
    phi_s_next: f64,
    gamma: f64,
) -> ShapedTransition {
    let phi_s_next = if base.done { 0.0 } else { phi_s_next };
    let f = gamma * phi_s_next - phi_s;
    let r_shaped = base.r_t + f;
    ShapedTransition {
        base,
        phi_s,
        phi_s_next,
        f,
        r_shaped,
    }
}

/// Shapes `tr` with both potentials read from the one handle.
pub fn shape(
    tr: TraitorTransition,
    phi: &PotentialHandle<'_>,
    config: &ScenarioConfig,
    gamma: f64,
) -> Result<ShapedTransition> {
    let s = dynamic_pbrs(
        phi,
        config,
        &tr.state,
        tr.t,
        &tr.next_state,
        tr.next_state.t,
        gamma,
        tr.done,
    )?;
    Ok(compose(tr, s.phi_s, s.phi_s_next, gamma))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapedReturn {
    /// `Σ γ^j r_T,j`.
    pub u: f64,
    /// `Σ γ^j r_shaped,j`.
    pub u_f: f64,
    /// `U_F − (U − phi_s of the first transition)`.
    pub residual: f64,
}

/// Discounted unshaped and shaped returns of one complete episode and the
/// telescoping residual.
pub fn shaped_return(episode: &[ShapedTransition], gamma: f64) -> Result<ShapedReturn> {
    let first = episode.first().ok_or_else(|| invalid("empty episode"))?;
    for w in episode.windows(2) {
        if w[1].base.t != w[0].base.t + 1 {
            return Err(invalid(format!(
                "episode is not contiguous: t = {} followed by t = {}",
                w[0].base.t, w[1].base.t
            )));
        }
        if w[0].base.done {
            return Err(invalid("episode continues past a terminal transition"));
        }
    }
    if !episode.last().unwrap().base.done {
        return Err(invalid("episode does not end in a terminal transition"));
    }
    let (mut u, mut u_f, mut disc) = (0.0, 0.0, 1.0);
    for tr in episode {
        u += disc * tr.base.r_t;
        u_f += disc * tr.r_shaped;
        disc *= gamma;
    }
    Ok(ShapedReturn {
        u,
        u_f,
        residual: u_f - (u - first.phi_s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, SpawnLayout};
    use crate::nnet::OptConfig;
    use crate::tmdp::{tmdp_step, RandomTraitors, TmdpSpec, TraitorPolicy, VictimPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ScenarioConfig {
        ScenarioConfig {
            grid_width: 5,
            grid_height: 3,
            num_victims: 2,
            num_traitors: 1,
            num_enemies: 1,
            max_health: 2,
            max_steps: 5,
            layout: SpawnLayout::Explicit(vec![(0, 0), (0, 2), (1, 1), (4, 1)]),
            ..ScenarioConfig::default()
        }
    }

    fn transition(t: u32, r_t: f64, done: bool) -> TraitorTransition {
        let cfg = tiny();
        let mut s = reset(&cfg, 0).unwrap();
        s.t = t;
        let mut n = s.clone();
        n.t = t + 1;
        TraitorTransition {
            joint: Vec::new(),
            s: vec![],
            s_next: vec![],
            state: s,
            next_state: n,
            traitor_actions: vec![],
            r_v: -r_t,
            r_t,
            done,
            won: false,
            t,
        }
    }

    fn states() -> (ScenarioConfig, WorldState, WorldState) {
        let cfg = tiny();
        let s = reset(&cfg, 0).unwrap();
        let mut n = s.clone();
        n.units[2].x = 2;
        n.t = 1;
        (cfg, s, n)
    }

    #[test]
    fn static_examples() {
        let (cfg, s, n) = states();
        let zero = PotentialHandle::Constant {
            value: 0.0,
            time_indexed: false,
        };
        assert_eq!(static_pbrs(&zero, &cfg, &s, &n, 0.9).unwrap(), 0.0);
        let one = PotentialHandle::Constant {
            value: 1.0,
            time_indexed: false,
        };
        assert!((static_pbrs(&one, &cfg, &s, &n, 0.9).unwrap() + 0.1).abs() < 1e-15);
        assert!(static_pbrs(&PotentialHandle::zero(), &cfg, &s, &n, 0.9).is_err());
    }

    #[test]
    fn static_chain_telescopes() {
        // chain s0 -> s1 -> s2 -> terminal with Φ = 3, 2, 1 and Φ(terminal) = 0:
        // F0 = 0.9·2 − 3, F1 = 0.9·1 − 2, F2 = 0 − 1
        // Σ γ^j F_j = −1.2 + 0.9·(−1.1) + 0.81·(−1) = −3 = −Φ(s0)
        let cfg = tiny();
        let s0 = reset(&cfg, 0).unwrap();
        let mut chain = vec![s0.clone()];
        for k in 1..4 {
            let mut s = chain[k - 1].clone();
            s.units[2].x += 1;
            s.t = k as u32;
            chain.push(s);
        }
        let mut values = BTreeMap::new();
        for (s, v) in chain.iter().zip([3.0, 2.0, 1.0, 0.0]) {
            values.insert(state_id(&cfg, s), v);
        }
        let phi = PotentialHandle::Tabular {
            values,
            time_indexed: false,
        };
        let gamma = 0.9;
        let total: f64 = (0..3)
            .map(|j| {
                gamma_pow(gamma, j)
                    * static_pbrs(&phi, &cfg, &chain[j], &chain[j + 1], gamma).unwrap()
            })
            .sum();
        assert!((total + 3.0).abs() < 1e-12, "{total}");
    }

    fn gamma_pow(g: f64, j: usize) -> f64 {
        g.powi(j as i32)
    }

    #[test]
    fn advice_examples() {
        let mut phi = AdvicePotential::new();
        phi.insert((0, 0), 2.0);
        phi.insert((1, 1), 3.0);
        assert_eq!(advice_pbrs(&phi, 0, 0, 1, 1, 0.5).unwrap(), -0.5);
        phi.insert((0, 1), 2.0);
        let mut c = AdvicePotential::new();
        c.insert((0, 0), 4.0);
        c.insert((1, 0), 4.0);
        assert_eq!(advice_pbrs(&c, 0, 0, 1, 0, 1.0).unwrap(), 0.0);
        assert!(advice_pbrs(&phi, 5, 0, 1, 1, 0.5).is_err());
    }

    #[test]
    fn dynamic_terminal_and_frozen_examples() {
        let (cfg, s, n) = states();
        let mut table = BTreeMap::new();
        table.insert((state_id(&cfg, &s), 0), 0.8);
        table.insert((state_id(&cfg, &n), 1), 5.0);
        let phi = PotentialHandle::TimeTabular(table);
        let term = dynamic_pbrs(&phi, &cfg, &s, 0, &n, 1, 0.9, true).unwrap();
        assert_eq!((term.f, term.phi_s, term.phi_s_next), (-0.8, 0.8, 0.0));
        let c = PotentialHandle::Constant {
            value: 2.5,
            time_indexed: true,
        };
        assert_eq!(
            dynamic_pbrs(&c, &cfg, &s, 0, &n, 1, 1.0, false).unwrap().f,
            0.0
        );
        assert!(dynamic_pbrs(&c, &cfg, &s, 0, &n, 2, 1.0, false).is_err());
        let st = PotentialHandle::Constant {
            value: 2.5,
            time_indexed: false,
        };
        assert!(dynamic_pbrs(&st, &cfg, &s, 0, &n, 1, 1.0, false).is_err());
    }

    #[test]
    fn static_and_dynamic_agree_when_time_is_ignored() {
        let (cfg, s, n) = states();
        let mut values = BTreeMap::new();
        values.insert(state_id(&cfg, &s), 1.25);
        values.insert(state_id(&cfg, &n), -0.5);
        let st = PotentialHandle::Tabular {
            values: values.clone(),
            time_indexed: false,
        };
        let dy = PotentialHandle::Tabular {
            values,
            time_indexed: true,
        };
        let a = static_pbrs(&st, &cfg, &s, &n, 0.95).unwrap();
        let b = dynamic_pbrs(&dy, &cfg, &s, 0, &n, 1, 0.95, false)
            .unwrap()
            .f;
        assert_eq!(a, b);
    }

    #[test]
    fn compose_examples() {
        let st = compose(transition(0, -5.0, false), 0.0, 0.3 / 0.9, 0.9);
        assert!((st.r_shaped + 4.7).abs() < 1e-15);
        let c = compose(transition(0, -5.0, false), 2.0, 2.0, 1.0);
        assert_eq!(c.r_shaped, -5.0);
        let t = compose(transition(3, -1.0, true), 0.4, 9.0, 0.9);
        assert_eq!(t.phi_s_next, 0.0);
        assert_eq!(t.f, -0.4);
        assert_eq!(t.r_shaped, t.base.r_t + t.f);
    }

    #[test]
    fn shaped_return_examples_and_guards() {
        let one = compose(transition(0, -2.0, true), 0.5, 0.0, 0.9);
        let r = shaped_return(&[one], 0.9).unwrap();
        assert_eq!((r.u_f, r.u, r.residual), (-2.5, -2.0, 0.0));

        let zero: Vec<_> = (0..3)
            .map(|t| compose(transition(t, -1.0, t == 2), 0.0, 0.0, 0.9))
            .collect();
        let r = shaped_return(&zero, 0.9).unwrap();
        assert_eq!((r.u_f, r.residual), (r.u, 0.0));

        assert!(shaped_return(&[], 0.9).is_err());
        let gap = vec![
            compose(transition(0, 0.0, false), 0.0, 0.0, 0.9),
            compose(transition(2, 0.0, true), 0.0, 0.0, 0.9),
        ];
        assert!(shaped_return(&gap, 0.9).is_err());
        assert!(shaped_return(&zero[..2], 0.9).is_err());
    }

    /// Runs one episode with a drifting predictor: potentials at each step
    /// are read before the update on the current state, and the potential of
    /// the next state after it.
    fn drifting_episode(seed: u64) -> (Vec<ShapedTransition>, f64) {
        let cfg = ScenarioConfig {
            max_health: 10,
            enemy_behavior: crate::env::EnemyBehavior::Hold,
            ..tiny()
        };
        let spec = TmdpSpec::new(cfg.clone(), VictimPolicy::Uniform, 0.9).unwrap();
        let mut module = RndModule::for_scenario(&cfg, false, OptConfig::adam(1e-2), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = reset(&cfg, seed).unwrap();
        let mut phi_s = module.novelty(&module.trim(&cfg, &s)).unwrap();
        let phi0 = phi_s;
        let mut ep = Vec::new();
        loop {
            module.update(&module.trim(&cfg, &s)).unwrap();
            let a = RandomTraitors.act(&spec, &s, &mut rng).unwrap();
            let tr = tmdp_step(&spec, &s, &a, &mut rng).unwrap();
            let next = if tr.done {
                0.0
            } else {
                let handle = PotentialHandle::Rnd {
                    module: &module,
                    config: &cfg,
                };
                handle.eval(&cfg, &tr.next_state, tr.t + 1).unwrap()
            };
            s = tr.next_state.clone();
            let done = tr.done;
            ep.push(compose(tr, phi_s, next, spec.gamma));
            phi_s = next;
            if done {
                break;
            }
        }
        (ep, phi0)
    }

    #[test]
    fn drifting_rnd_potential_telescopes() {
        for seed in 0..5 {
            let (ep, phi0) = drifting_episode(seed);
            assert_eq!(ep.len(), 5);
            let sum_f: f64 = ep
                .iter()
                .enumerate()
                .map(|(j, tr)| gamma_pow(0.9, j) * tr.f)
                .sum();
            assert!((sum_f + phi0).abs() < 1e-12, "{sum_f} vs {phi0}");
            let r = shaped_return(&ep, 0.9).unwrap();
            assert!(r.residual.abs() < 1e-12);
            assert!(ep.last().unwrap().phi_s_next == 0.0);
        }
    }

    #[test]
    fn shape_with_one_snapshot() {
        let cfg = tiny();
        let module = RndModule::for_scenario(&cfg, false, OptConfig::default(), 3).unwrap();
        let phi = PotentialHandle::Rnd {
            module: &module,
            config: &cfg,
        };
        let mut tr = transition(0, -5.0, false);
        tr.next_state.units[0].x = 1;
        let st = shape(tr.clone(), &phi, &cfg, 0.9).unwrap();
        assert_eq!(
            st.phi_s,
            module.novelty(&module.trim(&cfg, &tr.state)).unwrap()
        );
        assert_eq!(
            st.phi_s_next,
            module.novelty(&module.trim(&cfg, &tr.next_state)).unwrap()
        );
        assert_eq!(st.f, 0.9 * st.phi_s_next - st.phi_s);
        tr.done = true;
        assert_eq!(shape(tr, &phi, &cfg, 0.9).unwrap().phi_s_next, 0.0);
    }
}

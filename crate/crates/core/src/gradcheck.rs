//! Central finite-difference checks of every analytic gradient in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::learners::{
    qmix_mix, JointTransition, LearnerConfig, LearnerKind, Mixer, QmixMixer, ValueLearner,
};
use crate::nnet::{mse_and_grad, MlpParams};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn nudge(p: &mut MlpParams, k: usize, delta: f64) {
    let mut i = 0;
    p.for_each_param_mut(|v| {
        if i == k {
            *v += delta;
        }
        i += 1;
    });
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn randomize(p: &mut MlpParams, rng: &mut ChaCha8Rng) {
    p.for_each_param_mut(|v| *v = rng.random_range(-1.0..1.0));
}

/// Worst relative error of `MlpParams::backward` against finite differences
/// of `upstream · forward(x)` over every parameter, for random weights.
pub fn mlp_max_rel_error(dims: &[usize], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParams::init(dims, seed)?;
    randomize(&mut p, &mut rng);
    let x = rand_vec(&mut rng, dims[0]);
    let up = rand_vec(&mut rng, *dims.last().unwrap());
    let analytic: Vec<f64> = p.backward(&x, &up)?.iter().copied().collect();
    let objective = |q: &MlpParams| -> Result<f64> {
        Ok(q.forward(&x)?.iter().zip(&up).map(|(a, b)| a * b).sum())
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = p.clone();
        nudge(&mut plus, k, h);
        let mut minus = p.clone();
        nudge(&mut minus, k, -h);
        let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * h);
        worst = worst.max(rel_error(a, numeric));
    }
    Ok(worst)
}

/// Worst relative error of the MSE gradient.
pub fn mse_max_rel_error(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = rand_vec(&mut rng, n);
    let target = rand_vec(&mut rng, n);
    let (_, g) = mse_and_grad(&pred, &target)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut p = pred.clone();
        p[i] += h;
        let lp = mse_and_grad(&p, &target)?.0;
        p[i] -= 2.0 * h;
        let lm = mse_and_grad(&p, &target)?.0;
        worst = worst.max(rel_error(g[i], (lp - lm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Random transition for a toy learner.
pub fn toy_transition(
    rng: &mut ChaCha8Rng,
    n_agents: usize,
    feat: usize,
    state: usize,
    n_actions: usize,
    done: bool,
) -> JointTransition {
    JointTransition {
        features: (0..n_agents).map(|_| rand_vec(rng, feat)).collect(),
        alive: vec![true; n_agents],
        actions: (0..n_agents)
            .map(|_| rng.random_range(0..n_actions))
            .collect(),
        state: rand_vec(rng, state),
        reward: rng.random_range(-2.0..2.0),
        next_features: (0..n_agents).map(|_| rand_vec(rng, feat)).collect(),
        next_alive: vec![true; n_agents],
        next_legal: vec![vec![true; n_actions]; n_agents],
        next_state: rand_vec(rng, state),
        done,
    }
}

/// Worst relative error of the TD-loss gradient of a VDN or QMIX-lite
/// learner, over the agent network and (for QMIX-lite) every hypernetwork
/// parameter, on a random 2-agent batch.
pub fn value_loss_max_rel_error(kind: LearnerKind, seed: u64) -> Result<f64> {
    let cfg = LearnerConfig {
        kind,
        hidden: vec![6, 5],
        mixer_embed: 4,
        ..LearnerConfig::default()
    };
    let (feat, state, actions) = (3, 5, 3);
    let mut l = ValueLearner::new(&cfg, feat, state, 2, actions, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ead);
    randomize(&mut l.agent.params, &mut rng);
    randomize(&mut l.target_agent.params, &mut rng);
    if let Mixer::QmixLite(m) = &mut l.mixer {
        for p in m.params_mut() {
            randomize(p, &mut rng);
        }
    }
    let batch: Vec<JointTransition> = (0..4)
        .map(|k| toy_transition(&mut rng, 2, feat, state, actions, k == 3))
        .collect();
    let refs: Vec<&JointTransition> = batch.iter().collect();
    let mut lg = l.loss_and_grads(&refs)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let agent: Vec<f64> = lg.agent.iter().copied().collect();
    for (k, &a) in agent.iter().enumerate() {
        let loss = |delta: f64| -> Result<f64> {
            let mut ll = l.clone();
            nudge(&mut ll.agent.params, k, delta);
            Ok(ll.loss_and_grads(&refs)?.loss)
        };
        worst = worst.max(rel_error(a, (loss(h)? - loss(-h)?) / (2.0 * h)));
    }
    if let Some(mg) = lg.mixer.as_mut() {
        let nets: Vec<Vec<f64>> = mg
            .bundles_mut()
            .iter()
            .map(|b| b.iter().copied().collect())
            .collect();
        for (net, grads) in nets.iter().enumerate() {
            for (k, &a) in grads.iter().enumerate() {
                let loss = |delta: f64| -> Result<f64> {
                    let mut ll = l.clone();
                    if let Mixer::QmixLite(m) = &mut ll.mixer {
                        nudge(m.params_mut()[net], k, delta);
                    }
                    Ok(ll.loss_and_grads(&refs)?.loss)
                };
                worst = worst.max(rel_error(a, (loss(h)? - loss(-h)?) / (2.0 * h)));
            }
        }
    }
    Ok(worst)
}

/// Worst relative error of the mixer's backward pass with respect to the
/// agent values.
pub fn mixer_input_max_rel_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = QmixMixer::new(3, 5, 4, seed)?;
    for p in m.params_mut() {
        randomize(p, &mut rng);
    }
    let s = rand_vec(&mut rng, 5);
    let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (_, cache) = m.forward(&q, &s)?;
    let mut g = m.zero_grads();
    let dq = m.backward(&cache, 1.0, &mut g)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let mut a = q.clone();
        a[i] += h;
        let mut b = q.clone();
        b[i] -= h;
        let num = (qmix_mix(&m, &a, &s)? - qmix_mix(&m, &b, &s)?) / (2.0 * h);
        worst = worst.max(rel_error(dq[i], num));
    }
    Ok(worst)
}

/// Smallest finite-difference partial `∂Q_tot/∂Q_i` over `samples` random
/// mixers, states and agent values.
pub fn qmix_min_partial(samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (agents, state) = (4, 6);
    let mut m = QmixMixer::new(agents, state, 8, seed)?;
    let h = 1e-5;
    let mut least = f64::INFINITY;
    for k in 0..samples {
        if k % 50 == 0 {
            for p in m.params_mut() {
                p.for_each_param_mut(|v| *v = rng.random_range(-2.0..2.0));
            }
        }
        let s = rand_vec(&mut rng, state);
        let q: Vec<f64> = (0..agents).map(|_| rng.random_range(-10.0..10.0)).collect();
        for i in 0..agents {
            let mut a = q.clone();
            a[i] += h;
            let mut b = q.clone();
            b[i] -= h;
            least = least.min((qmix_mix(&m, &a, &s)? - qmix_mix(&m, &b, &s)?) / (2.0 * h));
        }
    }
    Ok(least)
}

use rand::Rng;

use super::qmix::{MixerGrads, QmixMixer};
use super::{argmax_legal, AgentNet, JointTransition, LearnerConfig, LearnerKind, ReplayBuffer};
use crate::error::{invalid, Result};
use crate::nnet::{clip_global_norm, opt_step, ForwardCache, GradBundle, OptState};

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    /// `Q_tot = Σ_i Q_i`.
    Vdn,
    QmixLite(QmixMixer),
}

impl Mixer {
    fn mix(&self, q: &[f64], state: &[f64]) -> Result<f64> {
        match self {
            Mixer::Vdn => Ok(q.iter().sum()),
            Mixer::QmixLite(m) => Ok(m.forward(q, state)?.0),
        }
    }
}

/// Loss of a batch and its gradients with respect to the online parameters.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub agent: GradBundle,
    pub mixer: Option<MixerGrads>,
}

/// Centralized-training value learner over a shared agent network with a
/// VDN or QMIX-lite mixer.
#[derive(Clone, Debug)]
pub struct ValueLearner {
    pub agent: AgentNet,
    pub target_agent: AgentNet,
    pub mixer: Mixer,
    pub target_mixer: Mixer,
    agent_opt: OptState,
    mixer_opts: Option<[OptState; 4]>,
    pub gamma: f64,
    pub grad_clip: f64,
    /// Pick next actions with the online network, score them with the target.
    pub double_q: bool,
    pub replay: ReplayBuffer<JointTransition>,
    pub env_steps: u64,
    pub updates: u64,
}

impl ValueLearner {
    pub fn new(
        config: &LearnerConfig,
        feature_dim: usize,
        state_dim: usize,
        n_agents: usize,
        n_actions: usize,
        seed: u64,
    ) -> Result<Self> {
        let agent = AgentNet::new(feature_dim, n_agents, n_actions, &config.hidden, seed)?;
        let (mixer, mixer_opts) = match config.kind {
            LearnerKind::Vdn => (Mixer::Vdn, None),
            LearnerKind::QmixLite => {
                let m = QmixMixer::new(
                    n_agents,
                    state_dim,
                    config.mixer_embed,
                    seed.wrapping_add(1000),
                )?;
                let o = OptState::new(config.opt)?;
                (
                    Mixer::QmixLite(m),
                    Some([o.clone(), o.clone(), o.clone(), o]),
                )
            }
            LearnerKind::Tabular => return Err(invalid("tabular learners are not value learners")),
        };
        Ok(Self {
            target_agent: agent.clone(),
            agent,
            target_mixer: mixer.clone(),
            mixer,
            agent_opt: OptState::new(config.opt)?,
            mixer_opts,
            gamma: config.gamma,
            grad_clip: config.grad_clip,
            double_q: config.double_q,
            replay: ReplayBuffer::new(config.replay_capacity),
            env_steps: 0,
            updates: 0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.agent.n_agents
    }

    /// Joint value of the chosen actions in `tr` under the online networks.
    pub fn q_tot(&self, tr: &JointTransition) -> Result<f64> {
        let q = self.chosen_values(tr)?;
        self.mixer.mix(&q, &tr.state)
    }

    fn chosen_values(&self, tr: &JointTransition) -> Result<Vec<f64>> {
        (0..self.n_agents())
            .map(|i| {
                if tr.alive[i] {
                    Ok(self.agent.q_values(&tr.features[i], i)?[tr.actions[i]])
                } else {
                    Ok(0.0)
                }
            })
            .collect()
    }

    fn td_target(&self, tr: &JointTransition, agent: &AgentNet, mixer: &Mixer) -> Result<f64> {
        if tr.done {
            return Ok(tr.reward);
        }
        let mut next = vec![0.0; self.n_agents()];
        for (i, v) in next.iter_mut().enumerate() {
            if tr.next_alive[i] {
                let q = agent.q_values(&tr.next_features[i], i)?;
                let chooser = if self.double_q {
                    self.agent.q_values(&tr.next_features[i], i)?
                } else {
                    q.clone()
                };
                let a = argmax_legal(&chooser, &tr.next_legal[i])
                    .ok_or_else(|| invalid("next state has no legal action"))?;
                *v = q[a];
            }
        }
        Ok(tr.reward + self.gamma * mixer.mix(&next, &tr.next_state)?)
    }

    fn check_item(&self, tr: &JointTransition) -> Result<()> {
        let n = self.n_agents();
        let ok = tr.features.len() == n
            && tr.alive.len() == n
            && tr.actions.len() == n
            && tr.next_features.len() == n
            && tr.next_alive.len() == n
            && tr.next_legal.len() == n
            && tr.actions.iter().all(|&a| a < self.agent.n_actions);
        if ok {
            Ok(())
        } else {
            Err(invalid(
                "transition does not match the learner's agent count or action space",
            ))
        }
    }

    fn loss_and_grads_against(
        &self,
        batch: &[&JointTransition],
        t_agent: &AgentNet,
        t_mixer: &Mixer,
    ) -> Result<LossAndGrads> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let b = batch.len() as f64;
        let mut agent_grads = GradBundle::zeros_like(&self.agent.params);
        let mut mixer_grads = match &self.mixer {
            Mixer::QmixLite(m) => Some(m.zero_grads()),
            Mixer::Vdn => None,
        };
        let mut loss = 0.0;
        for tr in batch {
            self.check_item(tr)?;
            let y = self.td_target(tr, t_agent, t_mixer)?;
            let mut caches: Vec<Option<ForwardCache>> = Vec::with_capacity(self.n_agents());
            let mut q = vec![0.0; self.n_agents()];
            for i in 0..self.n_agents() {
                if tr.alive[i] {
                    let cache = self
                        .agent
                        .params
                        .forward_cached(&self.agent.input(&tr.features[i], i)?)?;
                    q[i] = cache.output()[tr.actions[i]];
                    caches.push(Some(cache));
                } else {
                    caches.push(None);
                }
            }
            let (qtot, dq) = match &self.mixer {
                Mixer::Vdn => {
                    let qtot: f64 = q.iter().sum();
                    let d = 2.0 * (qtot - y) / b;
                    (qtot, vec![d; self.n_agents()])
                }
                Mixer::QmixLite(m) => {
                    let (qtot, cache) = m.forward(&q, &tr.state)?;
                    let d = 2.0 * (qtot - y) / b;
                    let dq = m.backward(&cache, d, mixer_grads.as_mut().unwrap())?;
                    (qtot, dq)
                }
            };
            loss += (qtot - y).powi(2) / b;
            for (i, cache) in caches.iter().enumerate() {
                if let Some(cache) = cache {
                    let mut up = vec![0.0; self.agent.n_actions];
                    up[tr.actions[i]] = dq[i];
                    self.agent
                        .params
                        .backward_into(cache, &up, &mut agent_grads)?;
                }
            }
        }
        Ok(LossAndGrads {
            loss,
            agent: agent_grads,
            mixer: mixer_grads,
        })
    }

    /// Mean squared TD error `(Q_tot - y)²` with targets from the target
    /// networks, and its gradients.
    pub fn loss_and_grads(&self, batch: &[&JointTransition]) -> Result<LossAndGrads> {
        self.loss_and_grads_against(batch, &self.target_agent, &self.target_mixer)
    }

    /// Same loss with the online networks standing in for the targets.
    pub fn loss_with_online_targets(&self, batch: &[&JointTransition]) -> Result<f64> {
        Ok(self
            .loss_and_grads_against(batch, &self.agent, &self.mixer)?
            .loss)
    }

    /// One gradient step on a batch; returns the pre-update loss.
    pub fn learn_step(&mut self, batch: &[&JointTransition]) -> Result<f64> {
        let LossAndGrads {
            loss,
            agent: mut ag,
            mixer: mut mg,
        } = self.loss_and_grads(batch)?;
        {
            let mut bundles: Vec<&mut GradBundle> = vec![&mut ag];
            if let Some(m) = mg.as_mut() {
                bundles.extend(m.bundles_mut());
            }
            clip_global_norm(&mut bundles, self.grad_clip);
        }
        opt_step(&mut self.agent.params, &ag, &mut self.agent_opt)?;
        if let (Mixer::QmixLite(m), Some(g), Some(opts)) =
            (&mut self.mixer, mg.as_ref(), self.mixer_opts.as_mut())
        {
            m.apply(g, opts)?;
        }
        self.updates += 1;
        Ok(loss)
    }

    pub fn sync_targets(&mut self) {
        self.target_agent = self.agent.clone();
        self.target_mixer = self.mixer.clone();
    }

    /// Stores a transition and runs a gradient update when due.
    pub fn record<R: Rng>(
        &mut self,
        config: &LearnerConfig,
        tr: JointTransition,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        self.check_item(&tr)?;
        self.replay.push(tr);
        self.env_steps += 1;
        let interval = config.train_interval.max(1);
        if self.replay.len() < config.batch_size || !self.env_steps.is_multiple_of(interval) {
            return Ok(None);
        }
        let idx = self.replay.sample_indices(config.batch_size, rng);
        let batch: Vec<&JointTransition> =
            idx.iter().map(|&i| self.replay.get(i).unwrap()).collect();
        // the borrow of `replay` ends once the loss is computed
        let batch: Vec<JointTransition> = batch.into_iter().cloned().collect();
        let refs: Vec<&JointTransition> = batch.iter().collect();
        let loss = self.learn_step(&refs)?;
        if config.target_sync_updates > 0 && self.updates.is_multiple_of(config.target_sync_updates)
        {
            self.sync_targets();
        }
        Ok(Some(loss))
    }
}

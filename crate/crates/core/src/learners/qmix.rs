use crate::error::{invalid, Result};
use crate::nnet::{opt_step, ForwardCache, GradBundle, MlpParams, OptState};

/// State-conditioned monotonic mixer:
///
/// `Q_tot = |w2(s)| · elu(|W1(s)|ᵀ q + b1(s)) + b2(s)`
///
/// `W1`, `b1` and `w2` come from single linear hypernetworks over the global
/// state; `b2` from a two-layer hypernetwork. The absolute values make
/// `Q_tot` non-decreasing in every agent's value.
#[derive(Clone, Debug, PartialEq)]
pub struct QmixMixer {
    pub n_agents: usize,
    pub embed: usize,
    pub state_dim: usize,
    pub hyper_w1: MlpParams,
    pub hyper_b1: MlpParams,
    pub hyper_w2: MlpParams,
    pub hyper_b2: MlpParams,
}

pub struct MixCache {
    w1: ForwardCache,
    b1: ForwardCache,
    w2: ForwardCache,
    b2: ForwardCache,
    pre: Vec<f64>,
    q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerGrads {
    pub w1: GradBundle,
    pub b1: GradBundle,
    pub w2: GradBundle,
    pub b2: GradBundle,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

impl QmixMixer {
    pub fn new(n_agents: usize, state_dim: usize, embed: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            n_agents,
            embed,
            state_dim,
            hyper_w1: MlpParams::init(&[state_dim, n_agents * embed], seed)?,
            hyper_b1: MlpParams::init(&[state_dim, embed], seed.wrapping_add(1))?,
            hyper_w2: MlpParams::init(&[state_dim, embed], seed.wrapping_add(2))?,
            hyper_b2: MlpParams::init(&[state_dim, embed, 1], seed.wrapping_add(3))?,
        })
    }

    pub fn zero_grads(&self) -> MixerGrads {
        MixerGrads {
            w1: GradBundle::zeros_like(&self.hyper_w1),
            b1: GradBundle::zeros_like(&self.hyper_b1),
            w2: GradBundle::zeros_like(&self.hyper_w2),
            b2: GradBundle::zeros_like(&self.hyper_b2),
        }
    }

    pub fn forward(&self, q: &[f64], state: &[f64]) -> Result<(f64, MixCache)> {
        if q.len() != self.n_agents {
            return Err(invalid(format!(
                "mixer expects {} agent values, got {}",
                self.n_agents,
                q.len()
            )));
        }
        if state.len() != self.state_dim {
            return Err(invalid(format!(
                "mixer expects a state of width {}, got {}",
                self.state_dim,
                state.len()
            )));
        }
        let w1 = self.hyper_w1.forward_cached(state)?;
        let b1 = self.hyper_b1.forward_cached(state)?;
        let w2 = self.hyper_w2.forward_cached(state)?;
        let b2 = self.hyper_b2.forward_cached(state)?;
        let (w1o, b1o, w2o) = (w1.output(), b1.output(), w2.output());
        let mut pre = b1o.to_vec();
        for (i, qi) in q.iter().enumerate() {
            for (j, p) in pre.iter_mut().enumerate() {
                *p += w1o[i * self.embed + j].abs() * qi;
            }
        }
        let qtot = pre
            .iter()
            .zip(w2o)
            .map(|(p, w)| w.abs() * elu(*p))
            .sum::<f64>()
            + b2.output()[0];
        Ok((
            qtot,
            MixCache {
                w1,
                b1,
                w2,
                b2,
                pre,
                q: q.to_vec(),
            },
        ))
    }

    /// Accumulates `dqtot`-weighted hypernetwork gradients into `grads` and
    /// returns `dqtot * ∂Q_tot/∂q`.
    pub fn backward(
        &self,
        cache: &MixCache,
        dqtot: f64,
        grads: &mut MixerGrads,
    ) -> Result<Vec<f64>> {
        let (w1o, w2o) = (cache.w1.output(), cache.w2.output());
        let mut d_w2 = vec![0.0; self.embed];
        let mut d_pre = vec![0.0; self.embed];
        for j in 0..self.embed {
            d_w2[j] = dqtot * w2o[j].signum() * elu(cache.pre[j]);
            d_pre[j] = dqtot * w2o[j].abs() * elu_grad(cache.pre[j]);
        }
        let mut d_w1 = vec![0.0; self.n_agents * self.embed];
        let mut dq = vec![0.0; self.n_agents];
        for i in 0..self.n_agents {
            for j in 0..self.embed {
                let w = w1o[i * self.embed + j];
                d_w1[i * self.embed + j] = d_pre[j] * cache.q[i] * w.signum();
                dq[i] += d_pre[j] * w.abs();
            }
        }
        self.hyper_w1
            .backward_into(&cache.w1, &d_w1, &mut grads.w1)?;
        self.hyper_b1
            .backward_into(&cache.b1, &d_pre, &mut grads.b1)?;
        self.hyper_w2
            .backward_into(&cache.w2, &d_w2, &mut grads.w2)?;
        self.hyper_b2
            .backward_into(&cache.b2, &[dqtot], &mut grads.b2)?;
        Ok(dq)
    }

    pub fn apply(&mut self, grads: &MixerGrads, opts: &mut [OptState; 4]) -> Result<()> {
        opt_step(&mut self.hyper_w1, &grads.w1, &mut opts[0])?;
        opt_step(&mut self.hyper_b1, &grads.b1, &mut opts[1])?;
        opt_step(&mut self.hyper_w2, &grads.w2, &mut opts[2])?;
        opt_step(&mut self.hyper_b2, &grads.b2, &mut opts[3])?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> [&mut MlpParams; 4] {
        [
            &mut self.hyper_w1,
            &mut self.hyper_b1,
            &mut self.hyper_w2,
            &mut self.hyper_b2,
        ]
    }
}

impl MixerGrads {
    pub fn bundles_mut(&mut self) -> [&mut GradBundle; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

pub fn qmix_mix(mixer: &QmixMixer, agent_qs: &[f64], global_state: &[f64]) -> Result<f64> {
    Ok(mixer.forward(agent_qs, global_state)?.0)
}

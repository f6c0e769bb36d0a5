//! Random network distillation over victim positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{reset, ScenarioConfig, WorldState};
use crate::error::{invalid, parse_err, Result};
use crate::learners::mix_seed;
use crate::nnet::{mse_and_grad, opt_step, MlpParams, OptConfig, OptState};
use crate::textio::LineCursor;
use crate::tmdp::{tmdp_step, RandomTraitors, TmdpSpec, TraitorPolicy};

pub const RND_HIDDEN: [usize; 2] = [128, 128];
pub const RND_OUTPUT: usize = 64;

/// Normalized `(x, y)` of every victim in index order, followed by the
/// traitors when `include_traitors` is set. Dead units keep their last
/// position. Health, enemies and time never enter.
pub fn trim_state(config: &ScenarioConfig, state: &WorldState, include_traitors: bool) -> Vec<f64> {
    let units = if include_traitors {
        config.victim_indices().start..config.traitor_indices().end
    } else {
        config.victim_indices()
    };
    units
        .flat_map(|i| {
            let u = &state.units[i];
            [config.norm_x(u.x), config.norm_y(u.y)]
        })
        .collect()
}

pub fn trimmed_width(config: &ScenarioConfig, include_traitors: bool) -> usize {
    2 * (config.num_victims
        + if include_traitors {
            config.num_traitors
        } else {
            0
        })
}

/// Frozen random target network plus a predictor trained to imitate it.
#[derive(Clone, Debug, PartialEq)]
pub struct RndModule {
    target: MlpParams,
    predictor: MlpParams,
    opt: OptState,
    include_traitors: bool,
    /// Pre-training episodes behind the current predictor.
    pub episodes: u64,
    pub seed: u64,
}

impl RndModule {
    pub fn new(
        input_width: usize,
        include_traitors: bool,
        opt: OptConfig,
        seed: u64,
    ) -> Result<Self> {
        let dims = [input_width, RND_HIDDEN[0], RND_HIDDEN[1], RND_OUTPUT];
        Ok(Self {
            target: MlpParams::init(&dims, mix_seed(seed, 0x7a9e7))?,
            predictor: MlpParams::init(&dims, mix_seed(seed, 0x9ed1c7))?,
            opt: OptState::new(opt)?,
            include_traitors,
            episodes: 0,
            seed,
        })
    }

    pub fn for_scenario(
        config: &ScenarioConfig,
        include_traitors: bool,
        opt: OptConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            trimmed_width(config, include_traitors),
            include_traitors,
            opt,
            seed,
        )
    }

    pub fn input_width(&self) -> usize {
        self.target.input_dim()
    }

    pub fn include_traitors(&self) -> bool {
        self.include_traitors
    }

    pub fn target(&self) -> &MlpParams {
        &self.target
    }

    pub fn predictor(&self) -> &MlpParams {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut MlpParams {
        &mut self.predictor
    }

    pub fn opt_state(&self) -> &OptState {
        &self.opt
    }

    /// Replaces the optimizer, resetting its moments and step counter.
    pub fn set_optimizer(&mut self, opt: OptConfig) -> Result<()> {
        self.opt = OptState::new(opt)?;
        Ok(())
    }

    pub fn trim(&self, config: &ScenarioConfig, state: &WorldState) -> Vec<f64> {
        trim_state(config, state, self.include_traitors)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(invalid(format!(
                "novelty input has width {}, module expects {}",
                x.len(),
                self.input_width()
            )));
        }
        Ok(())
    }

    /// `‖f̂(x) − f(x)‖²`.
    pub fn novelty(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let p = self.predictor.forward(x)?;
        let t = self.target.forward(x)?;
        Ok(p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum())
    }

    /// One optimizer step on the mean squared prediction error at `x`.
    /// Returns the loss before the step.
    pub fn update(&mut self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let target = self.target.forward(x)?;
        let cache = self.predictor.forward_cached(x)?;
        let (loss, grad) = mse_and_grad(cache.output(), &target)?;
        let mut grads = crate::nnet::GradBundle::zeros_like(&self.predictor);
        self.predictor.backward_into(&cache, &grad, &mut grads)?;
        opt_step(&mut self.predictor, &grads, &mut self.opt)?;
        Ok(loss)
    }

    /// `RND v1` header line with the metadata, then the target and predictor
    /// networks as `NNET v1` blocks. Optimizer moments are not stored.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!(
            "RND v1 input_width={} episodes={} seed={} include_traitors={}\n",
            self.input_width(),
            self.episodes,
            self.seed,
            self.include_traitors as u8
        );
        self.target.write_checkpoint(&mut s);
        self.predictor.write_checkpoint(&mut s);
        s
    }

    /// Reads a checkpoint; the optimizer starts fresh with `opt`.
    pub fn from_checkpoint(text: &str, opt: OptConfig) -> Result<Self> {
        let mut cur = LineCursor::new(text);
        let (n, header) = cur.next_line()?;
        let rest = header
            .strip_prefix("RND v1")
            .ok_or_else(|| parse_err(n, "expected `RND v1` header"))?;
        let mut width = None;
        let mut episodes = None;
        let mut seed = None;
        let mut include = false;
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| parse_err(n, format!("bad field `{kv}`")))?;
            let num = || {
                v.parse::<u64>()
                    .map_err(|_| parse_err(n, format!("bad value for `{k}`")))
            };
            match k {
                "input_width" => width = Some(num()? as usize),
                "episodes" => episodes = Some(num()?),
                "seed" => seed = Some(num()?),
                "include_traitors" => include = num()? != 0,
                other => return Err(parse_err(n, format!("unknown field `{other}`"))),
            }
        }
        let (Some(width), Some(episodes), Some(seed)) = (width, episodes, seed) else {
            return Err(parse_err(n, "header needs input_width, episodes and seed"));
        };
        let target = MlpParams::read_checkpoint(&mut cur)?;
        let predictor = MlpParams::read_checkpoint(&mut cur)?;
        if target.dims() != predictor.dims() || target.input_dim() != width {
            return Err(parse_err(n, "network shapes disagree with the header"));
        }
        if !cur.is_empty() {
            let (n, _) = cur.next_line()?;
            return Err(parse_err(n, "trailing content after the predictor"));
        }
        Ok(Self {
            target,
            predictor,
            opt: OptState::new(opt)?,
            include_traitors: include,
            episodes,
            seed,
        })
    }
}

pub fn novelty(module: &RndModule, trimmed: &[f64]) -> Result<f64> {
    module.novelty(trimmed)
}

pub fn rnd_update(module: &mut RndModule, trimmed: &[f64]) -> Result<f64> {
    module.update(trimmed)
}

/// Rolls out `episodes` episodes of `spec` with uniformly random traitors
/// and updates the predictor on every visited state, the reset state
/// included. Episode `k` resets with `mix_seed(seed, k)`.
pub fn pretrain_rnd(
    spec: &TmdpSpec,
    mut module: RndModule,
    episodes: u64,
    seed: u64,
) -> Result<RndModule> {
    let cfg = &spec.scenario;
    if module.input_width() != trimmed_width(cfg, module.include_traitors) {
        return Err(invalid("module input width does not match the scenario"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9e7a));
    let mut policy = RandomTraitors;
    for k in 0..episodes {
        let mut s = reset(cfg, mix_seed(seed, k))?;
        module.update(&module.trim(cfg, &s))?;
        loop {
            let a = policy.act(spec, &s, &mut rng)?;
            let tr = tmdp_step(spec, &s, &a, &mut rng)?;
            s = tr.next_state;
            module.update(&module.trim(cfg, &s))?;
            if tr.done {
                break;
            }
        }
        module.episodes += 1;
    }
    Ok(module)
}

/// Mean novelty on states visited by fresh random-traitor rollouts versus
/// the same states with every victim moved to a random free cell in the
/// eastmost quarter of the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoveltySeparation {
    pub visited: f64,
    pub unvisited: f64,
    pub samples: usize,
}

impl NoveltySeparation {
    pub fn ratio(&self) -> f64 {
        self.unvisited / self.visited
    }
}

pub fn novelty_separation(
    spec: &TmdpSpec,
    module: &RndModule,
    samples: usize,
    seed: u64,
) -> Result<NoveltySeparation> {
    if samples == 0 {
        return Err(invalid("separation needs at least one sample"));
    }
    let cfg = &spec.scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e9a));
    let mut states = Vec::with_capacity(samples);
    let mut k = 0;
    while states.len() < samples {
        let mut s = reset(cfg, mix_seed(seed ^ 0xf2e5_4000_0000_0000, k))?;
        k += 1;
        states.push(s.clone());
        while states.len() < samples {
            let a = RandomTraitors.act(spec, &s, &mut rng)?;
            let tr = tmdp_step(spec, &s, &a, &mut rng)?;
            s = tr.next_state;
            states.push(s.clone());
            if tr.done {
                break;
            }
        }
    }
    let w = cfg.grid_width as i32;
    let h = cfg.grid_height as i32;
    let x0 = (3 * w / 4).min(w - 1);
    let region: Vec<(i32, i32)> = (x0..w).flat_map(|x| (0..h).map(move |y| (x, y))).collect();
    if region.len() < cfg.num_victims {
        return Err(invalid("eastmost quarter cannot hold every victim"));
    }
    let (mut visited, mut unvisited) = (0.0, 0.0);
    for s in &states {
        visited += module.novelty(&module.trim(cfg, s))?;
        let mut moved = s.clone();
        let mut cells = region.clone();
        for i in cfg.victim_indices() {
            let c = cells.swap_remove(rng.random_range(0..cells.len()));
            moved.units[i].x = c.0;
            moved.units[i].y = c.1;
        }
        unvisited += module.novelty(&module.trim(cfg, &moved))?;
    }
    let n = states.len() as f64;
    Ok(NoveltySeparation {
        visited: visited / n,
        unvisited: unvisited / n,
        samples: states.len(),
    })
}

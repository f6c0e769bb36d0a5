//! Deterministic grid combat game.
//!
//! Two sides share a rectangular grid: the ally team (victims plus traitors)
//! and scripted enemies. Victims and enemies can attack opponents within
//! Chebyshev `attack_range`; traitors can only move. The team reward seen by
//! the ally side is the damage dealt to enemies in a step, plus `win_bonus`
//! on the step where the last enemy dies.
//!
//! Step resolution order:
//! 1. all attacks apply damage simultaneously (damage to a unit is capped at
//!    its remaining health);
//! 2. units at zero health die;
//! 3. surviving units move one at a time in unit-index order; moving into an
//!    occupied or out-of-bounds cell leaves the mover where it was;
//! 4. the timestep advances.
//!
//! Coordinates: `x` grows to the east, `y` grows to the south, so
//! `MoveNorth` decrements `y`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, parse_err, Result};
use crate::textio::parse_key_values;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Team {
    Victim,
    Traitor,
    Enemy,
}

impl Team {
    pub fn is_ally(self) -> bool {
        matches!(self, Team::Victim | Team::Traitor)
    }

    pub fn can_attack(self) -> bool {
        matches!(self, Team::Victim | Team::Enemy)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Team::Victim => "victim",
            Team::Traitor => "traitor",
            Team::Enemy => "enemy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpawnLayout {
    /// Victims in a compact block on the left with traitors behind them,
    /// enemies spread over the right-hand columns. Cells inside each block
    /// are drawn from the reset seed.
    Lines,
    /// Allies clustered near the south-west corner, enemies near the
    /// north-east corner.
    Corners,
    /// One `(x, y)` per unit in unit order.
    Explicit(Vec<(i32, i32)>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnemyBehavior {
    /// Attack the weakest ally in range, otherwise close in on the nearest ally.
    FocusFire,
    /// Never act. Useful for combat-free toy scenarios.
    Hold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub num_victims: usize,
    pub num_traitors: usize,
    pub num_enemies: usize,
    pub max_health: u32,
    pub attack_range: u32,
    pub attack_damage: u32,
    pub max_steps: u32,
    pub win_bonus: f64,
    pub layout: SpawnLayout,
    pub seed: u64,
    pub enemy_behavior: EnemyBehavior,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid_width: 16,
            grid_height: 10,
            num_victims: 6,
            num_traitors: 2,
            num_enemies: 6,
            max_health: 5,
            attack_range: 1,
            attack_damage: 1,
            max_steps: 60,
            win_bonus: 20.0,
            layout: SpawnLayout::Lines,
            seed: 0,
            enemy_behavior: EnemyBehavior::FocusFire,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Unit {
    pub team: Team,
    pub x: i32,
    pub y: i32,
    pub health: u32,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WorldState {
    pub units: Vec<Unit>,
    pub t: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AgentAction {
    Noop,
    MoveNorth,
    MoveSouth,
    MoveEast,
    MoveWest,
    /// Attack the unit with this index.
    Attack(usize),
}

/// Number of non-attack actions (noop and the four moves).
pub const NUM_MOVE_ACTIONS: usize = 5;

impl AgentAction {
    pub const MOVES: [AgentAction; NUM_MOVE_ACTIONS] = [
        AgentAction::Noop,
        AgentAction::MoveNorth,
        AgentAction::MoveSouth,
        AgentAction::MoveEast,
        AgentAction::MoveWest,
    ];

    fn delta(self) -> (i32, i32) {
        match self {
            AgentAction::MoveNorth => (0, -1),
            AgentAction::MoveSouth => (0, 1),
            AgentAction::MoveEast => (1, 0),
            AgentAction::MoveWest => (-1, 0),
            _ => (0, 0),
        }
    }

    pub fn is_move(self) -> bool {
        !matches!(self, AgentAction::Noop | AgentAction::Attack(_))
    }

    /// Compact code used by replay logs: `n`, `N`, `S`, `E`, `W`, `A<idx>`.
    pub fn code(self) -> String {
        match self {
            AgentAction::Noop => "n".into(),
            AgentAction::MoveNorth => "N".into(),
            AgentAction::MoveSouth => "S".into(),
            AgentAction::MoveEast => "E".into(),
            AgentAction::MoveWest => "W".into(),
            AgentAction::Attack(i) => format!("A{i}"),
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Some(match code {
            "n" => AgentAction::Noop,
            "N" => AgentAction::MoveNorth,
            "S" => AgentAction::MoveSouth,
            "E" => AgentAction::MoveEast,
            "W" => AgentAction::MoveWest,
            _ => AgentAction::Attack(code.strip_prefix('A')?.parse().ok()?),
        })
    }
}

impl fmt::Display for AgentAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

/// One entry per unit; `None` for dead units.
pub type JointAction = Vec<Option<AgentAction>>;

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: WorldState,
    pub reward: f64,
    pub done: bool,
    pub won: bool,
}

impl ScenarioConfig {
    pub fn num_units(&self) -> usize {
        self.num_victims + self.num_traitors + self.num_enemies
    }

    pub fn team_of(&self, unit: usize) -> Team {
        if unit < self.num_victims {
            Team::Victim
        } else if unit < self.num_victims + self.num_traitors {
            Team::Traitor
        } else {
            Team::Enemy
        }
    }

    pub fn victim_indices(&self) -> std::ops::Range<usize> {
        0..self.num_victims
    }

    pub fn traitor_indices(&self) -> std::ops::Range<usize> {
        self.num_victims..self.num_victims + self.num_traitors
    }

    pub fn enemy_indices(&self) -> std::ops::Range<usize> {
        let start = self.num_victims + self.num_traitors;
        start..start + self.num_enemies
    }

    /// Same scenario with the traitors removed (victim pre-training variant).
    pub fn without_traitors(&self) -> Self {
        let mut c = self.clone();
        if let SpawnLayout::Explicit(spawns) = &self.layout {
            let mut kept: Vec<(i32, i32)> = spawns[..self.num_victims].to_vec();
            kept.extend_from_slice(&spawns[self.num_victims + self.num_traitors..]);
            c.layout = SpawnLayout::Explicit(kept);
        }
        c.num_traitors = 0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        if self.max_health == 0 || self.attack_range == 0 || self.attack_damage == 0 {
            return Err(invalid(
                "max_health, attack_range and attack_damage must be positive",
            ));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be positive"));
        }
        if !(self.win_bonus >= 0.0) {
            return Err(invalid("win_bonus must be non-negative"));
        }
        if self.num_units() > self.grid_width * self.grid_height {
            return Err(invalid("more units than grid cells"));
        }
        if let SpawnLayout::Explicit(spawns) = &self.layout {
            if spawns.len() != self.num_units() {
                return Err(invalid(format!(
                    "explicit layout lists {} spawns for {} units",
                    spawns.len(),
                    self.num_units()
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for &(x, y) in spawns {
                if !self.in_bounds(x, y) {
                    return Err(invalid(format!("spawn ({x},{y}) is outside the grid")));
                }
                if !seen.insert((x, y)) {
                    return Err(invalid(format!("overlapping spawns at ({x},{y})")));
                }
            }
        }
        Ok(())
    }

    pub fn in_bounds(&self, x: i32, y: i32) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.grid_width && (y as usize) < self.grid_height
    }

    fn x_scale(&self) -> f64 {
        (self.grid_width.max(2) - 1) as f64
    }

    fn y_scale(&self) -> f64 {
        (self.grid_height.max(2) - 1) as f64
    }

    pub fn norm_x(&self, x: i32) -> f64 {
        x as f64 / self.x_scale()
    }

    pub fn norm_y(&self, y: i32) -> f64 {
        y as f64 / self.y_scale()
    }

    /// Canonical `key = value` text. Parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let layout = match &self.layout {
            SpawnLayout::Lines => "lines".to_string(),
            SpawnLayout::Corners => "corners".to_string(),
            SpawnLayout::Explicit(_) => "explicit".to_string(),
        };
        let mut s = format!(
            "grid_width = {}\ngrid_height = {}\nnum_victims = {}\nnum_traitors = {}\nnum_enemies = {}\n\
             max_health = {}\nattack_range = {}\nattack_damage = {}\nmax_steps = {}\nwin_bonus = {}\n\
             layout = {}\nseed = {}\nenemy_behavior = {}\n",
            self.grid_width,
            self.grid_height,
            self.num_victims,
            self.num_traitors,
            self.num_enemies,
            self.max_health,
            self.attack_range,
            self.attack_damage,
            self.max_steps,
            self.win_bonus,
            layout,
            self.seed,
            match self.enemy_behavior {
                EnemyBehavior::FocusFire => "focus_fire",
                EnemyBehavior::Hold => "hold",
            }
        );
        if let SpawnLayout::Explicit(spawns) = &self.layout {
            let cells: Vec<String> = spawns.iter().map(|(x, y)| format!("{x},{y}")).collect();
            s.push_str(&format!("spawns = {}\n", cells.join(" ")));
        }
        s
    }

    /// Parses scenario `key = value` text. Unknown keys are rejected; missing
    /// keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_key_values(text)?)
    }

    pub(crate) fn from_pairs(pairs: &[(usize, String, String)]) -> Result<Self> {
        let mut c = ScenarioConfig::default();
        let mut spawns: Option<Vec<(i32, i32)>> = None;
        let mut layout_name = None;
        for (line, key, value) in pairs {
            let line = *line;
            let num = |v: &str| -> Result<u64> {
                v.parse::<u64>()
                    .map_err(|_| parse_err(line, format!("`{key}` expects an integer, got `{v}`")))
            };
            match key.as_str() {
                "grid_width" => c.grid_width = num(value)? as usize,
                "grid_height" => c.grid_height = num(value)? as usize,
                "num_victims" => c.num_victims = num(value)? as usize,
                "num_traitors" => c.num_traitors = num(value)? as usize,
                "num_enemies" => c.num_enemies = num(value)? as usize,
                "max_health" => c.max_health = num(value)? as u32,
                "attack_range" => c.attack_range = num(value)? as u32,
                "attack_damage" => c.attack_damage = num(value)? as u32,
                "max_steps" => c.max_steps = num(value)? as u32,
                "seed" => c.seed = num(value)?,
                "win_bonus" => {
                    c.win_bonus = value
                        .parse()
                        .map_err(|_| parse_err(line, format!("bad win_bonus `{value}`")))?
                }
                "layout" => layout_name = Some((line, value.clone())),
                "enemy_behavior" => {
                    c.enemy_behavior = match value.as_str() {
                        "focus_fire" => EnemyBehavior::FocusFire,
                        "hold" => EnemyBehavior::Hold,
                        other => {
                            return Err(parse_err(
                                line,
                                format!("unknown enemy_behavior `{other}`"),
                            ))
                        }
                    }
                }
                "spawns" => {
                    let mut cells = Vec::new();
                    for tok in value.split_whitespace() {
                        let parsed = tok
                            .split_once(',')
                            .and_then(|(x, y)| Some((x.parse().ok()?, y.parse().ok()?)));
                        cells.push(
                            parsed.ok_or_else(|| parse_err(line, format!("bad spawn `{tok}`")))?,
                        );
                    }
                    spawns = Some(cells);
                }
                _ => return Err(parse_err(line, format!("unknown scenario key `{key}`"))),
            }
        }
        if let Some((line, name)) = layout_name {
            c.layout = match name.as_str() {
                "lines" => SpawnLayout::Lines,
                "corners" => SpawnLayout::Corners,
                "explicit" => SpawnLayout::Explicit(
                    spawns
                        .take()
                        .ok_or_else(|| parse_err(line, "explicit layout needs a `spawns` line"))?,
                ),
                other => return Err(parse_err(line, format!("unknown layout `{other}`"))),
            };
        }
        Ok(c)
    }

    /// FNV-1a hash of the canonical text with the seed zeroed. Used to check
    /// that checkpoints and scenarios belong together.
    pub fn content_hash(&self) -> u64 {
        let mut c = self.clone();
        c.seed = 0;
        fnv1a(c.to_text().as_bytes())
    }

    /// Hash of the traitor-free variant; identical for every traitor count.
    pub fn victim_signature(&self) -> u64 {
        self.without_traitors().content_hash()
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn chebyshev(a: &Unit, b: &Unit) -> u32 {
    (a.x - b.x).unsigned_abs().max((a.y - b.y).unsigned_abs())
}

fn manhattan(a: &Unit, b: &Unit) -> u32 {
    (a.x - b.x).unsigned_abs() + (a.y - b.y).unsigned_abs()
}

fn sample_cells(
    rng: &mut ChaCha8Rng,
    candidates: &[(i32, i32)],
    taken: &mut std::collections::HashSet<(i32, i32)>,
    count: usize,
) -> Result<Vec<(i32, i32)>> {
    let mut free: Vec<(i32, i32)> = candidates
        .iter()
        .copied()
        .filter(|c| !taken.contains(c))
        .collect();
    if free.len() < count {
        return Err(invalid(format!(
            "spawn block has {} free cells for {count} units",
            free.len()
        )));
    }
    free.shuffle(rng);
    free.truncate(count);
    taken.extend(free.iter().copied());
    Ok(free)
}

fn preset_spawns(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(i32, i32)>> {
    let w = config.grid_width as i32;
    let h = config.grid_height as i32;
    let half = (w / 2).max(1);
    let block = |xs: std::ops::Range<i32>, ys: std::ops::Range<i32>| -> Vec<(i32, i32)> {
        xs.flat_map(|x| ys.clone().map(move |y| (x, y))).collect()
    };
    let rows = if h >= 4 { 1..h - 1 } else { 0..h };
    let mut taken = std::collections::HashSet::new();
    let (victims, enemies, traitors);
    match config.layout {
        SpawnLayout::Lines => {
            // victims in a 2x4 block a little in from the west edge around
            // the middle row, enemies spread over the columns east of centre,
            // traitors in the columns behind the victims
            let front = 2.min(half - 1);
            let vx = front..(front + 2).min(half);
            let ex = (half + 2).min(w - 1)..w;
            let mid = h / 2;
            let crow = (mid - 2).max(0)..(mid + 2).min(h);
            let mut vcells = block(vx.clone(), crow.clone());
            if vcells.len() < config.num_victims {
                vcells = block(0..half, 0..h);
            }
            let mut ecells = block(ex, 0..h);
            if ecells.len() < config.num_enemies {
                ecells = block(w - half..w, 0..h);
            }
            victims = sample_cells(rng, &vcells, &mut taken, config.num_victims)?;
            enemies = sample_cells(rng, &ecells, &mut taken, config.num_enemies)?;
            let mut tcells = block(0..vx.start, rows.clone());
            if tcells.iter().filter(|c| !taken.contains(*c)).count() < config.num_traitors {
                tcells = block(0..half, 0..h);
            }
            traitors = sample_cells(rng, &tcells, &mut taken, config.num_traitors)?;
        }
        SpawnLayout::Corners => {
            let by_distance = |cx: i32, cy: i32, xs: std::ops::Range<i32>| -> Vec<(i32, i32)> {
                let mut cells = block(xs, 0..h);
                cells.sort_by_key(|&(x, y)| ((x - cx).abs().max((y - cy).abs()), x, y));
                cells
            };
            let allies = config.num_victims + config.num_traitors;
            let pool = |cells: Vec<(i32, i32)>, n: usize| -> Vec<(i32, i32)> {
                let keep = (n + n / 2 + 1).min(cells.len());
                cells[..keep].to_vec()
            };
            let acells = pool(by_distance(0, h - 1, 0..half), allies);
            let ecells = pool(by_distance(w - 1, 0, w - half..w), config.num_enemies);
            victims = sample_cells(rng, &acells, &mut taken, config.num_victims)?;
            enemies = sample_cells(rng, &ecells, &mut taken, config.num_enemies)?;
            traitors = sample_cells(rng, &acells, &mut taken, config.num_traitors)?;
        }
        SpawnLayout::Explicit(ref s) => return Ok(s.clone()),
    }
    let mut all = victims;
    all.extend(traitors);
    all.extend(enemies);
    Ok(all)
}

/// Places every unit at full health with `t = 0`. Preset layouts draw cells
/// from `seed`; victims and enemies are drawn before traitors so their
/// positions do not depend on the traitor count.
pub fn reset(config: &ScenarioConfig, seed: u64) -> Result<WorldState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spawns = preset_spawns(config, &mut rng)?;
    let units = spawns
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| Unit {
            team: config.team_of(i),
            x,
            y,
            health: config.max_health,
            alive: true,
        })
        .collect();
    Ok(WorldState { units, t: 0 })
}

fn check_unit(state: &WorldState, unit: usize) -> Result<&Unit> {
    let u = state
        .units
        .get(unit)
        .ok_or_else(|| invalid(format!("unit {unit} does not exist")))?;
    if !u.alive {
        return Err(invalid(format!("unit {unit} is dead")));
    }
    Ok(u)
}

fn opposing(a: Team, b: Team) -> bool {
    a.is_ally() != b.is_ally()
}

/// Noop first, then in-bounds moves, then attacks on alive opponents in range
/// ordered by target index.
pub fn legal_actions(
    config: &ScenarioConfig,
    state: &WorldState,
    unit: usize,
) -> Result<Vec<AgentAction>> {
    let u = check_unit(state, unit)?;
    let mut out = vec![AgentAction::Noop];
    for a in &AgentAction::MOVES[1..] {
        let (dx, dy) = a.delta();
        if config.in_bounds(u.x + dx, u.y + dy) {
            out.push(*a);
        }
    }
    if u.team.can_attack() {
        for (j, other) in state.units.iter().enumerate() {
            if other.alive
                && opposing(u.team, other.team)
                && chebyshev(u, other) <= config.attack_range
            {
                out.push(AgentAction::Attack(j));
            }
        }
    }
    Ok(out)
}

/// Advances the world by one step. `actions` holds one entry per unit:
/// `Some` for every alive unit and `None` for every dead one.
pub fn step(
    config: &ScenarioConfig,
    state: &WorldState,
    actions: &[Option<AgentAction>],
) -> Result<StepOutcome> {
    if actions.len() != state.units.len() {
        return Err(invalid(format!(
            "expected {} action slots, got {}",
            state.units.len(),
            actions.len()
        )));
    }
    if state.t >= config.max_steps {
        return Err(invalid("episode already reached the horizon"));
    }
    for (i, (u, a)) in state.units.iter().zip(actions).enumerate() {
        match (u.alive, a) {
            (true, None) => return Err(invalid(format!("missing action for alive unit {i}"))),
            (false, Some(_)) => return Err(invalid(format!("action given for dead unit {i}"))),
            (true, Some(AgentAction::Attack(j))) => {
                if !u.team.can_attack() {
                    return Err(invalid(format!(
                        "unit {i} ({}) cannot attack",
                        u.team.tag()
                    )));
                }
                let target = state
                    .units
                    .get(*j)
                    .ok_or_else(|| invalid(format!("attack target {j} does not exist")))?;
                if !target.alive || !opposing(u.team, target.team) {
                    return Err(invalid(format!("unit {i} cannot attack unit {j}")));
                }
                if chebyshev(u, target) > config.attack_range {
                    return Err(invalid(format!("unit {j} is out of range of unit {i}")));
                }
            }
            _ => {}
        }
    }

    let mut next = state.clone();
    let mut incoming = vec![0u32; next.units.len()];
    for a in actions.iter().flatten() {
        if let AgentAction::Attack(j) = a {
            incoming[*j] += config.attack_damage;
        }
    }
    let mut reward = 0.0;
    for (u, dmg) in next.units.iter_mut().zip(&incoming) {
        if *dmg == 0 {
            continue;
        }
        let dealt = (*dmg).min(u.health);
        u.health -= dealt;
        if u.team == Team::Enemy {
            reward += dealt as f64;
        }
        if u.health == 0 {
            u.alive = false;
        }
    }
    for i in 0..next.units.len() {
        let Some(a) = actions[i] else { continue };
        if !a.is_move() || !next.units[i].alive {
            continue;
        }
        let (dx, dy) = a.delta();
        let (nx, ny) = (next.units[i].x + dx, next.units[i].y + dy);
        let blocked = !config.in_bounds(nx, ny)
            || next.units.iter().any(|o| o.alive && o.x == nx && o.y == ny);
        if !blocked {
            next.units[i].x = nx;
            next.units[i].y = ny;
        }
    }
    next.t += 1;

    let enemies_alive = next.units.iter().any(|u| u.alive && u.team == Team::Enemy);
    let victims_alive = next.units.iter().any(|u| u.alive && u.team == Team::Victim);
    let won = !enemies_alive;
    if won {
        reward += config.win_bonus;
    }
    let victims_wiped = config.num_victims > 0 && !victims_alive;
    let done = won || victims_wiped || next.t >= config.max_steps;
    Ok(StepOutcome {
        next_state: next,
        reward,
        done,
        won,
    })
}

/// Scripted enemy controller. Each alive enemy attacks the lowest-health ally
/// in range (ties to the lowest index); otherwise it steps along the axis of
/// largest distance toward the nearest alive ally by Manhattan distance
/// (horizontal on ties). With no ally alive it does nothing.
///
/// Returns `(unit index, action)` for every alive enemy.
pub fn scripted_enemy_policy(
    config: &ScenarioConfig,
    state: &WorldState,
) -> Vec<(usize, AgentAction)> {
    let mut out = Vec::new();
    for (i, e) in state.units.iter().enumerate() {
        if !e.alive || e.team != Team::Enemy {
            continue;
        }
        if config.enemy_behavior == EnemyBehavior::Hold {
            out.push((i, AgentAction::Noop));
            continue;
        }
        let allies = state
            .units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.alive && u.team.is_ally());
        let target = allies
            .clone()
            .filter(|(_, u)| chebyshev(e, u) <= config.attack_range)
            .min_by_key(|(j, u)| (u.health, *j));
        let action = if let Some((j, _)) = target {
            AgentAction::Attack(j)
        } else if let Some((_, near)) = allies.min_by_key(|(j, u)| (manhattan(e, u), *j)) {
            let dx = near.x - e.x;
            let dy = near.y - e.y;
            if dx.abs() >= dy.abs() && dx != 0 {
                if dx > 0 {
                    AgentAction::MoveEast
                } else {
                    AgentAction::MoveWest
                }
            } else if dy > 0 {
                AgentAction::MoveSouth
            } else if dy < 0 {
                AgentAction::MoveNorth
            } else {
                AgentAction::Noop
            }
        } else {
            AgentAction::Noop
        };
        out.push((i, action));
    }
    out
}

/// Which units appear in an egocentric observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsView {
    All,
    /// Victims and enemies only. Victim policies use this view, so a victim
    /// network has the same input width whether or not traitors are present.
    NoTraitors,
}

impl ObsView {
    fn includes(self, team: Team) -> bool {
        match self {
            ObsView::All => true,
            ObsView::NoTraitors => team != Team::Traitor,
        }
    }
}

pub const OBS_SELF_FEATURES: usize = 3;
pub const OBS_UNIT_FEATURES: usize = 4;

pub fn observation_len(config: &ScenarioConfig, view: ObsView) -> usize {
    let visible = match view {
        ObsView::All => config.num_units(),
        ObsView::NoTraitors => config.num_victims + config.num_enemies,
    };
    OBS_SELF_FEATURES + visible.saturating_sub(1) * OBS_UNIT_FEATURES
}

/// Egocentric features over every unit: own `(x, y, health)` normalized to
/// `[0, 1]`, then for each other unit `(alive, dx, dy, health)` where `dx`,
/// `dy` are raw cell offsets. Dead units contribute zeros.
pub fn observe(config: &ScenarioConfig, state: &WorldState, unit: usize) -> Result<Vec<f64>> {
    observe_view(config, state, unit, ObsView::All)
}

pub fn observe_view(
    config: &ScenarioConfig,
    state: &WorldState,
    unit: usize,
    view: ObsView,
) -> Result<Vec<f64>> {
    let me = check_unit(state, unit)?;
    let hp = config.max_health as f64;
    let mut out = Vec::with_capacity(observation_len(config, view));
    out.extend_from_slice(&[
        config.norm_x(me.x),
        config.norm_y(me.y),
        me.health as f64 / hp,
    ]);
    for (j, other) in state.units.iter().enumerate() {
        if j == unit || !view.includes(other.team) {
            continue;
        }
        if other.alive {
            out.extend_from_slice(&[
                1.0,
                (other.x - me.x) as f64,
                (other.y - me.y) as f64,
                other.health as f64 / hp,
            ]);
        } else {
            out.extend_from_slice(&[0.0; OBS_UNIT_FEATURES]);
        }
    }
    Ok(out)
}

pub fn global_state_len(config: &ScenarioConfig) -> usize {
    config.num_units() * 4 + 1
}

/// Per unit `(alive, x, y, health)` with coordinates and health normalized,
/// then `t / max_steps`. Dead units keep their last coordinates.
pub fn global_state(config: &ScenarioConfig, state: &WorldState) -> Vec<f64> {
    let hp = config.max_health as f64;
    let mut out = Vec::with_capacity(global_state_len(config));
    for u in &state.units {
        out.extend_from_slice(&[
            if u.alive { 1.0 } else { 0.0 },
            config.norm_x(u.x),
            config.norm_y(u.y),
            u.health as f64 / hp,
        ]);
    }
    out.push(state.t as f64 / config.max_steps as f64);
    out
}

/// Fixed per-team action numbering for learners: ids `0..5` are noop and the
/// four moves; attack-capable teams append one id per potential target in
/// unit order (enemies for victims, allies for enemies).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSpace {
    targets: Vec<usize>,
}

impl ActionSpace {
    pub fn for_team(config: &ScenarioConfig, team: Team) -> Self {
        let targets = match team {
            Team::Victim => config.enemy_indices().collect(),
            Team::Enemy => (0..config.num_victims + config.num_traitors).collect(),
            Team::Traitor => Vec::new(),
        };
        Self { targets }
    }

    pub fn len(&self) -> usize {
        NUM_MOVE_ACTIONS + self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn action(&self, id: usize) -> Option<AgentAction> {
        if id < NUM_MOVE_ACTIONS {
            Some(AgentAction::MOVES[id])
        } else {
            self.targets
                .get(id - NUM_MOVE_ACTIONS)
                .map(|&t| AgentAction::Attack(t))
        }
    }

    pub fn id(&self, action: AgentAction) -> Option<usize> {
        match action {
            AgentAction::Attack(t) => self
                .targets
                .iter()
                .position(|&x| x == t)
                .map(|p| p + NUM_MOVE_ACTIONS),
            other => AgentAction::MOVES.iter().position(|&m| m == other),
        }
    }

    pub fn legal_mask(
        &self,
        config: &ScenarioConfig,
        state: &WorldState,
        unit: usize,
    ) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for a in legal_actions(config, state, unit)? {
            if let Some(id) = self.id(a) {
                mask[id] = true;
            }
        }
        Ok(mask)
    }
}

/// Assembles a joint action from per-unit assignments; unassigned alive
/// units default to `Noop`.
pub fn joint_action(state: &WorldState, assignments: &[(usize, AgentAction)]) -> JointAction {
    let mut joint: JointAction = state
        .units
        .iter()
        .map(|u| {
            if u.alive {
                Some(AgentAction::Noop)
            } else {
                None
            }
        })
        .collect();
    for &(i, a) in assignments {
        joint[i] = Some(a);
    }
    joint
}

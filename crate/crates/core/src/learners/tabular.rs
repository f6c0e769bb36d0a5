use std::collections::BTreeMap;

use super::JointTransition;
use crate::env::fnv1a;
use crate::error::{parse_err, Result};
use crate::textio::{fmt_f64, parse_f64s, LineCursor};

/// Action values keyed by state id; unvisited entries read as 0.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct QTable {
    n_actions: usize,
    rows: BTreeMap<u64, Vec<f64>>,
}

impl QTable {
    pub fn new(n_actions: usize) -> Self {
        Self {
            n_actions,
            rows: BTreeMap::new(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: u64, a: usize) -> f64 {
        self.rows.get(&s).map_or(0.0, |r| r[a])
    }

    pub fn set(&mut self, s: u64, a: usize, v: f64) {
        let n = self.n_actions;
        self.rows.entry(s).or_insert_with(|| vec![0.0; n])[a] = v;
    }

    pub fn row(&self, s: u64) -> Vec<f64> {
        self.rows
            .get(&s)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.n_actions])
    }

    pub fn max(&self, s: u64, legal: Option<&[bool]>) -> f64 {
        let row = self.row(s);
        row.iter()
            .enumerate()
            .filter(|(i, _)| legal.is_none_or(|l| l[*i]))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }
}

/// One-step Q-learning backup
/// `Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`,
/// with no bootstrap when `done`.
#[allow(clippy::too_many_arguments)]
pub fn tabular_update(
    table: &mut QTable,
    s: u64,
    a: usize,
    r: f64,
    s_next: u64,
    done: bool,
    alpha: f64,
    gamma: f64,
) {
    let bootstrap = if done {
        0.0
    } else {
        gamma * table.max(s_next, None)
    };
    let q = table.get(s, a);
    table.set(s, a, q + alpha * (r + bootstrap - q));
}

/// Independent tabular Q-learners, one table per agent, keyed by a hash of
/// the agent's feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularLearner {
    tables: Vec<QTable>,
}

pub fn feature_key(features: &[f64]) -> u64 {
    let bytes: Vec<u8> = features
        .iter()
        .flat_map(|v| v.to_bits().to_le_bytes())
        .collect();
    fnv1a(&bytes)
}

impl TabularLearner {
    pub fn new(n_agents: usize, n_actions: usize) -> Self {
        Self {
            tables: vec![QTable::new(n_actions); n_agents],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.tables.len()
    }

    pub fn n_actions(&self) -> usize {
        self.tables.first().map_or(0, |t| t.n_actions)
    }

    pub fn table(&self, agent: usize) -> &QTable {
        &self.tables[agent]
    }

    pub fn q_values(&self, features: &[f64], agent: usize) -> Vec<f64> {
        self.tables[agent].row(feature_key(features))
    }

    pub fn set_value(&mut self, agent: usize, features: &[f64], action: usize, value: f64) {
        self.tables[agent].set(feature_key(features), action, value);
    }

    pub fn learn(&mut self, tr: &JointTransition, alpha: f64, gamma: f64) {
        for (i, table) in self.tables.iter_mut().enumerate() {
            if !tr.alive[i] {
                continue;
            }
            let s = feature_key(&tr.features[i]);
            let bootstrap = if tr.done || !tr.next_alive[i] {
                0.0
            } else {
                gamma * table.max(feature_key(&tr.next_features[i]), Some(&tr.next_legal[i]))
            };
            let a = tr.actions[i];
            let q = table.get(s, a);
            table.set(s, a, q + alpha * (tr.reward + bootstrap - q));
        }
    }

    pub fn write_checkpoint(&self, out: &mut String) {
        out.push_str(&format!(
            "TABULAR v1\nagents: {}\nactions: {}\n",
            self.tables.len(),
            self.n_actions()
        ));
        for (i, t) in self.tables.iter().enumerate() {
            out.push_str(&format!("table: {i} {}\n", t.rows.len()));
            for (s, row) in &t.rows {
                let vals: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                out.push_str(&format!("q: {s} {}\n", vals.join(" ")));
            }
        }
    }

    pub fn read_checkpoint(cur: &mut LineCursor<'_>) -> Result<Self> {
        let (n, h) = cur.next_line()?;
        if h != "TABULAR v1" {
            return Err(parse_err(n, "expected `TABULAR v1`"));
        }
        let int = |cur: &mut LineCursor<'_>, key: &str| -> Result<usize> {
            let (n, v) = cur.expect_prefixed(key)?;
            v.parse().map_err(|_| parse_err(n, format!("bad `{key}`")))
        };
        let agents = int(cur, "agents")?;
        let actions = int(cur, "actions")?;
        let mut learner = Self::new(agents, actions);
        for i in 0..agents {
            let (n, v) = cur.expect_prefixed("table")?;
            let parts: Vec<&str> = v.split_whitespace().collect();
            if parts.len() != 2 || parts[0] != i.to_string() {
                return Err(parse_err(n, "bad table header"));
            }
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| parse_err(n, "bad row count"))?;
            for _ in 0..rows {
                let (n, v) = cur.expect_prefixed("q")?;
                let (s, rest) = v.split_once(' ').ok_or_else(|| parse_err(n, "bad q row"))?;
                let s: u64 = s.parse().map_err(|_| parse_err(n, "bad state id"))?;
                let vals = parse_f64s(n, rest)?;
                if vals.len() != actions {
                    return Err(parse_err(n, "q row has wrong width"));
                }
                learner.tables[i].rows.insert(s, vals);
            }
        }
        Ok(learner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_update_examples() {
        let mut t = QTable::new(2);
        tabular_update(&mut t, 0, 1, 1.0, 1, true, 1.0, 0.9);
        assert_eq!(t.get(0, 1), 1.0);
        tabular_update(&mut t, 3, 0, 0.0, 1, true, 0.5, 0.9);
        assert_eq!(t.get(3, 0), 0.0);
    }

    #[test]
    fn two_state_chain_converges_to_fixed_point() {
        // s0 --a0 (r=0)--> s1, s0 --a1 (r=0.5)--> s0, s1 --any (r=1)--> terminal
        // value-iteration fixed point with gamma = 0.9: Q(s1,*) = 1,
        // Q(s0,a0) = 0.9, Q(s0,a1) = 0.5 / (1 - 0.9) = 5.
        let gamma = 0.9;
        let mut t = QTable::new(2);
        for _ in 0..10_000 {
            tabular_update(&mut t, 0, 0, 0.0, 1, false, 0.5, gamma);
            tabular_update(&mut t, 0, 1, 0.5, 0, false, 0.5, gamma);
            tabular_update(&mut t, 1, 0, 1.0, 2, true, 0.5, gamma);
            tabular_update(&mut t, 1, 1, 1.0, 2, true, 0.5, gamma);
        }
        assert!((t.get(1, 0) - 1.0).abs() < 1e-6);
        assert!((t.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((t.get(0, 1) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut l = TabularLearner::new(2, 3);
        l.tables[1].set(77, 2, -0.25);
        l.tables[0].set(5, 0, 1.0 / 3.0);
        let mut s = String::new();
        l.write_checkpoint(&mut s);
        let mut cur = LineCursor::new(&s);
        assert_eq!(TabularLearner::read_checkpoint(&mut cur).unwrap(), l);
    }
}

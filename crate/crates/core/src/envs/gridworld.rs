use ndarray::{array, Array1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, EnvStep, Environment};
use crate::{seed, Error, Result};

/// Moves: up (y+1), down (y−1), left (x−1), right (x+1).
pub const MOVES: [(i64, i64); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridWorldConfig {
    pub width: usize,
    pub height: usize,
    pub goal: (usize, usize),
    pub hazards: Vec<(usize, usize)>,
    /// Cells an episode may start from; one is drawn uniformly per reset.
    pub starts: Vec<(usize, usize)>,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub hazard_penalty: f64,
    pub horizon: usize,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            goal: (4, 4),
            hazards: vec![(1, 2), (3, 2)],
            starts: vec![(0, 0), (1, 0), (2, 0), (3, 0), (4, 0)],
            step_penalty: -0.01,
            goal_reward: 1.0,
            hazard_penalty: -1.0,
            horizon: 50,
        }
    }
}

/// Discrete navigation task with terminal goal and hazard cells.
///
/// The observation is the position scaled into `[0, 1]²`.
#[derive(Debug, Clone)]
pub struct GridWorld {
    cfg: GridWorldConfig,
    pos: (usize, usize),
    t: usize,
}

impl GridWorld {
    pub fn new(cfg: GridWorldConfig) -> Result<Self> {
        let inside = |c: &(usize, usize)| c.0 < cfg.width && c.1 < cfg.height;
        if cfg.width < 2 || cfg.height < 2 {
            return Err(Error::arg("gridworld needs at least 2x2 cells"));
        }
        if !inside(&cfg.goal) || !cfg.hazards.iter().all(inside) || !cfg.starts.iter().all(inside) {
            return Err(Error::arg("gridworld cell outside the grid"));
        }
        if cfg.horizon == 0 {
            return Err(Error::arg("horizon must be at least 1"));
        }
        if cfg.starts.is_empty() {
            return Err(Error::arg("gridworld needs at least one start cell"));
        }
        if cfg.starts.iter().any(|c| *c == cfg.goal || cfg.hazards.contains(c)) {
            return Err(Error::arg("start cell is terminal"));
        }
        let pos = cfg.starts[0];
        Ok(Self { cfg, pos, t: 0 })
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.cfg
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    /// Places the agent at `cell` with a fresh step counter.
    pub fn set_position(&mut self, cell: (usize, usize)) {
        self.pos = cell;
        self.t = 0;
    }

    pub fn observe_cell(&self, cell: (usize, usize)) -> Array1<f64> {
        array![
            cell.0 as f64 / (self.cfg.width - 1) as f64,
            cell.1 as f64 / (self.cfg.height - 1) as f64
        ]
    }

    pub fn is_terminal(&self, cell: (usize, usize)) -> bool {
        cell == self.cfg.goal || self.cfg.hazards.contains(&cell)
    }

    /// All non-terminal cells, row-major.
    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.cfg.height)
            .flat_map(|y| (0..self.cfg.width).map(move |x| (x, y)))
            .filter(|c| !self.is_terminal(*c))
            .collect()
    }

    /// Deterministic successor of `cell` under `action` (walls block).
    pub fn successor(&self, cell: (usize, usize), action: usize) -> (usize, usize) {
        let (dx, dy) = MOVES[action];
        let nx = cell.0 as i64 + dx;
        let ny = cell.1 as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.cfg.width as i64 || ny >= self.cfg.height as i64 {
            cell
        } else {
            (nx as usize, ny as usize)
        }
    }

    /// Return of the best policy from `start`, by breadth-first search over
    /// free cells (shortest path to the goal).
    pub fn optimal_return(&self, start: (usize, usize)) -> f64 {
        let mut dist = vec![usize::MAX; self.cfg.width * self.cfg.height];
        let idx = |c: (usize, usize)| c.1 * self.cfg.width + c.0;
        let mut queue = std::collections::VecDeque::new();
        dist[idx(start)] = 0;
        queue.push_back(start);
        while let Some(c) = queue.pop_front() {
            if c == self.cfg.goal {
                break;
            }
            if self.is_terminal(c) {
                continue;
            }
            for a in 0..4 {
                let n = self.successor(c, a);
                if dist[idx(n)] == usize::MAX {
                    dist[idx(n)] = dist[idx(c)] + 1;
                    queue.push_back(n);
                }
            }
        }
        let d = dist[idx(self.cfg.goal)];
        if d == usize::MAX || d > self.cfg.horizon {
            return self.cfg.step_penalty * self.cfg.horizon as f64;
        }
        self.cfg.step_penalty * (d - 1) as f64 + self.cfg.goal_reward
    }
}

impl Environment for GridWorld {
    fn name(&self) -> &'static str {
        "gridworld"
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(4)
    }

    fn obs_bounds(&self) -> (Array1<f64>, Array1<f64>) {
        (Array1::zeros(2), Array1::ones(2))
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, seed: u64) -> Array1<f64> {
        let mut rng = seed::rng(seed);
        let i = rng.gen_range(0..self.cfg.starts.len());
        self.pos = self.cfg.starts[i];
        self.t = 0;
        self.observe_cell(self.pos)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let a = match action {
            Action::Discrete(a) if *a < 4 => *a,
            Action::Discrete(a) => return Err(Error::arg(format!("gridworld action {a} out of range"))),
            Action::Continuous(_) => return Err(Error::arg("gridworld takes discrete actions")),
        };
        self.pos = self.successor(self.pos, a);
        self.t += 1;
        let (reward, terminal) = if self.pos == self.cfg.goal {
            (self.cfg.goal_reward, true)
        } else if self.cfg.hazards.contains(&self.pos) {
            (self.cfg.hazard_penalty, true)
        } else {
            (self.cfg.step_penalty, false)
        };
        Ok(EnvStep {
            next_obs: self.observe_cell(self.pos),
            reward,
            done: terminal || self.t >= self.cfg.horizon,
            truncated: !terminal && self.t >= self.cfg.horizon,
        })
    }

    fn true_state(&self) -> Vec<f64> {
        vec![self.pos.0 as f64, self.pos.1 as f64]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wall_blocks_and_costs_step_penalty() {
        let mut g = GridWorld::new(GridWorldConfig::default()).unwrap();
        g.set_position((0, 0));
        let st = g.step(&Action::Discrete(2)).unwrap();
        assert_eq!(g.position(), (0, 0));
        assert_eq!(st.reward, -0.01);
        assert!(!st.done);
    }

    #[test]
    fn goal_terminates_with_goal_reward() {
        let mut g = GridWorld::new(GridWorldConfig::default()).unwrap();
        g.set_position((3, 4));
        let st = g.step(&Action::Discrete(3)).unwrap();
        assert!(st.done);
        assert_eq!(st.reward, 1.0);
        assert_eq!(st.next_obs, array![1.0, 1.0]);
    }

    #[test]
    fn hazard_and_invalid_action() {
        let mut g = GridWorld::new(GridWorldConfig::default()).unwrap();
        g.set_position((1, 1));
        let st = g.step(&Action::Discrete(0)).unwrap();
        assert!(st.done);
        assert_eq!(st.reward, -1.0);
        assert!(g.step(&Action::Discrete(4)).is_err());
    }

    #[test]
    fn seeded_resets_repeat() {
        let mut a = GridWorld::new(GridWorldConfig::default()).unwrap();
        let mut b = GridWorld::new(GridWorldConfig::default()).unwrap();
        for s in 0..20 {
            assert_eq!(a.reset(s), b.reset(s));
        }
    }

    #[test]
    fn optimal_return_from_corner() {
        let g = GridWorld::new(GridWorldConfig::default()).unwrap();
        // 8 moves: 7 penalised steps then the goal
        assert!((g.optimal_return((0, 0)) - (1.0 - 0.07)).abs() < 1e-12);
    }
}

use ndarray::Array1;
use rand::Rng as _;

use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Array1<f64>,
    /// Discrete actions are stored as a single index value.
    pub action: Array1<f64>,
    pub reward: f64,
    pub next_obs: Array1<f64>,
    /// True only when the episode ended in a terminal state, so the target
    /// does not bootstrap. Horizon cut-offs still bootstrap.
    pub terminal: bool,
    pub next_action: Option<Array1<f64>>,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `n` draws with replacement.
    pub fn sample(&self, n: usize, rng: &mut seed::Rng) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }

    /// Up to `n` most recent transitions, newest last.
    pub fn recent(&self, n: usize) -> Vec<&Transition> {
        let len = self.items.len();
        let n = n.min(len);
        (0..n)
            .map(|k| {
                let idx = (self.next + self.capacity - n + k) % self.capacity;
                &self.items[if len < self.capacity { len - n + k } else { idx }]
            })
            .collect()
    }
}

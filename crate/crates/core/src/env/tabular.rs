//! Tiny enumerable MDP for oracle verification.
//!
//! Exact value iteration and the estimation-error bound check run against
//! these; nothing here touches the training pipeline.

use rand::Rng;

use crate::rng::derive_rng;

pub const MAX_STATES: usize = 64;
pub const MAX_ACTIONS: usize = 16;

/// Finite MDP with dense transition rows.
#[derive(Debug, Clone)]
pub struct TabularMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// P(s'|s,a), flattened [s][a][s'].
    trans: Vec<f64>,
    /// R(s,a), flattened [s][a].
    rewards: Vec<f64>,
    pub gamma: f64,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        trans: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
    ) -> Result<Self, String> {
        if n_states == 0 || n_states > MAX_STATES {
            return Err(format!("state count {n_states} outside 1..={MAX_STATES}"));
        }
        if n_actions == 0 || n_actions > MAX_ACTIONS {
            return Err(format!("action count {n_actions} outside 1..={MAX_ACTIONS}"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(format!("gamma {gamma} must lie in [0, 1)"));
        }
        if trans.len() != n_states * n_actions * n_states {
            return Err("transition tensor has wrong length".into());
        }
        if rewards.len() != n_states * n_actions {
            return Err("reward table has wrong length".into());
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err("rewards must be finite".into());
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &trans[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(format!("P({s},{a}) has entries outside [0,1]"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(format!("P({s},{a}) sums to {sum}, not 1"));
                }
            }
        }
        Ok(TabularMDP { n_states, n_actions, trans, rewards, gamma })
    }

    pub fn p(&self, s: usize, a: usize) -> &[f64] {
        &self.trans[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    /// Exhaustive (s, a, P(·|s,a), R(s,a)) tuples in index order.
    pub fn enumerate(&self) -> Vec<(usize, usize, Vec<f64>, f64)> {
        let mut out = Vec::with_capacity(self.n_states * self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                out.push((s, a, self.p(s, a).to_vec(), self.r(s, a)));
            }
        }
        out
    }

    /// Deterministic walk on a line: action 0 steps left, action 1 steps
    /// right (clamped at the ends); reward 1 for pushing right at the right
    /// end, 0 elsewhere.
    pub fn chain(n: usize, gamma: f64) -> Self {
        let mut trans = vec![0.0; n * 2 * n];
        let mut rewards = vec![0.0; n * 2];
        for s in 0..n {
            let left = s.saturating_sub(1);
            let right = (s + 1).min(n - 1);
            trans[(s * 2) * n + left] = 1.0;
            trans[(s * 2 + 1) * n + right] = 1.0;
            if s == n - 1 {
                rewards[s * 2 + 1] = 1.0;
            }
        }
        TabularMDP::new(n, 2, trans, rewards, gamma).expect("chain construction is valid")
    }

    /// Random dense MDP: transition rows are normalized exponential draws
    /// (flat Dirichlet), rewards uniform on [−1, 1].
    pub fn random(n_states: usize, n_actions: usize, seed: u64, gamma: f64) -> Self {
        let mut rng = derive_rng(seed, "tabular/random");
        let mut trans = vec![0.0; n_states * n_actions * n_states];
        for row in trans.chunks_mut(n_states) {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                let u: f64 = rng.random_range(1e-12..1.0);
                *v = -u.ln();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rewards = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        TabularMDP::new(n_states, n_actions, trans, rewards, gamma)
            .expect("random construction is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_counts_state_action_pairs() {
        let mdp = TabularMDP::chain(2, 0.9);
        assert_eq!(mdp.enumerate().len(), 4);
    }

    #[test]
    fn rows_sum_to_one() {
        let mdp = TabularMDP::random(8, 3, 0, 0.95);
        for (_, _, row, _) in mdp.enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn chain_matches_its_construction_table() {
        // Independent table for n=3, written out by hand from the rule.
        let mdp = TabularMDP::chain(3, 0.9);
        let expected = vec![
            (0, 0, vec![1.0, 0.0, 0.0], 0.0),
            (0, 1, vec![0.0, 1.0, 0.0], 0.0),
            (1, 0, vec![1.0, 0.0, 0.0], 0.0),
            (1, 1, vec![0.0, 0.0, 1.0], 0.0),
            (2, 0, vec![0.0, 1.0, 0.0], 0.0),
            (2, 1, vec![0.0, 0.0, 1.0], 1.0),
        ];
        assert_eq!(mdp.enumerate(), expected);
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let bad = TabularMDP::new(1, 1, vec![0.5], vec![0.0], 0.9);
        assert!(bad.is_err());
        let ok = TabularMDP::new(1, 1, vec![1.0], vec![0.0], 0.9);
        assert!(ok.is_ok());
    }
}

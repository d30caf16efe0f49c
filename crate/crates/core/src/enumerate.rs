//! Exhaustive enumeration of small prepend/append environments: exact
//! partition function, trajectory counts and exact policy marginals.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::logsumexp;
use crate::process::prepend_append::discrete_parents;
use crate::process::{PolicyParams, PrependAppend, Process};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationTable {
    /// Every complete string, in lexicographic order of symbol indices.
    pub terminals: Vec<Vec<u8>>,
    pub log_r: Vec<f64>,
    /// Number of distinct state paths from the empty string to each terminal.
    pub trajectory_counts: Vec<u64>,
    pub log_z: f64,
}

impl EnumerationTable {
    pub fn index_of(&self, x: &[u8]) -> Option<usize> {
        self.terminals.iter().position(|t| t == x)
    }

    /// `pi(x) = R(x) / Z` over [`EnumerationTable::terminals`].
    pub fn target_distribution(&self) -> Vec<f64> {
        self.log_r.iter().map(|r| (r - self.log_z).exp()).collect()
    }
}

/// Number of prepend/append decision sequences after the first step, `2^(N-1)`.
pub fn action_sequences_per_terminal(len: usize) -> u64 {
    if len == 0 {
        1
    } else {
        1u64 << (len - 1)
    }
}

pub fn enumerate(process: &PrependAppend) -> Result<EnumerationTable> {
    let terminals = process.all_terminals()?;
    let log_r: Vec<f64> = terminals.iter().map(|x| process.log_reward(x)).collect();
    let mut memo: HashMap<Vec<u8>, u64> = HashMap::new();
    let trajectory_counts = terminals.iter().map(|x| path_count(x, &mut memo)).collect();
    Ok(EnumerationTable { log_z: logsumexp(&log_r), terminals, log_r, trajectory_counts })
}

fn path_count(x: &[u8], memo: &mut HashMap<Vec<u8>, u64>) -> u64 {
    if x.len() <= 1 {
        return 1;
    }
    if let Some(&c) = memo.get(x) {
        return c;
    }
    let c = discrete_parents(x).iter().map(|(p, _)| path_count(p, memo)).sum();
    memo.insert(x.to_vec(), c);
    c
}

/// Exact `p_theta(x)` of every terminal in `table`, by forward propagation of
/// state probabilities through the DAG.
pub fn exact_policy_marginal(process: &PrependAppend, table: &EnumerationTable, policy: &PolicyParams) -> Result<Vec<f64>> {
    let mut layer: HashMap<Vec<u8>, f64> = HashMap::from([(Vec::new(), 1.0)]);
    for _ in 0..process.len {
        let mut next: HashMap<Vec<u8>, f64> = HashMap::with_capacity(layer.len() * 2);
        let mut keys: Vec<&Vec<u8>> = layer.keys().collect();
        keys.sort();
        for x in keys {
            let px = layer[x];
            for (child, p) in process.child_distribution(policy, x)? {
                *next.entry(child).or_insert(0.0) += px * p;
            }
        }
        layer = next;
    }
    Ok(table.terminals.iter().map(|x| layer.get(x).copied().unwrap_or(0.0)).collect())
}

/// `sum |p - q|`.
pub fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mlp;
    use crate::process::DiscreteReward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ab(len: usize, reward: DiscreteReward) -> PrependAppend {
        PrependAppend::new(vec!['A', 'B'], len, reward).unwrap()
    }

    #[test]
    fn partition_functions() {
        let t = enumerate(&ab(2, DiscreteReward::Uniform)).unwrap();
        assert!((t.log_z.exp() - 4.0).abs() < 1e-12);
        assert_eq!(action_sequences_per_terminal(2), 2);
        // AB and BA have two state paths; AA and BB have one after merging.
        assert_eq!(t.trajectory_counts, vec![1, 2, 2, 1]);
        let pow = DiscreteReward::CountPow { symbol: 0, base: 2.0 };
        assert!((enumerate(&ab(3, pow.clone())).unwrap().log_z.exp() - 27.0).abs() < 1e-9);
        assert!((enumerate(&ab(4, pow)).unwrap().log_z.exp() - 81.0).abs() < 1e-9);
    }

    #[test]
    fn path_counts_respect_the_bound() {
        let t = enumerate(&ab(6, DiscreteReward::Uniform)).unwrap();
        assert!(t.trajectory_counts.iter().all(|&c| c >= 1 && c <= action_sequences_per_terminal(6)));
        let abab = t.index_of(&[0, 1, 0, 1, 0, 1]).unwrap();
        assert_eq!(t.trajectory_counts[abab], 32);
    }

    #[test]
    fn budget_is_enforced() {
        let p = PrependAppend::new(vec!['a', 'b', 'c', 'd'], 11, DiscreteReward::Uniform).unwrap();
        assert!(matches!(enumerate(&p), Err(crate::Error::Capability(_))));
    }

    #[test]
    fn marginal_sums_to_one() {
        let p = ab(4, DiscreteReward::Uniform);
        let t = enumerate(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut policy = p.init_policy(8, &mut rng);
        policy.net = Mlp::init(p.feature_dim(), 8, p.num_actions(), 1.0, &mut rng);
        let m = exact_policy_marginal(&p, &t, &policy).unwrap();
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn uniform_policy_marginal_matches_action_counts() {
        let p = ab(3, DiscreteReward::Uniform);
        let t = enumerate(&p).unwrap();
        let policy = p.init_policy(4, &mut ChaCha8Rng::seed_from_u64(0));
        let mut zero = policy.clone();
        zero.net = Mlp::zeros(p.feature_dim(), 4, p.num_actions());
        let m = exact_policy_marginal(&p, &t, &zero).unwrap();
        // Every terminal is reached by 2 * 2^(N-1) action sequences of probability 4^-3 each.
        let seqs = 2.0 * action_sequences_per_terminal(3) as f64;
        for &pm in &m {
            assert!((pm - seqs / 64.0).abs() < 1e-12);
        }
    }
}

//! Discrete sequence generation by prepending or appending one symbol per step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PolicyParams, PolicyVars, Process};
use crate::autodiff::{Mlp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math::logsumexp;

/// Largest terminal space the exact helpers are willing to enumerate.
pub const ENUMERATION_BUDGET: usize = 1_000_000;

/// Reward on complete strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscreteReward {
    Uniform,
    /// `R(x) = base^(count of symbol in x)`.
    CountPow { symbol: u8, base: f64 },
}

impl DiscreteReward {
    /// Parses names such as `uniform` or `count_a_pow2`.
    pub fn from_name(name: &str, vocab: &[char]) -> Result<Self> {
        if name == "uniform" {
            return Ok(DiscreteReward::Uniform);
        }
        let parsed = name.strip_prefix("count_").and_then(|rest| rest.split_once("_pow"));
        let Some((sym, base)) = parsed else {
            return Err(Error::config(format!("reward: unknown reward '{name}'")));
        };
        let base: f64 = base
            .parse()
            .map_err(|_| Error::config(format!("reward: bad base in '{name}'")))?;
        let mut chars = sym.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            return Err(Error::config(format!("reward: '{name}' must name a single symbol")));
        };
        let symbol = vocab
            .iter()
            .position(|v| v.eq_ignore_ascii_case(&c))
            .ok_or_else(|| Error::config(format!("reward: symbol '{c}' is not in the vocabulary")))?;
        if !(base > 0.0) {
            return Err(Error::config("reward: base must be positive"));
        }
        Ok(DiscreteReward::CountPow { symbol: symbol as u8, base })
    }

    pub fn log_r(&self, x: &[u8]) -> f64 {
        match *self {
            DiscreteReward::Uniform => 0.0,
            DiscreteReward::CountPow { symbol, base } => x.iter().filter(|&&v| v == symbol).count() as f64 * base.ln(),
        }
    }
}

/// Prepend/append process over strings of a fixed target length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrependAppend {
    pub vocab: Vec<char>,
    pub len: usize,
    pub reward: DiscreteReward,
}

/// The two possible parents of a non-empty string: drop the first or the last symbol.
/// Coinciding removals are merged, so the probabilities are uniform over distinct parents.
pub fn discrete_parents(x: &[u8]) -> Vec<(Vec<u8>, f64)> {
    if x.is_empty() {
        return Vec::new();
    }
    let a = x[1..].to_vec();
    let b = x[..x.len() - 1].to_vec();
    if a == b {
        vec![(a, 1.0)]
    } else {
        vec![(a, 0.5), (b, 0.5)]
    }
}

impl PrependAppend {
    pub fn new(vocab: Vec<char>, len: usize, reward: DiscreteReward) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::config("vocab: must contain at least one symbol"));
        }
        if vocab.len() > u8::MAX as usize {
            return Err(Error::config("vocab: at most 255 symbols"));
        }
        if len == 0 {
            return Err(Error::config("len: must be at least 1"));
        }
        Ok(PrependAppend { vocab, len, reward })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn parse(&self, s: &str) -> Result<Vec<u8>> {
        s.chars()
            .map(|c| {
                self.vocab
                    .iter()
                    .position(|v| *v == c)
                    .map(|i| i as u8)
                    .ok_or_else(|| Error::input(format!("symbol '{c}' is not in the vocabulary")))
            })
            .collect()
    }

    pub fn render(&self, x: &[u8]) -> String {
        x.iter().map(|&v| self.vocab[v as usize]).collect()
    }

    /// Number of actions: prepend or append each symbol.
    pub fn num_actions(&self) -> usize {
        2 * self.vocab.len()
    }

    pub fn apply(&self, x: &[u8], action: usize) -> Vec<u8> {
        let v = self.vocab.len();
        let mut out = Vec::with_capacity(x.len() + 1);
        if action < v {
            out.push(action as u8);
            out.extend_from_slice(x);
        } else {
            out.extend_from_slice(x);
            out.push((action - v) as u8);
        }
        out
    }

    /// Every action that turns `x` into `child`.
    pub fn actions_between(&self, x: &[u8], child: &[u8]) -> Vec<usize> {
        let v = self.vocab.len();
        let mut acts = Vec::with_capacity(2);
        if child.len() != x.len() + 1 {
            return acts;
        }
        if child[1..] == *x {
            acts.push(child[0] as usize);
        }
        if child[..x.len()] == *x {
            acts.push(v + child[x.len()] as usize);
        }
        acts
    }

    /// Distinct children of `x` with their probabilities under `policy`.
    pub fn child_distribution(&self, policy: &PolicyParams, x: &[u8]) -> Result<Vec<(Vec<u8>, f64)>> {
        let logp = self.action_log_probs(policy, &[x.to_vec()])?;
        let mut out: Vec<(Vec<u8>, f64)> = Vec::new();
        for a in 0..self.num_actions() {
            let c = self.apply(x, a);
            match out.iter_mut().find(|(s, _)| *s == c) {
                Some((_, p)) => *p += logp[a].exp(),
                None => out.push((c, logp[a].exp())),
            }
        }
        Ok(out)
    }

    fn feature_tensor(&self, xs: &[&Vec<u8>]) -> Tensor {
        let mut data = Vec::with_capacity(xs.len() * self.feature_dim());
        for x in xs {
            self.features(x, x.len(), &mut data);
        }
        Tensor::new(xs.len(), self.feature_dim(), data)
    }

    /// Row-major `|xs| x 2V` action log-probabilities.
    fn action_log_probs(&self, policy: &PolicyParams, xs: &[Vec<u8>]) -> Result<Vec<f64>> {
        let refs: Vec<&Vec<u8>> = xs.iter().collect();
        let logits = policy.net.forward(&self.feature_tensor(&refs))?;
        let a = self.num_actions();
        let mut out = logits.data;
        for row in out.chunks_mut(a) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(out)
    }

    /// All complete strings in lexicographic order of their symbol indices.
    pub fn all_terminals(&self) -> Result<Vec<Vec<u8>>> {
        let v = self.vocab.len();
        let count = (v as f64).powi(self.len as i32);
        if count > ENUMERATION_BUDGET as f64 {
            return Err(Error::capability(format!(
                "{count} terminal strings exceed the enumeration budget of {ENUMERATION_BUDGET}"
            )));
        }
        let count = count as usize;
        Ok((0..count)
            .map(|mut i| {
                let mut s = vec![0u8; self.len];
                for p in (0..self.len).rev() {
                    s[p] = (i % v) as u8;
                    i /= v;
                }
                s
            })
            .collect())
    }
}

impl Process for PrependAppend {
    type State = Vec<u8>;

    fn steps(&self) -> usize {
        self.len
    }

    fn feature_dim(&self) -> usize {
        self.len * self.vocab.len() + 1
    }

    fn features(&self, x: &Vec<u8>, _n: usize, out: &mut Vec<f64>) {
        let v = self.vocab.len();
        let start = out.len();
        out.resize(start + self.len * v, 0.0);
        for (p, &s) in x.iter().enumerate().take(self.len) {
            out[start + p * v + s as usize] = 1.0;
        }
        out.push(x.len() as f64 / self.len as f64);
    }

    fn sample_initial<R: Rng + ?Sized>(&self, _rng: &mut R) -> Vec<u8> {
        Vec::new()
    }

    fn log_p0(&self, x: &Vec<u8>) -> f64 {
        if x.is_empty() {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn log_reference(&self, _x: &Vec<u8>) -> f64 {
        0.0
    }

    fn log_reward(&self, x: &Vec<u8>) -> f64 {
        self.reward.log_r(x)
    }

    fn log_reward_interior(&self, _x: &Vec<u8>) -> f64 {
        0.0
    }

    fn init_policy<R: Rng + ?Sized>(&self, hidden: usize, rng: &mut R) -> PolicyParams {
        PolicyParams {
            net: Mlp::init(self.feature_dim(), hidden, self.num_actions(), 0.01, rng),
            langevin: None,
            log_z: 0.0,
        }
    }

    fn forward_batch<R: Rng + ?Sized>(
        &self,
        policy: &PolicyParams,
        xs: &[Vec<u8>],
        n: usize,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<(Vec<Vec<u8>>, Vec<f64>)> {
        if n >= self.len || xs.iter().any(|x| x.len() != n) {
            return Err(Error::input(format!("forward step {n} needs strings of length {n} < {}", self.len)));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(format!("epsilon: must lie in [0, 1], got {epsilon}")));
        }
        let a = self.num_actions();
        let logp = self.action_log_probs(policy, xs)?;
        let mut next = Vec::with_capacity(xs.len());
        let mut log_fwd = Vec::with_capacity(xs.len());
        for (x, row) in xs.iter().zip(logp.chunks(a)) {
            let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
            let action = if explore {
                rng.random_range(0..a)
            } else {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = a - 1;
                for (j, lp) in row.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                pick
            };
            let child = self.apply(x, action);
            let picked: Vec<f64> = self.actions_between(x, &child).iter().map(|&j| row[j]).collect();
            log_fwd.push(logsumexp(&picked));
            next.push(child);
        }
        Ok((next, log_fwd))
    }

    fn record_log_fwd(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        prev: &[&Vec<u8>],
        next: &[&Vec<u8>],
        _ns: &[usize],
    ) -> Result<Var> {
        let feats = tape.constant(self.feature_tensor(prev));
        let logits = vars.net.forward(tape, feats);
        let logp = tape.log_softmax_rows(logits);
        let mut sets = Vec::with_capacity(prev.len());
        for (x, y) in prev.iter().zip(next) {
            let s = self.actions_between(x, y);
            if s.is_empty() {
                return Err(Error::input(format!(
                    "'{}' is not a child of '{}'",
                    self.render(y),
                    self.render(x)
                )));
            }
            sets.push(s);
        }
        Ok(tape.gather_logsumexp(logp, sets))
    }

    fn backward_sample<R: Rng + ?Sized>(&self, x: &Vec<u8>, _n: usize, rng: &mut R) -> (Vec<u8>, f64) {
        let mut parents = discrete_parents(x);
        let idx = if parents.len() > 1 { rng.random_range(0..parents.len()) } else { 0 };
        let (p, prob) = parents.swap_remove(idx);
        (p, prob.ln())
    }

    fn backward_logpdf(&self, x_prev: &Vec<u8>, x: &Vec<u8>, _n: usize) -> f64 {
        discrete_parents(x)
            .into_iter()
            .find(|(p, _)| p == x_prev)
            .map_or(f64::NEG_INFINITY, |(_, prob)| prob.ln())
    }

    fn exact_sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Vec<u8>>> {
        let all = self.all_terminals()?;
        let logs: Vec<f64> = all.iter().map(|x| self.reward.log_r(x)).collect();
        let weights = crate::math::normalised_weights(&logs);
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in weights {
            acc += w;
            cdf.push(acc);
        }
        Ok((0..count)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let i = cdf.partition_point(|&c| c <= u).min(all.len() - 1);
                all[i].clone()
            })
            .collect())
    }

    fn exact_log_z(&self) -> Option<f64> {
        let all = self.all_terminals().ok()?;
        let logs: Vec<f64> = all.iter().map(|x| self.reward.log_r(x)).collect();
        Some(logsumexp(&logs))
    }

    fn check_terminal(&self, x: &Vec<u8>) -> Result<()> {
        if x.len() != self.len {
            return Err(Error::input(format!("terminal strings have length {}, got {}", self.len, x.len())));
        }
        if x.iter().any(|&v| v as usize >= self.vocab.len()) {
            return Err(Error::input("symbol index outside the vocabulary"));
        }
        Ok(())
    }

    fn state_columns(&self) -> Vec<String> {
        vec!["x".to_string()]
    }

    fn state_fields(&self, x: &Vec<u8>) -> Vec<String> {
        vec![self.render(x)]
    }
}

//! Finite MDPs with an indexed reward space and terminal-state convention.
//!
//! Transitions are stored per (state, action) as rows of
//! `(reward index, next state, probability)`. Terminal states are absorbing:
//! every action self-loops with reward zero and probability one, so backups
//! never need a special case for sources. A transition *into* a terminal
//! state carries its reward and then contributes nothing further.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::transforms::{h_forward_raw, h_inverse_raw};
use crate::{Error, Result};

/// Kernel rows must sum to one within this tolerance.
pub const KERNEL_ROW_TOLERANCE: f64 = 1e-12;

/// A finite MDP. `kernel[s][a]` lists `(reward_idx, next_state, prob)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub rewards: Vec<f64>,
    pub kernel: Vec<Vec<Vec<(usize, usize, f64)>>>,
    pub terminal: Vec<bool>,
}

impl FiniteMdp {
    /// Checks every structural invariant and returns all violations.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.n_states == 0 {
            errs.push("no states".into());
        }
        if self.n_actions == 0 {
            errs.push("no actions".into());
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma < 1.0) {
            errs.push(format!("discount {} outside (0, 1)", self.gamma));
        }
        if self.rewards.is_empty() {
            errs.push("empty reward space".into());
        }
        for (i, &r) in self.rewards.iter().enumerate() {
            if !r.is_finite() {
                errs.push(format!("reward {i} is not finite"));
            }
        }
        if self.terminal.len() != self.n_states {
            errs.push(format!(
                "terminal flags for {} states, expected {}",
                self.terminal.len(),
                self.n_states
            ));
        }
        if self.kernel.len() != self.n_states {
            errs.push(format!(
                "kernel has {} states, expected {}",
                self.kernel.len(),
                self.n_states
            ));
        }
        for (s, rows) in self.kernel.iter().enumerate() {
            if rows.len() != self.n_actions {
                errs.push(format!("state {s} has {} action rows", rows.len()));
                continue;
            }
            for (a, row) in rows.iter().enumerate() {
                if row.is_empty() {
                    errs.push(format!("empty kernel row at ({s}, {a})"));
                    continue;
                }
                let mut sum = 0.0;
                for &(r_idx, next, p) in row {
                    if r_idx >= self.rewards.len() {
                        errs.push(format!("reward index {r_idx} out of range at ({s}, {a})"));
                    }
                    if next >= self.n_states {
                        errs.push(format!("next state {next} out of range at ({s}, {a})"));
                    }
                    if !(p.is_finite() && p >= 0.0) {
                        errs.push(format!("probability {p} at ({s}, {a})"));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > KERNEL_ROW_TOLERANCE {
                    errs.push(format!("kernel row at ({s}, {a}) sums to {sum}"));
                }
                if self.terminal.get(s).copied().unwrap_or(false) {
                    let absorbing = row.len() == 1
                        && row[0].1 == s
                        && row[0].2 == 1.0
                        && self.rewards.get(row[0].0).copied() == Some(0.0);
                    if !absorbing {
                        errs.push(format!(
                            "terminal state {s} action {a} is not a zero-reward self-loop"
                        ));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Validates and wraps violations into an error.
    pub fn validated(self) -> Result<Self> {
        match self.validate() {
            Ok(()) => Ok(self),
            Err(errs) => Err(Error::InvalidMdp(errs)),
        }
    }

    /// Draws `(reward, next_state, entered_terminal)` from the kernel row by
    /// inverse-CDF on the row probabilities. The source state must be
    /// non-terminal.
    pub fn sample_transition<R: Rng>(
        &self,
        s: usize,
        a: usize,
        rng: &mut R,
    ) -> Result<(f64, usize, bool)> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::InvalidArgument(format!("state/action ({s}, {a}) out of range")));
        }
        if self.terminal[s] {
            return Err(Error::InvalidArgument(format!("sampling from terminal state {s}")));
        }
        let row = &self.kernel[s][a];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = row.len() - 1;
        for (i, &(_, _, p)) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let (r_idx, next, _) = row[chosen];
        Ok((self.rewards[r_idx], next, self.terminal[next]))
    }

    /// Largest reward magnitude.
    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Bound on any discounted return magnitude: `max|r| / (1 - gamma)`.
    pub fn return_bound(&self) -> f64 {
        self.max_abs_reward() / (1.0 - self.gamma)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: FiniteMdp = serde_json::from_str(text)?;
        mdp.validated()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A policy: one action per state, or one distribution over actions per
/// state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Deterministic(Vec<usize>),
    Stochastic(Vec<Vec<f64>>),
}

impl Policy {
    pub fn validate(&self, n_states: usize, n_actions: usize) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        match self {
            Policy::Deterministic(actions) => {
                if actions.len() != n_states {
                    errs.push(format!("{} entries for {n_states} states", actions.len()));
                }
                for (s, &a) in actions.iter().enumerate() {
                    if a >= n_actions {
                        errs.push(format!("action {a} out of range at state {s}"));
                    }
                }
            }
            Policy::Stochastic(dists) => {
                if dists.len() != n_states {
                    errs.push(format!("{} entries for {n_states} states", dists.len()));
                }
                for (s, d) in dists.iter().enumerate() {
                    if d.len() != n_actions {
                        errs.push(format!("state {s} has {} action probabilities", d.len()));
                    }
                    let sum: f64 = d.iter().sum();
                    if (sum - 1.0).abs() > KERNEL_ROW_TOLERANCE {
                        errs.push(format!("state {s} distribution sums to {sum}"));
                    }
                    if d.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
                        errs.push(format!("state {s} has an invalid probability"));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// The action taken at `s`; for stochastic policies, the mode
    /// (lowest index on ties).
    pub fn action(&self, s: usize) -> usize {
        match self {
            Policy::Deterministic(actions) => actions[s],
            Policy::Stochastic(dists) => {
                let d = &dists[s];
                let mut best = 0;
                for (a, &p) in d.iter().enumerate() {
                    if p > d[best] {
                        best = a;
                    }
                }
                best
            }
        }
    }
}

/// The open interval of deterministic rewards `r` for which the two-branch
/// construction of [`build_counterexample`] separates the mean-greedy and
/// transformed-greedy actions: `(h_inverse(h(R)/2), R/2)`. Nonempty for
/// every `R > 0` because `h` is strictly concave on the positive axis.
pub fn admissible_r_interval(big_r: f64, eps: f64) -> Result<(f64, f64)> {
    if !(big_r.is_finite() && big_r > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "branch reward must be finite and > 0, got {big_r}"
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("regularizer {eps}")));
    }
    let lo = h_inverse_raw(h_forward_raw(big_r, eps) / 2.0, eps);
    Ok((lo, big_r / 2.0))
}

/// Builds the four-state MDP on which mean-greedy and transformed-greedy
/// action selection disagree: from the start state, action 0 reaches two
/// terminal states with probability one half each (rewards 0 and `R`),
/// action 1 reaches a terminal state deterministically with reward `r`.
/// `r` must lie strictly inside [`admissible_r_interval`].
pub fn build_counterexample(big_r: f64, r: f64, gamma: f64, eps: f64) -> Result<FiniteMdp> {
    let (lo, hi) = admissible_r_interval(big_r, eps)?;
    if !(r > lo && r < hi) {
        return Err(Error::InvalidArgument(format!(
            "deterministic reward {r} outside admissible interval ({lo}, {hi})"
        )));
    }
    let mdp = FiniteMdp {
        n_states: 4,
        n_actions: 2,
        gamma,
        rewards: vec![0.0, big_r, r],
        kernel: vec![
            vec![
                vec![(0, 1, 0.5), (1, 2, 0.5)],
                vec![(2, 3, 1.0)],
            ],
            vec![vec![(0, 1, 1.0)], vec![(0, 1, 1.0)]],
            vec![vec![(0, 2, 1.0)], vec![(0, 2, 1.0)]],
            vec![vec![(0, 3, 1.0)], vec![(0, 3, 1.0)]],
        ],
        terminal: vec![false, true, true, true],
    };
    mdp.validated()
}

/// Options for [`random_mdp`].
#[derive(Debug, Clone)]
pub struct RandomMdpConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_rewards: usize,
    pub gamma: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    /// Make the last state terminal.
    pub ensure_terminal: bool,
    /// Cap the number of kernel-row entries whose successor is
    /// non-terminal. With `Some(1)`, support growth under exact
    /// distributional iteration is linear instead of multiplicative.
    pub max_nonterminal_successors: Option<usize>,
}

impl RandomMdpConfig {
    pub fn new(n_states: usize, n_actions: usize, n_rewards: usize, gamma: f64) -> Self {
        RandomMdpConfig {
            n_states,
            n_actions,
            n_rewards,
            gamma,
            reward_min: -1.0,
            reward_max: 1.0,
            ensure_terminal: false,
            max_nonterminal_successors: None,
        }
    }
}

/// Generates a valid random MDP: rewards uniform in the configured range
/// (index 0 pinned to zero for the terminal convention), kernel rows over
/// distinct `(reward, next_state)` pairs with flat-Dirichlet probabilities.
pub fn random_mdp<R: Rng>(cfg: &RandomMdpConfig, rng: &mut R) -> FiniteMdp {
    assert!(cfg.n_states >= 1 && cfg.n_actions >= 1 && cfg.n_rewards >= 1);
    let mut rewards = vec![0.0];
    for _ in 1..cfg.n_rewards {
        rewards.push(rng.gen_range(cfg.reward_min..cfg.reward_max));
    }
    let mut terminal = vec![false; cfg.n_states];
    if cfg.ensure_terminal {
        terminal[cfg.n_states - 1] = true;
    }
    let terminals: Vec<usize> = (0..cfg.n_states).filter(|&s| terminal[s]).collect();
    let nonterminals: Vec<usize> = (0..cfg.n_states).filter(|&s| !terminal[s]).collect();

    let mut kernel = Vec::with_capacity(cfg.n_states);
    for s in 0..cfg.n_states {
        let mut rows = Vec::with_capacity(cfg.n_actions);
        for _ in 0..cfg.n_actions {
            if terminal[s] {
                rows.push(vec![(0, s, 1.0)]);
                continue;
            }
            let mut entries: Vec<(usize, usize)> = Vec::new();
            match cfg.max_nonterminal_successors {
                Some(cap) => {
                    let n_cont = rng.gen_range(0..=cap.min(nonterminals.len()));
                    for _ in 0..n_cont {
                        loop {
                            let pair = (
                                rng.gen_range(0..cfg.n_rewards),
                                nonterminals[rng.gen_range(0..nonterminals.len())],
                            );
                            if !entries.contains(&pair) {
                                entries.push(pair);
                                break;
                            }
                        }
                    }
                    let max_term = cfg.n_rewards.min(3);
                    let lo = usize::from(entries.is_empty());
                    let n_term = if terminals.is_empty() { 0 } else { rng.gen_range(lo..=max_term) };
                    for _ in 0..n_term {
                        loop {
                            let pair = (
                                rng.gen_range(0..cfg.n_rewards),
                                terminals[rng.gen_range(0..terminals.len())],
                            );
                            if !entries.contains(&pair) {
                                entries.push(pair);
                                break;
                            }
                        }
                    }
                    if entries.is_empty() {
                        entries.push((rng.gen_range(0..cfg.n_rewards), nonterminals[rng.gen_range(0..nonterminals.len())]));
                    }
                }
                None => {
                    let grid = cfg.n_rewards * cfg.n_states;
                    let k = rng.gen_range(1..=grid.min(6));
                    let mut cells: Vec<usize> = (0..grid).collect();
                    for i in 0..k {
                        let j = rng.gen_range(i..grid);
                        cells.swap(i, j);
                    }
                    for &cell in &cells[..k] {
                        entries.push((cell / cfg.n_states, cell % cfg.n_states));
                    }
                }
            }
            let raw: Vec<f64> = (0..entries.len()).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let sum: f64 = raw.iter().sum();
            let row: Vec<(usize, usize, f64)> = entries
                .iter()
                .zip(&raw)
                .map(|(&(r_idx, next), &g)| (r_idx, next, g / sum))
                .collect();
            rows.push(row);
        }
        kernel.push(rows);
    }
    FiniteMdp {
        n_states: cfg.n_states,
        n_actions: cfg.n_actions,
        gamma: cfg.gamma,
        rewards,
        kernel,
        terminal,
    }
}

//! Episodic wrapper around a finite MDP, plus the toy environments used by
//! the learning experiments.

use rand::Rng;

use crate::mdp::FiniteMdp;
use crate::{Error, Result};

/// What one environment step produced. `truncated` means the per-episode
/// step cap was hit; the transition itself is not terminal and learners
/// should keep bootstrapping through it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
    pub truncated: bool,
}

/// Episodic view of a finite MDP: a fixed start state, sampled
/// transitions, and a step cap guarding against non-terminating policies.
#[derive(Debug, Clone)]
pub struct EpisodicEnv {
    mdp: FiniteMdp,
    start: usize,
    max_episode_steps: usize,
    state: usize,
    steps_in_episode: usize,
    needs_reset: bool,
}

impl EpisodicEnv {
    pub fn new(mdp: FiniteMdp, start: usize, max_episode_steps: usize) -> Result<Self> {
        mdp.clone().validated()?;
        if start >= mdp.n_states || mdp.terminal[start] {
            return Err(Error::InvalidArgument(format!(
                "start state {start} must be a valid non-terminal state"
            )));
        }
        if max_episode_steps == 0 {
            return Err(Error::InvalidArgument("episode step cap must be positive".into()));
        }
        Ok(EpisodicEnv {
            mdp,
            start,
            max_episode_steps,
            state: start,
            steps_in_episode: 0,
            needs_reset: false,
        })
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn reset(&mut self) -> usize {
        self.state = self.start;
        self.steps_in_episode = 0;
        self.needs_reset = false;
        self.state
    }

    pub fn step<R: Rng>(&mut self, action: usize, rng: &mut R) -> Result<StepOutcome> {
        if self.needs_reset {
            return Err(Error::InvalidArgument("episode over; reset the environment".into()));
        }
        let (reward, next, terminal) = self.mdp.sample_transition(self.state, action, rng)?;
        self.steps_in_episode += 1;
        let truncated = !terminal && self.steps_in_episode >= self.max_episode_steps;
        self.state = next;
        self.needs_reset = terminal || truncated;
        Ok(StepOutcome { reward, next_state: next, terminal, truncated })
    }
}

/// Five-state stochastic chain: from each of the four line states,
/// `advance` (action 0) moves forward with probability 0.8 and stays put
/// otherwise, paying 1 on the final advance into the goal; `quit`
/// (action 1) ends the episode immediately for 0.2. Advancing everywhere
/// is optimal at discount 0.99 and every optimal action value is
/// separated from the quit value by more than 0.7.
pub fn stochastic_chain_mdp() -> FiniteMdp {
    let goal = 4;
    let mut kernel = Vec::new();
    for s in 0..4 {
        let advance = if s == 3 {
            vec![(1, goal, 0.8), (0, s, 0.2)]
        } else {
            vec![(0, s + 1, 0.8), (0, s, 0.2)]
        };
        let quit = vec![(2, goal, 1.0)];
        kernel.push(vec![advance, quit]);
    }
    kernel.push(vec![vec![(0, goal, 1.0)], vec![(0, goal, 1.0)]]);
    FiniteMdp {
        n_states: 5,
        n_actions: 2,
        gamma: 0.99,
        rewards: vec![0.0, 1.0, 0.2],
        kernel,
        terminal: vec![false, false, false, false, true],
    }
}

//! Desk-scale approximate learner. A small network predicts per-action
//! discrete return distributions in transformed outcome space; bootstrap
//! targets come from a periodically cloned copy of the parameters via the
//! conjugate map, and the fit is driven by analytic gradients of the
//! squared Cramér distance.

pub mod env;
pub mod network;
pub mod optimizer;
pub mod replay;

pub use env::{stochastic_chain_mdp, EpisodicEnv, StepOutcome};
pub use network::{ForwardPass, NetworkParams, NetworkShape};
pub use optimizer::{Adam, AdamConfig};
pub use replay::{ReplayBuffer, Transition};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::measures::{cramer_sq, cramer_sq_grad_raw, DiscreteMeasure};
use crate::mdp::Policy;
use crate::operators::{greedy_policy, QFunction};
use crate::transforms::{conjugate_map, Homeomorphism};
use crate::{Error, Result};

/// Everything a training run needs besides the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Atoms per action distribution.
    pub n_atoms: usize,
    pub gamma: f64,
    /// Scale of the return transform.
    pub beta: f64,
    /// Regularizer inside the return transform.
    pub eps_h: f64,
    /// Starting value of the trainable support scale.
    pub alpha0: f64,
    /// Fixed squashing scale of the atom head.
    pub c: f64,
    pub trunk_width1: usize,
    pub trunk_width2: usize,
    pub embed_width: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Updates start once the buffer holds this many transitions.
    pub min_history: usize,
    /// One optimizer update every this many environment steps.
    pub train_freq: u64,
    /// Target parameters are recloned every this many steps.
    pub target_period: u64,
    pub total_steps: u64,
    pub eps_start: f64,
    pub eps_min: f64,
    /// Steps over which exploration decays linearly to its minimum.
    pub eps_decay_horizon: u64,
    pub max_episode_steps: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            n_atoms: 32,
            gamma: 0.99,
            beta: 1.99,
            eps_h: 0.001,
            alpha0: 10.0,
            c: 5.0,
            trunk_width1: 32,
            trunk_width2: 32,
            embed_width: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 3.125e-4,
            grad_clip: 10.0,
            batch_size: 32,
            replay_capacity: 10_000,
            min_history: 500,
            train_freq: 4,
            target_period: 500,
            total_steps: 50_000,
            eps_start: 1.0,
            eps_min: 0.01,
            eps_decay_horizon: 25_000,
            max_episode_steps: 1_000,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("discount {} outside (0, 1)", self.gamma));
        }
        if self.n_atoms == 0 {
            return bad("atom count must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.replay_capacity < self.batch_size {
            return bad(format!(
                "replay capacity {} below batch size {}",
                self.replay_capacity, self.batch_size
            ));
        }
        if self.min_history < self.batch_size {
            return bad(format!(
                "min history {} below batch size {}",
                self.min_history, self.batch_size
            ));
        }
        if self.train_freq == 0 || self.target_period == 0 {
            return bad("train frequency and target period must be positive".into());
        }
        if self.max_episode_steps == 0 {
            return bad("episode step cap must be positive".into());
        }
        if !(self.eps_min.is_finite()
            && self.eps_start.is_finite()
            && (0.0..=1.0).contains(&self.eps_min)
            && self.eps_min <= self.eps_start
            && self.eps_start <= 1.0)
        {
            return bad(format!(
                "exploration schedule ({} -> {}) invalid",
                self.eps_start, self.eps_min
            ));
        }
        self.adam().validate()?;
        // The transform and network constructors check their own fields.
        self.phi()?;
        Ok(())
    }

    /// The return transform this configuration trains under.
    pub fn phi(&self) -> Result<Homeomorphism> {
        Homeomorphism::scaled_h(self.beta, self.eps_h)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            clip_norm: self.grad_clip,
        }
    }

    fn shape_for(&self, n_states: usize, n_actions: usize) -> NetworkShape {
        NetworkShape {
            n_states,
            n_actions,
            n_atoms: self.n_atoms,
            trunk_width1: self.trunk_width1,
            trunk_width2: self.trunk_width2,
            embed_width: self.embed_width,
        }
    }
}

/// Exploration probability at a step: linear decay from the start value to
/// the minimum over the horizon, constant afterwards.
pub fn epsilon_at(cfg: &TrainerConfig, step: u64) -> f64 {
    if step >= cfg.eps_decay_horizon {
        return cfg.eps_min;
    }
    let frac = step as f64 / cfg.eps_decay_horizon as f64;
    cfg.eps_start - (cfg.eps_start - cfg.eps_min) * frac
}

/// Mean of `phi`-inverted atoms per action: the value table implied by one
/// forward pass.
pub fn action_values(fwd: &ForwardPass, phi: &Homeomorphism) -> Vec<f64> {
    (0..fwd.n_actions)
        .map(|a| {
            let (atoms, masses) = (fwd.atoms_of(a), fwd.masses_of(a));
            let mut acc = 0.0;
            for i in 0..fwd.n_atoms {
                acc += masses[i] * phi.inverse_raw(atoms[i]);
            }
            acc
        })
        .collect()
}

/// Lowest-index action maximizing [`action_values`].
pub fn greedy_action(fwd: &ForwardPass, phi: &Homeomorphism) -> usize {
    let values = action_values(fwd, phi);
    let mut best = 0;
    for (a, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = a;
        }
    }
    best
}

/// One action under the exploration schedule: uniform with probability
/// `epsilon_at`, greedy otherwise.
pub fn act_epsilon_greedy<R: Rng>(
    params: &NetworkParams,
    state: usize,
    step: u64,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<usize> {
    let fwd = params.forward(state)?;
    let phi = cfg.phi()?;
    Ok(choose_action(&fwd, epsilon_at(cfg, step), &phi, rng))
}

fn choose_action<R: Rng>(
    fwd: &ForwardPass,
    epsilon: f64,
    phi: &Homeomorphism,
    rng: &mut R,
) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..fwd.n_actions)
    } else {
        greedy_action(fwd, phi)
    }
}

/// One action's output as a canonical measure.
pub fn measure_for_action(fwd: &ForwardPass, a: usize) -> Result<DiscreteMeasure> {
    DiscreteMeasure::new(fwd.atoms_of(a).to_vec(), fwd.masses_of(a).to_vec())
}

/// Maps a next-state measure back through reward and discount in
/// transformed space: atoms through `phi . (r + gamma .) . phi^-1`, masses
/// unchanged.
pub fn bootstrap_measure(
    mu: &DiscreteMeasure,
    r: f64,
    gamma: f64,
    phi: &Homeomorphism,
) -> Result<DiscreteMeasure> {
    mu.pushforward(conjugate_map(phi, r, gamma)?)
}

/// The regression target for one transition, built entirely from the
/// target parameters (both the greedy choice at the next state and the
/// measure being mapped); terminal transitions collapse to a point mass at
/// `phi(r)`. No gradient ever flows through the result.
pub fn target_distribution(
    t: &Transition,
    target: &NetworkParams,
    phi: &Homeomorphism,
    gamma: f64,
) -> Result<DiscreteMeasure> {
    if t.terminal {
        return DiscreteMeasure::dirac(phi.forward_raw(t.reward));
    }
    let fwd = target.forward(t.next_state)?;
    let a_star = greedy_action(&fwd, phi);
    let mu = measure_for_action(&fwd, a_star)?;
    bootstrap_measure(&mu, t.reward, gamma, phi)
}

/// Mean squared-Cramér loss of the predictions against fixed target
/// measures, together with its gradient in the flat parameter vector.
pub fn loss_and_grad_against(
    params: &NetworkParams,
    items: &[(usize, usize, DiscreteMeasure)],
) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty loss batch".into()));
    }
    let mut grads = vec![0.0; params.n_params()];
    let scale = 1.0 / items.len() as f64;
    let mut loss_sum = 0.0;
    for &(s, a, ref nu) in items {
        let fwd = params.forward(s)?;
        let atoms = fwd.atoms_of(a).to_vec();
        let masses = fwd.masses_of(a).to_vec();
        loss_sum += cramer_sq(&DiscreteMeasure::new(atoms.clone(), masses.clone())?, nu);
        let (d_atoms, d_masses) = cramer_sq_grad_raw(&atoms, &masses, nu);
        params.backward(&fwd, a, &d_atoms, &d_masses, scale, &mut grads);
    }
    let loss = loss_sum * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "training loss", value: loss });
    }
    Ok((loss, grads))
}

/// Builds bootstrap targets for the batch from the target parameters, then
/// evaluates [`loss_and_grad_against`].
pub fn loss_and_grad(
    params: &NetworkParams,
    batch: &[Transition],
    target: &NetworkParams,
    phi: &Homeomorphism,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut items = Vec::with_capacity(batch.len());
    for t in batch {
        items.push((t.state, t.action, target_distribution(t, target, phi, gamma)?));
    }
    loss_and_grad_against(params, &items)
}

/// One line of the learning record, emitted per completed episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    /// Environment steps taken when the episode ended (1-based).
    pub step: u64,
    /// Episode index (1-based).
    pub episode: u64,
    /// Undiscounted episode return.
    pub ret: f64,
    /// Mean training loss over the episode's updates, if any happened.
    pub mean_loss: Option<f64>,
    pub epsilon: f64,
    pub alpha: f64,
    /// Smallest predicted atom seen while acting this episode.
    pub support_min: f64,
    /// Largest predicted atom seen while acting this episode.
    pub support_max: f64,
}

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<EpisodeRow>,
    pub params: NetworkParams,
    /// Value table implied by the final parameters (zero at terminal
    /// states).
    pub q_hat: QFunction,
    pub greedy: Policy,
    /// Action counts per `(state, action)` flattened pair.
    pub visits: Vec<u64>,
    pub episodes: u64,
    pub steps: u64,
}

fn diverged(step: u64, e: Error) -> Error {
    Error::Diverged { step, reason: e.to_string() }
}

/// Runs the full learning loop: act under the exploration schedule, store
/// transitions, periodically fit sampled batches against bootstrap targets
/// and reclone the target parameters. Numeric failure during an update
/// aborts with the offending step index.
pub fn train(env: &mut EpisodicEnv, cfg: &TrainerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let phi = cfg.phi()?;
    let mdp = env.mdp().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetworkParams::init(
        cfg.shape_for(mdp.n_states, mdp.n_actions),
        cfg.alpha0,
        cfg.c,
        &mut rng,
    )?;
    let mut target = params.clone();
    let mut opt = Adam::new(params.n_params());
    let adam_cfg = cfg.adam();
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;

    let mut rows = Vec::new();
    let mut visits = vec![0u64; mdp.n_states * mdp.n_actions];
    let mut state = env.reset();
    let (mut ep_return, mut ep_loss_sum, mut ep_loss_count) = (0.0, 0.0, 0u64);
    let (mut sup_min, mut sup_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut episode = 0u64;

    for step in 0..cfg.total_steps {
        if step % cfg.target_period == 0 {
            target = params.clone();
        }
        let fwd = params.forward(state).map_err(|e| diverged(step, e))?;
        for &x in &fwd.atoms {
            sup_min = sup_min.min(x);
            sup_max = sup_max.max(x);
        }
        let eps_now = epsilon_at(cfg, step);
        let action = choose_action(&fwd, eps_now, &phi, &mut rng);
        visits[state * mdp.n_actions + action] += 1;
        let out = env.step(action, &mut rng)?;
        ep_return += out.reward;
        buffer.push(Transition {
            state,
            action,
            reward: out.reward,
            next_state: out.next_state,
            terminal: out.terminal,
        });

        if buffer.len() >= cfg.min_history && step % cfg.train_freq == 0 {
            let batch = buffer.sample(cfg.batch_size, &mut rng)?;
            let (loss, grads) = loss_and_grad(&params, &batch, &target, &phi, cfg.gamma)
                .map_err(|e| diverged(step, e))?;
            opt.step(params.theta_mut(), &grads, &adam_cfg).map_err(|e| diverged(step, e))?;
            ep_loss_sum += loss;
            ep_loss_count += 1;
        }

        if out.terminal || out.truncated {
            episode += 1;
            rows.push(EpisodeRow {
                step: step + 1,
                episode,
                ret: ep_return,
                mean_loss: (ep_loss_count > 0).then(|| ep_loss_sum / ep_loss_count as f64),
                epsilon: eps_now,
                alpha: params.alpha(),
                support_min: sup_min,
                support_max: sup_max,
            });
            ep_return = 0.0;
            ep_loss_sum = 0.0;
            ep_loss_count = 0;
            sup_min = f64::INFINITY;
            sup_max = f64::NEG_INFINITY;
            state = env.reset();
        } else {
            state = out.next_state;
        }
    }

    let mut q_hat = QFunction::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        if mdp.terminal[s] {
            continue;
        }
        let fwd = params.forward(s)?;
        for (a, v) in action_values(&fwd, &phi).into_iter().enumerate() {
            q_hat.set(s, a, v);
        }
    }
    let greedy = greedy_policy(&q_hat);
    Ok(TrainOutcome {
        rows,
        params,
        q_hat,
        greedy,
        visits,
        episodes: episode,
        steps: cfg.total_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::DistributionCollection;
    use crate::operators::q_from_collection;

    const EPS: f64 = 0.001;

    fn quick_cfg() -> TrainerConfig {
        TrainerConfig {
            n_atoms: 8,
            trunk_width1: 16,
            trunk_width2: 16,
            embed_width: 8,
            batch_size: 16,
            min_history: 100,
            replay_capacity: 2_000,
            total_steps: 1_500,
            eps_decay_horizon: 800,
            target_period: 100,
            ..TrainerConfig::default()
        }
    }

    fn small_params(seed: u64, alpha0: f64) -> NetworkParams {
        let shape = NetworkShape {
            n_states: 4,
            n_actions: 2,
            n_atoms: 6,
            trunk_width1: 8,
            trunk_width2: 8,
            embed_width: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkParams::init(shape, alpha0, 5.0, &mut rng).unwrap()
    }

    #[test]
    fn epsilon_schedule_endpoints_and_midpoint() {
        let cfg = TrainerConfig::default();
        assert_eq!(epsilon_at(&cfg, 0), 1.0);
        assert_eq!(epsilon_at(&cfg, cfg.eps_decay_horizon), 0.01);
        assert_eq!(epsilon_at(&cfg, cfg.eps_decay_horizon * 10), 0.01);
        let mid = epsilon_at(&cfg, cfg.eps_decay_horizon / 2);
        assert!((mid - 0.505).abs() <= 1e-12, "midpoint {mid}");
    }

    #[test]
    fn config_validation_catches_inconsistencies() {
        assert!(TrainerConfig::default().validate().is_ok());
        let mut cfg = TrainerConfig::default();
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainerConfig::default();
        cfg.min_history = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainerConfig::default();
        cfg.eps_min = 0.5;
        cfg.eps_start = 0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainerConfig::default();
        cfg.replay_capacity = 16;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn greedy_action_prefers_larger_inverted_mean() {
        let phi = Homeomorphism::scaled_h(1.99, EPS).unwrap();
        // Hand-built outputs: action 0 concentrated near phi(1), action 1
        // near phi(2).
        let fwd = ForwardPass {
            state: 0,
            u1: vec![],
            z1: vec![],
            u2: vec![],
            z2: vec![],
            ue: vec![],
            e: vec![],
            t: vec![],
            masses: vec![0.5, 0.5, 0.5, 0.5],
            atoms: vec![
                phi.forward_raw(1.0),
                phi.forward_raw(1.0),
                phi.forward_raw(2.0),
                phi.forward_raw(2.0),
            ],
            n_actions: 2,
            n_atoms: 2,
        };
        assert_eq!(greedy_action(&fwd, &phi), 1);
        // Exact tie: lowest index.
        let tied = ForwardPass { atoms: vec![0.3, 0.7, 0.7, 0.3], ..fwd };
        assert_eq!(greedy_action(&tied, &phi), 0);
    }

    #[test]
    fn greedy_action_agrees_with_collection_tables() {
        let phi = Homeomorphism::scaled_h(1.99, EPS).unwrap();
        for seed in 0..20 {
            let params = small_params(seed, 3.0);
            for s in 0..4 {
                let fwd = params.forward(s).unwrap();
                let measures: Vec<DiscreteMeasure> =
                    (0..2).map(|a| measure_for_action(&fwd, a).unwrap()).collect();
                let coll = DistributionCollection::from_measures(1, 2, measures).unwrap();
                let table = q_from_collection(&coll, &phi).unwrap();
                let values = action_values(&fwd, &phi);
                for a in 0..2 {
                    assert!(
                        (table.get(0, a) - values[a]).abs() <= 1e-12,
                        "seed {seed} state {s} action {a}"
                    );
                }
                if (values[0] - values[1]).abs() > 1e-9 {
                    assert_eq!(greedy_action(&fwd, &phi), table.argmax_action(0));
                }
            }
        }
    }

    #[test]
    fn terminal_target_is_a_point_mass_at_the_transformed_reward() {
        let phi = Homeomorphism::scaled_h(1.99, EPS).unwrap();
        let params = small_params(0, 3.0);
        let t = Transition { state: 0, action: 0, reward: 3.0, next_state: 2, terminal: true };
        let nu = target_distribution(&t, &params, &phi, 0.99).unwrap();
        assert_eq!(nu.len(), 1);
        assert!((nu.atoms()[0] - 1.99597).abs() <= 1e-12);
        assert_eq!(nu.masses(), &[1.0]);
    }

    #[test]
    fn bootstrap_measure_maps_point_masses_through_the_conjugate_map() {
        let id = Homeomorphism::identity();
        let nu = bootstrap_measure(&DiscreteMeasure::dirac(4.0).unwrap(), 0.0, 0.5, &id).unwrap();
        assert_eq!(nu.atoms(), &[2.0]);
        assert_eq!(nu.masses(), &[1.0]);
    }

    #[test]
    fn bootstrap_measure_equals_elementwise_target_rule_bitwise() {
        let phi = Homeomorphism::scaled_h(1.99, EPS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.gen_range(1..=8);
            let atoms: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let sum: f64 = raw.iter().sum();
            let masses: Vec<f64> = raw.iter().map(|g| g / sum).collect();
            let mu = DiscreteMeasure::new(atoms, masses).unwrap();
            let r = rng.gen_range(-2.0..2.0);
            let gamma = rng.gen_range(0.5..0.99);

            let via_pushforward = bootstrap_measure(&mu, r, gamma, &phi).unwrap();
            let mapped: Vec<f64> = mu
                .atoms()
                .iter()
                .map(|&w| phi.forward_raw(r + gamma * phi.inverse_raw(w)))
                .collect();
            let elementwise = DiscreteMeasure::new(mapped, mu.masses().to_vec()).unwrap();
            assert_eq!(via_pushforward.len(), elementwise.len());
            for i in 0..via_pushforward.len() {
                assert_eq!(
                    via_pushforward.atoms()[i].to_bits(),
                    elementwise.atoms()[i].to_bits()
                );
                assert_eq!(
                    via_pushforward.masses()[i].to_bits(),
                    elementwise.masses()[i].to_bits()
                );
            }
        }
    }

    #[test]
    fn loss_is_exactly_zero_against_own_output() {
        let phi = Homeomorphism::scaled_h(1.99, EPS).unwrap();
        let params = small_params(7, 3.0);
        let fwd = params.forward(1).unwrap();
        let nu = measure_for_action(&fwd, 0).unwrap();
        let items = vec![(1usize, 0usize, nu)];
        let (loss, grads) = loss_and_grad_against(&params, &items).unwrap();
        assert_eq!(loss, 0.0);
        // Coincident atoms net out, so only the one-ulp mass renormalization
        // inside the canonical target can leak into the gradient.
        let max_grad = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max_grad <= 1e-12, "gradient magnitude {max_grad} at the minimum");

        // Finite differences around the minimum stay at jitter scale.
        let mut p = params.clone();
        let h = 1e-5;
        for idx in [0, 40, 200, p.n_params() - 1] {
            let base = p.theta()[idx];
            p.theta_mut()[idx] = base + h;
            let up = loss_and_grad_against(&p, &items).unwrap().0;
            p.theta_mut()[idx] = base - h;
            let down = loss_and_grad_against(&p, &items).unwrap().0;
            p.theta_mut()[idx] = base;
            let fd = (up - down) / (2.0 * h);
            assert!(fd.abs() <= 1e-6, "parameter {idx}: finite difference {fd}");
        }
        let _ = phi;
    }

    #[test]
    fn duplicating_a_batch_item_preserves_mean_loss_and_grads() {
        let phi = Homeomorphism::scaled_h(1.99, EPS).unwrap();
        let params = small_params(8, 3.0);
        let target = small_params(9, 3.0);
        let t = Transition { state: 2, action: 1, reward: 0.7, next_state: 3, terminal: false };
        let (l1, g1) = loss_and_grad(&params, &[t], &target, &phi, 0.9).unwrap();
        let (l2, g2) = loss_and_grad(&params, &[t, t], &target, &phi, 0.9).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn targets_are_constants_with_no_gradient_path() {
        let phi = Homeomorphism::scaled_h(1.99, EPS).unwrap();
        let params = small_params(10, 3.0);
        let mut target = small_params(11, 3.0);
        let t = Transition { state: 0, action: 0, reward: 0.3, next_state: 1, terminal: false };
        let (l1, g1) = loss_and_grad(&params, &[t], &target, &phi, 0.9).unwrap();
        assert_eq!(g1.len(), params.n_params());
        // Perturbing the target parameters changes the loss (the target
        // measure moved) yet the gradient vector still addresses only the
        // online parameters.
        let idx = target.n_params() - 1;
        target.theta_mut()[idx] += 0.25;
        let (l2, g2) = loss_and_grad(&params, &[t], &target, &phi, 0.9).unwrap();
        assert_ne!(l1.to_bits(), l2.to_bits());
        assert_eq!(g2.len(), params.n_params());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let phi = Homeomorphism::scaled_h(1.99, EPS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0;
        let mut seed = 100u64;
        while checked < 8 {
            seed += 1;
            let shape = NetworkShape {
                n_states: rng.gen_range(2..=4),
                n_actions: rng.gen_range(1..=3),
                n_atoms: rng.gen_range(2..=6),
                trunk_width1: rng.gen_range(4..=10),
                trunk_width2: rng.gen_range(4..=10),
                embed_width: rng.gen_range(3..=6),
            };
            let mut prng = ChaCha8Rng::seed_from_u64(seed);
            let params = NetworkParams::init(shape, 3.0, 5.0, &mut prng).unwrap();
            let target = NetworkParams::init(shape, 3.0, 5.0, &mut prng).unwrap();
            let mut items = Vec::new();
            for _ in 0..rng.gen_range(1..=3) {
                let t = Transition {
                    state: rng.gen_range(0..shape.n_states),
                    action: rng.gen_range(0..shape.n_actions),
                    reward: rng.gen_range(-2.0..2.0),
                    next_state: rng.gen_range(0..shape.n_states),
                    terminal: rng.gen_range(0..4) == 0,
                };
                items.push((t.state, t.action, target_distribution(&t, &target, &phi, 0.9).unwrap()));
            }
            if !fixture_is_well_separated(&params, &items) {
                continue;
            }
            checked += 1;
            let (_, grads) = loss_and_grad_against(&params, &items).unwrap();
            let mut p = params.clone();
            let h = 1e-5;
            for idx in 0..p.n_params() {
                let base = p.theta()[idx];
                p.theta_mut()[idx] = base + h;
                let up = loss_and_grad_against(&p, &items).unwrap().0;
                p.theta_mut()[idx] = base - h;
                let down = loss_and_grad_against(&p, &items).unwrap().0;
                p.theta_mut()[idx] = base;
                let fd = (up - down) / (2.0 * h);
                let dev = (grads[idx] - fd).abs();
                let tol = 1e-3 * fd.abs().max(grads[idx].abs()) + 1e-6;
                assert!(
                    dev <= tol,
                    "seed {seed} parameter {idx}: analytic {} vs fd {fd}",
                    grads[idx]
                );
            }
        }
    }

    /// Rejects gradient-check fixtures whose loss surface has a kink within
    /// finite-difference reach: atom ties (between or within measures) and
    /// rectifier pre-activations at zero.
    fn fixture_is_well_separated(
        params: &NetworkParams,
        items: &[(usize, usize, DiscreteMeasure)],
    ) -> bool {
        for &(s, a, ref nu) in items {
            let fwd = params.forward(s).unwrap();
            let mut all: Vec<f64> = fwd
                .atoms_of(a)
                .iter()
                .copied()
                .chain(nu.atoms().iter().copied())
                .collect();
            all.sort_by(f64::total_cmp);
            for w in all.windows(2) {
                if w[1] - w[0] < 1e-4 {
                    return false;
                }
            }
            for u in fwd.u1.iter().chain(&fwd.u2).chain(&fwd.ue) {
                if u.abs() < 1e-4 {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn training_smoke_run_produces_a_coherent_record() {
        let cfg = quick_cfg();
        let mut env = EpisodicEnv::new(stochastic_chain_mdp(), 0, cfg.max_episode_steps).unwrap();
        let out = train(&mut env, &cfg).unwrap();
        assert!(!out.rows.is_empty());
        assert_eq!(out.visits.iter().sum::<u64>(), cfg.total_steps);
        assert_eq!(out.episodes, out.rows.len() as u64);
        let mut last_step = 0;
        for row in &out.rows {
            assert!(row.step > last_step);
            last_step = row.step;
            assert!(row.support_min <= row.support_max);
            assert!(row.epsilon <= 1.0 && row.epsilon >= 0.01);
        }
        // Exploration decayed across the run.
        assert!(out.rows.last().unwrap().epsilon < out.rows[0].epsilon);
        // Updates happened once the buffer passed min history. Individual
        // late episodes can be single-step and miss an update tick, so only
        // demand that training occurred somewhere past the warmup.
        assert!(out.rows.iter().rev().take(20).any(|r| r.mean_loss.is_some()));
        for v in out.q_hat.values() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let mut cfg = quick_cfg();
        cfg.total_steps = 400;
        cfg.min_history = 50;
        cfg.batch_size = 8;
        let run = || {
            let mut env =
                EpisodicEnv::new(stochastic_chain_mdp(), 0, cfg.max_episode_steps).unwrap();
            train(&mut env, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.rows, b.rows);
        for (x, y) in a.params.theta().iter().zip(b.params.theta()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_step_run_yields_an_empty_record() {
        let mut cfg = quick_cfg();
        cfg.total_steps = 0;
        let mut env = EpisodicEnv::new(stochastic_chain_mdp(), 0, cfg.max_episode_steps).unwrap();
        let out = train(&mut env, &cfg).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.episodes, 0);
        assert_eq!(out.visits.iter().sum::<u64>(), 0);
    }

    #[test]
    fn oversized_support_scale_shrinks_on_a_small_return_environment() {
        let mut cfg = quick_cfg();
        cfg.alpha0 = 50.0;
        cfg.total_steps = 20_000;
        let mut env = EpisodicEnv::new(stochastic_chain_mdp(), 0, cfg.max_episode_steps).unwrap();
        let out = train(&mut env, &cfg).unwrap();
        // Returns here never leave [0, 1], so a +-50 span is far too wide:
        // the trainable scale must come down...
        let alpha = out.params.alpha();
        assert!(alpha < 49.98, "support scale {alpha} did not decrease from 50");
        let first = out.rows.first().unwrap();
        let last = out.rows.last().unwrap();
        assert!(last.alpha < first.alpha);
        // ...and the predicted support must settle inside the realized
        // return range rather than exploit the oversized scale.
        assert!(last.support_max < 2.0, "final support {}", last.support_max);
        assert!(last.support_min > -2.0, "final support {}", last.support_min);
    }
}

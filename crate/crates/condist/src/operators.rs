//! Tabular backup operators over finite MDPs.
//!
//! Four backups share the kernel-row walk: the scalar optimality backup on
//! Q-tables, its distributional counterpart on measure collections, the
//! conjugated variant that works in transformed return space, and the
//! transformed-value backup that applies a homeomorphism inside a scalar
//! backup (the one whose greedy action can be wrong under stochastic
//! transitions). A transition into a terminal state contributes only its
//! immediate reward — as a scalar, a point mass, or a transformed point
//! mass — so terminal rows never bootstrap.

use serde::{Deserialize, Serialize};

use crate::mdp::{FiniteMdp, Policy};
use crate::measures::{cramer_sq, merge_atoms, mixture, DiscreteMeasure, DistributionCollection};
use crate::transforms::{conjugate_map, h_forward_raw, h_inverse_raw, Homeomorphism};
use crate::{Error, Result};

/// A table of action values indexed by `(state, action)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QFunction {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QFunction {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {n_states}x{n_actions} table",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "action value", value: *v });
        }
        Ok(QFunction { n_states, n_actions, values })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest value at `s` over actions.
    pub fn state_max(&self, s: usize) -> f64 {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Lowest-index maximizing action at `s`.
    pub fn argmax_action(&self, s: usize) -> usize {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    /// Sup-norm distance to another table of the same shape.
    pub fn sup_distance(&self, other: &QFunction) -> f64 {
        assert_eq!(
            (self.n_states, self.n_actions),
            (other.n_states, other.n_actions),
            "Q-table shapes differ"
        );
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Deterministic greedy policy: lowest-index argmax per state.
pub fn greedy_policy(q: &QFunction) -> Policy {
    Policy::Deterministic((0..q.n_states).map(|s| q.argmax_action(s)).collect())
}

/// One scalar optimality backup:
/// `Q'(s,a) = sum_row p * (r + gamma * max_a' Q(s',a'))`, with transitions
/// into terminal states contributing `p * r`.
pub fn bellman_backup(mdp: &FiniteMdp, q: &QFunction) -> QFunction {
    let mut out = QFunction::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut acc = 0.0;
            for &(r_idx, next, p) in &mdp.kernel[s][a] {
                let r = mdp.rewards[r_idx];
                if mdp.terminal[next] {
                    acc += p * r;
                } else {
                    acc += p * (r + mdp.gamma * q.state_max(next));
                }
            }
            out.set(s, a, acc);
        }
    }
    out
}

/// One transformed-value backup:
/// `Q'(s,a) = sum_row p * h(r + gamma * max_a' h_inv(Q(s',a')))`, terminal
/// transitions contributing `p * h(r)`. Taking `h` inside the expectation
/// is exactly what breaks greedy selection under stochastic transitions.
pub fn transformed_value_backup(mdp: &FiniteMdp, q: &QFunction, eps: f64) -> Result<QFunction> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("regularizer {eps}")));
    }
    let mut out = QFunction::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut acc = 0.0;
            for &(r_idx, next, p) in &mdp.kernel[s][a] {
                let r = mdp.rewards[r_idx];
                if mdp.terminal[next] {
                    acc += p * h_forward_raw(r, eps);
                } else {
                    let best = (0..mdp.n_actions)
                        .map(|ap| h_inverse_raw(q.get(next, ap), eps))
                        .fold(f64::NEG_INFINITY, f64::max);
                    acc += p * h_forward_raw(r + mdp.gamma * best, eps);
                }
            }
            if !acc.is_finite() {
                return Err(Error::NonFinite { what: "transformed backup value", value: acc });
            }
            out.set(s, a, acc);
        }
    }
    Ok(out)
}

/// Per-state greedy actions and the value table they come from, where each
/// entry is `score(measure)`.
fn greedy_by<F>(coll: &DistributionCollection, score: F) -> Result<(Vec<usize>, QFunction)>
where
    F: Fn(&DiscreteMeasure) -> Result<f64>,
{
    let (n_states, n_actions) = (coll.n_states(), coll.n_actions());
    let mut table = QFunction::zeros(n_states, n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            table.set(s, a, score(coll.get(s, a))?);
        }
    }
    let actions = (0..n_states).map(|s| table.argmax_action(s)).collect();
    Ok((actions, table))
}

/// One distributional optimality backup: the output at `(s,a)` is the
/// kernel-row mixture of the input measure at `(s', a*(s'))` pushed through
/// `x -> r + gamma * x`, where `a*` maximizes the input's expectations
/// (lowest index on ties). Terminal transitions contribute a point mass at
/// `r`.
pub fn distributional_backup(
    mdp: &FiniteMdp,
    eta: &DistributionCollection,
) -> Result<DistributionCollection> {
    if (eta.n_states(), eta.n_actions()) != (mdp.n_states, mdp.n_actions) {
        return Err(Error::InvalidArgument("collection shape does not match MDP".into()));
    }
    let (greedy, _) = greedy_by(eta, |m| Ok(m.expectation()))?;
    let gamma = mdp.gamma;
    let mut out = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = &mdp.kernel[s][a];
            let mut weights = Vec::with_capacity(row.len());
            let mut parts = Vec::with_capacity(row.len());
            for &(r_idx, next, p) in row {
                let r = mdp.rewards[r_idx];
                let part = if mdp.terminal[next] {
                    DiscreteMeasure::dirac(r)?
                } else {
                    eta.get(next, greedy[next]).pushforward(|x| r + gamma * x)?
                };
                weights.push(p);
                parts.push(part);
            }
            out.push(mixture(&weights, &parts)?);
        }
    }
    DistributionCollection::from_measures(mdp.n_states, mdp.n_actions, out)
}

/// One conjugated distributional backup. Identical in shape to
/// [`distributional_backup`], but greedy actions maximize expectations of
/// `phi`-inverted atoms, each pushforward is `phi . (r + gamma .) . phi^-1`,
/// and terminal transitions contribute a point mass at `phi(r)`. With the
/// identity transform the output matches [`distributional_backup`] bit for
/// bit. `merge_cap` optionally compresses each output measure to at most
/// that many atoms.
pub fn conjugated_backup(
    mdp: &FiniteMdp,
    xi: &DistributionCollection,
    phi: &Homeomorphism,
    merge_cap: Option<usize>,
) -> Result<DistributionCollection> {
    if (xi.n_states(), xi.n_actions()) != (mdp.n_states, mdp.n_actions) {
        return Err(Error::InvalidArgument("collection shape does not match MDP".into()));
    }
    let (greedy, _) = greedy_by(xi, |m| m.expectation_map(|x| phi.inverse_raw(x)))?;
    let mut out = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = &mdp.kernel[s][a];
            let mut weights = Vec::with_capacity(row.len());
            let mut parts = Vec::with_capacity(row.len());
            for &(r_idx, next, p) in row {
                let r = mdp.rewards[r_idx];
                let part = if mdp.terminal[next] {
                    DiscreteMeasure::dirac(phi.forward_raw(r))?
                } else {
                    let g = conjugate_map(phi, r, mdp.gamma)?;
                    xi.get(next, greedy[next]).pushforward(g)?
                };
                weights.push(p);
                parts.push(part);
            }
            let mixed = mixture(&weights, &parts)?;
            out.push(match merge_cap {
                Some(cap) => merge_atoms(&mixed, cap)?,
                None => mixed,
            });
        }
    }
    DistributionCollection::from_measures(mdp.n_states, mdp.n_actions, out)
}

/// The value table induced by a collection in transformed space:
/// `Q(s,a) = E[phi^-1(X)]` for `X ~ xi(s,a)`.
pub fn q_from_collection(xi: &DistributionCollection, phi: &Homeomorphism) -> Result<QFunction> {
    let (_, table) = greedy_by(xi, |m| m.expectation_map(|x| phi.inverse_raw(x)))?;
    Ok(table)
}

/// The all-point-mass collection at `phi(0)`, the default starting point
/// for conjugated iteration (bounded support by construction).
pub fn initial_collection(
    n_states: usize,
    n_actions: usize,
    phi: &Homeomorphism,
) -> Result<DistributionCollection> {
    Ok(DistributionCollection::filled(
        n_states,
        n_actions,
        DiscreteMeasure::dirac(phi.forward_raw(0.0))?,
    ))
}

/// Progress of a fixed-point iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// Number of backups applied.
    pub iterations: usize,
    /// Step change at the last backup.
    pub final_residual: f64,
    /// Whether the final residual reached the tolerance.
    pub converged: bool,
    /// Step change after each backup, in order.
    pub residual_trace: Vec<f64>,
}

/// Iterates `step` from `init` until the step change (measured by
/// `residual`) is at most `tol`, or `max_iter` backups have been applied.
/// Always returns the latest iterate; `converged` distinguishes the two
/// exits.
pub fn fixed_point<T, S, D>(
    init: T,
    mut step: S,
    residual: D,
    tol: f64,
    max_iter: usize,
) -> Result<(T, IterationReport)>
where
    S: FnMut(&T) -> Result<T>,
    D: Fn(&T, &T) -> f64,
{
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    let mut current = init;
    let mut trace = Vec::new();
    loop {
        let next = step(&current)?;
        let res = residual(&current, &next);
        trace.push(res);
        current = next;
        if res <= tol || trace.len() >= max_iter {
            let report = IterationReport {
                iterations: trace.len(),
                final_residual: res,
                converged: res <= tol,
                residual_trace: trace,
            };
            return Ok((current, report));
        }
    }
}

/// Largest per-(s,a) Cramér distance between two collections of the same
/// shape; the residual used for distributional fixed-point iteration.
pub fn collection_residual(a: &DistributionCollection, b: &DistributionCollection) -> f64 {
    assert_eq!(
        (a.n_states(), a.n_actions()),
        (b.n_states(), b.n_actions()),
        "collection shapes differ"
    );
    let mut worst = 0.0f64;
    for ((s, act), m) in a.iter() {
        worst = worst.max(cramer_sq(m, b.get(s, act)).sqrt());
    }
    worst
}

/// Scalar optimality iteration from the zero table; the oracle for every
/// equivalence test.
pub fn value_iteration(
    mdp: &FiniteMdp,
    tol: f64,
    max_iter: usize,
) -> Result<(QFunction, IterationReport)> {
    fixed_point(
        QFunction::zeros(mdp.n_states, mdp.n_actions),
        |q| Ok(bellman_backup(mdp, q)),
        QFunction::sup_distance,
        tol,
        max_iter,
    )
}

/// Transformed-value iteration from the zero table.
pub fn transformed_fixed_point(
    mdp: &FiniteMdp,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(QFunction, IterationReport)> {
    fixed_point(
        QFunction::zeros(mdp.n_states, mdp.n_actions),
        |q| transformed_value_backup(mdp, q, eps),
        QFunction::sup_distance,
        tol,
        max_iter,
    )
}

/// Conjugated distributional iteration from the all-`phi(0)` collection
/// under the max-Cramér residual.
pub fn conjugated_fixed_point(
    mdp: &FiniteMdp,
    phi: &Homeomorphism,
    merge_cap: Option<usize>,
    tol: f64,
    max_iter: usize,
) -> Result<(DistributionCollection, IterationReport)> {
    fixed_point(
        initial_collection(mdp.n_states, mdp.n_actions, phi)?,
        |xi| conjugated_backup(mdp, xi, phi, merge_cap),
        collection_residual,
        tol,
        max_iter,
    )
}

fn action_name(a: usize) -> String {
    char::from(b'a' + (a as u8 % 26)).to_string()
}

/// Outcome of the three-way greedy-action comparison on the two-branch MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub big_r: f64,
    pub r: f64,
    pub gamma: f64,
    pub eps: f64,
    /// Open interval of deterministic rewards that separate the operators.
    pub interval: (f64, f64),
    /// Start-state values of the optimal Q-function, one per action.
    pub q_star: Vec<f64>,
    /// Start-state values of the transformed-value fixed point.
    pub th_fixed_point: Vec<f64>,
    /// Start-state values induced by the conjugated fixed point.
    pub tphi_q: Vec<f64>,
    pub optimal_action: String,
    pub th_action: String,
    pub tphi_action: String,
    /// The optimal greedy action is the stochastic branch.
    pub claim_optimal_is_a: bool,
    /// The transformed-value greedy action differs from the optimal one.
    pub claim_th_prefers_b: bool,
    /// The conjugated greedy action matches the optimal one.
    pub claim_tphi_prefers_a: bool,
    /// Conjugated values match the optimal ones within `q_tolerance`.
    pub claim_tphi_matches_q_star: bool,
    pub q_tolerance: f64,
    pub all_claims_hold: bool,
}

/// Builds the two-branch MDP for `(big_r, r)`, solves it three ways —
/// scalar optimality iteration, transformed-value iteration, conjugated
/// distributional iteration with `phi = beta * h` — and reports which
/// greedy action each one selects at the start state.
pub fn verify_counterexample(
    big_r: f64,
    r: f64,
    gamma: f64,
    eps: f64,
    beta: f64,
) -> Result<CounterexampleReport> {
    let mdp = crate::mdp::build_counterexample(big_r, r, gamma, eps)?;
    let interval = crate::mdp::admissible_r_interval(big_r, eps)?;
    let phi = Homeomorphism::scaled_h(beta, eps)?;

    let tol = 1e-13;
    let max_iter = 10_000;
    let (q_star, vi_report) = value_iteration(&mdp, tol, max_iter)?;
    let (th_q, th_report) = transformed_fixed_point(&mdp, eps, tol, max_iter)?;
    let (xi, tphi_report) = conjugated_fixed_point(&mdp, &phi, None, tol, max_iter)?;
    if !(vi_report.converged && th_report.converged && tphi_report.converged) {
        return Err(Error::InvalidArgument(
            "fixed-point iteration did not converge on the two-branch MDP".into(),
        ));
    }
    let tphi_table = q_from_collection(&xi, &phi)?;

    let optimal = q_star.argmax_action(0);
    let th = th_q.argmax_action(0);
    let tphi = tphi_table.argmax_action(0);

    let q_tolerance = 1e-9 * big_r.max(1.0);
    let row = |t: &QFunction| (0..mdp.n_actions).map(|a| t.get(0, a)).collect::<Vec<f64>>();
    let q_star_row = row(&q_star);
    let tphi_row = row(&tphi_table);
    let claim_optimal_is_a = optimal == 0;
    let claim_th_prefers_b = th == 1;
    let claim_tphi_prefers_a = tphi == 0;
    let claim_tphi_matches_q_star = q_star_row
        .iter()
        .zip(&tphi_row)
        .all(|(a, b)| (a - b).abs() <= q_tolerance);

    Ok(CounterexampleReport {
        big_r,
        r,
        gamma,
        eps,
        interval,
        q_star: q_star_row,
        th_fixed_point: row(&th_q),
        tphi_q: tphi_row,
        optimal_action: action_name(optimal),
        th_action: action_name(th),
        tphi_action: action_name(tphi),
        claim_optimal_is_a,
        claim_th_prefers_b,
        claim_tphi_prefers_a,
        claim_tphi_matches_q_star,
        q_tolerance,
        all_claims_hold: claim_optimal_is_a
            && claim_th_prefers_b
            && claim_tphi_prefers_a
            && claim_tphi_matches_q_star,
    })
}

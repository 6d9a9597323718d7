//! Discrete measures on the real line with free supports.
//!
//! A [`DiscreteMeasure`] is a canonical probability measure: atoms sorted
//! ascending, exact duplicates merged, zero masses dropped, total mass one.
//! The module provides pushforward, mixture, expectation, CDF evaluation,
//! the squared Cramér distance between two measures (the integral of the
//! squared CDF difference, computed exactly on the merged support), its
//! analytic gradient with respect to one side, and a mass- and
//! mean-preserving atom-count reducer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A mass vector may deviate from total 1 by at most this much before
/// construction fails; anything closer is renormalized.
pub const MASS_SUM_TOLERANCE: f64 = 1e-6;

/// Masses in `[-MASS_NEGATIVE_TOLERANCE, 0)` are clamped to zero; anything
/// more negative is rejected.
pub const MASS_NEGATIVE_TOLERANCE: f64 = 1e-9;

/// A canonical finite discrete probability measure.
#[allow(clippy::len_without_is_empty)]
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<f64>,
    masses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeasureRecord {
    n: usize,
    atoms: Vec<f64>,
    masses: Vec<f64>,
}

impl Serialize for DiscreteMeasure {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        MeasureRecord {
            n: self.atoms.len(),
            atoms: self.atoms.clone(),
            masses: self.masses.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DiscreteMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rec = MeasureRecord::deserialize(deserializer)?;
        DiscreteMeasure::new(rec.atoms, rec.masses).map_err(serde::de::Error::custom)
    }
}

impl DiscreteMeasure {
    /// Builds a measure from parallel atom/mass lists and canonicalizes it:
    /// sorts atoms, merges exact duplicates, clamps masses in
    /// `[-1e-9, 0)` to zero, drops zero masses, and renormalizes the total
    /// to one when it is within [`MASS_SUM_TOLERANCE`].
    pub fn new(atoms: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("at least one atom required".into()));
        }
        if atoms.len() != masses.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} masses",
                atoms.len(),
                masses.len()
            )));
        }
        for &x in &atoms {
            if !x.is_finite() {
                return Err(Error::NonFinite { what: "atom", value: x });
            }
        }
        for &m in &masses {
            if !m.is_finite() {
                return Err(Error::NonFinite { what: "mass", value: m });
            }
            if m < -MASS_NEGATIVE_TOLERANCE {
                return Err(Error::InvalidMeasure(format!("negative mass {m}")));
            }
        }

        let mut pairs: Vec<(f64, f64)> = atoms.into_iter().zip(masses).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut out_atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut out_masses: Vec<f64> = Vec::with_capacity(pairs.len());
        for (x, m) in pairs {
            let m = if m < 0.0 { 0.0 } else { m };
            match out_atoms.last() {
                Some(&last) if last == x => *out_masses.last_mut().unwrap() += m,
                _ => {
                    out_atoms.push(x);
                    out_masses.push(m);
                }
            }
        }

        let sum: f64 = out_masses.iter().sum();
        if (sum - 1.0).abs() > MASS_SUM_TOLERANCE {
            return Err(Error::InvalidMeasure(format!(
                "total mass {sum} not within {MASS_SUM_TOLERANCE} of 1"
            )));
        }
        if sum != 1.0 {
            for m in &mut out_masses {
                *m /= sum;
            }
        }

        let mut i = 0;
        while i < out_atoms.len() {
            if out_masses[i] == 0.0 {
                out_atoms.remove(i);
                out_masses.remove(i);
            } else {
                i += 1;
            }
        }
        if out_atoms.is_empty() {
            return Err(Error::InvalidMeasure("all masses are zero".into()));
        }

        Ok(DiscreteMeasure { atoms: out_atoms, masses: out_masses })
    }

    /// The point mass at `x`.
    pub fn dirac(x: f64) -> Result<Self> {
        Self::new(vec![x], vec![1.0])
    }

    /// Number of atoms; canonical measures always have at least one.
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// First moment.
    pub fn expectation(&self) -> f64 {
        let mut acc = 0.0;
        for (&x, &m) in self.atoms.iter().zip(&self.masses) {
            acc += m * x;
        }
        acc
    }

    /// Expectation of `g` under the measure; fails if `g` is non-finite on
    /// some atom.
    pub fn expectation_map<F: Fn(f64) -> f64>(&self, g: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&x, &m) in self.atoms.iter().zip(&self.masses) {
            let v = g(x);
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "mapped atom", value: v });
            }
            acc += m * v;
        }
        Ok(acc)
    }

    /// Right-continuous CDF: total mass of atoms `<= w`.
    pub fn cdf(&self, w: f64) -> f64 {
        let mut acc = 0.0;
        for (&x, &m) in self.atoms.iter().zip(&self.masses) {
            if x <= w {
                acc += m;
            } else {
                break;
            }
        }
        acc
    }

    /// Image measure under `f`: atoms mapped elementwise, masses kept, then
    /// canonicalized (colliding images merge). Fails if `f` produces a
    /// non-finite value.
    pub fn pushforward<F: Fn(f64) -> f64>(&self, f: F) -> Result<Self> {
        let atoms: Vec<f64> = self.atoms.iter().map(|&x| f(x)).collect();
        Self::new(atoms, self.masses.clone())
    }

    /// Smallest and largest atom.
    pub fn support_bounds(&self) -> (f64, f64) {
        (self.atoms[0], *self.atoms.last().unwrap())
    }
}

/// Mixture `sum_i w_i * mu_i`. Weights must be nonnegative and sum to one
/// within 1e-9; the measure count must match the weight count.
pub fn mixture(weights: &[f64], measures: &[DiscreteMeasure]) -> Result<DiscreteMeasure> {
    if weights.len() != measures.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights but {} measures",
            weights.len(),
            measures.len()
        )));
    }
    if weights.is_empty() {
        return Err(Error::InvalidArgument("mixture of zero components".into()));
    }
    let mut sum = 0.0;
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidArgument(format!("mixture weight {w}")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "mixture weights sum to {sum}, not 1"
        )));
    }
    let total: usize = measures.iter().map(|m| m.len()).sum();
    let mut atoms = Vec::with_capacity(total);
    let mut masses = Vec::with_capacity(total);
    for (&w, m) in weights.iter().zip(measures) {
        for (&x, &p) in m.atoms.iter().zip(&m.masses) {
            atoms.push(x);
            masses.push(w * p);
        }
    }
    DiscreteMeasure::new(atoms, masses)
}

/// Squared Cramér distance: the integral over the real line of the squared
/// CDF difference. Computed exactly by merging the two supports, prefix-
/// summing signed masses (`+p` for `mu`, `-q` for `nu`, net mass at shared
/// atoms) and accumulating `P^2 * dw` over the gaps.
pub fn cramer_sq(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    let (xa, pa) = (&mu.atoms, &mu.masses);
    let (ya, qa) = (&nu.atoms, &nu.masses);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prefix = 0.0;
    let mut prev_w = 0.0;
    let mut started = false;
    let mut total = 0.0;
    while i < xa.len() || j < ya.len() {
        let w = match (xa.get(i), ya.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if started {
            total += prefix * prefix * (w - prev_w);
        }
        // Net signed mass at this support point keeps shared atoms exact:
        // identical measures stay at prefix zero bit for bit.
        let mut delta = 0.0;
        while i < xa.len() && xa[i] == w {
            delta += pa[i];
            i += 1;
        }
        while j < ya.len() && ya[j] == w {
            delta -= qa[j];
            j += 1;
        }
        prefix += delta;
        prev_w = w;
        started = true;
    }
    total
}

/// Analytic partials of [`cramer_sq`] in its first argument, for raw
/// (possibly unsorted, index-stable) atom/mass arrays against a fixed
/// canonical measure. Returns `(d/d atoms, d/d masses)` aligned with the
/// input indices.
///
/// Events at exactly equal positions are netted, mirroring [`cramer_sq`]:
/// coincident mass on the two sides cancels before the prefix is squared,
/// so a perfect match returns the zero subgradient rather than a one-sided
/// kink derivative.
pub fn cramer_sq_grad_raw(
    mu_atoms: &[f64],
    mu_masses: &[f64],
    nu: &DiscreteMeasure,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(mu_atoms.len(), mu_masses.len());
    let n = mu_atoms.len();
    let k_total = n + nu.len();

    // side 0 = variable measure, side 1 = fixed.
    let mut events: Vec<(f64, f64, u8, usize)> = Vec::with_capacity(k_total);
    for (idx, (&x, &p)) in mu_atoms.iter().zip(mu_masses).enumerate() {
        events.push((x, p, 0, idx));
    }
    for (idx, (&y, &q)) in nu.atoms.iter().zip(&nu.masses).enumerate() {
        events.push((y, -q, 1, idx));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));

    // Group equal positions into clusters; each cluster c covers events at
    // one support point and `after[c]` is the net prefix to its right.
    let mut cluster_of = vec![0usize; k_total];
    let mut positions: Vec<f64> = Vec::with_capacity(k_total);
    let mut after: Vec<f64> = Vec::with_capacity(k_total);
    let mut acc = 0.0;
    let mut k = 0;
    while k < k_total {
        let pos = events[k].0;
        while k < k_total && events[k].0 == pos {
            acc += events[k].1;
            cluster_of[k] = positions.len();
            k += 1;
        }
        positions.push(pos);
        after.push(acc);
    }

    // suffix[c] = sum_{j >= c} after[j] * (w_{j+1} - w_j), the sensitivity
    // of the integral to mass entering the prefix at cluster c.
    let m = positions.len();
    let mut suffix = vec![0.0; m + 1];
    for c in (0..m.saturating_sub(1)).rev() {
        suffix[c] = suffix[c + 1] + after[c] * (positions[c + 1] - positions[c]);
    }

    let mut d_atoms = vec![0.0; n];
    let mut d_masses = vec![0.0; n];
    for (k, ev) in events.iter().enumerate() {
        if ev.2 == 0 {
            let c = cluster_of[k];
            let before = if c == 0 { 0.0 } else { after[c - 1] };
            d_atoms[ev.3] = before * before - after[c] * after[c];
            d_masses[ev.3] = 2.0 * suffix[c];
        }
    }
    (d_atoms, d_masses)
}

/// Analytic partials of [`cramer_sq`] with respect to the first measure's
/// atoms and masses, aligned with its canonical ordering.
pub fn cramer_sq_grad(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> (Vec<f64>, Vec<f64>) {
    cramer_sq_grad_raw(&mu.atoms, &mu.masses, nu)
}

/// Reduces the support to at most `max_atoms` atoms by repeatedly merging
/// the adjacent pair with the smallest gap into its mass-weighted mean.
/// Total mass is preserved exactly and the first moment up to rounding.
pub fn merge_atoms(mu: &DiscreteMeasure, max_atoms: usize) -> Result<DiscreteMeasure> {
    if max_atoms == 0 {
        return Err(Error::InvalidArgument("atom cap must be at least 1".into()));
    }
    if mu.len() <= max_atoms {
        return Ok(mu.clone());
    }
    let mut atoms = mu.atoms.clone();
    let mut masses = mu.masses.clone();
    while atoms.len() > max_atoms {
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for i in 0..atoms.len() - 1 {
            let gap = atoms[i + 1] - atoms[i];
            if gap < best_gap {
                best_gap = gap;
                best = i;
            }
        }
        let m = masses[best] + masses[best + 1];
        atoms[best] = (masses[best] * atoms[best] + masses[best + 1] * atoms[best + 1]) / m;
        masses[best] = m;
        atoms.remove(best + 1);
        masses.remove(best + 1);
    }
    // Rounding can land a merged mean exactly on a neighbor; restore the
    // no-duplicate invariant without touching total mass.
    let mut i = 0;
    while i + 1 < atoms.len() {
        if atoms[i] == atoms[i + 1] {
            masses[i] += masses[i + 1];
            atoms.remove(i + 1);
            masses.remove(i + 1);
        } else {
            i += 1;
        }
    }
    Ok(DiscreteMeasure { atoms, masses })
}

/// A per-(state, action) table of measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionCollection {
    n_states: usize,
    n_actions: usize,
    measures: Vec<DiscreteMeasure>,
}

impl DistributionCollection {
    /// A collection holding a copy of `m` at every (state, action) slot.
    pub fn filled(n_states: usize, n_actions: usize, m: DiscreteMeasure) -> Self {
        DistributionCollection {
            n_states,
            n_actions,
            measures: vec![m; n_states * n_actions],
        }
    }

    pub fn from_measures(
        n_states: usize,
        n_actions: usize,
        measures: Vec<DiscreteMeasure>,
    ) -> Result<Self> {
        if measures.len() != n_states * n_actions {
            return Err(Error::InvalidArgument(format!(
                "expected {} measures, got {}",
                n_states * n_actions,
                measures.len()
            )));
        }
        Ok(DistributionCollection { n_states, n_actions, measures })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> &DiscreteMeasure {
        &self.measures[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, m: DiscreteMeasure) {
        self.measures[s * self.n_actions + a] = m;
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &DiscreteMeasure)> {
        let n_actions = self.n_actions;
        self.measures
            .iter()
            .enumerate()
            .map(move |(i, m)| ((i / n_actions, i % n_actions), m))
    }

    /// Largest support size over all slots.
    pub fn max_atoms(&self) -> usize {
        self.measures.iter().map(|m| m.len()).max().unwrap_or(0)
    }
}

/// Random collection with up to `max_atoms` atoms per measure, atoms uniform
/// in `[lo, hi]`, masses from a flat Dirichlet.
pub fn random_collection<R: Rng>(
    n_states: usize,
    n_actions: usize,
    max_atoms: usize,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> DistributionCollection {
    let mut measures = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        let n = rng.gen_range(1..=max_atoms);
        let atoms: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let sum: f64 = raw.iter().sum();
        let masses: Vec<f64> = raw.iter().map(|g| g / sum).collect();
        measures.push(DiscreteMeasure::new(atoms, masses).expect("random measure is valid"));
    }
    DistributionCollection { n_states, n_actions, measures }
}

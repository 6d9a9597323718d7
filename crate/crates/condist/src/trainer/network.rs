//! The distribution network: one-hot state in, per-action discrete return
//! distributions out.
//!
//! Wiring: a two-layer rectified trunk feeds a probability head (per-action
//! softmax over the atom masses); the full flattened probability vector
//! passes through a single rectified embedding layer; the atom head reads
//! the concatenation of that embedding and the trunk output and emits one
//! pre-activation per atom, squashed to `alpha * tanh(u / c)` with a single
//! trainable scale `alpha`. Atom outputs are deliberately left unordered.
//! Parameters live in one flat vector so the optimizer, checkpointing, and
//! finite-difference checks can treat them uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::{Error, Result};

/// Layer widths; fixed for the lifetime of a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_atoms: usize,
    pub trunk_width1: usize,
    pub trunk_width2: usize,
    pub embed_width: usize,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub wp: usize,
    pub bp: usize,
    pub we: usize,
    pub be: usize,
    pub wx: usize,
    pub bx: usize,
    pub alpha: usize,
    pub total: usize,
}

impl NetworkShape {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("states", self.n_states),
            ("actions", self.n_actions),
            ("atoms", self.n_atoms),
            ("first trunk width", self.trunk_width1),
            ("second trunk width", self.trunk_width2),
            ("embedding width", self.embed_width),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("network {what} must be positive")));
            }
        }
        Ok(())
    }

    /// Atoms across all actions: the width of both heads.
    pub fn head_width(&self) -> usize {
        self.n_actions * self.n_atoms
    }

    /// Width of the atom head's input `[embedding, trunk]`.
    pub fn cat_width(&self) -> usize {
        self.embed_width + self.trunk_width2
    }

    pub(crate) fn layout(&self) -> Layout {
        let (s, h1, h2, e, hw) = (
            self.n_states,
            self.trunk_width1,
            self.trunk_width2,
            self.embed_width,
            self.head_width(),
        );
        let w1 = 0;
        let b1 = w1 + h1 * s;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let wp = b2 + h2;
        let bp = wp + hw * h2;
        let we = bp + hw;
        let be = we + e * hw;
        let wx = be + e;
        let bx = wx + hw * self.cat_width();
        let alpha = bx + hw;
        Layout { w1, b1, w2, b2, wp, bp, we, be, wx, bx, alpha, total: alpha + 1 }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }
}

/// Flat parameter vector plus the fixed squashing scale `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    shape: NetworkShape,
    c: f64,
    theta: Vec<f64>,
}

/// On-disk checkpoint: everything needed to rebuild the parameters
/// bit for bit.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    shape: NetworkShape,
    c: f64,
    theta: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Everything one forward pass computes, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub(crate) state: usize,
    pub(crate) u1: Vec<f64>,
    pub(crate) z1: Vec<f64>,
    pub(crate) u2: Vec<f64>,
    pub(crate) z2: Vec<f64>,
    pub(crate) ue: Vec<f64>,
    pub(crate) e: Vec<f64>,
    pub(crate) t: Vec<f64>,
    /// Per-action softmax masses, `n_actions * n_atoms` long.
    pub masses: Vec<f64>,
    /// Squashed atom positions, `n_actions * n_atoms` long, unsorted.
    pub atoms: Vec<f64>,
    pub n_actions: usize,
    pub n_atoms: usize,
}

impl ForwardPass {
    /// The mass block of one action.
    pub fn masses_of(&self, a: usize) -> &[f64] {
        &self.masses[a * self.n_atoms..(a + 1) * self.n_atoms]
    }

    /// The atom block of one action.
    pub fn atoms_of(&self, a: usize) -> &[f64] {
        &self.atoms[a * self.n_atoms..(a + 1) * self.n_atoms]
    }

    /// Smallest absolute pre-activation across the rectified layers. Near
    /// zero, some unit sits at its kink and the outputs are not
    /// differentiable in the parameters; useful both as a saturation
    /// diagnostic and for screening finite-difference fixtures.
    pub fn relu_margin(&self) -> f64 {
        self.u1
            .iter()
            .chain(&self.u2)
            .chain(&self.ue)
            .fold(f64::INFINITY, |m, &u| m.min(u.abs()))
    }
}

impl NetworkParams {
    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero,
    /// the support scale starting at `alpha0`.
    pub fn init<R: Rng>(shape: NetworkShape, alpha0: f64, c: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        if !(alpha0.is_finite() && alpha0 != 0.0) {
            return Err(Error::InvalidArgument(format!("support scale start {alpha0}")));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidArgument(format!("squash scale {c}")));
        }
        let l = shape.layout();
        let mut theta = vec![0.0; l.total];
        let mut fill = |from: usize, to: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut theta[from..to] {
                *v = rng.gen_range(-bound..bound);
            }
        };
        fill(l.w1, l.b1, shape.n_states);
        fill(l.w2, l.b2, shape.trunk_width1);
        fill(l.wp, l.bp, shape.trunk_width2);
        fill(l.we, l.be, shape.head_width());
        fill(l.wx, l.bx, shape.cat_width());
        theta[l.alpha] = alpha0;
        Ok(NetworkParams { shape, c, theta })
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn alpha(&self) -> f64 {
        self.theta[self.shape.layout().alpha]
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mutable access to the flat parameters, for optimizers and
    /// finite-difference probes.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// One forward pass. Fails if any output is non-finite.
    pub fn forward(&self, state: usize) -> Result<ForwardPass> {
        let sh = self.shape;
        if state >= sh.n_states {
            return Err(Error::InvalidArgument(format!("state {state} out of range")));
        }
        let l = sh.layout();
        let th = &self.theta;
        let (h1, h2, ew, hw) = (sh.trunk_width1, sh.trunk_width2, sh.embed_width, sh.head_width());
        let cw = sh.cat_width();

        // Trunk over the one-hot input: layer 1 reads a single weight column.
        let mut u1 = vec![0.0; h1];
        let mut z1 = vec![0.0; h1];
        for o in 0..h1 {
            u1[o] = th[l.w1 + o * sh.n_states + state] + th[l.b1 + o];
            z1[o] = u1[o].max(0.0);
        }
        let mut u2 = vec![0.0; h2];
        let mut z2 = vec![0.0; h2];
        for o in 0..h2 {
            let mut acc = th[l.b2 + o];
            for i in 0..h1 {
                acc += th[l.w2 + o * h1 + i] * z1[i];
            }
            u2[o] = acc;
            z2[o] = acc.max(0.0);
        }

        // Probability head: linear then per-action softmax.
        let mut up = vec![0.0; hw];
        for o in 0..hw {
            let mut acc = th[l.bp + o];
            for i in 0..h2 {
                acc += th[l.wp + o * h2 + i] * z2[i];
            }
            up[o] = acc;
        }
        let mut masses = vec![0.0; hw];
        for a in 0..sh.n_actions {
            let block = &up[a * sh.n_atoms..(a + 1) * sh.n_atoms];
            let top = block.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (i, &v) in block.iter().enumerate() {
                let w = (v - top).exp();
                masses[a * sh.n_atoms + i] = w;
                sum += w;
            }
            for m in &mut masses[a * sh.n_atoms..(a + 1) * sh.n_atoms] {
                *m /= sum;
            }
        }

        // Embedding over the whole probability vector.
        let mut ue = vec![0.0; ew];
        let mut e = vec![0.0; ew];
        for o in 0..ew {
            let mut acc = th[l.be + o];
            for i in 0..hw {
                acc += th[l.we + o * hw + i] * masses[i];
            }
            ue[o] = acc;
            e[o] = acc.max(0.0);
        }

        // Atom head over [embedding, trunk].
        let alpha = th[l.alpha];
        let mut t = vec![0.0; hw];
        let mut atoms = vec![0.0; hw];
        for o in 0..hw {
            let mut acc = th[l.bx + o];
            let row = l.wx + o * cw;
            for i in 0..ew {
                acc += th[row + i] * e[i];
            }
            for i in 0..h2 {
                acc += th[row + ew + i] * z2[i];
            }
            t[o] = (acc / self.c).tanh();
            atoms[o] = alpha * t[o];
        }

        for &v in atoms.iter().chain(masses.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "network output", value: v });
            }
        }
        Ok(ForwardPass {
            state,
            u1,
            z1,
            u2,
            z2,
            ue,
            e,
            t,
            masses,
            atoms,
            n_actions: sh.n_actions,
            n_atoms: sh.n_atoms,
        })
    }

    /// Accumulates `scale * dL/dtheta` into `grads`, given the loss
    /// gradients with respect to the acting action's atom positions and
    /// masses. The embedding path makes every action's masses matter, so
    /// mass gradients fan out through the whole probability vector before
    /// the per-action softmax backward.
    pub fn backward(
        &self,
        fwd: &ForwardPass,
        action: usize,
        d_atoms: &[f64],
        d_masses: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) {
        let sh = self.shape;
        let l = sh.layout();
        let th = &self.theta;
        let (h1, h2, ew, hw) = (sh.trunk_width1, sh.trunk_width2, sh.embed_width, sh.head_width());
        let cw = sh.cat_width();
        let n = sh.n_atoms;
        assert_eq!(d_atoms.len(), n);
        assert_eq!(d_masses.len(), n);
        assert_eq!(grads.len(), l.total);
        let alpha = th[l.alpha];

        // Atom head: alpha, squash, linear layer.
        let mut d_ux = vec![0.0; hw];
        let mut d_alpha = 0.0;
        for i in 0..n {
            let o = action * n + i;
            let g = d_atoms[i];
            d_alpha += g * fwd.t[o];
            d_ux[o] = g * alpha * (1.0 - fwd.t[o] * fwd.t[o]) / self.c;
        }
        grads[l.alpha] += scale * d_alpha;

        let mut d_cat = vec![0.0; cw];
        for o in action * n..(action + 1) * n {
            let g = d_ux[o];
            if g == 0.0 {
                continue;
            }
            let row = l.wx + o * cw;
            for i in 0..ew {
                grads[row + i] += scale * g * fwd.e[i];
                d_cat[i] += th[row + i] * g;
            }
            for i in 0..h2 {
                grads[row + ew + i] += scale * g * fwd.z2[i];
                d_cat[ew + i] += th[row + ew + i] * g;
            }
            grads[l.bx + o] += scale * g;
        }

        // Embedding backward: gradients reach the masses of every action.
        let mut d_p = vec![0.0; hw];
        for o in 0..ew {
            if fwd.ue[o] <= 0.0 {
                continue;
            }
            let g = d_cat[o];
            if g == 0.0 {
                continue;
            }
            grads[l.be + o] += scale * g;
            let row = l.we + o * hw;
            for i in 0..hw {
                grads[row + i] += scale * g * fwd.masses[i];
                d_p[i] += th[row + i] * g;
            }
        }

        // Direct loss gradient on the acting action's masses.
        for i in 0..n {
            d_p[action * n + i] += d_masses[i];
        }

        // Per-action softmax backward.
        let mut d_up = vec![0.0; hw];
        for a in 0..sh.n_actions {
            let base = a * n;
            let mut dot = 0.0;
            for i in 0..n {
                dot += fwd.masses[base + i] * d_p[base + i];
            }
            for i in 0..n {
                d_up[base + i] = fwd.masses[base + i] * (d_p[base + i] - dot);
            }
        }

        // Probability head linear layer, joining the trunk gradient from
        // the atom head's concatenated input.
        let mut d_z2 = vec![0.0; h2];
        d_z2.copy_from_slice(&d_cat[ew..]);
        for o in 0..hw {
            let g = d_up[o];
            if g == 0.0 {
                continue;
            }
            grads[l.bp + o] += scale * g;
            let row = l.wp + o * h2;
            for i in 0..h2 {
                grads[row + i] += scale * g * fwd.z2[i];
                d_z2[i] += th[row + i] * g;
            }
        }

        // Trunk.
        let mut d_z1 = vec![0.0; h1];
        for o in 0..h2 {
            if fwd.u2[o] <= 0.0 {
                continue;
            }
            let g = d_z2[o];
            if g == 0.0 {
                continue;
            }
            grads[l.b2 + o] += scale * g;
            let row = l.w2 + o * h1;
            for i in 0..h1 {
                grads[row + i] += scale * g * fwd.z1[i];
                d_z1[i] += th[row + i] * g;
            }
        }
        for o in 0..h1 {
            if fwd.u1[o] <= 0.0 {
                continue;
            }
            let g = d_z1[o];
            grads[l.b1 + o] += scale * g;
            grads[l.w1 + o * sh.n_states + fwd.state] += scale * g;
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            shape: self.shape,
            c: self.c,
            theta: self.theta.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "checkpoint version {} unsupported",
                ck.version
            )));
        }
        ck.shape.validate()?;
        if ck.theta.len() != ck.shape.n_params() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} parameters, shape requires {}",
                ck.theta.len(),
                ck.shape.n_params()
            )));
        }
        Ok(NetworkParams { shape: ck.shape, c: ck.c, theta: ck.theta })
    }
}

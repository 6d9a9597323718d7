//! Fixed-capacity transition store with uniform sampling.

use rand::Rng;

use crate::{Error, Result};

/// One environment step as stored for training. `terminal` is true only
/// for real termination, never for episode truncation, so bootstrapping
/// continues through truncated episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// Circular buffer: once full, each push overwrites the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer { data: Vec::with_capacity(capacity.min(1 << 20)), capacity, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Draws `k` transitions uniformly with replacement from the filled
    /// portion.
    pub fn sample<R: Rng>(&self, k: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.data.len() < k {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {k} transitions from a buffer holding {}",
                self.data.len()
            )));
        }
        Ok((0..k).map(|_| self.data[rng.gen_range(0..self.data.len())]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(state: usize) -> Transition {
        Transition { state, action: 0, reward: 0.0, next_state: 0, terminal: false }
    }

    #[test]
    fn push_overwrites_oldest_when_full() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        buf.push(t(0));
        buf.push(t(1));
        buf.push(t(2));
        assert_eq!(buf.len(), 2);
        let states: Vec<usize> = buf.data.iter().map(|x| x.state).collect();
        assert_eq!(states, vec![2, 1]);
        buf.push(t(3));
        let states: Vec<usize> = buf.data.iter().map(|x| x.state).collect();
        assert_eq!(states, vec![2, 3]);
    }

    #[test]
    fn sampling_requires_enough_fill() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(1, &mut rng).is_err());
        buf.push(t(0));
        assert!(buf.sample(1, &mut rng).is_ok());
        assert!(buf.sample(2, &mut rng).is_err());
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn sampling_is_uniform_chi_squared() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            buf.push(t(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0.0f64; 10];
        for _ in 0..n / 10 {
            for item in buf.sample(10, &mut rng).unwrap() {
                counts[item.state] += 1.0;
            }
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 9 degrees of freedom; 33.7 is the 1e-4 upper quantile.
        assert!(chi2 < 33.7, "chi-squared statistic {chi2}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        for i in 0..8 {
            buf.push(t(i));
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            buf.sample(8, &mut rng).unwrap()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }
}

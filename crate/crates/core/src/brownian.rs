//! Brownian increments on a dyadic ladder of step sizes.
//!
//! Increments are generated once at the finest resolution by a counter-based
//! generator keyed on `(seed, path, step, driver)` and coarser levels are exact
//! sums of fine increments, so every step size sees the same Brownian path.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Config(String),
}

/// Words of ChaCha output consumed per normal draw (two `u64`s).
const WORDS_PER_NORMAL: u128 = 4;

/// Shared description of the Brownian grid of every path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub seed: u64,
    pub d: usize,
    pub horizon: f64,
    /// Number of steps at the finest level.
    pub finest: usize,
    /// Pair path `2k + 1` with the negated increments of path `2k`.
    pub antithetic: bool,
}

impl GridSpec {
    pub fn new(seed: u64, d: usize, horizon: f64, finest: usize) -> Result<Self, GridError> {
        if d == 0 {
            return Err(GridError::Config("need at least one driver".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(GridError::Config(format!("horizon must be positive, got {horizon}")));
        }
        if finest == 0 {
            return Err(GridError::Config("need at least one step".into()));
        }
        Ok(Self {
            seed,
            d,
            horizon,
            finest,
            antithetic: false,
        })
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn fine_dt(&self) -> f64 {
        self.horizon / self.finest as f64
    }

    /// Number of fine steps per step at a level with `steps` steps.
    pub fn factor(&self, steps: usize) -> Result<usize, GridError> {
        if steps == 0 || !self.finest.is_multiple_of(steps) || !(self.finest / steps).is_power_of_two() {
            return Err(GridError::Config(format!(
                "{steps} steps is not a power-of-two coarsening of {}",
                self.finest
            )));
        }
        Ok(self.finest / steps)
    }

    fn rng(&self, path: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path);
        rng
    }

    /// Standard normal draw for `(path, driver, step)`, by random access.
    pub fn standard_normal(&self, path: u64, driver: usize, step: usize) -> f64 {
        let (stream, sign) = self.stream_of(path);
        let mut rng = self.rng(stream);
        rng.set_word_pos((step * self.d + driver) as u128 * WORDS_PER_NORMAL);
        sign * box_muller(&mut rng)
    }

    fn stream_of(&self, path: u64) -> (u64, f64) {
        if self.antithetic {
            (path / 2, if path.is_multiple_of(2) { 1.0 } else { -1.0 })
        } else {
            (path, 1.0)
        }
    }

    pub fn path(&self, path: u64) -> BrownianGrid {
        let (stream, sign) = self.stream_of(path);
        let mut rng = self.rng(stream);
        let scale = sign * self.fine_dt().sqrt();
        let increments = (0..self.finest * self.d)
            .map(|_| scale * box_muller(&mut rng))
            .collect();
        BrownianGrid {
            spec: *self,
            path,
            increments,
        }
    }
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The Brownian increments of one path at the finest level.
#[derive(Debug, Clone)]
pub struct BrownianGrid {
    spec: GridSpec,
    path: u64,
    /// Step-major, driver-minor.
    increments: Vec<f64>,
}

impl BrownianGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn path_index(&self) -> u64 {
        self.path
    }

    pub fn fine(&self) -> &[f64] {
        &self.increments
    }

    /// Increments of a level with `steps` steps, summed from the finest level.
    pub fn coarsen(&self, steps: usize) -> Result<Vec<f64>, GridError> {
        let factor = self.spec.factor(steps)?;
        let d = self.spec.d;
        if factor == 1 {
            return Ok(self.increments.clone());
        }
        let mut out = vec![0.0; steps * d];
        for (k, chunk) in self.increments.chunks(factor * d).enumerate() {
            for fine in chunk.chunks(d) {
                for (o, v) in out[k * d..(k + 1) * d].iter_mut().zip(fine) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    /// `W_T` per driver.
    pub fn terminal(&self) -> Vec<f64> {
        let d = self.spec.d;
        let mut w = vec![0.0; d];
        for step in self.increments.chunks(d) {
            for (acc, v) in w.iter_mut().zip(step) {
                *acc += v;
            }
        }
        w
    }
}

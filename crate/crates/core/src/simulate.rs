//! The (1+1)D conditionally Gaussian test field with an integer latent state.
//!
//! On a ring of sites, the latent state d(r, t) is the rounded difference
//! between the mean of the 5 nearest sites at t−2 and the mean of the 3
//! nearest sites at t−1. The observation is X(r, t) ~ N(d, 1) when |d| < 4
//! and N(0, 1) otherwise, so there are seven predictive states with means
//! −3..=3. The first two steps are identically zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{Boundary, Field};
use crate::par;

/// Latent states at or beyond this magnitude emit N(0, 1).
pub const STATE_CUTOFF: i64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_space: usize,
    /// Steps kept after burn-in.
    pub steps: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { n_space: 100, steps: 200, burn_in: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub x: Field,
    /// Latent state, laid out like `x` (time-major).
    pub d: Vec<i64>,
    /// Conditional mean of X(r, t) given the past: d when |d| < 4, else 0.
    pub true_state_mean: Field,
}

impl SimOutput {
    pub fn d_at(&self, site: usize, t: usize) -> i64 {
        self.d[t * self.x.n_sites() + site]
    }

    pub fn d_field(&self) -> Field {
        let values = self.d.iter().map(|&v| v as f64).collect();
        Field::new(self.x.extent().to_vec(), self.x.steps(), values, Boundary::Wrap).expect("same shape as x")
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a master seed and a list of stream coordinates.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Standard normal draw for cell (site, t); independent of evaluation order.
fn cell_noise(seed: u64, site: usize, t: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64, site as u64]));
    StandardNormal.sample(&mut rng)
}

/// Mean of `X(r+i mod n, t)` for i in −radius..=radius.
fn ring_mean(values: &[f64], n: usize, site: usize, radius: usize) -> f64 {
    let sum: f64 = (0..=2 * radius).map(|k| values[(site + n * radius + k - radius) % n]).sum();
    sum / (2 * radius + 1) as f64
}

fn latent_from_slices(older: &[f64], newer: &[f64], site: usize) -> i64 {
    let n = older.len();
    (ring_mean(older, n, site, 2) - ring_mean(newer, n, site, 1)).round() as i64
}

/// Conditional mean implied by a latent state.
pub fn state_mean(d: i64) -> f64 {
    if d.abs() < STATE_CUTOFF {
        d as f64
    } else {
        0.0
    }
}

/// Latent state at (site, t) recomputed from the observed field; `t` is a
/// 0-based time index and needs two earlier steps.
pub fn latent_state(x: &Field, site: usize, t: usize) -> Result<i64> {
    if t < 2 {
        return Err(invalid(format!("latent state needs two prior steps; t = {t}")));
    }
    if site >= x.n_sites() {
        return Err(invalid(format!("site {site} out of range")));
    }
    Ok(latent_from_slices(x.slice(t - 2), x.slice(t - 1), site))
}

/// The true conditional expectation of X(site, t) given its past.
pub fn oracle_predict(x: &Field, site: usize, t: usize) -> Result<f64> {
    Ok(state_mean(latent_state(x, site, t)?))
}

pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    let SimConfig { n_space, steps, burn_in, seed } = *config;
    if n_space < 5 {
        return Err(invalid(format!("need at least 5 sites, got {n_space}")));
    }
    if steps == 0 || steps + burn_in < 3 {
        return Err(invalid("need at least 3 generated steps and 1 kept step"));
    }
    let total = steps + burn_in;
    let mut x = vec![0.0; n_space * total];
    let mut d = vec![0i64; n_space * total];
    for t in 2..total {
        let (past, rest) = x.split_at_mut(t * n_space);
        let older = &past[(t - 2) * n_space..(t - 1) * n_space];
        let newer = &past[(t - 1) * n_space..];
        let cells = par::map_range(n_space, |site| {
            let state = latent_from_slices(older, newer, site);
            (state, state_mean(state) + cell_noise(seed, site, t))
        });
        for (site, (state, value)) in cells.into_iter().enumerate() {
            rest[site] = value;
            d[t * n_space + site] = state;
        }
    }
    let keep = burn_in * n_space;
    let x = Field::new(vec![n_space], steps, x.split_off(keep), Boundary::Wrap)?;
    let d = d.split_off(keep);
    let means = d.iter().map(|&s| state_mean(s)).collect();
    let true_state_mean = Field::new(vec![n_space], steps, means, Boundary::Wrap)?;
    Ok(SimOutput { x, d, true_state_mean })
}

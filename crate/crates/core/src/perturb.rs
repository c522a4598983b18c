//! Seeded perturbation fields for the optimality studies.
//!
//! Every sample draws from its own ChaCha stream (seed, sample index), so a
//! sample's perturbation does not depend on how many other samples run or in
//! which order.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::density::{Grid, VelocityField};

/// Number of Gaussian bumps summed in a space-time perturbation.
pub const BUMPS: usize = 3;

/// Independent generator for sample `index` of a study seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A smooth velocity perturbation `b(t, x) = sin(πt/T)·φ(x)` with `φ` a sum
/// of Gaussian bumps centred in the middle half of the domain, scaled so
/// that `max ‖φ‖ = 1` over the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeBump {
    t_final: f64,
    profile: VelocityField,
}

impl SpaceTimeBump {
    pub fn sample(grid: &Grid, t_final: f64, rng: &mut ChaCha8Rng) -> Self {
        let dim = grid.dimension();
        let width = (0..dim)
            .map(|a| (grid.upper()[a] - grid.lower()[a]) / 10.0)
            .fold(f64::INFINITY, f64::min);
        let bumps: Vec<(Vec<f64>, Vec<f64>)> = (0..BUMPS)
            .map(|_| {
                let amplitude = standard_normal_vec(rng, dim);
                let centre = (0..dim)
                    .map(|a| {
                        let (lo, hi) = (grid.lower()[a], grid.upper()[a]);
                        let quarter = 0.25 * (hi - lo);
                        rng.random_range(lo + quarter..hi - quarter)
                    })
                    .collect();
                (amplitude, centre)
            })
            .collect();
        let raw = VelocityField::from_fn(grid, |x| {
            let mut v = vec![0.0; dim];
            for (amp, c) in &bumps {
                let r2: f64 = x.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum();
                let w = (-0.5 * r2 / (width * width)).exp();
                for (vi, ai) in v.iter_mut().zip(amp) {
                    *vi += ai * w;
                }
            }
            v
        })
        .expect("bump profile is finite");
        let peak = raw.max_norm();
        let profile = if peak > 0.0 { raw.scaled(1.0 / peak) } else { raw };
        Self { t_final, profile }
    }

    /// A time-modulated fixed profile; used for hand-built perturbations.
    pub fn from_profile(profile: VelocityField, t_final: f64) -> Self {
        Self { t_final, profile }
    }

    pub fn profile(&self) -> &VelocityField {
        &self.profile
    }

    pub fn envelope(&self, t: f64) -> f64 {
        (std::f64::consts::PI * t / self.t_final).sin()
    }

    /// `b(t, ·)` on the grid.
    pub fn at(&self, t: f64) -> VelocityField {
        self.profile.scaled(self.envelope(t))
    }
}

//! Client-side privacy machinery and the privacy accountant.
//!
//! A DP-SGD step samples a minibatch, clips every per-sample gradient to
//! norm `C`, adds a single Gaussian draw `N(0, sigma^2 C^2)` per coordinate to
//! the batch sum and divides by the actual batch size.
//!
//! The accountant composes the plain Gaussian-mechanism RDP bound
//! `alpha / (2 sigma^2)` over steps (no subsampling amplification, so it is
//! conservative) and converts to `(epsilon, delta)` with
//! `eps = R + ln((alpha-1)/alpha) - (ln delta + ln alpha)/(alpha-1)`,
//! minimized over a grid of orders.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, ParamVector};
use crate::rng::Stream;

/// Tolerance used when checking clipped norms and when flooring `s * R`.
pub const NORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Independent Bernoulli(s) inclusion per record.
    Poisson,
    /// Uniform without replacement, `max(1, floor(s R))` records.
    FixedSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_threshold: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub delta: f64,
    pub sampling_mode: SamplingMode,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip_threshold: 1.5,
            noise_multiplier: 0.8,
            sampling_rate: 1.0,
            delta: 1e-5,
            sampling_mode: SamplingMode::FixedSize,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_threshold > 0.0 && self.clip_threshold.is_finite()) {
            return Err(Error::validation("clip_threshold", "> 0"));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::validation("noise_multiplier", "≥ 0"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::validation("sampling_rate", "in (0, 1]"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::validation("delta", "in (0, 1)"));
        }
        Ok(())
    }
}

/// Batch size drawn in fixed-size mode.
pub fn fixed_batch_size(shard_size: usize, s: f64) -> usize {
    ((s * shard_size as f64 + NORM_SLACK).floor() as usize).clamp(1, shard_size.max(1))
}

/// Draws a minibatch of record indices, returned in ascending order.
/// A Poisson draw may be empty; callers skip that step.
pub fn poisson_sample(
    shard_size: usize,
    s: f64,
    mode: SamplingMode,
    rng: &mut Stream,
) -> Vec<usize> {
    if shard_size == 0 {
        return Vec::new();
    }
    if s >= 1.0 {
        return (0..shard_size).collect();
    }
    match mode {
        SamplingMode::Poisson => (0..shard_size).filter(|_| rng.random_bool(s)).collect(),
        SamplingMode::FixedSize => {
            let mut idx =
                index::sample(rng, shard_size, fixed_batch_size(shard_size, s)).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Scales `g` by `min(1, C / ||g||)`. Vectors already within the bound are
/// returned bit-for-bit.
pub fn clip_gradient(g: &ParamVector, clip_threshold: f64) -> ParamVector {
    let norm = l2_norm(g);
    if norm <= clip_threshold {
        return g.clone();
    }
    let mut out = g.clone();
    out.scale(clip_threshold / norm);
    out
}

/// `(sum_j clipped_j + z) / |S|` with `z ~ N(0, sigma^2 C^2)` per coordinate,
/// drawn once for the whole batch.
pub fn noisy_batch_gradient(
    clipped: &[ParamVector],
    clip_threshold: f64,
    noise_multiplier: f64,
    rng: &mut Stream,
) -> Result<ParamVector> {
    let first = clipped.first().ok_or(Error::EmptyBatch(
        "noisy_batch_gradient needs at least one gradient",
    ))?;
    let mut sum = ParamVector::zeros(first.len());
    for g in clipped {
        debug_assert!(l2_norm(g) <= clip_threshold + NORM_SLACK);
        sum.add_scaled(1.0, g)?;
    }
    let std = noise_multiplier * clip_threshold;
    if std > 0.0 {
        let normal =
            Normal::new(0.0, std).map_err(|_| Error::validation("noise stdev", "finite"))?;
        for v in sum.as_mut_slice() {
            *v += normal.sample(rng);
        }
    }
    let n = clipped.len() as f64;
    for v in sum.as_mut_slice() {
        *v /= n;
    }
    Ok(sum)
}

/// RDP of one Gaussian-mechanism step at order `alpha`.
pub fn rdp_cost_per_step(noise_multiplier: f64, alpha: f64) -> Result<f64> {
    if noise_multiplier <= 0.0 {
        return Err(Error::InfinitePrivacyCost);
    }
    if !(alpha > 1.0) {
        return Err(Error::InvalidOrder(alpha));
    }
    Ok(alpha / (2.0 * noise_multiplier * noise_multiplier))
}

/// Converts an `(alpha, R)`-RDP guarantee into epsilon at the given delta.
pub fn rdp_to_dp(rdp: f64, alpha: f64, delta: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::InvalidOrder(alpha));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::validation("delta", "in (0, 1)"));
    }
    Ok(rdp + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0))
}

/// Orders 1.5 and 2..=64.
pub fn default_alpha_grid() -> Vec<f64> {
    std::iter::once(1.5)
        .chain((2..=64).map(f64::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    steps_taken: u64,
    config: DpConfig,
    alpha_grid: Vec<f64>,
}

impl PrivacyLedger {
    pub fn new(config: DpConfig) -> Self {
        Self::with_grid(config, default_alpha_grid()).expect("default grid is valid")
    }

    pub fn with_grid(config: DpConfig, alpha_grid: Vec<f64>) -> Result<Self> {
        if alpha_grid.is_empty() {
            return Err(Error::validation("alpha_grid", "nonempty"));
        }
        if let Some(&a) = alpha_grid.iter().find(|&&a| !(a > 1.0)) {
            return Err(Error::InvalidOrder(a));
        }
        Ok(PrivacyLedger {
            steps_taken: 0,
            config,
            alpha_grid,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn config(&self) -> &DpConfig {
        &self.config
    }

    pub fn alpha_grid(&self) -> &[f64] {
        &self.alpha_grid
    }

    pub fn record_steps(&mut self, steps: u64) {
        self.steps_taken += steps;
    }

    /// Total RDP at each grid order.
    pub fn rdp_totals(&self) -> Result<Vec<f64>> {
        self.alpha_grid
            .iter()
            .map(|&a| {
                Ok(self.steps_taken as f64 * rdp_cost_per_step(self.config.noise_multiplier, a)?)
            })
            .collect()
    }

    pub fn epsilon_spent(&self) -> Result<(f64, f64)> {
        epsilon_spent(self)
    }
}

/// Smallest epsilon over the ledger's order grid and the order achieving it
/// (ties go to the smaller order).
pub fn epsilon_spent(ledger: &PrivacyLedger) -> Result<(f64, f64)> {
    epsilon_from_totals(
        &ledger.alpha_grid,
        &ledger.rdp_totals()?,
        ledger.config.delta,
    )
}

pub fn epsilon_from_totals(alphas: &[f64], totals: &[f64], delta: f64) -> Result<(f64, f64)> {
    let mut best = (f64::INFINITY, f64::NAN);
    for (&a, &r) in alphas.iter().zip(totals) {
        let eps = rdp_to_dp(r, a, delta)?;
        if eps < best.0 || (eps == best.0 && a < best.1) {
            best = (eps, a);
        }
    }
    Ok(best)
}

fn epsilon_after(config: &DpConfig, steps: u64) -> Result<f64> {
    let mut ledger = PrivacyLedger::new(*config);
    ledger.record_steps(steps);
    Ok(ledger.epsilon_spent()?.0)
}

/// Largest step count whose epsilon stays within `target`.
pub fn steps_for_budget(config: &DpConfig, target: f64) -> Result<u64> {
    let floor = epsilon_after(config, 0)?;
    if !(target >= floor) {
        return Err(Error::UnreachableBudget { target, floor });
    }
    let mut lo = 0u64;
    let mut hi = 1u64;
    while epsilon_after(config, hi)? <= target {
        lo = hi;
        if hi >= 1 << 62 {
            return Ok(hi);
        }
        hi *= 2;
    }
    // eps(lo) <= target < eps(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if epsilon_after(config, mid)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

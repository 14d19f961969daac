//! Convergence-bound evaluation and experiment drivers.
//!
//! The bound is `P/√(MkT) + Q/(kT)` with unit hidden constants, where
//!
//! ```text
//! P = (Σ_m γ_β⁴σ²/M + 1)·γ_α
//! Q = Σ_m [((k−1)γ_β⁴ + 1)² − 1/γ_β²]·σ² + Mρ²·[((k−1)γ_β² + 1)² − (1/γ_β²)((k−1)/γ_β² + 1)]
//! ```
//!
//! It is a comparative tool for how the guarantee scales with the clip
//! bounds, local steps and rounds, not a certified numeric bound.

use rayon::prelude::*;

use crate::datagen::{self, Dataset};
use crate::engine::{self, stream_tags, ExperimentConfig, GlobalScheduler, LocalScheduler, Simulation};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::models::ModelSpec;
use crate::vecmath::{l2_norm_sq, mix_words, ParamVector, RngStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub gamma_alpha: f64,
    pub gamma_beta: f64,
    /// Per-client stochastic-gradient variance bound.
    pub sigma_sq: f64,
    /// Dissimilarity constant.
    pub rho_sq: f64,
    pub clients: usize,
    pub local_steps: usize,
    pub rounds: usize,
    /// Smoothness constant; recorded for reference, unused by the bound.
    pub lipschitz: Option<f64>,
    /// Gradient-dissimilarity ratio; recorded for reference, unused by the bound.
    pub psi_sq: Option<f64>,
}

impl BoundParams {
    pub fn new(
        gamma_alpha: f64,
        gamma_beta: f64,
        sigma_sq: f64,
        rho_sq: f64,
        clients: usize,
        local_steps: usize,
        rounds: usize,
    ) -> Result<Self> {
        let p = BoundParams {
            gamma_alpha,
            gamma_beta,
            sigma_sq,
            rho_sq,
            clients,
            local_steps,
            rounds,
            lipschitz: None,
            psi_sq: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// Clip bounds must be at least 1; exactly 1 is accepted as the
    /// degenerate limit where the formulas stay well defined.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_alpha", self.gamma_alpha), ("gamma_beta", self.gamma_beta)] {
            if !(v >= 1.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must exceed 1 (got {v})")));
            }
        }
        for (name, v) in [("sigma_sq", self.sigma_sq), ("rho_sq", self.rho_sq)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative (got {v})")));
            }
        }
        for (name, v) in [("M", self.clients), ("k", self.local_steps), ("T", self.rounds)] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn with_rounds(self, rounds: usize) -> Self {
        BoundParams { rounds, ..self }
    }
}

pub fn bound_p(params: &BoundParams) -> f64 {
    let gb4 = params.gamma_beta.powi(4);
    (gb4 * params.sigma_sq + 1.0) * params.gamma_alpha
}

pub fn bound_q(params: &BoundParams) -> f64 {
    let gb2 = params.gamma_beta * params.gamma_beta;
    let gb4 = gb2 * gb2;
    let km1 = (params.local_steps - 1) as f64;
    let m = params.clients as f64;
    let variance_term = ((km1 * gb4 + 1.0).powi(2) - 1.0 / gb2) * params.sigma_sq;
    let drift_term = (km1 * gb2 + 1.0).powi(2) - (1.0 / gb2) * (km1 / gb2 + 1.0);
    m * variance_term + m * params.rho_sq * drift_term
}

pub fn bound_value(params: &BoundParams) -> f64 {
    let mkt = (params.clients * params.local_steps * params.rounds) as f64;
    let kt = (params.local_steps * params.rounds) as f64;
    bound_p(params) / mkt.sqrt() + bound_q(params) / kt
}

/// Mean squared deviation of `probes` mini-batch gradients from the
/// full-shard gradient at `w`.
pub fn gradient_variance(
    model: &ModelSpec,
    ds: &Dataset,
    shard: &[usize],
    w: &ParamVector,
    batch_size: usize,
    probes: usize,
    stream: RngStream,
) -> Result<f64> {
    if probes < 2 {
        return Err(Error::InvalidArgument("need at least 2 probe batches".into()));
    }
    let mut sorted = shard.to_vec();
    sorted.sort_unstable();
    let full = model.grad(w, &ds.gather(&sorted)?)?;
    let mut total = 0.0;
    let mut taken = 0usize;
    let mut epoch = 0u64;
    while taken < probes {
        for chunk in datagen::batch_indices(shard, batch_size, stream.substream(epoch))? {
            if taken == probes {
                break;
            }
            let g = model.grad(w, &ds.gather(&chunk)?)?;
            total += l2_norm_sq(&g.sub(&full)?);
            taken += 1;
        }
        epoch += 1;
    }
    Ok(total / probes as f64)
}

/// Largest per-client gradient variance at the initial model.
pub fn estimate_sigma_sq(cfg: &ExperimentConfig, probe_batches: usize) -> Result<f64> {
    let sim = Simulation::new(cfg.clone())?;
    let w = sim.initial_weights();
    let mut worst: f64 = 0.0;
    for client in 0..cfg.num_clients {
        let v = gradient_variance(
            sim.client_model(client),
            sim.train_set(),
            &sim.partition().assignments[client],
            &w,
            cfg.batch_size,
            probe_batches,
            RngStream::new(cfg.seed, client as u64, 0).substream(stream_tags::PROBE),
        )?;
        worst = worst.max(v);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMetric {
    /// Training loss at or below the target.
    LossBelow,
    /// Test accuracy at or above the target.
    AccuracyAbove,
}

/// First round whose metric reaches the target (inclusive).
pub fn time_to_target(metrics: &[MetricsRecord], target: f64, metric: TargetMetric) -> Option<usize> {
    metrics
        .iter()
        .find(|r| match metric {
            TargetMetric::LossBelow => r.train_loss <= target,
            TargetMetric::AccuracyAbove => r.test_accuracy.is_some_and(|a| a >= target),
        })
        .map(|r| r.round)
}

/// A scheduler pairing compared in a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub global: GlobalScheduler,
    pub local: LocalScheduler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub alpha0_values: Vec<f64>,
    pub beta0_values: Vec<f64>,
    pub base: ExperimentConfig,
    /// The first variant is the baseline for delta grids.
    pub variants: Vec<Variant>,
    /// Independent repetitions per cell; accuracies are averaged.
    pub seeds: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alpha0_values.is_empty() || self.beta0_values.is_empty() {
            return Err(Error::InvalidConfig("grid axes must be nonempty".into()));
        }
        if self.variants.len() < 2 {
            return Err(Error::InvalidConfig("a grid compares at least 2 variants".into()));
        }
        if self.seeds == 0 {
            return Err(Error::InvalidConfig("grid_seeds must be >= 1".into()));
        }
        if !self.base.model_spec().is_classifier() {
            return Err(Error::InvalidConfig("robustness grids need a classifier model".into()));
        }
        Ok(())
    }

    /// Seed for repetition `rep` of cell `(i, j)`, shared by all variants.
    pub fn cell_seed(&self, i: usize, j: usize, rep: usize) -> u64 {
        mix_words(&[self.base.seed, i as u64, j as u64, rep as u64])
    }
}

/// A run that did not finish.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub alpha0: f64,
    pub beta0: f64,
    pub variant: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub alpha0_values: Vec<f64>,
    pub beta0_values: Vec<f64>,
    pub variants: Vec<Variant>,
    /// `accuracy[v][i][j]`: mean final test accuracy of variant `v` at
    /// `(alpha0_values[i], beta0_values[j])`. Failed runs count as chance.
    pub accuracy: Vec<Vec<Vec<f64>>>,
    /// `diverged[v][i][j]`: number of repetitions that failed.
    pub diverged: Vec<Vec<Vec<usize>>>,
    pub failures: Vec<CellFailure>,
}

impl GridResult {
    /// `accuracy[v] − accuracy[0]`, cell by cell.
    pub fn delta(&self, variant: usize) -> Vec<Vec<f64>> {
        self.accuracy[variant]
            .iter()
            .zip(&self.accuracy[0])
            .map(|(row, base)| row.iter().zip(base).map(|(a, b)| a - b).collect())
            .collect()
    }
}

struct Job {
    i: usize,
    j: usize,
    variant: usize,
    rep: usize,
}

pub fn robustness_grid(spec: &GridSpec) -> Result<GridResult> {
    spec.validate()?;
    let chance = 1.0 / spec.base.num_classes as f64;
    let (na, nb, nv) = (spec.alpha0_values.len(), spec.beta0_values.len(), spec.variants.len());
    let mut jobs = Vec::new();
    for variant in 0..nv {
        for i in 0..na {
            for j in 0..nb {
                for rep in 0..spec.seeds {
                    jobs.push(Job { i, j, variant, rep });
                }
            }
        }
    }
    let outcomes: Vec<std::result::Result<f64, String>> = jobs
        .par_iter()
        .map(|job| {
            let v = spec.variants[job.variant];
            let cfg = ExperimentConfig {
                initial_alpha: spec.alpha0_values[job.i],
                initial_beta: spec.beta0_values[job.j],
                scheduler_global: v.global,
                scheduler_local: v.local,
                seed: spec.cell_seed(job.i, job.j, job.rep),
                workers: 1,
                ..spec.base.clone()
            };
            match engine::run_experiment(&cfg) {
                Ok(records) => records
                    .last()
                    .and_then(|r| r.test_accuracy)
                    .ok_or_else(|| "no accuracy recorded".to_string()),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect();

    let mut accuracy = vec![vec![vec![0.0; nb]; na]; nv];
    let mut diverged = vec![vec![vec![0usize; nb]; na]; nv];
    let mut failures = Vec::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let acc = match outcome {
            Ok(a) => a,
            Err(reason) => {
                diverged[job.variant][job.i][job.j] += 1;
                failures.push(CellFailure {
                    alpha0: spec.alpha0_values[job.i],
                    beta0: spec.beta0_values[job.j],
                    variant: job.variant,
                    seed: spec.cell_seed(job.i, job.j, job.rep),
                    reason,
                });
                chance
            }
        };
        accuracy[job.variant][job.i][job.j] += acc / spec.seeds as f64;
    }
    Ok(GridResult {
        alpha0_values: spec.alpha0_values.clone(),
        beta0_values: spec.beta0_values.clone(),
        variants: spec.variants.clone(),
        accuracy,
        diverged,
        failures,
    })
}

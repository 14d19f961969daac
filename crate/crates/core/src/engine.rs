//! The FedAvg training loop with pluggable global and local schedulers.
//!
//! Each round the server samples clients, every client runs `K` mini-batch
//! SGD steps from the current global model, the server averages the client
//! updates `Δ_m = w^t − w_m^{t,K}` into the pseudo-gradient `Δ^t`, adjusts
//! its learning rate and applies `w^{t+1} = w^t − α^t Δ^t`.
//!
//! Clients may train in parallel. Every random draw comes from a stream keyed
//! by `(seed, client, round)`, and aggregation sums in client-index order, so
//! results do not depend on the worker count.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;

use crate::datagen::{self, Dataset, PartitionPlan};
use crate::error::{DivergenceSite, Error, Result};
use crate::metrics::MetricsRecord;
use crate::models::{Batch, ModelSpec};
use crate::schedulers::{self, ClipBounds, GlobalLrState, LocalLrState, OptimizerHyper, ServerOptimizerKind};
use crate::vecmath::{ParamVector, RngStream};

/// Purpose tags for streams not owned by a client.
pub(crate) mod stream_tags {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const PROBE: u64 = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Quadratic,
    LogisticRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalScheduler {
    Fixed,
    FedHyperG,
    FedExp,
    Decay,
    Adam,
    Adagrad,
    Momentum,
}

impl GlobalScheduler {
    pub fn optimizer_kind(self) -> Option<ServerOptimizerKind> {
        match self {
            GlobalScheduler::Adam => Some(ServerOptimizerKind::Adam),
            GlobalScheduler::Adagrad => Some(ServerOptimizerKind::Adagrad),
            GlobalScheduler::Momentum => Some(ServerOptimizerKind::Momentum),
            _ => None,
        }
    }
}

/// Exactly one local policy is active per run, so the server-side and
/// client-side hypergradient schedulers can never both rewrite `β`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalScheduler {
    Fixed,
    FedHyperSL,
    FedHyperCL,
    Decay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// `Δ^t = (1/|S|) Σ Δ_m`.
    #[default]
    Uniform,
    /// Weights proportional to shard sizes.
    SizeWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub quadratic_center: Vec<f64>,
    /// Per-client quadratic centers; overrides `quadratic_center`.
    pub client_centers: Option<Vec<Vec<f64>>>,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    /// Size of the held-out split relative to the whole generated corpus.
    pub test_fraction: f64,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub initial_alpha: f64,
    pub initial_beta: f64,
    pub scheduler_global: GlobalScheduler,
    pub scheduler_local: LocalScheduler,
    pub bounds: ClipBounds,
    pub decay_factor: f64,
    pub fedexp_epsilon: f64,
    pub optimizer: OptimizerHyper,
    pub dirichlet_alpha: f64,
    pub aggregation: Aggregation,
    /// Drop all hypergradient history so every scheduler sees a first round.
    pub freeze_hypergradients: bool,
    pub seed: u64,
    /// Client-parallelism width. Has no effect on results.
    pub workers: usize,
    pub record_wall_time: bool,
    pub target_loss: Option<f64>,
    pub target_accuracy: Option<f64>,
}

impl Default for ExperimentConfig {
    /// The desk-scale preset.
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::LogisticRegression,
            input_dim: 10,
            num_classes: 4,
            hidden_dim: 16,
            quadratic_center: vec![1.0],
            client_centers: None,
            samples_per_class: 500,
            cluster_spread: 0.3,
            test_fraction: 0.2,
            num_clients: 20,
            clients_per_round: 5,
            rounds: 200,
            local_steps: 5,
            batch_size: 32,
            initial_alpha: 1.0,
            initial_beta: 0.05,
            scheduler_global: GlobalScheduler::Fixed,
            scheduler_local: LocalScheduler::Fixed,
            bounds: ClipBounds::default(),
            decay_factor: 0.995,
            fedexp_epsilon: 1e-3,
            optimizer: OptimizerHyper::default(),
            dirichlet_alpha: 0.5,
            aggregation: Aggregation::Uniform,
            freeze_hypergradients: false,
            seed: 0,
            workers: 1,
            record_wall_time: false,
            target_loss: None,
            target_accuracy: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_clients == 0 {
            return bad("num_clients must be >= 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return bad(format!(
                "clients_per_round must lie in [1, num_clients={}], got {}",
                self.num_clients, self.clients_per_round
            ));
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.local_steps == 0 {
            return bad("local_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("initial_alpha", self.initial_alpha),
            ("initial_beta", self.initial_beta),
            ("cluster_spread", self.cluster_spread),
            ("dirichlet_alpha", self.dirichlet_alpha),
            ("fedexp_epsilon", self.fedexp_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        self.bounds.validate()?;
        if self.scheduler_global == GlobalScheduler::FedHyperG {
            let g = self.bounds.gamma_alpha;
            if self.initial_alpha < 1.0 / g || self.initial_alpha > g {
                return bad(format!(
                    "initial_alpha {} lies outside [1/gamma_alpha, gamma_alpha]",
                    self.initial_alpha
                ));
            }
        }
        if let Some(centers) = &self.client_centers {
            if self.model != ModelKind::Quadratic {
                return bad("client_centers only apply to the quadratic model".into());
            }
            if centers.len() != self.num_clients {
                return bad(format!(
                    "client_centers lists {} centers for {} clients",
                    centers.len(),
                    self.num_clients
                ));
            }
            let d = centers[0].len();
            if centers.iter().any(|c| c.len() != d) {
                return bad("client_centers must share one dimension".into());
            }
        }
        for spec in self.client_models() {
            spec.validate()?;
        }
        Ok(())
    }

    /// The objective each client optimizes, indexed by client.
    pub fn client_models(&self) -> Vec<ModelSpec> {
        match (self.model, &self.client_centers) {
            (ModelKind::Quadratic, Some(centers)) => centers
                .iter()
                .map(|c| ModelSpec::Quadratic {
                    center: ParamVector::new(c.clone()),
                })
                .collect(),
            _ => vec![self.model_spec(); self.num_clients],
        }
    }

    /// The shared model architecture (first client's objective for
    /// per-client quadratics).
    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelKind::Quadratic => ModelSpec::Quadratic {
                center: ParamVector::new(
                    self.client_centers
                        .as_ref()
                        .map(|c| c[0].clone())
                        .unwrap_or_else(|| self.quadratic_center.clone()),
                ),
            },
            ModelKind::LogisticRegression => ModelSpec::LogisticRegression {
                input_dim: self.input_dim,
                num_classes: self.num_classes,
            },
            ModelKind::Mlp => ModelSpec::Mlp {
                input_dim: self.input_dim,
                hidden_dim: self.hidden_dim,
                num_classes: self.num_classes,
            },
        }
    }

    pub fn test_samples_per_class(&self) -> usize {
        let total = self.samples_per_class as f64 / (1.0 - self.test_fraction);
        ((total * self.test_fraction).round() as usize).max(1)
    }
}

/// Global model and scheduler state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Index of the next round to run.
    pub round: usize,
    pub weights: ParamVector,
    pub global_lr: GlobalLrState,
    /// Round-start local rate `β^{t,0}` broadcast to clients.
    pub local_lr: LocalLrState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub delta_t: ParamVector,
    pub selected_clients: Vec<usize>,
    pub per_client_deltas: Vec<ParamVector>,
    pub metrics: MetricsRecord,
}

/// Result of one client's local pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub delta: ParamVector,
    pub final_state: LocalLrState,
    /// The local learning rate applied at each step.
    pub betas: Vec<f64>,
}

/// Everything one client needs for a local pass.
pub struct LocalTask<'a> {
    pub client: usize,
    pub model: &'a ModelSpec,
    pub dataset: &'a Dataset,
    pub shard: &'a [usize],
    pub local_steps: usize,
    pub batch_size: usize,
    pub scheduler: LocalScheduler,
    pub bounds: &'a ClipBounds,
    pub beta_initial: f64,
}

/// Runs exactly `K` SGD steps from `w_t`. With the client-side scheduler the
/// learning rate is updated from `(g_k, g_{k-1}, Δ^{t-1})` before each step.
/// Returns `Δ_m = w_t − w_m^{t,K}`.
pub fn local_train(
    task: &LocalTask<'_>,
    w_t: &ParamVector,
    beta_start: f64,
    global_prev_update: Option<&ParamVector>,
    stream: RngStream,
) -> Result<LocalOutcome> {
    let diverged = |step: usize, detail: String| Error::Diverged {
        round: stream.round as usize,
        site: DivergenceSite::Client {
            client: task.client,
            step,
        },
        detail,
        last_finite: None,
    };
    let mut w = w_t.clone();
    let mut state = LocalLrState::for_round(task.beta_initial, beta_start);
    let mut betas = Vec::with_capacity(task.local_steps);
    let mut schedule: Vec<Batch> = Vec::new();
    let mut next_batch = 0usize;
    let mut epoch = 0u64;
    for step in 0..task.local_steps {
        // K counts steps; a new shuffle starts whenever the shard is exhausted.
        if next_batch == schedule.len() {
            schedule = datagen::batches(task.shard, task.dataset, task.batch_size, stream.substream(epoch))?;
            epoch += 1;
            next_batch = 0;
        }
        let batch = &schedule[next_batch];
        next_batch += 1;
        let (loss, g) = task.model.loss_and_grad(&w, batch)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(diverged(step, "non-finite loss or gradient".into()));
        }
        if task.scheduler == LocalScheduler::FedHyperCL {
            state = schedulers::fedhyper_cl_step(&state, &g, global_prev_update, task.local_steps, task.bounds)
                .map_err(|e| diverged(step, e.to_string()))?;
        }
        w.axpy_assign(-state.beta_current, &g)
            .map_err(|e| diverged(step, e.to_string()))?;
        betas.push(state.beta_current);
    }
    let delta = w_t.sub(&w).map_err(|e| diverged(task.local_steps, e.to_string()))?;
    Ok(LocalOutcome {
        delta,
        final_state: state,
        betas,
    })
}

/// Uniform mean of client updates, summed in the given order.
pub fn aggregate(per_client_deltas: &[ParamVector]) -> Result<ParamVector> {
    let weights = vec![1.0 / per_client_deltas.len().max(1) as f64; per_client_deltas.len()];
    weighted_sum(per_client_deltas, &weights)
}

fn weighted_sum(deltas: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot aggregate zero client updates".into()))?;
    let mut out = ParamVector::zeros(first.len());
    for (d, w) in deltas.iter().zip(weights) {
        out.axpy_assign(*w, d)?;
    }
    Ok(out)
}

/// Loss and accuracy of the global model on both splits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
}

/// A configured federation: data, partition and client objectives.
pub struct Simulation {
    cfg: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    train_batch: Batch,
    test_batch: Batch,
    partition: PartitionPlan,
    models: Vec<ModelSpec>,
    pool: Option<rayon::ThreadPool>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let train = datagen::generate_classification(
            cfg.num_classes,
            cfg.input_dim,
            cfg.samples_per_class,
            cfg.cluster_spread,
            RngStream::shared(cfg.seed, stream_tags::TRAIN_DATA),
        )?;
        let test = datagen::generate_classification(
            cfg.num_classes,
            cfg.input_dim,
            cfg.test_samples_per_class(),
            cfg.cluster_spread,
            RngStream::shared(cfg.seed, stream_tags::TEST_DATA),
        )?;
        let partition = datagen::dirichlet_partition(
            &train,
            cfg.num_clients,
            cfg.dirichlet_alpha,
            RngStream::shared(cfg.seed, stream_tags::PARTITION),
        )?;
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Simulation {
            models: cfg.client_models(),
            train_batch: train.as_batch(),
            test_batch: test.as_batch(),
            cfg,
            train,
            test,
            partition,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn partition(&self) -> &PartitionPlan {
        &self.partition
    }

    pub fn client_model(&self, client: usize) -> &ModelSpec {
        &self.models[client]
    }

    pub fn initial_weights(&self) -> ParamVector {
        self.models[0].init_params(RngStream::shared(self.cfg.seed, stream_tags::INIT))
    }

    pub fn initial_state(&self) -> ServerState {
        ServerState {
            round: 0,
            weights: self.initial_weights(),
            global_lr: GlobalLrState::new(self.cfg.initial_alpha),
            local_lr: LocalLrState::new(self.cfg.initial_beta),
        }
    }

    /// Clients participating in `round`, in increasing index order.
    pub fn sample_clients(&self, round: usize) -> Vec<usize> {
        let stream = RngStream::shared(self.cfg.seed, stream_tags::SAMPLING).substream(round as u64);
        let mut picked = index::sample(&mut stream.rng(), self.cfg.num_clients, self.cfg.clients_per_round).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn local_task(&self, client: usize) -> LocalTask<'_> {
        LocalTask {
            client,
            model: &self.models[client],
            dataset: &self.train,
            shard: &self.partition.assignments[client],
            local_steps: self.cfg.local_steps,
            batch_size: self.cfg.batch_size,
            scheduler: self.cfg.scheduler_local,
            bounds: &self.cfg.bounds,
            beta_initial: self.cfg.initial_beta,
        }
    }

    /// Global objective: the mean of client objectives for per-client
    /// quadratics, otherwise the model loss on each split.
    pub fn evaluate(&self, w: &ParamVector) -> Result<Evaluation> {
        if self.cfg.client_centers.is_some() {
            let mut total = 0.0;
            for m in &self.models {
                total += m.loss(w, &self.train_batch)?;
            }
            let loss = total / self.models.len() as f64;
            return Ok(Evaluation {
                train_loss: loss,
                train_accuracy: None,
                test_loss: loss,
                test_accuracy: None,
            });
        }
        let model = &self.models[0];
        let acc = |b: &Batch| -> Result<Option<f64>> {
            if model.is_classifier() {
                Ok(Some(model.accuracy(w, b)?))
            } else {
                Ok(None)
            }
        };
        Ok(Evaluation {
            train_loss: model.loss(w, &self.train_batch)?,
            train_accuracy: acc(&self.train_batch)?,
            test_loss: model.loss(w, &self.test_batch)?,
            test_accuracy: acc(&self.test_batch)?,
        })
    }

    fn train_clients(&self, clients: &[usize], server: &ServerState) -> Result<Vec<LocalOutcome>> {
        let global_prev = server.global_lr.prev_global_update.as_ref();
        let beta_start = server.local_lr.beta_round_start;
        let run = |&m: &usize| {
            local_train(
                &self.local_task(m),
                &server.weights,
                beta_start,
                global_prev,
                RngStream::new(self.cfg.seed, m as u64, server.round as u64),
            )
        };
        let outcomes: Vec<Result<LocalOutcome>> = match &self.pool {
            Some(pool) => pool.install(|| clients.par_iter().map(run).collect()),
            None => clients.iter().map(run).collect(),
        };
        outcomes.into_iter().collect()
    }

    /// One communication round.
    pub fn run_round(&self, server: &ServerState) -> Result<(ServerState, RoundOutput)> {
        let started = Instant::now();
        let t = server.round;
        let cfg = &self.cfg;
        let server_err = |e: Error| match e {
            e @ Error::Diverged { .. } => e,
            other => Error::Diverged {
                round: t,
                site: DivergenceSite::Server,
                detail: other.to_string(),
                last_finite: None,
            },
        };

        let clients = self.sample_clients(t);
        let outcomes = self.train_clients(&clients, server)?;
        let per_client_deltas: Vec<ParamVector> = outcomes.iter().map(|o| o.delta.clone()).collect();
        let delta_t = match cfg.aggregation {
            Aggregation::Uniform => aggregate(&per_client_deltas),
            Aggregation::SizeWeighted => {
                let sizes: Vec<f64> = clients
                    .iter()
                    .map(|&m| self.partition.assignments[m].len() as f64)
                    .collect();
                let total: f64 = sizes.iter().sum();
                let weights: Vec<f64> = sizes.iter().map(|s| s / total).collect();
                weighted_sum(&per_client_deltas, &weights)
            }
        }
        .map_err(server_err)?;

        let prev = if cfg.freeze_hypergradients {
            None
        } else {
            server.global_lr.prev_global_update.clone()
        };
        let history = GlobalLrState {
            prev_global_update: prev.clone(),
            ..server.global_lr.clone()
        };

        // Global learning rate and the direction it scales.
        let (alpha, step_dir, mut next_global) = match cfg.scheduler_global {
            GlobalScheduler::Fixed | GlobalScheduler::Decay => (history.alpha, delta_t.clone(), history.clone()),
            GlobalScheduler::FedHyperG => {
                let next = schedulers::fedhyper_g_step(&history, &delta_t, &cfg.bounds).map_err(server_err)?;
                (next.alpha, delta_t.clone(), next)
            }
            GlobalScheduler::FedExp => {
                let a =
                    schedulers::fedexp_step(&per_client_deltas, &delta_t, cfg.fedexp_epsilon).map_err(server_err)?;
                (a, delta_t.clone(), history.clone())
            }
            GlobalScheduler::Adam | GlobalScheduler::Adagrad | GlobalScheduler::Momentum => {
                let kind = cfg.scheduler_global.optimizer_kind().expect("optimizer scheduler");
                let (update, next) =
                    schedulers::server_optimizer_step(&history, &delta_t, kind, &cfg.optimizer).map_err(server_err)?;
                (history.alpha, update, next)
            }
        };
        let mut weights = server.weights.clone();
        weights.axpy_assign(-alpha, &step_dir).map_err(server_err)?;

        next_global.alpha = match cfg.scheduler_global {
            GlobalScheduler::Decay => schedulers::decay_step(history.alpha, cfg.decay_factor),
            // FedExp recomputes its rate from scratch every round.
            GlobalScheduler::FedExp => history.alpha,
            _ => next_global.alpha,
        };
        next_global.prev_global_update = if cfg.freeze_hypergradients {
            None
        } else {
            Some(delta_t.clone())
        };

        let local_lr = match cfg.scheduler_local {
            LocalScheduler::FedHyperSL => {
                schedulers::fedhyper_sl_step(&server.local_lr, &delta_t, prev.as_ref(), &cfg.bounds)
                    .map_err(server_err)?
            }
            LocalScheduler::Decay => {
                let beta = schedulers::decay_step(server.local_lr.beta_round_start, cfg.decay_factor);
                LocalLrState {
                    beta_round_start: beta,
                    beta_current: beta,
                    ..server.local_lr.clone()
                }
            }
            LocalScheduler::Fixed | LocalScheduler::FedHyperCL => server.local_lr.clone(),
        };

        let eval = self.evaluate(&weights).map_err(server_err)?;
        let all_betas: Vec<f64> = outcomes.iter().flat_map(|o| o.betas.iter().copied()).collect();
        let beta_sum: f64 = all_betas.iter().sum();
        let metrics = MetricsRecord {
            round: t,
            train_loss: eval.train_loss,
            train_accuracy: eval.train_accuracy,
            test_loss: eval.test_loss,
            test_accuracy: eval.test_accuracy,
            alpha,
            beta_mean: beta_sum / all_betas.len() as f64,
            beta_min: all_betas.iter().copied().fold(f64::INFINITY, f64::min),
            beta_max: all_betas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if !metrics.is_finite() {
            return Err(Error::Diverged {
                round: t,
                site: DivergenceSite::Server,
                detail: "non-finite metrics".into(),
                last_finite: None,
            });
        }
        let next = ServerState {
            round: t + 1,
            weights,
            global_lr: next_global,
            local_lr,
        };
        Ok((
            next,
            RoundOutput {
                delta_t,
                selected_clients: clients,
                per_client_deltas,
                metrics,
            },
        ))
    }
}

/// Runs `cfg.rounds` rounds, handing each metrics row to `on_record` as soon
/// as it is produced. A divergence error carries the last finite row.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut on_record: F) -> Result<Vec<MetricsRecord>>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    let sim = Simulation::new(cfg.clone())?;
    let mut server = sim.initial_state();
    let mut records: Vec<MetricsRecord> = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (next, out) = match sim.run_round(&server) {
            Ok(v) => v,
            Err(Error::Diverged {
                round, site, detail, ..
            }) => {
                return Err(Error::Diverged {
                    round,
                    site,
                    detail,
                    last_finite: records.last().cloned().map(Box::new),
                })
            }
            Err(e) => return Err(e),
        };
        on_record(&out.metrics)?;
        records.push(out.metrics);
        server = next;
    }
    Ok(records)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    run_experiment_with(cfg, |_| Ok(()))
}

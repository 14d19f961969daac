//! Learning-rate schedulers as pure state transitions.
//!
//! The hypergradient schedulers adjust a learning rate by the inner product of
//! two consecutive descent directions: aligned directions raise the rate,
//! opposing ones lower it. Three flavours exist:
//!
//! * global (`fedhyper_g_step`): server LR `α` from consecutive pseudo-gradients `Δ`;
//! * server-side local (`fedhyper_sl_step`): the round-start client LR `β`
//!   from the same `Δ` product;
//! * client-side local (`fedhyper_cl_step`): per-step client LR from
//!   consecutive local gradients plus a `1/K`-scaled alignment term with the
//!   previous round's `Δ`.
//!
//! A hypergradient term whose historical operand does not exist yet
//! contributes zero. Baselines (FedExp, exponential decay and the
//! Adam/Adagrad/momentum server optimizers) live here as well.

use crate::error::{Error, Result};
use crate::vecmath::{dot, l2_norm_sq, ParamVector};

/// How the local learning rate is held inside its box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaClipMode {
    /// `β / β_initial ∈ [1/γ_β, γ_β]`.
    #[default]
    Relative,
    /// `β ∈ [1/γ_β, γ_β]`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipBounds {
    pub gamma_alpha: f64,
    pub gamma_beta: f64,
    pub beta_mode: BetaClipMode,
}

impl Default for ClipBounds {
    fn default() -> Self {
        ClipBounds {
            gamma_alpha: 3.0,
            gamma_beta: 10.0,
            beta_mode: BetaClipMode::Relative,
        }
    }
}

impl ClipBounds {
    pub fn new(gamma_alpha: f64, gamma_beta: f64, beta_mode: BetaClipMode) -> Result<Self> {
        let bounds = ClipBounds {
            gamma_alpha,
            gamma_beta,
            beta_mode,
        };
        bounds.validate()?;
        Ok(bounds)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_alpha", self.gamma_alpha), ("gamma_beta", self.gamma_beta)] {
            if !(v > 1.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must exceed 1 (got {v})")));
            }
        }
        Ok(())
    }

    pub fn clip_alpha(&self, alpha: f64) -> f64 {
        alpha.max(1.0 / self.gamma_alpha).min(self.gamma_alpha)
    }

    pub fn clip_beta(&self, beta: f64, beta_initial: f64) -> f64 {
        let scale = match self.beta_mode {
            BetaClipMode::Relative => beta_initial,
            BetaClipMode::Absolute => 1.0,
        };
        beta.max(scale / self.gamma_beta).min(scale * self.gamma_beta)
    }
}

/// Server-side state of the global learning rate and any server optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLrState {
    pub alpha: f64,
    /// `Δ^{t-1}`, the previous round's pseudo-gradient.
    pub prev_global_update: Option<ParamVector>,
    pub optimizer: Option<ServerOptimizerState>,
}

impl GlobalLrState {
    pub fn new(alpha: f64) -> Self {
        GlobalLrState {
            alpha,
            prev_global_update: None,
            optimizer: None,
        }
    }
}

/// Local learning-rate state. On the server it carries the shared
/// round-start rate; on a client it tracks the per-step rate within a round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLrState {
    pub beta_round_start: f64,
    pub beta_current: f64,
    /// The configured initial local rate; the anchor for relative clipping.
    pub beta_initial: f64,
    pub prev_local_grad: Option<ParamVector>,
}

impl LocalLrState {
    pub fn new(beta_initial: f64) -> Self {
        LocalLrState {
            beta_round_start: beta_initial,
            beta_current: beta_initial,
            beta_initial,
            prev_local_grad: None,
        }
    }

    /// Client state at the start of a round whose broadcast rate is `beta_start`.
    pub fn for_round(beta_initial: f64, beta_start: f64) -> Self {
        LocalLrState {
            beta_round_start: beta_start,
            beta_current: beta_start,
            beta_initial,
            prev_local_grad: None,
        }
    }
}

fn finite_dot(a: &ParamVector, b: &ParamVector, what: &str) -> Result<f64> {
    let v = dot(a, b)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} hypergradient")))
    }
}

/// Global hypergradient step: `α ← clip(α + Δ^t·Δ^{t-1})`, then remember `Δ^t`.
pub fn fedhyper_g_step(state: &GlobalLrState, delta_t: &ParamVector, bounds: &ClipBounds) -> Result<GlobalLrState> {
    let alpha = match &state.prev_global_update {
        Some(prev) => bounds.clip_alpha(state.alpha + finite_dot(delta_t, prev, "global")?),
        None => state.alpha,
    };
    Ok(GlobalLrState {
        alpha,
        prev_global_update: Some(delta_t.clone()),
        optimizer: state.optimizer.clone(),
    })
}

/// Server-side local step: `β^{t,0} ← clip(β^{t-1,0} + Δ^t·Δ^{t-1})`.
pub fn fedhyper_sl_step(
    state: &LocalLrState,
    delta_t: &ParamVector,
    prev_delta: Option<&ParamVector>,
    bounds: &ClipBounds,
) -> Result<LocalLrState> {
    let Some(prev) = prev_delta else {
        return Ok(state.clone());
    };
    let beta = bounds.clip_beta(
        state.beta_round_start + finite_dot(delta_t, prev, "server-side local")?,
        state.beta_initial,
    );
    Ok(LocalLrState {
        beta_round_start: beta,
        beta_current: beta,
        ..state.clone()
    })
}

/// The two client-side hypergradient components for gradient `g_k`:
/// `X = g_k·g_{k-1}` and `Y = (1/K)·g_k·Δ^{t-1}`, each zero without history.
pub fn client_hypergradient_terms(
    state: &LocalLrState,
    g_k: &ParamVector,
    global_prev_update: Option<&ParamVector>,
    local_steps: usize,
) -> Result<(f64, f64)> {
    if local_steps == 0 {
        return Err(Error::InvalidArgument("local step count K must be >= 1".into()));
    }
    let x = match &state.prev_local_grad {
        Some(prev) => finite_dot(g_k, prev, "client-side local")?,
        None => 0.0,
    };
    let y = match global_prev_update {
        Some(delta) => finite_dot(g_k, delta, "client-side global")? / local_steps as f64,
        None => 0.0,
    };
    Ok((x, y))
}

/// Client-side local step: `β^{t,k} ← clip(β^{t,k-1} + X + Y)`, then remember `g_k`.
pub fn fedhyper_cl_step(
    state: &LocalLrState,
    g_k: &ParamVector,
    global_prev_update: Option<&ParamVector>,
    local_steps: usize,
    bounds: &ClipBounds,
) -> Result<LocalLrState> {
    let (x, y) = client_hypergradient_terms(state, g_k, global_prev_update, local_steps)?;
    let beta = bounds.clip_beta(state.beta_current + x + y, state.beta_initial);
    if !beta.is_finite() {
        return Err(Error::non_finite("client-side local learning rate"));
    }
    Ok(LocalLrState {
        beta_current: beta,
        prev_local_grad: Some(g_k.clone()),
        ..state.clone()
    })
}

/// FedExp global rate: `max{1, Σ‖Δ_m‖² / (2M(‖Δ‖² + ε))}`.
pub fn fedexp_step(local_updates: &[ParamVector], delta_t: &ParamVector, epsilon: f64) -> Result<f64> {
    if local_updates.is_empty() {
        return Err(Error::InvalidArgument("fedexp needs at least one local update".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument("fedexp epsilon must be positive".into()));
    }
    let mut spread = 0.0;
    for u in local_updates {
        if u.len() != delta_t.len() {
            return Err(Error::DimensionMismatch {
                expected: delta_t.len(),
                found: u.len(),
            });
        }
        spread += l2_norm_sq(u);
    }
    let m = local_updates.len() as f64;
    let ratio = spread / (2.0 * m * (l2_norm_sq(delta_t) + epsilon));
    if ratio.is_nan() {
        return Err(Error::non_finite("fedexp ratio"));
    }
    Ok(ratio.max(1.0))
}

/// One step of exponential decay.
pub fn decay_step(lr: f64, factor: f64) -> f64 {
    debug_assert!(factor > 0.0 && factor <= 1.0, "decay factor must lie in (0, 1]");
    lr * factor
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerOptimizerKind {
    Adam,
    Adagrad,
    Momentum,
}

/// Server optimizer constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerHyper {
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_tau: f64,
    pub adagrad_tau: f64,
    pub momentum: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_tau: 1e-3,
            adagrad_tau: 1e-3,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerOptimizerState {
    Adam { m: ParamVector, v: ParamVector, step: u32 },
    Adagrad { accumulator: ParamVector },
    Momentum { buffer: ParamVector },
}

/// Treats `Δ^t` as a pseudo-gradient and returns the preconditioned update to
/// apply as `w ← w − α·update`, plus the advanced state.
pub fn server_optimizer_step(
    state: &GlobalLrState,
    delta_t: &ParamVector,
    kind: ServerOptimizerKind,
    hyper: &OptimizerHyper,
) -> Result<(ParamVector, GlobalLrState)> {
    let d = delta_t.as_slice();
    let zeros = || ParamVector::zeros(d.len());
    let check = |v: &ParamVector| {
        if v.len() == d.len() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: d.len(),
                found: v.len(),
            })
        }
    };
    let (update, next) = match (kind, state.optimizer.clone()) {
        (ServerOptimizerKind::Adam, prev) => {
            let (mut m, mut v, step) = match prev {
                Some(ServerOptimizerState::Adam { m, v, step }) => (m, v, step),
                _ => (zeros(), zeros(), 0),
            };
            check(&m)?;
            check(&v)?;
            let step = step + 1;
            let (b1, b2) = (hyper.adam_beta1, hyper.adam_beta2);
            let c1 = 1.0 - b1.powi(step as i32);
            let c2 = 1.0 - b2.powi(step as i32);
            let mut update = Vec::with_capacity(d.len());
            for ((mi, vi), di) in m.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(d) {
                *mi = b1 * *mi + (1.0 - b1) * di;
                *vi = b2 * *vi + (1.0 - b2) * di * di;
                update.push((*mi / c1) / ((*vi / c2).sqrt() + hyper.adam_tau));
            }
            (update, ServerOptimizerState::Adam { m, v, step })
        }
        (ServerOptimizerKind::Adagrad, prev) => {
            let mut acc = match prev {
                Some(ServerOptimizerState::Adagrad { accumulator }) => accumulator,
                _ => zeros(),
            };
            check(&acc)?;
            let update = acc
                .as_mut_slice()
                .iter_mut()
                .zip(d)
                .map(|(a, di)| {
                    *a += di * di;
                    di / (a.sqrt() + hyper.adagrad_tau)
                })
                .collect();
            (update, ServerOptimizerState::Adagrad { accumulator: acc })
        }
        (ServerOptimizerKind::Momentum, prev) => {
            let mut buf = match prev {
                Some(ServerOptimizerState::Momentum { buffer }) => buffer,
                _ => zeros(),
            };
            check(&buf)?;
            for (b, di) in buf.as_mut_slice().iter_mut().zip(d) {
                *b = hyper.momentum * *b + di;
            }
            (buf.as_slice().to_vec(), ServerOptimizerState::Momentum { buffer: buf })
        }
    };
    let update = ParamVector::new(update);
    if !update.is_finite() {
        return Err(Error::non_finite("server optimizer update"));
    }
    Ok((
        update,
        GlobalLrState {
            alpha: state.alpha,
            prev_global_update: Some(delta_t.clone()),
            optimizer: Some(next),
        },
    ))
}

//! Two-timescale surrogate adaptation: prompt-only steps on most
//! observations, anchored replay updates of the whole network on anomalies.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::memory::{PromptMemory, Retrieval};
use crate::param_space::{RunningEma, Z_EPS};
use crate::surrogate::{MoeSurrogate, ParamSnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub prompt_lr: f64,
    pub prompt_l2: f64,
    pub smooth_l1_beta: f64,
    pub full_lr: f64,
    pub anchor_penalty: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub emergency_steps: usize,
    pub error_trigger: f64,
    pub variance_trigger: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            prompt_lr: 5e-3,
            prompt_l2: 1e-4,
            smooth_l1_beta: 1.0,
            full_lr: 1e-4,
            anchor_penalty: 3e-4,
            replay_capacity: 256,
            batch_size: 16,
            emergency_steps: 5,
            error_trigger: 2.0,
            variance_trigger: 2.0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("prompt_lr", self.prompt_lr),
            ("full_lr", self.full_lr),
            ("smooth_l1_beta", self.smooth_l1_beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.prompt_l2 < 0.0 || self.anchor_penalty < 0.0 {
            return Err(Error::InvalidConfig("penalties must be non-negative".into()));
        }
        if self.replay_capacity == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("replay capacity and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One replayed observation. The prompt mix in effect when it was observed
/// is kept so the sample can be re-scored with the same surrogate input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayItem {
    pub theta: Vec<f64>,
    pub context: Vec<f64>,
    pub prompt: Vec<f64>,
    pub error: f64,
}

impl ReplayItem {
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.theta.len() + self.context.len() + self.prompt.len());
        x.extend_from_slice(&self.theta);
        x.extend_from_slice(&self.context);
        x.extend_from_slice(&self.prompt);
        x
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<ReplayItem>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = &ReplayItem> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&ReplayItem> {
        self.items.get(i)
    }

    pub fn push(&mut self, item: ReplayItem) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    /// `n` uniform draws; without replacement when the buffer holds at least
    /// `n` items.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&ReplayItem> {
        if self.items.is_empty() || n == 0 {
            return Vec::new();
        }
        if self.items.len() >= n {
            index::sample(rng, self.items.len(), n)
                .into_iter()
                .map(|i| &self.items[i])
                .collect()
        } else {
            (0..n)
                .map(|_| &self.items[rng.random_range(0..self.items.len())])
                .collect()
        }
    }

    pub fn footprint_bytes(&self) -> usize {
        self.items
            .iter()
            .map(|it| {
                std::mem::size_of::<ReplayItem>() + 8 * (it.theta.len() + it.context.len() + it.prompt.len())
            })
            .sum()
    }
}

/// Frozen copy of the surrogate parameters taken at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSnapshot {
    snapshot: ParamSnapshot,
}

impl AnchorSnapshot {
    pub fn capture(moe: &MoeSurrogate) -> Self {
        Self {
            snapshot: moe.snapshot(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.snapshot.values
    }

    pub fn snapshot(&self) -> &ParamSnapshot {
        &self.snapshot
    }

    /// Squared distance of the surrogate's parameters from the anchor.
    pub fn distance_sq(&self, moe: &MoeSurrogate) -> f64 {
        moe.params_flat()
            .iter()
            .zip(self.values())
            .map(|(w, a)| (w - a) * (w - a))
            .sum()
    }
}

pub fn smooth_l1(residual: f64, beta: f64) -> f64 {
    let a = residual.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(residual: f64, beta: f64) -> f64 {
    if residual.abs() < beta {
        residual / beta
    } else {
        residual.signum()
    }
}

/// The observation a step is adapting to. `theta` is normalized.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub theta: &'a [f64],
    pub context: &'a [f64],
    pub error: f64,
}

fn concat(theta: &[f64], context: &[f64], prompt: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(theta.len() + context.len() + prompt.len());
    x.extend_from_slice(theta);
    x.extend_from_slice(context);
    x.extend_from_slice(prompt);
    x
}

/// Fast path. One SGD step on the retrieved prompts only; experts and gate
/// are read but never written. `active` is the expert set used this step.
pub fn update_prompts_only(
    memory: &mut PromptMemory,
    moe: &MoeSurrogate,
    retrieval: &Retrieval,
    obs: Observation<'_>,
    active: &[usize],
    cfg: &AdaptationConfig,
) -> Result<f64> {
    if retrieval.empty || retrieval.ids.is_empty() {
        return Ok(0.0);
    }
    let x = concat(obs.theta, obs.context, &retrieval.prompt_mix);
    check_dim(moe.input_dim(), x.len())?;
    let prompt_start = obs.theta.len() + obs.context.len();
    let pred = moe.forward_active(&x, active)?;
    let residual = pred.mean - obs.error;
    let reg: f64 = retrieval
        .ids
        .iter()
        .filter_map(|&id| memory.get(id))
        .map(|e| e.prompt.iter().map(|p| p * p).sum::<f64>())
        .sum();
    let loss = smooth_l1(residual, cfg.smooth_l1_beta) + cfg.prompt_l2 * reg;

    let dloss = smooth_l1_grad(residual, cfg.smooth_l1_beta);
    let grad_x = moe.grad_input(&x, active)?;
    let grad_mix = &grad_x[prompt_start..];
    for (&id, &alpha) in retrieval.ids.iter().zip(&retrieval.alphas) {
        // entries evicted since retrieval are skipped
        if let Some(prompt) = memory.prompt_mut(id) {
            for (p, g) in prompt.iter_mut().zip(grad_mix) {
                let grad = alpha * dloss * g + 2.0 * cfg.prompt_l2 * *p;
                *p -= cfg.prompt_lr * grad;
            }
        }
    }
    Ok(loss)
}

/// Per-step losses of one emergency update, measured before each step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmergencyOutcome {
    pub step_losses: Vec<f64>,
}

impl EmergencyOutcome {
    pub fn first_loss(&self) -> f64 {
        self.step_losses.first().copied().unwrap_or(0.0)
    }

    pub fn last_loss(&self) -> f64 {
        self.step_losses.last().copied().unwrap_or(0.0)
    }
}

/// Slow path. `emergency_steps` anchored minibatch steps on experts and
/// gate using the full ensemble. Each batch is the current observation plus
/// `batch_size - 1` replay draws. Prompts are not touched.
pub fn update_full_emergency<R: Rng + ?Sized>(
    moe: &mut MoeSurrogate,
    buffer: &ReplayBuffer,
    anchor: &AnchorSnapshot,
    current: &ReplayItem,
    cfg: &AdaptationConfig,
    rng: &mut R,
) -> Result<EmergencyOutcome> {
    check_dim(moe.param_count(), anchor.values().len())?;
    let all: Vec<usize> = (0..moe.n_experts()).collect();
    let mut step_losses = Vec::with_capacity(cfg.emergency_steps);
    for _ in 0..cfg.emergency_steps {
        let mut batch = vec![current];
        batch.extend(buffer.sample(cfg.batch_size.saturating_sub(1), rng));
        let b = batch.len() as f64;
        let mut grads = moe.zero_grads();
        let mut mse = 0.0;
        for item in &batch {
            let x = item.input();
            // d/d(mean) of (mean - e)^2 / B, evaluated at the current parameters
            let mean = moe.forward_active(&x, &all)?.mean;
            let r = mean - item.error;
            mse += r * r / b;
            moe.accumulate_grads(&x, 2.0 * r / b, &all, &mut grads)?;
        }
        let loss = mse + cfg.anchor_penalty * anchor.distance_sq(moe);
        step_losses.push(loss);
        moe.apply_gradient_step(&grads, cfg.full_lr, Some((anchor.values(), cfg.anchor_penalty)))?;
    }
    Ok(EmergencyOutcome { step_losses })
}

/// Escalation rule: error anomaly or variance spike against its EMA.
pub fn should_escalate(z_err: f64, variance: f64, variance_ema: &RunningEma, cfg: &AdaptationConfig) -> bool {
    z_err > cfg.error_trigger || variance_ema.z(variance, Z_EPS) > cfg.variance_trigger
}

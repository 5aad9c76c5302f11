//! Context-keyed memory of best parameters and trainable soft prompts.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::param_space::{logistic, RunningEma, Z_EPS};

/// Stable identifier of a memory entry (its insertion sequence number).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub capacity: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub novelty_threshold: f64,
    pub prompt_dim: usize,
    pub momentum: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 200,
            top_k: 3,
            temperature: 1.0,
            novelty_threshold: 0.7,
            prompt_dim: 32,
            momentum: 0.97,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || self.top_k == 0 {
            return Err(Error::InvalidConfig("memory capacity and top_k must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("retrieval temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.novelty_threshold) {
            return Err(Error::InvalidConfig("novelty threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: EntryId,
    pub key: Vec<f64>,
    pub theta_best: Vec<f64>,
    pub best_error: f64,
    pub prompt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// Retrieved entries, nearest first.
    pub ids: Vec<EntryId>,
    pub distances: Vec<f64>,
    pub alphas: Vec<f64>,
    pub prompt_mix: Vec<f64>,
    /// Weighted best parameters, or the caller's fallback when memory is empty.
    pub theta_hint: Vec<f64>,
    pub confidence: f64,
    pub entropy: f64,
    pub d_min: f64,
    pub novelty: f64,
    pub empty: bool,
}

impl Retrieval {
    pub fn nearest(&self) -> Option<EntryId> {
        self.ids.first().copied()
    }
}

/// Summary dump for ablation inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub entries: usize,
    pub keys: Vec<Vec<f64>>,
    pub best_errors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PromptMemory {
    cfg: MemoryConfig,
    key_dim: usize,
    theta_dim: usize,
    entries: VecDeque<MemoryEntry>,
    distance_ema: RunningEma,
    next_seq: u64,
}

impl PromptMemory {
    pub fn new(cfg: MemoryConfig, key_dim: usize, theta_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let distance_ema = RunningEma::new(cfg.momentum);
        Ok(Self {
            cfg,
            key_dim,
            theta_dim,
            entries: VecDeque::new(),
            distance_ema,
            next_seq: 0,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn distance_ema(&self) -> &RunningEma {
        &self.distance_ema
    }

    fn position(&self, id: EntryId) -> Option<usize> {
        // entries are ordered by id
        self.entries.binary_search_by_key(&id, |e| e.id).ok()
    }

    pub fn get(&self, id: EntryId) -> Option<&MemoryEntry> {
        self.position(id).map(|i| &self.entries[i])
    }

    pub fn prompt_mut(&mut self, id: EntryId) -> Option<&mut Vec<f64>> {
        self.position(id).map(move |i| &mut self.entries[i].prompt)
    }

    /// Retrieval without touching the distance EMA.
    pub fn peek(&self, context: &[f64], fallback_theta: &[f64]) -> Result<Retrieval> {
        check_dim(self.key_dim, context.len())?;
        check_dim(self.theta_dim, fallback_theta.len())?;
        check_finite(context, "retrieval context")?;
        if self.entries.is_empty() {
            return Ok(Retrieval {
                ids: Vec::new(),
                distances: Vec::new(),
                alphas: Vec::new(),
                prompt_mix: vec![0.0; self.cfg.prompt_dim],
                theta_hint: fallback_theta.to_vec(),
                confidence: 0.0,
                entropy: 0.0,
                d_min: f64::INFINITY,
                novelty: 1.0,
                empty: true,
            });
        }

        let mut ranked: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (euclidean(context, &e.key), i))
            .collect();
        // stable on ties: earlier insertion first
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.truncate(self.cfg.top_k);

        let distances: Vec<f64> = ranked.iter().map(|r| r.0).collect();
        let alphas = softmax_neg(&distances, self.cfg.temperature);
        let mut prompt_mix = vec![0.0; self.cfg.prompt_dim];
        let mut theta_hint = vec![0.0; self.theta_dim];
        for (&(_, i), &a) in ranked.iter().zip(&alphas) {
            let e = &self.entries[i];
            axpy(a, &e.prompt, &mut prompt_mix);
            axpy(a, &e.theta_best, &mut theta_hint);
        }
        let confidence = alphas.iter().cloned().fold(0.0, f64::max);
        let entropy = -alphas
            .iter()
            .filter(|&&a| a > 0.0)
            .map(|a| a * a.ln())
            .sum::<f64>();
        let d_min = distances[0];
        let novelty = logistic(self.distance_ema.z(d_min, Z_EPS));
        Ok(Retrieval {
            ids: ranked.iter().map(|&(_, i)| self.entries[i].id).collect(),
            distances,
            alphas,
            prompt_mix,
            theta_hint,
            confidence,
            entropy: entropy.max(0.0),
            d_min,
            novelty,
            empty: false,
        })
    }

    /// Folds a nearest-neighbour distance into the novelty statistics.
    pub fn observe_distance(&mut self, d_min: f64) -> Result<()> {
        if d_min.is_finite() {
            self.distance_ema.update(d_min)?;
        }
        Ok(())
    }

    /// Retrieval that also advances the distance EMA (after novelty is scored).
    pub fn retrieve(&mut self, context: &[f64], fallback_theta: &[f64]) -> Result<Retrieval> {
        let r = self.peek(context, fallback_theta)?;
        self.observe_distance(r.d_min)?;
        Ok(r)
    }

    /// Inserts a slot when `novelty` exceeds the threshold, evicting the
    /// oldest entry past capacity.
    pub fn maybe_insert(
        &mut self,
        key: &[f64],
        theta: &[f64],
        error: f64,
        novelty: f64,
    ) -> Result<Option<EntryId>> {
        if novelty <= self.cfg.novelty_threshold {
            return Ok(None);
        }
        check_dim(self.key_dim, key.len())?;
        check_dim(self.theta_dim, theta.len())?;
        let id = EntryId(self.next_seq);
        self.next_seq += 1;
        self.entries.push_back(MemoryEntry {
            id,
            key: key.to_vec(),
            theta_best: theta.to_vec(),
            best_error: error.clamp(0.0, 1.0),
            prompt: vec![0.0; self.cfg.prompt_dim],
        });
        while self.entries.len() > self.cfg.capacity {
            self.entries.pop_front();
        }
        Ok(Some(id))
    }

    /// Replaces the stored best when `error` is strictly lower.
    pub fn update_best(&mut self, id: EntryId, theta: &[f64], error: f64) -> Result<bool> {
        check_dim(self.theta_dim, theta.len())?;
        let pos = self.position(id).ok_or(Error::UnknownEntry(id.0))?;
        let entry = &mut self.entries[pos];
        if error < entry.best_error {
            entry.best_error = error.clamp(0.0, 1.0);
            entry.theta_best.copy_from_slice(theta);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            entries: self.entries.len(),
            keys: self.entries.iter().map(|e| e.key.clone()).collect(),
            best_errors: self.entries.iter().map(|e| e.best_error).collect(),
        }
    }

    /// Approximate heap bytes held by the stored vectors.
    pub fn footprint_bytes(&self) -> usize {
        let per_entry = std::mem::size_of::<MemoryEntry>()
            + 8 * (self.key_dim + self.theta_dim + self.cfg.prompt_dim);
        self.entries.len() * per_entry
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// softmax(-d / tau), shifted by the smallest distance for stability.
pub fn softmax_neg(distances: &[f64], temperature: f64) -> Vec<f64> {
    let d0 = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = distances
        .iter()
        .map(|d| (-(d - d0) / temperature).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

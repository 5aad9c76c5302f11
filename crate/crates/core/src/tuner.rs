//! Candidate policy, LCB selection and the per-step tuning loop.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    should_escalate, update_full_emergency, update_prompts_only, AdaptationConfig, AnchorSnapshot, Observation,
    ReplayBuffer, ReplayItem,
};
use crate::agent::{Agent, StepRecord};
use crate::composer::{ErrorComposer, MetricSpec, Metrics};
use crate::error::{check_dim, Error, Result};
use crate::memory::{EntryId, MemoryConfig, PromptMemory, Retrieval};
use crate::param_space::{ParamBounds, DEFAULT_MOMENTUM};
use crate::seeding::{self, SimRng};
use crate::surrogate::{MoeConfig, MoePrediction, MoeSurrogate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    pub memory: MemoryConfig,
    pub moe: MoeConfig,
    pub adaptation: AdaptationConfig,
    /// Composer EMA momentum.
    pub momentum: f64,
    pub kappa: f64,
    /// Weight of the current iterate in the candidate center; the hint gets
    /// the rest.
    pub center_weight: f64,
    pub base_step_scale: f64,
    /// Step scale for the scenarios that use wider moves.
    pub wide_step_scale: f64,
    pub n_perturb: usize,
    pub mask_context: bool,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            memory: MemoryConfig::default(),
            moe: MoeConfig::default(),
            adaptation: AdaptationConfig::default(),
            momentum: DEFAULT_MOMENTUM,
            kappa: 2.0,
            center_weight: 0.65,
            base_step_scale: 0.15,
            wide_step_scale: 0.25,
            n_perturb: 6,
            mask_context: false,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        self.memory.validate()?;
        self.moe.validate()?;
        self.adaptation.validate()?;
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidConfig("kappa must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.center_weight) {
            return Err(Error::InvalidConfig("center weight must lie in [0, 1]".into()));
        }
        if !(self.base_step_scale >= 0.0 && self.wide_step_scale >= 0.0) {
            return Err(Error::InvalidConfig("step scales must be non-negative".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidConfig("momentum must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Copy with the wide step scale in effect.
    pub fn widened(&self) -> Self {
        Self {
            base_step_scale: self.wide_step_scale,
            ..self.clone()
        }
    }

    pub fn masked(&self) -> Self {
        Self {
            mask_context: true,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Gradient,
    Perturbation,
    Hint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Normalized coordinates.
    pub theta: Vec<f64>,
    pub kind: CandidateKind,
}

/// Candidate generation around the blended center, all in normalized
/// coordinates: one gradient step, `n_perturb` uniform draws in the center
/// plus or minus `step`, and the hint. Every candidate is clipped to the
/// unit box.
pub fn propose_candidates<R: Rng + ?Sized>(
    theta: &[f64],
    hint: &[f64],
    grad: &[f64],
    center_weight: f64,
    step: f64,
    n_perturb: usize,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    check_dim(theta.len(), hint.len())?;
    check_dim(theta.len(), grad.len())?;
    let base: Vec<f64> = theta
        .iter()
        .zip(hint)
        .map(|(t, h)| center_weight * t + (1.0 - center_weight) * h)
        .collect();
    let clip = |v: f64| v.clamp(0.0, 1.0);
    let mut out = Vec::with_capacity(n_perturb + 2);

    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let gradient_step: Vec<f64> = if norm > 0.0 && norm.is_finite() {
        base.iter().zip(grad).map(|(b, g)| clip(b - step * g / norm)).collect()
    } else {
        base.iter().map(|&b| clip(b)).collect()
    };
    out.push(Candidate {
        theta: gradient_step,
        kind: CandidateKind::Gradient,
    });
    for _ in 0..n_perturb {
        let theta = base
            .iter()
            .map(|&b| {
                let u = if step > 0.0 { rng.random_range(-step..=step) } else { 0.0 };
                clip(b + u)
            })
            .collect();
        out.push(Candidate {
            theta,
            kind: CandidateKind::Perturbation,
        });
    }
    out.push(Candidate {
        theta: hint.iter().map(|&h| clip(h)).collect(),
        kind: CandidateKind::Hint,
    });
    Ok(out)
}

pub fn lcb(mean: f64, variance: f64, kappa: f64) -> f64 {
    mean - kappa * variance.max(0.0).sqrt()
}

/// Outcome of scoring a candidate list.
#[derive(Debug, Clone)]
pub struct Selection {
    pub index: usize,
    pub lcb_values: Vec<f64>,
    pub predictions: Vec<MoePrediction>,
}

/// Scores every candidate with the top-`k` surrogate on `[theta; c; p]` and
/// returns the smallest LCB, first in list order on ties.
pub fn select_lcb(
    candidates: &[Candidate],
    moe: &MoeSurrogate,
    context: &[f64],
    prompt: &[f64],
    kappa: f64,
    k: usize,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidates to select from".into()));
    }
    let mut lcb_values = Vec::with_capacity(candidates.len());
    let mut predictions = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let x = surrogate_input(&cand.theta, context, prompt);
        let p = moe.forward_topk(&x, k)?;
        lcb_values.push(lcb(p.mean, p.variance, kappa));
        predictions.push(p);
    }
    let mut index = 0;
    for (i, v) in lcb_values.iter().enumerate() {
        if *v < lcb_values[index] {
            index = i;
        }
    }
    Ok(Selection {
        index,
        lcb_values,
        predictions,
    })
}

pub fn surrogate_input(theta: &[f64], context: &[f64], prompt: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(theta.len() + context.len() + prompt.len());
    x.extend_from_slice(theta);
    x.extend_from_slice(context);
    x.extend_from_slice(prompt);
    x
}

/// Labels of the per-step phases, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Context,
    Retrieve,
    Propose,
    Select,
    Deploy,
    Compose,
    Replay,
    Memory,
    EmergencyUpdate,
    PromptUpdate,
    Advance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub chosen_kind: CandidateKind,
    pub chosen_index: usize,
    pub lcb_values: Vec<f64>,
    pub novelty: f64,
    pub confidence: f64,
    pub k_t: usize,
    pub escalated: bool,
    pub e_t: f64,
    pub z_err: f64,
    pub variance: f64,
    pub predicted_mean: f64,
    pub adaptation_loss: f64,
    pub inserted: Option<EntryId>,
    /// Agent time only; the environment call is excluded.
    pub latency_ns: u64,
    pub phases: Vec<Phase>,
}

struct Pending {
    theta_norm: Vec<f64>,
    context: Vec<f64>,
    retrieval: Retrieval,
    k: usize,
    /// Variance folded into the uncertainty statistics when committing.
    k_variance: f64,
    prediction: MoePrediction,
    selection: Selection,
    kind: CandidateKind,
    rng: SimRng,
    phases: Vec<Phase>,
    propose_ns: u64,
}

/// The retrieval-augmented surrogate tuner.
pub struct RaspTuner {
    name: String,
    cfg: TunerConfig,
    bounds: ParamBounds,
    context_dim: usize,
    composer: ErrorComposer,
    memory: PromptMemory,
    moe: MoeSurrogate,
    anchor: AnchorSnapshot,
    replay: ReplayBuffer,
    rng: SimRng,
    theta_norm: Vec<f64>,
    last_variance: Option<f64>,
    pending: Option<Pending>,
    last_info: Option<StepInfo>,
    steps: u64,
}

impl RaspTuner {
    pub fn new(
        bounds: ParamBounds,
        context_dim: usize,
        metric_specs: impl IntoIterator<Item = MetricSpec>,
        cfg: TunerConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = bounds.dim();
        let input_dim = d + context_dim + cfg.memory.prompt_dim;
        let mut init_rng = seeding::stream(seed, &[seeding::label("surrogate-init")]);
        let moe = MoeSurrogate::new(input_dim, cfg.moe.clone(), &mut init_rng)?;
        let anchor = AnchorSnapshot::capture(&moe);
        let memory = PromptMemory::new(cfg.memory.clone(), context_dim, d)?;
        let composer = ErrorComposer::with_specs(cfg.momentum, metric_specs)?;
        let replay = ReplayBuffer::new(cfg.adaptation.replay_capacity);
        let name = if cfg.mask_context { "nomem" } else { "rasp" };
        Ok(Self {
            name: name.to_string(),
            bounds,
            context_dim,
            composer,
            memory,
            moe,
            anchor,
            replay,
            rng: seeding::stream(seed, &[seeding::label("tuner")]),
            theta_norm: vec![0.5; d],
            last_variance: None,
            pending: None,
            last_info: None,
            steps: 0,
            cfg,
        })
    }

    /// The same tuner with every context replaced by zeros from now on.
    pub fn into_masked(mut self) -> Self {
        self.cfg.mask_context = true;
        self.name = "nomem".to_string();
        self
    }

    pub fn config(&self) -> &TunerConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    pub fn memory(&self) -> &PromptMemory {
        &self.memory
    }

    pub fn surrogate(&self) -> &MoeSurrogate {
        &self.moe
    }

    pub fn anchor(&self) -> &AnchorSnapshot {
        &self.anchor
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn composer(&self) -> &ErrorComposer {
        &self.composer
    }

    /// Current iterate in physical units.
    pub fn theta(&self) -> Vec<f64> {
        self.bounds
            .denormalize(&self.theta_norm)
            .expect("iterate has the box dimension")
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn last_info(&self) -> Option<&StepInfo> {
        self.last_info.as_ref()
    }

    fn effective_context(&self, context: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.context_dim, context.len())?;
        if self.cfg.mask_context {
            Ok(vec![0.0; self.context_dim])
        } else {
            Ok(context.to_vec())
        }
    }

    fn begin_step(&self, context: &[f64]) -> Result<Pending> {
        let start = Instant::now();
        let mut phases = vec![Phase::Context];
        let c = self.effective_context(context)?;

        phases.push(Phase::Retrieve);
        let retrieval = self.memory.peek(&c, &self.theta_norm)?;
        let prompt = &retrieval.prompt_mix;

        let k_variance = match self.last_variance {
            Some(v) => v,
            None => {
                let x = surrogate_input(&self.theta_norm, &c, prompt);
                self.moe.forward_full(&x)?.variance
            }
        };
        let k = self.moe.expert_count_peek(k_variance, retrieval.novelty);

        phases.push(Phase::Propose);
        let d = self.theta_norm.len();
        let w = self.cfg.center_weight;
        let base: Vec<f64> = self
            .theta_norm
            .iter()
            .zip(&retrieval.theta_hint)
            .map(|(t, h)| w * t + (1.0 - w) * h)
            .collect();
        let (_, grad_x) = self.moe.predict_with_grad(&surrogate_input(&base, &c, prompt), k)?;
        let mut rng = self.rng.clone();
        let candidates = propose_candidates(
            &self.theta_norm,
            &retrieval.theta_hint,
            &grad_x[..d],
            w,
            self.cfg.base_step_scale,
            self.cfg.n_perturb,
            &mut rng,
        )?;

        phases.push(Phase::Select);
        let selection = select_lcb(&candidates, &self.moe, &c, prompt, self.cfg.kappa, k)?;
        let chosen = &candidates[selection.index];
        let prediction = selection.predictions[selection.index].clone();
        let propose_ns = start.elapsed().as_nanos() as u64;
        Ok(Pending {
            theta_norm: chosen.theta.clone(),
            kind: chosen.kind,
            context: c,
            retrieval,
            k,
            k_variance,
            prediction,
            selection,
            rng,
            phases,
            propose_ns,
        })
    }

    fn finish_step(&mut self, metrics: &Metrics) -> Result<StepInfo> {
        let start = Instant::now();
        let mut p = self.pending.take().ok_or_else(|| {
            Error::InvalidConfig("observe called without a pending proposal".into())
        })?;
        p.phases.push(Phase::Deploy);

        p.phases.push(Phase::Compose);
        // composition validates its input before touching any statistics
        let comp = match self.composer.compose(metrics) {
            Ok(c) => c,
            Err(e) => {
                self.pending = Some(p);
                return Err(e);
            }
        };
        let e = comp.error;
        self.rng = p.rng.clone();
        self.memory.observe_distance(p.retrieval.d_min)?;
        self.moe.observe_uncertainty(p.k_variance)?;

        p.phases.push(Phase::Replay);
        let item = ReplayItem {
            theta: p.theta_norm.clone(),
            context: p.context.clone(),
            prompt: p.retrieval.prompt_mix.clone(),
            error: e,
        };
        self.replay.push(item.clone());

        p.phases.push(Phase::Memory);
        let inserted = self
            .memory
            .maybe_insert(&p.context, &p.theta_norm, e, p.retrieval.novelty)?;
        if inserted.is_none() {
            if let Some(id) = p.retrieval.nearest() {
                self.memory.update_best(id, &p.theta_norm, e)?;
            }
        }

        let variance = p.prediction.variance;
        let escalated = should_escalate(comp.anomaly, variance, self.moe.uncertainty_ema(), &self.cfg.adaptation);
        let adaptation_loss = if escalated {
            p.phases.push(Phase::EmergencyUpdate);
            let out = update_full_emergency(
                &mut self.moe,
                &self.replay,
                &self.anchor,
                &item,
                &self.cfg.adaptation,
                &mut self.rng,
            )?;
            out.first_loss()
        } else {
            p.phases.push(Phase::PromptUpdate);
            update_prompts_only(
                &mut self.memory,
                &self.moe,
                &p.retrieval,
                Observation {
                    theta: &p.theta_norm,
                    context: &p.context,
                    error: e,
                },
                &p.prediction.active,
                &self.cfg.adaptation,
            )?
        };

        p.phases.push(Phase::Advance);
        self.theta_norm = p.theta_norm;
        self.last_variance = Some(variance);
        self.steps += 1;
        let info = StepInfo {
            chosen_kind: p.kind,
            chosen_index: p.selection.index,
            lcb_values: p.selection.lcb_values,
            novelty: p.retrieval.novelty,
            confidence: p.retrieval.confidence,
            k_t: p.k,
            escalated,
            e_t: e,
            z_err: comp.anomaly,
            variance,
            predicted_mean: p.prediction.mean,
            adaptation_loss,
            inserted,
            latency_ns: p.propose_ns + start.elapsed().as_nanos() as u64,
            phases: p.phases,
        };
        self.last_info = Some(info.clone());
        Ok(info)
    }

    /// One full step: propose, evaluate through `env`, then adapt. Returns
    /// the deployed parameters (the next iterate) and the step report. If
    /// `env` fails the tuner state is unchanged.
    pub fn tune_one_step<F>(&mut self, context: &[f64], env: F) -> Result<(Vec<f64>, StepInfo)>
    where
        F: FnOnce(&[f64]) -> Result<Metrics>,
    {
        let theta = self.propose(context)?;
        let metrics = match env(&theta) {
            Ok(m) => m,
            Err(e) => {
                self.pending = None;
                return Err(e);
            }
        };
        let info = self.finish_step(&metrics)?;
        Ok((theta, info))
    }
}

impl Agent for RaspTuner {
    fn name(&self) -> &str {
        &self.name
    }

    fn propose(&mut self, context: &[f64]) -> Result<Vec<f64>> {
        let pending = self.begin_step(context)?;
        let theta = self.bounds.denormalize(&pending.theta_norm)?;
        self.pending = Some(pending);
        Ok(theta)
    }

    fn observe(&mut self, metrics: &Metrics) -> Result<StepRecord> {
        let info = self.finish_step(metrics)?;
        Ok(StepRecord {
            error: info.e_t,
            escalated: info.escalated,
            novelty: Some(info.novelty),
            k_t: Some(info.k_t),
            z_err: Some(info.z_err),
            variance: Some(info.variance),
        })
    }

    fn footprint_bytes(&self) -> usize {
        self.memory.footprint_bytes() + self.replay.footprint_bytes() + 8 * self.moe.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::Polarity;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quad_metrics(theta: &[f64], target: &[f64]) -> Metrics {
        let loss: f64 = theta.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        Metrics::from([("loss".to_string(), loss)])
    }

    fn tuner(cfg: TunerConfig, seed: u64) -> RaspTuner {
        let bounds = ParamBounds::uniform(3, -1.0, 1.0).unwrap();
        let small = TunerConfig {
            moe: MoeConfig {
                expert_hidden: vec![12, 8],
                gate_hidden: vec![8],
                ..MoeConfig::default()
            },
            memory: MemoryConfig {
                prompt_dim: 4,
                ..MemoryConfig::default()
            },
            ..cfg
        };
        let spec = MetricSpec::new("loss", Polarity::LowerIsBetter, 1.0).unwrap();
        RaspTuner::new(bounds, 2, [spec], small, seed).unwrap()
    }

    #[test]
    fn hint_equal_theta_gives_theta_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = [0.2, 0.4, 0.9];
        let c = propose_candidates(&t, &t, &[0.0; 3], 0.65, 0.0, 6, &mut rng).unwrap();
        assert_eq!(c.len(), 8);
        for cand in &c {
            for (a, b) in cand.theta.iter().zip(&t) {
                assert_relative_eq!(*a, *b, epsilon = 1e-15);
            }
        }
        assert_eq!(c[0].kind, CandidateKind::Gradient);
        assert_eq!(c[7].kind, CandidateKind::Hint);
    }

    #[test]
    fn candidates_stay_in_unit_box_and_near_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = [0.0, 1.0, 0.5];
        let hint = [1.0, 0.0, 0.5];
        let c = propose_candidates(&theta, &hint, &[3.0, -4.0, 0.0], 0.65, 0.15, 6, &mut rng).unwrap();
        let base = [0.35, 0.65, 0.5];
        // unit gradient (0.6, -0.8, 0)
        assert_relative_eq!(c[0].theta[0], 0.35 - 0.15 * 0.6, epsilon = 1e-12);
        assert_relative_eq!(c[0].theta[1], 0.65 + 0.15 * 0.8, epsilon = 1e-12);
        for cand in &c[1..7] {
            for (v, b) in cand.theta.iter().zip(&base) {
                assert!((0.0..=1.0).contains(v));
                assert!((v - b).abs() <= 0.15 + 1e-12);
            }
        }
    }

    #[test]
    fn lcb_formula_and_tie_break() {
        assert_relative_eq!(lcb(0.5, 0.04, 2.0), 0.1, epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let moe = MoeSurrogate::new(
            5,
            MoeConfig {
                n_experts: 2,
                expert_hidden: vec![4],
                gate_hidden: vec![3],
                ..MoeConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let same = Candidate {
            theta: vec![0.3, 0.3],
            kind: CandidateKind::Perturbation,
        };
        let sel = select_lcb(&[same.clone(), same], &moe, &[0.1, 0.2], &[0.0], 2.0, 2).unwrap();
        assert_eq!(sel.index, 0);
    }

    #[test]
    fn selection_is_argmin_for_each_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let moe = MoeSurrogate::new(
            6,
            MoeConfig {
                n_experts: 4,
                expert_hidden: vec![6, 4],
                gate_hidden: vec![5],
                ..MoeConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let cands: Vec<Candidate> = (0..12)
            .map(|_| Candidate {
                theta: (0..3).map(|_| rng.random()).collect(),
                kind: CandidateKind::Perturbation,
            })
            .collect();
        for kappa in [0.0, 1.0, 2.0, 4.0] {
            let sel = select_lcb(&cands, &moe, &[0.5, -0.5], &[0.1], kappa, 4).unwrap();
            let brute = cands
                .iter()
                .map(|c| {
                    let p = moe.forward_topk(&surrogate_input(&c.theta, &[0.5, -0.5], &[0.1]), 4).unwrap();
                    lcb(p.mean, p.variance, kappa)
                })
                .collect::<Vec<_>>();
            let min = brute.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(sel.lcb_values[sel.index], min);
            assert_eq!(sel.lcb_values, brute);
        }
    }

    #[test]
    fn first_step_contract() {
        let mut t = tuner(TunerConfig::default(), 4);
        assert_eq!(t.theta(), vec![0.0; 3]);
        let (theta, info) = t
            .tune_one_step(&[0.3, -0.2], |th| Ok(quad_metrics(th, &[0.5, 0.5, 0.5])))
            .unwrap();
        assert_eq!(info.novelty, 1.0);
        assert!(info.inserted.is_some());
        assert_eq!(t.memory().len(), 1);
        assert!(t.bounds().contains(&theta));
        assert_eq!(t.theta(), theta);
    }

    #[test]
    fn phase_order_matches_loop() {
        let mut t = tuner(TunerConfig::default(), 5);
        for step in 0..30 {
            let c = [(step % 3) as f64, 1.0];
            let (_, info) = t.tune_one_step(&c, |th| Ok(quad_metrics(th, &[0.1, 0.2, 0.3]))).unwrap();
            let update = if info.escalated {
                Phase::EmergencyUpdate
            } else {
                Phase::PromptUpdate
            };
            let expected = vec![
                Phase::Context,
                Phase::Retrieve,
                Phase::Propose,
                Phase::Select,
                Phase::Deploy,
                Phase::Compose,
                Phase::Replay,
                Phase::Memory,
                update,
                Phase::Advance,
            ];
            assert_eq!(info.phases, expected);
            let min = info.lcb_values.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(info.lcb_values[info.chosen_index], min);
        }
    }

    #[test]
    fn masked_contexts_store_zero_keys_and_uniform_weights() {
        let mut t = tuner(TunerConfig::default().masked(), 6);
        assert_eq!(t.name(), "nomem");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..40 {
            let c = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            t.tune_one_step(&c, |th| Ok(quad_metrics(th, &[0.0, 0.5, -0.5]))).unwrap();
        }
        assert!(t.memory().entries().all(|e| e.key.iter().all(|k| *k == 0.0)));
        let r = t.memory().peek(&[0.0, 0.0], &[0.5; 3]).unwrap();
        assert!(r.distances.iter().all(|d| *d == 0.0));
        let first = r.alphas[0];
        assert!(r.alphas.iter().all(|a| *a == first));
    }

    #[test]
    fn failed_environment_leaves_state_untouched() {
        let mut t = tuner(TunerConfig::default(), 7);
        for _ in 0..5 {
            t.tune_one_step(&[0.0, 1.0], |th| Ok(quad_metrics(th, &[0.2; 3]))).unwrap();
        }
        let theta = t.theta();
        let fp = t.surrogate().param_fingerprint();
        let mem = t.memory().snapshot();
        let err = t.tune_one_step(&[0.0, 1.0], |_| Err(Error::Environment("boom".into())));
        assert!(err.is_err());
        assert_eq!(t.theta(), theta);
        assert_eq!(t.surrogate().param_fingerprint(), fp);
        assert_eq!(t.memory().snapshot(), mem);
        assert_eq!(t.steps(), 5);

        // and the next step proceeds exactly as if the failure never happened
        let mut twin = tuner(TunerConfig::default(), 7);
        for _ in 0..5 {
            twin.tune_one_step(&[0.0, 1.0], |th| Ok(quad_metrics(th, &[0.2; 3]))).unwrap();
        }
        let a = t.tune_one_step(&[0.0, 1.0], |th| Ok(quad_metrics(th, &[0.2; 3]))).unwrap();
        let b = twin.tune_one_step(&[0.0, 1.0], |th| Ok(quad_metrics(th, &[0.2; 3]))).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn observe_without_propose_errors() {
        let mut t = tuner(TunerConfig::default(), 8);
        assert!(t.observe(&Metrics::from([("loss".to_string(), 1.0)])).is_err());
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let trajectory = |seed| {
            let mut t = tuner(TunerConfig::default(), seed);
            let mut out = Vec::new();
            for step in 0..25 {
                let c = [(step / 5) as f64, 0.5];
                let (th, _) = t.tune_one_step(&c, |th| Ok(quad_metrics(th, &[0.3, -0.3, 0.0]))).unwrap();
                out.extend(th.iter().map(|v| v.to_bits()));
            }
            out
        };
        assert_eq!(trajectory(11), trajectory(11));
        assert_ne!(trajectory(11), trajectory(12));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TunerConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: TunerConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: TunerConfig = toml::from_str("kappa = 1.5\n").unwrap();
        assert_eq!(partial.kappa, 1.5);
        assert_eq!(partial.n_perturb, 6);
    }
}

//! Prompt-conditioned mixture-of-experts regressor.
//!
//! Experts and gate are small rectifier MLPs over the concatenated input
//! `[theta_norm; context; prompt]`. Gradients are hand-derived for this fixed
//! architecture: input gradients drive the candidate policy and prompt
//! updates, parameter gradients drive emergency updates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::param_space::{logistic, RunningEma, DEFAULT_MOMENTUM, Z_EPS};

/// One affine layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn he_init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let scale = (2.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

/// Rectifier MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Gradients with the same layout as a [`DenseNet`].
pub type DenseGrads = DenseNet;

impl DenseNet {
    /// `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs an input and an output size");
        let layers = sizes
            .windows(2)
            .map(|w| Dense::he_init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            check_dim(pair[0].outputs, pair[1].inputs)?;
        }
        for l in &layers {
            check_dim(l.inputs * l.outputs, l.weights.len())?;
            check_dim(l.outputs, l.bias.len())?;
        }
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).pop().unwrap_or_default()
    }

    /// Activations of every layer; element 0 is the input.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(&acts[i], &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    /// Back-propagates `grad_out` through a recorded trace, accumulating
    /// parameter gradients into `grads` when given. Returns d/d(input).
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], mut grads: Option<&mut DenseGrads>) -> Vec<f64> {
        let mut delta = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    gl.bias[o] += d;
                    let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (w, xi) in row.iter_mut().zip(input) {
                        *w += d * xi;
                    }
                }
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            if i > 0 {
                // rectifier mask of the layer that produced `input`
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub expert_hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub k_min: usize,
    /// Defaults to the number of experts.
    pub k_max: Option<usize>,
    /// Weight of normalized uncertainty in the expert-count mix; novelty gets
    /// the remainder.
    pub uncertainty_mix: f64,
    pub momentum: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 6,
            expert_hidden: vec![48, 24],
            gate_hidden: vec![48],
            k_min: 2,
            k_max: None,
            uncertainty_mix: 0.55,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl MoeConfig {
    pub fn k_max(&self) -> usize {
        self.k_max.unwrap_or(self.n_experts)
    }

    pub fn validate(&self) -> Result<()> {
        let k_max = self.k_max();
        if self.n_experts == 0 || self.k_min == 0 || self.k_min > k_max || k_max > self.n_experts {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= k_min ({}) <= k_max ({k_max}) <= experts ({})",
                self.k_min, self.n_experts
            )));
        }
        if !(0.0..=1.0).contains(&self.uncertainty_mix) {
            return Err(Error::InvalidConfig("uncertainty mix must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoePrediction {
    pub mean: f64,
    pub variance: f64,
    /// Softmax gate weights over all experts.
    pub gate_weights: Vec<f64>,
    /// Active experts in ascending index order.
    pub active: Vec<usize>,
    /// Gate weights renormalized over `active`.
    pub active_weights: Vec<f64>,
    /// Outputs of the active experts, aligned with `active`.
    pub expert_outputs: Vec<f64>,
}

impl MoePrediction {
    /// Mean clamped into `[0, 1]` for reporting; the loss uses the raw mean.
    pub fn reported_mean(&self) -> f64 {
        self.mean.clamp(0.0, 1.0)
    }
}

/// Gradients with the layout of a [`MoeSurrogate`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoeGrads {
    pub experts: Vec<DenseGrads>,
    pub gate: DenseGrads,
}

impl MoeGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.experts
            .iter()
            .chain(std::iter::once(&self.gate))
            .flat_map(|n| n.slices())
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|g| *g == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Flat parameter vector plus the shapes needed to read it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub manifest: Vec<ParamShape>,
    pub values: Vec<f64>,
}

struct Evaluation {
    prediction: MoePrediction,
    gate_trace: Vec<Vec<f64>>,
    expert_traces: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct MoeSurrogate {
    cfg: MoeConfig,
    input_dim: usize,
    experts: Vec<DenseNet>,
    gate: DenseNet,
    uncertainty_ema: RunningEma,
}

impl MoeSurrogate {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: MoeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidConfig("surrogate input dimension must be positive".into()));
        }
        let mut expert_sizes = vec![input_dim];
        expert_sizes.extend(&cfg.expert_hidden);
        expert_sizes.push(1);
        let mut gate_sizes = vec![input_dim];
        gate_sizes.extend(&cfg.gate_hidden);
        gate_sizes.push(cfg.n_experts);
        let experts = (0..cfg.n_experts)
            .map(|_| DenseNet::new(&expert_sizes, rng))
            .collect();
        let gate = DenseNet::new(&gate_sizes, rng);
        Ok(Self {
            uncertainty_ema: RunningEma::new(cfg.momentum),
            cfg,
            input_dim,
            experts,
            gate,
        })
    }

    /// Assembles a surrogate from explicit networks (used by tests and
    /// snapshot restores).
    pub fn from_parts(cfg: MoeConfig, experts: Vec<DenseNet>, gate: DenseNet) -> Result<Self> {
        cfg.validate()?;
        check_dim(cfg.n_experts, experts.len())?;
        let input_dim = gate.input_dim();
        check_dim(cfg.n_experts, gate.output_dim())?;
        for e in &experts {
            check_dim(input_dim, e.input_dim())?;
            check_dim(1, e.output_dim())?;
        }
        Ok(Self {
            uncertainty_ema: RunningEma::new(cfg.momentum),
            cfg,
            input_dim,
            experts,
            gate,
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn experts(&self) -> &[DenseNet] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [DenseNet] {
        &mut self.experts
    }

    pub fn gate(&self) -> &DenseNet {
        &self.gate
    }

    pub fn gate_mut(&mut self) -> &mut DenseNet {
        &mut self.gate
    }

    pub fn uncertainty_ema(&self) -> &RunningEma {
        &self.uncertainty_ema
    }

    fn check_params(&self) -> Result<()> {
        for net in self.experts.iter().chain(std::iter::once(&self.gate)) {
            for s in net.slices() {
                check_finite(s, "surrogate parameters")?;
            }
        }
        Ok(())
    }

    pub fn gate_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, x.len())?;
        Ok(softmax(&self.gate.forward(x)))
    }

    /// Top-`k` experts by gate weight; ties go to the lower index. Returned
    /// in ascending index order.
    pub fn select_top_k(gate_weights: &[f64], k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..gate_weights.len()).collect();
        order.sort_by(|&a, &b| gate_weights[b].total_cmp(&gate_weights[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
        order
    }

    fn evaluate(&self, x: &[f64], active: Option<&[usize]>, k: usize, keep_traces: bool) -> Result<Evaluation> {
        check_dim(self.input_dim, x.len())?;
        check_finite(x, "surrogate input")?;
        let gate_trace = self.gate.trace(x);
        let gate_weights = softmax(gate_trace.last().expect("gate has layers"));
        if gate_weights.iter().any(|w| !w.is_finite()) {
            self.check_params()?;
            return Err(Error::NonFinite("gate weights"));
        }
        let active = match active {
            Some(a) => a.to_vec(),
            None => Self::select_top_k(&gate_weights, k),
        };
        let total: f64 = active.iter().map(|&e| gate_weights[e]).sum();
        let active_weights: Vec<f64> = active.iter().map(|&e| gate_weights[e] / total).collect();
        let mut expert_traces = Vec::with_capacity(active.len());
        let mut expert_outputs = Vec::with_capacity(active.len());
        for &e in &active {
            let trace = self.experts[e].trace(x);
            expert_outputs.push(trace.last().expect("expert has layers")[0]);
            if keep_traces {
                expert_traces.push(trace);
            }
        }
        let mean: f64 = active_weights
            .iter()
            .zip(&expert_outputs)
            .map(|(w, y)| w * y)
            .sum();
        let variance: f64 = active_weights
            .iter()
            .zip(&expert_outputs)
            .map(|(w, y)| w * (y - mean) * (y - mean))
            .sum();
        if !mean.is_finite() || !variance.is_finite() {
            self.check_params()?;
            return Err(Error::NonFinite("surrogate prediction"));
        }
        Ok(Evaluation {
            prediction: MoePrediction {
                mean,
                variance: variance.max(0.0),
                gate_weights,
                active,
                active_weights,
                expert_outputs,
            },
            gate_trace,
            expert_traces,
        })
    }

    /// Prediction using every expert.
    pub fn forward_full(&self, x: &[f64]) -> Result<MoePrediction> {
        self.forward_topk(x, self.experts.len())
    }

    /// Prediction over the top-`k` experts with renormalized weights.
    pub fn forward_topk(&self, x: &[f64], k: usize) -> Result<MoePrediction> {
        self.check_k(k)?;
        Ok(self.evaluate(x, None, k, false)?.prediction)
    }

    /// Prediction over an explicit active set (ascending, non-empty).
    pub fn forward_active(&self, x: &[f64], active: &[usize]) -> Result<MoePrediction> {
        self.check_active(active)?;
        Ok(self.evaluate(x, Some(active), active.len(), false)?.prediction)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.experts.len() {
            return Err(Error::InvalidExpertCount {
                k,
                experts: self.experts.len(),
            });
        }
        Ok(())
    }

    fn check_active(&self, active: &[usize]) -> Result<()> {
        self.check_k(active.len())?;
        if active.windows(2).any(|w| w[0] >= w[1]) || active.iter().any(|&e| e >= self.experts.len()) {
            return Err(Error::InvalidConfig(format!("invalid active expert set {active:?}")));
        }
        Ok(())
    }

    /// Maps a mix value in `[0, 1]` to an expert count.
    pub fn expert_count_from_mix(eta: f64, k_min: usize, k_max: usize) -> usize {
        let k = (k_min as f64 + (k_max - k_min) as f64 * eta.clamp(0.0, 1.0)).round() as usize;
        k.clamp(k_min, k_max)
    }

    /// Expert count for the given variance and novelty, without advancing
    /// the uncertainty statistics.
    pub fn expert_count_peek(&self, variance: f64, novelty: f64) -> usize {
        let u = logistic(self.uncertainty_ema.z(variance, Z_EPS));
        let mix = self.cfg.uncertainty_mix;
        let eta = mix * u + (1.0 - mix) * novelty.clamp(0.0, 1.0);
        Self::expert_count_from_mix(eta, self.cfg.k_min, self.cfg.k_max())
    }

    pub fn observe_uncertainty(&mut self, variance: f64) -> Result<()> {
        self.uncertainty_ema.update(variance)
    }

    pub fn active_expert_count(&mut self, variance: f64, novelty: f64) -> Result<usize> {
        let k = self.expert_count_peek(variance, novelty);
        self.observe_uncertainty(variance)?;
        Ok(k)
    }

    /// Gradient of the renormalized mean over `active` with respect to the
    /// input, through both the experts and the gate softmax.
    pub fn grad_input(&self, x: &[f64], active: &[usize]) -> Result<Vec<f64>> {
        self.check_active(active)?;
        let ev = self.evaluate(x, Some(active), active.len(), true)?;
        Ok(self.backprop(&ev, 1.0, None))
    }

    /// Parameter gradients of `loss_grad * mean` over `active`. Experts
    /// outside `active` receive exactly zero.
    pub fn grad_params(&self, x: &[f64], loss_grad: f64, active: &[usize]) -> Result<MoeGrads> {
        let mut grads = self.zero_grads();
        self.accumulate_grads(x, loss_grad, active, &mut grads)?;
        Ok(grads)
    }

    pub fn accumulate_grads(&self, x: &[f64], loss_grad: f64, active: &[usize], grads: &mut MoeGrads) -> Result<MoePrediction> {
        self.check_active(active)?;
        let ev = self.evaluate(x, Some(active), active.len(), true)?;
        self.backprop(&ev, loss_grad, Some(grads));
        Ok(ev.prediction)
    }

    /// Forward pass and input gradient in one go.
    pub fn predict_with_grad(&self, x: &[f64], k: usize) -> Result<(MoePrediction, Vec<f64>)> {
        self.check_k(k)?;
        let ev = self.evaluate(x, None, k, true)?;
        let g = self.backprop(&ev, 1.0, None);
        Ok((ev.prediction, g))
    }

    fn backprop(&self, ev: &Evaluation, scale: f64, mut grads: Option<&mut MoeGrads>) -> Vec<f64> {
        let p = &ev.prediction;
        let mut dx = vec![0.0; self.input_dim];
        // d mean / d logit_e = w_e (y_e - mean) on the active set, 0 elsewhere
        let mut dlogits = vec![0.0; self.experts.len()];
        for (j, &e) in p.active.iter().enumerate() {
            let w = p.active_weights[j];
            let y = p.expert_outputs[j];
            dlogits[e] = scale * w * (y - p.mean);
            let g = self.experts[e].backward(
                &ev.expert_traces[j],
                &[scale * w],
                grads.as_deref_mut().map(|g| &mut g.experts[e]),
            );
            add_into(&mut dx, &g);
        }
        let g = self
            .gate
            .backward(&ev.gate_trace, &dlogits, grads.as_deref_mut().map(|g| &mut g.gate));
        add_into(&mut dx, &g);
        dx
    }

    pub fn zero_grads(&self) -> MoeGrads {
        MoeGrads {
            experts: self.experts.iter().map(DenseNet::zeros_like).collect(),
            gate: self.gate.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(DenseNet::param_count).sum::<usize>() + self.gate.param_count()
    }

    /// All expert parameters followed by the gate, layer by layer
    /// (weights then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for net in self.experts.iter().chain(std::iter::once(&self.gate)) {
            for s in net.slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.param_count(), values.len())?;
        let mut offset = 0;
        for net in self.experts.iter_mut().chain(std::iter::once(&mut self.gate)) {
            for s in net.slices_mut() {
                s.copy_from_slice(&values[offset..offset + s.len()]);
                offset += s.len();
            }
        }
        Ok(())
    }

    /// `w <- w - lr * (g + 2 * anchor_penalty * (w - w_anchor))`.
    pub fn apply_gradient_step(&mut self, grads: &MoeGrads, lr: f64, anchor: Option<(&[f64], f64)>) -> Result<()> {
        if let Some((a, _)) = anchor {
            check_dim(self.param_count(), a.len())?;
        }
        let mut offset = 0;
        let nets = self.experts.iter_mut().chain(std::iter::once(&mut self.gate));
        let grad_nets = grads.experts.iter().chain(std::iter::once(&grads.gate));
        for (net, gnet) in nets.zip(grad_nets) {
            for (s, gs) in net.slices_mut().zip(gnet.slices()) {
                for (i, (w, g)) in s.iter_mut().zip(gs).enumerate() {
                    let mut step = *g;
                    if let Some((a, lambda)) = anchor {
                        step += 2.0 * lambda * (*w - a[offset + i]);
                    }
                    *w -= lr * step;
                }
                offset += s.len();
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let named = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, n)| (format!("expert{i}"), n))
            .chain(std::iter::once(("gate".to_string(), &self.gate)));
        for (name, net) in named {
            for (li, l) in net.layers.iter().enumerate() {
                out.push(ParamShape {
                    name: format!("{name}.layer{li}.weight"),
                    shape: vec![l.outputs, l.inputs],
                });
                out.push(ParamShape {
                    name: format!("{name}.layer{li}.bias"),
                    shape: vec![l.outputs],
                });
            }
        }
        out
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            manifest: self.manifest(),
            values: self.params_flat(),
        }
    }

    pub fn restore(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        if snapshot.manifest != self.manifest() {
            return Err(Error::InvalidConfig("parameter manifest does not match this surrogate".into()));
        }
        self.set_params_flat(&snapshot.values)
    }

    /// Bitwise fingerprint of every expert and gate parameter.
    pub fn param_fingerprint(&self) -> u64 {
        fingerprint(self.params_flat().iter().copied())
    }
}

pub(crate) fn fingerprint(values: impl Iterator<Item = f64>) -> u64 {
    // FNV-1a over the IEEE bit patterns
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Single-layer scalar expert `w . x + b`.
    fn linear_expert(w: Vec<f64>, b: f64) -> DenseNet {
        let inputs = w.len();
        DenseNet::from_layers(vec![Dense {
            inputs,
            outputs: 1,
            weights: w,
            bias: vec![b],
        }])
        .unwrap()
    }

    /// Linear gate with zero weights and the given constant logits.
    fn constant_gate(inputs: usize, logits: Vec<f64>) -> DenseNet {
        DenseNet::from_layers(vec![Dense {
            inputs,
            outputs: logits.len(),
            weights: vec![0.0; inputs * logits.len()],
            bias: logits,
        }])
        .unwrap()
    }

    fn cfg(n: usize) -> MoeConfig {
        MoeConfig {
            n_experts: n,
            k_min: 1,
            ..MoeConfig::default()
        }
    }

    fn random_moe(seed: u64, input: usize) -> MoeSurrogate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = MoeConfig {
            n_experts: 4,
            expert_hidden: vec![7, 5],
            gate_hidden: vec![6],
            ..MoeConfig::default()
        };
        let mut moe = MoeSurrogate::new(input, c, &mut rng).unwrap();
        // non-zero biases so that the rectifier kinks are not all at the origin
        let mut flat = moe.params_flat();
        for v in flat.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        moe.set_params_flat(&flat).unwrap();
        moe
    }

    #[test]
    fn identical_experts_have_zero_variance() {
        let experts = (0..3).map(|_| linear_expert(vec![0.0, 0.0], 0.42)).collect();
        let moe = MoeSurrogate::from_parts(cfg(3), experts, constant_gate(2, vec![0.3, -1.0, 2.0])).unwrap();
        let p = moe.forward_full(&[0.5, 0.5]).unwrap();
        assert_relative_eq!(p.mean, 0.42, epsilon = 1e-15);
        assert!(p.variance < 1e-30);
        let s: f64 = p.gate_weights.iter().sum();
        assert_relative_eq!(s, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_expert_mean_and_variance() {
        let experts = vec![linear_expert(vec![0.0], 0.0), linear_expert(vec![0.0], 1.0)];
        let moe = MoeSurrogate::from_parts(cfg(2), experts, constant_gate(1, vec![0.0, 0.0])).unwrap();
        let p = moe.forward_full(&[0.3]).unwrap();
        assert_relative_eq!(p.mean, 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.variance, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn one_hot_gate_selects_expert() {
        let experts = vec![linear_expert(vec![0.0], 0.9), linear_expert(vec![0.0], 0.1)];
        let moe = MoeSurrogate::from_parts(cfg(2), experts, constant_gate(1, vec![0.0, 1e4])).unwrap();
        let p = moe.forward_full(&[0.0]).unwrap();
        assert_eq!(p.mean, 0.1);
        assert_eq!(p.variance, 0.0);
    }

    #[test]
    fn topk_renormalizes() {
        let logits: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let experts = vec![
            linear_expert(vec![0.0], 1.0),
            linear_expert(vec![0.0], 0.0),
            linear_expert(vec![0.0], 123.0),
        ];
        let moe = MoeSurrogate::from_parts(cfg(3), experts, constant_gate(1, logits)).unwrap();
        let p = moe.forward_topk(&[0.0], 2).unwrap();
        assert_eq!(p.active, vec![0, 1]);
        assert_relative_eq!(p.active_weights[0], 0.625, epsilon = 1e-12);
        assert_relative_eq!(p.active_weights[1], 0.375, epsilon = 1e-12);
        assert_relative_eq!(p.mean, 0.625, epsilon = 1e-12);

        let single = moe.forward_topk(&[0.0], 1).unwrap();
        assert_eq!(single.variance, 0.0);
        assert!(moe.forward_topk(&[0.0], 0).is_err());
        assert!(moe.forward_topk(&[0.0], 4).is_err());
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        assert_eq!(MoeSurrogate::select_top_k(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(MoeSurrogate::select_top_k(&[0.1, 0.3, 0.3, 0.3], 2), vec![1, 2]);
    }

    #[test]
    fn full_equals_topk_e_bitwise() {
        let moe = random_moe(1, 5);
        let x = [0.1, -0.4, 0.7, 0.2, 1.3];
        let a = moe.forward_full(&x).unwrap();
        let b = moe.forward_topk(&x, 4).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.variance.to_bits(), b.variance.to_bits());
    }

    #[test]
    fn variance_matches_two_pass_population_variance() {
        let moe = random_moe(2, 3);
        let x = [0.3, 0.9, -0.2];
        for k in 1..=4 {
            let p = moe.forward_topk(&x, k).unwrap();
            let w: Vec<f64> = p.active.iter().map(|&e| p.gate_weights[e]).collect();
            let total: f64 = w.iter().sum();
            let ys: Vec<f64> = p.active.iter().map(|&e| moe.experts()[e].forward(&x)[0]).collect();
            let mean: f64 = w.iter().zip(&ys).map(|(w, y)| w / total * y).sum();
            let var: f64 = w.iter().zip(&ys).map(|(w, y)| w / total * (y - mean).powi(2)).sum();
            assert_relative_eq!(p.mean, mean, max_relative = 1e-12);
            assert_relative_eq!(p.variance, var, max_relative = 1e-10, epsilon = 1e-15);
        }
    }

    #[test]
    fn expert_count_formula() {
        assert_eq!(MoeSurrogate::expert_count_from_mix(0.0, 2, 6), 2);
        assert_eq!(MoeSurrogate::expert_count_from_mix(1.0, 2, 6), 6);
        assert_eq!(MoeSurrogate::expert_count_from_mix(0.5, 2, 6), 4);
    }

    #[test]
    fn active_count_uses_and_updates_uncertainty_ema() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut moe = MoeSurrogate::new(4, MoeConfig::default(), &mut rng).unwrap();
        let k = moe.active_expert_count(0.0, 0.0).unwrap();
        // fresh EMA (0, 1): z = 0, u = 0.5, eta = 0.275 -> round(3.1) = 3
        assert_eq!(k, 3);
        assert_eq!(moe.uncertainty_ema().count(), 1);
    }

    #[test]
    fn constant_network_has_zero_input_gradient() {
        let experts = (0..2).map(|_| linear_expert(vec![0.0; 3], 0.7)).collect();
        let moe = MoeSurrogate::from_parts(cfg(2), experts, constant_gate(3, vec![0.1, 0.2])).unwrap();
        assert_eq!(moe.grad_input(&[1.0, 2.0, 3.0], &[0, 1]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn linear_experts_uniform_gate_average_rows() {
        let rows = [vec![1.0, -2.0, 0.5], vec![3.0, 0.0, -1.5], vec![-1.0, 4.0, 2.0]];
        let experts = rows.iter().map(|r| linear_expert(r.clone(), 0.0)).collect();
        let moe = MoeSurrogate::from_parts(cfg(3), experts, constant_gate(3, vec![0.0; 3])).unwrap();
        let g = moe.grad_input(&[0.2, 0.1, -0.3], &[0, 1, 2]).unwrap();
        for i in 0..3 {
            let avg = rows.iter().map(|r| r[i]).sum::<f64>() / 3.0;
            assert_relative_eq!(g[i], avg, epsilon = 1e-12);
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let moe = random_moe(100 + seed, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = 1 + (seed as usize % 4);
            let active = moe.forward_topk(&x, k).unwrap().active;
            let g = moe.grad_input(&x, &active).unwrap();
            let h = 1e-5;
            for i in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (moe.forward_active(&xp, &active).unwrap().mean
                    - moe.forward_active(&xm, &active).unwrap().mean)
                    / (2.0 * h);
                assert!(rel_err(g[i], fd) < 1e-4, "seed {seed} coord {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let moe = random_moe(200 + seed, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let active = moe.forward_topk(&x, 3).unwrap().active;
            let loss_grad = 0.7;
            let grads = moe.grad_params(&x, loss_grad, &active).unwrap().flatten();
            let base = moe.params_flat();
            let h = 1e-5;
            for _ in 0..10 {
                let i = rng.random_range(0..base.len());
                let mut probe = moe.clone();
                let mut p = base.clone();
                p[i] += h;
                probe.set_params_flat(&p).unwrap();
                let up = probe.forward_active(&x, &active).unwrap().mean;
                p[i] -= 2.0 * h;
                probe.set_params_flat(&p).unwrap();
                let down = probe.forward_active(&x, &active).unwrap().mean;
                let fd = loss_grad * (up - down) / (2.0 * h);
                assert!(rel_err(grads[i], fd) < 1e-4, "seed {seed} param {i}: {} vs {fd}", grads[i]);
            }
        }
    }

    #[test]
    fn zero_loss_grad_and_masking() {
        let moe = random_moe(7, 4);
        let x = [0.5, -0.5, 0.25, 1.0];
        assert!(moe.grad_params(&x, 0.0, &[0, 1, 2, 3]).unwrap().is_zero());
        let g = moe.grad_params(&x, 1.0, &[1, 3]).unwrap();
        assert!(g.experts[0].slices().all(|s| s.iter().all(|v| *v == 0.0)));
        assert!(g.experts[2].slices().all(|s| s.iter().all(|v| *v == 0.0)));
        assert!(!g.experts[1].slices().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn snapshot_round_trip_and_manifest() {
        let moe = random_moe(8, 3);
        let snap = moe.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: ParamSnapshot = serde_json::from_str(&json).unwrap();
        let mut other = random_moe(9, 3);
        assert_ne!(other.param_fingerprint(), moe.param_fingerprint());
        other.restore(&back).unwrap();
        assert_eq!(other.param_fingerprint(), moe.param_fingerprint());
        let total: usize = snap.manifest.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(total, snap.values.len());
    }

    #[test]
    fn nan_parameters_are_reported() {
        let mut moe = random_moe(10, 3);
        let mut p = moe.params_flat();
        let n = p.len();
        p[n - 1] = f64::NAN;
        moe.set_params_flat(&p).unwrap();
        assert!(moe.forward_full(&[0.0, 0.0, 0.0]).is_err());
    }
}

//! Forward computation: backbone feature extraction and the split-merge
//! mixture of hash experts producing one continuous code per branch.
//!
//! Two gating networks (one per branch) score a shared pool of expert
//! networks; the top-k experts per branch are evaluated and merged under
//! sum-normalized weights. Selection is hard: non-selected experts are
//! never evaluated and never receive gradient.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Below this selected-score mass the routing weights fall back to uniform.
pub const ROUTING_SUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Elementwise sigmoid on raw scores, then top-k sum normalization.
    SigmoidNorm,
    /// Full softmax over raw scores, then top-k sum normalization.
    Softmax,
}

impl GateMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid_norm" => Ok(GateMode::SigmoidNorm),
            "softmax" => Ok(GateMode::Softmax),
            other => Err(Error::InvalidArgument(format!(
                "unknown gate mode '{other}' (expected sigmoid_norm|softmax)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GateMode::SigmoidNorm => "sigmoid_norm",
            GateMode::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Center,
    Pairwise,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Center, Branch::Pairwise];

    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Center => "center",
            Branch::Pairwise => "pairwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Branch::Center),
            "pairwise" => Ok(Branch::Pairwise),
            other => Err(Error::InvalidArgument(format!("unknown branch '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Input feature dimension D_in.
    pub input_dim: usize,
    /// Backbone output dimension d.
    pub feature_dim: usize,
    /// Code length q.
    pub code_len: usize,
    /// Number of experts m (per bank when experts are unshared).
    pub num_experts: usize,
    /// Experts selected per branch per sample.
    pub top_k: usize,
    /// Affine+ReLU layers in the backbone; 0 means identity (D_in must equal d).
    pub backbone_depth: usize,
    pub gate_mode: GateMode,
    pub shared_experts: bool,
    pub tanh_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            feature_dim: 64,
            code_len: 16,
            num_experts: 8,
            top_k: 2,
            backbone_depth: 1,
            gate_mode: GateMode::SigmoidNorm,
            shared_experts: true,
            tanh_output: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.code_len == 0 {
            return Err(Error::Config("dimensions must be >= 1".into()));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= k <= m, got k={} m={}",
                self.top_k, self.num_experts
            )));
        }
        if self.backbone_depth == 0 && self.input_dim != self.feature_dim {
            return Err(Error::Config(format!(
                "identity backbone requires D_in == d, got {} vs {}",
                self.input_dim, self.feature_dim
            )));
        }
        Ok(())
    }
}

/// Dense affine map, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        let b = (0..out_dim)
            .map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        Linear {
            in_dim,
            out_dim,
            w,
            b,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.b.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            *out_v += row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
        out
    }
}

/// Two-layer gate: Linear(d→d) + ReLU + Linear(d→m).
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub l1: Linear,
    pub l2: Linear,
}

/// Two-layer hash expert: Linear(d→q) + ReLU + Linear(q→q).
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Affine+ReLU stack; empty when the backbone is identity.
    pub backbone: Vec<Linear>,
    /// One bank of m experts when shared, two concatenated banks (center
    /// bank first) when unshared.
    pub experts: Vec<Expert>,
    pub gate_c: Gate,
    pub gate_p: Gate,
}

impl ModelParams {
    /// Seeded initialization: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    /// per layer, drawn in a fixed order.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(seed, rng::STREAM_INIT);
        let (d_in, d, q, m) = (
            config.input_dim,
            config.feature_dim,
            config.code_len,
            config.num_experts,
        );
        let mut backbone = Vec::with_capacity(config.backbone_depth);
        for layer in 0..config.backbone_depth {
            let in_dim = if layer == 0 { d_in } else { d };
            backbone.push(Linear::init(in_dim, d, &mut rng));
        }
        let bank_count = if config.shared_experts { m } else { 2 * m };
        let experts = (0..bank_count)
            .map(|_| Expert {
                l1: Linear::init(d, q, &mut rng),
                l2: Linear::init(q, q, &mut rng),
            })
            .collect();
        let gate_c = Gate {
            l1: Linear::init(d, d, &mut rng),
            l2: Linear::init(d, m, &mut rng),
        };
        let gate_p = Gate {
            l1: Linear::init(d, d, &mut rng),
            l2: Linear::init(d, m, &mut rng),
        };
        Ok(ModelParams {
            config,
            backbone,
            experts,
            gate_c,
            gate_p,
        })
    }

    pub fn gate(&self, branch: Branch) -> &Gate {
        match branch {
            Branch::Center => &self.gate_c,
            Branch::Pairwise => &self.gate_p,
        }
    }

    /// Global index into `self.experts` for expert `i` of `branch`'s bank.
    pub fn expert_slot(&self, branch: Branch, i: usize) -> usize {
        if self.config.shared_experts || branch == Branch::Center {
            i
        } else {
            self.config.num_experts + i
        }
    }

    /// Canonical parameter array names, matching `param_arrays` order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.len() {
            names.push(format!("backbone.{i}.w"));
            names.push(format!("backbone.{i}.b"));
        }
        for i in 0..self.experts.len() {
            for part in ["l1", "l2"] {
                names.push(format!("expert.{i}.{part}.w"));
                names.push(format!("expert.{i}.{part}.b"));
            }
        }
        for gate in ["gate_c", "gate_p"] {
            for part in ["l1", "l2"] {
                names.push(format!("{gate}.{part}.w"));
                names.push(format!("{gate}.{part}.b"));
            }
        }
        names
    }

    /// `[out, in]` for weights, `[out]` for biases, in `param_names` order.
    pub fn param_dims(&self) -> Vec<Vec<usize>> {
        let mut dims = Vec::new();
        let linear = |l: &Linear, dims: &mut Vec<Vec<usize>>| {
            dims.push(vec![l.out_dim, l.in_dim]);
            dims.push(vec![l.out_dim]);
        };
        for l in &self.backbone {
            linear(l, &mut dims);
        }
        for e in &self.experts {
            linear(&e.l1, &mut dims);
            linear(&e.l2, &mut dims);
        }
        for g in [&self.gate_c, &self.gate_p] {
            linear(&g.l1, &mut dims);
            linear(&g.l2, &mut dims);
        }
        dims
    }

    pub fn param_arrays(&self) -> Vec<&Vec<f64>> {
        let mut arrays = Vec::new();
        for l in &self.backbone {
            arrays.push(&l.w);
            arrays.push(&l.b);
        }
        for e in &self.experts {
            for l in [&e.l1, &e.l2] {
                arrays.push(&l.w);
                arrays.push(&l.b);
            }
        }
        for g in [&self.gate_c, &self.gate_p] {
            for l in [&g.l1, &g.l2] {
                arrays.push(&l.w);
                arrays.push(&l.b);
            }
        }
        arrays
    }

    pub fn param_arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut arrays = Vec::new();
        for l in &mut self.backbone {
            arrays.push(&mut l.w);
            arrays.push(&mut l.b);
        }
        for e in &mut self.experts {
            arrays.push(&mut e.l1.w);
            arrays.push(&mut e.l1.b);
            arrays.push(&mut e.l2.w);
            arrays.push(&mut e.l2.b);
        }
        for g in [&mut self.gate_c, &mut self.gate_p] {
            arrays.push(&mut g.l1.w);
            arrays.push(&mut g.l1.b);
            arrays.push(&mut g.l2.w);
            arrays.push(&mut g.l2.b);
        }
        arrays
    }

    pub fn param_count(&self) -> usize {
        self.param_arrays().iter().map(|a| a.len()).sum()
    }
}

/// Selected expert indices and normalized weights for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRouting {
    /// Selected expert indices, highest activation first.
    pub indices: Vec<usize>,
    /// Normalized weights parallel to `indices`; sums to 1.
    pub weights: Vec<f64>,
    /// True when the selected-score mass underflowed and uniform weights
    /// were substituted.
    pub uniform_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub center: BranchRouting,
    pub pairwise: BranchRouting,
}

impl RoutingRecord {
    pub fn branch(&self, branch: Branch) -> &BranchRouting {
        match branch {
            Branch::Center => &self.center,
            Branch::Pairwise => &self.pairwise,
        }
    }
}

/// Continuous codes for one sample plus the routing that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CodePair {
    pub u_center: Vec<f64>,
    pub u_pairwise: Vec<f64>,
    pub routing: RoutingRecord,
}

impl CodePair {
    pub fn code(&self, branch: Branch) -> &[f64] {
        match branch {
            Branch::Center => &self.u_center,
            Branch::Pairwise => &self.u_pairwise,
        }
    }
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn check_finite(values: &[f64], stage: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value in {stage}")));
    }
    Ok(())
}

/// Backbone feature extraction; identity when the stack is empty.
pub fn backbone_forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(backbone_forward_cached(params, x)?.output)
}

#[derive(Debug, Clone)]
pub struct BackboneForward {
    pub(crate) input: Vec<f64>,
    /// Pre-activation per layer.
    pub(crate) pre: Vec<Vec<f64>>,
    /// Post-ReLU per layer; last entry equals `output`.
    pub(crate) post: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub(crate) fn backbone_forward_cached(params: &ModelParams, x: &[f64]) -> Result<BackboneForward> {
    if x.len() != params.config.input_dim {
        return Err(Error::Shape(format!(
            "input has dimension {}, model expects {}",
            x.len(),
            params.config.input_dim
        )));
    }
    check_finite(x, "backbone input")?;
    let mut pre = Vec::with_capacity(params.backbone.len());
    let mut post = Vec::with_capacity(params.backbone.len());
    let mut cur = x.to_vec();
    for layer in &params.backbone {
        let z = layer.forward(&cur);
        cur = relu(&z);
        pre.push(z);
        post.push(cur.clone());
    }
    check_finite(&cur, "backbone output")?;
    Ok(BackboneForward {
        input: x.to_vec(),
        pre,
        post,
        output: cur,
    })
}

/// Raw and activated gate scores for a feature vector.
#[derive(Debug, Clone)]
pub struct GateScores {
    pub raw: Vec<f64>,
    pub activated: Vec<f64>,
    pub(crate) hidden_pre: Vec<f64>,
    pub(crate) hidden: Vec<f64>,
}

pub fn gate_scores(gate: &Gate, v: &[f64], mode: GateMode) -> Result<GateScores> {
    if v.len() != gate.l1.in_dim {
        return Err(Error::Shape(format!(
            "gate expects dimension {}, got {}",
            gate.l1.in_dim,
            v.len()
        )));
    }
    let hidden_pre = gate.l1.forward(v);
    let hidden = relu(&hidden_pre);
    let raw = gate.l2.forward(&hidden);
    check_finite(&raw, "gate raw scores")?;
    let activated = match mode {
        GateMode::SigmoidNorm => raw.iter().map(|z| sigmoid(*z)).collect(),
        GateMode::Softmax => softmax(&raw),
    };
    Ok(GateScores {
        raw,
        activated,
        hidden_pre,
        hidden,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Pick the k largest activated scores (ties toward the smaller index) and
/// sum-normalize them.
pub fn select_topk(activated: &[f64], k: usize) -> Result<BranchRouting> {
    let m = activated.len();
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!(
            "top-k must satisfy 1 <= k <= m, got k={k} m={m}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        activated[b]
            .partial_cmp(&activated[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let indices: Vec<usize> = order[..k].to_vec();
    let sum: f64 = indices.iter().map(|&i| activated[i]).sum();
    let (weights, uniform_fallback) = if sum < ROUTING_SUM_FLOOR {
        (vec![1.0 / k as f64; k], true)
    } else {
        (indices.iter().map(|&i| activated[i] / sum).collect(), false)
    };
    Ok(BranchRouting {
        indices,
        weights,
        uniform_fallback,
    })
}

#[derive(Debug, Clone)]
pub(crate) struct ExpertForward {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

fn expert_forward(expert: &Expert, v: &[f64]) -> ExpertForward {
    let hidden_pre = expert.l1.forward(v);
    let hidden = relu(&hidden_pre);
    let out = expert.l2.forward(&hidden);
    ExpertForward {
        hidden_pre,
        hidden,
        out,
    }
}

/// Full per-branch forward state, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BranchForward {
    pub gate: GateScores,
    pub routing: BranchRouting,
    /// Forward state of the selected experts, parallel to `routing.indices`.
    pub experts: Vec<ExpertForward>,
    pub u: Vec<f64>,
}

pub(crate) fn branch_forward(
    params: &ModelParams,
    v: &[f64],
    branch: Branch,
) -> Result<BranchForward> {
    let cfg = &params.config;
    let gate = gate_scores(params.gate(branch), v, cfg.gate_mode)?;
    let mut routing = select_topk(&gate.activated, cfg.top_k)?;
    if cfg.gate_mode == GateMode::Softmax {
        // softmax(z)_i / sum_K softmax(z)_j equals the softmax of the raw
        // scores restricted to K. Computing it that way keeps the output
        // bit-invariant to non-selected raw scores, which the sum
        // normalization cancels exactly.
        let max = routing
            .indices
            .iter()
            .map(|&i| gate.raw[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = routing.indices.iter().map(|&i| (gate.raw[i] - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        routing.weights = exps.iter().map(|e| e / sum).collect();
        routing.uniform_fallback = false;
    }
    let mut merged = vec![0.0; cfg.code_len];
    let mut experts = Vec::with_capacity(routing.indices.len());
    for (&idx, &w) in routing.indices.iter().zip(&routing.weights) {
        let slot = params.expert_slot(branch, idx);
        let ef = expert_forward(&params.experts[slot], v);
        for (m, e) in merged.iter_mut().zip(&ef.out) {
            *m += w * e;
        }
        experts.push(ef);
    }
    let u: Vec<f64> = if cfg.tanh_output {
        merged.iter().map(|z| z.tanh()).collect()
    } else {
        merged
    };
    check_finite(&u, &format!("{} branch output", branch.as_str()))?;
    Ok(BranchForward {
        gate,
        routing,
        experts,
        u,
    })
}

/// Per-sample forward state for both branches.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub(crate) backbone: BackboneForward,
    pub(crate) center: BranchForward,
    pub(crate) pairwise: BranchForward,
}

impl SampleForward {
    pub fn code_pair(&self) -> CodePair {
        CodePair {
            u_center: self.center.u.clone(),
            u_pairwise: self.pairwise.u.clone(),
            routing: RoutingRecord {
                center: self.center.routing.clone(),
                pairwise: self.pairwise.routing.clone(),
            },
        }
    }
}

pub fn forward_cached(params: &ModelParams, x: &[f64]) -> Result<SampleForward> {
    let backbone = backbone_forward_cached(params, x)?;
    let center = branch_forward(params, &backbone.output, Branch::Center)?;
    let pairwise = branch_forward(params, &backbone.output, Branch::Pairwise)?;
    Ok(SampleForward {
        backbone,
        center,
        pairwise,
    })
}

/// SM-MoH head alone: map a backbone feature vector to both branch codes.
pub fn smmoh_forward(params: &ModelParams, v: &[f64]) -> Result<CodePair> {
    let center = branch_forward(params, v, Branch::Center)?;
    let pairwise = branch_forward(params, v, Branch::Pairwise)?;
    Ok(CodePair {
        u_center: center.u,
        u_pairwise: pairwise.u,
        routing: RoutingRecord {
            center: center.routing,
            pairwise: pairwise.routing,
        },
    })
}

/// End-to-end forward: raw input to both branch codes.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<CodePair> {
    Ok(forward_cached(params, x)?.code_pair())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            feature_dim: 5,
            code_len: 4,
            num_experts: 4,
            top_k: 2,
            backbone_depth: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn identity_backbone_returns_input() {
        let config = ModelConfig {
            input_dim: 3,
            feature_dim: 3,
            backbone_depth: 0,
            ..small_config()
        };
        let params = ModelParams::init(config, 1).unwrap();
        let v = backbone_forward(&params, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn identity_backbone_rejects_dim_mismatch_config() {
        let config = ModelConfig {
            input_dim: 3,
            feature_dim: 4,
            backbone_depth: 0,
            ..small_config()
        };
        assert!(ModelParams::init(config, 1).is_err());
    }

    #[test]
    fn zero_weight_backbone_outputs_relu_of_bias() {
        let mut params = ModelParams::init(small_config(), 1).unwrap();
        for l in &mut params.backbone {
            l.w.iter_mut().for_each(|w| *w = 0.0);
            l.b = vec![0.5, -0.5, 1.5, -1.5, 0.0];
        }
        let v = backbone_forward(&params, &[9.0; 6]).unwrap();
        assert_eq!(v, vec![0.5, 0.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn backbone_matches_straight_line_reimplementation() {
        let config = ModelConfig {
            input_dim: 7,
            feature_dim: 5,
            backbone_depth: 2,
            ..small_config()
        };
        let params = ModelParams::init(config, 33).unwrap();
        let x: Vec<f64> = (0..7).map(|i| 0.3 * i as f64 - 1.0).collect();
        let got = backbone_forward(&params, &x).unwrap();

        // Independent straight-line evaluation.
        let mut cur = x.clone();
        for layer in &params.backbone {
            let mut next = vec![0.0; layer.out_dim];
            for (o, nv) in next.iter_mut().enumerate() {
                let mut acc = layer.b[o];
                for (i, xv) in cur.iter().enumerate() {
                    acc += layer.w[o * layer.in_dim + i] * xv;
                }
                *nv = if acc > 0.0 { acc } else { 0.0 };
            }
            cur = next;
        }
        for (a, b) in got.iter().zip(&cur) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_gives_uniform_activations() {
        let params = ModelParams::init(small_config(), 2).unwrap();
        let mut gate = params.gate_c.clone();
        gate.l1 = Linear::zeros(5, 5);
        gate.l2 = Linear::zeros(5, 4);
        let v = vec![0.7; 5];
        let s = gate_scores(&gate, &v, GateMode::SigmoidNorm).unwrap();
        assert_eq!(s.activated, vec![0.5; 4]);
        let s = gate_scores(&gate, &v, GateMode::Softmax).unwrap();
        for a in &s.activated {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[1.0, 0.0, -1.0]);
        // Independent evaluation from exp/sum.
        let e: Vec<f64> = [1.0f64, 0.0, -1.0].iter().map(|z| z.exp()).collect();
        let sum: f64 = e.iter().sum();
        for (got, want) in p.iter().zip(e.iter().map(|v| v / sum)) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((p[0] - 0.66524).abs() < 1e-5);
        assert!((p[1] - 0.24473).abs() < 1e-5);
        assert!((p[2] - 0.09003).abs() < 1e-5);
    }

    #[test]
    fn topk_selects_and_normalizes() {
        let r = select_topk(&[0.9, 0.1, 0.6, 0.4], 2).unwrap();
        assert_eq!(r.indices, vec![0, 2]);
        assert!((r.weights[0] - 0.6).abs() < 1e-12);
        assert!((r.weights[1] - 0.4).abs() < 1e-12);
        assert!(!r.uniform_fallback);
    }

    #[test]
    fn topk_ties_break_toward_smaller_index() {
        let r = select_topk(&[0.5, 0.5, 0.1], 1).unwrap();
        assert_eq!(r.indices, vec![0]);
        let r = select_topk(&[0.2, 0.5, 0.5], 2).unwrap();
        assert_eq!(r.indices, vec![1, 2]);
    }

    #[test]
    fn topk_dense_limit_and_bad_k() {
        let r = select_topk(&[0.2, 0.3, 0.5], 3).unwrap();
        assert_eq!(r.indices, vec![2, 1, 0]);
        let total: f64 = r.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((r.weights[0] - 0.5).abs() < 1e-12);
        assert!(select_topk(&[0.2, 0.3], 3).is_err());
    }

    #[test]
    fn topk_underflow_falls_back_to_uniform() {
        let r = select_topk(&[0.0, 0.0, 0.0], 2).unwrap();
        assert!(r.uniform_fallback);
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn single_expert_degeneracy() {
        let config = ModelConfig {
            num_experts: 1,
            top_k: 1,
            ..small_config()
        };
        let params = ModelParams::init(config, 3).unwrap();
        let x = vec![0.4, -0.2, 0.9, 0.0, -1.0, 0.3];
        let v = backbone_forward(&params, &x).unwrap();
        let pair = smmoh_forward(&params, &v).unwrap();
        let ef = expert_forward(&params.experts[0], &v);
        let expect: Vec<f64> = ef.out.iter().map(|z| z.tanh()).collect();
        assert_eq!(pair.u_center, expect);
        assert_eq!(pair.u_pairwise, expect);
    }

    #[test]
    fn symmetric_gates_give_identical_branches() {
        let mut params = ModelParams::init(small_config(), 4).unwrap();
        params.gate_p = params.gate_c.clone();
        let x = vec![0.1, 0.5, -0.3, 0.8, -0.2, 0.0];
        let pair = forward(&params, &x).unwrap();
        assert_eq!(pair.u_center, pair.u_pairwise);
        assert_eq!(pair.routing.center, pair.routing.pairwise);
    }

    #[test]
    fn merge_matches_hand_evaluation() {
        let config = ModelConfig {
            num_experts: 2,
            top_k: 2,
            ..small_config()
        };
        let params = ModelParams::init(config, 5).unwrap();
        let x = vec![0.2, -0.4, 0.6, 0.1, -0.9, 0.5];
        let v = backbone_forward(&params, &x).unwrap();
        let fwd = branch_forward(&params, &v, Branch::Center).unwrap();
        let e0 = expert_forward(&params.experts[fwd.routing.indices[0]], &v);
        let e1 = expert_forward(&params.experts[fwd.routing.indices[1]], &v);
        for j in 0..4 {
            let merged = fwd.routing.weights[0] * e0.out[j] + fwd.routing.weights[1] * e1.out[j];
            assert!((fwd.u[j] - merged.tanh()).abs() < 1e-15);
            assert!(fwd.u[j].abs() < 1.0);
        }
    }

    #[test]
    fn perturbing_non_selected_expert_is_invisible() {
        let params = ModelParams::init(small_config(), 6).unwrap();
        let x = vec![0.3, 0.1, -0.5, 0.9, 0.2, -0.8];
        let before = forward(&params, &x).unwrap();
        let mut selected: Vec<usize> = before
            .routing
            .center
            .indices
            .iter()
            .chain(&before.routing.pairwise.indices)
            .copied()
            .collect();
        selected.sort_unstable();
        selected.dedup();
        let untouched = (0..4).find(|i| !selected.contains(i)).expect("free expert");
        let mut mutated = params.clone();
        for w in &mut mutated.experts[untouched].l1.w {
            *w += 123.0;
        }
        let after = forward(&mutated, &x).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn routing_weights_sum_to_one_over_random_forwards() {
        let params = ModelParams::init(small_config(), 7).unwrap();
        let mut rng = rng::rng_for(99, 1);
        for _ in 0..500 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let pair = forward(&params, &x).unwrap();
            for routing in [&pair.routing.center, &pair.routing.pairwise] {
                let sum: f64 = routing.weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                let mut uniq = routing.indices.clone();
                uniq.dedup();
                assert_eq!(uniq.len(), routing.indices.len());
            }
        }
    }

    #[test]
    fn permuting_experts_with_gate_columns_is_invariant() {
        let params = ModelParams::init(small_config(), 8).unwrap();
        let x = vec![0.4, -0.1, 0.7, -0.6, 0.2, 0.9];
        let before = forward(&params, &x).unwrap();

        let perm = [2usize, 0, 3, 1]; // new position p holds old expert perm[p]
        let mut permuted = params.clone();
        for (new_slot, &old_slot) in perm.iter().enumerate() {
            permuted.experts[new_slot] = params.experts[old_slot].clone();
        }
        for (gate, orig) in [
            (&mut permuted.gate_c, &params.gate_c),
            (&mut permuted.gate_p, &params.gate_p),
        ] {
            let d = orig.l2.in_dim;
            for (new_slot, &old_slot) in perm.iter().enumerate() {
                gate.l2.w[new_slot * d..(new_slot + 1) * d]
                    .copy_from_slice(&orig.l2.w[old_slot * d..(old_slot + 1) * d]);
                gate.l2.b[new_slot] = orig.l2.b[old_slot];
            }
        }
        let after = forward(&permuted, &x).unwrap();
        for (a, b) in before.u_center.iter().zip(&after.u_center) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in before.u_pairwise.iter().zip(&after.u_pairwise) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unshared_banks_route_independently() {
        let config = ModelConfig {
            shared_experts: false,
            ..small_config()
        };
        let params = ModelParams::init(config, 9).unwrap();
        assert_eq!(params.experts.len(), 8);
        assert_eq!(params.expert_slot(Branch::Center, 1), 1);
        assert_eq!(params.expert_slot(Branch::Pairwise, 1), 5);
        let x = vec![0.2, 0.8, -0.4, 0.5, -0.1, 0.6];
        // Mutating the pairwise bank leaves the center branch untouched.
        let before = forward(&params, &x).unwrap();
        let mut mutated = params.clone();
        for e in &mut mutated.experts[4..8] {
            for w in &mut e.l1.w {
                *w += 7.0;
            }
        }
        let after = forward(&mutated, &x).unwrap();
        assert_eq!(before.u_center, after.u_center);
        assert_ne!(before.u_pairwise, after.u_pairwise);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(small_config(), 11).unwrap();
        let b = ModelParams::init(small_config(), 11).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(small_config(), 12).unwrap();
        assert_ne!(a, c);
    }
}

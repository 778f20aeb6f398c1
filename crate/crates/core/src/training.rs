//! Reverse-mode gradients for the full objective, the finite-difference
//! verification oracle, RMSProp updates, and the training loop with
//! epoch-alternating detachment.
//!
//! Gradients are written out by hand for the fixed architecture. Top-k
//! expert selection is treated as non-differentiable: the backward pass
//! differentiates the loss at fixed routing, so only selected experts and
//! activated gate scores carry gradient.

use crate::centers::{generate_centers, CenterMethod, HashCenterTable};
use crate::dataset::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::network::{
    Branch, BranchForward, Gate, GateMode, Linear, ModelConfig, ModelParams,
    SampleForward,
};
use crate::objectives::{
    center_loss_with_grad, mutual_loss_with_grad, pairwise_loss_with_grad, similarity_matrix,
    total_loss, DetachSide, LossWeights,
};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearGrad {
    fn zeros_like(l: &Linear) -> Self {
        LinearGrad {
            w: vec![0.0; l.w.len()],
            b: vec![0.0; l.b.len()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MlpGrad {
    pub l1: LinearGrad,
    pub l2: LinearGrad,
}

/// One gradient array per parameter array, shape-congruent with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub backbone: Vec<LinearGrad>,
    pub experts: Vec<MlpGrad>,
    pub gate_c: MlpGrad,
    pub gate_p: MlpGrad,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet {
            backbone: params.backbone.iter().map(LinearGrad::zeros_like).collect(),
            experts: params
                .experts
                .iter()
                .map(|e| MlpGrad {
                    l1: LinearGrad::zeros_like(&e.l1),
                    l2: LinearGrad::zeros_like(&e.l2),
                })
                .collect(),
            gate_c: MlpGrad {
                l1: LinearGrad::zeros_like(&params.gate_c.l1),
                l2: LinearGrad::zeros_like(&params.gate_c.l2),
            },
            gate_p: MlpGrad {
                l1: LinearGrad::zeros_like(&params.gate_p.l1),
                l2: LinearGrad::zeros_like(&params.gate_p.l2),
            },
        }
    }

    fn gate_mut(&mut self, branch: Branch) -> &mut MlpGrad {
        match branch {
            Branch::Center => &mut self.gate_c,
            Branch::Pairwise => &mut self.gate_p,
        }
    }

    pub fn gate(&self, branch: Branch) -> &MlpGrad {
        match branch {
            Branch::Center => &self.gate_c,
            Branch::Pairwise => &self.gate_p,
        }
    }

    /// Flat view in the canonical `ModelParams::param_names` order.
    pub fn arrays(&self) -> Vec<&Vec<f64>> {
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

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
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

    /// Name of the first non-finite array, if any.
    pub fn first_non_finite(&self, params: &ModelParams) -> Option<String> {
        let names = params.param_names();
        for (name, arr) in names.iter().zip(self.arrays()) {
            if arr.iter().any(|v| !v.is_finite()) {
                return Some(name.clone());
            }
        }
        None
    }
}

/// dL/dout accumulation for one affine layer; `dinput` is optional because
/// the first backbone layer discards it.
fn linear_backward(
    layer: &Linear,
    input: &[f64],
    dout: &[f64],
    grad: &mut LinearGrad,
    mut dinput: Option<&mut [f64]>,
) {
    for (o, &d) in dout.iter().enumerate() {
        grad.b[o] += d;
        let row = &mut grad.w[o * layer.in_dim..(o + 1) * layer.in_dim];
        for (gw, &x) in row.iter_mut().zip(input) {
            *gw += d * x;
        }
        if let Some(di) = dinput.as_deref_mut() {
            let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (dv, &w) in di.iter_mut().zip(wrow) {
                *dv += d * w;
            }
        }
    }
}

fn relu_backward(pre: &[f64], dpost: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dpost)
        .map(|(&z, &d)| if z > 0.0 { d } else { 0.0 })
        .collect()
}

/// Backward through one branch: tanh, merge, selected experts, routing
/// normalization, gate activation, gate MLP. Accumulates parameter grads
/// and the feature-gradient contribution `dv`.
fn branch_backward(
    params: &ModelParams,
    branch: Branch,
    v: &[f64],
    fwd: &BranchForward,
    du: &[f64],
    grads: &mut GradientSet,
    dv: &mut [f64],
) {
    let cfg = &params.config;
    let q = cfg.code_len;

    let dmerged: Vec<f64> = if cfg.tanh_output {
        fwd.u.iter().zip(du).map(|(&u, &d)| d * (1.0 - u * u)).collect()
    } else {
        du.to_vec()
    };

    // Expert paths and per-weight sensitivities.
    let k = fwd.routing.indices.len();
    let mut dweights = vec![0.0; k];
    for (slot_pos, (&expert_idx, ef)) in fwd
        .routing
        .indices
        .iter()
        .zip(&fwd.experts)
        .enumerate()
    {
        let w = fwd.routing.weights[slot_pos];
        dweights[slot_pos] = dmerged.iter().zip(&ef.out).map(|(d, e)| d * e).sum();

        let dout: Vec<f64> = dmerged.iter().map(|d| d * w).collect();
        let slot = params.expert_slot(branch, expert_idx);
        let expert = &params.experts[slot];
        let egrad = &mut grads.experts[slot];
        let mut dhidden = vec![0.0; q];
        linear_backward(&expert.l2, &ef.hidden, &dout, &mut egrad.l2, Some(&mut dhidden));
        let dhidden_pre = relu_backward(&ef.hidden_pre, &dhidden);
        linear_backward(&expert.l1, v, &dhidden_pre, &mut egrad.l1, Some(dv));
    }

    // Routing backward. Only selected raw scores carry gradient: sum
    // normalization cancels the softmax normalizer, and sigmoid is
    // elementwise, so non-selected entries are exactly flat either way.
    let m = cfg.num_experts;
    let weighted: f64 = dweights
        .iter()
        .zip(&fwd.routing.weights)
        .map(|(d, w)| d * w)
        .sum();
    let mut draw = vec![0.0; m];
    match cfg.gate_mode {
        GateMode::SigmoidNorm => {
            // w_j = a_j / sum(a_selected), then a = sigmoid(z) elementwise.
            if !fwd.routing.uniform_fallback {
                let sum: f64 = fwd
                    .routing
                    .indices
                    .iter()
                    .map(|&i| fwd.gate.activated[i])
                    .sum();
                for (slot_pos, &i) in fwd.routing.indices.iter().enumerate() {
                    let dact = (dweights[slot_pos] - weighted) / sum;
                    let a = fwd.gate.activated[i];
                    draw[i] = dact * a * (1.0 - a);
                }
            }
        }
        GateMode::Softmax => {
            // w = softmax of the raw scores restricted to the selection.
            for (slot_pos, &i) in fwd.routing.indices.iter().enumerate() {
                let w = fwd.routing.weights[slot_pos];
                draw[i] = w * (dweights[slot_pos] - weighted);
            }
        }
    }

    // Gate MLP backward.
    let gate: &Gate = params.gate(branch);
    let ggrad = grads.gate_mut(branch);
    let d = gate.l1.out_dim;
    let mut dhidden = vec![0.0; d];
    linear_backward(&gate.l2, &fwd.gate.hidden, &draw, &mut ggrad.l2, Some(&mut dhidden));
    let dhidden_pre = relu_backward(&fwd.gate.hidden_pre, &dhidden);
    linear_backward(&gate.l1, v, &dhidden_pre, &mut ggrad.l1, Some(dv));
}

fn backbone_backward(
    params: &ModelParams,
    fwd: &SampleForward,
    dv: Vec<f64>,
    grads: &mut GradientSet,
) {
    let mut dcur = dv;
    for layer_idx in (0..params.backbone.len()).rev() {
        let layer = &params.backbone[layer_idx];
        let dpre = relu_backward(&fwd.backbone.pre[layer_idx], &dcur);
        let input: &[f64] = if layer_idx == 0 {
            &fwd.backbone.input
        } else {
            &fwd.backbone.post[layer_idx - 1]
        };
        if layer_idx == 0 {
            linear_backward(layer, input, &dpre, &mut grads.backbone[layer_idx], None);
            break;
        }
        let mut dinput = vec![0.0; layer.in_dim];
        linear_backward(
            layer,
            input,
            &dpre,
            &mut grads.backbone[layer_idx],
            Some(&mut dinput),
        );
        dcur = dinput;
    }
}

/// Loss components for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub center: f64,
    pub pairwise: f64,
    pub mutual: f64,
    /// Mean squared distance between the two branch codes.
    pub tau2: f64,
}

/// Forward the whole batch, keeping per-sample state.
pub fn forward_batch(params: &ModelParams, inputs: &[Vec<f64>]) -> Result<Vec<SampleForward>> {
    inputs
        .iter()
        .map(|x| crate::network::forward_cached(params, x))
        .collect()
}

fn branch_codes(fwds: &[SampleForward], branch: Branch) -> Vec<Vec<f64>> {
    fwds.iter()
        .map(|f| match branch {
            Branch::Center => f.center.u.clone(),
            Branch::Pairwise => f.pairwise.u.clone(),
        })
        .collect()
}

fn batch_tau2(u_c: &[Vec<f64>], u_p: &[Vec<f64>]) -> f64 {
    let n = u_c.len() as f64;
    u_c.iter()
        .zip(u_p)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Compute the weighted objective over a batch and its exact gradient with
/// respect to every model parameter. `labels` are multi-hot rows matching
/// the center table's class count.
pub fn backward(
    params: &ModelParams,
    centers: &HashCenterTable,
    inputs: &[Vec<f64>],
    labels: &[Vec<u8>],
    weights: &LossWeights,
    detach: DetachSide,
    include_diagonal_pairs: bool,
) -> Result<(LossParts, GradientSet)> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} label rows",
            inputs.len(),
            labels.len()
        )));
    }
    let fwds = forward_batch(params, inputs)?;
    let u_c = branch_codes(&fwds, Branch::Center);
    let u_p = branch_codes(&fwds, Branch::Pairwise);
    let n = inputs.len();
    let q = params.config.code_len;

    let (l_center, g_center) = center_loss_with_grad(&u_c, labels, centers)?;
    let (l_pairwise, g_pairwise) = if weights.pairwise != 0.0 || n >= 2 {
        let sim = similarity_matrix(labels);
        pairwise_loss_with_grad(&u_p, &sim, include_diagonal_pairs)?
    } else {
        (0.0, vec![vec![0.0; q]; n])
    };
    let (l_mutual, g_mut_c, g_mut_p) = mutual_loss_with_grad(&u_c, &u_p, detach)?;
    let total = total_loss(l_center, l_pairwise, l_mutual, weights);
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite total loss".into()));
    }

    // Combine code-space gradients, then push through the network.
    let mut grads = GradientSet::zeros_like(params);
    for (i, fwd) in fwds.iter().enumerate() {
        let mut du_c = vec![0.0; q];
        let mut du_p = vec![0.0; q];
        for t in 0..q {
            if weights.center != 0.0 {
                du_c[t] += weights.center * g_center[i][t];
            }
            if weights.pairwise != 0.0 {
                du_p[t] += weights.pairwise * g_pairwise[i][t];
            }
            if weights.mutual != 0.0 {
                du_c[t] += weights.mutual * g_mut_c[i][t];
                du_p[t] += weights.mutual * g_mut_p[i][t];
            }
        }
        let mut dv = vec![0.0; params.config.feature_dim];
        branch_backward(
            params,
            Branch::Center,
            &fwd.backbone.output,
            &fwd.center,
            &du_c,
            &mut grads,
            &mut dv,
        );
        branch_backward(
            params,
            Branch::Pairwise,
            &fwd.backbone.output,
            &fwd.pairwise,
            &du_p,
            &mut grads,
            &mut dv,
        );
        backbone_backward(params, fwd, dv, &mut grads);
    }
    if let Some(name) = grads.first_non_finite(params) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in parameter array {name}"
        )));
    }
    let parts = LossParts {
        total,
        center: l_center,
        pairwise: l_pairwise,
        mutual: l_mutual,
        tau2: batch_tau2(&u_c, &u_p),
    };
    Ok((parts, grads))
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// FNV-1a over the discrete structure of a batch forward: ReLU sign masks,
/// selected expert indices, and routing fallbacks. Probes whose pattern
/// differs from the base point sample a different piecewise-smooth region,
/// so finite differences are not comparable there.
pub fn activation_pattern(fwds: &[SampleForward]) -> u64 {
    fn eat(h: &mut u64, byte: u8) {
        *h ^= byte as u64;
        *h = h.wrapping_mul(0x1000_0000_01b3);
    }
    fn eat_usize(h: &mut u64, v: usize) {
        for b in (v as u64).to_le_bytes() {
            eat(h, b);
        }
    }
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for fwd in fwds {
        for pre in &fwd.backbone.pre {
            for &z in pre {
                eat(&mut h, u8::from(z > 0.0));
            }
        }
        for br in [&fwd.center, &fwd.pairwise] {
            for &z in &br.gate.hidden_pre {
                eat(&mut h, u8::from(z > 0.0));
            }
            eat(&mut h, u8::from(br.routing.uniform_fallback));
            for &i in &br.routing.indices {
                eat_usize(&mut h, i);
            }
            for ef in &br.experts {
                for &z in &ef.hidden_pre {
                    eat(&mut h, u8::from(z > 0.0));
                }
            }
        }
    }
    h
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Max relative error per top-level parameter group.
    pub per_group: Vec<(String, f64)>,
    pub checked: usize,
    pub skipped: usize,
}

/// Central differences at eps = 1e-4 on a loss of magnitude ~5 carry a
/// rounding noise floor near 1e-11; coordinates where analytic and
/// numerical gradients are both below this cutoff are beneath the oracle's
/// resolution and count as agreeing.
pub const FD_RESOLUTION_CUTOFF: f64 = 1e-7;

/// Compare an analytic gradient against central differences of an arbitrary
/// probe. The probe returns (loss, activation pattern); coordinates whose
/// pattern at either probe point differs from the base pattern are skipped.
/// Relative error uses max(|analytic|, |fd|, 1e-8) as the denominator.
pub fn finite_diff_max_rel_error<F>(
    params: &mut ModelParams,
    analytic: &GradientSet,
    eps: f64,
    base_pattern: u64,
    mut probe: F,
) -> Result<FdReport>
where
    F: FnMut(&ModelParams) -> Result<(f64, u64)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be in (0, 1e-2], got {eps}"
        )));
    }
    let names = params.param_names();
    let grad_arrays: Vec<Vec<f64>> = analytic.arrays().iter().map(|a| (*a).clone()).collect();
    let mut per_group: Vec<(String, f64)> = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;

    for (a_idx, name) in names.iter().enumerate() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        let len = grad_arrays[a_idx].len();
        let mut group_max = 0.0f64;
        for i in 0..len {
            let orig = params.param_arrays_mut()[a_idx][i];
            params.param_arrays_mut()[a_idx][i] = orig + eps;
            let (loss_plus, pat_plus) = probe(params)?;
            params.param_arrays_mut()[a_idx][i] = orig - eps;
            let (loss_minus, pat_minus) = probe(params)?;
            params.param_arrays_mut()[a_idx][i] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                skipped += 1;
                continue;
            }
            let fd = (loss_plus - loss_minus) / (2.0 * eps);
            let g = grad_arrays[a_idx][i];
            let rel = if g.abs() <= FD_RESOLUTION_CUTOFF && fd.abs() <= FD_RESOLUTION_CUTOFF {
                0.0
            } else {
                (fd - g).abs() / g.abs().max(fd.abs()).max(1e-8)
            };
            group_max = group_max.max(rel);
            checked += 1;
        }
        max_rel = max_rel.max(group_max);
        match per_group.iter_mut().find(|(g, _)| *g == group) {
            Some((_, v)) => *v = v.max(group_max),
            None => per_group.push((group, group_max)),
        }
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        per_group,
        checked,
        skipped,
    })
}

/// Verify `backward` against central finite differences on one batch.
///
/// The probed loss freezes the detached branch's mutual-loss target at the
/// base parameters, matching the gradient semantics of detachment: the
/// analytic gradient is the derivative of exactly this function.
pub fn finite_diff_check(
    params: &mut ModelParams,
    centers: &HashCenterTable,
    inputs: &[Vec<f64>],
    labels: &[Vec<u8>],
    weights: &LossWeights,
    detach: DetachSide,
    include_diagonal_pairs: bool,
    eps: f64,
) -> Result<FdReport> {
    let (_, analytic) = backward(
        params,
        centers,
        inputs,
        labels,
        weights,
        detach,
        include_diagonal_pairs,
    )?;
    let base_fwds = forward_batch(params, inputs)?;
    let base_pattern = activation_pattern(&base_fwds);
    let frozen_target = match detach {
        DetachSide::DetachPairwise => branch_codes(&base_fwds, Branch::Pairwise),
        DetachSide::DetachCenter => branch_codes(&base_fwds, Branch::Center),
    };
    let sim = similarity_matrix(labels);
    let weights = *weights;

    let probe = |p: &ModelParams| -> Result<(f64, u64)> {
        let fwds = forward_batch(p, inputs)?;
        let u_c = branch_codes(&fwds, Branch::Center);
        let u_p = branch_codes(&fwds, Branch::Pairwise);
        let l_center = crate::objectives::center_loss(&u_c, labels, centers)?;
        let l_pairwise =
            crate::objectives::pairwise_loss(&u_p, &sim, include_diagonal_pairs)?;
        let l_mutual = match detach {
            DetachSide::DetachPairwise => crate::objectives::mutual_loss(&u_c, &frozen_target)?,
            DetachSide::DetachCenter => crate::objectives::mutual_loss(&frozen_target, &u_p)?,
        };
        let loss = total_loss(l_center, l_pairwise, l_mutual, &weights);
        Ok((loss, activation_pattern(&fwds)))
    };
    finite_diff_max_rel_error(params, &analytic, eps, base_pattern, probe)
}

// ---------------------------------------------------------------------------
// Gradient-check harness (shared by the CLI command and the acceptance suite)
// ---------------------------------------------------------------------------

/// The small instance the verification harness runs on.
pub fn gradcheck_instance(
    gate_mode: GateMode,
    seed: u64,
) -> Result<(ModelParams, HashCenterTable, Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    let config = ModelConfig {
        input_dim: 8,
        feature_dim: 8,
        code_len: 8,
        num_experts: 4,
        top_k: 2,
        backbone_depth: 1,
        gate_mode,
        shared_experts: true,
        tanh_output: true,
    };
    let params = ModelParams::init(config, seed)?;
    let num_classes = 4;
    let centers = generate_centers(num_classes, 8, CenterMethod::Hadamard, 0, seed)?;
    let mut rng = rng::rng_for(seed, 17);
    let n = 4;
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let labels: Vec<Vec<u8>> = (0..n)
        .map(|_| {
            let mut row = vec![0u8; num_classes];
            row[rng.gen_range(0..num_classes)] = 1;
            row
        })
        .collect();
    Ok((params, centers, inputs, labels))
}

#[derive(Debug, Clone)]
pub struct GradCheckCombo {
    pub seed: u64,
    pub gate_mode: GateMode,
    pub detach: DetachSide,
    pub report: FdReport,
}

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub combos: Vec<GradCheckCombo>,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Run the verification harness over every (gate mode, detach side) pair
/// for each seed. `corrupt` doubles the largest analytic gradient entry
/// first, as a sensitivity self-test of the detector.
pub fn run_gradcheck(
    seeds: &[u64],
    eps: f64,
    threshold: f64,
    corrupt: bool,
) -> Result<GradCheckOutcome> {
    let weights = LossWeights::default();
    let mut combos = Vec::new();
    let mut max_rel = 0.0f64;
    for &seed in seeds {
        for gate_mode in [GateMode::SigmoidNorm, GateMode::Softmax] {
            for detach in [DetachSide::DetachPairwise, DetachSide::DetachCenter] {
                let (mut params, centers, inputs, labels) = gradcheck_instance(gate_mode, seed)?;
                let report = if corrupt {
                    finite_diff_check_corrupted(
                        &mut params, &centers, &inputs, &labels, &weights, detach, eps,
                    )?
                } else {
                    finite_diff_check(
                        &mut params, &centers, &inputs, &labels, &weights, detach, true, eps,
                    )?
                };
                max_rel = max_rel.max(report.max_rel_error);
                combos.push(GradCheckCombo {
                    seed,
                    gate_mode,
                    detach,
                    report,
                });
            }
        }
    }
    Ok(GradCheckOutcome {
        combos,
        max_rel_error: max_rel,
        threshold,
        passed: max_rel < threshold,
    })
}

/// Like `finite_diff_check` but with the largest analytic gradient entry
/// doubled, so the comparison must fail if the detector works.
fn finite_diff_check_corrupted(
    params: &mut ModelParams,
    centers: &HashCenterTable,
    inputs: &[Vec<f64>],
    labels: &[Vec<u8>],
    weights: &LossWeights,
    detach: DetachSide,
    eps: f64,
) -> Result<FdReport> {
    let (_, mut analytic) = backward(params, centers, inputs, labels, weights, detach, true)?;
    let mut best = (0usize, 0usize, 0.0f64);
    for (a, arr) in analytic.arrays().iter().enumerate() {
        for (i, v) in arr.iter().enumerate() {
            if v.abs() > best.2 {
                best = (a, i, v.abs());
            }
        }
    }
    analytic.arrays_mut()[best.0][best.1] *= 2.0;

    let base_fwds = forward_batch(params, inputs)?;
    let base_pattern = activation_pattern(&base_fwds);
    let frozen_target = match detach {
        DetachSide::DetachPairwise => branch_codes(&base_fwds, Branch::Pairwise),
        DetachSide::DetachCenter => branch_codes(&base_fwds, Branch::Center),
    };
    let sim = similarity_matrix(labels);
    let weights = *weights;
    let probe = |p: &ModelParams| -> Result<(f64, u64)> {
        let fwds = forward_batch(p, inputs)?;
        let u_c = branch_codes(&fwds, Branch::Center);
        let u_p = branch_codes(&fwds, Branch::Pairwise);
        let l_center = crate::objectives::center_loss(&u_c, labels, centers)?;
        let l_pairwise = crate::objectives::pairwise_loss(&u_p, &sim, true)?;
        let l_mutual = match detach {
            DetachSide::DetachPairwise => crate::objectives::mutual_loss(&u_c, &frozen_target)?,
            DetachSide::DetachCenter => crate::objectives::mutual_loss(&frozen_target, &u_p)?,
        };
        Ok((
            total_loss(l_center, l_pairwise, l_mutual, &weights),
            activation_pattern(&fwds),
        ))
    };
    finite_diff_max_rel_error(params, &analytic, eps, base_pattern, probe)
}

// ---------------------------------------------------------------------------
// RMSProp
// ---------------------------------------------------------------------------

/// Uncentered RMSProp without momentum:
/// v <- a*v + (1-a)*g^2;  theta <- theta - lr * g / (sqrt(v) + eps).
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    accum: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64, params: &ModelParams) -> Self {
        RmsProp {
            learning_rate,
            decay,
            epsilon,
            accum: params
                .param_arrays()
                .iter()
                .map(|a| vec![0.0; a.len()])
                .collect(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accum
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientSet) -> Result<()> {
        let garr = grads.arrays();
        let mut parr = params.param_arrays_mut();
        if garr.len() != parr.len() || garr.len() != self.accum.len() {
            return Err(Error::Shape(
                "optimizer state does not match parameter layout".into(),
            ));
        }
        for ((theta, g), v) in parr.iter_mut().zip(&garr).zip(&mut self.accum) {
            if theta.len() != g.len() || theta.len() != v.len() {
                return Err(Error::Shape("gradient array length mismatch".into()));
            }
            for i in 0..theta.len() {
                v[i] = self.decay * v[i] + (1.0 - self.decay) * g[i] * g[i];
                theta[i] -= self.learning_rate * g[i] / (v[i].sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetachSchedule {
    PerEpoch,
    PerIteration,
}

impl DetachSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_epoch" => Ok(DetachSchedule::PerEpoch),
            "per_iteration" => Ok(DetachSchedule::PerIteration),
            other => Err(Error::InvalidArgument(format!(
                "unknown detach schedule '{other}' (expected per_epoch|per_iteration)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DetachSchedule::PerEpoch => "per_epoch",
            DetachSchedule::PerIteration => "per_iteration",
        }
    }
}

/// Detach side for a training step; `epoch` and `iteration` are 1-based.
/// Even step index detaches the pairwise code.
pub fn detach_for_step(schedule: DetachSchedule, epoch: usize, iteration: usize) -> DetachSide {
    let t = match schedule {
        DetachSchedule::PerEpoch => epoch,
        DetachSchedule::PerIteration => iteration,
    };
    if t % 2 == 0 {
        DetachSide::DetachPairwise
    } else {
        DetachSide::DetachCenter
    }
}

/// Split parameters carried into the checkpoint so evaluation can rebuild
/// the training-time split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub seen_ratio: f64,
    pub query_frac: f64,
    pub train_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seen_ratio: 0.75,
            query_frac: 0.2,
            train_frac: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub detach_schedule: DetachSchedule,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub include_diagonal_pairs: bool,
    pub seed: u64,
    pub model: ModelConfig,
    pub center_method: CenterMethod,
    /// Minimum pairwise distance demanded from random centers;
    /// `None` means ceil(q/4).
    pub center_d_floor: Option<usize>,
    pub split: SplitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            weights: LossWeights::default(),
            detach_schedule: DetachSchedule::PerEpoch,
            learning_rate: 1e-4,
            decay: 0.99,
            epsilon: 1e-8,
            include_diagonal_pairs: true,
            seed: 1,
            model: ModelConfig::default(),
            center_method: CenterMethod::Auto,
            center_d_floor: None,
            split: SplitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be >= 2 (pairwise loss needs pairs)".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.decay >= 0.0 && self.decay < 1.0) {
            return Err(Error::Config("decay must be in [0, 1)".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        Ok(())
    }

    pub fn effective_d_floor(&self) -> usize {
        self.center_d_floor
            .unwrap_or_else(|| self.model.code_len.div_ceil(4))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_center: f64,
    pub loss_pairwise: f64,
    pub loss_mutual: f64,
    pub tau2: f64,
    pub detach_side: String,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,loss_center,loss_pairwise,loss_mutual,tau2,detach_side";

pub fn train_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.loss, r.loss_center, r.loss_pairwise, r.loss_mutual, r.tau2, r.detach_side
        ));
    }
    out
}

/// Trained model state: everything evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub centers: HashCenterTable,
}

/// Run the full training loop over the split's training pool.
pub fn train(
    config: &TrainConfig,
    ds: &Dataset,
    split: &SplitDataset,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    config.validate()?;
    if ds.feature_dim != config.model.input_dim {
        return Err(Error::Config(format!(
            "dataset feature dimension {} does not match model input dimension {}",
            ds.feature_dim, config.model.input_dim
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Config("training pool is empty".into()));
    }
    let centers = generate_centers(
        ds.num_classes,
        config.model.code_len,
        config.center_method,
        config.effective_d_floor(),
        config.seed,
    )?;
    let mut params = ModelParams::init(config.model, config.seed)?;
    let mut optimizer = RmsProp::new(
        config.learning_rate,
        config.decay,
        config.epsilon,
        &params,
    );

    let by_id = ds.id_index();
    let mut records = Vec::with_capacity(config.epochs);
    let mut iteration = 0usize;
    for epoch in 1..=config.epochs {
        let mut order = split.train.clone();
        rng::shuffle(
            &mut order,
            &mut rng::rng_for(config.seed, rng::STREAM_EPOCH_BASE + epoch as u64),
        );
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // loss, center, pairwise, mutual, tau2
        let mut weight_total = 0.0;
        let mut epoch_sides: Vec<DetachSide> = Vec::new();
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // a trailing singleton cannot form pairs
            }
            iteration += 1;
            let detach = detach_for_step(config.detach_schedule, epoch, iteration);
            epoch_sides.push(detach);
            let inputs: Vec<Vec<f64>> = chunk
                .iter()
                .map(|id| ds.samples[by_id[id]].features_f64())
                .collect();
            let labels: Vec<Vec<u8>> = chunk
                .iter()
                .map(|id| ds.samples[by_id[id]].labels.clone())
                .collect();
            let coords = |e: Error| {
                Error::Numeric(format!(
                    "epoch {epoch} batch {}: {e}",
                    batch_idx + 1
                ))
            };
            let (parts, grads) = backward(
                &params,
                &centers,
                &inputs,
                &labels,
                &config.weights,
                detach,
                config.include_diagonal_pairs,
            )
            .map_err(coords)?;
            optimizer.step(&mut params, &grads).map_err(coords)?;
            let w = chunk.len() as f64;
            sums.0 += w * parts.total;
            sums.1 += w * parts.center;
            sums.2 += w * parts.pairwise;
            sums.3 += w * parts.mutual;
            sums.4 += w * parts.tau2;
            weight_total += w;
        }
        if weight_total == 0.0 {
            return Err(Error::Config(format!(
                "epoch {epoch} produced no usable batches (training pool of {} samples)",
                split.train.len()
            )));
        }
        let side = match config.detach_schedule {
            DetachSchedule::PerEpoch => epoch_sides[0].as_str().to_string(),
            DetachSchedule::PerIteration => "alternating".to_string(),
        };
        records.push(EpochRecord {
            epoch,
            loss: sums.0 / weight_total,
            loss_center: sums.1 / weight_total,
            loss_pairwise: sums.2 / weight_total,
            loss_mutual: sums.3 / weight_total,
            tau2: sums.4 / weight_total,
            detach_side: side,
        });
    }
    Ok((
        Checkpoint {
            config: config.clone(),
            params,
            centers,
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split_seen_unseen, SplitOptions};

    fn fixture(
        gate_mode: GateMode,
        seed: u64,
    ) -> (ModelParams, HashCenterTable, Vec<Vec<f64>>, Vec<Vec<u8>>) {
        gradcheck_instance(gate_mode, seed).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let (params, centers, inputs, labels) = fixture(GateMode::SigmoidNorm, 1);
        let weights = LossWeights::new(0.0, 0.0, 0.0).unwrap();
        let (parts, grads) = backward(
            &params,

            &centers,
            &inputs,
            &labels,
            &weights,
            DetachSide::DetachPairwise,
            true,
        )
        .unwrap();
        assert_eq!(parts.total, 0.0);
        for arr in grads.arrays() {
            assert!(arr.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn detached_gate_receives_exactly_zero_gradient() {
        let (params, centers, inputs, labels) = fixture(GateMode::SigmoidNorm, 2);
        let only_mutual = LossWeights::new(0.0, 0.0, 1.0).unwrap();
        let (_, grads) = backward(
            &params,
            &centers,
            &inputs,
            &labels,
            &only_mutual,
            DetachSide::DetachPairwise,
            true,
        )
        .unwrap();
        for arr in [&grads.gate_p.l1.w, &grads.gate_p.l1.b, &grads.gate_p.l2.w, &grads.gate_p.l2.b]
        {
            assert!(arr.iter().all(|v| *v == 0.0));
        }
        assert!(grads.gate_c.l2.w.iter().any(|v| *v != 0.0));

        let (_, grads) = backward(
            &params,
            &centers,
            &inputs,
            &labels,
            &only_mutual,
            DetachSide::DetachCenter,
            true,
        )
        .unwrap();
        for arr in [&grads.gate_c.l1.w, &grads.gate_c.l1.b, &grads.gate_c.l2.w, &grads.gate_c.l2.b]
        {
            assert!(arr.iter().all(|v| *v == 0.0));
        }
        assert!(grads.gate_p.l2.w.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn non_selected_experts_get_zero_gradient() {
        let (params, centers, inputs, labels) = fixture(GateMode::SigmoidNorm, 3);
        let (_, grads) = backward(
            &params,
            &centers,
            &inputs,
            &labels,
            &LossWeights::default(),
            DetachSide::DetachCenter,
            true,
        )
        .unwrap();
        let fwds = forward_batch(&params, &inputs).unwrap();
        let mut selected = vec![false; params.experts.len()];
        for fwd in &fwds {
            for (branch, bf) in [(Branch::Center, &fwd.center), (Branch::Pairwise, &fwd.pairwise)]
            {
                for &i in &bf.routing.indices {
                    selected[params.expert_slot(branch, i)] = true;
                }
            }
        }
        for (slot, egrad) in grads.experts.iter().enumerate() {
            let all_zero = egrad.l1.w.iter().chain(&egrad.l1.b).chain(&egrad.l2.w).chain(&egrad.l2.b)
                .all(|v| *v == 0.0);
            if !selected[slot] {
                assert!(all_zero, "non-selected expert {slot} has gradient");
            }
        }
    }

    #[test]
    fn quadratic_probe_is_exact_for_central_differences() {
        let (mut params, _, _, _) = fixture(GateMode::SigmoidNorm, 4);
        // loss = sum (theta - target)^2 with target = theta0 + 1, so the
        // gradient is -2 at the base point everywhere. Central differences
        // are exact for quadratics up to rounding.
        let targets: Vec<Vec<f64>> = params
            .param_arrays()
            .iter()
            .map(|a| a.iter().map(|v| v + 1.0).collect())
            .collect();
        let mut analytic = GradientSet::zeros_like(&params);
        for g in analytic.arrays_mut() {
            for gi in g.iter_mut() {
                *gi = -2.0;
            }
        }
        let report = finite_diff_max_rel_error(&mut params, &analytic, 1e-4, 0, |p| {
            let loss: f64 = p
                .param_arrays()
                .iter()
                .zip(&targets)
                .map(|(a, t)| a.iter().zip(t).map(|(v, c)| (v - c) * (v - c)).sum::<f64>())
                .sum();
            Ok((loss, 0))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "rel {}", report.max_rel_error);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let (mut params, centers, inputs, labels) = fixture(GateMode::SigmoidNorm, 5);
        let report = finite_diff_check(
            &mut params,
            &centers,
            &inputs,
            &labels,
            &LossWeights::default(),
            DetachSide::DetachCenter,
            true,
            1e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
        assert!(report.checked > 500);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let out = run_gradcheck(&[6], 1e-4, 1e-4, true).unwrap();
        assert!(!out.passed);
        assert!(out.max_rel_error > 0.3, "rel {}", out.max_rel_error);
    }

    #[test]
    fn rmsprop_zero_gradient_only_decays_state() {
        let (mut params, _, _, _) = fixture(GateMode::SigmoidNorm, 7);
        let before = params.clone();
        let mut opt = RmsProp::new(1e-4, 0.99, 1e-8, &params);
        // Seed the accumulators, then apply a zero gradient.
        let mut grads = GradientSet::zeros_like(&params);
        for arr in grads.arrays_mut() {
            for v in arr.iter_mut() {
                *v = 1.0;
            }
        }
        opt.step(&mut params, &grads).unwrap();
        let acc_after_one: Vec<Vec<f64>> = opt.accumulators().to_vec();
        let zero = GradientSet::zeros_like(&params);
        let snapshot = params.clone();
        opt.step(&mut params, &zero).unwrap();
        assert_eq!(params, snapshot);
        for (a, b) in opt.accumulators().iter().zip(&acc_after_one) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - 0.99 * y).abs() < 1e-15);
            }
        }
        drop(before);
    }

    #[test]
    fn rmsprop_single_step_closed_form() {
        let config = ModelConfig {
            input_dim: 1,
            feature_dim: 1,
            code_len: 1,
            num_experts: 1,
            top_k: 1,
            backbone_depth: 1,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(config, 1).unwrap();
        // Zero everything, then push gradient 1 into a single coordinate.
        for arr in params.param_arrays_mut() {
            for v in arr.iter_mut() {
                *v = 0.0;
            }
        }
        let mut grads = GradientSet::zeros_like(&params);
        grads.backbone[0].w[0] = 1.0;
        let mut opt = RmsProp::new(1e-4, 0.99, 1e-8, &params);
        opt.step(&mut params, &grads).unwrap();
        let v: f64 = 0.01; // (1-0.99)*1^2
        let expect = -1e-4 / (v.sqrt() + 1e-8);
        assert!((params.backbone[0].w[0] - expect).abs() < 1e-18);
        assert!((expect + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn rmsprop_is_stateful_not_a_doubled_step() {
        let config = ModelConfig {
            input_dim: 2,
            feature_dim: 2,
            code_len: 2,
            num_experts: 1,
            top_k: 1,
            backbone_depth: 1,
            ..ModelConfig::default()
        };
        let base = ModelParams::init(config, 9).unwrap();
        let mut grads = GradientSet::zeros_like(&base);
        for arr in grads.arrays_mut() {
            for (i, v) in arr.iter_mut().enumerate() {
                *v = 0.3 + 0.1 * i as f64;
            }
        }
        let mut two_steps = base.clone();
        let mut opt = RmsProp::new(1e-4, 0.99, 1e-8, &two_steps);
        opt.step(&mut two_steps, &grads).unwrap();
        opt.step(&mut two_steps, &grads).unwrap();

        let mut doubled = base.clone();
        let mut opt2 = RmsProp::new(2e-4, 0.99, 1e-8, &doubled);
        opt2.step(&mut doubled, &grads).unwrap();
        assert_ne!(two_steps, doubled);
    }

    #[test]
    fn detach_parity_follows_step_index() {
        assert_eq!(
            detach_for_step(DetachSchedule::PerEpoch, 2, 99),
            DetachSide::DetachPairwise
        );
        assert_eq!(
            detach_for_step(DetachSchedule::PerEpoch, 1, 99),
            DetachSide::DetachCenter
        );
        assert_eq!(
            detach_for_step(DetachSchedule::PerIteration, 9, 4),
            DetachSide::DetachPairwise
        );
        assert_eq!(
            detach_for_step(DetachSchedule::PerIteration, 9, 3),
            DetachSide::DetachCenter
        );
    }

    fn small_train_setup() -> (TrainConfig, Dataset, SplitDataset) {
        let ds = generate_synthetic(4, 8, 30, 0.3, 11).unwrap();
        let split = split_seen_unseen(&ds, 0.75, 11, SplitOptions::default()).unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 11,
            model: ModelConfig {
                input_dim: 8,
                feature_dim: 8,
                code_len: 8,
                num_experts: 4,
                top_k: 2,
                backbone_depth: 1,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        (config, ds, split)
    }

    #[test]
    fn zero_weight_training_leaves_parameters_unchanged() {
        let (mut config, ds, split) = small_train_setup();
        config.weights = LossWeights::new(0.0, 0.0, 0.0).unwrap();
        let initial = ModelParams::init(config.model, config.seed).unwrap();
        let (ckpt, _) = train(&config, &ds, &split).unwrap();
        assert_eq!(ckpt.params, initial);
    }

    #[test]
    fn training_is_deterministic_and_logs_parity() {
        let (config, ds, split) = small_train_setup();
        let (ckpt_a, log_a) = train(&config, &ds, &split).unwrap();
        let (ckpt_b, log_b) = train(&config, &ds, &split).unwrap();
        assert_eq!(ckpt_a, ckpt_b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a[0].detach_side, "detach_center"); // epoch 1 is odd
        assert_eq!(log_a[1].detach_side, "detach_pairwise");
        assert_eq!(log_a.len(), config.epochs);
    }

    #[test]
    fn centers_are_unchanged_by_training() {
        let (config, ds, split) = small_train_setup();
        let expect = generate_centers(
            ds.num_classes,
            config.model.code_len,
            config.center_method,
            config.effective_d_floor(),
            config.seed,
        )
        .unwrap();
        let (ckpt, _) = train(&config, &ds, &split).unwrap();
        assert_eq!(ckpt.centers, expect);
    }

    #[test]
    fn loss_descends_on_separable_data() {
        let (mut config, ds, split) = small_train_setup();
        config.epochs = 30;
        let (_, log) = train(&config, &ds, &split).unwrap();
        assert!(
            log[29].loss < log[0].loss,
            "epoch30 {} !< epoch1 {}",
            log[29].loss,
            log[0].loss
        );
    }

    #[test]
    fn numeric_blowup_reports_epoch_and_batch() {
        let (mut config, ds, split) = small_train_setup();
        config.learning_rate = 1e300;
        match train(&config, &ds, &split) {
            Err(Error::Numeric(msg)) => {
                assert!(msg.contains("epoch"), "msg: {msg}");
            }
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }
}

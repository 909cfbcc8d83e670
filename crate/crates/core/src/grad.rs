//! Backpropagation through time for both cell kinds, and the central
//! finite-difference oracle used to check it.

use thiserror::Error;

use crate::cells::{stack_forward, CellError, CellParams, ForwardPass, LayerState, Network, StepCache};
use crate::math::{roll_into, RealMat};
use crate::optim::{abs_mean_penalty, argmax, sign, softmax_xent, weight_penalty, OptimError, RegConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("sequence {index}: {inputs} inputs, {targets} targets, {mask} mask entries")]
    LengthMismatch {
        index: usize,
        inputs: usize,
        targets: usize,
        mask: usize,
    },
    #[error("batch sequences must share one length: sequence {index} has {len}, expected {expected}")]
    UnequalLengths {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Loss(#[from] OptimError),
}

/// Per-timestep loss weights, usually 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMask(pub Vec<f64>);

impl LossMask {
    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    /// Only the final `k` steps count.
    pub fn tail(len: usize, k: usize) -> Self {
        let mut m = vec![0.0; len];
        m[len.saturating_sub(k)..].iter_mut().for_each(|v| *v = 1.0);
        Self(m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One supervised sequence. `targets[t]` is ignored where the mask is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub mask: LossMask,
}

/// Gradients of every parameter (as a network-shaped value) plus the
/// gradient with respect to each sequence's initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Network,
    pub initial: Vec<Vec<LayerState>>,
}

/// Components of the scalar objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Task cross-entropy averaged over masked-in steps and batch (nats).
    pub task: f64,
    pub cell_penalty: f64,
    pub weight_penalty: f64,
    pub total: f64,
    /// Sum of mask weights across the batch.
    pub mask_weight: f64,
    /// Sum of mask-weighted cross-entropy (nats), before averaging.
    pub task_nats: f64,
    /// Mean of |c| over every timestep, layer, sequence and cell.
    pub mean_abs_cell: f64,
    /// Sequences whose every masked-in step has the target as argmax.
    pub correct_sequences: usize,
    pub correct_steps: usize,
    pub masked_steps: usize,
}

/// Adjoint outputs of a single step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAdjoint {
    pub d_x: Vec<f64>,
    pub d_y_prev: Vec<f64>,
    pub d_c_prev: Vec<f64>,
}

fn accumulate_dense(w: &mut RealMat, b: &mut [f64], d_pre: &[f64], xh: &[f64]) {
    w.add_outer(d_pre, xh);
    for (bi, di) in b.iter_mut().zip(d_pre) {
        *bi += di;
    }
}

/// Reverse-mode derivative of one forward step. `d_y` is the gradient
/// arriving at `y_t`, `d_c_in` the gradient arriving at `c_t` from later
/// timesteps and penalties. Parameter gradients are added into `grads`.
pub fn step_backward(
    cache: &StepCache,
    p: &CellParams,
    d_y: &[f64],
    d_c_in: &[f64],
    grads: &mut CellParams,
) -> Result<StepAdjoint, CellError> {
    let n = p.width;
    for (what, len) in [("d_y", d_y.len()), ("d_c", d_c_in.len()), ("cached memory", cache.c.len())] {
        if len != n {
            return Err(CellError::Dimension {
                what,
                expected: n,
                actual: len,
            });
        }
    }
    let f = p.activation;

    let mut d_out_pre = vec![0.0; n];
    let mut d_c = vec![0.0; n];
    for j in 0..n {
        let g = cache.out_gate[j];
        d_out_pre[j] = d_y[j] * cache.fc[j] * g * (1.0 - g);
        d_c[j] = d_c_in[j] + d_y[j] * g * f.deriv(cache.c[j]);
    }

    let mut d_cand_pre = vec![0.0; n];
    let mut d_in_pre = vec![0.0; n];
    let mut d_mem_pre = vec![0.0; n];
    let mut d_c_prev = vec![0.0; n];
    for j in 0..n {
        let gi = cache.in_gate[j];
        d_in_pre[j] = d_c[j] * cache.cand[j] * gi * (1.0 - gi);
        d_cand_pre[j] = d_c[j] * gi * f.deriv(cache.cand_pre[j]);
    }

    match (&cache.inner, &p.inner) {
        (None, _) => {
            for j in 0..n {
                let gf = cache.mem_gate[j];
                d_mem_pre[j] = d_c[j] * cache.c_prev[j] * gf * (1.0 - gf);
                d_c_prev[j] = d_c[j] * gf;
            }
        }
        (Some(ic), Some(inner)) => {
            let gi = grads.inner.as_mut().ok_or_else(|| {
                CellError::InvalidSpec("gradient buffer lacks an inner layer".into())
            })?;
            let mut d_pre = vec![0.0; n];
            for j in 0..n {
                let gs = cache.mem_gate[j];
                // r = gs*c_prev + (1-gs)*i
                d_mem_pre[j] = d_c[j] * (cache.c_prev[j] - ic.out[j]) * gs * (1.0 - gs);
                d_c_prev[j] = d_c[j] * gs;
                d_pre[j] = d_c[j] * (1.0 - gs) * f.deriv(ic.pre[j]);
                gi.w_self[j] += d_pre[j] * cache.c_prev[j];
                gi.w_left[j] += d_pre[j] * ic.c_left[j];
                gi.w_right[j] += d_pre[j] * ic.c_right[j];
                gi.bias[j] += d_pre[j];
                d_c_prev[j] += d_pre[j] * inner.w_self[j];
            }
            // c_left = roll(c_prev, -1) and c_right = roll(c_prev, 1); the
            // adjoint of roll(., k) is roll(., -k).
            let d_left: Vec<f64> = (0..n).map(|j| d_pre[j] * inner.w_left[j]).collect();
            let d_right: Vec<f64> = (0..n).map(|j| d_pre[j] * inner.w_right[j]).collect();
            let mut back = vec![0.0; n];
            if n > 1 {
                roll_into(&d_left, 1, &mut back).expect("width > 1");
                d_c_prev.iter_mut().zip(&back).for_each(|(d, b)| *d += b);
                roll_into(&d_right, -1, &mut back).expect("width > 1");
                d_c_prev.iter_mut().zip(&back).for_each(|(d, b)| *d += b);
            } else {
                d_c_prev[0] += d_left[0] + d_right[0];
            }
        }
        (Some(_), None) => {
            return Err(CellError::InvalidSpec(
                "LSTWM cache with LSTM parameters".into(),
            ))
        }
    }

    let xh = &cache.xh;
    accumulate_dense(&mut grads.candidate.w, &mut grads.candidate.b, &d_cand_pre, xh);
    accumulate_dense(&mut grads.input_gate.w, &mut grads.input_gate.b, &d_in_pre, xh);
    accumulate_dense(&mut grads.output_gate.w, &mut grads.output_gate.b, &d_out_pre, xh);
    accumulate_dense(&mut grads.memory_gate.w, &mut grads.memory_gate.b, &d_mem_pre, xh);

    let mut d_xh = vec![0.0; xh.len()];
    p.candidate.w.add_transpose_mul(&d_cand_pre, &mut d_xh);
    p.input_gate.w.add_transpose_mul(&d_in_pre, &mut d_xh);
    p.output_gate.w.add_transpose_mul(&d_out_pre, &mut d_xh);
    p.memory_gate.w.add_transpose_mul(&d_mem_pre, &mut d_xh);
    let d_y_prev = d_xh.split_off(p.input_width);
    Ok(StepAdjoint {
        d_x: d_xh,
        d_y_prev,
        d_c_prev,
    })
}

fn validate_batch(batch: &[Sequence]) -> Result<usize, GradError> {
    let first = batch.first().ok_or(GradError::EmptyBatch)?;
    let len = first.inputs.len();
    for (index, s) in batch.iter().enumerate() {
        if s.targets.len() != s.inputs.len() || s.mask.len() != s.inputs.len() {
            return Err(GradError::LengthMismatch {
                index,
                inputs: s.inputs.len(),
                targets: s.targets.len(),
                mask: s.mask.len(),
            });
        }
        if s.inputs.len() != len {
            return Err(GradError::UnequalLengths {
                index,
                len: s.inputs.len(),
                expected: len,
            });
        }
    }
    if len == 0 {
        return Err(CellError::EmptySequence.into());
    }
    Ok(len)
}

/// `abs_sums[t][l] = Σ_j |c_{t,l,j}|` for one pass.
fn accumulate_abs_sums(pass: &ForwardPass, abs_sums: &mut [Vec<f64>]) {
    for (t, per_layer) in pass.caches.iter().enumerate() {
        for (l, cache) in per_layer.iter().enumerate() {
            abs_sums[t][l] += cache.c.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
}

struct PenaltyField {
    value: f64,
    /// `∂penalty/∂|c|` for one cell at `[t][l]`.
    slope: Vec<Vec<f64>>,
    mean_abs: f64,
}

/// Pools mean |c| over the batch and the layer width at each timestep, applies
/// `η(m² + m)`, sums over timesteps and layers.
fn cell_penalty_field(abs_sums: &[Vec<f64>], widths: &[usize], batch: usize, eta: f64) -> PenaltyField {
    let mut value = 0.0;
    let mut total_abs = 0.0;
    let mut slope = Vec::with_capacity(abs_sums.len());
    for row in abs_sums {
        let mut s = Vec::with_capacity(row.len());
        for (l, &sum) in row.iter().enumerate() {
            let count = (batch * widths[l]) as f64;
            let (v, dm) = abs_mean_penalty(sum / count, eta);
            value += v;
            total_abs += sum;
            s.push(dm / count);
        }
        slope.push(s);
    }
    let cells = (abs_sums.len() * batch * widths.iter().sum::<usize>()) as f64;
    PenaltyField {
        value,
        slope,
        mean_abs: total_abs / cells,
    }
}

/// Masked task loss of one forward pass: (Σ mask·CE, correct sequence?, correct steps, masked steps).
fn task_terms(pass: &ForwardPass, seq: &Sequence) -> Result<(f64, bool, usize, usize), GradError> {
    let mut nats = 0.0;
    let mut all_correct = true;
    let mut correct = 0;
    let mut masked = 0;
    for (t, logits) in pass.logits.iter().enumerate() {
        let w = seq.mask.0[t];
        if w == 0.0 {
            continue;
        }
        let (ce, _) = softmax_xent(logits, seq.targets[t])?;
        nats += w * ce;
        masked += 1;
        if argmax(logits) == seq.targets[t] {
            correct += 1;
        } else {
            all_correct = false;
        }
    }
    Ok((nats, all_correct && masked > 0, correct, masked))
}

/// Caches above this size are recomputed per sequence instead of held for the
/// whole batch.
const CACHE_BUDGET_BYTES: usize = 384 << 20;

fn cache_bytes(net: &Network, len: usize, batch: usize) -> usize {
    let per_step: usize = net
        .layers
        .iter()
        .map(|l| l.input_width + 20 * l.width)
        .sum();
    per_step * len * batch * std::mem::size_of::<f64>()
}

/// Scalar objective and its exact gradient over a batch:
/// `mean masked CE + Σ_t Σ_l η(m² + m) + weight penalty`, with `m` the
/// mean |c| pooled over batch and width at each step. Full-length BPTT,
/// no clipping. Sequences are processed in order, so the reduction is
/// deterministic.
pub fn bptt(net: &Network, batch: &[Sequence], reg: RegConfig) -> Result<(LossBreakdown, Gradients), GradError> {
    let len = validate_batch(batch)?;
    let widths: Vec<usize> = net.layers.iter().map(|l| l.width).collect();
    let keep = cache_bytes(net, len, batch.len()) <= CACHE_BUDGET_BYTES;

    let mut abs_sums = vec![vec![0.0; widths.len()]; len];
    let mut kept = Vec::new();
    let mut out = LossBreakdown::default();
    for seq in batch {
        let pass = stack_forward(net, &seq.inputs, &net.initial_states())?;
        accumulate_abs_sums(&pass, &mut abs_sums);
        let (nats, ok, correct, masked) = task_terms(&pass, seq)?;
        out.task_nats += nats;
        out.correct_sequences += ok as usize;
        out.correct_steps += correct;
        out.masked_steps += masked;
        if keep {
            kept.push(pass);
        }
    }
    out.mask_weight = batch.iter().map(|s| s.mask.0.iter().sum::<f64>()).sum();
    let field = cell_penalty_field(&abs_sums, &widths, batch.len(), reg.eta);
    out.cell_penalty = field.value;
    out.mean_abs_cell = field.mean_abs;
    out.task = if out.mask_weight > 0.0 {
        out.task_nats / out.mask_weight
    } else {
        0.0
    };

    let (wp, mut grads) = weight_penalty(net, reg.eta_w);
    out.weight_penalty = wp;
    out.total = out.task + out.cell_penalty + out.weight_penalty;

    let mut initial = Vec::with_capacity(batch.len());
    let mut kept = kept.into_iter();
    for seq in batch {
        let pass = match kept.next() {
            Some(p) => p,
            None => stack_forward(net, &seq.inputs, &net.initial_states())?,
        };
        initial.push(backward_sequence(net, &pass, seq, &field, reg.eta, out.mask_weight, &mut grads)?);
    }
    Ok((
        out,
        Gradients {
            params: grads,
            initial,
        },
    ))
}

fn backward_sequence(
    net: &Network,
    pass: &ForwardPass,
    seq: &Sequence,
    field: &PenaltyField,
    eta: f64,
    mask_weight: f64,
    grads: &mut Network,
) -> Result<Vec<LayerState>, GradError> {
    let depth = net.layers.len();
    let mut d_y_next: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.width]).collect();
    let mut d_c_next = d_y_next.clone();
    let top_width = net.layers[depth - 1].width;

    for t in (0..pass.logits.len()).rev() {
        let caches = &pass.caches[t];
        let mut d_from_above = vec![0.0; top_width];
        let w = seq.mask.0[t];
        if w != 0.0 && mask_weight > 0.0 {
            let (_, mut d_logits) = softmax_xent(&pass.logits[t], seq.targets[t])?;
            let scale = w / mask_weight;
            d_logits.iter_mut().for_each(|d| *d *= scale);
            let top_y = &caches[depth - 1].y;
            grads.readout.w.add_outer(&d_logits, top_y);
            grads.readout.b.iter_mut().zip(&d_logits).for_each(|(b, d)| *b += d);
            net.readout.w.add_transpose_mul(&d_logits, &mut d_from_above);
        }
        for l in (0..depth).rev() {
            let cache = &caches[l];
            let d_y: Vec<f64> = d_from_above.iter().zip(&d_y_next[l]).map(|(a, b)| a + b).collect();
            let mut d_c = std::mem::take(&mut d_c_next[l]);
            if eta != 0.0 {
                let slope = field.slope[t][l];
                d_c.iter_mut().zip(&cache.c).for_each(|(d, &c)| *d += slope * sign(c));
            }
            let adj = step_backward(cache, &net.layers[l], &d_y, &d_c, &mut grads.layers[l])?;
            d_y_next[l] = adj.d_y_prev;
            d_c_next[l] = adj.d_c_prev;
            d_from_above = adj.d_x;
        }
    }
    Ok(d_c_next
        .into_iter()
        .zip(d_y_next)
        .map(|(c, y)| LayerState { c, y })
        .collect())
}

/// The same scalar objective as [`bptt`], computed by forward passes only.
pub fn objective(net: &Network, batch: &[Sequence], reg: RegConfig) -> Result<f64, GradError> {
    let len = validate_batch(batch)?;
    let widths: Vec<usize> = net.layers.iter().map(|l| l.width).collect();
    let mut abs_sums = vec![vec![0.0; widths.len()]; len];
    let mut nats = 0.0;
    let mut mask_weight = 0.0;
    for seq in batch {
        let pass = stack_forward(net, &seq.inputs, &net.initial_states())?;
        accumulate_abs_sums(&pass, &mut abs_sums);
        nats += task_terms(&pass, seq)?.0;
        mask_weight += seq.mask.0.iter().sum::<f64>();
    }
    let task = if mask_weight > 0.0 { nats / mask_weight } else { 0.0 };
    let cells = cell_penalty_field(&abs_sums, &widths, batch.len(), reg.eta).value;
    Ok(task + cells + weight_penalty(net, reg.eta_w).0)
}

/// `|a − b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Central differences `(f(x+ε) − f(x−ε)) / 2ε` for every coordinate of `x`.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates probed per tensor, evenly spaced. `None` checks all.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Worst error per tensor, in tensor order.
    pub per_tensor: Vec<(String, f64)>,
}

/// Compares [`bptt`] gradients against central differences of
/// [`objective`] on every tensor of `net`.
pub fn finite_diff_check(
    net: &Network,
    batch: &[Sequence],
    reg: RegConfig,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, GradError> {
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(GradError::InvalidEpsilon(opts.epsilon));
    }
    let (_, grads) = bptt(net, batch, reg)?;
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        per_tensor: Vec::new(),
    };
    let analytic: Vec<(String, Vec<f64>)> = grads
        .params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.values.to_vec()))
        .collect();
    for (k, (name, an)) in analytic.iter().enumerate() {
        let len = an.len();
        let picks: Vec<usize> = match opts.max_coords_per_tensor {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for i in picks {
            let orig = probe.tensors()[k].values[i];
            probe.tensors_mut()[k].values[i] = orig + opts.epsilon;
            let up = objective(&probe, batch, reg)?;
            probe.tensors_mut()[k].values[i] = orig - opts.epsilon;
            let down = objective(&probe, batch, reg)?;
            probe.tensors_mut()[k].values[i] = orig;
            let numeric = (up - down) / (2.0 * opts.epsilon);
            let err = relative_error(an[i], numeric);
            report.coords_checked += 1;
            worst = worst.max(err);
            if err > report.max_rel_error || report.worst_tensor.is_empty() {
                report.max_rel_error = err;
                report.worst_tensor = name.clone();
                report.worst_index = i;
                report.analytic = an[i];
                report.numeric = numeric;
            }
        }
        report.per_tensor.push((name.clone(), worst));
    }
    Ok(report)
}

/// Random problem for gradient checks: a network with every tensor (biases and
/// inner layer included) moved off its initial value, and `batch` random
/// sequences with a random loss mask that always includes the final step.
pub fn random_check_problem(
    spec: &crate::cells::NetworkSpec,
    len: usize,
    batch: usize,
    seed: u64,
) -> Result<(Network, Vec<Sequence>), GradError> {
    let mut rng = crate::math::SeededRng::new(seed);
    let mut net = Network::init(spec, &mut rng)?;
    for t in net.tensors_mut() {
        t.values.iter_mut().for_each(|v| *v += rng.uniform_range(-0.5, 0.5));
    }
    let seqs = (0..batch)
        .map(|_| {
            let inputs = (0..len)
                .map(|_| (0..spec.input_width).map(|_| rng.uniform_range(-2.0, 2.0)).collect())
                .collect();
            let targets = (0..len).map(|_| rng.below(spec.output_width)).collect();
            let mut mask: Vec<f64> = (0..len).map(|_| (rng.below(3) > 0) as u8 as f64).collect();
            if let Some(last) = mask.last_mut() {
                *last = 1.0;
            }
            Sequence {
                inputs,
                targets,
                mask: LossMask(mask),
            }
        })
        .collect();
    Ok((net, seqs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{step, CellKind, NetworkSpec};
    use crate::math::{ActivationKind, SeededRng};

    fn random_net(kind: CellKind, act: ActivationKind, widths: &[usize], input: usize, out: usize, seed: u64) -> Network {
        let spec = NetworkSpec::uniform(input, kind, widths, act, out);
        let mut rng = SeededRng::new(seed);
        let mut net = Network::init(&spec, &mut rng).unwrap();
        // Move every tensor, biases and inner layer included, off its initial value.
        for t in net.tensors_mut() {
            t.values.iter_mut().for_each(|v| *v += rng.uniform_range(-0.5, 0.5));
        }
        net
    }

    fn random_batch(input: usize, classes: usize, len: usize, n: usize, seed: u64) -> Vec<Sequence> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| Sequence {
                inputs: (0..len)
                    .map(|_| (0..input).map(|_| rng.uniform_range(-2.0, 2.0)).collect())
                    .collect(),
                targets: (0..len).map(|_| rng.below(classes)).collect(),
                mask: LossMask((0..len).map(|_| (rng.below(3) > 0) as u8 as f64).collect()),
            })
            .collect()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = random_net(CellKind::Lstwm, ActivationKind::LogAct, &[3], 2, 2, 1);
        let (_, cache) = step(&net.layers[0], &[0.5, -0.3], &LayerState {
            c: vec![0.4, -1.0, 2.0],
            y: vec![0.1, 0.2, 0.3],
        })
        .unwrap();
        let mut g = net.zeros_like();
        let adj = step_backward(&cache, &net.layers[0], &[0.0; 3], &[0.0; 3], &mut g.layers[0]).unwrap();
        assert!(adj.d_x.iter().chain(&adj.d_y_prev).chain(&adj.d_c_prev).all(|&v| v == 0.0));
        assert!(g.tensors().iter().all(|t| t.values.iter().all(|&v| v == 0.0)));
    }

    /// Single-step check of step_backward against differences of
    /// `L = u·y_t + v·c_t` with respect to every input of the step.
    fn check_single_step(kind: CellKind, width: usize) {
        let act = ActivationKind::Tanh;
        let net = random_net(kind, act, &[width], 3, 2, 7);
        let p = &net.layers[0];
        let mut rng = SeededRng::new(8);
        let x: Vec<f64> = (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let prev = LayerState {
            c: (0..width).map(|_| rng.uniform_range(-2.0, 2.0)).collect(),
            y: (0..width).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        };
        let u: Vec<f64> = (0..width).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let v: Vec<f64> = (0..width).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let scalar = |p: &CellParams, x: &[f64], prev: &LayerState| {
            let (s, _) = step(p, x, prev).unwrap();
            crate::math::dot(&u, &s.y) + crate::math::dot(&v, &s.c)
        };
        let (_, cache) = step(p, &x, &prev).unwrap();
        let mut g = net.zeros_like();
        let adj = step_backward(&cache, p, &u, &v, &mut g.layers[0]).unwrap();

        let eps = 1e-6;
        let fd_x = central_differences(|xx| scalar(p, xx, &prev), &x, eps);
        let fd_c = central_differences(
            |cc| scalar(p, &x, &LayerState { c: cc.to_vec(), y: prev.y.clone() }),
            &prev.c,
            eps,
        );
        let fd_y = central_differences(
            |yy| scalar(p, &x, &LayerState { c: prev.c.clone(), y: yy.to_vec() }),
            &prev.y,
            eps,
        );
        for (a, n) in adj.d_x.iter().zip(&fd_x).chain(adj.d_c_prev.iter().zip(&fd_c)).chain(adj.d_y_prev.iter().zip(&fd_y)) {
            assert!(relative_error(*a, *n) < 1e-5, "{a} vs {n}");
        }

        let mut probe = net.clone();
        let n_tensors = g.tensors().len();
        for k in 0..n_tensors {
            let name = g.tensors()[k].name.clone();
            if name.starts_with("readout") {
                continue;
            }
            for i in 0..g.tensors()[k].values.len() {
                let orig = probe.tensors()[k].values[i];
                probe.tensors_mut()[k].values[i] = orig + eps;
                let up = scalar(&probe.layers[0], &x, &prev);
                probe.tensors_mut()[k].values[i] = orig - eps;
                let down = scalar(&probe.layers[0], &x, &prev);
                probe.tensors_mut()[k].values[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = g.tensors()[k].values[i];
                assert!(relative_error(an, fd) < 1e-5, "{name}[{i}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn lstm_step_backward_matches_differences() {
        check_single_step(CellKind::Lstm, 2);
    }

    #[test]
    fn lstwm_step_backward_matches_differences() {
        check_single_step(CellKind::Lstwm, 3);
        check_single_step(CellKind::Lstwm, 1);
        check_single_step(CellKind::Lstwm, 5);
    }

    #[test]
    fn empty_mask_without_penalty_is_zero() {
        let net = random_net(CellKind::Lstwm, ActivationKind::LogAct, &[4], 3, 5, 2);
        let mut batch = random_batch(3, 5, 6, 2, 3);
        batch.iter_mut().for_each(|s| s.mask = LossMask(vec![0.0; 6]));
        let (loss, g) = bptt(&net, &batch, RegConfig::NONE).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(g.params.tensors().iter().all(|t| t.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let net = random_net(CellKind::Lstm, ActivationKind::LogAct, &[2], 3, 5, 2);
        let mut batch = random_batch(3, 5, 6, 1, 3);
        batch[0].targets.pop();
        assert!(matches!(
            bptt(&net, &batch, RegConfig::NONE),
            Err(GradError::LengthMismatch { index: 0, .. })
        ));
        assert_eq!(bptt(&net, &[], RegConfig::NONE).unwrap_err(), GradError::EmptyBatch);
    }

    #[test]
    fn single_target_equals_manual_composition() {
        // η = 0, one masked-in step: the objective is plain CE at that step.
        let net = random_net(CellKind::Lstm, ActivationKind::Tanh, &[3], 2, 4, 5);
        let mut batch = random_batch(2, 4, 5, 1, 6);
        batch[0].mask = LossMask::tail(5, 1);
        let (loss, g) = bptt(&net, &batch, RegConfig::NONE).unwrap();
        let pass = stack_forward(&net, &batch[0].inputs, &net.initial_states()).unwrap();
        let (ce, d_logits) = softmax_xent(&pass.logits[4], batch[0].targets[4]).unwrap();
        assert!((loss.total - ce).abs() < 1e-14);
        // the readout bias gradient is exactly d_logits
        assert_eq!(g.params.readout.b, d_logits);
        // and the readout weights see only the final top-layer output
        let mut expect = RealMat::zeros(4, 3);
        expect.add_outer(&d_logits, &pass.caches[4][0].y);
        assert_eq!(g.params.readout.w, expect);
    }

    #[test]
    fn inputs_after_last_target_get_zero_gradient() {
        // Differentiate with respect to the inputs by exposing them via d_x.
        let net = random_net(CellKind::Lstwm, ActivationKind::LogAct, &[3, 2], 2, 3, 9);
        let mut batch = random_batch(2, 3, 7, 1, 10);
        batch[0].mask = LossMask(vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let eps = 1e-6;
        for t in 4..7 {
            for i in 0..2 {
                let mut up = batch.clone();
                up[0].inputs[t][i] += eps;
                let mut down = batch.clone();
                down[0].inputs[t][i] -= eps;
                let a = objective(&net, &up, RegConfig::NONE).unwrap();
                let b = objective(&net, &down, RegConfig::NONE).unwrap();
                assert_eq!(a, b, "input at t={t} influenced the masked loss");
            }
        }
    }

    #[test]
    fn bptt_loss_matches_objective() {
        let net = random_net(CellKind::Lstwm, ActivationKind::LogAct, &[4, 3], 3, 5, 12);
        let batch = random_batch(3, 5, 8, 3, 13);
        let reg = RegConfig { eta: 1e-2, eta_w: 3e-3 };
        let (loss, _) = bptt(&net, &batch, reg).unwrap();
        let direct = objective(&net, &batch, reg).unwrap();
        assert!((loss.total - direct).abs() < 1e-12);
        assert!(loss.cell_penalty > 0.0 && loss.weight_penalty > 0.0);
    }

    #[test]
    fn penalty_gradient_is_linear_in_eta() {
        let net = random_net(CellKind::Lstwm, ActivationKind::LogAct, &[4], 3, 5, 14);
        let batch = random_batch(3, 5, 6, 2, 15);
        let g0 = bptt(&net, &batch, RegConfig::NONE).unwrap().1.params;
        let g1 = bptt(&net, &batch, RegConfig { eta: 1e-3, eta_w: 0.0 }).unwrap().1.params;
        let g2 = bptt(&net, &batch, RegConfig { eta: 2e-3, eta_w: 0.0 }).unwrap().1.params;
        for ((a, b), c) in g0.tensors().iter().zip(g1.tensors()).zip(g2.tensors()) {
            for i in 0..a.values.len() {
                let r1 = b.values[i] - a.values[i];
                let r2 = c.values[i] - a.values[i];
                assert!((r2 - 2.0 * r1).abs() < 1e-12, "{}[{i}]", a.name);
            }
        }
    }

    #[test]
    fn quadratic_toy_is_exact() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1] + x[1];
        let x = [0.7, -1.3];
        let grad = [6.0 * x[0] - 2.0 * x[1], -2.0 * x[0] + x[1] + 1.0];
        let fd = central_differences(f, &x, 1e-5);
        for (a, n) in grad.iter().zip(&fd) {
            assert!(relative_error(*a, *n) < 1e-9);
        }
    }

    #[test]
    fn gradcheck_lstm_width8() {
        let net = random_net(CellKind::Lstm, ActivationKind::Tanh, &[8], 4, 5, 21);
        let batch = random_batch(4, 5, 12, 1, 22);
        let r = finite_diff_check(&net, &batch, RegConfig::new(1e-3), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradcheck_lstwm_logact_with_rolled_weights() {
        let net = random_net(CellKind::Lstwm, ActivationKind::LogAct, &[3], 2, 3, 23);
        let batch = random_batch(2, 3, 10, 2, 24);
        let r = finite_diff_check(&net, &batch, RegConfig::new(1e-3), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        for (name, err) in &r.per_tensor {
            if name.contains("w_left") || name.contains("w_right") {
                assert!(*err < 1e-6, "{name}: {err}");
            }
        }
    }

    #[test]
    fn gradcheck_rejects_bad_epsilon() {
        let net = random_net(CellKind::Lstm, ActivationKind::Tanh, &[2], 2, 2, 1);
        let batch = random_batch(2, 2, 3, 1, 2);
        let opts = GradCheckOptions { epsilon: 0.1, ..Default::default() };
        assert_eq!(
            finite_diff_check(&net, &batch, RegConfig::NONE, opts).unwrap_err(),
            GradError::InvalidEpsilon(0.1)
        );
    }
}

//! Forward dynamics of LSTM and LSTWM layers, parameter initialization and
//! multi-layer stacking with an affine readout.
//!
//! Both cells see the concatenation `[x_t; y_{t-1}]` through four dense maps
//! (candidate, input gate, output gate, memory gate). They differ only in how
//! the previous memory `c_{t-1}` is carried:
//!
//! * LSTM: `c_t = g_in ⊙ a + g_mem ⊙ c_{t-1}` (the memory gate is a forget gate).
//! * LSTWM: an inner layer reads each memory cell and its two ring neighbours,
//!   `i_t = f(w_self ⊙ c + w_left ⊙ roll(c,-1) + w_right ⊙ roll(c,1) + b)`,
//!   and the memory gate blends `r_t = g_mem ⊙ c_{t-1} + (1 - g_mem) ⊙ i_t`
//!   before the gated candidate is added: `c_t = g_in ⊙ a + r_t`.
//!
//! In both cases `y_t = g_out ⊙ f(c_t)`.

use std::fmt;

use thiserror::Error;

use crate::math::{affine_into, roll_into, sigmoid_scalar, ActivationKind, RealMat, SeededRng};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CellError {
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("step called with {actual:?} parameters, expected {expected:?}")]
    WrongKind { expected: CellKind, actual: CellKind },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Lstm,
    Lstwm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Lstwm => "lstwm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lstm" => Some(CellKind::Lstm),
            "lstwm" => Some(CellKind::Lstwm),
            _ => None,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense affine map `W·v + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: RealMat,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            w: RealMat::zeros(rows, cols),
            b: vec![0.0; rows],
        }
    }

    fn init(rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        Self {
            w: RealMat::uniform(rows, cols, scale, rng),
            b: vec![0.0; rows],
        }
    }
}

/// LSTWM's sparse inner layer over the memory cells. Each vector has the
/// layer width.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerLayer {
    /// `w_v1`: weight on the cell itself.
    pub w_self: Vec<f64>,
    /// `w_v2`: weight on `roll(c, -1)`, i.e. the right-hand neighbour `c[j+1]`.
    pub w_left: Vec<f64>,
    /// `w_v3`: weight on `roll(c, 1)`, i.e. the left-hand neighbour `c[j-1]`.
    pub w_right: Vec<f64>,
    /// `b_v1`
    pub bias: Vec<f64>,
}

impl InnerLayer {
    pub fn zeros(width: usize) -> Self {
        Self {
            w_self: vec![0.0; width],
            w_left: vec![0.0; width],
            w_right: vec![0.0; width],
            bias: vec![0.0; width],
        }
    }
}

/// All learnable tensors of one recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub activation: ActivationKind,
    pub input_width: usize,
    pub width: usize,
    /// Candidate `a = f(W·[x;y] + b)`.
    pub candidate: Dense,
    pub input_gate: Dense,
    pub output_gate: Dense,
    /// Forget gate for LSTM, combination gate for LSTWM.
    pub memory_gate: Dense,
    /// Present exactly when `kind == Lstwm`.
    pub inner: Option<InnerLayer>,
}

impl CellParams {
    pub fn zeros(kind: CellKind, activation: ActivationKind, input_width: usize, width: usize) -> Self {
        let cols = input_width + width;
        Self {
            kind,
            activation,
            input_width,
            width,
            candidate: Dense::zeros(width, cols),
            input_gate: Dense::zeros(width, cols),
            output_gate: Dense::zeros(width, cols),
            memory_gate: Dense::zeros(width, cols),
            inner: (kind == CellKind::Lstwm).then(|| InnerLayer::zeros(width)),
        }
    }

    pub fn init(
        kind: CellKind,
        activation: ActivationKind,
        input_width: usize,
        width: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let cols = input_width + width;
        Self {
            kind,
            activation,
            input_width,
            width,
            candidate: Dense::init(width, cols, rng),
            input_gate: Dense::init(width, cols, rng),
            output_gate: Dense::init(width, cols, rng),
            memory_gate: Dense::init(width, cols, rng),
            inner: (kind == CellKind::Lstwm).then(|| InnerLayer::zeros(width)),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let dense = 4 * self.width * (self.input_width + self.width + 1);
        dense + if self.inner.is_some() { 4 * self.width } else { 0 }
    }
}

/// Recurrent carry of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub c: Vec<f64>,
    pub y: Vec<f64>,
}

impl LayerState {
    pub fn zeros(width: usize) -> Self {
        Self {
            c: vec![0.0; width],
            y: vec![0.0; width],
        }
    }
}

/// Intermediates of the LSTWM inner layer for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerCache {
    /// `roll(c_{t-1}, -1)`
    pub c_left: Vec<f64>,
    /// `roll(c_{t-1}, 1)`
    pub c_right: Vec<f64>,
    pub pre: Vec<f64>,
    /// `i_t`
    pub out: Vec<f64>,
    /// `r_t`
    pub retained: Vec<f64>,
}

/// Everything one forward step produced that the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    /// `[x_t; y_{t-1}]`
    pub xh: Vec<f64>,
    pub cand_pre: Vec<f64>,
    pub cand: Vec<f64>,
    pub in_pre: Vec<f64>,
    pub in_gate: Vec<f64>,
    pub out_pre: Vec<f64>,
    pub out_gate: Vec<f64>,
    pub mem_pre: Vec<f64>,
    pub mem_gate: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub inner: Option<InnerCache>,
    pub c: Vec<f64>,
    /// `f(c_t)`
    pub fc: Vec<f64>,
    pub y: Vec<f64>,
}

impl StepCache {
    pub fn x(&self) -> &[f64] {
        &self.xh[..self.xh.len() - self.c.len()]
    }

    /// Recompute `y_t` from the cached gate and memory values.
    pub fn replay_output(&self) -> Vec<f64> {
        self.out_gate.iter().zip(&self.fc).map(|(g, f)| g * f).collect()
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), CellError> {
    if expected == actual {
        Ok(())
    } else {
        Err(CellError::Dimension {
            what,
            expected,
            actual,
        })
    }
}

/// One step of a standard LSTM layer with forget gate.
pub fn lstm_step(p: &CellParams, x: &[f64], prev: &LayerState) -> Result<(LayerState, StepCache), CellError> {
    if p.kind != CellKind::Lstm {
        return Err(CellError::WrongKind {
            expected: CellKind::Lstm,
            actual: p.kind,
        });
    }
    step(p, x, prev)
}

/// One step of an LSTWM layer.
pub fn lstwm_step(p: &CellParams, x: &[f64], prev: &LayerState) -> Result<(LayerState, StepCache), CellError> {
    if p.kind != CellKind::Lstwm {
        return Err(CellError::WrongKind {
            expected: CellKind::Lstwm,
            actual: p.kind,
        });
    }
    step(p, x, prev)
}

/// Dispatches on `p.kind`.
pub fn step(p: &CellParams, x: &[f64], prev: &LayerState) -> Result<(LayerState, StepCache), CellError> {
    let n = p.width;
    check_len("layer input", p.input_width, x.len())?;
    check_len("previous memory", n, prev.c.len())?;
    check_len("previous output", n, prev.y.len())?;

    let mut xh = Vec::with_capacity(x.len() + n);
    xh.extend_from_slice(x);
    xh.extend_from_slice(&prev.y);

    let f = p.activation;
    let mut cand_pre = vec![0.0; n];
    let mut in_pre = vec![0.0; n];
    let mut out_pre = vec![0.0; n];
    let mut mem_pre = vec![0.0; n];
    affine_into(&p.candidate.w, &p.candidate.b, &xh, &mut cand_pre);
    affine_into(&p.input_gate.w, &p.input_gate.b, &xh, &mut in_pre);
    affine_into(&p.output_gate.w, &p.output_gate.b, &xh, &mut out_pre);
    affine_into(&p.memory_gate.w, &p.memory_gate.b, &xh, &mut mem_pre);

    let cand: Vec<f64> = cand_pre.iter().map(|&v| f.apply(v)).collect();
    let in_gate: Vec<f64> = in_pre.iter().map(|&v| sigmoid_scalar(v)).collect();
    let out_gate: Vec<f64> = out_pre.iter().map(|&v| sigmoid_scalar(v)).collect();
    let mem_gate: Vec<f64> = mem_pre.iter().map(|&v| sigmoid_scalar(v)).collect();

    let c_prev = prev.c.clone();
    let (c, inner) = match (p.kind, &p.inner) {
        (CellKind::Lstm, _) => {
            let c = (0..n)
                .map(|j| in_gate[j] * cand[j] + mem_gate[j] * c_prev[j])
                .collect();
            (c, None)
        }
        (CellKind::Lstwm, Some(inner)) => {
            let mut c_left = vec![0.0; n];
            let mut c_right = vec![0.0; n];
            if n > 1 {
                roll_into(&c_prev, -1, &mut c_left).expect("width > 1");
                roll_into(&c_prev, 1, &mut c_right).expect("width > 1");
            } else {
                // a single cell is its own neighbour on the ring
                c_left.copy_from_slice(&c_prev);
                c_right.copy_from_slice(&c_prev);
            }
            let pre: Vec<f64> = (0..n)
                .map(|j| {
                    inner.w_self[j] * c_prev[j]
                        + inner.w_left[j] * c_left[j]
                        + inner.w_right[j] * c_right[j]
                        + inner.bias[j]
                })
                .collect();
            let out: Vec<f64> = pre.iter().map(|&v| f.apply(v)).collect();
            let retained: Vec<f64> = (0..n)
                .map(|j| mem_gate[j] * c_prev[j] + (1.0 - mem_gate[j]) * out[j])
                .collect();
            let c = (0..n).map(|j| in_gate[j] * cand[j] + retained[j]).collect();
            (
                c,
                Some(InnerCache {
                    c_left,
                    c_right,
                    pre,
                    out,
                    retained,
                }),
            )
        }
        (CellKind::Lstwm, None) => {
            return Err(CellError::InvalidSpec(
                "LSTWM parameters without an inner layer".into(),
            ))
        }
    };
    let c: Vec<f64> = c;
    let fc: Vec<f64> = c.iter().map(|&v| f.apply(v)).collect();
    let y: Vec<f64> = out_gate.iter().zip(&fc).map(|(g, v)| g * v).collect();

    let state = LayerState {
        c: c.clone(),
        y: y.clone(),
    };
    let cache = StepCache {
        xh,
        cand_pre,
        cand,
        in_pre,
        in_gate,
        out_pre,
        out_gate,
        mem_pre,
        mem_gate,
        c_prev,
        inner,
        c,
        fc,
        y,
    };
    Ok((state, cache))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub width: usize,
    pub kind: CellKind,
    pub activation: ActivationKind,
}

/// Architecture: input width, recurrent layers bottom to top, readout width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    pub output_width: usize,
}

impl NetworkSpec {
    /// Uniform stack, e.g. `uniform(28, CellKind::Lstwm, &[32, 32], LogAct, 10)`
    /// for LSTWM-32-32-log.
    pub fn uniform(
        input_width: usize,
        kind: CellKind,
        widths: &[usize],
        activation: ActivationKind,
        output_width: usize,
    ) -> Self {
        Self {
            input_width,
            layers: widths
                .iter()
                .map(|&width| LayerSpec {
                    width,
                    kind,
                    activation,
                })
                .collect(),
            output_width,
        }
    }

    pub fn validate(&self) -> Result<(), CellError> {
        if self.layers.is_empty() {
            return Err(CellError::InvalidSpec("at least one layer required".into()));
        }
        if self.input_width == 0 || self.output_width == 0 {
            return Err(CellError::InvalidSpec("input and output widths must be positive".into()));
        }
        if let Some(i) = self.layers.iter().position(|l| l.width == 0) {
            return Err(CellError::InvalidSpec(format!("layer {i} has width 0")));
        }
        Ok(())
    }

    /// Name in the `LSTWM-32-32-log` style.
    pub fn label(&self) -> String {
        let kind = self.layers[0].kind.name().to_uppercase();
        let widths: Vec<String> = self.layers.iter().map(|l| l.width.to_string()).collect();
        format!("{}-{}-{}", kind, widths.join("-"), self.layers[0].activation.name())
    }
}

/// One named tensor of a [`Network`].
pub struct TensorView<'a> {
    pub name: String,
    /// Biases are excluded from the weight penalty.
    pub is_bias: bool,
    pub values: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub is_bias: bool,
    pub values: &'a mut [f64],
}

/// Stacked recurrent layers plus the affine readout producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<CellParams>,
    pub readout: Dense,
}

impl Network {
    /// Dense matrices uniform on `(-1/√fan_in, 1/√fan_in)`; every bias and the
    /// whole LSTWM inner layer start at zero.
    pub fn init(spec: &NetworkSpec, rng: &mut SeededRng) -> Result<Self, CellError> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut input = spec.input_width;
        for l in &spec.layers {
            layers.push(CellParams::init(l.kind, l.activation, input, l.width, rng));
            input = l.width;
        }
        let readout = Dense::init(spec.output_width, input, rng);
        Ok(Self {
            spec: spec.clone(),
            layers,
            readout,
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self, CellError> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut input = spec.input_width;
        for l in &spec.layers {
            layers.push(CellParams::zeros(l.kind, l.activation, input, l.width));
            input = l.width;
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            readout: Dense::zeros(spec.output_width, input),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec).expect("spec already validated")
    }

    pub fn initial_states(&self) -> Vec<LayerState> {
        self.layers.iter().map(|l| LayerState::zeros(l.width)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.values.len()).sum()
    }

    /// Every tensor in a fixed order; names are stable across runs.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (part, d) in [
                ("candidate", &l.candidate),
                ("input_gate", &l.input_gate),
                ("output_gate", &l.output_gate),
                ("memory_gate", &l.memory_gate),
            ] {
                out.push(TensorView {
                    name: format!("layer{i}.{part}.w"),
                    is_bias: false,
                    values: d.w.as_slice(),
                });
                out.push(TensorView {
                    name: format!("layer{i}.{part}.b"),
                    is_bias: true,
                    values: &d.b,
                });
            }
            if let Some(inner) = &l.inner {
                for (part, v, is_bias) in [
                    ("w_self", &inner.w_self, false),
                    ("w_left", &inner.w_left, false),
                    ("w_right", &inner.w_right, false),
                    ("bias", &inner.bias, true),
                ] {
                    out.push(TensorView {
                        name: format!("layer{i}.inner.{part}"),
                        is_bias,
                        values: v,
                    });
                }
            }
        }
        out.push(TensorView {
            name: "readout.w".into(),
            is_bias: false,
            values: self.readout.w.as_slice(),
        });
        out.push(TensorView {
            name: "readout.b".into(),
            is_bias: true,
            values: &self.readout.b,
        });
        out
    }

    /// Same order as [`Network::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let CellParams {
                candidate,
                input_gate,
                output_gate,
                memory_gate,
                inner,
                ..
            } = l;
            for (part, d) in [
                ("candidate", candidate),
                ("input_gate", input_gate),
                ("output_gate", output_gate),
                ("memory_gate", memory_gate),
            ] {
                let Dense { w, b } = d;
                out.push(TensorViewMut {
                    name: format!("layer{i}.{part}.w"),
                    is_bias: false,
                    values: w.as_mut_slice(),
                });
                out.push(TensorViewMut {
                    name: format!("layer{i}.{part}.b"),
                    is_bias: true,
                    values: b,
                });
            }
            if let Some(InnerLayer {
                w_self,
                w_left,
                w_right,
                bias,
            }) = inner
            {
                for (part, v, is_bias) in [
                    ("w_self", w_self, false),
                    ("w_left", w_left, false),
                    ("w_right", w_right, false),
                    ("bias", bias, true),
                ] {
                    out.push(TensorViewMut {
                        name: format!("layer{i}.inner.{part}"),
                        is_bias,
                        values: v,
                    });
                }
            }
        }
        let Dense { w, b } = &mut self.readout;
        out.push(TensorViewMut {
            name: "readout.w".into(),
            is_bias: false,
            values: w.as_mut_slice(),
        });
        out.push(TensorViewMut {
            name: "readout.b".into(),
            is_bias: true,
            values: b,
        });
        out
    }
}

/// Result of running a stack over one sequence.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Readout logits per timestep.
    pub logits: Vec<Vec<f64>>,
    /// `caches[t][layer]`
    pub caches: Vec<Vec<StepCache>>,
    pub final_states: Vec<LayerState>,
}

/// Runs every layer over `sequence`. Layer `l` consumes layer `l-1`'s output at
/// the same timestep; the readout is affine on the top layer (no softmax).
pub fn stack_forward(
    net: &Network,
    sequence: &[Vec<f64>],
    initial: &[LayerState],
) -> Result<ForwardPass, CellError> {
    if sequence.is_empty() {
        return Err(CellError::EmptySequence);
    }
    check_len("initial states", net.layers.len(), initial.len())?;
    let mut states = initial.to_vec();
    let mut logits = Vec::with_capacity(sequence.len());
    let mut caches = Vec::with_capacity(sequence.len());
    for x in sequence {
        let mut per_layer = Vec::with_capacity(net.layers.len());
        let mut input: &[f64] = x;
        for (p, st) in net.layers.iter().zip(states.iter_mut()) {
            let (next, cache) = step(p, input, st)?;
            *st = next;
            per_layer.push(cache);
            input = &per_layer.last().expect("just pushed").y;
        }
        let mut out = vec![0.0; net.readout.b.len()];
        affine_into(&net.readout.w, &net.readout.b, input, &mut out);
        logits.push(out);
        caches.push(per_layer);
    }
    Ok(ForwardPass {
        logits,
        caches,
        final_states: states,
    })
}

/// Forward pass without caches, for evaluation. Calls `visit(t, logits)` per step.
pub fn stack_infer(
    net: &Network,
    sequence: &[Vec<f64>],
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Vec<LayerState>, CellError> {
    if sequence.is_empty() {
        return Err(CellError::EmptySequence);
    }
    let mut states = net.initial_states();
    let mut out = vec![0.0; net.readout.b.len()];
    for (t, x) in sequence.iter().enumerate() {
        let mut carry: Option<Vec<f64>> = None;
        for (p, st) in net.layers.iter().zip(states.iter_mut()) {
            let input = carry.as_deref().unwrap_or(x);
            let (next, _) = step(p, input, st)?;
            carry = Some(next.y.clone());
            *st = next;
        }
        affine_into(
            &net.readout.w,
            &net.readout.b,
            carry.as_deref().expect("at least one layer"),
            &mut out,
        );
        visit(t, &out);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ActivationKind::{LogAct, Tanh};

    fn spec(kind: CellKind, widths: &[usize]) -> NetworkSpec {
        NetworkSpec::uniform(4, kind, widths, LogAct, 3)
    }

    #[test]
    fn init_zeroes_inner_layer_and_biases() {
        let net = Network::init(&spec(CellKind::Lstwm, &[8, 5]), &mut SeededRng::new(1)).unwrap();
        for l in &net.layers {
            let inner = l.inner.as_ref().unwrap();
            assert!(inner.w_self.iter().all(|&v| v == 0.0));
            assert!(inner.w_left.iter().all(|&v| v == 0.0));
            assert!(inner.w_right.iter().all(|&v| v == 0.0));
            assert!(inner.bias.iter().all(|&v| v == 0.0));
            assert!(l.input_gate.b.iter().all(|&v| v == 0.0));
        }
        assert_eq!(net.layers[0].input_gate.w.shape(), (8, 12));
        assert_eq!(net.layers[1].input_gate.w.shape(), (5, 13));
        let bound = 1.0 / 12f64.sqrt();
        assert!(net.layers[0].candidate.w.as_slice().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(CellKind::Lstm, &[6]);
        let a = Network::init(&s, &mut SeededRng::new(9)).unwrap();
        let b = Network::init(&s, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = Network::init(&s, &mut SeededRng::new(10)).unwrap();
        assert_ne!(a, c);
        assert!(a.layers[0].inner.is_none());
    }

    #[test]
    fn zero_params_lstm_from_memory_two() {
        let p = CellParams::zeros(CellKind::Lstm, Tanh, 1, 1);
        let prev = LayerState {
            c: vec![2.0],
            y: vec![0.0],
        };
        let (s, _) = lstm_step(&p, &[0.3], &prev).unwrap();
        assert_eq!(s.c, vec![1.0]);
        assert!((s.y[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn zero_fixed_point() {
        for kind in [CellKind::Lstm, CellKind::Lstwm] {
            let p = CellParams::zeros(kind, LogAct, 2, 3);
            let (s, _) = step(&p, &[5.0, -1.0], &LayerState::zeros(3)).unwrap();
            assert_eq!(s.c, vec![0.0; 3]);
            assert_eq!(s.y, vec![0.0; 3]);
        }
    }

    #[test]
    fn wrong_kind_and_dimension_errors() {
        let p = CellParams::zeros(CellKind::Lstm, LogAct, 2, 3);
        assert!(matches!(
            lstwm_step(&p, &[0.0, 0.0], &LayerState::zeros(3)),
            Err(CellError::WrongKind { .. })
        ));
        assert_eq!(
            lstm_step(&p, &[0.0], &LayerState::zeros(3)).unwrap_err(),
            CellError::Dimension {
                what: "layer input",
                expected: 2,
                actual: 1
            }
        );
    }

    #[test]
    fn width_one_inner_layer_sums_weights() {
        let mut p = CellParams::zeros(CellKind::Lstwm, LogAct, 1, 1);
        let inner = p.inner.as_mut().unwrap();
        inner.w_self[0] = 0.3;
        inner.w_left[0] = -0.2;
        inner.w_right[0] = 0.7;
        inner.bias[0] = 0.1;
        let prev = LayerState {
            c: vec![1.5],
            y: vec![0.2],
        };
        let (_, cache) = lstwm_step(&p, &[0.4], &prev).unwrap();
        let expect = LogAct.apply((0.3 - 0.2 + 0.7) * 1.5 + 0.1);
        assert_eq!(cache.inner.unwrap().out[0], expect);
    }

    #[test]
    fn store_indefinitely_with_saturated_gates() {
        let mut rng = SeededRng::new(5);
        let mut p = CellParams::init(CellKind::Lstwm, LogAct, 3, 4, &mut rng);
        p.input_gate.b.iter_mut().for_each(|b| *b = -800.0);
        p.memory_gate.b.iter_mut().for_each(|b| *b = 800.0);
        let inner = p.inner.as_mut().unwrap();
        inner.w_self.iter_mut().for_each(|w| *w = 0.4);
        inner.w_left.iter_mut().for_each(|w| *w = -0.3);
        let mut st = LayerState {
            c: vec![1.0, -2.0, 3.5, 0.25],
            y: vec![0.0; 4],
        };
        let start = st.c.clone();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            st = lstwm_step(&p, &x, &st).unwrap().0;
            assert_eq!(st.c, start);
        }
    }

    #[test]
    fn cache_replays_output() {
        let net = Network::init(&spec(CellKind::Lstwm, &[5]), &mut SeededRng::new(2)).unwrap();
        let seq: Vec<Vec<f64>> = (0..4).map(|t| vec![t as f64 * 0.1; 4]).collect();
        let pass = stack_forward(&net, &seq, &net.initial_states()).unwrap();
        for step in &pass.caches {
            assert_eq!(step[0].replay_output(), step[0].y);
        }
    }

    #[test]
    fn zero_params_give_readout_bias() {
        let mut net = Network::zeros(&spec(CellKind::Lstwm, &[3, 2])).unwrap();
        net.readout.b = vec![0.5, -1.0, 2.0];
        let seq = vec![vec![1.0, 2.0, 3.0, 4.0]; 3];
        let pass = stack_forward(&net, &seq, &net.initial_states()).unwrap();
        for l in &pass.logits {
            assert_eq!(l, &vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn single_step_stack_is_step_plus_readout() {
        let net = Network::init(&spec(CellKind::Lstm, &[4]), &mut SeededRng::new(3)).unwrap();
        let x = vec![0.2, -0.1, 0.7, 1.0];
        let pass = stack_forward(&net, std::slice::from_ref(&x), &net.initial_states()).unwrap();
        let (s, _) = lstm_step(&net.layers[0], &x, &LayerState::zeros(4)).unwrap();
        let logits = crate::math::affine(&net.readout.w, &net.readout.b, &s.y);
        assert_eq!(pass.logits[0], logits);
        assert_eq!(pass.final_states[0], s);
    }

    #[test]
    fn infer_matches_forward() {
        let net = Network::init(&spec(CellKind::Lstwm, &[4, 3]), &mut SeededRng::new(4)).unwrap();
        let seq: Vec<Vec<f64>> = (0..6).map(|t| vec![(t as f64).sin(); 4]).collect();
        let pass = stack_forward(&net, &seq, &net.initial_states()).unwrap();
        let mut seen = Vec::new();
        stack_infer(&net, &seq, |_, l| seen.push(l.to_vec())).unwrap();
        assert_eq!(seen, pass.logits);
    }

    #[test]
    fn tensor_views_cover_all_parameters() {
        let mut net = Network::init(&spec(CellKind::Lstwm, &[8, 5]), &mut SeededRng::new(1)).unwrap();
        let expected: usize = net.layers.iter().map(|l| l.parameter_count()).sum::<usize>() + 3 * 5 + 3;
        assert_eq!(net.parameter_count(), expected);
        let names: Vec<String> = net.tensors().into_iter().map(|t| t.name).collect();
        let names_mut: Vec<String> = net.tensors_mut().into_iter().map(|t| t.name).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"layer1.inner.w_left".to_string()));
    }

    #[test]
    fn labels() {
        let s = NetworkSpec::uniform(28, CellKind::Lstwm, &[32, 32], LogAct, 10);
        assert_eq!(s.label(), "LSTWM-32-32-log");
        assert!(NetworkSpec::uniform(28, CellKind::Lstm, &[], Tanh, 10).validate().is_err());
    }
}

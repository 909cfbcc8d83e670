//! Cell and stack forward passes against a literal scalar transcription of
//! the cell equations, written without any of the crate's vector helpers.

use lstwm::cells::{stack_forward, stack_infer, Dense};
use lstwm::{ActivationKind, CellKind, CellParams, LayerState, Network, NetworkSpec, SeededRng};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn act(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::Tanh => x.tanh(),
        ActivationKind::LogAct => x.signum() * (1.0 + x.abs()).ln(),
        ActivationKind::Sigmoid => sig(x),
    }
}

/// `W·[x; y] + b` for row `j`, summed term by term.
fn row(d: &Dense, j: usize, x: &[f64], y: &[f64]) -> f64 {
    let mut s = d.b[j];
    for (i, v) in x.iter().chain(y).enumerate() {
        s += d.w.get(j, i) * v;
    }
    s
}

fn reference_step(p: &CellParams, x: &[f64], prev: &LayerState) -> LayerState {
    let n = p.width;
    let mut c = vec![0.0; n];
    let mut y = vec![0.0; n];
    for j in 0..n {
        let a = act(p.activation, row(&p.candidate, j, x, &prev.y));
        let g_in = sig(row(&p.input_gate, j, x, &prev.y));
        let g_out = sig(row(&p.output_gate, j, x, &prev.y));
        let g_mem = sig(row(&p.memory_gate, j, x, &prev.y));
        c[j] = match &p.inner {
            None => g_in * a + g_mem * prev.c[j],
            Some(inner) => {
                let right = prev.c[(j + 1) % n];
                let left = prev.c[(j + n - 1) % n];
                let i = act(
                    p.activation,
                    inner.w_self[j] * prev.c[j] + inner.w_left[j] * right + inner.w_right[j] * left + inner.bias[j],
                );
                g_in * a + g_mem * prev.c[j] + (1.0 - g_mem) * i
            }
        };
        y[j] = g_out * act(p.activation, c[j]);
    }
    LayerState { c, y }
}

fn randomized(spec: &NetworkSpec, seed: u64) -> Network {
    let mut rng = SeededRng::new(seed);
    let mut net = Network::init(spec, &mut rng).unwrap();
    for t in net.tensors_mut() {
        t.values.iter_mut().for_each(|v| *v += rng.uniform_range(-0.7, 0.7));
    }
    net
}

fn random_inputs(width: usize, len: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..len).map(|_| (0..width).map(|_| rng.uniform_range(-3.0, 3.0)).collect()).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn single_steps_match_transcription() {
    for kind in [CellKind::Lstm, CellKind::Lstwm] {
        for activation in [ActivationKind::Tanh, ActivationKind::LogAct] {
            for width in [1, 2, 3, 7] {
                let spec = NetworkSpec::uniform(4, kind, &[width], activation, 2);
                let net = randomized(&spec, width as u64 * 31 + 5);
                let p = &net.layers[0];
                let mut rng = SeededRng::new(99);
                let mut prev = LayerState {
                    c: (0..width).map(|_| rng.uniform_range(-4.0, 4.0)).collect(),
                    y: (0..width).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                };
                for x in random_inputs(4, 6, &mut rng) {
                    let (got, _) = lstwm::cells::step(p, &x, &prev).unwrap();
                    let want = reference_step(p, &x, &prev);
                    assert!(close(&got.c, &want.c, 1e-12), "{kind} {activation:?} width {width}");
                    assert!(close(&got.y, &want.y, 1e-12), "{kind} {activation:?} width {width}");
                    prev = got;
                }
            }
        }
    }
}

#[test]
fn two_layer_stack_composes_steps_and_readout() {
    let spec = NetworkSpec::uniform(3, CellKind::Lstwm, &[5, 4], ActivationKind::LogAct, 6);
    let net = randomized(&spec, 17);
    let mut rng = SeededRng::new(4);
    let xs = random_inputs(3, 9, &mut rng);
    let pass = stack_forward(&net, &xs, &net.initial_states()).unwrap();

    let mut s0 = LayerState::zeros(5);
    let mut s1 = LayerState::zeros(4);
    for (t, x) in xs.iter().enumerate() {
        s0 = reference_step(&net.layers[0], x, &s0);
        s1 = reference_step(&net.layers[1], &s0.y, &s1);
        let logits: Vec<f64> = (0..6).map(|j| row(&net.readout, j, &s1.y, &[])).collect();
        assert!(close(&pass.logits[t], &logits, 1e-12), "t = {t}");
    }
    assert!(close(&pass.final_states[1].c, &s1.c, 1e-12));

    let mut inferred = Vec::new();
    stack_infer(&net, &xs, |_, l| inferred.push(l.to_vec())).unwrap();
    assert_eq!(inferred, pass.logits);
}

#[test]
fn outputs_are_causal() {
    let spec = NetworkSpec::uniform(3, CellKind::Lstwm, &[6, 6], ActivationKind::Tanh, 4);
    let net = randomized(&spec, 8);
    let mut rng = SeededRng::new(12);
    let xs = random_inputs(3, 20, &mut rng);
    let base = stack_forward(&net, &xs, &net.initial_states()).unwrap();
    for cut in [0, 7, 19] {
        let mut changed = xs.clone();
        for x in &mut changed[cut..] {
            x.iter_mut().for_each(|v| *v = -*v + 1.0);
        }
        let other = stack_forward(&net, &changed, &net.initial_states()).unwrap();
        for t in 0..cut {
            assert_eq!(base.logits[t], other.logits[t], "step {t} saw the future");
        }
        assert_ne!(base.logits[cut], other.logits[cut]);
    }
}

#[test]
fn zero_inner_layer_reduces_to_lstm() {
    let lstwm = randomized(&NetworkSpec::uniform(4, CellKind::Lstwm, &[6], ActivationKind::LogAct, 3), 2);
    let mut p = lstwm.layers[0].clone();
    p.inner = Some(lstwm::cells::InnerLayer::zeros(6));
    let mut q = p.clone();
    q.kind = CellKind::Lstm;
    q.inner = None;
    let mut rng = SeededRng::new(3);
    let (mut a, mut b) = (LayerState::zeros(6), LayerState::zeros(6));
    for x in random_inputs(4, 30, &mut rng) {
        a = lstwm::cells::lstwm_step(&p, &x, &a).unwrap().0;
        b = lstwm::cells::lstm_step(&q, &x, &b).unwrap().0;
        assert!(close(&a.c, &b.c, 1e-12) && close(&a.y, &b.y, 1e-12));
    }
}

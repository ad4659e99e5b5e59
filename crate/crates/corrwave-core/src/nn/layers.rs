//! Differentiable building blocks: linear maps, MLP heads, the strided
//! convolution encoder, and a single-layer LSTM summarizer.
//!
//! Layers register their tensors in a [`ParamStore`] at construction and
//! look them up by name during the forward pass, so one layer definition
//! serves training tapes and frozen inference tapes alike.

use ndarray::{Array3, ArrayD};
use rand_chacha::ChaCha12Rng;

use crate::nn::init::{fan_in_uniform, zeros};
use crate::nn::params::{ParamGroup, ParamStore, VarMap};
use crate::nn::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let weight = format!("{prefix}.w");
        store.register(&weight, group, fan_in_uniform(&[in_dim, out_dim], in_dim, rng));
        let bias = bias.then(|| {
            let name = format!("{prefix}.b");
            store.register(&name, group, zeros(&[out_dim]));
            name
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `[rows, in_dim] -> [rows, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, vars: &VarMap, x: Var) -> Var {
        let w = vars.get(&self.weight);
        let m = tape.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let bias = vars.get(b);
                tape.add_bias(m, bias)
            }
            None => m,
        }
    }
}

/// Two-layer feedforward head with ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let hidden = Linear::new(
            store,
            group,
            &format!("{prefix}.hidden"),
            in_dim,
            hidden_dim,
            true,
            rng,
        );
        let output = Linear::new(
            store,
            group,
            &format!("{prefix}.out"),
            hidden_dim,
            out_dim,
            true,
            rng,
        );
        Self { hidden, output }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &VarMap, x: Var) -> Var {
        let h = self.hidden.forward(tape, vars, x);
        let a = tape.relu(h);
        self.output.forward(tape, vars, a)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub weight: String,
    pub bias: String,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(kernel >= stride, "kernel must cover the stride");
        let weight = format!("{prefix}.w");
        let bias = format!("{prefix}.b");
        store.register(
            &weight,
            group,
            fan_in_uniform(&[out_ch, in_ch, kernel], in_ch * kernel, rng),
        );
        store.register(&bias, group, zeros(&[out_ch]));
        Self {
            weight,
            bias,
            kernel,
            stride,
        }
    }

    /// Zero-padded so the output length is exactly `floor(len / stride)`.
    pub fn forward(&self, tape: &mut Tape, vars: &VarMap, x: Var) -> Var {
        let pad = self.kernel - self.stride;
        let w = vars.get(&self.weight);
        let c = tape.conv1d(x, w, self.stride, pad / 2, pad - pad / 2);
        let b = vars.get(&self.bias);
        let biased = tape.add_bias_channels(c, b);
        tape.relu(biased)
    }
}

/// Three-layer strided convolution stack.
///
/// Kernels (10, 4, 4) with strides (5, 2, 1) downsample by 10, so a
/// `W`-sample window yields `floor(W / 10)` encoded positions.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub layers: Vec<Conv1dLayer>,
    pub downsample: usize,
}

pub const ENCODER_SPEC: [(usize, usize); 3] = [(10, 5), (4, 2), (4, 1)];

impl ConvEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        widths: &[usize; 3],
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut downsample = 1;
        let mut prev = in_ch;
        for (i, ((kernel, stride), &width)) in ENCODER_SPEC.iter().zip(widths).enumerate() {
            layers.push(Conv1dLayer::new(
                store,
                ParamGroup::Trunk,
                &format!("{prefix}.conv{i}"),
                prev,
                width,
                *kernel,
                *stride,
                rng,
            ));
            downsample *= stride;
            prev = width;
        }
        Self { layers, downsample }
    }

    /// `[batch, in_ch, W] -> [batch, widths[2], floor(W / downsample)]`.
    pub fn forward(&self, tape: &mut Tape, vars: &VarMap, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, vars, h);
        }
        h
    }

    pub fn output_len(&self, window: usize) -> usize {
        window / self.downsample
    }
}

/// Single-layer LSTM; gates ordered (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: String,
    pub wh: String,
    pub bias: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let wx = format!("{prefix}.wx");
        let wh = format!("{prefix}.wh");
        let bias = format!("{prefix}.b");
        store.register(&wx, group, fan_in_uniform(&[in_dim, 4 * hidden], in_dim, rng));
        store.register(&wh, group, fan_in_uniform(&[hidden, 4 * hidden], hidden, rng));
        store.register(&bias, group, zeros(&[4 * hidden]));
        Self {
            wx,
            wh,
            bias,
            in_dim,
            hidden,
        }
    }

    /// Run over pre-sliced step inputs `[batch, in_dim]`, returning the
    /// hidden state after each step.
    pub fn forward_steps(&self, tape: &mut Tape, vars: &VarMap, steps: &[Var]) -> Vec<Var> {
        assert!(!steps.is_empty());
        let batch = tape.value(steps[0]).shape()[0];
        let wx = vars.get(&self.wx);
        let wh = vars.get(&self.wh);
        let bias = vars.get(&self.bias);
        let mut h = tape.constant(ArrayD::zeros(vec![batch, self.hidden]));
        let mut c = tape.constant(ArrayD::zeros(vec![batch, self.hidden]));
        let mut outputs = Vec::with_capacity(steps.len());
        for &x in steps {
            let gx = tape.matmul(x, wx);
            let gh = tape.matmul(h, wh);
            let sum = tape.add(gx, gh);
            let gates = tape.add_bias(sum, bias);
            let i_gate = tape.slice_cols(gates, 0, self.hidden);
            let f_gate = tape.slice_cols(gates, self.hidden, self.hidden);
            let g_gate = tape.slice_cols(gates, 2 * self.hidden, self.hidden);
            let o_gate = tape.slice_cols(gates, 3 * self.hidden, self.hidden);
            let i_act = tape.sigmoid(i_gate);
            let f_act = tape.sigmoid(f_gate);
            let g_act = tape.tanh(g_gate);
            let o_act = tape.sigmoid(o_gate);
            let ig = tape.mul(i_act, g_act);
            let fc = tape.mul(f_act, c);
            c = tape.add(ig, fc);
            let c_act = tape.tanh(c);
            h = tape.mul(o_act, c_act);
            outputs.push(h);
        }
        outputs
    }

    /// Convenience: run over the time axis of `[batch, in_dim, T]`.
    pub fn forward_seq(&self, tape: &mut Tape, vars: &VarMap, x: Var) -> Vec<Var> {
        let t_len = tape.value(x).shape()[2];
        let steps: Vec<Var> = (0..t_len).map(|t| tape.slice_time(x, t)).collect();
        self.forward_steps(tape, vars, &steps)
    }
}

/// Mean over a list of equally shaped vars (time pooling).
pub fn mean_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    assert!(!vars.is_empty());
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    tape.scale(acc, 1.0 / vars.len() as f64)
}

/// Bilinear score `c^T W z` for single vectors.
pub fn bilinear_score(tape: &mut Tape, c: Var, w: Var, z: Var) -> Var {
    let c_dim = tape.value(c).len();
    let z_dim = tape.value(z).len();
    let c_row = tape.reshape(c, vec![1, c_dim]);
    let u = tape.matmul(c_row, w);
    let z_row = tape.reshape(z, vec![1, z_dim]);
    let prod = tape.mul(u, z_row);
    tape.sum_all(prod)
}

/// Graph-weighted neighbor aggregation:
/// `out_i = ReLU((sum_{j != i} a[i, j] c_self_j / sum_{j != i} a[i, j]) Theta)`
/// with zero rows passing through as zero vectors.
pub fn aggregate_neighbors(tape: &mut Tape, c_self: Var, a_t: Var, theta: Var) -> Var {
    let norm = tape.row_normalize_no_diag(a_t);
    let mixed = tape.matmul(norm, c_self);
    let projected = tape.matmul(mixed, theta);
    tape.relu(projected)
}

/// Build the `[batch, 1, W]` tape constant for per-channel encoding of a
/// segment batch `[S, W, C]`: rows ordered `(segment, channel)`.
pub fn segments_to_channel_rows(tape: &mut Tape, segments: &ndarray::Array3<f32>) -> Var {
    let (n_seg, window, channels) = segments.dim();
    let mut out = Array3::zeros((n_seg * channels, 1, window));
    for s in 0..n_seg {
        for c in 0..channels {
            for w in 0..window {
                out[[s * channels + c, 0, w]] = segments[[s, w, c]] as f64;
            }
        }
    }
    tape.constant(out.into_dyn())
}

/// Build the `[S, C, W]` tape constant for whole-series convolution.
pub fn segments_to_multichannel(tape: &mut Tape, segments: &ndarray::Array3<f32>) -> Var {
    let (n_seg, window, channels) = segments.dim();
    let mut out = Array3::zeros((n_seg, channels, window));
    for s in 0..n_seg {
        for c in 0..channels {
            for w in 0..window {
                out[[s, c, w]] = segments[[s, w, c]] as f64;
            }
        }
    }
    tape.constant(out.into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, ArrayD};

    fn store_with_rng() -> (ParamStore, ChaCha12Rng) {
        (ParamStore::new(), crate::rng::stream(1, "layers-test", 0))
    }

    #[test]
    fn lstm_is_causal() {
        let (mut store, mut rng) = store_with_rng();
        let lstm = Lstm::new(&mut store, ParamGroup::Trunk, "ar", 3, 4, &mut rng);
        let x_base = ArrayD::from_shape_fn(vec![2, 3, 5], |_| {
            use rand::Rng;
            rng.random::<f64>() - 0.5
        });
        let mut x_mod = x_base.clone();
        // Perturb only the last time step.
        for b in 0..2 {
            for f in 0..3 {
                x_mod[[b, f, 4]] += 1.0;
            }
        }
        let run = |input: &ArrayD<f64>| {
            let mut tape = Tape::new();
            let vars = store.inject_frozen(&mut tape);
            let x = tape.constant(input.clone());
            let outs = lstm.forward_seq(&mut tape, &vars, x);
            outs.iter()
                .map(|&o| tape.value(o).clone())
                .collect::<Vec<_>>()
        };
        let base = run(&x_base);
        let modified = run(&x_mod);
        for t in 0..4 {
            assert_eq!(base[t], modified[t], "step {t} changed by future input");
        }
        assert_ne!(base[4], modified[4]);
    }

    #[test]
    fn lstm_single_step_matches_manual_cell() {
        let (mut store, mut rng) = store_with_rng();
        let lstm = Lstm::new(&mut store, ParamGroup::Trunk, "ar", 2, 3, &mut rng);
        let mut tape = Tape::new();
        let vars = store.inject_frozen(&mut tape);
        let x_data = arr2(&[[0.3, -0.7]]);
        let x = tape.constant(x_data.clone().into_dyn());
        let out = lstm.forward_steps(&mut tape, &vars, &[x]);
        let got = tape.value(out[0]).clone();

        // Manual unroll with h0 = c0 = 0.
        let wx = store.get("ar.wx");
        let bias = store.get("ar.b");
        for k in 0..3 {
            let mut gates = [0.0f64; 4];
            for (g, gate) in gates.iter_mut().enumerate() {
                let col = g * 3 + k;
                *gate = bias[[col]]
                    + x_data[[0, 0]] * wx[[0, col]]
                    + x_data[[0, 1]] * wx[[1, col]];
            }
            let sig = crate::nn::tape::sigmoid;
            let c = sig(gates[0]) * gates[2].tanh();
            let h = sig(gates[3]) * c.tanh();
            assert!((got[[0, k]] - h).abs() < 1e-12, "unit {k}");
        }
    }

    #[test]
    fn encoder_downsamples_by_ten() {
        let (mut store, mut rng) = store_with_rng();
        let enc = ConvEncoder::new(&mut store, "enc", 1, &[6, 6, 6], &mut rng);
        assert_eq!(enc.downsample, 10);
        let mut tape = Tape::new();
        let vars = store.inject_frozen(&mut tape);
        let x = tape.constant(ArrayD::zeros(vec![3, 1, 250]));
        let z = enc.forward(&mut tape, &vars, x);
        assert_eq!(tape.value(z).shape(), &[3, 6, 25]);
    }

    #[test]
    fn encoder_is_channel_equivariant() {
        let (mut store, mut rng) = store_with_rng();
        let enc = ConvEncoder::new(&mut store, "enc", 1, &[4, 4, 4], &mut rng);
        use rand::Rng;
        let segments = Array3::from_shape_fn((2, 40, 3), |_| rng.random::<f32>() - 0.5);
        let mut permuted = segments.clone();
        // Swap channels 0 and 2.
        for s in 0..2 {
            for w in 0..40 {
                permuted[[s, w, 0]] = segments[[s, w, 2]];
                permuted[[s, w, 2]] = segments[[s, w, 0]];
            }
        }
        let run = |seg: &Array3<f32>| {
            let mut tape = Tape::new();
            let vars = store.inject_frozen(&mut tape);
            let x = segments_to_channel_rows(&mut tape, seg);
            let z = enc.forward(&mut tape, &vars, x);
            tape.value(z).clone()
        };
        let base = run(&segments);
        let perm = run(&permuted);
        // Row (s, c) of the permuted run equals row (s, pi(c)) of the base run.
        let pi = [2usize, 1, 0];
        for s in 0..2 {
            for c in 0..3 {
                let a = perm.index_axis(ndarray::Axis(0), s * 3 + c);
                let b = base.index_axis(ndarray::Axis(0), s * 3 + pi[c]);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn zero_input_gives_identical_channels() {
        let (mut store, mut rng) = store_with_rng();
        let enc = ConvEncoder::new(&mut store, "enc", 1, &[4, 4, 4], &mut rng);
        let segments = Array3::zeros((1, 40, 3));
        let mut tape = Tape::new();
        let vars = store.inject_frozen(&mut tape);
        let x = segments_to_channel_rows(&mut tape, &segments);
        let z = enc.forward(&mut tape, &vars, x);
        let zv = tape.value(z);
        let first = zv.index_axis(ndarray::Axis(0), 0).to_owned();
        for c in 1..3 {
            assert_eq!(zv.index_axis(ndarray::Axis(0), c).to_owned(), first);
        }
    }

    #[test]
    fn mean_vars_pools_time() {
        let mut tape = Tape::new();
        let a = tape.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = tape.constant(arr2(&[[3.0, 6.0]]).into_dyn());
        let m = mean_vars(&mut tape, &[a, b]);
        assert_eq!(tape.value(m)[[0, 0]], 2.0);
        assert_eq!(tape.value(m)[[0, 1]], 4.0);
        let single = mean_vars(&mut tape, &[a]);
        assert_eq!(tape.value(single), tape.value(a));
    }

    #[test]
    fn bilinear_score_basis_vectors() {
        let mut tape = Tape::new();
        let c = tape.constant(ndarray::arr1(&[1.0, 0.0]).into_dyn());
        let z = tape.constant(ndarray::arr1(&[0.0, 1.0, 0.0]).into_dyn());
        let mut w = ndarray::Array2::zeros((2, 3));
        w[[0, 1]] = 5.0;
        let w = tape.constant(w.into_dyn());
        let s = bilinear_score(&mut tape, c, w, z);
        assert_eq!(tape.scalar(s), 5.0);
    }

    #[test]
    fn bilinear_score_matches_double_sum() {
        let mut rng = crate::rng::stream(2, "bilinear", 0);
        use rand::Rng;
        let c_data = ndarray::Array1::from_shape_fn(4, |_| rng.random::<f64>() - 0.5);
        let w_data = ndarray::Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
        let z_data = ndarray::Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let mut tape = Tape::new();
        let c = tape.constant(c_data.clone().into_dyn());
        let w = tape.constant(w_data.clone().into_dyn());
        let z = tape.constant(z_data.clone().into_dyn());
        let s = bilinear_score(&mut tape, c, w, z);
        let mut expected = 0.0;
        for a in 0..4 {
            for b in 0..3 {
                expected += c_data[a] * w_data[[a, b]] * z_data[b];
            }
        }
        assert!((tape.scalar(s) - expected).abs() < 1e-10);
    }

    #[test]
    fn zero_bilinear_matrix_scores_zero() {
        let mut tape = Tape::new();
        let c = tape.constant(ndarray::arr1(&[0.4, -0.2]).into_dyn());
        let z = tape.constant(ndarray::arr1(&[1.0, 2.0]).into_dyn());
        let w = tape.constant(ndarray::Array2::<f64>::zeros((2, 2)).into_dyn());
        let s = bilinear_score(&mut tape, c, w, z);
        assert_eq!(tape.scalar(s), 0.0);
    }

    #[test]
    fn aggregation_single_neighbor_cancels_weight() {
        let mut tape = Tape::new();
        let c_self = tape.constant(arr2(&[[1.0, 2.0], [0.5, -1.0]]).into_dyn());
        let a_t = tape.constant(arr2(&[[0.0, 0.7], [0.0, 0.0]]).into_dyn());
        let theta = tape.constant(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let out = aggregate_neighbors(&mut tape, c_self, a_t, theta);
        let v = tape.value(out);
        // Row 0 aggregates only channel 1; the 0.7 weight cancels.
        assert!((v[[0, 0]] - 0.5).abs() < 1e-12);
        assert_eq!(v[[0, 1]], 0.0); // ReLU clips the negative component
        // Row 1 has no incoming edges -> zero vector.
        assert_eq!(v[[1, 0]], 0.0);
        assert_eq!(v[[1, 1]], 0.0);
    }

    #[test]
    fn aggregation_is_scale_invariant_in_weights() {
        let mut rng = crate::rng::stream(3, "agg-scale", 0);
        use rand::Rng;
        let c_data = ndarray::Array2::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
        let theta_data = ndarray::Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        let mut a_data = ndarray::Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() + 0.5);
        for i in 0..3 {
            a_data[[i, i]] = 0.0;
        }
        let run = |a: &ndarray::Array2<f64>| {
            let mut tape = Tape::new();
            let c = tape.constant(c_data.clone().into_dyn());
            let at = tape.constant(a.clone().into_dyn());
            let th = tape.constant(theta_data.clone().into_dyn());
            let out = aggregate_neighbors(&mut tape, c, at, th);
            tape.value(out).clone()
        };
        let base = run(&a_data);
        let scaled = run(&(a_data.clone() * 3.0));
        for (x, y) in base.iter().zip(scaled.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_matches_bruteforce() {
        let mut rng = crate::rng::stream(4, "agg-brute", 0);
        use rand::Rng;
        let c_data = ndarray::Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() - 0.5);
        let theta_data = ndarray::Array2::from_shape_fn((2, 2), |_| rng.random::<f64>() - 0.5);
        let a_data = arr2(&[[0.0, 0.6, 0.9], [0.0, 0.0, 0.55], [0.7, 0.0, 0.0]]);
        let mut tape = Tape::new();
        let c = tape.constant(c_data.clone().into_dyn());
        let at = tape.constant(a_data.clone().into_dyn());
        let th = tape.constant(theta_data.clone().into_dyn());
        let out = aggregate_neighbors(&mut tape, c, at, th);
        let got = tape.value(out);
        for i in 0..3 {
            let weights: Vec<f64> = (0..3)
                .map(|j| if j == i { 0.0 } else { a_data[[i, j]] })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut mixed = [0.0f64; 2];
            for j in 0..3 {
                for k in 0..2 {
                    mixed[k] += weights[j] / total * c_data[[j, k]];
                }
            }
            for k in 0..2 {
                let mut pre = 0.0;
                for m in 0..2 {
                    pre += mixed[m] * theta_data[[m, k]];
                }
                let expected = pre.max(0.0);
                assert!((got[[i, k]] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn aggregation_invariant_to_neighbor_relabeling() {
        // Swap two neighbor channels (weights and vectors together); the
        // aggregated output for the target row must not change.
        let c_data = arr2(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]]);
        let a_data = arr2(&[[0.0, 0.8, 0.6], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let mut c_sw = c_data.clone();
        let mut a_sw = a_data.clone();
        for k in 0..2 {
            let tmp = c_sw[[1, k]];
            c_sw[[1, k]] = c_sw[[2, k]];
            c_sw[[2, k]] = tmp;
        }
        a_sw[[0, 1]] = 0.6;
        a_sw[[0, 2]] = 0.8;
        let theta_data = arr2(&[[0.9, -0.2], [0.1, 0.4]]);
        let run = |c: &ndarray::Array2<f64>, a: &ndarray::Array2<f64>| {
            let mut tape = Tape::new();
            let cv = tape.constant(c.clone().into_dyn());
            let av = tape.constant(a.clone().into_dyn());
            let tv = tape.constant(theta_data.clone().into_dyn());
            let out = aggregate_neighbors(&mut tape, cv, av, tv);
            tape.value(out).index_axis(ndarray::Axis(0), 0).to_owned()
        };
        let base = run(&c_data, &a_data);
        let swapped = run(&c_sw, &a_sw);
        for (x, y) in base.iter().zip(swapped.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

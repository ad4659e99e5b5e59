//! The shared SSL trunk: per-channel encoder, autoregressive summarizer,
//! and the task heads hanging off them.
//!
//! Channel aggregation is pluggable so the ablation variants can swap the
//! learned-graph path for an MLP mixer or drop it entirely, and the encoder
//! can run per channel (weight shared) or as one whole-series convolution
//! that expands to `C * d` kernels and splits.

use ndarray::Array3;

use crate::nn::layers::{
    segments_to_channel_rows, segments_to_multichannel, ConvEncoder, Linear, Lstm, Mlp,
};
use crate::nn::params::{ParamGroup, ParamStore, VarMap};
use crate::nn::tape::{Tape, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Local code width (encoder kernels).
    pub d: usize,
    /// Context width (summarizer hidden size).
    pub d_ar: usize,
    pub sigma_hidden: usize,
    pub delay_hidden: usize,
    pub replace_hidden: usize,
    pub detect_hidden: usize,
    pub k1_max: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 32,
            d_ar: 32,
            sigma_hidden: 64,
            delay_hidden: 64,
            replace_hidden: 64,
            detect_hidden: 64,
            k1_max: 8,
        }
    }
}

/// How neighbor context is built for the contrastive task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Learned-graph weighted mean plus linear map (the full model).
    Graph,
    /// Fixed-order MLP over all channels with the target slot zeroed.
    MlpAgg,
    /// No neighbor context; the context is the channel's own summary.
    SelfOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Shared-weight encoder applied to each channel separately.
    PerChannel,
    /// Whole-series convolution `C -> d -> d -> C * d`, split per channel.
    MultiChannelConv,
}

pub struct SslModel {
    pub dims: ModelDims,
    pub channels: usize,
    pub aggregation: AggregationMode,
    pub encoder_mode: EncoderMode,
    pub encoder: ConvEncoder,
    pub ar: Lstm,
    pub sigma_net: Option<Mlp>,
    pub theta: Option<Linear>,
    pub agg_mlp: Option<Linear>,
    /// One bilinear matrix per prediction step, `[context_dim, d]`.
    pub w_steps: Vec<String>,
    pub delay_head: Mlp,
    pub replace_head: Mlp,
}

impl SslModel {
    pub fn new(
        store: &mut ParamStore,
        dims: ModelDims,
        channels: usize,
        aggregation: AggregationMode,
        encoder_mode: EncoderMode,
        seed: u64,
    ) -> Self {
        let mut init_rng = rng::stream(seed, "init", 0);
        let encoder = match encoder_mode {
            EncoderMode::PerChannel => {
                ConvEncoder::new(store, "enc", 1, &[dims.d, dims.d, dims.d], &mut init_rng)
            }
            EncoderMode::MultiChannelConv => ConvEncoder::new(
                store,
                "enc",
                channels,
                &[dims.d, dims.d, channels * dims.d],
                &mut init_rng,
            ),
        };
        let ar = Lstm::new(
            store,
            ParamGroup::Trunk,
            "ar",
            dims.d,
            dims.d_ar,
            &mut init_rng,
        );
        let (sigma_net, theta) = if aggregation == AggregationMode::Graph {
            let sigma = Mlp::new(
                store,
                ParamGroup::Graph,
                "sigma",
                2 * dims.d_ar,
                dims.sigma_hidden,
                1,
                &mut init_rng,
            );
            let theta = Linear::new(
                store,
                ParamGroup::Graph,
                "theta",
                dims.d_ar,
                dims.d_ar,
                false,
                &mut init_rng,
            );
            (Some(sigma), Some(theta))
        } else {
            (None, None)
        };
        let agg_mlp = (aggregation == AggregationMode::MlpAgg).then(|| {
            Linear::new(
                store,
                ParamGroup::Graph,
                "agg",
                channels * dims.d_ar,
                dims.d_ar,
                true,
                &mut init_rng,
            )
        });
        let context_dim = match aggregation {
            AggregationMode::Graph | AggregationMode::MlpAgg => 2 * dims.d_ar,
            AggregationMode::SelfOnly => dims.d_ar,
        };
        let mut w_steps = Vec::with_capacity(dims.k1_max);
        for k in 1..=dims.k1_max {
            let name = format!("cpc.w{k}");
            store.register(
                &name,
                ParamGroup::CpcHeads,
                crate::nn::init::fan_in_uniform(&[context_dim, dims.d], context_dim, &mut init_rng),
            );
            w_steps.push(name);
        }
        let delay_head = Mlp::new(
            store,
            ParamGroup::DelayHead,
            "delay",
            2 * dims.d_ar,
            dims.delay_hidden,
            2,
            &mut init_rng,
        );
        let replace_head = Mlp::new(
            store,
            ParamGroup::ReplaceHead,
            "replace",
            dims.d_ar,
            dims.replace_hidden,
            1,
            &mut init_rng,
        );
        Self {
            dims,
            channels,
            aggregation,
            encoder_mode,
            encoder,
            ar,
            sigma_net,
            theta,
            agg_mlp,
            w_steps,
            delay_head,
            replace_head,
        }
    }

    pub fn context_dim(&self) -> usize {
        match self.aggregation {
            AggregationMode::Graph | AggregationMode::MlpAgg => 2 * self.dims.d_ar,
            AggregationMode::SelfOnly => self.dims.d_ar,
        }
    }

    /// Encode a segment batch `[S, W, C]` into local codes
    /// `[S * C, d, T]`, rows ordered `(segment, channel)`.
    pub fn encode(&self, tape: &mut Tape, vars: &VarMap, segments: &Array3<f32>) -> Var {
        let (n_seg, _, channels) = segments.dim();
        debug_assert_eq!(channels, self.channels);
        match self.encoder_mode {
            EncoderMode::PerChannel => {
                let x = segments_to_channel_rows(tape, segments);
                self.encoder.forward(tape, vars, x)
            }
            EncoderMode::MultiChannelConv => {
                let x = segments_to_multichannel(tape, segments);
                let z = self.encoder.forward(tape, vars, x);
                // [S, C * d, T] -> [S * C, d, T]; the layouts coincide.
                let t_len = tape.value(z).shape()[2];
                tape.reshape(z, vec![n_seg * channels, self.dims.d, t_len])
            }
        }
    }

    /// Summarize local codes causally; one `[S * C, d_ar]` matrix per step.
    pub fn contextualize(&self, tape: &mut Tape, vars: &VarMap, z: Var) -> Vec<Var> {
        self.ar.forward_seq(tape, vars, z)
    }
}

/// Everything downstream of one encode + summarize pass.
pub struct ContextForward {
    /// Local codes `[S * C, d, T]`.
    pub z: Var,
    /// Local codes flattened to rows `[(S * C * T), d]` in slot order
    /// `(segment, channel, time)`.
    pub z_rows: Var,
    /// Contextual summaries per time step, `[S * C, d_ar]` each.
    pub c_self_steps: Vec<Var>,
    pub n_seg: usize,
    pub channels: usize,
    pub t_len: usize,
}

impl SslModel {
    pub fn forward_context(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        segments: &Array3<f32>,
    ) -> ContextForward {
        let (n_seg, _, channels) = segments.dim();
        let z = self.encode(tape, vars, segments);
        let t_len = tape.value(z).shape()[2];
        let by_time = tape.permute3(z, [0, 2, 1]);
        let z_rows = tape.reshape(by_time, vec![n_seg * channels * t_len, self.dims.d]);
        let c_self_steps = self.contextualize(tape, vars, z);
        ContextForward {
            z,
            z_rows,
            c_self_steps,
            n_seg,
            channels,
            t_len,
        }
    }

    /// Flat row index of local-code slot `(segment, channel, time)`.
    pub fn slot_index(&self, t_len: usize, seg: usize, channel: usize, time: usize) -> usize {
        (seg * self.channels + channel) * t_len + time
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::mean_vars;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_model(aggregation: AggregationMode) -> (ParamStore, SslModel) {
        let mut store = ParamStore::new();
        let dims = ModelDims {
            d: 4,
            d_ar: 4,
            sigma_hidden: 8,
            delay_hidden: 8,
            replace_hidden: 8,
            detect_hidden: 8,
            k1_max: 2,
        };
        let model = SslModel::new(
            &mut store,
            dims,
            3,
            aggregation,
            EncoderMode::PerChannel,
            7,
        );
        (store, model)
    }

    #[test]
    fn context_is_causal_through_the_stack() {
        let (store, model) = tiny_model(AggregationMode::SelfOnly);
        let mut rng = crate::rng::stream(1, "model-test", 0);
        let base = Array3::from_shape_fn((1, 60, 3), |_| rng.random::<f32>() - 0.5);
        let mut altered = base.clone();
        // Change the last 10 raw samples: only late encoded steps may differ.
        for w in 50..60 {
            for c in 0..3 {
                altered[[0, w, c]] += 1.0;
            }
        }
        let run = |segments: &Array3<f32>| {
            let mut tape = Tape::new();
            let vars = store.inject_frozen(&mut tape);
            let fwd = model.forward_context(&mut tape, &vars, segments);
            fwd.c_self_steps
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect::<Vec<_>>()
        };
        let a = run(&base);
        let b = run(&altered);
        assert_eq!(a[0], b[0], "first context step saw future input");
        assert_ne!(a[a.len() - 1], b[b.len() - 1]);
    }

    #[test]
    fn pooling_of_constant_context_is_identity() {
        let mut tape = Tape::new();
        let step = tape.constant(ndarray::arr2(&[[0.5, -1.5]]).into_dyn());
        let pooled = mean_vars(&mut tape, &[step, step, step]);
        assert_eq!(tape.value(pooled), tape.value(step));
    }

    #[test]
    fn pooling_matches_elementwise_mean() {
        let mut rng = crate::rng::stream(2, "pool-test", 0);
        let arrays: Vec<ndarray::ArrayD<f64>> = (0..4)
            .map(|_| {
                ndarray::ArrayD::from_shape_fn(vec![2, 3], |_| rng.random::<f64>() - 0.5)
            })
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = arrays.iter().map(|a| tape.constant(a.clone())).collect();
        let pooled = mean_vars(&mut tape, &vars);
        for idx in 0..6 {
            let flat_expected: f64 =
                arrays.iter().map(|a| a.as_slice().unwrap()[idx]).sum::<f64>() / 4.0;
            let got = tape.value(pooled).as_slice().unwrap()[idx];
            assert!((got - flat_expected).abs() < 1e-12);
        }
    }

    #[test]
    fn multichannel_conv_reshape_is_consistent() {
        let mut store = ParamStore::new();
        let dims = ModelDims {
            d: 4,
            d_ar: 4,
            sigma_hidden: 8,
            delay_hidden: 8,
            replace_hidden: 8,
            detect_hidden: 8,
            k1_max: 2,
        };
        let model = SslModel::new(
            &mut store,
            dims,
            3,
            AggregationMode::SelfOnly,
            EncoderMode::MultiChannelConv,
            7,
        );
        let segments = Array3::zeros((2, 40, 3));
        let mut tape = Tape::new();
        let vars = store.inject_frozen(&mut tape);
        let z = model.encode(&mut tape, &vars, &segments);
        assert_eq!(tape.value(z).shape(), &[6, 4, 4]);
    }

    #[test]
    fn registration_is_deterministic() {
        let (store_a, _) = tiny_model(AggregationMode::Graph);
        let (store_b, _) = tiny_model(AggregationMode::Graph);
        assert_eq!(store_a.len(), store_b.len());
        for (a, b) in store_a.entries().iter().zip(store_b.entries()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

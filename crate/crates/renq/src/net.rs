//! The dueling distributional Q-network: two conv layers feeding noisy
//! value/advantage heads over the atom support.
//!
//! Two forward routes share the same kernels so their outputs are
//! bit-identical: a no-graph evaluation path (action selection, target
//! computation) and a taped path used for training.

use crate::distributional::{noise_scale, NoisyLinearParams};
use crate::rng::Rng64;
use crate::tensor::tape::{dueling_combine_raw, Graph, NodeId};
use crate::tensor::{
    conv_out_dim, conv_valid_direct, conv_valid_direct_batched, dense_forward_t,
    from_batch_innermost, noisy_bias, noisy_weight_t, relu, softmax_row, to_batch_innermost,
    Padding, ParamSet, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub hidden: usize,
    pub actions: usize,
    pub atoms: usize,
    pub sigma0: f64,
}

impl NetConfig {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let h1 = conv_out_dim(self.frame_h, self.conv1.kernel, self.conv1.stride, Padding::Valid);
        let w1 = conv_out_dim(self.frame_w, self.conv1.kernel, self.conv1.stride, Padding::Valid);
        let h2 = conv_out_dim(h1, self.conv2.kernel, self.conv2.stride, Padding::Valid);
        let w2 = conv_out_dim(w1, self.conv2.kernel, self.conv2.stride, Padding::Valid);
        (self.conv2.channels, h2, w2)
    }

    pub fn z_flat_len(&self) -> usize {
        let (c, h, w) = self.latent_shape();
        c * h * w
    }
}

// Parameter indices within the QNet ParamSet.
const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const A1: usize = 4; // noisy blocks occupy 4 slots: mu_w, sigma_w, mu_b, sigma_b
const A2: usize = 8;
const V1: usize = 12;
const V2: usize = 16;
pub const QNET_PARAM_COUNT: usize = 20;

/// Factorized noise factors for the four noisy layers, in layer order
/// a1, a2, v1, v2. Each entry holds (f(eps_in), f(eps_out)).
#[derive(Debug, Clone, PartialEq)]
pub struct QNoise {
    pub layers: [(Vec<f64>, Vec<f64>); 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub cfg: NetConfig,
    pub params: ParamSet,
}

impl QNet {
    pub fn init(cfg: NetConfig, rng: &mut Rng64) -> Self {
        let mut params = ParamSet::new();
        let c1 = cfg.conv1;
        let c2 = cfg.conv2;
        let mut w1 = Tensor::zeros(vec![c1.channels, cfg.in_channels, c1.kernel, c1.kernel]);
        let fan_in1 = cfg.in_channels * c1.kernel * c1.kernel;
        w1.fill_xavier(fan_in1, c1.channels * c1.kernel * c1.kernel, rng);
        params.add("conv1.w", w1);
        params.add("conv1.b", Tensor::zeros(vec![c1.channels]));
        let mut w2 = Tensor::zeros(vec![c2.channels, c1.channels, c2.kernel, c2.kernel]);
        let fan_in2 = c1.channels * c2.kernel * c2.kernel;
        w2.fill_xavier(fan_in2, c2.channels * c2.kernel * c2.kernel, rng);
        params.add("conv2.w", w2);
        params.add("conv2.b", Tensor::zeros(vec![c2.channels]));

        let z = cfg.z_flat_len();
        let mut add_noisy = |name: &str, out_dim: usize, in_dim: usize, rng: &mut Rng64| {
            let p = NoisyLinearParams::init(out_dim, in_dim, cfg.sigma0, rng);
            params.add(&format!("{name}.mu_w"), p.mu_w);
            params.add(&format!("{name}.sigma_w"), p.sigma_w);
            params.add(&format!("{name}.mu_b"), p.mu_b);
            params.add(&format!("{name}.sigma_b"), p.sigma_b);
        };
        add_noisy("a1", cfg.hidden, z, rng);
        add_noisy("a2", cfg.actions * cfg.atoms, cfg.hidden, rng);
        add_noisy("v1", cfg.hidden, z, rng);
        add_noisy("v2", cfg.atoms, cfg.hidden, rng);
        assert_eq!(params.len(), QNET_PARAM_COUNT);
        QNet { cfg, params }
    }

    pub fn copy_params_from(&mut self, other: &QNet) {
        self.params.copy_from(&other.params);
    }

    /// Draw fresh factorized noise for all noisy layers, in layer order.
    pub fn sample_noise(cfg: &NetConfig, rng: &mut Rng64) -> QNoise {
        let z = cfg.z_flat_len();
        let dims = [
            (z, cfg.hidden),
            (cfg.hidden, cfg.actions * cfg.atoms),
            (z, cfg.hidden),
            (cfg.hidden, cfg.atoms),
        ];
        let mut layers: [(Vec<f64>, Vec<f64>); 4] = Default::default();
        for (slot, &(in_dim, out_dim)) in dims.iter().enumerate() {
            let mut f_in = vec![0.0; in_dim];
            for v in f_in.iter_mut() {
                *v = noise_scale(rng.normal());
            }
            let mut f_out = vec![0.0; out_dim];
            for v in f_out.iter_mut() {
                *v = noise_scale(rng.normal());
            }
            layers[slot] = (f_in, f_out);
        }
        QNoise { layers }
    }

    fn noisy_eval(
        &self,
        base: usize,
        x: &[f64],
        batch: usize,
        noise: Option<&(Vec<f64>, Vec<f64>)>,
        out: &mut Vec<f64>,
        wt_scratch: &mut Vec<f64>,
    ) {
        let mu_w = self.params.get(base);
        let sigma_w = self.params.get(base + 1);
        let mu_b = self.params.get(base + 2);
        let sigma_b = self.params.get(base + 3);
        let (o, i) = (mu_w.shape()[0], mu_w.shape()[1]);
        debug_assert_eq!(x.len(), batch * i);
        out.clear();
        out.resize(batch * o, 0.0);
        let n = noise.map(|(fi, fo)| (fi.as_slice(), fo.as_slice()));
        noisy_weight_t(mu_w.data(), sigma_w.data(), o, i, n, wt_scratch);
        let b_eff = noisy_bias(mu_b.data(), sigma_b.data(), n.map(|(_, fo)| fo));
        dense_forward_t(out, x, wt_scratch, &b_eff, batch, i, o);
    }

    /// Conv trunk: stacked frames to the flat latent `[batch x z]`.
    /// Direct convolution; bit-identical to the taped im2col route.
    pub fn trunk_eval(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let (c_in, h, w) = (cfg.in_channels, cfg.frame_h, cfg.frame_w);
        let c1 = cfg.conv1;
        let c2 = cfg.conv2;
        let h1 = conv_out_dim(h, c1.kernel, c1.stride, Padding::Valid);
        let w1d = conv_out_dim(w, c1.kernel, c1.stride, Padding::Valid);
        let h2 = conv_out_dim(h1, c2.kernel, c2.stride, Padding::Valid);
        let w2d = conv_out_dim(w1d, c2.kernel, c2.stride, Padding::Valid);
        let patch1 = h1 * w1d;
        let patch2 = h2 * w2d;
        let w1 = self.params.get(CONV1_W).data();
        let b1 = self.params.get(CONV1_B).data();
        let w2 = self.params.get(CONV2_W).data();
        let b2 = self.params.get(CONV2_B).data();
        if batch >= 4 {
            // batch-innermost layout so every conv tap vectorizes over items
            let mut xt = vec![0.0; batch * c_in * h * w];
            to_batch_innermost(x, batch, c_in * h * w, &mut xt);
            let mut y1 = vec![0.0; c1.channels * patch1 * batch];
            conv_valid_direct_batched(
                &xt, c_in, h, w, w1, b1, c1.channels, c1.kernel, c1.kernel, c1.stride, batch,
                &mut y1,
            );
            for v in y1.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let mut y2 = vec![0.0; c2.channels * patch2 * batch];
            conv_valid_direct_batched(
                &y1, c1.channels, h1, w1d, w2, b2, c2.channels, c2.kernel, c2.kernel,
                c2.stride, batch, &mut y2,
            );
            for v in y2.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let mut out = vec![0.0; batch * c2.channels * patch2];
            from_batch_innermost(&y2, batch, c2.channels * patch2, &mut out);
            return out;
        }
        let mut y1 = vec![0.0; c1.channels * patch1];
        let mut out = vec![0.0; batch * c2.channels * patch2];
        for bi in 0..batch {
            conv_valid_direct(
                &x[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                c_in,
                h,
                w,
                w1,
                b1,
                c1.channels,
                c1.kernel,
                c1.kernel,
                c1.stride,
                &mut y1,
            );
            for v in y1.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let dst = &mut out[bi * c2.channels * patch2..(bi + 1) * c2.channels * patch2];
            conv_valid_direct(
                &y1,
                c1.channels,
                h1,
                w1d,
                w2,
                b2,
                c2.channels,
                c2.kernel,
                c2.kernel,
                c2.stride,
                dst,
            );
            for v in dst.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        out
    }

    /// Per-atom logits `[batch x actions*atoms]` after dueling combination.
    pub fn logits_eval(&self, x: &[f64], batch: usize, noise: Option<&QNoise>) -> Vec<f64> {
        let z = self.trunk_eval(x, batch);
        self.logits_from_latent(&z, batch, noise)
    }

    /// Heads only, starting from the flat latent.
    pub fn logits_from_latent(&self, z: &[f64], batch: usize, noise: Option<&QNoise>) -> Vec<f64> {
        let cfg = &self.cfg;
        let pick = |i: usize| noise.map(|n| &n.layers[i]);
        let mut wt = Vec::new();
        let mut a_hidden = Vec::new();
        self.noisy_eval(A1, z, batch, pick(0), &mut a_hidden, &mut wt);
        let mut tmp = vec![0.0; a_hidden.len()];
        relu(&a_hidden, &mut tmp);
        let mut adv = Vec::new();
        self.noisy_eval(A2, &tmp, batch, pick(1), &mut adv, &mut wt);
        let mut v_hidden = Vec::new();
        self.noisy_eval(V1, z, batch, pick(2), &mut v_hidden, &mut wt);
        let mut tmp2 = vec![0.0; v_hidden.len()];
        relu(&v_hidden, &mut tmp2);
        let mut val = Vec::new();
        self.noisy_eval(V2, &tmp2, batch, pick(3), &mut val, &mut wt);
        let mut out = vec![0.0; batch * cfg.actions * cfg.atoms];
        dueling_combine_raw(&val, &adv, batch, cfg.actions, cfg.atoms, &mut out);
        out
    }

    /// Per-action probabilities `[batch x actions x atoms]`.
    pub fn probs_eval(&self, x: &[f64], batch: usize, noise: Option<&QNoise>) -> Vec<f64> {
        let logits = self.logits_eval(x, batch, noise);
        let k = self.cfg.atoms;
        let mut probs = vec![0.0; logits.len()];
        for (prow, lrow) in probs.chunks_exact_mut(k).zip(logits.chunks_exact(k)) {
            softmax_row(lrow, prow);
        }
        probs
    }

    fn trunk_tape(&self, g: &mut Graph, x: NodeId, param_ids: &[NodeId]) -> (NodeId, NodeId) {
        let cfg = &self.cfg;
        let c1 = g.conv2d(x, param_ids[CONV1_W], param_ids[CONV1_B], cfg.conv1.stride, Padding::Valid);
        let r1 = g.relu(c1);
        let c2 = g.conv2d(r1, param_ids[CONV2_W], param_ids[CONV2_B], cfg.conv2.stride, Padding::Valid);
        let z_map = g.relu(c2);
        let batch = g.value(x).shape()[0];
        let z_flat = g.reshape(z_map, vec![batch, cfg.z_flat_len()]);
        (z_map, z_flat)
    }

    /// Taped forward; leaves for every parameter are inserted and their node
    /// ids returned aligned with the ParamSet order. `second_input` runs an
    /// extra trunk pass (sharing the same parameter leaves) whose flat latent
    /// is returned for heads that differentiate through both encoders.
    pub fn forward_tape(
        &self,
        g: &mut Graph,
        x: NodeId,
        noise: Option<&QNoise>,
        want_reward_inputs: bool,
        second_input: Option<NodeId>,
    ) -> QTapeForward {
        let cfg = &self.cfg;
        let param_ids: Vec<NodeId> = self
            .params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect();
        let (z_map, z_flat) = self.trunk_tape(g, x, &param_ids);
        let second_z_flat = second_input.map(|x2| self.trunk_tape(g, x2, &param_ids).1);

        let noisy = |g: &mut Graph, base: usize, input: NodeId, slot: usize| -> NodeId {
            let n = noise.map(|n| {
                let (f_in, f_out) = &n.layers[slot];
                (f_in.as_slice(), f_out.as_slice())
            });
            g.noisy_linear(
                input,
                param_ids[base],
                param_ids[base + 1],
                param_ids[base + 2],
                param_ids[base + 3],
                n,
            )
        };
        let a_hidden = noisy(g, A1, z_flat, 0);
        let a_act = g.relu(a_hidden);
        let adv = noisy(g, A2, a_act, 1);
        let v_hidden = noisy(g, V1, z_flat, 2);
        let v_act = g.relu(v_hidden);
        let val = noisy(g, V2, v_act, 3);
        let logits = g.dueling_combine(val, adv, cfg.actions, cfg.atoms);

        // Reward head inputs: noise-zeroed first-layer activations.
        let (adv1_zeroed, v1_zeroed) = if want_reward_inputs {
            let a1z = g.noisy_linear(
                z_flat,
                param_ids[A1],
                param_ids[A1 + 1],
                param_ids[A1 + 2],
                param_ids[A1 + 3],
                None,
            );
            let v1z = g.noisy_linear(
                z_flat,
                param_ids[V1],
                param_ids[V1 + 1],
                param_ids[V1 + 2],
                param_ids[V1 + 3],
                None,
            );
            (Some(a1z), Some(v1z))
        } else {
            (None, None)
        };

        QTapeForward { logits, z_map, z_flat, second_z_flat, adv1_zeroed, v1_zeroed, param_ids }
    }
}

/// Node handles produced by a taped Q-network forward.
pub struct QTapeForward {
    pub logits: NodeId,
    pub z_map: NodeId,
    pub z_flat: NodeId,
    pub second_z_flat: Option<NodeId>,
    pub adv1_zeroed: Option<NodeId>,
    pub v1_zeroed: Option<NodeId>,
    pub param_ids: Vec<NodeId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny_cfg() -> NetConfig {
        NetConfig {
            in_channels: 4,
            frame_h: 8,
            frame_w: 8,
            conv1: ConvSpec { channels: 3, kernel: 3, stride: 2 },
            conv2: ConvSpec { channels: 4, kernel: 2, stride: 1 },
            hidden: 6,
            actions: 3,
            atoms: 5,
            sigma0: 0.1,
        }
    }

    #[test]
    fn eval_and_tape_forward_agree_bitwise() {
        let mut rng = Rng64::seeded(10);
        let cfg = tiny_cfg();
        let net = QNet::init(cfg, &mut rng);
        let batch = 3;
        let n = batch * cfg.in_channels * cfg.frame_h * cfg.frame_w;
        let xs: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let noise = QNet::sample_noise(&cfg, &mut rng);
        for pick in [None, Some(&noise)] {
            let ev = net.logits_eval(&xs, batch, pick);
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(
                vec![batch, cfg.in_channels, cfg.frame_h, cfg.frame_w],
                xs.clone(),
            ));
            let f = net.forward_tape(&mut g, x, pick, false, None);
            assert_eq!(g.value(f.logits).data(), ev.as_slice());
        }
    }

    #[test]
    fn probs_rows_sum_to_one() {
        let mut rng = Rng64::seeded(11);
        let cfg = tiny_cfg();
        let net = QNet::init(cfg, &mut rng);
        let n = 2 * cfg.in_channels * cfg.frame_h * cfg.frame_w;
        let xs: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let probs = net.probs_eval(&xs, 2, None);
        for row in probs.chunks_exact(cfg.atoms) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let a = QNet::init(cfg, &mut Rng64::seeded(5));
        let b = QNet::init(cfg, &mut Rng64::seeded(5));
        for (x, y) in a.params.tensors().iter().zip(b.params.tensors().iter()) {
            assert_eq!(x.data(), y.data());
        }
    }
}

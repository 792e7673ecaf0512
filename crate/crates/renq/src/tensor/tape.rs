//! Reverse-mode differentiation over a flat op tape.
//!
//! A [`Graph`] records each forward op in execution order, so nodes are
//! already topologically sorted; `backward` walks the record in reverse and
//! accumulates gradients into leaf tensors. Forward values are computed with
//! the same kernels as the no-grad evaluation paths, which keeps the two
//! routes bit-identical.

use super::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = x W^T + b, inputs [x, w, b]
    Linear,
    /// y = x (mu_w + sigma_w * eps_w)^T + (mu_b + sigma_b * eps_b)
    /// inputs [x, mu_w, sigma_w, mu_b, sigma_b]; eps factors and the
    /// transposed effective weight [in x out] are saved for the backward.
    NoisyLinear {
        f_in: Option<Vec<f64>>,
        f_out: Option<Vec<f64>>,
        wt_eff: Vec<f64>,
    },
    /// inputs [x, w, b]; im2col buffers saved per batch element.
    Conv2d {
        stride: usize,
        padding: Padding,
        cols: Vec<Vec<f64>>,
    },
    Relu,
    Add,
    /// Concatenate two 2-d tensors along columns; split point saved.
    ConcatCols { left_cols: usize },
    /// Concatenate two 4-d tensors along channels; split point saved.
    ConcatChannels { left_ch: usize },
    Reshape,
    /// out[b] = in[b, act[b]*k .. act[b]*k + k]
    SelectActionBlock { actions: Vec<usize>, atoms: usize },
    /// Dueling per-atom combine of value [B x K] and advantage [B x A*K].
    DuelingCombine { actions: usize, atoms: usize },
    /// Mean over every element of smooth-L1(pred - target).
    SmoothL1Loss { target: Vec<f64> },
    /// Mean over every element of (pred - target)^2.
    MseLoss { target: Vec<f64> },
    /// (1/B) sum_b w_b KL[t_b || softmax(x_b)]; softmax rows saved.
    KlCatLoss {
        targets: Vec<f64>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        per_sample: Vec<f64>,
    },
    /// (1/B) sum_b CE(t_b, softmax(x_b)) with soft targets.
    SoftCeLoss { targets: Vec<f64>, probs: Vec<f64> },
    /// (1/B) sum_b -log softmax(x_b)[label_b]
    HardCeLoss { labels: Vec<usize>, probs: Vec<f64> },
    /// (1/B) sum_b w_b KL[t_b || (1/M) sum_m softmax(x_m,b)]
    MixtureKlLoss {
        targets: Vec<f64>,
        weights: Vec<f64>,
        member_probs: Vec<Vec<f64>>,
        mixture: Vec<f64>,
        per_sample: Vec<f64>,
    },
    /// Scalar sum_i coeff_i * input_i
    WeightedSum { coeffs: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Op tape: topologically ordered records over leaf parameters.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()), "acyclic by construction");
        self.nodes.push(Node { op, inputs, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf. Gradients are produced only for leaves whose tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let mut t = t;
        t.requires_grad = false;
        self.push(Op::Leaf, vec![], t)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = linear_forward(self.value(x), self.value(w), self.value(b));
        self.push(Op::Linear, vec![x, w, b], y)
    }

    /// Noisy linear with factorized noise factors `f(eps)` already applied.
    /// `None` noise runs the layer with mean weights only.
    pub fn noisy_linear(
        &mut self,
        x: NodeId,
        mu_w: NodeId,
        sigma_w: NodeId,
        mu_b: NodeId,
        sigma_b: NodeId,
        noise: Option<(&[f64], &[f64])>,
    ) -> NodeId {
        let (xs, mw, sw, mb, sb) = (
            self.value(x),
            self.value(mu_w),
            self.value(sigma_w),
            self.value(mu_b),
            self.value(sigma_b),
        );
        let (out_dim, in_dim) = (mw.shape()[0], mw.shape()[1]);
        assert_eq!(mw.shape(), sw.shape(), "sigma/mu weight shape mismatch");
        assert_eq!(mb.shape(), sb.shape(), "sigma/mu bias shape mismatch");
        if let Some((fi, fo)) = noise {
            assert_eq!(fi.len(), in_dim);
            assert_eq!(fo.len(), out_dim);
        }
        let mut wt_eff = Vec::new();
        noisy_weight_t(mw.data(), sw.data(), out_dim, in_dim, noise, &mut wt_eff);
        let b_eff = noisy_bias(mb.data(), sb.data(), noise.map(|(_, fo)| fo));
        let batch = xs.shape()[0];
        assert_eq!(xs.shape()[1], in_dim, "noisy linear input dim mismatch");
        let mut y = Tensor::zeros(vec![batch, out_dim]);
        dense_forward_t(y.data_mut(), xs.data(), &wt_eff, &b_eff, batch, in_dim, out_dim);
        let (f_in, f_out) = match noise {
            Some((fi, fo)) => (Some(fi.to_vec()), Some(fo.to_vec())),
            None => (None, None),
        };
        self.push(
            Op::NoisyLinear { f_in, f_out, wt_eff },
            vec![x, mu_w, sigma_w, mu_b, sigma_b],
            y,
        )
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: Padding,
    ) -> NodeId {
        let xs = self.value(x);
        let ws = self.value(w);
        let (batch, c, h, wd) = (xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]);
        let (oc, _, kh, kw) = (ws.shape()[0], ws.shape()[1], ws.shape()[2], ws.shape()[3]);
        let oh = conv_out_dim(h, kh, stride, padding);
        let ow = conv_out_dim(wd, kw, stride, padding);
        let ck = c * kh * kw;
        let patch = oh * ow;
        let mut cols_all = Vec::with_capacity(batch);
        let mut out = Tensor::zeros(vec![batch, oc, oh, ow]);
        {
            let xd = xs.data();
            let wdat = ws.data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let mut cols = vec![0.0; ck * patch];
                im2col(
                    &xd[bi * c * h * wd..(bi + 1) * c * h * wd],
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    padding,
                    &mut cols,
                );
                let obase = bi * oc * patch;
                for o in 0..oc {
                    out.data_mut()[obase + o * patch..obase + (o + 1) * patch].fill(bd[o]);
                }
                acc_matmul_nn(
                    &mut out.data_mut()[obase..obase + oc * patch],
                    wdat,
                    &cols,
                    oc,
                    ck,
                    patch,
                );
                cols_all.push(cols);
            }
        }
        self.push(Op::Conv2d { stride, padding, cols: cols_all }, vec![x, w, b], out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x);
        let mut out = Tensor::zeros(xs.shape().to_vec());
        relu(xs.data(), out.data_mut());
        self.push(Op::Relu, vec![x], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(Op::Add, vec![a, b], out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 2);
        assert_eq!(bv.shape().len(), 2);
        assert_eq!(av.shape()[0], bv.shape()[0], "concat batch mismatch");
        let (batch, fa, fb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Tensor::zeros(vec![batch, fa + fb]);
        for bi in 0..batch {
            out.data_mut()[bi * (fa + fb)..bi * (fa + fb) + fa]
                .copy_from_slice(&av.data()[bi * fa..(bi + 1) * fa]);
            out.data_mut()[bi * (fa + fb) + fa..(bi + 1) * (fa + fb)]
                .copy_from_slice(&bv.data()[bi * fb..(bi + 1) * fb]);
        }
        self.push(Op::ConcatCols { left_cols: fa }, vec![a, b], out)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 4);
        assert_eq!(bv.shape().len(), 4);
        assert_eq!(av.shape()[0], bv.shape()[0]);
        assert_eq!(av.shape()[2..], bv.shape()[2..], "concat spatial mismatch");
        let (batch, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let hw = av.shape()[2] * av.shape()[3];
        let mut out = Tensor::zeros(vec![batch, ca + cb, av.shape()[2], av.shape()[3]]);
        for bi in 0..batch {
            let dst = &mut out.data_mut()[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&av.data()[bi * ca * hw..(bi + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&bv.data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        self.push(Op::ConcatChannels { left_ch: ca }, vec![a, b], out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let out = self.value(x).reshaped(shape);
        self.push(Op::Reshape, vec![x], out)
    }

    /// Select the K-atom block of the taken action out of `[B x A*K]` logits.
    pub fn select_action_block(&mut self, x: NodeId, actions: &[usize], atoms: usize) -> NodeId {
        let xs = self.value(x);
        let batch = xs.shape()[0];
        assert_eq!(batch, actions.len());
        let width = xs.shape()[1];
        assert_eq!(width % atoms, 0);
        let mut out = Tensor::zeros(vec![batch, atoms]);
        for (bi, &a) in actions.iter().enumerate() {
            assert!(a * atoms + atoms <= width, "action {a} out of range");
            out.data_mut()[bi * atoms..(bi + 1) * atoms]
                .copy_from_slice(&xs.data()[bi * width + a * atoms..bi * width + (a + 1) * atoms]);
        }
        self.push(
            Op::SelectActionBlock { actions: actions.to_vec(), atoms },
            vec![x],
            out,
        )
    }

    /// Per-atom dueling aggregation producing `[B x A*K]` logits.
    pub fn dueling_combine(&mut self, v: NodeId, adv: NodeId, actions: usize, atoms: usize) -> NodeId {
        let (vv, av) = (self.value(v), self.value(adv));
        let batch = vv.shape()[0];
        assert_eq!(vv.shape(), &[batch, atoms], "value head shape");
        assert_eq!(av.shape(), &[batch, actions * atoms], "advantage head shape");
        let mut out = Tensor::zeros(vec![batch, actions * atoms]);
        dueling_combine_raw(
            vv.data(),
            av.data(),
            batch,
            actions,
            atoms,
            out.data_mut(),
        );
        self.push(Op::DuelingCombine { actions, atoms }, vec![v, adv], out)
    }

    /// Mean squared error against a fixed target.
    pub fn mse_loss(&mut self, pred: NodeId, target: &[f64]) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.numel(), target.len(), "mse target length");
        let mut acc = 0.0;
        for (&p, &t) in pv.data().iter().zip(target.iter()) {
            acc += (p - t) * (p - t);
        }
        let out = Tensor::scalar(acc / target.len() as f64);
        self.push(Op::MseLoss { target: target.to_vec() }, vec![pred], out)
    }

    /// Mean over all elements of the Huber loss against a fixed target.
    pub fn smooth_l1_loss(&mut self, pred: NodeId, target: &[f64]) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.numel(), target.len(), "smooth l1 target length");
        let mut acc = 0.0;
        for (&p, &t) in pv.data().iter().zip(target.iter()) {
            acc += loss_smooth_l1(p, t);
        }
        let out = Tensor::scalar(acc / target.len() as f64);
        self.push(Op::SmoothL1Loss { target: target.to_vec() }, vec![pred], out)
    }

    /// Importance-weighted mean KL divergence; also records per-sample KL for
    /// priority updates (retrievable with [`Graph::per_sample_losses`]).
    pub fn kl_categorical_loss(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        weights: &[f64],
    ) -> NodeId {
        let xs = self.value(logits);
        let batch = xs.shape()[0];
        let k = xs.shape()[1];
        assert_eq!(targets.len(), batch * k);
        assert_eq!(weights.len(), batch);
        let mut probs = vec![0.0; batch * k];
        let mut per_sample = vec![0.0; batch];
        let mut total = 0.0;
        for bi in 0..batch {
            let row = &xs.data()[bi * k..(bi + 1) * k];
            let trow = &targets[bi * k..(bi + 1) * k];
            validate_distribution(trow);
            let mut ls = vec![0.0; k];
            log_softmax_row(row, &mut ls);
            for (p, &l) in probs[bi * k..(bi + 1) * k].iter_mut().zip(ls.iter()) {
                *p = l.exp();
            }
            let mut kl = 0.0;
            for (&t, &l) in trow.iter().zip(ls.iter()) {
                if t > 0.0 {
                    kl += t * (t.ln() - l);
                }
            }
            per_sample[bi] = kl;
            total += weights[bi] * kl;
        }
        let out = Tensor::scalar(total / batch as f64);
        self.push(
            Op::KlCatLoss {
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                per_sample,
            },
            vec![logits],
            out,
        )
    }

    /// Mean soft-target cross entropy over the batch.
    pub fn soft_ce_loss(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let xs = self.value(logits);
        let batch = xs.shape()[0];
        let k = xs.shape()[1];
        assert_eq!(targets.len(), batch * k);
        let mut probs = vec![0.0; batch * k];
        let mut total = 0.0;
        for bi in 0..batch {
            let row = &xs.data()[bi * k..(bi + 1) * k];
            let trow = &targets[bi * k..(bi + 1) * k];
            let mut ls = vec![0.0; k];
            log_softmax_row(row, &mut ls);
            for (p, &l) in probs[bi * k..(bi + 1) * k].iter_mut().zip(ls.iter()) {
                *p = l.exp();
            }
            for (&t, &l) in trow.iter().zip(ls.iter()) {
                total -= t * l;
            }
        }
        let out = Tensor::scalar(total / batch as f64);
        self.push(Op::SoftCeLoss { targets: targets.to_vec(), probs }, vec![logits], out)
    }

    /// Mean hard-label cross entropy over the batch.
    pub fn hard_ce_loss(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let xs = self.value(logits);
        let batch = xs.shape()[0];
        let k = xs.shape()[1];
        assert_eq!(labels.len(), batch);
        let mut probs = vec![0.0; batch * k];
        let mut total = 0.0;
        for bi in 0..batch {
            let label = labels[bi];
            assert!(label < k, "label {label} out of range for {k} classes");
            let row = &xs.data()[bi * k..(bi + 1) * k];
            let mut ls = vec![0.0; k];
            log_softmax_row(row, &mut ls);
            for (p, &l) in probs[bi * k..(bi + 1) * k].iter_mut().zip(ls.iter()) {
                *p = l.exp();
            }
            total -= ls[label];
        }
        let out = Tensor::scalar(total / batch as f64);
        self.push(Op::HardCeLoss { labels: labels.to_vec(), probs }, vec![logits], out)
    }

    /// Importance-weighted mean KL against the member-average distribution;
    /// gradients flow into every member's logits.
    pub fn mixture_kl_loss(
        &mut self,
        member_logits: &[NodeId],
        targets: &[f64],
        weights: &[f64],
    ) -> NodeId {
        assert!(!member_logits.is_empty());
        let batch = self.value(member_logits[0]).shape()[0];
        let k = self.value(member_logits[0]).shape()[1];
        assert_eq!(targets.len(), batch * k);
        assert_eq!(weights.len(), batch);
        let m = member_logits.len();
        let mut member_probs = Vec::with_capacity(m);
        for &id in member_logits {
            let xs = self.value(id);
            assert_eq!(xs.shape(), &[batch, k], "member logits shape mismatch");
            let mut probs = vec![0.0; batch * k];
            for bi in 0..batch {
                softmax_row(&xs.data()[bi * k..(bi + 1) * k], &mut probs[bi * k..(bi + 1) * k]);
            }
            member_probs.push(probs);
        }
        let mut mixture = vec![0.0; batch * k];
        for probs in &member_probs {
            for (q, &p) in mixture.iter_mut().zip(probs.iter()) {
                *q += p;
            }
        }
        let inv_m = 1.0 / m as f64;
        for q in mixture.iter_mut() {
            *q *= inv_m;
        }
        let mut per_sample = vec![0.0; batch];
        let mut total = 0.0;
        for bi in 0..batch {
            let trow = &targets[bi * k..(bi + 1) * k];
            validate_distribution(trow);
            let qrow = &mixture[bi * k..(bi + 1) * k];
            let mut kl = 0.0;
            for (&t, &q) in trow.iter().zip(qrow.iter()) {
                if t > 0.0 {
                    kl += t * (t.ln() - q.ln());
                }
            }
            per_sample[bi] = kl;
            total += weights[bi] * kl;
        }
        let out = Tensor::scalar(total / batch as f64);
        self.push(
            Op::MixtureKlLoss {
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                member_probs,
                mixture,
                per_sample,
            },
            member_logits.to_vec(),
            out,
        )
    }

    /// Scalar linear combination of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let mut acc = 0.0;
        for &(id, c) in terms {
            acc += c * self.value(id).item();
        }
        let inputs: Vec<NodeId> = terms.iter().map(|&(id, _)| id).collect();
        let coeffs: Vec<f64> = terms.iter().map(|&(_, c)| c).collect();
        self.push(Op::WeightedSum { coeffs }, inputs, Tensor::scalar(acc))
    }

    /// Per-sample losses recorded by a KL or mixture-KL loss node.
    pub fn per_sample_losses(&self, id: NodeId) -> &[f64] {
        match &self.nodes[id.0].op {
            Op::KlCatLoss { per_sample, .. } => per_sample,
            Op::MixtureKlLoss { per_sample, .. } => per_sample,
            _ => panic!("node has no per-sample losses"),
        }
    }

    /// Reverse pass from a scalar loss; returns per-node gradients (present
    /// for every node on the path to a `requires_grad` leaf).
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data().iter()) {
                    *a += b;
                }
            }
            None => grads[id.0] = Some(delta.clone()),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let inputs = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Linear => {
                let x = self.value(inputs[0]);
                let w = self.value(inputs[1]);
                let (batch, i) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                if self.nodes[inputs[0].0].needs_grad {
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    acc_matmul_nn(dx.data_mut(), g.data(), w.data(), batch, o, i);
                    self.accumulate(grads, inputs[0], &dx);
                }
                if self.nodes[inputs[1].0].needs_grad {
                    let mut dw = Tensor::zeros(w.shape().to_vec());
                    acc_matmul_tn(dw.data_mut(), g.data(), x.data(), batch, o, i);
                    self.accumulate(grads, inputs[1], &dw);
                }
                if self.nodes[inputs[2].0].needs_grad {
                    let mut db = Tensor::zeros(vec![o]);
                    for row in g.data().chunks_exact(o) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row.iter()) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, inputs[2], &db);
                }
            }
            Op::NoisyLinear { f_in, f_out, wt_eff } => {
                let x = self.value(inputs[0]);
                let (batch, i) = (x.shape()[0], x.shape()[1]);
                let o = self.value(inputs[1]).shape()[0];
                if self.nodes[inputs[0].0].needs_grad {
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    // dx[b, i] = sum_o g[b, o] wt[i, o]
                    acc_matmul_nt(dx.data_mut(), g.data(), wt_eff, batch, o, i);
                    self.accumulate(grads, inputs[0], &dx);
                }
                // dW_eff = g^T x, dB_eff = column sums
                let mut dw_eff = vec![0.0; o * i];
                acc_matmul_tn(&mut dw_eff, g.data(), x.data(), batch, o, i);
                let mut db_eff = vec![0.0; o];
                for row in g.data().chunks_exact(o) {
                    for (d, &v) in db_eff.iter_mut().zip(row.iter()) {
                        *d += v;
                    }
                }
                if self.nodes[inputs[1].0].needs_grad {
                    self.accumulate(grads, inputs[1], &Tensor::new(vec![o, i], dw_eff.clone()));
                }
                if self.nodes[inputs[2].0].needs_grad {
                    let mut dsw = vec![0.0; o * i];
                    if let (Some(fi), Some(fo)) = (f_in, f_out) {
                        for oi in 0..o {
                            let fo_o = fo[oi];
                            for ii in 0..i {
                                dsw[oi * i + ii] = dw_eff[oi * i + ii] * fo_o * fi[ii];
                            }
                        }
                    }
                    self.accumulate(grads, inputs[2], &Tensor::new(vec![o, i], dsw));
                }
                if self.nodes[inputs[3].0].needs_grad {
                    self.accumulate(grads, inputs[3], &Tensor::new(vec![o], db_eff.clone()));
                }
                if self.nodes[inputs[4].0].needs_grad {
                    let mut dsb = vec![0.0; o];
                    if let Some(fo) = f_out {
                        for oi in 0..o {
                            dsb[oi] = db_eff[oi] * fo[oi];
                        }
                    }
                    self.accumulate(grads, inputs[4], &Tensor::new(vec![o], dsb));
                }
            }
            Op::Conv2d { stride, padding, cols } => {
                let x = self.value(inputs[0]);
                let w = self.value(inputs[1]);
                let (batch, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oc, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let oh = conv_out_dim(h, kh, *stride, *padding);
                let ow = conv_out_dim(wd, kw, *stride, *padding);
                let ck = c * kh * kw;
                let patch = oh * ow;
                let want_dx = self.nodes[inputs[0].0].needs_grad;
                let want_dw = self.nodes[inputs[1].0].needs_grad;
                let want_db = self.nodes[inputs[2].0].needs_grad;
                let mut dx = if want_dx { Some(Tensor::zeros(x.shape().to_vec())) } else { None };
                let mut dw = if want_dw { Some(Tensor::zeros(w.shape().to_vec())) } else { None };
                let mut db = if want_db { Some(Tensor::zeros(vec![oc])) } else { None };
                let mut dcols = vec![0.0; ck * patch];
                for bi in 0..batch {
                    let gslice = &g.data()[bi * oc * patch..(bi + 1) * oc * patch];
                    if let Some(dw) = dw.as_mut() {
                        // dW[oc x ck] += g[oc x patch] * cols[ck x patch]^T
                        acc_matmul_nt(dw.data_mut(), gslice, &cols[bi], oc, patch, ck);
                    }
                    if let Some(db) = db.as_mut() {
                        for o in 0..oc {
                            let mut s = 0.0;
                            for &v in &gslice[o * patch..(o + 1) * patch] {
                                s += v;
                            }
                            db.data_mut()[o] += s;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        // dcols[ck x patch] = W^T[ck x oc] * g[oc x patch]
                        acc_matmul_tn(&mut dcols, w.data(), gslice, oc, ck, patch);
                        col2im(
                            &dcols,
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            &mut dx.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd],
                        );
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, inputs[0], &dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, inputs[1], &dw);
                }
                if let Some(db) = db {
                    self.accumulate(grads, inputs[2], &db);
                }
            }
            Op::Relu => {
                let x = self.value(inputs[0]);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                relu_backward(x.data(), g.data(), dx.data_mut());
                self.accumulate(grads, inputs[0], &dx);
            }
            Op::Add => {
                self.accumulate(grads, inputs[0], g);
                self.accumulate(grads, inputs[1], g);
            }
            Op::ConcatCols { left_cols } => {
                let av = self.value(inputs[0]);
                let bv = self.value(inputs[1]);
                let (batch, fa, fb) = (av.shape()[0], *left_cols, bv.shape()[1]);
                let mut da = Tensor::zeros(av.shape().to_vec());
                let mut db = Tensor::zeros(bv.shape().to_vec());
                for bi in 0..batch {
                    let grow = &g.data()[bi * (fa + fb)..(bi + 1) * (fa + fb)];
                    da.data_mut()[bi * fa..(bi + 1) * fa].copy_from_slice(&grow[..fa]);
                    db.data_mut()[bi * fb..(bi + 1) * fb].copy_from_slice(&grow[fa..]);
                }
                self.accumulate(grads, inputs[0], &da);
                self.accumulate(grads, inputs[1], &db);
            }
            Op::ConcatChannels { left_ch } => {
                let av = self.value(inputs[0]);
                let bv = self.value(inputs[1]);
                let (batch, ca, cb) = (av.shape()[0], *left_ch, bv.shape()[1]);
                let hw = av.shape()[2] * av.shape()[3];
                let mut da = Tensor::zeros(av.shape().to_vec());
                let mut db = Tensor::zeros(bv.shape().to_vec());
                for bi in 0..batch {
                    let grow = &g.data()[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
                    da.data_mut()[bi * ca * hw..(bi + 1) * ca * hw]
                        .copy_from_slice(&grow[..ca * hw]);
                    db.data_mut()[bi * cb * hw..(bi + 1) * cb * hw]
                        .copy_from_slice(&grow[ca * hw..]);
                }
                self.accumulate(grads, inputs[0], &da);
                self.accumulate(grads, inputs[1], &db);
            }
            Op::Reshape => {
                let x = self.value(inputs[0]);
                let dx = g.reshaped(x.shape().to_vec());
                self.accumulate(grads, inputs[0], &dx);
            }
            Op::SelectActionBlock { actions, atoms } => {
                let x = self.value(inputs[0]);
                let width = x.shape()[1];
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for (bi, &a) in actions.iter().enumerate() {
                    dx.data_mut()[bi * width + a * atoms..bi * width + (a + 1) * atoms]
                        .copy_from_slice(&g.data()[bi * atoms..(bi + 1) * atoms]);
                }
                self.accumulate(grads, inputs[0], &dx);
            }
            Op::DuelingCombine { actions, atoms } => {
                let (a, k) = (*actions, *atoms);
                let batch = self.value(inputs[0]).shape()[0];
                let mut dv = Tensor::zeros(vec![batch, k]);
                let mut dadv = Tensor::zeros(vec![batch, a * k]);
                for bi in 0..batch {
                    let grow = &g.data()[bi * a * k..(bi + 1) * a * k];
                    for ki in 0..k {
                        let mut colsum = 0.0;
                        for ai in 0..a {
                            colsum += grow[ai * k + ki];
                        }
                        dv.data_mut()[bi * k + ki] = colsum;
                        let mean = colsum / a as f64;
                        for ai in 0..a {
                            dadv.data_mut()[bi * a * k + ai * k + ki] = grow[ai * k + ki] - mean;
                        }
                    }
                }
                self.accumulate(grads, inputs[0], &dv);
                self.accumulate(grads, inputs[1], &dadv);
            }
            Op::SmoothL1Loss { target } => {
                let x = self.value(inputs[0]);
                let scale = g.item() / target.len() as f64;
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&p, &t)| scale * smooth_l1_grad(p, t))
                    .collect();
                self.accumulate(grads, inputs[0], &Tensor::new(x.shape().to_vec(), data));
            }
            Op::MseLoss { target } => {
                let x = self.value(inputs[0]);
                let scale = g.item() / target.len() as f64;
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&p, &t)| scale * 2.0 * (p - t))
                    .collect();
                self.accumulate(grads, inputs[0], &Tensor::new(x.shape().to_vec(), data));
            }
            Op::KlCatLoss { targets, weights, probs, .. } => {
                let x = self.value(inputs[0]);
                let (batch, k) = (x.shape()[0], x.shape()[1]);
                let scale = g.item() / batch as f64;
                let mut dx = Tensor::zeros(vec![batch, k]);
                for bi in 0..batch {
                    let w = weights[bi] * scale;
                    for ki in 0..k {
                        dx.data_mut()[bi * k + ki] =
                            w * (probs[bi * k + ki] - targets[bi * k + ki]);
                    }
                }
                self.accumulate(grads, inputs[0], &dx);
            }
            Op::SoftCeLoss { targets, probs } => {
                let x = self.value(inputs[0]);
                let (batch, k) = (x.shape()[0], x.shape()[1]);
                let scale = g.item() / batch as f64;
                let mut dx = Tensor::zeros(vec![batch, k]);
                for bi in 0..batch {
                    let trow = &targets[bi * k..(bi + 1) * k];
                    let tsum: f64 = trow.iter().sum();
                    for ki in 0..k {
                        dx.data_mut()[bi * k + ki] =
                            scale * (tsum * probs[bi * k + ki] - trow[ki]);
                    }
                }
                self.accumulate(grads, inputs[0], &dx);
            }
            Op::HardCeLoss { labels, probs } => {
                let x = self.value(inputs[0]);
                let (batch, k) = (x.shape()[0], x.shape()[1]);
                let scale = g.item() / batch as f64;
                let mut dx = Tensor::zeros(vec![batch, k]);
                for bi in 0..batch {
                    for ki in 0..k {
                        let t = if ki == labels[bi] { 1.0 } else { 0.0 };
                        dx.data_mut()[bi * k + ki] = scale * (probs[bi * k + ki] - t);
                    }
                }
                self.accumulate(grads, inputs[0], &dx);
            }
            Op::MixtureKlLoss { targets, weights, member_probs, mixture, .. } => {
                let batch = weights.len();
                let k = mixture.len() / batch;
                let m = member_probs.len();
                let scale = g.item() / batch as f64;
                let inv_m = 1.0 / m as f64;
                for (mi, probs) in member_probs.iter().enumerate() {
                    if !self.nodes[inputs[mi].0].needs_grad {
                        continue;
                    }
                    let mut dx = Tensor::zeros(vec![batch, k]);
                    for bi in 0..batch {
                        let w = weights[bi] * scale * inv_m;
                        let trow = &targets[bi * k..(bi + 1) * k];
                        let qrow = &mixture[bi * k..(bi + 1) * k];
                        let prow = &probs[bi * k..(bi + 1) * k];
                        let mut s = 0.0;
                        for ki in 0..k {
                            s += trow[ki] / qrow[ki] * prow[ki];
                        }
                        for ki in 0..k {
                            dx.data_mut()[bi * k + ki] =
                                w * prow[ki] * (s - trow[ki] / qrow[ki]);
                        }
                    }
                    self.accumulate(grads, inputs[mi], &dx);
                }
            }
            Op::WeightedSum { coeffs } => {
                for (&input, &c) in inputs.iter().zip(coeffs.iter()) {
                    if !self.nodes[input.0].needs_grad {
                        continue;
                    }
                    let val = self.value(input);
                    let delta = Tensor::new(val.shape().to_vec(), vec![g.item() * c; val.numel()]);
                    self.accumulate(grads, input, &delta);
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a leaf, zero-filled when the leaf was off the loss path.
    pub fn leaf_grad(&self, graph: &Graph, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape().to_vec()),
        }
    }
}

/// Raw dueling combine: L[b,a,k] = v[b,k] + adv[b,a,k] - mean_a' adv[b,a',k].
pub fn dueling_combine_raw(
    v: &[f64],
    adv: &[f64],
    batch: usize,
    actions: usize,
    atoms: usize,
    out: &mut [f64],
) {
    let inv_a = 1.0 / actions as f64;
    for bi in 0..batch {
        let vrow = &v[bi * atoms..(bi + 1) * atoms];
        let arow = &adv[bi * actions * atoms..(bi + 1) * actions * atoms];
        let orow = &mut out[bi * actions * atoms..(bi + 1) * actions * atoms];
        for ki in 0..atoms {
            let mut mean = 0.0;
            for ai in 0..actions {
                mean += arow[ai * atoms + ki];
            }
            mean *= inv_a;
            let base = vrow[ki] - mean;
            for ai in 0..actions {
                orow[ai * atoms + ki] = base + arow[ai * atoms + ki];
            }
        }
    }
}

//! The five auxiliary tasks and their assignment to ensemble members.
//!
//! Model-learning tasks: latent next-state prediction (NS), inverse dynamics
//! (ID) and reward prediction (RF). Object/event tasks: total change of
//! intensity (CI) and change of moment (CM). Each task owns a small head on
//! top of the member's latent; the total auxiliary loss is
//! `sum_n alpha_n * task_loss_n`.

use crate::error::RenqError;
use crate::net::{QNet, QTapeForward};
use crate::rng::Rng64;
use crate::tensor::tape::{Graph, NodeId};
use crate::tensor::{Padding, ParamSet, Tensor};
use statrs::function::erf::erf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    NextState = 0,
    InverseDynamics = 1,
    RewardFn = 2,
    IntensityChange = 3,
    MomentChange = 4,
}

pub const ALL_TASKS: [TaskId; 5] = [
    TaskId::NextState,
    TaskId::InverseDynamics,
    TaskId::RewardFn,
    TaskId::IntensityChange,
    TaskId::MomentChange,
];

impl TaskId {
    pub fn short_name(&self) -> &'static str {
        match self {
            TaskId::NextState => "ns",
            TaskId::InverseDynamics => "id",
            TaskId::RewardFn => "rf",
            TaskId::IntensityChange => "ci",
            TaskId::MomentChange => "cm",
        }
    }

    pub fn from_short_name(s: &str) -> Option<TaskId> {
        ALL_TASKS.iter().copied().find(|t| t.short_name() == s)
    }
}

/// Assignment strategy tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxStrategy {
    None,
    UniquePerMember,
    All,
    Custom,
}

/// Per-member task lists with strength parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxAssignment {
    pub strategy: AuxStrategy,
    /// member -> [(task, alpha)], sorted by task id.
    pub per_member: Vec<Vec<(TaskId, f64)>>,
}

/// Build the standard assignments: `none` leaves every member bare,
/// `unique-per-member` gives member i task i with alpha 1 (requires M =
/// number of tasks), `all` gives every member all tasks at alpha 1/N.
pub fn assign_tasks(strategy: AuxStrategy, members: usize) -> Result<AuxAssignment, RenqError> {
    let per_member = match strategy {
        AuxStrategy::None => vec![Vec::new(); members],
        AuxStrategy::UniquePerMember => {
            if members != ALL_TASKS.len() {
                return Err(RenqError::Config(format!(
                    "unique-per-member assignment needs {} members, got {members}",
                    ALL_TASKS.len()
                )));
            }
            ALL_TASKS.iter().map(|&t| vec![(t, 1.0)]).collect()
        }
        AuxStrategy::All => {
            let alpha = 1.0 / ALL_TASKS.len() as f64;
            vec![ALL_TASKS.iter().map(|&t| (t, alpha)).collect(); members]
        }
        AuxStrategy::Custom => {
            return Err(RenqError::Config(
                "custom assignment must be constructed from an explicit task list".into(),
            ))
        }
    };
    Ok(AuxAssignment { strategy, per_member })
}

impl AuxAssignment {
    pub fn custom(per_member: Vec<Vec<(TaskId, f64)>>) -> Result<AuxAssignment, RenqError> {
        for tasks in &per_member {
            for &(_, alpha) in tasks {
                if alpha < 0.0 {
                    return Err(RenqError::Config(format!("negative task strength {alpha}")));
                }
            }
        }
        let mut per_member = per_member;
        for tasks in per_member.iter_mut() {
            tasks.sort_by_key(|&(t, _)| t);
        }
        Ok(AuxAssignment { strategy: AuxStrategy::Custom, per_member })
    }
}

// ---------------------------------------------------------------------------
// Pixel-space targets.
// ---------------------------------------------------------------------------

/// Moment of an image: (1/C) sum_c sum_{x,y} d(x,y) * s[c,x,y], with
/// euclidean distance to the (0,0) corner; x indexes width, y height.
pub fn moment(s: &[f64], c: usize, w: usize, h: usize) -> f64 {
    assert_eq!(s.len(), c * w * h);
    let mut acc = 0.0;
    for ci in 0..c {
        let plane = &s[ci * w * h..(ci + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let d = ((x * x + y * y) as f64).sqrt();
                acc += d * plane[y * w + x];
            }
        }
    }
    acc / c as f64
}

/// Normalizer: the squared total distance sum_{x,y} d(x,y)^2.
pub fn moment_norm(w: usize, h: usize) -> f64 {
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            acc += (x * x + y * y) as f64;
        }
    }
    acc
}

/// Regression target of the change-of-moment task:
/// (moment(s') - moment(s)) / sum d^2.
pub fn moment_change_target(s: &[f64], s_next: &[f64], c: usize, w: usize, h: usize) -> f64 {
    (moment(s_next, c, w, h) - moment(s, c, w, h)) / moment_norm(w, h)
}

/// Total change of intensity: the L2 norm of the difference between the
/// channel-mean images of s and s'.
pub fn intensity_target(s: &[f64], s_next: &[f64], c: usize, w: usize, h: usize) -> f64 {
    assert_eq!(s.len(), c * w * h);
    assert_eq!(s_next.len(), c * w * h);
    let plane = w * h;
    let mut acc = 0.0;
    for p in 0..plane {
        let mut a = 0.0;
        let mut b = 0.0;
        for ci in 0..c {
            a += s[ci * plane + p];
            b += s_next[ci * plane + p];
        }
        let d = (a - b) / c as f64;
        acc += d * d;
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// Histogram (HL-Gaussian) targets.
// ---------------------------------------------------------------------------

/// A truncated-Gaussian histogram target over uniform bins of [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramTarget {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub sigma: f64,
}

impl HistogramTarget {
    pub fn new(lo: f64, hi: f64, bins: usize, sigma: f64) -> Self {
        assert!(bins >= 1 && hi > lo && sigma > 0.0);
        HistogramTarget { lo, hi, bins, sigma }
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    fn phi(&self, x: f64) -> f64 {
        0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
    }

    /// Bin masses of the Gaussian centered at `val`, renormalized over
    /// [lo, hi]. Out-of-range values are clamped; the flag reports it.
    pub fn masses(&self, val: f64) -> (Vec<f64>, bool) {
        let clamped = val < self.lo || val > self.hi;
        let v = val.clamp(self.lo, self.hi);
        let width = self.bin_width();
        let total = self.phi((self.hi - v) / self.sigma) - self.phi((self.lo - v) / self.sigma);
        let mut out = vec![0.0; self.bins];
        if total <= 0.0 {
            // degenerate sigma: all mass in the containing bin
            let idx = (((v - self.lo) / width) as usize).min(self.bins - 1);
            out[idx] = 1.0;
            return (out, clamped);
        }
        let mut prev = self.phi((self.lo - v) / self.sigma);
        let mut sum = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let upper = self.lo + width * (i + 1) as f64;
            let cdf = self.phi((upper - v) / self.sigma);
            *o = (cdf - prev).max(0.0) / total;
            sum += *o;
            prev = cdf;
        }
        // final renormalization guards the sum-to-one invariant
        if sum > 0.0 {
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        (out, clamped)
    }
}

// ---------------------------------------------------------------------------
// Heads.
// ---------------------------------------------------------------------------

/// Width configuration for the auxiliary heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxConfig {
    /// Channels of the latent-transition conv head.
    pub transition_channels: usize,
    /// Hidden width of the dense heads (ID, CI, CM).
    pub hidden: usize,
    pub reward_atoms: usize,
    pub reward_sigma: f64,
    pub intensity_atoms: usize,
    /// sigma = ratio x bin width for the intensity histogram.
    pub intensity_ratio: f64,
}

impl AuxConfig {
    pub fn desk() -> Self {
        AuxConfig {
            transition_channels: 16,
            hidden: 64,
            reward_atoms: 3,
            reward_sigma: 0.1,
            intensity_atoms: 84,
            intensity_ratio: 0.5,
        }
    }

    pub fn paper() -> Self {
        AuxConfig {
            transition_channels: 64,
            hidden: 256,
            reward_atoms: 3,
            reward_sigma: 0.1,
            intensity_atoms: 84,
            intensity_ratio: 0.5,
        }
    }
}

/// One member's auxiliary heads: a ParamSet holding every assigned task's
/// parameters, plus per-task offsets into it.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxMember {
    pub cfg: AuxConfig,
    pub tasks: Vec<(TaskId, f64)>,
    pub params: ParamSet,
    offsets: Vec<(TaskId, usize)>,
}

fn xavier_linear(params: &mut ParamSet, name: &str, out_dim: usize, in_dim: usize, rng: &mut Rng64) {
    let mut w = Tensor::zeros(vec![out_dim, in_dim]);
    w.fill_xavier(in_dim, out_dim, rng);
    params.add(&format!("{name}.w"), w);
    params.add(&format!("{name}.b"), Tensor::zeros(vec![out_dim]));
}

fn xavier_conv(
    params: &mut ParamSet,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut Rng64,
) {
    let mut w = Tensor::zeros(vec![out_c, in_c, k, k]);
    w.fill_xavier(in_c * k * k, out_c * k * k, rng);
    params.add(&format!("{name}.w"), w);
    params.add(&format!("{name}.b"), Tensor::zeros(vec![out_c]));
}

impl AuxMember {
    /// Initialize heads for the given task list. Head parameters draw from
    /// their own RNG stream so the Q-network initialization is unaffected by
    /// the presence of auxiliary tasks.
    pub fn init(cfg: AuxConfig, net: &QNet, tasks: &[(TaskId, f64)], rng: &mut Rng64) -> Self {
        let mut tasks = tasks.to_vec();
        tasks.sort_by_key(|&(t, _)| t);
        let (zc, zh, zw) = net.cfg.latent_shape();
        let z = net.cfg.z_flat_len();
        let a = net.cfg.actions;
        let mut params = ParamSet::new();
        let mut offsets = Vec::new();
        for &(task, _) in &tasks {
            offsets.push((task, params.len()));
            match task {
                TaskId::NextState => {
                    let ct = cfg.transition_channels;
                    xavier_conv(&mut params, "ns.conv_in", ct, zc + 1, 3, rng);
                    xavier_conv(&mut params, "ns.res1", ct, ct, 3, rng);
                    xavier_conv(&mut params, "ns.res2", ct, ct, 3, rng);
                    xavier_conv(&mut params, "ns.proj", zc, ct, 3, rng);
                    let _ = (zh, zw);
                }
                TaskId::InverseDynamics => {
                    xavier_linear(&mut params, "id.l1", cfg.hidden, 2 * z, rng);
                    xavier_linear(&mut params, "id.l2", a, cfg.hidden, rng);
                }
                TaskId::RewardFn => {
                    xavier_linear(&mut params, "rf.l1", cfg.reward_atoms, 2 * net.cfg.hidden + a, rng);
                }
                TaskId::IntensityChange => {
                    xavier_linear(&mut params, "ci.l1", cfg.hidden, z + a, rng);
                    xavier_linear(&mut params, "ci.l2", cfg.intensity_atoms, cfg.hidden, rng);
                }
                TaskId::MomentChange => {
                    xavier_linear(&mut params, "cm.l1", cfg.hidden, z + a, rng);
                    xavier_linear(&mut params, "cm.l2", 1, cfg.hidden, rng);
                }
            }
        }
        AuxMember { cfg, tasks, params, offsets }
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.tasks.iter().any(|&(t, alpha)| t == task && alpha != 0.0)
    }

    /// Tasks with nonzero strength, i.e. those that contribute loss terms.
    pub fn active_tasks(&self) -> impl Iterator<Item = (TaskId, f64)> + '_ {
        self.tasks.iter().copied().filter(|&(_, alpha)| alpha != 0.0)
    }

    fn offset(&self, task: TaskId) -> usize {
        self.offsets
            .iter()
            .find(|&&(t, _)| t == task)
            .map(|&(_, o)| o)
            .unwrap_or_else(|| panic!("unknown task id {task:?} for this member"))
    }

    pub fn reward_histogram(&self) -> HistogramTarget {
        HistogramTarget::new(-1.0, 1.0, self.cfg.reward_atoms, self.cfg.reward_sigma)
    }

    pub fn intensity_histogram(&self, frame_w: usize, frame_h: usize) -> HistogramTarget {
        let hi = ((frame_w * frame_h) as f64).sqrt();
        let ht = HistogramTarget { lo: 0.0, hi, bins: self.cfg.intensity_atoms, sigma: 1.0 };
        HistogramTarget::new(0.0, hi, self.cfg.intensity_atoms, self.cfg.intensity_ratio * ht.bin_width())
    }
}

/// Batch slice the auxiliary losses consume: per-sample one-step data.
pub struct AuxBatch<'a> {
    pub batch: usize,
    pub channels: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    /// Stacked observations at t, `[batch x channels x h x w]` flattened.
    pub obs: &'a [f64],
    /// Stacked observations at t+1.
    pub obs_next: &'a [f64],
    pub actions: &'a [usize],
    pub rewards1: &'a [f64],
    /// Flat latent h(s_{t+1}) evaluated without gradients (NS target).
    pub next_latent: &'a [f64],
}

/// Loss terms produced for one member's assigned tasks.
pub struct AuxLosses {
    /// (task, scalar loss node, strength).
    pub terms: Vec<(TaskId, NodeId, f64)>,
    /// Leaf ids aligned with the AuxMember ParamSet order.
    pub param_ids: Vec<NodeId>,
    /// Histogram targets that needed clamping in this batch.
    pub clamped: usize,
}

/// Build every active task's loss on the tape. `fwd` must come from the same
/// member's taped forward; when ID is active, `fwd.second_z_flat` must hold
/// the taped latent of the one-step successor states.
pub fn build_aux_losses(
    g: &mut Graph,
    aux: &AuxMember,
    net: &QNet,
    fwd: &QTapeForward,
    batch: &AuxBatch,
) -> AuxLosses {
    let param_ids: Vec<NodeId> = aux.params.tensors().iter().map(|t| g.leaf(t.clone())).collect();
    let mut terms = Vec::new();
    let mut clamped = 0usize;
    let b = batch.batch;
    let a_count = net.cfg.actions;
    let (zc, zh, zw) = net.cfg.latent_shape();

    for (task, alpha) in aux.active_tasks() {
        let base = aux.offset(task);
        let p = |i: usize| param_ids[base + i];
        let node = match task {
            TaskId::NextState => {
                // action plane concatenated onto the latent map
                let mut plane = vec![0.0; b * zh * zw];
                let denom = (a_count.max(2) - 1) as f64;
                for bi in 0..b {
                    let v = batch.actions[bi] as f64 / denom;
                    plane[bi * zh * zw..(bi + 1) * zh * zw].iter_mut().for_each(|x| *x = v);
                }
                let plane_node = g.constant(Tensor::new(vec![b, 1, zh, zw], plane));
                let x = g.concat_channels(fwd.z_map, plane_node);
                let h1 = g.conv2d(x, p(0), p(1), 1, Padding::Same);
                let h1 = g.relu(h1);
                let r1 = g.conv2d(h1, p(2), p(3), 1, Padding::Same);
                let r1 = g.relu(r1);
                let r2 = g.conv2d(r1, p(4), p(5), 1, Padding::Same);
                let res = g.add(h1, r2);
                let pred = g.conv2d(res, p(6), p(7), 1, Padding::Same);
                let pred_flat = g.reshape(pred, vec![b, zc * zh * zw]);
                g.smooth_l1_loss(pred_flat, batch.next_latent)
            }
            TaskId::InverseDynamics => {
                let z2 = fwd
                    .second_z_flat
                    .expect("inverse dynamics requires the taped successor latent");
                let x = g.concat_cols(fwd.z_flat, z2);
                let h = g.linear(x, p(0), p(1));
                let h = g.relu(h);
                let logits = g.linear(h, p(2), p(3));
                g.hard_ce_loss(logits, batch.actions)
            }
            TaskId::RewardFn => {
                let w1 = fwd.adv1_zeroed.expect("reward task requires first-layer taps");
                let w2 = fwd.v1_zeroed.expect("reward task requires first-layer taps");
                let w = g.concat_cols(w1, w2);
                // append the action one-hot as constant columns
                let mut onehot = vec![0.0; b * a_count];
                for bi in 0..b {
                    onehot[bi * a_count + batch.actions[bi]] = 1.0;
                }
                let oh = g.constant(Tensor::new(vec![b, a_count], onehot));
                let x = g.concat_cols(w, oh);
                let logits = g.linear(x, p(0), p(1));
                let ht = aux.reward_histogram();
                let mut targets = vec![0.0; b * ht.bins];
                for bi in 0..b {
                    let (m, c) = ht.masses(batch.rewards1[bi]);
                    clamped += c as usize;
                    targets[bi * ht.bins..(bi + 1) * ht.bins].copy_from_slice(&m);
                }
                g.soft_ce_loss(logits, &targets)
            }
            TaskId::IntensityChange => {
                let mut onehot = vec![0.0; b * a_count];
                for bi in 0..b {
                    onehot[bi * a_count + batch.actions[bi]] = 1.0;
                }
                let oh = g.constant(Tensor::new(vec![b, a_count], onehot));
                let x = g.concat_cols(fwd.z_flat, oh);
                let h = g.linear(x, p(0), p(1));
                let h = g.relu(h);
                let logits = g.linear(h, p(2), p(3));
                let ht = aux.intensity_histogram(batch.frame_w, batch.frame_h);
                let mut targets = vec![0.0; b * ht.bins];
                let plane = batch.channels * batch.frame_w * batch.frame_h;
                for bi in 0..b {
                    let s = &batch.obs[bi * plane..(bi + 1) * plane];
                    let s2 = &batch.obs_next[bi * plane..(bi + 1) * plane];
                    let val =
                        intensity_target(s, s2, batch.channels, batch.frame_w, batch.frame_h);
                    let (m, c) = ht.masses(val);
                    clamped += c as usize;
                    targets[bi * ht.bins..(bi + 1) * ht.bins].copy_from_slice(&m);
                }
                g.soft_ce_loss(logits, &targets)
            }
            TaskId::MomentChange => {
                let mut onehot = vec![0.0; b * a_count];
                for bi in 0..b {
                    onehot[bi * a_count + batch.actions[bi]] = 1.0;
                }
                let oh = g.constant(Tensor::new(vec![b, a_count], onehot));
                let x = g.concat_cols(fwd.z_flat, oh);
                let h = g.linear(x, p(0), p(1));
                let h = g.relu(h);
                let pred = g.linear(h, p(2), p(3));
                let plane = batch.channels * batch.frame_w * batch.frame_h;
                let targets: Vec<f64> = (0..b)
                    .map(|bi| {
                        let s = &batch.obs[bi * plane..(bi + 1) * plane];
                        let s2 = &batch.obs_next[bi * plane..(bi + 1) * plane];
                        moment_change_target(s, s2, batch.channels, batch.frame_w, batch.frame_h)
                    })
                    .collect();
                g.smooth_l1_loss(pred, &targets)
            }
        };
        terms.push((task, node, alpha));
    }
    AuxLosses { terms, param_ids, clamped }
}

//! The ensemble agents: member networks with paired targets, the averaged
//! ensemble policy, independently optimized member losses (with optional
//! auxiliary tasks) and the jointly optimized variant.
//!
//! A training step snapshots targets first: every member's TD target is
//! computed from the pre-update online networks and the frozen target
//! networks, so member updates are order-independent.

use crate::aux_tasks::{build_aux_losses, AuxBatch, AuxConfig, AuxMember, TaskId};
use crate::distributional::{project_categorical, Support};
use crate::error::RenqError;
use crate::net::{NetConfig, QNet, QNoise};
use crate::replay::{PrioritizedView, TransitionStore};
use crate::rng::Rng64;
use crate::tensor::tape::Graph;
use crate::tensor::{
    adam_step, clip_global_norm, softmax_row, AdamParams, AdamState, Tensor,
};

/// Lowest-index argmax.
pub fn argmax_tie_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Sample fresh noisy-layer noise (training-time action selection).
    Sampled,
    /// Zero the noise (evaluation, target computation, greedy selection).
    Zeroed,
}

pub struct Member {
    pub qnet: QNet,
    pub target: QNet,
    pub aux: AuxMember,
    pub adam_q: AdamState,
    pub adam_aux: AdamState,
    pub noise_rng: Rng64,
}

pub struct EnsembleModel {
    pub net_cfg: NetConfig,
    pub support: Support,
    pub members: Vec<Member>,
    /// REN-J: treat the ensemble as one network with a single view.
    pub joint: bool,
    /// Bumped on every target sync; invalidates the target-probs cache.
    pub target_version: u64,
    /// Per-transition cache of the target-ensemble mixture probabilities at
    /// the bootstrap state, for all actions. Derived data: never serialized.
    cache: Vec<Option<(u64, Box<[f64]>)>>,
}

impl EnsembleModel {
    pub fn new(
        net_cfg: NetConfig,
        aux_cfg: AuxConfig,
        assignment: &[Vec<(TaskId, f64)>],
        joint: bool,
        v_min: f64,
        v_max: f64,
        master_seed: u64,
    ) -> Self {
        assert_eq!(assignment.len(), assignment.len());
        let members = assignment
            .iter()
            .enumerate()
            .map(|(m, tasks)| {
                let mut init_rng = Rng64::from_stream(master_seed, "member", m as u64);
                let qnet = QNet::init(net_cfg, &mut init_rng);
                let target = qnet.clone();
                let mut aux_rng = Rng64::from_stream(master_seed, "aux", m as u64);
                let aux = AuxMember::init(aux_cfg, &qnet, tasks, &mut aux_rng);
                let adam_q = AdamState::new(&qnet.params.sizes());
                let adam_aux = AdamState::new(&aux.params.sizes());
                let noise_rng = Rng64::from_stream(master_seed, "noise", m as u64);
                Member { qnet, target, aux, adam_q, adam_aux, noise_rng }
            })
            .collect();
        let support = Support::new(v_min, v_max, net_cfg.atoms);
        EnsembleModel {
            net_cfg,
            support,
            members,
            joint,
            target_version: 0,
            cache: Vec::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.members.len()
    }

    /// Mixture of the member distributions: Q_ens = (1/M) sum_m Q_m.
    /// Returns `[batch x actions x atoms]` probabilities.
    pub fn ensemble_probs(&self, obs: &[f64], batch: usize, noise: Option<&QNoise>) -> Vec<f64> {
        let k = self.net_cfg.atoms;
        let rows = batch * self.net_cfg.actions;
        let mut mix = vec![0.0; rows * k];
        let inv_m = 1.0 / self.m() as f64;
        let mut tmp = vec![0.0; k];
        for member in &self.members {
            let logits = member.qnet.logits_eval(obs, batch, noise);
            for (row, lrow) in logits.chunks_exact(k).enumerate() {
                softmax_row(lrow, &mut tmp);
                for (o, &p) in mix[row * k..(row + 1) * k].iter_mut().zip(tmp.iter()) {
                    *o += p * inv_m;
                }
            }
        }
        mix
    }

    /// Scalar ensemble Q per action for a batch: S^T Q_ens.
    pub fn ensemble_scalar_q(&self, obs: &[f64], batch: usize, noise: Option<&QNoise>) -> Vec<f64> {
        let probs = self.ensemble_probs(obs, batch, noise);
        crate::distributional::scalar_q(&self.support, &probs)
    }

    /// The ensemble value distribution at one state.
    pub fn ensemble_q_distribution(&self, obs: &[f64]) -> crate::distributional::DistQ {
        let probs = self.ensemble_probs(obs, 1, None);
        crate::distributional::DistQ::new(self.net_cfg.actions, self.net_cfg.atoms, probs)
    }

    /// Greedy action under the scalar ensemble Q. Training mode passes one
    /// freshly sampled noise set shared by all members for this decision;
    /// evaluation zeroes the noise. Ties break to the lowest action index.
    pub fn select_action(&self, obs: &[f64], mode: NoiseMode, action_rng: &mut Rng64) -> usize {
        let noise = match mode {
            NoiseMode::Sampled => Some(QNet::sample_noise(&self.net_cfg, action_rng)),
            NoiseMode::Zeroed => None,
        };
        let q = self.ensemble_scalar_q(obs, 1, noise.as_ref());
        argmax_tie_low(&q)
    }

    /// Copy every member's online parameters into its target network and
    /// invalidate the target cache.
    pub fn sync_targets(&mut self) {
        for member in self.members.iter_mut() {
            member.target.copy_params_from(&member.qnet);
        }
        self.target_version += 1;
    }

    fn obs_batch(store: &TransitionStore, ids: &[[u32; 4]]) -> Vec<f64> {
        let n = 4 * store.frame_len;
        let mut out = Vec::with_capacity(ids.len() * n);
        for obs in ids {
            for &fidx in obs {
                out.extend(store.frame(fidx).iter().map(|&v| v as f64 * 0.25));
            }
        }
        debug_assert_eq!(out.len(), ids.len() * n);
        out
    }

    /// Distributional Double-DQN targets for the given store indices.
    ///
    /// Greedy actions come from the noise-zeroed ONLINE ensemble at the
    /// bootstrap state; the projected distribution comes from the frozen
    /// TARGET ensemble. Terminal transitions project the point mass of the
    /// n-step return.
    pub fn compute_targets(&mut self, store: &TransitionStore, indices: &[usize]) -> Vec<f64> {
        let k = self.net_cfg.atoms;
        let a_count = self.net_cfg.actions;
        // union of non-terminal bootstrap states
        let mut union: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| !store.transition(i).done)
            .collect();
        union.sort_unstable();
        union.dedup();

        // the cache may lag behind the store
        if self.cache.len() < store.len() {
            self.cache.resize_with(store.len(), || None);
        }

        let mut argmax: Vec<usize> = Vec::new();
        if !union.is_empty() {
            let ids: Vec<[u32; 4]> = union.iter().map(|&i| store.transition(i).next_obs_n).collect();
            let obs = Self::obs_batch(store, &ids);
            // online scalar ensemble Q at s' (noise zeroed)
            let q = self.ensemble_scalar_q(&obs, union.len(), None);
            argmax = q.chunks_exact(a_count).map(argmax_tie_low).collect();

            // fill stale cache rows from the target ensemble
            let missing: Vec<usize> = (0..union.len())
                .filter(|&u| match &self.cache[union[u]] {
                    Some((v, _)) => *v != self.target_version,
                    None => true,
                })
                .collect();
            if !missing.is_empty() {
                let mids: Vec<[u32; 4]> =
                    missing.iter().map(|&u| store.transition(union[u]).next_obs_n).collect();
                let mobs = Self::obs_batch(store, &mids);
                let mut mix = vec![0.0; missing.len() * a_count * k];
                let inv_m = 1.0 / self.m() as f64;
                let mut tmp = vec![0.0; k];
                for member in &self.members {
                    let logits = member.target.logits_eval(&mobs, missing.len(), None);
                    for (row, lrow) in logits.chunks_exact(k).enumerate() {
                        softmax_row(lrow, &mut tmp);
                        for (o, &p) in mix[row * k..(row + 1) * k].iter_mut().zip(tmp.iter()) {
                            *o += p * inv_m;
                        }
                    }
                }
                for (mi, &u) in missing.iter().enumerate() {
                    let row = mix[mi * a_count * k..(mi + 1) * a_count * k].to_vec();
                    self.cache[union[u]] = Some((self.target_version, row.into_boxed_slice()));
                }
            }
        }

        let uniform = vec![1.0 / k as f64; k];
        let mut out = vec![0.0; indices.len() * k];
        for (row, &idx) in indices.iter().enumerate() {
            let t = store.transition(idx);
            let g = if t.done {
                project_categorical(&self.support, t.return_n, 0.0, &uniform)
            } else {
                let u = union.binary_search(&idx).expect("index in union");
                let a = argmax[u];
                let (ver, probs) = self.cache[idx].as_ref().expect("cache filled");
                debug_assert_eq!(*ver, self.target_version);
                project_categorical(
                    &self.support,
                    t.return_n,
                    t.gamma_eff,
                    &probs[a * k..(a + 1) * k],
                )
            };
            out[row * k..(row + 1) * k].copy_from_slice(&g);
        }
        out
    }
}

impl crate::bvc::proxy::EnsembleQ for EnsembleModel {
    fn members(&self) -> usize {
        self.m()
    }

    fn member_q(&self, m: usize, obs: &[f64]) -> Vec<f64> {
        let probs = self.members[m].qnet.probs_eval(obs, 1, None);
        crate::distributional::scalar_q(&self.support, &probs)
    }

    fn ensemble_q(&self, obs: &[f64]) -> Vec<f64> {
        self.ensemble_scalar_q(obs, 1, None)
    }
}

/// Hyperparameters of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHp {
    pub batch: usize,
    pub adam: AdamParams,
    pub max_grad_norm: f64,
    pub min_replay: usize,
}

/// Per-step metrics: member KL losses, per-task auxiliary losses, gradient
/// norms (pre-clip) and histogram clamp counts.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub kl: Vec<f64>,
    pub aux: Vec<Vec<(TaskId, f64)>>,
    pub grad_norm: Vec<f64>,
    pub clamped: usize,
}

struct MemberPlan {
    indices: Vec<usize>,
    weights: Vec<f64>,
    targets: Vec<f64>,
    actions: Vec<usize>,
    rewards1: Vec<f64>,
    obs: Vec<f64>,
    obs_next1: Vec<f64>,
    next_latent: Vec<f64>,
    noise: QNoise,
}

/// One training step. REN samples per-member batches from per-member views
/// and optimizes each member independently; REN-J draws a single batch and
/// optimizes the mixture KL jointly. Priorities are refreshed from the
/// per-sample distributional losses.
pub fn train_step(
    model: &mut EnsembleModel,
    store: &TransitionStore,
    views: &mut [PrioritizedView],
    view_rngs: &mut [Rng64],
    beta: f64,
    hp: &TrainHp,
) -> Result<StepMetrics, RenqError> {
    if store.len() < hp.min_replay {
        return Err(RenqError::Replay(format!(
            "replay has {} transitions, need {}",
            store.len(),
            hp.min_replay
        )));
    }
    if model.joint {
        return train_step_joint(model, store, views, view_rngs, beta, hp);
    }
    assert_eq!(views.len(), model.m(), "one view per member");

    // Phase 1: sample batches, draw noise and compute every member's targets
    // from the pre-update networks.
    let m_count = model.m();
    let mut plans: Vec<MemberPlan> = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let batch = views[m].sample(hp.batch, beta, &mut view_rngs[m]);
        let noise = QNet::sample_noise(&model.net_cfg, &mut model.members[m].noise_rng);
        plans.push(MemberPlan {
            indices: batch.indices,
            weights: batch.weights,
            targets: Vec::new(),
            actions: Vec::new(),
            rewards1: Vec::new(),
            obs: Vec::new(),
            obs_next1: Vec::new(),
            next_latent: Vec::new(),
            noise,
        });
    }
    for plan in plans.iter_mut() {
        plan.targets = model.compute_targets(store, &plan.indices);
        plan.actions = plan
            .indices
            .iter()
            .map(|&i| store.transition(i).action as usize)
            .collect();
        plan.rewards1 = plan.indices.iter().map(|&i| store.transition(i).reward1).collect();
        let obs_ids: Vec<[u32; 4]> = plan.indices.iter().map(|&i| store.transition(i).obs).collect();
        plan.obs = EnsembleModel::obs_batch(store, &obs_ids);
        let next_ids: Vec<[u32; 4]> =
            plan.indices.iter().map(|&i| store.transition(i).next_obs1).collect();
        plan.obs_next1 = EnsembleModel::obs_batch(store, &next_ids);
    }
    // NS targets need the pre-update trunk as well
    for (m, plan) in plans.iter_mut().enumerate() {
        if model.members[m].aux.has_task(TaskId::NextState) {
            plan.next_latent = model.members[m].qnet.trunk_eval(&plan.obs_next1, hp.batch);
        }
    }

    // Phase 2: independent member updates.
    let mut metrics = StepMetrics {
        kl: Vec::with_capacity(m_count),
        aux: Vec::with_capacity(m_count),
        grad_norm: Vec::with_capacity(m_count),
        clamped: 0,
    };
    let net_cfg = model.net_cfg;
    for (m, plan) in plans.iter().enumerate() {
        let member = &mut model.members[m];
        let want_rf = member.aux.has_task(TaskId::RewardFn);
        let want_id = member.aux.has_task(TaskId::InverseDynamics);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(
            vec![hp.batch, net_cfg.in_channels, net_cfg.frame_h, net_cfg.frame_w],
            plan.obs.clone(),
        ));
        let x2 = if want_id {
            Some(g.constant(Tensor::new(
                vec![hp.batch, net_cfg.in_channels, net_cfg.frame_h, net_cfg.frame_w],
                plan.obs_next1.clone(),
            )))
        } else {
            None
        };
        let fwd = member.qnet.forward_tape(&mut g, x, Some(&plan.noise), want_rf, x2);
        let sel = g.select_action_block(fwd.logits, &plan.actions, net_cfg.atoms);
        let kl = g.kl_categorical_loss(sel, &plan.targets, &plan.weights);

        let aux_batch = AuxBatch {
            batch: hp.batch,
            channels: net_cfg.in_channels,
            frame_w: net_cfg.frame_w,
            frame_h: net_cfg.frame_h,
            obs: &plan.obs,
            obs_next: &plan.obs_next1,
            actions: &plan.actions,
            rewards1: &plan.rewards1,
            next_latent: &plan.next_latent,
        };
        let aux_out = build_aux_losses(&mut g, &member.aux, &member.qnet, &fwd, &aux_batch);
        metrics.clamped += aux_out.clamped;

        let mut terms = vec![(kl, 1.0)];
        for &(_, node, alpha) in &aux_out.terms {
            terms.push((node, alpha));
        }
        let total = g.weighted_sum(&terms);
        let grads = g.backward(total);

        let mut all_grads: Vec<Tensor> = fwd
            .param_ids
            .iter()
            .map(|&id| grads.leaf_grad(&g, id))
            .chain(aux_out.param_ids.iter().map(|&id| grads.leaf_grad(&g, id)))
            .collect();
        let norm = clip_global_norm(&mut all_grads, hp.max_grad_norm);
        let q_grads = &all_grads[..fwd.param_ids.len()];
        let a_grads = &all_grads[fwd.param_ids.len()..];
        adam_step(member.qnet.params.tensors_mut(), q_grads, &mut member.adam_q, hp.adam);
        if !a_grads.is_empty() {
            adam_step(member.aux.params.tensors_mut(), a_grads, &mut member.adam_aux, hp.adam);
        }

        let per_sample = g.per_sample_losses(kl).to_vec();
        views[m].update_priorities(&plan.indices, &per_sample)?;

        metrics.kl.push(g.value(kl).item());
        metrics
            .aux
            .push(aux_out.terms.iter().map(|&(t, node, _)| (t, g.value(node).item())).collect());
        metrics.grad_norm.push(norm);
    }
    Ok(metrics)
}

/// REN-J: one shared batch, one mixture-KL loss, gradients into every member,
/// one global clip across the whole ensemble parameter vector.
fn train_step_joint(
    model: &mut EnsembleModel,
    store: &TransitionStore,
    views: &mut [PrioritizedView],
    view_rngs: &mut [Rng64],
    beta: f64,
    hp: &TrainHp,
) -> Result<StepMetrics, RenqError> {
    assert_eq!(views.len(), 1, "joint mode uses a single view");
    let batch = views[0].sample(hp.batch, beta, &mut view_rngs[0]);
    let noises: Vec<QNoise> = (0..model.m())
        .map(|m| QNet::sample_noise(&model.net_cfg, &mut model.members[m].noise_rng))
        .collect();
    let targets = model.compute_targets(store, &batch.indices);
    let actions: Vec<usize> = batch
        .indices
        .iter()
        .map(|&i| store.transition(i).action as usize)
        .collect();
    let obs_ids: Vec<[u32; 4]> = batch.indices.iter().map(|&i| store.transition(i).obs).collect();
    let obs = EnsembleModel::obs_batch(store, &obs_ids);

    let net_cfg = model.net_cfg;
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(
        vec![hp.batch, net_cfg.in_channels, net_cfg.frame_h, net_cfg.frame_w],
        obs,
    ));
    let mut member_sel = Vec::with_capacity(model.m());
    let mut member_param_ids = Vec::with_capacity(model.m());
    for (m, member) in model.members.iter().enumerate() {
        let fwd = member.qnet.forward_tape(&mut g, x, Some(&noises[m]), false, None);
        let sel = g.select_action_block(fwd.logits, &actions, net_cfg.atoms);
        member_sel.push(sel);
        member_param_ids.push(fwd.param_ids);
    }
    let loss = g.mixture_kl_loss(&member_sel, &targets, &batch.weights);
    let grads = g.backward(loss);

    let mut all_grads: Vec<Tensor> = member_param_ids
        .iter()
        .flat_map(|ids| ids.iter().map(|&id| grads.leaf_grad(&g, id)))
        .collect();
    let norm = clip_global_norm(&mut all_grads, hp.max_grad_norm);
    let per_member = member_param_ids[0].len();
    for (m, member) in model.members.iter_mut().enumerate() {
        let slice = &all_grads[m * per_member..(m + 1) * per_member];
        adam_step(member.qnet.params.tensors_mut(), slice, &mut member.adam_q, hp.adam);
    }

    let per_sample = g.per_sample_losses(loss).to_vec();
    views[0].update_priorities(&batch.indices, &per_sample)?;

    Ok(StepMetrics {
        kl: vec![g.value(loss).item()],
        aux: vec![Vec::new()],
        grad_norm: vec![norm],
        clamped: 0,
    })
}

//! C51 machinery: the fixed atom support, categorical projection of Bellman
//! targets, scalar Q extraction, dueling aggregation, factorized noisy-layer
//! parameters and n-step return aggregation.

use crate::rng::Rng64;
use crate::tensor::tape::dueling_combine_raw;
use crate::tensor::{softmax, validate_distribution, Tensor};

/// Fixed ascending grid of atom values the categorical distribution lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub atoms: Vec<f64>,
    pub v_min: f64,
    pub v_max: f64,
    pub delta: f64,
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, k: usize) -> Self {
        assert!(k >= 2, "support needs at least two atoms");
        assert!(v_max > v_min, "support range must be increasing");
        let span = v_max - v_min;
        // Endpoint-exact linspace: atoms[0] == v_min and atoms[k-1] == v_max.
        let atoms: Vec<f64> = (0..k)
            .map(|i| v_min + span * i as f64 / (k - 1) as f64)
            .collect();
        Support { atoms, v_min, v_max, delta: span / (k - 1) as f64 }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Project the shifted/scaled support `r + gamma_eff * z_k`, carrying the
/// mass of `next_probs`, back onto the fixed support by linear interpolation.
/// Each target atom is clamped into `[v_min, v_max]` first, so saturated
/// returns pile up at the boundary atoms. Total mass is conserved exactly.
pub fn project_categorical(sup: &Support, r: f64, gamma_eff: f64, next_probs: &[f64]) -> Vec<f64> {
    let k = sup.len();
    assert_eq!(next_probs.len(), k, "projection distribution length mismatch");
    validate_distribution(next_probs);
    let mut out = vec![0.0; k];
    let top = (k - 1) as f64;
    for (j, &p) in next_probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let tz = (r + gamma_eff * sup.atoms[j]).clamp(sup.v_min, sup.v_max);
        let b = ((tz - sup.v_min) / sup.delta).clamp(0.0, top);
        let l = b.floor();
        let u = b.ceil();
        let li = l as usize;
        let ui = u as usize;
        if li == ui {
            out[li] += p;
        } else {
            out[li] += p * (u - b);
            out[ui] += p * (b - l);
        }
    }
    out
}

/// Per-action expectation of the distribution: sum_k atoms[k] * probs[a, k].
pub fn scalar_q(sup: &Support, probs: &[f64]) -> Vec<f64> {
    let k = sup.len();
    assert_eq!(probs.len() % k, 0, "probs not a multiple of atom count");
    probs
        .chunks_exact(k)
        .map(|row| {
            let mut acc = 0.0;
            for (&z, &p) in sup.atoms.iter().zip(row.iter()) {
                acc += z * p;
            }
            acc
        })
        .collect()
}

/// Per-action categorical value distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DistQ {
    pub actions: usize,
    pub atoms: usize,
    /// Row-major `[actions x atoms]`, each row a distribution.
    pub probs: Vec<f64>,
}

impl DistQ {
    pub fn new(actions: usize, atoms: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), actions * atoms);
        for row in probs.chunks_exact(atoms) {
            validate_distribution(row);
        }
        DistQ { actions, atoms, probs }
    }

    pub fn row(&self, action: usize) -> &[f64] {
        &self.probs[action * self.atoms..(action + 1) * self.atoms]
    }
}

/// Dueling aggregation to a `DistQ`: per-atom logits
/// `v[k] + adv[a,k] - mean_a' adv[a',k]`, then a per-action softmax.
pub fn dueling_aggregate(v_logits: &[f64], adv_logits: &[f64], actions: usize, atoms: usize) -> DistQ {
    assert_eq!(v_logits.len(), atoms, "value logits length");
    assert_eq!(adv_logits.len(), actions * atoms, "advantage logits length");
    let mut combined = vec![0.0; actions * atoms];
    dueling_combine_raw(v_logits, adv_logits, 1, actions, atoms, &mut combined);
    let mut probs = vec![0.0; actions * atoms];
    for a in 0..actions {
        let row = &combined[a * atoms..(a + 1) * atoms];
        probs[a * atoms..(a + 1) * atoms].copy_from_slice(&softmax(row));
    }
    DistQ { actions, atoms, probs }
}

// ---------------------------------------------------------------------------
// Noisy linear layers (factorized Gaussian noise).
// ---------------------------------------------------------------------------

/// Parameters of a noisy linear layer: means plus learned noise scales.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLinearParams {
    pub mu_w: Tensor,
    pub sigma_w: Tensor,
    pub mu_b: Tensor,
    pub sigma_b: Tensor,
}

impl NoisyLinearParams {
    /// NoisyNets initialization: mu ~ U[-1/sqrt(p), 1/sqrt(p)] and
    /// sigma = sigma0 / sqrt(p) with p the fan-in.
    pub fn init(out_dim: usize, in_dim: usize, sigma0: f64, rng: &mut Rng64) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut mu_w = Tensor::zeros(vec![out_dim, in_dim]);
        mu_w.fill_uniform(-bound, bound, rng);
        let mut mu_b = Tensor::zeros(vec![out_dim]);
        mu_b.fill_uniform(-bound, bound, rng);
        let mut sigma_w = Tensor::zeros(vec![out_dim, in_dim]);
        sigma_w.fill(sigma0 / (in_dim as f64).sqrt());
        let mut sigma_b = Tensor::zeros(vec![out_dim]);
        sigma_b.fill(sigma0 / (in_dim as f64).sqrt());
        NoisyLinearParams { mu_w, sigma_w, mu_b, sigma_b }
    }
}

/// Factorized noise scaling f(x) = sign(x) * sqrt(|x|).
pub fn noise_scale(x: f64) -> f64 {
    x.signum() * x.abs().sqrt()
}

/// Draw factorized noise factors `f(eps_in)`, `f(eps_out)` for a layer.
pub fn sample_factorized_noise(in_dim: usize, out_dim: usize, rng: &mut Rng64) -> (Vec<f64>, Vec<f64>) {
    let f_in: Vec<f64> = (0..in_dim).map(|_| noise_scale(rng.normal())).collect();
    let f_out: Vec<f64> = (0..out_dim).map(|_| noise_scale(rng.normal())).collect();
    (f_in, f_out)
}

/// Forward pass of a noisy linear layer. `noise = None` runs in the
/// noise-zeroed (evaluation) mode with mean parameters only.
pub fn noisy_linear_forward(
    p: &NoisyLinearParams,
    x: &Tensor,
    noise: Option<(&[f64], &[f64])>,
) -> Tensor {
    let (out_dim, in_dim) = (p.mu_w.shape()[0], p.mu_w.shape()[1]);
    assert_eq!(p.sigma_w.shape(), p.mu_w.shape(), "sigma shape mismatch");
    match noise {
        None => crate::tensor::linear_forward(x, &p.mu_w, &p.mu_b),
        Some((f_in, f_out)) => {
            assert_eq!(f_in.len(), in_dim);
            assert_eq!(f_out.len(), out_dim);
            let mut w = Tensor::zeros(vec![out_dim, in_dim]);
            for o in 0..out_dim {
                for i in 0..in_dim {
                    w.data_mut()[o * in_dim + i] = p.mu_w.data()[o * in_dim + i]
                        + p.sigma_w.data()[o * in_dim + i] * f_out[o] * f_in[i];
                }
            }
            let mut b = Tensor::zeros(vec![out_dim]);
            for o in 0..out_dim {
                b.data_mut()[o] = p.mu_b.data()[o] + p.sigma_b.data()[o] * f_out[o];
            }
            crate::tensor::linear_forward(x, &w, &b)
        }
    }
}

// ---------------------------------------------------------------------------
// n-step return aggregation.
// ---------------------------------------------------------------------------

/// One step waiting inside the n-step window. Observations are stored as
/// frame-log indices (four stacked frames each).
#[derive(Debug, Clone, PartialEq)]
pub struct PendingStep {
    pub obs: [u32; 4],
    pub action: u8,
    pub reward: f64,
}

/// An emitted transition: the one-step record (state, action, reward,
/// next state) plus the n-step aggregation metadata the Q-learning loss
/// consumes. Auxiliary tasks read the one-step fields.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepTransition {
    pub obs: [u32; 4],
    pub action: u8,
    /// Clipped one-step reward r_t.
    pub reward1: f64,
    /// Observation at t+1.
    pub next_obs1: [u32; 4],
    /// Observation at t+n' (bootstrap state).
    pub next_obs_n: [u32; 4],
    /// R^(n): discounted sum of the next n' clipped rewards.
    pub return_n: f64,
    /// gamma^(n'); bootstrapping is additionally masked by `done`.
    pub gamma_eff: f64,
    pub done: bool,
}

/// Ring of the last `n` steps; emits n-step transitions once the window is
/// full, and flushes the remainder at episode end.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepBuffer {
    pub n: usize,
    pub gamma: f64,
    pending: Vec<PendingStep>,
}

impl NStepBuffer {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!(n >= 1);
        NStepBuffer { n, gamma, pending: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn pending(&self) -> &[PendingStep] {
        &self.pending
    }

    pub fn restore(n: usize, gamma: f64, pending: Vec<PendingStep>) -> Self {
        NStepBuffer { n, gamma, pending }
    }

    fn emit_front(&mut self, next_obs: [u32; 4], done: bool) -> NStepTransition {
        assert!(!self.pending.is_empty(), "emit on empty n-step buffer");
        let steps = self.pending.len().min(self.n);
        let mut ret = 0.0;
        let mut discount = 1.0;
        for step in self.pending.iter().take(steps) {
            ret += discount * step.reward;
            discount *= self.gamma;
        }
        // the one-step successor of the front entry is the next entry's
        // observation, or the final observation when nothing follows
        let next_obs1 = if self.pending.len() >= 2 { self.pending[1].obs } else { next_obs };
        let first = self.pending.remove(0);
        NStepTransition {
            obs: first.obs,
            action: first.action,
            reward1: first.reward,
            next_obs1,
            next_obs_n: next_obs,
            return_n: ret,
            gamma_eff: discount,
            done,
        }
    }

    /// Record one environment step. `next_obs` is the observation after the
    /// step. Returns the transitions that became complete.
    pub fn push(
        &mut self,
        obs: [u32; 4],
        action: u8,
        reward: f64,
        next_obs: [u32; 4],
        done: bool,
    ) -> Vec<NStepTransition> {
        self.pending.push(PendingStep { obs, action, reward });
        let mut out = Vec::new();
        if done {
            while !self.pending.is_empty() {
                out.push(self.emit_front(next_obs, true));
            }
        } else if self.pending.len() >= self.n {
            out.push(self.emit_front(next_obs, false));
        }
        out
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    fn support_3() -> Support {
        Support::new(-1.0, 1.0, 3)
    }

    #[test]
    fn support_invariants() {
        let s = Support::new(-10.0, 10.0, 51);
        assert_eq!(s.atoms[0], -10.0);
        assert_eq!(s.atoms[50], 10.0);
        for w in s.atoms.windows(2) {
            assert!((w[1] - w[0] - s.delta).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_identity() {
        let s = support_3();
        let next = vec![0.0, 1.0, 0.0];
        let out = project_categorical(&s, 0.0, 1.0, &next);
        assert_eq!(out, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_clamps_to_top_atom() {
        let s = support_3();
        let next = vec![0.3, 0.4, 0.3];
        let out = project_categorical(&s, 10.0, 1.0, &next);
        assert!((out[2] - 1.0).abs() <= 1e-12);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn projection_conserves_mass_and_expectation() {
        let mut rng = Rng64::seeded(13);
        let s = Support::new(-10.0, 10.0, 51);
        for _ in 0..200 {
            let r = rng.uniform(-1.0, 1.0);
            let gamma_eff = rng.uniform(0.0, 1.0);
            let raw: Vec<f64> = (0..51).map(|_| rng.next_f64() + 1e-9).collect();
            let sum: f64 = raw.iter().sum();
            let next: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let out = project_categorical(&s, r, gamma_eff, &next);
            let mass: f64 = out.iter().sum();
            assert!((mass - 1.0).abs() <= 1e-12, "mass {mass}");
            // expectation preserved when nothing clamps
            let all_inside = s
                .atoms
                .iter()
                .all(|&z| (r + gamma_eff * z) > s.v_min && (r + gamma_eff * z) < s.v_max);
            if all_inside {
                let want: f64 = s
                    .atoms
                    .iter()
                    .zip(next.iter())
                    .map(|(&z, &p)| p * (r + gamma_eff * z))
                    .sum();
                let got: f64 = s.atoms.iter().zip(out.iter()).map(|(&z, &p)| z * p).sum();
                assert!((want - got).abs() <= 1e-9, "expectation {want} vs {got}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "distribution sums")]
    fn projection_rejects_invalid_distribution() {
        project_categorical(&support_3(), 0.0, 1.0, &[0.5, 0.2, 0.1]);
    }

    #[test]
    fn scalar_q_cases() {
        let s = support_3();
        let q = scalar_q(&s, &[0.25, 0.5, 0.25]);
        assert_eq!(q, vec![0.0]);
        let q = scalar_q(&s, &[0.0, 0.0, 1.0]);
        assert_eq!(q, vec![1.0]);
        let q = scalar_q(&s, &[0.1, 0.2, 0.7]);
        assert!((q[0] - 0.6).abs() <= 1e-12);
        // linear in probs
        let mut rng = Rng64::seeded(4);
        let mk = |rng: &mut Rng64| {
            let raw: Vec<f64> = (0..3).map(|_| rng.next_f64() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        for _ in 0..20 {
            let d1 = mk(&mut rng);
            let d2 = mk(&mut rng);
            let alpha = rng.next_f64();
            let mix: Vec<f64> = d1
                .iter()
                .zip(d2.iter())
                .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
                .collect();
            let lhs = scalar_q(&s, &mix)[0];
            let rhs = alpha * scalar_q(&s, &d1)[0] + (1.0 - alpha) * scalar_q(&s, &d2)[0];
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn dueling_equal_advantages_cancel() {
        let mut rng = Rng64::seeded(5);
        let atoms = 5;
        let v: Vec<f64> = (0..atoms).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let adv_row: Vec<f64> = (0..atoms).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut adv = Vec::new();
        for _ in 0..3 {
            adv.extend_from_slice(&adv_row);
        }
        let d = dueling_aggregate(&v, &adv, 3, atoms);
        // advantage cancels against its own mean: every row is softmax(v)
        let want = softmax(&v);
        for a in 0..3 {
            for (x, y) in d.row(a).iter().zip(want.iter()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dueling_single_action_reduces_to_softmax_v_plus_zero() {
        let mut rng = Rng64::seeded(6);
        let atoms = 7;
        let v: Vec<f64> = (0..atoms).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let adv: Vec<f64> = (0..atoms).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let d = dueling_aggregate(&v, &adv, 1, atoms);
        let want = softmax(&v);
        for (x, y) in d.row(0).iter().zip(want.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn dueling_rows_are_distributions_and_match_formula() {
        let mut rng = Rng64::seeded(7);
        let (a, k) = (4, 6);
        let v: Vec<f64> = (0..k).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let adv: Vec<f64> = (0..a * k).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let d = dueling_aggregate(&v, &adv, a, k);
        for ai in 0..a {
            let row = d.row(ai);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            // direct formula oracle
            let mut logits = vec![0.0; k];
            for ki in 0..k {
                let mean: f64 = (0..a).map(|x| adv[x * k + ki]).sum::<f64>() / a as f64;
                logits[ki] = v[ki] + adv[ai * k + ki] - mean;
            }
            let want = softmax(&logits);
            for (x, y) in row.iter().zip(want.iter()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        // invariance to a per-atom constant added to every action's advantage
        let c: Vec<f64> = (0..k).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let mut shifted = adv.clone();
        for ai in 0..a {
            for ki in 0..k {
                shifted[ai * k + ki] += c[ki];
            }
        }
        let d2 = dueling_aggregate(&v, &shifted, a, k);
        for (x, y) in d.probs.iter().zip(d2.probs.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn noisy_layer_modes() {
        let mut rng = Rng64::seeded(8);
        let p = NoisyLinearParams::init(3, 4, 0.1, &mut rng);
        let mut x = Tensor::zeros(vec![2, 4]);
        x.fill_uniform(-1.0, 1.0, &mut rng);
        // zeroed mode equals plain linear on the means
        let zeroed = noisy_linear_forward(&p, &x, None);
        let plain = crate::tensor::linear_forward(&x, &p.mu_w, &p.mu_b);
        assert_eq!(zeroed.data(), plain.data());
        // sigma = 0 makes sampled mode equal zeroed mode
        let mut pz = p.clone();
        pz.sigma_w.fill(0.0);
        pz.sigma_b.fill(0.0);
        let (fi, fo) = sample_factorized_noise(4, 3, &mut rng);
        let sampled = noisy_linear_forward(&pz, &x, Some((&fi, &fo)));
        assert_eq!(sampled.data(), zeroed.data());
        // same seed, same draw: bit-identical
        let mut r1 = Rng64::seeded(99);
        let mut r2 = Rng64::seeded(99);
        let n1 = sample_factorized_noise(4, 3, &mut r1);
        let n2 = sample_factorized_noise(4, 3, &mut r2);
        assert_eq!(n1, n2);
        let y1 = noisy_linear_forward(&p, &x, Some((&n1.0, &n1.1)));
        let y2 = noisy_linear_forward(&p, &x, Some((&n2.0, &n2.1)));
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn nstep_emission() {
        let obs = |i: u32| [i, i, i, i];
        // all rewards zero
        let mut buf = NStepBuffer::new(3, 0.5);
        assert!(buf.push(obs(0), 0, 0.0, obs(1), false).is_empty());
        assert!(buf.push(obs(1), 0, 0.0, obs(2), false).is_empty());
        let out = buf.push(obs(2), 0, 0.0, obs(3), false);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].return_n, 0.0);

        // n = 1 reduces to one-step
        let mut buf = NStepBuffer::new(1, 0.9);
        let out = buf.push(obs(0), 2, 0.7, obs(1), false);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].return_n, 0.7);
        assert_eq!(out[0].gamma_eff, 0.9);
        assert_eq!(out[0].reward1, 0.7);
        assert_eq!(out[0].next_obs1, obs(1));
        assert_eq!(out[0].next_obs_n, obs(1));
        assert!(!out[0].done);

        // n = 3, rewards [1, 0, 1], gamma 0.5 -> R = 1.25, gamma_eff = 0.125
        let mut buf = NStepBuffer::new(3, 0.5);
        buf.push(obs(0), 0, 1.0, obs(1), false);
        buf.push(obs(1), 0, 0.0, obs(2), false);
        let out = buf.push(obs(2), 0, 1.0, obs(3), false);
        assert_eq!(out.len(), 1);
        assert!((out[0].return_n - 1.25).abs() <= 1e-12);
        assert!((out[0].gamma_eff - 0.125).abs() <= 1e-12);
        assert_eq!(out[0].reward1, 1.0, "one-step reward of the front entry");
        assert_eq!(out[0].next_obs1, obs(1), "one-step successor");
        assert_eq!(out[0].next_obs_n, obs(3), "bootstrap state at t+n");

        // terminal flush emits everything with done = true
        let mut buf = NStepBuffer::new(3, 0.5);
        buf.push(obs(0), 0, 1.0, obs(1), false);
        let out = buf.push(obs(1), 0, 1.0, obs(2), true);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|t| t.done));
        assert!((out[0].return_n - 1.5).abs() <= 1e-12);
        assert!((out[1].return_n - 1.0).abs() <= 1e-12);
        assert!(buf.is_empty());
    }

    #[test]
    #[should_panic(expected = "empty n-step buffer")]
    fn nstep_emit_on_empty_panics() {
        let mut buf = NStepBuffer::new(3, 0.5);
        buf.emit_front([0; 4], false);
    }
}

//! TD-return proxy measurement of bias, variance and covariance for trained
//! agents: the unknown optimal value is replaced by the bootstrapped return
//! `G = E[r + gamma max_a' Q(s', a')]`, with the expectation over parameters
//! taken empirically across independent training runs.

use crate::error::RenqError;

/// Member-resolved scalar Q access for one trained run.
pub trait EnsembleQ {
    fn members(&self) -> usize;
    /// Scalar Q per action for member `m` (noise zeroed).
    fn member_q(&self, m: usize, obs: &[f64]) -> Vec<f64>;
    /// Scalar ensemble Q per action (noise zeroed).
    fn ensemble_q(&self, obs: &[f64]) -> Vec<f64>;
}

/// Environment surface the collection rollout needs.
pub trait ProxyEnv {
    fn num_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// (next observation, reward, done)
    fn step(&mut self, action: usize) -> (Vec<f64>, f64, bool);
}

/// One collected off-buffer transition.
#[derive(Debug, Clone)]
pub struct ProxyTransition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Gather `n` fresh transitions with the epsilon-greedy policy of the
/// measured ensemble.
pub fn collect_transitions(
    policy: &dyn EnsembleQ,
    env: &mut dyn ProxyEnv,
    n: usize,
    epsilon: f64,
    seed: u64,
) -> Vec<ProxyTransition> {
    let mut rng = crate::rng::Rng64::seeded(seed);
    let mut out = Vec::with_capacity(n);
    let mut episode = 0u64;
    let mut obs = env.reset(crate::rng::stream_seed(seed, "proxy_env", episode));
    while out.len() < n {
        let action = if rng.next_f64() < epsilon {
            rng.below(env.num_actions())
        } else {
            let q = policy.ensemble_q(&obs);
            crate::agent::argmax_tie_low(&q)
        };
        let (next, reward, done) = env.step(action);
        out.push(ProxyTransition { obs: obs.clone(), action, reward, next_obs: next.clone(), done });
        if done {
            episode += 1;
            obs = env.reset(crate::rng::stream_seed(seed, "proxy_env", episode));
        } else {
            obs = next;
        }
    }
    out
}

/// Proxy measurement over runs (rows shaped like the reporting table).
#[derive(Debug, Clone)]
pub struct ProxyReport {
    pub runs: usize,
    pub members: usize,
    /// Mean over (runs, members, transitions) of Q(s,a) - G.
    pub bias_hat: f64,
    pub bias_hat_sq: f64,
    /// Across-run variance of member predictions, averaged.
    pub var_bar: f64,
    /// Across-run covariance between member pairs, averaged (M >= 2).
    pub cov_bar: Option<f64>,
    /// Across-run variance of the TD label itself.
    pub sigma_sq: f64,
    /// bias^2 + var/M + (1 - 1/M) cov + sigma^2.
    pub ge_hat: f64,
}

/// Measure proxy bias/variance/covariance for >= 2 runs of the same config
/// on a shared transition set. Terminal transitions bootstrap at zero.
pub fn measure_proxy_bias(
    runs: &[&dyn EnsembleQ],
    transitions: &[ProxyTransition],
    gamma: f64,
) -> Result<ProxyReport, RenqError> {
    if runs.len() < 2 {
        return Err(RenqError::Bvc(format!(
            "proxy measurement needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    if transitions.is_empty() {
        return Err(RenqError::Bvc("no transitions to measure".into()));
    }
    let m = runs[0].members();
    if runs.iter().any(|r| r.members() != m) {
        return Err(RenqError::Bvc("runs have different ensemble sizes".into()));
    }
    let r_count = runs.len();
    let n = transitions.len();

    let mut bias_acc = 0.0;
    let mut var_acc = 0.0;
    let mut cov_acc = 0.0;
    let mut sigma_acc = 0.0;
    let pair_count = m * (m - 1) / 2;

    for t in transitions.iter() {
        // per-run TD labels y_rho = r + gamma max_a' Qhat_rho(s', a')
        let labels: Vec<f64> = runs
            .iter()
            .map(|run| {
                if t.done {
                    t.reward
                } else {
                    let q = run.ensemble_q(&t.next_obs);
                    t.reward + gamma * q.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let g = labels.iter().sum::<f64>() / r_count as f64;
        sigma_acc += labels.iter().map(|&y| (y - g) * (y - g)).sum::<f64>()
            / (r_count as f64 - 1.0);

        // member predictions at (s, a) across runs
        let mut preds = vec![0.0; r_count * m];
        for (ri, run) in runs.iter().enumerate() {
            for mi in 0..m {
                preds[ri * m + mi] = run.member_q(mi, &t.obs)[t.action];
            }
        }
        for mi in 0..m {
            let mean: f64 =
                (0..r_count).map(|ri| preds[ri * m + mi]).sum::<f64>() / r_count as f64;
            bias_acc += mean - g;
            var_acc += (0..r_count)
                .map(|ri| {
                    let d = preds[ri * m + mi] - mean;
                    d * d
                })
                .sum::<f64>()
                / (r_count as f64 - 1.0);
        }
        if m >= 2 {
            for x in 0..m {
                for y in (x + 1)..m {
                    let mx: f64 =
                        (0..r_count).map(|ri| preds[ri * m + x]).sum::<f64>() / r_count as f64;
                    let my: f64 =
                        (0..r_count).map(|ri| preds[ri * m + y]).sum::<f64>() / r_count as f64;
                    cov_acc += (0..r_count)
                        .map(|ri| (preds[ri * m + x] - mx) * (preds[ri * m + y] - my))
                        .sum::<f64>()
                        / (r_count as f64 - 1.0);
                }
            }
        }
    }

    let bias_hat = bias_acc / (n * m) as f64;
    let var_bar = var_acc / (n * m) as f64;
    let cov_bar = if m >= 2 { Some(cov_acc / (n * pair_count) as f64) } else { None };
    let sigma_sq = sigma_acc / n as f64;
    let mf = m as f64;
    let ge_hat = bias_hat * bias_hat
        + var_bar / mf
        + (1.0 - 1.0 / mf) * cov_bar.unwrap_or(0.0)
        + sigma_sq;
    Ok(ProxyReport {
        runs: r_count,
        members: m,
        bias_hat,
        bias_hat_sq: bias_hat * bias_hat,
        var_bar,
        cov_bar,
        sigma_sq,
        ge_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    /// Tabular ensemble over one-hot observations.
    pub struct Tabular {
        /// q[m][state][action]
        pub q: Vec<Vec<Vec<f64>>>,
    }

    impl EnsembleQ for Tabular {
        fn members(&self) -> usize {
            self.q.len()
        }
        fn member_q(&self, m: usize, obs: &[f64]) -> Vec<f64> {
            let s = obs.iter().position(|&v| v == 1.0).unwrap();
            self.q[m][s].clone()
        }
        fn ensemble_q(&self, obs: &[f64]) -> Vec<f64> {
            let s = obs.iter().position(|&v| v == 1.0).unwrap();
            let a = self.q[0][s].len();
            (0..a)
                .map(|ai| {
                    self.q.iter().map(|m| m[s][ai]).sum::<f64>() / self.q.len() as f64
                })
                .collect()
        }
    }

    /// Deterministic 3-state ring with zero reward.
    struct Ring3 {
        state: usize,
    }

    impl ProxyEnv for Ring3 {
        fn num_actions(&self) -> usize {
            2
        }
        fn reset(&mut self, seed: u64) -> Vec<f64> {
            self.state = (seed % 3) as usize;
            one_hot(self.state)
        }
        fn step(&mut self, action: usize) -> (Vec<f64>, f64, bool) {
            self.state = (self.state + 1 + action) % 3;
            (one_hot(self.state), 0.0, false)
        }
    }

    fn one_hot(s: usize) -> Vec<f64> {
        let mut v = vec![0.0; 3];
        v[s] = 1.0;
        v
    }

    fn const_tabular(members: usize, value: f64) -> Tabular {
        Tabular { q: vec![vec![vec![value; 2]; 3]; members] }
    }

    #[test]
    fn scripted_three_state_bias_is_one_percent() {
        // Q = 1 everywhere, r = 0, gamma = 0.99: bias = 1 - 0.99 = 0.01
        let run_a = const_tabular(2, 1.0);
        let run_b = const_tabular(2, 1.0);
        let mut env = Ring3 { state: 0 };
        let transitions = collect_transitions(&run_a, &mut env, 50, 0.001, 9);
        let report =
            measure_proxy_bias(&[&run_a, &run_b], &transitions, 0.99).unwrap();
        assert!((report.bias_hat - 0.01).abs() <= 1e-9, "bias {}", report.bias_hat);
        assert_eq!(report.var_bar, 0.0);
        assert_eq!(report.cov_bar, Some(0.0));
        assert_eq!(report.sigma_sq, 0.0);
    }

    #[test]
    fn q_equals_g_gives_zero_bias() {
        // gamma = 0 makes G = r = 0 and Q = 0 everywhere
        let run_a = const_tabular(1, 0.0);
        let run_b = const_tabular(1, 0.0);
        let mut env = Ring3 { state: 0 };
        let transitions = collect_transitions(&run_a, &mut env, 20, 0.0, 3);
        let report = measure_proxy_bias(&[&run_a, &run_b], &transitions, 0.0).unwrap();
        assert_eq!(report.bias_hat, 0.0);
        assert!(report.cov_bar.is_none(), "covariance undefined for M = 1");
    }

    #[test]
    fn fewer_than_two_runs_rejected() {
        let run = const_tabular(1, 0.0);
        let mut env = Ring3 { state: 0 };
        let transitions = collect_transitions(&run, &mut env, 5, 0.0, 3);
        assert!(measure_proxy_bias(&[&run], &transitions, 0.9).is_err());
    }

    #[test]
    fn random_frozen_agents_match_loop_oracle() {
        let mut rng = Rng64::seeded(17);
        let mut mk = |_: usize| -> Tabular {
            Tabular {
                q: (0..3)
                    .map(|_| {
                        (0..3)
                            .map(|_| (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect())
                            .collect()
                    })
                    .collect(),
            }
        };
        let runs = [mk(0), mk(1), mk(2)];
        let refs: Vec<&dyn EnsembleQ> = runs.iter().map(|r| r as &dyn EnsembleQ).collect();
        let mut env = Ring3 { state: 0 };
        let transitions = collect_transitions(&runs[0], &mut env, 40, 0.05, 5);
        let gamma = 0.9;
        let report = measure_proxy_bias(&refs, &transitions, gamma).unwrap();

        // independent transition-loop oracle for the bias
        let mut acc = 0.0;
        for t in &transitions {
            let g = refs
                .iter()
                .map(|r| {
                    let q = r.ensemble_q(&t.next_obs);
                    t.reward + gamma * q.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                })
                .sum::<f64>()
                / 3.0;
            for r in &refs {
                for m in 0..r.members() {
                    acc += r.member_q(m, &t.obs)[t.action] - g;
                }
            }
        }
        let want = acc / (transitions.len() * 3 * 3) as f64;
        assert!((report.bias_hat - want).abs() <= 1e-9);
        // internal consistency of the reported decomposition
        let m = report.members as f64;
        let sum = report.bias_hat_sq
            + report.var_bar / m
            + (1.0 - 1.0 / m) * report.cov_bar.unwrap()
            + report.sigma_sq;
        assert!((sum - report.ge_hat).abs() <= 1e-12);
    }
}

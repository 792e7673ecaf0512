//! Monte-Carlo laboratory for the bias/variance/covariance decomposition of
//! randomized learners and their ensembles.
//!
//! A [`TrialGrid`] caches predictions of `D x S` trained models (D sampled
//! datasets, S seeds per dataset) on a fixed test set. Estimators follow the
//! single-dataset randomized-algorithm setting: members of an ensemble share
//! the dataset and differ only in their seed stream. Standard errors come
//! from delete-one-dataset jackknifing, applied directly to the quantity
//! under test (identities use the SE of the difference).
//!
//! Estimator conventions, chosen so the degenerate cases collapse exactly:
//! deviations are taken from the grand sample mean; Var uses the (N-1)
//! normalization; the within-learner covariance sums products over seed
//! pairs s != s' with a matching normalization, so seed-identical cells give
//! Cov == Var bit-for-bit; member-pair covariances pair cells with the same
//! seed index, so shared-seed ensembles give Cov == Var bit-for-bit.

pub mod proxy;
pub mod synthetic;

use crate::error::RenqError;
use crate::rng::{stream_seed, Rng64};

/// A trained model evaluated pointwise.
pub trait Predictor {
    fn predict(&self, x: &[f64]) -> f64;
}

/// A randomized learning algorithm: same (dataset, seed) must give the same
/// predictor. `Sync` so grid cells can train on worker threads.
pub trait Learner: Sync {
    fn train(&self, data: &Dataset, seed: u64) -> Box<dyn Predictor>;
}

/// Worker count for grid training: `RENQ_THREADS` when set, otherwise the
/// machine's available parallelism.
pub fn worker_threads() -> usize {
    match std::env::var("RENQ_THREADS") {
        Ok(v) => v.parse().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
}

/// A synthetic regression task with a known target function and known label
/// noise, so the irreducible error term is exact.
pub trait SyntheticTask: Sync {
    fn dim(&self) -> usize;
    fn f_star(&self, x: &[f64]) -> f64;
    fn sample_x(&self, rng: &mut Rng64) -> Vec<f64>;
    fn noise_sigma2(&self) -> f64;

    fn sample_dataset(&self, n: usize, rng: &mut Rng64) -> Dataset {
        let sigma = self.noise_sigma2().sqrt();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.sample_x(rng);
            let y = self.f_star(&x) + sigma * rng.normal();
            xs.push(x);
            ys.push(y);
        }
        Dataset { xs, ys }
    }
}

/// Complete prediction grid: D datasets x S seeds x T test points, plus one
/// noisy test label per (dataset, point).
pub struct TrialGrid {
    pub d: usize,
    pub s: usize,
    pub t: usize,
    /// preds[(di * s + si) * t + ti]
    pub preds: Vec<f64>,
    pub f_star: Vec<f64>,
    /// labels[di * t + ti] = f*(x_t) + fresh noise
    pub labels: Vec<f64>,
    pub sigma2: f64,
}

impl TrialGrid {
    #[inline]
    pub fn pred(&self, di: usize, si: usize, ti: usize) -> f64 {
        self.preds[(di * self.s + si) * self.t + ti]
    }
}

/// Train the full grid. Reproducible from the master seed; the first cell is
/// trained twice and compared bitwise to detect nondeterministic learners.
pub fn run_trials(
    learner: &dyn Learner,
    task: &dyn SyntheticTask,
    d: usize,
    s: usize,
    n_train: usize,
    t_test: usize,
    master_seed: u64,
) -> Result<TrialGrid, RenqError> {
    if d == 0 || s == 0 || t_test == 0 {
        return Err(RenqError::Bvc("empty trial grid".into()));
    }
    let mut test_rng = Rng64::from_stream(master_seed, "bvc_test", 0);
    let test_xs: Vec<Vec<f64>> = (0..t_test).map(|_| task.sample_x(&mut test_rng)).collect();
    let f_star: Vec<f64> = test_xs.iter().map(|x| task.f_star(x)).collect();
    let sigma = task.noise_sigma2().sqrt();

    let mut preds = vec![0.0; d * s * t_test];
    let mut labels = vec![0.0; d * t_test];
    // datasets are independent: fan them out over worker threads, each
    // writing its own disjoint slice (deterministic regardless of timing)
    let workers = worker_threads().min(d);
    let fill_dataset = |di: usize, pred_slice: &mut [f64], label_slice: &mut [f64]| {
        let mut data_rng = Rng64::from_stream(master_seed, "bvc_data", di as u64);
        let data = task.sample_dataset(n_train, &mut data_rng);
        let mut label_rng = Rng64::from_stream(master_seed, "bvc_label", di as u64);
        for ti in 0..t_test {
            label_slice[ti] = f_star[ti] + sigma * label_rng.normal();
        }
        for si in 0..s {
            let seed = stream_seed(master_seed, "bvc_cell", (di * s + si) as u64);
            let model = learner.train(&data, seed);
            for (ti, x) in test_xs.iter().enumerate() {
                pred_slice[si * t_test + ti] = model.predict(x);
            }
        }
    };
    if workers <= 1 {
        for di in 0..d {
            let (ps, ls) = (
                &mut preds[di * s * t_test..(di + 1) * s * t_test],
                &mut labels[di * t_test..(di + 1) * t_test],
            );
            fill_dataset(di, ps, ls);
        }
    } else {
        let pred_chunks: Vec<&mut [f64]> = preds.chunks_mut(s * t_test).collect();
        let label_chunks: Vec<&mut [f64]> = labels.chunks_mut(t_test).collect();
        let jobs: Vec<(usize, &mut [f64], &mut [f64])> = pred_chunks
            .into_iter()
            .zip(label_chunks)
            .enumerate()
            .map(|(di, (p, l))| (di, p, l))
            .collect();
        let queue = std::sync::Mutex::new(jobs);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let job = queue.lock().unwrap().pop();
                    match job {
                        Some((di, p, l)) => fill_dataset(di, p, l),
                        None => break,
                    }
                });
            }
        });
    }
    // nondeterminism probe: retrain the first cell and compare bitwise
    {
        let mut data_rng = Rng64::from_stream(master_seed, "bvc_data", 0);
        let data = task.sample_dataset(n_train, &mut data_rng);
        let seed = stream_seed(master_seed, "bvc_cell", 0);
        let again = learner.train(&data, seed);
        for (ti, x) in test_xs.iter().enumerate() {
            if again.predict(x) != preds[ti] {
                return Err(RenqError::Bvc(
                    "learner is nondeterministic: retraining the same cell differs".into(),
                ));
            }
        }
    }
    Ok(TrialGrid { d, s, t: t_test, preds, f_star, labels, sigma2: task.noise_sigma2() })
}

// ---------------------------------------------------------------------------
// Estimators.
// ---------------------------------------------------------------------------

/// Delete-one-dataset jackknife: `est` maps an inclusion mask to a scalar.
fn jackknife<F: Fn(&[bool]) -> f64>(d: usize, est: F) -> (f64, f64) {
    let full_mask = vec![true; d];
    let full = est(&full_mask);
    if d < 2 {
        return (full, f64::INFINITY);
    }
    let mut reps = Vec::with_capacity(d);
    for i in 0..d {
        let mut mask = full_mask.clone();
        mask[i] = false;
        reps.push(est(&mask));
    }
    let mean = reps.iter().sum::<f64>() / d as f64;
    let var = reps.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() * (d as f64 - 1.0)
        / d as f64;
    (full, var.sqrt())
}

/// Estimates for a single randomized learner (Theorem-1 quantities plus the
/// within-learner seed covariance used by the inequality checks).
#[derive(Debug, Clone)]
pub struct SingleBvc {
    pub bias_sq: f64,
    pub var: f64,
    /// Covariance across distinct seeds within a dataset.
    pub cov: f64,
    pub sigma2: f64,
    pub ge_direct: f64,
    pub ge_decomposed: f64,
    pub se_identity: f64,
    pub se_var_minus_cov: f64,
    pub se_ge: f64,
    /// Per-test-point (bias, var).
    pub per_point: Vec<(f64, f64)>,
}

struct SinglePartials {
    d: usize,
    s: usize,
    t: usize,
    s1: Vec<f64>,
    s2: Vec<f64>,
    gdir: Vec<f64>,
    f_star: Vec<f64>,
    sigma2: f64,
}

impl SinglePartials {
    fn build(grid: &TrialGrid) -> Self {
        let (d, s, t) = (grid.d, grid.s, grid.t);
        let mut s1 = vec![0.0; d * t];
        let mut s2 = vec![0.0; d * t];
        let mut gdir = vec![0.0; d * t];
        for di in 0..d {
            for si in 0..s {
                for ti in 0..t {
                    let f = grid.pred(di, si, ti);
                    s1[di * t + ti] += f;
                    s2[di * t + ti] += f * f;
                    let e = grid.labels[di * t + ti] - f;
                    gdir[di * t + ti] += e * e;
                }
            }
        }
        SinglePartials { d, s, t, s1, s2, gdir, f_star: grid.f_star.clone(), sigma2: grid.sigma2 }
    }

    fn n_incl(&self, mask: &[bool]) -> usize {
        mask.iter().filter(|&&b| b).count() * self.s
    }

    /// (bias, var, cov, ge_direct) per point under a dataset mask.
    fn point_stats(&self, ti: usize, mask: &[bool]) -> (f64, f64, f64, f64) {
        let n = self.n_incl(mask) as f64;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut gd = 0.0;
        for di in 0..self.d {
            if mask[di] {
                sum += self.s1[di * self.t + ti];
                sq += self.s2[di * self.t + ti];
                gd += self.gdir[di * self.t + ti];
            }
        }
        let mean = sum / n;
        let var = (sq - n * mean * mean) / (n - 1.0);
        // sum over s != s' of dev products, per dataset:
        // (sum_s dev)^2 - sum_s dev^2 with dev = f - grand mean
        let sw = self.s as f64;
        let mut pair = 0.0;
        for di in 0..self.d {
            if mask[di] {
                let t1 = self.s1[di * self.t + ti];
                let t2 = self.s2[di * self.t + ti];
                let dev_sum = t1 - sw * mean;
                let dev_sq = t2 - 2.0 * mean * t1 + sw * mean * mean;
                pair += dev_sum * dev_sum - dev_sq;
            }
        }
        let cov = pair / ((n - 1.0) * (sw - 1.0).max(1.0));
        let bias = mean - self.f_star[ti];
        (bias, var, cov, gd / n)
    }

    fn ge_direct(&self, mask: &[bool]) -> f64 {
        (0..self.t).map(|ti| self.point_stats(ti, mask).3).sum::<f64>() / self.t as f64
    }

    fn ge_decomposed(&self, mask: &[bool]) -> f64 {
        (0..self.t)
            .map(|ti| {
                let (b, v, _, _) = self.point_stats(ti, mask);
                v + b * b
            })
            .sum::<f64>()
            / self.t as f64
            + self.sigma2
    }

    fn var_bar(&self, mask: &[bool]) -> f64 {
        (0..self.t).map(|ti| self.point_stats(ti, mask).1).sum::<f64>() / self.t as f64
    }

    fn cov_bar(&self, mask: &[bool]) -> f64 {
        (0..self.t).map(|ti| self.point_stats(ti, mask).2).sum::<f64>() / self.t as f64
    }
}

/// Theorem-1 estimates: per-point variance and bias over all (dataset, seed)
/// cells, the decomposed error `E[Var + Bias^2] + sigma^2` and the direct
/// Monte-Carlo error against fresh noisy labels.
pub fn estimate_single_bvc(grid: &TrialGrid) -> SingleBvc {
    let p = SinglePartials::build(grid);
    let full = vec![true; grid.d];
    let per_point: Vec<(f64, f64)> = (0..grid.t)
        .map(|ti| {
            let (b, v, _, _) = p.point_stats(ti, &full);
            (b, v)
        })
        .collect();
    let bias_sq = per_point.iter().map(|&(b, _)| b * b).sum::<f64>() / grid.t as f64;
    let var = p.var_bar(&full);
    let cov = p.cov_bar(&full);
    let (ge_direct, se_ge) = jackknife(grid.d, |m| p.ge_direct(m));
    let ge_decomposed = p.ge_decomposed(&full);
    let (_, se_identity) = jackknife(grid.d, |m| p.ge_direct(m) - p.ge_decomposed(m));
    let (_, se_var_minus_cov) = jackknife(grid.d, |m| p.var_bar(m) - p.cov_bar(m));
    SingleBvc {
        bias_sq,
        var,
        cov,
        sigma2: grid.sigma2,
        ge_direct,
        ge_decomposed,
        se_identity,
        se_var_minus_cov,
        se_ge,
        per_point,
    }
}

/// How ensemble members map onto the seed axis of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedMode {
    /// Member m owns its own contiguous block of seed columns.
    Independent,
    /// Every member reads the same block: identical predictor sets.
    Shared,
}

/// Theorem-2 estimates for an M-member ensemble built from the grid.
#[derive(Debug, Clone)]
pub struct EnsembleBvc {
    pub m: usize,
    pub bias_bar_sq: f64,
    pub var_bar: f64,
    pub cov_bar: f64,
    pub sigma2: f64,
    pub ge_direct: f64,
    pub ge_decomposed: f64,
    pub se_identity: f64,
    pub se_var_minus_cov: f64,
    pub se_ge: f64,
    /// Per-member bias per test point: [m][t].
    pub member_bias: Vec<Vec<f64>>,
    /// Conditional-mean (per-dataset seed average) covariance, averaged over
    /// member pairs and points, with the jackknife SE of its difference from
    /// the cluster-corrected direct estimate.
    pub cov_conditional: f64,
    /// Direct pairwise covariance with the cluster-corrected normalization
    /// (the estimator the conditional route is compared against).
    pub cov_direct_unbiased: f64,
    pub se_cov_route_diff: f64,
}

struct EnsemblePartials {
    d: usize,
    sp: usize,
    t: usize,
    m: usize,
    a: Vec<f64>,     // [m][d][t] sums
    sq: Vec<f64>,    // [m][d][t] squared sums
    cp: Vec<f64>,    // [pair][d][t] cross products, pairs m<m'
    gens: Vec<f64>,  // [d][t] ensemble squared errors
    f_star: Vec<f64>,
    sigma2: f64,
    pairs: Vec<(usize, usize)>,
}

impl EnsemblePartials {
    fn build(grid: &TrialGrid, m: usize, mode: SeedMode) -> Self {
        let sp = match mode {
            SeedMode::Independent => grid.s / m,
            SeedMode::Shared => grid.s,
        };
        let (d, t) = (grid.d, grid.t);
        let col = |mi: usize, j: usize| match mode {
            SeedMode::Independent => mi * sp + j,
            SeedMode::Shared => j,
        };
        let mut a = vec![0.0; m * d * t];
        let mut sq = vec![0.0; m * d * t];
        let pairs: Vec<(usize, usize)> =
            (0..m).flat_map(|x| ((x + 1)..m).map(move |y| (x, y))).collect();
        let mut cp = vec![0.0; pairs.len() * d * t];
        let mut gens = vec![0.0; d * t];
        for di in 0..d {
            for j in 0..sp {
                for ti in 0..t {
                    let mut group_sum = 0.0;
                    for mi in 0..m {
                        let f = grid.pred(di, col(mi, j), ti);
                        a[(mi * d + di) * t + ti] += f;
                        sq[(mi * d + di) * t + ti] += f * f;
                        group_sum += f;
                    }
                    for (pi, &(x, y)) in pairs.iter().enumerate() {
                        let fx = grid.pred(di, col(x, j), ti);
                        let fy = grid.pred(di, col(y, j), ti);
                        cp[(pi * d + di) * t + ti] += fx * fy;
                    }
                    let f_ens = group_sum / m as f64;
                    let e = grid.labels[di * t + ti] - f_ens;
                    gens[di * t + ti] += e * e;
                }
            }
        }
        EnsemblePartials {
            d,
            sp,
            t,
            m,
            a,
            sq,
            cp,
            gens,
            f_star: grid.f_star.clone(),
            sigma2: grid.sigma2,
            pairs,
        }
    }

    fn n_incl(&self, mask: &[bool]) -> f64 {
        (mask.iter().filter(|&&b| b).count() * self.sp) as f64
    }

    fn member_mean(&self, mi: usize, ti: usize, mask: &[bool]) -> f64 {
        let mut sum = 0.0;
        for di in 0..self.d {
            if mask[di] {
                sum += self.a[(mi * self.d + di) * self.t + ti];
            }
        }
        sum / self.n_incl(mask)
    }

    fn member_var(&self, mi: usize, ti: usize, mask: &[bool]) -> f64 {
        let n = self.n_incl(mask);
        let mean = self.member_mean(mi, ti, mask);
        let mut sq = 0.0;
        for di in 0..self.d {
            if mask[di] {
                sq += self.sq[(mi * self.d + di) * self.t + ti];
            }
        }
        (sq - n * mean * mean) / (n - 1.0)
    }

    fn pair_cov(&self, pi: usize, ti: usize, mask: &[bool]) -> f64 {
        let (x, y) = self.pairs[pi];
        let n = self.n_incl(mask);
        let mx = self.member_mean(x, ti, mask);
        let my = self.member_mean(y, ti, mask);
        let mut cross = 0.0;
        for di in 0..self.d {
            if mask[di] {
                cross += self.cp[(pi * self.d + di) * self.t + ti];
            }
        }
        (cross - n * mx * my) / (n - 1.0)
    }

    /// Cluster-corrected pairwise covariance: same-dataset cells share Z, so
    /// the unbiased normalization for independent member streams is n - s'.
    fn pair_cov_unbiased(&self, pi: usize, ti: usize, mask: &[bool]) -> f64 {
        let (x, y) = self.pairs[pi];
        let n = self.n_incl(mask);
        let mx = self.member_mean(x, ti, mask);
        let my = self.member_mean(y, ti, mask);
        let mut cross = 0.0;
        for di in 0..self.d {
            if mask[di] {
                cross += self.cp[(pi * self.d + di) * self.t + ti];
            }
        }
        (cross - n * mx * my) / (n - self.sp as f64)
    }

    fn cov_unbiased_bar(&self, mask: &[bool]) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        (0..self.t)
            .map(|ti| {
                (0..self.pairs.len())
                    .map(|pi| self.pair_cov_unbiased(pi, ti, mask))
                    .sum::<f64>()
                    / self.pairs.len() as f64
            })
            .sum::<f64>()
            / self.t as f64
    }

    fn bias_bar_sq(&self, mask: &[bool]) -> f64 {
        (0..self.t)
            .map(|ti| {
                let b = (0..self.m)
                    .map(|mi| self.member_mean(mi, ti, mask) - self.f_star[ti])
                    .sum::<f64>()
                    / self.m as f64;
                b * b
            })
            .sum::<f64>()
            / self.t as f64
    }

    fn var_bar(&self, mask: &[bool]) -> f64 {
        (0..self.t)
            .map(|ti| {
                (0..self.m).map(|mi| self.member_var(mi, ti, mask)).sum::<f64>() / self.m as f64
            })
            .sum::<f64>()
            / self.t as f64
    }

    fn cov_bar(&self, mask: &[bool]) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        (0..self.t)
            .map(|ti| {
                (0..self.pairs.len())
                    .map(|pi| self.pair_cov(pi, ti, mask))
                    .sum::<f64>()
                    / self.pairs.len() as f64
            })
            .sum::<f64>()
            / self.t as f64
    }

    fn ge_direct(&self, mask: &[bool]) -> f64 {
        let n = self.n_incl(mask);
        let mut acc = 0.0;
        for ti in 0..self.t {
            for di in 0..self.d {
                if mask[di] {
                    acc += self.gens[di * self.t + ti];
                }
            }
        }
        acc / (n * self.t as f64)
    }

    fn ge_decomposed(&self, mask: &[bool]) -> f64 {
        let m = self.m as f64;
        (0..self.t)
            .map(|ti| {
                let bias = (0..self.m)
                    .map(|mi| self.member_mean(mi, ti, mask) - self.f_star[ti])
                    .sum::<f64>()
                    / m;
                let var = (0..self.m).map(|mi| self.member_var(mi, ti, mask)).sum::<f64>() / m;
                let cov = if self.pairs.is_empty() {
                    0.0
                } else {
                    (0..self.pairs.len())
                        .map(|pi| self.pair_cov(pi, ti, mask))
                        .sum::<f64>()
                        / self.pairs.len() as f64
                };
                bias * bias + var / m + (1.0 - 1.0 / m) * cov
            })
            .sum::<f64>()
            / self.t as f64
            + self.sigma2
    }

    /// Proposition-2 route: covariance of per-dataset seed averages.
    fn cov_conditional(&self, mask: &[bool]) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let dn = mask.iter().filter(|&&b| b).count() as f64;
        let sw = self.sp as f64;
        let mut total = 0.0;
        for ti in 0..self.t {
            let mut pair_acc = 0.0;
            for (pi, &(x, y)) in self.pairs.iter().enumerate() {
                let _ = pi;
                let mx = self.member_mean(x, ti, mask);
                let my = self.member_mean(y, ti, mask);
                let mut acc = 0.0;
                for di in 0..self.d {
                    if mask[di] {
                        let ax = self.a[(x * self.d + di) * self.t + ti] / sw - mx;
                        let ay = self.a[(y * self.d + di) * self.t + ti] / sw - my;
                        acc += ax * ay;
                    }
                }
                pair_acc += acc / (dn - 1.0);
            }
            total += pair_acc / self.pairs.len() as f64;
        }
        total / self.t as f64
    }
}

/// Theorem-2 estimates for an M-member ensemble carved out of the grid's
/// seed axis. `Shared` mode makes every member identical (degenerate case).
pub fn estimate_ensemble_bvc(
    grid: &TrialGrid,
    m: usize,
    mode: SeedMode,
) -> Result<EnsembleBvc, RenqError> {
    if m == 0 || (mode == SeedMode::Independent && m > grid.s) {
        return Err(RenqError::Bvc(format!(
            "ensemble size {m} exceeds the {} seeds per dataset",
            grid.s
        )));
    }
    let p = EnsemblePartials::build(grid, m, mode);
    let full = vec![true; grid.d];
    let member_bias: Vec<Vec<f64>> = (0..m)
        .map(|mi| {
            (0..grid.t)
                .map(|ti| p.member_mean(mi, ti, &full) - grid.f_star[ti])
                .collect()
        })
        .collect();
    let (ge_direct, se_ge) = jackknife(grid.d, |msk| p.ge_direct(msk));
    let ge_decomposed = p.ge_decomposed(&full);
    let (_, se_identity) = jackknife(grid.d, |msk| p.ge_direct(msk) - p.ge_decomposed(msk));
    let (_, se_var_minus_cov) = jackknife(grid.d, |msk| p.var_bar(msk) - p.cov_bar(msk));
    let cov_conditional = p.cov_conditional(&full);
    let cov_direct_unbiased = p.cov_unbiased_bar(&full);
    let (_, se_cov_route_diff) =
        jackknife(grid.d, |msk| p.cov_conditional(msk) - p.cov_unbiased_bar(msk));
    Ok(EnsembleBvc {
        m,
        bias_bar_sq: p.bias_bar_sq(&full),
        var_bar: p.var_bar(&full),
        cov_bar: p.cov_bar(&full),
        sigma2: grid.sigma2,
        ge_direct,
        ge_decomposed,
        se_identity,
        se_var_minus_cov,
        se_ge,
        member_bias,
        cov_conditional,
        cov_direct_unbiased,
        se_cov_route_diff,
    })
}

// ---------------------------------------------------------------------------
// Proposition 1: co-bias expansion.
// ---------------------------------------------------------------------------

/// Per-pair co-bias matrix (averaged over test points) and the worst-case
/// residual of the identity
/// `Bias_bar^2 = (1/M^2)[sum_m Bias_m^2 + sum_{m != m'} Cob(m, m')]`,
/// which is exact algebra on the estimates.
pub fn decompose_bias_cobias(member_bias: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let m = member_bias.len();
    assert!(m >= 1);
    let t = member_bias[0].len();
    let mut cob = vec![vec![0.0; m]; m];
    for x in 0..m {
        for y in 0..m {
            cob[x][y] = (0..t)
                .map(|ti| member_bias[x][ti] * member_bias[y][ti])
                .sum::<f64>()
                / t as f64;
        }
    }
    let mut worst = 0.0f64;
    for ti in 0..t {
        let bias_bar =
            member_bias.iter().map(|b| b[ti]).sum::<f64>() / m as f64;
        let lhs = bias_bar * bias_bar;
        let mut sq = 0.0;
        let mut cross = 0.0;
        for x in 0..m {
            sq += member_bias[x][ti] * member_bias[x][ti];
            for y in 0..m {
                if x != y {
                    cross += member_bias[x][ti] * member_bias[y][ti];
                }
            }
        }
        let rhs = (sq + cross) / (m * m) as f64;
        worst = worst.max((lhs - rhs).abs());
    }
    (cob, worst)
}

// ---------------------------------------------------------------------------
// Inequality checks (Lemma 1 / Theorem 3).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InequalityOutcome {
    pub cov_le_var: bool,
    pub cov_gap: f64,
    pub cov_slack: f64,
    pub ge_ens_le_single: bool,
    pub ge_gap: f64,
    pub ge_slack: f64,
}

/// Check `Cov_bar <= Var_bar + 2 SE` and `GE(ens) <= GE(single) + 2 SE` for
/// an identical-member configuration.
pub fn check_inequalities(single: &SingleBvc, ens: &EnsembleBvc) -> InequalityOutcome {
    let cov_slack = 2.0 * ens.se_var_minus_cov;
    let cov_gap = ens.cov_bar - ens.var_bar;
    let ge_slack = 2.0 * (single.se_ge * single.se_ge + ens.se_ge * ens.se_ge).sqrt();
    let ge_gap = ens.ge_direct - single.ge_direct;
    InequalityOutcome {
        cov_le_var: cov_gap <= cov_slack,
        cov_gap,
        cov_slack,
        ge_ens_le_single: ge_gap <= ge_slack,
        ge_gap,
        ge_slack,
    }
}

// ---------------------------------------------------------------------------
// Heterogeneous multi-learner grids (co-bias / covariance studies).
// ---------------------------------------------------------------------------

/// Per-member prediction grids over shared datasets: members may be
/// different learners, each with its own independent seed stream.
pub struct MultiGrid {
    pub m: usize,
    pub d: usize,
    pub s: usize,
    pub t: usize,
    /// preds[((mi * d + di) * s + si) * t + ti]
    pub preds: Vec<f64>,
    pub f_star: Vec<f64>,
    pub labels: Vec<f64>,
    pub sigma2: f64,
}

impl MultiGrid {
    #[inline]
    pub fn pred(&self, mi: usize, di: usize, si: usize, ti: usize) -> f64 {
        self.preds[((mi * self.d + di) * self.s + si) * self.t + ti]
    }
}

/// Train heterogeneous members on shared datasets. `shared_seeds` reuses the
/// same seed per cell across members (degenerate covariance case when the
/// members are also the same learner).
#[allow(clippy::too_many_arguments)]
pub fn run_trials_multi(
    learners: &[&dyn Learner],
    task: &dyn SyntheticTask,
    d: usize,
    s: usize,
    n_train: usize,
    t_test: usize,
    master_seed: u64,
    shared_seeds: bool,
) -> Result<MultiGrid, RenqError> {
    let m = learners.len();
    if m == 0 || d == 0 || s == 0 {
        return Err(RenqError::Bvc("empty multi grid".into()));
    }
    let mut test_rng = Rng64::from_stream(master_seed, "bvc_test", 0);
    let test_xs: Vec<Vec<f64>> = (0..t_test).map(|_| task.sample_x(&mut test_rng)).collect();
    let f_star: Vec<f64> = test_xs.iter().map(|x| task.f_star(x)).collect();
    let sigma = task.noise_sigma2().sqrt();
    let mut preds = vec![0.0; m * d * s * t_test];
    let mut labels = vec![0.0; d * t_test];
    for di in 0..d {
        let mut data_rng = Rng64::from_stream(master_seed, "bvc_data", di as u64);
        let data = task.sample_dataset(n_train, &mut data_rng);
        let mut label_rng = Rng64::from_stream(master_seed, "bvc_label", di as u64);
        for ti in 0..t_test {
            labels[di * t_test + ti] = f_star[ti] + sigma * label_rng.normal();
        }
        for (mi, learner) in learners.iter().enumerate() {
            for si in 0..s {
                let stream_m = if shared_seeds { 0 } else { mi };
                let seed = stream_seed(
                    master_seed,
                    "bvc_cell_m",
                    ((stream_m * d + di) * s + si) as u64,
                );
                let model = learner.train(&data, seed);
                for (ti, x) in test_xs.iter().enumerate() {
                    preds[((mi * d + di) * s + si) * t_test + ti] = model.predict(x);
                }
            }
        }
    }
    Ok(MultiGrid { m, d, s, t: t_test, preds, f_star, labels, sigma2: task.noise_sigma2() })
}

/// Covariance between two members of a MultiGrid, by both routes: the direct
/// cell-aligned estimate and the Proposition-2 conditional-mean estimate.
/// Returns (direct, conditional, jackknife SE of their difference).
pub fn multi_cov_routes(grid: &MultiGrid, mx: usize, my: usize) -> (f64, f64, f64) {
    let (d, s, t) = (grid.d, grid.s, grid.t);
    let est = |mask: &[bool], route_cond: bool| -> f64 {
        let dn = mask.iter().filter(|&&b| b).count() as f64;
        let n = dn * s as f64;
        let mut total = 0.0;
        for ti in 0..t {
            let mut sum_x = 0.0;
            let mut sum_y = 0.0;
            for di in 0..d {
                if mask[di] {
                    for si in 0..s {
                        sum_x += grid.pred(mx, di, si, ti);
                        sum_y += grid.pred(my, di, si, ti);
                    }
                }
            }
            let mean_x = sum_x / n;
            let mean_y = sum_y / n;
            let v = if route_cond {
                let mut acc = 0.0;
                for di in 0..d {
                    if mask[di] {
                        let mut ax = 0.0;
                        let mut ay = 0.0;
                        for si in 0..s {
                            ax += grid.pred(mx, di, si, ti);
                            ay += grid.pred(my, di, si, ti);
                        }
                        acc += (ax / s as f64 - mean_x) * (ay / s as f64 - mean_y);
                    }
                }
                acc / (dn - 1.0)
            } else {
                let mut acc = 0.0;
                for di in 0..d {
                    if mask[di] {
                        for si in 0..s {
                            acc += (grid.pred(mx, di, si, ti) - mean_x)
                                * (grid.pred(my, di, si, ti) - mean_y);
                        }
                    }
                }
                // cluster correction: all same-dataset cell pairs share Z
                acc / (n - s as f64)
            };
            total += v;
        }
        total / t as f64
    };
    let full = vec![true; d];
    let direct = est(&full, false);
    let cond = est(&full, true);
    let (_, se_diff) = jackknife(d, |mask| est(mask, true) - est(mask, false));
    (direct, cond, se_diff)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstLearner(f64);
    struct ConstPredictor(f64);
    impl Predictor for ConstPredictor {
        fn predict(&self, _x: &[f64]) -> f64 {
            self.0
        }
    }
    impl Learner for ConstLearner {
        fn train(&self, _data: &Dataset, _seed: u64) -> Box<dyn Predictor> {
            Box::new(ConstPredictor(self.0))
        }
    }

    /// Predicts dataset-mean + a seed-dependent wiggle (for covariance).
    struct SeedWiggleLearner {
        pub wiggle: f64,
    }
    struct WigglePredictor {
        base: f64,
        off: f64,
    }
    impl Predictor for WigglePredictor {
        fn predict(&self, _x: &[f64]) -> f64 {
            self.base + self.off
        }
    }
    impl Learner for SeedWiggleLearner {
        fn train(&self, data: &Dataset, seed: u64) -> Box<dyn Predictor> {
            let base = data.ys.iter().sum::<f64>() / data.ys.len() as f64;
            let mut rng = Rng64::seeded(seed);
            Box::new(WigglePredictor { base, off: self.wiggle * rng.normal() })
        }
    }

    struct FlatTask;
    impl SyntheticTask for FlatTask {
        fn dim(&self) -> usize {
            1
        }
        fn f_star(&self, _x: &[f64]) -> f64 {
            1.0
        }
        fn sample_x(&self, rng: &mut Rng64) -> Vec<f64> {
            vec![rng.uniform(-1.0, 1.0)]
        }
        fn noise_sigma2(&self) -> f64 {
            0.04
        }
    }

    #[test]
    fn constant_learner_grid_is_constant() {
        let grid = run_trials(&ConstLearner(2.0), &FlatTask, 3, 4, 8, 5, 1).unwrap();
        assert!(grid.preds.iter().all(|&v| v == 2.0));
        let one = run_trials(&ConstLearner(2.0), &FlatTask, 1, 1, 8, 5, 1).unwrap();
        assert_eq!(one.preds.len(), 5);
    }

    #[test]
    fn nondeterministic_learner_detected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        struct Flaky(AtomicU64);
        impl Learner for Flaky {
            fn train(&self, _d: &Dataset, _s: u64) -> Box<dyn Predictor> {
                let v = self.0.fetch_add(1, Ordering::SeqCst) + 1;
                Box::new(ConstPredictor(v as f64))
            }
        }
        let err = run_trials(&Flaky(AtomicU64::new(0)), &FlatTask, 2, 2, 4, 3, 1);
        assert!(err.is_err());
    }

    #[test]
    fn exact_predictor_gives_zero_components() {
        struct Exact;
        impl Learner for Exact {
            fn train(&self, _d: &Dataset, _s: u64) -> Box<dyn Predictor> {
                Box::new(ConstPredictor(1.0)) // f* of FlatTask
            }
        }
        struct NoiselessFlat;
        impl SyntheticTask for NoiselessFlat {
            fn dim(&self) -> usize {
                1
            }
            fn f_star(&self, _x: &[f64]) -> f64 {
                1.0
            }
            fn sample_x(&self, rng: &mut Rng64) -> Vec<f64> {
                vec![rng.uniform(-1.0, 1.0)]
            }
            fn noise_sigma2(&self) -> f64 {
                0.0
            }
        }
        let grid = run_trials(&Exact, &NoiselessFlat, 4, 3, 8, 6, 2).unwrap();
        let r = estimate_single_bvc(&grid);
        assert_eq!(r.bias_sq, 0.0);
        assert_eq!(r.var, 0.0);
        assert_eq!(r.ge_direct, 0.0);
        assert_eq!(r.ge_decomposed, 0.0);
    }

    #[test]
    fn constant_offset_gives_pure_bias() {
        struct OffsetTask;
        impl SyntheticTask for OffsetTask {
            fn dim(&self) -> usize {
                1
            }
            fn f_star(&self, _x: &[f64]) -> f64 {
                1.0
            }
            fn sample_x(&self, rng: &mut Rng64) -> Vec<f64> {
                vec![rng.uniform(-1.0, 1.0)]
            }
            fn noise_sigma2(&self) -> f64 {
                0.0
            }
        }
        // predictor = f* + 0.5 everywhere
        let grid = run_trials(&ConstLearner(1.5), &OffsetTask, 4, 3, 8, 6, 3).unwrap();
        let r = estimate_single_bvc(&grid);
        assert!((r.bias_sq - 0.25).abs() <= 1e-12);
        assert_eq!(r.var, 0.0);
    }

    #[test]
    fn seed_identical_cells_make_cov_equal_var_exactly() {
        // learner depends on the dataset but not the seed
        struct DataOnly;
        impl Learner for DataOnly {
            fn train(&self, data: &Dataset, _seed: u64) -> Box<dyn Predictor> {
                let mean = data.ys.iter().sum::<f64>() / data.ys.len() as f64;
                Box::new(ConstPredictor(mean))
            }
        }
        let grid = run_trials(&DataOnly, &FlatTask, 16, 8, 8, 4, 4).unwrap();
        let r = estimate_single_bvc(&grid);
        assert!(r.var > 0.0, "dataset noise induces variance");
        assert!(
            (r.cov - r.var).abs() <= 1e-12 * r.var.abs().max(1.0),
            "cov {} must equal var {} exactly for seed-identical cells",
            r.cov,
            r.var
        );
        // ensemble over shared seeds: identical members
        let ens = estimate_ensemble_bvc(&grid, 4, SeedMode::Shared).unwrap();
        assert!((ens.cov_bar - ens.var_bar).abs() <= 1e-12 * ens.var_bar.max(1.0));
        assert!((ens.ge_direct - r.ge_direct).abs() <= 1e-12);
    }

    #[test]
    fn identity_holds_for_seed_wiggle_learner() {
        let learner = SeedWiggleLearner { wiggle: 0.3 };
        let grid = run_trials(&learner, &FlatTask, 60, 20, 16, 8, 5).unwrap();
        let r = estimate_single_bvc(&grid);
        let diff = (r.ge_direct - r.ge_decomposed).abs();
        assert!(
            diff <= 3.0 * r.se_identity,
            "identity violated: diff {diff} vs 3 se {}",
            3.0 * r.se_identity
        );
        // ensemble of 5 with independent seeds
        let ens = estimate_ensemble_bvc(&grid, 5, SeedMode::Independent).unwrap();
        let diff = (ens.ge_direct - ens.ge_decomposed).abs();
        assert!(diff <= 3.0 * ens.se_identity, "ensemble identity: {diff}");
        // seed wiggles are independent across seeds: cov covers only the
        // dataset-induced part, strictly below var
        assert!(ens.cov_bar < ens.var_bar);
        let ineq = check_inequalities(&r, &ens);
        assert!(ineq.cov_le_var && ineq.ge_ens_le_single);
    }

    #[test]
    fn ensemble_m1_reduces_to_single() {
        let learner = SeedWiggleLearner { wiggle: 0.2 };
        let grid = run_trials(&learner, &FlatTask, 10, 6, 8, 4, 6).unwrap();
        let single = estimate_single_bvc(&grid);
        let ens = estimate_ensemble_bvc(&grid, 1, SeedMode::Independent).unwrap();
        assert!((ens.bias_bar_sq - single.bias_sq).abs() <= 1e-12);
        assert!((ens.var_bar - single.var).abs() <= 1e-12);
        assert!((ens.ge_direct - single.ge_direct).abs() <= 1e-12);
        assert!(estimate_ensemble_bvc(&grid, 7, SeedMode::Independent).is_err());
    }

    #[test]
    fn cobias_identity_and_cases() {
        // equal biases b: Cob = b^2, Bias_bar^2 = b^2
        let biases = vec![vec![0.3; 4], vec![0.3; 4]];
        let (cob, resid) = decompose_bias_cobias(&biases);
        assert!((cob[0][1] - 0.09).abs() <= 1e-15);
        assert!(resid <= 1e-15);
        // opposite biases cancel: Bias_bar^2 = 0, Cob = -c^2
        let biases = vec![vec![0.5; 4], vec![-0.5; 4]];
        let (cob, resid) = decompose_bias_cobias(&biases);
        assert!((cob[0][1] + 0.25).abs() <= 1e-15);
        assert!(resid <= 1e-15);
        // random member biases: identity to 1e-12
        let mut rng = Rng64::seeded(7);
        let biases: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..16).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .collect();
        let (_, resid) = decompose_bias_cobias(&biases);
        assert!(resid <= 1e-12, "algebraic identity residual {resid}");
    }

    #[test]
    fn conditional_mean_covariance_routes_agree() {
        // dataset-independent predictors give zero covariance by both routes
        struct SeedOnly;
        impl Learner for SeedOnly {
            fn train(&self, _d: &Dataset, seed: u64) -> Box<dyn Predictor> {
                let mut rng = Rng64::seeded(seed);
                Box::new(ConstPredictor(rng.normal()))
            }
        }
        let grid =
            run_trials_multi(&[&SeedOnly, &SeedOnly], &FlatTask, 40, 10, 8, 4, 8, false).unwrap();
        let (direct, cond, se) = multi_cov_routes(&grid, 0, 1);
        assert!(direct.abs() <= 3.0 * se.max(1e-3), "direct {direct}");
        assert!(cond.abs() <= 3.0 * se.max(1e-3), "cond {cond}");

        // dataset-coupled learners: both routes estimate the same quantity
        let a = SeedWiggleLearner { wiggle: 0.2 };
        let b = SeedWiggleLearner { wiggle: 0.4 };
        let grid = run_trials_multi(&[&a, &b], &FlatTask, 60, 12, 8, 4, 9, false).unwrap();
        let (direct, cond, se) = multi_cov_routes(&grid, 0, 1);
        assert!(
            (direct - cond).abs() <= 3.0 * se,
            "routes differ: {direct} vs {cond} (se {se})"
        );
        assert!(direct > 0.0, "shared datasets induce positive covariance");
    }

    #[test]
    fn adversarial_inequality_report_fails() {
        let single = SingleBvc {
            bias_sq: 0.0,
            var: 1.0,
            cov: 0.5,
            sigma2: 0.0,
            ge_direct: 1.0,
            ge_decomposed: 1.0,
            se_identity: 0.01,
            se_var_minus_cov: 0.01,
            se_ge: 0.01,
            per_point: vec![],
        };
        let bad = EnsembleBvc {
            m: 3,
            bias_bar_sq: 0.0,
            var_bar: 1.0,
            cov_bar: 1.5, // above var beyond slack
            sigma2: 0.0,
            ge_direct: 2.0, // above single beyond slack
            ge_decomposed: 2.0,
            se_identity: 0.01,
            se_var_minus_cov: 0.01,
            se_ge: 0.01,
            member_bias: vec![],
            cov_conditional: 0.0,
            cov_direct_unbiased: 0.0,
            se_cov_route_diff: 0.01,
        };
        let out = check_inequalities(&single, &bad);
        assert!(!out.cov_le_var);
        assert!(!out.ge_ens_le_single);
    }

    #[test]
    fn estimates_invariant_to_seed_and_dataset_permutation() {
        let learner = SeedWiggleLearner { wiggle: 0.25 };
        let grid = run_trials(&learner, &FlatTask, 8, 6, 8, 4, 11).unwrap();
        let base = estimate_single_bvc(&grid);
        // permute datasets and seeds
        let mut permuted = TrialGrid {
            d: grid.d,
            s: grid.s,
            t: grid.t,
            preds: vec![0.0; grid.preds.len()],
            f_star: grid.f_star.clone(),
            labels: vec![0.0; grid.labels.len()],
            sigma2: grid.sigma2,
        };
        let dperm: Vec<usize> = (0..grid.d).map(|i| (i + 3) % grid.d).collect();
        let sperm: Vec<usize> = (0..grid.s).map(|i| (i + 2) % grid.s).collect();
        for di in 0..grid.d {
            for si in 0..grid.s {
                for ti in 0..grid.t {
                    permuted.preds[(dperm[di] * grid.s + sperm[si]) * grid.t + ti] =
                        grid.pred(di, si, ti);
                }
            }
            for ti in 0..grid.t {
                permuted.labels[dperm[di] * grid.t + ti] = grid.labels[di * grid.t + ti];
            }
        }
        let p = estimate_single_bvc(&permuted);
        assert!((p.var - base.var).abs() <= 1e-12);
        assert!((p.bias_sq - base.bias_sq).abs() <= 1e-12);
        assert!((p.ge_direct - base.ge_direct).abs() <= 1e-12);
        assert!((p.cov - base.cov).abs() <= 1e-12);
    }
}

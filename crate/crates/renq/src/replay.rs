//! Shared transition store with per-member prioritized sum-tree views.
//!
//! Transitions (and the frame log backing their observations) are stored once
//! regardless of how many ensemble members exist; each member owns only a
//! priority index over the shared store, mirroring the buffer-sharing setup
//! the agents train with.

use crate::distributional::NStepTransition;
use crate::error::RenqError;
use crate::rng::Rng64;

/// Append-only frame log + transition records, shared across all views.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStore {
    pub frame_len: usize,
    frames: Vec<u8>,
    transitions: Vec<NStepTransition>,
}

impl TransitionStore {
    pub fn new(frame_len: usize) -> Self {
        TransitionStore { frame_len, frames: Vec::new(), transitions: Vec::new() }
    }

    /// Append one rendered frame, returning its stable index.
    pub fn push_frame(&mut self, frame: &[u8]) -> u32 {
        assert_eq!(frame.len(), self.frame_len, "frame length mismatch");
        let idx = self.frames.len() / self.frame_len;
        self.frames.extend_from_slice(frame);
        idx as u32
    }

    pub fn frame(&self, idx: u32) -> &[u8] {
        let start = idx as usize * self.frame_len;
        &self.frames[start..start + self.frame_len]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len() / self.frame_len
    }

    pub fn push_transition(&mut self, t: NStepTransition) -> usize {
        self.transitions.push(t);
        self.transitions.len() - 1
    }

    pub fn transition(&self, idx: usize) -> &NStepTransition {
        &self.transitions[idx]
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Write the four stacked frames of an observation as f64 pixels in
    /// [0, 1] (palette levels are value/4).
    pub fn write_obs(&self, obs: &[u32; 4], out: &mut [f64]) {
        assert_eq!(out.len(), 4 * self.frame_len);
        for (slot, &fidx) in obs.iter().enumerate() {
            let frame = self.frame(fidx);
            for (o, &v) in out[slot * self.frame_len..(slot + 1) * self.frame_len]
                .iter_mut()
                .zip(frame.iter())
            {
                *o = v as f64 * 0.25;
            }
        }
    }

    pub fn raw_frames(&self) -> &[u8] {
        &self.frames
    }

    pub fn transitions(&self) -> &[NStepTransition] {
        &self.transitions
    }

    pub fn restore(frame_len: usize, frames: Vec<u8>, transitions: Vec<NStepTransition>) -> Self {
        TransitionStore { frame_len, frames, transitions }
    }
}

// ---------------------------------------------------------------------------
// Sum tree.
// ---------------------------------------------------------------------------

/// Array-backed binary sum tree over leaf priorities. Internal node `i` holds
/// the sum of its children `2i+1`, `2i+2`; leaves start at `cap - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SumTree {
    cap: usize,
    n: usize,
    tree: Vec<f64>,
}

impl SumTree {
    pub fn new() -> Self {
        SumTree { cap: 1, n: 0, tree: vec![0.0; 1] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn total(&self) -> f64 {
        self.tree[0]
    }

    pub fn leaf(&self, idx: usize) -> f64 {
        assert!(idx < self.n);
        self.tree[self.cap - 1 + idx]
    }

    fn grow(&mut self) {
        let new_cap = (self.cap * 2).max(2);
        let mut leaves = vec![0.0; new_cap];
        for i in 0..self.n {
            leaves[i] = self.tree[self.cap - 1 + i];
        }
        self.cap = new_cap;
        self.tree = vec![0.0; 2 * new_cap - 1];
        self.tree[new_cap - 1..].copy_from_slice(&leaves);
        // rebuild internal sums bottom-up
        for i in (0..new_cap - 1).rev() {
            self.tree[i] = self.tree[2 * i + 1] + self.tree[2 * i + 2];
        }
    }

    pub fn push(&mut self, priority: f64) -> usize {
        if self.n == self.cap {
            self.grow();
        }
        let idx = self.n;
        self.n += 1;
        self.set(idx, priority);
        idx
    }

    pub fn set(&mut self, idx: usize, priority: f64) {
        assert!(idx < self.n, "leaf {idx} out of range {}", self.n);
        assert!(priority >= 0.0 && priority.is_finite(), "invalid priority {priority}");
        let mut pos = self.cap - 1 + idx;
        let delta = priority - self.tree[pos];
        self.tree[pos] = priority;
        while pos > 0 {
            pos = (pos - 1) / 2;
            self.tree[pos] += delta;
        }
    }

    /// Find the leaf whose cumulative prefix interval contains `mass`.
    pub fn query(&self, mass: f64) -> usize {
        assert!(self.n > 0, "query on empty tree");
        let mut pos = 0usize;
        let mut m = mass;
        while pos < self.cap - 1 {
            let left = 2 * pos + 1;
            if m <= self.tree[left] || self.tree[left + 1] == 0.0 {
                pos = left;
            } else {
                m -= self.tree[left];
                pos = left + 1;
            }
        }
        (pos - (self.cap - 1)).min(self.n.saturating_sub(1))
    }

    pub fn raw_tree(&self) -> (&[f64], usize, usize) {
        (&self.tree, self.cap, self.n)
    }

    pub fn restore(tree: Vec<f64>, cap: usize, n: usize) -> Self {
        assert_eq!(tree.len(), (2 * cap - 1).max(1));
        SumTree { cap, n, tree }
    }
}

impl Default for SumTree {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Prioritized view.
// ---------------------------------------------------------------------------

/// One sampled batch: store indices and normalized importance weights.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Per-member prioritized index over the shared store.
///
/// Leaves hold `(raw priority)^omega` with `raw = loss + eps_p`; new
/// transitions enter at the maximum raw priority seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizedView {
    pub omega: f64,
    pub eps_p: f64,
    pub max_raw: f64,
    tree: SumTree,
}

pub const PRIORITY_EPS: f64 = 1e-6;

impl PrioritizedView {
    pub fn new(omega: f64) -> Self {
        PrioritizedView { omega, eps_p: PRIORITY_EPS, max_raw: 1.0, tree: SumTree::new() }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Register a freshly stored transition at max priority.
    pub fn on_push(&mut self) {
        self.tree.push(self.max_raw.powf(self.omega));
    }

    /// Stratified prioritized sample of `batch` indices with importance
    /// weights `(N P(i))^-beta`, normalized by the batch maximum.
    pub fn sample(&self, batch: usize, beta: f64, rng: &mut Rng64) -> SampledBatch {
        assert!(self.tree.len() > 0, "sample from empty view");
        let n = self.tree.len() as f64;
        let total = self.tree.total();
        let seg = total / batch as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        let mut max_w = 0.0f64;
        for j in 0..batch {
            let u = rng.uniform(seg * j as f64, seg * (j + 1) as f64);
            let idx = self.tree.query(u);
            let p = self.tree.leaf(idx) / total;
            let w = (n * p).powf(-beta);
            if w > max_w {
                max_w = w;
            }
            indices.push(idx);
            weights.push(w);
        }
        for w in weights.iter_mut() {
            *w /= max_w;
        }
        SampledBatch { indices, weights }
    }

    /// Store `(loss + eps_p)^omega` for each index; losses must be >= 0.
    pub fn update_priorities(&mut self, indices: &[usize], losses: &[f64]) -> Result<(), RenqError> {
        assert_eq!(indices.len(), losses.len());
        for (&idx, &loss) in indices.iter().zip(losses.iter()) {
            if !(loss >= 0.0) {
                return Err(RenqError::Replay(format!("negative priority loss {loss}")));
            }
            let raw = loss + self.eps_p;
            if raw > self.max_raw {
                self.max_raw = raw;
            }
            self.tree.set(idx, raw.powf(self.omega));
        }
        Ok(())
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn restore(omega: f64, eps_p: f64, max_raw: f64, tree: SumTree) -> Self {
        PrioritizedView { omega, eps_p, max_raw, tree }
    }

    /// Mean and max of the stored (exponentiated) leaf priorities.
    pub fn priority_stats(&self) -> (f64, f64) {
        if self.tree.is_empty() {
            return (0.0, 0.0);
        }
        let mut max = 0.0f64;
        for i in 0..self.tree.len() {
            max = max.max(self.tree.leaf(i));
        }
        (self.tree.total() / self.tree.len() as f64, max)
    }
}

/// Linear annealing of the importance-sampling exponent from 0.4 to 1.
pub fn anneal_beta(beta0: f64, beta_final: f64, frac_training_done: f64) -> f64 {
    assert!((0.0..=1.0).contains(&frac_training_done), "frac out of range");
    beta0 + (beta_final - beta0) * frac_training_done
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transition(i: u32) -> NStepTransition {
        NStepTransition {
            obs: [i; 4],
            action: 0,
            reward1: 0.0,
            next_obs1: [i + 1; 4],
            next_obs_n: [i + 1; 4],
            return_n: 0.0,
            gamma_eff: 0.5,
            done: false,
        }
    }

    #[test]
    fn store_shared_across_views() {
        let mut store = TransitionStore::new(4);
        let f = store.push_frame(&[0, 1, 2, 3]);
        assert_eq!(f, 0);
        let mut views: Vec<PrioritizedView> = (0..5).map(|_| PrioritizedView::new(0.5)).collect();
        for i in 0..10 {
            store.push_transition(transition(i));
            for v in views.iter_mut() {
                v.on_push();
            }
        }
        // one store copy regardless of M: views hold only priorities
        assert_eq!(store.len(), 10);
        for v in &views {
            assert_eq!(v.len(), 10);
        }
        let mut rng = Rng64::seeded(1);
        let batch = views[0].sample(4, 0.4, &mut rng);
        assert!(batch.indices.iter().all(|&i| i < 10));
    }

    #[test]
    fn singleton_sample_has_unit_weight() {
        let mut view = PrioritizedView::new(0.5);
        view.on_push();
        let mut rng = Rng64::seeded(2);
        let b = view.sample(1, 0.4, &mut rng);
        assert_eq!(b.indices, vec![0]);
        assert_eq!(b.weights, vec![1.0]);
    }

    #[test]
    fn equal_priorities_give_unit_weights_and_uniform_sampling() {
        let mut view = PrioritizedView::new(0.5);
        for _ in 0..8 {
            view.on_push();
        }
        let mut rng = Rng64::seeded(3);
        let b = view.sample(32, 0.7, &mut rng);
        assert!(b.weights.iter().all(|&w| (w - 1.0).abs() <= 1e-12));
        // chi-squared uniformity over many draws
        let mut counts = [0usize; 8];
        for _ in 0..3125 {
            let b = view.sample(32, 0.7, &mut rng);
            for &i in &b.indices {
                counts[i] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expect = total as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        // 7 dof, p = 0.001 critical value is 24.32
        assert!(chi2 < 24.32, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn prefix_sum_queries_match_example() {
        let mut tree = SumTree::new();
        tree.push(1.0);
        tree.push(3.0);
        assert_eq!(tree.query(0.5), 0);
        assert_eq!(tree.query(2.0), 1);
        assert!((tree.total() - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn sampling_frequencies_match_priorities() {
        // priorities [1,2,5] with omega = 1 -> P = (0.125, 0.25, 0.625)
        let mut view = PrioritizedView::new(1.0);
        view.eps_p = 0.0;
        for _ in 0..3 {
            view.on_push();
        }
        view.update_priorities(&[0, 1, 2], &[1.0, 2.0, 5.0]).unwrap();
        let mut rng = Rng64::seeded(4);
        let draws = 100_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..draws / 4 {
            let b = view.sample(4, 1.0, &mut rng);
            for &i in &b.indices {
                counts[i] += 1;
            }
        }
        let probs = [0.125, 0.25, 0.625];
        for i in 0..3 {
            let n = draws as f64;
            let sigma = (probs[i] * (1.0 - probs[i]) * n).sqrt();
            let diff = (counts[i] as f64 - probs[i] * n).abs();
            assert!(diff <= 3.0 * sigma, "leaf {i}: diff {diff} vs 3 sigma {sigma}");
        }
    }

    #[test]
    fn near_zero_priority_starves_sampling() {
        let mut view = PrioritizedView::new(1.0);
        for _ in 0..3 {
            view.on_push();
        }
        view.update_priorities(&[0, 1, 2], &[0.0, 100.0, 100.0]).unwrap();
        let mut rng = Rng64::seeded(5);
        let mut hits = 0;
        for _ in 0..2000 {
            let b = view.sample(4, 1.0, &mut rng);
            hits += b.indices.iter().filter(|&&i| i == 0).count();
        }
        assert!(hits <= 2, "near-zero priority sampled {hits} times");
    }

    #[test]
    fn tree_root_equals_leaf_sum_under_fuzz() {
        let mut rng = Rng64::seeded(6);
        let mut tree = SumTree::new();
        let mut flat: Vec<f64> = Vec::new();
        for _ in 0..10_000 {
            if flat.is_empty() || rng.next_f64() < 0.3 {
                let p = rng.uniform(0.0, 5.0);
                tree.push(p);
                flat.push(p);
            } else {
                let idx = rng.below(flat.len());
                let p = rng.uniform(0.0, 5.0);
                tree.set(idx, p);
                flat[idx] = p;
            }
        }
        let want: f64 = flat.iter().sum();
        assert!((tree.total() - want).abs() <= 1e-9 * want.max(1.0));
        for (i, &p) in flat.iter().enumerate() {
            assert_eq!(tree.leaf(i), p);
        }
        // prefix queries agree with a linear-scan oracle
        for _ in 0..200 {
            let u = rng.uniform(0.0, want);
            let got = tree.query(u);
            let mut acc = 0.0;
            let mut oracle = flat.len() - 1;
            for (i, &p) in flat.iter().enumerate() {
                acc += p;
                if u <= acc {
                    oracle = i;
                    break;
                }
            }
            // floating accumulation may differ at exact boundaries; compare masses
            if got != oracle {
                let boundary: f64 = flat[..oracle.max(got)].iter().sum();
                assert!(
                    (u - boundary).abs() <= 1e-6 * want,
                    "query {u}: got {got} oracle {oracle}"
                );
            }
        }
    }

    #[test]
    fn negative_loss_rejected() {
        let mut view = PrioritizedView::new(0.5);
        view.on_push();
        assert!(view.update_priorities(&[0], &[-1.0]).is_err());
    }

    #[test]
    fn beta_annealing() {
        assert_eq!(anneal_beta(0.4, 1.0, 0.0), 0.4);
        assert_eq!(anneal_beta(0.4, 1.0, 1.0), 1.0);
        assert!((anneal_beta(0.4, 1.0, 0.5) - 0.7).abs() <= 1e-12);
    }

    #[test]
    fn obs_reconstruction() {
        let mut store = TransitionStore::new(2);
        store.push_frame(&[0, 4]);
        store.push_frame(&[2, 1]);
        let mut out = vec![0.0; 8];
        store.write_obs(&[0, 1, 0, 1], &mut out);
        assert_eq!(out, vec![0.0, 1.0, 0.5, 0.25, 0.0, 1.0, 0.5, 0.25]);
    }
}

//! Deterministic desk-scale pixel environments and the preprocessing
//! pipeline (action repeat, max-pool of the last two frames, frame stacking,
//! reward clipping).
//!
//! Frames are palette-indexed u8 grids; level `i` renders as intensity
//! `i * 0.25`, so every observation pixel lies in `{0, 0.25, 0.5, 0.75, 1}`.

pub mod crossing;
pub mod invaders;

pub use crossing::{CrossingCfg, CrossingEnv};
pub use invaders::{InvadersCfg, InvadersEnv};

/// Palette levels.
pub const LVL_EMPTY: u8 = 0;
pub const LVL_BOMB: u8 = 1;
pub const LVL_CAR: u8 = 2;
pub const LVL_ALIEN: u8 = 2;
pub const LVL_SHOT: u8 = 3;
pub const LVL_AGENT: u8 = 4;

/// Output of one preprocessed (possibly action-repeated) step.
#[derive(Debug, Clone)]
pub struct PreStep {
    pub frame: Vec<u8>,
    pub clipped: f64,
    pub raw: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub frame: Vec<u8>,
    pub reward: f64,
    pub done: bool,
}

/// A deterministic pixel environment: pure state machine over (state, action).
pub trait PixelEnv {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<u8>;
    fn step(&mut self, action: usize) -> StepResult;
    /// Near-optimal hand-written policy with full state access.
    fn scripted_action(&self) -> usize;
    fn set_step_cap(&mut self, cap: u32);
    fn state_bytes(&self) -> Vec<u8>;
    fn restore_state(&mut self, bytes: &[u8]);
}

/// Either in-repo environment, constructed by id.
pub enum EnvKind {
    Crossing(CrossingEnv),
    Invaders(InvadersEnv),
}

impl EnvKind {
    pub fn from_id(id: &str) -> Option<EnvKind> {
        match id {
            "crossing" => Some(EnvKind::Crossing(CrossingEnv::new(CrossingCfg::default()))),
            "invaders" => Some(EnvKind::Invaders(InvadersEnv::new(InvadersCfg::default()))),
            _ => None,
        }
    }

    pub fn as_env(&mut self) -> &mut dyn PixelEnv {
        match self {
            EnvKind::Crossing(e) => e,
            EnvKind::Invaders(e) => e,
        }
    }

    pub fn env_ref(&self) -> &dyn PixelEnv {
        match self {
            EnvKind::Crossing(e) => e,
            EnvKind::Invaders(e) => e,
        }
    }
}

/// FNV-1a hash of a rendered frame, used by trajectory dumps.
pub fn frame_hash(frame: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in frame {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// One line of a trajectory dump.
pub fn trajectory_line(step: u64, action: usize, reward: f64, done: bool, frame: &[u8]) -> String {
    format!(
        "{step},{action},{reward},{},{:016x}",
        if done { 1 } else { 0 },
        frame_hash(frame)
    )
}

// ---------------------------------------------------------------------------
// Preprocessing.
// ---------------------------------------------------------------------------

/// Action repeat + max-pool of the last two raw frames + reward clipping.
/// Frame stacking is handled by the caller ([`FrameStack`] or the trainer's
/// frame-log indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub action_repeat: usize,
    pub max_pool: bool,
    /// Output size; equal to the native size means no resampling.
    pub out_w: usize,
    pub out_h: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Preprocess {
    pub fn desk(w: usize, h: usize) -> Self {
        Preprocess { action_repeat: 1, max_pool: true, out_w: w, out_h: h, clip_lo: -1.0, clip_hi: 1.0 }
    }

    fn finish(&self, env_w: usize, env_h: usize, raws: &[Vec<u8>]) -> Vec<u8> {
        let pooled = if self.max_pool && raws.len() >= 2 {
            let a = &raws[raws.len() - 2];
            let b = &raws[raws.len() - 1];
            a.iter().zip(b.iter()).map(|(&x, &y)| x.max(y)).collect()
        } else {
            raws.last().expect("at least one frame").clone()
        };
        if self.out_w == env_w && self.out_h == env_h {
            pooled
        } else {
            resize_nearest(&pooled, env_w, env_h, self.out_w, self.out_h)
        }
    }

    pub fn reset(&self, env: &mut dyn PixelEnv, seed: u64) -> Vec<u8> {
        let raw = env.reset(seed);
        self.finish(env.width(), env.height(), &[raw])
    }

    /// Repeat `action` for up to `action_repeat` raw steps (stopping at
    /// episode end), then pool, sum and clip.
    pub fn step(&self, env: &mut dyn PixelEnv, action: usize) -> PreStep {
        let mut raws = Vec::with_capacity(self.action_repeat);
        let mut reward = 0.0;
        let mut done = false;
        for _ in 0..self.action_repeat.max(1) {
            let r = env.step(action);
            reward += r.reward;
            raws.push(r.frame);
            if r.done {
                done = true;
                break;
            }
        }
        PreStep {
            frame: self.finish(env.width(), env.height(), &raws),
            clipped: reward.clamp(self.clip_lo, self.clip_hi),
            raw: reward,
            done,
        }
    }
}

pub fn resize_nearest(src: &[u8], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<u8> {
    let mut out = vec![0u8; dw * dh];
    for y in 0..dh {
        let sy = y * sh / dh;
        for x in 0..dw {
            let sx = x * sw / dw;
            out[y * dw + x] = src[sy * sw + sx];
        }
    }
    out
}

/// Rolling window of the last four processed frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub frames: Vec<Vec<u8>>,
}

impl FrameStack {
    pub fn reset(frame: Vec<u8>) -> Self {
        FrameStack { frames: vec![frame.clone(), frame.clone(), frame.clone(), frame] }
    }

    pub fn push(&mut self, frame: Vec<u8>) {
        self.frames.remove(0);
        self.frames.push(frame);
    }

    /// Stacked observation as f64 intensities, oldest frame first.
    pub fn obs_f64(&self) -> Vec<f64> {
        let n = self.frames[0].len();
        let mut out = vec![0.0; 4 * n];
        for (slot, f) in self.frames.iter().enumerate() {
            for (o, &v) in out[slot * n..(slot + 1) * n].iter_mut().zip(f.iter()) {
                *o = v as f64 * 0.25;
            }
        }
        out
    }
}

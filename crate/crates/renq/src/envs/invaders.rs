//! Alien-defense environment: a marching alien block descends while the
//! agent slides along the bottom row and fires a single-slot projectile.
//! Each destroyed alien disappears from the screen and pays reward 1.

use super::{PixelEnv, StepResult, LVL_AGENT, LVL_ALIEN, LVL_BOMB, LVL_SHOT};
use crate::rng::Rng64;

pub const ACT_LEFT: usize = 0;
pub const ACT_RIGHT: usize = 1;
pub const ACT_FIRE: usize = 2;
pub const ACT_NOOP: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct InvadersCfg {
    pub width: usize,
    pub height: usize,
    pub alien_rows: usize,
    pub alien_cols: usize,
    /// Aliens shift one cell every `march_period` steps.
    pub march_period: u32,
    /// A bomb drops every `bomb_period` steps.
    pub bomb_period: u32,
    pub step_cap: u32,
}

impl Default for InvadersCfg {
    fn default() -> Self {
        InvadersCfg {
            width: 16,
            height: 16,
            alien_rows: 3,
            alien_cols: 6,
            march_period: 4,
            bomb_period: 12,
            step_cap: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvadersEnv {
    pub cfg: InvadersCfg,
    agent_col: u8,
    /// Alien block origin (top-left), aliens at (oy + i, ox + 2 j).
    ox: i8,
    oy: i8,
    dir: i8,
    alive: Vec<bool>,
    shot: Option<(u8, u8)>,
    /// Suppresses movement on the spawn step.
    shot_fresh: bool,
    bombs: Vec<(u8, u8)>,
    steps: u32,
    march_phase: u32,
    bomb_phase: u32,
}

impl InvadersEnv {
    pub fn new(cfg: InvadersCfg) -> Self {
        let n = cfg.alien_rows * cfg.alien_cols;
        InvadersEnv {
            cfg,
            agent_col: 8,
            ox: 2,
            oy: 1,
            dir: 1,
            alive: vec![true; n],
            shot: None,
            shot_fresh: false,
            bombs: Vec::new(),
            steps: 0,
            march_phase: 0,
            bomb_phase: 0,
        }
    }

    pub fn aliens_left(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    fn alien_cell(&self, i: usize, j: usize) -> (i32, i32) {
        (self.oy as i32 + i as i32, self.ox as i32 + 2 * j as i32)
    }

    fn render(&self) -> Vec<u8> {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut f = vec![0u8; w * h];
        let mut put = |row: i32, col: i32, lvl: u8| {
            if row >= 0 && (row as usize) < h && col >= 0 && (col as usize) < w {
                let cell = &mut f[row as usize * w + col as usize];
                // overlap shows the highest-priority entity
                if lvl > *cell {
                    *cell = lvl;
                }
            }
        };
        for (row, col) in self.bombs.iter().map(|&(r, c)| (r as i32, c as i32)) {
            put(row, col, LVL_BOMB);
        }
        for i in 0..self.cfg.alien_rows {
            for j in 0..self.cfg.alien_cols {
                if self.alive[i * self.cfg.alien_cols + j] {
                    let (r, c) = self.alien_cell(i, j);
                    put(r, c, LVL_ALIEN);
                }
            }
        }
        if let Some((r, c)) = self.shot {
            put(r as i32, c as i32, LVL_SHOT);
        }
        put((self.cfg.height - 1) as i32, self.agent_col as i32, LVL_AGENT);
        f
    }

    /// Lowest alive alien in the column closest to the agent, if any.
    fn bomber(&self) -> Option<(i32, i32)> {
        let mut best: Option<(i32, i32)> = None;
        let mut best_dist = i32::MAX;
        for j in 0..self.cfg.alien_cols {
            for i in (0..self.cfg.alien_rows).rev() {
                if self.alive[i * self.cfg.alien_cols + j] {
                    let (r, c) = self.alien_cell(i, j);
                    let d = (c - self.agent_col as i32).abs();
                    if d < best_dist {
                        best_dist = d;
                        best = Some((r, c));
                    }
                    break;
                }
            }
        }
        best
    }
}

impl PixelEnv for InvadersEnv {
    fn width(&self) -> usize {
        self.cfg.width
    }

    fn height(&self) -> usize {
        self.cfg.height
    }

    fn num_actions(&self) -> usize {
        4
    }

    fn reset(&mut self, seed: u64) -> Vec<u8> {
        let mut rng = Rng64::seeded(seed);
        self.agent_col = (self.cfg.width / 2) as u8;
        self.ox = 1 + rng.below(3) as i8;
        self.oy = 1;
        self.dir = if rng.below(2) == 0 { 1 } else { -1 };
        self.alive.iter_mut().for_each(|a| *a = true);
        self.shot = None;
        self.shot_fresh = false;
        self.bombs.clear();
        self.steps = 0;
        self.march_phase = rng.below(self.cfg.march_period as usize) as u32;
        self.bomb_phase = rng.below(self.cfg.bomb_period as usize) as u32;
        self.render()
    }

    fn step(&mut self, action: usize) -> StepResult {
        assert!(action < 4, "invaders action {action} out of range");
        let bottom = (self.cfg.height - 1) as u8;
        // 1. agent slides
        match action {
            ACT_LEFT => {
                if self.agent_col > 0 {
                    self.agent_col -= 1;
                }
            }
            ACT_RIGHT => {
                if self.agent_col < (self.cfg.width - 1) as u8 {
                    self.agent_col += 1;
                }
            }
            _ => {}
        }
        // 2. fire: only one projectile in flight; evaluated before the hit
        //    check so a kill step can never also spawn a projectile
        if action == ACT_FIRE && self.shot.is_none() {
            self.shot = Some((bottom - 1, self.agent_col));
            self.shot_fresh = true;
        }
        // 3. projectile advances
        if let Some((r, c)) = self.shot {
            if self.shot_fresh {
                self.shot_fresh = false;
            } else if r == 0 {
                self.shot = None;
            } else {
                self.shot = Some((r - 1, c));
            }
        }
        // 4. alien march
        self.march_phase += 1;
        if self.march_phase >= self.cfg.march_period {
            self.march_phase = 0;
            let cols = self.cfg.alien_cols as i32;
            let next_ox = self.ox as i32 + self.dir as i32;
            let rightmost = next_ox + 2 * (cols - 1);
            if next_ox < 0 || rightmost >= self.cfg.width as i32 {
                self.oy += 1;
                self.dir = -self.dir;
            } else {
                self.ox = next_ox as i8;
            }
        }
        // 5. hit check
        let mut reward = 0.0;
        if let Some((sr, sc)) = self.shot {
            'outer: for i in 0..self.cfg.alien_rows {
                for j in 0..self.cfg.alien_cols {
                    let idx = i * self.cfg.alien_cols + j;
                    if self.alive[idx] {
                        let (ar, ac) = self.alien_cell(i, j);
                        if ar == sr as i32 && ac == sc as i32 {
                            self.alive[idx] = false;
                            self.shot = None;
                            reward = 1.0;
                            break 'outer;
                        }
                    }
                }
            }
        }
        // 6. bombs fall, then possibly a new one spawns
        let mut agent_hit = false;
        let mut kept = Vec::with_capacity(self.bombs.len());
        for &(r, c) in &self.bombs {
            let nr = r + 1;
            if nr == bottom && c == self.agent_col {
                agent_hit = true;
            } else if nr <= bottom {
                kept.push((nr, c));
            }
        }
        self.bombs = kept;
        self.bomb_phase += 1;
        if self.bomb_phase >= self.cfg.bomb_period {
            self.bomb_phase = 0;
            if let Some((r, c)) = self.bomber() {
                if r + 1 < bottom as i32 && c >= 0 && c < self.cfg.width as i32 {
                    self.bombs.push(((r + 1) as u8, c as u8));
                }
            }
        }
        // 7. invasion check: aliens reaching the bottom row end the episode
        let mut invaded = false;
        for i in 0..self.cfg.alien_rows {
            for j in 0..self.cfg.alien_cols {
                if self.alive[i * self.cfg.alien_cols + j] {
                    let (r, _) = self.alien_cell(i, j);
                    if r >= bottom as i32 {
                        invaded = true;
                    }
                }
            }
        }
        self.steps += 1;
        let cleared = self.aliens_left() == 0;
        let done = cleared || agent_hit || invaded || self.steps >= self.cfg.step_cap;
        StepResult { frame: self.render(), reward, done }
    }

    fn set_step_cap(&mut self, cap: u32) {
        self.cfg.step_cap = cap;
    }

    fn scripted_action(&self) -> usize {
        // dodge an incoming bomb first
        for &(r, c) in &self.bombs {
            if c == self.agent_col && r >= (self.cfg.height - 4) as u8 {
                return if self.agent_col == 0 { ACT_RIGHT } else { ACT_LEFT };
            }
        }
        // align with the nearest alive column and fire
        if let Some((_, c)) = self.bomber() {
            let target = c;
            let here = self.agent_col as i32;
            if target < here {
                ACT_LEFT
            } else if target > here {
                ACT_RIGHT
            } else if self.shot.is_none() {
                ACT_FIRE
            } else {
                ACT_NOOP
            }
        } else {
            ACT_NOOP
        }
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(self.agent_col);
        out.push(self.ox as u8);
        out.push(self.oy as u8);
        out.push(self.dir as u8);
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&self.march_phase.to_le_bytes());
        out.extend_from_slice(&self.bomb_phase.to_le_bytes());
        match self.shot {
            Some((r, c)) => out.extend_from_slice(&[1, r, c]),
            None => out.extend_from_slice(&[0, 0, 0]),
        }
        out.push(if self.shot_fresh { 1 } else { 0 });
        out.push(self.bombs.len() as u8);
        for &(r, c) in &self.bombs {
            out.push(r);
            out.push(c);
        }
        out.extend(self.alive.iter().map(|&a| a as u8));
        out
    }

    fn restore_state(&mut self, bytes: &[u8]) {
        self.agent_col = bytes[0];
        self.ox = bytes[1] as i8;
        self.oy = bytes[2] as i8;
        self.dir = bytes[3] as i8;
        self.steps = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        self.march_phase = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        self.bomb_phase = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        self.shot = if bytes[16] == 1 { Some((bytes[17], bytes[18])) } else { None };
        self.shot_fresh = bytes[19] == 1;
        let nb = bytes[20] as usize;
        self.bombs = (0..nb).map(|i| (bytes[21 + 2 * i], bytes[22 + 2 * i])).collect();
        let rest = &bytes[21 + 2 * nb..];
        for (a, &b) in self.alive.iter_mut().zip(rest.iter()) {
            *a = b == 1;
        }
    }
}

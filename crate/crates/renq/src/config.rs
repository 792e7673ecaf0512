//! Run configuration: one `section.key = value` per line, `#` comments,
//! unknown keys rejected. Two presets exist: `desk` (the in-repo scale every
//! default test uses) and `paper` (the reference hyperparameter table,
//! echoed verbatim by `dump-config`).

use crate::agent::TrainHp;
use crate::aux_tasks::{assign_tasks, AuxAssignment, AuxConfig, AuxStrategy, TaskId};
use crate::envs::Preprocess;
use crate::error::RenqError;
use crate::net::{ConvSpec, NetConfig};
use crate::tensor::AdamParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentMode {
    Rainbow,
    Ren,
    RenJ,
    Renault,
    RenaultAll,
    Custom,
}

impl AgentMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentMode::Rainbow => "rainbow",
            AgentMode::Ren => "ren",
            AgentMode::RenJ => "ren-j",
            AgentMode::Renault => "renault",
            AgentMode::RenaultAll => "renault-all",
            AgentMode::Custom => "custom",
        }
    }

    pub fn from_str(s: &str) -> Option<AgentMode> {
        Some(match s {
            "rainbow" => AgentMode::Rainbow,
            "ren" => AgentMode::Ren,
            "ren-j" => AgentMode::RenJ,
            "renault" => AgentMode::Renault,
            "renault-all" => AgentMode::RenaultAll,
            "custom" => AgentMode::Custom,
            _ => return None,
        })
    }
}

/// Full run configuration. Field order here is the canonical dump order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,

    pub env_id: String,
    pub max_frames_per_episode: u64,

    pub grey_scaling: bool,
    pub downsample_w: usize,
    pub downsample_h: usize,
    pub frames_stacked: usize,
    pub action_repeat: usize,
    pub reward_clip_lo: f64,
    pub reward_clip_hi: f64,
    pub terminal_on_life_loss: bool,
    pub max_pool_last_two: bool,

    pub agent_mode: AgentMode,
    pub members: usize,
    pub seed: u64,
    pub update_rule: String,
    pub custom_tasks: String,

    pub atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub conv1_filter: usize,
    pub conv2_filter: usize,
    pub conv1_stride: usize,
    pub conv2_stride: usize,
    pub hidden_units: usize,
    pub noisy_sigma0: f64,

    pub aux_transition_channels: usize,
    pub aux_hidden: usize,
    pub aux_alpha: f64,

    pub optimizer: String,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub priority_exponent: f64,
    pub priority_beta0: f64,
    pub priority_beta_final: f64,
    pub target_update_period: u64,
    pub training_frames: u64,
    pub min_replay: usize,
    pub memory_capacity: u64,
    pub replay_period: u64,
    pub multi_step: usize,
    pub eval_period: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: u64,
}

impl RunConfig {
    /// Desk-scale defaults: native 16x16 frames, a small conv trunk and a
    /// schedule sized for tens of thousands of steps on a CPU.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            env_id: "crossing".into(),
            max_frames_per_episode: 500,
            grey_scaling: true,
            downsample_w: 16,
            downsample_h: 16,
            frames_stacked: 4,
            action_repeat: 1,
            reward_clip_lo: -1.0,
            reward_clip_hi: 1.0,
            terminal_on_life_loss: false,
            max_pool_last_two: true,
            agent_mode: AgentMode::Ren,
            members: 5,
            seed: 123,
            update_rule: "distributional_double_q".into(),
            custom_tasks: String::new(),
            atoms: 51,
            v_min: -10.0,
            v_max: 10.0,
            conv1_channels: 8,
            conv2_channels: 16,
            conv1_filter: 3,
            conv2_filter: 3,
            conv1_stride: 2,
            conv2_stride: 2,
            hidden_units: 64,
            noisy_sigma0: 0.1,
            aux_transition_channels: 16,
            aux_hidden: 64,
            aux_alpha: 1.0,
            optimizer: "adam".into(),
            learning_rate: 0.0001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 0.00015,
            max_grad_norm: 10.0,
            discount: 0.99,
            batch_size: 32,
            priority_exponent: 0.5,
            priority_beta0: 0.4,
            priority_beta_final: 1.0,
            target_update_period: 2000,
            training_frames: 30000,
            min_replay: 400,
            memory_capacity: 0,
            replay_period: 2,
            multi_step: 20,
            eval_period: 5000,
            eval_episodes: 5,
            checkpoint_every: 0,
        }
    }

    /// The reference hyperparameter table, value for value.
    pub fn paper() -> Self {
        RunConfig {
            preset: "paper".into(),
            max_frames_per_episode: 108_000,
            downsample_w: 84,
            downsample_h: 84,
            action_repeat: 4,
            terminal_on_life_loss: true,
            conv1_channels: 32,
            conv2_channels: 64,
            conv1_filter: 5,
            conv2_filter: 5,
            conv1_stride: 5,
            conv2_stride: 5,
            hidden_units: 256,
            aux_transition_channels: 64,
            aux_hidden: 256,
            training_frames: 400_000,
            min_replay: 1600,
            replay_period: 1,
            eval_period: 10_000,
            ..RunConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self, RenqError> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper" => Ok(RunConfig::paper()),
            other => Err(RenqError::Config(format!("unknown preset '{other}'"))),
        }
    }

    /// Environment interactions: training frames divided by the action repeat.
    pub fn env_steps(&self) -> u64 {
        self.training_frames / self.action_repeat.max(1) as u64
    }

    pub fn episode_cap(&self) -> u32 {
        (self.max_frames_per_episode / self.action_repeat.max(1) as u64) as u32
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        fn b(v: bool) -> String {
            v.to_string()
        }
        vec![
            ("meta.preset", self.preset.clone()),
            ("env.id", self.env_id.clone()),
            ("env.max_frames_per_episode", self.max_frames_per_episode.to_string()),
            ("preprocess.grey_scaling", b(self.grey_scaling)),
            ("preprocess.downsample_w", self.downsample_w.to_string()),
            ("preprocess.downsample_h", self.downsample_h.to_string()),
            ("preprocess.frames_stacked", self.frames_stacked.to_string()),
            ("preprocess.action_repeat", self.action_repeat.to_string()),
            ("preprocess.reward_clip_lo", fmt_f64(self.reward_clip_lo)),
            ("preprocess.reward_clip_hi", fmt_f64(self.reward_clip_hi)),
            ("preprocess.terminal_on_life_loss", b(self.terminal_on_life_loss)),
            ("preprocess.max_pool_last_two", b(self.max_pool_last_two)),
            ("agent.mode", self.agent_mode.as_str().into()),
            ("agent.members", self.members.to_string()),
            ("agent.seed", self.seed.to_string()),
            ("agent.update_rule", self.update_rule.clone()),
            ("agent.custom_tasks", self.custom_tasks.clone()),
            ("q.atoms", self.atoms.to_string()),
            ("q.v_min", fmt_f64(self.v_min)),
            ("q.v_max", fmt_f64(self.v_max)),
            ("q.conv1_channels", self.conv1_channels.to_string()),
            ("q.conv2_channels", self.conv2_channels.to_string()),
            ("q.conv1_filter", self.conv1_filter.to_string()),
            ("q.conv2_filter", self.conv2_filter.to_string()),
            ("q.conv1_stride", self.conv1_stride.to_string()),
            ("q.conv2_stride", self.conv2_stride.to_string()),
            ("q.hidden_units", self.hidden_units.to_string()),
            ("q.noisy_sigma0", fmt_f64(self.noisy_sigma0)),
            ("aux.transition_channels", self.aux_transition_channels.to_string()),
            ("aux.hidden", self.aux_hidden.to_string()),
            ("aux.alpha", fmt_f64(self.aux_alpha)),
            ("train.optimizer", self.optimizer.clone()),
            ("train.learning_rate", fmt_f64(self.learning_rate)),
            ("train.adam_beta1", fmt_f64(self.adam_beta1)),
            ("train.adam_beta2", fmt_f64(self.adam_beta2)),
            ("train.adam_eps", fmt_f64(self.adam_eps)),
            ("train.max_grad_norm", fmt_f64(self.max_grad_norm)),
            ("train.discount", fmt_f64(self.discount)),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.priority_exponent", fmt_f64(self.priority_exponent)),
            ("train.priority_beta0", fmt_f64(self.priority_beta0)),
            ("train.priority_beta_final", fmt_f64(self.priority_beta_final)),
            ("train.target_update_period", self.target_update_period.to_string()),
            ("train.training_frames", self.training_frames.to_string()),
            ("train.min_replay", self.min_replay.to_string()),
            ("train.memory_capacity", if self.memory_capacity == 0 {
                "unbounded".into()
            } else {
                self.memory_capacity.to_string()
            }),
            ("train.replay_period", self.replay_period.to_string()),
            ("train.multi_step", self.multi_step.to_string()),
            ("train.eval_period", self.eval_period.to_string()),
            ("train.eval_episodes", self.eval_episodes.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    /// Canonical snapshot text.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RenqError> {
        fn pu(v: &str, key: &str) -> Result<u64, RenqError> {
            v.parse()
                .map_err(|_| RenqError::Config(format!("key '{key}': invalid integer '{v}'")))
        }
        fn pus(v: &str, key: &str) -> Result<usize, RenqError> {
            v.parse()
                .map_err(|_| RenqError::Config(format!("key '{key}': invalid integer '{v}'")))
        }
        fn pf(v: &str, key: &str) -> Result<f64, RenqError> {
            v.parse()
                .map_err(|_| RenqError::Config(format!("key '{key}': invalid number '{v}'")))
        }
        fn pb(v: &str, key: &str) -> Result<bool, RenqError> {
            match v {
                "true" | "TRUE" => Ok(true),
                "false" | "FALSE" => Ok(false),
                _ => Err(RenqError::Config(format!("key '{key}': invalid boolean '{v}'"))),
            }
        }
        match key {
            "meta.preset" => self.preset = value.into(),
            "env.id" => self.env_id = value.into(),
            "env.max_frames_per_episode" => self.max_frames_per_episode = pu(value, key)?,
            "preprocess.grey_scaling" => self.grey_scaling = pb(value, key)?,
            "preprocess.downsample_w" => self.downsample_w = pus(value, key)?,
            "preprocess.downsample_h" => self.downsample_h = pus(value, key)?,
            "preprocess.frames_stacked" => self.frames_stacked = pus(value, key)?,
            "preprocess.action_repeat" => self.action_repeat = pus(value, key)?,
            "preprocess.reward_clip_lo" => self.reward_clip_lo = pf(value, key)?,
            "preprocess.reward_clip_hi" => self.reward_clip_hi = pf(value, key)?,
            "preprocess.terminal_on_life_loss" => self.terminal_on_life_loss = pb(value, key)?,
            "preprocess.max_pool_last_two" => self.max_pool_last_two = pb(value, key)?,
            "agent.mode" => {
                self.agent_mode = AgentMode::from_str(value).ok_or_else(|| {
                    RenqError::Config(format!("key 'agent.mode': unknown mode '{value}'"))
                })?
            }
            "agent.members" => self.members = pus(value, key)?,
            "agent.seed" => self.seed = pu(value, key)?,
            "agent.update_rule" => self.update_rule = value.into(),
            "agent.custom_tasks" => self.custom_tasks = value.into(),
            "q.atoms" => self.atoms = pus(value, key)?,
            "q.v_min" => self.v_min = pf(value, key)?,
            "q.v_max" => self.v_max = pf(value, key)?,
            "q.conv1_channels" => self.conv1_channels = pus(value, key)?,
            "q.conv2_channels" => self.conv2_channels = pus(value, key)?,
            "q.conv1_filter" => self.conv1_filter = pus(value, key)?,
            "q.conv2_filter" => self.conv2_filter = pus(value, key)?,
            "q.conv1_stride" => self.conv1_stride = pus(value, key)?,
            "q.conv2_stride" => self.conv2_stride = pus(value, key)?,
            "q.hidden_units" => self.hidden_units = pus(value, key)?,
            "q.noisy_sigma0" => self.noisy_sigma0 = pf(value, key)?,
            "aux.transition_channels" => self.aux_transition_channels = pus(value, key)?,
            "aux.hidden" => self.aux_hidden = pus(value, key)?,
            "aux.alpha" => self.aux_alpha = pf(value, key)?,
            "train.optimizer" => self.optimizer = value.into(),
            "train.learning_rate" => self.learning_rate = pf(value, key)?,
            "train.adam_beta1" => self.adam_beta1 = pf(value, key)?,
            "train.adam_beta2" => self.adam_beta2 = pf(value, key)?,
            "train.adam_eps" => self.adam_eps = pf(value, key)?,
            "train.max_grad_norm" => self.max_grad_norm = pf(value, key)?,
            "train.discount" => self.discount = pf(value, key)?,
            "train.batch_size" => self.batch_size = pus(value, key)?,
            "train.priority_exponent" => self.priority_exponent = pf(value, key)?,
            "train.priority_beta0" => self.priority_beta0 = pf(value, key)?,
            "train.priority_beta_final" => self.priority_beta_final = pf(value, key)?,
            "train.target_update_period" => self.target_update_period = pu(value, key)?,
            "train.training_frames" => self.training_frames = pu(value, key)?,
            "train.min_replay" => self.min_replay = pus(value, key)?,
            "train.memory_capacity" => {
                self.memory_capacity =
                    if value == "unbounded" { 0 } else { pu(value, key)? }
            }
            "train.replay_period" => self.replay_period = pu(value, key)?.max(1),
            "train.multi_step" => self.multi_step = pus(value, key)?,
            "train.eval_period" => self.eval_period = pu(value, key)?,
            "train.eval_episodes" => self.eval_episodes = pus(value, key)?,
            "train.checkpoint_every" => self.checkpoint_every = pu(value, key)?,
            other => {
                return Err(RenqError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parse `section.key = value` lines on top of a base preset named by an
    /// optional leading `meta.preset` line (desk when absent).
    pub fn parse_str(text: &str) -> Result<Self, RenqError> {
        // preset line (if any) decides the base
        let mut base = RunConfig::desk();
        for line in text.lines() {
            let line = strip_comment(line);
            if let Some((k, v)) = split_kv(line)? {
                if k == "meta.preset" {
                    base = RunConfig::preset(&v)?;
                }
            }
        }
        for line in text.lines() {
            let line = strip_comment(line);
            if let Some((k, v)) = split_kv(line)? {
                base.set(&k, &v)?;
            }
        }
        base.validate()?;
        Ok(base)
    }

    pub fn validate(&self) -> Result<(), RenqError> {
        if self.members == 0 {
            return Err(RenqError::Config("agent.members must be positive".into()));
        }
        if self.agent_mode == AgentMode::Rainbow && self.members != 1 {
            return Err(RenqError::Config(
                "agent.mode = rainbow requires agent.members = 1".into(),
            ));
        }
        if self.atoms < 2 {
            return Err(RenqError::Config("q.atoms must be at least 2".into()));
        }
        if self.v_max <= self.v_min {
            return Err(RenqError::Config("q.v_max must exceed q.v_min".into()));
        }
        if self.batch_size == 0 || self.multi_step == 0 {
            return Err(RenqError::Config("batch and multi-step must be positive".into()));
        }
        self.assignment()?;
        Ok(())
    }

    pub fn net_cfg(&self, actions: usize) -> NetConfig {
        NetConfig {
            in_channels: self.frames_stacked,
            frame_h: self.downsample_h,
            frame_w: self.downsample_w,
            conv1: ConvSpec {
                channels: self.conv1_channels,
                kernel: self.conv1_filter,
                stride: self.conv1_stride,
            },
            conv2: ConvSpec {
                channels: self.conv2_channels,
                kernel: self.conv2_filter,
                stride: self.conv2_stride,
            },
            hidden: self.hidden_units,
            actions,
            atoms: self.atoms,
            sigma0: self.noisy_sigma0,
        }
    }

    pub fn aux_cfg(&self) -> AuxConfig {
        AuxConfig {
            transition_channels: self.aux_transition_channels,
            hidden: self.aux_hidden,
            ..AuxConfig::desk()
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            action_repeat: self.action_repeat,
            max_pool: self.max_pool_last_two,
            out_w: self.downsample_w,
            out_h: self.downsample_h,
            clip_lo: self.reward_clip_lo,
            clip_hi: self.reward_clip_hi,
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn train_hp(&self) -> TrainHp {
        TrainHp {
            batch: self.batch_size,
            adam: self.adam(),
            max_grad_norm: self.max_grad_norm,
            min_replay: self.min_replay,
        }
    }

    /// Number of prioritized views: one per member, except joint mode.
    pub fn view_count(&self) -> usize {
        if self.agent_mode == AgentMode::RenJ {
            1
        } else {
            self.members
        }
    }

    pub fn joint(&self) -> bool {
        self.agent_mode == AgentMode::RenJ
    }

    /// The per-member auxiliary task assignment implied by the mode.
    pub fn assignment(&self) -> Result<AuxAssignment, RenqError> {
        match self.agent_mode {
            AgentMode::Rainbow | AgentMode::Ren | AgentMode::RenJ => {
                assign_tasks(AuxStrategy::None, self.members)
            }
            AgentMode::Renault => {
                let mut a = assign_tasks(AuxStrategy::UniquePerMember, self.members)?;
                for tasks in a.per_member.iter_mut() {
                    for t in tasks.iter_mut() {
                        t.1 = self.aux_alpha;
                    }
                }
                Ok(a)
            }
            AgentMode::RenaultAll => assign_tasks(AuxStrategy::All, self.members),
            AgentMode::Custom => {
                let per_member = parse_custom_tasks(&self.custom_tasks, self.members)?;
                AuxAssignment::custom(per_member)
            }
        }
    }
}

fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn split_kv(line: &str) -> Result<Option<(String, String)>, RenqError> {
    let t = line.trim();
    if t.is_empty() {
        return Ok(None);
    }
    match t.split_once('=') {
        Some((k, v)) => Ok(Some((k.trim().to_string(), v.trim().to_string()))),
        None => Err(RenqError::Config(format!("malformed config line '{t}'"))),
    }
}

/// Custom assignment syntax: member lists separated by `|`, each a comma
/// list of `task:alpha`, e.g. `ns:1,id:0.5|rf:1|||`.
pub fn parse_custom_tasks(
    spec: &str,
    members: usize,
) -> Result<Vec<Vec<(TaskId, f64)>>, RenqError> {
    let mut out = vec![Vec::new(); members];
    if spec.trim().is_empty() {
        return Ok(out);
    }
    let parts: Vec<&str> = spec.split('|').collect();
    if parts.len() != members {
        return Err(RenqError::Config(format!(
            "agent.custom_tasks has {} member lists, expected {members}",
            parts.len()
        )));
    }
    for (m, part) in parts.iter().enumerate() {
        for item in part.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, alpha) = item.split_once(':').ok_or_else(|| {
                RenqError::Config(format!("bad task spec '{item}' (want task:alpha)"))
            })?;
            let task = TaskId::from_short_name(name.trim()).ok_or_else(|| {
                RenqError::Config(format!("unknown auxiliary task '{name}'"))
            })?;
            let alpha: f64 = alpha
                .trim()
                .parse()
                .map_err(|_| RenqError::Config(format!("bad strength in '{item}'")))?;
            out[m].push((task, alpha));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_dump_parse() {
        let mut cfg = RunConfig::desk();
        cfg.agent_mode = AgentMode::Renault;
        cfg.seed = 777;
        let text = cfg.dump();
        let parsed = RunConfig::parse_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::parse_str("train.warp_speed = 9\n").unwrap_err();
        assert!(err.to_string().contains("train.warp_speed"), "{err}");
    }

    #[test]
    fn rainbow_needs_single_member() {
        let mut cfg = RunConfig::desk();
        cfg.agent_mode = AgentMode::Rainbow;
        cfg.members = 5;
        assert!(cfg.validate().is_err());
        cfg.members = 1;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn paper_preset_has_reference_values() {
        let cfg = RunConfig::paper();
        let text = cfg.dump();
        for line in [
            "preprocess.grey_scaling = true",
            "preprocess.downsample_w = 84",
            "preprocess.frames_stacked = 4",
            "preprocess.action_repeat = 4",
            "preprocess.reward_clip_lo = -1",
            "preprocess.reward_clip_hi = 1",
            "preprocess.terminal_on_life_loss = true",
            "env.max_frames_per_episode = 108000",
            "agent.update_rule = distributional_double_q",
            "train.target_update_period = 2000",
            "q.atoms = 51",
            "train.discount = 0.99",
            "train.batch_size = 32",
            "train.optimizer = adam",
            "train.adam_beta1 = 0.9",
            "train.adam_beta2 = 0.999",
            "train.adam_eps = 0.00015",
            "train.max_grad_norm = 10",
            "train.priority_exponent = 0.5",
            "train.priority_beta0 = 0.4",
            "train.priority_beta_final = 1",
            "q.noisy_sigma0 = 0.1",
            "train.training_frames = 400000",
            "train.min_replay = 1600",
            "train.memory_capacity = unbounded",
            "train.replay_period = 1",
            "train.multi_step = 20",
            "q.conv1_channels = 32",
            "q.conv2_channels = 64",
            "q.conv1_filter = 5",
            "q.conv2_filter = 5",
            "q.conv1_stride = 5",
            "q.conv2_stride = 5",
            "q.hidden_units = 256",
            "train.learning_rate = 0.0001",
        ] {
            assert!(text.contains(line), "missing table row: {line}");
        }
        assert_eq!(cfg.env_steps(), 100_000, "400k frames / repeat 4");
    }

    #[test]
    fn custom_task_parse() {
        let got = parse_custom_tasks("ns:1,cm:0.5|id:1|||", 5).unwrap();
        assert_eq!(got[0], vec![(TaskId::NextState, 1.0), (TaskId::MomentChange, 0.5)]);
        assert_eq!(got[1], vec![(TaskId::InverseDynamics, 1.0)]);
        assert!(got[2].is_empty());
        assert!(parse_custom_tasks("ns:1", 2).is_err());
        assert!(parse_custom_tasks("zz:1|", 2).is_err());
    }

    #[test]
    fn assignment_by_mode() {
        let mut cfg = RunConfig::desk();
        cfg.agent_mode = AgentMode::Renault;
        let a = cfg.assignment().unwrap();
        assert!(a.per_member.iter().all(|t| t.len() == 1));
        cfg.agent_mode = AgentMode::RenaultAll;
        let a = cfg.assignment().unwrap();
        assert!(a
            .per_member
            .iter()
            .all(|t| t.len() == 5 && t.iter().all(|&(_, al)| (al - 0.2).abs() < 1e-12)));
        cfg.agent_mode = AgentMode::Ren;
        let a = cfg.assignment().unwrap();
        assert!(a.per_member.iter().all(|t| t.is_empty()));
    }
}

//! Command-line surface: `train`, `eval`, `measure-bvc`, `lab` and
//! `dump-config`. Exit codes: 0 ok, 1 usage, 2 config/checkpoint, 3 a
//! lab/acceptance check failed.

use crate::bvc::proxy::{collect_transitions, measure_proxy_bias, EnsembleQ};
use crate::bvc::synthetic::suite;
use crate::bvc::{
    decompose_bias_cobias, estimate_ensemble_bvc, estimate_single_bvc, multi_cov_routes,
    run_trials, run_trials_multi, SeedMode, TrialGrid,
};
use crate::config::RunConfig;
use crate::error::RenqError;
use crate::metrics::MetricsWriter;
use crate::trainer::{
    evaluate_returns, normalized_score, random_returns, scripted_returns, PixelProxyEnv, Trainer,
};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

const USAGE: &str = "renq <command> [options]

commands:
  train        --config FILE [--out DIR] [--resume CKPT] [--set key=value ...]
  eval         --checkpoint FILE [--episodes N] [--seed S]
               [--random-score X] [--scripted-score Y]
  measure-bvc  --runs DIR1,DIR2[,...] [--transitions N] [--epsilon E]
               [--seed S] [--out FILE]
  lab          --suite thm1|thm2|thm3|prop1|prop2|all [--out FILE] [--seed S]
  dump-config  [--preset desk|paper] [--set key=value ...]

exit codes: 0 ok, 1 usage, 2 config error, 3 check failure";

pub fn run() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run_args(&args)
}

pub fn run_args(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, RenqError::Usage(_)) {
                eprintln!("{USAGE}");
            }
            e.exit_code()
        }
    }
}

struct Flags {
    values: BTreeMap<String, String>,
    sets: Vec<(String, String)>,
}

fn parse_flags(args: &[String]) -> Result<Flags, RenqError> {
    let mut values = BTreeMap::new();
    let mut sets = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let flag = &args[i];
        if !flag.starts_with("--") {
            return Err(RenqError::Usage(format!("unexpected argument '{flag}'")));
        }
        let name = flag.trim_start_matches("--").to_string();
        let value = args
            .get(i + 1)
            .ok_or_else(|| RenqError::Usage(format!("flag '{flag}' needs a value")))?
            .clone();
        if name == "set" {
            let (k, v) = value
                .split_once('=')
                .ok_or_else(|| RenqError::Usage(format!("--set wants key=value, got '{value}'")))?;
            sets.push((k.trim().to_string(), v.trim().to_string()));
        } else {
            values.insert(name, value);
        }
        i += 2;
    }
    Ok(Flags { values, sets })
}

impl Flags {
    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    fn require(&self, name: &str) -> Result<&str, RenqError> {
        self.get(name)
            .ok_or_else(|| RenqError::Usage(format!("missing required flag --{name}")))
    }

    fn parse_or<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, RenqError> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| RenqError::Usage(format!("flag --{name}: bad value '{v}'"))),
        }
    }
}

fn dispatch(args: &[String]) -> Result<i32, RenqError> {
    let Some(cmd) = args.first() else {
        return Err(RenqError::Usage("no command given".into()));
    };
    let flags = parse_flags(&args[1..])?;
    match cmd.as_str() {
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "measure-bvc" => cmd_measure_bvc(&flags),
        "lab" => cmd_lab(&flags),
        "dump-config" => cmd_dump_config(&flags),
        other => Err(RenqError::Usage(format!("unknown command '{other}'"))),
    }
}

fn load_config(flags: &Flags) -> Result<RunConfig, RenqError> {
    let mut cfg = match flags.get("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            RunConfig::parse_str(&text)?
        }
        None => match flags.get("preset") {
            Some(p) => RunConfig::preset(p)?,
            None => RunConfig::desk(),
        },
    };
    for (k, v) in &flags.sets {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(flags: &Flags) -> Result<i32, RenqError> {
    let out_dir = PathBuf::from(flags.get("out").unwrap_or("run"));
    std::fs::create_dir_all(&out_dir)?;

    let mut trainer = match flags.get("resume") {
        Some(ckpt_path) => {
            let bytes = std::fs::read(ckpt_path)?;
            let tr = Trainer::load(&bytes)?;
            if flags.get("config").is_some() || !flags.sets.is_empty() {
                let requested = load_config(flags)?;
                if requested.dump() != tr.cfg.dump() {
                    return Err(RenqError::Config(
                        "resume config does not match the checkpoint's config".into(),
                    ));
                }
            }
            tr
        }
        None => {
            let cfg = load_config(flags)?;
            Trainer::new(cfg)?
        }
    };

    std::fs::write(out_dir.join("config.snapshot.txt"), trainer.config_snapshot())?;
    let metrics_file = std::fs::File::create(out_dir.join("metrics.csv"))?;
    let mut metrics = MetricsWriter::new(
        trainer.metrics_schema(),
        std::io::BufWriter::new(metrics_file),
    )?;

    let budget = trainer.budget();
    let every = trainer.cfg.checkpoint_every;
    while trainer.env_step < budget {
        let next = if every > 0 {
            (trainer.env_step + every).min(budget)
        } else {
            budget
        };
        trainer.run_until(&mut metrics, next)?;
        if every > 0 && trainer.env_step < budget {
            let path = out_dir.join(format!("checkpoint_step{}.renq", trainer.env_step));
            std::fs::write(path, trainer.save())?;
        }
    }
    metrics.flush()?;
    std::fs::write(out_dir.join("checkpoint.renq"), trainer.save())?;
    println!(
        "trained {} steps ({} updates, {} episodes) -> {}",
        trainer.env_step,
        trainer.update_count,
        trainer.episode_idx,
        out_dir.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(flags: &Flags) -> Result<i32, RenqError> {
    let ckpt = flags.require("checkpoint")?;
    let episodes: usize = flags.parse_or("episodes", 30)?;
    let seed: u64 = flags.parse_or("seed", 9090)?;
    let bytes = std::fs::read(ckpt)?;
    let trainer = Trainer::load(&bytes)?;
    let cfg = &trainer.cfg;

    let returns = evaluate_returns(&trainer.model, cfg, episodes, seed)?;
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let mut sorted = returns.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };

    let random = match flags.get("random-score") {
        Some(v) => v
            .parse()
            .map_err(|_| RenqError::Usage("bad --random-score".into()))?,
        None => {
            let r = random_returns(cfg, episodes, seed)?;
            let m = r.iter().sum::<f64>() / r.len() as f64;
            println!("# random baseline computed on the fly (seed {seed})");
            m
        }
    };
    let scripted = match flags.get("scripted-score") {
        Some(v) => v
            .parse()
            .map_err(|_| RenqError::Usage("bad --scripted-score".into()))?,
        None => {
            let r = scripted_returns(cfg, episodes, seed)?;
            let m = r.iter().sum::<f64>() / r.len() as f64;
            println!("# scripted baseline computed on the fly (seed {seed})");
            m
        }
    };
    println!("env = {}", cfg.env_id);
    println!("mode = {}", cfg.agent_mode.as_str());
    println!("episodes = {episodes}");
    println!("mean_return = {mean}");
    println!("median_return = {median}");
    println!("random_score = {random}");
    println!("scripted_score = {scripted}");
    println!("normalized_score = {}", normalized_score(mean, random, scripted));
    Ok(0)
}

// ---------------------------------------------------------------------------
// measure-bvc
// ---------------------------------------------------------------------------

fn cmd_measure_bvc(flags: &Flags) -> Result<i32, RenqError> {
    let runs_arg = flags.require("runs")?;
    let n: usize = flags.parse_or("transitions", 1000)?;
    let epsilon: f64 = flags.parse_or("epsilon", 0.001)?;
    let seed: u64 = flags.parse_or("seed", 4242)?;
    let dirs: Vec<&str> = runs_arg.split(',').filter(|s| !s.is_empty()).collect();
    if dirs.len() < 2 {
        return Err(RenqError::Usage(
            "measure-bvc needs at least two run directories".into(),
        ));
    }
    let mut trainers = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let path = Path::new(dir).join("checkpoint.renq");
        let bytes = std::fs::read(&path)
            .map_err(|e| RenqError::Checkpoint(format!("{}: {e}", path.display())))?;
        trainers.push(Trainer::load(&bytes)?);
    }
    let base = trainers[0].cfg.dump();
    for t in &trainers[1..] {
        if t.cfg.dump() != base {
            return Err(RenqError::Config(
                "measure-bvc requires runs with identical configs".into(),
            ));
        }
    }
    let cfg = trainers[0].cfg.clone();
    let mut env = PixelProxyEnv::new(&cfg)?;
    let transitions = collect_transitions(&trainers[0].model, &mut env, n, epsilon, seed);
    let models: Vec<&dyn EnsembleQ> =
        trainers.iter().map(|t| &t.model as &dyn EnsembleQ).collect();
    let report = measure_proxy_bias(&models, &transitions, cfg.discount)?;

    let header = "method,bias_hat_sq,var_bar,cov_bar,sigma_sq,ge_hat";
    let cov = report.cov_bar.map(|v| format!("{v}")).unwrap_or_default();
    let row = format!(
        "{},{},{},{},{},{}",
        cfg.agent_mode.as_str(),
        report.bias_hat_sq,
        report.var_bar,
        cov,
        report.sigma_sq,
        report.ge_hat
    );
    println!("{header}");
    println!("{row}");
    if let Some(out) = flags.get("out") {
        std::fs::write(out, format!("{header}\n{row}\n"))?;
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// lab
// ---------------------------------------------------------------------------

struct LabReport {
    rows: Vec<(String, String, f64, Option<f64>)>,
    failures: Vec<String>,
}

impl LabReport {
    fn new() -> Self {
        LabReport { rows: Vec::new(), failures: Vec::new() }
    }

    fn value(&mut self, config: &str, component: &str, value: f64, stderr: Option<f64>) {
        self.rows.push((config.into(), component.into(), value, stderr));
    }

    fn check(&mut self, config: &str, component: &str, pass: bool, detail: String) {
        self.rows
            .push((config.into(), component.into(), if pass { 1.0 } else { 0.0 }, None));
        let line = format!("[{}] {config}: {component} {detail}", if pass { "pass" } else { "FAIL" });
        println!("{line}");
        if !pass {
            self.failures.push(line);
        }
    }

    fn csv(&self) -> String {
        let mut out = String::from("config,component,value,stderr\n");
        for (c, k, v, se) in &self.rows {
            let se = se.map(|s| format!("{s}")).unwrap_or_default();
            out.push_str(&format!("{c},{k},{v},{se}\n"));
        }
        out
    }
}

struct LabContext {
    seed: u64,
    grids: Vec<(String, TrialGrid, bool)>,
}

impl LabContext {
    fn new(seed: u64) -> Result<Self, RenqError> {
        let mut grids = Vec::new();
        for entry in suite() {
            let grid = run_trials(
                entry.learner.as_ref(),
                entry.task.as_ref(),
                entry.d,
                entry.s,
                entry.n_train,
                entry.t_test,
                seed,
            )?;
            // ridge learners ignore the seed: flag deterministic suites for
            // the exact-equality checks
            let deterministic = entry.name != "tendim_net";
            grids.push((entry.name.to_string(), grid, deterministic));
        }
        Ok(LabContext { seed, grids })
    }
}

fn lab_thm1(ctx: &LabContext, report: &mut LabReport) {
    for (name, grid, _) in &ctx.grids {
        let r = estimate_single_bvc(grid);
        report.value(name, "ge_direct", r.ge_direct, Some(r.se_ge));
        report.value(name, "ge_decomposed", r.ge_decomposed, Some(r.se_identity));
        report.value(name, "bias_sq", r.bias_sq, None);
        report.value(name, "var", r.var, None);
        report.value(name, "sigma_sq", r.sigma2, None);
        let gap = (r.ge_direct - r.ge_decomposed).abs();
        let bound = 3.0 * r.se_identity;
        report.check(
            name,
            "thm1_identity_within_3se",
            gap <= bound,
            format!("|direct - decomposed| = {gap:.3e} <= {bound:.3e}"),
        );
    }
}

fn lab_thm2(ctx: &LabContext, report: &mut LabReport) -> Result<(), RenqError> {
    for (name, grid, _) in &ctx.grids {
        let e = estimate_ensemble_bvc(grid, 5, SeedMode::Independent)?;
        report.value(name, "ens_ge_direct", e.ge_direct, Some(e.se_ge));
        report.value(name, "ens_ge_decomposed", e.ge_decomposed, Some(e.se_identity));
        report.value(name, "ens_bias_bar_sq", e.bias_bar_sq, None);
        report.value(name, "ens_var_bar", e.var_bar, None);
        report.value(name, "ens_cov_bar", e.cov_bar, None);
        let gap = (e.ge_direct - e.ge_decomposed).abs();
        let bound = 3.0 * e.se_identity;
        report.check(
            name,
            "thm2_identity_within_3se",
            gap <= bound,
            format!("|direct - decomposed| = {gap:.3e} <= {bound:.3e}"),
        );
    }
    Ok(())
}

fn lab_thm3(ctx: &LabContext, report: &mut LabReport) -> Result<(), RenqError> {
    for (name, grid, deterministic) in &ctx.grids {
        let s = estimate_single_bvc(grid);
        let e = estimate_ensemble_bvc(grid, 5, SeedMode::Independent)?;
        let out = crate::bvc::check_inequalities(&s, &e);
        report.check(
            name,
            "lemma1_cov_le_var",
            out.cov_le_var,
            format!("cov - var = {:.3e} <= slack {:.3e}", out.cov_gap, out.cov_slack),
        );
        report.check(
            name,
            "thm3_ge_ens_le_single",
            out.ge_ens_le_single,
            format!("ge gap = {:.3e} <= slack {:.3e}", out.ge_gap, out.ge_slack),
        );
        if *deterministic {
            // seed-independent learner: all members identical, equalities exact
            let scale = e.var_bar.abs().max(1.0);
            let cov_eq = (e.cov_bar - e.var_bar).abs() <= 1e-12 * scale;
            let ge_eq = (e.ge_direct - s.ge_direct).abs() <= 1e-12 * s.ge_direct.abs().max(1.0);
            report.check(
                name,
                "equality_case_exact",
                cov_eq && ge_eq,
                format!(
                    "|cov - var| = {:.3e}, |ge_ens - ge_single| = {:.3e}",
                    (e.cov_bar - e.var_bar).abs(),
                    (e.ge_direct - s.ge_direct).abs()
                ),
            );
        } else {
            // randomized learner: strict inequality expected
            report.check(
                name,
                "strict_inequality_observed",
                e.cov_bar < e.var_bar,
                format!("cov {:.4} < var {:.4}", e.cov_bar, e.var_bar),
            );
        }
    }
    Ok(())
}

fn lab_prop1(ctx: &LabContext, report: &mut LabReport) -> Result<(), RenqError> {
    // pure algebra on arbitrary bias vectors
    let mut rng = crate::rng::Rng64::seeded(ctx.seed ^ 0xC0B1A5);
    let biases: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..24).map(|_| rng.uniform(-2.0, 2.0)).collect())
        .collect();
    let (_, resid) = decompose_bias_cobias(&biases);
    report.value("synthetic_biases", "cobias_identity_residual", resid, None);
    report.check(
        "synthetic_biases",
        "prop1_identity_1e12",
        resid <= 1e-12,
        format!("residual {resid:.3e}"),
    );
    // and on estimated member biases from a real grid
    for (name, grid, _) in &ctx.grids {
        let e = estimate_ensemble_bvc(grid, 5, SeedMode::Independent)?;
        let (_, resid) = decompose_bias_cobias(&e.member_bias);
        report.check(
            name,
            "prop1_identity_on_grid",
            resid <= 1e-12,
            format!("residual {resid:.3e}"),
        );
    }
    Ok(())
}

fn lab_prop2(ctx: &LabContext, report: &mut LabReport) -> Result<(), RenqError> {
    // identical randomized learners: conditional-mean route agrees with the
    // direct pairwise estimate within MC error
    for (name, grid, deterministic) in &ctx.grids {
        if *deterministic {
            continue;
        }
        let e = estimate_ensemble_bvc(grid, 5, SeedMode::Independent)?;
        let gap = (e.cov_conditional - e.cov_direct_unbiased).abs();
        let bound = 3.0 * e.se_cov_route_diff;
        report.value(name, "cov_direct", e.cov_direct_unbiased, None);
        report.value(name, "cov_conditional", e.cov_conditional, None);
        report.check(
            name,
            "prop2_routes_within_3se",
            gap <= bound,
            format!("|cond - direct| = {gap:.3e} <= {bound:.3e}"),
        );
    }
    // heterogeneous members on shared datasets
    let task = crate::bvc::synthetic::LinearTask { a: 1.1, b: 0.2, sigma2: 0.09 };
    let ridge = crate::bvc::synthetic::RidgeLearner { lambda: 0.3 };
    let net = crate::bvc::synthetic::NetLearner { hidden: 6, steps: 60, lr: 0.03 };
    let grid = run_trials_multi(&[&ridge, &net], &task, 80, 8, 16, 24, ctx.seed ^ 0x9E7, false)?;
    let (direct, cond, se) = multi_cov_routes(&grid, 0, 1);
    report.value("hetero_linear", "cov_direct", direct, Some(se));
    report.value("hetero_linear", "cov_conditional", cond, Some(se));
    report.check(
        "hetero_linear",
        "prop2_hetero_within_3se",
        (direct - cond).abs() <= 3.0 * se,
        format!("|cond - direct| = {:.3e} <= {:.3e}", (direct - cond).abs(), 3.0 * se),
    );
    // degenerate shared-seed case: cov equals var exactly
    let net2 = crate::bvc::synthetic::NetLearner { hidden: 6, steps: 60, lr: 0.03 };
    let shared =
        run_trials_multi(&[&net2, &net2], &task, 20, 6, 16, 12, ctx.seed ^ 0x5EED, true)?;
    let (cov01, _, _) = multi_cov_routes(&shared, 0, 1);
    let (var0, _, _) = multi_cov_routes(&shared, 0, 0);
    report.check(
        "shared_seed",
        "prop2_degenerate_cov_equals_var",
        (cov01 - var0).abs() <= 1e-12 * var0.abs().max(1.0),
        format!("|cov - var| = {:.3e}", (cov01 - var0).abs()),
    );
    Ok(())
}

fn cmd_lab(flags: &Flags) -> Result<i32, RenqError> {
    let suite_name = flags.get("suite").unwrap_or("all");
    let known = ["thm1", "thm2", "thm3", "prop1", "prop2", "all"];
    if !known.contains(&suite_name) {
        return Err(RenqError::Usage(format!(
            "unknown suite '{suite_name}'; available: {}",
            known.join(", ")
        )));
    }
    let seed: u64 = flags.parse_or("seed", 20240901)?;
    let ctx = LabContext::new(seed)?;
    let mut report = LabReport::new();
    if suite_name == "thm1" || suite_name == "all" {
        lab_thm1(&ctx, &mut report);
    }
    if suite_name == "thm2" || suite_name == "all" {
        lab_thm2(&ctx, &mut report)?;
    }
    if suite_name == "thm3" || suite_name == "all" {
        lab_thm3(&ctx, &mut report)?;
    }
    if suite_name == "prop1" || suite_name == "all" {
        lab_prop1(&ctx, &mut report)?;
    }
    if suite_name == "prop2" || suite_name == "all" {
        lab_prop2(&ctx, &mut report)?;
    }
    // human-readable value table
    println!("\nconfig,component,value,stderr");
    for (c, k, v, se) in &report.rows {
        let se = se.map(|s| format!("{s:.3e}")).unwrap_or_default();
        println!("{c},{k},{v:.6},{se}");
    }
    if let Some(out) = flags.get("out") {
        std::fs::write(out, report.csv())?;
    }
    if report.failures.is_empty() {
        Ok(0)
    } else {
        eprintln!("{} lab check(s) failed", report.failures.len());
        Ok(3)
    }
}

// ---------------------------------------------------------------------------
// dump-config
// ---------------------------------------------------------------------------

fn cmd_dump_config(flags: &Flags) -> Result<i32, RenqError> {
    let cfg = load_config(flags)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(cfg.dump().as_bytes())?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&args(&[])), 1);
        assert_eq!(run_args(&args(&["warp"])), 1);
        assert_eq!(run_args(&args(&["eval"])), 1, "missing required flag");
    }

    #[test]
    fn config_errors_exit_two() {
        assert_eq!(
            run_args(&args(&["dump-config", "--set", "train.warp=1"])),
            2,
            "unknown key"
        );
        assert_eq!(run_args(&args(&["dump-config", "--preset", "galaxy"])), 2);
    }

    #[test]
    fn dump_config_ok() {
        assert_eq!(run_args(&args(&["dump-config", "--preset", "paper"])), 0);
    }

    #[test]
    fn lab_rejects_unknown_suite_listing_available() {
        let err = dispatch(&args(&["lab", "--suite", "thmX"])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("thm1") && msg.contains("prop2"), "{msg}");
    }
}

//! Command-line driver: run configuration, `train`, `eval` and `oracle`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::envs::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::eval::{
    distinct_successes, div_at_n, empirical_distribution, enumerate_target, episode_rng, format_float,
    kl_divergence, l1_distance, parallel_map, policy_distribution, sample_trajectories, success_rate,
};
use crate::policy::{Policy, PolicyConfig, PolicyParameters};
use crate::training::{sft_initialize, Algorithm, MetricsWriter, Trainer, TrainerConfig};
use rand::Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

fn default_samples() -> usize {
    1000
}
fn default_div_n() -> usize {
    16
}
fn default_div_tasks() -> usize {
    20
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Rollouts for success rate and the empirical distribution.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// N of Div@N.
    #[serde(default = "default_div_n")]
    pub div_n: usize,
    /// Tasks Div@N is averaged over.
    #[serde(default = "default_div_tasks")]
    pub div_tasks: usize,
    /// Sampling temperature override for evaluation.
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Everything a run depends on besides the code version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        self.trainer.validate()?;
        if self.eval.samples == 0 || self.eval.div_n == 0 || self.eval.div_tasks == 0 {
            return Err(Error::Config("eval.samples, eval.div_n and eval.div_tasks must be positive".into()));
        }
        if let Some(t) = self.eval.temperature {
            if !(t > 0.0) {
                return Err(Error::Config(format!("eval.temperature = {t} must be > 0")));
            }
        }
        Ok(())
    }

    fn trainer(&self) -> TrainerConfig {
        TrainerConfig { seed: self.seed, ..self.trainer.clone() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gflowseq", version, about = "GFlowNet training of autoregressive decision policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optional SFT, then GFlowNet or policy-gradient training.
    Train(Common),
    /// Success rate, Div@N and oracle distances of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding policy.bin and policy.json.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Writes the exact target distribution of an enumerable environment.
    Oracle(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        cfg.trainer.workers = w;
    }
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Unsupported(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn write_resolved(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let text = serde_json::to_string_pretty(cfg)? + "\n";
    std::fs::write(cfg.output_dir.join("config.json"), text)?;
    Ok(())
}

/// Trains and writes `metrics.csv`, `sft.csv` (with SFT) and the
/// checkpoint directory under the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    write_resolved(cfg)?;
    let out = &cfg.output_dir;
    let trainer_cfg = cfg.trainer();
    let mut policy = Policy::new(cfg.policy.clone(), cfg.seed)?;
    if trainer_cfg.sft_init {
        let losses = sft_initialize(&mut policy, &cfg.env, &trainer_cfg.sft, cfg.seed)?;
        let mut w = csv::Writer::from_path(out.join("sft.csv"))?;
        w.write_record(["step", "loss"])?;
        for (i, l) in losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format_float(*l)])?;
        }
        w.flush()?;
        policy.params.save(&out.join("sft"), "policy")?;
        info!("SFT done, final loss {:.6}", losses.last().copied().unwrap_or(f64::NAN));
    }
    let algorithm = trainer_cfg.algorithm;
    let mut trainer = Trainer::new(cfg.env.clone(), policy, trainer_cfg)?;
    let mut metrics = MetricsWriter::create(&out.join("metrics.csv"))?;
    trainer.train(|_, row| {
        metrics.append(row)?;
        Ok(true)
    })?;
    trainer.state().save(&out.join("checkpoint"))?;
    let last = trainer.metrics().last();
    info!(
        "{} training finished after {} updates; last success rate {:.3}",
        if algorithm == Algorithm::Gfn { "GFlowNet" } else { "policy-gradient" },
        trainer.step(),
        last.map_or(f64::NAN, |r| r.success_rate)
    );
    Ok(())
}

/// One-row evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub success_rate: f64,
    pub div_at_n: Option<f64>,
    pub l1: Option<f64>,
    pub kl: Option<f64>,
    pub l1_exact: Option<f64>,
}

pub fn evaluate(policy: &Policy, cfg: &RunConfig) -> Result<EvalReport> {
    let workers = cfg.trainer.workers;
    let trajs = sample_trajectories(policy, &cfg.env, cfg.eval.samples, cfg.seed, workers)?;
    let sr = success_rate(&trajs, &cfg.env)?;

    let n = cfg.eval.div_n;
    let counts: Vec<usize> = parallel_map(cfg.eval.div_tasks, workers, |task| -> Result<usize> {
        let mut rng = episode_rng(cfg.seed, (1u64 << 61) + task as u64);
        let task_seed: u64 = rng.gen();
        let group = (0..n)
            .map(|_| policy.rollout(Env::reset(&cfg.env, task_seed)?, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(distinct_successes(&group, &cfg.env))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let div = match div_at_n(&counts) {
        Ok(d) => Some(d),
        Err(Error::UndefinedMetric(m)) => {
            warn!("{m}");
            None
        }
        Err(e) => return Err(e),
    };

    let (l1, kl, l1_exact) = match enumerate_target(&cfg.env) {
        Ok(table) => {
            let target = table.distribution();
            let emp = empirical_distribution(&trajs);
            let exact = if policy.config.cot_length == 0 {
                Some(l1_distance(&policy_distribution(policy, &cfg.env)?, &target))
            } else {
                None
            };
            (Some(l1_distance(&emp, &target)), Some(kl_divergence(&emp, &target)), exact)
        }
        Err(Error::Unsupported(m)) => {
            info!("no oracle distances: {m}");
            (None, None, None)
        }
        Err(e) => return Err(e),
    };
    Ok(EvalReport { samples: trajs.len(), success_rate: sr, div_at_n: div, l1, kl, l1_exact })
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// Loads the checkpoint and writes `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let params = PolicyParameters::load(checkpoint, "policy")?;
    let mut pc = cfg.policy.clone();
    if let Some(t) = cfg.eval.temperature {
        pc.temperature = t;
    }
    let policy = Policy::with_params(pc, params)?;
    let report = evaluate(&policy, cfg)?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join("eval.csv"))?;
    w.write_record(["samples", "success_rate", "div_at_n", "div_n", "l1", "kl", "l1_exact"])?;
    w.write_record([
        report.samples.to_string(),
        format_float(report.success_rate),
        opt(report.div_at_n),
        cfg.eval.div_n.to_string(),
        opt(report.l1),
        opt(report.kl),
        opt(report.l1_exact),
    ])?;
    w.flush()?;
    Ok(report)
}

/// Writes `oracle.csv` with one row per trajectory.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let table = enumerate_target(&cfg.env)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    table.write_csv(std::fs::File::create(cfg.output_dir.join("oracle.csv"))?)?;
    Ok(table.distribution())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(&resolve(c)?),
        Command::Eval { common, checkpoint } => cmd_eval(&resolve(common)?, checkpoint).map(|_| ()),
        Command::Oracle(c) => cmd_oracle(&resolve(c)?).map(|_| ()),
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_json(r#"{"env": {"kind": "number_line"}}"#).unwrap();
        assert_eq!(c.trainer.lr_initial, 1e-5);
        assert_eq!(c.policy.lambda, 0.4);
        assert_eq!(c.eval.div_n, 16);
    }

    #[test]
    fn unknown_field_is_named() {
        let e = RunConfig::from_json(r#"{"env": {"kind": "number_line", "nmax": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("nmax"), "{e}");
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = RunConfig::from_json(r#"{"env": {"kind": "number_line"}, "trainer": {"lr_final": 0.1}}"#).unwrap_err();
        assert!(e.to_string().contains("lr_final"), "{e}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let e = RunConfig::from_json("{\n  \"env\": {\"kind\": }\n}").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(["gflowseq", "train"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["gflowseq", "frobnicate"]), EXIT_CONFIG);
    }
}

//! SFT pretraining, the per-task GFlowNet loop, the learning-rate
//! schedule and a REINFORCE baseline.

use std::fs::File;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_sft_dataset, oracle_blackjack_rollout, oracle_numberline, oracle_sequence, ReplayBuffer, SftExample,
};
use crate::envs::{Env, EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::eval::{episode_rng, format_float, parallel_map};
use crate::losses::{batch_loss, LossConfig, LossKind};
use crate::policy::{Policy, PolicyParameters};
use crate::trajectory::{Goal, Observation, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Gfn,
    PolicyGradient,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Gfn
}
fn default_loss() -> LossKind {
    LossKind::VarTb
}
fn default_tasks() -> usize {
    200
}
fn default_k() -> usize {
    8
}
fn default_capacity() -> usize {
    4
}
fn default_lr_initial() -> f64 {
    1e-5
}
fn default_lr_final() -> f64 {
    1e-9
}
fn default_peak() -> usize {
    25
}
fn default_divergence() -> f64 {
    1e6
}
fn default_workers() -> usize {
    1
}
fn default_decay() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    /// Oracle episodes in the dataset.
    #[serde(default = "default_sft_episodes")]
    pub episodes: usize,
    #[serde(default = "default_sft_steps")]
    pub steps: usize,
    #[serde(default = "default_sft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_sft_lr")]
    pub lr: f64,
}

fn default_sft_episodes() -> usize {
    200
}
fn default_sft_steps() -> usize {
    300
}
fn default_sft_batch() -> usize {
    16
}
fn default_sft_lr() -> f64 {
    1e-2
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            episodes: default_sft_episodes(),
            steps: default_sft_steps(),
            batch_size: default_sft_batch(),
            lr: default_sft_lr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Number of tasks W; one optimizer update per task.
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    /// Rollouts per task K.
    #[serde(default = "default_k")]
    pub trajectories_per_task: usize,
    /// Loss batch drawn from the task buffer; defaults to K.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    /// Inject an oracle trajectory after every failed rollout.
    #[serde(default)]
    pub off_policy: bool,
    #[serde(default)]
    pub sft_init: bool,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default = "default_lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    #[serde(default = "default_peak")]
    pub lr_peak_step: usize,
    /// Moving-average factor of the policy-gradient baseline.
    #[serde(default = "default_decay")]
    pub baseline_decay: f64,
    #[serde(default = "default_divergence")]
    pub divergence_limit: f64,
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainerConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.trajectories_per_task)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0) || !(self.lr_initial >= self.lr_final) {
            return Err(Error::Config(format!(
                "need lr_initial >= lr_final > 0, got {} and {}",
                self.lr_initial, self.lr_final
            )));
        }
        if self.tasks == 0 || self.trajectories_per_task == 0 {
            return Err(Error::Config("trainer.tasks and trainer.trajectories_per_task must be positive".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::Config("trainer.buffer_capacity must be positive".into()));
        }
        if self.algorithm == Algorithm::Gfn {
            LossConfig { kind: self.loss, batch_size: self.batch_size() }.validate()?;
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("trainer.baseline_decay must be in [0, 1)".into()));
        }
        if self.sft_init && (self.sft.episodes == 0 || self.sft.steps == 0 || self.sft.batch_size == 0) {
            return Err(Error::Config("trainer.sft needs positive episodes, steps and batch_size".into()));
        }
        Ok(())
    }

    /// Linear warmup from `lr_final` up to `lr_initial` at `lr_peak_step`,
    /// then cosine decay back to `lr_final` at `tasks`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (hi, lo) = (self.lr_initial, self.lr_final);
        let peak = self.lr_peak_step.min(self.tasks);
        if step < peak {
            return lo + (hi - lo) * step as f64 / peak as f64;
        }
        if step >= self.tasks {
            return lo;
        }
        let span = (self.tasks - peak) as f64;
        let progress = (step - peak) as f64 / span;
        lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: PolicyParameters,
    pub v: PolicyParameters,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(like: &PolicyParameters) -> Self {
        Adam { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut PolicyParameters, grads: &PolicyParameters, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(m).zip(v) {
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub task: usize,
    pub loss: f64,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub lr: f64,
}

/// Append-only metrics CSV, flushed after every row.
pub struct MetricsWriter {
    out: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = csv::Writer::from_writer(File::create(path)?);
        out.write_record(["step", "task", "loss", "success_rate", "mean_reward", "lr"])?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, row: &MetricRow) -> Result<()> {
        self.out.write_record([
            row.step.to_string(),
            row.task.to_string(),
            format_float(row.loss),
            format_float(row.success_rate),
            format_float(row.mean_reward),
            format_float(row.lr),
        ])?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parameters, optimizer moments and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParameters,
    pub adam: Adam,
    pub step: usize,
    pub baseline: f64,
    pub metrics: Vec<MetricRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    step: usize,
    adam_t: u64,
    baseline: f64,
    metrics: Vec<MetricRow>,
}

impl TrainState {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir, "policy")?;
        self.adam.m.save(dir, "adam_m")?;
        self.adam.v.save(dir, "adam_v")?;
        let f = StateFile { step: self.step, adam_t: self.adam.t, baseline: self.baseline, metrics: self.metrics.clone() };
        std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&f)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f: StateFile = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
        Ok(TrainState {
            params: PolicyParameters::load(dir, "policy")?,
            adam: Adam { m: PolicyParameters::load(dir, "adam_m")?, v: PolicyParameters::load(dir, "adam_v")?, t: f.adam_t },
            step: f.step,
            baseline: f.baseline,
            metrics: f.metrics,
        })
    }
}

fn check_loss(step: usize, loss: f64, limit: f64) -> Result<()> {
    if !loss.is_finite() || loss > limit {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

/// Token-level cross-entropy on SFT examples. Returns the mean loss of
/// every update. Examples without a CoT segment get one sampled from the
/// current policy, and only their action is supervised.
pub fn sft_train(
    policy: &mut Policy,
    dataset: &[SftExample],
    config: &SftConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Config("SFT dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(&policy.params);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&SftExample> =
            (0..config.batch_size).map(|_| &dataset[rng.gen_range(0..dataset.len())]).collect();
        let mut trajs = Vec::with_capacity(batch.len());
        let mut supervise_cot = Vec::with_capacity(batch.len());
        for e in &batch {
            let mut t = e.to_trajectory();
            supervise_cot.push(e.cot.len() == policy.config.cot_length);
            policy.fill_cot(&mut t, &mut rng)?;
            trajs.push(t);
        }
        let (loss, grads) = {
            let mut g = policy.graph();
            let mut terms = Vec::with_capacity(trajs.len());
            for (t, sup) in trajs.iter().zip(&supervise_cot) {
                let last = t.len() - 1;
                let view = t.view_at(last)?;
                let h = g.encode_history(&view)?;
                let s = &t.steps[last];
                let out = g.score_step(h, &s.admissible, crate::policy::Forced { cot: &s.cot, action: s.action })?;
                let term = if *sup && !s.cot.is_empty() { g.tape.add(out.log_p_action, out.log_p_cot)? } else { out.log_p_action };
                terms.push(term);
            }
            let total = g.tape.add_all(&terms)?;
            let loss = g.tape.scale(total, -1.0 / trajs.len() as f64);
            (g.tape.scalar_value(loss), g.param_gradients(loss)?)
        };
        check_loss(step, loss, f64::INFINITY)?;
        adam.step(&mut policy.params, &grads, config.lr);
        losses.push(loss);
    }
    Ok(losses)
}

/// Task-by-task training: per task, roll K episodes, fill the
/// task buffer, take one optimizer step on a batch drawn from it.
pub struct Trainer {
    pub env: EnvConfig,
    pub config: TrainerConfig,
    pub policy: Policy,
    adam: Adam,
    step: usize,
    baseline: f64,
    baseline_ready: bool,
    metrics: Vec<MetricRow>,
    batch_rng: ChaCha8Rng,
}

const TASK_STREAM: u64 = 1 << 62;

impl Trainer {
    pub fn new(env: EnvConfig, policy: Policy, config: TrainerConfig) -> Result<Self> {
        env.validate()?;
        config.validate()?;
        if config.algorithm == Algorithm::Gfn && config.loss.needs_done() && !env.done_enabled() {
            return Err(Error::Config(format!(
                "{} reads the termination probability at every prefix; enable DONE for this environment",
                config.loss.name()
            )));
        }
        let adam = Adam::new(&policy.params);
        let batch_rng = episode_rng(config.seed, u64::MAX);
        Ok(Trainer { env, config, policy, adam, step: 0, baseline: 0.0, baseline_ready: false, metrics: Vec::new(), batch_rng })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            params: self.policy.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            baseline: self.baseline,
            metrics: self.metrics.clone(),
        }
    }

    /// Seed of the environment episode that defines task `w`.
    pub fn task_seed(&self, w: usize) -> u64 {
        episode_rng(self.config.seed, TASK_STREAM + w as u64).gen()
    }

    fn rollouts(&self, w: usize, task_seed: u64) -> Result<Vec<Trajectory>> {
        let k = self.config.trajectories_per_task;
        let policy = &self.policy;
        let env = &self.env;
        parallel_map(k, self.config.workers, |i| {
            let mut rng = episode_rng(self.config.seed, (w * k + i) as u64);
            policy.rollout(Env::reset(env, task_seed)?, &mut rng)
        })
        .into_iter()
        .collect()
    }

    fn oracle(&self, traj: &Trajectory, task_seed: u64, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        let mut t = match self.env.kind {
            EnvKind::NumberLine => {
                let Goal::NumberLine { target } = traj.goal else { unreachable!("NumberLine goal") };
                let Some(Observation::NumberLine { current, .. }) = traj.steps.first().map(|s| &s.observation) else {
                    return Err(Error::Data("NumberLine trajectory without steps".into()));
                };
                oracle_numberline(target, *current, &self.env)?
            }
            EnvKind::Blackjack => oracle_blackjack_rollout(&self.env, task_seed)?,
            EnvKind::SequencePattern => oracle_sequence(&self.env, task_seed, rng)?,
        };
        self.policy.fill_cot(&mut t, rng)?;
        Ok(t)
    }

    /// Trains on task `w` and records its metrics.
    pub fn run_task(&mut self, w: usize) -> Result<MetricRow> {
        let task_seed = self.task_seed(w);
        let trajs = self.rollouts(w, task_seed)?;
        let successes = trajs.iter().filter(|t| self.env.is_success(t)).count();
        let success_rate = successes as f64 / trajs.len() as f64;
        let mean_reward = trajs.iter().map(|t| t.terminal_reward).sum::<f64>() / trajs.len() as f64;
        let lr = self.config.lr_at(self.step);

        let (loss, grads) = match self.config.algorithm {
            Algorithm::Gfn => {
                let mut buffer = ReplayBuffer::new(self.config.buffer_capacity)?;
                let mut rng = episode_rng(self.config.seed, TASK_STREAM / 2 + w as u64);
                for t in &trajs {
                    buffer.push(t.clone())?;
                    if self.config.off_policy && !self.env.is_success(t) {
                        buffer.push(self.oracle(t, task_seed, &mut rng)?)?;
                    }
                }
                let batch = buffer.sample(self.config.batch_size(), &mut self.batch_rng)?;
                let mut g = self.policy.graph();
                let l = batch_loss(&mut g, self.config.loss, &batch, &self.env)?;
                (g.tape.scalar_value(l), g.param_gradients(l)?)
            }
            Algorithm::PolicyGradient => {
                let returns: Vec<f64> = trajs.iter().map(|t| self.env.raw_return(t)).collect();
                let mean = returns.iter().sum::<f64>() / returns.len() as f64;
                if !self.baseline_ready {
                    self.baseline = mean;
                    self.baseline_ready = true;
                }
                let mut g = self.policy.graph();
                let mut terms = Vec::with_capacity(trajs.len());
                for (t, r) in trajs.iter().zip(&returns) {
                    let score = g.score(t)?;
                    let lp: Vec<_> = score.steps.iter().map(|s| s.log_p_forward).collect();
                    let total = g.tape.add_all(&lp)?;
                    terms.push(g.tape.scale(total, -(r - self.baseline)));
                }
                let total = g.tape.add_all(&terms)?;
                let l = g.tape.scale(total, 1.0 / trajs.len() as f64);
                let out = (g.tape.scalar_value(l), g.param_gradients(l)?);
                let d = self.config.baseline_decay;
                self.baseline = d * self.baseline + (1.0 - d) * mean;
                out
            }
        };
        check_loss(self.step, loss.abs(), self.config.divergence_limit)?;
        self.adam.step(&mut self.policy.params, &grads, lr);
        self.step += 1;
        if !self.policy.params.is_finite() {
            return Err(Error::Diverged { step: self.step, loss });
        }
        let row = MetricRow { step: self.step, task: w, loss, success_rate, mean_reward, lr };
        debug!("task {w}: loss {loss:.6} success {success_rate:.3} reward {mean_reward:.3} lr {lr:.3e}");
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Runs every task. `on_task` sees each row and may stop early by
    /// returning `false`.
    pub fn train(&mut self, mut on_task: impl FnMut(&Trainer, &MetricRow) -> Result<bool>) -> Result<()> {
        for w in self.step..self.config.tasks {
            let row = self.run_task(w)?;
            if !on_task(self, &row)? {
                info!("stopped after task {w}");
                break;
            }
        }
        Ok(())
    }
}

/// SFT on an oracle dataset drawn for `env`.
pub fn sft_initialize(policy: &mut Policy, env: &EnvConfig, config: &SftConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset = build_sft_dataset(env, config.episodes, &mut rng)?;
    info!("SFT on {} examples", dataset.len());
    sft_train(policy, &dataset, config, seed.wrapping_add(1))
}

/// Full GFlowNet training run: optional SFT, then every task.
pub fn gfn_train(env: &EnvConfig, policy: Policy, config: &TrainerConfig) -> Result<TrainState> {
    let mut policy = policy;
    if config.sft_init {
        sft_initialize(&mut policy, env, &config.sft, config.seed)?;
    }
    let mut t = Trainer::new(env.clone(), policy, TrainerConfig { algorithm: Algorithm::Gfn, ..config.clone() })?;
    t.train(|_, _| Ok(true))?;
    Ok(t.state())
}

/// REINFORCE with a moving-average baseline on the raw return.
pub fn pg_baseline_train(env: &EnvConfig, policy: Policy, config: &TrainerConfig) -> Result<TrainState> {
    let mut t =
        Trainer::new(env.clone(), policy, TrainerConfig { algorithm: Algorithm::PolicyGradient, ..config.clone() })?;
    t.train(|_, _| Ok(true))?;
    Ok(t.state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sft_examples;
    use crate::policy::PolicyConfig;
    use crate::trajectory::Token;

    fn small_policy(seed: u64) -> Policy {
        Policy::new(PolicyConfig { embed_dim: 4, hidden_dim: 8, head_dim: 8, ..PolicyConfig::default() }, seed).unwrap()
    }

    fn cfg(tasks: usize) -> TrainerConfig {
        TrainerConfig { tasks, lr_initial: 1e-2, lr_final: 1e-4, lr_peak_step: 5, ..TrainerConfig::default() }
    }

    #[test]
    fn default_schedule_constants() {
        let c = TrainerConfig::default();
        assert_eq!((c.lr_initial, c.lr_final, c.lr_peak_step), (1e-5, 1e-9, 25));
        assert_eq!(c.buffer_capacity, 4);
    }

    #[test]
    fn schedule_shape() {
        let c = TrainerConfig { tasks: 200, ..TrainerConfig::default() };
        let peak = c.lr_at(25);
        assert_eq!(peak, 1e-5);
        for s in 0..=200 {
            assert!(c.lr_at(s) <= peak);
        }
        assert_eq!(c.lr_at(200), 1e-9);
        for s in 25..200 {
            assert!(c.lr_at(s + 1) <= c.lr_at(s));
        }
        for s in 0..25 {
            assert!(c.lr_at(s + 1) >= c.lr_at(s));
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainerConfig { lr_initial: 1e-9, lr_final: 1e-5, ..TrainerConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainerConfig { batch_size: Some(1), ..TrainerConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let seq = EnvConfig::new(EnvKind::SequencePattern);
        let sub = TrainerConfig { loss: LossKind::SubTb, ..TrainerConfig::default() };
        assert!(matches!(Trainer::new(seq, small_policy(0), sub), Err(Error::Config(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let p = small_policy(0);
        let mut params = p.params.clone();
        let mut grads = p.params.zeros_like();
        grads.b_out.data_mut()[0] = 3.0;
        grads.b_out.data_mut()[1] = -0.5;
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 0.1);
        let d0 = params.b_out.data()[0] - p.params.b_out.data()[0];
        let d1 = params.b_out.data()[1] - p.params.b_out.data()[1];
        assert!((d0 + 0.1).abs() < 1e-8);
        assert!((d1 - 0.1).abs() < 1e-8);
        assert_eq!(params.w_in, p.params.w_in);
    }

    #[test]
    fn sft_memorizes_one_example() {
        let env = EnvConfig::number_line(0, 5, 10);
        let t = oracle_numberline(3, 1, &env).unwrap();
        let ex = vec![sft_examples(&t)[0].clone()];
        let mut p = small_policy(1);
        let c = SftConfig { steps: 200, batch_size: 1, lr: 0.05, ..SftConfig::default() };
        let losses = sft_train(&mut p, &ex, &c, 0).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let mut g = p.graph();
        let v = g.log_p_forward_of(&ex[0].to_trajectory(), 0).unwrap();
        assert!(g.tape.scalar_value(v).exp() > 0.99);
        assert!(matches!(sft_train(&mut p, &[], &c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sft_learns_to_stop_at_the_goal() {
        let env = EnvConfig::number_line(0, 5, 10);
        let mut p = Policy::new(PolicyConfig::default(), 2).unwrap();
        let c = SftConfig { episodes: 200, steps: 1000, batch_size: 16, lr: 1e-2 };
        sft_initialize(&mut p, &env, &c, 3).unwrap();
        let mut worst: f64 = 1.0;
        for target in 0..=5 {
            for start in 0..=5 {
                let t = oracle_numberline(target, start, &env).unwrap();
                let mut g = p.graph();
                let tp = g.terminal_prob(&t, t.num_moves()).unwrap();
                worst = worst.min(g.tape.scalar_value(tp.value).exp());
            }
        }
        assert!(worst > 0.9, "worst P(DONE | at goal) = {worst}");
    }

    #[test]
    fn shuffled_labels_fit_worse() {
        let env = EnvConfig::number_line(0, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = build_sft_dataset(&env, 60, &mut rng).unwrap();
        let mut shuffled = ds.clone();
        for e in &mut shuffled {
            e.action = e.admissible[rng.gen_range(0..e.admissible.len())];
        }
        let c = SftConfig { steps: 300, batch_size: 16, lr: 1e-2, ..SftConfig::default() };
        let tail = |l: Vec<f64>| l[l.len() - 50..].iter().sum::<f64>() / 50.0;
        let good = tail(sft_train(&mut small_policy(5), &ds, &c, 1).unwrap());
        let bad = tail(sft_train(&mut small_policy(5), &shuffled, &c, 1).unwrap());
        assert!(bad >= good, "shuffled {bad} < correct {good}");
    }

    #[test]
    fn training_is_deterministic_and_worker_invariant() {
        let env = EnvConfig::number_line(0, 2, 4);
        let run = |workers: usize| {
            let mut t = Trainer::new(env.clone(), small_policy(3), TrainerConfig { workers, off_policy: true, ..cfg(15) }).unwrap();
            t.train(|_, _| Ok(true)).unwrap();
            t.state()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
        assert_eq!(a.metrics.len(), 15);
    }

    #[test]
    fn every_loss_and_env_trains_without_error() {
        let cases = [
            (EnvConfig::number_line(0, 2, 4), LossKind::VarTb),
            (EnvConfig::number_line(0, 2, 4), LossKind::SubTb),
            (EnvConfig::number_line(0, 2, 4), LossKind::Db),
            (EnvConfig::new(EnvKind::Blackjack), LossKind::VarTb),
            (EnvConfig::new(EnvKind::Blackjack), LossKind::Db),
            (EnvConfig::new(EnvKind::SequencePattern), LossKind::VarTb),
        ];
        for (env, loss) in cases {
            let c = TrainerConfig { loss, off_policy: true, ..cfg(5) };
            let s = gfn_train(&env, small_policy(0), &c).unwrap();
            assert_eq!(s.step, 5);
            let s = pg_baseline_train(&env, small_policy(0), &c).unwrap();
            assert_eq!(s.step, 5);
        }
    }

    #[test]
    fn divergence_guard_trips() {
        let env = EnvConfig::number_line(0, 2, 4);
        let c = TrainerConfig { divergence_limit: 1e-12, ..cfg(5) };
        let mut t = Trainer::new(env, small_policy(0), c).unwrap();
        assert!(matches!(t.train(|_, _| Ok(true)), Err(Error::Diverged { .. })));
    }

    #[test]
    fn on_policy_buffer_holds_only_rollouts() {
        // with off-policy off, no oracle walk appears unless sampled
        let env = EnvConfig { target: Some(2), start: Some(0), ..EnvConfig::number_line(0, 2, 4) };
        let mut t = Trainer::new(env.clone(), small_policy(7), cfg(3)).unwrap();
        let trajs = t.rollouts(0, t.task_seed(0)).unwrap();
        assert!(trajs.iter().all(|x| x.steps.iter().all(|s| s.cot.is_empty())));
        t.run_task(0).unwrap();
    }

    #[test]
    fn state_round_trips_bit_exactly() {
        let env = EnvConfig::number_line(0, 2, 4);
        let mut t = Trainer::new(env, small_policy(1), cfg(4)).unwrap();
        t.train(|_, _| Ok(true)).unwrap();
        let s = t.state();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = TrainState::load(dir.path()).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.adam.v.tensors().iter().zip(s.adam.v.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn metrics_csv_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&MetricRow { step: 1, task: 0, loss: 0.5, success_rate: 0.25, mean_reward: 10.0, lr: 1e-3 }).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,task,loss,success_rate,mean_reward,lr\n1,0,0.5,0.25,10.0,0.001\n");
    }

    #[test]
    fn off_policy_injection_adds_the_oracle_walk() {
        let env = EnvConfig { target: Some(2), start: Some(0), ..EnvConfig::number_line(0, 2, 4) };
        let t = Trainer::new(env.clone(), small_policy(1), TrainerConfig { off_policy: true, ..cfg(3) }).unwrap();
        let failed = crate::data::replay_actions(Env::reset(&env, 0).unwrap(), &[Token::DONE]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = t.oracle(&failed, 0, &mut rng).unwrap();
        assert_eq!(o.action_key(), "+ + DONE");
    }
}

//! Enumeration oracle, distribution diagnostics, success rate, Div@N and
//! the finite-difference gradient checker.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{Env, EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossKind};
use crate::policy::{Policy, PolicyParameters};
use crate::trajectory::{Token, Trajectory};

/// Trajectory counts above this are refused by [`enumerate_target`].
pub const MAX_ENUMERATION: usize = 1_000_000;

/// Smoothing added inside the KL logarithms.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEntry {
    pub key: String,
    pub actions: Vec<Token>,
    pub reward: f64,
    pub probability: f64,
}

/// Every complete trajectory with its reward and target probability
/// `R / Z`, sorted by key.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactFlowTable {
    pub entries: Vec<FlowEntry>,
    pub z: f64,
}

impl ExactFlowTable {
    pub fn from_rewards(rewards: Vec<(Vec<Token>, f64)>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::Contract("flow table needs at least one trajectory".into()));
        }
        if let Some((a, r)) = rewards.iter().find(|(_, r)| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Shaping(format!("trajectory {a:?} has reward {r}")));
        }
        let z: f64 = rewards.iter().map(|(_, r)| r).sum();
        let mut entries: Vec<FlowEntry> = rewards
            .into_iter()
            .map(|(actions, reward)| FlowEntry {
                key: actions.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "),
                actions,
                reward,
                probability: reward / z,
            })
            .collect();
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        if entries.windows(2).any(|w| w[0].key == w[1].key) {
            return Err(Error::Contract("duplicate trajectory in flow table".into()));
        }
        Ok(ExactFlowTable { entries, z })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Target probabilities keyed by trajectory.
    pub fn distribution(&self) -> BTreeMap<String, f64> {
        self.entries.iter().map(|e| (e.key.clone(), e.probability)).collect()
    }

    /// `F(s)`: total reward of the trajectories passing through the prefix.
    pub fn state_flow(&self, prefix: &[Token]) -> f64 {
        self.entries.iter().filter(|e| e.actions.starts_with(prefix)).map(|e| e.reward).sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["trajectory", "reward", "probability"])?;
        for e in &self.entries {
            out.write_record([e.key.clone(), format_float(e.reward), format_float(e.probability)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Shortest decimal text that parses back to the same value.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn check_enumerable(config: &EnvConfig) -> Result<()> {
    match config.kind {
        EnvKind::Blackjack => Err(Error::Unsupported("Blackjack transitions are stochastic".into())),
        EnvKind::NumberLine if config.target.is_none() || config.start.is_none() => {
            Err(Error::Unsupported("NumberLine needs env.target and env.start pinned".into()))
        }
        EnvKind::SequencePattern if config.shown.is_none() => {
            Err(Error::Unsupported("SequencePattern needs env.shown pinned".into()))
        }
        _ => Ok(()),
    }
}

fn walk(env: &Env, prefix: &mut Vec<Token>, out: &mut Vec<(Vec<Token>, f64)>, limit: usize) -> Result<()> {
    for a in env.admissible() {
        let mut next = env.clone();
        let s = next.step(a)?;
        prefix.push(a);
        if s.done {
            if out.len() == limit {
                return Err(Error::TooLarge { limit });
            }
            out.push((prefix.clone(), s.reward));
        } else {
            walk(&next, prefix, out, limit)?;
        }
        prefix.pop();
    }
    Ok(())
}

/// Depth-first enumeration of the trajectory tree of a deterministic
/// single-task environment.
pub fn enumerate_target(config: &EnvConfig) -> Result<ExactFlowTable> {
    enumerate_target_limited(config, MAX_ENUMERATION)
}

pub fn enumerate_target_limited(config: &EnvConfig, limit: usize) -> Result<ExactFlowTable> {
    check_enumerable(config)?;
    let env = Env::reset(config, 0)?;
    let mut out = Vec::new();
    walk(&env, &mut Vec::new(), &mut out, limit)?;
    ExactFlowTable::from_rewards(out)
}

/// Exact trajectory distribution of the policy over the enumerable tree.
pub fn policy_distribution(policy: &Policy, config: &EnvConfig) -> Result<BTreeMap<String, f64>> {
    if policy.config.cot_length > 0 {
        return Err(Error::Unsupported("exact distributions need cot_length = 0".into()));
    }
    let table = enumerate_target(config)?;
    let mut out = BTreeMap::new();
    for e in &table.entries {
        let traj = crate::data::replay_actions(Env::reset(config, 0)?, &e.actions)?;
        out.insert(e.key.clone(), policy.trajectory_log_prob(&traj)?.exp());
    }
    Ok(out)
}

/// Per-episode generator: stream `episode` of the run seed.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Runs `f(0..n)` on up to `workers` threads, results in index order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// `n` seeded rollouts; episode `i` draws its environment seed and its
/// policy samples from stream `i` of `seed`.
pub fn sample_trajectories(
    policy: &Policy,
    config: &EnvConfig,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Trajectory>> {
    parallel_map(n, workers, |i| {
        let mut rng = episode_rng(seed, i as u64);
        let env_seed: u64 = rng.gen();
        policy.rollout(Env::reset(config, env_seed)?, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Relative frequency of each action sequence.
pub fn empirical_distribution(trajectories: &[Trajectory]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in trajectories {
        *counts.entry(t.action_key()).or_default() += 1;
    }
    let n = trajectories.len() as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
}

/// `sum |p - q|` over the union of keys.
pub fn l1_distance(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    keys.into_iter().map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs()).sum()
}

/// `KL(p || q)` with both sides smoothed by [`KL_EPS`].
pub fn kl_divergence(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    keys.into_iter()
        .map(|k| {
            let a = p.get(k).copied().unwrap_or(0.0);
            let b = q.get(k).copied().unwrap_or(0.0);
            if a == 0.0 {
                0.0
            } else {
                a * ((a + KL_EPS) / (b + KL_EPS)).ln()
            }
        })
        .sum()
}

pub fn success_rate(trajectories: &[Trajectory], config: &EnvConfig) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::UndefinedMetric("success rate of an empty set".into()));
    }
    let wins = trajectories.iter().filter(|t| config.is_success(t)).count();
    Ok(wins as f64 / trajectories.len() as f64)
}

/// Distinct successful action sequences among one task's rollouts.
pub fn distinct_successes(trajectories: &[Trajectory], config: &EnvConfig) -> usize {
    trajectories.iter().filter(|t| config.is_success(t)).map(Trajectory::action_key).collect::<BTreeSet<_>>().len()
}

/// Mean distinct-success count over tasks with at least one success.
pub fn div_at_n(counts: &[usize]) -> Result<f64> {
    let hit: Vec<usize> = counts.iter().copied().filter(|&c| c >= 1).collect();
    if hit.is_empty() {
        return Err(Error::UndefinedMetric("Div@N needs at least one task with a success".into()));
    }
    Ok(hit.iter().sum::<usize>() as f64 / hit.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameters whose gradient exceeded the size threshold.
    pub checked: usize,
    pub loss: f64,
}

/// Gradients below this magnitude are skipped by [`grad_check`].
pub const GRAD_CHECK_MIN: f64 = 1e-8;

fn loss_value(policy: &Policy, kind: LossKind, batch: &[Trajectory], env: &EnvConfig) -> Result<f64> {
    let mut g = policy.graph();
    let l = batch_loss(&mut g, kind, batch, env)?;
    Ok(g.tape.scalar_value(l))
}

/// Central finite differences against the analytic gradient of the
/// configured loss on `batch`.
pub fn grad_check(policy: &Policy, kind: LossKind, batch: &[Trajectory], env: &EnvConfig, h: f64) -> Result<GradCheckReport> {
    let (loss, analytic): (f64, PolicyParameters) = {
        let mut g = policy.graph();
        let l = batch_loss(&mut g, kind, batch, env)?;
        (g.tape.scalar_value(l), g.param_gradients(l)?)
    };
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..analytic.tensors().len() {
        for i in 0..analytic.tensors()[k].len() {
            let a = analytic.tensors()[k].data()[i];
            let orig = policy.params.tensors()[k].data()[i];
            probe.params.tensors_mut()[k].data_mut()[i] = orig + h;
            let up = loss_value(&probe, kind, batch, env)?;
            probe.params.tensors_mut()[k].data_mut()[i] = orig - h;
            let down = loss_value(&probe, kind, batch, env)?;
            probe.params.tensors_mut()[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            if a.abs().max(numeric.abs()) <= GRAD_CHECK_MIN {
                continue;
            }
            checked += 1;
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
        }
    }
    Ok(GradCheckReport { max_relative_error: worst, checked, loss })
}

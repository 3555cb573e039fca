//! Var-TB, SubTB and DB objectives in log space.
//!
//! Histories form a tree, so the backward policy is the constant 1 and
//! does not appear in any residual.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::envs::{prefix_reward, EnvConfig};
use crate::error::{Error, Result};
use crate::policy::{PolicyGraph, TerminationSource};
use crate::trajectory::{ShapedReward, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "var_tb")]
    VarTb,
    #[serde(rename = "subtb")]
    SubTb,
    #[serde(rename = "db")]
    Db,
}

impl LossKind {
    /// Whether the loss reads the termination head at every prefix.
    pub fn needs_done(self) -> bool {
        self != LossKind::VarTb
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::VarTb => "var_tb",
            LossKind::SubTb => "subtb",
            LossKind::Db => "db",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub batch_size: usize,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.kind == LossKind::VarTb && self.batch_size < 2 {
            return Err(Error::Config("var_tb needs a batch of at least 2 trajectories".into()));
        }
        Ok(())
    }
}

/// The per-trajectory quantities every loss is assembled from.
///
/// `step_log_pf` has one entry per recorded step (moves and a final DONE);
/// the prefix vectors have one entry per prefix of `0..=num_moves` moves.
#[derive(Debug, Clone)]
pub struct FlowTerms {
    pub step_log_pf: Vec<Var>,
    pub num_moves: usize,
    pub log_terminal: Vec<Var>,
    pub log_prefix_reward: Vec<f64>,
    pub log_reward: f64,
}

impl FlowTerms {
    fn check(&self) -> Result<()> {
        if self.step_log_pf.len() < self.num_moves
            || self.log_terminal.len() != self.num_moves + 1
            || self.log_prefix_reward.len() != self.num_moves + 1
        {
            return Err(Error::Contract(format!(
                "flow terms for {} moves have {} steps, {} terminal and {} reward entries",
                self.num_moves,
                self.step_log_pf.len(),
                self.log_terminal.len(),
                self.log_prefix_reward.len()
            )));
        }
        Ok(())
    }
}

/// Scores `traj` under the policy and collects its flow terms. Prefix
/// rewards are only read when `with_prefixes` is set.
pub fn flow_terms(g: &mut PolicyGraph<'_>, traj: &Trajectory, env: &EnvConfig, with_prefixes: bool) -> Result<FlowTerms> {
    if !traj.terminated {
        return Err(Error::Contract("losses need terminated trajectories".into()));
    }
    let log_reward = ShapedReward::new(traj.terminal_reward)?.ln();
    let score = g.score(traj)?;
    let num_moves = traj.num_moves();
    let (log_terminal, log_prefix_reward) = if with_prefixes {
        if let Some(i) = score.terminal.iter().position(|t| t.source == TerminationSource::Unavailable) {
            return Err(Error::Config(format!(
                "termination probability unavailable at prefix {i}: DONE must be in the vocabulary"
            )));
        }
        let rewards =
            (0..=num_moves).map(|i| prefix_reward(env, traj, i).map(ShapedReward::ln)).collect::<Result<Vec<_>>>()?;
        (score.terminal.iter().map(|t| t.value).collect(), rewards)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(FlowTerms {
        step_log_pf: score.steps.iter().map(|s| s.log_p_forward).collect(),
        num_moves,
        log_terminal,
        log_prefix_reward,
        log_reward,
    })
}

/// `zeta = sum_t log P_F - log R`. It is the same for every trajectory
/// exactly when the policy samples proportionally to reward, where it
/// equals `-log Z`.
pub fn zeta(tape: &mut Tape, terms: &FlowTerms) -> Result<Var> {
    if !terms.log_reward.is_finite() {
        return Err(Error::Shaping(format!("log reward {} is not finite", terms.log_reward)));
    }
    let total = tape.add_all(&terms.step_log_pf)?;
    Ok(tape.shift(total, -terms.log_reward))
}

/// Variance of zeta across the batch, with the batch mean as the
/// estimate of `E[zeta]`.
pub fn var_tb_loss(tape: &mut Tape, batch: &[FlowTerms]) -> Result<Var> {
    if batch.len() < 2 {
        return Err(Error::Config(format!("var_tb needs at least 2 trajectories, got {}", batch.len())));
    }
    let zetas = batch.iter().map(|t| zeta(tape, t)).collect::<Result<Vec<_>>>()?;
    let k = batch.len() as f64;
    let total = tape.add_all(&zetas)?;
    let mean = tape.scale(total, 1.0 / k);
    let mut sq = Vec::with_capacity(zetas.len());
    for z in zetas {
        let d = tape.sub(z, mean)?;
        sq.push(tape.square(d));
    }
    let total = tape.add_all(&sq)?;
    Ok(tape.scale(total, 1.0 / k))
}

fn balance_residual(tape: &mut Tape, terms: &FlowTerms, i: usize, j: usize) -> Result<Var> {
    // log R(i) + sum log P_F + log P(T|j) - log R(j) - log P(T|i)
    let mut parts: Vec<Var> = terms.step_log_pf[i..j].to_vec();
    parts.push(terms.log_terminal[j]);
    let forward = tape.add_all(&parts)?;
    let back = tape.sub(forward, terms.log_terminal[i])?;
    Ok(tape.shift(back, terms.log_prefix_reward[i] - terms.log_prefix_reward[j]))
}

/// Sum of squared balance residuals over all prefix pairs `i < j`.
pub fn subtb_loss(tape: &mut Tape, terms: &FlowTerms) -> Result<Var> {
    terms.check()?;
    let m = terms.num_moves;
    if m == 0 {
        return Ok(tape.constant(0.0));
    }
    let mut sq = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i + 1..=m {
            let r = balance_residual(tape, terms, i, j)?;
            sq.push(tape.square(r));
        }
    }
    tape.add_all(&sq)
}

/// Squared residual of the transition from prefix `t` to prefix `t + 1`.
pub fn db_transition_loss(tape: &mut Tape, terms: &FlowTerms, t: usize) -> Result<Var> {
    terms.check()?;
    if t >= terms.num_moves {
        return Err(Error::Range { index: t, max: terms.num_moves.saturating_sub(1) });
    }
    let r = balance_residual(tape, terms, t, t + 1)?;
    Ok(tape.square(r))
}

/// DB residuals summed over every transition of one trajectory.
pub fn db_loss(tape: &mut Tape, terms: &FlowTerms) -> Result<Var> {
    terms.check()?;
    if terms.num_moves == 0 {
        return Ok(tape.constant(0.0));
    }
    let parts = (0..terms.num_moves).map(|t| db_transition_loss(tape, terms, t)).collect::<Result<Vec<_>>>()?;
    tape.add_all(&parts)
}

/// The configured loss over a batch: Var-TB across the batch, SubTB and
/// DB averaged over trajectories.
pub fn batch_loss(g: &mut PolicyGraph<'_>, kind: LossKind, batch: &[Trajectory], env: &EnvConfig) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Config("empty loss batch".into()));
    }
    let terms =
        batch.iter().map(|t| flow_terms(g, t, env, kind.needs_done())).collect::<Result<Vec<_>>>()?;
    match kind {
        LossKind::VarTb => var_tb_loss(&mut g.tape, &terms),
        LossKind::SubTb | LossKind::Db => {
            let per = terms
                .iter()
                .map(|t| if kind == LossKind::SubTb { subtb_loss(&mut g.tape, t) } else { db_loss(&mut g.tape, t) })
                .collect::<Result<Vec<_>>>()?;
            let total = g.tape.add_all(&per)?;
            Ok(g.tape.scale(total, 1.0 / batch.len() as f64))
        }
    }
}

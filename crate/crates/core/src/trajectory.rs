//! Shared domain types: tokens, observations, goals, step records and
//! trajectories, plus the canonical history encoding and the JSON Lines log
//! format.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub u16);

impl Token {
    pub const DONE: Token = Token(0);
    pub const PLUS: Token = Token(1);
    pub const MINUS: Token = Token(2);
    pub const STAND: Token = Token(3);
    pub const HIT: Token = Token(4);

    pub const OPTION_BASE: u16 = 5;
    pub const OPTION_COUNT: u16 = 4;
    pub const COT_BASE: u16 = Self::OPTION_BASE + Self::OPTION_COUNT;

    /// Token choosing the `slot`-th displayed candidate.
    pub fn option(slot: usize) -> Token {
        assert!(slot < Self::OPTION_COUNT as usize, "option slot {slot} out of range");
        Token(Self::OPTION_BASE + slot as u16)
    }

    pub fn option_slot(self) -> Option<usize> {
        (Self::OPTION_BASE..Self::COT_BASE)
            .contains(&self.0)
            .then(|| (self.0 - Self::OPTION_BASE) as usize)
    }

    /// Auxiliary chain-of-thought token `k`.
    pub fn cot(k: usize) -> Token {
        Token(Self::COT_BASE + k as u16)
    }

    pub fn cot_index(self) -> Option<usize> {
        (self.0 >= Self::COT_BASE).then(|| (self.0 - Self::COT_BASE) as usize)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn is_done(self) -> bool {
        self == Token::DONE
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::DONE => f.write_str("DONE"),
            Token::PLUS => f.write_str("+"),
            Token::MINUS => f.write_str("-"),
            Token::STAND => f.write_str("stand"),
            Token::HIT => f.write_str("hit"),
            t => match (t.option_slot(), t.cot_index()) {
                (Some(s), _) => write!(f, "opt{s}"),
                (_, Some(k)) => write!(f, "cot{k}"),
                _ => unreachable!(),
            },
        }
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tok = match s {
            "DONE" => Token::DONE,
            "+" => Token::PLUS,
            "-" => Token::MINUS,
            "stand" => Token::STAND,
            "hit" => Token::HIT,
            _ => {
                let parse = |rest: &str| rest.parse::<usize>().ok();
                if let Some(slot) = s.strip_prefix("opt").and_then(parse) {
                    if slot >= Token::OPTION_COUNT as usize {
                        return Err(Error::Data(format!("option token {s} out of range")));
                    }
                    Token::option(slot)
                } else if let Some(k) = s.strip_prefix("cot").and_then(parse) {
                    Token::cot(k)
                } else {
                    return Err(Error::Data(format!("unknown token {s:?}")));
                }
            }
        };
        Ok(tok)
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Action tokens shared by every environment plus `cot_size` auxiliary
/// chain-of-thought tokens. DONE is always id 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub cot_size: usize,
}

impl Vocabulary {
    pub fn new(cot_size: usize) -> Self {
        Vocabulary { cot_size }
    }

    pub fn len(&self) -> usize {
        Token::COT_BASE as usize + self.cot_size
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: Token) -> bool {
        t.id() < self.len()
    }

    pub fn cot_tokens(&self) -> impl Iterator<Item = Token> {
        (0..self.cot_size).map(Token::cot)
    }
}

/// Symbolic observation: the textual description stands in for the image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    NumberLine { current: i64, target: i64 },
    Blackjack { player_sum: u32, dealer_card: u32, usable_ace: bool },
    SequencePattern { shown: Vec<i64>, candidates: Vec<i64> },
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observation::NumberLine { current, target } => {
                write!(f, "current={current} target={target}")
            }
            Observation::Blackjack { player_sum, dealer_card, usable_ace } => {
                write!(f, "player={player_sum} dealer={dealer_card} usable_ace={usable_ace}")
            }
            Observation::SequencePattern { shown, candidates } => {
                write!(f, "shown={} candidates={}", list(shown), list(candidates))
            }
        }
    }
}

fn list(xs: &[i64]) -> String {
    let inner: Vec<String> = xs.iter().map(i64::to_string).collect();
    format!("[{}]", inner.join(","))
}

/// Goal descriptor `g`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Goal {
    NumberLine { target: i64 },
    Blackjack,
    SequencePattern,
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Goal::NumberLine { target } => write!(f, "NL target={target}"),
            Goal::Blackjack => f.write_str("BJ beat the dealer"),
            Goal::SequencePattern => f.write_str("SEQ predict the next number"),
        }
    }
}

/// Positive reward, safe to take the log of.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct ShapedReward(f64);

impl ShapedReward {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(ShapedReward(value))
        } else {
            Err(Error::Shaping(format!("reward {value} is not strictly positive")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn ln(self) -> f64 {
        self.0.ln()
    }
}

/// One decision: the state shown, the admissible set, the emitted CoT and
/// action, and the reward received for taking it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub observation: Observation,
    pub admissible: Vec<Token>,
    pub cot: Vec<Token>,
    pub action: Token,
    pub reward: f64,
}

impl StepRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.admissible.contains(&self.action) {
            return Err(Error::Data(format!(
                "action {} not in admissible set {:?}",
                self.action,
                self.admissible.iter().map(ToString::to_string).collect::<Vec<_>>()
            )));
        }
        if !(self.reward >= 0.0) {
            return Err(Error::Data(format!("negative step reward {}", self.reward)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub goal: Goal,
    pub steps: Vec<StepRecord>,
    pub terminated: bool,
    pub terminal_reward: f64,
}

impl Trajectory {
    pub fn new(goal: Goal) -> Self {
        Trajectory { goal, steps: Vec::new(), terminated: false, terminal_reward: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_action(&self) -> Option<Token> {
        self.steps.last().map(|s| s.action)
    }

    pub fn ended_with_done(&self) -> bool {
        self.last_action() == Some(Token::DONE)
    }

    /// Number of state-changing transitions: DONE is a termination signal,
    /// not a move.
    pub fn num_moves(&self) -> usize {
        self.len() - usize::from(self.ended_with_done())
    }

    pub fn actions(&self) -> impl Iterator<Item = Token> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    /// Canonical trajectory identity: the action sequence, CoT excluded.
    pub fn action_key(&self) -> String {
        let names: Vec<String> = self.actions().map(|a| a.to_string()).collect();
        names.join(" ")
    }

    /// Decision point before step `t`.
    pub fn view_at(&self, t: usize) -> Result<HistoryView<'_>> {
        let step = self.steps.get(t).ok_or(Error::Range { index: t, max: self.len().saturating_sub(1) })?;
        Ok(HistoryView {
            goal: &self.goal,
            past: &self.steps[..t],
            observation: &step.observation,
            admissible: &step.admissible,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.steps.iter().try_for_each(StepRecord::validate)?;
        if self.terminated && !(self.terminal_reward > 0.0) {
            return Err(Error::Data(format!(
                "terminated trajectory with reward {}",
                self.terminal_reward
            )));
        }
        Ok(())
    }
}

/// First `i` steps of `traj`. The prefix counts as terminated only when it
/// is the whole of a terminated trajectory.
pub fn trajectory_prefix(traj: &Trajectory, i: usize) -> Result<Trajectory> {
    if i > traj.len() {
        return Err(Error::Range { index: i, max: traj.len() });
    }
    let full = i == traj.len();
    Ok(Trajectory {
        goal: traj.goal.clone(),
        steps: traj.steps[..i].to_vec(),
        terminated: full && traj.terminated,
        terminal_reward: if full { traj.terminal_reward } else { 0.0 },
    })
}

/// Everything the policy may condition on at one decision point.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    pub goal: &'a Goal,
    pub past: &'a [StepRecord],
    pub observation: &'a Observation,
    pub admissible: &'a [Token],
}

/// Deterministic, injective text encoding of a decision point: goal, every
/// past state and action in order, the current state and the admissible set.
pub fn canonical_history_text(view: &HistoryView<'_>) -> String {
    let mut out = format!("Goal: {}\n", view.goal);
    for (t, step) in view.past.iter().enumerate() {
        out.push_str(&format!("State {t}: {}\nAction {t}: {}\n", step.observation, step.action));
    }
    out.push_str(&format!("State {}: {}\nAdmissible:", view.past.len(), view.observation));
    for a in view.admissible {
        out.push(' ');
        out.push_str(&a.to_string());
    }
    out
}

pub fn write_jsonl<W: Write>(mut w: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

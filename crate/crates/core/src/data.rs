//! Replay buffer, oracle trajectory generators and SFT datasets.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{valid_continuations, Env, EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::trajectory::{Goal, Observation, StepRecord, Token, Trajectory};

/// FIFO store of trajectories sampled uniformly with replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        traj.validate()?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(traj);
        Ok(())
    }

    pub fn sample<R: Rng>(&self, k: usize, rng: &mut R) -> Result<Vec<Trajectory>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..k).map(|_| self.items[rng.gen_range(0..self.items.len())].clone()).collect())
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        let v: Vec<Trajectory> = self.items.iter().cloned().collect();
        crate::trajectory::write_jsonl(w, &v)
    }

    pub fn read_jsonl<R: BufRead>(capacity: usize, r: R) -> Result<Self> {
        let mut b = ReplayBuffer::new(capacity)?;
        for t in crate::trajectory::read_jsonl(r)? {
            b.push(t)?;
        }
        Ok(b)
    }
}

/// Plays `actions` in `env`, recording every step.
pub fn replay_actions(mut env: Env, actions: &[Token]) -> Result<Trajectory> {
    let mut traj = Trajectory::new(env.goal().clone());
    for &a in actions {
        let observation = env.observation();
        let admissible = env.admissible();
        let s = env.step(a)?;
        traj.steps.push(StepRecord { observation, admissible, cot: vec![], action: a, reward: s.reward });
        if s.done {
            traj.terminated = true;
            traj.terminal_reward = s.reward;
        }
    }
    Ok(traj)
}

/// Walks straight to the target and stops there.
pub fn oracle_numberline(target: i64, start: i64, config: &EnvConfig) -> Result<Trajectory> {
    if config.kind != EnvKind::NumberLine {
        return Err(Error::Generation("oracle_numberline needs a NumberLine config".into()));
    }
    let cfg = EnvConfig { target: Some(target), start: Some(start), ..config.clone() };
    let gap = (target - start).unsigned_abs() as usize;
    let step = if target >= start { Token::PLUS } else { Token::MINUS };
    let mut actions = vec![step; gap];
    if cfg.done_enabled() {
        actions.push(Token::DONE);
    } else if gap == 0 {
        // the episode only ends on arrival, so step off and back
        actions = vec![Token::PLUS, Token::MINUS];
    }
    if actions.len() > cfg.horizon() {
        return Err(Error::Generation(format!(
            "target {target} is {gap} steps from {start}, beyond horizon {}",
            cfg.horizon()
        )));
    }
    let traj = replay_actions(Env::reset(&cfg, 0)?, &actions)?;
    if !traj.terminated || traj.terminal_reward != cfg.scaling {
        return Err(Error::Generation(format!("oracle walk {} did not end at the target", traj.action_key())));
    }
    Ok(traj)
}

/// The 17-rule: stand on a hand of 17 or more, otherwise hit.
pub fn oracle_blackjack(player_sum: u32) -> Token {
    if player_sum >= 17 {
        Token::STAND
    } else {
        Token::HIT
    }
}

/// Plays one Blackjack episode with the 17-rule. With DONE enabled the
/// decision to stop is emitted as DONE.
pub fn oracle_blackjack_rollout(config: &EnvConfig, episode_seed: u64) -> Result<Trajectory> {
    if config.kind != EnvKind::Blackjack {
        return Err(Error::Generation("oracle_blackjack_rollout needs a Blackjack config".into()));
    }
    let mut env = Env::reset(config, episode_seed)?;
    let mut traj = Trajectory::new(env.goal().clone());
    while !env.is_finished() {
        let observation = env.observation();
        let admissible = env.admissible();
        let Observation::Blackjack { player_sum, .. } = observation else {
            return Err(Error::Generation(format!("unexpected observation {observation}")));
        };
        let mut action = oracle_blackjack(player_sum);
        if !admissible.contains(&action) || (action == Token::STAND && admissible.contains(&Token::DONE)) {
            action = Token::DONE;
        }
        let s = env.step(action)?;
        traj.steps.push(StepRecord { observation, admissible, cot: vec![], action, reward: s.reward });
        if s.done {
            traj.terminated = true;
            traj.terminal_reward = s.reward;
        }
    }
    Ok(traj)
}

/// Picks one of the valid continuations uniformly.
pub fn oracle_sequence<R: Rng>(config: &EnvConfig, episode_seed: u64, rng: &mut R) -> Result<Trajectory> {
    let env = Env::reset(config, episode_seed)?;
    let Observation::SequencePattern { shown, candidates } = env.observation() else {
        return Err(Error::Generation("oracle_sequence needs a SequencePattern config".into()));
    };
    let valid: Vec<usize> =
        candidates.iter().enumerate().filter(|(_, c)| valid_continuations(&shown).contains(c)).map(|(k, _)| k).collect();
    if valid.is_empty() {
        return Err(Error::Generation(format!("no valid continuation among {candidates:?}")));
    }
    let slot = valid[rng.gen_range(0..valid.len())];
    replay_actions(env, &[Token::option(slot)])
}

/// One supervised decision: the history before it and its target tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub goal: Goal,
    pub past: Vec<StepRecord>,
    pub observation: Observation,
    pub admissible: Vec<Token>,
    pub cot: Vec<Token>,
    pub action: Token,
}

impl SftExample {
    /// The example as a trajectory whose last step is the target decision.
    pub fn to_trajectory(&self) -> Trajectory {
        let mut t = Trajectory::new(self.goal.clone());
        t.steps = self.past.clone();
        t.steps.push(StepRecord {
            observation: self.observation.clone(),
            admissible: self.admissible.clone(),
            cot: self.cot.clone(),
            action: self.action,
            reward: 0.0,
        });
        t
    }
}

/// Splits a trajectory into one example per step.
pub fn sft_examples(traj: &Trajectory) -> Vec<SftExample> {
    (0..traj.len())
        .map(|t| {
            let s = &traj.steps[t];
            SftExample {
                goal: traj.goal.clone(),
                past: traj.steps[..t].to_vec(),
                observation: s.observation.clone(),
                admissible: s.admissible.clone(),
                cot: s.cot.clone(),
                action: s.action,
            }
        })
        .collect()
}

/// Successful oracle trajectories for `n` episodes, each split into
/// per-step examples. Blackjack keeps drawing episodes until `n` wins.
pub fn build_sft_dataset<R: Rng>(config: &EnvConfig, n: usize, rng: &mut R) -> Result<Vec<SftExample>> {
    let mut out = Vec::new();
    let mut episodes = 0;
    let mut attempts = 0u64;
    while episodes < n {
        let seed: u64 = rng.gen();
        attempts += 1;
        if attempts > 100 * n as u64 + 100 {
            return Err(Error::Generation(format!("only {episodes} of {n} oracle episodes succeeded")));
        }
        let traj = match config.kind {
            EnvKind::NumberLine => {
                let env = Env::reset(config, seed)?;
                let Goal::NumberLine { target } = *env.goal() else { unreachable!("NumberLine goal") };
                let Observation::NumberLine { current, .. } = env.observation() else { unreachable!("NumberLine state") };
                match oracle_numberline(target, current, config) {
                    Ok(t) => t,
                    Err(Error::Generation(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            EnvKind::Blackjack => oracle_blackjack_rollout(config, seed)?,
            EnvKind::SequencePattern => oracle_sequence(config, seed, rng)?,
        };
        if !config.is_success(&traj) {
            continue;
        }
        out.extend(sft_examples(&traj));
        episodes += 1;
    }
    Ok(out)
}

pub fn write_examples<W: Write>(mut w: W, examples: &[SftExample]) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<SftExample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: SftExample =
            serde_json::from_str(&line).map_err(|err| Error::Data(format!("line {}: {err}", n + 1)))?;
        e.to_trajectory().validate().map_err(|err| Error::Data(format!("line {}: {err}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nl() -> EnvConfig {
        EnvConfig::number_line(0, 5, 10)
    }

    fn toy(id: i64) -> Trajectory {
        oracle_numberline(id, 0, &nl()).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(4).unwrap();
        for i in 0..5 {
            b.push(toy(i)).unwrap();
        }
        assert_eq!(b.len(), 4);
        let goals: Vec<Goal> = b.iter().map(|t| t.goal.clone()).collect();
        assert_eq!(goals, (1..5).map(|target| Goal::NumberLine { target }).collect::<Vec<_>>());
    }

    #[test]
    fn empty_buffer_sampling_fails() {
        let b = ReplayBuffer::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(2, &mut rng), Err(Error::EmptyBuffer)));
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let mut b = ReplayBuffer::new(4).unwrap();
        for i in 0..4 {
            b.push(toy(i)).unwrap();
        }
        let a = b.sample(10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = b.sample(10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(4).unwrap();
        for i in 0..4 {
            b.push(toy(i)).unwrap();
        }
        let n = 40_000;
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in b.sample(n, &mut rng).unwrap() {
            let Goal::NumberLine { target } = t.goal else { panic!() };
            counts[target as usize] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn buffer_jsonl_round_trip() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..3 {
            b.push(toy(i)).unwrap();
        }
        let mut bytes = Vec::new();
        b.write_jsonl(&mut bytes).unwrap();
        let back = ReplayBuffer::read_jsonl(3, bytes.as_slice()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn numberline_oracle_examples() {
        let t = oracle_numberline(3, 1, &nl()).unwrap();
        assert_eq!(t.action_key(), "+ + DONE");
        assert_eq!(t.terminal_reward, 100.0);
        let t = oracle_numberline(3, 3, &nl()).unwrap();
        assert_eq!(t.action_key(), "DONE");
        let t = oracle_numberline(0, 5, &nl()).unwrap();
        assert_eq!(t.action_key(), "- - - - - DONE");
        assert!(matches!(
            oracle_numberline(5, 0, &EnvConfig::number_line(0, 5, 3)),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn numberline_oracle_without_done() {
        let cfg = EnvConfig { include_done: Some(false), ..nl() };
        let t = oracle_numberline(3, 1, &cfg).unwrap();
        assert_eq!(t.action_key(), "+ +");
        assert_eq!(t.terminal_reward, 100.0);
        let t = oracle_numberline(2, 2, &cfg).unwrap();
        assert_eq!(t.terminal_reward, 100.0);
    }

    #[test]
    fn oracle_always_reaches_max_reward() {
        for c in 0..=5 {
            for y in 0..=5 {
                assert_eq!(oracle_numberline(c, y, &nl()).unwrap().terminal_reward, 100.0);
            }
        }
    }

    #[test]
    fn seventeen_rule() {
        assert_eq!(oracle_blackjack(16), Token::HIT);
        assert_eq!(oracle_blackjack(17), Token::STAND);
        assert_eq!(oracle_blackjack(21), Token::STAND);
    }

    #[test]
    fn sft_examples_for_short_walk() {
        let t = oracle_numberline(3, 2, &nl()).unwrap();
        let ex = sft_examples(&t);
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].action, Token::PLUS);
        assert!(ex[0].past.is_empty());
        assert_eq!(ex[1].action, Token::DONE);
        assert_eq!(ex[1].past.len(), 1);
    }

    #[test]
    fn one_done_label_per_numberline_episode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = build_sft_dataset(&nl(), 100, &mut rng).unwrap();
        assert_eq!(ds.iter().filter(|e| e.action == Token::DONE).count(), 100);
        assert!(ds.iter().all(|e| e.admissible.contains(&e.action)));
    }

    #[test]
    fn blackjack_dataset_follows_the_rule() {
        for done in [true, false] {
            let cfg = EnvConfig { include_done: Some(done), ..EnvConfig::new(EnvKind::Blackjack) };
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let ds = build_sft_dataset(&cfg, 50, &mut rng).unwrap();
            assert!(!ds.is_empty());
            for e in &ds {
                let Observation::Blackjack { player_sum, .. } = e.observation else { panic!() };
                let rule = oracle_blackjack(player_sum);
                let taken = if e.action == Token::DONE { Token::STAND } else { e.action };
                assert_eq!(taken, rule, "{player_sum}");
                assert!(e.admissible.contains(&e.action));
            }
        }
    }

    #[test]
    fn sequence_dataset_uses_valid_continuations() {
        let cfg = EnvConfig::new(EnvKind::SequencePattern);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = build_sft_dataset(&cfg, 30, &mut rng).unwrap();
        assert_eq!(ds.len(), 30);
        for e in &ds {
            let Observation::SequencePattern { shown, candidates } = &e.observation else { panic!() };
            let v = candidates[e.action.option_slot().unwrap()];
            assert!(valid_continuations(shown).contains(&v));
        }
    }

    #[test]
    fn dataset_is_deterministic_and_round_trips() {
        let a = build_sft_dataset(&nl(), 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = build_sft_dataset(&nl(), 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let mut bytes = Vec::new();
        write_examples(&mut bytes, &a).unwrap();
        assert_eq!(read_examples(bytes.as_slice()).unwrap(), a);
    }
}

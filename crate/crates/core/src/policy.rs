//! Non-Markovian autoregressive policy.
//!
//! The history (goal, then per step the observation and the action taken)
//! is fed item by item through a tanh recurrent cell. At each decision the
//! current admissible set is fed on a branch of that state, `cot_length`
//! auxiliary tokens are decoded autoregressively, and one action is drawn
//! from the temperature-scaled softmax restricted to the admissible set.
//!
//! The forward log-probability of a step is
//! `log P_action + lambda * log P_cot`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::trajectory::{Goal, HistoryView, Observation, StepRecord, Token, Trajectory, Vocabulary};

/// Log-probability reported for DONE where it is not admissible.
pub const LOG_FLOOR: f64 = -69.07755278982137; // ln(1e-30)

const VALUE_SCALE: f64 = 0.1;
const MAX_SHOWN: usize = 6;

fn default_embed() -> usize {
    8
}
fn default_hidden() -> usize {
    16
}
fn default_cot_size() -> usize {
    4
}
fn default_lambda() -> f64 {
    0.4
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// Width of the output MLP layer.
    #[serde(default = "default_hidden")]
    pub head_dim: usize,
    /// Size of the auxiliary CoT vocabulary.
    #[serde(default = "default_cot_size")]
    pub cot_size: usize,
    #[serde(default)]
    pub cot_length: usize,
    /// Weight of the CoT log-probability in the forward log-probability.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Condition on the goal and current observation only.
    #[serde(default)]
    pub markovian: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            head_dim: default_hidden(),
            cot_size: default_cot_size(),
            cot_length: 0,
            lambda: default_lambda(),
            temperature: default_temperature(),
            markovian: false,
        }
    }
}

impl PolicyConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.cot_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("policy.lambda = {} outside [0, 1]", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("policy.temperature = {} must be > 0", self.temperature)));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        if self.cot_length > 0 && self.cot_size == 0 {
            return Err(Error::Config("policy.cot_length > 0 needs policy.cot_size > 0".into()));
        }
        Ok(())
    }
}

// Input item kinds; token rows follow.
const KIND_GOAL_NL: usize = 0;
const KIND_GOAL_BJ: usize = 1;
const KIND_GOAL_SEQ: usize = 2;
const KIND_OBS_NL: usize = 3;
const KIND_OBS_BJ: usize = 4;
const KIND_OBS_SEQ: usize = 5;
const KIND_ADMISSIBLE: usize = 6;
const NUM_KINDS: usize = 7;

// Numeric fields.
const FIELD_NL_CURRENT: usize = 0;
const FIELD_NL_TARGET: usize = 1;
const FIELD_BJ_PLAYER: usize = 2;
const FIELD_BJ_DEALER: usize = 3;
const FIELD_BJ_ACE: usize = 4;
const FIELD_SEQ_SHOWN: usize = 5;
const FIELD_SEQ_CANDIDATE: usize = FIELD_SEQ_SHOWN + MAX_SHOWN;
const NUM_FIELDS: usize = FIELD_SEQ_CANDIDATE + Token::OPTION_COUNT as usize;

/// Trainable weights. Shapes are fixed by the [`PolicyConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub symbol_embed: Tensor,
    pub field_embed: Tensor,
    pub w_in: Tensor,
    pub w_rec: Tensor,
    pub b_rec: Tensor,
    pub w_head: Tensor,
    pub b_head: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

pub const PARAM_NAMES: [&str; 9] =
    ["symbol_embed", "field_embed", "w_in", "w_rec", "b_rec", "w_head", "b_head", "w_out", "b_out"];

impl PolicyParameters {
    pub fn shapes(config: &PolicyConfig) -> [(usize, usize); 9] {
        let v = config.vocabulary().len();
        let (e, h, m) = (config.embed_dim, config.hidden_dim, config.head_dim);
        [(NUM_KINDS + 2 * v, e), (NUM_FIELDS, e), (h, e), (h, h), (h, 1), (m, h), (m, 1), (v, m), (v, 1)]
    }

    /// Uniform fan-in initialisation; the output layer starts small so the
    /// initial policy is close to uniform.
    pub fn init(config: &PolicyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::shapes(config);
        let mut tensors = shapes.iter().enumerate().map(|(k, &(r, c))| {
            let bound = match PARAM_NAMES[k] {
                "symbol_embed" | "field_embed" => 1.0,
                "b_rec" | "b_head" | "b_out" => 0.0,
                "w_out" => 0.1 / (c as f64).sqrt(),
                _ => 1.0 / (c as f64).sqrt(),
            };
            let data = (0..r * c)
                .map(|_| if bound == 0.0 { 0.0 } else { rng.gen_range(-bound..bound) })
                .collect();
            Tensor::new(r, c, data).expect("shape")
        });
        let mut next = || tensors.next().expect("nine tensors");
        PolicyParameters {
            symbol_embed: next(),
            field_embed: next(),
            w_in: next(),
            w_rec: next(),
            b_rec: next(),
            w_head: next(),
            b_head: next(),
            w_out: next(),
            b_out: next(),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.symbol_embed,
            &self.field_embed,
            &self.w_in,
            &self.w_rec,
            &self.b_rec,
            &self.w_head,
            &self.b_head,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.symbol_embed,
            &mut self.field_embed,
            &mut self.w_in,
            &mut self.w_rec,
            &mut self.b_rec,
            &mut self.w_head,
            &mut self.b_head,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Zeros with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn check_shapes(&self, config: &PolicyConfig) -> Result<()> {
        for ((name, t), (r, c)) in PARAM_NAMES.iter().zip(self.tensors()).zip(Self::shapes(config)) {
            if t.shape() != (r, c) {
                return Err(Error::Shape {
                    op: "checkpoint",
                    detail: format!("{name} is {}x{}, config expects {r}x{c}", t.rows(), t.cols()),
                });
            }
        }
        Ok(())
    }

    /// Writes `<stem>.bin` (little-endian f64, tensors in order) and
    /// `<stem>.json` (shape manifest).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        let mut bytes = Vec::with_capacity(self.num_parameters() * 8);
        let mut offset = 0;
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            entries.push(ManifestEntry { name: name.to_string(), shape: [t.rows(), t.cols()], offset });
            offset += t.len();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { dtype: "f64-le".into(), tensors: entries };
        let mut f = std::fs::File::create(dir.join(format!("{stem}.bin")))?;
        f.write_all(&bytes)?;
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if manifest.dtype != "f64-le" {
            return Err(Error::Data(format!("unsupported dtype {}", manifest.dtype)));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Data("tensor dump length is not a multiple of 8".into()));
        }
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if manifest.tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Data(format!("manifest lists {} tensors", manifest.tensors.len())));
        }
        let mut out = Vec::new();
        for (entry, name) in manifest.tensors.iter().zip(PARAM_NAMES) {
            if entry.name != name {
                return Err(Error::Data(format!("expected tensor {name}, found {}", entry.name)));
            }
            let [r, c] = entry.shape;
            let end = entry.offset + r * c;
            let slice = values
                .get(entry.offset..end)
                .ok_or_else(|| Error::Data(format!("tensor {name} runs past the end of the dump")))?;
            out.push(Tensor::new(r, c, slice.to_vec())?);
        }
        let mut it = out.into_iter();
        let mut next = || it.next().expect("nine tensors");
        Ok(PolicyParameters {
            symbol_embed: next(),
            field_embed: next(),
            w_in: next(),
            w_rec: next(),
            b_rec: next(),
            w_head: next(),
            b_head: next(),
            w_out: next(),
            b_out: next(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

/// One input item of the recurrent encoder.
#[derive(Debug, Clone, PartialEq)]
struct Item {
    symbols: Vec<usize>,
    fields: Vec<(usize, f64)>,
}

fn goal_item(goal: &Goal) -> Item {
    match goal {
        Goal::NumberLine { target } => {
            Item { symbols: vec![KIND_GOAL_NL], fields: vec![(FIELD_NL_TARGET, *target as f64)] }
        }
        Goal::Blackjack => Item { symbols: vec![KIND_GOAL_BJ], fields: vec![] },
        Goal::SequencePattern => Item { symbols: vec![KIND_GOAL_SEQ], fields: vec![] },
    }
}

fn observation_item(obs: &Observation) -> Item {
    match obs {
        Observation::NumberLine { current, target } => Item {
            symbols: vec![KIND_OBS_NL],
            fields: vec![(FIELD_NL_CURRENT, *current as f64), (FIELD_NL_TARGET, *target as f64)],
        },
        Observation::Blackjack { player_sum, dealer_card, usable_ace } => Item {
            symbols: vec![KIND_OBS_BJ],
            fields: vec![
                (FIELD_BJ_PLAYER, f64::from(*player_sum)),
                (FIELD_BJ_DEALER, f64::from(*dealer_card)),
                (FIELD_BJ_ACE, f64::from(u8::from(*usable_ace))),
            ],
        },
        Observation::SequencePattern { shown, candidates } => {
            let skip = shown.len().saturating_sub(MAX_SHOWN);
            let mut fields: Vec<(usize, f64)> =
                shown[skip..].iter().enumerate().map(|(i, v)| (FIELD_SEQ_SHOWN + i, *v as f64)).collect();
            fields.extend(candidates.iter().enumerate().map(|(k, v)| (FIELD_SEQ_CANDIDATE + k, *v as f64)));
            Item { symbols: vec![KIND_OBS_SEQ], fields }
        }
    }
}

/// Recorded chain-of-thought and action for teacher forcing.
#[derive(Debug, Clone, Copy)]
pub struct Forced<'a> {
    pub cot: &'a [Token],
    pub action: Token,
}

/// Per-step result of [`PolicyGraph::step_policy`] or of re-scoring.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub cot: Vec<Token>,
    pub action: Token,
    pub log_p_cot: Var,
    pub log_p_action: Var,
    pub log_p_forward: Var,
    /// Log-probabilities over the admissible set, in admissible order.
    pub action_log_probs: Var,
    /// `log P(DONE)` under the same action distribution, if admissible.
    pub log_p_done: Option<Var>,
}

/// How the termination probability at a prefix was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationSource {
    /// DONE was admissible and the policy's mass on it is used.
    Modeled,
    /// The environment ended the episode; termination is certain.
    Forced,
    /// DONE was not admissible; the value is the [`LOG_FLOOR`] constant.
    Unavailable,
}

#[derive(Debug, Clone, Copy)]
pub struct TerminalLogProb {
    pub value: Var,
    pub source: TerminationSource,
}

/// Scored trajectory: one forward log-probability per step and the
/// termination log-probability at each prefix of `0..=num_moves` moves.
#[derive(Debug, Clone)]
pub struct TrajectoryScore {
    pub steps: Vec<PolicyOutput>,
    pub terminal: Vec<TerminalLogProb>,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: PolicyParameters,
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = PolicyParameters::init(&config, seed);
        Ok(Policy { config, params })
    }

    pub fn with_params(config: PolicyConfig, params: PolicyParameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Policy { config, params })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.config.vocabulary()
    }

    pub fn graph(&self) -> PolicyGraph<'_> {
        PolicyGraph::new(self)
    }

    /// Samples one episode from `env`.
    pub fn rollout<R: Rng>(&self, mut env: Env, rng: &mut R) -> Result<Trajectory> {
        let mut g = self.graph();
        let mut traj = Trajectory::new(env.goal().clone());
        let mut h = g.encode_start(env.goal(), &env.observation())?;
        let horizon = env.config().horizon();
        while !env.is_finished() {
            if traj.len() >= horizon {
                return Err(Error::Contract(format!("episode exceeded horizon {horizon}")));
            }
            let observation = env.observation();
            let admissible = env.admissible();
            let ctx = if self.config.markovian { g.encode_start(env.goal(), &observation)? } else { h };
            let out = g.step_policy(ctx, &admissible, rng)?;
            let step = env.step(out.action)?;
            traj.steps.push(StepRecord {
                observation,
                admissible,
                cot: out.cot.clone(),
                action: out.action,
                reward: step.reward,
            });
            if step.done {
                traj.terminated = true;
                traj.terminal_reward = step.reward;
            } else if !self.config.markovian {
                h = g.advance(h, out.action, &step.observation)?;
            }
        }
        Ok(traj)
    }

    /// Replaces the CoT of every step whose segment does not have
    /// `cot_length` tokens with one sampled from the policy, keeping the
    /// recorded actions.
    pub fn fill_cot<R: Rng>(&self, traj: &mut Trajectory, rng: &mut R) -> Result<()> {
        let n = self.config.cot_length;
        if traj.steps.iter().all(|s| s.cot.len() == n) {
            return Ok(());
        }
        let mut g = self.graph();
        let mut h: Option<Var> = None;
        for t in 0..traj.len() {
            let hist = match (self.config.markovian, h) {
                (true, _) | (false, None) => g.encode_start(&traj.goal, &traj.steps[t].observation)?,
                (false, Some(prev)) => g.advance(prev, traj.steps[t - 1].action, &traj.steps[t].observation)?,
            };
            h = Some(hist);
            let step = &traj.steps[t];
            if step.cot.len() != n {
                let out = g.step_with_action(hist, &step.admissible, step.action, rng)?;
                traj.steps[t].cot = out.cot;
            }
        }
        Ok(())
    }

    /// Summed action log-probabilities of `traj` (CoT excluded). With
    /// `cot_length == 0` this is the log-probability of its action
    /// sequence.
    pub fn trajectory_log_prob(&self, traj: &Trajectory) -> Result<f64> {
        let mut g = self.graph();
        let score = g.score(traj)?;
        Ok(score.steps.iter().map(|s| g.tape.scalar_value(s.log_p_action)).sum())
    }
}

/// Parameter leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    vars: [Var; 9],
}

impl ParamVars {
    pub fn all(&self) -> [Var; 9] {
        self.vars
    }
}

/// A tape with the policy's parameters attached, plus the policy forward
/// pieces that build on it.
pub struct PolicyGraph<'p> {
    pub tape: Tape,
    pub vars: ParamVars,
    policy: &'p Policy,
}

impl<'p> PolicyGraph<'p> {
    pub fn new(policy: &'p Policy) -> Self {
        let mut tape = Tape::new();
        let vars = policy.params.tensors().map(|t| tape.leaf(t.clone()));
        PolicyGraph { tape, vars: ParamVars { vars }, policy }
    }

    fn v(&self, k: usize) -> Var {
        self.vars.vars[k]
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.policy.config
    }

    /// Parameter gradients of a scalar, in [`PARAM_NAMES`] order.
    pub fn param_gradients(&self, loss: Var) -> Result<PolicyParameters> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        let mut out = self.policy.params.zeros_like();
        for (slot, var) in out.tensors_mut().into_iter().zip(self.vars.vars) {
            if let Some(g) = grads.take(var) {
                *slot = g;
            }
        }
        Ok(out)
    }

    fn item_input(&mut self, item: &Item) -> Result<Var> {
        let mut x: Option<Var> = None;
        for &s in &item.symbols {
            let r = self.tape.row(self.v(0), s)?;
            x = Some(match x {
                Some(acc) => self.tape.add(acc, r)?,
                None => r,
            });
        }
        for &(field, value) in &item.fields {
            let r = self.tape.row(self.v(1), field)?;
            let scaled = self.tape.scale(r, value * VALUE_SCALE);
            x = Some(match x {
                Some(acc) => self.tape.add(acc, scaled)?,
                None => scaled,
            });
        }
        x.ok_or_else(|| Error::Contract("empty encoder item".into()))
    }

    fn cell(&mut self, h: Option<Var>, item: &Item) -> Result<Var> {
        let x = self.item_input(item)?;
        let wx = self.tape.matmul(self.v(2), x)?;
        let pre = match h {
            Some(h) => {
                let wh = self.tape.matmul(self.v(3), h)?;
                self.tape.add(wx, wh)?
            }
            None => wx,
        };
        let pre = self.tape.add(pre, self.v(4))?;
        Ok(self.tape.tanh(pre))
    }

    fn token_symbol(&self, t: Token) -> usize {
        NUM_KINDS + t.id()
    }

    fn admissible_symbol(&self, t: Token) -> usize {
        NUM_KINDS + self.policy.vocabulary().len() + t.id()
    }

    /// History state after the goal and the first observation.
    pub fn encode_start(&mut self, goal: &Goal, observation: &Observation) -> Result<Var> {
        let h = self.cell(None, &goal_item(goal))?;
        self.cell(Some(h), &observation_item(observation))
    }

    /// Extends a history state with the action taken and the next
    /// observation.
    pub fn advance(&mut self, h: Var, action: Token, next: &Observation) -> Result<Var> {
        let item = Item { symbols: vec![self.token_symbol(action)], fields: vec![] };
        let h = self.cell(Some(h), &item)?;
        self.cell(Some(h), &observation_item(next))
    }

    /// History state for a decision point. In Markovian mode only the goal
    /// and the current observation are read.
    pub fn encode_history(&mut self, view: &HistoryView<'_>) -> Result<Var> {
        if self.config().markovian {
            return self.encode_start(view.goal, view.observation);
        }
        let first = view.past.first().map_or(view.observation, |s| &s.observation);
        let mut h = self.encode_start(view.goal, first)?;
        for (t, step) in view.past.iter().enumerate() {
            let next = view.past.get(t + 1).map_or(view.observation, |s| &s.observation);
            h = self.advance(h, step.action, next)?;
        }
        Ok(h)
    }

    fn logits(&mut self, h: Var) -> Result<Var> {
        let m = self.tape.matmul(self.v(5), h)?;
        let m = self.tape.add(m, self.v(6))?;
        let m = self.tape.tanh(m);
        let o = self.tape.matmul(self.v(7), m)?;
        self.tape.add(o, self.v(8))
    }

    fn masked_log_probs(&mut self, h: Var, ids: &[usize]) -> Result<Var> {
        let logits = self.logits(h)?;
        let sub = self.tape.select(logits, ids)?;
        let scaled = self.tape.scale(sub, 1.0 / self.config().temperature);
        self.tape.log_softmax(scaled)
    }

    fn decide(
        &mut self,
        h: Var,
        admissible: &[Token],
        forced_cot: Option<&[Token]>,
        forced_action: Option<Token>,
        mut sample: impl FnMut(&[f64]) -> usize,
    ) -> Result<PolicyOutput> {
        if admissible.is_empty() {
            return Err(Error::Contract("empty admissible set".into()));
        }
        let vocab = self.policy.vocabulary();
        if let Some(&bad) = admissible.iter().find(|t| !vocab.contains(**t)) {
            return Err(Error::Data(format!("token {bad} outside the vocabulary")));
        }
        let cot_length = self.config().cot_length;
        if let Some(a) = forced_action {
            if !admissible.contains(&a) {
                return Err(Error::Data(format!("recorded action {a} not in its admissible set")));
            }
        }
        if let Some(c) = forced_cot {
            if c.len() != cot_length {
                return Err(Error::Data(format!("recorded CoT has {} tokens, policy expects {cot_length}", c.len())));
            }
        }
        let adm_item = Item {
            symbols: std::iter::once(KIND_ADMISSIBLE).chain(admissible.iter().map(|&t| self.admissible_symbol(t))).collect(),
            fields: vec![],
        };
        let mut h = self.cell(Some(h), &adm_item)?;

        let cot_ids: Vec<usize> = vocab.cot_tokens().map(Token::id).collect();
        let mut cot = Vec::with_capacity(cot_length);
        let mut cot_terms = Vec::with_capacity(cot_length);
        for j in 0..cot_length {
            let lp = self.masked_log_probs(h, &cot_ids)?;
            let k = match forced_cot {
                Some(c) => c[j]
                    .cot_index()
                    .filter(|&k| k < vocab.cot_size)
                    .ok_or_else(|| Error::Data(format!("{} is not a CoT token", c[j])))?,
                None => sample(self.tape.value(lp).data()),
            };
            cot_terms.push(self.tape.gather(lp, k)?);
            let tok = Token::cot(k);
            cot.push(tok);
            let item = Item { symbols: vec![self.token_symbol(tok)], fields: vec![] };
            h = self.cell(Some(h), &item)?;
        }
        let log_p_cot = if cot_terms.is_empty() { self.tape.constant(0.0) } else { self.tape.add_all(&cot_terms)? };

        let ids: Vec<usize> = admissible.iter().map(|t| t.id()).collect();
        let action_log_probs = self.masked_log_probs(h, &ids)?;
        let pos = match forced_action {
            Some(f) => admissible.iter().position(|&a| a == f).expect("checked above"),
            None => sample(self.tape.value(action_log_probs).data()),
        };
        let log_p_action = self.tape.gather(action_log_probs, pos)?;
        let weighted = self.tape.scale(log_p_cot, self.config().lambda);
        let log_p_forward = self.tape.add(log_p_action, weighted)?;
        let log_p_done = match admissible.iter().position(|t| t.is_done()) {
            Some(d) => Some(self.tape.gather(action_log_probs, d)?),
            None => None,
        };
        Ok(PolicyOutput {
            cot,
            action: admissible[pos],
            log_p_cot,
            log_p_action,
            log_p_forward,
            action_log_probs,
            log_p_done,
        })
    }

    /// Samples `cot_length` CoT tokens and then one admissible action.
    pub fn step_policy<R: Rng>(&mut self, h: Var, admissible: &[Token], rng: &mut R) -> Result<PolicyOutput> {
        self.decide(h, admissible, None, None, |log_probs| sample_index(log_probs, rng))
    }

    /// Samples the CoT segment but takes `action`, for trajectories whose
    /// actions come from elsewhere.
    pub fn step_with_action<R: Rng>(
        &mut self,
        h: Var,
        admissible: &[Token],
        action: Token,
        rng: &mut R,
    ) -> Result<PolicyOutput> {
        self.decide(h, admissible, None, Some(action), |log_probs| sample_index(log_probs, rng))
    }

    /// Re-scores a recorded decision under the current parameters.
    pub fn score_step(&mut self, h: Var, admissible: &[Token], forced: Forced<'_>) -> Result<PolicyOutput> {
        self.decide(h, admissible, Some(forced.cot), Some(forced.action), |_| {
            unreachable!("forced decisions never sample")
        })
    }

    /// Teacher-forced scoring of every step of `traj`, sharing the
    /// recurrent pass across steps.
    pub fn score(&mut self, traj: &Trajectory) -> Result<TrajectoryScore> {
        let mut steps = Vec::with_capacity(traj.len());
        let mut h: Option<Var> = None;
        for (t, step) in traj.steps.iter().enumerate() {
            let hist = match (self.config().markovian, h) {
                (true, _) | (false, None) => self.encode_start(&traj.goal, &step.observation)?,
                (false, Some(prev)) => self.advance(prev, traj.steps[t - 1].action, &step.observation)?,
            };
            h = Some(hist);
            let out = self.score_step(hist, &step.admissible, Forced { cot: &step.cot, action: step.action })?;
            steps.push(out);
        }
        let moves = traj.num_moves();
        let mut terminal = Vec::with_capacity(moves + 1);
        for i in 0..=moves {
            terminal.push(self.terminal_from(traj, &steps, i)?);
        }
        Ok(TrajectoryScore { steps, terminal })
    }

    fn terminal_from(&mut self, traj: &Trajectory, steps: &[PolicyOutput], i: usize) -> Result<TerminalLogProb> {
        if let Some(out) = steps.get(i) {
            return Ok(match out.log_p_done {
                Some(v) => TerminalLogProb { value: v, source: TerminationSource::Modeled },
                None => TerminalLogProb { value: self.tape.constant(LOG_FLOOR), source: TerminationSource::Unavailable },
            });
        }
        if i == traj.len() && traj.terminated {
            return Ok(TerminalLogProb { value: self.tape.constant(0.0), source: TerminationSource::Forced });
        }
        Err(Error::Range { index: i, max: traj.len().saturating_sub(1) })
    }

    /// `log P_F(z_{t+1} | z_{0:t}, g)` of recorded step `t`.
    pub fn log_p_forward_of(&mut self, traj: &Trajectory, t: usize) -> Result<Var> {
        let view = traj.view_at(t)?;
        let h = self.encode_history(&view)?;
        let step = &traj.steps[t];
        Ok(self.score_step(h, &step.admissible, Forced { cot: &step.cot, action: step.action })?.log_p_forward)
    }

    /// `log P_F(DONE | z_{0:i}, g)` at the prefix with `i` moves.
    pub fn terminal_prob(&mut self, traj: &Trajectory, i: usize) -> Result<TerminalLogProb> {
        if i > traj.num_moves() {
            return Err(Error::Range { index: i, max: traj.num_moves() });
        }
        if i < traj.len() {
            let view = traj.view_at(i)?;
            let h = self.encode_history(&view)?;
            let step = &traj.steps[i];
            let out = self.score_step(h, &step.admissible, Forced { cot: &step.cot, action: step.action })?;
            return self.terminal_from(traj, std::slice::from_ref(&out), 0);
        }
        self.terminal_from(traj, &[], i)
    }
}

/// Inverse-CDF draw from log-probabilities.
pub fn sample_index<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

//! Deterministic multi-turn text environments.
//!
//! Three families are provided:
//!
//! * `oneshot`: a single decision among `k` options with an explicit reward
//!   table. Small enough to enumerate every trajectory.
//! * `minishop`: a shopping task over a shared catalog. The instruction asks
//!   for an item with a set of attributes under a budget; the reward on
//!   purchase is `(matched_required + budget_ok) / (required + 1)`.
//! * `chainlab`: rooms connected in a graph with `m` prerequisite-ordered
//!   subgoals (`take`, `use`, `focus`); the reward is the completed fraction.
//!
//! All randomness lives in instance generation. Transitions are pure
//! functions of state and action.

mod chainlab;
mod minishop;
mod oneshot;

pub use chainlab::{ChainObject, ChainTask, LabState, Subgoal};
pub use minishop::{Item, ShopState};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, Fnv, SeedTree};

pub const ENV_FORMAT: &str = "coevo-env-v1";

/// Observation returned for actions that are well-formed but have no effect.
pub const NOTHING_HAPPENS: &str = "Nothing happens.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Search,
    Click,
    Buy,
    Goto,
    Take,
    Use,
    Focus,
    Choose,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Search => "search",
            Verb::Click => "click",
            Verb::Buy => "buy",
            Verb::Goto => "goto",
            Verb::Take => "take",
            Verb::Use => "use",
            Verb::Focus => "focus",
            Verb::Choose => "choose",
        }
    }
}

impl FromStr for Verb {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "search" => Verb::Search,
            "click" => Verb::Click,
            "buy" => Verb::Buy,
            "goto" => Verb::Goto,
            "take" => Verb::Take,
            "use" => Verb::Use,
            "focus" => Verb::Focus,
            "choose" => Verb::Choose,
            other => return Err(Error::Data(format!("unknown verb `{other}`"))),
        })
    }
}

/// An agent action, rendered as `verb[arg]` (or bare `verb` when the
/// argument is empty).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub verb: Verb,
    pub arg: String,
}

impl Action {
    pub fn new(verb: Verb, arg: impl Into<String>) -> Self {
        Action {
            verb,
            arg: arg.into(),
        }
    }

    pub fn bare(verb: Verb) -> Self {
        Action::new(verb, "")
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.arg.is_empty() {
            f.write_str(self.verb.as_str())
        } else {
            write!(f, "{}[{}]", self.verb.as_str(), self.arg)
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.find('[') {
            None => Ok(Action::bare(s.parse()?)),
            Some(open) => {
                let rest = s[open + 1..]
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Data(format!("unterminated action `{s}`")))?;
                Ok(Action::new(s[..open].parse()?, rest))
            }
        }
    }
}

impl PartialOrd for Action {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Lexicographic by serialized form.
impl Ord for Action {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_string().cmp(&other.to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub String);

impl Observation {
    pub fn new(text: impl Into<String>) -> Self {
        Observation(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentTag {
    Expert,
    Target,
    Failure,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub action: Action,
    pub observation: Observation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instruction_id: String,
    #[serde(rename = "agent_tag")]
    pub agent: AgentTag,
    pub steps: Vec<Step>,
    pub reward: f64,
}

impl Trajectory {
    /// Number of actions.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }

    /// FNV-1a over the canonical JSON form (`instruction_id`, `agent_tag`,
    /// `steps`, `reward`, in that key order).
    pub fn content_hash(&self) -> u64 {
        fnv1a64(
            serde_json::to_string(self)
                .expect("trajectory serializes")
                .as_bytes(),
        )
    }

    /// Hash of instruction, steps and reward only.
    pub fn behavior_hash(&self) -> u64 {
        let mut h = Fnv::new().field(&self.instruction_id);
        for s in &self.steps {
            h = h.field(&s.action.to_string()).field(s.observation.as_str());
        }
        h.field(&self.reward.to_string()).finish()
    }

    /// Same instruction, steps and reward, irrespective of which agent
    /// produced it.
    pub fn same_behavior(&self, other: &Trajectory) -> bool {
        self.instruction_id == other.instruction_id
            && self.steps == other.steps
            && self.reward == other.reward
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Oneshot,
    Minishop,
    Chainlab,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Oneshot => "oneshot",
            EnvKind::Minishop => "minishop",
            EnvKind::Chainlab => "chainlab",
        }
    }
}

/// Generative description of an environment family. Parameters that do
/// not apply to `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub seed: u64,
    /// oneshot: number of options.
    pub k_actions: usize,
    /// oneshot: distractors get rewards from `{1/k, .., (k-1)/k}` instead of 0.
    pub graded: bool,
    /// minishop: catalog size.
    pub catalog_size: usize,
    /// minishop: number of distinct attributes.
    pub attr_pool: usize,
    /// minishop: attributes per catalog item.
    pub item_attrs: usize,
    /// minishop: required attributes per instruction.
    pub req_attrs: usize,
    /// minishop: results shown per search.
    pub results_k: usize,
    /// chainlab: rooms per task.
    pub rooms: usize,
    /// chainlab: objects per task.
    pub objects: usize,
    /// chainlab: subgoal count `m`.
    pub subgoals: usize,
    /// Defaults: oneshot 1, minishop 8, chainlab 20.
    pub max_turns: Option<usize>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            kind: EnvKind::Minishop,
            seed: 0,
            k_actions: 4,
            graded: false,
            catalog_size: 90,
            attr_pool: 24,
            item_attrs: 4,
            req_attrs: 3,
            results_k: 5,
            rooms: 4,
            objects: 6,
            subgoals: 4,
            max_turns: None,
        }
    }
}

impl EnvSpec {
    pub fn oneshot(k_actions: usize) -> Self {
        EnvSpec {
            kind: EnvKind::Oneshot,
            k_actions,
            ..Default::default()
        }
    }

    pub fn minishop() -> Self {
        EnvSpec::default()
    }

    pub fn chainlab() -> Self {
        EnvSpec {
            kind: EnvKind::Chainlab,
            ..Default::default()
        }
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns.unwrap_or(match self.kind {
            EnvKind::Oneshot => 1,
            EnvKind::Minishop => 8,
            EnvKind::Chainlab => 20,
        })
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.max_turns() == 0 {
            errs.push("env.max_turns must be >= 1".to_string());
        }
        match self.kind {
            EnvKind::Oneshot => {
                if self.k_actions < 2 {
                    errs.push("env.k_actions must be >= 2".into());
                }
            }
            EnvKind::Minishop => {
                if self.req_attrs == 0 {
                    errs.push("env.req_attrs must be >= 1".into());
                }
                if self.item_attrs < self.req_attrs {
                    errs.push(format!(
                        "env.item_attrs ({}) smaller than env.req_attrs ({})",
                        self.item_attrs, self.req_attrs
                    ));
                }
                if self.attr_pool < self.item_attrs {
                    errs.push(format!(
                        "env.attr_pool ({}) smaller than env.item_attrs ({})",
                        self.attr_pool, self.item_attrs
                    ));
                }
                if self.catalog_size == 0 || self.results_k == 0 {
                    errs.push("env.catalog_size and env.results_k must be >= 1".into());
                }
                if self.max_turns() < 3 {
                    errs.push("env.max_turns must be >= 3 for minishop".into());
                }
            }
            EnvKind::Chainlab => {
                if self.rooms < 1 || self.subgoals < 1 {
                    errs.push("env.rooms and env.subgoals must be >= 1".into());
                }
                if self.objects < self.subgoals {
                    errs.push(format!(
                        "env.objects ({}) smaller than env.subgoals ({})",
                        self.objects, self.subgoals
                    ));
                }
            }
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

/// Hidden ground truth for an instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Goal {
    Oneshot { rewards: Vec<f64> },
    Minishop { required: Vec<String>, budget: u32 },
    Chainlab(ChainTask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    pub goal: Goal,
    pub split: Split,
}

/// Environment-specific part of the latent state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvInner {
    Oneshot,
    Minishop(ShopState),
    Chainlab(LabState),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub instruction_id: String,
    pub turn: usize,
    pub max_turns: usize,
    pub done: bool,
    pub reward: Option<f64>,
    /// Generator state. Transitions are deterministic, so this is carried
    /// only to pin the episode to its seed.
    pub rng_state: u64,
    pub inner: EnvInner,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub done: bool,
    pub reward: Option<f64>,
}

/// Generated instructions plus everything needed to simulate them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceSet {
    pub format: String,
    pub spec: EnvSpec,
    pub catalog: Vec<Item>,
    pub instructions: Vec<Instruction>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    item_index: HashMap<String, usize>,
}

impl PartialEq for InstanceSet {
    fn eq(&self, other: &Self) -> bool {
        self.format == other.format
            && self.spec == other.spec
            && self.catalog == other.catalog
            && self.instructions == other.instructions
    }
}

impl InstanceSet {
    pub(crate) fn new(spec: EnvSpec, catalog: Vec<Item>, instructions: Vec<Instruction>) -> Self {
        let mut set = InstanceSet {
            format: ENV_FORMAT.to_string(),
            spec,
            catalog,
            instructions,
            index: HashMap::new(),
            item_index: HashMap::new(),
        };
        set.rebuild_index();
        set
    }

    /// Must be called after deserializing.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .instructions
            .iter()
            .enumerate()
            .map(|(i, ins)| (ins.id.clone(), i))
            .collect();
        self.item_index = self
            .catalog
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.clone(), i))
            .collect();
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut set: InstanceSet = serde_json::from_str(text)?;
        if set.format != ENV_FORMAT {
            return Err(Error::Data(format!(
                "expected format `{ENV_FORMAT}`, found `{}`",
                set.format
            )));
        }
        set.rebuild_index();
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance set serializes")
    }

    pub fn instruction(&self, id: &str) -> Result<&Instruction> {
        self.index
            .get(id)
            .map(|&i| &self.instructions[i])
            .ok_or_else(|| Error::UnknownInstruction(id.to_string()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instruction> {
        self.instructions.iter().filter(move |i| i.split == split)
    }

    pub fn train(&self) -> Vec<&Instruction> {
        self.split(Split::Train).collect()
    }

    /// All held-out instructions (seen and unseen).
    pub fn test(&self) -> Vec<&Instruction> {
        self.instructions
            .iter()
            .filter(|i| i.split != Split::Train)
            .collect()
    }

    pub(crate) fn item_by_id(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn reset(&self, instruction_id: &str, seed: u64) -> Result<(EnvState, Observation)> {
        let ins = self.instruction(instruction_id)?;
        let (inner, obs) = match &ins.goal {
            Goal::Oneshot { .. } => oneshot::reset(ins),
            Goal::Minishop { .. } => minishop::reset(ins),
            Goal::Chainlab(task) => chainlab::reset(ins, task),
        };
        let state = EnvState {
            instruction_id: ins.id.clone(),
            turn: 0,
            max_turns: self.spec.max_turns(),
            done: false,
            reward: None,
            rng_state: SeedTree::new(seed).value(),
            inner,
        };
        Ok((state, obs))
    }

    pub fn step(&self, state: &mut EnvState, action: &Action) -> Result<StepResult> {
        if state.done {
            return Err(Error::StepAfterDone(state.instruction_id.clone()));
        }
        let ins = self.instruction(&state.instruction_id)?;
        let outcome = match (&ins.goal, &mut state.inner) {
            (Goal::Oneshot { rewards }, EnvInner::Oneshot) => oneshot::step(rewards, action)?,
            (Goal::Minishop { required, budget }, EnvInner::Minishop(shop)) => {
                minishop::step(self, required, *budget, shop, action)?
            }
            (Goal::Chainlab(task), EnvInner::Chainlab(lab)) => chainlab::step(task, lab, action)?,
            _ => {
                return Err(Error::Internal(format!(
                    "state does not match environment of `{}`",
                    ins.id
                )))
            }
        };
        state.turn += 1;
        let (observation, terminal_reward) = outcome;
        let reward = match terminal_reward {
            Some(r) => Some(r),
            None if state.turn >= state.max_turns => Some(self.timeout_reward(ins, &state.inner)),
            None => None,
        };
        state.done = reward.is_some();
        state.reward = reward;
        Ok(StepResult {
            observation,
            done: state.done,
            reward,
        })
    }

    fn timeout_reward(&self, ins: &Instruction, inner: &EnvInner) -> f64 {
        match (&ins.goal, inner) {
            (Goal::Chainlab(task), EnvInner::Chainlab(lab)) => {
                lab.completed as f64 / task.subgoals.len() as f64
            }
            _ => 0.0,
        }
    }

    pub fn available_actions(&self, state: &EnvState) -> Vec<Action> {
        let ins = match self.instruction(&state.instruction_id) {
            Ok(ins) => ins,
            Err(_) => return Vec::new(),
        };
        let mut actions = match (&ins.goal, &state.inner) {
            (Goal::Oneshot { rewards }, _) => oneshot::available(rewards.len()),
            (Goal::Minishop { required, .. }, EnvInner::Minishop(shop)) => {
                minishop::available(self, required, shop)
            }
            (Goal::Chainlab(task), EnvInner::Chainlab(lab)) => chainlab::available(task, lab),
            _ => Vec::new(),
        };
        actions.sort();
        actions.dedup();
        actions
    }

    /// Scripted oracle; always reaches reward 1.0 on generated instances.
    pub fn expert_solve(&self, instruction_id: &str) -> Result<Trajectory> {
        let ins = self.instruction(instruction_id)?;
        let plan = match &ins.goal {
            Goal::Oneshot { rewards } => oneshot::expert_plan(rewards),
            Goal::Minishop { required, budget } => {
                minishop::expert_plan(self, required, *budget)
                    .ok_or_else(|| Error::Internal(format!("no expert plan for `{}`", ins.id)))?
            }
            Goal::Chainlab(task) => chainlab::expert_plan(task)
                .ok_or_else(|| Error::Internal(format!("no expert plan for `{}`", ins.id)))?,
        };
        let traj = self.replay_actions(instruction_id, &plan, AgentTag::Expert)?;
        if traj.reward != 1.0 {
            return Err(Error::Internal(format!(
                "expert oracle reached reward {} on `{}`",
                traj.reward, ins.id
            )));
        }
        Ok(traj)
    }

    /// Run a fixed action list from reset; stops at termination.
    pub fn replay_actions(
        &self,
        instruction_id: &str,
        actions: &[Action],
        agent: AgentTag,
    ) -> Result<Trajectory> {
        let (mut state, _) = self.reset(instruction_id, 0)?;
        let mut steps = Vec::with_capacity(actions.len());
        for (i, action) in actions.iter().enumerate() {
            if state.done {
                return Err(Error::Replay {
                    instruction_id: instruction_id.to_string(),
                    step: i,
                    detail: "episode finished before all actions were taken".into(),
                });
            }
            let out = self.step(&mut state, action)?;
            steps.push(Step {
                action: action.clone(),
                observation: out.observation,
            });
        }
        let reward = state.reward.ok_or_else(|| Error::Replay {
            instruction_id: instruction_id.to_string(),
            step: actions.len(),
            detail: "episode did not terminate".into(),
        })?;
        Ok(Trajectory {
            instruction_id: instruction_id.to_string(),
            agent,
            steps,
            reward,
        })
    }
}

/// Generate `n_train` training and `n_test` held-out instructions.
pub fn generate_instances(
    spec: &EnvSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<InstanceSet> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("instance counts must be >= 1".into()));
    }
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let tree = SeedTree::new(spec.seed).child("instances").index(seed);
    let set = match spec.kind {
        EnvKind::Oneshot => oneshot::generate(spec, n_train, n_test, tree),
        EnvKind::Minishop => minishop::generate(spec, n_train, n_test, tree)?,
        EnvKind::Chainlab => chainlab::generate(spec, n_train, n_test, tree)?,
    };
    Ok(set)
}

pub(crate) fn split_for(index: usize, n_train: usize) -> Split {
    if index < n_train {
        Split::Train
    } else {
        Split::TestSeen
    }
}

pub(crate) fn illegal(action: &Action, kind: EnvKind) -> Error {
    Error::IllegalAction {
        action: action.to_string(),
        env: kind.name(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_text_round_trip() {
        for s in ["buy", "search[red]", "click[red-wool-p35]", "goto[lab]"] {
            let a: Action = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
        assert!("search[red".parse::<Action>().is_err());
        assert!("fly[x]".parse::<Action>().is_err());
    }

    #[test]
    fn action_order_is_lexicographic() {
        let mut v = [
            Action::new(Verb::Search, "a"),
            Action::bare(Verb::Buy),
            Action::new(Verb::Click, "z"),
        ];
        v.sort();
        let s: Vec<String> = v.iter().map(|a| a.to_string()).collect();
        assert_eq!(s, ["buy", "click[z]", "search[a]"]);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(matches!(
            generate_instances(&EnvSpec::minishop(), 0, 1, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unsatisfiable_pool_is_config_error() {
        let spec = EnvSpec {
            attr_pool: 2,
            ..EnvSpec::minishop()
        };
        assert!(matches!(
            generate_instances(&spec, 2, 1, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_instruction_on_reset() {
        let set = generate_instances(&EnvSpec::oneshot(3), 2, 1, 0).unwrap();
        assert!(matches!(
            set.reset("nope", 0),
            Err(Error::UnknownInstruction(_))
        ));
    }

    fn specs() -> Vec<EnvSpec> {
        vec![
            EnvSpec::oneshot(4),
            EnvSpec::minishop(),
            EnvSpec::chainlab(),
        ]
    }

    #[test]
    fn generation_is_deterministic() {
        for spec in specs() {
            let a = generate_instances(&spec, 5, 3, 11).unwrap().to_json();
            let b = generate_instances(&spec, 5, 3, 11).unwrap().to_json();
            assert_eq!(a, b);
            let c = generate_instances(&spec, 5, 3, 12).unwrap().to_json();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn json_round_trip_preserves_set() {
        for spec in specs() {
            let set = generate_instances(&spec, 4, 2, 3).unwrap();
            let back = InstanceSet::from_json(&set.to_json()).unwrap();
            assert_eq!(set, back);
            let id = &set.instructions[0].id;
            assert_eq!(
                set.expert_solve(id).unwrap(),
                back.expert_solve(id).unwrap()
            );
        }
    }

    #[test]
    fn experts_solve_everything_and_use_available_actions() {
        for spec in specs() {
            let set = generate_instances(&spec, 40, 20, 5).unwrap();
            for ins in &set.instructions {
                let t = set.expert_solve(&ins.id).unwrap();
                assert_eq!(t.reward, 1.0);
                assert_eq!(t.agent, AgentTag::Expert);
                assert!(!t.is_empty() && t.len() <= spec.max_turns());
                let (mut st, _) = set.reset(&ins.id, 0).unwrap();
                for s in &t.steps {
                    assert!(set.available_actions(&st).contains(&s.action));
                    set.step(&mut st, &s.action).unwrap();
                }
            }
        }
    }

    #[test]
    fn train_and_test_disjoint() {
        for spec in specs() {
            let set = generate_instances(&spec, 30, 15, 9).unwrap();
            let train: Vec<_> = set.train().iter().map(|i| (&i.text, &i.goal)).collect();
            for t in set.test() {
                assert!(!train.contains(&(&t.text, &t.goal)), "{:?}", t.goal);
                if spec.kind != EnvKind::Oneshot {
                    assert!(train.iter().all(|(_, g)| **g != t.goal));
                }
            }
            let mut ids: Vec<_> = set.instructions.iter().map(|i| &i.id).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 45);
        }
    }

    #[test]
    fn step_after_done_is_usage_error() {
        let set = generate_instances(&EnvSpec::oneshot(3), 1, 1, 0).unwrap();
        let id = set.instructions[0].id.clone();
        let (mut st, _) = set.reset(&id, 0).unwrap();
        let a = set.available_actions(&st)[0].clone();
        set.step(&mut st, &a).unwrap();
        assert!(matches!(
            set.step(&mut st, &a),
            Err(Error::StepAfterDone(_))
        ));
    }

    #[test]
    fn equal_seeds_reset_identically() {
        let set = generate_instances(&EnvSpec::chainlab(), 2, 1, 0).unwrap();
        let id = &set.instructions[0].id;
        assert_eq!(set.reset(id, 4).unwrap(), set.reset(id, 4).unwrap());
    }
}

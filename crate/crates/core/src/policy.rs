//! Feature-hashed linear-softmax policy over the available actions.
//!
//! The score of an action is `<weights, x(context, action)>`, where `x` is a
//! sparse vector of hashed indicator features. Trajectory log-likelihood is
//! the sum of per-step log-softmax values, and its gradient is
//! `sum_j [x(a_j) - E_p x]`.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{Action, AgentTag, InstanceSet, Step, Trajectory};
use crate::error::{Error, Result};
use crate::hashing::Fnv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Hashed feature dimension `D`.
    pub dim: usize,
    /// History steps that contribute features.
    pub window: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            dim: 4096,
            window: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dim: usize) -> Self {
        PolicyParams {
            weights: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// Sparse features, sorted by index with colliding entries summed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    fn from_indices(mut idx: Vec<u32>) -> Self {
        idx.sort_unstable();
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(idx.len());
        for i in idx {
            match entries.last_mut() {
                Some((j, v)) if *j == i => *v += 1.0,
                _ => entries.push((i, 1.0)),
            }
        }
        FeatureVector { entries }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map_or(0.0, |k| self.entries[k].1)
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|&(i, v)| weights[i as usize] * v)
            .sum()
    }

    pub fn add_scaled_to(&self, out: &mut [f64], scale: f64) {
        for &(i, v) in &self.entries {
            out[i as usize] += scale * v;
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.add_scaled_to(&mut out, 1.0);
        out
    }
}

/// What the policy conditions on at one decision point.
#[derive(Clone, Copy, Debug)]
pub struct Context<'a> {
    pub instruction: &'a str,
    pub history: &'a [Step],
    pub actions: &'a [Action],
}

fn clean_token(t: &str) -> Option<String> {
    let t = t.trim_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '|' | '[' | ']'));
    (!t.is_empty()).then(|| t.to_lowercase())
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(clean_token).collect()
}

fn arg_tokens(arg: &str) -> Vec<String> {
    arg.split(|c: char| c == '-' || c.is_whitespace())
        .filter_map(clean_token)
        .collect()
}

/// Per-context feature material shared by every candidate action.
struct ContextParts {
    ngrams: Vec<String>,
    unigrams: Vec<String>,
    history: Vec<(String, Vec<String>)>,
}

/// Hashed feature map. Families, each with value 1.0 per distinct key:
///
/// * `b|verb`: action-verb bias
/// * `i|g|verb|arg`: instruction unigram/bigram `g` crossed with the action
/// * `ia|u|verb|t`: instruction unigram `u` crossed with each argument token
///   `t`, for multi-token arguments
/// * `h|lag|tok|verb`: tokens of the last `window` history steps (action
///   and observation) crossed with the action verb
///
/// Keys are hashed with FNV-1a and reduced modulo `dim`.
#[derive(Clone, Copy, Debug)]
pub struct Featurizer {
    dim: usize,
    window: usize,
}

impl Featurizer {
    pub fn new(cfg: PolicyConfig) -> Self {
        assert!(cfg.dim > 0, "feature dimension must be positive");
        Featurizer {
            dim: cfg.dim,
            window: cfg.window,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn parts(&self, ctx: &Context<'_>) -> ContextParts {
        let toks = tokens(ctx.instruction);
        let unigrams: Vec<String> = toks
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut ngrams: BTreeSet<String> = unigrams.iter().cloned().collect();
        for w in toks.windows(2) {
            ngrams.insert(format!("{}_{}", w[0], w[1]));
        }
        let history = ctx
            .history
            .iter()
            .rev()
            .take(self.window)
            .enumerate()
            .map(|(lag, step)| {
                let mut set: BTreeSet<String> = BTreeSet::new();
                set.insert(format!("a:{}", step.action));
                for t in step.observation.as_str().split_whitespace() {
                    set.extend(arg_tokens(t));
                }
                ((lag + 1).to_string(), set.into_iter().collect())
            })
            .collect();
        ContextParts {
            ngrams: ngrams.into_iter().collect(),
            unigrams,
            history,
        }
    }

    fn index(&self, h: Fnv) -> u32 {
        (h.finish() % self.dim as u64) as u32
    }

    fn features(&self, parts: &ContextParts, action: &Action) -> FeatureVector {
        let verb = action.verb.as_str();
        let arg_toks = arg_tokens(&action.arg);
        let mut idx = Vec::with_capacity(
            1 + parts.ngrams.len()
                + parts.unigrams.len() * arg_toks.len()
                + parts.history.iter().map(|h| h.1.len()).sum::<usize>(),
        );
        idx.push(self.index(Fnv::new().field("b").field(verb)));
        for g in &parts.ngrams {
            idx.push(
                self.index(
                    Fnv::new()
                        .field("i")
                        .field(g)
                        .field(verb)
                        .field(&action.arg),
                ),
            );
        }
        if arg_toks.len() > 1 {
            let uniq: BTreeSet<&String> = arg_toks.iter().collect();
            for u in &parts.unigrams {
                for t in &uniq {
                    idx.push(self.index(Fnv::new().field("ia").field(u).field(verb).field(t)));
                }
            }
        }
        for (lag, toks) in &parts.history {
            for t in toks {
                idx.push(self.index(Fnv::new().field("h").field(lag).field(t).field(verb)));
            }
        }
        FeatureVector::from_indices(idx)
    }

    pub fn featurize(&self, ctx: &Context<'_>, action: &Action) -> FeatureVector {
        self.features(&self.parts(ctx), action)
    }

    /// Features for every available action, in `ctx.actions` order.
    pub fn featurize_all(&self, ctx: &Context<'_>) -> Vec<FeatureVector> {
        let parts = self.parts(ctx);
        ctx.actions
            .iter()
            .map(|a| self.features(&parts, a))
            .collect()
    }
}

/// Max-subtracted log-softmax.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

fn scores(params: &PolicyParams, feats: &[FeatureVector]) -> Vec<f64> {
    feats.iter().map(|f| f.dot(&params.weights)).collect()
}

pub fn action_logprobs(
    params: &PolicyParams,
    featurizer: &Featurizer,
    ctx: &Context<'_>,
) -> Vec<(Action, f64)> {
    let lp = log_softmax(&scores(params, &featurizer.featurize_all(ctx)));
    ctx.actions.iter().cloned().zip(lp).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    /// Zero-temperature limit; ties go to the lexicographically first action.
    Argmax,
    Sample {
        temperature: f64,
    },
}

/// First maximum, so ties go to the lexicographically smallest action.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn choose(scores: &[f64], decoding: Decoding, rng: &mut impl Rng) -> usize {
    match decoding {
        Decoding::Argmax => argmax(scores),
        Decoding::Sample { temperature } => {
            assert!(temperature > 0.0, "temperature must be positive");
            let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

pub fn sample_action(
    params: &PolicyParams,
    featurizer: &Featurizer,
    ctx: &Context<'_>,
    decoding: Decoding,
    rng: &mut impl Rng,
) -> Action {
    let s = scores(params, &featurizer.featurize_all(ctx));
    ctx.actions[choose(&s, decoding, rng)].clone()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledStep {
    pub features: Vec<FeatureVector>,
    pub taken: usize,
}

/// A trajectory with every step's candidate features materialized, so that
/// likelihoods and gradients can be evaluated without re-simulating.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledTrajectory {
    pub steps: Vec<CompiledStep>,
}

impl CompiledTrajectory {
    /// Replay `traj` through its environment, checking every action is
    /// available and every observation and the reward reproduce exactly.
    pub fn compile(set: &InstanceSet, featurizer: &Featurizer, traj: &Trajectory) -> Result<Self> {
        let ins = set.instruction(&traj.instruction_id)?;
        let mismatch = |step: usize, detail: String| Error::Replay {
            instruction_id: traj.instruction_id.clone(),
            step,
            detail,
        };
        if traj.steps.is_empty() {
            return Err(mismatch(0, "empty trajectory".into()));
        }
        let (mut state, _) = set.reset(&traj.instruction_id, 0)?;
        let mut steps = Vec::with_capacity(traj.len());
        for (j, step) in traj.steps.iter().enumerate() {
            if state.done {
                return Err(mismatch(j, "episode ended early".into()));
            }
            let actions = set.available_actions(&state);
            let taken = actions
                .iter()
                .position(|a| *a == step.action)
                .ok_or_else(|| mismatch(j, format!("action `{}` not available", step.action)))?;
            let ctx = Context {
                instruction: &ins.text,
                history: &traj.steps[..j],
                actions: &actions,
            };
            steps.push(CompiledStep {
                features: featurizer.featurize_all(&ctx),
                taken,
            });
            let out = set.step(&mut state, &step.action)?;
            if out.observation != step.observation {
                return Err(mismatch(
                    j,
                    format!(
                        "observation differs: expected `{}`, got `{}`",
                        step.observation.as_str(),
                        out.observation.as_str()
                    ),
                ));
            }
        }
        match state.reward {
            Some(r) if r == traj.reward => Ok(CompiledTrajectory { steps }),
            Some(r) => Err(mismatch(
                traj.len(),
                format!("reward {r} != recorded {}", traj.reward),
            )),
            None => Err(mismatch(traj.len(), "episode did not terminate".into())),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn logprob(&self, params: &PolicyParams) -> f64 {
        self.steps
            .iter()
            .map(|s| log_softmax(&scores(params, &s.features))[s.taken])
            .sum()
    }

    /// Steps at which argmax decoding picks the recorded action.
    pub fn argmax_matches(&self, params: &PolicyParams) -> usize {
        self.steps
            .iter()
            .filter(|s| argmax(&scores(params, &s.features)) == s.taken)
            .count()
    }

    /// Adds `scale * grad log pi(e)` into `out`; returns `log pi(e)`.
    pub fn accumulate_grad(&self, params: &PolicyParams, scale: f64, out: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for s in &self.steps {
            let lp = log_softmax(&scores(params, &s.features));
            total += lp[s.taken];
            s.features[s.taken].add_scaled_to(out, scale);
            for (f, l) in s.features.iter().zip(&lp) {
                f.add_scaled_to(out, -scale * l.exp());
            }
        }
        total
    }

    pub fn grad(&self, params: &PolicyParams) -> Vec<f64> {
        let mut g = vec![0.0; params.dim()];
        self.accumulate_grad(params, 1.0, &mut g);
        g
    }
}

/// `log pi(e | u)`; replays the trajectory to rebuild each context.
pub fn traj_logprob(
    params: &PolicyParams,
    set: &InstanceSet,
    featurizer: &Featurizer,
    traj: &Trajectory,
) -> Result<f64> {
    Ok(CompiledTrajectory::compile(set, featurizer, traj)?.logprob(params))
}

/// Dense gradient of [`traj_logprob`] with respect to the weights.
pub fn grad_traj_logprob(
    params: &PolicyParams,
    set: &InstanceSet,
    featurizer: &Featurizer,
    traj: &Trajectory,
) -> Result<Vec<f64>> {
    Ok(CompiledTrajectory::compile(set, featurizer, traj)?.grad(params))
}

/// Play one episode; returns the trajectory and its compiled form.
pub fn rollout(
    params: &PolicyParams,
    set: &InstanceSet,
    featurizer: &Featurizer,
    instruction_id: &str,
    decoding: Decoding,
    agent: AgentTag,
    rng: &mut impl Rng,
) -> Result<(Trajectory, CompiledTrajectory)> {
    let ins = set.instruction(instruction_id)?;
    let (mut state, _) = set.reset(instruction_id, 0)?;
    let mut steps: Vec<Step> = Vec::new();
    let mut compiled = Vec::new();
    while !state.done {
        let actions = set.available_actions(&state);
        if actions.is_empty() {
            return Err(Error::Internal(format!(
                "no available actions in `{instruction_id}`"
            )));
        }
        let ctx = Context {
            instruction: &ins.text,
            history: &steps,
            actions: &actions,
        };
        let features = featurizer.featurize_all(&ctx);
        let taken = choose(&scores(params, &features), decoding, rng);
        let out = set.step(&mut state, &actions[taken])?;
        compiled.push(CompiledStep { features, taken });
        steps.push(Step {
            action: actions[taken].clone(),
            observation: out.observation,
        });
    }
    let traj = Trajectory {
        instruction_id: instruction_id.to_string(),
        agent,
        steps,
        reward: state.reward.expect("terminated episodes carry a reward"),
    };
    Ok((traj, CompiledTrajectory { steps: compiled }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_instances, EnvSpec, Observation, Verb};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Featurizer {
        Featurizer::new(PolicyConfig {
            dim: 200,
            window: 2,
        })
    }

    fn shop_actions() -> Vec<Action> {
        vec![
            Action::bare(Verb::Buy),
            Action::new(Verb::Click, "red-wool-p30"),
            Action::new(Verb::Search, "red"),
            Action::new(Verb::Search, "wool"),
        ]
    }

    #[test]
    fn bias_feature_present() {
        let f = Featurizer::new(PolicyConfig::default());
        let acts = shop_actions();
        let ctx = Context {
            instruction: "find red wool",
            history: &[],
            actions: &acts,
        };
        let x = f.featurize(&ctx, &acts[0]);
        let bias = f.index(Fnv::new().field("b").field("buy"));
        assert!(x.get(bias) >= 1.0);
        assert_eq!(x, f.featurize(&ctx, &acts[0]));
        assert_ne!(x, f.featurize(&ctx, &acts[2]));
    }

    #[test]
    fn uniform_at_zero_weights() {
        let f = small();
        let acts = shop_actions();
        let ctx = Context {
            instruction: "find red wool",
            history: &[],
            actions: &acts,
        };
        let lp = action_logprobs(&PolicyParams::zeros(200), &f, &ctx);
        for (_, l) in lp {
            assert!((l - (0.25f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_way_softmax_values() {
        let lp = log_softmax(&[1.0, 0.0]);
        assert!((lp[0] - -0.313261687518223).abs() < 1e-9);
        assert!((lp[1] - -1.313261687518223).abs() < 1e-9);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = log_softmax(&[0.3, -1.2, 2.5]);
        let b = log_softmax(&[100.3, 98.8, 102.5]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_lexicographically() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(choose(&[0.0, 0.0, 0.0], Decoding::Argmax, &mut rng), 0);
        assert_eq!(choose(&[0.0, 1.0, 1.0], Decoding::Argmax, &mut rng), 1);
    }

    #[test]
    fn sampling_is_reproducible() {
        let f = small();
        let acts = shop_actions();
        let ctx = Context {
            instruction: "x",
            history: &[],
            actions: &acts,
        };
        let p = PolicyParams::zeros(200);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| {
                    sample_action(
                        &p,
                        &f,
                        &ctx,
                        Decoding::Sample { temperature: 1.0 },
                        &mut rng,
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn uniform_sampling_frequencies_within_five_sigma() {
        let f = small();
        let acts = shop_actions();
        let k = acts.len() as f64;
        let ctx = Context {
            instruction: "x",
            history: &[],
            actions: &acts,
        };
        let p = PolicyParams::zeros(200);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut counts = vec![0usize; acts.len()];
        for _ in 0..n {
            let a = sample_action(
                &p,
                &f,
                &ctx,
                Decoding::Sample { temperature: 1.0 },
                &mut rng,
            );
            counts[acts.iter().position(|b| *b == a).unwrap()] += 1;
        }
        let sigma = (n as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / k).abs() < 5.0 * sigma);
        }
    }

    #[test]
    fn uniform_trajectory_logprob() {
        let set = generate_instances(&EnvSpec::minishop(), 5, 1, 1).unwrap();
        let f = small();
        let t = set.expert_solve(&set.instructions[0].id).unwrap();
        let c = CompiledTrajectory::compile(&set, &f, &t).unwrap();
        let expect: f64 = c
            .steps
            .iter()
            .map(|s| -(s.features.len() as f64).ln())
            .sum();
        assert!((c.logprob(&PolicyParams::zeros(200)) - expect).abs() < 1e-12);
    }

    #[test]
    fn single_step_gradient_at_zero_weights() {
        let f = small();
        let acts = vec![
            Action::new(Verb::Choose, "a0"),
            Action::new(Verb::Choose, "a1"),
        ];
        let ctx = Context {
            instruction: "pick",
            history: &[],
            actions: &acts,
        };
        let feats = f.featurize_all(&ctx);
        let c = CompiledTrajectory {
            steps: vec![CompiledStep {
                features: feats.clone(),
                taken: 0,
            }],
        };
        let g = c.grad(&PolicyParams::zeros(200));
        let xa = feats[0].to_dense(200);
        let xb = feats[1].to_dense(200);
        for i in 0..200 {
            assert!((g[i] - (xa[i] - 0.5 * (xa[i] + xb[i]))).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_rejects_forged_observation() {
        let set = generate_instances(&EnvSpec::minishop(), 3, 1, 1).unwrap();
        let mut t = set.expert_solve(&set.instructions[0].id).unwrap();
        t.steps[0].observation = Observation::new("forged");
        let err = CompiledTrajectory::compile(&set, &small(), &t).unwrap_err();
        assert!(matches!(err, Error::Replay { step: 0, .. }));
    }

    #[test]
    fn rollout_replays_to_same_compiled_form() {
        let set = generate_instances(&EnvSpec::chainlab(), 3, 1, 1).unwrap();
        let f = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = PolicyParams::zeros(200);
        let (t, c) = rollout(
            &params,
            &set,
            &f,
            &set.instructions[0].id,
            Decoding::Sample { temperature: 1.0 },
            AgentTag::Target,
            &mut rng,
        )
        .unwrap();
        assert_eq!(CompiledTrajectory::compile(&set, &f, &t).unwrap(), c);
    }
}

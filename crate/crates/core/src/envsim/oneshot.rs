use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    illegal, split_for, Action, EnvInner, EnvKind, EnvSpec, Goal, InstanceSet, Instruction,
    Observation, Verb,
};
use crate::error::Result;
use crate::hashing::SeedTree;

const CUES: &[&str] = &[
    "amber", "birch", "cobalt", "dune", "ember", "fern", "glacier", "harbor", "iris", "juniper",
    "kelp", "lumen", "marble", "nectar", "onyx", "pebble", "quartz", "reef", "sable", "tundra",
];

pub(super) fn option_arg(j: usize) -> String {
    format!("a{j}")
}

pub(super) fn generate(
    spec: &EnvSpec,
    n_train: usize,
    n_test: usize,
    tree: SeedTree,
) -> InstanceSet {
    let k = spec.k_actions;
    let mut rng = tree.rng();
    let instructions = (0..n_train + n_test)
        .map(|i| {
            let correct = rng.gen_range(0..k);
            let mut rewards = vec![0.0; k];
            if spec.graded {
                let mut levels: Vec<f64> = (1..k).map(|j| j as f64 / k as f64).collect();
                levels.shuffle(&mut rng);
                let mut it = levels.into_iter();
                for (j, r) in rewards.iter_mut().enumerate() {
                    if j != correct {
                        *r = it.next().unwrap_or(0.0);
                    }
                }
            }
            rewards[correct] = 1.0;
            let cue = CUES[rng.gen_range(0..CUES.len())];
            Instruction {
                id: format!("oneshot-{i:05}"),
                text: format!("task {i} pick the {cue} option"),
                goal: Goal::Oneshot { rewards },
                split: split_for(i, n_train),
            }
        })
        .collect();
    InstanceSet::new(spec.clone(), Vec::new(), instructions)
}

pub(super) fn reset(ins: &Instruction) -> (EnvInner, Observation) {
    (
        EnvInner::Oneshot,
        Observation::new(format!("instruction: {}", ins.text)),
    )
}

pub(super) fn available(k: usize) -> Vec<Action> {
    (0..k)
        .map(|j| Action::new(Verb::Choose, option_arg(j)))
        .collect()
}

pub(super) fn step(rewards: &[f64], action: &Action) -> Result<(Observation, Option<f64>)> {
    if action.verb != Verb::Choose {
        return Err(illegal(action, EnvKind::Oneshot));
    }
    let reward = (0..rewards.len())
        .find(|&j| option_arg(j) == action.arg)
        .map(|j| rewards[j])
        .unwrap_or(0.0);
    Ok((Observation::default(), Some(reward)))
}

pub(super) fn expert_plan(rewards: &[f64]) -> Vec<Action> {
    let best = rewards.iter().position(|&r| r == 1.0).unwrap_or(0);
    vec![Action::new(Verb::Choose, option_arg(best))]
}

//! Trajectory classification and preference-pair construction.
//!
//! Two datasets are built from one iteration's rollouts:
//!
//! * the failure agent's set pools every failure of both agents for an
//!   instruction and prefers the higher-reward failure of each pair;
//! * the target agent's set pairs the expert against every failure
//!   (weights normalized to sum to 1 per instruction, SFT term on) and adds
//!   cross-agent failure–failure pairs (weight 1, SFT term off).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::envsim::Trajectory;
use crate::error::{Error, Result};

/// Cap on failure–failure pairs emitted per instruction.
pub const MAX_FAILURE_PAIRS: usize = 16;

/// Ordered `Failure < HardNegative < Success`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryClass {
    Failure,
    HardNegative,
    Success,
}

/// `reward == threshold` counts as a hard negative.
pub fn classify_reward(reward: f64, threshold: f64) -> Result<TrajectoryClass> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Data(format!("threshold {threshold} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&reward) {
        return Err(Error::Data(format!("reward {reward} outside [0, 1]")));
    }
    Ok(if reward == 1.0 {
        TrajectoryClass::Success
    } else if reward >= threshold {
        TrajectoryClass::HardNegative
    } else {
        TrajectoryClass::Failure
    })
}

pub fn classify_trajectory(t: &Trajectory, threshold: f64) -> Result<TrajectoryClass> {
    classify_reward(t.reward, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instruction_id: String,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    pub weight: f64,
    pub sft_enabled: bool,
}

/// Failures of both agents plus one expert trajectory per instruction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FailureSets {
    from_target: Vec<Trajectory>,
    from_failure_agent: Vec<Trajectory>,
    experts: BTreeMap<String, Trajectory>,
}

impl FailureSets {
    pub fn new(
        from_target: Vec<Trajectory>,
        from_failure_agent: Vec<Trajectory>,
        experts: BTreeMap<String, Trajectory>,
    ) -> Result<Self> {
        for t in from_target.iter().chain(&from_failure_agent) {
            if !(t.reward >= 0.0 && t.reward < 1.0) {
                return Err(Error::Data(format!(
                    "failure set entry for `{}` has reward {}",
                    t.instruction_id, t.reward
                )));
            }
        }
        for (id, e) in &experts {
            if e.reward != 1.0 || &e.instruction_id != id {
                return Err(Error::Data(format!(
                    "expert for `{id}` has reward {} (instruction `{}`)",
                    e.reward, e.instruction_id
                )));
            }
        }
        Ok(FailureSets {
            from_target,
            from_failure_agent,
            experts,
        })
    }

    /// Keep only the reward < 1 rollouts of each agent.
    pub fn from_rollouts(
        target: &[Trajectory],
        failure_agent: &[Trajectory],
        experts: BTreeMap<String, Trajectory>,
    ) -> Result<Self> {
        let failures = |v: &[Trajectory]| v.iter().filter(|t| t.reward < 1.0).cloned().collect();
        FailureSets::new(failures(target), failures(failure_agent), experts)
    }

    pub fn from_target(&self) -> &[Trajectory] {
        &self.from_target
    }

    pub fn from_failure_agent(&self) -> &[Trajectory] {
        &self.from_failure_agent
    }

    pub fn experts(&self) -> &BTreeMap<String, Trajectory> {
        &self.experts
    }

    /// Per instruction (sorted by id): (target failures, failure-agent failures).
    fn by_instruction(&self) -> BTreeMap<&str, (Vec<&Trajectory>, Vec<&Trajectory>)> {
        let mut map: BTreeMap<&str, (Vec<&Trajectory>, Vec<&Trajectory>)> = BTreeMap::new();
        for t in &self.from_target {
            map.entry(&t.instruction_id).or_default().0.push(t);
        }
        for t in &self.from_failure_agent {
            map.entry(&t.instruction_id).or_default().1.push(t);
        }
        for (a, b) in map.values_mut() {
            *a = dedup(a);
            *b = dedup(b);
        }
        map
    }
}

fn dedup<'a>(v: &[&'a Trajectory]) -> Vec<&'a Trajectory> {
    let mut out: Vec<&Trajectory> = Vec::with_capacity(v.len());
    for t in v {
        if !out.iter().any(|u| u.same_behavior(t)) {
            out.push(t);
        }
    }
    out
}

fn failure_pair(hi: &Trajectory, lo: &Trajectory) -> PreferencePair {
    PreferencePair {
        instruction_id: hi.instruction_id.clone(),
        chosen: hi.clone(),
        rejected: lo.clone(),
        weight: 1.0,
        sft_enabled: false,
    }
}

/// Largest reward gap first, then by trajectory hash; at most
/// [`MAX_FAILURE_PAIRS`].
fn cap_failure_pairs(mut cands: Vec<(&Trajectory, &Trajectory)>) -> Vec<PreferencePair> {
    cands.sort_by(|a, b| {
        let gap_a = a.0.reward - a.1.reward;
        let gap_b = b.0.reward - b.1.reward;
        gap_b
            .total_cmp(&gap_a)
            .then_with(|| a.0.behavior_hash().cmp(&b.0.behavior_hash()))
            .then_with(|| a.1.behavior_hash().cmp(&b.1.behavior_hash()))
    });
    cands.truncate(MAX_FAILURE_PAIRS);
    cands
        .into_iter()
        .map(|(hi, lo)| failure_pair(hi, lo))
        .collect()
}

/// Failure-agent dataset: all strictly ordered pairs within each
/// instruction's pooled failures.
pub fn build_failure_pairs(sets: &FailureSets) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for (tgt, fail) in sets.by_instruction().into_values() {
        let pool: Vec<&Trajectory> = dedup(&tgt.iter().chain(&fail).copied().collect::<Vec<_>>());
        let mut cands = Vec::new();
        for &a in &pool {
            for &b in &pool {
                if a.reward > b.reward {
                    cands.push((a, b));
                }
            }
        }
        out.extend(cap_failure_pairs(cands));
    }
    out
}

fn expert_pairs_for(
    sets: &FailureSets,
    id: &str,
    failures: &[&Trajectory],
) -> Result<Vec<PreferencePair>> {
    if failures.is_empty() {
        return Ok(Vec::new());
    }
    let expert = sets
        .experts
        .get(id)
        .ok_or_else(|| Error::Data(format!("no expert trajectory for `{id}`")))?;
    let weight = 1.0 / failures.len() as f64;
    Ok(failures
        .iter()
        .map(|f| PreferencePair {
            instruction_id: id.to_string(),
            chosen: expert.clone(),
            rejected: (*f).clone(),
            weight,
            sft_enabled: true,
        })
        .collect())
}

/// Expert-versus-failure pairs only, over both failure sets.
pub fn build_expert_pairs(sets: &FailureSets) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (id, (tgt, fail)) in sets.by_instruction() {
        let failures = dedup(&tgt.iter().chain(&fail).copied().collect::<Vec<_>>());
        out.extend(expert_pairs_for(sets, id, &failures)?);
    }
    Ok(out)
}

/// Target-agent dataset: expert pairs plus cross-agent failure–failure pairs.
pub fn build_target_pairs(sets: &FailureSets) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (id, (tgt, fail)) in sets.by_instruction() {
        let failures = dedup(&tgt.iter().chain(&fail).copied().collect::<Vec<_>>());
        out.extend(expert_pairs_for(sets, id, &failures)?);
        let mut cands = Vec::new();
        for &a in &tgt {
            for &b in &fail {
                if a.reward > b.reward {
                    cands.push((a, b));
                } else if b.reward > a.reward {
                    cands.push((b, a));
                }
            }
        }
        out.extend(cap_failure_pairs(cands));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{Action, AgentTag, Observation, Step, Verb};

    fn traj(id: &str, tag: AgentTag, marker: &str, reward: f64) -> Trajectory {
        Trajectory {
            instruction_id: id.into(),
            agent: tag,
            steps: vec![Step {
                action: Action::new(Verb::Search, marker),
                observation: Observation::new("obs"),
            }],
            reward,
        }
    }

    fn experts(ids: &[&str]) -> BTreeMap<String, Trajectory> {
        ids.iter()
            .map(|id| (id.to_string(), traj(id, AgentTag::Expert, "exp", 1.0)))
            .collect()
    }

    #[test]
    fn classification_examples() {
        let c = |r| classify_reward(r, 0.6).unwrap();
        assert_eq!(c(1.0), TrajectoryClass::Success);
        assert_eq!(c(0.75), TrajectoryClass::HardNegative);
        assert_eq!(c(0.6), TrajectoryClass::HardNegative);
        assert_eq!(c(0.5), TrajectoryClass::Failure);
        assert!(classify_reward(1.5, 0.6).is_err());
        assert!(classify_reward(0.5, 1.0).is_err());
    }

    #[test]
    fn tied_failures_are_not_paired() {
        let sets = FailureSets::new(
            vec![
                traj("u", AgentTag::Target, "a", 0.75),
                traj("u", AgentTag::Target, "b", 0.75),
            ],
            vec![traj("u", AgentTag::Failure, "c", 0.25)],
            BTreeMap::new(),
        )
        .unwrap();
        let pairs = build_failure_pairs(&sets);
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_eq!(p.chosen.reward, 0.75);
            assert_eq!(p.rejected.reward, 0.25);
            assert!(!p.sft_enabled);
            assert_eq!(p.weight, 1.0);
        }
    }

    #[test]
    fn single_failure_yields_nothing() {
        let sets = FailureSets::new(
            vec![traj("u", AgentTag::Target, "a", 0.5)],
            vec![],
            BTreeMap::new(),
        )
        .unwrap();
        assert!(build_failure_pairs(&sets).is_empty());
    }

    #[test]
    fn success_in_failure_set_is_rejected() {
        assert!(FailureSets::new(
            vec![traj("u", AgentTag::Target, "a", 1.0)],
            vec![],
            BTreeMap::new()
        )
        .is_err());
    }

    #[test]
    fn duplicates_removed_before_pairing() {
        let sets = FailureSets::new(
            vec![traj("u", AgentTag::Target, "a", 0.5)],
            vec![
                traj("u", AgentTag::Failure, "a", 0.5),
                traj("u", AgentTag::Failure, "b", 0.25),
            ],
            experts(&["u"]),
        )
        .unwrap();
        assert_eq!(build_failure_pairs(&sets).len(), 1);
        let tgt = build_target_pairs(&sets).unwrap();
        assert_eq!(tgt.iter().filter(|p| p.sft_enabled).count(), 2);
    }

    #[test]
    fn target_pairs_weighting_example() {
        let sets = FailureSets::new(
            vec![traj("u", AgentTag::Target, "a", 0.5)],
            vec![traj("u", AgentTag::Failure, "b", 0.25)],
            experts(&["u"]),
        )
        .unwrap();
        let pairs = build_target_pairs(&sets).unwrap();
        assert_eq!(pairs.len(), 3);
        let (exp, ff): (Vec<_>, Vec<_>) = pairs.iter().partition(|p| p.sft_enabled);
        assert_eq!(exp.len(), 2);
        assert!(exp
            .iter()
            .all(|p| p.weight == 0.5 && p.chosen.agent == AgentTag::Expert));
        assert_eq!(ff.len(), 1);
        assert_eq!(ff[0].weight, 1.0);
        assert_eq!((ff[0].chosen.reward, ff[0].rejected.reward), (0.5, 0.25));
    }

    #[test]
    fn no_failures_no_pairs() {
        let sets = FailureSets::from_rollouts(
            &[traj("u", AgentTag::Target, "a", 1.0)],
            &[traj("u", AgentTag::Failure, "b", 1.0)],
            experts(&["u"]),
        )
        .unwrap();
        assert!(build_target_pairs(&sets).unwrap().is_empty());
    }

    #[test]
    fn missing_expert_is_data_error() {
        let sets = FailureSets::new(
            vec![traj("u", AgentTag::Target, "a", 0.5)],
            vec![],
            BTreeMap::new(),
        )
        .unwrap();
        assert!(matches!(build_target_pairs(&sets), Err(Error::Data(_))));
    }

    #[test]
    fn failure_pairs_are_capped_by_gap() {
        let tgt: Vec<_> = (0..6)
            .map(|i| traj("u", AgentTag::Target, &format!("t{i}"), i as f64 / 10.0))
            .collect();
        let fail: Vec<_> = (0..6)
            .map(|i| {
                traj(
                    "u",
                    AgentTag::Failure,
                    &format!("f{i}"),
                    0.05 + i as f64 / 10.0,
                )
            })
            .collect();
        let sets = FailureSets::new(tgt, fail, experts(&["u"])).unwrap();
        let ff: Vec<_> = build_target_pairs(&sets)
            .unwrap()
            .into_iter()
            .filter(|p| !p.sft_enabled)
            .collect();
        assert_eq!(ff.len(), MAX_FAILURE_PAIRS);
        let gaps: Vec<f64> = ff
            .iter()
            .map(|p| p.chosen.reward - p.rejected.reward)
            .collect();
        assert!(gaps.windows(2).all(|w| w[0] >= w[1]));
        assert!(build_failure_pairs(&sets).len() == MAX_FAILURE_PAIRS);
    }
}

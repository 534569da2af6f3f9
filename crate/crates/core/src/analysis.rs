//! Trajectory-class statistics and failure diversity.
//!
//! Diversity embeds each trajectory as a hashed bag of action unigrams and
//! bigrams, L2-normalized, and reports the mean pairwise cosine distance
//! among the failures generated for each instruction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::envsim::Trajectory;
use crate::error::{Error, Result};
use crate::hashing::Fnv;
use crate::prefdata::{classify_trajectory, TrajectoryClass};

pub const EMBED_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajStats {
    pub success_frac: f64,
    pub hard_negative_frac: f64,
    pub failure_frac: f64,
    pub success: usize,
    pub hard_negative: usize,
    pub failure: usize,
    pub total: usize,
}

pub fn traj_stats(trajectories: &[Trajectory], threshold: f64) -> Result<TrajStats> {
    if trajectories.is_empty() {
        return Err(Error::Data("no trajectories to summarize".into()));
    }
    let (mut s, mut h, mut f) = (0, 0, 0);
    for t in trajectories {
        match classify_trajectory(t, threshold)? {
            TrajectoryClass::Success => s += 1,
            TrajectoryClass::HardNegative => h += 1,
            TrajectoryClass::Failure => f += 1,
        }
    }
    let n = trajectories.len();
    let frac = |c: usize| c as f64 / n as f64;
    Ok(TrajStats {
        success_frac: frac(s),
        hard_negative_frac: frac(h),
        failure_frac: frac(f),
        success: s,
        hard_negative: h,
        failure: f,
        total: n,
    })
}

/// Unit-norm embedding of a trajectory's action sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajEmbedding(Vec<f64>);

impl TrajEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &TrajEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Only the action sequence contributes; observations and reward do not.
pub fn embed_trajectory(t: &Trajectory, dim: usize) -> TrajEmbedding {
    let mut v = vec![0.0; dim];
    let toks: Vec<String> = t.actions().map(|a| a.to_string()).collect();
    let slot = |h: Fnv| (h.finish() % dim as u64) as usize;
    for tok in &toks {
        v[slot(Fnv::new().field("u").field(tok))] += 1.0;
    }
    for w in toks.windows(2) {
        v[slot(Fnv::new().field("b").field(&w[0]).field(&w[1]))] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    TrajEmbedding(v)
}

/// `1 - cos`, clamped to `[0, 2]`; exactly 0 for equal embeddings, where
/// rounding would otherwise leave a residue near 1e-16.
pub fn cosine_distance(a: &TrajEmbedding, b: &TrajEmbedding) -> f64 {
    if a == b {
        return 0.0;
    }
    (1.0 - a.cosine(b)).clamp(0.0, 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantiles of a non-empty sample.
pub fn quartiles(values: &[f64]) -> Quartiles {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Quartiles {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionDiversity {
    pub instruction_id: String,
    pub trajectories: usize,
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_instruction: Vec<InstructionDiversity>,
    pub mean: f64,
    pub quartiles: Quartiles,
}

fn mean_sorted(mut values: Vec<f64>) -> f64 {
    // Summing in sorted order makes the result independent of input order.
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_pairwise_distance(group: &[&Trajectory]) -> f64 {
    let emb: Vec<TrajEmbedding> = group
        .iter()
        .map(|t| embed_trajectory(t, EMBED_DIM))
        .collect();
    let mut d = Vec::with_capacity(emb.len() * (emb.len() - 1) / 2);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            d.push(cosine_distance(&emb[i], &emb[j]));
        }
    }
    mean_sorted(d)
}

/// Mean pairwise distance per instruction (instructions with fewer than two
/// trajectories are skipped), plus the global mean and quartiles.
pub fn diversity_score(trajectories: &[Trajectory]) -> Result<DiversityReport> {
    let mut groups: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories {
        groups.entry(&t.instruction_id).or_default().push(t);
    }
    let per_instruction: Vec<InstructionDiversity> = groups
        .into_iter()
        .filter(|(_, g)| g.len() >= 2)
        .map(|(id, g)| InstructionDiversity {
            instruction_id: id.to_string(),
            trajectories: g.len(),
            mean_distance: mean_pairwise_distance(&g),
        })
        .collect();
    if per_instruction.is_empty() {
        return Err(Error::Data(
            "diversity undefined: no instruction has two or more trajectories".into(),
        ));
    }
    let values: Vec<f64> = per_instruction.iter().map(|d| d.mean_distance).collect();
    Ok(DiversityReport {
        mean: mean_sorted(values.clone()),
        quartiles: quartiles(&values),
        per_instruction,
    })
}

/// Diversity restricted to failures (reward < 1).
pub fn failure_diversity(trajectories: &[Trajectory]) -> Result<DiversityReport> {
    let failures: Vec<Trajectory> = trajectories
        .iter()
        .filter(|t| t.reward < 1.0)
        .cloned()
        .collect();
    diversity_score(&failures)
}

/// One row of the comparative summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub stats: TrajStats,
    pub diversity: Option<DiversityReport>,
}

pub const STATS_HEADER: &str = "label,total,success_frac,failure_frac,hard_negative_frac";
pub const DIVERSITY_HEADER: &str = "label,instructions,mean_distance,min,q1,median,q3,max";

pub fn stats_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label,
            r.stats.total,
            r.stats.success_frac,
            r.stats.failure_frac,
            r.stats.hard_negative_frac
        ));
    }
    out
}

pub fn diversity_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{DIVERSITY_HEADER}\n");
    for r in rows {
        if let Some(d) = &r.diversity {
            let q = d.quartiles;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.label,
                d.per_instruction.len(),
                d.mean,
                q.min,
                q.q1,
                q.median,
                q.q3,
                q.max
            ));
        }
    }
    out
}

/// Table-style text summary: counts shown as percentages.
pub fn stats_table(rows: &[ComparisonRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<w$}  success  failure  hard-neg  diversity\n", "agent");
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:>6.1}%  {:>6.1}%  {:>7.1}%  {}\n",
            r.label,
            100.0 * r.stats.success_frac,
            100.0 * r.stats.failure_frac,
            100.0 * r.stats.hard_negative_frac,
            r.diversity
                .as_ref()
                .map_or_else(|| "-".to_string(), |d| format!("{:.4}", d.mean))
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{Action, AgentTag, Observation, Step, Verb};

    fn traj(id: &str, acts: &[&str], reward: f64) -> Trajectory {
        Trajectory {
            instruction_id: id.into(),
            agent: AgentTag::Failure,
            steps: acts
                .iter()
                .map(|a| Step {
                    action: Action::new(Verb::Search, *a),
                    observation: Observation::new("o"),
                })
                .collect(),
            reward,
        }
    }

    #[test]
    fn stats_example() {
        let ts: Vec<_> = [1.0, 0.75, 0.25, 0.25]
            .iter()
            .map(|&r| traj("u", &["a"], r))
            .collect();
        let s = traj_stats(&ts, 0.6).unwrap();
        assert_eq!(
            (s.success_frac, s.hard_negative_frac, s.failure_frac),
            (0.25, 0.25, 0.5)
        );
        let all: Vec<_> = (0..3).map(|_| traj("u", &["a"], 1.0)).collect();
        let s = traj_stats(&all, 0.6).unwrap();
        assert_eq!(
            (s.success_frac, s.failure_frac, s.hard_negative_frac),
            (1.0, 0.0, 0.0)
        );
        assert!(traj_stats(&[], 0.6).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let t = traj("u", &["a", "b", "c"], 0.5);
        let e = embed_trajectory(&t, EMBED_DIM);
        let n: f64 = e.as_slice().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(e, embed_trajectory(&t, EMBED_DIM));
    }

    #[test]
    fn embedding_ignores_observations_and_reward() {
        let a = traj("u", &["a", "b"], 0.5);
        let mut b = traj("u", &["a", "b"], 0.0);
        b.steps[1].observation = Observation::new("different");
        assert_eq!(
            embed_trajectory(&a, EMBED_DIM),
            embed_trajectory(&b, EMBED_DIM)
        );
    }

    #[test]
    fn three_way_mean_of_distances() {
        assert!((mean_sorted(vec![0.2, 0.4, 0.6]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn identical_pair_has_zero_distance() {
        let t = traj("u", &["a", "b"], 0.5);
        let r = diversity_score(&[t.clone(), t]).unwrap();
        assert_eq!(r.mean, 0.0);
        let t = traj("u", &["red", "shoe", "cheap"], 0.5);
        assert_eq!(
            diversity_score(&[t.clone(), t.clone(), t]).unwrap().mean,
            0.0
        );
    }

    #[test]
    fn undefined_without_pairs() {
        let r = diversity_score(&[traj("u", &["a"], 0.5), traj("v", &["a"], 0.5)]);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn quartiles_interpolate() {
        let q = quartiles(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(
            (q.min, q.q1, q.median, q.q3, q.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
        let q = quartiles(&[0.0, 1.0]);
        assert_eq!(q.median, 0.5);
    }
}

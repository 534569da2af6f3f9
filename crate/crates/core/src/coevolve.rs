//! Experiment orchestration: shared SFT base, alternating rollout and DPO
//! phases, the ETO baseline, the positive-agent ablation and evaluation.
//!
//! Each iteration collects one rollout pass per agent. The failure agent
//! trains first; the target dataset is built from the same rollouts.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{failure_diversity, traj_stats, ComparisonRow, TrajStats};
use crate::envsim::{generate_instances, AgentTag, EnvSpec, InstanceSet, Instruction, Trajectory};
use crate::error::{Error, Result};
use crate::hashing::SeedTree;
use crate::policy::{rollout, Decoding, Featurizer, PolicyConfig, PolicyParams};
use crate::prefdata::{
    build_expert_pairs, build_failure_pairs, build_target_pairs, FailureSets, PreferencePair,
};
use crate::training::{run_dpo_phase, run_sft_phase, EpochMetrics, TrainConfig};

pub const REPORT_FORMAT: &str = "coevo-report-v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Coevolve,
    Eto,
    PositiveAgent,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Coevolve => "coevolve",
            Mode::Eto => "eto",
            Mode::PositiveAgent => "positive_agent",
        }
    }

    /// Label of the second policy, if the mode has one.
    pub fn second_agent(self) -> Option<&'static str> {
        match self {
            Mode::Coevolve => Some("failure"),
            Mode::Eto => None,
            Mode::PositiveAgent => Some("auxiliary"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub policy: PolicyConfig,
    pub sft: TrainConfig,
    pub dpo: TrainConfig,
    /// Overrides `dpo` for the failure agent's phases only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_dpo: Option<TrainConfig>,
    pub iterations: usize,
    pub rollouts_per_instruction: usize,
    pub hard_negative_threshold: f64,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Sampling temperature for training rollouts.
    pub rollout_temperature: f64,
    /// Rollouts per training instruction in the final analysis pass.
    pub analysis_rollouts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSpec::minishop(),
            n_train: 200,
            n_test: 100,
            policy: PolicyConfig::default(),
            sft: TrainConfig::default(),
            dpo: TrainConfig::default(),
            failure_dpo: None,
            iterations: 3,
            rollouts_per_instruction: 1,
            hard_negative_threshold: 0.6,
            mode: Mode::Coevolve,
            seeds: vec![0],
            rollout_temperature: 1.0,
            analysis_rollouts: 4,
        }
    }
}

impl ExperimentConfig {
    /// Every violated invariant, one message each.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.env.validate();
        errs.extend(self.sft.validate("sft."));
        errs.extend(self.dpo.validate("dpo."));
        if let Some(f) = &self.failure_dpo {
            errs.extend(f.validate("failure_dpo."));
        }
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(self.n_train >= 1, "n_train must be >= 1".into());
        check(self.n_test >= 1, "n_test must be >= 1".into());
        check(self.iterations >= 1, "iterations must be >= 1".into());
        check(
            self.rollouts_per_instruction >= 1,
            "rollouts_per_instruction must be >= 1".into(),
        );
        check(
            self.hard_negative_threshold > 0.0 && self.hard_negative_threshold < 1.0,
            format!(
                "hard_negative_threshold must lie in (0, 1) (got {})",
                self.hard_negative_threshold
            ),
        );
        check(!self.seeds.is_empty(), "seeds must not be empty".into());
        check(
            self.rollout_temperature > 0.0 && self.rollout_temperature.is_finite(),
            format!(
                "rollout_temperature must be > 0 (got {})",
                self.rollout_temperature
            ),
        );
        check(
            self.analysis_rollouts >= 2,
            "analysis_rollouts must be >= 2".into(),
        );
        check(self.policy.dim >= 1, "policy.dim must be >= 1".into());
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn failure_train(&self) -> &TrainConfig {
        self.failure_dpo.as_ref().unwrap_or(&self.dpo)
    }

    pub fn sampling(&self) -> Decoding {
        Decoding::Sample {
            temperature: self.rollout_temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutError {
    pub instruction_id: String,
    pub rollout: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub errors: Vec<RolloutError>,
}

/// `budget` rollouts per instruction, in instruction order. Stream for
/// rollout `r` of instruction `id` is `tree / id / r`.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    params: &PolicyParams,
    set: &InstanceSet,
    featurizer: &Featurizer,
    instructions: &[&Instruction],
    budget: usize,
    decoding: Decoding,
    agent: AgentTag,
    tree: SeedTree,
) -> Result<RolloutBatch> {
    if instructions.is_empty() {
        return Err(Error::Data("no instructions to roll out".into()));
    }
    let jobs: Vec<(&Instruction, usize)> = instructions
        .iter()
        .flat_map(|ins| (0..budget).map(move |r| (*ins, r)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(ins, r)| {
            let mut rng = tree.child(&ins.id).index(r as u64).rng();
            rollout(params, set, featurizer, &ins.id, decoding, agent, &mut rng)
                .map(|(t, _)| t)
                .map_err(|e| RolloutError {
                    instruction_id: ins.id.clone(),
                    rollout: r,
                    message: e.to_string(),
                })
        })
        .collect();
    let mut batch = RolloutBatch::default();
    for r in results {
        match r {
            Ok(t) => batch.trajectories.push(t),
            Err(e) => {
                warn!(
                    "rollout {} of `{}` aborted: {}",
                    e.rollout, e.instruction_id, e.message
                );
                batch.errors.push(e);
            }
        }
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub per_instruction: Vec<(String, f64)>,
}

/// Argmax rollouts; mean terminal reward.
pub fn evaluate_policy(
    params: &PolicyParams,
    set: &InstanceSet,
    featurizer: &Featurizer,
    instructions: &[&Instruction],
) -> Result<EvalResult> {
    if instructions.is_empty() {
        return Err(Error::Data("no instructions to evaluate".into()));
    }
    let per_instruction = instructions
        .par_iter()
        .map(|ins| {
            // Argmax never draws from the rng.
            let mut rng = SeedTree::new(0).rng();
            let (t, _) = rollout(
                params,
                set,
                featurizer,
                &ins.id,
                Decoding::Argmax,
                AgentTag::Target,
                &mut rng,
            )?;
            Ok((ins.id.clone(), t.reward))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_instruction.iter().map(|(_, r)| r).sum::<f64>() / per_instruction.len() as f64;
    Ok(EvalResult {
        mean,
        per_instruction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub train: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub train: EvalResult,
    pub test: EvalResult,
}

impl Evaluation {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            train: self.train.mean,
            test: self.test.mean,
        }
    }
}

/// Instances, experts and featurizer for one seed.
pub struct Workbench {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub set: InstanceSet,
    pub featurizer: Featurizer,
    pub experts: Vec<Trajectory>,
    pub expert_map: BTreeMap<String, Trajectory>,
    tree: SeedTree,
}

impl Workbench {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let set = generate_instances(&cfg.env, cfg.n_train, cfg.n_test, seed)?;
        Workbench::with_instances(cfg, seed, set)
    }

    pub fn with_instances(cfg: &ExperimentConfig, seed: u64, set: InstanceSet) -> Result<Self> {
        cfg.check()?;
        let experts = set
            .train()
            .par_iter()
            .map(|ins| set.expert_solve(&ins.id))
            .collect::<Result<Vec<_>>>()?;
        let expert_map = experts
            .iter()
            .map(|t| (t.instruction_id.clone(), t.clone()))
            .collect();
        Ok(Workbench {
            cfg: cfg.clone(),
            seed,
            featurizer: Featurizer::new(cfg.policy),
            set,
            experts,
            expert_map,
            tree: SeedTree::new(seed).child("run"),
        })
    }

    /// Swap in externally supplied demonstrations, one per train instruction.
    pub fn replace_experts(&mut self, experts: Vec<Trajectory>) -> Result<()> {
        let train: BTreeSet<&str> = self
            .set
            .train()
            .into_iter()
            .map(|i| i.id.as_str())
            .collect();
        let mut map = BTreeMap::new();
        for t in &experts {
            if !train.contains(t.instruction_id.as_str()) {
                return Err(Error::Data(format!(
                    "expert for `{}` is not a train instruction",
                    t.instruction_id
                )));
            }
            if t.reward != 1.0 {
                return Err(Error::Data(format!(
                    "expert for `{}` has reward {}",
                    t.instruction_id, t.reward
                )));
            }
            if map.insert(t.instruction_id.clone(), t.clone()).is_some() {
                return Err(Error::Data(format!(
                    "duplicate expert for `{}`",
                    t.instruction_id
                )));
            }
        }
        if map.len() != train.len() {
            return Err(Error::Data(format!(
                "{} experts for {} train instructions",
                map.len(),
                train.len()
            )));
        }
        self.experts = experts;
        self.expert_map = map;
        Ok(())
    }

    fn train_cfg(&self, base: &TrainConfig, label: &str, iteration: usize) -> TrainConfig {
        let seed = self
            .tree
            .child("train")
            .child(label)
            .index(iteration as u64)
            .index(base.seed)
            .value();
        TrainConfig {
            seed,
            ..base.clone()
        }
    }

    /// Behavioral cloning on the oracle trajectories of every train instruction.
    pub fn train_base(&self) -> Result<(PolicyParams, Vec<EpochMetrics>)> {
        let cfg = self.train_cfg(&self.cfg.sft, "sft", 0);
        let zero = PolicyParams::zeros(self.featurizer.dim());
        let out = run_sft_phase(
            &zero,
            &self.set,
            &self.featurizer,
            &self.experts,
            &cfg,
            "sft",
        )?;
        Ok((out.params, out.epochs))
    }

    /// Sampled rollouts over the train split from stream `label / iteration`.
    pub fn rollouts(
        &self,
        params: &PolicyParams,
        agent: AgentTag,
        label: &str,
        iteration: usize,
        budget: usize,
    ) -> Result<RolloutBatch> {
        collect_rollouts(
            params,
            &self.set,
            &self.featurizer,
            &self.set.train(),
            budget,
            self.cfg.sampling(),
            agent,
            self.tree
                .child("rollout")
                .child(label)
                .index(iteration as u64),
        )
    }

    pub fn evaluate(&self, params: &PolicyParams) -> Result<Evaluation> {
        Ok(Evaluation {
            train: evaluate_policy(params, &self.set, &self.featurizer, &self.set.train())?,
            test: evaluate_policy(params, &self.set, &self.featurizer, &self.set.test())?,
        })
    }

    /// One target-style DPO phase; `None` (params unchanged) when there are no pairs.
    pub fn dpo(
        &self,
        params: &PolicyParams,
        pairs: &[PreferencePair],
        label: &str,
        iteration: usize,
    ) -> Result<Option<(PolicyParams, Vec<EpochMetrics>)>> {
        self.dpo_with(params, pairs, &self.cfg.dpo, label, iteration)
    }

    /// A failure-agent phase: `failure_train()` settings with the SFT term off.
    pub fn failure_dpo(
        &self,
        params: &PolicyParams,
        pairs: &[PreferencePair],
        label: &str,
        iteration: usize,
    ) -> Result<Option<(PolicyParams, Vec<EpochMetrics>)>> {
        let mut base = self.cfg.failure_train().clone();
        base.lambda_sft = 0.0;
        self.dpo_with(params, pairs, &base, label, iteration)
    }

    fn dpo_with(
        &self,
        params: &PolicyParams,
        pairs: &[PreferencePair],
        base: &TrainConfig,
        label: &str,
        iteration: usize,
    ) -> Result<Option<(PolicyParams, Vec<EpochMetrics>)>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let cfg = self.train_cfg(base, label, iteration);
        let (out, _) = run_dpo_phase(params, &self.set, &self.featurizer, pairs, &cfg, label)?;
        Ok(Some((out.params, out.epochs)))
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub phase: String,
    pub iteration: Option<usize>,
    pub epoch: Option<usize>,
    pub mean_loss: Option<f64>,
    pub mean_z: Option<f64>,
    pub grad_norm: Option<f64>,
    pub eval_reward: Option<f64>,
}

impl MetricsRow {
    pub fn epoch(phase: String, iteration: Option<usize>, m: &EpochMetrics) -> Self {
        MetricsRow {
            phase,
            iteration,
            epoch: Some(m.epoch),
            mean_loss: Some(m.mean_loss),
            mean_z: m.mean_z,
            grad_norm: Some(m.grad_norm),
            eval_reward: None,
        }
    }

    pub fn eval(phase: String, iteration: Option<usize>, reward: f64) -> Self {
        MetricsRow {
            phase,
            iteration,
            epoch: None,
            mean_loss: None,
            mean_z: None,
            grad_norm: None,
            eval_reward: Some(reward),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IterationArtifacts {
    pub iteration: usize,
    pub target_rollouts: RolloutBatch,
    /// Failure-agent rollouts (auxiliary agent in positive-agent mode).
    pub second_rollouts: Option<RolloutBatch>,
    /// Second agent's training pairs: D_fail for coevolve, the auxiliary
    /// agent's expert pairs for positive_agent.
    pub second_pairs: Vec<PreferencePair>,
    pub target_pairs: Vec<PreferencePair>,
    pub target_params: PolicyParams,
    pub second_params: Option<PolicyParams>,
    pub target_eval: Evaluation,
    pub second_eval: Option<Evaluation>,
    pub notices: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub target_rollout_reward: f64,
    pub target_stats: TrajStats,
    pub second_rollout_reward: Option<f64>,
    pub second_stats: Option<TrajStats>,
    pub second_pairs: usize,
    pub target_pairs: usize,
    pub rollout_errors: usize,
    pub target_eval: EvalSummary,
    pub second_eval: Option<EvalSummary>,
    pub notices: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub base_eval: EvalSummary,
    pub iterations: Vec<IterationSummary>,
    pub final_eval: EvalSummary,
    pub analysis: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub mode: Mode,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    pub mean_base_test_reward: f64,
    pub mean_final_test_reward: f64,
}

/// Everything one seed produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub set: InstanceSet,
    pub experts: Vec<Trajectory>,
    pub base: PolicyParams,
    pub iterations: Vec<IterationArtifacts>,
    /// Final analysis-pass rollouts, keyed by agent label.
    pub analysis_rollouts: BTreeMap<String, Vec<Trajectory>>,
    pub metrics: Vec<MetricsRow>,
    pub report: SeedReport,
}

impl SeedRun {
    pub fn final_target(&self) -> &PolicyParams {
        self.iterations
            .last()
            .map_or(&self.base, |it| &it.target_params)
    }

    pub fn final_second(&self) -> Option<&PolicyParams> {
        self.iterations
            .last()
            .and_then(|it| it.second_params.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: Report,
    pub seeds: Vec<SeedRun>,
}

impl RunOutput {
    pub fn metrics(&self) -> impl Iterator<Item = &MetricsRow> {
        self.seeds.iter().flat_map(|s| &s.metrics)
    }
}

fn mean_reward(ts: &[Trajectory]) -> f64 {
    if ts.is_empty() {
        return 0.0;
    }
    ts.iter().map(|t| t.reward).sum::<f64>() / ts.len() as f64
}

fn comparison_row(label: &str, ts: &[Trajectory], threshold: f64) -> Result<ComparisonRow> {
    Ok(ComparisonRow {
        label: label.to_string(),
        stats: traj_stats(ts, threshold)?,
        diversity: failure_diversity(ts).ok(),
    })
}

/// Run one seed of `cfg.mode` on a prepared workbench.
pub fn run_seed(wb: &Workbench) -> Result<SeedRun> {
    let cfg = &wb.cfg;
    let mode = cfg.mode;
    let tag = |phase: &str| format!("seed{}/{phase}", wb.seed);
    let mut metrics = Vec::new();

    let (base, sft_epochs) = wb.train_base()?;
    metrics.extend(
        sft_epochs
            .iter()
            .map(|m| MetricsRow::epoch(tag("sft"), None, m)),
    );
    let base_eval = wb.evaluate(&base)?;
    metrics.push(MetricsRow::eval(
        tag("base-eval"),
        None,
        base_eval.test.mean,
    ));
    info!(
        "seed {}: base reward train {:.4} test {:.4}",
        wb.seed, base_eval.train.mean, base_eval.test.mean
    );

    let second_label = mode.second_agent();
    let mut target = base.clone();
    let mut second = second_label.map(|_| base.clone());
    let mut iterations = Vec::with_capacity(cfg.iterations);
    let mut summaries = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut notices = Vec::new();
        let budget = cfg.rollouts_per_instruction;
        let target_rollouts = wb.rollouts(&target, AgentTag::Target, "target", it, budget)?;
        let second_rollouts = match (&second, mode) {
            (Some(p), Mode::Coevolve) => {
                Some(wb.rollouts(p, AgentTag::Failure, "failure", it, budget)?)
            }
            (Some(p), Mode::PositiveAgent) => {
                Some(wb.rollouts(p, AgentTag::Other, "auxiliary", it, budget)?)
            }
            _ => None,
        };
        let empty = Vec::new();
        let second_trajs = second_rollouts.as_ref().map_or(&empty, |b| &b.trajectories);
        let experts = wb.expert_map.clone();

        let (second_pairs, target_pairs) = match mode {
            Mode::Coevolve => {
                let sets = FailureSets::from_rollouts(
                    &target_rollouts.trajectories,
                    second_trajs,
                    experts,
                )?;
                (build_failure_pairs(&sets), build_target_pairs(&sets)?)
            }
            Mode::Eto => {
                let sets = FailureSets::from_rollouts(&target_rollouts.trajectories, &[], experts)?;
                (Vec::new(), build_expert_pairs(&sets)?)
            }
            Mode::PositiveAgent => {
                let aux = FailureSets::from_rollouts(&[], second_trajs, experts.clone())?;
                let tgt = FailureSets::from_rollouts(
                    &target_rollouts.trajectories,
                    second_trajs,
                    experts,
                )?;
                (build_expert_pairs(&aux)?, build_expert_pairs(&tgt)?)
            }
        };

        if let (Some(label), Some(p)) = (second_label, second.as_mut()) {
            let phase = format!("{label}-dpo");
            let trained = if mode == Mode::Coevolve {
                wb.failure_dpo(p, &second_pairs, &phase, it)?
            } else {
                wb.dpo(p, &second_pairs, &phase, it)?
            };
            match trained {
                Some((np, epochs)) => {
                    metrics.extend(
                        epochs
                            .iter()
                            .map(|m| MetricsRow::epoch(tag(&format!("{label}-dpo")), Some(it), m)),
                    );
                    *p = np;
                }
                None => {
                    let msg =
                        format!("iteration {it}: no {label}-agent pairs, {label} DPO skipped");
                    info!("seed {}: {msg}", wb.seed);
                    notices.push(msg);
                }
            }
        }
        match wb.dpo(&target, &target_pairs, "target-dpo", it)? {
            Some((np, epochs)) => {
                metrics.extend(
                    epochs
                        .iter()
                        .map(|m| MetricsRow::epoch(tag("target-dpo"), Some(it), m)),
                );
                target = np;
            }
            None => {
                let msg = format!("iteration {it}: no target pairs, target DPO skipped");
                info!("seed {}: {msg}", wb.seed);
                notices.push(msg);
            }
        }

        let target_eval = wb.evaluate(&target)?;
        metrics.push(MetricsRow::eval(
            tag("target-eval"),
            Some(it),
            target_eval.test.mean,
        ));
        let second_eval = match (second_label, &second) {
            (Some(label), Some(p)) => {
                let e = wb.evaluate(p)?;
                metrics.push(MetricsRow::eval(
                    tag(&format!("{label}-eval")),
                    Some(it),
                    e.test.mean,
                ));
                Some(e)
            }
            _ => None,
        };
        info!(
            "seed {} iteration {it}: target test reward {:.4} ({} target pairs, {} second pairs)",
            wb.seed,
            target_eval.test.mean,
            target_pairs.len(),
            second_pairs.len()
        );

        let threshold = cfg.hard_negative_threshold;
        summaries.push(IterationSummary {
            iteration: it,
            target_rollout_reward: mean_reward(&target_rollouts.trajectories),
            target_stats: traj_stats(&target_rollouts.trajectories, threshold)?,
            second_rollout_reward: second_rollouts
                .as_ref()
                .map(|b| mean_reward(&b.trajectories)),
            second_stats: second_rollouts
                .as_ref()
                .map(|b| traj_stats(&b.trajectories, threshold))
                .transpose()?,
            second_pairs: second_pairs.len(),
            target_pairs: target_pairs.len(),
            rollout_errors: target_rollouts.errors.len()
                + second_rollouts.as_ref().map_or(0, |b| b.errors.len()),
            target_eval: target_eval.summary(),
            second_eval: second_eval.as_ref().map(Evaluation::summary),
            notices: notices.clone(),
        });
        iterations.push(IterationArtifacts {
            iteration: it,
            target_rollouts,
            second_rollouts,
            second_pairs,
            target_pairs,
            target_params: target.clone(),
            second_params: second.clone(),
            target_eval,
            second_eval,
            notices,
        });
    }

    // Dedicated multi-rollout pass for class statistics and diversity.
    let mut analysis_rollouts = BTreeMap::new();
    let mut analysis = Vec::new();
    let final_iter = cfg.iterations;
    let base_batch = wb.rollouts(
        &base,
        AgentTag::Target,
        "analysis-base",
        final_iter,
        cfg.analysis_rollouts,
    )?;
    analysis.push(comparison_row(
        "base",
        &base_batch.trajectories,
        cfg.hard_negative_threshold,
    )?);
    analysis_rollouts.insert("base".to_string(), base_batch.trajectories);
    let tb = wb.rollouts(
        &target,
        AgentTag::Target,
        "analysis-target",
        final_iter,
        cfg.analysis_rollouts,
    )?;
    analysis.push(comparison_row(
        "target",
        &tb.trajectories,
        cfg.hard_negative_threshold,
    )?);
    analysis_rollouts.insert("target".to_string(), tb.trajectories);
    if let (Some(label), Some(p)) = (second_label, &second) {
        let tag = if mode == Mode::Coevolve {
            AgentTag::Failure
        } else {
            AgentTag::Other
        };
        let b = wb.rollouts(
            p,
            tag,
            &format!("analysis-{label}"),
            final_iter,
            cfg.analysis_rollouts,
        )?;
        analysis.push(comparison_row(
            label,
            &b.trajectories,
            cfg.hard_negative_threshold,
        )?);
        analysis_rollouts.insert(label.to_string(), b.trajectories);
    }

    let final_eval = iterations
        .last()
        .map_or_else(|| base_eval.summary(), |i| i.target_eval.summary());
    let report = SeedReport {
        seed: wb.seed,
        base_eval: base_eval.summary(),
        iterations: summaries,
        final_eval,
        analysis,
    };
    Ok(SeedRun {
        seed: wb.seed,
        set: wb.set.clone(),
        experts: wb.experts.clone(),
        base,
        iterations,
        analysis_rollouts,
        metrics,
        report,
    })
}

/// All seeds of `cfg.mode`, in config order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.check()?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let wb = Workbench::new(cfg, seed)?;
        seeds.push(run_seed(&wb)?);
    }
    let n = seeds.len() as f64;
    let report = Report {
        format: REPORT_FORMAT.to_string(),
        mode: cfg.mode,
        config: cfg.clone(),
        mean_base_test_reward: seeds.iter().map(|s| s.report.base_eval.test).sum::<f64>() / n,
        mean_final_test_reward: seeds.iter().map(|s| s.report.final_eval.test).sum::<f64>() / n,
        seeds: seeds.iter().map(|s| s.report.clone()).collect(),
    };
    Ok(RunOutput { report, seeds })
}

fn with_mode(cfg: &ExperimentConfig, mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        ..cfg.clone()
    }
}

pub fn run_coevolution(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment(&with_mode(cfg, Mode::Coevolve))
}

pub fn run_eto_baseline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment(&with_mode(cfg, Mode::Eto))
}

pub fn run_positive_agent_ablation(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment(&with_mode(cfg, Mode::PositiveAgent))
}

/// Class statistics of the failure agent before and after its first DPO
/// phase, on the same rollout streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureProbe {
    pub base: TrajStats,
    pub trained: TrajStats,
    pub pairs: usize,
}

pub fn failure_agent_probe(wb: &Workbench, base: &PolicyParams) -> Result<FailureProbe> {
    let cfg = &wb.cfg;
    let budget = cfg.rollouts_per_instruction;
    let tgt = wb.rollouts(base, AgentTag::Target, "target", 0, budget)?;
    let fail = wb.rollouts(base, AgentTag::Failure, "failure", 0, budget)?;
    let sets =
        FailureSets::from_rollouts(&tgt.trajectories, &fail.trajectories, wb.expert_map.clone())?;
    let pairs = build_failure_pairs(&sets);
    let trained = wb
        .failure_dpo(base, &pairs, "failure-dpo", 0)?
        .map_or_else(|| base.clone(), |(p, _)| p);
    let n = cfg.analysis_rollouts;
    let before = wb.rollouts(base, AgentTag::Failure, "probe", 0, n)?;
    let after = wb.rollouts(&trained, AgentTag::Failure, "probe", 0, n)?;
    Ok(FailureProbe {
        base: traj_stats(&before.trajectories, cfg.hard_negative_threshold)?,
        trained: traj_stats(&after.trajectories, cfg.hard_negative_threshold)?,
        pairs: pairs.len(),
    })
}

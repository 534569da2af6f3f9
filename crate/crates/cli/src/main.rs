//! `coevo`: staged and end-to-end drivers over a run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use coevo_core::analysis::{
    diversity_csv, failure_diversity, stats_csv, stats_table, traj_stats, ComparisonRow,
};
use coevo_core::coevolve::{run_experiment, ExperimentConfig, MetricsRow, Mode, Workbench};
use coevo_core::envsim::{generate_instances, AgentTag, Trajectory};
use coevo_core::policy::PolicyParams;
use coevo_core::prefdata::{
    build_expert_pairs, build_failure_pairs, build_target_pairs, FailureSets,
};
use coevo_core::store::{
    load_config, metrics_csv, read_checkpoint, read_instances, read_pairs, read_report,
    read_trajectories, seed_dir, write_atomic, write_checkpoint, write_instances, write_pairs,
    write_run, write_trajectories, RunManifest,
};
use coevo_core::Error;

#[derive(Parser)]
#[command(
    name = "coevo",
    version,
    about = "Co-evolving target and failure agents on simulated environments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Agent {
    Target,
    Failure,
}

impl Agent {
    fn name(self) -> &'static str {
        match self {
            Agent::Target => "target",
            Agent::Failure => "failure",
        }
    }

    fn tag(self) -> AgentTag {
        match self {
            Agent::Target => AgentTag::Target,
            Agent::Failure => AgentTag::Failure,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PairKind {
    /// Failure-versus-failure pairs for the failure agent.
    Failure,
    /// Expert, failure-agent and failure-failure pairs for the target agent.
    Target,
    /// Expert-versus-own-failure pairs only.
    Eto,
}

impl PairKind {
    fn name(self) -> &'static str {
        match self {
            PairKind::Failure => "failure",
            PairKind::Target => "target",
            PairKind::Eto => "eto",
        }
    }

    /// Which agent trains on these pairs.
    fn agent(self) -> Agent {
        match self {
            PairKind::Failure => Agent::Failure,
            PairKind::Target | PairKind::Eto => Agent::Target,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the instruction set for one seed.
    GenEnv(Common),
    /// Solve every train instruction with the oracle.
    GenExperts(Common),
    /// Behavioral cloning of the shared base policy.
    Sft(Common),
    /// Sampled rollouts of one agent over the train split.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        agent: Agent,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Defaults to the agent's checkpoint from the previous iteration.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Build a preference dataset from an iteration's rollouts.
    BuildPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: PairKind,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// One DPO phase for one agent.
    TrainDpo {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        agent: Agent,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Full co-evolution pipeline.
    Coevolve(Common),
    /// Single-agent expert-versus-failure baseline.
    Eto(Common),
    /// Failure agent replaced by an auxiliary positive agent.
    AblatePositive(Common),
    /// Argmax evaluation of a checkpoint on both splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Class statistics and failure diversity across finished runs.
    Analyze {
        /// Run directories written by coevolve, eto or ablate-positive.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    cfg.check()?;
    Ok(cfg)
}

/// A run directory with its manifest, for stage-at-a-time commands.
struct Stage {
    dir: PathBuf,
    cfg: ExperimentConfig,
    seed: u64,
    manifest: RunManifest,
}

impl Stage {
    fn open(common: &Common, cfg: ExperimentConfig) -> anyhow::Result<Stage> {
        let dir = common.out.clone();
        let manifest = match RunManifest::load(&dir)? {
            Some(m) => {
                if m.config.as_ref() != Some(&cfg) || m.seeds != cfg.seeds {
                    bail!(Error::Config(format!(
                        "{} was created with a different config or seed list",
                        dir.display()
                    )));
                }
                m
            }
            None => RunManifest::new(Some(cfg.clone()), cfg.seeds.clone()),
        };
        Ok(Stage {
            dir,
            seed: cfg.seeds[0],
            cfg,
            manifest,
        })
    }

    fn staged(common: &Common) -> anyhow::Result<Stage> {
        let cfg = load(common)?;
        if cfg.seeds.len() != 1 {
            bail!(Error::Config(
                "staged commands run one seed: pass --seed or list exactly one seed".into()
            ));
        }
        Stage::open(common, cfg)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Run `body` unless `name` already completed, in which case only the
    /// recorded artifact hashes are checked.
    fn run(
        &mut self,
        name: &str,
        body: impl FnOnce(&Stage) -> anyhow::Result<Vec<PathBuf>>,
    ) -> anyhow::Result<()> {
        if self.manifest.is_complete(name) {
            self.manifest.verify(&self.dir, name)?;
            info!("stage {name} already complete; artifacts verified");
            println!("{}", json!({"stage": name, "status": "verified"}));
            return Ok(());
        }
        let artifacts = body(self)?;
        self.manifest.mark(&self.dir, name, &artifacts)?;
        println!(
            "{}",
            json!({"stage": name, "status": "done", "artifacts": artifacts.len()})
        );
        Ok(())
    }

    fn require(&self, name: &str) -> anyhow::Result<()> {
        if !self.manifest.is_complete(name) {
            bail!(Error::Data(format!(
                "stage `{name}` has not completed in {}",
                self.dir.display()
            )));
        }
        Ok(())
    }

    fn workbench(&self) -> anyhow::Result<Workbench> {
        self.require("gen-env")?;
        let set = read_instances(&self.path("instances.json"))?;
        let mut wb = Workbench::with_instances(&self.cfg, self.seed, set)?;
        let experts = self.path("experts.jsonl");
        if self.manifest.is_complete("gen-experts") {
            wb.replace_experts(read_trajectories(&experts)?)?;
        }
        Ok(wb)
    }

    /// The agent's checkpoint entering `iteration`.
    fn incoming_policy(&self, agent: Agent, iteration: usize) -> PathBuf {
        if iteration == 0 {
            self.path("base.policy.json")
        } else {
            self.path(&format!(
                "iter-{}/{}.policy.json",
                iteration - 1,
                agent.name()
            ))
        }
    }

    fn checkpoint(&self, wb: &Workbench, path: &Path) -> anyhow::Result<PolicyParams> {
        let (params, _) = read_checkpoint(path)?;
        if params.weights.len() != wb.featurizer.dim() {
            bail!(Error::Data(format!(
                "{} has {} weights but the config's policy dimension is {}",
                path.display(),
                params.weights.len(),
                wb.featurizer.dim()
            )));
        }
        Ok(params)
    }
}

fn metrics_file(path: &Path, rows: &[MetricsRow]) -> anyhow::Result<()> {
    write_atomic(path, metrics_csv(rows).as_bytes())?;
    Ok(())
}

fn gen_env(common: &Common) -> anyhow::Result<()> {
    let mut st = Stage::staged(common)?;
    st.run("gen-env", |st| {
        let set = generate_instances(&st.cfg.env, st.cfg.n_train, st.cfg.n_test, st.seed)?;
        let p = st.path("instances.json");
        write_instances(&p, &set)?;
        Ok(vec![p])
    })
}

fn gen_experts(common: &Common) -> anyhow::Result<()> {
    let mut st = Stage::staged(common)?;
    st.run("gen-experts", |st| {
        let wb = st.workbench()?;
        let p = st.path("experts.jsonl");
        write_trajectories(&p, &wb.experts)?;
        Ok(vec![p])
    })
}

fn sft(common: &Common) -> anyhow::Result<()> {
    let mut st = Stage::staged(common)?;
    st.run("sft", |st| {
        st.require("gen-experts")?;
        let wb = st.workbench()?;
        let (base, epochs) = wb.train_base()?;
        let eval = wb.evaluate(&base)?;
        let mut rows: Vec<MetricsRow> = epochs
            .iter()
            .map(|m| MetricsRow::epoch("sft".into(), None, m))
            .collect();
        rows.push(MetricsRow::eval("base-eval".into(), None, eval.test.mean));
        let ck = st.path("base.policy.json");
        write_checkpoint(&ck, &base, st.seed)?;
        let mp = st.path("sft.metrics.csv");
        metrics_file(&mp, &rows)?;
        Ok(vec![ck, mp])
    })
}

fn rollout(
    common: &Common,
    agent: Agent,
    iteration: usize,
    policy: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut st = Stage::staged(common)?;
    let name = format!("rollout/iter-{iteration}/{}", agent.name());
    st.run(&name, |st| {
        let wb = st.workbench()?;
        let policy = policy.unwrap_or_else(|| st.incoming_policy(agent, iteration));
        let params = st.checkpoint(&wb, &policy)?;
        let budget = st.cfg.rollouts_per_instruction;
        let batch = wb.rollouts(&params, agent.tag(), agent.name(), iteration, budget)?;
        for e in &batch.errors {
            log::warn!(
                "rollout {} of `{}` failed: {}",
                e.rollout,
                e.instruction_id,
                e.message
            );
        }
        let p = st.path(&format!("iter-{iteration}/{}.rollouts.jsonl", agent.name()));
        write_trajectories(&p, &batch.trajectories)?;
        Ok(vec![p])
    })
}

fn build_pairs(common: &Common, kind: PairKind, iteration: usize) -> anyhow::Result<()> {
    let mut st = Stage::staged(common)?;
    let rival = match kind {
        PairKind::Target => Some(PairKind::Eto),
        PairKind::Eto => Some(PairKind::Target),
        PairKind::Failure => None,
    };
    if let Some(r) = rival {
        let other = format!("pairs/iter-{iteration}/{}", r.name());
        if st.manifest.is_complete(&other) {
            bail!(Error::Config(format!(
                "iteration {iteration} already has {} pairs for the target agent",
                r.name()
            )));
        }
    }
    let name = format!("pairs/iter-{iteration}/{}", kind.name());
    st.run(&name, |st| {
        let wb = st.workbench()?;
        let rollouts = |a: Agent| -> anyhow::Result<Vec<Trajectory>> {
            st.require(&format!("rollout/iter-{iteration}/{}", a.name()))?;
            Ok(read_trajectories(&st.path(&format!(
                "iter-{iteration}/{}.rollouts.jsonl",
                a.name()
            )))?)
        };
        let target = rollouts(Agent::Target)?;
        let pairs = match kind {
            PairKind::Eto => build_expert_pairs(&FailureSets::from_rollouts(
                &target,
                &[],
                wb.expert_map.clone(),
            )?)?,
            PairKind::Failure | PairKind::Target => {
                let failure = rollouts(Agent::Failure)?;
                let sets = FailureSets::from_rollouts(&target, &failure, wb.expert_map.clone())?;
                if kind == PairKind::Failure {
                    build_failure_pairs(&sets)
                } else {
                    build_target_pairs(&sets)?
                }
            }
        };
        info!(
            "{} {} pairs for iteration {iteration}",
            pairs.len(),
            kind.name()
        );
        let p = st.path(&format!(
            "iter-{iteration}/{}.pairs.jsonl",
            kind.agent().name()
        ));
        write_pairs(&p, &pairs)?;
        Ok(vec![p])
    })
}

fn train_dpo(
    common: &Common,
    agent: Agent,
    iteration: usize,
    policy: Option<PathBuf>,
    pairs: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut st = Stage::staged(common)?;
    let name = format!("dpo/iter-{iteration}/{}", agent.name());
    st.run(&name, |st| {
        let wb = st.workbench()?;
        let policy = policy.unwrap_or_else(|| st.incoming_policy(agent, iteration));
        let params = st.checkpoint(&wb, &policy)?;
        let pairs_path = pairs
            .unwrap_or_else(|| st.path(&format!("iter-{iteration}/{}.pairs.jsonl", agent.name())));
        let pairs = read_pairs(&pairs_path)?;
        let phase = format!("{}-dpo", agent.name());
        let trained = match agent {
            Agent::Target => wb.dpo(&params, &pairs, &phase, iteration)?,
            Agent::Failure => wb.failure_dpo(&params, &pairs, &phase, iteration)?,
        };
        let (out, rows) = match trained {
            Some((p, epochs)) => {
                let rows: Vec<MetricsRow> = epochs
                    .iter()
                    .map(|m| MetricsRow::epoch(phase.clone(), Some(iteration), m))
                    .collect();
                (p, rows)
            }
            None => {
                info!(
                    "no pairs in {}; checkpoint carried over",
                    pairs_path.display()
                );
                (params, Vec::new())
            }
        };
        let eval = wb.evaluate(&out)?;
        let mut rows = rows;
        rows.push(MetricsRow::eval(
            format!("{}-eval", agent.name()),
            Some(iteration),
            eval.test.mean,
        ));
        let ck = st.path(&format!("iter-{iteration}/{}.policy.json", agent.name()));
        write_checkpoint(&ck, &out, st.seed)?;
        let mp = st.path(&format!("iter-{iteration}/{}.metrics.csv", agent.name()));
        metrics_file(&mp, &rows)?;
        Ok(vec![ck, mp])
    })
}

fn pipeline(common: &Common, mode: Mode) -> anyhow::Result<()> {
    let mut cfg = load(common)?;
    cfg.mode = mode;
    let mut st = Stage::open(common, cfg)?;
    let stage = mode.name().to_string();
    st.run(&stage, |st| {
        let out = run_experiment(&st.cfg)?;
        info!(
            "{}: mean test reward base {:.4}, final {:.4}",
            mode.name(),
            out.report.mean_base_test_reward,
            out.report.mean_final_test_reward
        );
        Ok(write_run(&st.dir, &out)?)
    })
}

fn eval(common: &Common, policy: &Path) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let seed = cfg.seeds[0];
    let instances = common.out.join("instances.json");
    let set = if instances.exists() {
        read_instances(&instances)?
    } else {
        read_instances(&seed_dir(&common.out, seed).join("instances.json"))?
    };
    let wb = Workbench::with_instances(&cfg, seed, set)?;
    let (params, _) = read_checkpoint(policy)?;
    if params.weights.len() != wb.featurizer.dim() {
        bail!(Error::Data(format!(
            "{} has {} weights but the config's policy dimension is {}",
            policy.display(),
            params.weights.len(),
            wb.featurizer.dim()
        )));
    }
    let e = wb.evaluate(&params)?;
    println!(
        "{}",
        json!({"policy": policy.display().to_string(), "train": e.train.mean, "test": e.test.mean})
    );
    Ok(())
}

/// Every seed's analysis-pass rollouts for `label`, with instruction ids
/// qualified by seed so that groups never merge across instance sets.
fn pooled(run: &Path, seeds: &[u64], label: &str) -> anyhow::Result<Vec<Trajectory>> {
    let mut all = Vec::new();
    for &s in seeds {
        let p = seed_dir(run, s).join(format!("analysis.{label}.jsonl"));
        for mut t in read_trajectories(&p)? {
            t.instruction_id = format!("seed-{s}/{}", t.instruction_id);
            all.push(t);
        }
    }
    Ok(all)
}

fn analyze(runs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for run in runs {
        let report = read_report(&run.join("report.json"))?;
        let mode = report.mode.name();
        let n = seen.entry(mode.to_string()).or_default();
        *n += 1;
        let prefix = if *n == 1 {
            mode.to_string()
        } else {
            format!("{mode}#{n}")
        };
        let seeds: Vec<u64> = report.seeds.iter().map(|s| s.seed).collect();
        let mut labels = vec!["base", "target"];
        labels.extend(report.mode.second_agent());
        for label in labels {
            let ts = pooled(run, &seeds, label)
                .with_context(|| format!("analyzing {}", run.display()))?;
            rows.push(ComparisonRow {
                label: format!("{prefix}/{label}"),
                stats: traj_stats(&ts, report.config.hard_negative_threshold)?,
                diversity: failure_diversity(&ts).ok(),
            });
        }
    }
    write_atomic(&out.join("stats.csv"), stats_csv(&rows).as_bytes())?;
    write_atomic(&out.join("diversity.csv"), diversity_csv(&rows).as_bytes())?;
    let mut summary = serde_json::to_string_pretty(&rows)?;
    summary.push('\n');
    write_atomic(&out.join("summary.json"), summary.as_bytes())?;
    print!("{}", stats_table(&rows));
    Ok(())
}

fn dispatch(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenEnv(c) => gen_env(&c),
        Cmd::GenExperts(c) => gen_experts(&c),
        Cmd::Sft(c) => sft(&c),
        Cmd::Rollout {
            common,
            agent,
            iteration,
            policy,
        } => rollout(&common, agent, iteration, policy),
        Cmd::BuildPairs {
            common,
            kind,
            iteration,
        } => build_pairs(&common, kind, iteration),
        Cmd::TrainDpo {
            common,
            agent,
            iteration,
            policy,
            pairs,
        } => train_dpo(&common, agent, iteration, policy, pairs),
        Cmd::Coevolve(c) => pipeline(&c, Mode::Coevolve),
        Cmd::Eto(c) => pipeline(&c, Mode::Eto),
        Cmd::AblatePositive(c) => pipeline(&c, Mode::PositiveAgent),
        Cmd::Eval { common, policy } => eval(&common, &policy),
        Cmd::Analyze { runs, out } => analyze(&runs, &out),
    }
}

fn error_kind(e: &Error) -> (&'static str, Option<&Path>) {
    match e {
        Error::Config(_) => ("config", None),
        Error::Validation(_) => ("validation", None),
        Error::UnknownInstruction(_) => ("unknown_instruction", None),
        Error::StepAfterDone(_) => ("step_after_done", None),
        Error::IllegalAction { .. } => ("illegal_action", None),
        Error::Replay { .. } => ("replay", None),
        Error::Data(_) => ("data", None),
        Error::Divergence { .. } => ("divergence", None),
        Error::Internal(_) => ("internal", None),
        Error::Parse { path, .. } => ("parse", Some(path)),
        Error::Corruption { path, .. } => ("corruption", Some(path)),
        Error::Format { path, .. } => ("format", Some(path)),
        Error::Io { path, .. } => ("io", Some(path)),
        Error::Json(_) => ("json", None),
    }
}

/// One JSON object on one line.
fn error_line(e: &anyhow::Error) -> String {
    let (kind, path) = e
        .chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(("other", None), error_kind);
    let mut v = json!({"error": kind, "message": format!("{e:#}")});
    if let Some(p) = path {
        v["path"] = json!(p.display().to_string());
    }
    v.to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

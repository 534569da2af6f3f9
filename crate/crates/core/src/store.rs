//! On-disk formats, config loading and the run manifest.
//!
//! Every file is written through a temp file and an atomic rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coevolve::{ExperimentConfig, MetricsRow, Report, RunOutput, SeedRun, REPORT_FORMAT};
use crate::envsim::{AgentTag, InstanceSet, Step, Trajectory};
use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, hash_hex};
use crate::policy::PolicyParams;
use crate::prefdata::PreferencePair;

pub const TRAJ_FORMAT: &str = "coevo-traj-v1";
pub const PAIRS_FORMAT: &str = "coevo-pairs-v1";
pub const POLICY_FORMAT: &str = "coevo-policy-v1";
pub const MANIFEST_FORMAT: &str = "coevo-manifest-v1";
pub const METRICS_HEADER: &str = "phase,iteration,epoch,mean_loss,mean_z,grad_norm,eval_reward";

/// Write `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hash_hex(fnv1a64(&bytes)))
}

/// One JSONL line of a trajectory file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub format: String,
    pub instruction_id: String,
    pub agent_tag: AgentTag,
    pub steps: Vec<Step>,
    pub reward: f64,
    pub content_hash: String,
}

impl TrajectoryRecord {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        TrajectoryRecord {
            format: TRAJ_FORMAT.to_string(),
            instruction_id: t.instruction_id.clone(),
            agent_tag: t.agent,
            steps: t.steps.clone(),
            reward: t.reward,
            content_hash: hash_hex(t.content_hash()),
        }
    }

    pub fn into_trajectory(self) -> Trajectory {
        Trajectory {
            instruction_id: self.instruction_id,
            agent: self.agent_tag,
            steps: self.steps,
            reward: self.reward,
        }
    }
}

fn check_format(path: &Path, expected: &str, found: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn corrupt(path: &Path, line: usize, detail: String) -> Error {
    Error::Corruption {
        path: path.to_path_buf(),
        line,
        detail,
    }
}

fn check_trajectory(path: &Path, line: usize, t: &Trajectory, hash: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t.reward) {
        return Err(corrupt(
            path,
            line,
            format!("reward {} outside [0, 1]", t.reward),
        ));
    }
    let actual = hash_hex(t.content_hash());
    if actual != hash {
        return Err(corrupt(
            path,
            line,
            format!("content hash {hash} does not match {actual}"),
        ));
    }
    Ok(())
}

fn jsonl_lines<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    detail: e.to_string(),
                })
        })
        .collect()
}

pub fn trajectories_to_jsonl(trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajs {
        out.push_str(
            &serde_json::to_string(&TrajectoryRecord::from_trajectory(t))
                .expect("record serializes"),
        );
        out.push('\n');
    }
    out
}

pub fn trajectories_from_jsonl(path: &Path, text: &str) -> Result<Vec<Trajectory>> {
    jsonl_lines::<TrajectoryRecord>(path, text)?
        .into_iter()
        .map(|(line, rec)| {
            check_format(path, TRAJ_FORMAT, &rec.format)?;
            let hash = rec.content_hash.clone();
            let t = rec.into_trajectory();
            check_trajectory(path, line, &t, &hash)?;
            Ok(t)
        })
        .collect()
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    write_atomic(path, trajectories_to_jsonl(trajs).as_bytes())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    trajectories_from_jsonl(path, &read_text(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub format: String,
    pub instruction_id: String,
    pub weight: f64,
    pub sft_enabled: bool,
    pub chosen_hash: String,
    pub rejected_hash: String,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        let rec = PairRecord {
            format: PAIRS_FORMAT.to_string(),
            instruction_id: p.instruction_id.clone(),
            weight: p.weight,
            sft_enabled: p.sft_enabled,
            chosen_hash: hash_hex(p.chosen.content_hash()),
            rejected_hash: hash_hex(p.rejected.content_hash()),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("pair serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    jsonl_lines::<PairRecord>(path, &read_text(path)?)?
        .into_iter()
        .map(|(line, rec)| {
            check_format(path, PAIRS_FORMAT, &rec.format)?;
            check_trajectory(path, line, &rec.chosen, &rec.chosen_hash)?;
            check_trajectory(path, line, &rec.rejected, &rec.rejected_hash)?;
            if !(rec.weight > 0.0 && rec.weight <= 1.0) {
                return Err(corrupt(
                    path,
                    line,
                    format!("pair weight {} outside (0, 1]", rec.weight),
                ));
            }
            Ok(PreferencePair {
                instruction_id: rec.instruction_id,
                chosen: rec.chosen,
                rejected: rec.rejected,
                weight: rec.weight,
                sft_enabled: rec.sft_enabled,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub dim: usize,
    pub seed: u64,
    pub weights: Vec<f64>,
}

pub fn write_checkpoint(path: &Path, params: &PolicyParams, seed: u64) -> Result<()> {
    let ck = Checkpoint {
        format: POLICY_FORMAT.to_string(),
        dim: params.dim(),
        seed,
        weights: params.weights.clone(),
    };
    write_atomic(path, serde_json::to_string(&ck)?.as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<(PolicyParams, u64)> {
    let text = read_text(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    check_format(path, POLICY_FORMAT, &ck.format)?;
    if ck.weights.len() != ck.dim {
        return Err(corrupt(
            path,
            1,
            format!("{} weights for dim {}", ck.weights.len(), ck.dim),
        ));
    }
    let params = PolicyParams {
        weights: ck.weights,
    };
    if !params.is_finite() {
        return Err(corrupt(path, 1, "non-finite weights".into()));
    }
    Ok((params, ck.seed))
}

pub fn write_instances(path: &Path, set: &InstanceSet) -> Result<()> {
    write_atomic(path, set.to_json().as_bytes())
}

pub fn read_instances(path: &Path) -> Result<InstanceSet> {
    let text = read_text(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    let found = v.get("format").and_then(|f| f.as_str()).unwrap_or("");
    check_format(path, crate::envsim::ENV_FORMAT, found)?;
    InstanceSet::from_json(&text)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.phase,
            opt(r.iteration),
            opt(r.epoch),
            opt(r.mean_loss),
            opt(r.mean_z),
            opt(r.grad_norm),
            opt(r.eval_reward)
        ));
    }
    out
}

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = read_text(path)?;
    let r: Report = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    check_format(path, REPORT_FORMAT, &r.format)?;
    Ok(r)
}

/// Parse a TOML experiment config; defaults fill missing keys.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| {
            text[..s.start.min(text.len())].matches('\n').count() + 1
        }),
        detail: e.message().to_string(),
    })?;
    cfg.check()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&read_text(path)?, path)
}

pub fn config_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Path relative to the run directory mapped to its content hash.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub build: String,
    pub config: Option<ExperimentConfig>,
    pub seeds: Vec<u64>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(config: Option<ExperimentConfig>, seeds: Vec<u64>) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            build: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            config,
            seeds,
            stages: BTreeMap::new(),
        }
    }

    /// Existing manifest in `dir`, if any.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = read_text(&path)?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            detail: e.to_string(),
        })?;
        check_format(&path, MANIFEST_FORMAT, &m.format)?;
        Ok(Some(m))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_atomic(&dir.join(Self::FILE), s.as_bytes())
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }

    /// Record `stage` as complete with the current hashes of `artifacts`.
    pub fn mark(&mut self, dir: &Path, stage: &str, artifacts: &[PathBuf]) -> Result<()> {
        let mut rec = StageRecord::default();
        for a in artifacts {
            let rel = a
                .strip_prefix(dir)
                .unwrap_or(a)
                .to_string_lossy()
                .replace('\\', "/");
            rec.artifacts.insert(rel, file_hash(a)?);
        }
        self.stages.insert(stage.to_string(), rec);
        self.save(dir)
    }

    /// Recompute every recorded hash of `stage`.
    pub fn verify(&self, dir: &Path, stage: &str) -> Result<()> {
        let rec = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::Data(format!("stage `{stage}` is not complete")))?;
        for (rel, hash) in &rec.artifacts {
            let path = dir.join(rel);
            let actual = file_hash(&path)?;
            if &actual != hash {
                return Err(corrupt(
                    &path,
                    0,
                    format!("artifact hash {actual} does not match manifest {hash}"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-seed artifact directory inside a run directory.
pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

fn write_seed(dir: &Path, run: &SeedRun, second_label: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |path: PathBuf, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        f(&path)?;
        written.push(path);
        Ok(())
    };
    put(dir.join("instances.json"), &|p| {
        write_instances(p, &run.set)
    })?;
    put(dir.join("experts.jsonl"), &|p| {
        write_trajectories(p, &run.experts)
    })?;
    put(dir.join("base.policy.json"), &|p| {
        write_checkpoint(p, &run.base, run.seed)
    })?;
    let second = second_label.unwrap_or("second");
    for it in &run.iterations {
        let d = dir.join(format!("iter-{}", it.iteration));
        put(d.join("target.rollouts.jsonl"), &|p| {
            write_trajectories(p, &it.target_rollouts.trajectories)
        })?;
        put(d.join("target.pairs.jsonl"), &|p| {
            write_pairs(p, &it.target_pairs)
        })?;
        put(d.join("target.policy.json"), &|p| {
            write_checkpoint(p, &it.target_params, run.seed)
        })?;
        if let Some(b) = &it.second_rollouts {
            put(d.join(format!("{second}.rollouts.jsonl")), &|p| {
                write_trajectories(p, &b.trajectories)
            })?;
            put(d.join(format!("{second}.pairs.jsonl")), &|p| {
                write_pairs(p, &it.second_pairs)
            })?;
        }
        if let Some(params) = &it.second_params {
            put(d.join(format!("{second}.policy.json")), &|p| {
                write_checkpoint(p, params, run.seed)
            })?;
        }
    }
    for (label, trajs) in &run.analysis_rollouts {
        put(dir.join(format!("analysis.{label}.jsonl")), &|p| {
            write_trajectories(p, trajs)
        })?;
    }
    Ok(written)
}

/// Write every artifact of a finished experiment and return the paths.
pub fn write_run(run_dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for run in &out.seeds {
        written.extend(write_seed(
            &seed_dir(run_dir, run.seed),
            run,
            out.report.mode.second_agent(),
        )?);
    }
    let metrics = run_dir.join("metrics.csv");
    write_atomic(&metrics, metrics_csv(out.metrics()).as_bytes())?;
    let report = run_dir.join("report.json");
    write_atomic(&report, report_json(&out.report).as_bytes())?;
    written.push(metrics);
    written.push(report);
    Ok(written)
}

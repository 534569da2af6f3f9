//! SFT and DPO objectives with analytic gradients, and the phase runner.
//!
//! ```text
//! L_SFT    = -(1 / sum_i n_i) * sum_i log pi(e_i)
//! z        = beta * [(l(e+) - l_ref(e+)) - (l(e-) - l_ref(e-))]
//! L_DPO    = -log sigmoid(z)
//! dL_DPO   = -sigmoid(-z) * beta * [grad l(e+) - grad l(e-)]
//! L_pair   = w * [lambda_dpo * L_DPO + sft * lambda_sft * (-l(e+) / n+)]
//! ```

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envsim::{InstanceSet, Trajectory};
use crate::error::{Error, Result};
use crate::hashing::SeedTree;
use crate::policy::{CompiledTrajectory, Featurizer, PolicyParams};
use crate::prefdata::PreferencePair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda_dpo: f64,
    pub lambda_sft: f64,
    pub lr_sft: f64,
    pub lr_dpo: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            lambda_dpo: 1.0,
            lambda_sft: 0.1,
            lr_sft: 1e-5,
            lr_dpo: 1e-6,
            epochs: 3,
            batch_size: 32,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(format!("{prefix}{msg}"));
            }
        };
        check(
            self.beta > 0.0,
            format!("beta must be > 0 (got {})", self.beta),
        );
        check(self.epochs >= 1, "epochs must be >= 1".into());
        check(self.batch_size >= 1, "batch_size must be >= 1".into());
        check(
            self.lr_sft > 0.0,
            format!("lr_sft must be > 0 (got {})", self.lr_sft),
        );
        check(
            self.lr_dpo > 0.0,
            format!("lr_dpo must be > 0 (got {})", self.lr_dpo),
        );
        check(self.weight_decay >= 0.0, "weight_decay must be >= 0".into());
        check(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "adam betas must lie in [0, 1)".into(),
        );
        check(self.adam_eps > 0.0, "adam_eps must be > 0".into());
        check(
            self.grad_clip_norm > 0.0,
            "grad_clip_norm must be > 0".into(),
        );
        errs
    }
}

/// Frozen reference policy for one DPO phase.
#[derive(Clone, Debug)]
pub struct RefSnapshot {
    params: PolicyParams,
}

impl RefSnapshot {
    pub fn new(params: &PolicyParams) -> Self {
        RefSnapshot {
            params: params.clone(),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(dim: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..weights.len() {
            let g = grad[i];
            weights[i] -= lr * weight_decay * weights[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            weights[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `-log sigmoid(z)`, stable for large |z|.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-step mean negative log-likelihood over a batch; adds `scale * grad`
/// into `out`.
pub fn sft_accumulate(
    params: &PolicyParams,
    batch: &[&CompiledTrajectory],
    scale: f64,
    out: &mut [f64],
) -> f64 {
    let steps: usize = batch.iter().map(|t| t.len()).sum();
    if steps == 0 {
        return 0.0;
    }
    let norm = 1.0 / steps as f64;
    let total: f64 = batch
        .iter()
        .map(|t| t.accumulate_grad(params, -scale * norm, out))
        .sum();
    -total * norm
}

pub fn sft_loss_grad_compiled(
    params: &PolicyParams,
    batch: &[CompiledTrajectory],
) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; params.dim()];
    let refs: Vec<&CompiledTrajectory> = batch.iter().collect();
    let loss = sft_accumulate(params, &refs, 1.0, &mut g);
    (loss, g)
}

/// Behavioral-cloning loss over expert trajectories.
pub fn sft_loss_grad(
    params: &PolicyParams,
    set: &InstanceSet,
    featurizer: &Featurizer,
    batch: &[Trajectory],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty SFT batch".into()));
    }
    let compiled = batch
        .iter()
        .map(|t| CompiledTrajectory::compile(set, featurizer, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(sft_loss_grad_compiled(params, &compiled))
}

/// A preference pair with replayed features and cached reference
/// log-likelihoods.
#[derive(Clone, Debug)]
pub struct CompiledPair {
    pub chosen: CompiledTrajectory,
    pub rejected: CompiledTrajectory,
    pub weight: f64,
    pub sft_enabled: bool,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub dpo_loss: f64,
    pub z: f64,
}

impl CompiledPair {
    pub fn new(
        set: &InstanceSet,
        featurizer: &Featurizer,
        pair: &PreferencePair,
        reference: &RefSnapshot,
    ) -> Result<Self> {
        let chosen = CompiledTrajectory::compile(set, featurizer, &pair.chosen)?;
        let rejected = CompiledTrajectory::compile(set, featurizer, &pair.rejected)?;
        Ok(CompiledPair {
            ref_chosen: chosen.logprob(reference.params()),
            ref_rejected: rejected.logprob(reference.params()),
            chosen,
            rejected,
            weight: pair.weight,
            sft_enabled: pair.sft_enabled,
        })
    }

    /// Implicit reward margin `z`.
    pub fn margin(&self, params: &PolicyParams, beta: f64) -> f64 {
        let lc = self.chosen.logprob(params);
        let lr = self.rejected.logprob(params);
        beta * ((lc - self.ref_chosen) - (lr - self.ref_rejected))
    }

    /// Unweighted DPO loss; adds `scale * grad` into `out`.
    pub fn dpo_accumulate(
        &self,
        params: &PolicyParams,
        beta: f64,
        scale: f64,
        out: &mut [f64],
    ) -> PairLoss {
        let z = self.margin(params, beta);
        let coef = -sigmoid(-z) * beta * scale;
        if coef != 0.0 {
            self.chosen.accumulate_grad(params, coef, out);
            self.rejected.accumulate_grad(params, -coef, out);
        }
        let dpo_loss = neg_log_sigmoid(z);
        PairLoss {
            loss: dpo_loss,
            dpo_loss,
            z,
        }
    }

    /// Weighted DPO plus the optional per-step SFT anchor on the chosen side.
    pub fn combined_accumulate(
        &self,
        params: &PolicyParams,
        cfg: &TrainConfig,
        scale: f64,
        out: &mut [f64],
    ) -> PairLoss {
        let w = self.weight;
        let d = self.dpo_accumulate(params, cfg.beta, scale * w * cfg.lambda_dpo, out);
        let mut loss = w * cfg.lambda_dpo * d.dpo_loss;
        if self.sft_enabled && cfg.lambda_sft != 0.0 {
            let n = self.chosen.len() as f64;
            let coef = -scale * w * cfg.lambda_sft / n;
            let lp = self.chosen.accumulate_grad(params, coef, out);
            loss += w * cfg.lambda_sft * (-lp / n);
        }
        PairLoss { loss, ..d }
    }
}

pub fn dpo_pair_loss_grad(
    params: &PolicyParams,
    reference: &RefSnapshot,
    pair: &PreferencePair,
    beta: f64,
    set: &InstanceSet,
    featurizer: &Featurizer,
) -> Result<(f64, Vec<f64>)> {
    let cp = CompiledPair::new(set, featurizer, pair, reference)?;
    let mut g = vec![0.0; params.dim()];
    let l = cp.dpo_accumulate(params, beta, 1.0, &mut g);
    Ok((l.loss, g))
}

pub fn combined_pair_loss_grad(
    params: &PolicyParams,
    reference: &RefSnapshot,
    pair: &PreferencePair,
    cfg: &TrainConfig,
    set: &InstanceSet,
    featurizer: &Featurizer,
) -> Result<(f64, Vec<f64>)> {
    let cp = CompiledPair::new(set, featurizer, pair, reference)?;
    let mut g = vec![0.0; params.dim()];
    let l = cp.combined_accumulate(params, cfg, 1.0, &mut g);
    Ok((l.loss, g))
}

/// Dataset-mean implicit reward margin.
pub fn mean_margin(params: &PolicyParams, pairs: &[CompiledPair], beta: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.margin(params, beta)).sum::<f64>() / pairs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    Sft,
    Dpo,
}

pub enum PhaseData<'a> {
    Sft(&'a [CompiledTrajectory]),
    Dpo(&'a [CompiledPair]),
}

impl PhaseData<'_> {
    fn len(&self) -> usize {
        match self {
            PhaseData::Sft(d) => d.len(),
            PhaseData::Dpo(d) => d.len(),
        }
    }

    pub fn mode(&self) -> PhaseMode {
        match self {
            PhaseData::Sft(_) => PhaseMode::Sft,
            PhaseData::Dpo(_) => PhaseMode::Dpo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    /// DPO phases only.
    pub mean_z: Option<f64>,
    /// Mean pre-clipping gradient norm over the epoch's batches.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub params: PolicyParams,
    pub epochs: Vec<EpochMetrics>,
}

/// Epochs of shuffled mini-batches with AdamW and norm clipping.
/// Deterministic in `cfg.seed` and `label`.
pub fn run_phase(
    params: &PolicyParams,
    data: PhaseData<'_>,
    cfg: &TrainConfig,
    label: &str,
) -> Result<PhaseOutcome> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Data(format!("{label}: empty dataset")));
    }
    let errs = cfg.validate("");
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let mode = data.mode();
    let lr = match mode {
        PhaseMode::Sft => cfg.lr_sft,
        PhaseMode::Dpo => cfg.lr_dpo,
    };
    let dim = params.dim();
    let mut params = params.clone();
    let mut opt = AdamW::new(dim, cfg);
    let mut grad = vec![0.0; dim];
    let tree = SeedTree::new(cfg.seed).child(label);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut tree.index(epoch as u64).rng());
        let mut loss_sum = 0.0;
        let mut loss_weight = 0.0;
        let mut z_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let (batch_loss, weight) = match &data {
                PhaseData::Sft(trajs) => {
                    let batch: Vec<&CompiledTrajectory> =
                        chunk.iter().map(|&i| &trajs[i]).collect();
                    let steps: usize = batch.iter().map(|t| t.len()).sum();
                    (
                        sft_accumulate(&params, &batch, 1.0, &mut grad),
                        steps as f64,
                    )
                }
                PhaseData::Dpo(pairs) => {
                    let scale = 1.0 / chunk.len() as f64;
                    let mut total = 0.0;
                    for &i in chunk {
                        let l = pairs[i].combined_accumulate(&params, cfg, scale, &mut grad);
                        total += l.loss;
                        z_sum += l.z;
                    }
                    (total * scale, chunk.len() as f64)
                }
            };
            let norm = l2_norm(&grad);
            if !batch_loss.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence {
                    phase: label.to_string(),
                    epoch,
                    batch: b,
                    detail: format!("loss {batch_loss}, grad norm {norm}"),
                });
            }
            if norm > cfg.grad_clip_norm {
                let s = cfg.grad_clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            opt.step(&mut params.weights, &grad, lr, cfg.weight_decay);
            if !params.is_finite() {
                return Err(Error::Divergence {
                    phase: label.to_string(),
                    epoch,
                    batch: b,
                    detail: "non-finite parameters after update".into(),
                });
            }
            loss_sum += batch_loss * weight;
            loss_weight += weight;
            norm_sum += norm;
            batches += 1;
        }
        epochs.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / loss_weight,
            mean_z: (mode == PhaseMode::Dpo).then(|| z_sum / n as f64),
            grad_norm: norm_sum / batches as f64,
        });
    }
    Ok(PhaseOutcome { params, epochs })
}

/// Behavioral cloning over expert trajectories.
pub fn run_sft_phase(
    params: &PolicyParams,
    set: &InstanceSet,
    featurizer: &Featurizer,
    experts: &[Trajectory],
    cfg: &TrainConfig,
    label: &str,
) -> Result<PhaseOutcome> {
    let compiled = experts
        .iter()
        .map(|t| CompiledTrajectory::compile(set, featurizer, t))
        .collect::<Result<Vec<_>>>()?;
    run_phase(params, PhaseData::Sft(&compiled), cfg, label)
}

pub fn compile_pairs(
    set: &InstanceSet,
    featurizer: &Featurizer,
    pairs: &[PreferencePair],
    reference: &RefSnapshot,
) -> Result<Vec<CompiledPair>> {
    use rayon::prelude::*;
    pairs
        .par_iter()
        .map(|p| CompiledPair::new(set, featurizer, p, reference))
        .collect()
}

/// DPO phase; the reference is the incoming `params`.
pub fn run_dpo_phase(
    params: &PolicyParams,
    set: &InstanceSet,
    featurizer: &Featurizer,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    label: &str,
) -> Result<(PhaseOutcome, Vec<CompiledPair>)> {
    let reference = RefSnapshot::new(params);
    let compiled = compile_pairs(set, featurizer, pairs, &reference)?;
    let out = run_phase(params, PhaseData::Dpo(&compiled), cfg, label)?;
    Ok((out, compiled))
}

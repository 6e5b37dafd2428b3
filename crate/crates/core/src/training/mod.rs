//! Optimization: Adam with linear warmup, dataset loading, the
//! pre-training and fine-tuning loops, and evaluation metrics.

mod finetune;
mod pretrain;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vabs_autodiff::Tensor;

use crate::encodings::ExternalEmbeddings;
use crate::error::{Error, Result};
use crate::geometry::sasa::{DEFAULT_PROBE_RADIUS, DEFAULT_SPHERE_POINTS};
use crate::geometry::{annotate_sasa, compute_torsions, TorsionSet};
use crate::model::ParamStore;
use crate::objectives::LossWeights;
use crate::structures::chain_file::read_chain;
use crate::structures::ProteinChain;

pub use finetune::{finetune_node_class, node_class_scores, separable_labels, FinetuneLogLine, FinetuneOutcome};
pub use pretrain::{
    evaluate_pretrain, prepare_pretrain_sample, pretrain, pretrain_sample_loss, PretrainEval, PretrainLogLine,
    PretrainOutcome, PreparedSample, SampleLoss,
};

/// Chains shorter than this are skipped by the pre-training loader.
pub const MIN_PRETRAIN_RESIDUES: usize = 4;
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const METRIC_LOG_FILE: &str = "metric_log.jsonl";
pub const FINAL_CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub finetune_noise_fraction: f64,
    /// Å
    pub finetune_noise_sigma: f64,
    /// Intermediate checkpoint period in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            warmup_steps: 5000,
            total_steps: 100_000,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_weights: LossWeights::default(),
            finetune_noise_fraction: 0.2,
            finetune_noise_sigma: 0.5,
            checkpoint_every: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate and adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.finetune_noise_fraction) || !(self.finetune_noise_sigma >= 0.0) {
            return bad("finetune noise fraction must lie in [0, 1] and sigma be non-negative".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak rate, then constant.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient tensors vs parameters".into(),
            expected: params.len(),
            found: grads.len(),
        });
    }
    for ((id, name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() || state.m[id.0].shape() != p.shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (state.m[i].data_mut(), state.v[i].data_mut(), grads[i].data());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// Rank (Mann–Whitney) AUC; ties between a positive and a negative count
/// one half. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// One training chain with its clean-structure targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub name: String,
    /// Clean chain with SASA labels filled in.
    pub chain: ProteinChain,
    pub torsions: Vec<TorsionSet>,
    pub external: Option<ExternalEmbeddings>,
}

impl Example {
    /// Computes the clean-structure labels of `chain`.
    pub fn new(name: impl Into<String>, chain: ProteinChain) -> Result<Self> {
        let chain = if chain.atoms.iter().all(|a| a.sasa_label.is_some()) {
            chain
        } else {
            annotate_sasa(&chain, DEFAULT_PROBE_RADIUS, DEFAULT_SPHERE_POINTS)?
        };
        let torsions = compute_torsions(&chain);
        Ok(Self {
            name: name.into(),
            chain,
            torsions,
            external: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Files skipped for having fewer than the minimum residue count.
    pub skipped: usize,
}

/// Chain files (`*.json`) directly inside `dir`, sorted by name.
pub fn chain_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every chain file of `dir`. External embeddings, when `esm_dir` is
/// given, are read from the sidecar of the same file name in that directory.
pub fn load_dataset(dir: &Path, esm_dir: Option<&Path>, min_residues: usize) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut skipped = 0;
    for path in chain_files(dir)? {
        let chain = read_chain(&path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if chain.n_residues() < min_residues {
            log::warn!("skipping {name}: {} residues", chain.n_residues());
            skipped += 1;
            continue;
        }
        let mut ex = Example::new(name, chain)?;
        if let Some(esm) = esm_dir {
            let side = esm.join(path.file_name().expect("file"));
            ex.external = Some(ExternalEmbeddings::read(&side)?);
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable chain files in {} ({skipped} skipped)",
            dir.display()
        )));
    }
    Ok(Dataset { examples, skipped })
}

/// Deterministic sub-seed for `(seed, parts…)` (SplitMix64 finalizer chain).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

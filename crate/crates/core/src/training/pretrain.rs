use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vabs_autodiff::{Tape, Tensor};

use super::{adam_step, clip_global_norm, derive_seed, lr_schedule, Example, OptimizerState, TrainConfig};
use super::{FINAL_CHECKPOINT_DIR, LOSS_LOG_FILE};
use crate::encodings::{featurize, Features};
use crate::error::{Error, Result};
use crate::geometry::TorsionSet;
use crate::graph::build_bilevel_graph;
use crate::masking::{apply_plan, sample_plan, MaskConfig};
use crate::model::{checkpoint, ForwardTrace, ParamVars, VabsNet, VabsNetConfig, N_RESIDUE_CLASSES};
use crate::objectives::{
    distance_loss, position_loss, residue_type_loss, sasa_loss, torsion_loss, total_pretrain_loss, LossComponents,
    LossReport, LossWeights,
};
use crate::structures::{center_and_rotate, Rotation, Vec3};

/// A featurized, masked and noised sample with its targets.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub features: Features,
    /// Node rows of the CA atoms of masked residues with a standard type.
    pub masked_rows: Arc<[usize]>,
    pub residue_targets: Vec<usize>,
    pub torsion_targets: Vec<TorsionSet>,
    /// Node rows carrying a SASA label, with the labels.
    pub sasa_rows: Arc<[usize]>,
    pub sasa_targets: Vec<f64>,
    /// Noised node rows and their pre-noise positions.
    pub omega: Vec<usize>,
    pub real: Vec<Vec3>,
}

/// Rotation and centering, a fresh mask plan, graph and features, all drawn
/// from `seed`.
pub fn prepare_pretrain_sample(ex: &Example, model: &VabsNetConfig, mask: &MaskConfig, seed: u64) -> Result<PreparedSample> {
    let moved = center_and_rotate(&ex.chain, &Rotation::identity(), Some(derive_seed(seed, &[0])))?;
    let plan = sample_plan(&moved, mask, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1])))?;
    let sample = apply_plan(&moved, &plan)?;
    let graph = build_bilevel_graph(&sample.chain, model.k_atom, model.k_res, model.use_virtual_origin)?;
    let esm = if model.use_external_embeddings {
        Some(ex.external.as_ref().ok_or_else(|| {
            Error::Dataset(format!("{}: external embeddings required by the model config", ex.name))
        })?)
    } else {
        None
    };
    let features = featurize(&graph, &sample.chain, esm, model.external_dim, &model.feature_config())?;

    let mut masked_rows = Vec::new();
    let mut residue_targets = Vec::new();
    let mut torsion_targets = Vec::new();
    for (&r, aa) in sample.record.masked_residues.iter().zip(&sample.record.original_types) {
        if aa.is_standard() {
            masked_rows.push(sample.chain.residues[r].ca_index);
            residue_targets.push(aa.index());
            torsion_targets.push(ex.torsions[r].clone());
        }
    }
    let (sasa_rows, sasa_targets) = sample
        .chain
        .atoms
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.sasa_label.map(|s| (i, s)))
        .unzip::<_, _, Vec<_>, Vec<_>>();
    Ok(PreparedSample {
        features,
        masked_rows: masked_rows.into(),
        residue_targets,
        torsion_targets,
        sasa_rows: sasa_rows.into(),
        sasa_targets,
        omega: sample.noised.iter().map(|n| n.atom).collect(),
        real: sample.noised.iter().map(|n| n.real).collect(),
    })
}

/// Loss report and masked residue-type hits of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub report: LossReport,
    pub correct: usize,
    pub n_masked: usize,
}

/// Forward pass and the weighted pre-training loss of one sample. Returns
/// the loss variable on `tape` for a following backward pass.
pub fn pretrain_sample_loss(
    model: &VabsNet,
    tape: &mut Tape,
    pv: &ParamVars,
    s: &PreparedSample,
    weights: &LossWeights,
) -> Result<(vabs_autodiff::Var, SampleLoss)> {
    let mut trace = ForwardTrace::default();
    let out = model.forward(tape, pv, &s.features, &mut trace)?;
    let logits = model.residue_type_head(tape, pv, out.nodes, &s.masked_rows)?;
    let torsions = model.torsion_head(tape, pv, out.nodes, &s.masked_rows)?;
    let sasa = model.sasa_head(tape, pv, out.nodes, &s.sasa_rows)?;
    let moved = model.movement_head(tape, pv, &s.features, &out, &mut trace)?;
    let comps = LossComponents {
        res_type: residue_type_loss(tape, logits, &s.residue_targets)?,
        torsion: torsion_loss(tape, torsions, &s.torsion_targets)?,
        pos: position_loss(tape, moved, &s.omega, &s.real)?,
        dist: distance_loss(tape, moved, &s.omega, &s.real)?,
        sasa: sasa_loss(tape, sasa, &s.sasa_targets)?,
    };
    let (total, report) = total_pretrain_loss(tape, &comps, weights)?;
    let lv = tape.value(logits);
    let correct = (0..s.residue_targets.len())
        .filter(|&r| argmax(&lv.row_slice(r)[..N_RESIDUE_CLASSES]) == s.residue_targets[r])
        .count();
    Ok((
        total,
        SampleLoss {
            report,
            correct,
            n_masked: s.residue_targets.len(),
        },
    ))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogLine {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    pub masked_accuracy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub log: Vec<PretrainLogLine>,
    pub log_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub model: VabsNet,
}

impl PretrainOutcome {
    /// Mean total loss over the first `n` logged steps.
    pub fn initial_loss(&self, n: usize) -> f64 {
        mean_total(&self.log[..n.min(self.log.len())])
    }

    /// Mean total loss over the last `n` logged steps.
    pub fn final_loss(&self, n: usize) -> f64 {
        mean_total(&self.log[self.log.len().saturating_sub(n)..])
    }
}

fn mean_total(lines: &[PretrainLogLine]) -> f64 {
    lines.iter().map(|l| l.loss.total).sum::<f64>() / lines.len().max(1) as f64
}

/// Index of the `k`-th drawn example: the examples are visited in a fresh
/// seeded permutation each epoch.
fn example_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, epoch as u64])));
    order
}

/// Pre-trains a freshly initialized model on `examples`, writing the loss
/// log and checkpoints into `out_dir`.
pub fn pretrain(
    examples: &[Example],
    model_cfg: &VabsNetConfig,
    train: &TrainConfig,
    mask: &MaskConfig,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    train.validate()?;
    mask.validate()?;
    if examples.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut model = VabsNet::new(model_cfg.clone())?;
    let mut state = OptimizerState::new(&model.params);
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    let mut log = Vec::with_capacity(train.total_steps);
    let n = examples.len();
    let mut order = example_order(n, train.seed, 0);

    for step in 1..=train.total_steps {
        let draws: Vec<(usize, u64)> = (0..train.batch_size)
            .map(|b| {
                let k = (step - 1) * train.batch_size + b;
                if k % n == 0 && k > 0 {
                    order = example_order(n, train.seed, k / n);
                }
                (order[k % n], derive_seed(train.seed, &[3, k as u64]))
            })
            .collect();
        let results: Vec<Result<(Vec<Tensor>, SampleLoss)>> = draws
            .par_iter()
            .map(|&(i, seed)| {
                let s = prepare_pretrain_sample(&examples[i], &model.config, mask, seed)?;
                let mut tape = Tape::new();
                let pv = model.record(&mut tape, true);
                let (loss, sl) = pretrain_sample_loss(&model, &mut tape, &pv, &s, &train.loss_weights)?;
                let grads = tape.backward(loss)?;
                Ok((pv.collect_grads(&grads, &model.params), sl))
            })
            .collect();
        let mut grads: Option<Vec<Tensor>> = None;
        let mut reports = Vec::with_capacity(results.len());
        let (mut correct, mut masked) = (0, 0);
        for r in results {
            let (g, sl) = r?;
            reports.push(sl.report);
            correct += sl.correct;
            masked += sl.n_masked;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = grads.expect("batch_size > 0");
        let inv = 1.0 / train.batch_size as f64;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        let report = LossReport::mean(&reports);
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let grad_norm = clip_global_norm(&mut grads, train.grad_clip);
        let lr = lr_schedule(step, train);
        adam_step(&mut model.params, &grads, &mut state, lr, train)?;

        let line = PretrainLogLine {
            step,
            lr,
            loss: report,
            masked_accuracy: if masked > 0 { correct as f64 / masked as f64 } else { 0.0 },
            grad_norm,
        };
        writeln!(log_file, "{}", serde_json::to_string(&line)?)?;
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.4} acc {:.3}", report.total, line.masked_accuracy);
        }
        log.push(line);
        if train.checkpoint_every > 0 && step % train.checkpoint_every == 0 && step < train.total_steps {
            checkpoint::save(&model, &out_dir.join(format!("checkpoint-{step:08}")), step)?;
        }
    }
    log_file.flush()?;
    let checkpoint_dir = out_dir.join(FINAL_CHECKPOINT_DIR);
    checkpoint::save(&model, &checkpoint_dir, train.total_steps)?;
    Ok(PretrainOutcome {
        log,
        log_path,
        checkpoint_dir,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEval {
    pub loss: LossReport,
    pub masked_accuracy: f64,
    pub n_masked: usize,
}

/// Evaluates `model` on `rounds` fresh mask draws of every example.
pub fn evaluate_pretrain(
    model: &VabsNet,
    examples: &[Example],
    mask: &MaskConfig,
    weights: &LossWeights,
    seed: u64,
    rounds: usize,
) -> Result<PretrainEval> {
    let jobs: Vec<(usize, u64)> = (0..rounds)
        .flat_map(|r| (0..examples.len()).map(move |i| (i, derive_seed(seed, &[4, r as u64, i as u64]))))
        .collect();
    let results: Vec<Result<SampleLoss>> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let sample = prepare_pretrain_sample(&examples[i], &model.config, mask, s)?;
            let mut tape = Tape::new();
            let pv = model.record(&mut tape, false);
            Ok(pretrain_sample_loss(model, &mut tape, &pv, &sample, weights)?.1)
        })
        .collect();
    let mut reports = Vec::new();
    let (mut correct, mut n_masked) = (0, 0);
    for r in results {
        let r = r?;
        reports.push(r.report);
        correct += r.correct;
        n_masked += r.n_masked;
    }
    Ok(PretrainEval {
        loss: LossReport::mean(&reports),
        masked_accuracy: if n_masked > 0 { correct as f64 / n_masked as f64 } else { 0.0 },
        n_masked,
    })
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vabs_autodiff::{Tape, Tensor};

use super::{adam_step, auc, clip_global_norm, derive_seed, lr_schedule, Example, OptimizerState, TrainConfig};
use super::{FINAL_CHECKPOINT_DIR, METRIC_LOG_FILE};
use crate::encodings::{featurize, Features};
use crate::error::{Error, Result};
use crate::graph::build_bilevel_graph;
use crate::masking::{apply_noise, sample_random_residues};
use crate::model::{checkpoint, ForwardTrace, VabsNet, VabsNetConfig};
use crate::objectives::node_class_loss;
use crate::structures::{center_and_rotate, ProteinChain, Rotation};

/// Prefix of the parameters a pre-training checkpoint does not carry.
const NODE_CLASS_PREFIX: &str = "head.node_class.";

/// Copy of `chain` where each atom is labelled by whether its coordinate
/// along `axis` exceeds the chain centroid's.
pub fn separable_labels(chain: &ProteinChain, axis: usize) -> ProteinChain {
    let c = chain.centroid();
    let mut out = chain.clone();
    for a in &mut out.atoms {
        a.label = Some(a.position[axis] > c[axis]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogLine {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// AUC of the fine-tuned model on the clean labelled atoms.
    pub auc: f64,
    pub log: Vec<FinetuneLogLine>,
    pub log_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub model: VabsNet,
}

struct LabelledSample {
    features: Features,
    rows: Arc<[usize]>,
    labels: Vec<f64>,
}

fn labelled_sample(ex: &Example, cfg: &VabsNetConfig, noise: Option<(f64, f64, u64)>) -> Result<LabelledSample> {
    let mut chain = center_and_rotate(&ex.chain, &Rotation::identity(), None)?;
    if let Some((fraction, sigma, seed)) = noise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = sample_random_residues(chain.n_residues(), fraction, &mut rng);
        chain = apply_noise(&chain, &spans, sigma, &mut rng)?.0;
    }
    let graph = build_bilevel_graph(&chain, cfg.k_atom, cfg.k_res, cfg.use_virtual_origin)?;
    let esm = if cfg.use_external_embeddings { ex.external.as_ref() } else { None };
    if cfg.use_external_embeddings && esm.is_none() {
        return Err(Error::Dataset(format!("{}: external embeddings required by the model config", ex.name)));
    }
    let features = featurize(&graph, &chain, esm, cfg.external_dim, &cfg.feature_config())?;
    let (rows, labels): (Vec<usize>, Vec<f64>) = chain
        .atoms
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.label.map(|l| (i, if l { 1.0 } else { 0.0 })))
        .unzip();
    Ok(LabelledSample {
        features,
        rows: rows.into(),
        labels,
    })
}

/// Node-class logits and labels of every labelled atom of the clean,
/// centered examples.
pub fn node_class_scores(model: &VabsNet, examples: &[Example]) -> Result<(Vec<f64>, Vec<bool>)> {
    let per: Vec<Result<(Vec<f64>, Vec<bool>)>> = examples
        .par_iter()
        .map(|ex| {
            let s = labelled_sample(ex, &model.config, None)?;
            let mut tape = Tape::new();
            let pv = model.record(&mut tape, false);
            let out = model.forward(&mut tape, &pv, &s.features, &mut ForwardTrace::default())?;
            let logits = model.node_class_head(&mut tape, &pv, out.nodes, &s.rows)?;
            Ok((tape.value(logits).data().to_vec(), s.labels.iter().map(|&l| l > 0.5).collect()))
        })
        .collect();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for r in per {
        let (s, l) = r?;
        scores.extend(s);
        labels.extend(l);
    }
    Ok((scores, labels))
}

/// Fine-tunes a binary per-atom classifier. With `pretrained` the encoder
/// weights come from that checkpoint and only the node-class head starts
/// fresh; its config must match `model_cfg`.
pub fn finetune_node_class(
    examples: &[Example],
    pretrained: Option<&Path>,
    model_cfg: &VabsNetConfig,
    train: &TrainConfig,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    train.validate()?;
    if examples.is_empty() {
        return Err(Error::Dataset("empty fine-tuning set".into()));
    }
    if !examples.iter().any(|e| e.chain.atoms.iter().any(|a| a.label.is_some())) {
        return Err(Error::Dataset("no atom carries a binary label".into()));
    }
    let mut model = VabsNet::new(model_cfg.clone())?;
    if let Some(dir) = pretrained {
        let fresh = checkpoint::load_into(&mut model, dir, |name| name.starts_with(NODE_CLASS_PREFIX))?;
        log::info!("loaded {}; fresh parameters: {}", dir.display(), fresh.join(", "));
    }
    let mut state = OptimizerState::new(&model.params);
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(METRIC_LOG_FILE);
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    let mut log = Vec::with_capacity(train.total_steps + 1);

    for step in 1..=train.total_steps {
        let draws: Vec<(usize, u64)> = (0..train.batch_size)
            .map(|b| {
                let s = derive_seed(train.seed, &[5, step as u64, b as u64]);
                (ChaCha8Rng::seed_from_u64(s).random_range(0..examples.len()), s)
            })
            .collect();
        let results: Vec<Result<(Vec<Tensor>, f64)>> = draws
            .par_iter()
            .map(|&(i, seed)| {
                let noise = (train.finetune_noise_fraction, train.finetune_noise_sigma, seed);
                let s = labelled_sample(&examples[i], &model.config, Some(noise))?;
                let mut tape = Tape::new();
                let pv = model.record(&mut tape, true);
                let out = model.forward(&mut tape, &pv, &s.features, &mut ForwardTrace::default())?;
                let logits = model.node_class_head(&mut tape, &pv, out.nodes, &s.rows)?;
                let loss = node_class_loss(&mut tape, logits, &s.labels)?;
                let value = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                Ok((pv.collect_grads(&grads, &model.params), value))
            })
            .collect();
        let mut acc: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        for r in results {
            let (g, l) = r?;
            loss += l / train.batch_size as f64;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let mut grads = acc.expect("batch_size > 0");
        let inv = 1.0 / train.batch_size as f64;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        clip_global_norm(&mut grads, train.grad_clip);
        let lr = lr_schedule(step, train);
        adam_step(&mut model.params, &grads, &mut state, lr, train)?;
        let line = FinetuneLogLine {
            step,
            lr,
            loss,
            auc: None,
        };
        writeln!(log_file, "{}", serde_json::to_string(&line)?)?;
        log.push(line);
    }

    let (scores, labels) = node_class_scores(&model, examples)?;
    let value = auc(&scores, &labels)
        .ok_or_else(|| Error::Dataset("AUC needs both positive and negative labels".into()))?;
    let last = FinetuneLogLine {
        step: train.total_steps,
        lr: lr_schedule(train.total_steps, train),
        loss: log.last().map_or(0.0, |l| l.loss),
        auc: Some(value),
    };
    writeln!(log_file, "{}", serde_json::to_string(&last)?)?;
    log_file.flush()?;
    log.push(last);
    let checkpoint_dir = out_dir.join(FINAL_CHECKPOINT_DIR);
    checkpoint::save(&model, &checkpoint_dir, train.total_steps)?;
    Ok(FinetuneOutcome {
        auc: value,
        log,
        log_path,
        checkpoint_dir,
        model,
    })
}

//! `vabs` command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use vabs_core::checks::{run_suite, CheckOutcome, Suite};
use vabs_core::encodings::{featurize, ExternalEmbeddings, Features, TrackFeatures};
use vabs_core::geometry::annotate_sasa;
use vabs_core::graph::{build_bilevel_graph, BilevelGraph};
use vabs_core::masking::{apply_plan, sample_plan, MaskConfig, MaskMode};
use vabs_core::model::{checkpoint, VabsNetConfig};
use vabs_core::structures::chain_file::{read_chain, write_chain};
use vabs_core::structures::{generate_synthetic_chain, parse_pdb};
use vabs_core::training::{
    finetune_node_class, load_dataset, pretrain, separable_labels, TrainConfig, MIN_PRETRAIN_RESIDUES,
};
use vabs_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "vabs", version, about = "Bilevel atom/residue protein representation model")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a PDB file into a canonical chain file.
    Parse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Chain identifier to keep (default: the first chain).
        #[arg(long)]
        chain: Option<String>,
    },
    /// Write synthetic chains into a directory.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_residues: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Label every atom by the side of the centroid it lies on along this axis.
        #[arg(long, value_parser = ["x", "y", "z"])]
        label_axis: Option<String>,
    },
    /// Build the bilevel graph and its features for one chain.
    Featurize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: ModelFlags,
        /// Mask and noise the chain first (plan drawn from --seed).
        #[arg(long)]
        masked: bool,
    },
    /// Annotate a chain file with per-atom solvent accessible areas.
    Sasa {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.4)]
        probe: f64,
        #[arg(long, default_value_t = 960)]
        points: usize,
    },
    /// Pre-train on a directory of chain files.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: ModelFlags,
    },
    /// Fine-tune a per-atom binary classifier on labelled chain files.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pre-trained checkpoint directory.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[command(flatten)]
        opts: ModelFlags,
    },
    /// Run invariant checks.
    Check {
        /// One of gradients, frames, rotation, mask, noise, knn, sasa, attention, or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a checkpoint directory.
    InspectCheckpoint {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags that override the JSON config file.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// JSON file with optional "model", "train" and "mask" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of per-chain external embedding sidecars (same file names).
    #[arg(long)]
    esm_dir: Option<PathBuf>,
    #[arg(long)]
    so3_invariant: bool,
    #[arg(long)]
    no_vector_encoder: bool,
    #[arg(long)]
    mask_mode: Option<MaskMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<VabsNetConfig>,
    pub train: TrainConfig,
    pub mask: MaskConfig,
}

#[derive(Debug, Clone, Serialize)]
struct EffectiveConfig<'a> {
    model: &'a VabsNetConfig,
    train: &'a TrainConfig,
    mask: &'a MaskConfig,
}

impl ModelFlags {
    fn load(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
            None => Ok(RunConfig::default()),
        }
    }

    fn apply(&self, model: &mut VabsNetConfig, rc: &mut RunConfig) {
        if let Some(s) = self.seed {
            rc.train.seed = s;
            rc.mask.seed = s;
            model.init_seed = s;
        }
        if self.so3_invariant {
            *model = model.clone().so3_invariant();
        }
        if self.no_vector_encoder {
            model.use_vector_encoder = false;
        }
        if self.esm_dir.is_some() {
            model.use_external_embeddings = true;
        }
        if let Some(m) = self.mask_mode {
            rc.mask.mode = m;
        }
    }
}

/// Process exit code of a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Config(_) => EXIT_USAGE,
        Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_) | Error::Autodiff(_) | Error::Invariant(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => return usage_error(e, &argv),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // the global pool can only be set once per process; later calls keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn usage_error(e: clap::Error, argv: &[OsString]) -> i32 {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
        _ => {
            eprint!("{e}");
            // list the valid flags of the subcommand that was invoked
            let mut cmd = Cli::command();
            let sub = argv.get(1).and_then(|s| s.to_str()).and_then(|s| cmd.find_subcommand_mut(s).cloned());
            let help = match sub {
                Some(mut s) => s.render_help(),
                None => cmd.render_help(),
            };
            eprintln!("\n{help}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, Error> {
    match cmd {
        Command::Parse { input, out, chain } => {
            let text = fs::read_to_string(&input)?;
            let parsed = parse_pdb(&text, chain.as_deref())?;
            let first = parsed
                .chains
                .first()
                .ok_or_else(|| Error::EmptyResult(format!("{} has no chains", input.display())))?;
            if parsed.chains.len() > 1 {
                let ids: Vec<_> = parsed.chains.iter().map(|c| c.chain_id.as_str()).collect();
                log::warn!("{} chains ({}); writing chain {}", ids.len(), ids.join(", "), first.chain_id);
            }
            log::info!(
                "{} residues, {} atoms; dropped {} residues without CA, {} hydrogens, {} altlocs, {} nonstandard",
                first.n_residues(),
                first.n_atoms(),
                parsed.dropped_no_ca,
                parsed.skipped_hydrogens,
                parsed.skipped_altloc,
                parsed.skipped_nonstandard
            );
            write_chain(&out, first)?;
        }
        Command::GenSynthetic {
            out,
            n_residues,
            count,
            seed,
            label_axis,
        } => {
            fs::create_dir_all(&out)?;
            for i in 0..count {
                let mut chain = generate_synthetic_chain(n_residues, seed.wrapping_add(i as u64))?;
                if let Some(axis) = &label_axis {
                    let a = ["x", "y", "z"].iter().position(|x| x == axis).expect("validated by clap");
                    chain = separable_labels(&chain, a);
                }
                write_chain(&out.join(format!("synthetic_{i:04}.json")), &chain)?;
            }
        }
        Command::Featurize {
            input,
            out,
            opts,
            masked,
        } => {
            let mut rc = opts.load()?;
            let mut model = rc.model.clone().unwrap_or_default();
            opts.apply(&mut model, &mut rc);
            model.validate()?;
            let mut chain = read_chain(&input)?;
            if masked {
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(rc.mask.seed);
                let plan = sample_plan(&chain, &rc.mask, &mut rng)?;
                chain = apply_plan(&chain, &plan)?.chain;
            }
            let esm = match &opts.esm_dir {
                Some(d) => Some(ExternalEmbeddings::read(&d.join(input.file_name().unwrap_or_default()))?),
                None => None,
            };
            let graph = build_bilevel_graph(&chain, model.k_atom, model.k_res, model.use_virtual_origin)?;
            let features = featurize(&graph, &chain, esm.as_ref(), model.external_dim, &model.feature_config())?;
            write_json(&out, &FeatureDump::new(&graph, &features))?;
        }
        Command::Sasa {
            input,
            out,
            probe,
            points,
        } => {
            let chain = annotate_sasa(&read_chain(&input)?, probe, points)?;
            let total: f64 = chain.atoms.iter().filter_map(|a| a.sasa_label).sum();
            log::info!("total SASA {total:.2} Å² over {} atoms", chain.n_atoms());
            write_chain(&out, &chain)?;
        }
        Command::Pretrain { data, out, opts } => {
            let mut rc = opts.load()?;
            let mut model = rc.model.clone().unwrap_or_default();
            opts.apply(&mut model, &mut rc);
            model.validate()?;
            echo_config(&out, &model, &rc)?;
            let ds = load_dataset(&data, opts.esm_dir.as_deref(), MIN_PRETRAIN_RESIDUES)?;
            if ds.skipped > 0 {
                log::warn!("skipped {} chains shorter than {MIN_PRETRAIN_RESIDUES} residues", ds.skipped);
            }
            let r = pretrain(&ds.examples, &model, &rc.train, &rc.mask, &out)?;
            let last = r.log.last().expect("at least one step");
            println!(
                "{} steps, final loss {:.4}; log {}, checkpoint {}",
                last.step,
                last.loss.total,
                r.log_path.display(),
                r.checkpoint_dir.display()
            );
        }
        Command::Finetune {
            data,
            out,
            pretrained,
            opts,
        } => {
            let mut rc = opts.load()?;
            let mut model = match (&rc.model, &pretrained) {
                (Some(m), _) => m.clone(),
                (None, Some(p)) => checkpoint::read_manifest(p)?.config,
                (None, None) => VabsNetConfig::default(),
            };
            opts.apply(&mut model, &mut rc);
            model.validate()?;
            echo_config(&out, &model, &rc)?;
            let ds = load_dataset(&data, opts.esm_dir.as_deref(), 1)?;
            let r = finetune_node_class(&ds.examples, pretrained.as_deref(), &model, &rc.train, &out)?;
            println!("AUC {:.4}; log {}, checkpoint {}", r.auc, r.log_path.display(), r.checkpoint_dir.display());
        }
        Command::Check { suite, seed, out } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![suite.parse()?]
            };
            let mut outcomes: Vec<CheckOutcome> = Vec::new();
            for s in suites {
                let o = run_suite(s, seed)?;
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.suite, o.summary);
                outcomes.push(o);
            }
            if let Some(p) = out {
                write_json(&p, &outcomes)?;
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::InspectCheckpoint { input, out } => {
            let m = checkpoint::read_manifest(&input)?;
            let summary = CheckpointSummary {
                format: m.format.clone(),
                step: m.step,
                n_tensors: m.params.len(),
                n_scalars: m.n_scalars(),
                config: m.config.clone(),
                params: m.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect(),
            };
            // the blob must hold every tensor the manifest names
            checkpoint::load(&input)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(p) = out {
                write_json(&p, &summary)?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn echo_config(out: &Path, model: &VabsNetConfig, rc: &RunConfig) -> Result<(), Error> {
    let eff = EffectiveConfig {
        model,
        train: &rc.train,
        mask: &rc.mask,
    };
    log::info!("effective config: {}", serde_json::to_string(&eff)?);
    fs::create_dir_all(out)?;
    write_json(&out.join("effective_config.json"), &eff)
}

#[derive(Debug, Serialize)]
struct CheckpointSummary {
    format: String,
    step: usize,
    n_tensors: usize,
    n_scalars: usize,
    config: VabsNetConfig,
    params: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Serialize)]
struct TrackDump<'a> {
    src: &'a [usize],
    dst: &'a [usize],
    distance: &'a [f64],
    pair_type: &'a [usize],
    seq_bucket: &'a [usize],
    /// Row-major `[n_edges, direction_dim]`.
    direction: &'a [f64],
}

impl<'a> From<&'a TrackFeatures> for TrackDump<'a> {
    fn from(t: &'a TrackFeatures) -> Self {
        Self {
            src: &t.src,
            dst: &t.dst,
            distance: &t.distance,
            pair_type: &t.pair_type,
            seq_bucket: &t.seq_bucket,
            direction: &t.direction,
        }
    }
}

#[derive(Debug, Serialize)]
struct FeatureDump<'a> {
    graph: &'a BilevelGraph,
    atom_type: &'a [usize],
    residue_type: &'a [usize],
    direction_dim: usize,
    atom: TrackDump<'a>,
    res: TrackDump<'a>,
}

impl<'a> FeatureDump<'a> {
    fn new(graph: &'a BilevelGraph, f: &'a Features) -> Self {
        Self {
            graph,
            atom_type: &f.nodes.atom_type,
            residue_type: &f.nodes.residue_type,
            direction_dim: f.cfg.direction_dim(),
            atom: (&f.atom).into(),
            res: (&f.res).into(),
        }
    }
}

//! Operator surface: `synth-data`, `train`, `eval`, `embed`,
//! `inspect-heatmaps`. Exit codes: 0 success, 1 usage, 2 runtime. The
//! `KEYREID_THREADS` environment variable caps worker parallelism.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use keyreid_core::data::{Dataset, Split};
use keyreid_core::metrics::Descriptor;
use keyreid_core::model::{Ablation, KeyReIdModel};
use keyreid_core::rng::Prng;
use keyreid_core::scalar::Real;
use keyreid_core::train::TrainState;

use crate::config::{Precision, RunConfig};
use crate::dataset::{find_tracklet, load_dataset};
use crate::error::PipelineError;
use crate::run::{embed_split, evaluate_descriptors, fit, TrainingLog};
use crate::synth::SynthConfig;
use crate::{checkpoint, dumps, gallery, synth, Result};

#[derive(Parser, Debug)]
#[command(
    name = "keyreid",
    version,
    about = "Keypoint-guided video person re-identification: synthetic data, training, retrieval",
    after_help = "Environment: KEYREID_THREADS caps worker parallelism."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the seeded synthetic benchmark (stick figures with
    /// ground-truth keypoints) in the manifest layout.
    SynthData(SynthArgs),
    /// Train on a manifest dataset; writes checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Embed query/gallery splits and report mAP and CMC ranks.
    Eval(EvalArgs),
    /// Embed one split into a binary gallery file.
    Embed(EmbedArgs),
    /// Render per-part keypoint heatmaps of one tracklet as PNGs.
    InspectHeatmaps(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Identity count [default: 8]
    #[arg(long, default_value_t = 8)]
    pub ids: usize,
    /// Camera count [default: 2]
    #[arg(long, default_value_t = 2)]
    pub cams: usize,
    /// Tracklets per (identity, camera) cell [default: 6]
    #[arg(long, default_value_t = 6)]
    pub tracklets: usize,
    /// Frames per tracklet [default: 8]
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Frame height in pixels [default: 64]
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Frame width in pixels [default: 32]
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Generator seed; identical seeds give identical bytes [default: 1]
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory for manifest, frames and keypoint files
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory or manifest file
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints and the training log
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file (defaults < file < flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override: epoch count
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override: rng seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override: base learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override: optimization steps per epoch (0 = derive from dataset)
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Override: evaluate every N epochs (0 = only at the end)
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Disable one pathway: no_tcss, no_kps, no_local or no_global
    #[arg(long)]
    pub ablate: Option<String>,
    /// Element precision: f64 (default) or f32
    #[arg(long)]
    pub precision: Option<String>,
    /// Resume from a checkpoint (uses the stored config)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the full default config as TOML and exit
    #[arg(long, default_value_t = false)]
    pub print_config: bool,
    /// Suppress per-step progress on stderr
    #[arg(long, default_value_t = false)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or manifest file
    #[arg(long)]
    pub data: PathBuf,
    /// Pre-embedded gallery file; embeds the gallery split when absent
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Write the metrics report as JSON here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dump a top-k ranking strip for a query ("q0" or a tracklet key)
    #[arg(long)]
    pub dump_ranking: Option<String>,
    /// Entries in the ranking strip [default: 10]
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Dump per-frame attention weights + importance maps for a tracklet key
    #[arg(long)]
    pub dump_attention: Option<String>,
    /// Directory for qualitative dumps [default: ./dumps]
    #[arg(long, default_value = "dumps")]
    pub dump_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or manifest file
    #[arg(long)]
    pub data: PathBuf,
    /// Split to embed: train, query or gallery [default: gallery]
    #[arg(long, default_value = "gallery")]
    pub split: String,
    /// Output gallery file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Dataset directory or manifest file
    #[arg(long)]
    pub data: PathBuf,
    /// Tracklet key (manifest rel_dir)
    #[arg(long)]
    pub tracklet: String,
    /// Frame index within the tracklet [default: 0]
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Output directory for the PNGs
    #[arg(long)]
    pub out: PathBuf,
    /// Override the Gaussian sigma in pixels
    #[arg(long)]
    pub sigma: Option<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Embed(args) => cmd_embed(args),
        Command::InspectHeatmaps(args) => cmd_inspect_heatmaps(args),
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(crate::dataset::MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

fn cmd_synth_data(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_ids: args.ids,
        cams: args.cams,
        tracklets_per_id_cam: args.tracklets,
        frames_per_tracklet: args.frames,
        h: args.height,
        w: args.width,
        seed: args.seed,
    };
    let manifest = synth::generate_to_disk(&cfg, &args.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.print_config {
        println!("{}", RunConfig::default().to_toml());
        return Ok(());
    }
    if args.resume.is_some() && args.config.is_some() {
        return Err(PipelineError::Usage(
            "--resume uses the checkpoint's stored config; drop --config".into(),
        ));
    }

    if let Some(resume_path) = &args.resume {
        let loaded = checkpoint::load(resume_path)?;
        let config = loaded.config.clone();
        let dataset = load_dataset(&manifest_path(&args.data), Some(config.image_size()))?;
        return match config.precision {
            Precision::F64 => resume_train::<f64>(loaded, config, dataset, &args),
            Precision::F32 => resume_train::<f32>(loaded, config, dataset, &args),
        };
    }

    let mut config = match &args.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if let Some(lr) = args.lr {
        config.train.base_lr = lr;
    }
    if let Some(s) = args.steps_per_epoch {
        config.train.steps_per_epoch = s;
    }
    if let Some(i) = args.eval_interval {
        config.train.eval_interval = i;
    }
    if let Some(a) = &args.ablate {
        config.ablation = Ablation::parse(a)?;
    }
    if let Some(p) = &args.precision {
        config.precision = Precision::parse(p)?;
    }

    let dataset = load_dataset(&manifest_path(&args.data), Some(config.image_size()))?;
    let config = config.resolved_for(dataset.num_identities(), dataset.num_cameras())?;
    match config.precision {
        Precision::F64 => fresh_train::<f64>(config, dataset, &args),
        Precision::F32 => fresh_train::<f32>(config, dataset, &args),
    }
}

fn fresh_train<F: Real>(config: RunConfig, dataset: Dataset, args: &TrainArgs) -> Result<()> {
    let mut rng = Prng::seed_from_u64(config.train.seed);
    let model = KeyReIdModel::<F>::init(config.model_config()?, &mut rng)?;
    let mut state = TrainState::new(
        model,
        config.train.clone(),
        config.loss,
        config.ablation,
    )?;
    run_train(&mut state, dataset, config, args, false)
}

fn resume_train<F: Real>(
    loaded: checkpoint::LoadedCheckpoint,
    config: RunConfig,
    dataset: Dataset,
    args: &TrainArgs,
) -> Result<()> {
    let mut state = loaded.into_train_state::<F>()?;
    if let Some(e) = args.epochs {
        state.config.epochs = e;
    }
    let mut config = config;
    config.train = state.config.clone();
    run_train(&mut state, dataset, config, args, true)
}

fn run_train<F: Real>(
    state: &mut TrainState<F>,
    dataset: Dataset,
    config: RunConfig,
    args: &TrainArgs,
    resuming: bool,
) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| PipelineError::io(&args.out, e))?;
    let effective = config.to_toml();
    std::fs::write(args.out.join("effective_config.toml"), &effective)
        .map_err(|e| PipelineError::io(&args.out, e))?;
    if !args.quiet {
        eprintln!("effective config:\n{effective}");
        eprintln!(
            "dataset: {} train / {} query / {} gallery tracklets, {} identities, {} parameters",
            dataset.train.len(),
            dataset.query.len(),
            dataset.gallery.len(),
            dataset.num_identities(),
            state.model.num_parameters(),
        );
    }
    let log_path = args.out.join("training_log.jsonl");
    let mut log = if resuming {
        TrainingLog::append(&log_path)?
    } else {
        TrainingLog::create(&log_path, &config)?
    };
    let report = fit(state, &dataset, &config, &args.out, &mut log, args.quiet)?;
    if let Some(result) = &report.final_eval {
        println!(
            "final eval: mAP {:.4} rank-1 {:.4} over {} queries",
            result.map,
            result.rank(1),
            result.num_valid_queries
        );
    }
    println!("checkpoint: {}", report.last_checkpoint.display());
    Ok(())
}

fn load_model_and_dataset<F: Real>(
    checkpoint_path: &Path,
    data: &Path,
) -> Result<(KeyReIdModel<F>, Dataset, RunConfig, String)> {
    let loaded = checkpoint::load(checkpoint_path)?;
    let config = loaded.config.clone();
    let hash = loaded.data_hash.clone();
    let dataset = load_dataset(&manifest_path(data), Some(config.image_size()))?;
    let state = loaded.into_train_state::<F>()?;
    Ok((state.model, dataset, config, hash))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    match loaded.config.precision {
        Precision::F64 => eval_with::<f64>(args),
        Precision::F32 => eval_with::<f32>(args),
    }
}

fn eval_with<F: Real>(args: EvalArgs) -> Result<()> {
    let (model, dataset, config, hash) =
        load_model_and_dataset::<F>(&args.checkpoint, &args.data)?;
    let ablation = config.ablation;
    if dataset.query.is_empty() {
        return Err(PipelineError::Usage("no tracklets in the query split".into()));
    }
    let queries = embed_split(&model, &dataset.query, &ablation)?;
    let gallery_descriptors: Vec<Descriptor> = match &args.gallery {
        Some(path) => {
            let g = gallery::load(path, Some(model.descriptor_width(&ablation)), Some(&hash))?;
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            g.descriptors
        }
        None => {
            if dataset.gallery.is_empty() {
                return Err(PipelineError::Usage("no tracklets in the gallery split".into()));
            }
            embed_split(&model, &dataset.gallery, &ablation)?
        }
    };
    let max_rank = gallery_descriptors.len().min(20).max(1);
    let result = evaluate_descriptors(&queries, &gallery_descriptors, max_rank)?;

    println!("queries evaluated: {}", result.num_valid_queries);
    println!("mAP     {:.4}", result.map);
    for k in [1usize, 5, 10, 20] {
        if k <= result.cmc.len() {
            println!("Rank-{k:<2} {:.4}", result.rank(k));
        }
    }
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&result).unwrap())
            .map_err(|e| PipelineError::io(out, e))?;
        println!("report: {}", out.display());
    }

    if let Some(spec) = &args.dump_ranking {
        let qi = resolve_query_index(&dataset, spec)?;
        let query_tracklet = &dataset.query[qi];
        let qv = vec![queries[qi].vector.clone()];
        let gv: Vec<Vec<f32>> = gallery_descriptors.iter().map(|d| d.vector.clone()).collect();
        let dist = keyreid_core::metrics::pairwise_distances(&qv, &gv)?;
        let mut order: Vec<usize> = (0..gallery_descriptors.len())
            .filter(|&g| {
                !(gallery_descriptors[g].person_id == queries[qi].person_id
                    && gallery_descriptors[g].camera_id == queries[qi].camera_id)
            })
            .collect();
        order.sort_by(|&a, &b| dist[0][a].partial_cmp(&dist[0][b]).unwrap().then(a.cmp(&b)));
        let ranked: Vec<(Descriptor, bool)> = order
            .iter()
            .map(|&g| {
                let d = gallery_descriptors[g].clone();
                let correct = d.person_id == queries[qi].person_id;
                (d, correct)
            })
            .collect();
        let path = args.dump_dir.join(format!("{}_top{}.png", query_tracklet.key, args.top));
        dumps::dump_ranking_strip(&dataset, query_tracklet, &ranked, args.top, &path)?;
        println!("ranking strip: {}", path.display());
    }

    if let Some(key) = &args.dump_attention {
        let tracklet = find_tracklet(&dataset, key).ok_or_else(|| {
            PipelineError::Usage(format!("tracklet `{key}` not found in the dataset"))
        })?;
        let path = dumps::dump_attention(&model, tracklet, &args.dump_dir)?;
        println!("attention dump: {}", path.display());
    }
    Ok(())
}

fn resolve_query_index(dataset: &Dataset, spec: &str) -> Result<usize> {
    if let Some(rest) = spec.strip_prefix('q') {
        if let Ok(idx) = rest.parse::<usize>() {
            if idx < dataset.query.len() {
                return Ok(idx);
            }
            return Err(PipelineError::Usage(format!(
                "query index {idx} outside the {} queries",
                dataset.query.len()
            )));
        }
    }
    dataset
        .query
        .iter()
        .position(|t| t.key == spec)
        .ok_or_else(|| PipelineError::Usage(format!("`{spec}` is not a query tracklet")))
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    match loaded.config.precision {
        Precision::F64 => embed_with::<f64>(args),
        Precision::F32 => embed_with::<f32>(args),
    }
}

fn embed_with<F: Real>(args: EmbedArgs) -> Result<()> {
    let (model, dataset, config, hash) =
        load_model_and_dataset::<F>(&args.checkpoint, &args.data)?;
    let split = Split::parse(&args.split)
        .map_err(|e| PipelineError::Usage(e.to_string()))?;
    let tracklets = dataset.split(split);
    if tracklets.is_empty() {
        return Err(PipelineError::Usage(format!(
            "no tracklets in split `{}`",
            args.split
        )));
    }
    let descriptors = embed_split(&model, tracklets, &config.ablation)?;
    gallery::save(
        &descriptors,
        model.config.num_parts(),
        model.config.backbone.dim,
        model.config.backbone.frames,
        &hash,
        &args.out,
    )?;
    println!(
        "embedded {} tracklets (width {}) into {}",
        descriptors.len(),
        descriptors.first().map(|d| d.vector.len()).unwrap_or(0),
        args.out.display()
    );
    Ok(())
}

fn cmd_inspect_heatmaps(args: InspectArgs) -> Result<()> {
    let dataset = load_dataset(&manifest_path(&args.data), None)?;
    let tracklet = find_tracklet(&dataset, &args.tracklet).ok_or_else(|| {
        PipelineError::Usage(format!("tracklet `{}` not found in the dataset", args.tracklet))
    })?;
    let grouping = keyreid_core::pose::PartGrouping::coco17_six_parts();
    let mut pose = keyreid_core::pose::PoseConfig::for_height(tracklet.frames[0].h);
    if let Some(s) = args.sigma {
        if s <= 0.0 {
            return Err(PipelineError::Usage("sigma must be positive".into()));
        }
        pose.sigma = s;
    }
    let written = dumps::dump_part_heatmaps(tracklet, args.frame, &grouping, &pose, &args.out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

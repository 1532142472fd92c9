//! The epoch loop: PK batches, SGD steps, line-delimited JSON logging,
//! per-epoch checkpoints, periodic retrieval evaluation, resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use keyreid_core::data::Dataset;
use keyreid_core::metrics::{evaluate, pairwise_distances, Descriptor, EvalResult};
use keyreid_core::model::KeyReIdModel;
use keyreid_core::objectives::LossBreakdown;
use keyreid_core::scalar::Real;
use keyreid_core::train::{pk_sample, train_step, TrainState};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::PipelineError;
use crate::Result;

pub const LAST_CHECKPOINT: &str = "checkpoint_last.krcp";

#[derive(Serialize)]
struct HeaderLine<'a> {
    record: &'static str,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct StepLine<'a> {
    record: &'static str,
    epoch: usize,
    step: usize,
    lr: f64,
    #[serde(flatten)]
    losses: &'a LossBreakdown,
    wall_ms: f64,
}

#[derive(Serialize)]
struct EvalLine<'a> {
    record: &'static str,
    epoch: usize,
    #[serde(flatten)]
    result: &'a EvalResult,
}

pub struct TrainingLog {
    file: fs::File,
    pub path: PathBuf,
}

impl TrainingLog {
    pub fn create(path: &Path, config: &RunConfig) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
        let header = HeaderLine {
            record: "header",
            config,
        };
        writeln!(file, "{}", serde_json::to_string(&header).unwrap())
            .map_err(|e| PipelineError::io(path, e))?;
        Ok(TrainingLog {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Open for append when resuming.
    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PipelineError::io(path, e))?;
        Ok(TrainingLog {
            file,
            path: path.to_path_buf(),
        })
    }

    fn write_line<S: Serialize>(&mut self, line: &S) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(line).unwrap())
            .map_err(|e| PipelineError::io(&self.path, e))
    }
}

/// Embed every tracklet of a split in order.
pub fn embed_split<F: Real>(
    model: &KeyReIdModel<F>,
    tracklets: &[keyreid_core::data::Tracklet],
    ablation: &keyreid_core::model::Ablation,
) -> Result<Vec<Descriptor>> {
    tracklets
        .iter()
        .map(|t| model.embed_tracklet(t, ablation).map_err(PipelineError::Core))
        .collect()
}

/// Query-vs-gallery retrieval evaluation from descriptor lists.
pub fn evaluate_descriptors(
    queries: &[Descriptor],
    gallery: &[Descriptor],
    max_rank: usize,
) -> Result<EvalResult> {
    let qv: Vec<Vec<f32>> = queries.iter().map(|d| d.vector.clone()).collect();
    let gv: Vec<Vec<f32>> = gallery.iter().map(|d| d.vector.clone()).collect();
    let dist = pairwise_distances(&qv, &gv)?;
    let q_ids: Vec<usize> = queries.iter().map(|d| d.person_id).collect();
    let q_cams: Vec<usize> = queries.iter().map(|d| d.camera_id).collect();
    let g_ids: Vec<usize> = gallery.iter().map(|d| d.person_id).collect();
    let g_cams: Vec<usize> = gallery.iter().map(|d| d.camera_id).collect();
    Ok(evaluate(&dist, &q_ids, &q_cams, &g_ids, &g_cams, max_rank)?)
}

pub fn evaluate_on_dataset<F: Real>(
    model: &KeyReIdModel<F>,
    dataset: &Dataset,
    ablation: &keyreid_core::model::Ablation,
) -> Result<EvalResult> {
    let queries = embed_split(model, &dataset.query, ablation)?;
    let gallery = embed_split(model, &dataset.gallery, ablation)?;
    let max_rank = dataset.gallery.len().min(20).max(1);
    evaluate_descriptors(&queries, &gallery, max_rank)
}

pub struct FitReport {
    pub final_eval: Option<EvalResult>,
    pub best_map: f64,
    pub last_checkpoint: PathBuf,
}

/// Run the remaining epochs of a training state; checkpoints land in
/// `out/`, one per epoch plus a rolling last.
pub fn fit<F: Real>(
    state: &mut TrainState<F>,
    dataset: &Dataset,
    config: &RunConfig,
    out: &Path,
    log: &mut TrainingLog,
    quiet: bool,
) -> Result<FitReport> {
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let steps = state
        .config
        .effective_steps_per_epoch(dataset.train.len());
    let epochs = state.config.epochs;
    let mut final_eval = None;
    while state.epoch < epochs {
        let epoch = state.epoch;
        let lr = state.lr_for_epoch(epoch);
        for step in 0..steps {
            let start = Instant::now();
            let batch = pk_sample(
                &dataset.train,
                state.config.p_ids,
                state.config.k_instances,
                state.model.config.backbone.frames,
                &state.config.augment,
                &state.model.config.grouping,
                &mut state.rng,
            )?;
            let breakdown = train_step(state, &batch, lr)?;
            log.write_line(&StepLine {
                record: "step",
                epoch,
                step,
                lr,
                losses: &breakdown,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })?;
            if !quiet {
                eprintln!(
                    "epoch {epoch:3} step {step:3} lr {lr:.6} total {:.4} (global {:.4} local {:.4})",
                    breakdown.total, breakdown.global_total, breakdown.local_total
                );
            }
        }
        state.epoch += 1;

        let interval = state.config.eval_interval;
        let due = interval > 0 && state.epoch % interval == 0;
        if (due || state.epoch == epochs) && !dataset.query.is_empty() && !dataset.gallery.is_empty()
        {
            let result = evaluate_on_dataset(&state.model, dataset, &state.ablation)?;
            if result.map > state.best_map {
                state.best_map = result.map;
            }
            log.write_line(&EvalLine {
                record: "eval",
                epoch: state.epoch,
                result: &result,
            })?;
            if !quiet {
                eprintln!(
                    "epoch {} eval: mAP {:.4} rank-1 {:.4} ({} queries)",
                    state.epoch,
                    result.map,
                    result.rank(1),
                    result.num_valid_queries
                );
            }
            final_eval = Some(result);
        }

        checkpoint::save(state, config, &out.join(format!("epoch_{:03}.krcp", state.epoch)))?;
        checkpoint::save(state, config, &out.join(LAST_CHECKPOINT))?;
    }
    Ok(FitReport {
        final_eval,
        best_map: state.best_map,
        last_checkpoint: out.join(LAST_CHECKPOINT),
    })
}

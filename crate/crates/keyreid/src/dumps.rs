//! Qualitative artifacts: part heatmaps as grayscale PNGs, clip-level
//! patch-importance maps, per-frame attention weights as JSON, and top-k
//! ranking strips with correctness borders.

use std::fs;
use std::path::Path;

use keyreid_core::backbone::PatchLayout;
use keyreid_core::data::{Dataset, Image, SampleMode, Tracklet};
use keyreid_core::metrics::Descriptor;
use keyreid_core::model::{Ablation, KeyReIdModel};
use keyreid_core::pose::{clip_part_importance, joint_heatmap, part_heatmaps, PartGrouping, PoseConfig};
use keyreid_core::rng::Prng;
use keyreid_core::scalar::Real;
use keyreid_core::tensor::Tape;
use serde::Serialize;

use crate::dataset::save_png;
use crate::error::PipelineError;
use crate::Result;

/// Grayscale PNG of a `[0,1]`-valued map.
pub fn save_gray_png(map: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| PipelineError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Write one grayscale PNG per part heatmap for a chosen frame.
pub fn dump_part_heatmaps(
    tracklet: &Tracklet,
    frame: usize,
    grouping: &PartGrouping,
    pose: &PoseConfig,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    if frame >= tracklet.frames.len() {
        return Err(PipelineError::Usage(format!(
            "frame {frame} outside tracklet `{}` ({} frames)",
            tracklet.key,
            tracklet.frames.len()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let (h, w) = (tracklet.frames[0].h, tracklet.frames[0].w);
    let kf = &tracklet.keypoints[frame];
    let mut joint_maps = Vec::with_capacity(kf.joints.len());
    for j in &kf.joints {
        joint_maps.push(joint_heatmap(
            j.x,
            j.y,
            j.confidence,
            h,
            w,
            pose.sigma,
            pose.confidence_floor,
        )?);
    }
    let parts = part_heatmaps(&joint_maps, grouping)?;
    let mut written = Vec::new();
    for (k, map) in parts.iter().enumerate() {
        let path = out_dir.join(format!("{}_frame{frame:03}_part{k}.png", tracklet.key));
        save_gray_png(map, h, w, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Patch-importance rows rendered on the patch grid, upscaled for
/// visibility, one PNG per part.
pub fn dump_importance_maps(
    tracklet: &Tracklet,
    frames: usize,
    layout: &PatchLayout,
    grouping: &PartGrouping,
    pose: &PoseConfig,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let mut rng = Prng::seed_from_u64(0);
    let clip = keyreid_core::data::sample_clip(tracklet, frames, SampleMode::Inference, &mut rng)?;
    let importance = clip_part_importance(&clip.keypoints, layout, grouping, pose)?;
    let (rows, cols) = (layout.rows(), layout.cols());
    let scale = 8usize;
    let mut written = Vec::new();
    for (k, row) in importance.iter().enumerate() {
        let peak = row.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        let mut up = vec![0.0f64; rows * scale * cols * scale];
        for r in 0..rows {
            for c in 0..cols {
                let v = row[r * cols + c] / peak;
                for dy in 0..scale {
                    for dx in 0..scale {
                        up[(r * scale + dy) * cols * scale + c * scale + dx] = v;
                    }
                }
            }
        }
        let path = out_dir.join(format!("{}_importance_part{k}.png", tracklet.key));
        save_gray_png(&up, rows * scale, cols * scale, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct AttentionDump<'a> {
    tracklet: &'a str,
    sampled_frames: &'a [usize],
    attention: Vec<f64>,
    raw_scores: Vec<f64>,
}

/// Per-frame temporal attention weights of one tracklet as JSON, plus the
/// part-importance PNGs next to it.
pub fn dump_attention<F: Real>(
    model: &KeyReIdModel<F>,
    tracklet: &Tracklet,
    out_dir: &Path,
) -> Result<std::path::PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let mut rng = Prng::seed_from_u64(0);
    let clip = keyreid_core::data::sample_clip(
        tracklet,
        model.config.backbone.frames,
        SampleMode::Inference,
        &mut rng,
    )?;
    let prepared = model.prepare_clip(&clip, &Ablation::NONE)?;
    let tape = Tape::new();
    let tokens = model
        .backbone
        .forward(&tape, &prepared.frames, prepared.camera_id, None)?;
    let refined = model.global_branch.refine_tokens(tokens, None);
    let layout = model.config.backbone.layout();
    let (g_cls, _) = keyreid_core::backbone::dispatch(
        refined,
        model.config.backbone.frames,
        layout.n(),
    );
    let (a_raw, alpha) = model.global_branch.attention.forward(g_cls);
    let dump = AttentionDump {
        tracklet: &tracklet.key,
        sampled_frames: &clip.sampled_indices,
        attention: alpha.value().iter().map(|v| v.as_f64()).collect(),
        raw_scores: a_raw.value().iter().map(|v| v.as_f64()).collect(),
    };
    let path = out_dir.join(format!("{}_attention.json", tracklet.key));
    fs::write(&path, serde_json::to_string_pretty(&dump).unwrap())
        .map_err(|e| PipelineError::io(&path, e))?;
    dump_importance_maps(
        tracklet,
        model.config.backbone.frames,
        &layout,
        &model.config.grouping,
        &model.config.pose,
        out_dir,
    )?;
    Ok(path)
}

fn bordered(frame: &Image, correct: bool) -> Image {
    let mut out = frame.clone();
    let color = if correct {
        [0.0, 0.85, 0.0]
    } else {
        [0.9, 0.0, 0.0]
    };
    let b = 2usize.min(out.h / 2).min(out.w / 2);
    for y in 0..out.h {
        for x in 0..out.w {
            if y < b || y >= out.h - b || x < b || x >= out.w - b {
                out.set_pixel(y, x, color);
            }
        }
    }
    out
}

/// Horizontal strip: the query's first frame, a separator, then the top-k
/// gallery first-frames with green (same identity) or red borders.
pub fn dump_ranking_strip(
    dataset: &Dataset,
    query: &Tracklet,
    ranked_gallery: &[(Descriptor, bool)],
    top: usize,
    path: &Path,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let (h, w) = (query.frames[0].h, query.frames[0].w);
    let sep = 3usize;
    let shown = ranked_gallery.len().min(top);
    let total_w = w + sep + shown * (w + sep);
    let mut strip = Image::new(h, total_w);
    for v in strip.data.iter_mut() {
        *v = 1.0;
    }
    let blit = |strip: &mut Image, img: &Image, x0: usize| {
        for y in 0..h.min(img.h) {
            for x in 0..w.min(img.w) {
                strip.set_pixel(y, x0 + x, img.pixel(y, x));
            }
        }
    };
    blit(&mut strip, &query.frames[0], 0);
    for (i, (descriptor, correct)) in ranked_gallery.iter().take(top).enumerate() {
        let Some(t) = crate::dataset::find_tracklet(dataset, &descriptor.key) else {
            continue;
        };
        blit(&mut strip, &bordered(&t.frames[0], *correct), w + sep + i * (w + sep));
    }
    save_png(&strip, path)
}

//! Manifest-driven dataset loading and saving.
//!
//! Layout on disk: a UTF-8 manifest with one tab-separated record per
//! tracklet (`rel_dir  person_id  camera_id  split  keypoint_file`), PNG
//! frames named `frame_%05d.png` inside each tracklet directory, and one
//! plain-text keypoint file per tracklet with `frame_idx joint_idx x y
//! confidence` per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::ImageReader;
use keyreid_core::data::{Dataset, Image, Joint, KeypointFrame, Split, Tracklet};

use crate::error::PipelineError;
use crate::Result;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const JOINTS: usize = 17;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub rel_dir: String,
    pub person_id: usize,
    pub camera_id: usize,
    pub split: Split,
    pub keypoint_file: String,
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |message: String| PipelineError::Manifest {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let person_id: usize = fields[1]
            .parse()
            .map_err(|_| err(format!("bad person id `{}`", fields[1])))?;
        let camera_id: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad camera id `{}`", fields[2])))?;
        let split = Split::parse(fields[3]).map_err(|e| err(e.to_string()))?;
        entries.push(ManifestEntry {
            rel_dir: fields[0].to_string(),
            person_id,
            camera_id,
            split,
            keypoint_file: fields[4].to_string(),
        });
    }
    if entries.is_empty() {
        return Err(PipelineError::Manifest {
            path: path.display().to_string(),
            line: 0,
            message: "manifest has no records".into(),
        });
    }
    Ok(entries)
}

fn load_png(path: &Path) -> Result<Image> {
    let img = ImageReader::open(path)
        .map_err(|e| PipelineError::io(path, e))?
        .decode()
        .map_err(|e| PipelineError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(h, w);
    for (i, px) in img.pixels().enumerate() {
        out.data[i * 3] = px.0[0] as f32 / 255.0;
        out.data[i * 3 + 1] = px.0[1] as f32 / 255.0;
        out.data[i * 3 + 2] = px.0[2] as f32 / 255.0;
    }
    Ok(out)
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let px = img.pixel(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (px[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| PipelineError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn parse_keypoints(path: &Path, num_frames: usize) -> Result<Vec<KeypointFrame>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut per_frame: Vec<Vec<Option<Joint>>> = vec![vec![None; JOINTS]; num_frames];
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| PipelineError::Manifest {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let frame: usize = fields[0].parse().map_err(|_| err("bad frame index".into()))?;
        let joint: usize = fields[1].parse().map_err(|_| err("bad joint index".into()))?;
        let x: f64 = fields[2].parse().map_err(|_| err("bad x".into()))?;
        let y: f64 = fields[3].parse().map_err(|_| err("bad y".into()))?;
        let confidence: f64 = fields[4].parse().map_err(|_| err("bad confidence".into()))?;
        if frame >= num_frames {
            return Err(err(format!("frame {frame} outside {num_frames} frames")));
        }
        if joint >= JOINTS {
            return Err(err(format!("joint {joint} outside {JOINTS} joints")));
        }
        per_frame[frame][joint] = Some(Joint { x, y, confidence });
    }
    let mut out = Vec::with_capacity(num_frames);
    for (f, joints) in per_frame.into_iter().enumerate() {
        let mut frame = Vec::with_capacity(JOINTS);
        for (j, joint) in joints.into_iter().enumerate() {
            frame.push(joint.ok_or_else(|| PipelineError::Manifest {
                path: path.display().to_string(),
                line: 0,
                message: format!("missing joint {j} for frame {f}"),
            })?);
        }
        out.push(KeypointFrame { joints: frame });
    }
    Ok(out)
}

pub fn write_keypoints(frames: &[KeypointFrame], path: &Path) -> Result<()> {
    let mut text = String::new();
    for (f, frame) in frames.iter().enumerate() {
        for (j, joint) in frame.joints.iter().enumerate() {
            text.push_str(&format!("{f} {j} {} {} {}\n", joint.x, joint.y, joint.confidence));
        }
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| PipelineError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("frame_") && name.ends_with(".png") {
            frames.push(entry.path());
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(PipelineError::Manifest {
            path: dir.display().to_string(),
            line: 0,
            message: "tracklet directory has no frame_*.png files".into(),
        });
    }
    Ok(frames)
}

/// Load a dataset, optionally resizing every frame to `(h, w)` with
/// keypoints scaled by the same factors. Identity and camera labels are
/// re-indexed to dense ranges with the original labels retained.
pub fn load_dataset(manifest_path: &Path, resize_to: Option<(usize, usize)>) -> Result<Dataset> {
    let entries = parse_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));

    let mut person_labels: Vec<usize> = entries.iter().map(|e| e.person_id).collect();
    person_labels.sort_unstable();
    person_labels.dedup();
    let mut camera_labels: Vec<usize> = entries.iter().map(|e| e.camera_id).collect();
    camera_labels.sort_unstable();
    camera_labels.dedup();
    let person_index: BTreeMap<usize, usize> = person_labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let camera_index: BTreeMap<usize, usize> = camera_labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();

    let mut dataset = Dataset {
        identity_labels: person_labels,
        camera_labels,
        ..Default::default()
    };
    for entry in &entries {
        let dir = root.join(&entry.rel_dir);
        let paths = frame_paths(&dir)?;
        let mut frames = Vec::with_capacity(paths.len());
        for p in &paths {
            frames.push(load_png(p)?);
        }
        let kp_path = root.join(&entry.keypoint_file);
        if !kp_path.exists() {
            return Err(PipelineError::Manifest {
                path: manifest_path.display().to_string(),
                line: 0,
                message: format!(
                    "entry `{}`: keypoint file {} does not exist",
                    entry.rel_dir,
                    kp_path.display()
                ),
            });
        }
        let mut keypoints = parse_keypoints(&kp_path, frames.len())?;
        if let Some((h, w)) = resize_to {
            let (oh, ow) = (frames[0].h, frames[0].w);
            if (oh, ow) != (h, w) {
                let sy = h as f64 / oh as f64;
                let sx = w as f64 / ow as f64;
                frames = frames.iter().map(|f| f.resize(h, w)).collect();
                for kf in keypoints.iter_mut() {
                    for j in kf.joints.iter_mut() {
                        j.x *= sx;
                        j.y *= sy;
                    }
                }
            }
        }
        let tracklet = Tracklet {
            person_id: person_index[&entry.person_id],
            camera_id: camera_index[&entry.camera_id],
            frames,
            keypoints,
            key: entry.rel_dir.clone(),
        };
        tracklet.validate(JOINTS)?;
        match entry.split {
            Split::Train => dataset.train.push(tracklet),
            Split::Query => dataset.query.push(tracklet),
            Split::Gallery => dataset.gallery.push(tracklet),
        }
    }
    Ok(dataset)
}

/// Write a dataset in the manifest layout. Labels are written as the
/// ORIGINAL (pre-indexing) values so a save/load round-trip is stable.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| PipelineError::io(root, e))?;
    let mut manifest = String::new();
    for (split, tracklets) in [
        (Split::Train, &dataset.train),
        (Split::Query, &dataset.query),
        (Split::Gallery, &dataset.gallery),
    ] {
        for t in tracklets.iter() {
            let dir = root.join(&t.key);
            fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
            for (i, frame) in t.frames.iter().enumerate() {
                save_png(frame, &dir.join(format!("frame_{i:05}.png")))?;
            }
            let kp_rel = format!("{}/keypoints.txt", t.key);
            write_keypoints(&t.keypoints, &root.join(&kp_rel))?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                t.key,
                dataset.identity_labels[t.person_id],
                dataset.camera_labels[t.camera_id],
                split.as_str(),
                kp_rel
            ));
        }
    }
    let manifest_path = root.join(MANIFEST_NAME);
    fs::write(&manifest_path, manifest).map_err(|e| PipelineError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Find a tracklet by its manifest key across all splits.
pub fn find_tracklet<'a>(dataset: &'a Dataset, key: &str) -> Option<&'a Tracklet> {
    dataset
        .train
        .iter()
        .chain(&dataset.query)
        .chain(&dataset.gallery)
        .find(|t| t.key == key)
}

//! Descriptor gallery file: magic + JSON header (width, K, D, T, count,
//! checkpoint hash) + packed little-endian f32 vectors + id/camera tables +
//! length-prefixed tracklet keys.

use std::fs;
use std::io::Write;
use std::path::Path;

use keyreid_core::metrics::Descriptor;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::Result;

const MAGIC: &[u8; 4] = b"KRGL";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GalleryHeader {
    pub version: u32,
    pub width: usize,
    pub parts: usize,
    pub dim: usize,
    pub frames: usize,
    pub count: usize,
    pub checkpoint_hash: String,
}

pub struct Gallery {
    pub header: GalleryHeader,
    pub descriptors: Vec<Descriptor>,
    /// Populated when the file disagrees with the loading context in a
    /// survivable way (e.g. a different model hash).
    pub warnings: Vec<String>,
}

pub fn save(
    descriptors: &[Descriptor],
    parts: usize,
    dim: usize,
    frames: usize,
    checkpoint_hash: &str,
    path: &Path,
) -> Result<()> {
    let width = descriptors.first().map(|d| d.vector.len()).unwrap_or(0);
    for (i, d) in descriptors.iter().enumerate() {
        if d.vector.len() != width {
            return Err(PipelineError::Gallery {
                path: path.display().to_string(),
                message: format!(
                    "descriptor {i} has width {} but the gallery is {width}",
                    d.vector.len()
                ),
            });
        }
        if d.vector.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Gallery {
                path: path.display().to_string(),
                message: format!("descriptor {i} has non-finite entries"),
            });
        }
    }
    let header = GalleryHeader {
        version: VERSION,
        width,
        parts,
        dim,
        frames,
        count: descriptors.len(),
        checkpoint_hash: checkpoint_hash.to_string(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for d in descriptors {
        for v in &d.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for d in descriptors {
        out.extend_from_slice(&(d.person_id as u32).to_le_bytes());
    }
    for d in descriptors {
        out.extend_from_slice(&(d.camera_id as u32).to_le_bytes());
    }
    for d in descriptors {
        let key = d.key.as_bytes();
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    file.write_all(&out).map_err(|e| PipelineError::io(path, e))?;
    Ok(())
}

/// Load a gallery; `expected_width` and `expected_hash` come from the model
/// in use. A width mismatch is an error, a hash mismatch only a warning.
pub fn load(
    path: &Path,
    expected_width: Option<usize>,
    expected_hash: Option<&str>,
) -> Result<Gallery> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let fail = |message: String| PipelineError::Gallery {
        path: path.display().to_string(),
        message,
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail("not a gallery file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header".into()));
    }
    let header: GalleryHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(format!("bad header: {e}")))?;
    if let Some(w) = expected_width {
        if header.width != w {
            return Err(fail(format!(
                "gallery width {} does not match the current model's descriptor width {w}",
                header.width
            )));
        }
    }
    let mut warnings = Vec::new();
    if let Some(h) = expected_hash {
        if header.checkpoint_hash != h {
            warnings.push(format!(
                "gallery was embedded with a different checkpoint ({}... vs {}...)",
                &header.checkpoint_hash[..12.min(header.checkpoint_hash.len())],
                &h[..12.min(h.len())]
            ));
        }
    }

    let mut cursor = 16 + header_len;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(PipelineError::Gallery {
                path: path.display().to_string(),
                message: "truncated data section".into(),
            });
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let mut vectors = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let raw = take(&mut cursor, header.width * 4)?;
        vectors.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f32>>(),
        );
    }
    let mut ids = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        ids.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
    }
    let mut cams = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        cams.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
    }
    let mut keys = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut cursor, len)?;
        keys.push(String::from_utf8(raw.to_vec()).map_err(|_| {
            PipelineError::Gallery {
                path: path.display().to_string(),
                message: "key is not UTF-8".into(),
            }
        })?);
    }
    let descriptors = vectors
        .into_iter()
        .zip(ids)
        .zip(cams)
        .zip(keys)
        .map(|(((vector, person_id), camera_id), key)| Descriptor {
            vector,
            person_id,
            camera_id,
            key,
        })
        .collect();
    Ok(Gallery {
        header,
        descriptors,
        warnings,
    })
}

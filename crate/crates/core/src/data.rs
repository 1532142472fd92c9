//! In-memory dataset representation: tracklets, keypoints, clip sampling and
//! augmentation. Loading and persistence live in the companion crate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::f64math;
use crate::pose::PartGrouping;
use crate::rng::Prng;
use crate::Result;

/// One joint estimate in image pixels. Coordinates may fall outside the
/// image (occlusions), but must be finite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Per-frame joint set; `J = 17` for COCO-style keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFrame {
    pub joints: Vec<Joint>,
}

impl KeypointFrame {
    pub fn validate(&self, expected_joints: usize) -> Result<()> {
        if self.joints.len() != expected_joints {
            return Err(CoreError::shape(format!(
                "expected {expected_joints} joints, got {}",
                self.joints.len()
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.x.is_finite() && j.y.is_finite()) {
                return Err(CoreError::non_finite(format!("joint {i}")));
            }
            if !(0.0..=1.0).contains(&j.confidence) {
                return Err(CoreError::invalid(format!(
                    "joint {i} confidence {} outside [0,1]",
                    j.confidence
                )));
            }
        }
        Ok(())
    }
}

/// RGB image with values in `[0,1]`, row-major, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.w + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.w + x) * 3;
        self.data[o] = rgb[0];
        self.data[o + 1] = rgb[1];
        self.data[o + 2] = rgb[2];
    }

    /// Bilinear resample to `(h, w)`.
    pub fn resize(&self, h: usize, w: usize) -> Image {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Image::new(h, w);
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        for y in 0..h {
            // Pixel-center mapping keeps content aligned at any scale.
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = f64math::floor(fy) as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = f64math::floor(fx) as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = (fx - x0 as f64) as f32;
                let mut rgb = [0.0f32; 3];
                for c in 0..3 {
                    let p00 = self.data[(y0 * self.w + x0) * 3 + c];
                    let p01 = self.data[(y0 * self.w + x1) * 3 + c];
                    let p10 = self.data[(y1 * self.w + x0) * 3 + c];
                    let p11 = self.data[(y1 * self.w + x1) * 3 + c];
                    let top = p00 + (p01 - p00) * wx;
                    let bot = p10 + (p11 - p10) * wx;
                    rgb[c] = top + (bot - top) * wy;
                }
                out.set_pixel(y, x, rgb);
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.set_pixel(y, x, self.pixel(y, self.w - 1 - x));
            }
        }
        out
    }
}

/// Identity- and camera-labeled frame sequence: the retrieval unit.
#[derive(Clone, Debug)]
pub struct Tracklet {
    pub person_id: usize,
    pub camera_id: usize,
    pub frames: Vec<Image>,
    pub keypoints: Vec<KeypointFrame>,
    /// Stable key for reports and gallery entries (e.g. a directory name).
    pub key: String,
}

impl Tracklet {
    pub fn validate(&self, expected_joints: usize) -> Result<()> {
        if self.frames.is_empty() {
            return Err(CoreError::EmptyTracklet);
        }
        if self.keypoints.len() != self.frames.len() {
            return Err(CoreError::shape(format!(
                "tracklet {}: {} frames but {} keypoint frames",
                self.key,
                self.frames.len(),
                self.keypoints.len()
            )));
        }
        let (h, w) = (self.frames[0].h, self.frames[0].w);
        for f in &self.frames {
            if f.h != h || f.w != w {
                return Err(CoreError::shape(format!(
                    "tracklet {}: mixed frame sizes",
                    self.key
                )));
            }
        }
        for kf in &self.keypoints {
            kf.validate(expected_joints)?;
        }
        Ok(())
    }
}

/// T frames sampled one per segment from a tracklet.
#[derive(Clone, Debug)]
pub struct Clip {
    pub frames: Vec<Image>,
    pub keypoints: Vec<KeypointFrame>,
    pub person_id: usize,
    pub camera_id: usize,
    pub sampled_indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Inference,
}

/// Split a tracklet into `T` near-equal contiguous segments (remainder
/// spread over the earliest ones) and take one frame per segment: the first
/// in inference mode, a uniform draw in train mode. Tracklets shorter than
/// `T` are padded by repeating the last frame before segmentation.
pub fn sample_clip(
    tracklet: &Tracklet,
    t: usize,
    mode: SampleMode,
    rng: &mut Prng,
) -> Result<Clip> {
    assert!(t >= 1, "T must be at least 1");
    let n = tracklet.frames.len();
    if n == 0 {
        return Err(CoreError::EmptyTracklet);
    }
    let mut order: Vec<usize> = (0..n).collect();
    while order.len() < t {
        order.push(n - 1);
    }
    let len = order.len();
    let base = len / t;
    let rem = len % t;
    let mut indices = Vec::with_capacity(t);
    let mut start = 0usize;
    for seg in 0..t {
        let size = base + usize::from(seg < rem);
        let pick = match mode {
            SampleMode::Inference => start,
            SampleMode::Train => rng.range(start, start + size),
        };
        indices.push(order[pick]);
        start += size;
    }
    Ok(Clip {
        frames: indices.iter().map(|&i| tracklet.frames[i].clone()).collect(),
        keypoints: indices
            .iter()
            .map(|&i| tracklet.keypoints[i].clone())
            .collect(),
        person_id: tracklet.person_id,
        camera_id: tracklet.camera_id,
        sampled_indices: indices,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub erase_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            erase_probability: 0.5,
        }
    }
}

/// Horizontal flip (joint across all frames, mirroring keypoints and
/// swapping left/right joint labels) plus per-frame random erasing (a noise
/// rectangle; keypoints untouched).
pub fn augment_clip(
    clip: &Clip,
    cfg: &AugmentConfig,
    grouping: &PartGrouping,
    rng: &mut Prng,
) -> Clip {
    let mut out = clip.clone();
    if cfg.flip_probability > 0.0 && rng.coin(cfg.flip_probability) {
        let w = out.frames[0].w;
        for f in out.frames.iter_mut() {
            *f = f.flip_horizontal();
        }
        for kf in out.keypoints.iter_mut() {
            let mut swapped: Vec<Joint> = kf.joints.clone();
            for (j, joint) in kf.joints.iter().enumerate() {
                let mut mirrored = *joint;
                mirrored.x = (w - 1) as f64 - joint.x;
                swapped[grouping.left_right_swap[j]] = mirrored;
            }
            kf.joints = swapped;
        }
    }
    if cfg.erase_probability > 0.0 {
        for f in out.frames.iter_mut() {
            if rng.coin(cfg.erase_probability) {
                erase_rectangle(f, rng);
            }
        }
    }
    out
}

/// Standard random-erasing rectangle: area fraction in [0.02, 0.2], aspect
/// in [0.3, 3.3], filled with uniform noise.
fn erase_rectangle(img: &mut Image, rng: &mut Prng) {
    let area = (img.h * img.w) as f64;
    for _ in 0..20 {
        let target = area * rng.uniform(0.02, 0.2);
        let aspect: f64 = rng.uniform(0.3, 3.3);
        let eh = f64math::round(f64math::sqrt(target * aspect)) as usize;
        let ew = f64math::round(f64math::sqrt(target / aspect)) as usize;
        if eh == 0 || ew == 0 || eh >= img.h || ew >= img.w {
            continue;
        }
        let y0 = rng.below(img.h - eh);
        let x0 = rng.below(img.w - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                let rgb = [
                    rng.uniform_f64() as f32,
                    rng.uniform_f64() as f32,
                    rng.uniform_f64() as f32,
                ];
                img.set_pixel(y, x, rgb);
            }
        }
        return;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(CoreError::invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Loaded dataset: tracklets grouped by split, identity labels re-indexed
/// to `0..num_identities` with the original labels retained.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Tracklet>,
    pub query: Vec<Tracklet>,
    pub gallery: Vec<Tracklet>,
    /// `identity_labels[internal_id] = original label`.
    pub identity_labels: Vec<usize>,
    /// `camera_labels[internal_id] = original label`.
    pub camera_labels: Vec<usize>,
}

impl Dataset {
    pub fn num_identities(&self) -> usize {
        self.identity_labels.len()
    }

    pub fn num_cameras(&self) -> usize {
        self.camera_labels.len()
    }

    pub fn split(&self, split: Split) -> &[Tracklet] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    /// Distinct internal identities present in the train split.
    pub fn train_identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.train.iter().map(|t| t.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(h: usize, w: usize, v: f32) -> Image {
        Image {
            h,
            w,
            data: vec![v; h * w * 3],
        }
    }

    fn tracklet_with_frames(n: usize) -> Tracklet {
        let joints = vec![
            Joint {
                x: 1.0,
                y: 1.0,
                confidence: 1.0
            };
            17
        ];
        Tracklet {
            person_id: 0,
            camera_id: 0,
            frames: (0..n).map(|i| flat_image(4, 4, i as f32 / n as f32)).collect(),
            keypoints: (0..n)
                .map(|_| KeypointFrame {
                    joints: joints.clone(),
                })
                .collect(),
            key: String::from("t0"),
        }
    }

    #[test]
    fn inference_sampling_picks_segment_starts() {
        let mut rng = Prng::seed_from_u64(0);
        let t = tracklet_with_frames(8);
        let clip = sample_clip(&t, 4, SampleMode::Inference, &mut rng).unwrap();
        assert_eq!(clip.sampled_indices, vec![0, 2, 4, 6]);
    }

    #[test]
    fn one_frame_per_segment_is_forced() {
        let mut rng = Prng::seed_from_u64(0);
        let t = tracklet_with_frames(4);
        for mode in [SampleMode::Train, SampleMode::Inference] {
            let clip = sample_clip(&t, 4, mode, &mut rng).unwrap();
            assert_eq!(clip.sampled_indices, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn short_tracklet_pads_with_last_frame() {
        let mut rng = Prng::seed_from_u64(0);
        let t = tracklet_with_frames(3);
        let clip = sample_clip(&t, 4, SampleMode::Inference, &mut rng).unwrap();
        assert_eq!(clip.sampled_indices, vec![0, 1, 2, 2]);
    }

    #[test]
    fn train_sampling_stays_inside_segments() {
        let mut rng = Prng::seed_from_u64(3);
        let t = tracklet_with_frames(11);
        // segments for N=11, T=4: sizes [3,3,3,2] -> bounds [0,3), [3,6), [6,9), [9,11)
        for _ in 0..200 {
            let clip = sample_clip(&t, 4, SampleMode::Train, &mut rng).unwrap();
            let idx = &clip.sampled_indices;
            assert!(idx[0] < 3);
            assert!((3..6).contains(&idx[1]));
            assert!((6..9).contains(&idx[2]));
            assert!((9..11).contains(&idx[3]));
        }
    }

    #[test]
    fn empty_tracklet_rejected() {
        let mut rng = Prng::seed_from_u64(0);
        let mut t = tracklet_with_frames(1);
        t.frames.clear();
        t.keypoints.clear();
        assert!(matches!(
            sample_clip(&t, 4, SampleMode::Inference, &mut rng),
            Err(CoreError::EmptyTracklet)
        ));
    }

    #[test]
    fn zero_probability_augment_is_identity() {
        let mut rng = Prng::seed_from_u64(0);
        let t = tracklet_with_frames(4);
        let clip = sample_clip(&t, 4, SampleMode::Inference, &mut rng).unwrap();
        let cfg = AugmentConfig {
            flip_probability: 0.0,
            erase_probability: 0.0,
        };
        let out = augment_clip(&clip, &cfg, &PartGrouping::coco17_six_parts(), &mut rng);
        assert_eq!(out.frames, clip.frames);
        assert_eq!(out.keypoints, clip.keypoints);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let mut rng = Prng::seed_from_u64(1);
        let grouping = PartGrouping::coco17_six_parts();
        let mut t = tracklet_with_frames(4);
        // make frames asymmetric so the flip is visible
        for (i, f) in t.frames.iter_mut().enumerate() {
            f.set_pixel(1, 0, [1.0, 0.0, i as f32 / 4.0]);
        }
        let clip = sample_clip(&t, 4, SampleMode::Inference, &mut rng).unwrap();
        let cfg = AugmentConfig {
            flip_probability: 1.0,
            erase_probability: 0.0,
        };
        let once = augment_clip(&clip, &cfg, &grouping, &mut rng);
        assert_ne!(once.frames, clip.frames);
        let twice = augment_clip(&once, &cfg, &grouping, &mut rng);
        assert_eq!(twice.frames, clip.frames);
        assert_eq!(twice.keypoints, clip.keypoints);
    }

    #[test]
    fn flip_mirrors_x_and_swaps_left_right() {
        let mut rng = Prng::seed_from_u64(1);
        let grouping = PartGrouping::coco17_six_parts();
        let w = 128usize;
        let joints: Vec<Joint> = (0..17)
            .map(|j| Joint {
                x: 10.0 + j as f64,
                y: 5.0,
                confidence: 1.0,
            })
            .collect();
        let t = Tracklet {
            person_id: 0,
            camera_id: 0,
            frames: vec![flat_image(64, w, 0.5)],
            keypoints: vec![KeypointFrame { joints }],
            key: String::from("t"),
        };
        let clip = sample_clip(&t, 1, SampleMode::Inference, &mut rng).unwrap();
        let cfg = AugmentConfig {
            flip_probability: 1.0,
            erase_probability: 0.0,
        };
        let out = augment_clip(&clip, &cfg, &grouping, &mut rng);
        // left wrist (9, original x=19) must land at the right-wrist slot (10), mirrored
        let rw = out.keypoints[0].joints[crate::pose::coco::R_WRIST];
        assert!((rw.x - (127.0 - 19.0)).abs() < 1e-12);
        // and a keypoint at x=10 mirrors to 117
        let nose = out.keypoints[0].joints[crate::pose::coco::NOSE];
        assert!((nose.x - 117.0).abs() < 1e-12);
    }

    #[test]
    fn augmentation_preserves_shape_and_labels() {
        let mut rng = Prng::seed_from_u64(9);
        let t = tracklet_with_frames(6);
        let clip = sample_clip(&t, 4, SampleMode::Train, &mut rng).unwrap();
        let out = augment_clip(
            &clip,
            &AugmentConfig::default(),
            &PartGrouping::coco17_six_parts(),
            &mut rng,
        );
        assert_eq!(out.frames.len(), clip.frames.len());
        assert_eq!(out.person_id, clip.person_id);
        assert_eq!(out.camera_id, clip.camera_id);
        assert_eq!(out.frames[0].h, clip.frames[0].h);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = flat_image(8, 6, 0.25);
        let out = img.resize(4, 3);
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}

//! Synthetic benchmark generator: color-coded stick figures walking on
//! camera-specific backgrounds, with ground-truth joint positions emitted
//! as keypoints. Every byte is a deterministic function of the seed.

use std::path::{Path, PathBuf};

use keyreid_core::data::{Dataset, Image, Joint, KeypointFrame, Split, Tracklet};
use keyreid_core::pose::coco;
use keyreid_core::rng::Prng;
use keyreid_core::scalar::f64math;

use crate::dataset::save_dataset;
use crate::error::PipelineError;
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub cams: usize,
    pub tracklets_per_id_cam: usize,
    pub frames_per_tracklet: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids == 0
            || self.cams == 0
            || self.tracklets_per_id_cam == 0
            || self.frames_per_tracklet == 0
        {
            return Err(PipelineError::Usage("all synthetic counts must be >= 1".into()));
        }
        if self.h < 32 || self.w < 16 {
            return Err(PipelineError::Usage(format!(
                "image {}x{} too small to contain the figure (need at least 32x16)",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed ^ 0x9e3779b97f4a7c15;
    for &p in parts {
        x ^= p.wrapping_mul(0xbf58476d1ce4e5b9);
        x = x.rotate_left(27).wrapping_mul(0x94d049bb133111eb);
    }
    x
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = f64math::floor(h) as usize % 6;
    let f = h - f64math::floor(h);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Per-identity appearance: one saturated color per body part plus body
/// proportions (fractions of image height/width).
struct IdentityStyle {
    part_colors: [[f32; 3]; 6],
    head_r: f64,
    torso_len: f64,
    leg_len: f64,
    shoulder_w: f64,
    hip_w: f64,
    arm_len: f64,
}

impl IdentityStyle {
    fn new(seed: u64, id: usize) -> Self {
        let mut rng = Prng::seed_from_u64(mix(seed, &[1, id as u64]));
        let base_hue = rng.uniform_f64();
        let mut part_colors = [[0.0f32; 3]; 6];
        for (k, c) in part_colors.iter_mut().enumerate() {
            let hue = base_hue + k as f64 / 6.0 + rng.uniform(-0.04, 0.04);
            *c = hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0));
        }
        IdentityStyle {
            part_colors,
            head_r: rng.uniform(0.055, 0.075),
            torso_len: rng.uniform(0.26, 0.32),
            leg_len: rng.uniform(0.30, 0.36),
            shoulder_w: rng.uniform(0.34, 0.46),
            hip_w: rng.uniform(0.26, 0.38),
            arm_len: rng.uniform(0.24, 0.30),
        }
    }
}

/// Camera-specific dim checkered background.
struct CameraStyle {
    base: f64,
    delta: f64,
    checker: usize,
    tint: [f64; 3],
}

impl CameraStyle {
    fn new(seed: u64, cam: usize) -> Self {
        let mut rng = Prng::seed_from_u64(mix(seed, &[2, cam as u64]));
        CameraStyle {
            base: rng.uniform(0.12, 0.26),
            delta: rng.uniform(0.03, 0.07),
            checker: 4 + rng.below(3) * 2,
            tint: [
                rng.uniform(0.95, 1.05),
                rng.uniform(0.95, 1.05),
                rng.uniform(0.95, 1.05),
            ],
        }
    }

    fn paint(&self, img: &mut Image) {
        for y in 0..img.h {
            let grad = 0.03 * y as f64 / img.h as f64;
            for x in 0..img.w {
                let check = if (y / self.checker + x / self.checker) % 2 == 0 {
                    self.delta
                } else {
                    0.0
                };
                let v = self.base + grad + check;
                img.set_pixel(
                    y,
                    x,
                    [
                        (v * self.tint[0]) as f32,
                        (v * self.tint[1]) as f32,
                        (v * self.tint[2]) as f32,
                    ],
                );
            }
        }
    }
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
    f64math::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy))
}

fn draw_capsule(img: &mut Image, a: (f64, f64), b: (f64, f64), radius: f64, color: [f32; 3]) {
    let min_x = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let max_x = (a.0.max(b.0) + radius).ceil().min(img.w as f64 - 1.0) as usize;
    let min_y = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let max_y = (a.1.max(b.1) + radius).ceil().min(img.h as f64 - 1.0) as usize;
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            if dist_to_segment(x as f64, y as f64, a, b) <= radius {
                img.set_pixel(y, x, color);
            }
        }
    }
}

fn draw_disc(img: &mut Image, c: (f64, f64), radius: f64, color: [f32; 3]) {
    draw_capsule(img, c, c, radius, color);
}

fn fill_quad(img: &mut Image, corners: [(f64, f64); 4], color: [f32; 3]) {
    // convex fill via sign-consistent cross products
    let min_x = corners.iter().map(|c| c.0).fold(f64::MAX, f64::min).floor().max(0.0) as usize;
    let max_x = corners.iter().map(|c| c.0).fold(f64::MIN, f64::max).ceil().min(img.w as f64 - 1.0) as usize;
    let min_y = corners.iter().map(|c| c.1).fold(f64::MAX, f64::min).floor().max(0.0) as usize;
    let max_y = corners.iter().map(|c| c.1).fold(f64::MIN, f64::max).ceil().min(img.h as f64 - 1.0) as usize;
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let (px, py) = (x as f64, y as f64);
            let mut sign = 0i32;
            let mut inside = true;
            for i in 0..4 {
                let a = corners[i];
                let b = corners[(i + 1) % 4];
                let cross = (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let s = if cross >= 0.0 { 1 } else { -1 };
                if sign == 0 {
                    sign = s;
                } else if s != sign {
                    inside = false;
                    break;
                }
            }
            if inside {
                img.set_pixel(y, x, color);
            }
        }
    }
}

/// The 17 joint positions of one walking pose, pixel coordinates.
fn pose_joints(
    style: &IdentityStyle,
    h: f64,
    w: f64,
    cx: f64,
    phase: f64,
    jitter: &mut Prng,
) -> Vec<Joint> {
    let head_r = style.head_r * h;
    let top = 0.04 * h + head_r;
    let bob = 0.008 * h * f64math::sin(2.0 * phase);
    let head_c = (cx + 0.01 * w * f64math::sin(phase), top + bob);
    let neck_y = head_c.1 + head_r;
    let sh_y = neck_y + 0.02 * h;
    let hip_y = sh_y + style.torso_len * h;
    let leg = style.leg_len * h;
    let arm = style.arm_len * h;
    let sw = style.shoulder_w * w / 2.0;
    let hw = style.hip_w * w / 2.0;
    let swing = f64math::sin(phase);
    let leg_amp = 0.05 * w;
    let arm_amp = 0.06 * w;

    let mut joints = vec![Joint { x: 0.0, y: 0.0, confidence: 1.0 }; 17];
    let mut set = |idx: usize, x: f64, y: f64| {
        joints[idx] = Joint {
            x: x + jitter.uniform(-0.3, 0.3),
            y: y + jitter.uniform(-0.3, 0.3),
            confidence: 1.0 - 0.05 * jitter.uniform_f64(),
        };
    };

    set(coco::NOSE, head_c.0, head_c.1 + 0.15 * head_r);
    set(coco::L_EYE, head_c.0 + 0.35 * head_r, head_c.1 - 0.2 * head_r);
    set(coco::R_EYE, head_c.0 - 0.35 * head_r, head_c.1 - 0.2 * head_r);
    set(coco::L_EAR, head_c.0 + 0.8 * head_r, head_c.1);
    set(coco::R_EAR, head_c.0 - 0.8 * head_r, head_c.1);

    let l_sh = (cx + sw, sh_y + bob);
    let r_sh = (cx - sw, sh_y + bob);
    set(coco::L_SHOULDER, l_sh.0, l_sh.1);
    set(coco::R_SHOULDER, r_sh.0, r_sh.1);
    // arms swing opposite to their leg
    set(
        coco::L_ELBOW,
        l_sh.0 - arm_amp * 0.6 * swing,
        sh_y + 0.5 * arm + bob,
    );
    set(
        coco::R_ELBOW,
        r_sh.0 + arm_amp * 0.6 * swing,
        sh_y + 0.5 * arm + bob,
    );
    set(coco::L_WRIST, l_sh.0 - arm_amp * swing, sh_y + arm + bob);
    set(coco::R_WRIST, r_sh.0 + arm_amp * swing, sh_y + arm + bob);

    let l_hip = (cx + hw, hip_y + bob);
    let r_hip = (cx - hw, hip_y + bob);
    set(coco::L_HIP, l_hip.0, l_hip.1);
    set(coco::R_HIP, r_hip.0, r_hip.1);
    set(
        coco::L_KNEE,
        l_hip.0 + leg_amp * 0.7 * swing,
        hip_y + 0.5 * leg + bob,
    );
    set(
        coco::R_KNEE,
        r_hip.0 - leg_amp * 0.7 * swing,
        hip_y + 0.5 * leg + bob,
    );
    set(coco::L_ANKLE, l_hip.0 + leg_amp * swing, hip_y + leg + bob);
    set(coco::R_ANKLE, r_hip.0 - leg_amp * swing, hip_y + leg + bob);
    joints
}

fn render_frame(
    style: &IdentityStyle,
    cam: &CameraStyle,
    joints: &[Joint],
    h: usize,
    w: usize,
    noise: &mut Prng,
) -> Image {
    let mut img = Image::new(h, w);
    cam.paint(&mut img);
    let limb_r = (w as f64 * 0.045).max(1.0);
    let j = |idx: usize| (joints[idx].x, joints[idx].y);

    // torso quad, then limbs over it, head last
    fill_quad(
        &mut img,
        [
            j(coco::L_SHOULDER),
            j(coco::R_SHOULDER),
            j(coco::R_HIP),
            j(coco::L_HIP),
        ],
        style.part_colors[1],
    );
    for (part, a, b, c) in [
        (2usize, coco::L_SHOULDER, coco::L_ELBOW, coco::L_WRIST),
        (3, coco::R_SHOULDER, coco::R_ELBOW, coco::R_WRIST),
        (4, coco::L_HIP, coco::L_KNEE, coco::L_ANKLE),
        (5, coco::R_HIP, coco::R_KNEE, coco::R_ANKLE),
    ] {
        draw_capsule(&mut img, j(a), j(b), limb_r, style.part_colors[part]);
        draw_capsule(&mut img, j(b), j(c), limb_r, style.part_colors[part]);
    }
    let head_center = (
        (joints[coco::L_EAR].x + joints[coco::R_EAR].x) / 2.0,
        joints[coco::L_EAR].y,
    );
    draw_disc(&mut img, head_center, style.head_r * h as f64, style.part_colors[0]);

    // sensor noise, then quantize to PNG levels so disk round-trips are exact
    for v in img.data.iter_mut() {
        let noisy = (*v as f64 + noise.uniform(-0.015, 0.015)).clamp(0.0, 1.0);
        *v = (f64math::round(noisy * 255.0) / 255.0) as f32;
    }
    img
}

/// Split rule: the first tracklet of each (identity, camera) cell goes to
/// query on even cameras and gallery on odd ones; the second (if any) takes
/// the opposite role; the rest train. With two cameras every query then has
/// exactly one cross-camera gallery positive.
fn split_for(cam: usize, tracklet_idx: usize) -> Split {
    match (tracklet_idx, cam % 2 == 0) {
        (0, true) | (1, false) => Split::Query,
        (0, false) | (1, true) => Split::Gallery,
        _ => Split::Train,
    }
}

/// Sparse original labels exercise the loader's re-indexing.
fn original_person_label(id: usize) -> usize {
    100 + id * 7
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut dataset = Dataset {
        identity_labels: (0..cfg.num_ids).map(original_person_label).collect(),
        camera_labels: (0..cfg.cams).collect(),
        ..Default::default()
    };
    let (hf, wf) = (cfg.h as f64, cfg.w as f64);
    for id in 0..cfg.num_ids {
        let style = IdentityStyle::new(cfg.seed, id);
        for cam in 0..cfg.cams {
            let cam_style = CameraStyle::new(cfg.seed, cam);
            for j in 0..cfg.tracklets_per_id_cam {
                let mut rng =
                    Prng::seed_from_u64(mix(cfg.seed, &[3, id as u64, cam as u64, j as u64]));
                let phase0 = rng.uniform(0.0, core::f64::consts::TAU);
                let omega = core::f64::consts::TAU / rng.uniform(6.0, 10.0);
                let cx = wf / 2.0 + rng.uniform(-0.06, 0.06) * wf;
                let mut frames = Vec::with_capacity(cfg.frames_per_tracklet);
                let mut keypoints = Vec::with_capacity(cfg.frames_per_tracklet);
                for f in 0..cfg.frames_per_tracklet {
                    let phase = phase0 + omega * f as f64;
                    let joints = pose_joints(&style, hf, wf, cx, phase, &mut rng);
                    let img = render_frame(&style, &cam_style, &joints, cfg.h, cfg.w, &mut rng);
                    frames.push(img);
                    keypoints.push(KeypointFrame { joints });
                }
                let tracklet = Tracklet {
                    person_id: id,
                    camera_id: cam,
                    frames,
                    keypoints,
                    key: format!("id{:04}_c{cam:02}_t{j:02}", original_person_label(id)),
                };
                match split_for(cam, j) {
                    Split::Train => dataset.train.push(tracklet),
                    Split::Query => dataset.query.push(tracklet),
                    Split::Gallery => dataset.gallery.push(tracklet),
                }
            }
        }
    }
    Ok(dataset)
}

/// Generate and persist; returns the manifest path.
pub fn generate_to_disk(cfg: &SynthConfig, root: &Path) -> Result<PathBuf> {
    let dataset = generate(cfg)?;
    save_dataset(&dataset, root)
}

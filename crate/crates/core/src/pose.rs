//! Keypoints -> joint Gaussian heatmaps -> part heatmaps -> patch-grid
//! importance vectors.
//!
//! All math here is plain f64 over dense `H*W` buffers; nothing is
//! differentiated through this path (importance vectors enter the model as
//! constants).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::PatchLayout;
use crate::data::KeypointFrame;
use crate::error::CoreError;
use crate::scalar::f64math;
use crate::Result;

/// Assignment of joints to body parts plus the left/right relabeling used
/// under horizontal flips.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PartGrouping {
    pub num_joints: usize,
    pub groups: Vec<Vec<usize>>,
    pub left_right_swap: Vec<usize>,
}

/// COCO-17 joint indices.
pub mod coco {
    pub const NOSE: usize = 0;
    pub const L_EYE: usize = 1;
    pub const R_EYE: usize = 2;
    pub const L_EAR: usize = 3;
    pub const R_EAR: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const R_SHOULDER: usize = 6;
    pub const L_ELBOW: usize = 7;
    pub const R_ELBOW: usize = 8;
    pub const L_WRIST: usize = 9;
    pub const R_WRIST: usize = 10;
    pub const L_HIP: usize = 11;
    pub const R_HIP: usize = 12;
    pub const L_KNEE: usize = 13;
    pub const R_KNEE: usize = 14;
    pub const L_ANKLE: usize = 15;
    pub const R_ANKLE: usize = 16;
}

impl Default for PartGrouping {
    fn default() -> Self {
        PartGrouping::coco17_six_parts()
    }
}

impl PartGrouping {
    /// Six anatomical parts over the COCO-17 joint set: head, torso, both
    /// arms, both legs. Shoulder and hip joints are shared with the torso.
    pub fn coco17_six_parts() -> Self {
        use coco::*;
        PartGrouping {
            num_joints: 17,
            groups: vec![
                vec![NOSE, L_EYE, R_EYE, L_EAR, R_EAR],
                vec![L_SHOULDER, R_SHOULDER, L_HIP, R_HIP],
                vec![L_SHOULDER, L_ELBOW, L_WRIST],
                vec![R_SHOULDER, R_ELBOW, R_WRIST],
                vec![L_HIP, L_KNEE, L_ANKLE],
                vec![R_HIP, R_KNEE, R_ANKLE],
            ],
            left_right_swap: vec![0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15],
        }
    }

    pub fn num_parts(&self) -> usize {
        self.groups.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(CoreError::invalid("part grouping has no groups"));
        }
        for (k, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(CoreError::invalid(format!("part {k} has no joints")));
            }
            if let Some(&j) = g.iter().find(|&&j| j >= self.num_joints) {
                return Err(CoreError::invalid(format!(
                    "part {k} references joint {j} but there are only {} joints",
                    self.num_joints
                )));
            }
        }
        if self.left_right_swap.len() != self.num_joints {
            return Err(CoreError::invalid("swap table length must equal joint count"));
        }
        for (j, &s) in self.left_right_swap.iter().enumerate() {
            if s >= self.num_joints || self.left_right_swap[s] != j {
                return Err(CoreError::invalid("swap table must be a self-inverse permutation"));
            }
        }
        Ok(())
    }
}

/// Heatmap rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PoseConfig {
    /// Gaussian width in pixels; defaults to image height / 42.
    pub sigma: f64,
    /// Joints below this confidence produce an all-zero map.
    pub confidence_floor: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        PoseConfig::for_height(64)
    }
}

impl PoseConfig {
    pub fn for_height(h: usize) -> Self {
        PoseConfig {
            sigma: h as f64 / 42.0,
            confidence_floor: 0.05,
        }
    }
}

/// Peak-normalized Gaussian centered at the joint, scaled by confidence.
/// Out-of-bounds centers still leave their tail inside the image.
pub fn joint_heatmap(
    x: f64,
    y: f64,
    confidence: f64,
    h: usize,
    w: usize,
    sigma: f64,
    confidence_floor: f64,
) -> Result<Vec<f64>> {
    if !(x.is_finite() && y.is_finite() && confidence.is_finite()) {
        return Err(CoreError::non_finite(format!(
            "joint coordinates ({x}, {y}, conf {confidence})"
        )));
    }
    assert!(sigma > 0.0, "sigma must be positive");
    let mut map = vec![0.0f64; h * w];
    if confidence < confidence_floor {
        return Ok(map);
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in 0..h {
        let dy = r as f64 - y;
        for c in 0..w {
            let dx = c as f64 - x;
            map[r * w + c] = confidence * f64math::exp(-(dx * dx + dy * dy) * inv);
        }
    }
    Ok(map)
}

/// Part map = arithmetic mean of its member joint maps.
pub fn part_heatmaps(joint_maps: &[Vec<f64>], grouping: &PartGrouping) -> Result<Vec<Vec<f64>>> {
    if joint_maps.len() != grouping.num_joints {
        return Err(CoreError::shape(format!(
            "expected {} joint maps, got {}",
            grouping.num_joints,
            joint_maps.len()
        )));
    }
    grouping.validate()?;
    let len = joint_maps[0].len();
    let mut out = Vec::with_capacity(grouping.num_parts());
    for group in &grouping.groups {
        let mut map = vec![0.0f64; len];
        for &j in group {
            for (m, v) in map.iter_mut().zip(&joint_maps[j]) {
                *m += v;
            }
        }
        let inv = 1.0 / group.len() as f64;
        for m in map.iter_mut() {
            *m *= inv;
        }
        out.push(map);
    }
    Ok(out)
}

/// Average the map over each patch window of the layout, row-major.
/// Windows may overlap when stride < patch.
pub fn pool_to_patch_grid(map: &[f64], h: usize, w: usize, layout: &PatchLayout) -> Result<Vec<f64>> {
    if map.len() != h * w {
        return Err(CoreError::shape(format!(
            "map length {} does not match {h}x{w}",
            map.len()
        )));
    }
    if layout.h > h || layout.w > w {
        return Err(CoreError::shape(format!(
            "patch layout {}x{} larger than map {h}x{w}",
            layout.h, layout.w
        )));
    }
    let p = layout.patch;
    let inv = 1.0 / (p * p) as f64;
    let mut out = Vec::with_capacity(layout.n());
    for r in 0..layout.rows() {
        for c in 0..layout.cols() {
            let (y0, x0) = (r * layout.stride, c * layout.stride);
            let mut s = 0.0;
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    s += map[y * w + x];
                }
            }
            out.push(s * inv);
        }
    }
    Ok(out)
}

/// Clip-level importance: arithmetic mean over frames of per-frame vectors.
/// Input is `T` frames of `K` length-n vectors.
pub fn clip_importance(per_frame: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    assert!(!per_frame.is_empty(), "need at least one frame");
    let k = per_frame[0].len();
    let n = per_frame[0][0].len();
    let inv_t = 1.0 / per_frame.len() as f64;
    let mut out = vec![vec![0.0f64; n]; k];
    for frame in per_frame {
        assert_eq!(frame.len(), k);
        for (acc, v) in out.iter_mut().zip(frame) {
            assert_eq!(v.len(), n);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x * inv_t;
            }
        }
    }
    out
}

/// Full keypoint -> clip-level importance pipeline for one clip:
/// per frame, J Gaussian maps are grouped into K part maps, pooled onto the
/// patch grid, and finally averaged over frames. Returns `K` length-n rows.
pub fn clip_part_importance(
    keypoints: &[KeypointFrame],
    layout: &PatchLayout,
    grouping: &PartGrouping,
    cfg: &PoseConfig,
) -> Result<Vec<Vec<f64>>> {
    let (h, w) = (layout.h, layout.w);
    let mut per_frame = Vec::with_capacity(keypoints.len());
    for frame in keypoints {
        let mut joint_maps = Vec::with_capacity(frame.joints.len());
        for j in &frame.joints {
            joint_maps.push(joint_heatmap(
                j.x,
                j.y,
                j.confidence,
                h,
                w,
                cfg.sigma,
                cfg.confidence_floor,
            )?);
        }
        let parts = part_heatmaps(&joint_maps, grouping)?;
        let pooled: Result<Vec<Vec<f64>>> = parts
            .iter()
            .map(|m| pool_to_patch_grid(m, h, w, layout))
            .collect();
        per_frame.push(pooled?);
    }
    Ok(clip_importance(&per_frame))
}

/// Horizontal stripe importance over the patch grid: part k gets weight 1 on
/// its band of rows, 0 elsewhere. Stands in for keypoint guidance when KPS
/// is ablated, mimicking stripe segmentation.
pub fn stripe_importance(layout: &PatchLayout, k: usize) -> Vec<Vec<f64>> {
    assert!(k >= 1);
    let rows = layout.rows();
    let cols = layout.cols();
    let base = rows / k;
    let rem = rows % k;
    let mut out = Vec::with_capacity(k);
    let mut row = 0usize;
    for band in 0..k {
        let size = base + usize::from(band < rem);
        let mut v = vec![0.0f64; layout.n()];
        for r in row..(row + size).min(rows) {
            for c in 0..cols {
                v[r * cols + c] = 1.0;
            }
        }
        row += size;
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout_4x4_p2() -> PatchLayout {
        PatchLayout::new(4, 4, 2, 2)
    }

    #[test]
    fn gaussian_peak_equals_confidence() {
        let m = joint_heatmap(3.0, 2.0, 1.0, 5, 6, 1.5, 0.05).unwrap();
        assert!((m[2 * 6 + 3] - 1.0).abs() < 1e-12);
        let m = joint_heatmap(3.0, 2.0, 0.4, 5, 6, 1.5, 0.05).unwrap();
        assert!((m[2 * 6 + 3] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn gaussian_at_one_sigma() {
        let sigma = 2.0;
        let m = joint_heatmap(3.0, 2.0, 1.0, 8, 8, sigma, 0.05).unwrap();
        // pixel exactly sigma away horizontally
        let v = m[2 * 8 + 5];
        assert!((v - (-0.5f64).exp()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn low_confidence_zeroes_map() {
        let m = joint_heatmap(3.0, 2.0, 0.01, 4, 4, 1.0, 0.05).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_bounds_center_keeps_tail() {
        let m = joint_heatmap(-2.0, 1.0, 1.0, 4, 4, 3.0, 0.05).unwrap();
        assert!(m.iter().any(|&v| v > 0.0));
        assert!(m.iter().all(|&v| v < 1.0));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(joint_heatmap(f64::NAN, 0.0, 1.0, 4, 4, 1.0, 0.05).is_err());
    }

    #[test]
    fn singleton_group_is_identity() {
        let g = PartGrouping {
            num_joints: 2,
            groups: vec![vec![0], vec![1]],
            left_right_swap: vec![0, 1],
        };
        let maps = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let parts = part_heatmaps(&maps, &g).unwrap();
        assert_eq!(parts[0], maps[0]);
        assert_eq!(parts[1], maps[1]);
    }

    #[test]
    fn averaging_two_disjoint_peaks_halves_them() {
        let g = PartGrouping {
            num_joints: 2,
            groups: vec![vec![0, 1]],
            left_right_swap: vec![0, 1],
        };
        let maps = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let parts = part_heatmaps(&maps, &g).unwrap();
        assert_eq!(parts[0], vec![0.5, 0.5]);
    }

    #[test]
    fn grouping_out_of_range_rejected() {
        let g = PartGrouping {
            num_joints: 2,
            groups: vec![vec![0, 5]],
            left_right_swap: vec![0, 1],
        };
        let maps = vec![vec![0.0], vec![0.0]];
        assert!(part_heatmaps(&maps, &g).is_err());
    }

    #[test]
    fn part_maps_linear_in_inputs() {
        let g = PartGrouping {
            num_joints: 3,
            groups: vec![vec![0, 1], vec![1, 2]],
            left_right_swap: vec![0, 1, 2],
        };
        let maps: Vec<Vec<f64>> = vec![
            vec![0.2, 0.4, 0.9],
            vec![0.1, 0.8, 0.3],
            vec![0.5, 0.0, 0.7],
        ];
        let scaled: Vec<Vec<f64>> = maps
            .iter()
            .map(|m| m.iter().map(|v| v * 2.5).collect())
            .collect();
        let a = part_heatmaps(&maps, &g).unwrap();
        let b = part_heatmaps(&scaled, &g).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            for (x, y) in pa.iter().zip(pb) {
                assert!((x * 2.5 - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_constant_map() {
        let layout = layout_4x4_p2();
        let map = vec![0.7f64; 16];
        let v = pool_to_patch_grid(&map, 4, 4, &layout).unwrap();
        assert_eq!(v.len(), 4);
        for x in v {
            assert!((x - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_hand_computed_windows() {
        let layout = layout_4x4_p2();
        #[rustfmt::skip]
        let map = vec![
            1.0, 2.0, 3.0, 4.0,
            5.0, 6.0, 7.0, 8.0,
            9.0, 10.0, 11.0, 12.0,
            13.0, 14.0, 15.0, 16.0,
        ];
        let v = pool_to_patch_grid(&map, 4, 4, &layout).unwrap();
        assert_eq!(v, vec![3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pooling_unit_mass_in_one_window() {
        let layout = layout_4x4_p2();
        let mut map = vec![0.0f64; 16];
        map[2 * 4 + 1] = 1.0; // inside window (row band 1, col band 0)
        let v = pool_to_patch_grid(&map, 4, 4, &layout).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn pooling_rejects_oversized_layout() {
        let layout = PatchLayout::new(8, 8, 2, 2);
        let map = vec![0.0f64; 16];
        assert!(pool_to_patch_grid(&map, 4, 4, &layout).is_err());
    }

    #[test]
    fn pooling_preserves_global_mean_when_partitioning() {
        let layout = layout_4x4_p2(); // stride == patch: windows partition
        let map: Vec<f64> = (0..16).map(|i| (i as f64).sin().abs()).collect();
        let v = pool_to_patch_grid(&map, 4, 4, &layout).unwrap();
        let grid_mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let map_mean: f64 = map.iter().sum::<f64>() / 16.0;
        assert!((grid_mean - map_mean).abs() < 1e-12);
    }

    #[test]
    fn pooling_flip_equivariant_when_partitioning() {
        let layout = layout_4x4_p2();
        let map: Vec<f64> = (0..16).map(|i| (i * i % 7) as f64).collect();
        let mut mirrored = vec![0.0f64; 16];
        for r in 0..4 {
            for c in 0..4 {
                mirrored[r * 4 + c] = map[r * 4 + (3 - c)];
            }
        }
        let a = pool_to_patch_grid(&map, 4, 4, &layout).unwrap();
        let b = pool_to_patch_grid(&mirrored, 4, 4, &layout).unwrap();
        let cols = layout.cols();
        for r in 0..layout.rows() {
            for c in 0..cols {
                assert!((a[r * cols + c] - b[r * cols + (cols - 1 - c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clip_importance_is_frame_mean() {
        let t0 = vec![vec![1.0, 0.0]];
        let t1 = vec![vec![0.0, 1.0]];
        let out = clip_importance(&[t0.clone(), t1]);
        assert_eq!(out, vec![vec![0.5, 0.5]]);
        let same = clip_importance(&[t0.clone(), t0.clone(), t0.clone()]);
        assert_eq!(same, t0);
        let single = clip_importance(&[vec![vec![0.3, 0.9]]]);
        assert_eq!(single, vec![vec![0.3, 0.9]]);
    }

    #[test]
    fn default_grouping_is_valid_and_covers_joints() {
        let g = PartGrouping::coco17_six_parts();
        g.validate().unwrap();
        let mut seen = vec![false; 17];
        for grp in &g.groups {
            for &j in grp {
                seen[j] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn stripes_cover_grid_exactly_once() {
        let layout = PatchLayout::new(64, 32, 8, 8); // 8x4 grid
        let stripes = stripe_importance(&layout, 6);
        assert_eq!(stripes.len(), 6);
        let mut total = vec![0.0f64; layout.n()];
        for s in &stripes {
            for (t, v) in total.iter_mut().zip(s) {
                *t += v;
            }
        }
        assert!(total.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}

//! Shared spatiotemporal patch encoder: overlapping patch projection with a
//! per-frame [CLS] token, positional/camera embedding mixing, a stack of
//! per-frame encoder layers, and the dispatcher that splits [CLS] tokens
//! from patch tokens.

use alloc::format;
use alloc::vec::Vec;

use crate::data::Image;
use crate::error::CoreError;
use crate::params::{join, ParamKind, ParamVisit};
use crate::rng::Prng;
use crate::scalar::Real;
use crate::tensor::{concat_rows, Tape, Tensor, Var};
use crate::transformer::{EncoderBlock, Linear, INIT_STD};
use crate::Result;

/// Overlapping patch grid arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchLayout {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PatchLayout {
    pub fn new(h: usize, w: usize, patch: usize, stride: usize) -> Self {
        assert!(patch >= 1 && stride >= 1, "patch and stride must be positive");
        assert!(patch <= h && patch <= w, "patch larger than image");
        PatchLayout { h, w, patch, stride }
    }

    pub fn rows(&self) -> usize {
        (self.h - self.patch) / self.stride + 1
    }

    pub fn cols(&self) -> usize {
        (self.w - self.patch) / self.stride + 1
    }

    /// Patch tokens per frame.
    pub fn n(&self) -> usize {
        self.rows() * self.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub stride: usize,
    /// Embedding width D.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Mixing weight between positional and camera embeddings.
    pub lambda_mix: f64,
    pub num_cameras: usize,
    /// Frames per clip T.
    pub frames: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::desk(2)
    }
}

impl BackboneConfig {
    /// Small configuration exercised by the test suite end to end.
    pub fn desk(num_cameras: usize) -> Self {
        BackboneConfig {
            image_h: 64,
            image_w: 32,
            patch: 8,
            stride: 8,
            dim: 32,
            layers: 2,
            heads: 4,
            lambda_mix: 0.5,
            num_cameras,
            frames: 4,
            dropout: 0.0,
        }
    }

    /// Full-scale configuration (12-layer, D=768, 256x128 input). Expressible
    /// but not exercised by tests.
    pub fn full(num_cameras: usize) -> Self {
        BackboneConfig {
            image_h: 256,
            image_w: 128,
            patch: 16,
            stride: 16,
            dim: 768,
            layers: 12,
            heads: 12,
            lambda_mix: 0.5,
            num_cameras,
            frames: 4,
            dropout: 0.0,
        }
    }

    pub fn layout(&self) -> PatchLayout {
        PatchLayout::new(self.image_h, self.image_w, self.patch, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(CoreError::invalid("dim must be divisible by heads"));
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(CoreError::invalid("lambda_mix must lie in [0,1]"));
        }
        if self.patch > self.image_h || self.patch > self.image_w {
            return Err(CoreError::invalid("patch larger than image"));
        }
        if self.frames == 0 || self.num_cameras == 0 {
            return Err(CoreError::invalid("frames and num_cameras must be positive"));
        }
        Ok(())
    }
}

/// Flatten the patch windows of one frame into an `[n, P*P*3]` matrix,
/// row-major over the patch grid.
pub fn extract_patches<F: Real>(img: &Image, layout: &PatchLayout) -> Vec<F> {
    let p = layout.patch;
    let mut out = Vec::with_capacity(layout.n() * p * p * 3);
    for r in 0..layout.rows() {
        for c in 0..layout.cols() {
            let (y0, x0) = (r * layout.stride, c * layout.stride);
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    let px = img.pixel(y, x);
                    out.push(F::from_f64(px[0] as f64));
                    out.push(F::from_f64(px[1] as f64));
                    out.push(F::from_f64(px[2] as f64));
                }
            }
        }
    }
    out
}

#[derive(Clone)]
pub struct Backbone<F: Real> {
    pub config: BackboneConfig,
    pub patch_proj: Linear<F>,
    /// Shared learnable [CLS] vector, `[1, D]`.
    pub cls_token: Tensor<F>,
    /// Spatiotemporal positional table, `[T*(n+1), D]`.
    pub pos_embed: Tensor<F>,
    /// One embedding per camera, `[num_cameras, D]`.
    pub cam_embed: Tensor<F>,
    pub blocks: Vec<EncoderBlock<F>>,
}

impl<F: Real> Backbone<F> {
    pub fn init(config: BackboneConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let tokens_per_frame = layout.n() + 1;
        let patch_proj = Linear::init(config.patch * config.patch * 3, config.dim, rng);
        let cls_token = Tensor::trunc_normal(alloc::vec![1, config.dim], INIT_STD, rng);
        let pos_embed = Tensor::trunc_normal(
            alloc::vec![config.frames * tokens_per_frame, config.dim],
            INIT_STD,
            rng,
        );
        let cam_embed =
            Tensor::trunc_normal(alloc::vec![config.num_cameras, config.dim], INIT_STD, rng);
        let blocks = (0..config.layers)
            .map(|_| EncoderBlock::init(config.dim, config.heads, rng))
            .collect();
        Ok(Backbone {
            config,
            patch_proj,
            cls_token,
            pos_embed,
            cam_embed,
            blocks,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.config.layout().n() + 1
    }

    /// Patch projection with a prepended [CLS] token per frame. Output is
    /// the `[T*(n+1), D]` token matrix in frame-major order.
    pub fn patchify_project<'t>(
        &self,
        tape: &'t Tape<F>,
        frames: &[Image],
    ) -> Result<Var<'t, F>> {
        let layout = self.config.layout();
        if frames.len() != self.config.frames {
            return Err(CoreError::shape(format!(
                "expected {} frames per clip, got {}",
                self.config.frames,
                frames.len()
            )));
        }
        for f in frames {
            if f.h != layout.h || f.w != layout.w {
                return Err(CoreError::shape(format!(
                    "frame is {}x{}, layout expects {}x{}",
                    f.h, f.w, layout.h, layout.w
                )));
            }
        }
        let n = layout.n();
        let pdim = layout.patch * layout.patch * 3;
        let mut per_frame = Vec::with_capacity(frames.len());
        for img in frames {
            let patches = tape.constant(alloc::vec![n, pdim], extract_patches(img, &layout));
            let tokens = self.patch_proj.forward(patches);
            let cls = tape.param(&self.cls_token);
            per_frame.push(concat_rows(tape, &[cls, tokens]));
        }
        Ok(concat_rows(tape, &per_frame))
    }

    /// Mix in positional and camera priors:
    /// `Z + lambda * pos + (1 - lambda) * cam[camera]` broadcast per token.
    pub fn add_pos_cam<'t>(
        &self,
        tape: &'t Tape<F>,
        tokens: Var<'t, F>,
        camera_id: usize,
    ) -> Result<Var<'t, F>> {
        if camera_id >= self.config.num_cameras {
            return Err(CoreError::invalid(format!(
                "camera {camera_id} outside the {} configured cameras",
                self.config.num_cameras
            )));
        }
        let lambda = F::from_f64(self.config.lambda_mix);
        let one_minus = F::from_f64(1.0 - self.config.lambda_mix);
        let pos = tape.param(&self.pos_embed).scale(lambda);
        let with_pos = tokens.add(pos);
        let dim = self.config.dim;
        let cam_row = tape
            .param(&self.cam_embed)
            .gather_rows(&[camera_id])
            .reshape(&[dim])
            .scale(one_minus);
        Ok(with_pos.add_row(cam_row))
    }

    /// Run the encoder stack independently per frame over its `n+1` tokens.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape<F>,
        tokens: Var<'t, F>,
        mut dropout: Option<(&mut Prng, f64)>,
    ) -> Var<'t, F> {
        let tpf = self.tokens_per_frame();
        let t = self.config.frames;
        assert_eq!(tokens.shape(), alloc::vec![t * tpf, self.config.dim]);
        if self.blocks.is_empty() {
            return tokens;
        }
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let mut x = tokens.slice_rows(ti * tpf, tpf);
            for block in &self.blocks {
                let d = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
                x = block.forward(x, d);
            }
            frames.push(x);
        }
        concat_rows(tape, &frames)
    }

    /// Full backbone pass for one clip.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<F>,
        frames: &[Image],
        camera_id: usize,
        dropout: Option<(&mut Prng, f64)>,
    ) -> Result<Var<'t, F>> {
        let tokens = self.patchify_project(tape, frames)?;
        let mixed = self.add_pos_cam(tape, tokens, camera_id)?;
        Ok(self.encode(tape, mixed, dropout))
    }
}

/// Split the token matrix into [CLS] rows (`[T, D]`) and patch rows
/// (`[T*n, D]`, frame-major).
pub fn dispatch<'t, F: Real>(
    tokens: Var<'t, F>,
    t: usize,
    n: usize,
) -> (Var<'t, F>, Var<'t, F>) {
    let shape = tokens.shape();
    assert_eq!(shape[0], t * (n + 1), "dispatch: token count mismatch");
    let cls_indices: Vec<usize> = (0..t).map(|ti| ti * (n + 1)).collect();
    let patch_indices: Vec<usize> = (0..t)
        .flat_map(|ti| (1..=n).map(move |p| ti * (n + 1) + p))
        .collect();
    (
        tokens.gather_rows(&cls_indices),
        tokens.gather_rows(&patch_indices),
    )
}

impl<F: Real> ParamVisit<F> for Backbone<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        self.patch_proj.visit_params(&join(prefix, "patch_proj"), f);
        f(join(prefix, "cls_token"), &self.cls_token, ParamKind::Trainable);
        f(join(prefix, "pos_embed"), &self.pos_embed, ParamKind::Trainable);
        f(join(prefix, "cam_embed"), &self.cam_embed, ParamKind::Trainable);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        self.patch_proj.visit_params_mut(&join(prefix, "patch_proj"), f);
        f(join(prefix, "cls_token"), &mut self.cls_token, ParamKind::Trainable);
        f(join(prefix, "pos_embed"), &mut self.pos_embed, ParamKind::Trainable);
        f(join(prefix, "cam_embed"), &mut self.cam_embed, ParamKind::Trainable);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

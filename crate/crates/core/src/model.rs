//! Full model assembly: backbone -> (global branch, local branch) -> heads,
//! plus clip preparation (patch extraction and part importance) and
//! inference-time descriptor construction.

use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{dispatch, Backbone, BackboneConfig};
use crate::data::{Clip, SampleMode, Tracklet};
use crate::global_branch::{aggregate, GlobalBranch, HeadOutput};
use crate::local_branch::{LocalBranch, TcssConfig};
use crate::metrics::Descriptor;
use crate::params::{ParamKind, ParamVisit};
use crate::pose::{clip_part_importance, stripe_importance, PartGrouping, PoseConfig};
use crate::rng::Prng;
use crate::scalar::Real;
use crate::tensor::{concat_rows, BatchStats, Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tcss: TcssConfig,
    pub grouping: PartGrouping,
    pub pose: PoseConfig,
    /// Identity count C for the classifier heads.
    pub classes: usize,
    /// Mid channels of the temporal-attention conv scorer.
    pub attn_channels: usize,
}

impl ModelConfig {
    pub fn desk(classes: usize, num_cameras: usize) -> Self {
        let backbone = BackboneConfig::desk(num_cameras);
        ModelConfig {
            pose: PoseConfig::for_height(backbone.image_h),
            backbone,
            tcss: TcssConfig::default(),
            grouping: PartGrouping::coco17_six_parts(),
            classes,
            attn_channels: 4,
        }
    }

    pub fn num_parts(&self) -> usize {
        self.grouping.num_parts()
    }

    /// Width of one part token: T * D.
    pub fn part_width(&self) -> usize {
        self.backbone.frames * self.backbone.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.grouping.validate()?;
        if self.classes == 0 {
            return Err(crate::CoreError::invalid("need at least one identity class"));
        }
        Ok(())
    }
}

/// Which pathway(s) to disable; `no_tcss` swaps in the identity permutation
/// and `no_kps` replaces keypoint importance with uniform stripes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Ablation {
    pub no_tcss: bool,
    pub no_kps: bool,
    pub no_local: bool,
    pub no_global: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        no_tcss: false,
        no_kps: false,
        no_local: false,
        no_global: false,
    };

    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match s {
            "no_tcss" => a.no_tcss = true,
            "no_kps" => a.no_kps = true,
            "no_local" => a.no_local = true,
            "no_global" => a.no_global = true,
            other => {
                return Err(crate::CoreError::invalid(alloc::format!(
                    "unknown ablation `{other}` (expected no_tcss|no_kps|no_local|no_global)"
                )))
            }
        }
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_local && self.no_global {
            return Err(crate::CoreError::invalid(
                "cannot ablate both branches at once",
            ));
        }
        Ok(())
    }
}

/// A clip turned into model inputs: raw frames for the patch projector plus
/// the clip-level part importance rows.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub frames: Vec<crate::data::Image>,
    pub camera_id: usize,
    pub label: usize,
    /// `K` rows of length `n`.
    pub importance: Vec<Vec<f64>>,
}

pub struct GlobalBatch<'t, F: Real> {
    /// Pre-norm aggregated feature `[B, D]`.
    pub features: Var<'t, F>,
    pub head: HeadOutput<'t, F>,
    /// `[B, T]` attention weights.
    pub alphas: Var<'t, F>,
}

pub struct PartBatch<'t, F: Real> {
    /// Pre-norm part feature `[B, T*D]`.
    pub features: Var<'t, F>,
    pub head: HeadOutput<'t, F>,
}

pub struct BatchOutputs<'t, F: Real> {
    pub global: Option<GlobalBatch<'t, F>>,
    pub parts: Option<Vec<PartBatch<'t, F>>>,
}

#[derive(Clone)]
pub struct KeyReIdModel<F: Real> {
    pub config: ModelConfig,
    pub backbone: Backbone<F>,
    pub global_branch: GlobalBranch<F>,
    pub local_branch: LocalBranch<F>,
}

impl<F: Real> KeyReIdModel<F> {
    pub fn init(config: ModelConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::init(config.backbone.clone(), rng)?;
        let global_branch = GlobalBranch::init(
            config.backbone.dim,
            config.backbone.heads,
            config.classes,
            config.attn_channels,
            rng,
        );
        let local_branch = LocalBranch::init(
            config.part_width(),
            config.backbone.heads,
            config.num_parts(),
            config.classes,
            rng,
        );
        Ok(KeyReIdModel {
            config,
            backbone,
            global_branch,
            local_branch,
        })
    }

    /// Patch importance + input prep for one clip. Label is the internal
    /// identity index.
    pub fn prepare_clip(&self, clip: &Clip, ablate: &Ablation) -> Result<PreparedClip> {
        let layout = self.config.backbone.layout();
        let importance = if ablate.no_local {
            Vec::new()
        } else if ablate.no_kps {
            stripe_importance(&layout, self.config.num_parts())
        } else {
            clip_part_importance(&clip.keypoints, &layout, &self.config.grouping, &self.config.pose)?
        };
        Ok(PreparedClip {
            frames: clip.frames.clone(),
            camera_id: clip.camera_id,
            label: clip.person_id,
            importance,
        })
    }

    /// Joint forward over a batch of prepared clips. Batch normalization in
    /// the heads couples batch members in train mode.
    pub fn forward_batch<'t>(
        &self,
        tape: &'t Tape<F>,
        batch: &[PreparedClip],
        train: bool,
        ablate: &Ablation,
        mut dropout_rng: Option<&mut Prng>,
    ) -> Result<BatchOutputs<'t, F>> {
        ablate.validate()?;
        assert!(!batch.is_empty(), "empty batch");
        let t = self.config.backbone.frames;
        let n = self.config.backbone.layout().n();
        let p = self.config.dropout_rate(train);

        let mut global_features = Vec::new();
        let mut global_alphas = Vec::new();
        let mut part_features: Vec<Vec<Var<'t, F>>> =
            (0..self.config.num_parts()).map(|_| Vec::new()).collect();

        for clip in batch {
            let d = dropout_rng.as_deref_mut().map(|rng| (rng, p));
            let tokens = self.backbone.forward(tape, &clip.frames, clip.camera_id, d)?;

            if !ablate.no_global {
                let d = dropout_rng.as_deref_mut().map(|rng| (rng, p));
                let refined = self.global_branch.refine_tokens(tokens, d);
                let (g_cls, _) = dispatch(refined, t, n);
                let (_, alpha) = self.global_branch.attention.forward(g_cls);
                global_features.push(aggregate(g_cls, alpha));
                global_alphas.push(alpha.reshape(&[1, t]));
            }

            if !ablate.no_local {
                let (f_cls, f_patch) = dispatch(tokens, t, n);
                let tcss_cfg = if ablate.no_tcss {
                    TcssConfig::IDENTITY
                } else {
                    self.config.tcss
                };
                let d = dropout_rng.as_deref_mut().map(|rng| (rng, p));
                let feats = self.local_branch.part_features(
                    tape,
                    f_cls,
                    f_patch,
                    &clip.importance,
                    &tcss_cfg,
                    d,
                )?;
                for (k, f) in feats.into_iter().enumerate() {
                    part_features[k].push(f);
                }
            }
        }

        let global = if ablate.no_global {
            None
        } else {
            let features = concat_rows(tape, &global_features);
            let alphas = concat_rows(tape, &global_alphas);
            let head = self.global_branch.head.forward(features, train);
            Some(GlobalBatch {
                features,
                head,
                alphas,
            })
        };

        let parts = if ablate.no_local {
            None
        } else {
            let mut out = Vec::with_capacity(self.config.num_parts());
            for (k, rows) in part_features.into_iter().enumerate() {
                let features = concat_rows(tape, &rows);
                let head = self.local_branch.heads[k].forward(features, train);
                out.push(PartBatch { features, head });
            }
            Some(out)
        };

        Ok(BatchOutputs { global, parts })
    }

    /// Fold the train-mode batch statistics of every head back into running
    /// estimates. Call once per successful step.
    pub fn apply_bn_stats(
        &mut self,
        global: Option<&BatchStats<F>>,
        parts: &[Option<BatchStats<F>>],
    ) {
        if let Some(stats) = global {
            self.global_branch.head.bn.update_running(stats);
        }
        for (head, stats) in self.local_branch.heads.iter_mut().zip(parts) {
            if let Some(stats) = stats {
                head.bn.update_running(stats);
            }
        }
    }

    /// Deterministic eval-mode embedding of one tracklet: an inference-mode
    /// clip, post-norm global and part features concatenated into an f32
    /// descriptor.
    pub fn embed_tracklet(&self, tracklet: &Tracklet, ablate: &Ablation) -> Result<Descriptor> {
        // rng is never consumed by inference-mode sampling
        let mut rng = Prng::seed_from_u64(0);
        let clip = crate::data::sample_clip(tracklet, self.config.backbone.frames, SampleMode::Inference, &mut rng)?;
        let prepared = self.prepare_clip(&clip, ablate)?;
        let tape = Tape::new();
        let outs = self.forward_batch(&tape, core::slice::from_ref(&prepared), false, ablate, None)?;
        let mut vector: Vec<f32> = Vec::with_capacity(self.descriptor_width(ablate));
        if let Some(g) = &outs.global {
            vector.extend(g.head.feature.value().iter().map(|v| v.as_f64() as f32));
        }
        if let Some(parts) = &outs.parts {
            for p in parts {
                vector.extend(p.head.feature.value().iter().map(|v| v.as_f64() as f32));
            }
        }
        Ok(Descriptor {
            vector,
            person_id: tracklet.person_id,
            camera_id: tracklet.camera_id,
            key: tracklet.key.clone(),
        })
    }

    pub fn descriptor_width(&self, ablate: &Ablation) -> usize {
        let mut w = 0;
        if !ablate.no_global {
            w += self.config.backbone.dim;
        }
        if !ablate.no_local {
            w += self.config.num_parts() * self.config.part_width();
        }
        w
    }

    pub fn num_parameters(&self) -> usize {
        let mut count = 0usize;
        self.visit_params("", &mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                count += t.numel();
            }
        });
        count
    }

    /// Collect `(path, tensor)` snapshots, both trainable and state.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<F>, ParamKind)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |path, t, kind| {
            out.push((path, t.shape().to_vec(), t.values().to_vec(), kind));
        });
        out
    }
}

impl ModelConfig {
    fn dropout_rate(&self, train: bool) -> f64 {
        if train {
            self.backbone.dropout
        } else {
            0.0
        }
    }
}

impl<F: Real> ParamVisit<F> for KeyReIdModel<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a Tensor<F>, ParamKind),
    ) {
        let p = |s: &str| crate::params::join(prefix, s);
        self.backbone.visit_params(&p("backbone"), f);
        self.global_branch.visit_params(&p("global"), f);
        self.local_branch.visit_params(&p("local"), f);
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor<F>, ParamKind),
    ) {
        let p = |s: &str| crate::params::join(prefix, s);
        self.backbone.visit_params_mut(&p("backbone"), f);
        self.global_branch.visit_params_mut(&p("global"), f);
        self.local_branch.visit_params_mut(&p("local"), f);
    }
}

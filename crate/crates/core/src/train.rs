//! PK-sampled mini-batch training: batch assembly, one SGD step over the
//! composite objective, and the resumable training state. The epoch loop
//! with logging and checkpoints lives in the companion crate.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{augment_clip, sample_clip, AugmentConfig, Clip, SampleMode, Tracklet};
use crate::error::CoreError;
use crate::model::{Ablation, KeyReIdModel, PreparedClip};
use crate::objectives::{
    total_loss, update_centers, BranchTerms, Centers, GlobalTerms, LossBreakdown, LossWeights,
};
use crate::optim::{lr_schedule, ScheduleConfig, Sgd, SgdConfig};
use crate::rng::Prng;
use crate::scalar::Real;
use crate::tensor::Tape;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Identities per batch (P) and instances per identity (K); the batch
    /// size is their product.
    pub p_ids: usize,
    pub k_instances: usize,
    pub warmup_epochs: usize,
    /// Steps per epoch; 0 derives ceil(train tracklets / batch).
    pub steps_per_epoch: usize,
    /// Run retrieval evaluation every this many epochs (0 = only at the
    /// end).
    pub eval_interval: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            base_lr: 0.008,
            momentum: 0.9,
            weight_decay: 1e-4,
            p_ids: 8,
            k_instances: 4,
            warmup_epochs: 5,
            steps_per_epoch: 0,
            eval_interval: 0,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p_ids * self.k_instances
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_ids == 0 || self.k_instances == 0 {
            return Err(CoreError::invalid("P and K must be positive"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(CoreError::invalid("warmup must end before the last epoch"));
        }
        Ok(())
    }

    pub fn effective_steps_per_epoch(&self, train_tracklets: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            train_tracklets.div_ceil(self.batch_size()).max(1)
        }
    }
}

/// Draw `P` identities without replacement and `K` tracklets per identity
/// (with replacement when an identity has fewer), then cut an augmented
/// train-mode clip from each.
pub fn pk_sample(
    train: &[Tracklet],
    p_ids: usize,
    k_instances: usize,
    frames: usize,
    augment: &AugmentConfig,
    grouping: &crate::pose::PartGrouping,
    rng: &mut Prng,
) -> Result<Vec<Clip>> {
    let mut by_id: alloc::collections::BTreeMap<usize, Vec<usize>> =
        alloc::collections::BTreeMap::new();
    for (i, t) in train.iter().enumerate() {
        by_id.entry(t.person_id).or_default().push(i);
    }
    if by_id.len() < p_ids {
        return Err(CoreError::invalid(format!(
            "need {p_ids} identities, train split has {}",
            by_id.len()
        )));
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    rng.shuffle(&mut ids);
    ids.truncate(p_ids);

    let mut clips = Vec::with_capacity(p_ids * k_instances);
    for id in ids {
        let pool = &by_id[&id];
        let chosen: Vec<usize> = if pool.len() >= k_instances {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(k_instances);
            idx.into_iter().map(|i| pool[i]).collect()
        } else {
            (0..k_instances).map(|_| pool[rng.below(pool.len())]).collect()
        };
        for tracklet_idx in chosen {
            let clip = sample_clip(&train[tracklet_idx], frames, SampleMode::Train, rng)?;
            clips.push(augment_clip(&clip, augment, grouping, rng));
        }
    }
    Ok(clips)
}

/// Everything one resumable run owns.
pub struct TrainState<F: Real> {
    pub model: KeyReIdModel<F>,
    pub optimizer: Sgd<F>,
    pub centers: Centers<F>,
    pub weights: LossWeights,
    pub config: TrainConfig,
    pub ablation: Ablation,
    /// Next epoch to run.
    pub epoch: usize,
    pub rng: Prng,
    pub best_map: f64,
}

impl<F: Real> TrainState<F> {
    pub fn new(
        model: KeyReIdModel<F>,
        config: TrainConfig,
        weights: LossWeights,
        ablation: Ablation,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        ablation.validate()?;
        let centers = Centers::zeros(
            model.config.classes,
            model.config.backbone.dim,
            model.config.part_width(),
            model.config.num_parts(),
        );
        let rng = Prng::seed_from_u64(config.seed);
        let optimizer = Sgd::new(SgdConfig {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        });
        Ok(TrainState {
            model,
            optimizer,
            centers,
            weights,
            config,
            ablation,
            epoch: 0,
            rng,
            best_map: 0.0,
        })
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, &self.config.schedule())
    }
}

/// One optimization step over a sampled batch. On a non-finite loss the
/// state is left untouched and an error is returned.
pub fn train_step<F: Real>(
    state: &mut TrainState<F>,
    batch: &[Clip],
    lr: f64,
) -> Result<LossBreakdown> {
    let ablate = state.ablation;
    let prepared: Result<Vec<PreparedClip>> = batch
        .iter()
        .map(|c| state.model.prepare_clip(c, &ablate))
        .collect();
    let prepared = prepared?;
    let labels: Vec<usize> = prepared.iter().map(|c| c.label).collect();

    let tape = Tape::new();
    let dropout_on = state.model.config.backbone.dropout > 0.0;
    let mut dropout_rng = state.rng.clone();
    let outs = state.model.forward_batch(
        &tape,
        &prepared,
        true,
        &ablate,
        dropout_on.then_some(&mut dropout_rng),
    )?;

    let global_terms = outs.global.as_ref().map(|g| GlobalTerms {
        terms: BranchTerms {
            features: g.features,
            logits: g.head.logits,
        },
        alphas: g.alphas,
    });
    let part_terms: Option<Vec<BranchTerms<'_, F>>> = outs.parts.as_ref().map(|parts| {
        parts
            .iter()
            .map(|p| BranchTerms {
                features: p.features,
                logits: p.head.logits,
            })
            .collect()
    });

    let (loss, breakdown) = total_loss(
        &tape,
        global_terms,
        part_terms.as_deref(),
        &labels,
        &state.weights,
        &state.centers,
    )?;
    if !breakdown.total.is_finite() {
        return Err(CoreError::non_finite(format!(
            "loss diverged at epoch {}: {}",
            state.epoch, breakdown.total
        )));
    }

    let grads = tape.backward(loss);

    // Everything needed after the tape is gone.
    let global_stats = outs.global.as_ref().and_then(|g| g.head.stats.clone());
    let part_stats: Vec<Option<crate::tensor::BatchStats<F>>> = outs
        .parts
        .as_ref()
        .map(|ps| ps.iter().map(|p| p.head.stats.clone()).collect())
        .unwrap_or_default();
    let global_feature_values = outs.global.as_ref().map(|g| g.features.value().as_ref().clone());
    let part_feature_values: Vec<Vec<F>> = outs
        .parts
        .as_ref()
        .map(|ps| ps.iter().map(|p| p.features.value().as_ref().clone()).collect())
        .unwrap_or_default();
    drop(outs);
    drop(tape);

    // Commit: dropout rng draws, parameters, BN stats, centers.
    if dropout_on {
        state.rng = dropout_rng;
    }
    state.optimizer.step(&mut state.model, &grads, lr);
    state.model.apply_bn_stats(global_stats.as_ref(), &part_stats);
    if let Some(values) = global_feature_values {
        update_centers(
            &mut state.centers.global,
            &values,
            &labels,
            state.weights.center_lr,
        );
    }
    for (bank, values) in state.centers.parts.iter_mut().zip(&part_feature_values) {
        update_centers(bank, values, &labels, state.weights.center_lr);
    }

    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Joint, KeypointFrame};
    use crate::pose::PartGrouping;

    fn toy_train_set(ids: usize, per_id: usize) -> Vec<Tracklet> {
        let mut out = Vec::new();
        for id in 0..ids {
            for j in 0..per_id {
                let mut rng = Prng::seed_from_u64((id * 100 + j) as u64);
                let frames: Vec<Image> = (0..6)
                    .map(|_| {
                        let mut img = Image::new(64, 32);
                        for v in img.data.iter_mut() {
                            *v = rng.uniform_f64() as f32;
                        }
                        img
                    })
                    .collect();
                let kps = (0..6)
                    .map(|_| KeypointFrame {
                        joints: (0..17)
                            .map(|k| Joint {
                                x: 16.0,
                                y: 4.0 * k as f64,
                                confidence: 1.0,
                            })
                            .collect(),
                    })
                    .collect();
                out.push(Tracklet {
                    person_id: id,
                    camera_id: j % 2,
                    frames,
                    keypoints: kps,
                    key: format!("t{id}_{j}"),
                });
            }
        }
        out
    }

    #[test]
    fn pk_batch_composition() {
        let train = toy_train_set(8, 3);
        let mut rng = Prng::seed_from_u64(1);
        let clips = pk_sample(
            &train,
            8,
            4,
            4,
            &AugmentConfig::default(),
            &PartGrouping::coco17_six_parts(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(clips.len(), 32);
        let mut ids: Vec<usize> = clips.iter().map(|c| c.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 8);
        for id in ids {
            assert_eq!(clips.iter().filter(|c| c.person_id == id).count(), 4);
        }
    }

    #[test]
    fn single_tracklet_identity_resamples_with_replacement() {
        let train = toy_train_set(2, 1);
        let mut rng = Prng::seed_from_u64(2);
        let clips = pk_sample(
            &train,
            2,
            4,
            4,
            &AugmentConfig {
                flip_probability: 0.0,
                erase_probability: 0.0,
            },
            &PartGrouping::coco17_six_parts(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(clips.len(), 8);
        assert_eq!(clips.iter().filter(|c| c.person_id == 0).count(), 4);
    }

    #[test]
    fn same_seed_gives_identical_batches() {
        let train = toy_train_set(4, 2);
        let grouping = PartGrouping::coco17_six_parts();
        let aug = AugmentConfig::default();
        let a = pk_sample(&train, 4, 2, 4, &aug, &grouping, &mut Prng::seed_from_u64(3)).unwrap();
        let b = pk_sample(&train, 4, 2, 4, &aug, &grouping, &mut Prng::seed_from_u64(3)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.person_id, y.person_id);
            assert_eq!(x.sampled_indices, y.sampled_indices);
            assert_eq!(x.frames, y.frames);
        }
    }

    #[test]
    fn too_few_identities_rejected() {
        let train = toy_train_set(3, 2);
        let mut rng = Prng::seed_from_u64(4);
        assert!(pk_sample(
            &train,
            8,
            4,
            4,
            &AugmentConfig::default(),
            &PartGrouping::coco17_six_parts(),
            &mut rng
        )
        .is_err());
    }
}

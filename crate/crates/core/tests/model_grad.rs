//! Finite-difference checks through the composed model paths: one encoder
//! layer, the backbone, the global pathway end to end, and the local
//! pathway with its losses.

use keyreid_core::backbone::{dispatch, Backbone, BackboneConfig};
use keyreid_core::data::{Image, Joint, KeypointFrame};
use keyreid_core::global_branch::aggregate;
use keyreid_core::gradcheck::{model_gradient_check, randomize_params, GradCheckConfig};
use keyreid_core::model::{Ablation, KeyReIdModel, ModelConfig, PreparedClip};
use keyreid_core::objectives::{
    attention_reg, center_loss, id_loss, triplet_batch_hard, BranchTerms, Centers, GlobalTerms,
    LossWeights,
};
use keyreid_core::params::{ParamKind, ParamVisit};
use keyreid_core::pose::PartGrouping;
use keyreid_core::rng::Prng;
use keyreid_core::tensor::{Tape, Tensor};
use keyreid_core::transformer::EncoderBlock;

/// Re-draw weights at a healthier scale than the training init so finite
/// differences resolve every coordinate cleanly.
fn beef_up(block: &mut EncoderBlock<f64>, rng: &mut Prng) {
    for lin in [
        &mut block.q,
        &mut block.k,
        &mut block.v,
        &mut block.proj,
        &mut block.fc1,
        &mut block.fc2,
    ] {
        for v in lin.weight.values_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
        if let Some(b) = &mut lin.bias {
            for v in b.values_mut() {
                *v = rng.uniform(-0.2, 0.2);
            }
        }
    }
    for v in block.ln1.gamma.values_mut() {
        *v = rng.uniform(0.7, 1.3);
    }
    for v in block.ln2.gamma.values_mut() {
        *v = rng.uniform(0.7, 1.3);
    }
}

fn cfg(coords: usize) -> GradCheckConfig {
    GradCheckConfig {
        epsilon: 1e-5,
        tolerance: 1e-4,
        coords_per_param: coords,
        seed: 1234,
    }
}

/// Wrap an encoder block plus a fixed input so the checker can see it.
#[derive(Clone)]
struct BlockUnderTest {
    block: EncoderBlock<f64>,
    input: Tensor<f64>,
}

impl ParamVisit<f64> for BlockUnderTest {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a Tensor<f64>, ParamKind),
    ) {
        self.block.visit_params(prefix, f);
    }
    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor<f64>, ParamKind),
    ) {
        self.block.visit_params_mut(prefix, f);
    }
}

#[test]
fn one_encoder_layer_grad() {
    let mut rng = Prng::seed_from_u64(21);
    let mut block = EncoderBlock::init(8, 2, &mut rng);
    beef_up(&mut block, &mut rng);
    let mut m = BlockUnderTest {
        block,
        input: Tensor::uniform(vec![5, 8], -1.0, 1.0, &mut rng),
    };
    let report = model_gradient_check(
        &mut m,
        |tape, m| {
            let weights: Vec<f64> = (0..40).map(|i| 0.2 + (i % 7) as f64 * 0.1).collect();
            m.block
                .forward(tape.constant_of(&m.input), None)
                .reshape(&[40])
                .mul_values(&weights)
                .sum()
        },
        &cfg(16),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{:?}", report.per_parameter);
}

fn random_frames(n: usize, h: usize, w: usize, rng: &mut Prng) -> Vec<Image> {
    (0..n)
        .map(|_| {
            let mut img = Image::new(h, w);
            for v in img.data.iter_mut() {
                *v = rng.uniform_f64() as f32;
            }
            img
        })
        .collect()
}

#[derive(Clone)]
struct BackboneUnderTest {
    backbone: Backbone<f64>,
    frames: Vec<Image>,
}

impl ParamVisit<f64> for BackboneUnderTest {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a Tensor<f64>, ParamKind),
    ) {
        self.backbone.visit_params(prefix, f);
    }
    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor<f64>, ParamKind),
    ) {
        self.backbone.visit_params_mut(prefix, f);
    }
}

#[test]
fn full_backbone_grad_at_desk_scale() {
    let mut rng = Prng::seed_from_u64(22);
    let config = BackboneConfig::desk(2);
    let mut m = BackboneUnderTest {
        backbone: Backbone::init(config, &mut rng).unwrap(),
        frames: random_frames(4, 64, 32, &mut rng),
    };
    randomize_params(&mut m, &mut rng);
    let report = model_gradient_check(
        &mut m,
        |tape, m| {
            let tokens = m.backbone.forward(tape, &m.frames, 1, None).unwrap();
            let n = tokens.numel();
            let weights: Vec<f64> = (0..n).map(|i| 0.1 + (i % 11) as f64 * 0.05).collect();
            tokens.reshape(&[n]).mul_values(&weights).sum()
        },
        &cfg(3),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.per_parameter);
}

fn toy_clips(model: &KeyReIdModel<f64>, count: usize, rng: &mut Prng) -> Vec<PreparedClip> {
    let layout = model.config.backbone.layout();
    (0..count)
        .map(|i| {
            let frames = random_frames(model.config.backbone.frames, layout.h, layout.w, rng);
            let keypoints: Vec<KeypointFrame> = (0..model.config.backbone.frames)
                .map(|_| KeypointFrame {
                    joints: (0..17)
                        .map(|_| Joint {
                            x: rng.uniform(0.0, layout.w as f64),
                            y: rng.uniform(0.0, layout.h as f64),
                            confidence: 1.0,
                        })
                        .collect(),
                })
                .collect();
            let clip = keyreid_core::data::Clip {
                frames,
                keypoints,
                person_id: i % 2,
                camera_id: i % 2,
                sampled_indices: (0..model.config.backbone.frames).collect(),
            };
            model.prepare_clip(&clip, &Ablation::NONE).unwrap()
        })
        .collect()
}

#[test]
fn global_pathway_grad_end_to_end() {
    let mut rng = Prng::seed_from_u64(23);
    let mut model = KeyReIdModel::<f64>::init(ModelConfig::desk(2, 2), &mut rng).unwrap();
    randomize_params(&mut model, &mut rng);
    let clips = toy_clips(&model, 4, &mut rng);
    let labels = vec![0usize, 1, 0, 1];
    let weights = LossWeights::default();
    let centers = Centers::zeros(2, 32, 128, 6);
    let ablate = Ablation {
        no_local: true,
        ..Default::default()
    };
    let report = model_gradient_check(
        &mut model,
        |tape, model| {
            let outs = model
                .forward_batch(tape, &clips, true, &ablate, None)
                .unwrap();
            let g = outs.global.as_ref().unwrap();
            let id = id_loss(g.head.logits, &labels, weights.smoothing).unwrap();
            let trip = triplet_batch_hard(g.features, &labels, weights.margin).unwrap();
            let cent = center_loss(g.features, &labels, &centers.global).unwrap();
            let attn = attention_reg(g.alphas);
            id.add(trip).add(cent.scale(weights.beta)).add(attn)
        },
        &cfg(2),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.per_parameter);
}

#[test]
fn local_pathway_grad_with_losses() {
    let mut rng = Prng::seed_from_u64(24);
    // small part set keeps this affordable; widths still composite
    let mut config = ModelConfig::desk(2, 2);
    config.grouping = PartGrouping {
        num_joints: 17,
        groups: vec![vec![0, 1, 2, 3, 4], vec![11, 12, 13, 14, 15, 16]],
        left_right_swap: PartGrouping::coco17_six_parts().left_right_swap,
    };
    let mut model = KeyReIdModel::<f64>::init(config, &mut rng).unwrap();
    randomize_params(&mut model, &mut rng);
    let clips = toy_clips(&model, 4, &mut rng);
    let labels = vec![0usize, 1, 0, 1];
    let weights = LossWeights::default();
    let centers = Centers::zeros(2, 32, 128, 2);
    let ablate = Ablation {
        no_global: true,
        ..Default::default()
    };
    let report = model_gradient_check(
        &mut model,
        |tape, model| {
            let outs = model
                .forward_batch(tape, &clips, true, &ablate, None)
                .unwrap();
            let parts = outs.parts.as_ref().unwrap();
            let mut terms = Vec::new();
            for (k, p) in parts.iter().enumerate() {
                let id = id_loss(p.head.logits, &labels, weights.smoothing).unwrap();
                let trip = triplet_batch_hard(p.features, &labels, weights.margin).unwrap();
                let cent = center_loss(p.features, &labels, &centers.parts[k]).unwrap();
                terms.push(id.add(trip).add(cent.scale(weights.beta)));
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = total.add(*t);
            }
            total.scale(1.0 / parts.len() as f64)
        },
        &cfg(2),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.per_parameter);
}

#[test]
fn refine_and_aggregate_grads() {
    let mut rng = Prng::seed_from_u64(25);
    let mut block = EncoderBlock::init(8, 2, &mut rng);
    beef_up(&mut block, &mut rng);
    let mut m = BlockUnderTest {
        block,
        input: Tensor::uniform(vec![12, 8], -1.0, 1.0, &mut rng),
    };
    // refine over all tokens jointly, then dispatch + aggregate with fixed
    // alpha to keep the path linear past the block
    let report = model_gradient_check(
        &mut m,
        |tape, m| {
            let refined = m.block.forward(tape.constant_of(&m.input), None);
            let (cls, _) = dispatch(refined, 3, 3);
            let alpha = tape.constant(vec![3], vec![0.2, 0.3, 0.5]);
            let agg = aggregate(cls, alpha);
            let weights: Vec<f64> = (0..8).map(|i| 0.5 + 0.1 * i as f64).collect();
            agg.reshape(&[8]).mul_values(&weights).sum()
        },
        &cfg(16),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{:?}", report.per_parameter);
}

/// Mirrors the spec'd decomposition: with both branches active the logged
/// total must equal alpha*global + (1-alpha)*local exactly.
#[test]
fn total_loss_decomposition_identity() {
    let mut rng = Prng::seed_from_u64(26);
    let mut config = ModelConfig::desk(2, 2);
    config.grouping = PartGrouping {
        num_joints: 17,
        groups: vec![vec![0, 1, 2], vec![5, 6, 7]],
        left_right_swap: PartGrouping::coco17_six_parts().left_right_swap,
    };
    let model = KeyReIdModel::<f64>::init(config, &mut rng).unwrap();
    let clips = toy_clips(&model, 4, &mut rng);
    let labels = vec![0usize, 1, 0, 1];
    let weights = LossWeights::default();
    let centers = Centers::zeros(2, 32, 128, 2);
    let tape = Tape::new();
    let outs = model
        .forward_batch(&tape, &clips, true, &Ablation::NONE, None)
        .unwrap();
    let g = outs.global.as_ref().unwrap();
    let global_terms = GlobalTerms {
        terms: BranchTerms {
            features: g.features,
            logits: g.head.logits,
        },
        alphas: g.alphas,
    };
    let parts: Vec<BranchTerms<'_, f64>> = outs
        .parts
        .as_ref()
        .unwrap()
        .iter()
        .map(|p| BranchTerms {
            features: p.features,
            logits: p.head.logits,
        })
        .collect();
    let (total, breakdown) = keyreid_core::objectives::total_loss(
        &tape,
        Some(global_terms),
        Some(&parts),
        &labels,
        &weights,
        &centers,
    )
    .unwrap();
    let recomposed = 0.75 * breakdown.global_total + 0.25 * breakdown.local_total;
    assert!((breakdown.total - recomposed).abs() < 1e-12);
    assert!((total.item() - breakdown.total).abs() == 0.0);
    // and the per-part mean identity
    let k = breakdown.part_id.len() as f64;
    let local_sum: f64 = (0..breakdown.part_id.len())
        .map(|i| {
            breakdown.part_id[i]
                + breakdown.part_triplet[i]
                + weights.beta * breakdown.part_center[i]
        })
        .sum();
    assert!((breakdown.local_total - local_sum / k).abs() < 1e-12);
}

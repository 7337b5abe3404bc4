use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::eval::dataset_hash;
use super::model::PpcrModel;
use super::pipeline::{mix_seed, run_pipeline, Mode, TemplateSeeds};
use super::HarnessError;
use crate::criteria::{bce_loss, ce_loss, coord_bins, dice_loss, l1_box_loss, total_loss, LossComponents};
use crate::diffcore::{AdamW, Graph, LrSchedule, ParamGrads, Tensor};
use crate::prompt::TemplateBank;
use crate::shapeworld::ReferringSample;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const SEMANTIC_STREAM: u64 = 1;
const SPATIAL_STREAM: u64 = 2;

/// Template seeds of sample `id` in `epoch`; evaluation uses `epoch = u64::MAX`.
pub(crate) fn template_seeds(seed: u64, epoch: u64, id: usize) -> TemplateSeeds {
    TemplateSeeds {
        semantic: mix_seed(&[seed, epoch, id as u64, SEMANTIC_STREAM]),
        spatial: mix_seed(&[seed, epoch, id as u64, SPATIAL_STREAM]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_components: LossComponents,
    pub last_lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub steps: u64,
    pub epochs: Vec<EpochLog>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PpcrModel,
    pub log: TrainLog,
}

/// Builds a fresh model for `config.variant` and trains it.
pub fn train(
    config: &RunConfig,
    templates: TemplateBank,
    samples: &[ReferringSample],
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let model = PpcrModel::new(config.model, config.variant, templates, config.seed)?;
    train_model(config, model, samples)
}

fn sample_loss(
    model: &PpcrModel,
    g: &mut Graph,
    config: &RunConfig,
    sample: &ReferringSample,
    seeds: TemplateSeeds,
) -> Result<(crate::diffcore::Var, LossComponents), HarnessError> {
    let (w, h) = (sample.image.width(), sample.image.height());
    let out = run_pipeline(
        model,
        g,
        &sample.image,
        &sample.expression,
        config.variant,
        Mode::Train,
        seeds,
        Some(sample.gt_box),
    )?;
    let gt_unit = sample.gt_box.normalized(w, h);
    let bce = bce_loss(g, out.mask_logits, &sample.gt_mask)?;
    let dice = dice_loss(g, out.mask_logits, &sample.gt_mask)?;
    let l1 = out.box_raw.map(|b| l1_box_loss(g, b, gt_unit)).transpose()?;
    let bins = model.config.grounding.coord_bins;
    let ce = out
        .coord_logits
        .map(|c| ce_loss(g, c, &coord_bins(gt_unit, bins)))
        .transpose()?;
    let scalar = |g: &Graph, v: Option<crate::diffcore::Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let parts = LossComponents {
        bce: scalar(g, Some(bce)),
        dice: scalar(g, Some(dice)),
        l1: scalar(g, l1),
        ce: scalar(g, ce),
    };
    let total = total_loss(g, Some(bce), Some(dice), l1, ce, &config.loss_weights)?;
    Ok((total, parts))
}

/// Trains the adapters, heads and segmenter decoder of `model` in place.
pub fn train_model(
    config: &RunConfig,
    mut model: PpcrModel,
    samples: &[ReferringSample],
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(HarnessError::Config("empty training set".into()));
    }
    if config.variant == Variant::GtBoxOracle {
        return Err(HarnessError::Config(
            "gt_box_oracle is evaluation-only; train ppcr instead".into(),
        ));
    }
    if model.variant != config.variant {
        return Err(HarnessError::VariantMismatch {
            checkpoint: model.variant,
            requested: config.variant,
        });
    }
    let start = Instant::now();
    let frozen: Vec<(crate::diffcore::ParamId, Tensor)> = model
        .frozen_params()
        .into_iter()
        .map(|id| (id, model.store.tensor(id).clone()))
        .collect();

    let total_steps = config.total_steps(samples.len());
    let warmup = (config.schedule.warmup_fraction * total_steps as f64).round() as u64;
    let schedule = LrSchedule::new(warmup, total_steps, config.schedule.peak_lr, config.schedule.floor_lr)?;
    let mut opt = AdamW::new(config.optimizer);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, SHUFFLE_STREAM]));
        order.shuffle(&mut rng);
        let mut sum_total = 0.0f64;
        let mut sum_parts = [0.0f64; 4];
        let mut last_lr = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = ParamGrads::new();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let sample = &samples[i];
                let seeds = template_seeds(config.seed, epoch as u64, sample.id);
                let mut g = Graph::new();
                let step = sample_loss(&model, &mut g, config, sample, seeds).and_then(|(loss, parts)| {
                    let value = g.value(loss).data()[0];
                    if !value.is_finite() {
                        return Err(HarnessError::NonFiniteLoss {
                            epoch,
                            batch: batch_idx,
                        });
                    }
                    let scaled = g.scale(loss, scale)?;
                    let sample_grads = g.backward(scaled)?;
                    Ok((value, parts, sample_grads))
                });
                let (value, parts, sample_grads) = match step {
                    Ok(v) => v,
                    Err(e) if e.is_non_finite() => {
                        return Err(HarnessError::NonFiniteLoss {
                            epoch,
                            batch: batch_idx,
                        })
                    }
                    Err(e) => return Err(e),
                };
                grads.merge(sample_grads.params());
                sum_total += value as f64;
                for (acc, v) in sum_parts.iter_mut().zip([parts.bce, parts.dice, parts.l1, parts.ce]) {
                    *acc += v as f64;
                }
            }
            last_lr = schedule.lr_at_step(opt.step_count() + 1)?;
            opt.set_lr(last_lr);
            opt.step(&mut model.store, &grads).map_err(|e| match e {
                crate::diffcore::DiffError::NonFinite(_) => HarnessError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                },
                e => e.into(),
            })?;
        }
        let n = samples.len() as f64;
        epochs.push(EpochLog {
            epoch: epoch + 1,
            mean_total: sum_total / n,
            mean_components: LossComponents {
                bce: (sum_parts[0] / n) as f32,
                dice: (sum_parts[1] / n) as f32,
                l1: (sum_parts[2] / n) as f32,
                ce: (sum_parts[3] / n) as f32,
            },
            last_lr,
        });
    }

    for (id, before) in &frozen {
        if model.store.tensor(*id) != before {
            return Err(HarnessError::Integrity(format!(
                "frozen tensor {} changed during training",
                model.store.get(*id).name
            )));
        }
    }
    let log = TrainLog {
        variant: config.variant,
        seed: config.seed,
        config_hash: config.hash(),
        dataset_hash: dataset_hash(samples),
        steps: opt.step_count(),
        epochs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, log })
}

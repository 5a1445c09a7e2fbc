use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::cyclic_lr;
use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::{GroundingModel, ModelConfig, NoHook, VqConfig};
use crate::numerics::{reverse_accumulate, Graph, NodeId};
use crate::seed::sub_seed;
use crate::vq::{activations_by_code, warm_start_insert, TrainingVq, VqHook};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Epochs per phase.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub vq_enabled: bool,
    pub vq_loss_weight: f64,
    /// Epochs per learning-rate cycle.
    pub cycle_epochs: usize,
    /// Training captions fed through the model to sample initial codes.
    pub warmup_captions: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.2,
            lr_min: 1e-6,
            lr_max: 2e-4,
            epochs: 16,
            batch_size: 32,
            seed: 0,
            vq_enabled: false,
            vq_loss_weight: 1.0,
            cycle_epochs: 4,
            warmup_captions: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.cycle_epochs == 0 {
            return Err(Error::Config("cycle_epochs must be positive".into()));
        }
        if !(self.vq_loss_weight >= 0.0) {
            return Err(Error::Config("vq_loss_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Captions paired with images; several captions may share an image.
#[derive(Debug, Clone, Default)]
pub struct PairedData {
    pub image_ids: Vec<String>,
    pub images: Vec<Vec<f64>>,
    pub captions: Vec<FeatureSequence>,
    /// Index into `images` for each caption.
    pub caption_image: Vec<usize>,
}

impl PairedData {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Checks index ranges and feature widths against a model config.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.captions.len() != self.caption_image.len() || self.image_ids.len() != self.images.len() {
            return Err(Error::invalid("paired data has inconsistent lengths"));
        }
        if let Some(&i) = self.caption_image.iter().find(|&&i| i >= self.images.len()) {
            return Err(Error::invalid(format!("caption refers to missing image {i}")));
        }
        if let Some((id, img)) = self.image_ids.iter().zip(&self.images).find(|(_, v)| v.len() != cfg.image_feat_dim) {
            return Err(Error::invalid(format!(
                "image {id} has {} features, model expects {}",
                img.len(),
                cfg.image_feat_dim
            )));
        }
        if let Some(c) = self.captions.iter().find(|c| c.dim() != cfg.feature_dim) {
            return Err(Error::invalid(format!(
                "caption {} has {}-dim frames, model expects {}",
                c.utterance_id,
                c.dim(),
                cfg.feature_dim
            )));
        }
        Ok(())
    }
}

/// Splits `order` into batches of at most `batch_size` captions with no
/// image repeated inside a batch. A caption whose image is already present
/// waits for a later batch. A leftover single caption (the loss needs a
/// mismatch) joins the last earlier batch that lacks its image, or is
/// dropped when every batch already holds that image.
pub fn make_batches(caption_image: &[usize], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut pending: Vec<usize> = order.to_vec();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = BTreeSet::new();
        let mut rest = Vec::with_capacity(pending.len());
        for &c in &pending {
            if batch.len() < batch_size && seen.insert(caption_image[c]) {
                batch.push(c);
            } else {
                rest.push(c);
            }
        }
        pending = rest;
        if batch.len() >= 2 {
            batches.push(batch);
        } else if let Some(&c) = batch.first() {
            let home = batches
                .iter_mut()
                .rev()
                .find(|b: &&mut Vec<usize>| b.iter().all(|&o| caption_image[o] != caption_image[c]));
            if let Some(b) = home {
                b.push(c);
            }
        }
    }
    batches
}

#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: NodeId,
    pub hinge: NodeId,
    pub vq: Option<NodeId>,
}

/// Builds the training objective for one batch: hinge loss on the
/// caption-image cosine matrix plus `vq_weight` times the VQ loss, where
/// the VQ loss of each layer is the mean over all of that layer's frames
/// in the batch. `hooks[i]` is used for caption `i`.
pub fn batch_objective<H: VqHook>(
    model: &GroundingModel,
    g: &mut Graph,
    captions: &[&FeatureSequence],
    images: &[&[f64]],
    margin: f64,
    vq_weight: f64,
    hooks: &mut [H],
) -> Result<BatchLoss> {
    if captions.len() != images.len() || hooks.len() != captions.len() {
        return Err(Error::shape("batch_objective", &[captions.len()], &[images.len(), hooks.len()]));
    }
    let img = model.image_forward(g, images)?;
    let mut embs = Vec::with_capacity(captions.len());
    for (fs, hook) in captions.iter().zip(hooks.iter_mut()) {
        embs.push(model.caption_forward(g, fs, hook)?.embedding);
    }
    let cap = g.stack_rows(&embs)?;
    let sim = g.matmul_nt(cap, img)?;
    let hinge = g.hinge_rank(sim, margin)?;

    let terms: Vec<(usize, NodeId, usize)> = hooks.iter().flat_map(|h| h.loss_terms()).collect();
    if terms.is_empty() {
        return Ok(BatchLoss {
            total: hinge,
            hinge,
            vq: None,
        });
    }
    let layers: BTreeSet<usize> = terms.iter().map(|t| t.0).collect();
    let mut vq: Option<NodeId> = None;
    for layer in layers {
        let frames: usize = terms.iter().filter(|t| t.0 == layer).map(|t| t.2).sum();
        for &(_, node, n) in terms.iter().filter(|t| t.0 == layer) {
            let part = g.scale(node, n as f64 / frames as f64);
            vq = Some(match vq {
                None => part,
                Some(acc) => g.add(acc, part)?,
            });
        }
    }
    let vq = vq.expect("nonempty terms");
    let weighted = g.scale(vq, vq_weight);
    let total = g.add(hinge, weighted)?;
    Ok(BatchLoss {
        total,
        hinge,
        vq: Some(vq),
    })
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1 for the plain model, 2 for the warm-started VQ model.
    pub phase: usize,
    pub epoch: usize,
    pub batches: usize,
    pub mean_loss: f64,
    pub mean_hinge: f64,
    pub mean_vq: f64,
    pub final_lr: f64,
    /// Codebook perplexities over the epoch, one per VQ layer.
    pub perplexity: Vec<f64>,
}

pub struct TrainOutcome {
    pub plain: GroundingModel,
    pub vq: Option<GroundingModel>,
    pub trace: Vec<EpochRecord>,
}

/// Trains `model` in place for `cfg.epochs` epochs with fresh Adam moments.
/// When the model has codebooks, the forward pass quantises and the
/// codebooks follow the EMA rule once per batch.
pub fn train_phase(model: &mut GroundingModel, data: &PairedData, cfg: &TrainConfig, phase: usize) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    data.check(&model.config)?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("shuffle-phase{phase}")));
    let mut adam = Adam::default();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut cycle_len = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let batches = make_batches(&data.caption_image, &order, cfg.batch_size);
        if batches.is_empty() {
            return Err(Error::invalid("no batch with two distinct images"));
        }
        if cycle_len == 0 {
            cycle_len = (cfg.cycle_epochs * batches.len()).max(2);
        }
        model.codebooks.iter_mut().for_each(|cb| cb.reset_usage());
        let (mut sum_loss, mut sum_hinge, mut sum_vq) = (0.0, 0.0, 0.0);
        let mut lr = cfg.lr_min;

        for (bi, batch) in batches.iter().enumerate() {
            let caps: Vec<&FeatureSequence> = batch.iter().map(|&c| &data.captions[c]).collect();
            let imgs: Vec<&[f64]> = batch.iter().map(|&c| data.images[data.caption_image[c]].as_slice()).collect();
            let mut g = Graph::new();
            let (loss, records) = if model.has_vq() {
                let mut hooks: Vec<TrainingVq> = caps.iter().map(|_| TrainingVq::new(&model.codebooks)).collect();
                let l = batch_objective(model, &mut g, &caps, &imgs, cfg.margin, cfg.vq_loss_weight, &mut hooks)?;
                (l, hooks.into_iter().map(|h| h.records).collect::<Vec<_>>())
            } else {
                let mut hooks = vec![NoHook; caps.len()];
                let l = batch_objective(model, &mut g, &caps, &imgs, cfg.margin, cfg.vq_loss_weight, &mut hooks)?;
                (l, Vec::new())
            };
            let value = g.value(loss.total).item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi + 1,
                    loss: value,
                });
            }
            sum_loss += value;
            sum_hinge += g.value(loss.hinge).item()?;
            if let Some(v) = loss.vq {
                sum_vq += g.value(v).item()?;
            }

            let grads = reverse_accumulate(&g, loss.total, &mut model.params)?;
            lr = cyclic_lr(step, cycle_len, cfg.lr_min, cfg.lr_max)?;
            adam.step(&mut model.params, &grads, lr)?;
            model.params.iter_mut().for_each(|(_, t)| t.clear_grad());
            step += 1;

            for (l, cb) in model.codebooks.iter_mut().enumerate() {
                let layer_recs: Vec<_> = records.iter().filter_map(|r| r.get(l)).collect();
                for rec in &layer_recs {
                    rec.assignments.iter().for_each(|&k| cb.record_usage(k));
                }
                cb.ema_update(&activations_by_code(&layer_recs))?;
            }
        }

        let n = batches.len() as f64;
        let perplexity = model
            .codebooks
            .iter()
            .map(|cb| cb.usage_stats().map(|s| s.perplexity).unwrap_or(f64::NAN))
            .collect();
        let rec = EpochRecord {
            phase,
            epoch: epoch + 1,
            batches: batches.len(),
            mean_loss: sum_loss / n,
            mean_hinge: sum_hinge / n,
            mean_vq: sum_vq / n,
            final_lr: lr,
            perplexity,
        };
        log::info!(
            "phase {} epoch {} loss {:.5} hinge {:.5} vq {:.5}",
            rec.phase,
            rec.epoch,
            rec.mean_loss,
            rec.mean_hinge,
            rec.mean_vq
        );
        trace.push(rec);
    }
    Ok(trace)
}

/// Captions used for the warm-start pass: a seeded sample of the training set.
pub fn warmup_captions(data: &PairedData, cfg: &TrainConfig) -> Vec<FeatureSequence> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "warmup")));
    order
        .into_iter()
        .take(cfg.warmup_captions.max(1))
        .map(|i| data.captions[i].clone())
        .collect()
}

/// Phase 2: insert VQ layers into a trained plain model and train again.
pub fn train_vq_phase(
    plain: &GroundingModel,
    data: &PairedData,
    vq: &VqConfig,
    cfg: &TrainConfig,
) -> Result<(GroundingModel, Vec<EpochRecord>)> {
    let warm = warmup_captions(data, cfg);
    let mut model = warm_start_insert(plain, vq, &warm, sub_seed(cfg.seed, "codebooks"))?;
    let trace = train_phase(&mut model, data, cfg, 2)?;
    Ok((model, trace))
}

/// Full protocol: plain training, then the VQ phase when enabled.
pub fn train(data: &PairedData, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut plain_cfg = model_cfg.clone();
    plain_cfg.vq.enabled = false;
    data.check(&plain_cfg)?;
    let mut plain = GroundingModel::init(plain_cfg)?;
    let mut trace = train_phase(&mut plain, data, cfg, 1)?;
    let vq = if cfg.vq_enabled {
        let (m, t) = train_vq_phase(&plain, data, &model_cfg.vq, cfg)?;
        trace.extend(t);
        Some(m)
    } else {
        None
    };
    Ok(TrainOutcome { plain, vq, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(n_images: usize, captions_per_image: usize, seed: u64) -> PairedData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = PairedData::default();
        for i in 0..n_images {
            d.image_ids.push(format!("img{i}"));
            d.images.push((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
            for c in 0..captions_per_image {
                let t = 8 + 2 * c;
                let data = (0..t * 39).map(|_| rng.random_range(-1.0..1.0)).collect();
                d.captions.push(FeatureSequence::new(format!("c{i}_{c}"), t, 39, data).unwrap());
                d.caption_image.push(i);
            }
        }
        d
    }

    fn fast() -> TrainConfig {
        TrainConfig {
            lr_min: 1e-3,
            lr_max: 1e-2,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_never_repeat_an_image() {
        let caption_image = [0, 0, 1, 1, 2, 2, 3, 3];
        let order: Vec<usize> = (0..8).collect();
        let batches = make_batches(&caption_image, &order, 3);
        for b in &batches {
            let imgs: BTreeSet<usize> = b.iter().map(|&c| caption_image[c]).collect();
            assert_eq!(imgs.len(), b.len());
        }
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 8);
    }

    #[test]
    fn separable_pair_converges() {
        let data = toy(2, 1, 3);
        let mut model = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let cfg = TrainConfig { epochs: 200, ..fast() };
        let trace = train_phase(&mut model, &data, &cfg, 1).unwrap();
        assert_eq!(trace.len(), 200);
        assert!(trace.last().unwrap().mean_loss < 0.01, "{:?}", trace.last());
    }

    #[test]
    fn same_seed_same_trace() {
        let data = toy(4, 2, 5);
        let cfg = TrainConfig { epochs: 3, vq_enabled: true, warmup_captions: 8, ..fast() };
        let mut mc = ModelConfig::tiny();
        mc.vq.codebook_sizes = vec![4, 4];
        let a = train(&data, &mc, &cfg).unwrap();
        let b = train(&data, &mc, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.vq.unwrap(), b.vq.unwrap());
        assert_eq!(a.trace.len(), 6);
        assert!(a.trace[3..].iter().all(|r| r.perplexity.len() == 2 && r.mean_vq > 0.0));
    }

    #[test]
    fn zero_epochs_keep_initialisation() {
        let data = toy(3, 1, 1);
        let cfg = TrainConfig { epochs: 0, ..fast() };
        let out = train(&data, &ModelConfig::tiny(), &cfg).unwrap();
        assert_eq!(out.plain, GroundingModel::init(ModelConfig::tiny()).unwrap());
        assert!(out.trace.is_empty());
    }

    #[test]
    fn nan_input_is_reported_with_batch() {
        let mut data = toy(2, 1, 2);
        data.images[0][0] = f64::NAN;
        let mut model = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let err = train_phase(&mut model, &data, &TrainConfig { epochs: 1, ..fast() }, 1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 1, .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_fails_before_training() {
        let mut data = toy(2, 1, 2);
        data.images[1].push(0.0);
        assert!(train(&data, &ModelConfig::tiny(), &fast()).is_err());
    }

    #[test]
    fn invalid_schedule_rejected() {
        let cfg = TrainConfig { lr_min: 1e-3, lr_max: 1e-4, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{backward, forward_with_cache, LabeledImage, ModelParams, ToyViTConfig};
use crate::error::{Error, Result};
use crate::losses::{
    id_loss_with_grad, overall_loss, triplet_loss_with_grad, EmbeddingBatch, LogitBatch, Objective,
};
use crate::patch_mixup::{augment_batch, Image, MixupConfig};
use crate::rng;

fn default_steps() -> usize {
    300
}
fn default_lr() -> f64 {
    0.2
}
fn default_momentum() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_clip() -> Option<f64> {
    Some(5.0)
}
fn default_warmup() -> usize {
    50
}
fn default_p() -> usize {
    4
}
fn default_k() -> usize {
    4
}

/// SGD and P x K sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Rescale the gradient to at most this global L2 norm; `None` disables.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Linear learning-rate ramp from `lr / warmup_steps` up to `lr`.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// P: identities per batch.
    #[serde(default = "default_p")]
    pub ids_per_batch: usize,
    /// K: instances per identity.
    #[serde(default = "default_k")]
    pub instances_per_id: usize,
    /// Apply patch mixup to each training batch.
    #[serde(default)]
    pub use_mixup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            grad_clip: default_clip(),
            warmup_steps: default_warmup(),
            ids_per_batch: default_p(),
            instances_per_id: default_k(),
            use_mixup: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch < 2 || self.instances_per_id < 2 {
            return Err(Error::DegenerateBatch(format!(
                "P x K = {} x {} needs P >= 2 and K >= 2",
                self.ids_per_batch, self.instances_per_id
            )));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a finite non-negative value")));
            }
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub id_loss: f64,
    pub triplet_loss: f64,
    pub total: f64,
}

/// Draws `p` identities and `k` instances of each from `by_id`; the result
/// is identity-major with ids and instances in ascending order.
pub fn sample_pk_batch<R: rand::Rng + ?Sized>(
    by_id: &BTreeMap<u64, Vec<usize>>,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let eligible: Vec<&Vec<usize>> = by_id.values().filter(|rows| rows.len() >= k).collect();
    if eligible.len() < p {
        return Err(Error::DegenerateBatch(format!(
            "only {} identities have at least {k} instances, need {p}",
            eligible.len()
        )));
    }
    let mut ids = index::sample(rng, eligible.len(), p).into_vec();
    ids.sort_unstable();
    let mut out = Vec::with_capacity(p * k);
    for i in ids {
        let rows = eligible[i];
        let mut picks = index::sample(rng, rows.len(), k).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|j| rows[j]));
    }
    Ok(out)
}

struct BatchEval {
    id_loss: f64,
    triplet_loss: f64,
    grads: ModelParams,
    selections: Vec<usize>,
}

fn class_labels(params: &ModelParams, vehicle_ids: &[u64]) -> Result<Vec<usize>> {
    vehicle_ids
        .iter()
        .map(|v| {
            params
                .class_ids
                .binary_search(v)
                .map_err(|_| Error::Shape(format!("vehicle id {v} has no classifier column")))
        })
        .collect()
}

/// Overall loss of one batch and its gradient with respect to every parameter.
fn evaluate_batch(params: &ModelParams, images: &[Image], vehicle_ids: &[u64]) -> Result<BatchEval> {
    let labels = class_labels(params, vehicle_ids)?;
    let passes: Vec<_> = images
        .par_iter()
        .map(|img| forward_with_cache(params, img))
        .collect::<Result<_>>()?;
    let d = params.config.embed_dim;
    let mut features = Array2::zeros((images.len(), d));
    for (mut row, (f, _)) in features.rows_mut().into_iter().zip(&passes) {
        row.assign(&ndarray::ArrayView1::from(f.as_slice()));
    }

    let logits = features.dot(&params.classifier);
    let (id_loss, dlogits) = id_loss_with_grad(&LogitBatch::new(logits, labels.clone())?);
    let tri = triplet_loss_with_grad(&EmbeddingBatch::new(features.clone(), labels)?)?;
    let dfeatures = dlogits.dot(&params.classifier.t()) + &tri.grad;

    let per_image: Vec<ModelParams> = passes
        .par_iter()
        .zip(dfeatures.rows().into_iter().collect::<Vec<_>>())
        .map(|((_, cache), df)| {
            let mut g = params.zeros_like();
            backward(params, cache, &df.to_vec(), &mut g);
            g
        })
        .collect();
    let mut grads = params.zeros_like();
    for g in &per_image {
        grads.add_scaled(g, 1.0);
    }
    grads.classifier = features.t().dot(&dlogits);

    Ok(BatchEval {
        id_loss,
        triplet_loss: tri.loss,
        grads,
        selections: tri
            .selections
            .iter()
            .flat_map(|s| [s.positive, s.negative])
            .collect(),
    })
}

/// Overall loss of a fixed batch as a function of the flattened parameters.
pub struct BatchObjective {
    pub base: ModelParams,
    pub images: Vec<Image>,
    pub vehicle_ids: Vec<u64>,
}

impl BatchObjective {
    fn eval(&self, flat: &[f64]) -> BatchEval {
        let mut p = self.base.clone();
        p.set_flat(flat).expect("flat parameter length");
        evaluate_batch(&p, &self.images, &self.vehicle_ids).expect("valid batch")
    }
}

impl Objective for BatchObjective {
    fn value(&self, params: &[f64]) -> f64 {
        let e = self.eval(params);
        overall_loss(e.id_loss, e.triplet_loss)
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        self.eval(params).grads.to_flat()
    }

    fn selection(&self, params: &[f64]) -> Vec<usize> {
        self.eval(params).selections
    }
}

/// SGD with momentum and L2 weight decay: `v = mu * v + (c * g + wd * p)`,
/// `p -= lr_t * v`. `c` scales `g` down to the clip norm when it is exceeded
/// and `lr_t` ramps up linearly over the warmup steps.
pub struct Trainer<'a> {
    pub params: ModelParams,
    velocity: ModelParams,
    config: TrainConfig,
    mixup: Option<MixupConfig>,
    dataset: &'a [LabeledImage],
    by_id: BTreeMap<u64, Vec<usize>>,
    seed: u64,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: ModelParams,
        dataset: &'a [LabeledImage],
        config: TrainConfig,
        mixup: Option<MixupConfig>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(m) = &mixup {
            m.validate()?;
        }
        let mut by_id: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, item) in dataset.iter().enumerate() {
            by_id.entry(item.vehicle_id).or_default().push(i);
        }
        let feasible = by_id.values().filter(|r| r.len() >= 2).count();
        if feasible < 2 {
            return Err(Error::DegenerateBatch(
                "training needs at least 2 identities with at least 2 instances".into(),
            ));
        }
        let velocity = params.zeros_like();
        Ok(Self {
            params,
            velocity,
            config,
            mixup,
            dataset,
            by_id,
            seed,
            step: 0,
        })
    }

    /// P and K actually used: the configured values capped by the data.
    pub fn batch_shape(&self) -> (usize, usize) {
        let most = self.by_id.values().map(Vec::len).max().unwrap_or(0);
        let k = self.config.instances_per_id.min(most);
        let p_avail = self.by_id.values().filter(|r| r.len() >= k).count();
        (self.config.ids_per_batch.min(p_avail), k)
    }

    pub fn next_batch(&self) -> Result<(Vec<Image>, Vec<u64>)> {
        let (p, k) = self.batch_shape();
        let mut r = rng::stream(rng::derive_seed(self.seed, "pk-sampling"), self.step as u64);
        let rows = sample_pk_batch(&self.by_id, p, k, &mut r)?;
        let mut images: Vec<Image> = rows.iter().map(|&i| self.dataset[i].image.clone()).collect();
        let ids = rows.iter().map(|&i| self.dataset[i].vehicle_id).collect();
        if let Some(m) = &self.mixup {
            let seed = rng::derive_seed(self.seed ^ self.step as u64, "mixup");
            images = augment_batch(&images, m, seed)?.images;
        }
        Ok((images, ids))
    }

    pub fn step(&mut self) -> Result<StepLoss> {
        let (images, ids) = self.next_batch()?;
        let eval = evaluate_batch(&self.params, &images, &ids)?;
        let lr = self.config.lr_at(self.step);
        let TrainConfig {
            momentum,
            weight_decay,
            grad_clip,
            ..
        } = self.config;
        let norm = eval
            .grads
            .tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = match grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((p, g), v) in self
            .params
            .tensors_mut()
            .into_iter()
            .zip(eval.grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                *v = momentum * *v + scale * g + weight_decay * *p;
                *p -= lr * *v;
            });
        }
        if !self.params.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "parameters diverged at step {}; lower the learning rate",
                self.step
            )));
        }
        let out = StepLoss {
            step: self.step,
            id_loss: eval.id_loss,
            triplet_loss: eval.triplet_loss,
            total: overall_loss(eval.id_loss, eval.triplet_loss),
        };
        self.step += 1;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<StepLoss>,
}

impl TrainOutcome {
    /// Mean total loss over the first and last `window` steps.
    pub fn head_tail_means(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.trace.len()).max(1);
        let mean = |s: &[StepLoss]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
        (mean(&self.trace[..w]), mean(&self.trace[self.trace.len() - w..]))
    }
}

/// Initializes a model for the dataset's geometry and runs `train.steps` steps.
pub fn train(
    config: &ToyViTConfig,
    train: &TrainConfig,
    dataset: &[LabeledImage],
    mixup: Option<&MixupConfig>,
    seed: u64,
) -> Result<TrainOutcome> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::DegenerateBatch("empty training set".into()))?;
    let shape = first.image.shape;
    let channels = first.image.channels;
    if let Some(bad) = dataset
        .iter()
        .find(|l| l.image.shape != shape || l.image.channels != channels)
    {
        return Err(Error::Shape(format!(
            "training images must share one size; found {}x{} and {}x{}",
            shape.height, shape.width, bad.image.shape.height, bad.image.shape.width
        )));
    }
    let mut class_ids: Vec<u64> = dataset.iter().map(|l| l.vehicle_id).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    let params = ModelParams::init(config, shape, channels, class_ids)?;
    let mixup = if train.use_mixup { mixup.copied() } else { None };
    let mut trainer = Trainer::new(params, dataset, *train, mixup, seed)?;
    let trace = (0..train.steps)
        .map(|_| trainer.step())
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainOutcome {
        params: trainer.params,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::finite_difference_check_coords;
    use crate::patch_geometry::{ImageShape, PatchSpec};
    use crate::toy_vit::synthesize_dataset;

    fn tiny() -> ToyViTConfig {
        ToyViTConfig {
            patch: PatchSpec::square(8, 8),
            embed_dim: 16,
            layers: 1,
            heads: 2,
            mlp_ratio: 2.0,
            classifier_init_std: 0.5,
            seed: 1,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let data = synthesize_dataset(2, 2, ImageShape::new(16, 16).unwrap(), 0);
        let cfg = TrainConfig {
            steps: 5,
            lr: 0.0,
            ids_per_batch: 2,
            instances_per_id: 2,
            ..Default::default()
        };
        let out = train(&tiny(), &cfg, &data, None, 0).unwrap();
        let first = out.trace[0].total;
        assert!(out.trace.iter().all(|s| s.total == first));
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = TrainConfig {
            lr: 0.4,
            warmup_steps: 4,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs, [0.1, 0.2, 0.30000000000000004, 0.4, 0.4, 0.4]);
        let none = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(none.lr_at(0), 0.4);
    }

    #[test]
    fn small_learning_rate_still_decreases_loss() {
        let shape = ImageShape::new(32, 32).unwrap();
        let data = synthesize_dataset(8, 4, shape, 3);
        let cfg = TrainConfig {
            steps: 200,
            lr: 0.01,
            ..Default::default()
        };
        let out = train(&tiny(), &cfg, &data, None, 3).unwrap();
        let (head, tail) = out.head_tail_means(20);
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn degenerate_datasets_rejected() {
        let data = synthesize_dataset(1, 4, ImageShape::new(16, 16).unwrap(), 0);
        let err = train(&tiny(), &TrainConfig::default(), &data, None, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
        let data = synthesize_dataset(4, 1, ImageShape::new(16, 16).unwrap(), 0);
        assert!(train(&tiny(), &TrainConfig::default(), &data, None, 0).is_err());
    }

    #[test]
    fn pk_sampling_shape() {
        let mut by_id = BTreeMap::new();
        for id in 0..5u64 {
            by_id.insert(id, (0..4).map(|i| id as usize * 4 + i).collect::<Vec<_>>());
        }
        let rows = sample_pk_batch(&by_id, 3, 2, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0] / 4, rows[1] / 4);
        assert!(sample_pk_batch(&by_id, 6, 2, &mut rng::stream(1, 0)).is_err());
    }

    #[test]
    fn step_zero_gradient_matches_finite_differences() {
        let data = synthesize_dataset(3, 3, ImageShape::new(16, 16).unwrap(), 5);
        let mut class_ids: Vec<u64> = (0..3).collect();
        class_ids.sort_unstable();
        let params = ModelParams::init(&tiny(), ImageShape::new(16, 16).unwrap(), 3, class_ids).unwrap();
        let trainer = Trainer::new(
            params.clone(),
            &data,
            TrainConfig {
                ids_per_batch: 3,
                instances_per_id: 2,
                ..Default::default()
            },
            None,
            0,
        )
        .unwrap();
        let (images, ids) = trainer.next_batch().unwrap();
        let obj = BatchObjective {
            base: params.clone(),
            images,
            vehicle_ids: ids,
        };
        let flat = params.to_flat();
        let stride = flat.len() / 10;
        let coords: Vec<usize> = (0..10).map(|i| i * stride + 3).collect();
        let r = finite_difference_check_coords(&obj, &flat, &coords, 1e-5, 1e-3);
        assert!(r.passed, "{r:?}");
    }
}

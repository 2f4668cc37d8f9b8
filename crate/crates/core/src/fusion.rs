//! Inference-time fusion of features from models trained at different aspect
//! ratios.
//!
//! Each model's feature is weighted by how close its training AR is to the
//! query image's AR and the weighted vectors are summed. The sum is not
//! normalized by the total weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A feature vector produced by a model trained at `model_ar`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedFeature {
    pub vector: Vec<f64>,
    pub model_ar: f64,
}

/// Step-function weight over `|model_ar - image_ar|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPolicy {
    /// `(upper_bound, weight)` pairs with strictly increasing, inclusive bounds.
    pub thresholds: Vec<(f64, f64)>,
    /// Weight when the AR gap exceeds every bound.
    pub default_weight: f64,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        Self {
            thresholds: vec![(0.3, 1.3), (0.6, 1.0)],
            default_weight: 0.9,
        }
    }
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<()> {
        for w in self.thresholds.windows(2) {
            if !(w[0].0 < w[1].0) {
                return Err(Error::InvalidConfig(
                    "fusion thresholds must be strictly increasing".into(),
                ));
            }
        }
        for &(bound, weight) in &self.thresholds {
            if !(bound >= 0.0 && bound.is_finite()) {
                return Err(Error::InvalidConfig(format!("invalid fusion bound {bound}")));
            }
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(Error::InvalidConfig(format!("fusion weight {weight} must be positive")));
            }
        }
        if !(self.default_weight > 0.0 && self.default_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "default weight {} must be positive",
                self.default_weight
            )));
        }
        Ok(())
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            thresholds: self.thresholds.iter().map(|&(b, w)| (b, w * factor)).collect(),
            default_weight: self.default_weight * factor,
        }
    }
}

/// Slack on the inclusive bounds so decimal ARs such as `1.3 - 1.0` land on
/// the boundary they denote.
pub const BOUND_SLACK: f64 = 1e-12;

pub fn adaptive_weight(model_ar: f64, image_ar: f64, policy: &FusionPolicy) -> f64 {
    let gap = (model_ar - image_ar).abs();
    policy
        .thresholds
        .iter()
        .find(|&&(bound, _)| gap <= bound + BOUND_SLACK)
        .map_or(policy.default_weight, |&(_, w)| w)
}

pub fn fuse_features(
    features: &[TaggedFeature],
    image_ar: f64,
    policy: &FusionPolicy,
) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::EmptyInput("no features to fuse".into()))?;
    let dim = first.vector.len();
    let mut out = vec![0.0; dim];
    for (m, f) in features.iter().enumerate() {
        if f.vector.len() != dim {
            return Err(Error::Shape(format!(
                "model {m} feature has dimension {}, expected {dim}",
                f.vector.len()
            )));
        }
        let w = adaptive_weight(f.model_ar, image_ar, policy);
        for (o, v) in out.iter_mut().zip(&f.vector) {
            *o += w * v;
        }
    }
    Ok(out)
}

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

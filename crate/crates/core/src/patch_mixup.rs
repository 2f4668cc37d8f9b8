//! Intra-image patch mixup.
//!
//! A fraction of an image's patches is selected and shuffled among itself.
//! Each selected patch `c` paired with `c'` is replaced by
//! `(1 - a) * patch(c) + a * patch(c')` where `a = 1 / (1 + scale * d(c, c'))`
//! and `d` is the Euclidean distance between grid positions. Near partners
//! blend strongly, far partners barely; a patch paired with itself (`a = 1`)
//! is unchanged. Blends always read from the untouched input.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch_geometry::{compute_patch_grid, ImageShape, PatchGrid, PatchSpec};
use crate::rng;

/// Row-major, channel-last image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: ImageShape,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(shape: ImageShape, channels: usize, data: Vec<f64>) -> Result<Self> {
        ImageShape::new(shape.height, shape.width)?;
        if channels == 0 {
            return Err(Error::Shape("image needs at least one channel".into()));
        }
        let expected = shape.height * shape.width * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{}x{}x{channels} image needs {expected} values, got {}",
                shape.height,
                shape.width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            shape,
            channels,
            data,
        })
    }

    pub fn filled(shape: ImageShape, channels: usize, value: f64) -> Self {
        Self {
            shape,
            channels,
            data: vec![value; shape.height * shape.width * channels],
        }
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x, c)]
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.shape.aspect_ratio()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceUnit {
    /// (row, col) grid indices.
    Grid,
    /// Pixel origins of the patches.
    Pixel,
}

fn patch_distance(grid: &PatchGrid, a: usize, b: usize, unit: DistanceUnit) -> f64 {
    let pa = grid.positions[a];
    let pb = grid.positions[b];
    let (dy, dx) = match unit {
        DistanceUnit::Grid => (
            pa.row as f64 - pb.row as f64,
            pa.col as f64 - pb.col as f64,
        ),
        DistanceUnit::Pixel => (pa.y as f64 - pb.y as f64, pa.x as f64 - pb.x as f64),
    };
    (dy * dy + dx * dx).sqrt()
}

/// Symmetric `n x n` Euclidean distance matrix between patch positions.
pub fn pairwise_patch_distances(grid: &PatchGrid, unit: DistanceUnit) -> Array2<f64> {
    let n = grid.len();
    Array2::from_shape_fn((n, n), |(i, j)| patch_distance(grid, i, j, unit))
}

/// Mixing weight for two patches at distance `distance`.
#[inline]
pub fn attention_weight(distance: f64, distance_scale: f64) -> f64 {
    1.0 / (1.0 + distance_scale * distance)
}

pub fn attention_scores(distances: &Array2<f64>, distance_scale: f64) -> Array2<f64> {
    distances.mapv(|d| attention_weight(d, distance_scale))
}

/// `ceil(fraction * total)`, guarded against representation error so that
/// e.g. `0.75 * 4` is exactly 3.
pub fn fraction_count(fraction: f64, total: usize) -> usize {
    let raw = fraction * total as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (n as usize).min(total)
}

fn default_ar_range() -> (f64, f64) {
    (0.5, 2.0)
}
fn default_image_fraction() -> f64 {
    0.75
}
fn default_patch_fraction() -> f64 {
    0.25
}
fn default_distance_scale() -> f64 {
    16.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    /// Inclusive `[low, high]` AR window for eligible images.
    #[serde(default = "default_ar_range")]
    pub ar_range: (f64, f64),
    /// Share of eligible images that get mixed.
    #[serde(default = "default_image_fraction")]
    pub image_fraction: f64,
    /// Share of patches shuffled within a mixed image.
    #[serde(default = "default_patch_fraction")]
    pub patch_fraction: f64,
    /// Multiplier applied to grid distances before weighting.
    #[serde(default = "default_distance_scale")]
    pub distance_scale: f64,
    /// Grid used for mixing; must not overlap.
    #[serde(default)]
    pub patch: PatchSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            ar_range: default_ar_range(),
            image_fraction: default_image_fraction(),
            patch_fraction: default_patch_fraction(),
            distance_scale: default_distance_scale(),
            patch: PatchSpec::default(),
            seed: 0,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ar_range;
        if !(lo <= hi) {
            return Err(Error::InvalidConfig(format!("ar_range low {lo} > high {hi}")));
        }
        for (name, f) in [
            ("image_fraction", self.image_fraction),
            ("patch_fraction", self.patch_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!("{name} {f} outside [0, 1]")));
            }
        }
        if !(self.distance_scale > 0.0 && self.distance_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "distance_scale {} must be positive",
                self.distance_scale
            )));
        }
        self.patch.validate()
    }

    pub fn is_eligible(&self, ar: f64) -> bool {
        self.ar_range.0 <= ar && ar <= self.ar_range.1
    }
}

/// Realized shuffle for one image: `selected[k]` is blended with
/// `partners[k]` at weight `weights[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupPlan {
    pub selected: Vec<usize>,
    pub partners: Vec<usize>,
    pub weights: Vec<f64>,
}

impl MixupPlan {
    pub fn empty() -> Self {
        Self {
            selected: vec![],
            partners: vec![],
            weights: vec![],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }
}

pub fn build_mixup_plan<R: Rng + ?Sized>(
    grid: &PatchGrid,
    config: &MixupConfig,
    rng: &mut R,
) -> MixupPlan {
    let n = grid.len();
    let count = fraction_count(config.patch_fraction, n);
    if count == 0 {
        return MixupPlan::empty();
    }
    let mut selected = index::sample(rng, n, count).into_vec();
    selected.sort_unstable();
    let mut partners = selected.clone();
    partners.shuffle(rng);
    let weights = selected
        .iter()
        .zip(&partners)
        .map(|(&c, &p)| {
            attention_weight(
                patch_distance(grid, c, p, DistanceUnit::Grid),
                config.distance_scale,
            )
        })
        .collect();
    MixupPlan {
        selected,
        partners,
        weights,
    }
}

fn check_plan(grid: &PatchGrid, plan: &MixupPlan) -> Result<()> {
    let n = grid.len();
    if plan.partners.len() != plan.selected.len() || plan.weights.len() != plan.selected.len() {
        return Err(Error::Shape("mixup plan vectors differ in length".into()));
    }
    let mut seen_sel = vec![false; n];
    let mut seen_par = vec![false; n];
    for (&c, &p) in plan.selected.iter().zip(&plan.partners) {
        if c >= n || p >= n {
            return Err(Error::Shape(format!("patch index out of range for {n}-patch grid")));
        }
        if std::mem::replace(&mut seen_sel[c], true) || std::mem::replace(&mut seen_par[p], true) {
            return Err(Error::Shape("mixup plan repeats a patch index".into()));
        }
    }
    if seen_sel != seen_par {
        return Err(Error::Shape("mixup partners are not a permutation of the selection".into()));
    }
    if let Some(w) = plan.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Shape(format!("mixup weight {w} outside [0, 1]")));
    }
    Ok(())
}

/// Blends the planned patches of `image`; everything else is copied.
pub fn apply_patch_mixup(image: &Image, grid: &PatchGrid, plan: &MixupPlan) -> Result<Image> {
    if grid.shape != image.shape {
        return Err(Error::Shape(format!(
            "grid built for {}x{}, image is {}x{}",
            grid.shape.height, grid.shape.width, image.shape.height, image.shape.width
        )));
    }
    let spec = grid.spec;
    if spec.stride_h < spec.patch_h {
        return Err(Error::OverlappingGrid {
            dimension: "height",
            stride: spec.stride_h,
            patch: spec.patch_h,
        });
    }
    if spec.stride_w < spec.patch_w {
        return Err(Error::OverlappingGrid {
            dimension: "width",
            stride: spec.stride_w,
            patch: spec.patch_w,
        });
    }
    check_plan(grid, plan)?;

    let mut out = image.clone();
    let row_len = spec.patch_w * image.channels;
    for ((&c, &p), &a) in plan.selected.iter().zip(&plan.partners).zip(&plan.weights) {
        let dst = grid.positions[c];
        let src = grid.positions[p];
        for dy in 0..spec.patch_h {
            let o_dst = image.offset(dst.y + dy, dst.x, 0);
            let o_src = image.offset(src.y + dy, src.x, 0);
            let orig = &image.data[o_dst..o_dst + row_len];
            let other = &image.data[o_src..o_src + row_len];
            for ((o, &i), &j) in out.data[o_dst..o_dst + row_len].iter_mut().zip(orig).zip(other) {
                *o = ((1.0 - a) * i + a * j).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Augmented images together with the plan realized for each (None = untouched).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub images: Vec<Image>,
    pub plans: Vec<Option<MixupPlan>>,
}

/// Applies patch mixup to a seeded subset of the AR-eligible images.
///
/// Image selection draws from stream 0 of `seed`; image `i` draws its plan
/// from stream `i + 1`, so the result does not depend on thread scheduling.
pub fn augment_batch(images: &[Image], config: &MixupConfig, seed: u64) -> Result<AugmentedBatch> {
    config.validate()?;
    let eligible: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(_, img)| config.is_eligible(img.aspect_ratio()))
        .map(|(i, _)| i)
        .collect();
    let take = fraction_count(config.image_fraction, eligible.len());
    let mut chosen = vec![false; images.len()];
    if take > 0 {
        let mut sel_rng = rng::stream(seed, 0);
        for k in index::sample(&mut sel_rng, eligible.len(), take) {
            chosen[eligible[k]] = true;
        }
    }

    let results: Vec<Result<(Image, Option<MixupPlan>)>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            if !chosen[i] {
                return Ok((img.clone(), None));
            }
            let grid = compute_patch_grid(img.shape, config.patch)?;
            let mut img_rng = rng::stream(seed, i as u64 + 1);
            let plan = build_mixup_plan(&grid, config, &mut img_rng);
            let out = apply_patch_mixup(img, &grid, &plan)?;
            Ok((out, Some(plan)))
        })
        .collect();

    let mut batch = AugmentedBatch {
        images: Vec::with_capacity(images.len()),
        plans: Vec::with_capacity(images.len()),
    };
    for r in results {
        let (img, plan) = r?;
        batch.images.push(img);
        batch.plans.push(plan);
    }
    Ok(batch)
}

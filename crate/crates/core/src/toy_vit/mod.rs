//! A small pre-norm transformer encoder over strided patches.
//!
//! Patches are linearly projected, a class token is prepended, learned
//! positional embeddings are added, and the layer-normed class token of the
//! last layer is the image feature. Backpropagation is written out by hand so
//! the encoder trains with the analytic gradients of [`crate::losses`].

mod layers;
mod synth;
mod train;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch_geometry::{compute_patch_grid, ImageShape, PatchGrid, PatchSpec};
use crate::patch_mixup::Image;
use crate::rng;

pub use layers::{gelu, gelu_grad};
pub use synth::{render_instance, synthesize_dataset, IdentityStyle, LabeledImage, ShapeKind};
pub use train::{sample_pk_batch, train, BatchObjective, StepLoss, TrainConfig, TrainOutcome, Trainer};

use layers::{
    layer_norm, layer_norm_backward, linear, linear_backward, multi_head_attention,
    multi_head_attention_backward, AttentionCache, LayerNormCache,
};

fn default_mlp_ratio() -> f64 {
    2.0
}
fn default_classifier_std() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyViTConfig {
    /// Patchification used for embedding; may overlap.
    pub patch: PatchSpec,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    /// Init scale of the ID classifier. Much larger than the encoder's 0.02 so
    /// the ID gradient can compete with the batch-hard triplet term, which
    /// otherwise pulls a from-scratch encoder into the all-features-equal
    /// state where the triplet loss sits at ln 2.
    #[serde(default = "default_classifier_std")]
    pub classifier_init_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ToyViTConfig {
    fn default() -> Self {
        Self {
            patch: PatchSpec::square(16, 16),
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: default_mlp_ratio(),
            classifier_init_std: default_classifier_std(),
            seed: 0,
        }
    }
}

impl ToyViTConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        if !(self.classifier_init_std > 0.0 && self.classifier_init_std.is_finite()) {
            return Err(Error::InvalidConfig("classifier_init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl LayerParams {
    fn tensors(&self) -> [&Array2<f64>; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Weights of the encoder for one input geometry, plus the identity
/// classifier used by the ID loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ToyViTConfig,
    pub input: ImageShape,
    pub channels: usize,
    /// Vehicle id of each classifier column.
    pub class_ids: Vec<u64>,
    pub patch_proj: Array2<f64>,
    pub patch_bias: Array2<f64>,
    pub class_token: Array2<f64>,
    /// One row for the class token, then one per patch.
    pub positional: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gain: Array2<f64>,
    pub final_bias: Array2<f64>,
    pub classifier: Array2<f64>,
}

const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to two standard deviations.
fn trunc_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

impl ModelParams {
    /// Fresh parameters for images of `input` with `channels` channels and a
    /// classifier over `class_ids`.
    pub fn init(
        config: &ToyViTConfig,
        input: ImageShape,
        channels: usize,
        class_ids: Vec<u64>,
    ) -> Result<Self> {
        config.validate()?;
        let grid = compute_patch_grid(input, config.patch)?;
        if class_ids.is_empty() {
            return Err(Error::InvalidConfig("classifier needs at least one class".into()));
        }
        let d = config.embed_dim;
        let m = config.hidden_dim();
        let pp = config.patch.patch_pixels(channels);
        let mut rng = rng::stream(config.seed, 0);
        let mut tn = |r: usize, c: usize| trunc_normal(&mut rng, r, c, INIT_STD);
        let patch_proj = tn(pp, d);
        let class_token = tn(1, d);
        let positional = tn(grid.len() + 1, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Array2::ones((1, d)),
                ln1_bias: Array2::zeros((1, d)),
                wq: tn(d, d),
                bq: Array2::zeros((1, d)),
                wk: tn(d, d),
                bk: Array2::zeros((1, d)),
                wv: tn(d, d),
                bv: Array2::zeros((1, d)),
                wo: tn(d, d),
                bo: Array2::zeros((1, d)),
                ln2_gain: Array2::ones((1, d)),
                ln2_bias: Array2::zeros((1, d)),
                w1: tn(d, m),
                b1: Array2::zeros((1, m)),
                w2: tn(m, d),
                b2: Array2::zeros((1, d)),
            })
            .collect();
        let classifier = trunc_normal(&mut rng, d, class_ids.len(), config.classifier_init_std);
        Ok(Self {
            config: *config,
            input,
            channels,
            class_ids,
            patch_proj,
            patch_bias: Array2::zeros((1, d)),
            class_token,
            positional,
            layers,
            final_gain: Array2::ones((1, d)),
            final_bias: Array2::zeros((1, d)),
            classifier,
        })
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        compute_patch_grid(self.input, self.config.patch)
    }

    /// All tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.patch_proj, &self.patch_bias, &self.class_token, &self.positional];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.classifier]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.class_token,
            &mut self.positional,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.classifier]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: f64) {
        for (t, o) in self.tensors_mut().into_iter().zip(other.tensors()) {
            t.scaled_add(alpha, o);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Parameter count for `config` on `input`, without allocating the model.
pub fn param_count(config: &ToyViTConfig, input: ImageShape, channels: usize, classes: usize) -> Result<usize> {
    config.validate()?;
    let n = compute_patch_grid(input, config.patch)?.len();
    let d = config.embed_dim;
    let m = config.hidden_dim();
    let pp = config.patch.patch_pixels(channels);
    let embed = pp * d + d + d + (n + 1) * d;
    let layer = 4 * (d * d + d) + 2 * 2 * d + (d * m + m) + (m * d + d);
    Ok(embed + config.layers * layer + 2 * d + d * classes)
}

/// Flattened pixels of every patch, one row per grid position (row-major,
/// channel-last within a patch).
pub fn extract_patches(image: &Image, spec: PatchSpec) -> Result<Array2<f64>> {
    let grid = compute_patch_grid(image.shape, spec)?;
    Ok(extract_grid_patches(image, &grid))
}

fn extract_grid_patches(image: &Image, grid: &PatchGrid) -> Array2<f64> {
    let spec = grid.spec;
    let row_len = spec.patch_w * image.channels;
    let mut out = Array2::zeros((grid.len(), spec.patch_pixels(image.channels)));
    for (mut dst, pos) in out.axis_iter_mut(Axis(0)).zip(&grid.positions) {
        for dy in 0..spec.patch_h {
            let o = image.offset(pos.y + dy, pos.x, 0);
            dst.slice_mut(s![dy * row_len..(dy + 1) * row_len])
                .assign(&ndarray::ArrayView1::from(&image.data[o..o + row_len]));
        }
    }
    out
}

struct LayerCache {
    input: Array2<f64>,
    ln1: LayerNormCache,
    ln1_out: Array2<f64>,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
pub struct ForwardCache {
    patches: Array2<f64>,
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
}

fn check_image(params: &ModelParams, image: &Image) -> Result<()> {
    if image.shape != params.input || image.channels != params.channels {
        return Err(Error::Shape(format!(
            "model expects {}x{}x{}, image is {}x{}x{}",
            params.input.height,
            params.input.width,
            params.channels,
            image.shape.height,
            image.shape.width,
            image.channels
        )));
    }
    Ok(())
}

/// Class-token feature and the cache needed to backpropagate through it.
pub fn forward_with_cache(params: &ModelParams, image: &Image) -> Result<(Vec<f64>, ForwardCache)> {
    check_image(params, image)?;
    let grid = params.grid()?;
    if grid.len() + 1 != params.positional.nrows() {
        return Err(Error::Shape("positional table does not match the patch grid".into()));
    }
    let heads = params.config.heads;
    let patches = extract_grid_patches(image, &grid);
    let n = patches.nrows();
    let d = params.config.embed_dim;

    let mut x = Array2::zeros((n + 1, d));
    x.slice_mut(s![0..1, ..]).assign(&params.class_token);
    x.slice_mut(s![1.., ..])
        .assign(&linear(patches.view(), &params.patch_proj, &params.patch_bias));
    x += &params.positional;

    let mut caches = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (ln1_out, ln1) = layer_norm(x.view(), &lp.ln1_gain, &lp.ln1_bias);
        let q = linear(ln1_out.view(), &lp.wq, &lp.bq);
        let k = linear(ln1_out.view(), &lp.wk, &lp.bk);
        let v = linear(ln1_out.view(), &lp.wv, &lp.bv);
        let attn = multi_head_attention(q, k, v, heads);
        let h = &x + &linear(attn.merged.view(), &lp.wo, &lp.bo);
        let (ln2_out, ln2) = layer_norm(h.view(), &lp.ln2_gain, &lp.ln2_bias);
        let pre_act = linear(ln2_out.view(), &lp.w1, &lp.b1);
        let act = pre_act.mapv(gelu);
        let out = &h + &linear(act.view(), &lp.w2, &lp.b2);
        caches.push(LayerCache {
            input: std::mem::replace(&mut x, out),
            ln1,
            ln1_out,
            attn,
            ln2,
            ln2_out,
            pre_act,
            act,
        });
    }
    let (feature, final_ln) = layer_norm(x.slice(s![0..1, ..]), &params.final_gain, &params.final_bias);
    Ok((
        feature.into_iter().collect(),
        ForwardCache {
            patches,
            layers: caches,
            final_ln,
        },
    ))
}

/// Class-token feature of `image`.
pub fn forward(params: &ModelParams, image: &Image) -> Result<Vec<f64>> {
    forward_with_cache(params, image).map(|(f, _)| f)
}

/// Accumulates into `grads` the gradient of a scalar whose derivative with
/// respect to the feature is `dfeature`. The classifier is not touched.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dfeature: &[f64], grads: &mut ModelParams) {
    let d = params.config.embed_dim;
    let df = Array2::from_shape_vec((1, d), dfeature.to_vec()).expect("feature dimension");
    let dcls = layer_norm_backward(
        &cache.final_ln,
        &params.final_gain,
        &df,
        &mut grads.final_gain,
        &mut grads.final_bias,
    );
    let tokens = cache.patches.nrows() + 1;
    let mut dx = Array2::zeros((tokens, d));
    dx.slice_mut(s![0..1, ..]).assign(&dcls);

    for ((lp, lc), lg) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // out = h + mlp(ln2(h))
        let dact = linear_backward(lc.act.view(), &lp.w2, &dx, &mut lg.w2, &mut lg.b2);
        let dpre = dact * &lc.pre_act.mapv(gelu_grad);
        let dln2 = linear_backward(lc.ln2_out.view(), &lp.w1, &dpre, &mut lg.w1, &mut lg.b1);
        let mut dh = dx;
        dh += &layer_norm_backward(&lc.ln2, &lp.ln2_gain, &dln2, &mut lg.ln2_gain, &mut lg.ln2_bias);

        // h = x + attn(ln1(x))
        let dmerged = linear_backward(lc.attn.merged.view(), &lp.wo, &dh, &mut lg.wo, &mut lg.bo);
        let (dq, dk, dv) = multi_head_attention_backward(&lc.attn, &dmerged);
        let mut dln1 = linear_backward(lc.ln1_out.view(), &lp.wq, &dq, &mut lg.wq, &mut lg.bq);
        dln1 += &linear_backward(lc.ln1_out.view(), &lp.wk, &dk, &mut lg.wk, &mut lg.bk);
        dln1 += &linear_backward(lc.ln1_out.view(), &lp.wv, &dv, &mut lg.wv, &mut lg.bv);
        let mut dinput = dh;
        dinput += &layer_norm_backward(&lc.ln1, &lp.ln1_gain, &dln1, &mut lg.ln1_gain, &mut lg.ln1_bias);
        debug_assert_eq!(dinput.dim(), lc.input.dim());
        dx = dinput;
    }

    grads.positional += &dx;
    grads.class_token += &dx.slice(s![0..1, ..]);
    let dpatch = dx.slice(s![1.., ..]).to_owned();
    linear_backward(
        cache.patches.view(),
        &params.patch_proj,
        &dpatch,
        &mut grads.patch_proj,
        &mut grads.patch_bias,
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{finite_difference_check_coords, FnObjective};

    fn small_config() -> ToyViTConfig {
        ToyViTConfig {
            patch: PatchSpec::square(4, 4),
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2.0,
            classifier_init_std: 0.5,
            seed: 3,
        }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng::stream(seed, 0);
        let shape = ImageShape::new(h, w).unwrap();
        let data = (0..h * w * 3).map(|_| r.random::<f64>()).collect();
        Image::new(shape, 3, data).unwrap()
    }

    #[test]
    fn single_patch_equals_flattened_image() {
        let img = noise_image(16, 16, 1);
        let p = extract_patches(&img, PatchSpec::square(16, 16)).unwrap();
        assert_eq!(p.dim(), (1, 16 * 16 * 3));
        assert_eq!(p.row(0).to_vec(), img.data);
    }

    #[test]
    fn overlapping_rows_share_pixels() {
        let img = noise_image(24, 16, 2);
        let p = extract_patches(&img, PatchSpec::square(16, 8)).unwrap();
        assert_eq!(p.nrows(), 2);
        // naive copy loop
        for r in 0..2 {
            let mut naive = vec![];
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        naive.push(img.get(r * 8 + y, x, c));
                    }
                }
            }
            assert_eq!(p.row(r).to_vec(), naive);
        }
        let row_len = 16 * 3;
        assert_eq!(
            p.slice(s![0, 8 * row_len..]).to_vec(),
            p.slice(s![1, ..8 * row_len]).to_vec()
        );
    }

    #[test]
    fn constant_image_rows_identical() {
        let img = Image::filled(ImageShape::new(32, 48).unwrap(), 3, 0.25);
        let p = extract_patches(&img, PatchSpec::square(16, 16)).unwrap();
        for r in 1..p.nrows() {
            assert_eq!(p.row(r), p.row(0));
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = small_config();
        let shape = ImageShape::new(8, 12).unwrap();
        let params = ModelParams::init(&cfg, shape, 3, vec![0, 1]).unwrap();
        let img = noise_image(8, 12, 4);
        let a = forward(&params, &img).unwrap();
        let b = forward(&params, &img).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        assert!(forward(&params, &noise_image(8, 8, 4)).is_err());
    }

    #[test]
    fn param_count_matches_allocation() {
        let cfg = small_config();
        let shape = ImageShape::new(8, 12).unwrap();
        let params = ModelParams::init(&cfg, shape, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(param_count(&cfg, shape, 3, 3).unwrap(), params.param_count());
        // only the positional table depends on the stride
        let overlap = ToyViTConfig {
            patch: PatchSpec::square(4, 2),
            ..cfg
        };
        let diff = param_count(&overlap, shape, 3, 3).unwrap() - params.param_count();
        let n_dense = compute_patch_grid(shape, overlap.patch).unwrap().len();
        assert_eq!(diff, (n_dense - 6) * cfg.embed_dim);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_config();
        let shape = ImageShape::new(8, 8).unwrap();
        let params = ModelParams::init(&cfg, shape, 3, vec![0]).unwrap();
        let img = noise_image(8, 8, 6);
        let probe: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let eval = |flat: &[f64]| {
            let mut p = params.clone();
            p.set_flat(flat).unwrap();
            forward(&p, &img).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let obj = FnObjective {
            value: eval,
            gradient: |flat: &[f64]| {
                let mut p = params.clone();
                p.set_flat(flat).unwrap();
                let (_, cache) = forward_with_cache(&p, &img).unwrap();
                let mut g = p.zeros_like();
                backward(&p, &cache, &probe, &mut g);
                g.to_flat()
            },
        };
        let flat = params.to_flat();
        // every coordinate except the classifier, which the feature does not use
        let coords: Vec<usize> = (0..flat.len() - 8).collect();
        let r = finite_difference_check_coords(&obj, &flat, &coords, 1e-5, 1e-5);
        assert!(r.passed, "{r:?}");
    }
}

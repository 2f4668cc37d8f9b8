//! Patch-grid geometry, dataset aspect-ratio statistics and resize planning.
//!
//! Aspect ratio is always width / height.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 {
            return Err(Error::geometry("height", "image height must be at least 1"));
        }
        if width == 0 {
            return Err(Error::geometry("width", "image width must be at least 1"));
        }
        Ok(Self { height, width })
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

/// Patch size and per-axis stride, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::square(16, 16)
    }
}

impl PatchSpec {
    pub fn square(patch: usize, stride: usize) -> Self {
        Self::uneven(patch, stride, stride)
    }

    /// Square patches with independent strides per axis.
    pub fn uneven(patch: usize, stride_h: usize, stride_w: usize) -> Self {
        Self {
            patch_h: patch,
            patch_w: patch,
            stride_h,
            stride_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("stride_h", self.stride_h),
            ("stride_w", self.stride_w),
        ] {
            if v == 0 {
                return Err(Error::geometry(name, format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn is_non_overlapping(&self) -> bool {
        self.stride_h >= self.patch_h && self.stride_w >= self.patch_w
    }

    pub fn patch_pixels(&self, channels: usize) -> usize {
        self.patch_h * self.patch_w * channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPosition {
    pub row: usize,
    pub col: usize,
    /// Pixel row of the patch's top edge.
    pub y: usize,
    /// Pixel column of the patch's left edge.
    pub x: usize,
}

/// Row-major decomposition of one image into strided patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub shape: ImageShape,
    pub spec: PatchSpec,
    pub n_y: usize,
    pub n_x: usize,
    pub positions: Vec<PatchPosition>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.n_y * self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_x + col
    }
}

fn windows_along(dim: usize, patch: usize, stride: usize) -> usize {
    (dim - patch) / stride + 1
}

/// Lays out patches of `spec` over an image of `shape`.
///
/// Strides that do not divide the remaining extent drop the trailing pixels.
pub fn compute_patch_grid(shape: ImageShape, spec: PatchSpec) -> Result<PatchGrid> {
    ImageShape::new(shape.height, shape.width)?;
    spec.validate()?;
    if spec.patch_h > shape.height {
        return Err(Error::geometry(
            "height",
            format!("patch height {} exceeds image height {}", spec.patch_h, shape.height),
        ));
    }
    if spec.patch_w > shape.width {
        return Err(Error::geometry(
            "width",
            format!("patch width {} exceeds image width {}", spec.patch_w, shape.width),
        ));
    }
    if spec.stride_h > shape.height {
        return Err(Error::geometry(
            "height",
            format!("stride {} exceeds image height {}", spec.stride_h, shape.height),
        ));
    }
    if spec.stride_w > shape.width {
        return Err(Error::geometry(
            "width",
            format!("stride {} exceeds image width {}", spec.stride_w, shape.width),
        ));
    }

    let n_y = windows_along(shape.height, spec.patch_h, spec.stride_h);
    let n_x = windows_along(shape.width, spec.patch_w, spec.stride_w);
    let positions = (0..n_y)
        .flat_map(|row| {
            (0..n_x).map(move |col| PatchPosition {
                row,
                col,
                y: row * spec.stride_h,
                x: col * spec.stride_w,
            })
        })
        .collect();
    Ok(PatchGrid {
        shape,
        spec,
        n_y,
        n_x,
        positions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectRatioStats {
    pub count: usize,
    pub mean_ar: f64,
    pub median_ar: f64,
    /// (height, width)
    pub mean_size: (f64, f64),
    /// (height, width)
    pub median_size: (f64, f64),
    pub histogram: Vec<HistogramBin>,
    /// Ascending.
    pub cluster_centers: Vec<f64>,
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted_f64(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Equal-width bins over `[min, max]`; every bin is right-open except the last.
pub fn histogram(sorted_values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    if sorted_values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lo = sorted_values[0];
    let hi = sorted_values[sorted_values.len() - 1];
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lower: lo + b as f64 * width,
            upper: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in sorted_values {
        let b = if width > 0.0 {
            (((v - lo) / width).floor() as usize).min(bins - 1)
        } else {
            bins - 1
        };
        out[b].count += 1;
    }
    Ok(out)
}

/// Outcome of one-dimensional k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1d {
    /// Ascending.
    pub centers: Vec<f64>,
    /// Cluster index per input value, in input order.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after every update, Lloyd then Hartigan.
    pub sse_trace: Vec<f64>,
    pub lloyd_iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-9;

fn sse(values: &[f64], assign: &[usize], centers: &[f64]) -> f64 {
    values
        .iter()
        .zip(assign)
        .map(|(v, &a)| (v - centers[a]).powi(2))
        .sum()
}

fn nearest(v: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn recompute_centers(values: &[f64], assign: &[usize], centers: &mut [f64]) -> Vec<usize> {
    let k = centers.len();
    let mut sums = vec![0.0; k];
    let mut sizes = vec![0usize; k];
    for (v, &a) in values.iter().zip(assign) {
        sums[a] += v;
        sizes[a] += 1;
    }
    for j in 0..k {
        // empty clusters keep their previous center
        if sizes[j] > 0 {
            centers[j] = sums[j] / sizes[j] as f64;
        }
    }
    sizes
}

/// k-means over scalar values.
///
/// Seeding is farthest-point starting from the smallest value; the seeded RNG
/// only breaks ties between equally distant candidates. Lloyd iterations run
/// until no center moves by more than [`KMEANS_TOL`] or [`KMEANS_MAX_ITER`]
/// is reached, then single-point Hartigan moves polish the partition so that
/// no reassignment of one point lowers the SSE.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64) -> Result<KMeans1d> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite value in k-means input".into()));
    }
    let sorted = sorted_f64(values.to_vec());
    let mut distinct = sorted.clone();
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::InfeasibleK {
            k,
            distinct: distinct.len(),
        });
    }

    let mut tie_rng = rng::stream(seed, 0);
    let mut centers = vec![distinct[0]];
    while centers.len() < k {
        let dist_to_set =
            |v: f64| centers.iter().map(|c| (v - c).abs()).fold(f64::INFINITY, f64::min);
        let far = distinct.iter().map(|&v| dist_to_set(v)).fold(0.0, f64::max);
        let candidates: Vec<f64> = distinct
            .iter()
            .copied()
            .filter(|&v| dist_to_set(v) == far)
            .collect();
        let pick = if candidates.len() == 1 {
            0
        } else {
            tie_rng.random_range(0..candidates.len())
        };
        centers.push(candidates[pick]);
    }
    centers.sort_by(f64::total_cmp);

    // Work on the sorted copy; map back to input order at the end.
    let mut assign: Vec<usize> = sorted.iter().map(|&v| nearest(v, &centers)).collect();
    let mut sizes = recompute_centers(&sorted, &assign, &mut centers);
    let mut trace = vec![sse(&sorted, &assign, &centers)];
    let mut iterations = 1;
    while iterations < KMEANS_MAX_ITER {
        let before = centers.clone();
        for (a, &v) in assign.iter_mut().zip(&sorted) {
            *a = nearest(v, &centers);
        }
        sizes = recompute_centers(&sorted, &assign, &mut centers);
        trace.push(sse(&sorted, &assign, &centers));
        iterations += 1;
        let shift = before
            .iter()
            .zip(&centers)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if shift < KMEANS_TOL {
            break;
        }
    }

    for _ in 0..KMEANS_MAX_ITER {
        let mut moved = false;
        for i in 0..sorted.len() {
            let v = sorted[i];
            let from = assign[i];
            if sizes[from] <= 1 {
                continue;
            }
            let n_from = sizes[from] as f64;
            let removal_gain = n_from / (n_from - 1.0) * (v - centers[from]).powi(2);
            let mut best: Option<(usize, f64)> = None;
            for to in 0..k {
                if to == from {
                    continue;
                }
                let n_to = sizes[to] as f64;
                let delta = n_to / (n_to + 1.0) * (v - centers[to]).powi(2) - removal_gain;
                if delta < -1e-15 && best.is_none_or(|(_, d)| delta < d) {
                    best = Some((to, delta));
                }
            }
            if let Some((to, _)) = best {
                assign[i] = to;
                sizes = recompute_centers(&sorted, &assign, &mut centers);
                trace.push(sse(&sorted, &assign, &centers));
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }

    // Keep centers ascending and relabel.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let mut relabel = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    let centers_sorted: Vec<f64> = order.iter().map(|&j| centers[j]).collect();

    // Equal values share a cluster, so the label of a value can be looked up.
    let assignments = values
        .iter()
        .map(|v| {
            let pos = sorted.partition_point(|s| s.total_cmp(v).is_lt());
            relabel[assign[pos]]
        })
        .collect();

    Ok(KMeans1d {
        centers: centers_sorted,
        assignments,
        sse_trace: trace,
        lloyd_iterations: iterations,
    })
}

/// Size and aspect-ratio summary of a dataset with `k` k-means AR clusters.
pub fn aspect_ratio_stats(
    shapes: &[ImageShape],
    k: usize,
    bins: usize,
    seed: u64,
) -> Result<AspectRatioStats> {
    if shapes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in shapes {
        ImageShape::new(s.height, s.width)?;
    }
    let ars = sorted_f64(shapes.iter().map(ImageShape::aspect_ratio).collect());
    let heights = sorted_f64(shapes.iter().map(|s| s.height as f64).collect());
    let widths = sorted_f64(shapes.iter().map(|s| s.width as f64).collect());
    let n = shapes.len() as f64;

    let clusters = kmeans_1d(&ars, k, seed)?;
    Ok(AspectRatioStats {
        count: shapes.len(),
        mean_ar: ars.iter().sum::<f64>() / n,
        median_ar: median_sorted(&ars),
        mean_size: (heights.iter().sum::<f64>() / n, widths.iter().sum::<f64>() / n),
        median_size: (median_sorted(&heights), median_sorted(&widths)),
        histogram: histogram(&ars, bins)?,
        cluster_centers: clusters.centers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResizeTarget {
    pub height: usize,
    pub width: usize,
    pub model_ar: f64,
}

impl ResizeTarget {
    pub fn shape(&self) -> ImageShape {
        ImageShape {
            height: self.height,
            width: self.width,
        }
    }
}

/// Fixed training input sizes, one per aspect-ratio cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizePlan {
    pub targets: Vec<ResizeTarget>,
}

/// Largest allowed gap between a target's nominal AR and its pixel AR.
pub const PLAN_AR_TOLERANCE: f64 = 1e-2;

impl ResizePlan {
    pub fn validate(&self) -> Result<()> {
        for t in &self.targets {
            ImageShape::new(t.height, t.width)?;
            if !(t.model_ar > 0.0) {
                return Err(Error::InvalidConfig(format!("model_ar {} must be positive", t.model_ar)));
            }
            let actual = t.width as f64 / t.height as f64;
            if (actual - t.model_ar).abs() > PLAN_AR_TOLERANCE {
                return Err(Error::InvalidConfig(format!(
                    "target {}x{} has AR {actual:.4}, more than {PLAN_AR_TOLERANCE} from {}",
                    t.height, t.width, t.model_ar
                )));
            }
        }
        Ok(())
    }
}

/// One target per AR center: fixed height, width rounded half away from zero.
pub fn plan_from_centers(centers: &[f64], base_height: usize) -> Result<ResizePlan> {
    if base_height == 0 {
        return Err(Error::geometry("height", "base height must be at least 1"));
    }
    let targets = centers
        .iter()
        .map(|&ar| ResizeTarget {
            height: base_height,
            width: (base_height as f64 * ar).round() as usize,
            model_ar: ar,
        })
        .collect();
    let plan = ResizePlan { targets };
    plan.validate()?;
    Ok(plan)
}

pub fn plan_input_sizes(stats: &AspectRatioStats, base_height: usize) -> Result<ResizePlan> {
    plan_from_centers(&stats.cluster_centers, base_height)
}

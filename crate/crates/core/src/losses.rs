//! Training objective: ID cross-entropy, soft-margin batch-hard triplet loss,
//! their sum, analytic gradients, and a central-difference gradient checker.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Logits for `N` samples over `C` identity classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    pub logits: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LogitBatch {
    pub fn new(logits: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, c) = logits.dim();
        if n == 0 || c == 0 {
            return Err(Error::EmptyInput("logit batch has no rows or classes".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Shape(format!("label {y} out of range for {c} classes")));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite logit".into()));
        }
        Ok(Self { logits, labels })
    }
}

/// `P x K` batch: `P` identities with exactly `K` samples each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl EmbeddingBatch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::EmptyInput("embedding batch has no rows or columns".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} feature rows", labels.len())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite feature".into()));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_default() += 1;
        }
        let k = *counts.values().next().unwrap();
        if counts.values().any(|&c| c != k) {
            return Err(Error::DegenerateBatch(
                "every identity must appear the same number of times".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            p: counts.len(),
            k,
        })
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pairwise squared Euclidean distances between rows.
pub fn squared_euclidean_matrix(features: ArrayView2<f64>) -> Array2<f64> {
    let n = features.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let fi = features.row(i);
        for j in (i + 1)..n {
            let d: f64 = fi
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = d.max(0.0);
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, y: usize) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[y] - lse
}

/// Mean cross-entropy of the true labels, no label smoothing.
pub fn id_loss(batch: &LogitBatch) -> f64 {
    let n = batch.labels.len() as f64;
    let total: f64 = batch
        .logits
        .axis_iter(Axis(0))
        .zip(&batch.labels)
        .map(|(row, &y)| -log_softmax_at(row, y))
        .sum();
    (total / n).max(0.0)
}

/// Loss and gradient with respect to the logits.
pub fn id_loss_with_grad(batch: &LogitBatch) -> (f64, Array2<f64>) {
    let n = batch.labels.len() as f64;
    let mut grad = Array2::zeros(batch.logits.dim());
    let mut total = 0.0;
    for ((row, mut g), &y) in batch
        .logits
        .axis_iter(Axis(0))
        .zip(grad.axis_iter_mut(Axis(0)))
        .zip(&batch.labels)
    {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += -(row[y] - m - z.ln());
        for (c, e) in exps.iter().enumerate() {
            g[c] = e / z / n;
        }
        g[y] -= 1.0 / n;
    }
    ((total / n).max(0.0), grad)
}

/// Hardest positive and hardest negative chosen for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSelection {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub selections: Vec<TripletSelection>,
    /// Some anchor had a runner-up within the tie tolerance at its max or min.
    pub has_tie: bool,
}

/// Distances closer than this are treated as tied when selecting extremes.
pub const TIE_TOLERANCE: f64 = 1e-7;

fn check_triplet_batch(batch: &EmbeddingBatch) -> Result<()> {
    if batch.k < 2 {
        return Err(Error::DegenerateBatch(format!(
            "K = {} leaves no positive for an anchor",
            batch.k
        )));
    }
    if batch.p < 2 {
        return Err(Error::DegenerateBatch(format!(
            "P = {} leaves no negative for an anchor",
            batch.p
        )));
    }
    Ok(())
}

/// Soft-margin batch-hard triplet loss with its feature gradient.
///
/// For each anchor the farthest same-label sample (the anchor itself
/// excluded) and the nearest other-label sample are picked by squared
/// Euclidean distance; the loss is the mean of `softplus(d_pos - d_neg)`.
/// The gradient flows through the selected pair only.
pub fn triplet_loss_with_grad(batch: &EmbeddingBatch) -> Result<TripletOutput> {
    check_triplet_batch(batch)?;
    let f = &batch.features;
    let dist = squared_euclidean_matrix(f.view());
    let n = f.nrows();
    let scale = 1.0 / n as f64;
    let mut grad = Array2::zeros(f.dim());
    let mut loss = 0.0;
    let mut selections = Vec::with_capacity(n);
    let mut has_tie = false;

    for a in 0..n {
        let mut pos = None::<(usize, f64)>;
        let mut neg = None::<(usize, f64)>;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[[a, j]];
            if batch.labels[j] == batch.labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (p, dp) = pos.expect("K >= 2");
        let (q, dn) = neg.expect("P >= 2");
        for j in 0..n {
            if j == a || j == p || j == q {
                continue;
            }
            let d = dist[[a, j]];
            if batch.labels[j] == batch.labels[a] {
                has_tie |= (dp - d).abs() < TIE_TOLERANCE;
            } else {
                has_tie |= (d - dn).abs() < TIE_TOLERANCE;
            }
        }

        let z = dp - dn;
        loss += softplus(z);
        let s = sigmoid(z) * scale;
        for c in 0..f.ncols() {
            let to_pos = 2.0 * (f[[a, c]] - f[[p, c]]);
            let to_neg = 2.0 * (f[[a, c]] - f[[q, c]]);
            grad[[a, c]] += s * (to_pos - to_neg);
            grad[[p, c]] -= s * to_pos;
            grad[[q, c]] += s * to_neg;
        }
        selections.push(TripletSelection {
            positive: p,
            negative: q,
        });
    }
    Ok(TripletOutput {
        loss: loss * scale,
        grad,
        selections,
        has_tie,
    })
}

pub fn triplet_loss(batch: &EmbeddingBatch) -> Result<f64> {
    triplet_loss_with_grad(batch).map(|o| o.loss)
}

/// ID and triplet terms with equal unit weights.
#[inline]
pub fn overall_loss(id: f64, tri: f64) -> f64 {
    id + tri
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &[f64]) -> f64;

    fn gradient(&self, params: &[f64]) -> Vec<f64>;

    /// Discrete choices (argmax/argmin picks) made at `params`. Two points
    /// with different selections straddle a kink.
    fn selection(&self, _params: &[f64]) -> Vec<usize> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub passed: bool,
    pub checked: usize,
    /// Coordinates whose `+eps`/`-eps` probes selected different extremes.
    pub skipped: Vec<usize>,
}

impl FdReport {
    /// Some coordinate sat on a kink and was not compared.
    pub fn inconclusive(&self) -> bool {
        !self.skipped.is_empty()
    }
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares the analytic gradient with central differences on `coords`.
pub fn finite_difference_check_coords<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    coords: &[usize],
    epsilon: f64,
    tolerance: f64,
) -> FdReport {
    let analytic = objective.gradient(params);
    let mut probe = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = Vec::new();
    for &i in coords {
        probe[i] = params[i] + epsilon;
        let up = objective.value(&probe);
        let sel_up = objective.selection(&probe);
        probe[i] = params[i] - epsilon;
        let down = objective.value(&probe);
        let sel_down = objective.selection(&probe);
        probe[i] = params[i];
        if sel_up != sel_down {
            skipped.push(i);
            continue;
        }
        let fd = (up - down) / (2.0 * epsilon);
        max_rel_error = max_rel_error.max(relative_error(fd, analytic[i]));
        checked += 1;
    }
    FdReport {
        max_rel_error,
        passed: max_rel_error < tolerance,
        checked,
        skipped,
    }
}

pub fn finite_difference_check<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    epsilon: f64,
    tolerance: f64,
) -> FdReport {
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_difference_check_coords(objective, params, &coords, epsilon, tolerance)
}

/// ID loss as a function of flattened logits.
pub struct IdLossObjective {
    pub rows: usize,
    pub classes: usize,
    pub labels: Vec<usize>,
}

impl IdLossObjective {
    fn batch(&self, params: &[f64]) -> LogitBatch {
        LogitBatch {
            logits: Array2::from_shape_vec((self.rows, self.classes), params.to_vec())
                .expect("parameter length matches rows x classes"),
            labels: self.labels.clone(),
        }
    }
}

impl Objective for IdLossObjective {
    fn value(&self, params: &[f64]) -> f64 {
        id_loss(&self.batch(params))
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        id_loss_with_grad(&self.batch(params)).1.into_iter().collect()
    }
}

/// Triplet loss as a function of flattened features.
pub struct TripletObjective {
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl TripletObjective {
    fn batch(&self, params: &[f64]) -> EmbeddingBatch {
        let n = self.labels.len();
        EmbeddingBatch::new(
            Array2::from_shape_vec((n, self.dim), params.to_vec()).expect("n x dim parameters"),
            self.labels.clone(),
        )
        .expect("valid P x K labels")
    }
}

impl Objective for TripletObjective {
    fn value(&self, params: &[f64]) -> f64 {
        triplet_loss(&self.batch(params)).expect("P, K >= 2")
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        triplet_loss_with_grad(&self.batch(params))
            .expect("P, K >= 2")
            .grad
            .into_iter()
            .collect()
    }

    fn selection(&self, params: &[f64]) -> Vec<usize> {
        triplet_loss_with_grad(&self.batch(params))
            .expect("P, K >= 2")
            .selections
            .iter()
            .flat_map(|s| [s.positive, s.negative])
            .collect()
    }
}

/// Adapts a pair of closures into an [`Objective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, params: &[f64]) -> f64 {
        (self.value)(params)
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        (self.gradient)(params)
    }
}

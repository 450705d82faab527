//! Evaluation metrics. External networks (embedders, perceptual distances,
//! attribute and pose predictors) enter through the traits in [`providers`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::SemanticMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod providers;
mod table;

pub use providers::{Embedder, PerceptualDistance, PixelL1, Predictor, RandomProjection, ToyPredictor};
pub use table::{write_curves, CurveEntry, PredictionRow, PredictionTable, ScoreTable};

/// Negative eigenvalues down to this are treated as rounding noise.
const PSD_TOLERANCE: f64 = 1e-6;

/// First and second moments of a feature cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::dim(format!(
                "covariance {}x{} for mean of length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Invariant("covariance is not symmetric".into()));
        }
        let low = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if d > 0 && low < -1e-8 * scale {
            return Err(Error::Invariant(format!("covariance has eigenvalue {low:e}")));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of `n` feature rows.
pub fn gaussian_stats(rows: &[Vec<f64>]) -> Result<GaussianStats> {
    if rows.len() < 2 {
        return Err(Error::Usage(format!("gaussian_stats needs at least 2 rows, got {}", rows.len())));
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::dim(format!("feature rows of length {d} and {}", r.len())));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianStats::new(mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if let Some(&low) = eig.eigenvalues.iter().find(|&&v| v < -PSD_TOLERANCE) {
        return Err(Error::Numeric(format!("{what} is not PSD (eigenvalue {low:e})")));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians.
///
/// `Tr((Σa Σb)^½)` is taken as `Tr((A Σb A)^½)` with `A = Σa^½`, which
/// has the same eigenvalues and stays symmetric.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("fid of dims {} and {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov, "first covariance")?;
    psd_sqrt(&b.cov, "second covariance")?;
    let inner = &ra * &b.cov * &ra;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOLERANCE {
            return Err(Error::Numeric(format!("covariance product eigenvalue {v:e}")));
        }
        cross += v.max(0.0).sqrt();
    }
    Ok(diff + a.cov.trace() + b.cov.trace() - 2.0 * cross)
}

/// FID between two sample sets under an embedding provider.
pub fn fid_of(embedder: &dyn Embedder, a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let embed = |xs: &[Tensor]| xs.iter().map(|x| embedder.embed(x)).collect::<Result<Vec<_>>>();
    fid(&gaussian_stats(&embed(a)?)?, &gaussian_stats(&embed(b)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

/// Mean pairwise distance among the `K` outputs of each input, averaged
/// over inputs. `std` is the population deviation of the per-input means.
pub fn diversity(groups: &[Vec<Tensor>], distance: &dyn PerceptualDistance) -> Result<Spread> {
    if groups.is_empty() {
        return Err(Error::Usage("diversity needs at least one input".into()));
    }
    let mut per_input = Vec::with_capacity(groups.len());
    for g in groups {
        if g.len() < 2 {
            return Err(Error::Usage(format!("diversity needs K >= 2 outputs per input, got {}", g.len())));
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                sum += distance.distance(&g[i], &g[j])?;
                pairs += 1;
            }
        }
        per_input.push(sum / pairs as f64);
    }
    let n = per_input.len() as f64;
    let mean = per_input.iter().sum::<f64>() / n;
    let var = per_input.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Spread { mean, std: var.sqrt() })
}

/// Per-class IoU averaged over classes present in either mask.
pub fn miou(a: &SemanticMask, b: &SemanticMask) -> Result<f64> {
    if (a.num_classes(), a.height(), a.width()) != (b.num_classes(), b.height(), b.width()) {
        return Err(Error::dim(format!(
            "miou of masks {}x{}x{} and {}x{}x{}",
            a.num_classes(),
            a.height(),
            a.width(),
            b.num_classes(),
            b.height(),
            b.width()
        )));
    }
    let r = a.num_classes();
    let mut inter = vec![0usize; r];
    let mut union = vec![0usize; r];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (x, y) = (x as usize, y as usize);
        if x == y {
            inter[x] += 1;
            union[x] += 1;
        } else {
            union[x] += 1;
            union[y] += 1;
        }
    }
    let present: Vec<f64> = (0..r)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Precision and recall at each distinct score, highest threshold first.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    /// Area under the interpolated curve: each recall step is weighted by
    /// the best precision reached at that recall or beyond.
    pub fn average_precision(&self) -> f64 {
        let n = self.recall.len();
        let mut best = vec![0.0; n];
        let mut run: f64 = 0.0;
        for k in (0..n).rev() {
            run = run.max(self.precision[k]);
            best[k] = run;
        }
        let mut prev = 0.0;
        let mut ap = 0.0;
        for k in 0..n {
            ap += (self.recall[k] - prev) * best[k];
            prev = self.recall[k];
        }
        ap
    }
}

fn check_scores(scores: &[f64], truths: &[bool]) -> Result<()> {
    if scores.len() != truths.len() {
        return Err(Error::dim(format!("{} scores for {} truths", scores.len(), truths.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    Ok(())
}

/// `None` when there are no positives.
pub fn pr_curve(scores: &[f64], truths: &[bool]) -> Result<Option<PrCurve>> {
    check_scores(scores, truths)?;
    let positives = truths.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut curve = PrCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
    };
    let (mut tp, mut taken) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        taken += 1;
        tp += truths[i] as usize;
        let last_of_tie = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            curve.thresholds.push(scores[i]);
            curve.precision.push(tp as f64 / taken as f64);
            curve.recall.push(tp as f64 / positives as f64);
        }
    }
    Ok(Some(curve))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApF1 {
    /// Absent when all truths share one class.
    pub ap: Option<f64>,
    /// At threshold 0.5; absent when there are neither positives nor
    /// positive predictions.
    pub f1: Option<f64>,
}

pub fn ap_f1(scores: &[f64], truths: &[bool]) -> Result<ApF1> {
    check_scores(scores, truths)?;
    let positives = truths.iter().filter(|&&t| t).count();
    let ap = if positives == 0 || positives == truths.len() {
        None
    } else {
        pr_curve(scores, truths)?.map(|c| c.average_precision())
    };
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &t) in scores.iter().zip(truths) {
        match (s >= 0.5, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    let f1 = (denom > 0).then(|| 2.0 * tp as f64 / denom as f64);
    Ok(ApF1 { ap, f1 })
}

/// Root-mean-square angle error per (roll, pitch, yaw), rows matched by id.
pub fn pose_rmse(pred: &PredictionTable, reference: &PredictionTable) -> Result<[f64; 3]> {
    if pred.rows.is_empty() {
        return Err(Error::Usage("pose_rmse of an empty table".into()));
    }
    if pred.rows.len() != reference.rows.len() {
        return Err(Error::Usage(format!(
            "pose_rmse of {} rows against {} reference rows",
            pred.rows.len(),
            reference.rows.len()
        )));
    }
    let mut sq = [0.0; 3];
    for row in &pred.rows {
        let other = reference
            .get(&row.id)
            .ok_or_else(|| Error::Usage(format!("id `{}` missing from the reference table", row.id)))?;
        for (a, s) in sq.iter_mut().enumerate() {
            *s += (row.pose[a] - other.pose[a]).powi(2);
        }
    }
    let n = pred.rows.len() as f64;
    Ok(sq.map(|s| (s / n).sqrt()))
}

/// One curve per (manipulation, attribute) table.
pub fn pr_curves(tables: &[ScoreTable]) -> Result<Vec<CurveEntry>> {
    tables
        .iter()
        .map(|t| {
            Ok(CurveEntry {
                manipulation: t.manipulation.clone(),
                attribute: t.attribute.clone(),
                curve: pr_curve(&t.scores, &t.truths)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;

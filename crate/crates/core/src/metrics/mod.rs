//! Saliency metrics: the KL training loss and the distribution- and
//! fixation-based evaluation scores, plus Gaussian ground-truth density maps.

mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{write_report, FrameScores};

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_SIGMA: f64 = 9.0;
pub const DEFAULT_SAUC_SPLITS: usize = 100;

/// Allowed deviation from a unit sum for inputs that must be distributions.
const SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("maps differ in shape: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("map of {height}x{width} needs {expected} values, got {got}")]
    Length {
        height: usize,
        width: usize,
        expected: usize,
        got: usize,
    },
    #[error("map contains a negative or non-finite value")]
    InvalidValue,
    #[error("map must sum to 1, sums to {0}")]
    Unnormalized(f64),
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("no fixations")]
    NoFixations,
    #[error("fixation ({x}, {y}) outside a {width}x{height} map")]
    FixationRange {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("shuffle pool has no fixations")]
    EmptyPool,
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("split count must be positive")]
    Splits,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Non-negative `H x W` map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(MetricError::Length {
                height,
                width,
                expected: height * width,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MetricError::InvalidValue);
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Rescaled to sum 1; `None` for an all-zero map.
    pub fn to_distribution(&self) -> Option<Self> {
        let s = self.sum();
        (s > 0.0).then(|| Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v / s).collect(),
        })
    }
}

/// A gaze point in pixel coordinates: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fixation {
    pub x: usize,
    pub y: usize,
}

/// Fixations recorded on one frame.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub points: Vec<Fixation>,
}

impl FixationRecord {
    pub fn new(points: Vec<Fixation>) -> Self {
        Self { points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        match self.points.iter().find(|p| p.x >= width || p.y >= height) {
            Some(p) => Err(MetricError::FixationRange {
                x: p.x,
                y: p.y,
                width,
                height,
            }),
            None => Ok(()),
        }
    }
}

/// A metric value, flagged when the input had no variance to measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

fn same_shape(p: &SaliencyMap, q: &SaliencyMap) -> Result<()> {
    if p.dims() != q.dims() {
        return Err(MetricError::Shape(p.dims(), q.dims()));
    }
    Ok(())
}

fn check_distribution(m: &SaliencyMap) -> Result<()> {
    let s = m.sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(MetricError::Unnormalized(s));
    }
    Ok(())
}

fn fixated(map: &SaliencyMap, fix: &FixationRecord) -> Result<()> {
    if fix.is_empty() {
        return Err(MetricError::NoFixations);
    }
    fix.check_bounds(map.height, map.width)
}

/// `sum_i Q_i ln(eps + Q_i / (P_i + eps))` with the natural logarithm.
pub fn kldiv(p: &SaliencyMap, q: &SaliencyMap, eps: f64) -> Result<f64> {
    same_shape(p, q)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(MetricError::Epsilon(eps));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(p.values
        .iter()
        .zip(&q.values)
        .map(|(&pi, &qi)| qi * (eps + qi / (pi + eps)).ln())
        .sum())
}

fn standardize(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (sd > 0.0 && sd.is_finite()).then(|| values.iter().map(|v| (v - mean) / sd).collect())
}

/// Pearson correlation over pixels. A constant map scores 0, flagged.
pub fn cc(p: &SaliencyMap, q: &SaliencyMap) -> Result<Score> {
    same_shape(p, q)?;
    let n = p.values.len() as f64;
    let mp = p.values.iter().sum::<f64>() / n;
    let mq = q.values.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vq) = (0.0, 0.0, 0.0);
    for (a, b) in p.values.iter().zip(&q.values) {
        let (da, db) = (a - mp, b - mq);
        cov += da * db;
        vp += da * da;
        vq += db * db;
    }
    if vp == 0.0 || vq == 0.0 {
        return Ok(Score {
            value: 0.0,
            degenerate: true,
        });
    }
    // sqrt(x * x) == x exactly, so identical maps give exactly 1.
    Ok(Score {
        value: (cov / (vp * vq).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Histogram intersection of two distributions, computed as
/// `1 - sum|P - Q| / 2`, which equals `sum min(P, Q)` when both sum to 1
/// and is exactly 1 for identical maps.
pub fn sim(p: &SaliencyMap, q: &SaliencyMap) -> Result<f64> {
    same_shape(p, q)?;
    check_distribution(p)?;
    check_distribution(q)?;
    let tv: f64 = p.values.iter().zip(&q.values).map(|(a, b)| (a - b).abs()).sum();
    Ok((1.0 - tv / 2.0).max(0.0))
}

/// Mean of the standardized map (population deviation) at fixated pixels.
pub fn nss(p: &SaliencyMap, fix: &FixationRecord) -> Result<Score> {
    fixated(p, fix)?;
    let Some(z) = standardize(&p.values) else {
        return Ok(Score {
            value: 0.0,
            degenerate: true,
        });
    };
    let total: f64 = fix.points.iter().map(|f| z[f.y * p.width + f.x]).sum();
    Ok(Score {
        value: total / fix.len() as f64,
        degenerate: false,
    })
}

/// Area under the ROC curve swept over the positive scores as thresholds,
/// descending, with a point counted at threshold `t` when its score is
/// at least `t`. The curve runs from (0,0) to (1,1).
fn roc_area(positives: &mut [f64], negatives: &mut [f64]) -> f64 {
    positives.sort_by(|a, b| b.total_cmp(a));
    negatives.sort_by(|a, b| b.total_cmp(a));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let (mut area, mut prev_tpr, mut prev_fpr) = (0.0, 0.0, 0.0);
    let (mut i, mut j) = (0, 0);
    while i < positives.len() {
        let t = positives[i];
        while i < positives.len() && positives[i] >= t {
            i += 1;
        }
        while j < negatives.len() && negatives[j] >= t {
            j += 1;
        }
        let tpr = i as f64 / np;
        let fpr = if nn > 0.0 { j as f64 / nn } else { 0.0 };
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        (prev_tpr, prev_fpr) = (tpr, fpr);
    }
    area + (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2.0
}

/// AUC with every non-fixated pixel as a negative.
pub fn auc_judd(p: &SaliencyMap, fix: &FixationRecord) -> Result<f64> {
    fixated(p, fix)?;
    let mut is_fix = vec![false; p.values.len()];
    let mut positives: Vec<f64> = fix
        .points
        .iter()
        .map(|f| {
            let i = f.y * p.width + f.x;
            is_fix[i] = true;
            p.values[i]
        })
        .collect();
    let mut negatives: Vec<f64> = p.values.iter().zip(&is_fix).filter(|(_, &f)| !f).map(|(&v, _)| v).collect();
    Ok(roc_area(&mut positives, &mut negatives))
}

/// Shuffled AUC: negatives are drawn with replacement from the fixations of
/// other frames, as many as there are positives, averaged over `n_splits`.
pub fn sauc(p: &SaliencyMap, fix: &FixationRecord, pool: &[FixationRecord], n_splits: usize, seed: u64) -> Result<f64> {
    fixated(p, fix)?;
    if n_splits == 0 {
        return Err(MetricError::Splits);
    }
    let others: Vec<Fixation> = pool.iter().flat_map(|r| r.points.iter().copied()).collect();
    if others.is_empty() {
        return Err(MetricError::EmptyPool);
    }
    FixationRecord::new(others.clone()).check_bounds(p.height, p.width)?;
    let positives: Vec<f64> = fix.points.iter().map(|f| p.at(f.x, f.y)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_splits {
        let mut negatives: Vec<f64> = (0..positives.len())
            .map(|_| {
                let f = others[rng.random_range(0..others.len())];
                p.at(f.x, f.y)
            })
            .collect();
        total += roc_area(&mut positives.clone(), &mut negatives);
    }
    Ok(total / n_splits as f64)
}

/// Sum of isotropic Gaussians at the fixations, each cut off beyond a
/// Euclidean radius of `4 sigma`, normalized to sum 1.
pub fn fixations_to_density(fix: &FixationRecord, height: usize, width: usize, sigma: f64) -> Result<SaliencyMap> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(MetricError::Sigma(sigma));
    }
    if fix.is_empty() {
        return Err(MetricError::NoFixations);
    }
    fix.check_bounds(height, width)?;
    let radius = 4.0 * sigma;
    let reach = radius.floor() as usize;
    let mut values = vec![0.0; height * width];
    for f in &fix.points {
        for y in f.y.saturating_sub(reach)..(f.y + reach + 1).min(height) {
            for x in f.x.saturating_sub(reach)..(f.x + reach + 1).min(width) {
                let d2 = (x as f64 - f.x as f64).powi(2) + (y as f64 - f.y as f64).powi(2);
                if d2 <= radius * radius {
                    values[y * width + x] += (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let map = SaliencyMap::new(height, width, values)?;
    Ok(map.to_distribution().expect("the centre pixel of each fixation is positive"))
}

//! Generalized evaluation with a calibration bias on unseen compositions.
//!
//! A scalar bias is added to every unseen composition's score and the
//! resulting (seen accuracy, unseen accuracy) pairs are traced over all bias
//! values that change a prediction. From that curve we report the best seen
//! and unseen accuracy, the best harmonic mean, and the area under the curve.
//!
//! Each sample's prediction switches from its best seen to its best unseen
//! composition at exactly one bias, `max_seen - max_unseen`. Sweeping one
//! bias inside every interval between consecutive switch points (plus one on
//! either side) therefore visits every achievable operating point.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::embed::masked_argmax;
use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Pair};

/// Half-width of the bracket placed around each switch point.
pub const BIAS_OFFSET: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    scores: Array2<f64>,
    labels: Vec<usize>,
    seen: Vec<bool>,
    pairs: Vec<Pair>,
}

impl ScoreMatrix {
    /// Scores over `space.target()` with one ground-truth target index per row.
    pub fn new(scores: Array2<f64>, labels: Vec<usize>, space: &CompositionSpace) -> Result<Self> {
        Self::from_parts(scores, labels, space.seen_flags().to_vec(), space.target().to_vec())
    }

    pub fn from_parts(
        scores: Array2<f64>,
        labels: Vec<usize>,
        seen: Vec<bool>,
        pairs: Vec<Pair>,
    ) -> Result<Self> {
        if scores.nrows() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: scores.nrows(),
                actual: labels.len(),
            });
        }
        let k = scores.ncols();
        for len in [seen.len(), pairs.len()] {
            if len != k {
                return Err(Error::LengthMismatch {
                    expected: k,
                    actual: len,
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::IndexOutOfRange { index: bad, len: k });
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("score matrix"));
        }
        Ok(ScoreMatrix {
            scores,
            labels,
            seen,
            pairs,
        })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn seen_flags(&self) -> &[bool] {
        &self.seen
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_compositions(&self) -> usize {
        self.seen.len()
    }

    fn check_mask(&self, mask: Option<&[bool]>) -> Result<()> {
        if let Some(m) = mask {
            if m.len() != self.n_compositions() {
                return Err(Error::LengthMismatch {
                    expected: self.n_compositions(),
                    actual: m.len(),
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::EmptyMask);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyPair {
    pub seen: f64,
    pub unseen: f64,
    /// No sample carries a seen label.
    pub seen_group_empty: bool,
    /// No sample carries an unseen label.
    pub unseen_group_empty: bool,
}

/// Bias at which state and object accuracies are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveBias {
    #[default]
    BestHm,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    pub auc: f64,
    pub hm_bias: f64,
    pub state_acc: f64,
    pub obj_acc: f64,
    pub n_seen_samples: usize,
    pub n_unseen_samples: usize,
    pub curve: Vec<CurvePoint>,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Best admissible seen and unseen composition for one row, lowest index on ties.
#[derive(Debug, Clone, Copy)]
struct RowBest {
    seen: Option<(usize, f64)>,
    unseen: Option<(usize, f64)>,
}

impl RowBest {
    fn scan(row: ArrayView1<'_, f64>, seen: &[bool], mask: Option<&[bool]>) -> Self {
        let mut best = RowBest {
            seen: None,
            unseen: None,
        };
        for (j, &v) in row.iter().enumerate() {
            if mask.is_some_and(|m| !m[j]) {
                continue;
            }
            let slot = if seen[j] {
                &mut best.seen
            } else {
                &mut best.unseen
            };
            if slot.is_none_or(|(_, b)| v > b) {
                *slot = Some((j, v));
            }
        }
        best
    }

    fn switch_point(&self) -> Option<f64> {
        match (self.seen, self.unseen) {
            (Some((_, s)), Some((_, u))) => Some(s - u),
            _ => None,
        }
    }

    fn predict(&self, bias: f64) -> usize {
        match (self.seen, self.unseen) {
            (Some((si, s)), Some((ui, u))) => {
                let shifted = u + bias;
                if shifted > s {
                    ui
                } else if shifted == s {
                    si.min(ui)
                } else {
                    si
                }
            }
            (Some((si, _)), None) => si,
            (None, Some((ui, _))) => ui,
            (None, None) => unreachable!("mask checked non-empty"),
        }
    }
}

fn row_bests(scores: &ScoreMatrix, mask: Option<&[bool]>) -> Vec<RowBest> {
    scores
        .scores
        .rows()
        .into_iter()
        .map(|row| RowBest::scan(row, &scores.seen, mask))
        .collect()
}

fn candidates_from(bests: &[RowBest]) -> Vec<f64> {
    let mut points: Vec<f64> = bests.iter().filter_map(RowBest::switch_point).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let (Some(&lo), Some(&hi)) = (points.first(), points.last()) else {
        return vec![0.0];
    };
    let mut out = Vec::with_capacity(2 * points.len() + 2);
    out.push(lo - 1.0);
    for (i, &p) in points.iter().enumerate() {
        let mut half = BIAS_OFFSET;
        if i > 0 {
            half = half.min((p - points[i - 1]) / 2.0);
        }
        if i + 1 < points.len() {
            half = half.min((points[i + 1] - p) / 2.0);
        }
        out.push(p - half);
        out.push(p + half);
    }
    out.push(hi + 1.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Bias values that together reach every achievable operating point.
pub fn bias_candidates(scores: &ScoreMatrix) -> Result<Vec<f64>> {
    bias_candidates_masked(scores, None)
}

pub fn bias_candidates_masked(scores: &ScoreMatrix, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if !scores.seen.iter().any(|&s| s) || scores.seen.iter().all(|&s| s) {
        return Err(Error::DegenerateSpace);
    }
    scores.check_mask(mask)?;
    Ok(candidates_from(&row_bests(scores, mask)))
}

fn group_sizes(scores: &ScoreMatrix) -> (usize, usize) {
    let n_seen = scores.labels.iter().filter(|&&l| scores.seen[l]).count();
    (n_seen, scores.labels.len() - n_seen)
}

fn accuracies(scores: &ScoreMatrix, predictions: impl Iterator<Item = usize>) -> AccuracyPair {
    let (n_seen, n_unseen) = group_sizes(scores);
    let (mut hit_seen, mut hit_unseen) = (0usize, 0usize);
    for (pred, &label) in predictions.zip(&scores.labels) {
        if pred == label {
            if scores.seen[label] {
                hit_seen += 1;
            } else {
                hit_unseen += 1;
            }
        }
    }
    let frac = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    AccuracyPair {
        seen: frac(hit_seen, n_seen),
        unseen: frac(hit_unseen, n_unseen),
        seen_group_empty: n_seen == 0,
        unseen_group_empty: n_unseen == 0,
    }
}

/// Seen and unseen accuracy after adding `bias` to every unseen score.
pub fn accuracy_pair(scores: &ScoreMatrix, bias: f64, mask: Option<&[bool]>) -> Result<AccuracyPair> {
    scores.check_mask(mask)?;
    let predictions = scores.scores.rows().into_iter().map(|row| {
        let biased = ndarray::Array1::from_iter(
            row.iter()
                .zip(&scores.seen)
                .map(|(&v, &seen)| if seen { v } else { v + bias }),
        );
        masked_argmax(biased.view(), mask).expect("mask checked non-empty")
    });
    Ok(accuracies(scores, predictions))
}

/// Area under the seen-vs-unseen accuracy curve, unseen accuracy on the x axis.
///
/// The curve is reduced to the best seen accuracy per distinct unseen
/// accuracy, extended flat to `unseen = 0` and closed down to `seen = 0` at the
/// largest unseen accuracy, then integrated with the trapezoid rule.
pub fn auc(curve: &[CurvePoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.unseen_acc, p.seen_acc)).collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|later, earlier| later.0 == earlier.0);

    let mut area = pts[0].0 * pts[0].1;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    area
}

pub fn evaluate(scores: &ScoreMatrix, mask: Option<&[bool]>) -> Result<EvalReport> {
    evaluate_with(scores, mask, PrimitiveBias::BestHm)
}

pub fn evaluate_with(
    scores: &ScoreMatrix,
    mask: Option<&[bool]>,
    primitive_bias: PrimitiveBias,
) -> Result<EvalReport> {
    let candidates = bias_candidates_masked(scores, mask)?;
    let bests = row_bests(scores, mask);

    let curve: Vec<CurvePoint> = candidates
        .iter()
        .map(|&bias| {
            let acc = accuracies(scores, bests.iter().map(|b| b.predict(bias)));
            CurvePoint {
                bias,
                seen_acc: acc.seen,
                unseen_acc: acc.unseen,
            }
        })
        .collect();

    let best_seen = curve.iter().map(|p| p.seen_acc).fold(0.0, f64::max);
    let best_unseen = curve.iter().map(|p| p.unseen_acc).fold(0.0, f64::max);
    let mut best_hm = -1.0;
    let mut hm_bias = 0.0;
    for p in &curve {
        let hm = harmonic_mean(p.seen_acc, p.unseen_acc);
        if hm > best_hm {
            best_hm = hm;
            hm_bias = p.bias;
        }
    }

    let prim_bias = match primitive_bias {
        PrimitiveBias::BestHm => hm_bias,
        PrimitiveBias::Zero => 0.0,
    };
    let n = scores.n_samples().max(1) as f64;
    let (mut state_hits, mut obj_hits) = (0usize, 0usize);
    for (b, &label) in bests.iter().zip(&scores.labels) {
        let pred = scores.pairs[b.predict(prim_bias)];
        let truth = scores.pairs[label];
        state_hits += usize::from(pred.state == truth.state);
        obj_hits += usize::from(pred.object == truth.object);
    }
    let (n_seen_samples, n_unseen_samples) = group_sizes(scores);

    Ok(EvalReport {
        best_seen,
        best_unseen,
        best_hm,
        auc: auc(&curve),
        hm_bias,
        state_acc: state_hits as f64 / n,
        obj_acc: obj_hits as f64 / n,
        n_seen_samples,
        n_unseen_samples,
        curve,
    })
}

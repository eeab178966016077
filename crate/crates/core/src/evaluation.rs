//! Deletion/insertion curves, reliance statistics and heatmap comparison.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::blend;
use crate::model::ModelAdapter;
use crate::relevance::{joint_probability_score, prediction_score};
use crate::types::{trapezoid, BaselineImage, CurveDirection, EvaluationCurve, Mask, ScorableSample};

pub const DEFAULT_NUM_POINTS: usize = 20;
pub const DEFAULT_MIN_DROP: f64 = 70.0;
pub const DEFAULT_THRESHOLDS: (f64, f64) = (30.0, 70.0);

/// `(raw − f_baseline) / (f_original − f_baseline)`, unclipped.
pub fn normalize_score(raw: f64, f_original: f64, f_baseline: f64) -> Result<f64> {
    if f_original == f_baseline {
        return Err(Error::NormalizationDegenerate(f_original));
    }
    Ok((raw - f_baseline) / (f_original - f_baseline))
}

/// Pixel indices (row-major) by descending heatmap value; ties keep
/// row-major order.
pub fn pixel_ranking(heatmap: &Mask) -> Vec<usize> {
    let flat: Vec<f64> = heatmap.values().iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    order
}

/// Pixels perturbed at curve point `k`: `round(k·N / (points − 1))`, halves up.
pub fn pixels_at(k: usize, total: usize, num_points: usize) -> usize {
    let steps = num_points - 1;
    (2 * k * total + steps) / (2 * steps)
}

/// Deletion or insertion curve of `heatmap` on the selected-token score.
pub fn perturbation_curve(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
    heatmap: &Mask,
    selected_indices: &[usize],
    direction: CurveDirection,
    num_points: usize,
) -> Result<EvaluationCurve> {
    let (h, w, _) = sample.image.shape();
    if heatmap.shape() != (h, w) {
        return Err(Error::shape((h, w), heatmap.shape()));
    }
    if baseline.shape() != sample.image.shape() {
        return Err(Error::shape(sample.image.shape(), baseline.shape()));
    }
    if num_points < 2 {
        return Err(Error::InvalidConfig("num_points must be at least 2".into()));
    }
    let score = |img: &crate::types::Image| {
        prediction_score(
            adapter,
            img,
            &sample.question,
            &sample.answer_tokens,
            selected_indices,
        )
    };
    let f_original = score(&sample.image)?;
    let f_baseline = score(&baseline.image)?;
    if f_original == f_baseline {
        return Err(Error::NormalizationDegenerate(f_original));
    }

    let ranking = pixel_ranking(heatmap);
    let total = h * w;
    // keep-mask: 1 shows the original pixel, 0 the baseline pixel
    let (untouched, touched) = match direction {
        CurveDirection::Deletion => (1.0, 0.0),
        CurveDirection::Insertion => (0.0, 1.0),
    };
    let mut keep = Array2::from_elem((h, w), untouched);
    let mut done = 0;
    let mut points = Vec::with_capacity(num_points);
    let mut raw_scores = Vec::with_capacity(num_points);
    for k in 0..num_points {
        let target = pixels_at(k, total, num_points);
        for &p in &ranking[done..target] {
            keep[[p / w, p % w]] = touched;
        }
        done = target;
        let image = blend(&sample.image, &baseline.image, &Mask::new(keep.clone())?)?;
        let raw = score(&image)?;
        raw_scores.push(raw);
        let fraction = k as f64 / (num_points - 1) as f64;
        points.push((fraction, normalize_score(raw, f_original, f_baseline)?));
    }
    let auc = trapezoid(&points);
    Ok(EvaluationCurve {
        direction,
        points,
        raw_scores,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDrop {
    pub sample_id: String,
    /// `(1 − P(a|Ĩ,Q) / P(a|I,Q)) · 100`.
    pub drop_pct: f64,
    /// Selected-token scores coincide on the original and baseline image.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelianceStats {
    pub label: String,
    pub thresholds: (f64, f64),
    pub samples: Vec<SampleDrop>,
    /// Counts for `drop < low`, `low ≤ drop ≤ high`, `drop > high`.
    pub buckets: [usize; 3],
}

impl RelianceStats {
    pub fn new(label: impl Into<String>, thresholds: (f64, f64)) -> Self {
        Self {
            label: label.into(),
            thresholds,
            samples: Vec::new(),
            buckets: [0; 3],
        }
    }

    pub fn bucket_of(&self, drop_pct: f64) -> usize {
        let (low, high) = self.thresholds;
        if drop_pct < low {
            0
        } else if drop_pct <= high {
            1
        } else {
            2
        }
    }

    pub fn push(&mut self, sample: SampleDrop) {
        self.buckets[self.bucket_of(sample.drop_pct)] += 1;
        self.samples.push(sample);
    }

    /// Combines two partial results over disjoint samples.
    pub fn merge(mut self, other: RelianceStats) -> Self {
        for s in other.samples {
            self.push(s);
        }
        self
    }

    /// Bucket shares in percent.
    pub fn percentages(&self) -> [f64; 3] {
        let n = self.samples.len().max(1) as f64;
        self.buckets.map(|c| c as f64 * 100.0 / n)
    }

    /// `"<30% / 30–70%"` cell, one decimal each.
    pub fn table_cell(&self) -> String {
        let [low, mid, _] = self.percentages();
        format!("{low:.1} / {mid:.1}")
    }

    pub fn drops(&self) -> BTreeMap<&str, &SampleDrop> {
        self.samples.iter().map(|s| (s.sample_id.as_str(), s)).collect()
    }
}

/// Percentage drop of the whole-answer probability when the image is replaced
/// by the baseline.
pub fn probability_drop(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
) -> Result<f64> {
    let original = joint_probability_score(adapter, &sample.image, &sample.question, &sample.answer_tokens)?;
    let blurred = joint_probability_score(adapter, &baseline.image, &sample.question, &sample.answer_tokens)?;
    Ok((1.0 - (blurred - original).exp()) * 100.0)
}

/// Reliance buckets over `(sample_id, sample, baseline)` triples.
pub fn reliance_stats<'a>(
    adapter: &dyn ModelAdapter,
    label: &str,
    samples: impl IntoIterator<Item = (&'a str, &'a ScorableSample, &'a BaselineImage)>,
    thresholds: (f64, f64),
) -> Result<RelianceStats> {
    let mut stats = RelianceStats::new(label, thresholds);
    for (id, sample, baseline) in samples {
        stats.push(SampleDrop {
            sample_id: id.to_string(),
            drop_pct: probability_drop(adapter, sample, baseline)?,
            degenerate: false,
        });
    }
    if stats.samples.is_empty() {
        return Err(Error::InvalidConfig("reliance needs at least one sample".into()));
    }
    Ok(stats)
}

/// Samples on which every model's drop reaches `min_drop` and no model is
/// degenerate.
pub fn filter_vision_dependent(stats: &[RelianceStats], min_drop: f64) -> Result<BTreeSet<String>> {
    let Some(first) = stats.first() else {
        return Err(Error::MismatchedSampleSets("no models given".into()));
    };
    let ids: BTreeSet<&str> = first.samples.iter().map(|s| s.sample_id.as_str()).collect();
    let tables: Vec<_> = stats.iter().map(RelianceStats::drops).collect();
    for (s, table) in stats.iter().zip(&tables) {
        let other: BTreeSet<&str> = table.keys().copied().collect();
        if other != ids {
            return Err(Error::MismatchedSampleSets(format!(
                "'{}' and '{}' cover different samples",
                first.label, s.label
            )));
        }
    }
    Ok(ids
        .into_iter()
        .filter(|id| {
            tables
                .iter()
                .all(|t| !t[id].degenerate && t[id].drop_pct >= min_drop)
        })
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonScores {
    pub soft_iou: f64,
    pub rank_correlation: f64,
}

/// Soft IOU and Spearman rank correlation of two heatmaps.
///
/// Two all-zero maps have soft IOU 1. When either map is constant the rank
/// correlation is undefined; it is reported as 1 for identical maps, else 0.
pub fn compare_heatmaps(a: &Mask, b: &Mask) -> Result<ComparisonScores> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (num, den) = a
        .values()
        .iter()
        .zip(b.values())
        .fold((0.0, 0.0), |(n, d), (x, y)| (n + x.min(*y), d + x.max(*y)));
    let soft_iou = if den == 0.0 { 1.0 } else { num / den };

    let ra = average_ranks(&a.values().iter().copied().collect::<Vec<_>>());
    let rb = average_ranks(&b.values().iter().copied().collect::<Vec<_>>());
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    let rank_correlation = if va == 0.0 || vb == 0.0 {
        if a == b { 1.0 } else { 0.0 }
    } else {
        (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(ComparisonScores {
        soft_iou,
        rank_correlation,
    })
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

//! Visually relevant token selection.
//!
//! Each answer token is scored under the original and the baseline image; the
//! per-token log-likelihood ratio decides which tokens define the prediction
//! score that the mask optimizer explains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_selection, conditional_logprobs, ModelAdapter};
use crate::types::{BaselineImage, Image, ScorableSample, TokenRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RelevanceDocument", try_from = "RelevanceDocument")]
pub struct RelevanceReport {
    pub records: Vec<TokenRecord>,
    pub sentence_llr: f64,
    pub selected_indices: Vec<usize>,
    /// Score of the selected tokens at the original image (zero before selection).
    pub score_original: f64,
    /// Score of the selected tokens at the baseline image (zero before selection).
    pub score_baseline: f64,
    /// True when no token cleared the threshold and the max-LLR token was taken.
    pub fallback: bool,
}

/// Parallel-array JSON form of a [`RelevanceReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceDocument {
    pub token_ids: Vec<u32>,
    pub logp_original: Vec<f64>,
    pub logp_baseline: Vec<f64>,
    pub llr: Vec<f64>,
    pub selected: Vec<bool>,
    pub sentence_llr: f64,
    pub selected_indices: Vec<usize>,
    pub score_original: f64,
    pub score_baseline: f64,
    pub fallback: bool,
}

impl From<RelevanceReport> for RelevanceDocument {
    fn from(r: RelevanceReport) -> Self {
        Self {
            token_ids: r.records.iter().map(|x| x.token_id).collect(),
            logp_original: r.records.iter().map(|x| x.logp_original).collect(),
            logp_baseline: r.records.iter().map(|x| x.logp_baseline).collect(),
            llr: r.records.iter().map(|x| x.llr).collect(),
            selected: r.records.iter().map(|x| x.selected).collect(),
            sentence_llr: r.sentence_llr,
            selected_indices: r.selected_indices,
            score_original: r.score_original,
            score_baseline: r.score_baseline,
            fallback: r.fallback,
        }
    }
}

impl TryFrom<RelevanceDocument> for RelevanceReport {
    type Error = Error;

    fn try_from(d: RelevanceDocument) -> Result<Self> {
        let n = d.token_ids.len();
        if [d.logp_original.len(), d.logp_baseline.len(), d.llr.len(), d.selected.len()]
            .iter()
            .any(|&len| len != n)
        {
            return Err(Error::InvariantViolation("record alignment".into()));
        }
        let records = (0..n)
            .map(|i| TokenRecord {
                index: i,
                token_id: d.token_ids[i],
                logp_original: d.logp_original[i],
                logp_baseline: d.logp_baseline[i],
                llr: d.llr[i],
                selected: d.selected[i],
            })
            .collect();
        Ok(Self {
            records,
            sentence_llr: d.sentence_llr,
            selected_indices: d.selected_indices,
            score_original: d.score_original,
            score_baseline: d.score_baseline,
            fallback: d.fallback,
        })
    }
}

impl RelevanceReport {
    pub fn answer(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.token_id).collect()
    }
}

/// Scores every answer token under both images and records the LLRs.
///
/// Selection is not applied: every record comes back with `selected == false`.
pub fn compute_llr(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
) -> Result<RelevanceReport> {
    if baseline.shape() != sample.image.shape() {
        return Err(Error::shape(sample.image.shape(), baseline.shape()));
    }
    let answer = &sample.answer_tokens;
    let original = conditional_logprobs(adapter, &sample.image, &sample.question, answer)?;
    let blurred = conditional_logprobs(adapter, &baseline.image, &sample.question, answer)?;
    let records: Vec<TokenRecord> = answer
        .iter()
        .zip(original.iter().zip(&blurred))
        .enumerate()
        .map(|(i, (&tok, (&lo, &lb)))| TokenRecord::new(i, tok, lo, lb))
        .collect();
    let sentence_llr = records.iter().map(|r| r.llr).sum();
    Ok(RelevanceReport {
        records,
        sentence_llr,
        selected_indices: Vec::new(),
        score_original: 0.0,
        score_baseline: 0.0,
        fallback: false,
    })
}

/// Keeps the non-first tokens whose LLR exceeds `alpha_llr`.
///
/// When none qualifies, the non-first token with the largest LLR is taken
/// (first maximum on ties) and `fallback` is set. Single-token answers have no
/// eligible token and yield [`Error::DegenerateAnswer`].
pub fn select_crucial_tokens(report: &RelevanceReport, alpha_llr: f64) -> Result<RelevanceReport> {
    if report.records.is_empty() {
        return Err(Error::InvariantViolation("empty answer".into()));
    }
    if report.records.len() == 1 {
        return Err(Error::DegenerateAnswer);
    }
    let mut selected: Vec<usize> = report
        .records
        .iter()
        .filter(|r| r.index != 0 && r.llr > alpha_llr)
        .map(|r| r.index)
        .collect();
    let fallback = selected.is_empty();
    if fallback {
        let best = report.records[1..]
            .iter()
            .fold(None::<&TokenRecord>, |best, r| match best {
                Some(b) if b.llr >= r.llr => Some(b),
                _ => Some(r),
            })
            .map(|r| r.index)
            .expect("at least two records");
        selected.push(best);
    }
    let mut out = report.clone();
    for r in &mut out.records {
        r.selected = selected.contains(&r.index);
    }
    out.selected_indices = selected;
    out.fallback = fallback;
    Ok(out)
}

/// Fills `score_original` and `score_baseline` for the current selection.
pub fn attach_scores(
    adapter: &dyn ModelAdapter,
    report: &RelevanceReport,
    sample: &ScorableSample,
    baseline: &BaselineImage,
) -> Result<RelevanceReport> {
    let answer = report.answer();
    let mut out = report.clone();
    out.score_original = prediction_score(
        adapter,
        &sample.image,
        &sample.question,
        &answer,
        &report.selected_indices,
    )?;
    out.score_baseline = prediction_score(
        adapter,
        &baseline.image,
        &sample.question,
        &answer,
        &report.selected_indices,
    )?;
    Ok(out)
}

/// Cumulative log-likelihood (nats) of the selected tokens.
pub fn prediction_score(
    adapter: &dyn ModelAdapter,
    image: &Image,
    question: &str,
    answer: &[u32],
    selected_indices: &[usize],
) -> Result<f64> {
    check_selection(selected_indices, answer.len())?;
    let logps = conditional_logprobs(adapter, image, question, answer)?;
    Ok(selected_indices.iter().map(|&k| logps[k]).sum())
}

/// Whole-answer log-probability: the joint-probability alternative to
/// [`prediction_score`].
pub fn joint_probability_score(
    adapter: &dyn ModelAdapter,
    image: &Image,
    question: &str,
    answer: &[u32],
) -> Result<f64> {
    Ok(conditional_logprobs(adapter, image, question, answer)?
        .iter()
        .sum())
}

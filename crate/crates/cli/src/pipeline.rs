//! Per-sample work shared by the subcommands. Nothing here touches the
//! output directory; callers persist the returned values.

use std::collections::BTreeMap;

use openlens_core::relevance::attach_scores;
use openlens_core::{
    compute_llr, generate, make_baseline, optimize, perturbation_curve, probability_drop,
    select_crucial_tokens, upsample_mask, validate_sample, BaselineImage, CurveDirection,
    EvaluationCurve, Mask, ModelAdapter, OptimizationConfig, OptimizationTrace, RelevanceReport,
    ScorableSample,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{encode_heatmap, load_image, render_overlay};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{DatasetManifest, ManifestEntry};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Files written for every explained sample, in index order.
pub const EXPLAIN_FILES: [&str; 5] = [
    "heatmap.raw",
    "heatmap.png",
    "relevance.json",
    "trace.jsonl",
    "report.json",
];

/// A loaded sample with its baseline and token selection.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: ScorableSample,
    pub baseline: BaselineImage,
    pub report: RelevanceReport,
    pub answer_generated: bool,
    /// The answer had a single token, so token 0 was scored in place of an
    /// empty selection.
    pub single_token_override: bool,
}

pub fn prepare(
    adapter: &dyn ModelAdapter,
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    run: &RunConfig,
) -> Result<Prepared> {
    let channels = adapter.capabilities().expected_image_shape.2;
    let image = load_image(&manifest.image_path(entry), channels)?;
    let (tokens, answer_generated) = match &entry.answer {
        Some(text) => (adapter.tokenize(text)?, false),
        None => (
            generate(adapter, &image, &entry.question, run.max_tokens)?,
            true,
        ),
    };
    let sample = validate_sample(ScorableSample::new(image, entry.question.clone(), tokens))?;
    let baseline = make_baseline(
        &sample.image,
        run.baseline,
        run.blur_sigma,
        run.optimization.seed,
    )?;
    let scored = compute_llr(adapter, &sample, &baseline)?;
    let (selected, single_token_override) =
        match select_crucial_tokens(&scored, run.optimization.alpha_llr) {
            Ok(r) => (r, false),
            Err(openlens_core::Error::DegenerateAnswer) => {
                eprintln!(
                    "[openlens] {}: single-token answer, scoring token 0",
                    entry.sample_id
                );
                let mut r = scored.clone();
                r.records[0].selected = true;
                r.selected_indices = vec![0];
                (r, true)
            }
            Err(e) => return Err(e.into()),
        };
    let report = attach_scores(adapter, &selected, &sample, &baseline)?;
    Ok(Prepared {
        sample,
        baseline,
        report,
        answer_generated,
        single_token_override,
    })
}

/// Caps the optimization grid at the image size.
pub fn effective_config(config: &OptimizationConfig, image_hw: (usize, usize)) -> OptimizationConfig {
    let mut c = config.clone();
    c.mask_resolution = (
        c.mask_resolution.0.min(image_hw.0),
        c.mask_resolution.1.min(image_hw.1),
    );
    c
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineInfo {
    pub kind: String,
    pub blur_sigma: Option<f64>,
    pub seed: Option<u64>,
}

/// Contents of `report.json`. Holds no timing so reruns are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainReport {
    pub schema_version: u32,
    pub sample_id: String,
    pub dataset_tag: String,
    pub question: String,
    pub adapter: String,
    pub image_shape: (usize, usize, usize),
    pub answer_tokens: Vec<u32>,
    pub answer_generated: bool,
    pub selected_indices: Vec<usize>,
    pub selection_fallback: bool,
    pub single_token_override: bool,
    pub score_original: f64,
    pub score_baseline: f64,
    pub baseline: BaselineInfo,
    pub config: OptimizationConfig,
    pub steps_run: usize,
    pub final_objective: f64,
    pub converged: bool,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Explained {
    pub prepared: Prepared,
    pub trace: OptimizationTrace,
    /// `1 − M` upsampled to image resolution.
    pub heatmap: Mask,
    pub config: OptimizationConfig,
}

pub fn explain(
    adapter: &dyn ModelAdapter,
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    run: &RunConfig,
) -> Result<Explained> {
    let prepared = prepare(adapter, manifest, entry, run)?;
    let (h, w, _) = prepared.sample.image.shape();
    let config = effective_config(&run.optimization, (h, w));
    let trace = optimize(
        adapter,
        &prepared.sample,
        &prepared.baseline,
        &prepared.report.selected_indices,
        &config,
    )?;
    let heatmap = upsample_mask(&trace.heatmap(), (h, w))?;
    Ok(Explained {
        prepared,
        trace,
        heatmap,
        config,
    })
}

impl Explained {
    pub fn report(&self, entry: &ManifestEntry, adapter_name: &str) -> ExplainReport {
        let p = &self.prepared;
        let last = self.trace.steps.last();
        ExplainReport {
            schema_version: REPORT_SCHEMA_VERSION,
            sample_id: entry.sample_id.clone(),
            dataset_tag: entry.dataset_tag.clone(),
            question: entry.question.clone(),
            adapter: adapter_name.to_string(),
            image_shape: p.sample.image.shape(),
            answer_tokens: p.sample.answer_tokens.clone(),
            answer_generated: p.answer_generated,
            selected_indices: p.report.selected_indices.clone(),
            selection_fallback: p.report.fallback,
            single_token_override: p.single_token_override,
            score_original: p.report.score_original,
            score_baseline: p.report.score_baseline,
            baseline: BaselineInfo {
                kind: p.baseline.kind.to_string(),
                blur_sigma: p.baseline.blur_sigma,
                seed: p.baseline.seed,
            },
            config: self.config.clone(),
            steps_run: self.trace.steps.len(),
            final_objective: last.map_or(f64::NAN, |s| s.total),
            converged: self.trace.converged,
            artifacts: EXPLAIN_FILES
                .iter()
                .map(|f| (f.replace('.', "_"), f.to_string()))
                .collect(),
        }
    }

    /// The five artifact files, in [`EXPLAIN_FILES`] order.
    pub fn files(&self, entry: &ManifestEntry, adapter_name: &str) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let report = self.report(entry, adapter_name);
        Ok(vec![
            (EXPLAIN_FILES[0], encode_heatmap(&self.heatmap)),
            (
                EXPLAIN_FILES[1],
                render_overlay(&self.prepared.sample.image, &self.heatmap)?,
            ),
            (
                EXPLAIN_FILES[2],
                serde_json::to_vec_pretty(&self.prepared.report)?,
            ),
            (EXPLAIN_FILES[3], self.trace.to_jsonl().into_bytes()),
            (EXPLAIN_FILES[4], serde_json::to_vec_pretty(&report)?),
        ])
    }
}

/// Contents of `evaluation/<id>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub sample_id: String,
    pub dataset_tag: String,
    pub selected_indices: Vec<usize>,
    pub score_original: f64,
    pub score_baseline: f64,
    pub deletion: EvaluationCurve,
    pub insertion: EvaluationCurve,
}

/// Deletion and insertion curves of `heatmap`, upsampled to the image if it
/// is smaller.
pub fn evaluate(
    adapter: &dyn ModelAdapter,
    prepared: &Prepared,
    entry: &ManifestEntry,
    heatmap: &Mask,
    num_points: usize,
) -> Result<EvaluationRecord> {
    let (h, w, _) = prepared.sample.image.shape();
    let heatmap = if heatmap.shape() == (h, w) {
        heatmap.clone()
    } else {
        upsample_mask(heatmap, (h, w))?
    };
    let curve = |direction| {
        perturbation_curve(
            adapter,
            &prepared.sample,
            &prepared.baseline,
            &heatmap,
            &prepared.report.selected_indices,
            direction,
            num_points,
        )
    };
    Ok(EvaluationRecord {
        sample_id: entry.sample_id.clone(),
        dataset_tag: entry.dataset_tag.clone(),
        selected_indices: prepared.report.selected_indices.clone(),
        score_original: prepared.report.score_original,
        score_baseline: prepared.report.score_baseline,
        deletion: curve(CurveDirection::Deletion)?,
        insertion: curve(CurveDirection::Insertion)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelianceRow {
    pub drop_pct: f64,
    /// Selected-token scores coincide on the original and baseline image.
    pub degenerate: bool,
}

pub fn reliance(
    adapter: &dyn ModelAdapter,
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    run: &RunConfig,
) -> Result<RelianceRow> {
    let prepared = prepare(adapter, manifest, entry, run)?;
    let drop_pct = probability_drop(adapter, &prepared.sample, &prepared.baseline)?;
    Ok(RelianceRow {
        drop_pct,
        degenerate: prepared.report.score_original == prepared.report.score_baseline,
    })
}

/// Refuses optimization against adapters that cannot differentiate.
pub fn require_gradients(adapter: &dyn ModelAdapter, name: &str) -> Result<()> {
    if adapter.capabilities().supports_gradients {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "adapter '{name}' does not support gradients; explain and sweep need them"
        )))
    }
}

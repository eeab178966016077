//! Python module `openlens`: images are nested `[row][col][channel]` lists
//! with values in `[0, 1]`, masks and heatmaps are `[row][col]` lists.

use ndarray::{Array1, Array2, Array3};
use openlens_core::{
    self as core, BaselineImage, BaselineKind, CurveDirection, Image, Mask, OptimizationConfig,
    OptimizationMode, ScorableSample, ToyModel, Window,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Grid = Vec<Vec<f64>>;
type Pixels = Vec<Vec<Vec<f64>>>;

fn core_err(e: core::Error) -> PyErr {
    match e {
        core::Error::ShapeMismatch { .. }
        | core::Error::InvalidConfig(_)
        | core::Error::InvariantViolation(_)
        | core::Error::UnknownKind(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_image(pixels: Pixels) -> PyResult<Image> {
    let h = pixels.len();
    let w = pixels.first().map_or(0, Vec::len);
    let c = pixels.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if pixels.iter().any(|row| row.len() != w || row.iter().any(|px| px.len() != c)) {
        return Err(PyValueError::new_err("image must be a rectangular [row][col][channel] list"));
    }
    let flat: Vec<f64> = pixels.into_iter().flatten().flatten().collect();
    let array = Array3::from_shape_vec((h, w, c), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Image::new(array).map_err(core_err)
}

fn from_image(image: &Image) -> Pixels {
    image
        .pixels()
        .outer_iter()
        .map(|row| row.outer_iter().map(|px| px.to_vec()).collect())
        .collect()
}

fn to_grid(values: Grid) -> PyResult<Array2<f64>> {
    let h = values.len();
    let w = values.first().map_or(0, Vec::len);
    let flat: Vec<f64> = values.into_iter().flatten().collect();
    Array2::from_shape_vec((h, w), flat)
        .map_err(|_| PyValueError::new_err("mask rows must have equal length"))
}

fn from_grid(values: &Array2<f64>) -> Grid {
    values.outer_iter().map(|r| r.to_vec()).collect()
}

fn to_mask(values: Grid) -> PyResult<Mask> {
    Mask::new(to_grid(values)?).map_err(core_err)
}

/// Toy vision-language model: windowed image features, emission and
/// transition logits, greedy decoding.
#[pyclass(name = "ToyModel", frozen)]
struct PyToyModel {
    inner: ToyModel,
}

#[pymethods]
impl PyToyModel {
    /// `windows` are `(top, left, height, width)`; `emission` is
    /// `vocab × windows`, `transition` is `(vocab + 1) × vocab`.
    #[new]
    #[pyo3(signature = (image_shape, windows, emission, transition=None, bias=None))]
    fn new(
        image_shape: (usize, usize, usize),
        windows: Vec<(usize, usize, usize, usize)>,
        emission: Grid,
        transition: Option<Grid>,
        bias: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let windows = windows.into_iter().map(|(t, l, h, w)| Window::new(t, l, h, w)).collect();
        let mut inner = ToyModel::new(image_shape, windows, to_grid(emission)?).map_err(core_err)?;
        if let Some(t) = transition {
            inner = inner.with_transition(to_grid(t)?).map_err(core_err)?;
        }
        if let Some(b) = bias {
            inner = inner.with_bias(Array1::from(b)).map_err(core_err)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ToyModel =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(core_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn tokenize(&self, text: &str) -> PyResult<Vec<u32>> {
        core::ModelAdapter::tokenize(&self.inner, text).map_err(core_err)
    }

    #[pyo3(signature = (image, question, max_tokens=4))]
    fn generate(&self, image: Pixels, question: &str, max_tokens: usize) -> PyResult<Vec<u32>> {
        core::generate(&self.inner, &to_image(image)?, question, max_tokens).map_err(core_err)
    }

    /// Natural-log probability of each answer token given its prefix.
    fn token_logprobs(&self, image: Pixels, question: &str, answer: Vec<u32>) -> PyResult<Vec<f64>> {
        core::conditional_logprobs(&self.inner, &to_image(image)?, question, &answer).map_err(core_err)
    }
}

/// Reference image that masked-out pixels are replaced with.
#[pyclass(name = "Baseline", frozen)]
struct PyBaseline {
    inner: BaselineImage,
}

#[pymethods]
impl PyBaseline {
    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    fn pixels(&self) -> Pixels {
        from_image(&self.inner.image)
    }
}

/// Blurred, blank or noise baseline of `image`.
#[pyfunction]
#[pyo3(signature = (image, kind="blurred", blur_sigma=10.0, seed=0))]
fn make_baseline(image: Pixels, kind: &str, blur_sigma: f64, seed: u64) -> PyResult<PyBaseline> {
    let kind: BaselineKind = kind.parse().map_err(core_err)?;
    let inner = core::make_baseline(&to_image(image)?, kind, blur_sigma, seed).map_err(core_err)?;
    Ok(PyBaseline { inner })
}

/// `image * mask + baseline * (1 - mask)`, the mask upsampled to the image.
#[pyfunction]
fn apply_mask(image: Pixels, baseline: &PyBaseline, mask: Grid) -> PyResult<Pixels> {
    let blended = core::apply_mask(&to_image(image)?, &baseline.inner, &to_mask(mask)?).map_err(core_err)?;
    Ok(from_image(&blended))
}

/// Per-token log-likelihood ratios and the tokens whose ratio exceeds `alpha`.
#[pyfunction]
#[pyo3(signature = (model, image, question, answer, baseline, alpha=1.0))]
fn relevance<'py>(
    py: Python<'py>,
    model: &PyToyModel,
    image: Pixels,
    question: &str,
    answer: Vec<u32>,
    baseline: &PyBaseline,
    alpha: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let sample = ScorableSample::new(to_image(image)?, question, answer);
    let report = core::compute_llr(&model.inner, &sample, &baseline.inner).map_err(core_err)?;
    let report = core::select_crucial_tokens(&report, alpha).map_err(core_err)?;
    let out = PyDict::new(py);
    out.set_item("llr", report.records.iter().map(|r| r.llr).collect::<Vec<_>>())?;
    out.set_item("sentence_llr", report.sentence_llr)?;
    out.set_item("selected", report.selected_indices)?;
    out.set_item("fallback", report.fallback)?;
    Ok(out)
}

/// Optimizes a keep-mask and returns the heatmap `1 - M` at mask resolution
/// with the per-step objective totals.
#[pyfunction]
#[pyo3(signature = (
    model, image, question, answer, baseline, selected,
    steps=30, mask_resolution=(28, 28), mode="single", lambda1=1.0, lambda2=0.1, lambda3=10.0,
    gamma=0.2, step_size=1.0, sigma_btv=0.1,
))]
#[allow(clippy::too_many_arguments)]
fn explain<'py>(
    py: Python<'py>,
    model: &PyToyModel,
    image: Pixels,
    question: &str,
    answer: Vec<u32>,
    baseline: &PyBaseline,
    selected: Vec<usize>,
    steps: usize,
    mask_resolution: (usize, usize),
    mode: &str,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    gamma: f64,
    step_size: f64,
    sigma_btv: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: OptimizationMode = mode.parse().map_err(core_err)?;
    let config = OptimizationConfig {
        lambda1,
        lambda2,
        lambda3,
        gamma,
        steps,
        step_size,
        mask_resolution,
        mode,
        sigma_btv,
        ..OptimizationConfig::default()
    };
    let sample = ScorableSample::new(to_image(image)?, question, answer);
    let trace = core::optimize(&model.inner, &sample, &baseline.inner, &selected, &config).map_err(core_err)?;
    let heatmap = trace.final_mask.values().mapv(|m| 1.0 - m);
    let out = PyDict::new(py);
    out.set_item("heatmap", from_grid(&heatmap))?;
    out.set_item("objective", trace.steps.iter().map(|b| b.total).collect::<Vec<_>>())?;
    Ok(out)
}

/// Deletion or insertion curve of `heatmap` as `(points, auc)`.
#[pyfunction]
#[pyo3(signature = (model, image, question, answer, baseline, heatmap, selected, direction="deletion", num_points=20))]
#[allow(clippy::too_many_arguments)]
fn perturbation_curve(
    model: &PyToyModel,
    image: Pixels,
    question: &str,
    answer: Vec<u32>,
    baseline: &PyBaseline,
    heatmap: Grid,
    selected: Vec<usize>,
    direction: &str,
    num_points: usize,
) -> PyResult<(Vec<(f64, f64)>, f64)> {
    let direction = match direction {
        "deletion" => CurveDirection::Deletion,
        "insertion" => CurveDirection::Insertion,
        other => return Err(PyValueError::new_err(format!("unknown direction '{other}'"))),
    };
    let sample = ScorableSample::new(to_image(image)?, question, answer);
    let curve = core::perturbation_curve(
        &model.inner,
        &sample,
        &baseline.inner,
        &to_mask(heatmap)?,
        &selected,
        direction,
        num_points,
    )
    .map_err(core_err)?;
    Ok((curve.points, curve.auc))
}

/// Bilinear upsampling of a mask or heatmap to `(height, width)`.
#[pyfunction]
fn upsample(values: Grid, height: usize, width: usize) -> PyResult<Grid> {
    let up = core::upsample_mask(&to_mask(values)?, (height, width)).map_err(core_err)?;
    Ok(from_grid(&up.into_values()))
}

/// `(soft_iou, rank_correlation)` of two equally shaped heatmaps.
#[pyfunction]
fn compare_heatmaps(a: Grid, b: Grid) -> PyResult<(f64, f64)> {
    let s = core::compare_heatmaps(&to_mask(a)?, &to_mask(b)?).map_err(core_err)?;
    Ok((s.soft_iou, s.rank_correlation))
}

#[pyfunction]
fn normalize_score(raw: f64, f_original: f64, f_baseline: f64) -> PyResult<f64> {
    core::normalize_score(raw, f_original, f_baseline).map_err(core_err)
}

#[pymodule]
fn openlens(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyToyModel>()?;
    m.add_class::<PyBaseline>()?;
    m.add_function(wrap_pyfunction!(make_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(apply_mask, m)?)?;
    m.add_function(wrap_pyfunction!(relevance, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(perturbation_curve, m)?)?;
    m.add_function(wrap_pyfunction!(upsample, m)?)?;
    m.add_function(wrap_pyfunction!(compare_heatmaps, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_score, m)?)?;
    Ok(())
}

//! Shared data model: images, masks, token records and run configuration.
//!
//! Everything here is immutable after construction; constructors validate the
//! invariants so downstream code can rely on them.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `H×W×C` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawImage", into = "RawImage")]
pub struct Image {
    pixels: Array3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawImage {
    pixels: Array3<f64>,
}

impl TryFrom<RawImage> for Image {
    type Error = Error;

    fn try_from(raw: RawImage) -> Result<Self> {
        Image::new(raw.pixels)
    }
}

impl From<Image> for RawImage {
    fn from(image: Image) -> Self {
        RawImage {
            pixels: image.pixels,
        }
    }
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvariantViolation(format!(
                "image dimensions must be positive, got {h}x{w}x{c}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvariantViolation("pixel range".into()));
        }
        Ok(Self { pixels })
    }

    /// Constant image filled with `value`.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    /// Builds an image from interleaved `u8` samples (row-major, channel last).
    pub fn from_u8(height: usize, width: usize, channels: usize, data: &[u8]) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        let pixels = Array3::from_shape_fn((height, width, channels), |(y, x, c)| {
            f64::from(data[(y * width + x) * channels + c]) / 255.0
        });
        Self::new(pixels)
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    /// Mean over channels, `H×W`.
    pub fn channel_mean(&self) -> Array2<f64> {
        let c = self.channels() as f64;
        self.pixels.sum_axis(ndarray::Axis(2)) / c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Blurred,
    Blank,
    Noise,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Blurred => "blurred",
            BaselineKind::Blank => "blank",
            BaselineKind::Noise => "noise",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blurred" | "blur" => Ok(BaselineKind::Blurred),
            "blank" | "zero" => Ok(BaselineKind::Blank),
            "noise" => Ok(BaselineKind::Noise),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Visually uninformative counterpart of an [`Image`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineImage {
    pub image: Image,
    pub kind: BaselineKind,
    /// Seed the noise pixels were drawn from; `None` for the other kinds.
    pub seed: Option<u64>,
    /// Blur standard deviation in pixels; `None` for the other kinds.
    pub blur_sigma: Option<f64>,
}

impl BaselineImage {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.image.shape()
    }
}

/// Single-channel `H×W` mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMask", into = "RawMask")]
pub struct Mask {
    values: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMask {
    values: Array2<f64>,
}

impl TryFrom<RawMask> for Mask {
    type Error = Error;

    fn try_from(raw: RawMask) -> Result<Self> {
        Mask::new(raw.values)
    }
}

impl From<Mask> for RawMask {
    fn from(mask: Mask) -> Self {
        RawMask { values: mask.values }
    }
}

impl Mask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvariantViolation(format!(
                "mask dimensions must be positive, got {h}x{w}"
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvariantViolation("mask range".into()));
        }
        Ok(Self { values })
    }

    /// Clamps every value into `[0, 1]`; non-finite inputs are rejected.
    pub fn clipped(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("mask range".into()));
        }
        Self::new(values.mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            values: Array2::ones((height, width)),
        }
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `1 − M`.
    pub fn complement(&self) -> Mask {
        Mask {
            values: self.values.mapv(|v| 1.0 - v),
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// One answer token scored under the original and the baseline image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub index: usize,
    pub token_id: u32,
    /// Natural-log probability under the original image.
    pub logp_original: f64,
    /// Natural-log probability under the baseline image.
    pub logp_baseline: f64,
    pub llr: f64,
    pub selected: bool,
}

impl TokenRecord {
    pub fn new(index: usize, token_id: u32, logp_original: f64, logp_baseline: f64) -> Self {
        Self {
            index,
            token_id,
            logp_original,
            logp_baseline,
            llr: logp_original - logp_baseline,
            selected: false,
        }
    }
}

/// An (image, question, answer) triple: the unit of all pipeline work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorableSample {
    pub image: Image,
    pub question: String,
    pub answer_tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<TokenRecord>>,
}

impl ScorableSample {
    pub fn new(image: Image, question: impl Into<String>, answer_tokens: Vec<u32>) -> Self {
        Self {
            image,
            question: question.into(),
            answer_tokens,
            records: None,
        }
    }
}

/// Checks every data-model invariant and hands the sample back unchanged.
pub fn validate_sample(sample: ScorableSample) -> Result<ScorableSample> {
    let pixels = sample.image.pixels();
    if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::InvariantViolation("pixel range".into()));
    }
    if sample.answer_tokens.is_empty() {
        return Err(Error::InvariantViolation("empty answer".into()));
    }
    if let Some(records) = &sample.records {
        if records.len() != sample.answer_tokens.len() {
            return Err(Error::InvariantViolation("record alignment".into()));
        }
        for (i, (rec, tok)) in records.iter().zip(&sample.answer_tokens).enumerate() {
            if rec.index != i || rec.token_id != *tok {
                return Err(Error::InvariantViolation("record alignment".into()));
            }
            if !(rec.logp_original <= 0.0 && rec.logp_baseline <= 0.0) {
                return Err(Error::InvariantViolation("log-probability sign".into()));
            }
            if rec.llr != rec.logp_original - rec.logp_baseline {
                return Err(Error::InvariantViolation("llr consistency".into()));
            }
        }
    }
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizationMode {
    SingleMask,
    SeparateMasks,
}

impl FromStr for OptimizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_mask" => Ok(OptimizationMode::SingleMask),
            "separate" | "separate_masks" => Ok(OptimizationMode::SeparateMasks),
            other => Err(Error::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    /// Weight of the mean-normalized L1 term.
    pub lambda1: f64,
    /// Weight of the exponentially decayed L2 term (single-mask mode only).
    pub lambda2: f64,
    /// Weight of the bilateral total variation term.
    pub lambda3: f64,
    /// Decay rate of the L2 term per step.
    pub gamma: f64,
    /// Token-selection threshold in nats.
    pub alpha_llr: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Low-resolution optimization grid `(h, w)`.
    pub mask_resolution: (usize, usize),
    pub mode: OptimizationMode,
    pub seed: u64,
    /// Bandwidth of the bilateral weights, in normalized intensity.
    pub sigma_btv: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 10.0,
            gamma: 0.2,
            alpha_llr: 1.0,
            steps: 30,
            step_size: 1.0,
            mask_resolution: (28, 28),
            mode: OptimizationMode::SingleMask,
            seed: 0,
            sigma_btv: 0.1,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda3 >= 0.0) {
            return bad("lambda weights must be non-negative");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !self.alpha_llr.is_finite() {
            return bad("alpha_llr must be finite");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if self.mask_resolution.0 == 0 || self.mask_resolution.1 == 0 {
            return bad("mask_resolution must be positive");
        }
        if !(self.sigma_btv > 0.0) {
            return bad("sigma_btv must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveDirection {
    Deletion,
    Insertion,
}

/// Normalized deletion or insertion curve with its trapezoidal AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationCurve {
    pub direction: CurveDirection,
    /// `(fraction perturbed, normalized score)` pairs.
    pub points: Vec<(f64, f64)>,
    /// Unnormalized scores, index-aligned with `points`.
    pub raw_scores: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal integral over `(x, y)` pairs.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

//! Adapter contract for scorable vision-language models and a small
//! deterministic reference model.
//!
//! Adapters report gradients with respect to image pixels only; masking is
//! composed on top of them by the optimizer.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Image;

/// Capability descriptor, serialized as JSON next to adapter plugins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub vocabulary_size: usize,
    pub expected_image_shape: (usize, usize, usize),
    pub supports_gradients: bool,
    pub thread_safe: bool,
}

pub trait ModelAdapter: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Teacher-forced `log P(a_t | a_<t; image, question)` for every answer token.
    fn token_logprobs(&self, image: &Image, question: &str, answer: &[u32]) -> Result<Vec<f64>>;

    /// Gradient of `Σ_{k∈selected} log P(a_k | a_<k; image, question)` w.r.t. the pixels.
    fn selected_logprob_gradient(
        &self,
        _image: &Image,
        _question: &str,
        _answer: &[u32],
        _selected: &[usize],
    ) -> Result<Array3<f64>> {
        Err(Error::GradientUnsupported)
    }

    /// Greedy decoding; may stop early on an end token.
    fn greedy_decode(&self, image: &Image, question: &str, max_tokens: usize) -> Result<Vec<u32>>;

    /// Maps answer text onto token ids.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;
}

fn check_shape(adapter: &dyn ModelAdapter, image: &Image) -> Result<()> {
    let expected = adapter.capabilities().expected_image_shape;
    if image.shape() != expected {
        return Err(Error::shape(expected, image.shape()));
    }
    Ok(())
}

fn check_answer(adapter: &dyn ModelAdapter, answer: &[u32]) -> Result<()> {
    if answer.is_empty() {
        return Err(Error::InvariantViolation("empty answer".into()));
    }
    let vocab = adapter.capabilities().vocabulary_size;
    if let Some(tok) = answer.iter().find(|t| **t as usize >= vocab) {
        return Err(Error::InvariantViolation(format!(
            "token id {tok} outside vocabulary of size {vocab}"
        )));
    }
    Ok(())
}

pub(crate) fn check_selection(selected: &[usize], len: usize) -> Result<()> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(&index) = selected.iter().find(|i| **i >= len) {
        return Err(Error::SelectionOutOfRange { index, len });
    }
    Ok(())
}

/// Generates an answer for `image` and `question`, at most `max_tokens` long.
pub fn generate(
    adapter: &dyn ModelAdapter,
    image: &Image,
    question: &str,
    max_tokens: usize,
) -> Result<Vec<u32>> {
    check_shape(adapter, image)?;
    if max_tokens == 0 {
        return Err(Error::InvalidConfig("max_tokens must be at least 1".into()));
    }
    let mut tokens = adapter.greedy_decode(image, question, max_tokens)?;
    if tokens.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    tokens.truncate(max_tokens);
    Ok(tokens)
}

/// Per-token conditional log-probabilities (nats) of a supplied answer.
pub fn conditional_logprobs(
    adapter: &dyn ModelAdapter,
    image: &Image,
    question: &str,
    answer: &[u32],
) -> Result<Vec<f64>> {
    check_shape(adapter, image)?;
    check_answer(adapter, answer)?;
    let logps = adapter.token_logprobs(image, question, answer)?;
    if logps.len() != answer.len() {
        return Err(Error::shape(answer.len(), logps.len()));
    }
    if let Some((index, &value)) = logps
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v > 0.0)
    {
        return Err(Error::NonFiniteLogProb { index, value });
    }
    Ok(logps)
}

/// Pixel gradient of the selected-token score, same shape as `image`.
pub fn score_gradient(
    adapter: &dyn ModelAdapter,
    image: &Image,
    question: &str,
    answer: &[u32],
    selected: &[usize],
) -> Result<Array3<f64>> {
    check_shape(adapter, image)?;
    check_answer(adapter, answer)?;
    check_selection(selected, answer.len())?;
    if !adapter.capabilities().supports_gradients {
        return Err(Error::GradientUnsupported);
    }
    let grad = adapter.selected_logprob_gradient(image, question, answer, selected)?;
    if grad.dim() != image.shape() {
        return Err(Error::shape(image.shape(), grad.dim()));
    }
    Ok(grad)
}

/// Axis-aligned pooling window `(top, left, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Deterministic softmax model over pooled image regions.
///
/// Step `t` has logits
/// `(bias + transition[prev] + emission · φ(image)) / temperature`, where
/// `φ_j` is the mean intensity (over pixels and channels) inside window `j`
/// and `prev` is the previous answer token, or the start row
/// `transition[vocab]` at `t = 0`. The question text is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    image_shape: (usize, usize, usize),
    windows: Vec<Window>,
    /// `vocab × windows`.
    emission: Array2<f64>,
    /// `(vocab + 1) × vocab`; the last row conditions the first token.
    transition: Array2<f64>,
    bias: Array1<f64>,
    temperature: f64,
    end_token: Option<u32>,
}

impl ToyModel {
    pub fn new(
        image_shape: (usize, usize, usize),
        windows: Vec<Window>,
        emission: Array2<f64>,
    ) -> Result<Self> {
        let vocab = emission.nrows();
        let model = Self {
            image_shape,
            windows,
            transition: Array2::zeros((vocab + 1, vocab)),
            bias: Array1::zeros(vocab),
            emission,
            temperature: 1.0,
            end_token: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Every conditional distribution is uniform over `vocab` tokens.
    pub fn uniform(image_shape: (usize, usize, usize), vocab: usize) -> Result<Self> {
        let (h, w, _) = image_shape;
        Self::new(
            image_shape,
            vec![Window::new(0, 0, h, w)],
            Array2::zeros((vocab, 1)),
        )
    }

    pub fn with_bias(mut self, bias: Array1<f64>) -> Result<Self> {
        self.bias = bias;
        self.validate()?;
        Ok(self)
    }

    pub fn with_transition(mut self, transition: Array2<f64>) -> Result<Self> {
        self.transition = transition;
        self.validate()?;
        Ok(self)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn with_end_token(mut self, end_token: u32) -> Result<Self> {
        self.end_token = Some(end_token);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig("image shape must be positive".into()));
        }
        let vocab = self.emission.nrows();
        if vocab == 0 {
            return Err(Error::InvalidConfig("vocabulary must be non-empty".into()));
        }
        if self.emission.ncols() != self.windows.len() {
            return Err(Error::InvalidConfig(format!(
                "emission has {} columns for {} windows",
                self.emission.ncols(),
                self.windows.len()
            )));
        }
        for win in &self.windows {
            if win.height == 0 || win.width == 0 || win.top + win.height > h || win.left + win.width > w
            {
                return Err(Error::OutOfBounds((win.top, win.left, win.height, win.width)));
            }
        }
        if self.transition.dim() != (vocab + 1, vocab) {
            return Err(Error::InvalidConfig("transition must be (vocab + 1) x vocab".into()));
        }
        if self.bias.len() != vocab {
            return Err(Error::InvalidConfig("bias must have vocab entries".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if matches!(self.end_token, Some(t) if t as usize >= vocab) {
            return Err(Error::InvalidConfig("end token outside vocabulary".into()));
        }
        let finite = self.emission.iter().chain(&self.transition).chain(&self.bias);
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("model parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.emission.nrows()
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    /// Pooled window means `φ`.
    pub fn features(&self, image: &Image) -> Array1<f64> {
        let px = image.pixels();
        let c = image.channels();
        self.windows
            .iter()
            .map(|win| {
                let sum: f64 = px
                    .slice(ndarray::s![
                        win.top..win.top + win.height,
                        win.left..win.left + win.width,
                        ..
                    ])
                    .sum();
                sum / (win.height * win.width * c) as f64
            })
            .collect()
    }

    fn logits(&self, features: &Array1<f64>, prev: Option<u32>) -> Array1<f64> {
        let row = prev.map_or(self.vocab_size(), |p| p as usize);
        (&self.bias + &self.transition.row(row) + self.emission.dot(features)) / self.temperature
    }

    /// Full next-token log-distribution after `prefix`.
    pub fn next_token_logprobs(&self, image: &Image, prefix: &[u32]) -> Array1<f64> {
        let features = self.features(image);
        log_softmax(&self.logits(&features, prefix.last().copied()))
    }
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    logits.mapv(|v| v - lse)
}

impl ModelAdapter for ToyModel {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            vocabulary_size: self.vocab_size(),
            expected_image_shape: self.image_shape,
            supports_gradients: true,
            thread_safe: true,
        }
    }

    fn token_logprobs(&self, image: &Image, _question: &str, answer: &[u32]) -> Result<Vec<f64>> {
        let features = self.features(image);
        Ok(answer
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let prev = t.checked_sub(1).map(|p| answer[p]);
                log_softmax(&self.logits(&features, prev))[tok as usize]
            })
            .collect())
    }

    fn selected_logprob_gradient(
        &self,
        image: &Image,
        _question: &str,
        answer: &[u32],
        selected: &[usize],
    ) -> Result<Array3<f64>> {
        let features = self.features(image);
        // d/dφ log p(a_t) = (E[a_t] − Σ_v p_v E[v]) / T
        let mut dphi = Array1::<f64>::zeros(self.windows.len());
        for &t in selected {
            let prev = t.checked_sub(1).map(|p| answer[p]);
            let probs = log_softmax(&self.logits(&features, prev)).mapv(f64::exp);
            let expected = probs.dot(&self.emission);
            dphi = dphi + (&self.emission.row(answer[t] as usize) - &expected) / self.temperature;
        }
        let (h, w, c) = self.image_shape;
        let mut grad = Array3::<f64>::zeros((h, w, c));
        for (win, g) in self.windows.iter().zip(dphi.iter()) {
            let per_pixel = g / (win.height * win.width * c) as f64;
            grad.slice_mut(ndarray::s![
                win.top..win.top + win.height,
                win.left..win.left + win.width,
                ..
            ])
            .mapv_inplace(|v| v + per_pixel);
        }
        Ok(grad)
    }

    fn greedy_decode(&self, image: &Image, _question: &str, max_tokens: usize) -> Result<Vec<u32>> {
        let features = self.features(image);
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_tokens {
            let logits = self.logits(&features, out.last().copied());
            // first maximum wins ties
            let next = logits
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0 as u32;
            if Some(next) == self.end_token {
                if out.is_empty() {
                    return Err(Error::EmptyGeneration);
                }
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Whitespace- or comma-separated integer token ids.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                let id: u32 = s
                    .parse()
                    .map_err(|_| Error::Tokenize(format!("'{s}' is not a token id")))?;
                if id as usize >= self.vocab_size() {
                    return Err(Error::Tokenize(format!("token id {id} outside vocabulary")));
                }
                Ok(id)
            })
            .collect()
    }
}

/// Wraps an adapter and counts scoring and gradient calls.
pub struct CountingAdapter<'a> {
    inner: &'a dyn ModelAdapter,
    score_calls: AtomicUsize,
    gradient_calls: AtomicUsize,
}

impl<'a> CountingAdapter<'a> {
    pub fn new(inner: &'a dyn ModelAdapter) -> Self {
        Self {
            inner,
            score_calls: AtomicUsize::new(0),
            gradient_calls: AtomicUsize::new(0),
        }
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::Relaxed)
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradient_calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.score_calls.store(0, Ordering::Relaxed);
        self.gradient_calls.store(0, Ordering::Relaxed);
    }
}

impl ModelAdapter for CountingAdapter<'_> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn token_logprobs(&self, image: &Image, question: &str, answer: &[u32]) -> Result<Vec<f64>> {
        self.score_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.token_logprobs(image, question, answer)
    }

    fn selected_logprob_gradient(
        &self,
        image: &Image,
        question: &str,
        answer: &[u32],
        selected: &[usize],
    ) -> Result<Array3<f64>> {
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        self.inner
            .selected_logprob_gradient(image, question, answer, selected)
    }

    fn greedy_decode(&self, image: &Image, question: &str, max_tokens: usize) -> Result<Vec<u32>> {
        self.inner.greedy_decode(image, question, max_tokens)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.inner.tokenize(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: (usize, usize, usize), seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn(shape, |_| rng.random::<f64>())).unwrap()
    }

    fn random_model(seed: u64) -> ToyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (6, 5, 3);
        let windows = vec![
            Window::new(0, 0, 3, 3),
            Window::new(2, 1, 4, 4),
            Window::new(5, 0, 1, 5),
        ];
        let vocab = 6;
        let emission = Array2::from_shape_fn((vocab, 3), |_| rng.random_range(-4.0..4.0));
        let transition = Array2::from_shape_fn((vocab + 1, vocab), |_| rng.random_range(-1.0..1.0));
        let bias = Array1::from_shape_fn(vocab, |_| rng.random_range(-1.0..1.0));
        ToyModel::new(shape, windows, emission)
            .unwrap()
            .with_transition(transition)
            .unwrap()
            .with_bias(bias)
            .unwrap()
            .with_temperature(0.7)
            .unwrap()
    }

    #[test]
    fn bright_top_left_window_generates_token_five() {
        // logits for token 5 are 10·φ, every other token 0; φ = 1 on an all-bright image
        let mut emission = Array2::zeros((8, 1));
        emission[[5, 0]] = 10.0;
        let model = ToyModel::new((4, 4, 3), vec![Window::new(0, 0, 2, 2)], emission).unwrap();
        let image = Image::filled(4, 4, 3, 1.0).unwrap();
        let tokens = generate(&model, &image, "q", 3).unwrap();
        assert_eq!(tokens, vec![5, 5, 5]);
        assert_eq!(generate(&model, &image, "q", 1).unwrap().len(), 1);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let model = ToyModel::uniform((4, 4, 3), 5).unwrap();
        let image = Image::filled(4, 5, 3, 0.5).unwrap();
        assert!(matches!(
            generate(&model, &image, "q", 2),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            conditional_logprobs(&model, &image, "q", &[1]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn immediate_end_token_is_an_error() {
        let mut bias = Array1::zeros(4);
        bias[3] = 5.0;
        let model = ToyModel::uniform((2, 2, 1), 4)
            .unwrap()
            .with_bias(bias)
            .unwrap()
            .with_end_token(3)
            .unwrap();
        let image = Image::filled(2, 2, 1, 0.0).unwrap();
        assert_eq!(generate(&model, &image, "q", 4), Err(Error::EmptyGeneration));
    }

    #[test]
    fn uniform_model_scores_minus_log_vocab() {
        let model = ToyModel::uniform((3, 3, 3), 10).unwrap();
        let image = random_image((3, 3, 3), 1);
        let lp = conditional_logprobs(&model, &image, "q", &[1, 4, 9]).unwrap();
        assert_eq!(lp.len(), 3);
        for v in lp {
            assert!((v + 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_logprobs_is_log_of_product() {
        let model = random_model(3);
        let image = random_image((6, 5, 3), 4);
        let answer = [2, 0, 5, 1];
        let lp = conditional_logprobs(&model, &image, "q", &answer).unwrap();
        assert!(lp.iter().all(|v| *v <= 0.0));
        let product: f64 = lp.iter().map(|v| v.exp()).product();
        assert!((lp.iter().sum::<f64>() - product.ln()).abs() < 1e-9);
    }

    #[test]
    fn distributions_normalize() {
        let model = random_model(5);
        let image = random_image((6, 5, 3), 6);
        for prefix in [&[][..], &[3], &[3, 1, 4]] {
            let total: f64 = model.next_token_logprobs(&image, prefix).mapv(f64::exp).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn teacher_forced_scores_match_next_token_table() {
        let model = random_model(8);
        let image = random_image((6, 5, 3), 9);
        let answer = [4, 4, 2];
        let lp = conditional_logprobs(&model, &image, "q", &answer).unwrap();
        for t in 0..answer.len() {
            let table = model.next_token_logprobs(&image, &answer[..t]);
            assert_eq!(lp[t], table[answer[t] as usize]);
        }
    }

    #[test]
    fn gradient_vanishes_outside_the_only_window() {
        let emission = array![[2.0], [-1.0], [0.5]];
        let model = ToyModel::new((5, 5, 3), vec![Window::new(0, 0, 2, 3)], emission).unwrap();
        let image = random_image((5, 5, 3), 2);
        let g = score_gradient(&model, &image, "q", &[0, 1, 2], &[1, 2]).unwrap();
        for ((y, x, _), v) in g.indexed_iter() {
            if y < 2 && x < 3 {
                assert!(v.abs() > 0.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = random_model(11);
        let image = random_image((6, 5, 3), 12);
        let answer = [1, 3, 0, 5];
        let selected = [1, 3];
        let grad = score_gradient(&model, &image, "q", &answer, &selected).unwrap();
        let f = |img: &Image| -> f64 {
            let lp = model.token_logprobs(img, "q", &answer).unwrap();
            selected.iter().map(|&k| lp[k]).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let eps = 1e-4;
        for _ in 0..20 {
            let idx = (
                rng.random_range(0..6),
                rng.random_range(0..5),
                rng.random_range(0..3),
            );
            let mut plus = image.pixels().to_owned();
            let mut minus = plus.clone();
            // stay inside [0, 1]
            plus[idx] = (plus[idx] + eps).min(1.0);
            minus[idx] = (minus[idx] - eps).max(0.0);
            let h = plus[idx] - minus[idx];
            let fd = (f(&Image::new(plus).unwrap()) - f(&Image::new(minus).unwrap())) / h;
            let an = grad[idx];
            let scale = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / scale < 1e-4 || (an - fd).abs() < 1e-9,
                "pixel {idx:?}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn empty_selection_is_rejected() {
        let model = random_model(1);
        let image = random_image((6, 5, 3), 1);
        assert_eq!(
            score_gradient(&model, &image, "q", &[1, 2], &[]),
            Err(Error::EmptySelection)
        );
    }

    #[test]
    fn toy_model_is_deterministic() {
        let model = random_model(21);
        let image = random_image((6, 5, 3), 22);
        let a = model.token_logprobs(&image, "q", &[1, 2, 3]).unwrap();
        let b = model.token_logprobs(&image, "q", &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        let ga = model.selected_logprob_gradient(&image, "q", &[1, 2], &[1]).unwrap();
        let gb = model.selected_logprob_gradient(&image, "q", &[1, 2], &[1]).unwrap();
        assert_eq!(ga, gb);
    }

    struct BrokenAdapter;

    impl ModelAdapter for BrokenAdapter {
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                vocabulary_size: 4,
                expected_image_shape: (1, 1, 1),
                supports_gradients: false,
                thread_safe: true,
            }
        }
        fn token_logprobs(&self, _: &Image, _: &str, answer: &[u32]) -> Result<Vec<f64>> {
            Ok(answer.iter().map(|_| f64::NAN).collect())
        }
        fn greedy_decode(&self, _: &Image, _: &str, _: usize) -> Result<Vec<u32>> {
            Ok(vec![0])
        }
        fn tokenize(&self, _: &str) -> Result<Vec<u32>> {
            Ok(vec![0])
        }
    }

    #[test]
    fn broken_adapter_outputs_are_caught() {
        let image = Image::filled(1, 1, 1, 0.0).unwrap();
        assert!(matches!(
            conditional_logprobs(&BrokenAdapter, &image, "q", &[0, 1]),
            Err(Error::NonFiniteLogProb { index: 0, .. })
        ));
        assert_eq!(
            score_gradient(&BrokenAdapter, &image, "q", &[0, 1], &[1]),
            Err(Error::GradientUnsupported)
        );
    }

    #[test]
    fn tokenize_parses_ids() {
        let model = ToyModel::uniform((1, 1, 1), 10).unwrap();
        assert_eq!(model.tokenize("3 1, 4").unwrap(), vec![3, 1, 4]);
        assert!(model.tokenize("3 12").is_err());
        assert!(model.tokenize("cat").is_err());
    }

    #[test]
    fn counting_adapter_counts() {
        let model = random_model(2);
        let counter = CountingAdapter::new(&model);
        let image = random_image((6, 5, 3), 3);
        conditional_logprobs(&counter, &image, "q", &[1, 2]).unwrap();
        score_gradient(&counter, &image, "q", &[1, 2], &[1]).unwrap();
        score_gradient(&counter, &image, "q", &[1, 2], &[1]).unwrap();
        assert_eq!((counter.score_calls(), counter.gradient_calls()), (1, 2));
    }
}

//! Adapter discovery: the built-in toy model and JSON descriptors.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use openlens_core::{Capabilities, Image, ModelAdapter, ToyModel, Window};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const ADAPTER_PATH_VAR: &str = "OPENLENS_ADAPTER_PATH";
pub const BUILTIN_TOY: &str = "toy";

/// On-disk adapter description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterDescriptor {
    pub kind: String,
    #[serde(default = "yes")]
    pub supports_gradients: bool,
    #[serde(default = "yes")]
    pub thread_safe: bool,
    pub model: ToyModel,
}

fn yes() -> bool {
    true
}

/// A toy model with capability flags that may be narrower than the model's own.
#[derive(Debug, Clone)]
pub struct LoadedAdapter {
    pub name: String,
    model: ToyModel,
    supports_gradients: bool,
    thread_safe: bool,
}

impl LoadedAdapter {
    pub fn new(name: impl Into<String>, descriptor: AdapterDescriptor) -> Result<Self> {
        if descriptor.kind != "toy" {
            return Err(CliError::Config(format!(
                "unsupported adapter kind '{}'",
                descriptor.kind
            )));
        }
        descriptor
            .model
            .validate()
            .map_err(|e| CliError::Config(format!("invalid adapter model: {e}")))?;
        Ok(Self {
            name: name.into(),
            model: descriptor.model,
            supports_gradients: descriptor.supports_gradients,
            thread_safe: descriptor.thread_safe,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }
}

impl ModelAdapter for LoadedAdapter {
    fn capabilities(&self) -> Capabilities {
        let inner = self.model.capabilities();
        Capabilities {
            supports_gradients: inner.supports_gradients && self.supports_gradients,
            thread_safe: inner.thread_safe && self.thread_safe,
            ..inner
        }
    }

    fn token_logprobs(
        &self,
        image: &Image,
        question: &str,
        answer: &[u32],
    ) -> openlens_core::Result<Vec<f64>> {
        self.model.token_logprobs(image, question, answer)
    }

    fn selected_logprob_gradient(
        &self,
        image: &Image,
        question: &str,
        answer: &[u32],
        selected: &[usize],
    ) -> openlens_core::Result<Array3<f64>> {
        if !self.supports_gradients {
            return Err(openlens_core::Error::GradientUnsupported);
        }
        self.model
            .selected_logprob_gradient(image, question, answer, selected)
    }

    fn greedy_decode(
        &self,
        image: &Image,
        question: &str,
        max_tokens: usize,
    ) -> openlens_core::Result<Vec<u32>> {
        self.model.greedy_decode(image, question, max_tokens)
    }

    fn tokenize(&self, text: &str) -> openlens_core::Result<Vec<u32>> {
        self.model.tokenize(text)
    }
}

/// 16×16 RGB, eight tokens, one window per image quadrant.
pub fn builtin_toy() -> ToyModel {
    let (h, w) = (16, 16);
    let windows = vec![
        Window::new(0, 0, h / 2, w / 2),
        Window::new(0, w / 2, h / 2, w / 2),
        Window::new(h / 2, 0, h / 2, w / 2),
        Window::new(h / 2, w / 2, h / 2, w / 2),
    ];
    let vocab = 8;
    let emission = Array2::from_shape_fn((vocab, windows.len()), |(v, j)| {
        4.0 * ((v as f64) * 1.3 + (j as f64) * 0.7).cos()
    });
    let transition = Array2::from_shape_fn((vocab + 1, vocab), |(r, v)| {
        let repeat = if r == v { -3.0 } else { 0.0 };
        repeat + 0.5 * ((r as f64) * 2.1 + (v as f64) * 0.9).sin()
    });
    let bias = Array1::from_shape_fn(vocab, |v| -0.1 * v as f64);
    ToyModel::new((h, w, 3), windows, emission)
        .and_then(|m| m.with_transition(transition))
        .and_then(|m| m.with_bias(bias))
        .expect("built-in parameters are consistent")
}

fn load_descriptor(name: &str, path: &Path) -> Result<LoadedAdapter> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read adapter {}: {e}", path.display()))
    })?;
    let descriptor: AdapterDescriptor = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("invalid adapter descriptor {}: {e}", path.display()))
    })?;
    LoadedAdapter::new(name, descriptor)
}

/// Resolves `--adapter`: the built-in name, a descriptor path, or
/// `<name>.json` in one of the `OPENLENS_ADAPTER_PATH` directories.
pub fn resolve(name: &str) -> Result<LoadedAdapter> {
    if name == BUILTIN_TOY {
        return LoadedAdapter::new(
            name,
            AdapterDescriptor {
                kind: "toy".into(),
                supports_gradients: true,
                thread_safe: true,
                model: builtin_toy(),
            },
        );
    }
    let direct = Path::new(name);
    if direct.is_file() {
        return load_descriptor(name, direct);
    }
    let search = env::var_os(ADAPTER_PATH_VAR).unwrap_or_default();
    for dir in env::split_paths(&search) {
        let candidate: PathBuf = dir.join(format!("{name}.json"));
        if candidate.is_file() {
            return load_descriptor(name, &candidate);
        }
    }
    Err(CliError::Config(format!(
        "unknown adapter '{name}' (not built in, not a file, not found on {ADAPTER_PATH_VAR})"
    )))
}

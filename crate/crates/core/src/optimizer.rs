//! Saliency-mask optimization.
//!
//! The optimization variable `M` is a low-resolution "keep" mask: `1` leaves a
//! pixel untouched, `0` replaces it with the baseline. Starting from all ones,
//! the deletion term drives `M` down where removing pixels lowers the score and
//! the insertion term drives it down where restoring them onto the baseline
//! raises it, so the explanation heatmap is `1 − M`.
//!
//! Single-mask objective at step `t`:
//!
//! ```text
//! f(Φ(I, Ĩ, M)) − f(Φ(I, Ĩ, 1 − M))
//!     + λ1·mean(1 − M) + λ2·e^{−γt}·rms(1 − M) + λ3·BTV(M)
//! ```
//!
//! The decayed L2 term makes early iterations closer to convex and fades out
//! as `t` grows. The separate-masks mode optimizes a deletion mask `Mx` and an
//! insertion mask `My` with the combined heatmap `M = Mx ⊙ My`.

use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{area_downsample, blend, upsample_adjoint, upsample_values};
use crate::model::{check_selection, score_gradient, ModelAdapter};
use crate::relevance::prediction_score;
use crate::types::{BaselineImage, Image, Mask, OptimizationConfig, OptimizationMode, ScorableSample};

/// Halvings tried before a step is abandoned.
const MAX_HALVINGS: usize = 30;
/// Window and relative tolerance of the convergence test.
const CONVERGENCE_WINDOW: usize = 10;
const CONVERGENCE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub step: usize,
    pub deletion_term: f64,
    pub insertion_term: f64,
    pub l1: f64,
    pub l2_decayed: f64,
    pub btv: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub steps: Vec<ObjectiveBreakdown>,
    /// The optimized keep-mask `M` at mask resolution.
    pub final_mask: Mask,
    /// Separate-masks mode only: the deletion and insertion masks.
    pub component_masks: Option<(Mask, Mask)>,
    pub converged: bool,
    #[serde(skip)]
    pub wall_time: f64,
}

impl OptimizationTrace {
    /// Explanation heatmap `1 − M` at mask resolution.
    pub fn heatmap(&self) -> Mask {
        self.final_mask.complement()
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("breakdown serializes") + "\n")
            .collect()
    }
}

/// Edge weights of the bilateral total variation on a mask grid.
#[derive(Debug, Clone)]
pub struct BtvWeights {
    /// `h × (w − 1)`: pair `(y, x)–(y, x + 1)`.
    horizontal: Array2<f64>,
    /// `(h − 1) × w`: pair `(y, x)–(y + 1, x)`.
    vertical: Array2<f64>,
}

impl BtvWeights {
    /// `w_ij = exp(−(Ī_i − Ī_j)² / σ²)` with `Ī` the channel-mean image
    /// area-averaged onto the `grid`.
    pub fn new(image: &Image, grid: (usize, usize), sigma: f64) -> Result<Self> {
        let (h, w) = grid;
        if h == 0 || w == 0 || h > image.height() || w > image.width() {
            return Err(Error::shape((image.height(), image.width()), grid));
        }
        let small = area_downsample(image.channel_mean().view(), grid);
        let weight = |a: f64, b: f64| (-(a - b).powi(2) / (sigma * sigma)).exp();
        let horizontal =
            Array2::from_shape_fn((h, w - 1), |(y, x)| weight(small[[y, x]], small[[y, x + 1]]));
        let vertical =
            Array2::from_shape_fn((h - 1, w), |(y, x)| weight(small[[y, x]], small[[y + 1, x]]));
        Ok(Self {
            horizontal,
            vertical,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.horizontal.nrows(), self.vertical.ncols())
    }

    /// Mean of `w_ij (M_i − M_j)²` over horizontal pairs plus the same mean over
    /// vertical pairs, so the value does not grow with the grid size. A
    /// direction without pairs contributes zero.
    pub fn value(&self, m: ArrayView2<'_, f64>) -> f64 {
        let h: f64 = self
            .horizontal
            .indexed_iter()
            .map(|((y, x), w)| w * (m[[y, x]] - m[[y, x + 1]]).powi(2))
            .sum();
        let v: f64 = self
            .vertical
            .indexed_iter()
            .map(|((y, x), w)| w * (m[[y, x]] - m[[y + 1, x]]).powi(2))
            .sum();
        h * per_pair(&self.horizontal) + v * per_pair(&self.vertical)
    }

    pub fn gradient(&self, m: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut g = Array2::zeros(m.dim());
        let scale = 2.0 * per_pair(&self.horizontal);
        for ((y, x), w) in self.horizontal.indexed_iter() {
            let d = scale * w * (m[[y, x]] - m[[y, x + 1]]);
            g[[y, x]] += d;
            g[[y, x + 1]] -= d;
        }
        let scale = 2.0 * per_pair(&self.vertical);
        for ((y, x), w) in self.vertical.indexed_iter() {
            let d = scale * w * (m[[y, x]] - m[[y + 1, x]]);
            g[[y, x]] += d;
            g[[y + 1, x]] -= d;
        }
        g
    }
}

fn per_pair(weights: &Array2<f64>) -> f64 {
    if weights.is_empty() {
        0.0
    } else {
        1.0 / weights.len() as f64
    }
}

/// Bilateral total variation of `mask`, weighted by the content of `image`.
pub fn btv_norm(mask: &Mask, image: &Image, sigma_btv: f64) -> Result<f64> {
    let weights = BtvWeights::new(image, mask.shape(), sigma_btv)?;
    Ok(weights.value(mask.values()))
}

fn l1_mean(m: ArrayView2<'_, f64>) -> f64 {
    m.mapv(|v| 1.0 - v).mean().unwrap_or(0.0)
}

fn l2_rms(m: ArrayView2<'_, f64>) -> f64 {
    m.mapv(|v| (1.0 - v).powi(2)).mean().unwrap_or(0.0).sqrt()
}

/// Everything the objective needs besides the mask itself.
struct Problem<'a> {
    adapter: &'a dyn ModelAdapter,
    sample: &'a ScorableSample,
    baseline: &'a BaselineImage,
    selected: &'a [usize],
    config: &'a OptimizationConfig,
    btv: BtvWeights,
    /// `Σ_c`-ready image difference `I − Ĩ`.
    delta: Array3<f64>,
}

impl<'a> Problem<'a> {
    fn new(
        adapter: &'a dyn ModelAdapter,
        sample: &'a ScorableSample,
        baseline: &'a BaselineImage,
        selected: &'a [usize],
        config: &'a OptimizationConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_selection(selected, sample.answer_tokens.len())?;
        if baseline.shape() != sample.image.shape() {
            return Err(Error::shape(sample.image.shape(), baseline.shape()));
        }
        let btv = BtvWeights::new(&sample.image, config.mask_resolution, config.sigma_btv)?;
        let delta = &sample.image.pixels() - &baseline.image.pixels();
        Ok(Self {
            adapter,
            sample,
            baseline,
            selected,
            config,
            btv,
            delta,
        })
    }

    fn full_res(&self, m: ArrayView2<'_, f64>) -> Result<Mask> {
        let up = upsample_values(m, (self.sample.image.height(), self.sample.image.width()))?;
        Mask::clipped(up)
    }

    fn perturbed(&self, full: &Mask) -> Result<Image> {
        blend(&self.sample.image, &self.baseline.image, full)
    }

    fn score(&self, image: &Image) -> Result<f64> {
        prediction_score(
            self.adapter,
            image,
            &self.sample.question,
            &self.sample.answer_tokens,
            self.selected,
        )
    }

    /// `f(Φ(M)) − f(Φ(1 − M))` for a low-resolution mask.
    fn terms(&self, m: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
        let full = self.full_res(m)?;
        let del = self.score(&self.perturbed(&full)?)?;
        let ins = self.score(&self.perturbed(&full.complement())?)?;
        Ok((del, ins))
    }

    /// Gradient of `f(Φ(M)) − f(Φ(1 − M))` w.r.t. the low-resolution mask.
    fn terms_gradient(&self, m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let full = self.full_res(m)?;
        let gd = self.pixel_gradient(&self.perturbed(&full)?)?;
        let gi = self.pixel_gradient(&self.perturbed(&full.complement())?)?;
        // d/dM f(Φ(M)) = Σ_c ∇f ⊙ (I − Ĩ); the insertion term flips sign twice
        let per_pixel = ((gd + gi) * &self.delta).sum_axis(Axis(2));
        Ok(upsample_adjoint(per_pixel.view(), m.dim()))
    }

    /// `f(Φ(Mx)) − f(Φ(1 − My))` and its two mask gradients.
    fn component_terms(&self, mx: ArrayView2<'_, f64>, my: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
        let del = self.score(&self.perturbed(&self.full_res(mx)?)?)?;
        let ins = self.score(&self.perturbed(&self.full_res(my)?.complement())?)?;
        Ok((del, ins))
    }

    fn component_gradients(
        &self,
        mx: ArrayView2<'_, f64>,
        my: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let gx = self.pixel_gradient(&self.perturbed(&self.full_res(mx)?)?)?;
        let gy = self.pixel_gradient(&self.perturbed(&self.full_res(my)?.complement())?)?;
        let px = (gx * &self.delta).sum_axis(Axis(2));
        let py = (gy * &self.delta).sum_axis(Axis(2));
        Ok((
            upsample_adjoint(px.view(), mx.dim()),
            upsample_adjoint(py.view(), my.dim()),
        ))
    }

    fn pixel_gradient(&self, image: &Image) -> Result<Array3<f64>> {
        score_gradient(
            self.adapter,
            image,
            &self.sample.question,
            &self.sample.answer_tokens,
            self.selected,
        )
    }

    fn decay(&self, step: usize) -> f64 {
        (-self.config.gamma * step as f64).exp()
    }

    fn breakdown(&self, step: usize, del: f64, ins: f64, m: ArrayView2<'_, f64>, with_l2: bool) -> ObjectiveBreakdown {
        let c = self.config;
        let l1 = l1_mean(m);
        let l2_decayed = if with_l2 { self.decay(step) * l2_rms(m) } else { 0.0 };
        let btv = self.btv.value(m);
        ObjectiveBreakdown {
            step,
            deletion_term: del,
            insertion_term: ins,
            l1,
            l2_decayed,
            btv,
            total: del - ins + c.lambda1 * l1 + c.lambda2 * l2_decayed + c.lambda3 * btv,
        }
    }

    /// Gradient of the regularizer `g(M)`.
    fn regularizer_gradient(&self, step: usize, m: ArrayView2<'_, f64>, with_l2: bool) -> Array2<f64> {
        let c = self.config;
        let n = m.len() as f64;
        let mut g = self.btv.gradient(m) * c.lambda3 - c.lambda1 / n;
        let rms = l2_rms(m);
        // the rms norm is not differentiable at M = 1; take the zero subgradient
        if with_l2 && rms > 0.0 {
            let scale = c.lambda2 * self.decay(step) / (n * rms);
            Zip::from(&mut g).and(m).for_each(|gv, &mv| *gv += scale * (mv - 1.0));
        }
        g
    }

    fn single_objective(&self, step: usize, m: ArrayView2<'_, f64>) -> Result<ObjectiveBreakdown> {
        let (del, ins) = self.terms(m)?;
        Ok(self.breakdown(step, del, ins, m, true))
    }

    fn single_gradient(&self, step: usize, m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.terms_gradient(m)? + self.regularizer_gradient(step, m, true))
    }

    fn separate_objective(
        &self,
        step: usize,
        mx: ArrayView2<'_, f64>,
        my: ArrayView2<'_, f64>,
    ) -> Result<ObjectiveBreakdown> {
        let m = &mx * &my;
        let (dx, iy) = self.component_terms(mx, my)?;
        let (dm, im) = self.terms(m.view())?;
        Ok(self.breakdown(step, dx + dm, iy + im, m.view(), false))
    }

    fn separate_gradient(
        &self,
        step: usize,
        mx: ArrayView2<'_, f64>,
        my: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let m = &mx * &my;
        let (gx, gy) = self.component_gradients(mx, my)?;
        let gm = self.terms_gradient(m.view())? + self.regularizer_gradient(step, m.view(), false);
        Ok((gx + &gm * &my, gy + &gm * &mx))
    }
}

/// Evaluates the single-mask objective for a low-resolution `mask` at `step`.
pub fn objective_single(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
    mask: &Mask,
    selected_indices: &[usize],
    config: &OptimizationConfig,
    step: usize,
) -> Result<ObjectiveBreakdown> {
    let problem = Problem::new(adapter, sample, baseline, selected_indices, config)?;
    check_resolution(mask, config)?;
    problem.single_objective(step, mask.values())
}

/// Gradient of [`objective_single`] w.r.t. the low-resolution mask.
pub fn objective_single_gradient(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
    mask: &Mask,
    selected_indices: &[usize],
    config: &OptimizationConfig,
    step: usize,
) -> Result<Array2<f64>> {
    let problem = Problem::new(adapter, sample, baseline, selected_indices, config)?;
    check_resolution(mask, config)?;
    problem.single_gradient(step, mask.values())
}

/// Two-mask objective for a deletion mask `mx` and an insertion mask `my`.
pub fn objective_separate(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
    masks: (&Mask, &Mask),
    selected_indices: &[usize],
    config: &OptimizationConfig,
    step: usize,
) -> Result<ObjectiveBreakdown> {
    let problem = Problem::new(adapter, sample, baseline, selected_indices, config)?;
    check_resolution(masks.0, config)?;
    check_resolution(masks.1, config)?;
    problem.separate_objective(step, masks.0.values(), masks.1.values())
}

/// Gradients of [`objective_separate`] w.r.t. `(mx, my)`.
pub fn objective_separate_gradient(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
    masks: (&Mask, &Mask),
    selected_indices: &[usize],
    config: &OptimizationConfig,
    step: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let problem = Problem::new(adapter, sample, baseline, selected_indices, config)?;
    check_resolution(masks.0, config)?;
    check_resolution(masks.1, config)?;
    problem.separate_gradient(step, masks.0.values(), masks.1.values())
}

fn check_resolution(mask: &Mask, config: &OptimizationConfig) -> Result<()> {
    if mask.shape() != config.mask_resolution {
        return Err(Error::shape(config.mask_resolution, mask.shape()));
    }
    Ok(())
}

fn check_gradients(adapter: &dyn ModelAdapter) -> Result<()> {
    if !adapter.capabilities().supports_gradients {
        return Err(Error::GradientUnsupported);
    }
    Ok(())
}

/// Takes `m − η·g/‖g‖∞`, projected onto `[0, 1]`.
fn project_step(m: &Array2<f64>, direction: &Array2<f64>, eta: f64) -> Array2<f64> {
    Zip::from(m)
        .and(direction)
        .map_collect(|&v, &d| (v - eta * d).clamp(0.0, 1.0))
}

/// Rescales `g` so its largest entry has magnitude one; `step_size` is then
/// the largest per-cell change of a trial step.
fn unit_direction(g: &Array2<f64>) -> Option<Array2<f64>> {
    let max = g.fold(0.0f64, |m, v| m.max(v.abs()));
    (max > 0.0 && max.is_finite()).then(|| g / max)
}

fn has_converged(steps: &[ObjectiveBreakdown]) -> bool {
    if steps.len() <= CONVERGENCE_WINDOW {
        return false;
    }
    let now = steps[steps.len() - 1].total;
    let then = steps[steps.len() - 1 - CONVERGENCE_WINDOW].total;
    (now - then).abs() <= CONVERGENCE_TOL * then.abs().max(f64::MIN_POSITIVE)
}

fn check_finite(b: &ObjectiveBreakdown) -> Result<()> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteObjective { step: b.step })
    }
}

/// Projected gradient descent with step halving on the single-mask objective.
pub fn optimize_single_mask(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
    selected_indices: &[usize],
    config: &OptimizationConfig,
) -> Result<OptimizationTrace> {
    check_gradients(adapter)?;
    if config.mode != OptimizationMode::SingleMask {
        return Err(Error::InvalidConfig("mode must be single_mask".into()));
    }
    let started = Instant::now();
    let problem = Problem::new(adapter, sample, baseline, selected_indices, config)?;
    let mut m = Array2::<f64>::ones(config.mask_resolution);
    let mut eta = config.step_size;
    let mut steps = Vec::with_capacity(config.steps);
    let mut converged = false;

    for t in 0..config.steps {
        let current = problem.single_objective(t, m.view())?;
        check_finite(&current)?;
        let grad = problem.single_gradient(t, m.view())?;
        let mut accepted = current;
        if let Some(dir) = unit_direction(&grad) {
            for attempt in 0..MAX_HALVINGS {
                let candidate = project_step(&m, &dir, eta);
                let eval = problem.single_objective(t, candidate.view())?;
                if eval.total.is_finite() && eval.total <= accepted.total {
                    m = candidate;
                    accepted = eval;
                    if attempt == 0 {
                        eta = (eta * 2.0).min(config.step_size);
                    }
                    break;
                }
                eta /= 2.0;
            }
        }
        steps.push(accepted);
        if has_converged(&steps) {
            converged = true;
            break;
        }
    }

    Ok(OptimizationTrace {
        steps,
        final_mask: Mask::clipped(m)?,
        component_masks: None,
        converged,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Joint optimization of a deletion mask and an insertion mask; the reported
/// mask is their element-wise product.
pub fn optimize_separate_masks(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
    selected_indices: &[usize],
    config: &OptimizationConfig,
) -> Result<OptimizationTrace> {
    check_gradients(adapter)?;
    if config.mode != OptimizationMode::SeparateMasks {
        return Err(Error::InvalidConfig("mode must be separate_masks".into()));
    }
    let started = Instant::now();
    let problem = Problem::new(adapter, sample, baseline, selected_indices, config)?;
    let mut mx = Array2::<f64>::ones(config.mask_resolution);
    let mut my = Array2::<f64>::ones(config.mask_resolution);
    let mut eta = config.step_size;
    let mut steps = Vec::with_capacity(config.steps);
    let mut converged = false;

    for t in 0..config.steps {
        let current = problem.separate_objective(t, mx.view(), my.view())?;
        check_finite(&current)?;
        let (gx, gy) = problem.separate_gradient(t, mx.view(), my.view())?;
        let max = gx
            .iter()
            .chain(gy.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let mut accepted = current;
        if max > 0.0 && max.is_finite() {
            let (dx, dy) = (gx / max, gy / max);
            for attempt in 0..MAX_HALVINGS {
                let cx = project_step(&mx, &dx, eta);
                let cy = project_step(&my, &dy, eta);
                let eval = problem.separate_objective(t, cx.view(), cy.view())?;
                if eval.total.is_finite() && eval.total <= accepted.total {
                    mx = cx;
                    my = cy;
                    accepted = eval;
                    if attempt == 0 {
                        eta = (eta * 2.0).min(config.step_size);
                    }
                    break;
                }
                eta /= 2.0;
            }
        }
        steps.push(accepted);
        if has_converged(&steps) {
            converged = true;
            break;
        }
    }

    let combined = &mx * &my;
    Ok(OptimizationTrace {
        steps,
        final_mask: Mask::clipped(combined)?,
        component_masks: Some((Mask::clipped(mx)?, Mask::clipped(my)?)),
        converged,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Runs the optimizer selected by `config.mode`.
pub fn optimize(
    adapter: &dyn ModelAdapter,
    sample: &ScorableSample,
    baseline: &BaselineImage,
    selected_indices: &[usize],
    config: &OptimizationConfig,
) -> Result<OptimizationTrace> {
    match config.mode {
        OptimizationMode::SingleMask => {
            optimize_single_mask(adapter, sample, baseline, selected_indices, config)
        }
        OptimizationMode::SeparateMasks => {
            optimize_separate_masks(adapter, sample, baseline, selected_indices, config)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::make_baseline;
    use crate::model::{ToyModel, Window};
    use crate::types::BaselineKind;
    use ndarray::{array, Array1};

    fn constant_image(h: usize, w: usize) -> Image {
        Image::filled(h, w, 3, 0.5).unwrap()
    }

    #[test]
    fn btv_of_constant_mask_is_zero() {
        let img = constant_image(4, 4);
        assert_eq!(btv_norm(&Mask::filled(4, 4, 0.3).unwrap(), &img, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn btv_single_pair() {
        let img = constant_image(1, 2);
        let m = Mask::new(array![[0.0, 1.0]]).unwrap();
        assert_eq!(btv_norm(&m, &img, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn btv_is_quadratic_in_contrast() {
        let img = constant_image(3, 3);
        let w = BtvWeights::new(&img, (3, 3), 0.1).unwrap();
        let m = array![[0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(w.value((&m * 2.0).view()), 4.0 * w.value(m.view()));
    }

    #[test]
    fn btv_weights_cut_across_edges() {
        // left half black, right half white: the middle pair carries almost no weight
        let mut px = Array3::zeros((2, 4, 1));
        px.slice_mut(ndarray::s![.., 2.., ..]).fill(1.0);
        let img = Image::new(px).unwrap();
        let m = Mask::new(array![[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!(btv_norm(&m, &img, 0.1).unwrap() < 1e-40);
    }

    #[test]
    fn btv_gradient_matches_finite_differences() {
        let mut px = Array3::zeros((5, 6, 1));
        for ((y, x, _), v) in px.indexed_iter_mut() {
            *v = ((y * 7 + x * 3) % 5) as f64 / 8.0;
        }
        let img = Image::new(px).unwrap();
        let w = BtvWeights::new(&img, (5, 6), 0.3).unwrap();
        let m = Array2::from_shape_fn((5, 6), |(y, x)| ((y * 5 + x * 11) % 7) as f64 / 7.0);
        let g = w.gradient(m.view());
        for idx in [(0, 0), (2, 3), (4, 5), (1, 4)] {
            let mut p = m.clone();
            let mut q = m.clone();
            p[idx] += 1e-6;
            q[idx] -= 1e-6;
            let fd = (w.value(p.view()) - w.value(q.view())) / 2e-6;
            assert!((fd - g[idx]).abs() < 1e-6);
        }
    }

    fn planted() -> (ToyModel, ScorableSample, BaselineImage) {
        let shape = (16, 16, 3);
        let mut emission = ndarray::Array2::zeros((4, 1));
        emission[[2, 0]] = 6.0;
        let model = ToyModel::new(shape, vec![Window::new(4, 4, 6, 6)], emission)
            .unwrap()
            .with_bias(Array1::from(vec![0.0, 0.0, -2.0, 0.0]))
            .unwrap();
        let mut px = Array3::from_elem(shape, 0.1);
        px.slice_mut(ndarray::s![4..10, 4..10, ..]).fill(0.9);
        let image = Image::new(px).unwrap();
        let baseline = make_baseline(&image, BaselineKind::Blurred, 10.0, 0).unwrap();
        (model, ScorableSample::new(image, "q", vec![0, 1, 2]), baseline)
    }

    fn small_config() -> OptimizationConfig {
        OptimizationConfig {
            mask_resolution: (8, 8),
            ..OptimizationConfig::default()
        }
    }

    #[test]
    fn all_ones_mask_terms() {
        let (model, sample, baseline) = planted();
        let config = small_config();
        let b = objective_single(&model, &sample, &baseline, &Mask::ones(8, 8), &[2], &config, 0).unwrap();
        let f_i = prediction_score(&model, &sample.image, "q", &[0, 1, 2], &[2]).unwrap();
        let f_b = prediction_score(&model, &baseline.image, "q", &[0, 1, 2], &[2]).unwrap();
        assert_eq!((b.deletion_term, b.insertion_term), (f_i, f_b));
        assert_eq!((b.l1, b.l2_decayed, b.btv), (0.0, 0.0, 0.0));
    }

    #[test]
    fn all_zeros_mask_terms() {
        let (model, sample, baseline) = planted();
        let config = small_config();
        let zeros = Mask::filled(8, 8, 0.0).unwrap();
        let b = objective_single(&model, &sample, &baseline, &zeros, &[2], &config, 0).unwrap();
        let f_i = prediction_score(&model, &sample.image, "q", &[0, 1, 2], &[2]).unwrap();
        let f_b = prediction_score(&model, &baseline.image, "q", &[0, 1, 2], &[2]).unwrap();
        assert_eq!((b.deletion_term, b.insertion_term), (f_b, f_i));
        assert_eq!((b.l1, b.l2_decayed, b.btv), (1.0, 1.0, 0.0));
        let expected = f_b - f_i + config.lambda1 + config.lambda2;
        assert!((b.total - expected).abs() < 1e-9);
    }

    #[test]
    fn decay_factor_at_step_ten() {
        let (model, sample, baseline) = planted();
        let config = small_config();
        let m = Mask::new(Array2::from_shape_fn((8, 8), |(y, x)| ((y + 2 * x) % 5) as f64 / 4.0)).unwrap();
        let b = objective_single(&model, &sample, &baseline, &m, &[2], &config, 10).unwrap();
        let expected = (-2.0f64).exp() * l2_rms(m.values());
        assert!((b.l2_decayed - expected).abs() < 1e-12);
    }

    #[test]
    fn optimizer_rejects_gradient_free_adapters_and_wrong_mode() {
        let (model, sample, baseline) = planted();
        let config = OptimizationConfig {
            mode: OptimizationMode::SeparateMasks,
            ..small_config()
        };
        assert!(matches!(
            optimize_single_mask(&model, &sample, &baseline, &[2], &config),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn large_l1_keeps_the_mask_whole() {
        // no image signal: the emission is identically zero
        let shape = (16, 16, 3);
        let model = ToyModel::uniform(shape, 4).unwrap();
        let (_, sample, baseline) = planted();
        let config = OptimizationConfig {
            lambda1: 1e6,
            ..small_config()
        };
        let trace = optimize_single_mask(&model, &sample, &baseline, &[2], &config).unwrap();
        assert!(trace.final_mask.mean() >= 0.99);
        let _ = shape;
    }

    #[test]
    fn planted_region_is_recovered() {
        let (model, sample, baseline) = planted();
        let trace = optimize_single_mask(&model, &sample, &baseline, &[2], &small_config()).unwrap();
        let heat = trace.heatmap();
        // the window covers mask cells 2..5 on the 8x8 grid
        let inside = heat.values().slice(ndarray::s![2..5, 2..5]).mean().unwrap();
        let total = heat.values().sum();
        let outside = (total - inside * 9.0) / 55.0;
        assert!(inside - outside >= 0.3, "inside {inside} outside {outside}");
    }

    #[test]
    fn objective_is_monotone_without_l2() {
        let (model, sample, baseline) = planted();
        let config = OptimizationConfig {
            lambda2: 0.0,
            ..small_config()
        };
        let trace = optimize_single_mask(&model, &sample, &baseline, &[2], &config).unwrap();
        for w in trace.steps.windows(2) {
            assert!(w[1].total <= w[0].total);
        }
    }

    #[test]
    fn final_mask_reproduces_last_entry() {
        let (model, sample, baseline) = planted();
        let config = small_config();
        let trace = optimize_single_mask(&model, &sample, &baseline, &[2], &config).unwrap();
        let last = trace.steps.last().unwrap();
        let again =
            objective_single(&model, &sample, &baseline, &trace.final_mask, &[2], &config, last.step).unwrap();
        assert!((again.total - last.total).abs() < 1e-9);
        assert!(trace.steps.len() <= config.steps);
        let back: Vec<ObjectiveBreakdown> = trace
            .to_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, trace.steps);
    }

    #[test]
    fn separate_masks_start_whole_and_localize() {
        let (model, sample, baseline) = planted();
        let config = OptimizationConfig {
            mode: OptimizationMode::SeparateMasks,
            steps: 1,
            step_size: 1e-300,
            ..small_config()
        };
        let ones = Mask::ones(8, 8);
        let b = objective_separate(&model, &sample, &baseline, (&ones, &ones), &[2], &config, 0).unwrap();
        assert_eq!((b.l1, b.btv), (0.0, 0.0));

        let config = OptimizationConfig {
            mode: OptimizationMode::SeparateMasks,
            ..small_config()
        };
        let trace = optimize_separate_masks(&model, &sample, &baseline, &[2], &config).unwrap();
        let (mx, my) = trace.component_masks.clone().unwrap();
        assert_eq!(trace.final_mask.values(), &mx.values() * &my.values());
        let heat = trace.heatmap();
        let inside = heat.values().slice(ndarray::s![2..5, 2..5]).mean().unwrap();
        let outside = (heat.values().sum() - inside * 9.0) / 55.0;
        assert!(inside > outside);
    }
}

//! Perturbation operator, baseline images, mask resampling and the
//! differentiable multi-resolution crop.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BaselineImage, BaselineKind, Image, Mask};

pub const DEFAULT_BLUR_SIGMA: f64 = 10.0;

/// `Φ(I, Ĩ, M) = I ⊙ M + Ĩ ⊙ (1 − M)`, with `M` broadcast over channels.
pub fn apply_mask(image: &Image, baseline: &BaselineImage, mask: &Mask) -> Result<Image> {
    blend(image, &baseline.image, mask)
}

pub(crate) fn blend(image: &Image, baseline: &Image, mask: &Mask) -> Result<Image> {
    let (h, w, c) = image.shape();
    if baseline.shape() != image.shape() {
        return Err(Error::shape(image.shape(), baseline.shape()));
    }
    if mask.shape() != (h, w) {
        return Err(Error::shape((h, w), mask.shape()));
    }
    let m = mask.values();
    let i = image.pixels();
    let b = baseline.pixels();
    let out = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let mv = m[[y, x]];
        let v = i[[y, x, ch]] * mv + b[[y, x, ch]] * (1.0 - mv);
        // rounding can step one ulp outside the convex hull
        v.clamp(0.0, 1.0)
    });
    Image::new(out)
}

/// Builds the baseline image of the requested kind.
pub fn make_baseline(
    image: &Image,
    kind: BaselineKind,
    blur_sigma: f64,
    seed: u64,
) -> Result<BaselineImage> {
    let (h, w, c) = image.shape();
    let (pixels, seed, sigma) = match kind {
        BaselineKind::Blank => (Array3::zeros((h, w, c)), None, None),
        BaselineKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>()),
                Some(seed),
                None,
            )
        }
        BaselineKind::Blurred => {
            if !(blur_sigma > 0.0 && blur_sigma.is_finite()) {
                return Err(Error::InvalidConfig("blur sigma must be positive".into()));
            }
            (gaussian_blur(image, blur_sigma), None, Some(blur_sigma))
        }
    };
    Ok(BaselineImage {
        image: Image::new(pixels)?,
        kind,
        seed,
        blur_sigma: sigma,
    })
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

fn gaussian_blur(image: &Image, sigma: f64) -> Array3<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let src = image.pixels();
    let (h, w, c) = image.shape();
    let mut rows = Array3::<f64>::zeros((h, w, c));
    for ((y, x, ch), out) in rows.indexed_iter_mut() {
        *out = kernel
            .iter()
            .enumerate()
            .map(|(k, t)| t * src[[reflect_index(y as i64 + k as i64 - radius, h), x, ch]])
            .sum();
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for ((y, x, ch), o) in out.indexed_iter_mut() {
        let v: f64 = kernel
            .iter()
            .enumerate()
            .map(|(k, t)| t * rows[[y, reflect_index(x as i64 + k as i64 - radius, w), ch]])
            .sum();
        *o = v.clamp(0.0, 1.0);
    }
    out
}

/// Linear interpolation tap `(lo, hi, weight_hi)`.
type Tap = (usize, usize, f64);

/// Taps for resampling the input segment `[start, start + len)` onto `n_out`
/// samples, half-pixel centers.
fn axis_taps(start: usize, len: usize, n_out: usize) -> Vec<Tap> {
    let last = (start + len - 1) as f64;
    (0..n_out)
        .map(|i| {
            let src = (start as f64 + (i as f64 + 0.5) * len as f64 / n_out as f64 - 0.5)
                .clamp(start as f64, last);
            let lo = src.floor();
            let hi = (lo + 1.0).min(last);
            (lo as usize, hi as usize, src - lo)
        })
        .collect()
}

fn resample_plane(
    input: ArrayView2<'_, f64>,
    ty: &[Tap],
    tx: &[Tap],
) -> Array2<f64> {
    Array2::from_shape_fn((ty.len(), tx.len()), |(y, x)| {
        let (y0, y1, wy) = ty[y];
        let (x0, x1, wx) = tx[x];
        (1.0 - wy) * ((1.0 - wx) * input[[y0, x0]] + wx * input[[y0, x1]])
            + wy * ((1.0 - wx) * input[[y1, x0]] + wx * input[[y1, x1]])
    })
}

/// Transpose of [`resample_plane`], accumulated into `acc`.
fn resample_plane_adjoint(
    grad: ArrayView2<'_, f64>,
    ty: &[Tap],
    tx: &[Tap],
    acc: &mut ndarray::ArrayViewMut2<'_, f64>,
) {
    for ((y, x), g) in grad.indexed_iter() {
        let (y0, y1, wy) = ty[y];
        let (x0, x1, wx) = tx[x];
        acc[[y0, x0]] += g * (1.0 - wy) * (1.0 - wx);
        acc[[y0, x1]] += g * (1.0 - wy) * wx;
        acc[[y1, x0]] += g * wy * (1.0 - wx);
        acc[[y1, x1]] += g * wy * wx;
    }
}

/// Bilinear upsampling of a low-resolution mask (corner alignment off).
pub fn upsample_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    Mask::clipped(upsample_values(mask.values(), target)?)
}

pub(crate) fn upsample_values(values: ArrayView2<'_, f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = values.dim();
    let (th, tw) = target;
    if h > th || w > tw || th == 0 || tw == 0 {
        return Err(Error::shape(format!("target at least {h}x{w}"), target));
    }
    Ok(resample_plane(values, &axis_taps(0, h, th), &axis_taps(0, w, tw)))
}

/// Adjoint of the upsampling map: pulls a full-resolution gradient back onto
/// the low-resolution grid.
pub fn upsample_adjoint(grad: ArrayView2<'_, f64>, low: (usize, usize)) -> Array2<f64> {
    let (th, tw) = grad.dim();
    let mut acc = Array2::zeros(low);
    resample_plane_adjoint(
        grad,
        &axis_taps(0, low.0, th),
        &axis_taps(0, low.1, tw),
        &mut acc.view_mut(),
    );
    acc
}

/// Area-weighted downsampling of a plane onto an `(h, w)` grid.
pub fn area_downsample(input: ArrayView2<'_, f64>, target: (usize, usize)) -> Array2<f64> {
    fn weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
                (a.floor() as usize..(b.ceil() as usize).min(n_in))
                    .filter_map(|i| {
                        let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                        (overlap > 0.0).then_some((i, overlap / scale))
                    })
                    .collect()
            })
            .collect()
    }
    let (h, w) = input.dim();
    let wy = weights(h, target.0);
    let wx = weights(w, target.1);
    Array2::from_shape_fn(target, |(y, x)| {
        wy[y].iter()
            .flat_map(|&(iy, ay)| wx[x].iter().map(move |&(ix, ax)| ay * ax * input[[iy, ix]]))
            .sum()
    })
}

/// Rectangle `(top, left, height, width)` in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Patch {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.top, self.left, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropLayout {
    pub patches: Vec<Patch>,
    pub target_resolution: (usize, usize),
}

impl CropLayout {
    /// A full-image base patch followed by a grid whose row and column counts
    /// follow the image aspect ratio (at most `max_tiles` per side).
    pub fn default_for(height: usize, width: usize, target: (usize, usize), max_tiles: usize) -> Self {
        let count = |extent: usize, tile: usize| {
            ((extent as f64 / tile.max(1) as f64).round() as usize).clamp(1, max_tiles.max(1))
        };
        let rows = count(height, target.0).min(height);
        let cols = count(width, target.1).min(width);
        let mut patches = vec![Patch::new(0, 0, height, width)];
        for r in 0..rows {
            let (y0, y1) = (r * height / rows, (r + 1) * height / rows);
            for c in 0..cols {
                let (x0, x1) = (c * width / cols, (c + 1) * width / cols);
                patches.push(Patch::new(y0, x0, y1 - y0, x1 - x0));
            }
        }
        Self {
            patches,
            target_resolution: target,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.target_resolution.0 == 0 || self.target_resolution.1 == 0 {
            return Err(Error::InvalidConfig("target resolution must be positive".into()));
        }
        for p in &self.patches {
            if p.height == 0 || p.width == 0 || p.top + p.height > height || p.left + p.width > width {
                return Err(Error::OutOfBounds(p.as_tuple()));
            }
        }
        Ok(())
    }

    fn taps(&self, p: &Patch) -> (Vec<Tap>, Vec<Tap>) {
        (
            axis_taps(p.top, p.height, self.target_resolution.0),
            axis_taps(p.left, p.width, self.target_resolution.1),
        )
    }
}

/// Crops every patch of `layout` and resizes it bilinearly to the layout's
/// target resolution. The map is linear in the input pixels.
pub fn crop_multires(image: &Image, layout: &CropLayout) -> Result<Vec<Image>> {
    let (h, w, c) = image.shape();
    layout.validate(h, w)?;
    let (th, tw) = layout.target_resolution;
    let px = image.pixels();
    layout
        .patches
        .iter()
        .map(|p| {
            let (ty, tx) = layout.taps(p);
            let mut out = Array3::zeros((th, tw, c));
            for ch in 0..c {
                let plane = resample_plane(px.index_axis(Axis(2), ch), &ty, &tx);
                out.index_axis_mut(Axis(2), ch)
                    .assign(&plane.mapv(|v| v.clamp(0.0, 1.0)));
            }
            Image::new(out)
        })
        .collect()
}

/// Applies the crop geometry of `layout` to a full-resolution mask.
pub fn crop_mask(mask: &Mask, layout: &CropLayout) -> Result<Vec<Mask>> {
    let (h, w) = mask.shape();
    layout.validate(h, w)?;
    layout
        .patches
        .iter()
        .map(|p| {
            let (ty, tx) = layout.taps(p);
            Mask::clipped(resample_plane(mask.values(), &ty, &tx))
        })
        .collect()
}

/// Vector-Jacobian product of [`crop_multires`]: maps per-patch gradients back
/// onto an `(H, W, C)` image gradient.
pub fn crop_multires_adjoint(
    patch_grads: &[Array3<f64>],
    layout: &CropLayout,
    shape: (usize, usize, usize),
) -> Result<Array3<f64>> {
    let (h, w, c) = shape;
    layout.validate(h, w)?;
    if patch_grads.len() != layout.patches.len() {
        return Err(Error::shape(layout.patches.len(), patch_grads.len()));
    }
    let (th, tw) = layout.target_resolution;
    let mut acc = Array3::zeros(shape);
    for (p, g) in layout.patches.iter().zip(patch_grads) {
        if g.dim() != (th, tw, c) {
            return Err(Error::shape((th, tw, c), g.dim()));
        }
        let (ty, tx) = layout.taps(p);
        for ch in 0..c {
            let mut plane = acc.index_axis_mut(Axis(2), ch);
            resample_plane_adjoint(g.index_axis(Axis(2), ch), &ty, &tx, &mut plane);
        }
    }
    Ok(acc)
}

/// Per-patch perturbation for multi-resolution encoders: image, baseline and
/// mask go through the same crop before blending.
pub fn apply_mask_multires(
    image: &Image,
    baseline: &BaselineImage,
    mask: &Mask,
    layout: &CropLayout,
) -> Result<Vec<Image>> {
    let images = crop_multires(image, layout)?;
    let baselines = crop_multires(&baseline.image, layout)?;
    let masks = crop_mask(mask, layout)?;
    images
        .iter()
        .zip(&baselines)
        .zip(&masks)
        .map(|((i, b), m)| blend(i, b, m))
        .collect()
}

/// One perturbed image shared by all `encoder_count` encoders.
pub fn apply_mask_multiencoder(
    image: &Image,
    baseline: &BaselineImage,
    mask: &Mask,
    encoder_count: usize,
) -> Result<Vec<Arc<Image>>> {
    if encoder_count == 0 {
        return Err(Error::InvalidConfig("encoder_count must be positive".into()));
    }
    let shared = Arc::new(apply_mask(image, baseline, mask)?);
    Ok(vec![shared; encoder_count])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest, Strategy};

    fn rand_image(shape: (usize, usize, usize), seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn(shape, |_| rng.random::<f64>())).unwrap()
    }

    fn baseline(image: Image) -> BaselineImage {
        BaselineImage {
            image,
            kind: BaselineKind::Noise,
            seed: Some(0),
            blur_sigma: None,
        }
    }

    #[test]
    fn mask_identities() {
        let i = rand_image((5, 4, 3), 1);
        let b = baseline(rand_image((5, 4, 3), 2));
        assert_eq!(apply_mask(&i, &b, &Mask::ones(5, 4)).unwrap(), i);
        assert_eq!(apply_mask(&i, &b, &Mask::filled(5, 4, 0.0).unwrap()).unwrap(), b.image);
        let i = Image::filled(1, 1, 1, 0.8).unwrap();
        let b = baseline(Image::filled(1, 1, 1, 0.2).unwrap());
        let out = apply_mask(&i, &b, &Mask::filled(1, 1, 0.5).unwrap()).unwrap();
        assert!((out.pixels()[[0, 0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mask_shape_is_checked() {
        let i = rand_image((5, 4, 3), 1);
        let b = baseline(rand_image((5, 4, 3), 2));
        assert!(matches!(
            apply_mask(&i, &b, &Mask::ones(4, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn blank_and_noise_baselines() {
        let img = rand_image((6, 6, 3), 3);
        let blank = make_baseline(&img, BaselineKind::Blank, 1.0, 0).unwrap();
        assert!(blank.image.pixels().iter().all(|v| *v == 0.0));
        let n1 = make_baseline(&img, BaselineKind::Noise, 1.0, 42).unwrap();
        let n2 = make_baseline(&img, BaselineKind::Noise, 1.0, 42).unwrap();
        let n3 = make_baseline(&img, BaselineKind::Noise, 1.0, 43).unwrap();
        assert_eq!(n1, n2);
        assert_ne!(n1.image, n3.image);
        assert_eq!(n1.seed, Some(42));
        assert_eq!("static".parse::<BaselineKind>(), Err(Error::UnknownKind("static".into())));
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(7, 9, 3, 0.37).unwrap();
        let out = make_baseline(&img, BaselineKind::Blurred, 10.0, 0).unwrap();
        for v in out.image.pixels() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    /// Dense 2-D convolution with an explicit 2-D kernel and reflected borders.
    fn dense_blur_oracle(img: &Image, sigma: f64) -> Array3<f64> {
        let r = (4.0 * sigma).ceil() as i64;
        let mut k2 = Array2::zeros(((2 * r + 1) as usize, (2 * r + 1) as usize));
        for ((a, b), v) in k2.indexed_iter_mut() {
            let (dy, dx) = (a as f64 - r as f64, b as f64 - r as f64);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
        let total = k2.sum();
        k2 /= total;
        let (h, w, c) = img.shape();
        let px = img.pixels();
        Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            let mut acc = 0.0;
            for ((a, b), kv) in k2.indexed_iter() {
                let sy = reflect_index(y as i64 + a as i64 - r, h);
                let sx = reflect_index(x as i64 + b as i64 - r, w);
                acc += kv * px[[sy, sx, ch]];
            }
            acc
        })
    }

    #[test]
    fn blur_of_single_bright_pixel_matches_dense_oracle() {
        let sigma = 2.0;
        let mut px = Array3::zeros((21, 21, 1));
        px[[10, 10, 0]] = 1.0;
        let img = Image::new(px).unwrap();
        let out = make_baseline(&img, BaselineKind::Blurred, sigma, 0).unwrap();
        let oracle = dense_blur_oracle(&img, sigma);
        for (a, b) in out.image.pixels().iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let g = gaussian_kernel(sigma);
        let center = g[g.len() / 2] * g[g.len() / 2];
        assert!((out.image.pixels()[[10, 10, 0]] - center).abs() < 1e-14);
        // kernel radius 8 reaches no border from the centre of a 21x21 image
        let total: f64 = out.image.pixels().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_on_image_smaller_than_kernel() {
        let img = rand_image((4, 3, 3), 9);
        let out = make_baseline(&img, BaselineKind::Blurred, 10.0, 0).unwrap();
        let oracle = dense_blur_oracle(&img, 10.0);
        for (a, b) in out.image.pixels().iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_and_identity() {
        let m = Mask::filled(3, 4, 0.3).unwrap();
        let up = upsample_mask(&m, (9, 13)).unwrap();
        assert!(up.values().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let r = Mask::new(array![[0.1, 0.9], [0.4, 0.6]]).unwrap();
        assert_eq!(upsample_mask(&r, (2, 2)).unwrap(), r);
        assert!(upsample_mask(&r, (1, 4)).is_err());
    }

    #[test]
    fn upsample_ramp_matches_hand_weights() {
        let m = Mask::new(array![[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let up = upsample_mask(&m, (2, 4)).unwrap();
        // source x positions: -0.25 → 0, 0.25, 0.75, 1.25 → 1
        let expected = [0.0, 0.25, 0.75, 1.0];
        for row in up.values().rows() {
            for (v, e) in row.iter().zip(expected) {
                assert!((v - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let low = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>());
        let g = Array2::from_shape_fn((7, 11), |_| rng.random::<f64>() - 0.5);
        let lhs = (upsample_values(low.view(), (7, 11)).unwrap() * &g).sum();
        let rhs = (upsample_adjoint(g.view(), (3, 5)) * &low).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let a = array![[1.0, 3.0, 0.0, 0.0], [1.0, 3.0, 2.0, 2.0]];
        let d = area_downsample(a.view(), (1, 2));
        assert!((d[[0, 0]] - 2.0).abs() < 1e-15);
        assert!((d[[0, 1]] - 1.0).abs() < 1e-15);
        // equal-area cells preserve the mean
        let uneven = area_downsample(a.view(), (2, 3));
        assert!((uneven.mean().unwrap() - a.mean().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn crop_identity_and_constant() {
        let img = rand_image((6, 5, 3), 5);
        let full = CropLayout {
            patches: vec![Patch::new(0, 0, 6, 5)],
            target_resolution: (6, 5),
        };
        assert_eq!(crop_multires(&img, &full).unwrap()[0], img);
        let c = Image::filled(8, 8, 3, 0.6).unwrap();
        let layout = CropLayout::default_for(8, 8, (3, 3), 3);
        for p in crop_multires(&c, &layout).unwrap() {
            assert!(p.pixels().iter().all(|v| (v - 0.6).abs() < 1e-15));
        }
    }

    #[test]
    fn checkerboard_quadrants() {
        let px = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| ((y + x) % 2) as f64);
        let img = Image::new(px).unwrap();
        let layout = CropLayout {
            patches: vec![
                Patch::new(0, 0, 2, 2),
                Patch::new(0, 2, 2, 2),
                Patch::new(2, 0, 2, 2),
                Patch::new(2, 2, 2, 2),
            ],
            target_resolution: (2, 2),
        };
        let out = crop_multires(&img, &layout).unwrap();
        for (p, patch) in layout.patches.iter().zip(&out) {
            for y in 0..2 {
                for x in 0..2 {
                    let expect = ((p.top + y + p.left + x) % 2) as f64;
                    assert_eq!(patch.pixels()[[y, x, 0]], expect);
                }
            }
        }
        // 4x4 to 2x2 in one patch: every sample sits midway between four
        // pixels of the checkerboard, two black and two white
        let down = CropLayout {
            patches: vec![Patch::new(0, 0, 4, 4)],
            target_resolution: (2, 2),
        };
        let out = crop_multires(&img, &down).unwrap();
        assert!(out[0].pixels().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn crop_out_of_bounds() {
        let img = rand_image((4, 4, 1), 1);
        let layout = CropLayout {
            patches: vec![Patch::new(2, 2, 3, 2)],
            target_resolution: (2, 2),
        };
        assert_eq!(crop_multires(&img, &layout), Err(Error::OutOfBounds((2, 2, 3, 2))));
    }

    #[test]
    fn default_layout_covers_image() {
        for (h, w) in [(10, 10), (9, 17), (30, 7)] {
            let layout = CropLayout::default_for(h, w, (4, 4), 3);
            layout.validate(h, w).unwrap();
            let mut covered = Array2::from_elem((h, w), false);
            for p in &layout.patches[1..] {
                covered
                    .slice_mut(ndarray::s![p.top..p.top + p.height, p.left..p.left + p.width])
                    .fill(true);
            }
            assert!(covered.iter().all(|c| *c));
        }
    }

    #[test]
    fn crop_jacobian_matches_finite_differences() {
        let img = rand_image((7, 9, 2), 17);
        let layout = CropLayout {
            patches: vec![Patch::new(0, 0, 7, 9), Patch::new(1, 2, 5, 6)],
            target_resolution: (4, 5),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let weights: Vec<Array3<f64>> = (0..2)
            .map(|_| Array3::from_shape_fn((4, 5, 2), |_| rng.random::<f64>() - 0.5))
            .collect();
        let objective = |im: &Image| -> f64 {
            crop_multires(im, &layout)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(p, w)| (&p.pixels() * w).sum())
                .sum()
        };
        let grad = crop_multires_adjoint(&weights, &layout, (7, 9, 2)).unwrap();
        let eps = 1e-6;
        for _ in 0..15 {
            let idx = (rng.random_range(0..7), rng.random_range(0..9), rng.random_range(0..2));
            let mut p = img.pixels().to_owned();
            let mut m = p.clone();
            p[idx] = (p[idx] + eps).min(1.0);
            m[idx] = (m[idx] - eps).max(0.0);
            let h = p[idx] - m[idx];
            let fd = (objective(&Image::new(p).unwrap()) - objective(&Image::new(m).unwrap())) / h;
            assert!((fd - grad[idx]).abs() < 1e-5, "{idx:?}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn multires_masking_matches_cropping_the_blend_on_patch_grid() {
        // with target == patch size the crop is exact, so per-patch blending
        // equals cropping the full blend
        let img = rand_image((6, 6, 3), 1);
        let b = baseline(rand_image((6, 6, 3), 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = Mask::new(Array2::from_shape_fn((6, 6), |_| rng.random::<f64>())).unwrap();
        let layout = CropLayout {
            patches: vec![Patch::new(0, 0, 3, 3), Patch::new(3, 3, 3, 3)],
            target_resolution: (3, 3),
        };
        let per_patch = apply_mask_multires(&img, &b, &mask, &layout).unwrap();
        let cropped = crop_multires(&apply_mask(&img, &b, &mask).unwrap(), &layout).unwrap();
        assert_eq!(per_patch, cropped);
    }

    #[test]
    fn multiencoder_shares_one_image() {
        let img = rand_image((4, 4, 3), 1);
        let b = baseline(rand_image((4, 4, 3), 2));
        let m = Mask::filled(4, 4, 0.3).unwrap();
        let one = apply_mask_multiencoder(&img, &b, &m, 1).unwrap();
        assert_eq!(*one[0], apply_mask(&img, &b, &m).unwrap());
        let four = apply_mask_multiencoder(&img, &b, &Mask::ones(4, 4), 4).unwrap();
        assert_eq!(four.len(), 4);
        for e in &four {
            assert_eq!(**e, img);
            assert!(Arc::ptr_eq(e, &four[0]));
        }
    }

    fn image_pair_and_mask() -> impl Strategy<Value = (Image, Image, Array2<f64>, Array2<f64>)> {
        (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| {
            (
                proptest::collection::vec(0.0..=1.0f64, h * w * c),
                proptest::collection::vec(0.0..=1.0f64, h * w * c),
                proptest::collection::vec(0.0..=1.0f64, h * w),
                proptest::collection::vec(0.0..=1.0f64, h * w),
            )
                .prop_map(move |(a, b, m1, m2)| {
                    (
                        Image::new(Array3::from_shape_vec((h, w, c), a).unwrap()).unwrap(),
                        Image::new(Array3::from_shape_vec((h, w, c), b).unwrap()).unwrap(),
                        Array2::from_shape_vec((h, w), m1).unwrap(),
                        Array2::from_shape_vec((h, w), m2).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn blend_stays_between_endpoints((i, b, m, _) in image_pair_and_mask()) {
            let mask = Mask::new(m).unwrap();
            let out = blend(&i, &b, &mask).unwrap();
            for ((o, x), y) in out.pixels().iter().zip(i.pixels()).zip(b.pixels()) {
                prop_assert!(*o >= x.min(*y) && *o <= x.max(*y));
            }
        }

        #[test]
        fn blend_is_linear_in_mask((i, b, m1, m2) in image_pair_and_mask(), a in 0.0..=1.0f64) {
            let mix = Mask::new(&m1 * a + &m2 * (1.0 - a)).unwrap();
            let lhs = blend(&i, &b, &mix).unwrap();
            let o1 = blend(&i, &b, &Mask::new(m1).unwrap()).unwrap();
            let o2 = blend(&i, &b, &Mask::new(m2).unwrap()).unwrap();
            let rhs = &o1.pixels() * a + &o2.pixels() * (1.0 - a);
            for (l, r) in lhs.pixels().iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}

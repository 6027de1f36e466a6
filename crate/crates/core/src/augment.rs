//! Crop and color-jitter preprocessing for the two image branches.
//!
//! Images are `(B, T, H, W, C)` arrays in `[-0.5, 0.5]`. Crop origins and
//! jitter parameters are drawn once per sequence, so every frame of a
//! sequence sees the same transform within one branch.

use ndarray::{s, Array5, ArrayView5, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentConfig;
use crate::error::{shape_err, Result};

pub const SOURCE_HW: usize = 72;
pub const TARGET_HW: usize = 64;
pub const MAX_OFFSET: usize = SOURCE_HW - TARGET_HW;
pub const CENTER_ORIGIN: (usize, usize) = (MAX_OFFSET / 2, MAX_OFFSET / 2);

pub const BRIGHTNESS_RANGE: f32 = 0.2;
pub const CONTRAST_RANGE: f32 = 0.2;
pub const SATURATION_RANGE: f32 = 0.2;
pub const HUE_RANGE: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    /// (row, col) of the top-left corner in the 72x72 source.
    pub origin: (usize, usize),
}

impl CropSpec {
    pub fn source_hw(&self) -> (usize, usize) {
        (SOURCE_HW, SOURCE_HW)
    }

    pub fn target_hw(&self) -> (usize, usize) {
        (TARGET_HW, TARGET_HW)
    }

    /// Index of the origin in the 9x9 grid of possible origins.
    pub fn cell(&self) -> usize {
        self.origin.0 * (MAX_OFFSET + 1) + self.origin.1
    }
}

fn check_source(images: &ArrayView5<f32>) -> Result<()> {
    let (_, _, h, w, c) = images.dim();
    if (h, w, c) != (SOURCE_HW, SOURCE_HW, 3) {
        return Err(shape_err(format!("expected {SOURCE_HW}x{SOURCE_HW}x3 source images, got {h}x{w}x{c}")));
    }
    Ok(())
}

/// Copies a 64x64 window per batch item at the given origins.
pub fn crop_at(images: ArrayView5<f32>, specs: &[CropSpec]) -> Result<Array5<f32>> {
    check_source(&images)?;
    let (b, t, _, _, c) = images.dim();
    if specs.len() != b {
        return Err(shape_err(format!("{} crop specs for batch of {b}", specs.len())));
    }
    let mut out = Array5::<f32>::zeros((b, t, TARGET_HW, TARGET_HW, c));
    for (i, spec) in specs.iter().enumerate() {
        let (r, col) = spec.origin;
        if r > MAX_OFFSET || col > MAX_OFFSET {
            return Err(shape_err(format!("crop origin {:?} outside 0..={MAX_OFFSET}", spec.origin)));
        }
        out.slice_mut(s![i, .., .., .., ..])
            .assign(&images.slice(s![i, .., r..r + TARGET_HW, col..col + TARGET_HW, ..]));
    }
    Ok(out)
}

/// Draws one origin per batch item uniformly from the 81 positions.
pub fn draw_crop_specs(batch: usize, rng: &mut impl Rng) -> Vec<CropSpec> {
    (0..batch)
        .map(|_| CropSpec {
            origin: (rng.random_range(0..=MAX_OFFSET), rng.random_range(0..=MAX_OFFSET)),
        })
        .collect()
}

pub fn random_crop(images: ArrayView5<f32>, rng: &mut impl Rng) -> Result<(Array5<f32>, Vec<CropSpec>)> {
    check_source(&images)?;
    let specs = draw_crop_specs(images.dim().0, rng);
    Ok((crop_at(images, &specs)?, specs))
}

/// Fixed (4, 4) crop. With `pass_through`, inputs that are already 64x64
/// are returned unchanged.
pub fn center_crop(images: ArrayView5<f32>, pass_through: bool) -> Result<Array5<f32>> {
    let (b, _, h, w, _) = images.dim();
    if pass_through && h == TARGET_HW && w == TARGET_HW {
        return Ok(images.to_owned());
    }
    crop_at(images, &vec![CropSpec { origin: CENTER_ORIGIN }; b])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Hue rotation as a fraction of a full turn.
    pub hue: f32,
}

impl JitterParams {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    pub fn draw(strength: f64, rng: &mut impl Rng) -> Self {
        let s = strength as f32;
        let mut factor = |range: f32| 1.0 + s * range * rng.random_range(-1.0f32..=1.0);
        let brightness = factor(BRIGHTNESS_RANGE);
        let contrast = factor(CONTRAST_RANGE);
        let saturation = factor(SATURATION_RANGE);
        let hue = s * HUE_RANGE * rng.random_range(-1.0f32..=1.0);
        Self {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

fn gray(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Applies one parameter set to a single `(H, W, 3)` frame given in `[0, 1]`.
fn jitter_frame(frame: &mut [f32], params: &JitterParams) {
    let pixels = frame.len() / 3;
    for px in frame.chunks_exact_mut(3) {
        for v in px.iter_mut() {
            *v *= params.brightness;
        }
    }
    let mean = frame.chunks_exact(3).map(|p| gray([p[0], p[1], p[2]])).sum::<f32>() / pixels as f32;
    let (sin, cos) = (params.hue * std::f32::consts::TAU).sin_cos();
    for px in frame.chunks_exact_mut(3) {
        for v in px.iter_mut() {
            *v = (*v - mean) * params.contrast + mean;
        }
        let g = gray([px[0], px[1], px[2]]);
        for v in px.iter_mut() {
            *v = g + (*v - g) * params.saturation;
        }
        // hue: rotate the chroma plane of YIQ
        let y = gray([px[0], px[1], px[2]]);
        let i = 0.596 * px[0] - 0.274 * px[1] - 0.322 * px[2];
        let q = 0.211 * px[0] - 0.523 * px[1] + 0.312 * px[2];
        let (i, q) = (i * cos - q * sin, i * sin + q * cos);
        px[0] = y + 0.956 * i + 0.621 * q;
        px[1] = y - 0.272 * i - 0.647 * q;
        px[2] = y - 1.106 * i + 1.703 * q;
        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Random brightness, contrast, saturation and hue, drawn per sequence and
/// scaled by `strength`. Output is clamped to `[-0.5, 0.5]`.
pub fn color_jitter(images: ArrayView5<f32>, rng: &mut impl Rng, strength: f64) -> Array5<f32> {
    let mut out = images.to_owned();
    if strength == 0.0 {
        return out;
    }
    for mut seq in out.axis_iter_mut(Axis(0)) {
        let params = JitterParams::draw(strength, rng);
        for mut frame in seq.axis_iter_mut(Axis(0)) {
            let data = frame.as_slice_mut().expect("standard layout");
            for v in data.iter_mut() {
                *v += 0.5;
            }
            jitter_frame(data, &params);
            for v in data.iter_mut() {
                *v -= 0.5;
            }
        }
    }
    out
}

/// Independent random streams for the two preprocessors.
pub struct BranchRngs {
    pub online: ChaCha8Rng,
    pub target: ChaCha8Rng,
}

/// Runs one preprocessor: random or center crop, then optional jitter.
pub fn preprocess(images: ArrayView5<f32>, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Array5<f32>> {
    let cropped = if config.crop {
        random_crop(images, rng)?.0
    } else {
        center_crop(images, false)?
    };
    Ok(if config.jitter {
        color_jitter(cropped.view(), rng, config.jitter_strength)
    } else {
        cropped
    })
}

/// Deterministic preprocessing for acting and evaluation.
pub fn evaluation_view(images: ArrayView5<f32>) -> Result<Array5<f32>> {
    center_crop(images, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(b: usize, t: usize) -> Array5<f32> {
        Array5::from_shape_fn((b, t, SOURCE_HW, SOURCE_HW, 3), |(i, j, r, c, ch)| {
            ((i * 7 + j * 13 + r * 72 + c) as f32 * 0.001 + ch as f32 * 0.01).sin() * 0.5
        })
    }

    #[test]
    fn origin_zero_is_top_left_window() {
        let img = ramp(1, 2);
        let out = crop_at(img.view(), &[CropSpec { origin: (0, 0) }]).unwrap();
        assert_eq!(out, img.slice(s![.., .., 0..64, 0..64, ..]).to_owned());
    }

    #[test]
    fn crop_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, specs) = random_crop(ramp(3, 4).view(), &mut rng).unwrap();
        assert_eq!(out.dim(), (3, 4, 64, 64, 3));
        assert_eq!(specs.len(), 3);
    }

    #[test]
    fn crop_is_constant_across_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Array5::from_shape_fn((2, 3, 72, 72, 3), |(_, _, r, c, ch)| (r * 1000 + c * 10 + ch) as f32);
        let (out, specs) = random_crop(img.view(), &mut rng).unwrap();
        for (i, spec) in specs.iter().enumerate() {
            for t in 0..3 {
                let v = out[[i, t, 0, 0, 0]];
                assert_eq!(v, (spec.origin.0 * 1000 + spec.origin.1 * 10) as f32);
            }
        }
    }

    #[test]
    fn wrong_source_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Array5::<f32>::zeros((1, 1, 64, 64, 3));
        assert!(random_crop(img.view(), &mut rng).is_err());
        assert!(center_crop(img.view(), false).is_err());
    }

    #[test]
    fn center_crop_uses_fixed_origin_and_passes_through() {
        let img = ramp(1, 1);
        let out = center_crop(img.view(), false).unwrap();
        assert_eq!(out, img.slice(s![.., .., 4..68, 4..68, ..]).to_owned());
        let again = center_crop(out.view(), true).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn zero_strength_jitter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ramp(2, 2);
        assert_eq!(color_jitter(img.view(), &mut rng, 0.0), img);
    }

    #[test]
    fn jitter_stays_in_range_and_replays() {
        let img = ramp(2, 3);
        let a = color_jitter(img.view(), &mut ChaCha8Rng::seed_from_u64(9), 1.0);
        let b = color_jitter(img.view(), &mut ChaCha8Rng::seed_from_u64(9), 1.0);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-0.5..=0.5).contains(v)));
        assert_ne!(a, img);
    }

    #[test]
    fn identity_jitter_params_leave_frame_nearly_unchanged() {
        let mut frame: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        let orig = frame.clone();
        jitter_frame(&mut frame, &JitterParams::identity());
        for (a, b) in frame.iter().zip(orig) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

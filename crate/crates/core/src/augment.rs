//! Weak and strong augmentation with shared geometry.
//!
//! Weak views get a horizontal flip and a Gaussian blur; strong views add
//! color jitter on top of the same weak parameters, so teacher and student
//! views of one sample stay pixel-aligned. Geometric operations (crop, flip)
//! touch image and masks together; photometric ones touch the image only.

use rand::Rng as _;

use crate::domain::{Image, MaskGrid, Sample, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Multiplicative color jitter factors; all 1.0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Jitter::IDENTITY
    }
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::IDENTITY
    }
}

/// Pixel rectangle `[x, x + w) × [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    pub flip: bool,
    /// 0 skips the blur.
    pub gaussian_sigma: f64,
    pub jitter: Jitter,
    pub crop: Option<CropBox>,
}

impl AugParams {
    pub const IDENTITY: AugParams = AugParams {
        flip: false,
        gaussian_sigma: 0.0,
        jitter: Jitter::IDENTITY,
        crop: None,
    };

    /// True when the geometric parts (flip, crop) agree.
    pub fn same_geometry(&self, other: &AugParams) -> bool {
        self.flip == other.flip && self.crop == other.crop
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let j = self.jitter;
        if !(j.brightness > 0.0 && j.contrast > 0.0 && j.saturation > 0.0) {
            return Err(Error::spec("jitter scales must be positive"));
        }
        if self.gaussian_sigma.is_nan() || self.gaussian_sigma < 0.0 {
            return Err(Error::spec("gaussian sigma must be nonnegative"));
        }
        if let Some(c) = self.crop {
            if c.w == 0 || c.h == 0 || c.x + c.w > width || c.y + c.h > height {
                return Err(Error::spec(format!("crop {c:?} outside {height}x{width}")));
            }
        }
        Ok(())
    }
}

/// Which augmentations are enabled and their magnitude ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    pub gaussian: bool,
    pub flip: bool,
    pub crop: bool,
    /// Color jitter in the strong view.
    pub jitter: bool,
    /// Per-augmentation application probability.
    pub prob: f64,
    pub sigma_range: (f64, f64),
    pub jitter_range: (f64, f64),
    /// Crop side as a fraction of the image side.
    pub crop_scale: (f64, f64),
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy {
            gaussian: true,
            flip: true,
            crop: false,
            jitter: true,
            prob: 0.5,
            sigma_range: (0.1, 2.0),
            jitter_range: (0.6, 1.4),
            crop_scale: (0.6, 1.0),
        }
    }
}

impl AugPolicy {
    /// Policy with every augmentation disabled.
    pub fn none() -> Self {
        AugPolicy {
            gaussian: false,
            flip: false,
            crop: false,
            jitter: false,
            ..AugPolicy::default()
        }
    }

    /// Draws weak (teacher-view) parameters for an image of the given size.
    pub fn sample_weak(&self, height: usize, width: usize, rng: &mut Rng) -> AugParams {
        let flip = self.flip && rng.gen_bool(self.prob);
        let gaussian_sigma = if self.gaussian && rng.gen_bool(self.prob) {
            rng.gen_range(self.sigma_range.0..=self.sigma_range.1)
        } else {
            0.0
        };
        let crop = if self.crop && rng.gen_bool(self.prob) {
            let (lo, hi) = self.crop_scale;
            let h = ((height as f64 * rng.gen_range(lo..=hi)).round() as usize).clamp(1, height);
            let w = ((width as f64 * rng.gen_range(lo..=hi)).round() as usize).clamp(1, width);
            Some(CropBox {
                y: rng.gen_range(0..=height - h),
                x: rng.gen_range(0..=width - w),
                h,
                w,
            })
        } else {
            None
        };
        AugParams {
            flip,
            gaussian_sigma,
            jitter: Jitter::IDENTITY,
            crop,
        }
    }

    /// Adds photometric strength on top of `params`; geometry is kept.
    pub fn strengthen(&self, params: &AugParams, rng: &mut Rng) -> AugParams {
        let prob = if self.jitter { self.prob } else { 0.0 };
        strengthen_with(params, prob, self.jitter_range, rng)
    }
}

/// Weak parameters under the default policy (no crop).
pub fn sample_weak_params(rng: &mut Rng) -> AugParams {
    let policy = AugPolicy::default();
    AugParams {
        crop: None,
        ..policy.sample_weak(1, 1, rng)
    }
}

/// Strong parameters under the default policy.
pub fn strengthen(params: &AugParams, rng: &mut Rng) -> AugParams {
    AugPolicy::default().strengthen(params, rng)
}

/// Activates color jitter with probability `prob`, scales drawn from `range`.
pub fn strengthen_with(
    params: &AugParams,
    prob: f64,
    range: (f64, f64),
    rng: &mut Rng,
) -> AugParams {
    let mut out = *params;
    if prob > 0.0 && rng.gen_bool(prob) {
        out.jitter = Jitter {
            brightness: rng.gen_range(range.0..=range.1),
            contrast: rng.gen_range(range.0..=range.1),
            saturation: rng.gen_range(range.0..=range.1),
        };
    }
    out
}

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized 1-D Gaussian kernel of radius ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let (h, w) = image.dims();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;

    let mut tmp = image.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - radius, w);
                    acc += kv * image.get(y, sx, c);
                }
                tmp.set(y, x, c, acc);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - radius, h);
                    acc += kv * tmp.get(sy, x, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

fn color_jitter(image: &mut Image, j: Jitter) {
    let data = image.as_mut_slice();
    if j.brightness != 1.0 {
        data.iter_mut().for_each(|v| *v *= j.brightness);
    }
    if j.contrast != 1.0 {
        let n = (data.len() / CHANNELS) as f64;
        let mut mean = [0.0; CHANNELS];
        for px in data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                mean[c] += px[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for px in data.chunks_exact_mut(CHANNELS) {
            for c in 0..CHANNELS {
                px[c] = mean[c] + j.contrast * (px[c] - mean[c]);
            }
        }
    }
    if j.saturation != 1.0 {
        for px in data.chunks_exact_mut(CHANNELS) {
            let gray = px.iter().sum::<f64>() / CHANNELS as f64;
            px.iter_mut()
                .for_each(|v| *v = gray + j.saturation * (*v - gray));
        }
    }
}

/// Source pixel for output pixel `(y, x)` under the geometric part of `params`.
///
/// Crops are resized back to the full size by nearest neighbor, so output
/// dims always equal input dims.
#[inline]
fn preimage(params: &AugParams, height: usize, width: usize, y: usize, x: usize) -> (usize, usize) {
    let x = if params.flip { width - 1 - x } else { x };
    match params.crop {
        None => (y, x),
        Some(c) => (c.y + y * c.h / height, c.x + x * c.w / width),
    }
}

/// Applies only the geometric part of `params` to an image.
pub fn apply_geometry_image(image: &Image, params: &AugParams) -> Image {
    if !params.flip && params.crop.is_none() {
        return image.clone();
    }
    let (h, w) = image.dims();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = preimage(params, h, w, y, x);
            for c in 0..CHANNELS {
                out.set(y, x, c, image.get(sy, sx, c));
            }
        }
    }
    out
}

/// Applies the geometric part of `params` to a mask.
pub fn apply_mask(mask: &MaskGrid, params: &AugParams) -> MaskGrid {
    let (h, w) = mask.dims();
    MaskGrid::from_fn(h, w, |y, x| {
        let (sy, sx) = preimage(params, h, w, y, x);
        mask.get(sy, sx)
    })
}

/// Full augmentation of an image: geometry, blur, jitter, clamp.
pub fn apply_image(image: &Image, params: &AugParams) -> Image {
    let mut out = apply_geometry_image(image, params);
    if params.gaussian_sigma > 0.0 {
        out = gaussian_blur(&out, params.gaussian_sigma);
    }
    if !params.jitter.is_identity() {
        color_jitter(&mut out, params.jitter);
    }
    out.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Augments a sample; truth masks follow the geometric transform only.
pub fn apply(sample: &Sample, params: &AugParams) -> Sample {
    Sample {
        image: apply_image(&sample.image, params),
        phrases: sample.phrases.clone(),
        truth: sample
            .truth
            .as_ref()
            .map(|masks| masks.iter().map(|m| apply_mask(m, params)).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::synth::{generate_dataset, GenSpec};
    use proptest::prelude::*;

    fn sample() -> Sample {
        generate_dataset(&GenSpec {
            seed: 2,
            count: 1,
            height: 16,
            width: 12,
            ..GenSpec::default()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn weak_params_are_deterministic_and_unjittered() {
        let mut a = substream(1, "t");
        let mut b = substream(1, "t");
        for _ in 0..100 {
            let pa = sample_weak_params(&mut a);
            assert_eq!(pa, sample_weak_params(&mut b));
            assert!(pa.jitter.is_identity());
            assert!(pa.crop.is_none());
            assert!(pa.gaussian_sigma == 0.0 || (0.1..=2.0).contains(&pa.gaussian_sigma));
        }
    }

    #[test]
    fn flip_frequency_is_one_half() {
        let mut rng = substream(42, "flip");
        let n = 10_000;
        let flips = (0..n).filter(|_| sample_weak_params(&mut rng).flip).count();
        let freq = flips as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn strengthen_keeps_geometry() {
        let mut rng = substream(9, "s");
        for _ in 0..200 {
            let weak = sample_weak_params(&mut rng);
            let strong = strengthen(&weak, &mut rng);
            assert_eq!(strong.flip, weak.flip);
            assert_eq!(strong.gaussian_sigma, weak.gaussian_sigma);
            assert_eq!(strong.crop, weak.crop);
            let again = strengthen(&strong, &mut rng);
            assert!(again.same_geometry(&weak));
            assert_eq!(again.gaussian_sigma, weak.gaussian_sigma);
        }
    }

    #[test]
    fn forced_jitter_draws_all_scales_in_range() {
        let mut rng = substream(4, "j");
        for _ in 0..100 {
            let p = strengthen_with(&AugParams::IDENTITY, 1.0, (0.6, 1.4), &mut rng);
            for s in [p.jitter.brightness, p.jitter.contrast, p.jitter.saturation] {
                assert!((0.6..=1.4).contains(&s));
            }
            assert!(!p.jitter.is_identity());
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let p = AugParams {
            flip: true,
            ..AugParams::IDENTITY
        };
        let once = apply(&s, &p);
        assert_ne!(once, s);
        assert_eq!(apply(&once, &p), s);
    }

    #[test]
    fn identity_params_leave_sample_unchanged() {
        let s = sample();
        assert_eq!(apply(&s, &AugParams::IDENTITY), s);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(9, 7, [0.3, 0.6, 0.9]);
        for sigma in [0.1, 0.7, 2.0, 5.0] {
            let out = apply_image(
                &img,
                &AugParams {
                    gaussian_sigma: sigma,
                    ..AugParams::IDENTITY
                },
            );
            for (a, b) in out.as_slice().iter().zip(img.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernels_are_normalized() {
        for i in 1..=40 {
            let k = gaussian_kernel(i as f64 * 0.05);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn photometric_ops_never_touch_masks() {
        let s = sample();
        let p = AugParams {
            flip: false,
            gaussian_sigma: 1.5,
            jitter: Jitter {
                brightness: 1.3,
                contrast: 0.7,
                saturation: 1.2,
            },
            crop: None,
        };
        let out = apply(&s, &p);
        assert_eq!(out.truth, s.truth);
        assert!(out.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reflect_stays_in_bounds() {
        for n in 1..6 {
            for i in -20..20 {
                assert!(reflect(i, n) < n);
            }
        }
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
    }

    fn arb_params(h: usize, w: usize) -> impl Strategy<Value = AugParams> {
        (
            any::<bool>(),
            prop_oneof![Just(0.0), 0.1f64..2.0],
            prop::option::of((1..=h, 1..=w).prop_flat_map(move |(ch, cw)| {
                (0..=h - ch, 0..=w - cw, Just(ch), Just(cw))
            })),
            0.6f64..1.4,
        )
            .prop_map(|(flip, sigma, crop, s)| AugParams {
                flip,
                gaussian_sigma: sigma,
                jitter: Jitter {
                    brightness: s,
                    contrast: s,
                    saturation: 2.0 - s,
                },
                crop: crop.map(|(y, x, h, w)| CropBox { x, y, w, h }),
            })
    }

    proptest! {
        #[test]
        fn masks_follow_geometric_preimage(p in arb_params(16, 12)) {
            let s = sample();
            let out = apply(&s, &p);
            let before = s.truth.as_ref().unwrap();
            let after = out.truth.as_ref().unwrap();
            for (m0, m1) in before.iter().zip(after) {
                for y in 0..16 {
                    for x in 0..12 {
                        let (sy, sx) = preimage(&p, 16, 12, y, x);
                        prop_assert_eq!(m1.get(y, x), m0.get(sy, sx));
                    }
                }
            }
        }

        #[test]
        fn weak_and_strong_views_share_mask_geometry(seed in any::<u64>()) {
            let s = sample();
            let mut rng = substream(seed, "v");
            let policy = AugPolicy { crop: true, ..AugPolicy::default() };
            let weak = policy.sample_weak(16, 12, &mut rng);
            let strong = policy.strengthen(&weak, &mut rng);
            prop_assert_eq!(apply(&s, &weak).truth, apply(&s, &strong).truth);
        }
    }
}

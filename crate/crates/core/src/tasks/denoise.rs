//! Synthetic depth-map denoising.
//!
//! Clean images are piecewise-smooth: a tilted background plane with a few
//! axis-aligned rectangles on top, each carrying its own linear ramp. This
//! mimics the flat surfaces and sharp occlusion boundaries of depth maps.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SpenError};
use crate::tensor::Tensor;
use crate::SpenRng;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseExample {
    /// `[1, h, w]` in `[0, 1]`.
    pub clean: Tensor,
    /// `clean` plus Gaussian noise, clipped to `[0, 1]`.
    pub noisy: Tensor,
    pub seed: u64,
}

/// Per-example seeds are derived from the dataset seed so that any single
/// example can be regenerated on its own.
fn example_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .rotate_left(17)
        ^ 0xD1B5_4A32_D192_ED03
}

/// Piecewise-smooth image with values in `[0.1, 0.9]`.
pub fn clean_image(h: usize, w: usize, rng: &mut SpenRng) -> Tensor {
    let mut img = vec![0.0; h * w];
    let plane = |rng: &mut SpenRng| {
        let base: f64 = rng.random_range(0.2..0.8);
        let gx: f64 = rng.random_range(-0.3..0.3);
        let gy: f64 = rng.random_range(-0.3..0.3);
        (base, gx, gy)
    };
    let (b, gx, gy) = plane(rng);
    for i in 0..h {
        for j in 0..w {
            img[i * w + j] =
                b + gx * (j as f64 / w as f64 - 0.5) + gy * (i as f64 / h as f64 - 0.5);
        }
    }
    let rects = rng.random_range(2..=5);
    for _ in 0..rects {
        let rh = rng.random_range(h / 6..=h / 2).max(1);
        let rw = rng.random_range(w / 6..=w / 2).max(1);
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        let (b, gx, gy) = plane(rng);
        for i in top..top + rh {
            for j in left..left + rw {
                let u = (j - left) as f64 / rw as f64 - 0.5;
                let v = (i - top) as f64 / rh as f64 - 0.5;
                img[i * w + j] = b + gx * u + gy * v;
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.1, 0.9);
    }
    Tensor::from_parts(vec![1, h, w], img)
}

/// `clean + N(0, σ²)` clipped to `[0, 1]`.
pub fn add_noise(clean: &Tensor, sigma: f64, rng: &mut SpenRng) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SpenError::Config(format!(
            "noise level must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
    let data = clean
        .data()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::from_parts(clean.shape().to_vec(), data))
}

pub fn gen_denoise(
    n: usize,
    h: usize,
    w: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<DenoiseExample>> {
    if h < 2 || w < 2 {
        return Err(SpenError::Config(format!(
            "image size {h}×{w} is too small"
        )));
    }
    (0..n)
        .map(|i| {
            let s = example_seed(seed, i);
            let mut rng = SpenRng::seed_from_u64(s);
            let clean = clean_image(h, w, &mut rng);
            let noisy = add_noise(&clean, sigma, &mut rng)?;
            Ok(DenoiseExample {
                clean,
                noisy,
                seed: s,
            })
        })
        .collect()
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(prediction: &Tensor, truth: &Tensor) -> Result<f64> {
    prediction.check_same_shape(truth, "psnr")?;
    let mse = prediction
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / prediction.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean PSNR of the noisy inputs against their clean images.
pub fn input_psnr(data: &[DenoiseExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        total += psnr(&ex.noisy, &ex.clean)?;
    }
    Ok(total / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_noise_is_identity() {
        let d = gen_denoise(3, 8, 8, 0.0, 1).unwrap();
        assert!(d.iter().all(|e| e.clean == e.noisy));
    }

    #[test]
    fn deterministic() {
        let a = gen_denoise(4, 16, 16, 0.1, 9).unwrap();
        let b = gen_denoise(4, 16, 16, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_denoise(4, 16, 16, 0.1, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn images_in_range() {
        for e in gen_denoise(10, 16, 16, 0.3, 2).unwrap() {
            assert!(e.clean.min() >= 0.0 && e.clean.max() <= 1.0);
            assert!(e.noisy.min() >= 0.0 && e.noisy.max() <= 1.0);
            assert_eq!(e.clean.shape(), e.noisy.shape());
        }
    }

    #[test]
    fn empirical_noise_level() {
        // Only pixels far from the clip boundaries.
        let data = gen_denoise(1000, 32, 32, 0.1, 5).unwrap();
        let mut n = 0usize;
        let (mut s, mut s2) = (0.0, 0.0);
        for e in &data {
            for (c, x) in e.clean.data().iter().zip(e.noisy.data()) {
                if (0.45..=0.55).contains(c) {
                    let d = x - c;
                    s += d;
                    s2 += d * d;
                    n += 1;
                }
            }
        }
        assert!(n >= 100_000, "only {n} interior pixels");
        let mean = s / n as f64;
        let sd = (s2 / n as f64 - mean * mean).sqrt();
        assert!((sd - 0.1).abs() < 0.002, "sd {sd}");
    }

    #[test]
    fn psnr_values() {
        let t = Tensor::full(&[1, 4, 4], 0.5);
        assert_eq!(psnr(&t, &t).unwrap(), PSNR_CAP);
        let off = t.map(|v| v + 0.1);
        assert!((psnr(&off, &t).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&t, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_offset_law(seed in any::<u64>(), c in 0.01f64..0.3) {
            let mut r = SpenRng::seed_from_u64(seed);
            let a = Tensor::uniform(&[1, 5, 5], 0.0, 1.0, &mut r);
            let b = Tensor::uniform(&[1, 5, 5], 0.0, 1.0, &mut r);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let shifted = a.map(|v| v + c);
            let expect = -20.0 * c.log10();
            prop_assert!((psnr(&shifted, &a).unwrap() - expect).abs() < 1e-9);
        }
    }
}

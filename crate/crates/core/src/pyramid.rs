//! Laplacian pyramid decomposition and exact reconstruction.
//!
//! Bands follow a 0-based convention: `highs[0]` is the finest band at full
//! resolution, `highs[depth - 1]` the coarsest, and `low` sits at
//! `H / 2^depth x W / 2^depth`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::resample::AxisResample;

/// Band-pass residuals plus the low-frequency base of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianStack {
    pub highs: Vec<Image>,
    pub low: Image,
}

impl LaplacianStack {
    pub fn depth(&self) -> usize {
        self.highs.len()
    }

    /// Check that each level is exactly twice the resolution of the next.
    pub fn validate(&self) -> Result<()> {
        if self.highs.is_empty() {
            return Err(Error::Structure("pyramid has no high-frequency bands".into()));
        }
        let c = self.low.channels();
        let mut expect = (self.low.height(), self.low.width());
        for (i, band) in self.highs.iter().enumerate().rev() {
            expect = (expect.0 * 2, expect.1 * 2);
            if (band.height(), band.width()) != expect || band.channels() != c {
                return Err(Error::Structure(format!(
                    "band {i} is {}x{}x{}, expected {}x{}x{c}",
                    band.height(),
                    band.width(),
                    band.channels(),
                    expect.0,
                    expect.1
                )));
            }
        }
        Ok(())
    }
}

/// Binomial blur with reflect borders followed by 2x decimation.
pub fn pyr_down(img: &Image) -> Result<Image> {
    if !img.height().is_multiple_of(2) || !img.width().is_multiple_of(2) {
        return Err(Error::Precondition(format!(
            "pyr_down needs even dims, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(img.resample(
        &AxisResample::pyr_down(img.height()),
        &AxisResample::pyr_down(img.width()),
    ))
}

/// Zero-insertion to double size followed by the 4x binomial kernel.
pub fn pyr_up(img: &Image) -> Image {
    img.resample(
        &AxisResample::pyr_up(img.height()),
        &AxisResample::pyr_up(img.width()),
    )
}

fn sub(a: &Image, b: &Image) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Image::from_planar(a.height(), a.width(), a.channels(), data).expect("same geometry")
}

fn add(a: &Image, b: &Image) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Image::from_planar(a.height(), a.width(), a.channels(), data).expect("same geometry")
}

pub fn decompose(img: &Image, depth: usize) -> Result<LaplacianStack> {
    if depth == 0 {
        return Err(Error::Precondition("pyramid depth must be at least 1".into()));
    }
    let factor = 1usize << depth;
    if !img.height().is_multiple_of(factor) || !img.width().is_multiple_of(factor) {
        return Err(Error::Precondition(format!(
            "{}x{} is not divisible by 2^{depth}",
            img.height(),
            img.width()
        )));
    }
    let mut highs = Vec::with_capacity(depth);
    let mut current = img.clone();
    for _ in 0..depth {
        let down = pyr_down(&current)?;
        highs.push(sub(&current, &pyr_up(&down)));
        current = down;
    }
    Ok(LaplacianStack { highs, low: current })
}

pub fn reconstruct(stack: &LaplacianStack) -> Result<Image> {
    stack.validate()?;
    let mut current = stack.low.clone();
    for band in stack.highs.iter().rev() {
        current = add(&pyr_up(&current), band);
    }
    Ok(current)
}

/// Map a high-frequency band to a viewable image: `0.5 + band / 2`, clamped.
pub fn band_to_display(band: &Image) -> Image {
    band.map(|v| (0.5 + 0.5 * v).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::{reflect_index, BINOMIAL5};
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())
    }

    // Direct 2-D 5x5 convolution with reflect indexing, then decimation.
    fn pyr_down_oracle(img: &Image) -> Image {
        let (h, w, c) = img.dims();
        Image::from_fn(h / 2, w / 2, c, |y, x, ch| {
            let mut acc = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    let sy = reflect_index(2 * y as isize + i as isize - 2, h);
                    let sx = reflect_index(2 * x as isize + j as isize - 2, w);
                    acc += BINOMIAL5[i] * BINOMIAL5[j] * img.get(sy, sx, ch);
                }
            }
            acc
        })
    }

    // Zero insertion followed by a direct 5x5 convolution with 4x the kernel.
    fn pyr_up_oracle(img: &Image) -> Image {
        let (h, w, c) = img.dims();
        let z = Image::from_fn(2 * h, 2 * w, c, |y, x, ch| {
            if y % 2 == 0 && x % 2 == 0 {
                img.get(y / 2, x / 2, ch)
            } else {
                0.0
            }
        });
        Image::from_fn(2 * h, 2 * w, c, |y, x, ch| {
            let mut acc = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    let sy = reflect_index(y as isize + i as isize - 2, 2 * h);
                    let sx = reflect_index(x as isize + j as isize - 2, 2 * w);
                    acc += 4.0 * BINOMIAL5[i] * BINOMIAL5[j] * z.get(sy, sx, ch);
                }
            }
            acc
        })
    }

    #[test]
    fn pyr_down_constant() {
        let out = pyr_down(&Image::filled(4, 4, 3, 0.5)).unwrap();
        assert_eq!(out.dims(), (2, 2, 3));
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn pyr_down_impulse_matches_direct_convolution() {
        let mut img = Image::new(4, 4, 1);
        img.set(0, 0, 0, 1.0);
        let out = pyr_down(&img).unwrap();
        let oracle = pyr_down_oracle(&img);
        assert!(out.max_abs_diff(&oracle) < 1e-15);
        // (0,0) collects the centre tap only; (0,1) gets the reflected -2 tap, etc.
        assert!((out.get(0, 0, 0) - 36.0 / 256.0).abs() < 1e-15);
        assert!((out.get(0, 1, 0) - 6.0 / 256.0).abs() < 1e-15);
        assert!((out.get(1, 1, 0) - 1.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn pyr_down_matches_oracle_on_random() {
        let img = random_image(10, 12, 4);
        assert!(pyr_down(&img).unwrap().max_abs_diff(&pyr_down_oracle(&img)) < 1e-12);
    }

    #[test]
    fn pyr_down_rejects_odd_dims() {
        assert!(matches!(
            pyr_down(&Image::new(5, 4, 3)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pyr_up_constant_and_shape() {
        let out = pyr_up(&Image::filled(2, 2, 3, 0.5));
        assert_eq!(out.dims(), (4, 4, 3));
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert_eq!(pyr_up(&Image::new(3, 5, 1)).dims(), (6, 10, 1));
    }

    #[test]
    fn pyr_up_impulse_matches_sparse_convolution() {
        let mut img = Image::new(3, 4, 1);
        img.set(1, 2, 0, 1.0);
        assert!(pyr_up(&img).max_abs_diff(&pyr_up_oracle(&img)) < 1e-15);
        let img = random_image(5, 3, 9);
        assert!(pyr_up(&img).max_abs_diff(&pyr_up_oracle(&img)) < 1e-12);
    }

    #[test]
    fn constant_image_has_zero_bands() {
        for depth in 1..=3 {
            let stack = decompose(&Image::filled(32, 24, 3, 0.37), depth).unwrap();
            for band in &stack.highs {
                assert!(band.data().iter().all(|v| v.abs() < 1e-15));
            }
            assert!(stack.low.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn band_shapes_follow_depth() {
        let stack = decompose(&random_image(16, 16, 1), 2).unwrap();
        assert_eq!(stack.highs[0].dims(), (16, 16, 3));
        assert_eq!(stack.highs[1].dims(), (8, 8, 3));
        assert_eq!(stack.low.dims(), (4, 4, 3));
    }

    #[test]
    fn decompose_matches_step_by_step_oracle() {
        let img = random_image(16, 20, 2);
        let stack = decompose(&img, 2).unwrap();
        let i1 = pyr_down_oracle(&img);
        let i2 = pyr_down_oracle(&i1);
        let l0 = sub(&img, &pyr_up_oracle(&i1));
        let l1 = sub(&i1, &pyr_up_oracle(&i2));
        assert!(stack.highs[0].max_abs_diff(&l0) < 1e-12);
        assert!(stack.highs[1].max_abs_diff(&l1) < 1e-12);
        assert!(stack.low.max_abs_diff(&i2) < 1e-12);
    }

    #[test]
    fn decompose_rejects_indivisible() {
        assert!(decompose(&Image::new(12, 10, 3), 2).is_err());
        assert!(decompose(&Image::new(12, 12, 3), 0).is_err());
    }

    #[test]
    fn round_trip_is_lossless() {
        for seed in 0..20 {
            let img = random_image(32, 48, seed);
            let back = reconstruct(&decompose(&img, 2).unwrap()).unwrap();
            assert!(back.max_abs_diff(&img) < 1e-5);
        }
    }

    #[test]
    fn zero_highs_reconstruct_to_repeated_upsampling() {
        let mut stack = decompose(&random_image(16, 16, 5), 2).unwrap();
        for b in &mut stack.highs {
            *b = b.map(|_| 0.0);
        }
        let expect = pyr_up(&pyr_up(&stack.low));
        assert!(reconstruct(&stack).unwrap().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn shifting_low_band_shifts_output() {
        let img = random_image(16, 16, 6);
        let mut stack = decompose(&img, 2).unwrap();
        stack.low = stack.low.map(|v| v + 0.1);
        let out = reconstruct(&stack).unwrap();
        assert!(out.max_abs_diff(&img.map(|v| v + 0.1)) < 1e-5);
    }

    #[test]
    fn reconstruct_rejects_inconsistent_stack() {
        let mut stack = decompose(&random_image(16, 16, 7), 2).unwrap();
        stack.highs[0] = Image::new(15, 16, 3);
        assert!(matches!(reconstruct(&stack), Err(Error::Structure(_))));
    }

    #[test]
    fn smooth_images_have_sparser_bands_than_noise() {
        let ramp = Image::from_fn(32, 32, 3, |y, x, _| (x + y) as f64 / 64.0);
        let noise = random_image(32, 32, 8);
        let energy = |img: &Image| {
            let s = decompose(img, 2).unwrap();
            s.highs[0].data().iter().map(|v| v.abs()).sum::<f64>() / s.highs[0].data().len() as f64
        };
        assert!(energy(&ramp) < energy(&noise));
    }
}

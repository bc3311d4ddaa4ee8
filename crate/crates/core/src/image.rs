//! Planar floating-point images, 8-bit file I/O, padding and resizing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{apply_separable, AxisResample};

/// An `H x W x C` image with values nominally in `[0, 1]`.
///
/// Storage is planar (channel-major, then row-major) so that each channel is a
/// contiguous plane; this matches the network tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "image dims must be positive");
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Build from planar data of length `channels * height * width`.
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Structure(format!(
                "invalid image geometry {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Structure(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::new(height, width, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.set(y, x, c, f(y, x, c));
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Apply separable operators to every channel plane.
    pub(crate) fn resample(&self, rows: &AxisResample, cols: &AxisResample) -> Image {
        let (oh, ow) = (rows.out_len(), cols.out_len());
        let mut out = Image::new(oh, ow, self.channels);
        for c in 0..self.channels {
            apply_separable(
                self.plane(c),
                self.height,
                self.width,
                rows,
                cols,
                &mut out.data[c * oh * ow..(c + 1) * oh * ow],
            );
        }
        out
    }

    /// Rec. 601 luma, `0.299 R + 0.587 G + 0.114 B`. Single-channel images pass through.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Replicate a single-channel image into three channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image {
            channels: 3,
            data,
            ..self.clone()
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// Copy the window `[top, top + h) x [left, left + w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Structure(format!(
                "crop window {h}x{w}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Image::from_planar(h, w, self.channels, data)
    }
}

/// Padding recorded by [`pad_to_multiple`] so the exact inverse crop can be applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadSpec {
    /// Padding that brings `h x w` up to the next multiple of `factor`; all
    /// padding goes on the bottom and right edges.
    pub fn for_multiple(h: usize, w: usize, factor: usize) -> PadSpec {
        let factor = factor.max(1);
        PadSpec {
            top: 0,
            bottom: h.div_ceil(factor) * factor - h,
            left: 0,
            right: w.div_ceil(factor) * factor - w,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == PadSpec::default()
    }

    pub fn row_op(&self, h: usize) -> AxisResample {
        AxisResample::reflect_pad(h, self.top, self.bottom)
    }

    pub fn col_op(&self, w: usize) -> AxisResample {
        AxisResample::reflect_pad(w, self.left, self.right)
    }
}

/// Reflect-pad so both dims become the smallest multiples of `factor` that are
/// not smaller than the input. Axes of length 1 replicate instead of reflecting.
pub fn pad_to_multiple(img: &Image, factor: usize) -> Result<(Image, PadSpec)> {
    if factor == 0 {
        return Err(Error::Precondition("pad factor must be at least 1".into()));
    }
    let spec = PadSpec::for_multiple(img.height(), img.width(), factor);
    if spec.is_zero() {
        return Ok((img.clone(), spec));
    }
    let out = img.resample(&spec.row_op(img.height()), &spec.col_op(img.width()));
    Ok((out, spec))
}

/// Inverse of [`pad_to_multiple`].
pub fn crop_padding(img: &Image, spec: &PadSpec) -> Result<Image> {
    let h = img
        .height()
        .checked_sub(spec.top + spec.bottom)
        .filter(|&h| h > 0);
    let w = img
        .width()
        .checked_sub(spec.left + spec.right)
        .filter(|&w| w > 0);
    match (h, w) {
        (Some(h), Some(w)) => img.crop(spec.top, spec.left, h, w),
        _ => Err(Error::Structure(format!(
            "padding {spec:?} does not fit a {}x{} image",
            img.height(),
            img.width()
        ))),
    }
}

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Precondition("resize target must be at least 1x1".into()));
    }
    if (new_h, new_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    Ok(img.resample(
        &AxisResample::bilinear(img.height(), new_h),
        &AxisResample::bilinear(img.width(), new_w),
    ))
}

/// Load an 8-bit PNG or JPEG as an RGB image scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    load_with_channels(path.as_ref(), 3)
}

/// Load an 8-bit image as a single luminance channel (used for masks).
pub fn load_gray(path: impl AsRef<Path>) -> Result<Image> {
    load_with_channels(path.as_ref(), 1)
}

fn load_with_channels(path: &Path, channels: usize) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let decoded = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| format_err(e.to_string()))?
        .decode()
        .map_err(|e| format_err(e.to_string()))?;
    use image::ColorType::*;
    match decoded.color() {
        L8 | La8 | Rgb8 | Rgba8 => {}
        other => return Err(format_err(format!("unsupported pixel format {other:?}, expected 8-bit"))),
    }
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let raw: Vec<u8> = if channels == 3 {
        decoded.into_rgb8().into_raw()
    } else {
        decoded.into_luma8().into_raw()
    };
    let mut data = vec![0.0; w * h * channels];
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * w * h + i] = v as f64 / 255.0;
        }
    }
    Image::from_planar(h, w, channels, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save as 8-bit; the file suffix selects the codec. Values are clamped to `[0, 1]`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.dims();
    let n = h * w;
    let mut raw = vec![0u8; n * c];
    for i in 0..n {
        for ch in 0..c {
            raw[i * c + ch] = quantize(img.data[ch * n + i]);
        }
    }
    let color = if c == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(path, &raw, w as u32, h as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Extensions recognised as images when scanning directories.
pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn red_png_loads_as_unit_red_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("red.png");
        let buf = image::RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 0]));
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.dims(), (2, 2, 3));
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(img.get(y, x, 0), 1.0);
                assert_eq!(img.get(y, x, 1), 0.0);
                assert_eq!(img.get(y, x, 2), 0.0);
            }
        }
    }

    #[test]
    fn save_load_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let img = random_image(16, 16, 3, 7);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn corrupt_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really a png").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::from_pixel(3, 3, image::Rgb([1000, 2000, 3000]));
        buf.save(&path).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/definitely/not/here.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn pad_is_noop_when_divisible() {
        let img = random_image(100, 100, 3, 1);
        let (p, spec) = pad_to_multiple(&img, 4).unwrap();
        assert!(spec.is_zero());
        assert_eq!(p, img);
    }

    #[test]
    fn pad_full_size_document_dims() {
        let spec = PadSpec::for_multiple(2462, 3699, 4);
        assert_eq!(2462 + spec.top + spec.bottom, 2464);
        assert_eq!(3699 + spec.left + spec.right, 3700);
    }

    #[test]
    fn pad_single_pixel_axis_replicates() {
        let img = Image::from_fn(1, 3, 1, |_, x, _| x as f64);
        let (p, _) = pad_to_multiple(&img, 4).unwrap();
        assert_eq!(p.dims(), (4, 4, 1));
        for y in 0..4 {
            assert_eq!(p.get(y, 1, 0), 1.0);
        }
        // width axis reflects: [0 1 2 | 1]
        assert_eq!(p.get(0, 3, 0), 1.0);
    }

    #[test]
    fn zero_factor_rejected() {
        assert!(pad_to_multiple(&Image::new(2, 2, 1), 0).is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(5, 7, 3, 0.5);
        let up = resize_bilinear(&img, 10, 14).unwrap();
        let back = resize_bilinear(&up, 5, 7).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn resize_two_pixels_is_monotone() {
        let img = Image::from_planar(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 1, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_does_not_modify_input() {
        let img = random_image(6, 6, 3, 3);
        let copy = img.clone();
        let _ = resize_bilinear(&img, 9, 4).unwrap();
        assert_eq!(img, copy);
    }

    proptest! {
        #[test]
        fn pad_crop_round_trip_is_exact(h in 1usize..=64, w in 1usize..=64, f in 1usize..=16, seed in any::<u64>()) {
            let img = random_image(h, w, 3, seed);
            let (padded, spec) = pad_to_multiple(&img, f).unwrap();
            prop_assert_eq!(padded.height() % f, 0);
            prop_assert_eq!(padded.width() % f, 0);
            prop_assert_eq!(padded.height(), h + spec.top + spec.bottom);
            let back = crop_padding(&padded, &spec).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn resize_preserves_constants(h in 1usize..40, w in 1usize..40, nh in 1usize..80, nw in 1usize..80, v in 0.0f64..1.0) {
            let img = Image::filled(h, w, 1, v);
            let out = resize_bilinear(&img, nh, nw).unwrap();
            prop_assert!(out.data().iter().all(|x| (x - v).abs() < 1e-6));
        }

        #[test]
        fn resize_stays_within_input_range(h in 1usize..20, w in 1usize..20, nh in 1usize..40, nw in 1usize..40, seed in any::<u64>()) {
            let img = random_image(h, w, 1, seed);
            let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = resize_bilinear(&img, nh, nw).unwrap();
            prop_assert!(out.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        }
    }
}

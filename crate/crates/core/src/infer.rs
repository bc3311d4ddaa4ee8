//! Whole-image inference on files and directories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{is_image_path, load_image, resize_bilinear, save_image, Image};
use crate::model::Fsenet;

/// Size at which the network runs when the longer side is capped at `max_side`.
pub fn working_size(h: usize, w: usize, max_side: Option<usize>) -> (usize, usize) {
    match max_side {
        Some(m) if h.max(w) > m => {
            let s = m as f64 / h.max(w) as f64;
            (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1))
        }
        _ => (h, w),
    }
}

/// Run the network at full resolution, or at the reduced working size and
/// resize the result back to the input size.
pub fn infer_image(net: &Fsenet, img: &Image, max_side: Option<usize>) -> Result<Image> {
    let img = img.to_rgb();
    let (h, w) = (img.height(), img.width());
    let (wh, ww) = working_size(h, w, max_side);
    if (wh, ww) == (h, w) {
        return net.forward(&img);
    }
    let small = resize_bilinear(&img, wh, ww)?;
    Ok(resize_bilinear(&net.forward(&small)?, h, w)?.clamp01())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferRecord {
    pub name: String,
    pub input: PathBuf,
    pub output: PathBuf,
    pub seconds: f64,
}

/// Inputs of a file or directory argument, sorted by path.
pub fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::io(
            input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let path = entry.map_err(|e| Error::io(input, e))?.path();
        if path.is_file() && is_image_path(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Process `input` (a file or every image of a directory), writing
/// `<out_dir>/<stem>.png` for each.
pub fn infer_path(net: &Fsenet, input: &Path, out_dir: &Path, max_side: Option<usize>) -> Result<Vec<InferRecord>> {
    let files = collect_inputs(input)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(files.len());
    for path in files {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let img = load_image(&path)?;
        let t0 = Instant::now();
        let out = infer_image(net, &img, max_side)?;
        let seconds = t0.elapsed().as_secs_f64();
        let dest = out_dir.join(format!("{name}.png"));
        save_image(&out, &dest)?;
        log::info!("{}: {}x{} in {seconds:.2}s", name, img.height(), img.width());
        records.push(InferRecord {
            name,
            input: path,
            output: dest,
            seconds,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FsenetConfig;

    #[test]
    fn working_size_caps_long_side() {
        assert_eq!(working_size(100, 200, None), (100, 200));
        assert_eq!(working_size(100, 200, Some(400)), (100, 200));
        assert_eq!(working_size(100, 200, Some(50)), (25, 50));
        assert_eq!(working_size(2462, 3699, Some(1024)), (682, 1024));
    }

    #[test]
    fn max_side_output_keeps_size() {
        let net = Fsenet::new(FsenetConfig::toy()).unwrap();
        let img = Image::filled(45, 90, 3, 0.7);
        assert_eq!(infer_image(&net, &img, Some(32)).unwrap().dims(), (45, 90, 3));
    }

    #[test]
    fn directory_outputs_match_names() {
        let net = Fsenet::identity(FsenetConfig::toy()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        std::fs::create_dir_all(&input).unwrap();
        for (i, name) in ["a.png", "b.jpg", "c.png"].iter().enumerate() {
            let img = Image::from_fn(20 + i, 30, 3, |y, x, c| ((y + x + c) % 7) as f64 / 7.0);
            save_image(&img, input.join(name)).unwrap();
        }
        std::fs::write(input.join("notes.txt"), "skip").unwrap();
        let recs = infer_path(&net, &input, &dir.path().join("out"), None).unwrap();
        let names: Vec<_> = recs.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["a", "b", "c"]);
        for r in &recs {
            let src = load_image(&r.input).unwrap();
            let out = load_image(&r.output).unwrap();
            assert_eq!(out.dims(), src.dims());
            // identity network, 8-bit round trip
            assert!(out.max_abs_diff(&src) <= 1.0 / 255.0 + 1e-9);
        }
        assert!(infer_path(&net, &dir.path().join("missing"), dir.path(), None).is_err());
    }
}

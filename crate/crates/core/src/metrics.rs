//! PSNR, SSIM and RMSE with per-image-then-mean aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{is_image_path, load_image, Image};
use crate::loss::{SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::resample::AxisResample;

/// Color space in which the metrics are computed. Only RGB is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colorspace {
    #[default]
    Rgb,
    Lab,
}

impl FromStr for Colorspace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Colorspace::Rgb),
            "lab" => Ok(Colorspace::Lab),
            other => Err(Error::Parameter(format!("unknown colorspace {other:?}"))),
        }
    }
}

impl Colorspace {
    pub fn ensure_supported(self) -> Result<()> {
        match self {
            Colorspace::Rgb => Ok(()),
            Colorspace::Lab => Err(Error::Parameter("colorspace lab is not implemented; use rgb".into())),
        }
    }
}

fn check_dims(pred: &Image, target: &Image) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::Structure(format!(
            "prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

fn mse(pred: &Image, target: &Image) -> Result<f64> {
    check_dims(pred, target)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; infinite for identical images.
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    let m = mse(pred, target)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Root mean squared error on the 0-255 scale.
pub fn rmse(pred: &Image, target: &Image) -> Result<f64> {
    Ok(255.0 * mse(pred, target)?.sqrt())
}

/// Mean SSIM with an 11x11 Gaussian window over valid positions and channels.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    check_dims(pred, target)?;
    let (h, w, c) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "ssim needs both sides >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let rows = AxisResample::gaussian_valid(h, SSIM_WINDOW, SSIM_SIGMA);
    let cols = AxisResample::gaussian_valid(w, SSIM_WINDOW, SSIM_SIGMA);
    let blur = |img: &Image| img.resample(&rows, &cols);
    let prod = |a: &Image, b: &Image| {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Image::from_planar(h, w, c, data).expect("same dims")
    };
    let mx = blur(pred);
    let my = blur(target);
    let exx = blur(&prod(pred, pred));
    let eyy = blur(&prod(target, target));
    let exy = blur(&prod(pred, target));
    let mut total = 0.0;
    for i in 0..mx.data().len() {
        let (a, b) = (mx.data()[i], my.data()[i]);
        let sxx = exx.data()[i] - a * a;
        let syy = eyy.data()[i] - b * b;
        let sxy = exy.data()[i] - a * b;
        total += ((2.0 * a * b + SSIM_C1) * (2.0 * sxy + SSIM_C2))
            / ((a * a + b * b + SSIM_C1) * (sxx + syy + SSIM_C2));
    }
    Ok(total / mx.data().len() as f64)
}

fn ser_float<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else if *v < 0.0 {
        s.serialize_str("-inf")
    } else {
        s.serialize_str("nan")
    }
}

fn de_float<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            _ => Err(serde::de::Error::custom(format!("bad number {t:?}"))),
        },
    }
}

/// Metrics of one image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    #[serde(serialize_with = "ser_float", deserialize_with = "de_float")]
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// Inference time for the image, 0 when not measured.
    pub seconds: f64,
}

impl MetricRow {
    pub fn compute(name: impl Into<String>, pred: &Image, target: &Image) -> Result<Self> {
        Ok(MetricRow {
            name: name.into(),
            psnr: psnr(pred, target)?,
            ssim: ssim(pred, target)?,
            rmse: rmse(pred, target)?,
            seconds: 0.0,
        })
    }
}

/// Arithmetic means of the per-image values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMean {
    #[serde(serialize_with = "ser_float", deserialize_with = "de_float")]
    pub psnr: f64,
    #[serde(serialize_with = "ser_float", deserialize_with = "de_float")]
    pub ssim: f64,
    #[serde(serialize_with = "ser_float", deserialize_with = "de_float")]
    pub rmse: f64,
    #[serde(serialize_with = "ser_float", deserialize_with = "de_float")]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricMean,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&MetricRow) -> f64| {
            if rows.is_empty() {
                f64::NAN
            } else {
                rows.iter().map(f).sum::<f64>() / n
            }
        };
        let mean = MetricMean {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            rmse: avg(|r| r.rmse),
            seconds: avg(|r| r.seconds),
        };
        MetricReport {
            rows,
            mean,
            warnings: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            path: "<report>".into(),
            reason: e.to_string(),
        })
    }

    /// Aligned plain-text table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let fmt_psnr = |v: f64| if v.is_finite() { format!("{v:.4}") } else { format!("{v}") };
        let mut lines = vec![[
            "name".to_string(),
            "psnr".to_string(),
            "ssim".to_string(),
            "rmse".to_string(),
            "seconds".to_string(),
        ]];
        for r in &self.rows {
            lines.push([
                r.name.clone(),
                fmt_psnr(r.psnr),
                format!("{:.4}", r.ssim),
                format!("{:.4}", r.rmse),
                format!("{:.3}", r.seconds),
            ]);
        }
        lines.push([
            "mean".to_string(),
            fmt_psnr(self.mean.psnr),
            format!("{:.4}", self.mean.ssim),
            format!("{:.4}", self.mean.rmse),
            format!("{:.3}", self.mean.seconds),
        ]);
        let widths: Vec<usize> = (0..5).map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for line in &lines {
            let mut row = format!("{:<w$}", line[0], w = widths[0]);
            for i in 1..5 {
                let _ = write!(row, "  {:>w$}", line[i], w = widths[i]);
            }
            out.push_str(row.trim_end());
            out.push('\n');
        }
        out
    }
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("not a directory: {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Compare every prediction with the target of the same name at native resolution.
/// Unmatched files are skipped with a warning; `seconds` maps names to timings.
pub fn evaluate_dir(
    pred_dir: impl AsRef<Path>,
    target_dir: impl AsRef<Path>,
    colorspace: Colorspace,
    seconds: &BTreeMap<String, f64>,
) -> Result<MetricReport> {
    colorspace.ensure_supported()?;
    let preds = images_by_stem(pred_dir.as_ref())?;
    let targets = images_by_stem(target_dir.as_ref())?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (name, p) in &preds {
        let Some(t) = targets.get(name) else {
            warnings.push(format!("{name}: no target, skipped"));
            continue;
        };
        let pred = load_image(p)?;
        let target = load_image(t)?;
        let mut row = MetricRow::compute(name.clone(), &pred, &target)?;
        row.seconds = seconds.get(name).copied().unwrap_or(0.0);
        rows.push(row);
    }
    for name in targets.keys().filter(|n| !preds.contains_key(*n)) {
        warnings.push(format!("{name}: no prediction, skipped"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut report = MetricReport::from_rows(rows);
    report.warnings = warnings;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())
    }

    /// Direct per-window SSIM with a 2-D Gaussian built from scratch.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (h, w, c) = a.dims();
        let k = 11;
        let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let gs: f64 = g.iter().sum();
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let wt = g[dy] * g[dx] / (gs * gs);
                            let (p, q) = (a.get(y0 + dy, x0 + dx, ch), b.get(y0 + dy, x0 + dx, ch));
                            ma += wt * p;
                            mb += wt * q;
                            saa += wt * p * p;
                            sbb += wt * q * q;
                            sab += wt * p * q;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    let (c1, c2) = (1e-4, 9e-4);
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn closed_form_constants() {
        let a = Image::filled(16, 16, 3, 0.5);
        let b = Image::filled(16, 16, 3, 0.5 + 16.0 / 255.0);
        assert!((rmse(&a, &b).unwrap() - 16.0).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - 24.0484).abs() < 1e-4);
    }

    #[test]
    fn identical_images() {
        let a = random(20, 20, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = random(32, 32, 2);
        let b = a.map(|v| (0.7 * v + 0.2).sin().abs());
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
        let c = random(32, 32, 3);
        assert!((ssim(&a, &c).unwrap() - ssim_oracle(&a, &c)).abs() < 1e-6);
    }

    #[test]
    fn ssim_properties() {
        let a = random(24, 30, 4);
        let b = random(24, 30, 5);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let inv = a.map(|v| 1.0 - v);
        let s = ssim(&a, &inv).unwrap();
        assert!((-1.0..1.0).contains(&s));
        assert!(matches!(ssim(&Image::new(10, 20, 3), &Image::new(10, 20, 3)), Err(Error::Precondition(_))));
    }

    #[test]
    fn psnr_rmse_consistency() {
        for seed in 0..10 {
            let a = random(16, 16, seed);
            let b = random(16, 16, seed + 100);
            let r = rmse(&a, &b).unwrap();
            assert!((psnr(&a, &b).unwrap() - 20.0 * (255.0 / r).log10()).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let a = random(16, 16, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise: Vec<f64> = (0..a.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for scale in [0.001, 0.01, 0.05, 0.1, 0.3] {
            let data = a.data().iter().zip(&noise).map(|(v, n)| v + scale * n).collect();
            let b = Image::from_planar(16, 16, 3, data).unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn mismatched_dims_are_structure_errors() {
        let a = Image::new(8, 8, 3);
        let b = Image::new(8, 9, 3);
        assert!(matches!(psnr(&a, &b), Err(Error::Structure(_))));
        assert!(matches!(rmse(&a, &b), Err(Error::Structure(_))));
        assert!(matches!(ssim(&a, &b), Err(Error::Structure(_))));
    }

    #[test]
    fn report_means_and_json() {
        let row = |name: &str, psnr, ssim, rmse| MetricRow {
            name: name.into(),
            psnr,
            ssim,
            rmse,
            seconds: 0.0,
        };
        let rep = MetricReport::from_rows(vec![row("a", 20.0, 0.5, 10.0), row("b", 30.0, 0.7, 4.0), row("c", 25.0, 0.9, 1.0)]);
        assert!((rep.mean.psnr - 25.0).abs() < 1e-12);
        assert!((rep.mean.ssim - 0.7).abs() < 1e-12);
        assert!((rep.mean.rmse - 5.0).abs() < 1e-12);
        assert_eq!(MetricReport::from_json(&rep.to_json()).unwrap(), rep);
        let inf = MetricReport::from_rows(vec![row("x", f64::INFINITY, 1.0, 0.0)]);
        let json = inf.to_json();
        assert!(json.contains("\"inf\""));
        assert_eq!(MetricReport::from_json(&json).unwrap().mean.psnr, f64::INFINITY);
        let table = rep.to_table();
        assert_eq!(table.lines().count(), 5);
        assert!(table.lines().last().unwrap().starts_with("mean"));
    }

    #[test]
    fn evaluate_directory() {
        let dir = tempfile::tempdir().unwrap();
        let (p, t) = (dir.path().join("pred"), dir.path().join("target"));
        std::fs::create_dir_all(&p).unwrap();
        std::fs::create_dir_all(&t).unwrap();
        for name in ["a", "b"] {
            let img = Image::filled(16, 16, 3, 0.5);
            save_image(&img, p.join(format!("{name}.png"))).unwrap();
            save_image(&img, t.join(format!("{name}.png"))).unwrap();
        }
        save_image(&Image::new(16, 16, 3), p.join("orphan.png")).unwrap();
        let rep = evaluate_dir(&p, &t, Colorspace::Rgb, &BTreeMap::new()).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.rows.iter().all(|r| r.psnr == f64::INFINITY));
        assert_eq!(rep.mean.rmse, 0.0);
        assert_eq!(rep.warnings.len(), 1);
        assert!(matches!(
            evaluate_dir(&p, &t, Colorspace::Lab, &BTreeMap::new()),
            Err(Error::Parameter(_))
        ));
    }
}

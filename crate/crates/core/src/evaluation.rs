//! Radial-error metrics, subdomain breakdowns and report plots.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{resize_with_labels, ImageSample};
use crate::error::{Error, Result};
use crate::model::{Model, Prediction};

pub const DEFAULT_RADII: [f64; 4] = [2.0, 2.5, 3.0, 4.0];

/// How the mean radial error is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MreMode {
    /// Mean over every landmark of every image.
    #[default]
    Pooled,
    /// Mean of per-image means.
    PerImage,
}

/// Euclidean distance per landmark in millimeters.
pub fn radial_errors(preds: &[[f64; 2]], gts: &[[f64; 2]], spacing_mm: [f64; 2]) -> Vec<f64> {
    assert_eq!(preds.len(), gts.len(), "prediction and ground truth landmark counts differ");
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (((p[0] - g[0]) * spacing_mm[0]).powi(2) + ((p[1] - g[1]) * spacing_mm[1]).powi(2)).sqrt())
        .collect()
}

/// Success rate at one radius, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sdr {
    pub radius_mm: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mre_mm: f64,
    pub sdr: Vec<Sdr>,
    pub per_landmark_mre: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_subdomain: Option<BTreeMap<String, EvalReport>>,
    pub n_images: usize,
}

impl EvalReport {
    pub fn sdr_at(&self, radius_mm: f64) -> Option<f64> {
        self.sdr.iter().find(|s| s.radius_mm == radius_mm).map(|s| s.rate)
    }

    /// One markdown table row: MRE followed by each SDR.
    pub fn markdown_row(&self, label: &str) -> String {
        let mut row = format!("| {label} | {:.3} |", self.mre_mm);
        for s in &self.sdr {
            row.push_str(&format!(" {:.2} |", s.rate));
        }
        row
    }

    pub fn markdown_header(&self) -> String {
        let mut h = "| method | MRE (mm) |".to_string();
        let mut sep = "|---|---|".to_string();
        for s in &self.sdr {
            h.push_str(&format!(" SDR {} mm (%) |", s.radius_mm));
            sep.push_str("---|");
        }
        format!("{h}\n{sep}")
    }
}

/// Pools per-image landmark errors into MRE and SDR.
pub fn aggregate(errors: &[Vec<f64>], radii: &[f64], mode: MreMode) -> Result<EvalReport> {
    if errors.is_empty() || errors.iter().all(|e| e.is_empty()) {
        return Err(Error::Input("no errors to aggregate".into()));
    }
    let l = errors[0].len();
    if errors.iter().any(|e| e.len() != l) {
        return Err(Error::Input("images disagree on landmark count".into()));
    }
    let total = (errors.len() * l) as f64;
    let mre_mm = match mode {
        MreMode::Pooled => errors.iter().flatten().sum::<f64>() / total,
        MreMode::PerImage => {
            errors.iter().map(|e| e.iter().sum::<f64>() / l as f64).sum::<f64>() / errors.len() as f64
        }
    };
    let sdr = radii
        .iter()
        .map(|&r| Sdr { radius_mm: r, rate: 100.0 * errors.iter().flatten().filter(|&&e| e <= r).count() as f64 / total })
        .collect();
    let per_landmark_mre = (0..l).map(|i| errors.iter().map(|e| e[i]).sum::<f64>() / errors.len() as f64).collect();
    Ok(EvalReport { mre_mm, sdr, per_landmark_mre, per_subdomain: None, n_images: errors.len() })
}

/// Groups images by tag (untagged images fall into `"all"`) and aggregates each group.
pub fn subdomain_report(
    tags: &[Option<String>],
    errors: &[Vec<f64>],
    radii: &[f64],
    mode: MreMode,
) -> Result<BTreeMap<String, EvalReport>> {
    assert_eq!(tags.len(), errors.len());
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (t, e) in tags.iter().zip(errors) {
        groups.entry(t.clone().unwrap_or_else(|| "all".into())).or_default().push(e.clone());
    }
    groups.into_iter().map(|(k, v)| Ok((k, aggregate(&v, radii, mode)?))).collect()
}

/// Predictions mapped back to each sample's original resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub id: String,
    pub coords: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors_mm: Option<Vec<f64>>,
}

/// Runs the model on samples at their original resolution.
pub fn predict_samples(model: &Model<f32>, samples: &[ImageSample]) -> Result<Vec<ImagePrediction>> {
    let size = model.config().input_size;
    samples
        .par_iter()
        .map(|s| {
            let (resized, t) = resize_with_labels(s, size);
            let Prediction { coords, confidences } = model.predict(&resized.pixels)?;
            let coords: Vec<[f64; 2]> = coords.into_iter().map(|p| t.inverse(p)).collect();
            let errors_mm = s.landmarks.as_ref().map(|gt| radial_errors(&coords, gt, s.spacing_mm));
            Ok(ImagePrediction { id: s.id.clone(), coords, confidences, errors_mm })
        })
        .collect()
}

/// Evaluates a model against labeled samples, including the subdomain breakdown.
pub fn evaluate(model: &Model<f32>, samples: &[ImageSample], radii: &[f64], mode: MreMode) -> Result<(EvalReport, Vec<ImagePrediction>)> {
    if let Some(s) = samples.iter().find(|s| s.landmarks.is_none()) {
        return Err(Error::Input(format!("sample {} has no ground truth", s.id)));
    }
    let preds = predict_samples(model, samples)?;
    let errors: Vec<Vec<f64>> = preds.iter().map(|p| p.errors_mm.clone().unwrap_or_default()).collect();
    let mut report = aggregate(&errors, radii, mode)?;
    let tags: Vec<Option<String>> = samples.iter().map(|s| s.subdomain.clone()).collect();
    if tags.iter().any(Option::is_some) {
        report.per_subdomain = Some(subdomain_report(&tags, &errors, radii, mode)?);
    }
    Ok((report, preds))
}

/// Normalized intensity histogram over `[0, 1]`.
pub fn intensity_histogram(samples: &[ImageSample], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let mut n = 0usize;
    for s in samples {
        for &v in s.pixels.data() {
            let b = ((v.clamp(0.0, 1.0) as f64) * bins as f64) as usize;
            h[b.min(bins - 1)] += 1.0;
            n += 1;
        }
    }
    if n > 0 {
        h.iter_mut().for_each(|v| *v /= n as f64);
    }
    h
}

/// Histograms of two datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub bins: usize,
    pub labels: [String; 2],
    pub histograms: [Vec<f64>; 2],
    pub means: [f64; 2],
}

/// Writes `histogram.png` and `histogram.csv` to `out_dir` and returns the numbers.
pub fn histogram_report(
    a: &[ImageSample],
    b: &[ImageSample],
    labels: [&str; 2],
    bins: usize,
    out_dir: &Path,
) -> Result<HistogramReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("histogram_report needs two non-empty datasets".into()));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    let mean = |s: &[ImageSample]| {
        let n: usize = s.iter().map(|x| x.pixels.len()).sum();
        s.iter().flat_map(|x| x.pixels.data()).map(|&v| v as f64).sum::<f64>() / n as f64
    };
    let report = HistogramReport {
        bins,
        labels: [labels[0].into(), labels[1].into()],
        histograms: [intensity_histogram(a, bins), intensity_histogram(b, bins)],
        means: [mean(a), mean(b)],
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = format!("bin_center,{},{}\n", labels[0], labels[1]);
    for i in 0..bins {
        csv.push_str(&format!(
            "{:.6},{:.8},{:.8}\n",
            (i as f64 + 0.5) / bins as f64,
            report.histograms[0][i],
            report.histograms[1][i]
        ));
    }
    let csv_path = out_dir.join("histogram.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    plot_lines(&report.histograms, &out_dir.join("histogram.png"))?;
    Ok(report)
}

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 360;
const MARGIN: u32 = 30;

fn axes() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    for x in MARGIN..PLOT_W - MARGIN {
        img.put_pixel(x, PLOT_H - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=PLOT_H - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

fn draw_segment(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Line plot of equally long series sharing one y-scale.
fn plot_lines(series: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut img = axes();
    let max = series.iter().flatten().cloned().fold(0.0f64, f64::max).max(1e-12);
    let (w, h) = ((PLOT_W - 2 * MARGIN) as f64, (PLOT_H - 2 * MARGIN) as f64);
    for (k, s) in series.iter().enumerate() {
        let n = s.len().max(2) - 1;
        let pt = |i: usize| (MARGIN as f64 + w * i as f64 / n as f64, (PLOT_H - MARGIN) as f64 - h * s[i] / max);
        for i in 1..s.len() {
            draw_segment(&mut img, pt(i - 1), pt(i), PALETTE[k % PALETTE.len()]);
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn plot_bars(series: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut img = axes();
    let groups = series.iter().map(Vec::len).max().unwrap_or(0);
    if groups == 0 {
        return Err(Error::Input("nothing to plot".into()));
    }
    let max = series.iter().flatten().cloned().fold(0.0f64, f64::max).max(1e-12);
    let (w, h) = ((PLOT_W - 2 * MARGIN) as f64, (PLOT_H - 2 * MARGIN) as f64);
    let group_w = w / groups as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (k, s) in series.iter().enumerate() {
        for (g, &v) in s.iter().enumerate() {
            let x0 = MARGIN as f64 + g as f64 * group_w + group_w * 0.1 + k as f64 * bar_w;
            let top = (PLOT_H - MARGIN) as f64 - h * v.max(0.0) / max;
            for x in x0 as u32..(x0 + bar_w - 1.0).max(x0 + 1.0) as u32 {
                for y in top as u32..PLOT_H - MARGIN {
                    img.put_pixel(x.min(PLOT_W - 1), y, PALETTE[k % PALETTE.len()]);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{Domain, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub spacing_mm: [f64; 2],
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdomain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: format!("{}: {}", path.display(), e.path()),
            message: e.inner().to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("{}: unsupported manifest version {}", path.display(), m.version)));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads an 8- or 16-bit grayscale PNG into `[height, width]` values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        other => other.into_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
    };
    Ok(Tensor::from_vec(&[h, w], data))
}

/// Writes `[height, width]` values in `[0, 1]` as a 16-bit grayscale PNG.
pub fn write_png(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let raw: Vec<u16> = pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads and validates every record of a manifest.
///
/// Source records must carry landmarks. When `num_landmarks` is given, every
/// labeled record must have exactly that many.
pub fn load_dataset(manifest_path: &Path, num_landmarks: Option<usize>) -> Result<Vec<ImageSample>> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.records.into_iter().map(|r| load_record(base, r, num_landmarks)).collect()
}

fn load_record(base: &Path, r: ManifestRecord, num_landmarks: Option<usize>) -> Result<ImageSample> {
    let fail = |message: String| Error::Load { record: r.id.clone(), message };
    if !(r.spacing_mm[0] > 0.0 && r.spacing_mm[1] > 0.0) {
        return Err(fail(format!("spacing must be positive, got {:?}", r.spacing_mm)));
    }
    if r.domain == Domain::Source && r.landmarks.is_none() {
        return Err(fail("source record has no landmarks".into()));
    }
    if let Some(lms) = &r.landmarks {
        if let Some(l) = num_landmarks {
            if lms.len() != l {
                return Err(fail(format!("landmark count mismatch: expected {l}, found {}", lms.len())));
            }
        }
        for (i, p) in lms.iter().enumerate() {
            let inside = p[0] >= 0.0 && p[0] < r.width as f64 && p[1] >= 0.0 && p[1] < r.height as f64;
            if !inside {
                return Err(fail(format!("landmark {i} at ({}, {}) lies outside the {}x{} image", p[0], p[1], r.width, r.height)));
            }
        }
    }
    let path = base.join(&r.image_path);
    if !path.is_file() {
        return Err(fail(format!("missing image file {}", path.display())));
    }
    let pixels = read_png(&path).map_err(|e| fail(e.to_string()))?;
    if pixels.shape() != [r.height, r.width] {
        return Err(fail(format!(
            "image is {}x{}, manifest says {}x{}",
            pixels.shape()[1],
            pixels.shape()[0],
            r.width,
            r.height
        )));
    }
    Ok(ImageSample {
        id: r.id,
        pixels,
        original_size: [r.width, r.height],
        spacing_mm: r.spacing_mm,
        landmarks: r.landmarks,
        domain: r.domain,
        subdomain: r.subdomain,
    })
}

/// Writes each sample's pixels to `image_dir/<id>.png` and a manifest
/// referencing them relative to the manifest's directory.
pub fn save_dataset(samples: &[ImageSample], image_dir: &Path, manifest_path: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(image_dir).map_err(|e| Error::io(image_dir, e))?;
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(manifest_dir).map_err(|e| Error::io(manifest_dir, e))?;
    let rel = relative_to(image_dir, manifest_dir);
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("{}.png", s.id);
        write_png(&image_dir.join(&file), &s.pixels)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            image_path: rel.join(&file),
            width: s.width(),
            height: s.height(),
            spacing_mm: s.spacing_mm,
            domain: s.domain,
            subdomain: s.subdomain.clone(),
            landmarks: s.landmarks.clone(),
        });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, records };
    manifest.write(manifest_path)?;
    Ok(manifest)
}

/// `path` relative to `base` when both share a prefix; otherwise `path` itself.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let p: Vec<_> = path.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return path.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c.as_os_str());
    }
    out
}

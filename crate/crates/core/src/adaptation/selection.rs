//! Pseudo-label generation and reliability selection.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::LandmarkMask;
use crate::tensor::{Scalar, Tensor};

pub const PSEUDO_LABEL_FORMAT: &str = "udalm-pseudo-labels";
pub const PSEUDO_LABEL_VERSION: u32 = 1;

/// Model estimate for one unlabeled target image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub round: usize,
    /// Input-resolution pixels.
    pub coords: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    pub mask: LandmarkMask,
}

/// How reliable pseudo-labels are chosen each round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionMode {
    /// Per-landmark top-`k` at ratio `r` (dynamic percentile thresholds).
    #[default]
    Dynamic,
    /// Per-landmark `confidence > tau` with one global threshold.
    Fixed { tau: f64 },
    /// Whole images ranked by mean confidence, top-`k` at ratio `r`; every
    /// landmark of a chosen image is used.
    ImageLevel,
}

/// Selection ratio for round `t`: `min(1, delta·t)`.
pub fn curriculum_ratio(t: usize, delta: f64) -> f64 {
    (delta * t as f64).min(1.0)
}

/// Number of self-training rounds needed for the ratio to reach 1.
pub fn num_rounds(delta: f64) -> usize {
    // Guard against 1/0.2 = 5.000000000000001 style rounding.
    ((1.0 / delta) - 1e-9).ceil().max(1.0) as usize
}

/// Selection state of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub delta: f64,
    pub round: usize,
    pub ratio: f64,
    /// Per-landmark confidence cutoffs.
    pub thresholds: Vec<f64>,
}

fn selection_count(r: f64, m: usize) -> usize {
    ((r * m as f64 + 1e-9).floor() as usize).clamp(1, m)
}

/// Indices of `records` sorted by descending key, ties by ascending image id.
fn ranked(records: &[PseudoLabelRecord], key: impl Fn(&PseudoLabelRecord) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| {
        key(&records[b])
            .partial_cmp(&key(&records[a]))
            .unwrap_or(Ordering::Equal)
            .then_with(|| records[a].image_id.cmp(&records[b].image_id))
    });
    idx
}

/// Sets every record's mask for selection ratio `r` and returns the
/// per-landmark thresholds.
///
/// With [`SelectionMode::Dynamic`], each landmark selects exactly
/// `k = max(1, floor(r·M))` records: the `k` highest confidences, ties broken
/// by image id. The threshold is the `k`-th highest confidence.
pub fn select(records: &mut [PseudoLabelRecord], r: f64, mode: SelectionMode) -> Result<Vec<f64>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("selection ratio must be in (0, 1], got {r}")));
    }
    let m = records.len();
    let l = records.first().map_or(0, |rec| rec.confidences.len());
    if records.iter().any(|rec| rec.confidences.len() != l) {
        return Err(Error::Input("pseudo-label records disagree on landmark count".into()));
    }
    for rec in records.iter_mut() {
        rec.mask = LandmarkMask::zeros(l);
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let k = selection_count(r, m);
    match mode {
        SelectionMode::Dynamic => {
            let mut thresholds = Vec::with_capacity(l);
            for li in 0..l {
                let order = ranked(records, |rec| rec.confidences[li]);
                for &i in &order[..k] {
                    records[i].mask.set(li, true);
                }
                thresholds.push(records[order[k - 1]].confidences[li]);
            }
            Ok(thresholds)
        }
        SelectionMode::Fixed { tau } => {
            for rec in records.iter_mut() {
                for li in 0..l {
                    let on = rec.confidences[li] > tau;
                    rec.mask.set(li, on);
                }
            }
            Ok(vec![tau; l])
        }
        SelectionMode::ImageLevel => {
            let mean = |rec: &PseudoLabelRecord| rec.confidences.iter().sum::<f64>() / l.max(1) as f64;
            let order = ranked(records, mean);
            let cut = mean(&records[order[k - 1]]);
            for &i in &order[..k] {
                records[i].mask = LandmarkMask::ones(l);
            }
            Ok(vec![cut; l])
        }
    }
}

/// Curriculum step: ratio from the round index, then selection.
pub fn dynamic_thresholds(
    records: &mut [PseudoLabelRecord],
    round: usize,
    delta: f64,
    mode: SelectionMode,
) -> Result<CurriculumState> {
    if round == 0 {
        return Err(Error::Config("self-training rounds start at 1".into()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("curriculum delta must be in (0, 1], got {delta}")));
    }
    let ratio = curriculum_ratio(round, delta);
    let thresholds = select(records, ratio, mode)?;
    Ok(CurriculumState { delta, round, ratio, thresholds })
}

/// Predicts every target image. Masks are left all-zero.
pub fn generate_pseudo_labels<T: Scalar>(
    model: &Model<T>,
    images: &[(String, &Tensor<T>)],
    round: usize,
) -> Result<Vec<PseudoLabelRecord>> {
    let l = model.config().num_landmarks;
    images
        .par_iter()
        .map(|(id, img)| {
            let p = model.predict(img)?;
            Ok(PseudoLabelRecord {
                image_id: id.clone(),
                round,
                coords: p.coords,
                confidences: p.confidences,
                mask: LandmarkMask::zeros(l),
            })
        })
        .collect()
}

/// One round's pseudo-label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelFile {
    pub format: String,
    pub version: u32,
    pub round: usize,
    pub ratio: f64,
    pub mode: SelectionMode,
    pub thresholds: Vec<f64>,
    pub records: Vec<PseudoLabelRecord>,
}

impl PseudoLabelFile {
    pub fn new(state: &CurriculumState, mode: SelectionMode, records: Vec<PseudoLabelRecord>) -> Self {
        Self {
            format: PSEUDO_LABEL_FORMAT.into(),
            version: PSEUDO_LABEL_VERSION,
            round: state.round,
            ratio: state.ratio,
            mode,
            thresholds: state.thresholds.clone(),
            records,
        }
    }

    /// Selected count per landmark.
    pub fn selected_counts(&self) -> Vec<usize> {
        let l = self.thresholds.len();
        (0..l).map(|li| self.records.iter().filter(|r| r.mask.get(li)).count()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if file.format != PSEUDO_LABEL_FORMAT || file.version != PSEUDO_LABEL_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported pseudo-label file {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(conf: &[&[f64]]) -> Vec<PseudoLabelRecord> {
        conf.iter()
            .enumerate()
            .map(|(i, c)| PseudoLabelRecord {
                image_id: format!("img{i:03}"),
                round: 1,
                coords: vec![[0.0, 0.0]; c.len()],
                confidences: c.to_vec(),
                mask: LandmarkMask::zeros(c.len()),
            })
            .collect()
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(curriculum_ratio(1, 0.2), 0.2);
        assert_eq!(curriculum_ratio(5, 0.2), 1.0);
        assert_eq!(curriculum_ratio(7, 0.2), 1.0);
        assert_eq!(num_rounds(0.2), 5);
        assert_eq!(num_rounds(0.3), 4);
        assert_eq!(num_rounds(1.0), 1);
    }

    #[test]
    fn dynamic_example() {
        let conf = [0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5];
        let rows: Vec<[f64; 1]> = conf.iter().rev().map(|&c| [c]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
        let mut recs = records(&refs);
        let tau = select(&mut recs, 0.2, SelectionMode::Dynamic).unwrap();
        assert_eq!(tau, vec![0.9]);
        let chosen: Vec<f64> = recs.iter().filter(|r| r.mask.get(0)).map(|r| r.confidences[0]).collect();
        assert_eq!(chosen, vec![0.9, 0.95]);
        let tau = select(&mut recs, 1.0, SelectionMode::Dynamic).unwrap();
        assert_eq!(tau, vec![0.5]);
        assert!(recs.iter().all(|r| r.mask.get(0)));
    }

    #[test]
    fn ties_resolve_by_image_id() {
        let mut recs = records(&[&[0.5], &[0.5], &[0.5], &[0.5]]);
        select(&mut recs, 0.5, SelectionMode::Dynamic).unwrap();
        let chosen: Vec<&str> = recs.iter().filter(|r| r.mask.get(0)).map(|r| r.image_id.as_str()).collect();
        assert_eq!(chosen, vec!["img000", "img001"]);
    }

    #[test]
    fn fixed_threshold_is_strict() {
        let mut recs = records(&[&[0.4, 0.9], &[0.41, 0.1]]);
        select(&mut recs, 1.0, SelectionMode::Fixed { tau: 0.4 }).unwrap();
        assert_eq!(recs[0].mask.0, vec![false, true]);
        assert_eq!(recs[1].mask.0, vec![true, false]);
    }

    #[test]
    fn image_level_selects_whole_images() {
        let mut recs = records(&[&[0.9, 0.1], &[0.6, 0.6], &[0.2, 0.2]]);
        select(&mut recs, 0.34, SelectionMode::ImageLevel).unwrap();
        assert_eq!(recs[1].mask, LandmarkMask::ones(2));
        assert_eq!(recs[0].mask.count() + recs[2].mask.count(), 0);
    }

    #[test]
    fn invalid_ratio_and_round() {
        let mut recs = records(&[&[0.5]]);
        assert!(matches!(select(&mut recs, 0.0, SelectionMode::Dynamic), Err(Error::Config(_))));
        assert!(dynamic_thresholds(&mut recs, 0, 0.2, SelectionMode::Dynamic).is_err());
        assert!(select(&mut [], 0.5, SelectionMode::Dynamic).unwrap().is_empty());
    }

    #[test]
    fn file_round_trip() {
        let mut recs = records(&[&[0.3, 0.7], &[0.8, 0.2]]);
        let state = dynamic_thresholds(&mut recs, 1, 0.5, SelectionMode::Dynamic).unwrap();
        let file = PseudoLabelFile::new(&state, SelectionMode::Dynamic, recs);
        assert_eq!(file.selected_counts(), vec![1, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round1.json");
        file.save(&path).unwrap();
        assert_eq!(PseudoLabelFile::load(&path).unwrap(), file);
    }
}

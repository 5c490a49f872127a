//! Seeded synthetic benchmark with a controllable domain shift.
//!
//! Each image shows a smooth closed contour with small bright markers at
//! `L` landmarks placed at fixed arc-length fractions. The target domain is
//! rendered by the same process followed by a photometric shift and a mild
//! change of the shape distribution.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_dataset, Domain, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Target-domain appearance change: `contrast·(x^gamma − 0.5) + 0.5 + brightness + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftParams {
    pub gamma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
    /// Multiplier on the contour radius.
    pub shape_scale: f64,
    /// Per-landmark probability that a local artifact covers the landmark's
    /// marker, making some landmarks of an image much harder than others.
    #[serde(default)]
    pub artifact_prob: f64,
}

impl ShiftParams {
    /// No shift: both domains come from the same distribution.
    pub fn none() -> Self {
        Self { gamma: 1.0, brightness: 0.0, contrast: 1.0, noise_std: 0.0, shape_scale: 1.0, artifact_prob: 0.0 }
    }

    /// Interpolates between no shift (`s = 0`) and `self` (`s = 1`).
    pub fn scaled(&self, s: f64) -> Self {
        let lerp = |a: f64, b: f64| a + (b - a) * s;
        let n = Self::none();
        Self {
            gamma: lerp(n.gamma, self.gamma),
            brightness: lerp(n.brightness, self.brightness),
            contrast: lerp(n.contrast, self.contrast),
            noise_std: lerp(n.noise_std, self.noise_std),
            shape_scale: lerp(n.shape_scale, self.shape_scale),
            artifact_prob: lerp(n.artifact_prob, self.artifact_prob).clamp(0.0, 1.0),
        }
    }
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self { gamma: 0.8, brightness: 0.04, contrast: 0.85, noise_std: 0.03, shape_scale: 1.03, artifact_prob: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_source: usize,
    /// Unlabeled target images used for adaptation.
    pub n_target: usize,
    /// Held-out target images used only for evaluation.
    pub n_test: usize,
    pub num_landmarks: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub spacing_mm: [f64; 2],
    /// Target images are split round-robin into this many tagged subdomains
    /// whose shift strength spreads around the configured one.
    pub subdomains: usize,
    pub shift: ShiftParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_source: 40,
            n_target: 120,
            n_test: 60,
            num_landmarks: 6,
            size: 64,
            spacing_mm: [1.0, 1.0],
            subdomains: 3,
            shift: ShiftParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_landmarks == 0 || self.num_landmarks > 16 {
            return Err(Error::Config(format!("synthetic landmarks must be in 1..=16, got {}", self.num_landmarks)));
        }
        if self.size < 64 {
            return Err(Error::Config(format!("synthetic image size must be at least 64, got {}", self.size)));
        }
        if self.n_source == 0 {
            return Err(Error::Config("n_source must be at least 1".into()));
        }
        if self.subdomains == 0 {
            return Err(Error::Config("subdomains must be at least 1".into()));
        }
        let s = &self.shift;
        if !(s.gamma > 0.0 && s.contrast > 0.0 && s.noise_std >= 0.0 && s.shape_scale > 0.0) {
            return Err(Error::Config("shift gamma, contrast and shape_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&s.artifact_prob) {
            return Err(Error::Config("shift artifact_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn subdomain_strength(&self, s: usize) -> f64 {
        if self.subdomains == 1 {
            1.0
        } else {
            0.7 + 0.6 * s as f64 / (self.subdomains - 1) as f64
        }
    }
}

/// The three splits of a synthetic benchmark. All carry ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub source: Vec<ImageSample>,
    pub target: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl SynthDataset {
    /// Writes `source/`, `target/` and `manifests/{source,target,test}.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(&self.source, &dir.join("source"), &dir.join("manifests/source.json"))?;
        save_dataset(&self.target, &dir.join("target"), &dir.join("manifests/target.json"))?;
        save_dataset(&self.test, &dir.join("target"), &dir.join("manifests/test.json"))?;
        Ok(())
    }
}

const BASE_NOISE: f64 = 0.02;

struct Anatomy {
    center: [f64; 2],
    radius: f64,
    harmonics: [(f64, f64); 3],
    orientation: f64,
}

impl Anatomy {
    fn random<R: Rng>(size: f64, shape_scale: f64, rng: &mut R) -> Self {
        let jitter = 0.06 * size;
        Self {
            center: [size / 2.0 + rng.gen_range(-jitter..jitter), size / 2.0 + rng.gen_range(-jitter..jitter)],
            radius: 0.27 * size * rng.gen_range(0.9..1.1) * shape_scale,
            harmonics: [
                (rng.gen_range(0.10..0.18), rng.gen_range(-0.15..0.15)),
                (rng.gen_range(0.0..0.06), rng.gen_range(0.0..TAU)),
                (rng.gen_range(0.0..0.04), rng.gen_range(0.0..TAU)),
            ],
            orientation: rng.gen_range(-15f64..15.0).to_radians(),
        }
    }

    /// Contour radius at angle `theta`.
    fn r(&self, theta: f64) -> f64 {
        let local = theta - self.orientation;
        let bumps: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(i, &(a, phase))| a * ((i + 2) as f64 * local - phase).cos())
            .sum();
        self.radius * (1.0 + bumps)
    }

    fn point(&self, theta: f64) -> [f64; 2] {
        let r = self.r(theta);
        [self.center[0] + r * theta.cos(), self.center[1] + r * theta.sin()]
    }

    /// Landmark `j` sits at arc-length fraction `(j + 0.25) / L` measured
    /// from the contour point at the anatomy's orientation.
    fn landmarks(&self, l: usize) -> Vec<[f64; 2]> {
        const STEPS: usize = 2048;
        let thetas: Vec<f64> = (0..=STEPS).map(|i| self.orientation + TAU * i as f64 / STEPS as f64).collect();
        let pts: Vec<[f64; 2]> = thetas.iter().map(|&t| self.point(t)).collect();
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        let total = *cum.last().unwrap();
        (0..l)
            .map(|j| {
                let target = total * (j as f64 + 0.25) / l as f64;
                let i = cum.partition_point(|&c| c < target).clamp(1, STEPS);
                let f = (target - cum[i - 1]) / (cum[i] - cum[i - 1]).max(1e-12);
                self.point(thetas[i - 1] + f * (thetas[i] - thetas[i - 1]))
            })
            .collect()
    }

    fn render<R: Rng>(&self, size: usize, landmarks: &[[f64; 2]], rng: &mut R) -> Tensor<f32> {
        let s = size as f64;
        let noise = Normal::new(0.0, BASE_NOISE).expect("finite std");
        let tilt = rng.gen_range(-0.05..0.05);
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = (px - self.center[0], py - self.center[1]);
                let rho = (dx * dx + dy * dy).sqrt();
                let edge = self.r(dy.atan2(dx)) - rho;
                let inside = 1.0 / (1.0 + (-edge / 0.8).exp());
                let background = 0.15 + tilt * (py / s - 0.5);
                // Faint inner ring gives the interior some structure.
                let ring = 0.08 * (-(edge - 0.25 * self.radius).powi(2) / 4.0).exp();
                let mut v = background + 0.4 * inside + ring;
                for p in landmarks {
                    let d2 = (px - p[0]).powi(2) + (py - p[1]).powi(2);
                    v += 0.35 * (-d2 / (2.0 * 1.2 * 1.2)).exp();
                }
                v += noise.sample(rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        Tensor::from_vec(&[size, size], data)
    }
}

/// `contrast·(x^gamma − 0.5) + 0.5 + brightness` plus Gaussian noise, clamped to `[0, 1]`.
pub fn photometric_shift<R: Rng>(pixels: &Tensor<f32>, p: &ShiftParams, rng: &mut R) -> Tensor<f32> {
    let noise = (p.noise_std > 0.0).then(|| Normal::new(0.0, p.noise_std).expect("finite std"));
    let data = pixels
        .data()
        .iter()
        .map(|&x| {
            let mut v = p.contrast * ((x as f64).powf(p.gamma) - 0.5) + 0.5 + p.brightness;
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::from_vec(pixels.shape(), data)
}

const ARTIFACT_RADIUS: f64 = 4.0;

/// Covers a disc near `p` with flat noisy grey, hiding the marker there.
fn local_artifact<R: Rng>(pixels: &mut Tensor<f32>, p: [f64; 2], rng: &mut R) {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let c = [p[0] + rng.gen_range(-1.5..1.5), p[1] + rng.gen_range(-1.5..1.5)];
    let level: f64 = rng.gen_range(0.3..0.6);
    let noise = Normal::new(0.0, 0.08).expect("finite std");
    let data = pixels.data_mut();
    for y in 0..h {
        for x in 0..w {
            let d2 = (x as f64 + 0.5 - c[0]).powi(2) + (y as f64 + 0.5 - c[1]).powi(2);
            if d2 <= ARTIFACT_RADIUS * ARTIFACT_RADIUS {
                data[y * w + x] = (level + noise.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

fn render_split(cfg: &SynthConfig, stream: u64, n: usize, domain: Domain, prefix: &str) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let size = cfg.size as f64;
    (0..n)
        .map(|i| {
            let (shift, subdomain) = match domain {
                Domain::Source => (ShiftParams::none(), None),
                Domain::Target => {
                    let s = i % cfg.subdomains;
                    (cfg.shift.scaled(cfg.subdomain_strength(s)), Some(format!("site{s}")))
                }
            };
            let anatomy = Anatomy::random(size, shift.shape_scale, &mut rng);
            let landmarks: Vec<[f64; 2]> = anatomy
                .landmarks(cfg.num_landmarks)
                .into_iter()
                .map(|p| [p[0].clamp(0.0, size - 1e-6), p[1].clamp(0.0, size - 1e-6)])
                .collect();
            let mut pixels = anatomy.render(cfg.size, &landmarks, &mut rng);
            if domain == Domain::Target {
                pixels = photometric_shift(&pixels, &shift, &mut rng);
                for p in &landmarks {
                    if rng.gen_bool(shift.artifact_prob) {
                        local_artifact(&mut pixels, *p, &mut rng);
                    }
                }
            }
            ImageSample {
                id: format!("{prefix}{i:04}"),
                pixels,
                original_size: [cfg.size, cfg.size],
                spacing_mm: cfg.spacing_mm,
                landmarks: Some(landmarks),
                domain,
                subdomain,
            }
        })
        .collect()
}

/// Renders the source, target and target-test splits.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    Ok(SynthDataset {
        source: render_split(cfg, 0, cfg.n_source, Domain::Source, "src"),
        target: render_split(cfg, 1, cfg.n_target, Domain::Target, "tgt"),
        test: render_split(cfg, 2, cfg.n_test, Domain::Target, "test"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(shift: ShiftParams) -> SynthConfig {
        SynthConfig { n_source: 30, n_target: 30, n_test: 0, shift, ..SynthConfig::default() }
    }

    fn mean(samples: &[ImageSample]) -> f64 {
        let n: usize = samples.iter().map(|s| s.pixels.len()).sum();
        samples.iter().flat_map(|s| s.pixels.data()).map(|&v| v as f64).sum::<f64>() / n as f64
    }

    /// Two-sample Kolmogorov–Smirnov statistic on pooled pixels.
    fn ks(a: &[ImageSample], b: &[ImageSample]) -> f64 {
        let collect = |s: &[ImageSample]| {
            let mut v: Vec<f32> = s.iter().flat_map(|x| x.pixels.data().iter().copied()).collect();
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v
        };
        let (x, y) = (collect(a), collect(b));
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < x.len() && j < y.len() {
            let t = x[i].min(y[j]);
            while i < x.len() && x[i] <= t {
                i += 1;
            }
            while j < y.len() && y[j] <= t {
                j += 1;
            }
            d = d.max((i as f64 / x.len() as f64 - j as f64 / y.len() as f64).abs());
        }
        d
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig { n_source: 3, n_target: 3, n_test: 2, ..SynthConfig::default() };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_generate(&cfg).unwrap().source, synth_generate(&other).unwrap().source);
    }

    #[test]
    fn landmarks_inside_and_ordered_along_contour() {
        let d = synth_generate(&SynthConfig { n_target: 10, n_test: 0, ..SynthConfig::default() }).unwrap();
        for s in d.source.iter().chain(&d.target) {
            let lms = s.landmarks.as_ref().unwrap();
            assert_eq!(lms.len(), 6);
            assert!(lms.iter().all(|p| p[0] >= 0.0 && p[0] < 64.0 && p[1] >= 0.0 && p[1] < 64.0));
            // Neighbouring landmarks are well separated.
            for w in lms.windows(2) {
                assert!(((w[0][0] - w[1][0]).powi(2) + (w[0][1] - w[1][1]).powi(2)).sqrt() > 5.0);
            }
        }
        assert_eq!(d.target[4].subdomain.as_deref(), Some("site1"));
    }

    #[test]
    fn no_shift_matches_in_distribution() {
        let d = synth_generate(&small(ShiftParams::none())).unwrap();
        assert!(ks(&d.source, &d.target) < 0.05);
        assert!((mean(&d.source) - mean(&d.target)).abs() < 0.01);
    }

    #[test]
    fn default_shift_separates_domains() {
        let d = synth_generate(&small(ShiftParams::default())).unwrap();
        assert!(ks(&d.source, &d.target) > 0.3);
        assert!(mean(&d.target) - mean(&d.source) > 0.1);
    }

    #[test]
    fn shift_moves_mean_by_the_closed_form() {
        let d = synth_generate(&SynthConfig { n_source: 5, n_target: 0, n_test: 0, ..SynthConfig::default() }).unwrap();
        let p = ShiftParams { noise_std: 0.0, ..ShiftParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &d.source {
            let shifted = photometric_shift(&s.pixels, &p, &mut rng);
            // Oracle through a fine histogram of the input.
            let mut hist = vec![0usize; 4096];
            for &v in s.pixels.data() {
                hist[((v as f64) * 4095.0).round() as usize] += 1;
            }
            let want = hist
                .iter()
                .enumerate()
                .map(|(b, &c)| {
                    let x = b as f64 / 4095.0;
                    c as f64 * (p.contrast * (x.powf(p.gamma) - 0.5) + 0.5 + p.brightness).clamp(0.0, 1.0)
                })
                .sum::<f64>()
                / s.pixels.len() as f64;
            let got = shifted.data().iter().map(|&v| v as f64).sum::<f64>() / s.pixels.len() as f64;
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn saves_tree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_source: 2, n_target: 2, n_test: 1, ..SynthConfig::default() };
        synth_generate(&cfg).unwrap().save(dir.path()).unwrap();
        for f in ["manifests/source.json", "manifests/target.json", "manifests/test.json", "source/src0000.png", "target/test0000.png"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let loaded = crate::data::load_dataset(&dir.path().join("manifests/target.json"), Some(6)).unwrap();
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn validation() {
        assert!(SynthConfig { num_landmarks: 17, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { size: 32, ..SynthConfig::default() }.validate().is_err());
    }
}

//! Geometric and photometric transforms that keep landmarks consistent.
//!
//! Coordinates are continuous pixel positions: pixel `i` covers `[i, i+1)`
//! and its center sits at `i + 0.5`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-axis scale between two resolutions, kept to map predictions back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizeTransform {
    /// `(new_width / old_width, new_height / old_height)`.
    pub scale: [f64; 2],
}

impl ResizeTransform {
    pub fn between(from: [usize; 2], to: [usize; 2]) -> Self {
        Self { scale: [to[0] as f64 / from[0] as f64, to[1] as f64 / from[1] as f64] }
    }

    pub fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale[0], p[1] * self.scale[1]]
    }

    pub fn inverse(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.scale[0], p[1] / self.scale[1]]
    }
}

/// Samples `img` at continuous index-space position `(x, y)` with clamped edges.
fn bilinear_clamped(img: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize to `size = (width, height)`; landmarks scale by the same factors.
pub fn resize_with_labels(sample: &ImageSample, size: [usize; 2]) -> (ImageSample, ResizeTransform) {
    let t = ResizeTransform::between(sample.size(), size);
    if sample.size() == size {
        return (sample.clone(), t);
    }
    let (h, w) = (sample.height(), sample.width());
    let [nw, nh] = size;
    let src = sample.pixels.data();
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let sy = (y as f64 + 0.5) / t.scale[1] - 0.5;
        for x in 0..nw {
            let sx = (x as f64 + 0.5) / t.scale[0] - 0.5;
            out.push(bilinear_clamped(src, h, w, sx, sy));
        }
    }
    let resized = ImageSample {
        pixels: Tensor::from_vec(&[nh, nw], out),
        landmarks: sample.landmarks.as_ref().map(|l| l.iter().map(|&p| t.forward(p)).collect()),
        ..sample.clone()
    };
    (resized, t)
}

/// `p ↦ m·p + t` on pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self { m: [[1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] }
    }

    /// Scale and rotate about `center`, then translate by `shift` pixels.
    pub fn about_center(scale: f64, angle_deg: f64, shift: [f64; 2], center: [f64; 2]) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let m = [[scale * c, -scale * s], [scale * s, scale * c]];
        let t = [
            center[0] + shift[0] - (m[0][0] * center[0] + m[0][1] * center[1]),
            center[1] + shift[1] - (m[1][0] * center[0] + m[1][1] * center[1]),
        ];
        Self { m, t }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Self {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [-(m[0][0] * self.t[0] + m[0][1] * self.t[1]), -(m[1][0] * self.t[0] + m[1][1] * self.t[1])];
        Self { m, t }
    }
}

/// Resamples `img` (`[H, W]`) under `a`. Pixels mapping outside the source are 0.
pub fn warp_image(img: &Tensor<f32>, a: &Affine) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let inv = a.inverse();
    let src = img.data();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = inv.apply([x as f64 + 0.5, y as f64 + 0.5]);
            let (sx, sy) = (p[0] - 0.5, p[1] - 0.5);
            if sx > -0.5 && sy > -0.5 && sx < w as f64 - 0.5 && sy < h as f64 - 0.5 {
                out[y * w + x] = bilinear_clamped(src, h, w, sx, sy);
            }
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    acc += kv * src[sy * w + sx];
                }
                dst[y * w + x] = acc;
            }
        }
        dst
    };
    let tmp = pass(img.data(), true);
    Tensor::from_vec(&[h, w], pass(&tmp, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Multiplicative scale range.
    pub scale_range: [f64; 2],
    /// Maximum translation as a fraction of width/height.
    pub translate_range: f64,
    /// Maximum absolute rotation in degrees.
    pub rotate_range: f64,
    /// Up to this many occluding rectangles per image.
    pub occlusion_count: usize,
    /// Maximum rectangle side as a fraction of the image side.
    pub occlusion_max_frac: f64,
    pub blur_prob: f64,
    /// Gaussian sigma range in pixels.
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: [0.9, 1.1],
            translate_range: 0.05,
            rotate_range: 15.0,
            occlusion_count: 2,
            occlusion_max_frac: 0.1,
            blur_prob: 0.3,
            blur_sigma: [0.5, 1.0],
        }
    }
}

impl AugmentConfig {
    /// Leaves every sample unchanged.
    pub fn identity() -> Self {
        Self {
            scale_range: [1.0, 1.0],
            translate_range: 0.0,
            rotate_range: 0.0,
            occlusion_count: 0,
            occlusion_max_frac: 0.0,
            blur_prob: 0.0,
            blur_sigma: [0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return bad("scale_range must be positive and ordered");
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return bad("blur_sigma must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return bad("blur_prob must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.occlusion_max_frac) || !(0.0..1.0).contains(&self.translate_range) {
            return bad("occlusion_max_frac and translate_range must be fractions");
        }
        if !(self.rotate_range >= 0.0) {
            return bad("rotate_range must be non-negative");
        }
        Ok(())
    }
}

/// Result of [`augment`].
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub pixels: Tensor<f32>,
    pub landmarks: Vec<[f64; 2]>,
    /// False for landmarks the transform moved outside the image.
    pub inside: Vec<bool>,
}

fn draw<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Applies one random affine map to pixels and landmarks, then occlusion
/// and blur to pixels only.
pub fn augment<R: Rng>(pixels: &Tensor<f32>, landmarks: &[[f64; 2]], cfg: &AugmentConfig, rng: &mut R) -> Augmented {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let (wf, hf) = (w as f64, h as f64);
    let scale = draw(rng, cfg.scale_range[0], cfg.scale_range[1]);
    let angle = draw(rng, -cfg.rotate_range, cfg.rotate_range);
    let shift = [
        draw(rng, -cfg.translate_range, cfg.translate_range) * wf,
        draw(rng, -cfg.translate_range, cfg.translate_range) * hf,
    ];
    let a = Affine::about_center(scale, angle, shift, [wf / 2.0, hf / 2.0]);
    let mut out = if a == Affine::identity() { pixels.clone() } else { warp_image(pixels, &a) };
    let moved: Vec<[f64; 2]> = landmarks.iter().map(|&p| a.apply(p)).collect();
    let inside = moved.iter().map(|p| p[0] >= 0.0 && p[0] < wf && p[1] >= 0.0 && p[1] < hf).collect();

    let n_occ = if cfg.occlusion_count > 0 { rng.gen_range(0..=cfg.occlusion_count) } else { 0 };
    for _ in 0..n_occ {
        let rw = (draw(rng, 0.0, cfg.occlusion_max_frac) * wf).round() as usize;
        let rh = (draw(rng, 0.0, cfg.occlusion_max_frac) * hf).round() as usize;
        let x0 = rng.gen_range(0..w);
        let y0 = rng.gen_range(0..h);
        let fill: f32 = rng.gen();
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                out.data_mut()[y * w + x] = fill;
            }
        }
    }
    if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob) {
        let sigma = draw(rng, cfg.blur_sigma[0], cfg.blur_sigma[1]);
        out = gaussian_blur(&out, sigma);
    }
    Augmented { pixels: out, landmarks: moved, inside }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(h: usize, w: usize, c: [f64; 2], sigma: f64) -> Tensor<f32> {
        let data = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (2.0 * sigma * sigma)).exp() as f32
            })
            .collect();
        Tensor::from_vec(&[h, w], data)
    }

    fn centroid(img: &Tensor<f32>) -> [f64; 2] {
        let w = img.shape()[1];
        let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
        for (i, &v) in img.data().iter().enumerate() {
            let v = v as f64;
            sx += v * ((i % w) as f64 + 0.5);
            sy += v * ((i / w) as f64 + 0.5);
            s += v;
        }
        [sx / s, sy / s]
    }

    fn sample(w: usize, h: usize, lm: [f64; 2]) -> ImageSample {
        ImageSample {
            id: "a".into(),
            pixels: blob(h, w, lm, 2.0),
            original_size: [w, h],
            spacing_mm: [0.1, 0.1],
            landmarks: Some(vec![lm]),
            domain: Domain::Source,
            subdomain: None,
        }
    }

    #[test]
    fn resize_example_and_inverse() {
        let t = ResizeTransform::between([1935, 2400], [640, 800]);
        assert_eq!(t.forward([967.5, 1200.0]), [320.0, 400.0]);
        let p = [123.456, 789.012];
        let back = t.inverse(t.forward(p));
        assert!((back[0] - p[0]).abs() < 1e-9 && (back[1] - p[1]).abs() < 1e-9);
    }

    #[test]
    fn resize_identity_and_label_consistency() {
        let s = sample(40, 30, [12.3, 17.8]);
        let (same, _) = resize_with_labels(&s, [40, 30]);
        assert_eq!(same, s);
        let (big, _) = resize_with_labels(&s, [80, 60]);
        let c = centroid(&big.pixels);
        let lm = big.landmarks.unwrap()[0];
        assert!((c[0] - lm[0]).abs() < 0.5 && (c[1] - lm[1]).abs() < 0.5);
    }

    #[test]
    fn identity_augment_is_noop() {
        let s = sample(32, 32, [10.0, 20.0]);
        let out = augment(&s.pixels, &[[10.0, 20.0]], &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out.pixels, s.pixels);
        assert_eq!(out.landmarks, vec![[10.0, 20.0]]);
        assert_eq!(out.inside, vec![true]);
    }

    #[test]
    fn translation_moves_landmarks() {
        let a = Affine::about_center(1.0, 0.0, [10.0, 0.0], [16.0, 16.0]);
        assert_eq!(a.apply([3.0, 4.0]), [13.0, 4.0]);
        let img = blob(32, 32, [8.0, 16.0], 1.5);
        let warped = warp_image(&img, &a);
        let c = centroid(&warped);
        assert!((c[0] - 18.0).abs() < 0.05 && (c[1] - 16.0).abs() < 0.05);
    }

    #[test]
    fn rotation_matches_matrix_oracle() {
        let center = [16.0, 16.0];
        let a = Affine::about_center(1.0, 90.0, [0.0, 0.0], center);
        let p = [20.0, 10.0];
        // Direct 2x2 rotation by +90°: (dx, dy) -> (-dy, dx).
        let want = [center[0] - (p[1] - center[1]), center[1] + (p[0] - center[0])];
        let got = a.apply(p);
        assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
        let warped = warp_image(&blob(32, 32, p, 1.5), &a);
        let c = centroid(&warped);
        assert!((c[0] - want[0]).abs() < 0.5 && (c[1] - want[1]).abs() < 0.5);
    }

    #[test]
    fn affine_inverse_round_trips() {
        let a = Affine::about_center(1.07, -12.0, [3.0, -2.0], [32.0, 32.0]);
        let p = [5.5, 41.25];
        let q = a.inverse().apply(a.apply(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn random_affine_keeps_labels_on_features() {
        let cfg = AugmentConfig { occlusion_count: 0, blur_prob: 0.0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let lm = [rng.gen_range(20.0..44.0), rng.gen_range(20.0..44.0)];
            let out = augment(&blob(64, 64, lm, 2.0), &[lm], &cfg, &mut rng);
            let c = centroid(&out.pixels);
            assert!((c[0] - out.landmarks[0][0]).abs() < 0.5 && (c[1] - out.landmarks[0][1]).abs() < 0.5);
        }
    }

    #[test]
    fn landmarks_leaving_the_image_are_flagged() {
        let cfg = AugmentConfig { translate_range: 0.5, ..AugmentConfig::identity() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lm = [[0.5, 0.5], [63.5, 63.5]];
        let flagged = (0..50).any(|_| augment(&Tensor::zeros(&[64, 64]), &lm, &cfg, &mut rng).inside.contains(&false));
        assert!(flagged);
    }

    #[test]
    fn blur_preserves_mass() {
        let img = blob(32, 32, [16.0, 16.0], 1.0);
        let b = gaussian_blur(&img, 1.0);
        let (s0, s1): (f32, f32) = (img.data().iter().sum(), b.data().iter().sum());
        assert!((s0 - s1).abs() < 1e-3);
    }

    #[test]
    fn validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { scale_range: [1.1, 0.9], ..AugmentConfig::default() }.validate().is_err());
    }
}

//! Ground-truth encoding and the detection losses.
//!
//! Every loss returns its value together with the gradient with respect to
//! the prediction, so training can seed the graph's backward pass directly.
//! All losses accept a per-landmark mask; masked means divide by the number
//! of unmasked entries, and a fully masked input contributes exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default Gaussian width of score targets, in grid cells.
pub const DEFAULT_SIGMA: f64 = 1.5;

/// Balancing coefficients of the detection and domain losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_o: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_s: 100.0, lambda_o: 0.02, lambda_d: 0.01 }
    }
}

impl LossWeights {
    /// Chest X-ray setting: the domain term is halved.
    pub fn lung() -> Self {
        Self { lambda_d: 0.005, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_o", self.lambda_o), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which landmarks of a sample contribute to the detection losses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkMask(pub Vec<bool>);

impl LandmarkMask {
    pub fn ones(l: usize) -> Self {
        Self(vec![true; l])
    }

    pub fn zeros(l: usize) -> Self {
        Self(vec![false; l])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, l: usize) -> bool {
        self.0[l]
    }

    pub fn set(&mut self, l: usize, on: bool) {
        self.0[l] = on;
    }

    /// Elementwise AND.
    pub fn and(&self, other: &LandmarkMask) -> LandmarkMask {
        LandmarkMask(self.0.iter().zip(&other.0).map(|(&a, &b)| a && b).collect())
    }
}

/// Gaussian score targets `[L, H, W]` and the cells where they are positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTarget<T> {
    pub values: Tensor<T>,
    pub support: Vec<bool>,
}

/// Offset targets `[L, 2, H, W]` in grid units; meaningful only on the score support.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetTarget<T> {
    pub values: Tensor<T>,
}

/// Encodes pixel landmarks into score and offset targets on an `h × w` grid.
///
/// The landmark's grid coordinate is `c = p / stride`; cell `g` has center
/// `g + 0.5`. Within a window of radius `floor(3σ)` cells around the cell
/// containing `c`, the score is `exp(-|g + 0.5 - c|² / 2σ²)` rescaled so the
/// containing cell scores exactly 1, and the offset is `c - (g + 0.5)`.
pub fn encode_targets<T: Scalar>(
    landmarks: &[[f64; 2]],
    h: usize,
    w: usize,
    stride: usize,
    sigma: f64,
) -> (ScoreTarget<T>, OffsetTarget<T>) {
    assert!(sigma > 0.0, "sigma must be positive");
    let l = landmarks.len();
    let hw = h * w;
    let mut score = vec![T::zero(); l * hw];
    let mut support = vec![false; l * hw];
    let mut offset = vec![T::zero(); l * 2 * hw];
    let radius = (3.0 * sigma).floor() as i64;
    let two_var = 2.0 * sigma * sigma;
    for (li, p) in landmarks.iter().enumerate() {
        let c = [p[0] / stride as f64, p[1] / stride as f64];
        if !(c[0].is_finite() && c[1].is_finite()) {
            continue;
        }
        let (gx0, gy0) = (c[0].floor() as i64, c[1].floor() as i64);
        let peak_d2 = (gx0 as f64 + 0.5 - c[0]).powi(2) + (gy0 as f64 + 0.5 - c[1]).powi(2);
        for gy in (gy0 - radius).max(0)..=(gy0 + radius).min(h as i64 - 1) {
            for gx in (gx0 - radius).max(0)..=(gx0 + radius).min(w as i64 - 1) {
                let dx = c[0] - (gx as f64 + 0.5);
                let dy = c[1] - (gy as f64 + 0.5);
                let v = (-(dx * dx + dy * dy - peak_d2) / two_var).exp();
                let cell = gy as usize * w + gx as usize;
                score[li * hw + cell] = T::of(v);
                support[li * hw + cell] = true;
                offset[(2 * li) * hw + cell] = T::of(dx);
                offset[(2 * li + 1) * hw + cell] = T::of(dy);
            }
        }
    }
    (
        ScoreTarget { values: Tensor::from_vec(&[l, h, w], score), support },
        OffsetTarget { values: Tensor::from_vec(&[l, 2, h, w], offset) },
    )
}

/// A loss value with its gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean L1 distance over unmasked landmarks and both axes. `pred`, `gt`: `[L, 2]` normalized.
pub fn loss_coord<T: Scalar>(pred: &[T], gt: &[T], mask: &LandmarkMask) -> LossValue<T> {
    assert_eq!(pred.len(), gt.len());
    assert_eq!(pred.len(), 2 * mask.len());
    let n = 2 * mask.count();
    let mut grad = vec![T::zero(); pred.len()];
    if n == 0 {
        return LossValue { value: T::zero(), grad };
    }
    let inv = T::one() / T::of(n as f64);
    let mut sum = T::zero();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if mask.get(i / 2) {
            sum += (p - g).abs();
            grad[i] = sign(p - g) * inv;
        }
    }
    LossValue { value: sum * inv, grad }
}

/// Mean squared error over every cell of the unmasked landmark channels. `[L, H, W]`.
pub fn loss_score<T: Scalar>(pred: &[T], target: &[T], mask: &LandmarkMask) -> LossValue<T> {
    assert_eq!(pred.len(), target.len());
    let hw = pred.len() / mask.len();
    let n = mask.count() * hw;
    let mut grad = vec![T::zero(); pred.len()];
    if n == 0 {
        return LossValue { value: T::zero(), grad };
    }
    let inv = T::one() / T::of(n as f64);
    let two = T::of(2.0);
    let mut sum = T::zero();
    for l in (0..mask.len()).filter(|&l| mask.get(l)) {
        for i in l * hw..(l + 1) * hw {
            let d = pred[i] - target[i];
            sum += d * d;
            grad[i] = two * d * inv;
        }
    }
    LossValue { value: sum * inv, grad }
}

/// Mean L1 error over the supported cells (both axes) of unmasked landmarks.
/// `pred`, `target`: `[L, 2, H, W]`; `support`: `[L, H, W]`.
pub fn loss_offset<T: Scalar>(pred: &[T], target: &[T], support: &[bool], mask: &LandmarkMask) -> LossValue<T> {
    assert_eq!(pred.len(), target.len());
    assert_eq!(pred.len(), 2 * support.len());
    let hw = support.len() / mask.len();
    let active = |l: usize| mask.get(l);
    let n: usize = (0..mask.len())
        .filter(|&l| active(l))
        .map(|l| 2 * support[l * hw..(l + 1) * hw].iter().filter(|&&s| s).count())
        .sum();
    let mut grad = vec![T::zero(); pred.len()];
    if n == 0 {
        return LossValue { value: T::zero(), grad };
    }
    let inv = T::one() / T::of(n as f64);
    let mut sum = T::zero();
    for l in (0..mask.len()).filter(|&l| active(l)) {
        for cell in (0..hw).filter(|&c| support[l * hw + c]) {
            for axis in 0..2 {
                let i = (2 * l + axis) * hw + cell;
                let d = pred[i] - target[i];
                sum += d.abs();
                grad[i] = sign(d) * inv;
            }
        }
    }
    LossValue { value: sum * inv, grad }
}

/// Everything a detection loss needs for one sample.
#[derive(Clone, Debug)]
pub struct SampleTargets<T> {
    /// `[L, 2]` normalized `(x/width, y/height)`.
    pub coords: Vec<T>,
    pub score: ScoreTarget<T>,
    pub offset: OffsetTarget<T>,
    pub mask: LandmarkMask,
}

impl<T: Scalar> SampleTargets<T> {
    /// Encodes pixel landmarks for a model with the given grid geometry.
    pub fn encode(landmarks: &[[f64; 2]], mask: LandmarkMask, input_size: [usize; 2], stride: usize, sigma: f64) -> Self {
        let [iw, ih] = input_size;
        let (score, offset) = encode_targets(landmarks, ih / stride, iw / stride, stride, sigma);
        let coords = landmarks
            .iter()
            .flat_map(|p| [T::of(p[0] / iw as f64), T::of(p[1] / ih as f64)])
            .collect();
        Self { coords, score, offset, mask }
    }
}

/// Per-sample base loss `λs·score + λo·offset + coord` and its gradients.
#[derive(Clone, Debug)]
pub struct BaseLoss<T> {
    pub value: T,
    pub coord: LossValue<T>,
    pub score: LossValue<T>,
    pub offset: LossValue<T>,
}

/// Masked detection loss of one sample. Gradients in the returned terms are
/// already multiplied by their λ weights.
pub fn loss_base<T: Scalar>(
    coords: &[T],
    scores: &[T],
    offsets: &[T],
    targets: &SampleTargets<T>,
    weights: &LossWeights,
) -> BaseLoss<T> {
    let coord = loss_coord(coords, &targets.coords, &targets.mask);
    let mut score = loss_score(scores, targets.score.values.data(), &targets.mask);
    let mut offset = loss_offset(offsets, targets.offset.values.data(), &targets.score.support, &targets.mask);
    let (ls, lo) = (T::of(weights.lambda_s), T::of(weights.lambda_o));
    let value = ls * score.value + lo * offset.value + coord.value;
    score.grad.iter_mut().for_each(|g| *g *= ls);
    offset.grad.iter_mut().for_each(|g| *g *= lo);
    BaseLoss { value, coord, score, offset }
}

/// Unmasked detection loss, written directly without any mask bookkeeping.
pub fn loss_base_unmasked<T: Scalar>(
    coords: &[T],
    scores: &[T],
    offsets: &[T],
    targets: &SampleTargets<T>,
    weights: &LossWeights,
) -> T {
    let mean = |it: &mut dyn Iterator<Item = T>| {
        let (s, n) = it.fold((T::zero(), 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            T::zero()
        } else {
            s / T::of(n as f64)
        }
    };
    let coord = mean(&mut coords.iter().zip(&targets.coords).map(|(&p, &g)| (p - g).abs()));
    let score = mean(&mut scores.iter().zip(targets.score.values.data()).map(|(&p, &t)| (p - t) * (p - t)));
    let hw = targets.score.support.len() / targets.mask.len().max(1);
    let t = targets.offset.values.data();
    let offset = mean(&mut (0..offsets.len()).filter_map(|i| {
        let (c, cell) = (i / hw, i % hw);
        targets.score.support[(c / 2) * hw + cell].then(|| (offsets[i] - t[i]).abs())
    }));
    T::of(weights.lambda_s) * score + T::of(weights.lambda_o) * offset + coord
}

/// Batch-mean of per-sample base losses. Samples whose mask is all zero are
/// left out of both numerator and denominator. Returns the loss and the
/// gradients for the stacked `coords`, `scores` and `offsets` buffers.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub value: T,
    pub coord_grad: Vec<T>,
    pub score_grad: Vec<T>,
    pub offset_grad: Vec<T>,
}

pub fn loss_base_batch<T: Scalar>(
    coords: &[T],
    scores: &[T],
    offsets: &[T],
    targets: &[&SampleTargets<T>],
    weights: &LossWeights,
) -> BatchLoss<T> {
    let n = targets.len();
    let (cs, ss, os) = (coords.len() / n.max(1), scores.len() / n.max(1), offsets.len() / n.max(1));
    let mut out = BatchLoss {
        value: T::zero(),
        coord_grad: vec![T::zero(); coords.len()],
        score_grad: vec![T::zero(); scores.len()],
        offset_grad: vec![T::zero(); offsets.len()],
    };
    let active = targets.iter().filter(|t| t.mask.count() > 0).count();
    if active == 0 {
        return out;
    }
    let inv = T::one() / T::of(active as f64);
    for (i, t) in targets.iter().enumerate() {
        if t.mask.count() == 0 {
            continue;
        }
        let b = loss_base(
            &coords[i * cs..(i + 1) * cs],
            &scores[i * ss..(i + 1) * ss],
            &offsets[i * os..(i + 1) * os],
            t,
            weights,
        );
        out.value += b.value * inv;
        for (dst, src) in [
            (&mut out.coord_grad[i * cs..(i + 1) * cs], &b.coord.grad),
            (&mut out.score_grad[i * ss..(i + 1) * ss], &b.score.grad),
            (&mut out.offset_grad[i * os..(i + 1) * os], &b.offset.grad),
        ] {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_prediction, ModelOutput};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn coord_examples() {
        let gt = [0.5, 0.5, 0.5, 0.5];
        let pred = [0.6, 0.4, 0.8, 0.2];
        assert!(close(loss_coord(&pred, &gt, &LandmarkMask::ones(2)).value, 0.2));
        assert!(close(loss_coord(&pred, &gt, &LandmarkMask(vec![true, false])).value, 0.1));
        assert_eq!(loss_coord(&gt, &gt, &LandmarkMask::ones(2)).value, 0.0);
        assert_eq!(loss_coord(&pred, &gt, &LandmarkMask::zeros(2)).value, 0.0);
    }

    #[test]
    fn score_examples() {
        let (t, _) = encode_targets::<f64>(&[[18.0, 10.0], [30.0, 50.0]], 16, 16, 4, 1.0);
        let pred: Vec<f64> = t.values.data().iter().map(|v| v + 0.1).collect();
        assert!((loss_score(&pred, t.values.data(), &LandmarkMask::ones(2)).value - 0.01).abs() < 1e-12);
        assert_eq!(loss_score(t.values.data(), t.values.data(), &LandmarkMask::ones(2)).value, 0.0);
        assert_eq!(loss_score(&pred, t.values.data(), &LandmarkMask::zeros(2)).value, 0.0);
    }

    #[test]
    fn offset_examples() {
        let (s, o) = encode_targets::<f64>(&[[18.0, 10.0]], 16, 16, 4, 1.0);
        let garbage: Vec<f64> = o
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if s.support[i % 256] { v } else { 7.0 })
            .collect();
        assert_eq!(loss_offset(&garbage, o.values.data(), &s.support, &LandmarkMask::ones(1)).value, 0.0);
        let shifted: Vec<f64> = o.values.data().iter().map(|v| v + 0.5).collect();
        assert!(close(loss_offset(&shifted, o.values.data(), &s.support, &LandmarkMask::ones(1)).value, 0.5));
        assert_eq!(loss_offset(&shifted, o.values.data(), &s.support, &LandmarkMask::zeros(1)).value, 0.0);
    }

    #[test]
    fn base_combines_with_weights() {
        // Construct predictions whose three terms are exactly 0.01, 0.5 and 0.2.
        let targets = SampleTargets::<f64>::encode(&[[18.0, 10.0]], LandmarkMask::ones(1), [64, 64], 4, 1.0);
        let coords = vec![targets.coords[0] + 0.2, targets.coords[1] - 0.2];
        let scores: Vec<f64> = targets.score.values.data().iter().map(|v| v + 0.1).collect();
        let offsets: Vec<f64> = targets.offset.values.data().iter().map(|v| v - 0.5).collect();
        let b = loss_base(&coords, &scores, &offsets, &targets, &LossWeights::default());
        assert!((b.value - 1.21).abs() < 1e-12);
        let u = loss_base_unmasked(&coords, &scores, &offsets, &targets, &LossWeights::default());
        assert!((b.value - u).abs() < 1e-12);
    }

    #[test]
    fn encode_example_peak_and_offsets() {
        let (s, o) = encode_targets::<f64>(&[[18.0, 10.0]], 200, 160, 4, 1.5);
        let (hw, w) = (200 * 160, 160);
        assert_eq!(s.values.data()[2 * w + 4], 1.0);
        assert_eq!(o.values.data()[2 * w + 4], 0.0);
        assert_eq!(o.values.data()[hw + 2 * w + 4], 0.0);
        assert_eq!(o.values.data()[2 * w + 5], -1.0);
        let max = s.values.data().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        // Symmetric about the peak away from the border.
        assert_eq!(s.values.data()[2 * w + 3], s.values.data()[2 * w + 5]);
        assert_eq!(s.values.data()[w + 4], s.values.data()[3 * w + 4]);
    }

    #[test]
    fn small_sigma_keeps_single_cell() {
        let (s, _) = encode_targets::<f64>(&[[18.0, 10.0]], 16, 16, 4, 0.25);
        assert_eq!(s.support.iter().filter(|&&v| v).count(), 1);
        let (s, _) = encode_targets::<f64>(&[[18.0, 10.0]], 16, 16, 4, 1.0);
        assert_eq!(s.support.iter().filter(|&&v| v).count(), 6 * 7);
    }

    #[test]
    fn supported_cells_decode_exactly() {
        let p = [37.3, 21.9];
        let (s, o) = encode_targets::<f64>(&[p], 16, 16, 4, 1.5);
        for cell in (0..256).filter(|&c| s.support[c]) {
            let (gx, gy) = ((cell % 16) as f64, (cell / 16) as f64);
            let x = (gx + o.values.data()[cell] + 0.5) * 4.0;
            let y = (gy + o.values.data()[256 + cell] + 0.5) * 4.0;
            assert!((x - p[0]).abs() < 1e-9 && (y - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_of_targets_round_trips() {
        let lms = [[0.0, 0.0], [63.99, 63.99], [18.0, 10.0], [5.5, 40.25]];
        let (s, o) = encode_targets::<f64>(&lms, 16, 16, 4, 1.0);
        let coarse = lms.iter().flat_map(|p| [p[0] / 64.0, p[1] / 64.0]).collect();
        let out = ModelOutput {
            coarse_coords: Tensor::from_vec(&[4, 2], coarse),
            score_maps: s.values,
            offset_maps: o.values,
        };
        let pred = decode_prediction(&out, 4, [64, 64]);
        for (got, want) in pred.coords.iter().zip(&lms) {
            assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
        }
        assert!(pred.confidences.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn batch_skips_fully_masked_samples() {
        let a = SampleTargets::<f64>::encode(&[[18.0, 10.0]], LandmarkMask::ones(1), [64, 64], 4, 1.0);
        let mut b = a.clone();
        b.mask = LandmarkMask::zeros(1);
        let coords = [0.3, 0.3, 0.9, 0.9];
        let scores = vec![0.2; 512];
        let offsets = vec![0.1; 1024];
        let w = LossWeights::default();
        let single = loss_base(&coords[..2], &scores[..256], &offsets[..512], &a, &w);
        let batch = loss_base_batch(&coords, &scores, &offsets, &[&a, &b], &w);
        assert!(close(batch.value, single.value));
        assert!(batch.coord_grad[2..].iter().all(|&g| g == 0.0));
        assert!(batch.score_grad[256..].iter().all(|&g| g == 0.0));
        assert!(batch.offset_grad[512..].iter().all(|&g| g == 0.0));
        let none = loss_base_batch(&coords, &scores, &offsets, &[&b, &b], &w);
        assert_eq!(none.value, 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda_d: -1.0, ..LossWeights::default() }.validate().is_err());
        assert_eq!(LossWeights::lung().lambda_d, 0.005);
    }
}

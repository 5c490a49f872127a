//! Two-headed landmark detector.
//!
//! A convolutional backbone produces a feature map `f: C×H×W`. Global
//! localization runs a transformer decoder whose landmark queries attend over
//! the flattened feature map and regress coarse coordinates. Local refinement
//! reads a score map and an offset map (1×1 convolutions over `f`) at the grid
//! cell obtained by projecting the coarse coordinate. The score at that cell
//! is the landmark's confidence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::DomainHead;
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{embedding, Conv2d, ConvTranspose2d, LayerNorm, Linear};
use crate::tensor::{Scalar, Tensor};

/// Feature extractor family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Four 3×3 conv blocks, `log2(stride)` of them downsampling. CPU-trainable.
    Tiny,
    /// Residual encoder to stride 32 followed by three 2× transposed convolutions (stride 4).
    Full,
}

fn default_heads() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_landmarks: usize,
    pub embed_dim: usize,
    pub num_decoder_layers: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// Input pixels per feature-map cell.
    pub stride: usize,
    pub backbone: BackboneKind,
    /// `[width, height]` in pixels.
    pub input_size: [usize; 2],
}

impl ModelConfig {
    pub fn new(num_landmarks: usize, embed_dim: usize, num_decoder_layers: usize, stride: usize, input_size: [usize; 2]) -> Self {
        Self {
            num_landmarks,
            embed_dim,
            num_decoder_layers,
            num_heads: default_heads(),
            stride,
            backbone: BackboneKind::Tiny,
            input_size,
        }
    }

    /// The cephalometric configuration: 19 landmarks, C=256, 3 decoder layers, 640×800 input.
    pub fn cephalometric() -> Self {
        Self { num_heads: 8, backbone: BackboneKind::Full, ..Self::new(19, 256, 3, 4, [640, 800]) }
    }

    /// The chest X-ray lung configuration: 94 landmarks at 512×512.
    pub fn lung() -> Self {
        Self { num_landmarks: 94, input_size: [512, 512], ..Self::cephalometric() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let [w, h] = self.input_size;
        if self.num_landmarks == 0 {
            return err("num_landmarks must be at least 1".into());
        }
        if self.embed_dim < 8 || self.embed_dim % 4 != 0 {
            return err(format!("embed_dim must be a multiple of 4 and at least 8, got {}", self.embed_dim));
        }
        if self.num_decoder_layers == 0 {
            return err("num_decoder_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!("embed_dim {} is not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.stride == 0 || !self.stride.is_power_of_two() {
            return err(format!("stride must be a power of two, got {}", self.stride));
        }
        if w == 0 || h == 0 || w % self.stride != 0 || h % self.stride != 0 {
            return err(format!("input size {w}x{h} is not divisible by stride {}", self.stride));
        }
        match self.backbone {
            BackboneKind::Tiny if self.stride > 8 => err(format!("tiny backbone supports stride ≤ 8, got {}", self.stride)),
            BackboneKind::Full if self.stride != 4 => err(format!("full backbone has stride 4, got {}", self.stride)),
            BackboneKind::Full if w % 32 != 0 || h % 32 != 0 => {
                err(format!("full backbone needs input divisible by 32, got {w}x{h}"))
            }
            _ => Ok(()),
        }
    }

    /// Feature-map `(H, W)`.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_size[1] / self.stride, self.input_size[0] / self.stride)
    }
}

/// Raw head outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    /// `[L, 2]`, `(x/width, y/height)` in `[0, 1]`.
    pub coarse_coords: Tensor<T>,
    /// `[L, H, W]`.
    pub score_maps: Tensor<T>,
    /// `[L, 2, H, W]` in grid units relative to the cell center.
    pub offset_maps: Tensor<T>,
}

impl<T: Scalar> ModelOutput<T> {
    pub fn num_landmarks(&self) -> usize {
        self.coarse_coords.shape()[0]
    }

    /// `(H, W)` of the score/offset maps.
    pub fn grid(&self) -> (usize, usize) {
        (self.score_maps.shape()[1], self.score_maps.shape()[2])
    }

    pub fn all_finite(&self) -> bool {
        self.coarse_coords.all_finite() && self.score_maps.all_finite() && self.offset_maps.all_finite()
    }
}

/// Refined landmark coordinates with per-landmark confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `(x, y)` in input-resolution pixels.
    pub coords: Vec<[f64; 2]>,
    /// In `[0, 1]`.
    pub confidences: Vec<f64>,
}

/// Grid cell containing pixel `(x, y)`, clamped into a `h × w` map.
/// Cell `g` covers pixels `[stride·g, stride·(g+1))`.
pub fn project_to_grid(coord_px: [f64; 2], stride: usize, h: usize, w: usize) -> (usize, usize) {
    let cell = |v: f64, n: usize| -> usize {
        let g = (v / stride as f64).floor();
        if g <= 0.0 {
            0
        } else {
            (g as usize).min(n - 1)
        }
    };
    (cell(coord_px[0], w), cell(coord_px[1], h))
}

/// Refines each coarse coordinate with the offset at its projected cell and
/// reads the confidence from the score map at the same cell.
pub fn decode_prediction<T: Scalar>(output: &ModelOutput<T>, stride: usize, input_size: [usize; 2]) -> Prediction {
    let (h, w) = output.grid();
    let hw = h * w;
    let s = stride as f64;
    let [iw, ih] = input_size;
    let coarse = output.coarse_coords.data();
    let scores = output.score_maps.data();
    let offsets = output.offset_maps.data();
    let mut coords = Vec::with_capacity(output.num_landmarks());
    let mut confidences = Vec::with_capacity(output.num_landmarks());
    for l in 0..output.num_landmarks() {
        let px = [coarse[2 * l].as_f64() * iw as f64, coarse[2 * l + 1].as_f64() * ih as f64];
        let (gx, gy) = project_to_grid(px, stride, h, w);
        let cell = gy * w + gx;
        let ox = offsets[(2 * l) * hw + cell].as_f64();
        let oy = offsets[(2 * l + 1) * hw + cell].as_f64();
        coords.push([
            ((gx as f64 + ox + 0.5) * s).clamp(0.0, iw as f64),
            ((gy as f64 + oy + 0.5) * s).clamp(0.0, ih as f64),
        ]);
        confidences.push(scores[l * hw + cell].as_f64().clamp(0.0, 1.0));
    }
    Prediction { coords, confidences }
}

/// Diagnostic decoder: score-map argmax plus offset, ignoring the coarse branch.
pub fn decode_argmax<T: Scalar>(output: &ModelOutput<T>, stride: usize, input_size: [usize; 2]) -> Prediction {
    let (h, w) = output.grid();
    let hw = h * w;
    let s = stride as f64;
    let scores = output.score_maps.data();
    let offsets = output.offset_maps.data();
    let mut coords = Vec::new();
    let mut confidences = Vec::new();
    for l in 0..output.num_landmarks() {
        let plane = &scores[l * hw..(l + 1) * hw];
        let (cell, best) = plane
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (gx, gy) = (cell % w, cell / w);
        let ox = offsets[(2 * l) * hw + cell].as_f64();
        let oy = offsets[(2 * l + 1) * hw + cell].as_f64();
        coords.push([
            ((gx as f64 + ox + 0.5) * s).clamp(0.0, input_size[0] as f64),
            ((gy as f64 + oy + 0.5) * s).clamp(0.0, input_size[1] as f64),
        ]);
        confidences.push(best.as_f64().clamp(0.0, 1.0));
    }
    Prediction { coords, confidences }
}

/// Fixed 2D sinusoidal encoding `[H·W, C]`: the first `C/2` channels encode
/// the row, the rest the column.
pub fn position_encoding<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); h * w * dim];
    let two_pi = std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (axis, pos) in [(y as f64 + 0.5) / h as f64 * two_pi, (x as f64 + 0.5) / w as f64 * two_pi]
                .into_iter()
                .enumerate()
            {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
                    row[axis * half + 2 * i] = T::of((pos * freq).sin());
                    row[axis * half + 2 * i + 1] = T::of((pos * freq).cos());
                }
            }
        }
    }
    Tensor::from_vec(&[h * w, dim], data)
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, x),
            None => x,
        };
        let y = g.add(h, skip);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Tiny(Vec<Conv2d>),
    Full { stem: Conv2d, blocks: Vec<ResidualBlock>, upsample: Vec<ConvTranspose2d> },
}

impl Backbone {
    fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        match cfg.backbone {
            BackboneKind::Tiny => {
                let downs = cfg.stride.trailing_zeros() as usize;
                let widths = [8, 16, 32, cfg.embed_dim];
                let mut in_ch = 1;
                let convs = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &out)| {
                        let stride = if i >= 1 && i <= downs { 2 } else { 1 };
                        let c = Conv2d::new(store, &format!("backbone.conv{i}"), in_ch, out, 3, stride, 1, 1.0, rng);
                        in_ch = out;
                        c
                    })
                    .collect();
                Backbone::Tiny(convs)
            }
            BackboneKind::Full => {
                let stem = Conv2d::new(store, "backbone.stem", 1, 32, 3, 2, 1, 1.0, rng);
                let mut blocks = Vec::new();
                let mut in_ch = 32;
                for (stage, &width) in [32usize, 64, 128, 256].iter().enumerate() {
                    for b in 0..2 {
                        let stride = if b == 0 { 2 } else { 1 };
                        let name = format!("backbone.layer{stage}.{b}");
                        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_ch, width, 3, stride, 1, 1.0, rng);
                        // Near-identity residual branches keep the deep stack trainable without normalization.
                        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, 1, 1, 0.1, rng);
                        let shortcut = (stride != 1 || in_ch != width)
                            .then(|| Conv2d::new(store, &format!("{name}.shortcut"), in_ch, width, 1, stride, 0, 1.0, rng));
                        blocks.push(ResidualBlock { conv1, conv2, shortcut });
                        in_ch = width;
                    }
                }
                let upsample = (0..3)
                    .map(|i| {
                        let u = ConvTranspose2d::new(store, &format!("backbone.deconv{i}"), in_ch, cfg.embed_dim, 4, 2, 1, rng);
                        in_ch = cfg.embed_dim;
                        u
                    })
                    .collect();
                Backbone::Full { stem, blocks, upsample }
            }
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Backbone::Tiny(convs) => convs.iter().fold(x, |h, c| {
                let h = c.forward(g, h);
                g.relu(h)
            }),
            Backbone::Full { stem, blocks, upsample } => {
                let h = stem.forward(g, x);
                let mut h = g.relu(h);
                for b in blocks {
                    h = b.forward(g, h);
                }
                for u in upsample {
                    let y = u.forward(g, h);
                    h = g.relu(y);
                }
                h
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl Attention {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, 1.0, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, 1.0, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        key: Var,
        value: Var,
        batch: usize,
        heads: usize,
    ) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let a = g.attention(q, k, v, batch, heads);
        self.out.forward(g, a)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: LayerNorm,
}

#[derive(Clone, Debug)]
struct Decoder {
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    coord_hidden: Linear,
    coord_out: Linear,
}

impl Decoder {
    fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.embed_dim;
        let queries = embedding(store, "decoder.queries", cfg.num_landmarks, c, rng);
        let layers = (0..cfg.num_decoder_layers)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), c, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), c),
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), c, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), c),
                    ffn1: Linear::new(store, &format!("{n}.ffn1"), c, 2 * c, 1.0, rng),
                    ffn2: Linear::new(store, &format!("{n}.ffn2"), 2 * c, c, 1.0, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), c),
                }
            })
            .collect();
        let coord_hidden = Linear::new(store, "decoder.coord_hidden", c, c, 1.0, rng);
        let coord_out = Linear::new(store, "decoder.coord_out", c, 2, 0.1, rng);
        Self { queries, layers, coord_hidden, coord_out }
    }

    /// `memory`/`memory_pos`: `[N·H·W, C]`. Returns normalized coordinates `[N·L, 2]`.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, memory: Var, memory_pos: Var, batch: usize, heads: usize) -> Var {
        let qe = g.param(self.queries);
        let query_pos = g.repeat_rows(qe, batch);
        let mut q = query_pos;
        for layer in &self.layers {
            let a = g.add(q, query_pos);
            let s = layer.self_attn.forward(g, a, a, q, batch, heads);
            let r = g.add(q, s);
            q = layer.norm1.forward(g, r);

            let a = g.add(q, query_pos);
            let c = layer.cross_attn.forward(g, a, memory_pos, memory, batch, heads);
            let r = g.add(q, c);
            q = layer.norm2.forward(g, r);

            let f = layer.ffn1.forward(g, q);
            let f = g.relu(f);
            let f = layer.ffn2.forward(g, f);
            let r = g.add(q, f);
            q = layer.norm3.forward(g, r);
        }
        let h = self.coord_hidden.forward(g, q);
        let h = g.relu(h);
        let o = self.coord_out.forward(g, h);
        g.sigmoid(o)
    }
}

/// Graph handles for one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Backbone features `[N, C, H, W]`.
    pub features: Var,
    /// `[N·L, 2]` normalized coarse coordinates.
    pub coords: Var,
    /// `[N, L, H, W]`.
    pub scores: Var,
    /// `[N, 2L, H, W]`; channel `2l` is the x offset and `2l+1` the y offset.
    pub offsets: Var,
}

/// Detector plus the domain classifier used during adversarial training.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    decoder: Decoder,
    score_head: Conv2d,
    offset_head: Conv2d,
    domain_head: DomainHead,
    pos_encoding: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model. The domain classifier draws from
    /// its own random stream, so the detector's initial weights do not
    /// depend on whether adversarial training is used.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::build(&config, &mut params, &mut rng);
        let decoder = Decoder::build(&config, &mut params, &mut rng);
        let c = config.embed_dim;
        let l = config.num_landmarks;
        let score_head = Conv2d::new(&mut params, "score_head", c, l, 1, 1, 0, 0.1, &mut rng);
        let offset_head = Conv2d::new(&mut params, "offset_head", c, 2 * l, 1, 1, 0, 0.1, &mut rng);
        let mut domain_rng = ChaCha8Rng::seed_from_u64(seed);
        domain_rng.set_stream(1);
        let domain_head = DomainHead::new(&mut params, "domain_head", c, &mut domain_rng);
        let (h, w) = config.feature_size();
        let pos_encoding = position_encoding(h, w, c);
        Ok(Self { config, params, backbone, decoder, score_head, offset_head, domain_head, pos_encoding })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn domain_head(&self) -> &DomainHead {
        &self.domain_head
    }

    /// Parameter count of the feature extractor alone.
    pub fn backbone_param_count(&self) -> usize {
        self.params.numel_with_prefix("backbone.")
    }

    /// Batched forward on a graph. `images`: `[N, 1, height, width]`.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, images: Var) -> ForwardVars {
        let batch = g.shape(images)[0];
        let features = self.backbone.forward(g, images);
        let memory = g.tokens(features);
        let pos = g.input(self.pos_encoding.clone());
        let memory_pos = g.add_rows(memory, pos);
        let coords = self.decoder.forward(g, memory, memory_pos, batch, self.config.num_heads);
        let scores = self.score_head.forward(g, features);
        let offsets = self.offset_head.forward(g, features);
        ForwardVars { features, coords, scores, offsets }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let [w, h] = self.config.input_size;
        let shape = image.shape();
        let ok = matches!(shape, [hh, ww] if *hh == h && *ww == w) || matches!(shape, [1, hh, ww] if *hh == h && *ww == w);
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("expected a {h}x{w} image (height x width), got shape {shape:?}")))
        }
    }

    /// Stacks `[H, W]` images into a `[N, 1, H, W]` tensor.
    pub fn stack_images(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [w, h] = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            self.check_image(img)?;
            data.extend_from_slice(img.data());
        }
        Ok(Tensor::from_vec(&[images.len(), 1, h, w], data))
    }

    /// Evaluation-mode forward for a batch of `[H, W]` images.
    pub fn forward_batch(&self, images: &[&Tensor<T>]) -> Result<Vec<ModelOutput<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let stacked = self.stack_images(images)?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(stacked);
        let vars = self.forward_graph(&mut g, x);
        Ok(split_outputs(&g, &vars, self.config.num_landmarks))
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<ModelOutput<T>> {
        Ok(self.forward_batch(&[image])?.remove(0))
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction> {
        let out = self.forward(image)?;
        Ok(decode_prediction(&out, self.config.stride, self.config.input_size))
    }

    /// Domain classifier probability of "target" for one image.
    pub fn domain_probability(&self, image: &Tensor<T>) -> Result<f64> {
        let stacked = self.stack_images(&[image])?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(stacked);
        let f = self.forward_graph(&mut g, x).features;
        let p = self.domain_head.forward(&mut g, f);
        Ok(g.value(p).data()[0].as_f64())
    }

    /// Replaces every parameter tensor. Names and shapes must match.
    pub fn load_params(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = t;
        }
        Ok(())
    }
}

/// Splits batched graph outputs into per-image [`ModelOutput`]s.
pub fn split_outputs<T: Scalar>(g: &Graph<'_, T>, vars: &ForwardVars, num_landmarks: usize) -> Vec<ModelOutput<T>> {
    let scores = g.value(vars.scores);
    let (n, h, w) = (scores.shape()[0], scores.shape()[2], scores.shape()[3]);
    let coords = g.value(vars.coords).data();
    let offsets = g.value(vars.offsets);
    (0..n)
        .map(|i| ModelOutput {
            coarse_coords: Tensor::from_vec(&[num_landmarks, 2], coords[i * 2 * num_landmarks..(i + 1) * 2 * num_landmarks].to_vec()),
            score_maps: Tensor::from_vec(&[num_landmarks, h, w], scores.outer(i).to_vec()),
            offset_maps: Tensor::from_vec(&[num_landmarks, 2, h, w], offsets.outer(i).to_vec()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
        let [w, h] = cfg.input_size;
        let mut s = seed;
        let data = (0..w * h)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / (1u64 << 24) as f32
            })
            .collect();
        Tensor::from_vec(&[h, w], data)
    }

    fn output_with(coarse_px: [f64; 2], offset: [f32; 2], score: f32) -> (ModelOutput<f32>, [usize; 2]) {
        let (h, w, stride) = (200, 160, 4);
        let input = [w * stride, h * stride];
        let (gx, gy) = project_to_grid(coarse_px, stride, h, w);
        let mut offsets = Tensor::zeros(&[1, 2, h, w]);
        offsets.data_mut()[gy * w + gx] = offset[0];
        offsets.data_mut()[h * w + gy * w + gx] = offset[1];
        let mut scores = Tensor::zeros(&[1, h, w]);
        scores.data_mut()[gy * w + gx] = score;
        let coarse = Tensor::from_vec(
            &[1, 2],
            vec![(coarse_px[0] / input[0] as f64) as f32, (coarse_px[1] / input[1] as f64) as f32],
        );
        (ModelOutput { coarse_coords: coarse, score_maps: scores, offset_maps: offsets }, input)
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_grid([17.2, 9.1], 4, 200, 160), (4, 2));
        assert_eq!(project_to_grid([0.0, 0.0], 4, 200, 160), (0, 0));
        assert_eq!(project_to_grid([10000.0, -3.0], 4, 200, 160), (159, 0));
    }

    #[test]
    fn projection_inverts_cell_centers() {
        for stride in [1usize, 2, 4, 8] {
            for g in 0..20usize {
                let center = (g as f64 + 0.5) * stride as f64;
                assert_eq!(project_to_grid([center, center], stride, 20, 20), (g, g));
            }
        }
    }

    #[test]
    fn decode_examples() {
        let (out, input) = output_with([18.0, 10.0], [0.0, 0.0], 0.5);
        let p = decode_prediction(&out, 4, input);
        assert_eq!(p.coords[0], [18.0, 10.0]);
        let (out, input) = output_with([18.0, 10.0], [0.25, -0.25], 0.5);
        assert_eq!(decode_prediction(&out, 4, input).coords[0], [19.0, 9.0]);
        let (out, input) = output_with([18.0, 10.0], [0.0, 0.0], 1.3);
        assert_eq!(decode_prediction(&out, 4, input).confidences[0], 1.0);
        let (out, input) = output_with([18.0, 10.0], [0.0, 0.0], -0.2);
        assert_eq!(decode_prediction(&out, 4, input).confidences[0], 0.0);
    }

    #[test]
    fn decode_uses_projection_not_argmax() {
        let (mut out, input) = output_with([18.0, 10.0], [0.0, 0.0], 0.3);
        // A stronger peak elsewhere must not move the prediction.
        out.score_maps.data_mut()[100 * 160 + 100] = 0.9;
        let p = decode_prediction(&out, 4, input);
        assert_eq!(p.coords[0], [18.0, 10.0]);
        assert!((p.confidences[0] - 0.3).abs() < 1e-7);
        let diag = decode_argmax(&out, 4, input);
        assert_eq!(diag.coords[0], [402.0, 402.0]);
    }

    #[test]
    fn decode_clamps_to_image_bounds() {
        let (out, input) = output_with([639.0, 799.0], [5.0, 5.0], 0.5);
        let p = decode_prediction(&out, 4, input);
        assert_eq!(p.coords[0], [640.0, 800.0]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(1, 8, 1, 4, [64, 64]).validate().is_ok());
        assert!(matches!(ModelConfig::new(1, 8, 1, 4, [66, 64]).validate(), Err(Error::Config(_))));
        assert!(ModelConfig::new(0, 8, 1, 4, [64, 64]).validate().is_err());
        assert!(ModelConfig::new(1, 6, 1, 4, [64, 64]).validate().is_err());
        assert!(ModelConfig::new(1, 8, 1, 3, [63, 63]).validate().is_err());
        assert!(ModelConfig::cephalometric().validate().is_ok());
        assert!(ModelConfig::lung().validate().is_ok());
        assert!(Model::<f32>::new(ModelConfig::new(1, 8, 1, 4, [66, 64]), 0).is_err());
    }

    #[test]
    fn small_config_shapes_and_determinism() {
        let cfg = ModelConfig::new(1, 8, 1, 4, [64, 64]);
        let model = Model::<f32>::new(cfg.clone(), 3).unwrap();
        let img = image(&cfg, 1);
        let a = model.forward(&img).unwrap();
        assert_eq!(a.coarse_coords.shape(), &[1, 2]);
        assert_eq!(a.score_maps.shape(), &[1, 16, 16]);
        assert_eq!(a.offset_maps.shape(), &[1, 2, 16, 16]);
        assert!(a.all_finite());
        assert!(a.coarse_coords.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b = model.forward(&img).unwrap();
        assert_eq!(a, b);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.score_maps), bits(&b.score_maps));
    }

    #[test]
    fn batched_forward_matches_single() {
        let cfg = ModelConfig::new(3, 16, 2, 4, [32, 48]);
        let model = Model::<f32>::new(cfg.clone(), 5).unwrap();
        let (i1, i2) = (image(&cfg, 1), image(&cfg, 2));
        let batch = model.forward_batch(&[&i1, &i2]).unwrap();
        let single = model.forward(&i2).unwrap();
        for (a, b) in batch[1].score_maps.data().iter().zip(single.score_maps.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in batch[1].coarse_coords.data().iter().zip(single.coarse_coords.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_rejects_wrong_size() {
        let cfg = ModelConfig::new(1, 8, 1, 4, [64, 64]);
        let model = Model::<f32>::new(cfg, 0).unwrap();
        let err = model.forward(&Tensor::zeros(&[32, 64])).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn tiny_backbone_stays_small() {
        let model = Model::<f32>::new(ModelConfig::new(19, 256, 3, 4, [64, 64]), 0).unwrap();
        assert!(model.backbone_param_count() < 1_000_000);
    }

    #[test]
    fn full_backbone_shapes() {
        let cfg = ModelConfig { backbone: BackboneKind::Full, ..ModelConfig::new(2, 16, 1, 4, [64, 96]) };
        let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
        let out = model.forward(&image(&cfg, 3)).unwrap();
        assert_eq!(out.score_maps.shape(), &[2, 24, 16]);
        assert_eq!(out.offset_maps.shape(), &[2, 2, 24, 16]);
        assert!(out.all_finite());
    }

    #[test]
    fn position_encoding_is_bounded_and_distinct() {
        let pe = position_encoding::<f64>(4, 5, 16);
        assert_eq!(pe.shape(), &[20, 16]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        for a in 0..20 {
            for b in a + 1..20 {
                assert_ne!(pe.outer(a), pe.outer(b));
            }
        }
    }
}

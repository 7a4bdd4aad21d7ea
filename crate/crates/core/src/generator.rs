//! The joint image/segmentation generator.
//!
//! A two-layer mapping network turns `z` into `w`; every style layer gets its
//! own row of the extended latent, modulates a 3×3 convolution with it and
//! emits a feature map. Per-resolution toRGB outputs are skip-summed into the
//! image, and the bilinear-upsampled concatenation of all feature maps feeds
//! the per-pixel segmentation head.

use std::f64::consts::SQRT_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{Image, Mask};
use crate::latent::{sample_latent, ExtendedLatent, LatentCode};
use crate::nn::{Bound, ParamId, ParamSet};
use crate::segmentation::SegmentationHead;
use crate::tensor::{resize_bilinear, Tensor};

pub(crate) const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub num_style_layers: usize,
    pub base_resolution: usize,
    pub output_resolution: usize,
    pub channels_per_layer: Vec<usize>,
    pub num_labels: usize,
    pub rng_seed: u64,
}

impl Default for GeneratorConfig {
    /// 64×64 output with eight style layers.
    fn default() -> Self {
        Self {
            latent_dim: 64,
            num_style_layers: 8,
            base_resolution: 4,
            output_resolution: 64,
            channels_per_layer: vec![64, 64, 48, 48, 32, 32, 24, 16],
            num_labels: 8,
            rng_seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// The 32×32 configuration used for the toy pipeline.
    pub fn toy32() -> Self {
        Self {
            latent_dim: 32,
            num_style_layers: 7,
            base_resolution: 4,
            output_resolution: 32,
            channels_per_layer: vec![32, 32, 32, 24, 24, 16, 16],
            num_labels: 8,
            rng_seed: 0,
        }
    }

    /// A 16×16 generator small enough for exhaustive gradient probes.
    pub fn tiny16() -> Self {
        Self {
            latent_dim: 8,
            num_style_layers: 5,
            base_resolution: 4,
            output_resolution: 16,
            channels_per_layer: vec![8, 8, 6, 6, 4],
            num_labels: 4,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.num_style_layers < 2 {
            return bad("num_style_layers must be at least 2".into());
        }
        if self.channels_per_layer.len() != self.num_style_layers {
            return bad(format!(
                "channels_per_layer has {} entries for {} style layers",
                self.channels_per_layer.len(),
                self.num_style_layers
            ));
        }
        if self.channels_per_layer.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.num_labels < 2 || self.num_labels > 256 {
            return bad("num_labels must be in [2, 256]".into());
        }
        if self.base_resolution == 0 || self.output_resolution % self.base_resolution != 0 {
            return bad("output_resolution must be a multiple of base_resolution".into());
        }
        let ratio = self.output_resolution / self.base_resolution;
        if !ratio.is_power_of_two() {
            return bad("output_resolution must be base_resolution · 2^n".into());
        }
        if self.doublings() > self.num_style_layers - 1 {
            return bad(format!("{} doublings need at least {} style layers", self.doublings(), self.doublings() + 1));
        }
        Ok(())
    }

    pub fn doublings(&self) -> usize {
        (self.output_resolution / self.base_resolution.max(1)).trailing_zeros() as usize
    }

    /// Spatial resolution of every style layer. Layer 0 runs at the base
    /// resolution; the rest are split over the doublings, lower
    /// resolutions taking the remainder.
    pub fn layer_resolutions(&self) -> Vec<usize> {
        let d = self.doublings();
        let mut res = vec![self.base_resolution];
        let rest = self.num_style_layers - 1;
        if d == 0 {
            res.extend(std::iter::repeat(self.base_resolution).take(rest));
            return res;
        }
        let (q, r) = (rest / d, rest % d);
        for level in 0..d {
            let count = q + usize::from(level < r);
            res.extend(std::iter::repeat(self.base_resolution << (level + 1)).take(count));
        }
        res
    }

    /// Channel count of the concatenated feature stack.
    pub fn feature_channels(&self) -> usize {
        self.channels_per_layer.iter().sum()
    }
}

#[derive(Clone, Debug)]
struct StyleLayer {
    affine_w: ParamId,
    affine_b: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    upsample: bool,
    to_rgb: Option<ToRgb>,
}

#[derive(Clone, Debug)]
struct ToRgb {
    affine_w: ParamId,
    affine_b: ParamId,
    weight: ParamId,
    bias: ParamId,
}

/// Graph handles produced by one synthesis pass.
pub struct SynthesisVars {
    pub image: Var,
    pub features: Vec<Var>,
}

/// Whether a [`JointSample`] carries a segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadStatus {
    Present,
    NoHead,
}

/// Paired image and segmentation from one extended latent.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    pub image: Image,
    /// `[C, H, W]` logits, absent without a head.
    pub logits: Option<Tensor>,
    pub mask: Option<Mask>,
    pub head_status: HeadStatus,
}

impl JointSample {
    /// Per-pixel softmax of the logits.
    pub fn probabilities(&self) -> Option<Tensor> {
        self.logits.as_ref().map(softmax_channels)
    }
}

/// Per-layer feature maps and their upsampled concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub maps: Vec<Tensor>,
    /// `[Σ channels, H, W]` at output resolution.
    pub upsampled: Tensor,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    mapping: [(ParamId, ParamId); 2],
    const_input: ParamId,
    layers: Vec<StyleLayer>,
    head: Option<SegmentationHead>,
}

impl Generator {
    /// Randomly initialized generator, seeded by `config.rng_seed`.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let d = config.latent_dim;
        let mut params = ParamSet::new();
        let mut mapping = Vec::new();
        for i in 0..2 {
            let w = params.push(format!("mapping.{i}.weight"), Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), &mut rng));
            let b = params.push(format!("mapping.{i}.bias"), Tensor::zeros(&[d]));
            mapping.push((w, b));
        }
        let base = config.base_resolution;
        let c0 = config.channels_per_layer[0];
        let const_input = params.push("const", Tensor::randn(&[c0, base, base], 1.0, &mut rng));

        let res = config.layer_resolutions();
        let mut layers = Vec::new();
        for k in 0..config.num_style_layers {
            let cin = if k == 0 { c0 } else { config.channels_per_layer[k - 1] };
            let cout = config.channels_per_layer[k];
            let affine_w = params.push(format!("style.{k}.affine.weight"), Tensor::randn(&[cin, d], (1.0 / d as f64).sqrt(), &mut rng));
            let affine_b = params.push(format!("style.{k}.affine.bias"), Tensor::full(&[cin], 1.0));
            let conv_w = params.push(format!("style.{k}.conv.weight"), Tensor::randn(&[cout, cin, 3, 3], 1.0, &mut rng));
            let conv_b = params.push(format!("style.{k}.conv.bias"), Tensor::zeros(&[cout]));
            let last_at_res = k + 1 == config.num_style_layers || res[k + 1] != res[k];
            let to_rgb = last_at_res.then(|| ToRgb {
                affine_w: params.push(format!("torgb.{k}.affine.weight"), Tensor::randn(&[cout, d], (1.0 / d as f64).sqrt(), &mut rng)),
                affine_b: params.push(format!("torgb.{k}.affine.bias"), Tensor::full(&[cout], 1.0)),
                weight: params.push(format!("torgb.{k}.weight"), Tensor::randn(&[3, cout, 1, 1], (1.0 / cout as f64).sqrt(), &mut rng)),
                bias: params.push(format!("torgb.{k}.bias"), Tensor::zeros(&[3])),
            });
            layers.push(StyleLayer { affine_w, affine_b, conv_w, conv_b, upsample: k > 0 && res[k] != res[k - 1], to_rgb });
        }
        Ok(Self { config, params, mapping: [mapping[0], mapping[1]], const_input, layers, head: None })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn head(&self) -> Option<&SegmentationHead> {
        self.head.as_ref()
    }

    pub fn set_head(&mut self, head: SegmentationHead) -> Result<()> {
        if head.in_features() != self.config.feature_channels() || head.num_labels() != self.config.num_labels {
            return Err(mismatch(
                (self.config.feature_channels(), self.config.num_labels),
                (head.in_features(), head.num_labels()),
            ));
        }
        self.head = Some(head);
        Ok(())
    }

    pub fn clear_head(&mut self) {
        self.head = None;
    }

    pub fn num_style_layers(&self) -> usize {
        self.config.num_style_layers
    }

    pub fn resolution(&self) -> usize {
        self.config.output_resolution
    }

    /// Fingerprint of the generator weights and config (head excluded).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config).expect("config serializes"));
        h.update(self.params.fingerprint());
        hex::encode(h.finalize())
    }

    pub fn sample_latent(&self, seed: u64) -> LatentCode {
        sample_latent(seed, self.config.latent_dim)
    }

    fn check_latent(&self, w: &ExtendedLatent) -> Result<()> {
        let want = [self.config.num_style_layers, self.config.latent_dim];
        if w.tensor().shape() != want {
            return Err(mismatch(want, w.tensor().shape()));
        }
        Ok(())
    }

    /// Mapping network on a graph: `z: [D]` → `w: [D]`.
    pub fn mapping_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let d = self.config.latent_dim;
        let zn = g.channel_normalize(z, 1e-8);
        let mut h = g.scale(zn, (d as f64).sqrt());
        for &(w, b) in &self.mapping {
            let col = g.reshape(h, &[d, 1]);
            let m = g.matmul(p[w], col);
            let m = g.reshape(m, &[d]);
            let m = g.add(m, p[b]);
            let a = g.leaky_relu(m, LRELU_SLOPE);
            h = g.scale(a, SQRT_2);
        }
        h
    }

    /// `[layers, D]` extended latent with `w` on every row.
    pub fn broadcast_graph(&self, g: &mut Graph, w: Var) -> Var {
        let d = self.config.latent_dim;
        let row = g.reshape(w, &[1, d]);
        let rows = vec![row; self.config.num_style_layers];
        g.concat(&rows)
    }

    fn affine(&self, g: &mut Graph, p: &Bound, w: ParamId, b: ParamId, latent_row: Var) -> Var {
        let d = self.config.latent_dim;
        let col = g.reshape(latent_row, &[d, 1]);
        let m = g.matmul(p[w], col);
        let n = g.shape(m)[0];
        let m = g.reshape(m, &[n]);
        g.add(m, p[b])
    }

    /// Synthesis network on a graph: `w_plus: [layers, D]`.
    pub fn synthesis_graph(&self, g: &mut Graph, p: &Bound, w_plus: Var) -> SynthesisVars {
        let res = self.config.layer_resolutions();
        let mut x = p[self.const_input];
        let mut rgb: Option<Var> = None;
        let mut features = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let wk = g.row(w_plus, k);
            let style = self.affine(g, p, layer.affine_w, layer.affine_b, wk);
            if layer.upsample {
                x = g.resize(x, res[k], res[k]);
            }
            let wm = g.modulate(p[layer.conv_w], style, true);
            let y = g.conv2d(x, wm, 1);
            let y = g.add_channel_bias(y, p[layer.conv_b]);
            let y = g.leaky_relu(y, LRELU_SLOPE);
            x = g.scale(y, SQRT_2);
            features.push(x);
            if let Some(t) = &layer.to_rgb {
                let s = self.affine(g, p, t.affine_w, t.affine_b, wk);
                let wm = g.modulate(p[t.weight], s, false);
                let y = g.conv2d(x, wm, 0);
                let y = g.add_channel_bias(y, p[t.bias]);
                rgb = Some(match rgb {
                    None => y,
                    Some(prev) => {
                        let up = g.resize(prev, res[k], res[k]);
                        g.add(up, y)
                    }
                });
            }
        }
        let image = g.tanh(rgb.expect("last layer always emits rgb"));
        SynthesisVars { image, features }
    }

    /// Upsamples and concatenates feature maps into `[F, H·W]` pixel columns.
    pub fn stack_features_graph(&self, g: &mut Graph, features: &[Var]) -> Var {
        let r = self.config.output_resolution;
        let ups: Vec<Var> = features.iter().map(|&f| g.resize(f, r, r)).collect();
        let cat = g.concat(&ups);
        let f = g.shape(cat)[0];
        g.reshape(cat, &[f, r * r])
    }

    pub fn map_to_w_plus(&self, z: &LatentCode) -> Result<ExtendedLatent> {
        if z.0.len() != self.config.latent_dim {
            return Err(mismatch(self.config.latent_dim, z.0.len()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(Tensor::new(&[z.0.len()], z.0.clone()));
        let w = self.mapping_graph(&mut g, &p, zv);
        Ok(ExtendedLatent::broadcast(g.value(w).data(), self.config.num_style_layers))
    }

    /// Mean `w` over `n` seeded draws (the centre of `W`).
    pub fn mean_w(&self, n: usize, seed: u64) -> Vec<f64> {
        let d = self.config.latent_dim;
        let mut acc = vec![0.0; d];
        for i in 0..n as u64 {
            let w = self.map_to_w_plus(&self.sample_latent(seed.wrapping_add(i))).expect("own latent dim");
            acc.iter_mut().zip(w.tensor().row(0)).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
        acc
    }

    /// Image only; skips the head.
    pub fn render(&self, w: &ExtendedLatent) -> Result<Image> {
        self.check_latent(w)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let wv = g.constant(w.tensor().clone());
        let out = self.synthesis_graph(&mut g, &p, wv);
        Image::new(g.value(out.image).clone())
    }

    pub fn synthesize(&self, w: &ExtendedLatent) -> Result<JointSample> {
        self.check_latent(w)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let wv = g.constant(w.tensor().clone());
        let out = self.synthesis_graph(&mut g, &p, wv);
        let image = Image::new(g.value(out.image).clone())?;
        let Some(head) = &self.head else {
            return Ok(JointSample { image, logits: None, mask: None, head_status: HeadStatus::NoHead });
        };
        let hp = head.params().bind(&mut g, false);
        let cols = self.stack_features_graph(&mut g, &out.features);
        let logits = head.forward(&mut g, &hp, cols);
        let r = self.config.output_resolution;
        let logits = g.value(logits).clone().reshape(&[self.config.num_labels, r, r]);
        let mask = argmax_mask(&logits);
        Ok(JointSample { image, logits: Some(logits), mask: Some(mask), head_status: HeadStatus::Present })
    }

    pub fn build_feature_stack(&self, w: &ExtendedLatent) -> Result<FeatureStack> {
        self.check_latent(w)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let wv = g.constant(w.tensor().clone());
        let out = self.synthesis_graph(&mut g, &p, wv);
        let maps: Vec<Tensor> = out.features.iter().map(|&f| g.value(f).clone()).collect();
        let r = self.config.output_resolution;
        let mut data = Vec::with_capacity(self.config.feature_channels() * r * r);
        for m in &maps {
            data.extend_from_slice(resize_bilinear(m, r, r).data());
        }
        let upsampled = Tensor::new(&[self.config.feature_channels(), r, r], data);
        Ok(FeatureStack { maps, upsampled })
    }
}

/// Label of the largest logit per pixel, ties to the lowest label.
pub fn argmax_mask(logits: &Tensor) -> Mask {
    let s = logits.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = logits.data();
    let labels = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for ci in 1..c {
                if d[ci * h * w + p] > d[best * h * w + p] {
                    best = ci;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(h, w, labels).expect("sizes agree")
}

/// Softmax over the leading (label) axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let c = logits.shape()[0];
    let p = logits.len() / c;
    let d = logits.data();
    let mut out = vec![0.0; d.len()];
    for j in 0..p {
        let mx = (0..c).map(|ci| d[ci * p + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|ci| (d[ci * p + j] - mx).exp()).sum();
        for ci in 0..c {
            out[ci * p + j] = (d[ci * p + j] - mx).exp() / z;
        }
    }
    Tensor::new(logits.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_schedule() {
        assert_eq!(GeneratorConfig::default().layer_resolutions(), vec![4, 8, 8, 16, 16, 32, 32, 64]);
        assert_eq!(GeneratorConfig::toy32().layer_resolutions(), vec![4, 8, 8, 16, 16, 32, 32]);
        assert_eq!(GeneratorConfig::tiny16().layer_resolutions(), vec![4, 8, 8, 16, 16]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = GeneratorConfig::tiny16();
        c.num_labels = 1;
        assert!(Generator::new(c).is_err());
        let mut c = GeneratorConfig::tiny16();
        c.output_resolution = 24;
        assert!(Generator::new(c).is_err());
        let mut c = GeneratorConfig::tiny16();
        c.channels_per_layer.pop();
        assert!(Generator::new(c).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_label() {
        let logits = Tensor::new(&[3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]);
        assert_eq!(argmax_mask(&logits).labels(), &[0, 1]);
    }

    #[test]
    fn synthesis_without_head_reports_status() {
        let g = Generator::new(GeneratorConfig::tiny16()).unwrap();
        let w = g.map_to_w_plus(&g.sample_latent(0)).unwrap();
        let s = g.synthesize(&w).unwrap();
        assert_eq!(s.head_status, HeadStatus::NoHead);
        assert!(s.mask.is_none());
        assert!(s.image.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(g.synthesize(&ExtendedLatent::zeros(3, 8)).is_err());
    }
}

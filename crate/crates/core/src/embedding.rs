//! Image-to-latent embedding: an encoder into the extended latent space and
//! per-image iterative refinement of its output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::features::FeatureExtractor;
use crate::generator::{Generator, LRELU_SLOPE};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::latent::{ExtendedLatent, LatentCode};
use crate::nn::{Adam, Bound, Lookahead, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Perceptual weight on real images.
    pub lambda1: f64,
    /// Pixel L2 weight on real images.
    pub lambda2: f64,
    /// Perceptual weight on generator samples.
    pub lambda3: f64,
    /// Pixel L2 weight on generator samples.
    pub lambda4: f64,
    /// Latent regression weight on generator samples.
    pub lambda5: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Sampling-only steps before joint training; used when `hard_dataset`.
    pub warmup_sampling_steps: usize,
    pub hard_dataset: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 10.0,
            lambda4: 1.0,
            lambda5: 5.0,
            learning_rate: 3e-5,
            batch_size: 8,
            warmup_sampling_steps: 20_000,
            hard_dataset: false,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("encoder loss weights must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub lambda_perceptual: f64,
    pub lambda_l2: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self { steps: 500, learning_rate: 1e-3, lookahead_k: 5, lookahead_alpha: 0.5, lambda_perceptual: 10.0, lambda_l2: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingResult {
    pub w_plus: ExtendedLatent,
    pub reconstruction: Image,
    /// Minimum of `loss_trace`, attained by `w_plus`.
    pub final_loss: f64,
    /// Loss at the initial latent followed by one entry per step.
    pub loss_trace: Vec<f64>,
}

/// Architecture of an [`Encoder`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub resolution: usize,
    pub num_style_layers: usize,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
}

impl EncoderArch {
    /// Conv stages pooling the generator's output resolution down to 4×4.
    pub fn for_generator(generator: &Generator) -> Self {
        let cfg = generator.config();
        let stages = (cfg.output_resolution / 4).trailing_zeros() as usize + 1;
        let channels = (0..stages).map(|i| (16usize << i).min(32)).collect();
        Self { resolution: cfg.output_resolution, num_style_layers: cfg.num_style_layers, latent_dim: cfg.latent_dim, channels }
    }
}

/// Convolutional encoder; its output is a learned bias (initialized at the
/// mean `w`) plus a linear read-out of pooled conv features.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    arch: EncoderArch,
    params: ParamSet,
    convs: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

impl Encoder {
    pub fn with_arch(arch: EncoderArch, seed: u64) -> Result<Self> {
        let r = arch.resolution;
        if r < 4 || !r.is_power_of_two() || arch.channels.len() != (r / 4).trailing_zeros() as usize + 1 {
            return Err(Error::InvalidConfig(format!("encoder stages {:?} do not pool {r} down to 4", arch.channels)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in arch.channels.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let w = params.push(format!("encoder.{i}.weight"), Tensor::randn(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt(), &mut rng));
            let b = params.push(format!("encoder.{i}.bias"), Tensor::zeros(&[cout]));
            convs.push((w, b));
            cin = cout;
        }
        let flat = cin * 16;
        let n_out = arch.num_style_layers * arch.latent_dim;
        let ow = params.push("encoder.out.weight", Tensor::randn(&[n_out, flat], 0.1 / (flat as f64).sqrt(), &mut rng));
        let ob = params.push("encoder.out.bias", Tensor::zeros(&[arch.num_style_layers, arch.latent_dim]));
        Ok(Self { arch, params, convs, out: (ow, ob) })
    }

    /// Encoder for `generator` whose bias starts at the generator's mean `w`.
    pub fn new(generator: &Generator, seed: u64) -> Result<Self> {
        let mut enc = Self::with_arch(EncoderArch::for_generator(generator), seed)?;
        let w_avg = ExtendedLatent::broadcast(&generator.mean_w(1000, 0x3ea7), generator.num_style_layers());
        enc.set_output_bias(w_avg.tensor().clone())?;
        Ok(enc)
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_output_bias(&mut self, bias: Tensor) -> Result<()> {
        self.params.set("encoder.out.bias", bias).map_err(Error::InvalidConfig)
    }

    /// Zeroes the read-out so the encoder returns its bias for any input.
    pub fn zero_readout(&mut self) {
        let shape = self.params.get(self.out.0).shape().to_vec();
        self.params.set("encoder.out.weight", Tensor::zeros(&shape)).expect("own parameter");
    }

    /// `[L, D]` latent for an image `[3, R, R]` on a graph.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Var {
        let mut x = image;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            if i > 0 {
                x = g.avg_pool2(x);
            }
            let y = g.conv2d(x, p[w], 1);
            let y = g.add_channel_bias(y, p[b]);
            x = g.leaky_relu(y, LRELU_SLOPE);
        }
        let n = g.value(x).len();
        let col = g.reshape(x, &[n, 1]);
        let m = g.matmul(p[self.out.0], col);
        let m = g.reshape(m, &[self.arch.num_style_layers, self.arch.latent_dim]);
        g.add(m, p[self.out.1])
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let r = self.arch.resolution;
        if image.height() != r || image.width() != r {
            return Err(mismatch((r, r), (image.height(), image.width())));
        }
        Ok(())
    }

    pub fn encode(&self, image: &Image) -> Result<ExtendedLatent> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.tensor().clone());
        let w = self.forward(&mut g, &p, x);
        Ok(ExtendedLatent::new(g.value(w).clone())?.rounded_to_f32())
    }
}

/// Source of the starting latent for [`embed_image`].
pub trait LatentInitializer {
    fn initial_latent(&self, image: &Image) -> Result<ExtendedLatent>;
}

impl LatentInitializer for Encoder {
    fn initial_latent(&self, image: &Image) -> Result<ExtendedLatent> {
        self.encode(image)
    }
}

/// Returns the same latent for every image.
pub struct FixedLatent(pub ExtendedLatent);

impl LatentInitializer for FixedLatent {
    fn initial_latent(&self, _image: &Image) -> Result<ExtendedLatent> {
        Ok(self.0.clone())
    }
}

/// `λ_p · perceptual(a, b) + λ_2 · mse(a, b)` on a graph.
pub fn rgb_loss_graph(g: &mut Graph, fp: &Bound, a: Var, b: Var, lambda_perceptual: f64, lambda_l2: f64) -> Var {
    let fe = FeatureExtractor::standard();
    let per = fe.perceptual_graph(g, fp, a, b);
    let per = g.scale(per, lambda_perceptual);
    let l2 = g.mse(a, b);
    let l2 = g.scale(l2, lambda_l2);
    g.add(per, l2)
}

fn check_resolution(generator: &Generator, image: &Image) -> Result<()> {
    let r = generator.resolution();
    if image.height() != r || image.width() != r {
        return Err(mismatch((r, r), (image.height(), image.width())));
    }
    Ok(())
}

/// Reconstruction loss of `w` against `target` and its gradient in `w`.
pub fn reconstruction_loss_and_grad(generator: &Generator, w: &ExtendedLatent, target: &Image, cfg: &RefinementConfig) -> Result<(f64, Tensor)> {
    check_resolution(generator, target)?;
    let mut g = Graph::new();
    let p = generator.params().bind(&mut g, false);
    let fp = FeatureExtractor::standard().bind(&mut g);
    let wv = g.variable(w.tensor().clone());
    let out = generator.synthesis_graph(&mut g, &p, wv);
    let x = g.constant(target.tensor().clone());
    let loss = rgb_loss_graph(&mut g, &fp, out.image, x, cfg.lambda_perceptual, cfg.lambda_l2);
    let grads = g.backward(loss);
    Ok((g.scalar(loss), grads.get_or_zeros(wv)))
}

/// Initializes from `init` and refines all latent rows jointly with Adam
/// plus lookahead, keeping the best iterate seen.
pub fn embed_image(generator: &Generator, init: &dyn LatentInitializer, image: &Image, cfg: &RefinementConfig) -> Result<EmbeddingResult> {
    check_resolution(generator, image)?;
    let mut w = vec![init.initial_latent(image)?.rounded_to_f32().into_tensor()];
    let mut opt = Adam::new(cfg.learning_rate);
    let mut lookahead = Lookahead::new(cfg.lookahead_k.max(1), cfg.lookahead_alpha, &w);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, Tensor)> = None;
    for step in 0..=cfg.steps {
        let latent = ExtendedLatent::new(w[0].clone())?;
        let (loss, grad) = reconstruction_loss_and_grad(generator, &latent, image, cfg)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(loss);
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, w[0].clone()));
        }
        if step == cfg.steps {
            break;
        }
        opt.step(&mut w, &[grad]);
        lookahead.after_step(&mut w);
        w[0].round_to_f32();
    }
    let (final_loss, w_best) = best.expect("at least one evaluation");
    let w_plus = ExtendedLatent::new(w_best)?;
    let reconstruction = generator.render(&w_plus)?;
    Ok(EmbeddingResult { w_plus, reconstruction, final_loss, loss_trace: trace })
}

/// Per-component encoder losses of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderLosses {
    pub perceptual: f64,
    pub l2: f64,
    pub latent: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EncoderLog {
    /// `(step, batch mean)` of the weighted real-image loss.
    pub rgb: Vec<(usize, f64)>,
    /// `(step, batch mean)` of the weighted sampling loss.
    pub sampling: Vec<(usize, f64)>,
}

enum Sample<'a> {
    Real(&'a Image),
    Generated(&'a LatentCode),
}

fn encoder_sample_graph(encoder: &Encoder, generator: &Generator, sample: Sample<'_>, cfg: &EncoderConfig, trainable: bool) -> (Graph, Bound, Var, EncoderLosses) {
    let mut g = Graph::new();
    let ep = encoder.params.bind(&mut g, trainable);
    let gp = generator.params().bind(&mut g, false);
    let fp = FeatureExtractor::standard().bind(&mut g);
    let fe = FeatureExtractor::standard();
    let (x, w_true, weights) = match sample {
        Sample::Real(img) => (g.constant(img.tensor().clone()), None, (cfg.lambda1, cfg.lambda2, 0.0)),
        Sample::Generated(z) => {
            let zv = g.constant(Tensor::new(&[z.0.len()], z.0.clone()));
            let w = generator.mapping_graph(&mut g, &gp, zv);
            let wp = generator.broadcast_graph(&mut g, w);
            let img = generator.synthesis_graph(&mut g, &gp, wp).image;
            // the sample is data here, not a path for gradients
            let img = g.constant(g.value(img).clone());
            let wp = g.constant(g.value(wp).clone());
            (img, Some(wp), (cfg.lambda3, cfg.lambda4, cfg.lambda5))
        }
    };
    let w = encoder.forward(&mut g, &ep, x);
    let recon = generator.synthesis_graph(&mut g, &gp, w).image;
    let per = fe.perceptual_graph(&mut g, &fp, recon, x);
    let l2 = g.mse(recon, x);
    let a = g.scale(per, weights.0);
    let b = g.scale(l2, weights.1);
    let mut total = g.add(a, b);
    let mut latent = 0.0;
    if let Some(wt) = w_true {
        let lat = g.mse(w, wt);
        latent = g.scalar(lat);
        let c = g.scale(lat, weights.2);
        total = g.add(total, c);
    }
    let losses = EncoderLosses { perceptual: g.scalar(per), l2: g.scalar(l2), latent, total: g.scalar(total) };
    (g, ep, total, losses)
}

/// Weighted loss on a real image.
pub fn rgb_loss(encoder: &Encoder, generator: &Generator, image: &Image, cfg: &EncoderConfig) -> Result<EncoderLosses> {
    encoder.check_image(image)?;
    Ok(encoder_sample_graph(encoder, generator, Sample::Real(image), cfg, false).3)
}

/// Weighted loss on the generator sample of `z`.
pub fn sampling_loss(encoder: &Encoder, generator: &Generator, z: &LatentCode, cfg: &EncoderConfig) -> Result<EncoderLosses> {
    if z.0.len() != generator.config().latent_dim {
        return Err(mismatch(generator.config().latent_dim, z.0.len()));
    }
    Ok(encoder_sample_graph(encoder, generator, Sample::Generated(z), cfg, false).3)
}

/// Mean weighted real-image loss over `images`.
pub fn mean_rgb_loss(encoder: &Encoder, generator: &Generator, images: &[Image], cfg: &EncoderConfig) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        total += rgb_loss(encoder, generator, img, cfg)?.total;
    }
    Ok(total / images.len().max(1) as f64)
}

impl Encoder {
    /// Continues training for `steps` batches with the generator frozen.
    ///
    /// During warm-up (hard datasets only) every batch is generator
    /// samples; afterwards batches alternate between real images and
    /// samples.
    pub fn train(&mut self, images: &[Image], generator: &Generator, cfg: &EncoderConfig, steps: usize) -> Result<EncoderLog> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for img in images {
            self.check_image(img)?;
        }
        let mut opt = Adam::new(cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe4c0_de00);
        let warmup = if cfg.hard_dataset { cfg.warmup_sampling_steps } else { 0 };
        let mut log = EncoderLog::default();
        let inv = 1.0 / cfg.batch_size as f64;
        for step in 0..steps {
            let sampling = step < warmup || (step - warmup) % 2 == 1;
            let mut acc: Vec<Tensor> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let z;
                let sample = if sampling {
                    z = generator.sample_latent(rng.gen());
                    Sample::Generated(&z)
                } else {
                    Sample::Real(&images[rng.gen_range(0..images.len())])
                };
                let (g, ep, total, losses) = encoder_sample_graph(self, generator, sample, cfg, true);
                batch_loss += losses.total * inv;
                let grads = g.backward(total);
                for (a, &v) in acc.iter_mut().zip(ep.vars()) {
                    *a = a.zip_map(&grads.get_or_zeros(v), |x, y| x + inv * y);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            if sampling {
                log.sampling.push((step, batch_loss));
            } else {
                log.rgb.push((step, batch_loss));
            }
            self.params.apply(&mut opt, &acc);
        }
        Ok(log)
    }
}

/// Builds an encoder for `generator` and trains it.
pub fn train_encoder(images: &[Image], generator: &Generator, cfg: &EncoderConfig, steps: usize) -> Result<(Encoder, EncoderLog)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut encoder = Encoder::new(generator, cfg.seed)?;
    let log = encoder.train(images, generator, cfg, steps)?;
    Ok((encoder, log))
}

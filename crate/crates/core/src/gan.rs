//! A minimal nonsaturating adversarial trainer for the toy generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, LRELU_SLOPE};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{Adam, Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Convolutional real/fake critic, pooling down to 4×4.
#[derive(Clone, Debug)]
pub struct Discriminator {
    params: ParamSet,
    convs: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
    resolution: usize,
}

impl Discriminator {
    pub fn new(resolution: usize, seed: u64) -> Result<Self> {
        if resolution < 4 || !resolution.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("discriminator resolution {resolution} must be a power of two ≥ 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let stages = (resolution / 4).trailing_zeros() as usize + 1;
        let mut cin = 3;
        let mut convs = Vec::new();
        for i in 0..stages {
            let cout = (16 << i.min(1)).min(32);
            let fan_in = (cin * 9) as f64;
            let w = params.push(format!("disc.{i}.weight"), Tensor::randn(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt(), &mut rng));
            let b = params.push(format!("disc.{i}.bias"), Tensor::zeros(&[cout]));
            convs.push((w, b));
            cin = cout;
        }
        let flat = cin * 16;
        let hw = params.push("disc.out.weight", Tensor::randn(&[1, flat], (1.0 / flat as f64).sqrt(), &mut rng));
        let hb = params.push("disc.out.bias", Tensor::zeros(&[1]));
        Ok(Self { params, convs, head: (hw, hb), resolution })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Real/fake logit `[1]` for an image `[3, R, R]`.
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
        let out = g.matmul(p[self.head.0], col);
        let out = g.reshape(out, &[1]);
        g.add(out, p[self.head.1])
    }

    pub fn logit(&self, image: &Image) -> f64 {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.tensor().clone());
        let out = self.forward(&mut g, &p, x);
        g.scalar(out)
    }

    /// Fraction of reals scored positive and fakes scored negative.
    pub fn accuracy(&self, reals: &[Image], fakes: &[Image]) -> f64 {
        let hits = reals.iter().filter(|x| self.logit(x) > 0.0).count() + fakes.iter().filter(|x| self.logit(x) <= 0.0).count();
        hits as f64 / (reals.len() + fakes.len()).max(1) as f64
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decay of the generator weight average that is returned.
    pub ema_beta: f64,
    /// Weight of the gradient penalty on reals.
    pub r1_gamma: f64,
    /// Probe noise scale of the finite-difference penalty estimate.
    pub r1_sigma: f64,
    /// Whether the mapping network is updated.
    pub train_mapping: bool,
    /// Steps between held-out discriminator accuracy probes; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            ema_beta: 0.99,
            r1_gamma: 1.0,
            r1_sigma: 0.01,
            train_mapping: false,
            eval_every: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GanLog {
    pub generator_loss: Vec<f64>,
    pub discriminator_loss: Vec<f64>,
    /// `(step, held-out discriminator accuracy)`.
    pub discriminator_accuracy: Vec<(usize, f64)>,
}

pub struct GanOutcome {
    /// Weight-averaged generator.
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: GanLog,
}

fn add_into(acc: &mut [Tensor], grads: impl Iterator<Item = Tensor>, k: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        *a = a.zip_map(&g, |x, y| x + k * y);
    }
}

fn zeros_like(p: &ParamSet) -> Vec<Tensor> {
    p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

/// Trains a generator on `images` with the nonsaturating logistic loss.
///
/// The critic's input-gradient penalty `γ/2·‖∇ₓD(x)‖²` on reals is
/// estimated from first-order quantities as `γ/2·(D(x + σn) − D(x))²/σ²`
/// with one Gaussian probe `n` per real, which has the same expectation to
/// leading order in `σ`.
///
/// Generator and discriminator gradients are taken at the same iterate and
/// applied together. The last quarter of `images` (at least one) is held
/// out for the accuracy probe. Deterministic in `(images, config, gan)`.
pub fn train_toy_gan(images: &[Image], config: &GeneratorConfig, gan: &GanConfig) -> Result<GanOutcome> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let r = config.output_resolution;
    if let Some(bad) = images.iter().find(|x| x.height() != r || x.width() != r) {
        return Err(crate::error::mismatch((r, r), (bad.height(), bad.width())));
    }
    let mut generator = Generator::new(config.clone())?;
    let mut average = generator.clone();
    let mut disc = Discriminator::new(r, gan.seed ^ 0xd15c)?;
    let mut g_opt = Adam::with_betas(gan.learning_rate, 0.0, 0.99);
    let mut d_opt = Adam::with_betas(gan.learning_rate, 0.0, 0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(gan.seed);
    let held = (images.len() / 4).max(1).min(images.len());
    let (train, probe) = if images.len() > 1 { images.split_at(images.len() - held) } else { (images, images) };
    let mut log = GanLog::default();
    let batch = gan.batch_size.max(1);
    let inv = 1.0 / batch as f64;

    for step in 0..gan.steps {
        let mut g_grads = zeros_like(generator.params());
        let mut d_grads = zeros_like(disc.params());
        let (mut g_loss, mut d_loss) = (0.0, 0.0);
        for _ in 0..batch {
            // generator pass through the current critic
            let z = generator.sample_latent(rng.gen());
            let mut g = Graph::new();
            let gp = generator.params().bind(&mut g, true);
            let dp = disc.params.bind(&mut g, false);
            let zv = g.constant(Tensor::new(&[z.0.len()], z.0));
            let w = generator.mapping_graph(&mut g, &gp, zv);
            let wp = generator.broadcast_graph(&mut g, w);
            let out = generator.synthesis_graph(&mut g, &gp, wp);
            let logit = disc.forward(&mut g, &dp, out.image);
            let neg = g.scale(logit, -1.0);
            let sp = g.softplus(neg);
            let loss = g.sum(sp);
            g_loss += g.scalar(loss) * inv;
            let grads = g.backward(loss);
            add_into(&mut g_grads, gp.vars().iter().map(|&v| grads.get_or_zeros(v)), inv);
            let fake = g.value(out.image).clone();

            // critic on the same fake and one real
            let real = train[rng.gen_range(0..train.len())].tensor().clone();
            let probe = Tensor::randn(real.shape(), gan.r1_sigma, &mut rng);
            for (img, sign) in [(fake, 1.0), (real, -1.0)] {
                let mut g = Graph::new();
                let dp = disc.params.bind(&mut g, true);
                let x = g.constant(img.clone());
                let logit = disc.forward(&mut g, &dp, x);
                let s = g.scale(logit, sign);
                let sp = g.softplus(s);
                let mut loss = g.sum(sp);
                d_loss += g.scalar(loss) * inv;
                if sign < 0.0 && gan.r1_gamma > 0.0 {
                    let xn = g.constant(img.zip_map(&probe, |a, b| a + b));
                    let ln = disc.forward(&mut g, &dp, xn);
                    let diff = g.sub(ln, logit);
                    let sq = g.square(diff);
                    let pen = g.sum(sq);
                    let pen = g.scale(pen, 0.5 * gan.r1_gamma / (gan.r1_sigma * gan.r1_sigma));
                    loss = g.add(loss, pen);
                }
                let grads = g.backward(loss);
                add_into(&mut d_grads, dp.vars().iter().map(|&v| grads.get_or_zeros(v)), inv);
            }
        }
        if !g_loss.is_finite() || !d_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if !gan.train_mapping {
            // with β₁ = 0 a zero gradient leaves a weight exactly in place
            for (t, (name, _)) in g_grads.iter_mut().zip(generator.params().iter()) {
                if name.starts_with("mapping.") {
                    *t = Tensor::zeros(t.shape());
                }
            }
        }
        generator.params_mut().apply(&mut g_opt, &g_grads);
        disc.params.apply(&mut d_opt, &d_grads);
        average.params_mut().ema_update(generator.params(), gan.ema_beta);
        log.generator_loss.push(g_loss);
        log.discriminator_loss.push(d_loss);
        if gan.eval_every > 0 && ((step + 1) % gan.eval_every == 0 || step + 1 == gan.steps) {
            let fakes: Vec<Image> = (0..probe.len() as u64)
                .map(|i| {
                    let w = generator.map_to_w_plus(&generator.sample_latent(u64::MAX - i)).expect("own latent dim");
                    generator.render(&w).expect("own latent shape")
                })
                .collect();
            let acc = disc.accuracy(probe, &fakes);
            log::info!("gan step {}: g {:.4} d {:.4} held-out disc acc {:.3}", step + 1, g_loss, d_loss, acc);
            log.discriminator_accuracy.push((step + 1, acc));
        }
    }
    Ok(GanOutcome { generator: average, discriminator: disc, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::SceneSample;

    fn data(n: u64) -> Vec<Image> {
        (0..n).map(|s| SceneSample::generate(16, s).image).collect()
    }

    fn cfg16() -> GeneratorConfig {
        GeneratorConfig { num_labels: 8, ..GeneratorConfig::tiny16() }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let out = train_toy_gan(&data(4), &cfg16(), &GanConfig { steps: 0, ..GanConfig::default() }).unwrap();
        assert_eq!(out.generator.fingerprint(), Generator::new(cfg16()).unwrap().fingerprint());
    }

    #[test]
    fn training_is_reproducible() {
        let gc = GanConfig { steps: 3, batch_size: 2, eval_every: 0, ..GanConfig::default() };
        let a = train_toy_gan(&data(6), &cfg16(), &gc).unwrap();
        let b = train_toy_gan(&data(6), &cfg16(), &gc).unwrap();
        assert_eq!(a.generator.fingerprint(), b.generator.fingerprint());
        assert_ne!(a.generator.fingerprint(), Generator::new(cfg16()).unwrap().fingerprint());
        assert_eq!(a.log.generator_loss.len(), 3);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(train_toy_gan(&[], &cfg16(), &GanConfig::default()), Err(Error::EmptyDataset)));
    }
}

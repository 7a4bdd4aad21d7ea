//! The per-pixel segmentation branch and its few-shot training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::generator::{argmax_mask, Generator, LRELU_SLOPE};
use crate::graph::{Graph, Var};
use crate::image::{pixel_accuracy, Image, Mask};
use crate::latent::ExtendedLatent;
use crate::nn::{Adam, Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Three-layer per-pixel classifier over the concatenated feature stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationHead {
    in_features: usize,
    hidden: [usize; 2],
    num_labels: usize,
    params: ParamSet,
    layers: [(ParamId, ParamId); 3],
}

impl SegmentationHead {
    pub fn new(in_features: usize, hidden: [usize; 2], num_labels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let dims = [in_features, hidden[0], hidden[1], num_labels];
        let mut layers = Vec::new();
        for i in 0..3 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let w = params.push(format!("head.{i}.weight"), Tensor::randn(&[fan_out, fan_in], (2.0 / fan_in as f64).sqrt(), &mut rng));
            let b = params.push(format!("head.{i}.bias"), Tensor::zeros(&[fan_out]));
            layers.push((w, b));
        }
        Self { in_features, hidden, num_labels, params, layers: [layers[0], layers[1], layers[2]] }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn hidden(&self) -> [usize; 2] {
        self.hidden
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `x: [F, P]` pixel columns → `[C, P]` logits.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let m = g.matmul(p[w], h);
            h = g.add_channel_bias(m, p[b]);
            if i < 2 {
                h = g.leaky_relu(h, LRELU_SLOPE);
            }
        }
        h
    }

    /// Logits for precomputed pixel columns, outside any training graph.
    pub fn predict_columns(&self, columns: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(columns.clone());
        let out = self.forward(&mut g, &p, x);
        g.value(out).clone()
    }
}

/// An annotated image together with its embedding.
#[derive(Clone, Debug)]
pub struct LabeledPair {
    pub image: Image,
    pub mask: Mask,
    pub w_plus: Option<ExtendedLatent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_widths: [usize; 2],
    pub learning_rate: f64,
    pub pixels_per_batch: usize,
    pub max_steps: usize,
    pub target_train_accuracy: f64,
    /// Steps between full training-accuracy evaluations.
    pub eval_every: usize,
    /// Cross-entropy weight of label `c` is proportional to
    /// `frequency(c)^-class_weight_power`; 0 weighs all pixels equally.
    pub class_weight_power: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_widths: [128, 64],
            learning_rate: 1e-3,
            pixels_per_batch: 64,
            max_steps: 20_000,
            target_train_accuracy: 0.99,
            eval_every: 250,
            class_weight_power: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HeadTrainingLog {
    pub losses: Vec<f64>,
    /// `(step, training pixel accuracy)` at each evaluation.
    pub accuracy: Vec<(usize, f64)>,
    pub steps: usize,
}

impl HeadTrainingLog {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().map(|a| a.1).unwrap_or(0.0)
    }
}

/// Uniform draws of `(image, pixel)` over the union of training images.
pub struct PixelSampler {
    pixels_per_image: usize,
    images: usize,
}

impl PixelSampler {
    pub fn new(images: usize, pixels_per_image: usize) -> Self {
        Self { pixels_per_image, images }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let idx = rng.gen_range(0..self.images * self.pixels_per_image);
        (idx / self.pixels_per_image, idx % self.pixels_per_image)
    }
}

/// `[F, H·W]` feature columns for a latent.
pub fn feature_columns(generator: &Generator, w: &ExtendedLatent) -> Result<Tensor> {
    let stack = generator.build_feature_stack(w)?;
    let r = generator.resolution();
    Ok(stack.upsampled.reshape(&[generator.config().feature_channels(), r * r]))
}

/// Predicted mask from precomputed feature columns.
pub fn predict_mask(head: &SegmentationHead, columns: &Tensor, resolution: usize) -> Mask {
    let logits = head.predict_columns(columns).reshape(&[head.num_labels(), resolution, resolution]);
    argmax_mask(&logits)
}

/// Trains a fresh head on embedded labeled pairs. The generator is only
/// read.
pub fn train_head(generator: &Generator, pairs: &[LabeledPair], config: &HeadConfig) -> Result<(SegmentationHead, HeadTrainingLog)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.hidden_widths.contains(&0) {
        return Err(Error::InvalidConfig("hidden widths must be positive".into()));
    }
    let cfg = generator.config();
    let r = cfg.output_resolution;
    let mut columns = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for pair in pairs {
        pair.mask.validate(cfg.num_labels)?;
        if pair.mask.height() != r || pair.mask.width() != r {
            return Err(mismatch((r, r), (pair.mask.height(), pair.mask.width())));
        }
        let w = pair.w_plus.as_ref().ok_or_else(|| Error::InvalidConfig("labeled pair has no embedding".into()))?;
        columns.push(feature_columns(generator, w)?);
        targets.push(pair.mask.clone());
    }
    let mut counts = vec![0usize; cfg.num_labels];
    for t in &targets {
        for &l in t.labels() {
            counts[l as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let class_weight: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { (c as f64 / total as f64).powf(-config.class_weight_power) })
        .collect();
    // normalized so the mean weight over training pixels is 1
    let mean_w: f64 = counts.iter().zip(&class_weight).map(|(&c, w)| c as f64 * w).sum::<f64>() / total as f64;
    let class_weight: Vec<f64> = class_weight.iter().map(|w| w / mean_w).collect();
    let f = cfg.feature_channels();
    let mut head = SegmentationHead::new(f, config.hidden_widths, cfg.num_labels, config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let sampler = PixelSampler::new(pairs.len(), r * r);
    let mut log = HeadTrainingLog::default();
    let batch = config.pixels_per_batch.max(1);
    let eval_every = config.eval_every.max(1);

    let evaluate = |head: &SegmentationHead| -> f64 {
        let mut acc = 0.0;
        for (cols, truth) in columns.iter().zip(&targets) {
            acc += pixel_accuracy(&predict_mask(head, cols, r), truth).expect("shapes agree");
        }
        acc / columns.len() as f64
    };

    for step in 0..config.max_steps {
        let mut x = vec![0.0; f * batch];
        let mut t = Vec::with_capacity(batch);
        for j in 0..batch {
            let (img, px) = sampler.sample(&mut rng);
            let src = columns[img].data();
            for ch in 0..f {
                x[ch * batch + j] = src[ch * r * r + px];
            }
            t.push(targets[img].labels()[px] as usize);
        }
        let mut g = Graph::new();
        let p = head.params.bind(&mut g, true);
        let xv = g.constant(Tensor::new(&[f, batch], x));
        let logits = head.forward(&mut g, &p, xv);
        let weights: Vec<f64> = t.iter().map(|&l| class_weight[l]).collect();
        let loss = g.cross_entropy(logits, &t, &weights);
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.losses.push(lv);
        let grads = g.backward(loss);
        let gs: Vec<Tensor> = p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
        head.params.apply(&mut opt, &gs);
        log.steps = step + 1;
        if (step + 1) % eval_every == 0 || step + 1 == config.max_steps {
            let acc = evaluate(&head);
            log.accuracy.push((step + 1, acc));
            if acc >= config.target_train_accuracy {
                break;
            }
        }
    }
    if log.accuracy.is_empty() {
        log.accuracy.push((0, evaluate(&head)));
    }
    Ok((head, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn tiny() -> Generator {
        Generator::new(GeneratorConfig::tiny16()).unwrap()
    }

    #[test]
    fn constant_label_reaches_full_accuracy() {
        let g = tiny();
        let w = g.map_to_w_plus(&g.sample_latent(3)).unwrap();
        let pair = LabeledPair { image: g.render(&w).unwrap(), mask: Mask::filled(16, 16, 2), w_plus: Some(w) };
        let cfg = HeadConfig { max_steps: 200, eval_every: 20, target_train_accuracy: 1.0, ..HeadConfig::default() };
        let (_, log) = train_head(&g, &[pair], &cfg).unwrap();
        assert_eq!(log.final_accuracy(), 1.0);
        assert!(log.steps <= 200);
    }

    #[test]
    fn generator_untouched_and_errors() {
        let g = tiny();
        let before = g.params().fingerprint();
        let w = g.map_to_w_plus(&g.sample_latent(1)).unwrap();
        let mut mask = Mask::filled(16, 16, 0);
        for y in 8..16 {
            for x in 0..16 {
                mask.set(y, x, 1);
            }
        }
        let pair = LabeledPair { image: g.render(&w).unwrap(), mask, w_plus: Some(w) };
        let cfg = HeadConfig { max_steps: 50, ..HeadConfig::default() };
        train_head(&g, std::slice::from_ref(&pair), &cfg).unwrap();
        assert_eq!(g.params().fingerprint(), before);

        assert!(matches!(train_head(&g, &[], &cfg), Err(Error::EmptyDataset)));
        let mut bad = pair.clone();
        bad.mask.set(0, 0, 9);
        assert!(matches!(train_head(&g, &[bad], &cfg), Err(Error::LabelOutOfRange { label: 9, .. })));
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[2, 1], vec![60.0, -60.0]));
        let ce = g.cross_entropy(l, &[0], &[1.0]);
        assert!(g.scalar(ce) >= 0.0 && g.scalar(ce) < 1e-6);
    }
}

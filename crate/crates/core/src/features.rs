//! Fixed, seeded convolutional feature extractor.
//!
//! Stands in for pretrained perceptual and identity networks: a three-stage
//! random conv net whose weights are fully determined by [`EXTRACTOR_SEED`].
//! The perceptual distance sums, over the pixel layer and each conv stage,
//! the spatial mean of squared differences of channel-normalized features.
//! Identity features are the pooled conv activations, centred on those of a
//! mid-grey image.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{mismatch, Error, Result};
use crate::generator::LRELU_SLOPE;
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const EXTRACTOR_SEED: u64 = 0x1a7e_5eed;
const STAGE_CHANNELS: [usize; 3] = [8, 16, 16];
const NORM_EPS: f64 = 1e-10;

#[derive(Debug)]
pub struct FeatureExtractor {
    params: ParamSet,
    convs: Vec<(ParamId, ParamId)>,
    // pooled features of a mid-grey image, per (height, width)
    references: Mutex<HashMap<(usize, usize), Vec<f64>>>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in STAGE_CHANNELS.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let w = params.push(format!("extract.{i}.weight"), Tensor::randn(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt(), &mut rng));
            let b = params.push(format!("extract.{i}.bias"), Tensor::randn(&[cout], 0.1, &mut rng));
            convs.push((w, b));
            cin = cout;
        }
        Self { params, convs, references: Mutex::new(HashMap::new()) }
    }

    /// The shared instance built from [`EXTRACTOR_SEED`].
    pub fn standard() -> &'static FeatureExtractor {
        static INSTANCE: OnceLock<FeatureExtractor> = OnceLock::new();
        INSTANCE.get_or_init(|| FeatureExtractor::new(EXTRACTOR_SEED))
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    /// Conv-stage activations for an image `[3, H, W]`.
    pub fn stages_graph(&self, g: &mut Graph, p: &Bound, image: Var) -> Vec<Var> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            if i > 0 {
                x = g.avg_pool2(x);
            }
            let y = g.conv2d(x, p[w], 1);
            let y = g.add_channel_bias(y, p[b]);
            x = g.leaky_relu(y, LRELU_SLOPE);
            out.push(x);
        }
        out
    }

    /// Perceptual distance between two images on a graph.
    pub fn perceptual_graph(&self, g: &mut Graph, p: &Bound, a: Var, b: Var) -> Var {
        let c = g.shape(a)[0] as f64;
        let pix = g.mse(a, b);
        let mut total = g.scale(pix, c);
        let fa = self.stages_graph(g, p, a);
        let fb = self.stages_graph(g, p, b);
        for (&x, &y) in fa.iter().zip(&fb) {
            let ch = g.shape(x)[0] as f64;
            let nx = g.channel_normalize(x, NORM_EPS);
            let ny = g.channel_normalize(y, NORM_EPS);
            let d = g.mse(nx, ny);
            let d = g.scale(d, ch);
            total = g.add(total, d);
        }
        total
    }

    /// Centred pooled identity features on a graph.
    pub fn identity_graph(&self, g: &mut Graph, p: &Bound, image: Var) -> Var {
        let stages = self.stages_graph(g, p, image);
        let pooled: Vec<Var> = stages.iter().map(|&s| g.global_avg_pool(s)).collect();
        let v = g.concat(&pooled);
        let s = g.shape(image);
        let reference = self.reference(s[1], s[2]);
        let reference = g.constant(Tensor::new(&[reference.len()], reference));
        g.sub(v, reference)
    }

    fn reference(&self, h: usize, w: usize) -> Vec<f64> {
        let mut refs = self.references.lock().expect("reference cache poisoned");
        refs.entry((h, w)).or_insert_with(|| self.raw_pooled(&Image::filled(h, w, [0.0; 3]))).clone()
    }

    fn raw_pooled(&self, image: &Image) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(image.tensor().clone());
        let stages = self.stages_graph(&mut g, &p, x);
        stages
            .iter()
            .flat_map(|&s| {
                let t = g.value(s);
                let c = t.shape()[0];
                let n = t.len() / c;
                t.data().chunks(n).map(move |ch| ch.iter().sum::<f64>() / n as f64).collect::<Vec<_>>()
            })
            .collect()
    }

    fn check_pair(a: &Image, b: &Image) -> Result<()> {
        if a.tensor().shape() != b.tensor().shape() {
            return Err(mismatch(a.tensor().shape(), b.tensor().shape()));
        }
        Self::check_size(a)
    }

    fn check_size(a: &Image) -> Result<()> {
        if a.height() % 4 != 0 || a.width() % 4 != 0 {
            return Err(Error::InvalidConfig(format!("image sides must be multiples of 4, got {}×{}", a.height(), a.width())));
        }
        Ok(())
    }

    pub fn perceptual_distance(&self, a: &Image, b: &Image) -> Result<f64> {
        Self::check_pair(a, b)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let av = g.constant(a.tensor().clone());
        let bv = g.constant(b.tensor().clone());
        let d = self.perceptual_graph(&mut g, &p, av, bv);
        Ok(g.scalar(d))
    }

    pub fn identity_features(&self, image: &Image) -> Result<Vec<f64>> {
        Self::check_size(image)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(image.tensor().clone());
        let v = self.identity_graph(&mut g, &p, x);
        Ok(g.value(v).data().to_vec())
    }
}

/// Perceptual distance under the standard extractor.
pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64> {
    FeatureExtractor::standard().perceptual_distance(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Tensor::randn(&[3, 16, 16], 0.4, &mut rng).map(|v| v.clamp(-1.0, 1.0))).unwrap()
    }

    #[test]
    fn distance_is_zero_on_identical_and_symmetric() {
        let a = random_image(1);
        let b = random_image(2);
        assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&a, &b).unwrap();
        let ba = perceptual_distance(&b, &a).unwrap();
        assert!(ab > 1e-8);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn distance_grows_along_noise_path() {
        for seed in 0..20 {
            let a = random_image(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let noise = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
            let mut last = 0.0;
            for t in [0.1, 0.2, 0.4] {
                let b = Image::new(a.tensor().zip_map(&noise, |x, n| x + t * n)).unwrap();
                let d = perceptual_distance(&a, &b).unwrap();
                assert!(d > last, "seed {seed}: d({t}) = {d} not above {last}");
                last = d;
            }
        }
    }

    #[test]
    fn grey_image_has_zero_identity_features() {
        let f = FeatureExtractor::standard().identity_features(&Image::filled(16, 16, [0.0; 3])).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-12));
        assert!(perceptual_distance(&random_image(1), &Image::filled(8, 8, [0.0; 3])).is_err());
    }
}

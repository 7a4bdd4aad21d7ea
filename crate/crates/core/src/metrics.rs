//! Distribution and identity metrics, the attribute classifier, and the
//! editing-scale benchmark.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editing::{apply_editing_vector, refine_edit, EditingLossConfig, EditingVector};
use crate::error::{mismatch, Error, Result};
use crate::features::FeatureExtractor;
use crate::generator::Generator;
use crate::graph::{self, Graph, Var};
use crate::image::Image;
use crate::latent::ExtendedLatent;
use crate::nn::{Adam, Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

fn to_matrix(set: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if set.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: set.len() });
    }
    let d = set[0].len();
    if let Some(bad) = set.iter().find(|v| v.len() != d) {
        return Err(mismatch(d, bad.len()));
    }
    Ok(DMatrix::from_fn(set.len(), d, |i, j| set[i][j]))
}

fn check_pair(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (ma, mb) = (to_matrix(a)?, to_matrix(b)?);
    if ma.ncols() != mb.ncols() {
        return Err(mismatch(ma.ncols(), mb.ncols()));
    }
    Ok((ma, mb))
}

/// Sample mean and unbiased covariance of the rows.
pub fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let centred = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mu[j]);
    let cov = centred.transpose() * &centred / (n - 1.0);
    (mu, cov)
}

/// Square root of a symmetric positive semi-definite matrix, negative
/// eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`.
///
/// `tr (Σ₁Σ₂)^½` is evaluated as `tr (Σ₁^½ Σ₂ Σ₁^½)^½`, a symmetric
/// product with the same eigenvalues.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, mb) = check_pair(a, b)?;
    let (mu1, s1) = moments(&ma);
    let (mu2, s2) = moments(&mb);
    let root1 = psd_sqrt(&s1);
    let inner = &root1 * &s2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt)
}

/// Unbiased squared MMD with kernel `(xᵀy/d + 1)³`.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, mb) = check_pair(a, b)?;
    let d = ma.ncols() as f64;
    let kernel = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x * y.transpose()).map(|v| (v / d + 1.0).powi(3));
    let (kaa, kbb, kab) = (kernel(&ma, &ma), kernel(&mb, &mb), kernel(&ma, &mb));
    let (m, n) = (ma.nrows() as f64, mb.nrows() as f64);
    let off_diag = |k: &DMatrix<f64>| k.sum() - k.trace();
    Ok(off_diag(&kaa) / (m * (m - 1.0)) + off_diag(&kbb) / (n * (n - 1.0)) - 2.0 * kab.sum() / (m * n))
}

/// Pooled feature vector of an image under the standard extractor.
pub fn image_features(image: &Image) -> Result<Vec<f64>> {
    FeatureExtractor::standard().identity_features(image)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormFeature);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the identity features of two images.
pub fn id_score(a: &Image, b: &Image) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(mismatch(a.tensor().shape(), b.tensor().shape()));
    }
    cosine(&image_features(a)?, &image_features(b)?)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `NaN` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Binary image attribute classifier: a 3×3 conv with ReLU, sum-pooled and
/// read out linearly.
#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    params: ParamSet,
    conv: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of samples held out for the reported accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { channels: 16, steps: 1500, batch_size: 16, learning_rate: 0.03, holdout: 0.2, seed: 0 }
    }
}

impl AttributeClassifier {
    fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cw = params.push("attr.conv.weight", Tensor::randn(&[channels, 3, 3, 3], (2.0 / 27.0f64).sqrt(), &mut rng));
        let cb = params.push("attr.conv.bias", Tensor::zeros(&[channels]));
        let ow = params.push("attr.out.weight", Tensor::randn(&[1, channels], (1.0 / channels as f64).sqrt(), &mut rng));
        let ob = params.push("attr.out.bias", Tensor::zeros(&[1]));
        Self { params, conv: (cw, cb), out: (ow, ob) }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Var {
        let hw = (g.shape(image)[1] * g.shape(image)[2]) as f64;
        let y = g.conv2d(image, p[self.conv.0], 1);
        let y = g.add_channel_bias(y, p[self.conv.1]);
        let y = g.leaky_relu(y, 0.0);
        let pooled = g.global_avg_pool(y);
        let pooled = g.scale(pooled, hw / 100.0);
        let c = g.shape(pooled)[0];
        let col = g.reshape(pooled, &[c, 1]);
        let o = g.matmul(p[self.out.0], col);
        let o = g.reshape(o, &[1]);
        g.add(o, p[self.out.1])
    }

    /// Probability that the attribute is present.
    pub fn probability(&self, image: &Image) -> f64 {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.tensor().clone());
        let o = self.forward(&mut g, &p, x);
        graph::sigmoid(g.scalar(o))
    }

    pub fn predict(&self, image: &Image) -> bool {
        self.probability(image) > 0.5
    }

    pub fn accuracy(&self, images: &[Image], labels: &[bool]) -> f64 {
        let hits = images.iter().zip(labels).filter(|(x, &l)| self.predict(x) == l).count();
        hits as f64 / images.len().max(1) as f64
    }
}

/// Trains on a shuffled split and reports held-out accuracy.
pub fn train_attribute_classifier(images: &[Image], labels: &[bool], cfg: &ClassifierConfig) -> Result<(AttributeClassifier, f64)> {
    if images.len() != labels.len() {
        return Err(mismatch(images.len(), labels.len()));
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((images.len() as f64 * cfg.holdout).round() as usize).min(images.len() - 1);
    let (hold, train) = order.split_at(n_hold);
    let mut clf = AttributeClassifier::new(cfg.channels, cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let inv = 1.0 / cfg.batch_size.max(1) as f64;
    for step in 0..cfg.steps {
        let mut acc: Vec<Tensor> = clf.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size.max(1) {
            let i = *train.choose(&mut rng).expect("non-empty training split");
            let mut g = Graph::new();
            let p = clf.params.bind(&mut g, true);
            let x = g.constant(images[i].tensor().clone());
            let o = clf.forward(&mut g, &p, x);
            // logistic loss: softplus(−o) for positives, softplus(o) for negatives
            let s = g.scale(o, if labels[i] { -1.0 } else { 1.0 });
            let l = g.softplus(s);
            let l = g.sum(l);
            total += g.scalar(l);
            let grads = g.backward(l);
            for (a, &v) in acc.iter_mut().zip(p.vars()) {
                *a = a.zip_map(&grads.get_or_zeros(v), |x, y| x + inv * y);
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        clf.params.apply(&mut opt, &acc);
    }
    let eval: &[usize] = if hold.is_empty() { train } else { hold };
    let xs: Vec<Image> = eval.iter().map(|&i| images[i].clone()).collect();
    let ys: Vec<bool> = eval.iter().map(|&i| labels[i]).collect();
    let accuracy = clf.accuracy(&xs, &ys);
    Ok((clf, accuracy))
}

/// One row of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scale: f64,
    pub refine_steps: usize,
    /// Fraction of edited images the classifier assigns the target value.
    pub attribute_accuracy: f64,
    pub fid: f64,
    pub kid: f64,
    /// Mean identity cosine between each edited image and its unedited one.
    pub id_score: f64,
    pub n_images: usize,
}

/// Inputs of [`run_benchmark`].
pub struct Benchmark<'a> {
    pub generator: &'a Generator,
    pub vector: &'a EditingVector,
    pub scales: &'a [f64],
    /// Refinement step counts; 0 applies the vector only.
    pub refine_steps: &'a [usize],
    pub test_latents: &'a [ExtendedLatent],
    /// Images the edited set is compared against.
    pub reference: &'a [Image],
    pub classifier: &'a AttributeClassifier,
    /// Attribute value the edit is meant to produce.
    pub target: bool,
    pub refine_config: EditingLossConfig,
}

pub const SCALE_GRID: [f64; 5] = [0.7, 1.0, 1.3, 1.5, 1.7];

/// One report per `(refine_steps, scale)`, refinement settings outermost.
pub fn run_benchmark(b: &Benchmark<'_>) -> Result<Vec<MetricsReport>> {
    if b.test_latents.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let originals: Vec<Image> = b.test_latents.iter().map(|w| b.generator.render(w)).collect::<Result<_>>()?;
    let reference: Vec<Vec<f64>> = b.reference.iter().map(image_features).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &steps in b.refine_steps {
        for &scale in b.scales {
            let mut edited = Vec::with_capacity(b.test_latents.len());
            for w in b.test_latents {
                let img = if steps == 0 || scale == 0.0 {
                    apply_editing_vector(b.generator, w, b.vector, scale)?.0.image
                } else {
                    refine_edit(b.generator, w, b.vector, scale, steps, &b.refine_config)?.sample.image
                };
                edited.push(img);
            }
            let feats: Vec<Vec<f64>> = edited.iter().map(image_features).collect::<Result<_>>()?;
            let mut id = 0.0;
            for (e, o) in edited.iter().zip(&originals) {
                id += id_score(e, o)?;
            }
            let hits = edited.iter().filter(|x| b.classifier.predict(x) == b.target).count();
            rows.push(MetricsReport {
                scale,
                refine_steps: steps,
                attribute_accuracy: hits as f64 / edited.len() as f64,
                fid: fid(&feats, &reference)?,
                kid: kid(&feats, &reference)?,
                id_score: id / edited.len() as f64,
                n_images: edited.len(),
            });
        }
    }
    Ok(rows)
}

pub fn reports_to_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from("scale,refine_steps,attribute_accuracy,fid,kid,id_score,n_images\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.scale, r.refine_steps, r.attribute_accuracy, r.fid, r.kid, r.id_score, r.n_images));
    }
    out
}

pub fn reports_to_json(rows: &[MetricsReport]) -> String {
    crate::container::canonical_json(&serde_json::to_value(rows).expect("reports serialize"))
}

/// Plot series: scale against FID, and attribute accuracy against identity.
pub fn plot_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from("series,refine_steps,x,y\n");
    for r in rows {
        out.push_str(&format!("scale_vs_fid,{},{},{}\n", r.refine_steps, r.scale, r.fid));
    }
    for r in rows {
        out.push_str(&format!("attribute_vs_id,{},{},{}\n", r.refine_steps, r.attribute_accuracy, r.id_score));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_set(n: usize, d: usize, seed: u64, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::randn(&[d], 1.0, &mut rng).into_data().into_iter().map(|v| v + shift).collect()).collect()
    }

    #[test]
    fn fid_zero_on_identical_and_symmetric() {
        let a = random_set(20, 4, 1, 0.0);
        let b = random_set(20, 4, 2, 0.5);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
        assert!(fid(&a, &b).unwrap() > 0.0);
        assert!(matches!(fid(&a[..1], &b), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn kid_hand_computed_1d() {
        // d = 1, kernel (xy + 1)³
        let a = vec![vec![0.0], vec![1.0]];
        let b = vec![vec![1.0], vec![2.0]];
        // k_aa off-diagonal: (0·1+1)³ = 1, twice → 2 / 2 = 1
        // k_bb off-diagonal: (1·2+1)³ = 27, twice → 54 / 2 = 27
        // k_ab: (0+1)³ + (0+1)³ + (1+1)³ + (2+1)³ = 1 + 1 + 8 + 27 = 37 → 2·37/4 = 18.5
        assert!((kid(&a, &b).unwrap() - (1.0 + 27.0 - 18.5)).abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0, 1.0]) > 0.0);
    }

    #[test]
    fn id_score_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Image::new(Tensor::randn(&[3, 16, 16], 0.5, &mut rng).map(|v| v.clamp(-1.0, 1.0))).unwrap();
        assert!((id_score(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(id_score(&Image::filled(16, 16, [0.0; 3]), &x), Err(Error::ZeroNormFeature)));
    }

    #[test]
    fn classifier_rejects_single_class() {
        let x = vec![Image::filled(8, 8, [0.0; 3]); 4];
        assert!(matches!(train_attribute_classifier(&x, &[true; 4], &ClassifierConfig::default()), Err(Error::SingleClass)));
    }
}

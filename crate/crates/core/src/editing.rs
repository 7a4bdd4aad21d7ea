//! Segmentation-driven latent editing.
//!
//! An edit is a mask change restricted to a label set `Q`. The edit region
//! is every pixel carrying a `Q` label before or after the change, dilated
//! by a buffer. Optimizing a latent offset to reproduce the edited mask
//! inside the region, while keeping the image outside it, yields an
//! editing vector that can be scaled, re-applied to other latents, refined
//! against its own prediction, and composed with other vectors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{embed_image, EmbeddingResult, LatentInitializer, RefinementConfig};
use crate::error::{mismatch, Error, Result};
use crate::features::FeatureExtractor;
use crate::generator::{Generator, JointSample};
use crate::graph::Graph;
use crate::image::{Image, Mask};
use crate::latent::ExtendedLatent;
use crate::nn::Adam;
use crate::tensor::Tensor;

pub const DEFAULT_BUFFER_PX: usize = 5;

/// Pixels an edit may change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRegion {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub buffer_px: usize,
    pub label_set: BTreeSet<u8>,
}

impl EditRegion {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `1.0` inside the region, `0.0` outside.
    pub fn weights(&self) -> Vec<f64> {
        self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn check(&self, mask: &Mask) -> Result<()> {
        if (self.height, self.width) != (mask.height(), mask.width()) {
            return Err(mismatch((mask.height(), mask.width()), (self.height, self.width)));
        }
        Ok(())
    }
}

/// Union of `Q`-labelled pixels in either mask, dilated by `buffer_px` with
/// a square structuring element and clipped to the frame.
pub fn compute_edit_region(y: &Mask, y_edited: &Mask, q: &BTreeSet<u8>, buffer_px: usize) -> Result<EditRegion> {
    if q.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    if !y.same_shape(y_edited) {
        return Err(mismatch((y.height(), y.width()), (y_edited.height(), y_edited.width())));
    }
    let (h, w) = (y.height(), y.width());
    let seed: Vec<bool> = y.labels().iter().zip(y_edited.labels()).map(|(a, b)| q.contains(a) || q.contains(b)).collect();
    // separable dilation: rows, then columns
    let b = buffer_px;
    let mut rows = vec![false; h * w];
    for yy in 0..h {
        for xx in 0..w {
            let lo = xx.saturating_sub(b);
            let hi = (xx + b).min(w - 1);
            rows[yy * w + xx] = (lo..=hi).any(|x2| seed[yy * w + x2]);
        }
    }
    let mut mask = vec![false; h * w];
    for yy in 0..h {
        let lo = yy.saturating_sub(b);
        let hi = (yy + b).min(h - 1);
        for xx in 0..w {
            mask[yy * w + xx] = (lo..=hi).any(|y2| rows[y2 * w + xx]);
        }
    }
    Ok(EditRegion { height: h, width: w, mask, buffer_px, label_set: q.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditingLossConfig {
    pub lambda_rgb: f64,
    pub lambda_ce: f64,
    pub lambda_id: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub use_identity: bool,
    /// Region buffer used when the region is derived inside an operation.
    pub buffer_px: usize,
}

impl EditingLossConfig {
    /// Weights for learning a vector from a mask edit.
    pub fn learn() -> Self {
        Self { lambda_rgb: 15.0, lambda_ce: 1.0, lambda_id: 10.0, learning_rate: 0.02, steps: 100, use_identity: false, buffer_px: DEFAULT_BUFFER_PX }
    }

    /// Weights for test-time refinement of an applied vector.
    pub fn refine() -> Self {
        Self { lambda_rgb: 5.0, lambda_ce: 1.0, lambda_id: 5.0, ..Self::learn() }
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_rgb, self.lambda_ce, self.lambda_id];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("editing loss weights must be finite and non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EditingLossConfig {
    fn default() -> Self {
        Self::learn()
    }
}

/// The fixed inputs of one edit optimization.
#[derive(Clone, Debug)]
pub struct EditProblem {
    pub base_w: ExtendedLatent,
    /// Appearance to keep outside the region.
    pub x: Image,
    pub y_edited: Mask,
    pub region: EditRegion,
}

impl EditProblem {
    fn check(&self, generator: &Generator) -> Result<()> {
        let r = generator.resolution();
        self.region.check(&self.y_edited)?;
        if self.y_edited.height() != r || self.y_edited.width() != r || self.x.height() != r || self.x.width() != r {
            return Err(mismatch((r, r), (self.y_edited.height(), self.y_edited.width())));
        }
        self.y_edited.validate(generator.config().num_labels)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    /// Unweighted outside-region appearance term.
    pub rgb: f64,
    /// Unweighted inside-region cross-entropy.
    pub ce: f64,
    /// Unweighted `1 − cos` identity term; 0 when disabled.
    pub id: f64,
}

/// Loss of the offset `delta` and its gradient in `delta`. All network
/// weights enter as constants.
pub fn editing_loss_and_grad(generator: &Generator, delta: &Tensor, problem: &EditProblem, cfg: &EditingLossConfig) -> Result<(LossComponents, Tensor)> {
    let head = generator.head().ok_or(Error::NoHead)?;
    problem.check(generator)?;
    if delta.shape() != problem.base_w.tensor().shape() {
        return Err(mismatch(problem.base_w.tensor().shape(), delta.shape()));
    }
    let r = generator.resolution();
    let fe = FeatureExtractor::standard();
    let mut g = Graph::new();
    let gp = generator.params().bind(&mut g, false);
    let hp = head.params().bind(&mut g, false);
    let fp = fe.bind(&mut g);
    let base = g.constant(problem.base_w.tensor().clone());
    let dv = g.variable(delta.clone());
    let w = g.add(base, dv);
    let out = generator.synthesis_graph(&mut g, &gp, w);

    let keep: Vec<f64> = problem.region.mask.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    let keep3 = Tensor::new(&[3, r, r], keep.iter().cycle().take(3 * r * r).copied().collect());
    let x_kept = g.constant(problem.x.tensor().zip_map(&keep3, |a, k| a * k));
    let kv = g.constant(keep3);
    let img_kept = g.mul(out.image, kv);
    let per = fe.perceptual_graph(&mut g, &fp, img_kept, x_kept);
    let l2 = g.mse(img_kept, x_kept);
    let rgb = g.add(per, l2);

    let cols = generator.stack_features_graph(&mut g, &out.features);
    let logits = head.forward(&mut g, &hp, cols);
    let targets: Vec<usize> = problem.y_edited.labels().iter().map(|&l| l as usize).collect();
    let ce = g.cross_entropy(logits, &targets, &problem.region.weights());

    let a = g.scale(rgb, cfg.lambda_rgb);
    let b = g.scale(ce, cfg.lambda_ce);
    let mut total = g.add(a, b);
    let mut id = 0.0;
    if cfg.use_identity {
        let f_new = fe.identity_graph(&mut g, &fp, out.image);
        let xv = g.constant(problem.x.tensor().clone());
        let f_ref = fe.identity_graph(&mut g, &fp, xv);
        let f_ref = g.constant(g.value(f_ref).clone());
        let cos = g.cosine(f_new, f_ref);
        let one = g.constant(Tensor::scalar(1.0));
        let term = g.sub(one, cos);
        id = g.scalar(term);
        let c = g.scale(term, cfg.lambda_id);
        total = g.add(total, c);
    }
    let comps = LossComponents { total: g.scalar(total), rgb: g.scalar(rgb), ce: g.scalar(ce), id };
    let grads = g.backward(total);
    Ok((comps, grads.get_or_zeros(dv)))
}

pub fn editing_loss(generator: &Generator, delta: &Tensor, problem: &EditProblem, cfg: &EditingLossConfig) -> Result<LossComponents> {
    editing_loss_and_grad(generator, delta, problem, cfg).map(|(c, _)| c)
}

/// A learned latent offset with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EditingVector {
    pub name: String,
    pub delta: Tensor,
    pub label_set: BTreeSet<u8>,
    pub source_image_hash: String,
    pub trained_scale: f64,
}

impl EditingVector {
    /// Stores `delta` at `f32` precision, the precision of vector files.
    pub fn new(name: impl Into<String>, mut delta: Tensor, label_set: BTreeSet<u8>, source_image_hash: impl Into<String>) -> Result<Self> {
        if delta.shape().len() != 2 || !delta.is_finite() {
            return Err(Error::InvalidConfig("editing vector must be a finite [layers, latent_dim] matrix".into()));
        }
        delta.round_to_f32();
        Ok(Self { name: name.into(), delta, label_set, source_image_hash: source_image_hash.into(), trained_scale: 1.0 })
    }

    pub fn delta_hash(&self) -> String {
        hex::encode(Sha256::digest(self.delta.to_le_bytes()))
    }
}

/// Result of one optimization run over a latent offset.
#[derive(Clone, Debug)]
pub struct OptimizationTrace {
    /// Loss at the starting offset, then one entry per step.
    pub losses: Vec<LossComponents>,
    /// Index into `losses` of the returned iterate.
    pub best_step: usize,
    pub best_delta: Tensor,
}

impl OptimizationTrace {
    pub fn best(&self) -> LossComponents {
        self.losses[self.best_step]
    }
}

/// Adam on `delta` from `init`, keeping the lowest-total iterate. Iterates
/// are kept at `f32` precision.
fn optimize_delta(
    generator: &Generator,
    problem: &EditProblem,
    cfg: &EditingLossConfig,
    init: Tensor,
    steps: usize,
    mut progress: impl FnMut(usize, &LossComponents) -> bool,
) -> Result<OptimizationTrace> {
    cfg.validate()?;
    let mut delta = vec![init];
    let mut opt = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(steps + 1);
    let mut best: Option<(usize, f64, Tensor)> = None;
    for step in 0..=steps {
        let (comps, grad) = editing_loss_and_grad(generator, &delta[0], problem, cfg)?;
        if !comps.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(comps);
        if best.as_ref().map_or(true, |(_, b, _)| comps.total < *b) {
            best = Some((step, comps.total, delta[0].clone()));
        }
        if !progress(step, &comps) {
            return Err(Error::Cancelled { step });
        }
        if step == steps {
            break;
        }
        opt.step(&mut delta, &[grad]);
        delta[0].round_to_f32();
    }
    let (best_step, _, best_delta) = best.expect("at least one evaluation");
    Ok(OptimizationTrace { losses, best_step, best_delta })
}

/// Outcome of [`learn_editing_vector`].
#[derive(Clone, Debug)]
pub struct LearnedEdit {
    pub vector: EditingVector,
    pub trace: OptimizationTrace,
}

/// Learns an editing vector from zero with the configured schedule.
pub fn learn_editing_vector(generator: &Generator, problem: &EditProblem, cfg: &EditingLossConfig, name: &str) -> Result<LearnedEdit> {
    learn_editing_vector_with_progress(generator, problem, cfg, name, |_, _| true)
}

/// As [`learn_editing_vector`], reporting every step to `progress`; a
/// `false` return cancels the run.
pub fn learn_editing_vector_with_progress(
    generator: &Generator,
    problem: &EditProblem,
    cfg: &EditingLossConfig,
    name: &str,
    progress: impl FnMut(usize, &LossComponents) -> bool,
) -> Result<LearnedEdit> {
    if problem.region.is_empty() {
        return Err(Error::EmptyEditRegion);
    }
    let zero = Tensor::zeros(problem.base_w.tensor().shape());
    let trace = optimize_delta(generator, problem, cfg, zero, cfg.steps, progress)?;
    let vector = EditingVector::new(name, trace.best_delta.clone(), problem.region.label_set.clone(), problem.x.content_hash())?;
    Ok(LearnedEdit { vector, trace })
}

/// `base + scale · delta` and its joint sample.
pub fn apply_editing_vector(generator: &Generator, base_w: &ExtendedLatent, vector: &EditingVector, scale: f64) -> Result<(JointSample, ExtendedLatent)> {
    let w = base_w.offset(&vector.delta, scale)?;
    Ok((generator.synthesize(&w)?, w))
}

/// Outcome of [`refine_edit`].
#[derive(Clone, Debug)]
pub struct RefinedEdit {
    pub sample: JointSample,
    pub latent: ExtendedLatent,
    /// The vector's own prediction, used as the target.
    pub target: Mask,
    pub region: EditRegion,
    /// Empty when no refinement steps ran.
    pub trace: Option<OptimizationTrace>,
}

/// Applies `vector` at `scale`, then optimizes the offset for `steps` steps
/// against the applied prediction `y′` (frozen once) inside the region of
/// `(y, y′)`, keeping the unedited appearance outside it.
pub fn refine_edit(generator: &Generator, base_w: &ExtendedLatent, vector: &EditingVector, scale: f64, steps: usize, cfg: &EditingLossConfig) -> Result<RefinedEdit> {
    refine_edit_with_progress(generator, base_w, vector, scale, steps, cfg, |_, _| true)
}

pub fn refine_edit_with_progress(
    generator: &Generator,
    base_w: &ExtendedLatent,
    vector: &EditingVector,
    scale: f64,
    steps: usize,
    cfg: &EditingLossConfig,
    progress: impl FnMut(usize, &LossComponents) -> bool,
) -> Result<RefinedEdit> {
    let (applied, w_applied) = apply_editing_vector(generator, base_w, vector, scale)?;
    let original = generator.synthesize(base_w)?;
    let y = original.mask.ok_or(Error::NoHead)?;
    let target = applied.mask.clone().ok_or(Error::NoHead)?;
    let region = compute_edit_region(&y, &target, &vector.label_set, cfg.buffer_px)?;
    if steps == 0 {
        return Ok(RefinedEdit { sample: applied, latent: w_applied, target, region, trace: None });
    }
    let problem = EditProblem { base_w: base_w.clone(), x: original.image, y_edited: target.clone(), region: region.clone() };
    let init = vector.delta.map(|d| scale * d);
    let trace = optimize_delta(generator, &problem, cfg, init, steps, progress)?;
    let latent = base_w.offset(&trace.best_delta, 1.0)?;
    let sample = generator.synthesize(&latent)?;
    Ok(RefinedEdit { sample, latent, target, region, trace: Some(trace) })
}

/// Outcome of [`optimize_edit_from_scratch`].
#[derive(Clone, Debug)]
pub struct ScratchEdit {
    pub embedding: EmbeddingResult,
    pub region: EditRegion,
    pub learned: LearnedEdit,
    pub sample: JointSample,
    pub latent: ExtendedLatent,
}

/// Embeds `x`, derives the region from its predicted mask and `y_edited`,
/// and learns an offset for this image alone. The appearance anchor is the
/// embedded reconstruction.
pub fn optimize_edit_from_scratch(
    generator: &Generator,
    init: &dyn LatentInitializer,
    x: &Image,
    y_edited: &Mask,
    q: &BTreeSet<u8>,
    cfg: &EditingLossConfig,
    embed_cfg: &RefinementConfig,
) -> Result<ScratchEdit> {
    if generator.head().is_none() {
        return Err(Error::NoHead);
    }
    let embedding = embed_image(generator, init, x, embed_cfg)?;
    let y = generator.synthesize(&embedding.w_plus)?.mask.ok_or(Error::NoHead)?;
    let region = compute_edit_region(&y, y_edited, q, cfg.buffer_px)?;
    if region.is_empty() {
        return Err(Error::EmptyEditRegion);
    }
    let problem = EditProblem { base_w: embedding.w_plus.clone(), x: embedding.reconstruction.clone(), y_edited: y_edited.clone(), region: region.clone() };
    let learned = learn_editing_vector(generator, &problem, cfg, "from-scratch")?;
    let latent = embedding.w_plus.offset(&learned.vector.delta, 1.0)?;
    let sample = generator.synthesize(&latent)?;
    Ok(ScratchEdit { embedding, region, learned, sample, latent })
}

/// A base latent plus a multiset of scaled vectors.
///
/// The edited latent depends only on the multiset: scales applied to the
/// same vector are summed in sorted order, and vectors are accumulated in
/// a canonical order. Applying `s` and then `−s` therefore restores the
/// base latent exactly.
#[derive(Clone, Debug)]
pub struct EditStack {
    base: ExtendedLatent,
    entries: BTreeMap<(String, String), (EditingVector, Vec<f64>)>,
}

impl EditStack {
    pub fn new(base: ExtendedLatent) -> Self {
        Self { base, entries: BTreeMap::new() }
    }

    pub fn base(&self) -> &ExtendedLatent {
        &self.base
    }

    pub fn push(&mut self, vector: &EditingVector, scale: f64) -> Result<()> {
        if vector.delta.shape() != self.base.tensor().shape() {
            return Err(mismatch(self.base.tensor().shape(), vector.delta.shape()));
        }
        let key = (vector.name.clone(), vector.delta_hash());
        self.entries.entry(key).or_insert_with(|| (vector.clone(), Vec::new())).1.push(scale);
        Ok(())
    }

    /// Net scale per vector, in canonical order, zero entries dropped.
    pub fn net_scales(&self) -> Vec<(&EditingVector, f64)> {
        self.entries
            .values()
            .filter_map(|(v, scales)| {
                let mut s = scales.clone();
                s.sort_by(f64::total_cmp);
                let net: f64 = s.iter().sum();
                (net != 0.0).then_some((v, net))
            })
            .collect()
    }

    pub fn latent(&self) -> ExtendedLatent {
        let active = self.net_scales();
        if active.is_empty() {
            return self.base.clone();
        }
        let mut offset = Tensor::zeros(self.base.tensor().shape());
        for (v, s) in active {
            offset = offset.zip_map(&v.delta, |o, d| o + s * d);
        }
        self.base.offset(&offset, 1.0).expect("shapes checked on push")
    }
}

/// `base + Σ sᵢ·δᵢ`, independent of the order of `vectors`.
pub fn compose_edits(generator: &Generator, base_w: &ExtendedLatent, vectors: &[(EditingVector, f64)]) -> Result<(JointSample, ExtendedLatent)> {
    let mut stack = EditStack::new(base_w.clone());
    for (v, s) in vectors {
        stack.push(v, *s)?;
    }
    let w = stack.latent();
    Ok((generator.synthesize(&w)?, w))
}

/// Fraction of region pixels where `pred` equals `target`.
pub fn region_agreement(pred: &Mask, target: &Mask, region: &EditRegion) -> f64 {
    let n = region.count();
    if n == 0 {
        return 1.0;
    }
    let hits = (0..region.mask.len()).filter(|&p| region.mask[p] && pred.labels()[p] == target.labels()[p]).count();
    hits as f64 / n as f64
}

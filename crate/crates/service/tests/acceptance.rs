//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! with the measured values, then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::editing::*;
use editgan::embedding::{embed_image, reconstruction_loss_and_grad, Encoder, RefinementConfig};
use editgan::image::pixel_accuracy;
use editgan::library::{save_vector, VectorRecord};
use editgan::metrics::{self, Benchmark, ClassifierConfig};
use editgan::scenes::{
    annotate_by_color, edit_add_headlight_from_mask, edit_enlarge_wheels, sample_dataset, SceneSample, HEADLIGHT, WHEEL_LABELS,
};
use editgan::segmentation::{train_head, HeadConfig, LabeledPair, SegmentationHead};
use editgan::tensor::Tensor;
use editgan::{ExtendedLatent, Generator, GeneratorConfig, Image, Mask};
use editgan_service::{router, AppState, Models, ServiceConfig};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn report(name: &str, pass: bool, detail: String) {
    let status = if pass { "PASS" } else { "FAIL" };
    writeln!(std::io::stderr(), "[acceptance] {status} {name}: {detail}").unwrap();
    assert!(pass, "{name}: {detail}");
}

fn shipped() -> &'static Checkpoint {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    CK.get_or_init(|| Checkpoint::load(&shipped_toy32_path()).expect("shipped checkpoint loads"))
}

/// A 16×16 generator with a random head, for checks that need exactness
/// rather than a trained model.
fn tiny_generator() -> Generator {
    let mut g = Generator::new(GeneratorConfig::tiny16()).unwrap();
    let f = g.config().feature_channels();
    let c = g.config().num_labels;
    g.set_head(SegmentationHead::new(f, [16, 8], c, 7)).unwrap();
    g
}

fn random_latent(g: &Generator, seed: u64) -> ExtendedLatent {
    g.map_to_w_plus(&g.sample_latent(seed)).unwrap()
}

fn unit_direction(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::randn(shape, 1.0, rng);
    let n = t.l2_norm();
    t.map(|v| v / n)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn gradients_match_central_differences() {
    let t = std::time::Instant::now();
    let gen = tiny_generator();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = random_latent(&gen, 1);
    let x = gen.render(&random_latent(&gen, 2)).unwrap();
    let y = gen.synthesize(&base).unwrap().mask.unwrap();
    let mut y_edit = y.clone();
    for px in 40..90 {
        y_edit.labels_mut()[px] = 1;
    }
    let q: BTreeSet<u8> = [1].into();
    let region = compute_edit_region(&y, &y_edit, &q, 1).unwrap();
    let problem = EditProblem { base_w: base.clone(), x: x.clone(), y_edited: y_edit, region };
    let full = EditingLossConfig { use_identity: true, ..EditingLossConfig::learn() };
    let rgb_only = EditingLossConfig { lambda_rgb: 1.0, lambda_ce: 0.0, lambda_id: 0.0, use_identity: false, ..EditingLossConfig::learn() };
    let shape = base.tensor().shape().to_vec();
    // small enough that a probe rarely straddles a leaky-relu kink
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for probe in 0..20 {
        let delta = Tensor::randn(&shape, 0.05, &mut rng);
        let dir = unit_direction(&shape, &mut rng);
        let cfg = if probe % 2 == 0 { &full } else { &rgb_only };
        let (_, grad) = editing_loss_and_grad(&gen, &delta, &problem, cfg).unwrap();
        let at = |s: f64| editing_loss(&gen, &delta.zip_map(&dir, |d, u| d + s * u), &problem, cfg).unwrap().total;
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max(rel_err(dot(&grad, &dir), fd));
    }
    // reconstruction appearance loss with respect to the latent
    let rcfg = RefinementConfig::default();
    for _ in 0..20 {
        let w = base.offset(&Tensor::randn(&shape, 0.05, &mut rng), 1.0).unwrap();
        let dir = unit_direction(&shape, &mut rng);
        let (_, grad) = reconstruction_loss_and_grad(&gen, &w, &x, &rcfg).unwrap();
        let at = |s: f64| reconstruction_loss_and_grad(&gen, &w.offset(&dir, s).unwrap(), &x, &rcfg).unwrap().0;
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max(rel_err(dot(&grad, &dir), fd));
    }
    let secs = t.elapsed().as_secs_f64();
    report("gradient correctness", worst < 1e-4 && secs < 120.0, format!("worst relative error {worst:.2e} over 40 directional probes, {secs:.1}s"));
}

fn brute_force_region(y: &Mask, y2: &Mask, q: &BTreeSet<u8>, buffer: usize) -> Vec<bool> {
    let (h, w) = (y.height(), y.width());
    let mut out = vec![false; h * w];
    for py in 0..h {
        for px in 0..w {
            'search: for sy in py.saturating_sub(buffer)..=(py + buffer).min(h - 1) {
                for sx in px.saturating_sub(buffer)..=(px + buffer).min(w - 1) {
                    if q.contains(&y.get(sy, sx)) || q.contains(&y2.get(sy, sx)) {
                        out[py * w + px] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn edit_region_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..200 {
        let labels = rng.gen_range(2..6u8);
        let sparse = rng.gen_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| {
            let l: Vec<u8> = (0..256).map(|_| if sparse && rng.gen_bool(0.9) { 0 } else { rng.gen_range(0..labels) }).collect();
            Mask::new(16, 16, l).unwrap()
        };
        let (y, y2) = (draw(&mut rng), draw(&mut rng));
        let mut q: BTreeSet<u8> = (1..labels).filter(|_| rng.gen_bool(0.4)).collect();
        if q.is_empty() {
            q.insert(1);
        }
        let buffer = rng.gen_range(0..6);
        let region = compute_edit_region(&y, &y2, &q, buffer).unwrap();
        if region.mask != brute_force_region(&y, &y2, &q, buffer) {
            mismatches += 1;
        }
    }
    report("edit-region oracle", mismatches == 0, format!("{mismatches} of 200 random mask pairs differ"));
}

#[test]
fn zero_scale_and_cancellation_are_exact() {
    let gen = &shipped().generator;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for seed in 0..5u64 {
        let base = random_latent(gen, 500 + seed);
        let v = EditingVector::new("probe", Tensor::randn(base.tensor().shape(), 0.3, &mut rng), [4, 5].into(), "n/a").unwrap();
        let (sample, w) = apply_editing_vector(gen, &base, &v, 0.0).unwrap();
        ok &= w == base && sample == gen.synthesize(&base).unwrap();
        for s in [0.37, 1.0, 1.7, -2.0] {
            let mut stack = EditStack::new(base.clone());
            stack.push(&v, s).unwrap();
            stack.push(&v, -s).unwrap();
            ok &= stack.latent() == base;
        }
    }
    report("identity edit", ok, "s = 0 is bit-identical and +s then -s restores the latent on 5 latents × 4 scales".into());
}

fn labeled_embeddings() -> &'static Vec<LabeledPair> {
    static PAIRS: OnceLock<Vec<LabeledPair>> = OnceLock::new();
    PAIRS.get_or_init(|| {
        let ck = shipped();
        let enc = ck.encoder.as_ref().expect("shipped encoder");
        let data = sample_dataset(1016, 32, 1).unwrap();
        let cfg = RefinementConfig { steps: 2000, ..RefinementConfig::default() };
        data.labeled
            .into_iter()
            .map(|s| {
                let w = embed_image(&ck.generator, enc, &s.image, &cfg).unwrap().w_plus;
                LabeledPair { image: s.image, mask: s.mask, w_plus: Some(w) }
            })
            .collect()
    })
}

#[test]
fn few_shot_head_generalizes_to_generator_samples() {
    let t = std::time::Instant::now();
    let gen = &shipped().generator;
    let pairs = labeled_embeddings();
    let cfg = HeadConfig { target_train_accuracy: 0.998, class_weight_power: 0.5, ..HeadConfig::default() };
    let (head, log) = train_head(gen, pairs, &cfg).unwrap();
    let mut g = gen.clone();
    g.set_head(head).unwrap();
    let mut held_out = 0.0;
    for seed in 0..50u64 {
        let s = g.synthesize(&random_latent(&g, 1_000_000 + seed)).unwrap();
        held_out += pixel_accuracy(s.mask.as_ref().unwrap(), &annotate_by_color(&s.image)).unwrap();
    }
    held_out /= 50.0;
    let train = log.final_accuracy();
    let secs = t.elapsed().as_secs_f64();
    report(
        "few-shot head",
        pairs.len() == 16 && train >= 0.95 && held_out >= 0.80 && secs < 900.0,
        format!("{} pairs, training accuracy {train:.4}, held-out accuracy {held_out:.4}, {secs:.0}s", pairs.len()),
    );
}

struct WheelEdit {
    vector: EditingVector,
    ce_before: f64,
    ce_after: f64,
    agreement: f64,
}

fn wheel_edit() -> &'static (WheelEdit, Vec<ExtendedLatent>) {
    static EDIT: OnceLock<(WheelEdit, Vec<ExtendedLatent>)> = OnceLock::new();
    EDIT.get_or_init(|| {
        let ck = shipped();
        let (gen, enc) = (&ck.generator, ck.encoder.as_ref().unwrap());
        let cfg = RefinementConfig::default();
        let scenes: Vec<SceneSample> = (0..11u64).map(|i| SceneSample::generate(32, 7000 + i)).collect();
        let latents: Vec<ExtendedLatent> = scenes.iter().map(|s| embed_image(gen, enc, &s.image, &cfg).unwrap().w_plus).collect();
        let base = gen.synthesize(&latents[0]).unwrap();
        let y = base.mask.clone().unwrap();
        let y_edit = edit_enlarge_wheels(&y, &scenes[0].params, 2.0);
        let ecfg = EditingLossConfig::learn();
        let q: BTreeSet<u8> = WHEEL_LABELS.into_iter().collect();
        let region = compute_edit_region(&y, &y_edit, &q, ecfg.buffer_px).unwrap();
        let problem = EditProblem { base_w: latents[0].clone(), x: base.image, y_edited: y_edit.clone(), region: region.clone() };
        let zero = Tensor::zeros(latents[0].tensor().shape());
        let ce_before = editing_loss(gen, &zero, &problem, &ecfg).unwrap().ce;
        let learned = learn_editing_vector(gen, &problem, &ecfg, "bigger wheels").unwrap();
        let (after, _) = apply_editing_vector(gen, &latents[0], &learned.vector, 1.0).unwrap();
        let agreement = region_agreement(after.mask.as_ref().unwrap(), &y_edit, &region);
        let edit = WheelEdit { vector: learned.vector, ce_before, ce_after: learned.trace.best().ce, agreement };
        (edit, latents[1..].to_vec())
    })
}

fn wheel_pixels(m: &Mask, r: &EditRegion) -> usize {
    (0..m.height())
        .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
        .filter(|&(y, x)| r.contains(y, x) && WHEEL_LABELS.contains(&m.get(y, x)))
        .count()
}

#[test]
fn wheel_edit_is_realized_and_transfers() {
    let gen = &shipped().generator;
    let (edit, transfers) = wheel_edit();
    let c = EditingLossConfig::learn();
    let r = EditingLossConfig::refine();
    assert_eq!((c.steps, c.learning_rate, c.lambda_rgb, c.lambda_ce, c.lambda_id), (100, 0.02, 15.0, 1.0, 10.0));
    assert_eq!((r.learning_rate, r.lambda_rgb, r.lambda_ce, r.lambda_id), (0.02, 5.0, 1.0, 5.0));
    let q: BTreeSet<u8> = WHEEL_LABELS.into_iter().collect();
    let mut grew = 0;
    for w in transfers {
        let before = gen.synthesize(w).unwrap().mask.unwrap();
        let after = apply_editing_vector(gen, w, &edit.vector, 1.0).unwrap().0.mask.unwrap();
        let r = compute_edit_region(&before, &after, &q, DEFAULT_BUFFER_PX).unwrap();
        grew += (wheel_pixels(&after, &r) > wheel_pixels(&before, &r)) as usize;
    }
    report(
        "edit realization",
        edit.ce_after <= 0.5 * edit.ce_before && edit.agreement >= 0.8 && grew >= 8,
        format!(
            "cross-entropy {:.4} -> {:.4}, region agreement {:.3}, wheels grew on {grew}/{} transfers",
            edit.ce_before,
            edit.ce_after,
            edit.agreement,
            transfers.len()
        ),
    );
}

#[test]
fn refinement_reduces_outside_region_appearance_loss() {
    let gen = &shipped().generator;
    let (edit, transfers) = wheel_edit();
    let cfg = EditingLossConfig::refine();
    let mut better = 0;
    for w in transfers {
        let refined = refine_edit(gen, w, &edit.vector, 1.0, 30, &cfg).unwrap();
        let problem = EditProblem { base_w: w.clone(), x: gen.render(w).unwrap(), y_edited: refined.target.clone(), region: refined.region.clone() };
        let applied = editing_loss(gen, &edit.vector.delta, &problem, &cfg).unwrap().rgb;
        let refined_delta = refined.latent.tensor().zip_map(w.tensor(), |a, b| a - b);
        let after = editing_loss(gen, &refined_delta, &problem, &cfg).unwrap().rgb;
        better += (after < applied) as usize;
    }
    report("refinement locality", better >= 8, format!("outside-region appearance loss lower after 30 refinement steps on {better}/{}", transfers.len()));
}

#[test]
fn metric_oracles() {
    use nalgebra::DMatrix;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = |n: usize, d: usize, shift: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0) + shift).collect()).collect()
    };
    let mut fid_err: f64 = 0.0;
    let mut kid_err: f64 = 0.0;
    for trial in 0..10 {
        let (a, b) = (set(5, 3, 0.0), set(5, 3, 0.1 * trial as f64));
        // closed form on the sample moments, trace of the square root from
        // the eigenvalues of the non-symmetric product
        let m = |s: &[Vec<f64>]| DMatrix::from_fn(s.len(), s[0].len(), |i, j| s[i][j]);
        let (ma, mb) = (m(&a), m(&b));
        let (mu_a, mu_b) = (ma.row_mean(), mb.row_mean());
        let cov = |x: &DMatrix<f64>, mu: &nalgebra::RowDVector<f64>| {
            let c = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mu[j]);
            c.transpose() * &c / (x.nrows() as f64 - 1.0)
        };
        let (sa, sb) = (cov(&ma, &mu_a), cov(&mb, &mu_b));
        let tr_sqrt: f64 = (&sa * &sb).complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
        let oracle = (mu_a - mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
        fid_err = fid_err.max((metrics::fid(&a, &b).unwrap() - oracle).abs());

        let d = 3.0;
        let k = |x: &[f64], y: &[f64]| (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3);
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    saa += k(&a[i], &a[j]);
                    sbb += k(&b[i], &b[j]);
                }
                sab += k(&a[i], &b[j]);
            }
        }
        let brute = saa / 20.0 + sbb / 20.0 - 2.0 * sab / 25.0;
        kid_err = kid_err.max((metrics::kid(&a, &b).unwrap() - brute).abs());
    }
    let a = set(8, 4, 0.0);
    let fid_same = metrics::fid(&a, &a).unwrap();
    let kid_same = metrics::kid(&a, &a).unwrap();
    let x = shipped().generator.render(&random_latent(&shipped().generator, 1)).unwrap();
    let id = metrics::id_score(&x, &x).unwrap();
    report(
        "metric oracles",
        fid_err < 1e-8 && fid_same.abs() < 1e-6 && kid_err < 1e-12 && (id - 1.0).abs() < 1e-6,
        format!("fid error {fid_err:.1e}, fid(a,a) {fid_same:.1e}, kid error {kid_err:.1e}, kid(a,a) {kid_same:.3e}, id(x,x) - 1 = {:.1e}", id - 1.0),
    );
}

#[test]
fn headlight_scale_sweep() {
    let gen = &shipped().generator;
    let scenes: Vec<SceneSample> = (0..300u64).map(|i| SceneSample::generate(32, 20_000 + i)).collect();
    let images: Vec<Image> = scenes.iter().map(|s| s.image.clone()).collect();
    let flags: Vec<bool> = scenes.iter().map(|s| s.params.headlight_on).collect();
    let (clf, clf_acc) = metrics::train_attribute_classifier(&images, &flags, &ClassifierConfig::default()).unwrap();
    // generator samples without a headlight, by classifier and head
    let mut pool = Vec::new();
    let mut seed = 3_000_000u64;
    while pool.len() < 21 {
        let w = random_latent(gen, seed);
        seed += 1;
        let s = gen.synthesize(&w).unwrap();
        if !clf.predict(&s.image) && s.mask.as_ref().unwrap().count(HEADLIGHT) == 0 {
            pool.push((w, s));
        }
    }
    let (w, s) = &pool[0];
    let y = s.mask.clone().unwrap();
    let y_edit = edit_add_headlight_from_mask(&y).expect("body present");
    let cfg = EditingLossConfig::learn();
    let region = compute_edit_region(&y, &y_edit, &[HEADLIGHT].into(), cfg.buffer_px).unwrap();
    let problem = EditProblem { base_w: w.clone(), x: s.image.clone(), y_edited: y_edit, region };
    let vector = learn_editing_vector(gen, &problem, &cfg, "headlight on").unwrap().vector;
    let latents: Vec<ExtendedLatent> = pool[1..].iter().map(|p| p.0.clone()).collect();
    let reference: Vec<Image> = pool[1..].iter().map(|p| p.1.image.clone()).collect();
    let mut scales = vec![0.0];
    scales.extend(metrics::SCALE_GRID);
    let rows = metrics::run_benchmark(&Benchmark {
        generator: gen,
        vector: &vector,
        scales: &scales,
        refine_steps: &[0],
        test_latents: &latents,
        reference: &reference,
        classifier: &clf,
        target: true,
        refine_config: EditingLossConfig::refine(),
    })
    .unwrap();
    let grid = &rows[1..];
    let rho = metrics::spearman(&grid.iter().map(|r| r.scale).collect::<Vec<_>>(), &grid.iter().map(|r| r.attribute_accuracy).collect::<Vec<_>>());
    let fid_positive = grid.iter().all(|r| r.fid > 0.0);
    let accs: Vec<String> = rows.iter().map(|r| format!("{}:{:.2}", r.scale, r.attribute_accuracy)).collect();
    report(
        "scale sweep",
        rho > 0.0 && fid_positive && rows[0].fid.abs() < 1e-6 && (rows[0].id_score - 1.0).abs() < 1e-9,
        format!(
            "classifier held-out {clf_acc:.3}; accuracy by scale [{}]; spearman {rho:.3}; fid at 0 {:.1e}, min fid above 0 {:.4}",
            accs.join(" "),
            rows[0].fid,
            grid.iter().map(|r| r.fid).fold(f64::INFINITY, f64::min)
        ),
    );
}

#[test]
fn optimization_paths_leave_weights_untouched() {
    let ck = shipped().clone();
    let before = ck.to_bytes();
    let gen = &ck.generator;
    let enc = ck.encoder.as_ref().unwrap();
    let scene = SceneSample::generate(32, 4242);
    let fast = RefinementConfig { steps: 10, ..RefinementConfig::default() };
    let w = embed_image(gen, enc, &scene.image, &fast).unwrap().w_plus;
    let base = gen.synthesize(&w).unwrap();
    let y = base.mask.clone().unwrap();
    let y_edit = edit_enlarge_wheels(&y, &scene.params, 2.0);
    let cfg = EditingLossConfig { steps: 10, ..EditingLossConfig::learn() };
    let q: BTreeSet<u8> = WHEEL_LABELS.into_iter().collect();
    let region = compute_edit_region(&y, &y_edit, &q, cfg.buffer_px).unwrap();
    let problem = EditProblem { base_w: w.clone(), x: base.image.clone(), y_edited: y_edit.clone(), region };
    let v = learn_editing_vector(gen, &problem, &cfg, "wheels").unwrap().vector;
    refine_edit(gen, &w, &v, 1.0, 10, &EditingLossConfig::refine()).unwrap();
    optimize_edit_from_scratch(gen, enc, &scene.image, &y_edit, &q, &cfg, &fast).unwrap();
    let same = ck.to_bytes() == before;
    report("frozen weights", same, "checkpoint bytes identical after embedding, vector learning, refinement and from-scratch editing".into());
}

fn tiny_service() -> (axum::Router, tempfile::TempDir, Generator) {
    let dir = tempfile::tempdir().unwrap();
    let gen = tiny_generator();
    let enc = Encoder::new(&gen, 1).unwrap();
    let ck = Checkpoint { generator: gen.clone(), encoder: Some(enc) };
    let config = ServiceConfig {
        vectors_dir: dir.path().join("vectors"),
        sessions_dir: dir.path().join("sessions"),
        embed_steps: 5,
        ..ServiceConfig::default()
    };
    let hash = ck.generator_hash();
    let v = EditingVector::new("probe", Tensor::full(&[gen.num_style_layers(), gen.config().latent_dim], 0.1), [1].into(), "n/a").unwrap();
    std::fs::create_dir_all(&config.vectors_dir).unwrap();
    save_vector(&config.vectors_dir, &VectorRecord::new(v, hash)).unwrap();
    let state = AppState::with_models(config, Models::from_checkpoint(ck).unwrap());
    (router(state), dir, gen)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Body, content_type: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", content_type).body(body).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &axum::Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, Body::from(body.to_string()), "application/json").await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn service_contracts() {
    let (app, _dir, gen) = tiny_service();
    let b64 = base64::engine::general_purpose::STANDARD;
    let png = gen.render(&random_latent(&gen, 77)).unwrap().to_png().unwrap();
    let (status, body) = call(&app, "POST", "/sessions", Body::from(png), "image/png").await;
    assert_eq!(status, StatusCode::CREATED);
    let created: Value = serde_json::from_slice(&body).unwrap();
    let id = created["session_id"].as_str().unwrap().to_string();
    let recon = b64.decode(created["reconstruction"].as_str().unwrap()).unwrap();

    // mask round trip, with bytes no encoder here would produce by default
    let (_, mask_png) = call(&app, "GET", &format!("/sessions/{id}/mask"), Body::empty(), "image/png").await;
    let mut edited = Mask::from_png(&mask_png).unwrap();
    for px in 0..40 {
        edited.labels_mut()[px] = 1;
    }
    let uploaded = edited.to_png(&editgan_service::palette_for(gen.config().num_labels)).unwrap();
    let (put, _) = call(&app, "PUT", &format!("/sessions/{id}/mask"), Body::from(uploaded.clone()), "image/png").await;
    let (_, got) = call(&app, "GET", &format!("/sessions/{id}/mask"), Body::empty(), "image/png").await;
    let mask_ok = put == StatusCode::NO_CONTENT && got == uploaded;

    // scale 0 returns the reconstruction bytes
    let (s0, applied) = call_json(&app, "POST", &format!("/sessions/{id}/apply"), json!({ "vector": "probe", "scale": 0.0 })).await;
    let identity_ok = s0 == StatusCode::OK && b64.decode(applied["image"].as_str().unwrap()).unwrap() == recon;

    // cancelling a job leaves the session as it was
    let (_, before) = call_json(&app, "GET", &format!("/sessions/{id}"), Value::Null).await;
    let (sj, job) = call_json(&app, "POST", &format!("/sessions/{id}/edit"), json!({ "labels": [1], "steps": 1_000_000 })).await;
    assert_eq!(sj, StatusCode::ACCEPTED);
    let job_id = job["job_id"].as_str().unwrap().to_string();
    let (busy, _) = call_json(&app, "POST", &format!("/sessions/{id}/edit"), json!({ "labels": [1] })).await;
    tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    call_json(&app, "POST", &format!("/jobs/{job_id}/cancel"), Value::Null).await;
    let mut status = Value::Null;
    for _ in 0..500 {
        status = call_json(&app, "GET", &format!("/jobs/{job_id}"), Value::Null).await.1;
        if status["status"] != "running" {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    let (_, after) = call_json(&app, "GET", &format!("/sessions/{id}"), Value::Null).await;
    let (_, mask_after) = call(&app, "GET", &format!("/sessions/{id}/mask"), Body::empty(), "image/png").await;
    let cancel_ok = status["status"] == "cancelled"
        && busy == StatusCode::CONFLICT
        && before["latent_hash"] == after["latent_hash"]
        && before["history"] == after["history"]
        && mask_after == uploaded;

    report(
        "service contracts",
        mask_ok && identity_ok && cancel_ok,
        format!("mask round trip {mask_ok}, scale-0 apply equals reconstruction {identity_ok}, cancel leaves session unchanged {cancel_ok} ({})", status["status"]),
    );
}

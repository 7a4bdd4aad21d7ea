//! Sweeps an edit's scale and reports attribute accuracy, FID, KID and
//! identity preservation per scale, as CSV and JSON.
//!
//! The test images are generator samples without a headlight; the vector
//! is learned from one more such sample.
//!
//! ```text
//! cargo run --release --example benchmark -- [OUT_DIR] [N_IMAGES]
//! ```

use std::path::PathBuf;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::editing::{compute_edit_region, learn_editing_vector, EditProblem, EditingLossConfig};
use editgan::metrics::{plot_csv, reports_to_csv, reports_to_json, run_benchmark, spearman, train_attribute_classifier, Benchmark, ClassifierConfig, SCALE_GRID};
use editgan::scenes::{edit_add_headlight_from_mask, SceneSample, HEADLIGHT};
use editgan::Image;

fn main() -> editgan::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/examples-out/benchmark".into()));
    let n: usize = args.next().map(|s| s.parse().expect("N_IMAGES")).unwrap_or(20);
    std::fs::create_dir_all(&out)?;
    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let gen = &ck.generator;

    let scenes: Vec<SceneSample> = (0..300u64).map(|i| SceneSample::generate(32, 20_000 + i)).collect();
    let images: Vec<Image> = scenes.iter().map(|s| s.image.clone()).collect();
    let flags: Vec<bool> = scenes.iter().map(|s| s.params.headlight_on).collect();
    let (clf, clf_acc) = train_attribute_classifier(&images, &flags, &ClassifierConfig::default())?;
    println!("classifier held-out accuracy {clf_acc:.3}");

    let mut pool = Vec::new();
    let mut seed = 3_000_000u64;
    while pool.len() < n + 1 {
        let w = gen.map_to_w_plus(&gen.sample_latent(seed))?;
        seed += 1;
        let s = gen.synthesize(&w)?;
        if !clf.predict(&s.image) && s.mask.as_ref().expect("head").count(HEADLIGHT) == 0 {
            pool.push((w, s));
        }
    }
    let (w, s) = &pool[0];
    let y = s.mask.clone().expect("head");
    let y_edited = edit_add_headlight_from_mask(&y).expect("body present");
    let cfg = EditingLossConfig::learn();
    let region = compute_edit_region(&y, &y_edited, &[HEADLIGHT].into(), cfg.buffer_px)?;
    let problem = EditProblem { base_w: w.clone(), x: s.image.clone(), y_edited, region };
    let vector = learn_editing_vector(gen, &problem, &cfg, "headlight-on")?.vector;

    let latents: Vec<_> = pool[1..].iter().map(|p| p.0.clone()).collect();
    let reference: Vec<Image> = pool[1..].iter().map(|p| p.1.image.clone()).collect();
    let rows = run_benchmark(&Benchmark {
        generator: gen,
        vector: &vector,
        scales: &SCALE_GRID,
        refine_steps: &[0, 10],
        test_latents: &latents,
        reference: &reference,
        classifier: &clf,
        target: true,
        refine_config: EditingLossConfig::refine(),
    })?;
    print!("{}", reports_to_csv(&rows));
    let plain: Vec<_> = rows.iter().filter(|r| r.refine_steps == 0).collect();
    let rho = spearman(&plain.iter().map(|r| r.scale).collect::<Vec<_>>(), &plain.iter().map(|r| r.attribute_accuracy).collect::<Vec<_>>());
    println!("spearman(scale, accuracy) without refinement {rho:.3}");
    std::fs::write(out.join("reports.csv"), reports_to_csv(&rows))?;
    std::fs::write(out.join("reports.json"), reports_to_json(&rows))?;
    std::fs::write(out.join("plot.csv"), plot_csv(&rows))?;
    println!("wrote {}", out.display());
    Ok(())
}

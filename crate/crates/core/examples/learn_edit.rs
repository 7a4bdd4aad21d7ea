//! Learns an editing vector from one edited mask: bigger wheels on an
//! embedded scene, saved to a vector library directory.
//!
//! ```text
//! cargo run --example learn_edit -- [LIBRARY_DIR]
//! ```

use std::collections::BTreeSet;
use std::path::PathBuf;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::editing::{compute_edit_region, learn_editing_vector, region_agreement, apply_editing_vector, EditProblem, EditingLossConfig};
use editgan::embedding::{embed_image, RefinementConfig};
use editgan::library::{save_vector, VectorRecord};
use editgan::scenes::{edit_enlarge_wheels, SceneSample, WHEEL_LABELS};

fn main() -> editgan::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/vectors".into()));
    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let gen = &ck.generator;
    let scene = SceneSample::generate(32, 7000);
    let w = embed_image(gen, ck.encoder.as_ref().expect("encoder"), &scene.image, &RefinementConfig::default())?.w_plus;

    let base = gen.synthesize(&w)?;
    let y = base.mask.clone().expect("head");
    let y_edited = edit_enlarge_wheels(&y, &scene.params, 2.0);
    let q: BTreeSet<u8> = WHEEL_LABELS.into_iter().collect();
    let cfg = EditingLossConfig::learn();
    let region = compute_edit_region(&y, &y_edited, &q, cfg.buffer_px)?;
    println!("edit region: {} of {} pixels", region.count(), y.labels().len());

    let problem = EditProblem { base_w: w.clone(), x: base.image.clone(), y_edited: y_edited.clone(), region: region.clone() };
    let learned = learn_editing_vector(gen, &problem, &cfg, "bigger-wheels")?;
    let first = learned.trace.losses[0];
    let best = learned.trace.best();
    println!("loss total {:.4} -> {:.4} (ce {:.4} -> {:.4}, best step {})", first.total, best.total, first.ce, best.ce, learned.trace.best_step);

    let (after, _) = apply_editing_vector(gen, &w, &learned.vector, 1.0)?;
    println!("region agreement with the edited mask: {:.3}", region_agreement(after.mask.as_ref().expect("head"), &y_edited, &region));

    std::fs::create_dir_all(&dir)?;
    let record = VectorRecord { notes: "wheel radius +2 px on scene 7000".into(), ..VectorRecord::new(learned.vector, ck.generator_hash()) };
    let path = save_vector(&dir, &record)?;
    println!("saved {}", path.display());
    Ok(())
}

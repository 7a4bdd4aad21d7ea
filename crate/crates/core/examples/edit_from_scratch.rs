//! Edits one image by optimizing its latent directly against the edited
//! mask, without learning a reusable vector.
//!
//! ```text
//! cargo run --example edit_from_scratch -- [STEPS]
//! ```

use std::collections::BTreeSet;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::editing::{optimize_edit_from_scratch, EditingLossConfig};
use editgan::embedding::{embed_image, RefinementConfig};
use editgan::scenes::{edit_enlarge_wheels, SceneSample, WHEEL_LABELS};

fn main() -> editgan::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().expect("STEPS")).unwrap_or(100);
    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let (gen, enc) = (&ck.generator, ck.encoder.as_ref().expect("encoder"));
    let scene = SceneSample::generate(32, 7003);
    let embed_cfg = RefinementConfig::default();
    let w = embed_image(gen, enc, &scene.image, &embed_cfg)?.w_plus;
    let y = gen.synthesize(&w)?.mask.expect("head");
    let y_edited = edit_enlarge_wheels(&y, &scene.params, 2.0);
    let q: BTreeSet<u8> = WHEEL_LABELS.into_iter().collect();

    let cfg = EditingLossConfig { steps, ..EditingLossConfig::learn() };
    let r = optimize_edit_from_scratch(gen, enc, &scene.image, &y_edited, &q, &cfg, &embed_cfg)?;
    let wheel_px = |m: &editgan::Mask| WHEEL_LABELS.iter().map(|&l| m.count(l)).sum::<usize>();
    println!("wheel pixels: embedded {}, target {}, edited {}", wheel_px(&y), wheel_px(&y_edited), wheel_px(r.sample.mask.as_ref().expect("head")));
    Ok(())
}

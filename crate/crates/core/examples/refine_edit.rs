//! Transfers an edit to other embedded scenes and refines it there: a few
//! optimization steps that keep the edit inside its region and the rest
//! of the image unchanged.
//!
//! ```text
//! cargo run --example refine_edit -- [STEPS]
//! ```

use std::collections::BTreeSet;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::editing::{apply_editing_vector, compute_edit_region, editing_loss, learn_editing_vector, refine_edit, EditProblem, EditingLossConfig};
use editgan::embedding::{embed_image, RefinementConfig};
use editgan::scenes::{edit_enlarge_wheels, SceneSample, WHEEL_LABELS};

fn main() -> editgan::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().expect("STEPS")).unwrap_or(30);
    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let (gen, enc) = (&ck.generator, ck.encoder.as_ref().expect("encoder"));
    let embed = |seed| embed_image(gen, enc, &SceneSample::generate(32, seed).image, &RefinementConfig::default()).map(|r| r.w_plus);

    let scene = SceneSample::generate(32, 7000);
    let w = embed(7000)?;
    let base = gen.synthesize(&w)?;
    let y = base.mask.clone().expect("head");
    let y_edited = edit_enlarge_wheels(&y, &scene.params, 2.0);
    let q: BTreeSet<u8> = WHEEL_LABELS.into_iter().collect();
    let cfg = EditingLossConfig::learn();
    let region = compute_edit_region(&y, &y_edited, &q, cfg.buffer_px)?;
    let vector = learn_editing_vector(gen, &EditProblem { base_w: w, x: base.image, y_edited, region }, &cfg, "bigger-wheels")?.vector;

    let rcfg = EditingLossConfig::refine();
    for seed in 7001..7005 {
        let target = embed(seed)?;
        let (applied, _) = apply_editing_vector(gen, &target, &vector, 1.0)?;
        let refined = refine_edit(gen, &target, &vector, 1.0, steps, &rcfg)?;
        // outside-region appearance loss against the unedited image
        let problem = EditProblem { base_w: target.clone(), x: gen.render(&target)?, y_edited: refined.target.clone(), region: refined.region.clone() };
        let before = editing_loss(gen, &vector.delta, &problem, &rcfg)?.rgb;
        let delta = refined.latent.tensor().zip_map(target.tensor(), |a, b| a - b);
        let after = editing_loss(gen, &delta, &problem, &rcfg)?.rgb;
        let wheel_px = |m: &editgan::Mask| WHEEL_LABELS.iter().map(|&l| m.count(l)).sum::<usize>();
        println!(
            "scene {seed}: outside-region loss {before:.4} -> {after:.4}, wheel px applied {} refined {}",
            wheel_px(applied.mask.as_ref().expect("head")),
            wheel_px(refined.sample.mask.as_ref().expect("head"))
        );
    }
    Ok(())
}

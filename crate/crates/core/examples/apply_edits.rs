//! Applies learned vectors to new images at several scales, composes two
//! vectors, and undoes an edit through the edit stack.
//!
//! ```text
//! cargo run --example apply_edits -- [OUT_DIR]
//! ```

use std::collections::BTreeSet;
use std::path::PathBuf;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::editing::{apply_editing_vector, compose_edits, compute_edit_region, learn_editing_vector, EditProblem, EditStack, EditingLossConfig, EditingVector};
use editgan::scenes::{edit_add_headlight_from_mask, HEADLIGHT, TIRE, WHEEL_LABELS};
use editgan::{ExtendedLatent, Generator, Mask};

fn learn(gen: &Generator, w: &ExtendedLatent, y_edited: Mask, q: BTreeSet<u8>, name: &str) -> editgan::Result<EditingVector> {
    let base = gen.synthesize(w)?;
    let cfg = EditingLossConfig::learn();
    let region = compute_edit_region(base.mask.as_ref().expect("head"), &y_edited, &q, cfg.buffer_px)?;
    let problem = EditProblem { base_w: w.clone(), x: base.image, y_edited, region };
    Ok(learn_editing_vector(gen, &problem, &cfg, name)?.vector)
}

fn main() -> editgan::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/apply".into()));
    std::fs::create_dir_all(&out)?;
    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let gen = &ck.generator;
    let latent = |seed| gen.map_to_w_plus(&gen.sample_latent(seed));

    // source and target: samples without a headlight
    let mut dark = (0..).filter_map(|s| {
        let w = latent(3_000_000 + s).ok()?;
        let m = gen.synthesize(&w).ok()?.mask?;
        (m.count(HEADLIGHT) == 0).then_some((w, m))
    });
    let (w, y) = dark.next().expect("a sample without a headlight");
    let (target, _) = dark.next().expect("a second one");
    let headlight = learn(gen, &w, edit_add_headlight_from_mask(&y).expect("body"), [HEADLIGHT].into(), "headlight-on")?;
    // grow every tire pixel's neighbourhood by one pixel as a cheap wheel edit
    let mut wheels_y = y.clone();
    for py in 1..y.height() - 1 {
        for px in 1..y.width() - 1 {
            if [(0, 1), (2, 1), (1, 0), (1, 2)].iter().any(|&(dy, dx)| y.get(py + dy - 1, px + dx - 1) == TIRE) && WHEEL_LABELS.iter().all(|&l| y.get(py, px) != l) {
                wheels_y.set(py, px, TIRE);
            }
        }
    }
    let wheels = learn(gen, &w, wheels_y, WHEEL_LABELS.into_iter().collect(), "bigger-wheels")?;

    let before = gen.synthesize(&target)?;
    std::fs::write(out.join("target.png"), before.image.to_png()?)?;
    for scale in [0.5, 1.0, 1.5] {
        let (s, _) = apply_editing_vector(gen, &target, &headlight, scale)?;
        let m = s.mask.as_ref().expect("head");
        println!("headlight x{scale}: {} headlight px, {} tire px", m.count(HEADLIGHT), m.count(TIRE));
        std::fs::write(out.join(format!("headlight_{scale}.png")), s.image.to_png()?)?;
    }

    // order does not matter when composing
    let (ab, wa) = compose_edits(gen, &target, &[(headlight.clone(), 1.0), (wheels.clone(), 1.0)])?;
    let (_, wb) = compose_edits(gen, &target, &[(wheels.clone(), 1.0), (headlight.clone(), 1.0)])?;
    assert_eq!(wa, wb);
    let m = ab.mask.as_ref().expect("head");
    println!("both: {} headlight px, {} tire px (was {}, {})", m.count(HEADLIGHT), m.count(TIRE), before.mask.as_ref().expect("head").count(HEADLIGHT), before.mask.as_ref().expect("head").count(TIRE));
    std::fs::write(out.join("both.png"), ab.image.to_png()?)?;

    let mut stack = EditStack::new(target.clone());
    stack.push(&headlight, 1.0)?;
    stack.push(&wheels, 1.0)?;
    stack.push(&headlight, -1.0)?;
    let (wheels_only, _) = compose_edits(gen, &target, &[(wheels, 1.0)])?;
    assert_eq!(gen.synthesize(&stack.latent())?, wheels_only);
    println!("undoing the headlight leaves exactly the wheel edit; wrote {}", out.display());
    Ok(())
}

//! Embeds a real scene into the extended latent space: encoder
//! initialization, then latent refinement with the generator frozen.
//!
//! ```text
//! cargo run --example embed -- [SCENE_SEED] [STEPS] [OUT_DIR]
//! ```

use std::path::PathBuf;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::embedding::{embed_image, RefinementConfig};
use editgan::image::pixel_accuracy;
use editgan::scenes::{LabelSchema, SceneSample};

fn main() -> editgan::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("SCENE_SEED")).unwrap_or(7000);
    let steps: usize = args.next().map(|s| s.parse().expect("STEPS")).unwrap_or(300);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/examples-out/embed".into()));
    std::fs::create_dir_all(&out)?;

    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let encoder = ck.encoder.as_ref().expect("shipped checkpoint has an encoder");
    let scene = SceneSample::generate(32, seed);

    let cfg = RefinementConfig { steps, ..RefinementConfig::default() };
    let r = embed_image(&ck.generator, encoder, &scene.image, &cfg)?;
    for (i, l) in r.loss_trace.iter().enumerate().step_by((steps / 10).max(1)) {
        println!("step {i:4}: loss {l:.4}");
    }
    println!("final loss {:.4}, max pixel error {:.3}", r.final_loss, r.reconstruction.max_abs_diff(&scene.image));

    let mask = ck.generator.synthesize(&r.w_plus)?.mask.expect("head");
    println!("predicted mask vs ground truth: {:.3}", pixel_accuracy(&mask, &scene.mask)?);
    std::fs::write(out.join("source.png"), scene.image.to_png()?)?;
    std::fs::write(out.join("reconstruction.png"), r.reconstruction.to_png()?)?;
    std::fs::write(out.join("mask.png"), mask.to_png(&LabelSchema::vehicle().palette)?)?;
    r.w_plus.save(&out.join("latent.egl"), &scene.image.content_hash())?;
    println!("wrote {}", out.display());
    Ok(())
}

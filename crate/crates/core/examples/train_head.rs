//! Few-shot segmentation: embeds the 16 labeled scenes and trains a
//! per-pixel head on the frozen generator's features.
//!
//! ```text
//! cargo run --release --example train_head -- [EMBED_STEPS]
//! ```

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::embedding::{embed_image, RefinementConfig};
use editgan::image::pixel_accuracy;
use editgan::scenes::{annotate_by_color, sample_dataset};
use editgan::segmentation::{train_head, HeadConfig, LabeledPair};

fn main() -> editgan::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().expect("EMBED_STEPS")).unwrap_or(500);
    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let (gen, enc) = (&ck.generator, ck.encoder.as_ref().expect("encoder"));
    let data = sample_dataset(1016, 32, 1)?;
    let cfg = RefinementConfig { steps, ..RefinementConfig::default() };
    let mut pairs = Vec::new();
    for s in &data.labeled {
        let w = embed_image(gen, enc, &s.image, &cfg)?.w_plus;
        pairs.push(LabeledPair { image: s.image.clone(), mask: s.mask.clone(), w_plus: Some(w) });
    }

    let hcfg = HeadConfig { target_train_accuracy: 0.998, class_weight_power: 0.5, ..HeadConfig::default() };
    let (head, log) = train_head(gen, &pairs, &hcfg)?;
    println!("{} labeled pairs, training accuracy {:.4}", pairs.len(), log.final_accuracy());

    let mut g = gen.clone();
    g.set_head(head)?;
    let mut acc = 0.0;
    for seed in 0..50u64 {
        let s = g.synthesize(&g.map_to_w_plus(&g.sample_latent(1_000_000 + seed))?)?;
        acc += pixel_accuracy(s.mask.as_ref().expect("head"), &annotate_by_color(&s.image))? / 50.0;
    }
    println!("held-out accuracy on 50 generator samples {acc:.4}");
    Ok(())
}

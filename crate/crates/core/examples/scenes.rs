//! Renders synthetic vehicle scenes with their part masks, plus the
//! target-mask edits used by the editing examples.
//!
//! ```text
//! cargo run --example scenes -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use editgan::scenes::{annotate_by_color, edit_add_headlight, edit_delete_headlight, edit_enlarge_wheels, sample_dataset, LabelSchema, SceneSample};

fn main() -> editgan::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/scenes".into()));
    std::fs::create_dir_all(&out)?;
    let schema = LabelSchema::vehicle();

    for seed in 0..4u64 {
        let s = SceneSample::generate(32, seed);
        // the palette annotator recovers the rendered mask exactly
        assert_eq!(annotate_by_color(&s.image), s.mask);
        std::fs::write(out.join(format!("scene_{seed}.png")), s.image.to_png()?)?;
        std::fs::write(out.join(format!("scene_{seed}_mask.png")), s.mask.to_png(&schema.palette)?)?;

        let bigger = edit_enlarge_wheels(&s.mask, &s.params, 2.0);
        std::fs::write(out.join(format!("scene_{seed}_wheels.png")), bigger.to_png(&schema.palette)?)?;
        let toggled = if s.params.headlight_on { edit_delete_headlight(&s.mask) } else { edit_add_headlight(&s.mask, &s.params) };
        std::fs::write(out.join(format!("scene_{seed}_headlight.png")), toggled.to_png(&schema.palette)?)?;
        let counts: Vec<String> = schema.labels.iter().enumerate().map(|(i, l)| format!("{l}={}", s.mask.count(i as u8))).collect();
        println!("scene {seed}: headlight {} | {}", s.params.headlight_on, counts.join(" "));
    }

    let data = sample_dataset(64, 32, 1)?;
    println!("dataset: {} labeled, {} unlabeled", data.labeled.len(), data.unlabeled.len());
    data.write(&out.join("dataset"), &schema)?;
    println!("wrote {}", out.display());
    Ok(())
}

//! Samples image/mask pairs from the shipped generator and its
//! segmentation head.
//!
//! ```text
//! cargo run --example generate -- [OUT_DIR] [COUNT]
//! ```

use std::path::PathBuf;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::image::pixel_accuracy;
use editgan::scenes::{annotate_by_color, LabelSchema};

fn main() -> editgan::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/examples-out/generate".into()));
    let count: u64 = args.next().map(|s| s.parse().expect("COUNT")).unwrap_or(8);
    std::fs::create_dir_all(&out)?;
    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let gen = &ck.generator;
    let palette = LabelSchema::vehicle().palette;
    println!("generator {} at {}×{}", &ck.generator_hash()[..16], gen.resolution(), gen.resolution());

    let mut mean_acc = 0.0;
    for seed in 0..count {
        let w = gen.map_to_w_plus(&gen.sample_latent(seed))?;
        let s = gen.synthesize(&w)?;
        let mask = s.mask.as_ref().expect("shipped generator has a head");
        // colour annotation of the sample is a reference for the head
        let acc = pixel_accuracy(mask, &annotate_by_color(&s.image))?;
        mean_acc += acc / count as f64;
        std::fs::write(out.join(format!("sample_{seed}.png")), s.image.to_png()?)?;
        std::fs::write(out.join(format!("sample_{seed}_mask.png")), mask.to_png(&palette)?)?;
        println!("sample {seed}: head agrees with colour annotation on {:.1}% of pixels", 100.0 * acc);
    }
    println!("mean agreement {:.3}; wrote {}", mean_acc, out.display());
    Ok(())
}

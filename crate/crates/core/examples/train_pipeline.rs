//! Trains the toy 32×32 pipeline on synthetic vehicle scenes and writes the
//! checkpoint the other examples and the acceptance tests load.
//!
//! Stages: adversarial generator training, encoder training, embedding of
//! the 16 labeled scenes, segmentation head training. Each stage's result
//! is cached in the output directory, so an interrupted run resumes.
//!
//! ```text
//! cargo run --release --example train_pipeline -- [OUT_DIR] [GAN_STEPS] [ENCODER_STEPS]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use editgan::checkpoint::Checkpoint;
use editgan::embedding::{embed_image, Encoder, EncoderConfig, RefinementConfig};
use editgan::gan::{train_toy_gan, GanConfig};
use editgan::image::pixel_accuracy;
use editgan::scenes::{annotate_by_color, sample_dataset, SceneDataset};
use editgan::segmentation::{train_head, HeadConfig, LabeledPair};
use editgan::{ExtendedLatent, GeneratorConfig, Image};

fn main() -> editgan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "crates/core/assets".into()));
    let gan_steps: usize = args.next().map(|s| s.parse().expect("GAN_STEPS")).unwrap_or(4000);
    let encoder_steps: usize = args.next().map(|s| s.parse().expect("ENCODER_STEPS")).unwrap_or(1500);
    std::fs::create_dir_all(&out)?;
    let cache = out.join("stages");
    std::fs::create_dir_all(&cache)?;

    let data = sample_dataset(1016, 32, 1)?;
    println!("labeled split {}", SceneDataset::split_hash(&data.labeled));
    let reals: Vec<Image> = data.unlabeled.iter().map(|s| s.image.clone()).collect();

    let gan_path = cache.join("gan.egw");
    let mut ck = if gan_path.exists() {
        Checkpoint::load(&gan_path)?
    } else {
        let t = Instant::now();
        let gan = GanConfig { steps: gan_steps, ..GanConfig::default() };
        let outcome = train_toy_gan(&reals, &GeneratorConfig::toy32(), &gan)?;
        println!("gan: {gan_steps} steps in {:.0}s, held-out critic accuracy {:?}", t.elapsed().as_secs_f64(), outcome.log.discriminator_accuracy.last());
        let ck = Checkpoint::new(outcome.generator);
        ck.save(&gan_path)?;
        ck
    };

    let enc_path = cache.join("encoder.egw");
    if enc_path.exists() {
        ck.encoder = Checkpoint::load(&enc_path)?.encoder;
    } else {
        let t = Instant::now();
        let cfg = EncoderConfig { learning_rate: 1e-4, ..EncoderConfig::default() };
        let mut encoder = Encoder::new(&ck.generator, cfg.seed)?;
        let log = encoder.train(&reals, &ck.generator, &cfg, encoder_steps)?;
        println!(
            "encoder: {encoder_steps} steps in {:.0}s, rgb loss {:.4} -> {:.4}",
            t.elapsed().as_secs_f64(),
            log.rgb.first().map_or(f64::NAN, |v| v.1),
            log.rgb.last().map_or(f64::NAN, |v| v.1)
        );
        ck.encoder = Some(encoder);
        ck.save(&enc_path)?;
    }
    let encoder = ck.encoder.clone().expect("encoder stage ran");

    let refine = RefinementConfig { steps: 2000, ..RefinementConfig::default() };
    let mut pairs = Vec::new();
    let t = Instant::now();
    for (i, s) in data.labeled.iter().enumerate() {
        let path = cache.join(format!("labeled_{i:02}.egl"));
        let w = if path.exists() {
            ExtendedLatent::load(&path)?.0
        } else {
            let r = embed_image(&ck.generator, &encoder, &s.image, &refine)?;
            println!("embedded {i}: loss {:.4} -> {:.4}", r.loss_trace[0], r.final_loss);
            r.w_plus.save(&path, &s.image.content_hash())?;
            r.w_plus
        };
        pairs.push(LabeledPair { image: s.image.clone(), mask: s.mask.clone(), w_plus: Some(w) });
    }
    println!("embedding: {:.0}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (head, log) = train_head(&ck.generator, &pairs, &HeadConfig { target_train_accuracy: 0.998, class_weight_power: 0.5, ..HeadConfig::default() })?;
    println!("head: {} steps in {:.0}s, training accuracy {:.4}", log.steps, t.elapsed().as_secs_f64(), log.final_accuracy());
    ck.generator.set_head(head)?;

    let mut acc = 0.0;
    for seed in 0..50u64 {
        let w = ck.generator.map_to_w_plus(&ck.generator.sample_latent(1_000_000 + seed))?;
        let s = ck.generator.synthesize(&w)?;
        acc += pixel_accuracy(s.mask.as_ref().expect("head attached"), &annotate_by_color(&s.image))?;
    }
    println!("held-out generator-sample accuracy {:.4}", acc / 50.0);

    let final_path = out.join("toy32.egw");
    ck.save(&final_path)?;
    println!("wrote {} (generator {})", final_path.display(), &ck.generator_hash()[..16]);
    Ok(())
}

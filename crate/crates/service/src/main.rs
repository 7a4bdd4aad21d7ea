use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use editgan::checkpoint::Checkpoint;
use editgan::editing::{compute_edit_region, learn_editing_vector, refine_edit, apply_editing_vector, EditProblem, EditingLossConfig};
use editgan::embedding::{embed_image, Encoder, EncoderConfig, RefinementConfig};
use editgan::gan::{train_toy_gan, GanConfig};
use editgan::library::{load_vector_for, save_vector, VectorRecord};
use editgan::metrics::{self, Benchmark};
use editgan::scenes::{sample_dataset, SceneDataset};
use editgan::segmentation::{train_head, HeadConfig, LabeledPair};
use editgan::{ExtendedLatent, GeneratorConfig, Image, JointSample, Mask};
use editgan_service::{palette_for, scene_attribute_classifier, ServiceConfig};

#[derive(Parser)]
#[command(name = "editgan", version, about = "Segmentation-guided latent editing on a toy generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Data {
    /// Synthetic scenes in the dataset (the first 16 are the labeled split).
    #[arg(long, default_value_t = 1016)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train a generator on synthetic scenes.
    TrainGan {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: Data,
    },
    /// Train the encoder of a checkpoint.
    TrainEncoder {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to overwriting the input checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[command(flatten)]
        data: Data,
    },
    /// Embed the labeled scenes and train the segmentation head.
    TrainHead {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        embed_steps: usize,
        #[command(flatten)]
        data: Data,
    },
    /// Embed an image: writes its latent, reconstruction and predicted mask.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        reconstruction: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Learn an editing vector from a latent and an edited mask.
    LearnEdit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        /// Edited mask, indexed PNG.
        #[arg(long)]
        mask: PathBuf,
        /// Labels the edit may change, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<u8>,
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "vectors")]
        vectors_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value = "")]
        notes: String,
    },
    /// Apply a library vector to a latent.
    Apply(ApplyArgs),
    /// Apply a vector, then refine it against its own predicted mask.
    Refine {
        #[command(flatten)]
        apply: ApplyArgs,
        #[arg(long, default_value_t = 30)]
        steps: usize,
    },
    /// Sweep a vector over scales; writes reports.csv, reports.json and plot.csv.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vector: PathBuf,
        /// Comma separated
        #[arg(long, value_delimiter = ',', default_values_t = metrics::SCALE_GRID.to_vec())]
        scales: Vec<f64>,
        /// Comma separated
        #[arg(long, value_delimiter = ',', default_values_t = vec![0usize, 10, 30, 60])]
        refine_steps: Vec<usize>,
        #[arg(long, default_value_t = 12)]
        n_images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        /// TOML config; EDITGAN_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    latent: PathBuf,
    /// Vector file (.egv).
    #[arg(long)]
    vector: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    scale: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    latent_out: Option<PathBuf>,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn generator_config(resolution: usize) -> editgan::Result<GeneratorConfig> {
    match resolution {
        32 => Ok(GeneratorConfig::toy32()),
        16 => Ok(GeneratorConfig { num_labels: editgan::scenes::NUM_LABELS, ..GeneratorConfig::tiny16() }),
        r => Err(editgan::Error::InvalidConfig(format!("no generator preset for resolution {r}"))),
    }
}

fn dataset(d: &Data) -> editgan::Result<SceneDataset> {
    sample_dataset(d.images, d.resolution, d.data_seed)
}

fn write_sample(sample: &JointSample, image: &Path, mask: Option<&Path>, palette: &[[u8; 3]]) -> editgan::Result<()> {
    std::fs::write(image, sample.image.to_png()?)?;
    if let (Some(p), Some(m)) = (mask, &sample.mask) {
        std::fs::write(p, m.to_png(palette)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::TrainGan { out, steps, seed, data } => {
            let d = dataset(&data)?;
            let reals: Vec<Image> = d.unlabeled.iter().map(|s| s.image.clone()).collect();
            let cfg = GanConfig { steps, seed, ..GanConfig::default() };
            let outcome = train_toy_gan(&reals, &generator_config(data.resolution)?, &cfg)?;
            if let Some((step, acc)) = outcome.log.discriminator_accuracy.last() {
                println!("step {step}: held-out critic accuracy {acc:.3}");
            }
            let ck = Checkpoint::new(outcome.generator);
            ck.save(&out)?;
            println!("wrote {} (generator {})", out.display(), ck.generator_hash());
        }
        Command::TrainEncoder { checkpoint, out, steps, lr, data } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            let reals: Vec<Image> = dataset(&data)?.unlabeled.into_iter().map(|s| s.image).collect();
            let cfg = EncoderConfig { learning_rate: lr, ..EncoderConfig::default() };
            let mut encoder = Encoder::new(&ck.generator, cfg.seed)?;
            let log = encoder.train(&reals, &ck.generator, &cfg, steps)?;
            if let Some((step, l)) = log.rgb.last() {
                println!("step {step}: reconstruction loss {l:.4}");
            }
            ck.encoder = Some(encoder);
            ck.save(out.as_deref().unwrap_or(&checkpoint))?;
        }
        Command::TrainHead { checkpoint, out, embed_steps, data } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            let encoder = ck.encoder.clone().ok_or(editgan::Error::NoEncoder)?;
            let cfg = RefinementConfig { steps: embed_steps, ..RefinementConfig::default() };
            let mut pairs = Vec::new();
            for s in dataset(&data)?.labeled {
                let r = embed_image(&ck.generator, &encoder, &s.image, &cfg)?;
                pairs.push(LabeledPair { image: s.image, mask: s.mask, w_plus: Some(r.w_plus) });
            }
            let (head, log) = train_head(&ck.generator, &pairs, &HeadConfig::default())?;
            println!("{} steps, training pixel accuracy {:.4}", log.steps, log.final_accuracy());
            ck.generator.set_head(head)?;
            ck.save(out.as_deref().unwrap_or(&checkpoint))?;
        }
        Command::Embed { checkpoint, image, out, steps, reconstruction, mask } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let encoder = ck.encoder.clone().ok_or(editgan::Error::NoEncoder)?;
            let img = Image::from_png(&std::fs::read(&image)?)?;
            let r = embed_image(&ck.generator, &encoder, &img, &RefinementConfig { steps, ..RefinementConfig::default() })?;
            r.w_plus.save(&out, &img.content_hash())?;
            println!("loss {:.4} -> {:.4}", r.loss_trace[0], r.final_loss);
            let sample = ck.generator.synthesize(&r.w_plus)?;
            let palette = palette_for(ck.generator.config().num_labels);
            if let Some(p) = reconstruction {
                write_sample(&sample, &p, mask.as_deref(), &palette)?;
            } else if let (Some(p), Some(m)) = (mask, &sample.mask) {
                std::fs::write(p, m.to_png(&palette)?)?;
            }
        }
        Command::LearnEdit { checkpoint, latent, mask, labels, name, vectors_dir, steps, notes } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let gen = &ck.generator;
            let (w, source) = ExtendedLatent::load(&latent)?;
            let base = gen.synthesize(&w)?;
            let y = base.mask.clone().ok_or(editgan::Error::NoHead)?;
            let y_edited = Mask::from_png(&std::fs::read(&mask)?)?;
            let cfg = EditingLossConfig { steps, ..EditingLossConfig::learn() };
            let q: BTreeSet<u8> = labels.into_iter().collect();
            let region = compute_edit_region(&y, &y_edited, &q, cfg.buffer_px)?;
            let problem = EditProblem { base_w: w, x: base.image, y_edited, region };
            let mut learned = learn_editing_vector(gen, &problem, &cfg, &name)?;
            learned.vector.source_image_hash = source;
            let best = learned.trace.best();
            println!("best step {}: total {:.4} rgb {:.4} ce {:.4}", learned.trace.best_step, best.total, best.rgb, best.ce);
            let record = VectorRecord { notes, ..VectorRecord::new(learned.vector, ck.generator_hash()) };
            println!("wrote {}", save_vector(&vectors_dir, &record)?.display());
        }
        Command::Apply(a) => {
            let (ck, w, record) = load_apply(&a)?;
            let (sample, w2) = apply_editing_vector(&ck.generator, &w, &record.vector, a.scale)?;
            finish_apply(&ck, &a, &sample, &w2)?;
        }
        Command::Refine { apply: a, steps } => {
            let (ck, w, record) = load_apply(&a)?;
            let r = refine_edit(&ck.generator, &w, &record.vector, a.scale, steps, &EditingLossConfig::refine())?;
            if let Some(t) = &r.trace {
                let first = t.losses[0].total;
                println!("refinement loss {first:.4} -> {:.4} (best step {})", t.best().total, t.best_step);
            }
            finish_apply(&ck, &a, &r.sample, &r.latent)?;
        }
        Command::Bench { checkpoint, vector, scales, refine_steps, n_images, seed, out_dir } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let gen = &ck.generator;
            let record = load_vector_for(&vector, &ck.generator_hash())?;
            let classifier = scene_attribute_classifier(gen.resolution())?;
            let latents: Vec<ExtendedLatent> =
                (0..n_images as u64).map(|i| gen.map_to_w_plus(&gen.sample_latent(seed + i))).collect::<editgan::Result<_>>()?;
            let reference: Vec<Image> = latents.iter().map(|w| gen.render(w)).collect::<editgan::Result<_>>()?;
            let rows = metrics::run_benchmark(&Benchmark {
                generator: gen,
                vector: &record.vector,
                scales: &scales,
                refine_steps: &refine_steps,
                test_latents: &latents,
                reference: &reference,
                classifier: &classifier,
                target: true,
                refine_config: EditingLossConfig::refine(),
            })?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("reports.csv"), metrics::reports_to_csv(&rows))?;
            std::fs::write(out_dir.join("reports.json"), metrics::reports_to_json(&rows))?;
            std::fs::write(out_dir.join("plot.csv"), metrics::plot_csv(&rows))?;
            print!("{}", metrics::reports_to_csv(&rows));
        }
        Command::Serve { config, port } => {
            let mut cfg = ServiceConfig::load(config.as_deref())?;
            if let Some(p) = port {
                cfg.port = p;
            }
            tokio::runtime::Runtime::new()?.block_on(editgan_service::serve(cfg))?;
        }
    }
    Ok(())
}

fn load_apply(a: &ApplyArgs) -> Result<(Checkpoint, ExtendedLatent, VectorRecord), Box<dyn std::error::Error>> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (w, _) = ExtendedLatent::load(&a.latent)?;
    let record = load_vector_for(&a.vector, &ck.generator_hash())?;
    Ok((ck, w, record))
}

fn finish_apply(ck: &Checkpoint, a: &ApplyArgs, sample: &JointSample, w: &ExtendedLatent) -> CliResult {
    write_sample(sample, &a.out, a.mask.as_deref(), &palette_for(ck.generator.config().num_labels))?;
    if let Some(p) = &a.latent_out {
        w.save(p, &sample.image.content_hash())?;
    }
    Ok(())
}

//! The on-disk vector library: saving, listing with compatibility flags,
//! and refusing vectors learned against another generator.
//!
//! ```text
//! cargo run --example vector_library -- [LIBRARY_DIR]
//! ```

use std::path::PathBuf;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::editing::EditingVector;
use editgan::library::{list_vectors_for, load_vector_for, save_vector, VectorRecord};
use editgan::tensor::Tensor;
use editgan::Error;

fn main() -> editgan::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out/library".into()));
    std::fs::create_dir_all(&dir)?;
    let ck = Checkpoint::load(&shipped_toy32_path())?;
    let hash = ck.generator_hash();
    let shape = [ck.generator.num_style_layers(), ck.generator.config().latent_dim];

    let mine = EditingVector::new("nudge", Tensor::full(&shape, 0.01), [2].into(), "none")?;
    let foreign = EditingVector::new("foreign", Tensor::full(&shape, 0.01), [2].into(), "none")?;
    save_vector(&dir, &VectorRecord { notes: "constant offset".into(), ..VectorRecord::new(mine, hash.clone()) })?;
    let foreign_path = save_vector(&dir, &VectorRecord::new(foreign, "0".repeat(64)))?;
    std::fs::write(dir.join("broken.egv"), b"not a vector")?;

    let catalog = list_vectors_for(&dir, &hash)?;
    for e in &catalog.entries {
        println!("{:12} labels {:?} compatible {:?} delta {}", e.name, e.label_set, e.compatible, &e.delta_hash[..12]);
    }
    for w in &catalog.warnings {
        println!("warning: {w}");
    }
    match load_vector_for(&foreign_path, &hash) {
        Err(Error::IncompatibleVector { .. }) => println!("foreign vector refused"),
        other => panic!("expected a refusal, got {other:?}"),
    }
    println!("catalog json: {}", catalog.to_json());
    Ok(())
}

use std::collections::BTreeSet;

use editgan::checkpoint::{shipped_toy32_path, Checkpoint};
use editgan::editing::*;
use editgan::embedding::{embed_image, RefinementConfig};
use editgan::library::{list_vectors_for, load_vector_for, save_vector, VectorRecord};
use editgan::scenes::{annotate_by_color, edit_enlarge_wheels, sample_dataset, SceneSample, WHEEL_LABELS};
use editgan::Error;

fn shipped() -> Checkpoint {
    Checkpoint::load(&shipped_toy32_path()).unwrap()
}

#[test]
fn shipped_checkpoint_is_complete_and_stable() {
    let ck = shipped();
    assert!(ck.generator.head().is_some());
    assert!(ck.encoder.is_some());
    assert_eq!(ck.generator.resolution(), 32);
    let bytes = std::fs::read(shipped_toy32_path()).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
}

#[test]
fn labeled_split_is_reproducible() {
    let a = sample_dataset(64, 32, 1).unwrap();
    let b = sample_dataset(64, 32, 1).unwrap();
    assert_eq!(a.labeled.len(), 16);
    for (x, y) in a.labeled.iter().zip(&b.labeled) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.mask, y.mask);
        assert_eq!(annotate_by_color(&x.image), x.mask);
    }
}

#[test]
fn embed_learn_apply_and_store_a_wheel_edit() {
    let ck = shipped();
    let gen = &ck.generator;
    let enc = ck.encoder.as_ref().unwrap();
    let scene = SceneSample::generate(32, 7000);
    let cfg = RefinementConfig { steps: 60, ..RefinementConfig::default() };
    let emb = embed_image(gen, enc, &scene.image, &cfg).unwrap();
    assert!(emb.final_loss <= emb.loss_trace[0]);

    let base = gen.synthesize(&emb.w_plus).unwrap();
    let y = base.mask.clone().unwrap();
    let y_edit = edit_enlarge_wheels(&y, &scene.params, 2.0);
    let q: BTreeSet<u8> = WHEEL_LABELS.into_iter().collect();
    let ecfg = EditingLossConfig { steps: 40, ..EditingLossConfig::learn() };
    let region = compute_edit_region(&y, &y_edit, &q, ecfg.buffer_px).unwrap();
    let problem = EditProblem { base_w: emb.w_plus.clone(), x: base.image.clone(), y_edited: y_edit, region };
    let learned = learn_editing_vector(gen, &problem, &ecfg, "wheels").unwrap();
    assert!(learned.trace.best().total < learned.trace.losses[0].total);

    let dir = tempfile::tempdir().unwrap();
    let path = save_vector(dir.path(), &VectorRecord::new(learned.vector.clone(), ck.generator_hash())).unwrap();
    let back = load_vector_for(&path, &ck.generator_hash()).unwrap();
    assert_eq!(back.vector.delta_hash(), learned.vector.delta_hash());
    assert!(matches!(load_vector_for(&path, &"0".repeat(64)), Err(Error::IncompatibleVector { .. })));
    let catalog = list_vectors_for(dir.path(), &ck.generator_hash()).unwrap();
    assert_eq!(catalog.entries[0].compatible, Some(true));

    let (s0, w0) = apply_editing_vector(gen, &emb.w_plus, &back.vector, 0.0).unwrap();
    assert_eq!(w0, emb.w_plus);
    assert_eq!(s0, base);
}

#[test]
fn empty_label_set_is_rejected() {
    let ck = shipped();
    let y = ck.generator.synthesize(&ck.generator.map_to_w_plus(&ck.generator.sample_latent(1)).unwrap()).unwrap().mask.unwrap();
    assert!(matches!(compute_edit_region(&y, &y, &BTreeSet::new(), 3), Err(Error::EmptyLabelSet)));
}

//! Distribution and identity metrics on image sets: FID, KID and the
//! identity score, plus the attribute classifier used for edit accuracy.
//!
//! ```text
//! cargo run --example metrics
//! ```

use editgan::metrics::{fid, id_score, image_features, kid, train_attribute_classifier, ClassifierConfig};
use editgan::scenes::SceneSample;
use editgan::Image;

fn main() -> editgan::Result<()> {
    let scenes: Vec<SceneSample> = (0..200u64).map(|i| SceneSample::generate(32, 20_000 + i)).collect();
    let (on, off): (Vec<&SceneSample>, Vec<&SceneSample>) = scenes.iter().partition(|s| s.params.headlight_on);
    let feats = |set: &[&SceneSample]| -> editgan::Result<Vec<Vec<f64>>> { set.iter().map(|s| image_features(&s.image)).collect() };
    let (f_on, f_off) = (feats(&on)?, feats(&off)?);
    // equal set sizes, FID is biased by sample count
    let n = f_on.len().min(f_off.len() / 2);
    let (a, b, c) = (&f_off[..n], &f_off[f_off.len() - n..], &f_on[..n]);
    println!("{n} vs {n} images");
    println!("off vs off: fid {:.4} kid {:.5}", fid(a, b)?, kid(a, b)?);
    println!("off vs on:  fid {:.4} kid {:.5}", fid(a, c)?, kid(a, c)?);

    let a = &scenes[0].image;
    let brighter = Image::new(a.tensor().map(|v| (v * 1.1).min(1.0)))?;
    println!("identity: self {:.4}, brighter {:.4}, other scene {:.4}", id_score(a, a)?, id_score(a, &brighter)?, id_score(a, &scenes[1].image)?);

    let images: Vec<Image> = scenes.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<bool> = scenes.iter().map(|s| s.params.headlight_on).collect();
    let (clf, held_out) = train_attribute_classifier(&images, &labels, &ClassifierConfig::default())?;
    println!("headlight classifier held-out accuracy {held_out:.3}");
    let fresh: Vec<SceneSample> = (0..100u64).map(|i| SceneSample::generate(32, 90_000 + i)).collect();
    let right = fresh.iter().filter(|s| clf.predict(&s.image) == s.params.headlight_on).count();
    println!("on 100 new scenes {right}/100");
    Ok(())
}

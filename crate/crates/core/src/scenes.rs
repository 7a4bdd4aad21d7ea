//! Procedural part-composed vehicle scenes with exact part masks.
//!
//! A scene is a body rectangle with a cabin, two wheels (tire and hub
//! discs), an optional headlight and a taillight on a ground strip. Every
//! part has a fixed colour (the body one of three), jittered slightly per
//! image, so each mask is the exact rasterization of the analytic shapes at
//! pixel centres.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const GROUND: u8 = 1;
pub const BODY: u8 = 2;
pub const WINDOW: u8 = 3;
pub const TIRE: u8 = 4;
pub const HUB: u8 = 5;
pub const HEADLIGHT: u8 = 6;
pub const TAILLIGHT: u8 = 7;
pub const NUM_LABELS: usize = 8;

/// Labels grouped for the wheel edits.
pub const WHEEL_LABELS: [u8; 2] = [TIRE, HUB];

pub const DEFAULT_LABELED: usize = 16;
const HUB_RATIO: f64 = 0.45;
const COLOR_JITTER: f64 = 0.03;

const BODY_COLORS: [[f64; 3]; 3] = [[0.80, 0.15, 0.15], [0.15, 0.30, 0.80], [0.20, 0.62, 0.25]];
const PART_COLORS: [[f64; 3]; NUM_LABELS] = [
    [0.60, 0.80, 0.97], // background
    [0.38, 0.36, 0.34], // ground
    [0.0, 0.0, 0.0],    // body, per scene
    [0.10, 0.25, 0.35], // window
    [0.05, 0.05, 0.05], // tire
    [0.78, 0.78, 0.80], // hub
    [1.00, 0.92, 0.15], // headlight
    [0.98, 0.45, 0.75], // taillight
];

/// Ordered part-label vocabulary with a display palette.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub name: String,
    pub labels: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

impl LabelSchema {
    pub fn vehicle() -> Self {
        let labels = ["background", "ground", "body", "window", "tire", "hub", "headlight", "taillight"];
        let palette = vec![
            [0, 0, 0],
            [128, 64, 0],
            [200, 30, 30],
            [30, 160, 200],
            [60, 60, 60],
            [220, 220, 220],
            [255, 230, 0],
            [255, 120, 0],
        ];
        Self { name: "vehicle".into(), labels: labels.iter().map(|s| s.to_string()).collect(), palette }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.labels.iter().position(|l| l == name).map(|i| i as u8)
    }
}

/// Axis-aligned rectangle in pixel units, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    fn inside(&self, res: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= res && self.y + self.h <= res && self.w > 0.0 && self.h > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wheel {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Wheel {
    fn dist2(&self, px: f64, py: f64) -> f64 {
        (px - self.cx).powi(2) + (py - self.cy).powi(2)
    }
}

/// Geometry (pixels at the render resolution), colours and attribute flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub body: Rect,
    pub cabin: Rect,
    pub wheels: [Wheel; 2],
    pub headlight: Rect,
    pub taillight: Rect,
    pub ground_y: f64,
    pub body_color: usize,
    pub headlight_on: bool,
}

impl SceneParams {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        let r = resolution as f64;
        let out = |what: &str| Err(Error::OutOfFrame(format!("{what} at resolution {resolution}")));
        for (name, rect) in [("body", &self.body), ("cabin", &self.cabin), ("taillight", &self.taillight)] {
            if !rect.inside(r) {
                return out(name);
            }
        }
        if self.headlight_on && !self.headlight.inside(r) {
            return out("headlight");
        }
        for wheel in &self.wheels {
            if wheel.radius <= 0.0 {
                return Err(Error::OutOfFrame("wheel radius must be positive".into()));
            }
            if wheel.cx - wheel.radius < 0.0 || wheel.cx + wheel.radius > r || wheel.cy - wheel.radius < 0.0 || wheel.cy + wheel.radius > r {
                return out("wheel");
            }
        }
        if !(0.0..=r).contains(&self.ground_y) {
            return out("ground");
        }
        if self.body_color >= BODY_COLORS.len() {
            return Err(Error::InvalidConfig(format!("body colour {} out of range", self.body_color)));
        }
        Ok(())
    }

    /// Random scene at `resolution`; sizes scale with `resolution / 32`.
    pub fn sample<R: Rng>(resolution: usize, rng: &mut R) -> Self {
        let r = resolution as f64;
        let s = r / 32.0;
        let body_w = rng.gen_range(16.0..22.0) * s;
        let body_h = rng.gen_range(6.0..9.0) * s;
        let radius = rng.gen_range(2.5..4.5) * s;
        let cabin_h = rng.gen_range(3.5..6.0) * s;
        let body_x = rng.gen_range(1.5 * s..(r - 1.5 * s - body_w));
        let y_lo = cabin_h + 1.0 * s;
        let y_hi = r - 1.5 * s - radius - body_h;
        let body_y = rng.gen_range(y_lo..y_hi.max(y_lo + 1e-6));
        let body = Rect { x: body_x, y: body_y, w: body_w, h: body_h };
        let cabin_x = body_x + rng.gen_range(0.2..0.3) * body_w;
        let cabin = Rect { x: cabin_x, y: body_y - cabin_h, w: rng.gen_range(0.4..0.55) * body_w, h: cabin_h };
        let cy = body_y + body_h;
        let wheels = [0.22, 0.78].map(|f| Wheel { cx: body_x + f * body_w, cy, radius });
        let hl = 4.0 * s;
        let headlight = Rect { x: body_x + body_w - hl, y: body_y + 1.0 * s, w: hl, h: hl };
        let taillight = Rect { x: body_x, y: body_y + 1.0 * s, w: 2.0 * s, h: 2.0 * s };
        let ground_y = (cy + 0.8 * radius).min(r);
        Self {
            body,
            cabin,
            wheels,
            headlight,
            taillight,
            ground_y,
            body_color: rng.gen_range(0..BODY_COLORS.len()),
            headlight_on: rng.gen_bool(0.5),
        }
    }

    /// Label at a point, painter's order back to front.
    pub fn label_at(&self, px: f64, py: f64) -> u8 {
        let mut label = BACKGROUND;
        if py >= self.ground_y {
            label = GROUND;
        }
        if self.cabin.contains(px, py) {
            label = WINDOW;
        }
        if self.body.contains(px, py) {
            label = BODY;
        }
        if self.taillight.contains(px, py) {
            label = TAILLIGHT;
        }
        if self.headlight_on && self.headlight.contains(px, py) {
            label = HEADLIGHT;
        }
        for wheel in &self.wheels {
            let d2 = wheel.dist2(px, py);
            if d2 <= wheel.radius * wheel.radius {
                label = if d2 <= (HUB_RATIO * wheel.radius).powi(2) { HUB } else { TIRE };
            }
        }
        label
    }

    pub fn with_wheel_radius(&self, radius: f64) -> Self {
        let mut p = self.clone();
        for w in &mut p.wheels {
            w.radius = radius;
        }
        p
    }
}

/// Colour of each label for one rendered scene.
fn scene_colors(params: &SceneParams, seed: u64) -> [[f64; 3]; NUM_LABELS] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors = PART_COLORS;
    colors[BODY as usize] = BODY_COLORS[params.body_color];
    for c in colors.iter_mut() {
        for v in c.iter_mut() {
            *v = (*v + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0);
        }
    }
    colors
}

/// Rasterizes a scene: deterministic in `(params, resolution, seed)`.
pub fn render_scene(params: &SceneParams, resolution: usize, seed: u64) -> Result<(Image, Mask)> {
    params.validate(resolution)?;
    let r = resolution;
    let mut labels = Vec::with_capacity(r * r);
    for y in 0..r {
        for x in 0..r {
            labels.push(params.label_at(x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    let mask = Mask::new(r, r, labels)?;
    let colors = scene_colors(params, seed);
    let mut t = Tensor::zeros(&[3, r, r]);
    let d = t.data_mut();
    for (p, &l) in mask.labels().iter().enumerate() {
        for c in 0..3 {
            d[c * r * r + p] = 2.0 * colors[l as usize][c] - 1.0;
        }
    }
    Ok((Image::new(t)?, mask))
}

/// Labels an image by the nearest part colour, the way an annotator
/// colour-picking parts would. Exact on rendered scenes.
pub fn annotate_by_color(image: &Image) -> Mask {
    let mut refs: Vec<([f64; 3], u8)> = PART_COLORS.iter().enumerate().filter(|(l, _)| *l != BODY as usize).map(|(l, c)| (*c, l as u8)).collect();
    refs.extend(BODY_COLORS.iter().map(|c| (*c, BODY)));
    let (h, w) = (image.height(), image.width());
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(y, x).map(|v| (v + 1.0) * 0.5);
            let best = refs
                .iter()
                .map(|(c, l)| ((0..3).map(|i| (c[i] - px[i]).powi(2)).sum::<f64>(), *l))
                .fold((f64::INFINITY, 0), |acc, cur| if cur.0 < acc.0 { cur } else { acc });
            labels.push(best.1);
        }
    }
    Mask::new(h, w, labels).expect("sizes agree")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub params: SceneParams,
    pub seed: u64,
    pub image: Image,
    pub mask: Mask,
}

impl SceneSample {
    pub fn generate(resolution: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SceneParams::sample(resolution, &mut rng);
        let (image, mask) = render_scene(&params, resolution, seed).expect("sampled scenes are in frame");
        Self { params, seed, image, mask }
    }
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub resolution: usize,
    pub labeled: Vec<SceneSample>,
    pub unlabeled: Vec<SceneSample>,
}

impl SceneDataset {
    /// SHA-256 over a split's images and masks.
    pub fn split_hash(samples: &[SceneSample]) -> String {
        let mut h = Sha256::new();
        for s in samples {
            h.update(s.image.tensor().to_le_bytes());
            h.update(s.mask.labels());
        }
        hex::encode(h.finalize())
    }

    /// Writes `labeled/` and `unlabeled/` PNG pairs plus `manifest.json`.
    pub fn write(&self, dir: &Path, schema: &LabelSchema) -> Result<()> {
        let mut entries = Vec::new();
        for (split, samples) in [("labeled", &self.labeled), ("unlabeled", &self.unlabeled)] {
            let sub = dir.join(split);
            std::fs::create_dir_all(&sub)?;
            for (i, s) in samples.iter().enumerate() {
                let stem = format!("{i:05}");
                std::fs::write(sub.join(format!("{stem}.png")), s.image.to_png()?)?;
                std::fs::write(sub.join(format!("{stem}_mask.png")), s.mask.to_png(&schema.palette)?)?;
                entries.push(serde_json::json!({
                    "split": split,
                    "image": format!("{split}/{stem}.png"),
                    "mask": format!("{split}/{stem}_mask.png"),
                    "seed": s.seed,
                    "params": s.params,
                    "attributes": {"headlight_on": s.params.headlight_on},
                }));
            }
        }
        let manifest = serde_json::json!({
            "resolution": self.resolution,
            "schema": schema,
            "samples": entries,
        });
        std::fs::write(dir.join("manifest.json"), crate::container::canonical_json(&manifest))?;
        Ok(())
    }
}

/// `n` scenes split into `labeled` and the rest; deterministic in `seed`.
pub fn sample_dataset_with(n: usize, labeled: usize, resolution: usize, seed: u64) -> Result<SceneDataset> {
    if n < labeled {
        return Err(Error::TooFewSamples { needed: labeled, got: n });
    }
    let mut all: Vec<SceneSample> = (0..n as u64).map(|i| SceneSample::generate(resolution, seed.wrapping_mul(1_000_003).wrapping_add(i))).collect();
    let unlabeled = all.split_off(labeled);
    Ok(SceneDataset { resolution, labeled: all, unlabeled })
}

pub fn sample_dataset(n: usize, resolution: usize, seed: u64) -> Result<SceneDataset> {
    sample_dataset_with(n, DEFAULT_LABELED, resolution, seed)
}

/// Paints both wheels of `params` enlarged by `delta` pixels onto `mask`.
pub fn edit_enlarge_wheels(mask: &Mask, params: &SceneParams, delta: f64) -> Mask {
    let mut out = mask.clone();
    for wheel in &params.wheels {
        let r = wheel.radius + delta;
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let d2 = (x as f64 + 0.5 - wheel.cx).powi(2) + (y as f64 + 0.5 - wheel.cy).powi(2);
                if d2 <= r * r {
                    out.set(y, x, if d2 <= (HUB_RATIO * r).powi(2) { HUB } else { TIRE });
                }
            }
        }
    }
    out
}

/// Relabels headlight pixels as body.
pub fn edit_delete_headlight(mask: &Mask) -> Mask {
    let mut out = mask.clone();
    out.labels_mut().iter_mut().filter(|l| **l == HEADLIGHT).for_each(|l| *l = BODY);
    out
}

/// Paints the headlight square of `params` onto `mask`.
pub fn edit_add_headlight(mask: &Mask, params: &SceneParams) -> Mask {
    let mut out = mask.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if params.headlight.contains(x as f64 + 0.5, y as f64 + 0.5) {
                out.set(y, x, HEADLIGHT);
            }
        }
    }
    out
}

/// Paints a headlight onto a mask without scene parameters: a square of the
/// sampler's headlight size in the front upper corner of the body's
/// bounding box. `None` when the mask has no body wide enough.
pub fn edit_add_headlight_from_mask(mask: &Mask) -> Option<Mask> {
    let side = ((4 * mask.width()) as f64 / 32.0).round().max(1.0) as usize;
    let (mut x0, mut x1, mut y0) = (usize::MAX, 0, usize::MAX);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == BODY {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
            }
        }
    }
    if x0 == usize::MAX || x1 + 1 < x0 + side {
        return None;
    }
    let mut out = mask.clone();
    for y in (y0 + 1)..(y0 + 1 + side).min(mask.height()) {
        for x in (x1 + 1 - side)..=x1 {
            out.set(y, x, HEADLIGHT);
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pixel count of a disc by solving the circle equation per row.
    fn disc_pixels_by_rows(cx: f64, cy: f64, r: f64, res: usize) -> usize {
        let mut count = 0;
        for y in 0..res {
            let dy = y as f64 + 0.5 - cy;
            if dy.abs() > r {
                continue;
            }
            let half = (r * r - dy * dy).sqrt();
            // integer x with |x + 0.5 − cx| ≤ half
            let lo = (cx - half - 0.5).ceil().max(0.0) as i64;
            let hi = (cx + half - 0.5).floor().min(res as f64 - 1.0) as i64;
            if hi >= lo {
                count += (hi - lo + 1) as usize;
            }
        }
        count
    }

    fn isolated_wheel_scene(radius: f64) -> SceneParams {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = SceneParams::sample(32, &mut rng);
        p.headlight_on = false;
        // lift the wheels clear of each other and the frame edges
        p.wheels = [Wheel { cx: 8.3, cy: 27.0, radius }, Wheel { cx: 24.6, cy: 27.0, radius }];
        p
    }

    #[test]
    fn wheel_pixels_match_row_oracle() {
        for radius in [1.0, 1.5, 2.0, 3.3, 4.0] {
            let p = isolated_wheel_scene(radius);
            let (_, mask) = render_scene(&p, 32, 0).unwrap();
            let wheel_px = mask.labels().iter().filter(|&&l| l == TIRE || l == HUB).count();
            let oracle: usize = p.wheels.iter().map(|w| disc_pixels_by_rows(w.cx, w.cy, w.radius, 32)).sum();
            assert_eq!(wheel_px, oracle, "radius {radius}");
        }
    }

    #[test]
    fn rendering_is_deterministic_and_annotatable() {
        for seed in 0..20 {
            let a = SceneSample::generate(32, seed);
            let b = SceneSample::generate(32, seed);
            assert_eq!(a, b);
            assert_eq!(annotate_by_color(&a.image), a.mask, "seed {seed}");
        }
    }

    #[test]
    fn headlight_flag_controls_label() {
        let mut s = SceneSample::generate(32, 3).params;
        s.headlight_on = false;
        let (_, m) = render_scene(&s, 32, 0).unwrap();
        assert_eq!(m.count(HEADLIGHT), 0);
        s.headlight_on = true;
        let (_, m) = render_scene(&s, 32, 0).unwrap();
        assert!(m.count(HEADLIGHT) > 0);
    }

    #[test]
    fn out_of_frame_rejected() {
        let mut p = SceneSample::generate(32, 1).params;
        p.wheels[0].cx = 0.5;
        assert!(matches!(render_scene(&p, 32, 0), Err(Error::OutOfFrame(_))));
        let mut p = SceneSample::generate(32, 1).params;
        p.wheels[1].radius = 0.0;
        assert!(render_scene(&p, 32, 0).is_err());
    }

    #[test]
    fn sampled_scenes_are_valid_at_several_resolutions() {
        for res in [16, 32, 64] {
            for seed in 0..50 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                SceneParams::sample(res, &mut rng).validate(res).unwrap();
            }
        }
    }

    #[test]
    fn dataset_splits() {
        let a = sample_dataset(100, 32, 5).unwrap();
        let b = sample_dataset(100, 32, 5).unwrap();
        assert_eq!(a.labeled.len(), 16);
        assert_eq!(a.unlabeled.len(), 84);
        assert_eq!(SceneDataset::split_hash(&a.labeled), SceneDataset::split_hash(&b.labeled));
        assert_eq!(SceneDataset::split_hash(&a.unlabeled), SceneDataset::split_hash(&b.unlabeled));
        assert!(matches!(sample_dataset(10, 32, 5), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn headlight_prevalence_is_balanced() {
        let d = sample_dataset(1000, 32, 11).unwrap();
        let on = d.labeled.iter().chain(&d.unlabeled).filter(|s| s.params.headlight_on).count();
        let frac = on as f64 / 1000.0;
        assert!((0.4..=0.6).contains(&frac), "{frac}");
    }

    #[test]
    fn edits_change_the_expected_labels() {
        let s = SceneSample::generate(32, 4);
        let bigger = edit_enlarge_wheels(&s.mask, &s.params, 2.0);
        let before = s.mask.count(TIRE) + s.mask.count(HUB);
        let after = bigger.count(TIRE) + bigger.count(HUB);
        assert!(after > before);
        assert_eq!(edit_delete_headlight(&s.mask).count(HEADLIGHT), 0);
        let mut off = s.params.clone();
        off.headlight_on = false;
        let (_, m) = render_scene(&off, 32, 0).unwrap();
        assert_eq!(edit_add_headlight(&m, &off).count(HEADLIGHT), 16);
    }

    #[test]
    fn headlight_from_mask_sits_on_the_body_front() {
        let mut s = SceneSample::generate(32, 11);
        s.params.headlight_on = false;
        let (_, m) = render_scene(&s.params, 32, 11).unwrap();
        let out = edit_add_headlight_from_mask(&m).unwrap();
        assert_eq!(out.count(HEADLIGHT), 16);
        assert!(edit_add_headlight_from_mask(&Mask::filled(32, 32, BACKGROUND)).is_none());
    }
}

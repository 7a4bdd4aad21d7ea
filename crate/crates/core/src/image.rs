//! RGB images, label masks and their PNG encodings.
//!
//! Images are `[3, H, W]` tensors with values in `[-1, 1]`. Masks are
//! row-major label ids and travel as indexed-palette PNGs where the label id
//! is the palette index.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{mismatch, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] if *h > 0 && *w > 0 => Ok(Self(t)),
            s => Err(mismatch("[3, H, W]", s)),
        }
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut t = Tensor::zeros(&[3, h, w]);
        for (c, chunk) in t.data_mut().chunks_mut(h * w).enumerate() {
            chunk.fill(rgb[c]);
        }
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let d = self.0.data();
        [d[y * w + x], d[h * w + y * w + x], d[2 * h * w + y * w + x]]
    }

    /// Largest absolute per-value difference.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.0.data().iter().zip(other.0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.0.to_le_bytes()))
    }

    /// 8-bit RGB PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (h, w) = (self.height(), self.width());
        let d = self.0.data();
        let mut raw = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for c in 0..3 {
                let v = ((d[c * h * w + p] + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0);
                raw.push(v as u8);
            }
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer.write_image_data(&raw).map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decodes an 8-bit RGB, RGBA, grayscale or indexed PNG.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Indexed => return Err(Error::Image("unexpanded indexed PNG".into())),
        };
        let mut t = Tensor::zeros(&[3, h, w]);
        let data = t.data_mut();
        for p in 0..h * w {
            for c in 0..3 {
                let src = if channels >= 3 { buf[p * channels + c] } else { buf[p * channels] };
                data[c * h * w + p] = src as f64 / 255.0 * 2.0 - 1.0;
            }
        }
        Ok(Self(t))
    }
}

/// Per-pixel label ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(mismatch(height * width, labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self { height, width, labels: vec![label; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Checks every label is below `num_labels`.
    pub fn validate(&self, num_labels: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_labels) {
            Some(&l) => Err(Error::LabelOutOfRange { label: l as usize, num_labels }),
            None => Ok(()),
        }
    }

    /// Indexed-palette PNG; label id is the palette index.
    pub fn to_png(&self, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
        if (self.max_label() as usize) >= palette.len() {
            return Err(Error::LabelOutOfRange { label: self.max_label() as usize, num_labels: palette.len() });
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
            let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer.write_image_data(&self.labels).map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decodes an 8-bit indexed PNG into palette indices.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::IDENTITY);
        let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!(
                "mask must be an 8-bit indexed PNG, got {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut labels = Vec::with_capacity(w * h);
        for row in 0..h {
            labels.extend_from_slice(&buf[row * info.line_size..row * info.line_size + w]);
        }
        Self::new(h, w, labels)
    }
}

/// Fraction of positions where two masks agree.
pub fn pixel_accuracy(pred: &Mask, truth: &Mask) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(mismatch((truth.height, truth.width), (pred.height, pred.width)));
    }
    let n = pred.labels.len();
    if n == 0 {
        return Ok(1.0);
    }
    let eq = pred.labels.iter().zip(&truth.labels).filter(|(a, b)| a == b).count();
    Ok(eq as f64 / n as f64)
}

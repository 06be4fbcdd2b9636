//! Tile datasets: a local image-folder loader and a seeded synthetic generator.

#[cfg(feature = "fs")]
mod folder;
pub mod ppm;
mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[cfg(feature = "fs")]
pub use folder::{load_folder, load_image, thread_cap, THREADS_ENV};
pub use synth::{synth_rgb, synth_tile, synth_tiles, SYNTH_VERSION};

pub const CACHE_MAGIC: [u8; 4] = *b"XDAT";
pub const CHANNELS: usize = 3;

/// Map an 8-bit sample to [-1, 1].
pub fn normalize(byte: u8) -> f32 {
    byte as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding and saturating out-of-range values.
pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One preprocessed RGB tile, channel-major, values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub source_id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Tile {
    pub fn from_rgb(source_id: impl Into<String>, img: &ppm::RgbImage) -> Self {
        let plane = img.width * img.height;
        let mut pixels = vec![0.0; CHANNELS * plane];
        for (p, rgb) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..CHANNELS {
                pixels[c * plane + p] = normalize(rgb[c]);
            }
        }
        Tile { source_id: source_id.into(), height: img.height, width: img.width, pixels }
    }

    pub fn to_rgb(&self) -> ppm::RgbImage {
        tensor_to_rgb(&self.pixels, self.height, self.width)
    }

    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, CHANNELS, self.height, self.width], self.pixels.clone()).expect("tile shape")
    }
}

/// Channel-major [-1, 1] samples to interleaved bytes.
pub fn tensor_to_rgb(chw: &[f32], height: usize, width: usize) -> ppm::RgbImage {
    let plane = height * width;
    let mut pixels = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..CHANNELS {
            pixels.push(denormalize(chw[c * plane + p]));
        }
    }
    ppm::RgbImage { width, height, pixels }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tiles: Vec<Tile>,
    /// Files that failed to decode.
    pub skipped: usize,
    /// Files that decoded but were not RGB.
    pub rejected_non_rgb: usize,
    split: Vec<Split>,
}

impl Dataset {
    pub fn new(tiles: Vec<Tile>) -> Result<Self> {
        let first = tiles.first().ok_or_else(|| Error::EmptyDataset("no tiles".into()))?;
        let (h, w) = (first.height, first.width);
        for t in &tiles {
            if t.height != h || t.width != w || t.pixels.len() != CHANNELS * h * w {
                return Err(Error::shape("dataset", format!("tile {} is not 3x{h}x{w}", t.source_id)));
            }
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("dataset", format!("tiles must have even dims, got {h}x{w}")));
        }
        let n = tiles.len();
        Ok(Dataset { tiles, skipped: 0, rejected_non_rgb: 0, split: vec![Split::Train; n] })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile_size(&self) -> (usize, usize) {
        (self.tiles[0].height, self.tiles[0].width)
    }

    /// Deterministically mark `round(n * val_fraction)` tiles for validation.
    ///
    /// At least one tile lands on each side whenever the dataset has two or more.
    pub fn assign_split(&mut self, seed: u64, val_fraction: f64) {
        let n = self.tiles.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, rng::SPLIT));
        let n_val = if n < 2 { 0 } else { ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1) };
        self.split = vec![Split::Train; n];
        for &i in &order[..n_val] {
            self.split[i] = Split::Val;
        }
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.split[index]
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    /// Stack the given tiles into an `N x 3 x H x W` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let (h, w) = self.tile_size();
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * h * w);
        for &i in indices {
            data.extend_from_slice(&self.tiles[i].pixels);
        }
        Tensor::new(vec![indices.len(), CHANNELS, h, w], data).expect("uniform tiles")
    }

    pub fn to_container(&self) -> Container {
        let (h, w) = self.tile_size();
        let mut c = Container::new(CACHE_MAGIC, 0, vec![self.len() as i32, h as i32, w as i32, CHANNELS as i32]);
        c.records = self
            .tiles
            .iter()
            .map(|t| (t.source_id.clone(), Tensor::new(vec![CHANNELS, h, w], t.pixels.clone()).expect("tile shape")))
            .collect();
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let [n, h, w, ch] = c.header[..] else {
            return Err(Error::Format { what: "dataset cache", detail: format!("header {:?}", c.header) });
        };
        if ch as usize != CHANNELS || n as usize != c.records.len() {
            return Err(Error::Format {
                what: "dataset cache",
                detail: format!("header {:?} vs {} records", c.header, c.records.len()),
            });
        }
        let tiles = c
            .records
            .into_iter()
            .map(|(source_id, t)| Tile { source_id, height: h as usize, width: w as usize, pixels: t.into_data() })
            .collect();
        Dataset::new(tiles)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, CACHE_MAGIC)?)
    }
}

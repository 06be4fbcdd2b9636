//! Seeded synthetic aerial tiles.
//!
//! Each tile layers, in order:
//! 1. a smooth terrain base (per-channel colour, linear gradient, one slow wave),
//! 2. two to four rectangular "fields" carrying an oriented periodic texture
//!    with a 2.5-8 px period,
//! 3. three to eight "buildings": flat rectangles with hard edges,
//! 4. zero or one "road": a two-pixel bright line across the tile,
//! 5. uniform speckle of amplitude 0.05.
//!
//! Values are quantized to 8-bit so tiles survive a PPM round trip exactly.
//! Changing any constant here changes every downstream acceptance run, so
//! bump [`SYNTH_VERSION`] when doing so.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{denormalize, normalize, ppm, Dataset, Tile, CHANNELS};
use crate::rng;

pub const SYNTH_VERSION: u32 = 1;

const SPECKLE: f64 = 0.05;

/// Generate `n` tiles of `size x size`. Identical arguments give identical datasets.
pub fn synth_tiles(n: usize, size: usize, seed: u64) -> Dataset {
    assert!(size >= 16 && size.is_multiple_of(2), "synthetic tiles must be even-sized and at least 16, got {size}");
    let tiles = (0..n).map(|i| synth_tile(i, size, seed)).collect();
    Dataset::new(tiles).expect("generator emits uniform even-sized tiles")
}

pub fn synth_tile(index: usize, size: usize, seed: u64) -> Tile {
    let mut rng =
        ChaCha8Rng::seed_from_u64(rng::stream_seed(seed, &format!("{}/v{SYNTH_VERSION}/{index}", rng::SYNTH)));
    let s = size as f64;
    let plane = size * size;
    let mut img = vec![0.0f64; CHANNELS * plane];

    // Terrain.
    let base: [f64; 3] = [rng.random_range(-0.45..0.15), rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.05)];
    let (gx, gy) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let (k1, k2, phase) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.0..TAU));
    let wave_amp = rng.random_range(0.05..0.15);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let smooth = gx * u + gy * v + wave_amp * (TAU * (k1 * u + k2 * v) + phase).sin();
            for (c, b) in base.iter().enumerate() {
                img[c * plane + y * size + x] = b + smooth;
            }
        }
    }

    // Textured fields.
    for _ in 0..rng.random_range(2..=4) {
        let (x0, y0, x1, y1) = rect(&mut rng, size, 0.25, 0.6);
        let period = rng.random_range(2.2..6.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let amp = rng.random_range(0.2..0.35);
        let phase = rng.random_range(0.0..TAU);
        let tint: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
        let shift: [f64; 3] =
            [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
        for y in y0..y1 {
            for x in x0..x1 {
                let t = amp * (TAU * (x as f64 * ct + y as f64 * st) / period + phase).sin();
                for c in 0..CHANNELS {
                    img[c * plane + y * size + x] += shift[c] + tint[c] * t;
                }
            }
        }
    }

    // Buildings.
    for _ in 0..rng.random_range(3..=8) {
        let (x0, y0, x1, y1) = rect(&mut rng, size, 3.0 / s, 12.0 / s);
        let gray = rng.random_range(-0.8..0.9);
        let color: [f64; 3] = [
            gray + rng.random_range(-0.1..0.1),
            gray + rng.random_range(-0.1..0.1),
            gray + rng.random_range(-0.1..0.1),
        ];
        for y in y0..y1 {
            for x in x0..x1 {
                for (c, col) in color.iter().enumerate() {
                    img[c * plane + y * size + x] = *col;
                }
            }
        }
    }

    // Road.
    if rng.random_bool(0.5) {
        let horizontal = rng.random_bool(0.5);
        let at = rng.random_range(2..size - 3);
        let level = rng.random_range(0.3..0.7);
        for along in 0..size {
            for off in 0..2 {
                let (y, x) = if horizontal { (at + off, along) } else { (along, at + off) };
                for c in 0..CHANNELS {
                    img[c * plane + y * size + x] = level;
                }
            }
        }
    }

    let pixels = img
        .into_iter()
        .map(|v| {
            let noisy = v + rng.random_range(-SPECKLE..SPECKLE);
            normalize(denormalize(noisy.clamp(-1.0, 1.0) as f32))
        })
        .collect();
    Tile { source_id: format!("synth_{index:05}"), height: size, width: size, pixels }
}

/// Random axis-aligned rectangle with sides between `lo` and `hi` of the tile.
fn rect(rng: &mut ChaCha8Rng, size: usize, lo: f64, hi: f64) -> (usize, usize, usize, usize) {
    let s = size as f64;
    let w = ((rng.random_range(lo..hi) * s) as usize).clamp(1, size);
    let h = ((rng.random_range(lo..hi) * s) as usize).clamp(1, size);
    let x0 = rng.random_range(0..=size - w);
    let y0 = rng.random_range(0..=size - h);
    (x0, y0, x0 + w, y0 + h)
}

/// Interleaved bytes of a synthetic tile, for writing fixtures.
pub fn synth_rgb(index: usize, size: usize, seed: u64) -> ppm::RgbImage {
    synth_tile(index, size, seed).to_rgb()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::dwt2;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_tiles(3, 32, 4);
        let b = synth_tiles(3, 32, 4);
        assert_eq!(a, b);
        let c = synth_tiles(3, 32, 5);
        assert_ne!(a.tiles[0].pixels, c.tiles[0].pixels);
        for t in &a.tiles {
            assert!(t.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn tiles_survive_byte_round_trip() {
        let t = synth_tile(0, 16, 1);
        let back = Tile::from_rgb(t.source_id.clone(), &synth_rgb(0, 16, 1));
        assert_eq!(back, t);
    }

    #[test]
    fn every_subband_carries_energy() {
        let d = synth_tiles(40, 64, 7);
        let mut fractions = [0.0f64; 4];
        for t in &d.tiles {
            let bands = dwt2(&t.tensor()).unwrap();
            let total = bands.energy();
            for (f, b) in fractions.iter_mut().zip(bands.bands()) {
                *f += b.sum_sq() / total / d.len() as f64;
            }
        }
        for f in fractions {
            assert!(f >= 0.01, "band fractions {fractions:?}");
        }
    }
}

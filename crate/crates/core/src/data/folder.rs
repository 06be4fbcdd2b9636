use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageFormat};
use log::warn;
use rayon::prelude::*;

use super::{ppm, Dataset, Tile};
use crate::error::{Error, Result};

/// Environment variable capping the number of decode threads.
pub const THREADS_ENV: &str = "WAVELATENT_THREADS";

pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

enum Decoded {
    Tile(Tile),
    NotRgb,
    Corrupt(String),
}

/// Decode an image file into interleaved RGB bytes without resizing.
///
/// Returns `Ok(None)` for files that decode but carry no colour channels.
pub fn load_image(path: &Path) -> Result<Option<ppm::RgbImage>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Option<ppm::RgbImage>> {
    match ppm::magic(bytes) {
        Some(b"P6") => return ppm::decode(bytes).map(Some),
        Some(m) if m[1].is_ascii_digit() => return Ok(None),
        _ => {}
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Format { what: "png", detail: e.to_string() })?;
    if !img.color().has_color() {
        return Ok(None);
    }
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => other.to_rgb8(),
    };
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Some(ppm::RgbImage { width, height, pixels: rgb.into_raw() }))
}

/// Center-crop to a square, then resize to `target` with a bilinear (triangle) filter.
fn preprocess(img: &ppm::RgbImage, target: usize) -> ppm::RgbImage {
    let side = img.width.min(img.height);
    let (x0, y0) = ((img.width - side) / 2, (img.height - side) / 2);
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("buffer length matches dims");
    let cropped = imageops::crop_imm(&buf, x0 as u32, y0 as u32, side as u32, side as u32).to_image();
    let out = if side == target {
        cropped
    } else {
        imageops::resize(&cropped, target as u32, target as u32, FilterType::Triangle)
    };
    ppm::RgbImage { width: target, height: target, pixels: out.into_raw() }
}

fn load_one(path: &Path, target: usize) -> Decoded {
    let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match load_image(path) {
        Ok(Some(img)) => Decoded::Tile(Tile::from_rgb(id, &preprocess(&img, target))),
        Ok(None) => Decoded::NotRgb,
        Err(e) => Decoded::Corrupt(e.to_string()),
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
}

/// Load every `.png` / `.ppm` in `dir` (lexicographic order) as `target x target` tiles.
///
/// Corrupt files are skipped and non-RGB files rejected; both are counted on
/// the returned dataset.
pub fn load_folder(dir: &Path, target: usize) -> Result<Dataset> {
    if target < 2 || !target.is_multiple_of(2) {
        return Err(Error::Config(format!("target size must be even, got {target}")));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no .png or .ppm files in {}", dir.display())));
    }

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let decoded: Vec<Decoded> = pool.install(|| paths.par_iter().map(|p| load_one(p, target)).collect());

    let (mut tiles, mut skipped, mut rejected) = (Vec::new(), 0, 0);
    for (path, d) in paths.iter().zip(decoded) {
        match d {
            Decoded::Tile(t) => tiles.push(t),
            Decoded::NotRgb => {
                warn!("{}: not an RGB image, rejected", path.display());
                rejected += 1;
            }
            Decoded::Corrupt(why) => {
                warn!("{}: skipped ({why})", path.display());
                skipped += 1;
            }
        }
    }
    if tiles.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no usable images ({skipped} corrupt, {rejected} non-RGB)",
            dir.display()
        )));
    }
    let mut ds = Dataset::new(tiles)?;
    ds.skipped = skipped;
    ds.rejected_non_rgb = rejected;
    Ok(ds)
}

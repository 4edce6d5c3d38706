//! Synthetic square-on-background datasets for smoke tests and demos.
//!
//! Salient images show a flat square in a colour far from a plain background.
//! Camouflaged images share one noise texture between object and background and
//! differ only by a small tint of 0.08 to 0.16 per channel. Connection images mix both styles and carry no masks.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetManifest, Entry, ManifestKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ToySpec {
    pub size: u32,
    pub sod: usize,
    pub cod: usize,
    pub connection: usize,
    pub held_out: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            size: 64,
            sod: 80,
            cod: 80,
            connection: 40,
            held_out: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub sod: DatasetManifest,
    pub cod: DatasetManifest,
    pub connection: DatasetManifest,
    pub sod_test: DatasetManifest,
    pub cod_test: DatasetManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    Salient,
    Camouflaged,
}

fn square(rng: &mut ChaCha8Rng, size: u32) -> (u32, u32, u32) {
    let side = rng.random_range(size * 5 / 16..=size * 5 / 8);
    let x = rng.random_range(0..=size - side);
    let y = rng.random_range(0..=size - side);
    (x, y, side)
}

fn render(rng: &mut ChaCha8Rng, size: u32, style: Style) -> (RgbImage, GrayImage) {
    let (x0, y0, side) = square(rng, size);
    let inside = |x: u32, y: u32| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
    let mut mask = GrayImage::new(size, size);
    let mut img = RgbImage::new(size, size);
    match style {
        Style::Salient => {
            let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
            let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.65..1.0));
            for y in 0..size {
                for x in 0..size {
                    let c = if inside(x, y) { fg } else { bg };
                    img.put_pixel(x, y, Rgb(c.map(|v| (v * 255.0).round() as u8)));
                }
            }
        }
        Style::Camouflaged => {
            let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
            let tint: [f32; 3] = std::array::from_fn(|_| {
                let m = rng.random_range(0.08..0.16);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            let (fx, fy) = (rng.random_range(0.3..0.9), rng.random_range(0.3..0.9));
            let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
            for y in 0..size {
                for x in 0..size {
                    let wave = 0.1 * ((x as f32 * fx + px).sin() + (y as f32 * fy + py).sin());
                    let grain = rng.random_range(-0.05..0.05);
                    let t = if inside(x, y) { tint } else { [0.0; 3] };
                    let c: [u8; 3] = std::array::from_fn(|i| {
                        ((base[i] + wave + grain + t[i]).clamp(0.0, 1.0) * 255.0).round() as u8
                    });
                    img.put_pixel(x, y, Rgb(c));
                }
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            mask.put_pixel(x, y, Luma([if inside(x, y) { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

fn save_png<P: image::PixelWithColorType>(buf: &image::ImageBuffer<P, Vec<u8>>, path: &Path) -> Result<()>
where
    P: image::Pixel<Subpixel = u8>,
{
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn split(
    root: &Path,
    name: &str,
    kind: ManifestKind,
    count: usize,
    rng: &mut ChaCha8Rng,
    size: u32,
) -> Result<DatasetManifest> {
    let dir = root.join(name);
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(&dir, e))?;
    if kind.needs_masks() {
        fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let style = match kind {
            ManifestKind::Sod => Style::Salient,
            ManifestKind::Cod => Style::Camouflaged,
            ManifestKind::Connection => {
                if i % 2 == 0 {
                    Style::Salient
                } else {
                    Style::Camouflaged
                }
            }
        };
        let (img, mask) = render(rng, size, style);
        let stem = format!("{name}_{i:04}");
        let image = dir.join("images").join(format!("{stem}.png"));
        save_png(&img, &image)?;
        let mask_path = if kind.needs_masks() {
            let p = dir.join("masks").join(format!("{stem}.png"));
            save_png(&mask, &p)?;
            Some(p)
        } else {
            None
        };
        entries.push(Entry { image, mask: mask_path });
    }
    let manifest = DatasetManifest::new(name, kind, entries)?;
    manifest.write(&root.join(format!("{name}.txt")))?;
    Ok(manifest)
}

/// Renders the training splits and held-out test splits under `root`, plus one manifest per split.
pub fn generate(root: &Path, spec: &ToySpec) -> Result<ToyDataset> {
    if spec.size < 32 || spec.size % 32 != 0 {
        return Err(Error::argument("toy image size must be a positive multiple of 32"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    Ok(ToyDataset {
        root: root.to_path_buf(),
        sod: split(root, "sod", ManifestKind::Sod, spec.sod, &mut rng, s)?,
        cod: split(root, "cod", ManifestKind::Cod, spec.cod, &mut rng, s)?,
        connection: split(
            root,
            "connection",
            ManifestKind::Connection,
            spec.connection,
            &mut rng,
            s,
        )?,
        sod_test: split(root, "sod_test", ManifestKind::Sod, spec.held_out, &mut rng, s)?,
        cod_test: split(root, "cod_test", ManifestKind::Cod, spec.held_out, &mut rng, s)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_sample, Normalization};

    #[test]
    fn generates_binary_masks_and_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            sod: 3,
            cod: 3,
            connection: 2,
            held_out: 1,
            ..ToySpec::default()
        };
        let ds = generate(dir.path(), &spec).unwrap();
        assert_eq!(ds.sod.len(), 3);
        assert!(ds.connection.entries.iter().all(|e| e.mask.is_none()));
        let back = DatasetManifest::read(&dir.path().join("cod.txt"), ManifestKind::Cod).unwrap();
        assert_eq!(back.entries, ds.cod.entries);
        let s = load_sample(&ds.sod.entries[0], (64, 64), &Normalization::default()).unwrap();
        let m = s.mask.unwrap();
        assert!(m.iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(m.iter().any(|v| *v == 1.0));
    }
}

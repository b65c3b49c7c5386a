//! Small synthetic datasets in the on-disk layout, for smoke tests and demos.
//!
//! Each image is a textured background with one smooth blob whose colour is
//! shifted from the background; the mask marks the blob.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Writes `count` pairs of `size`×`size` PNGs under `root/Imgs` and `root/GT`.
pub fn write_toy_dataset(root: &Path, count: usize, size: u32, seed: u64) -> Result<()> {
    let imgs = root.join("Imgs");
    let gts = root.join("GT");
    for d in [&imgs, &gts] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let (img, mask) = toy_pair(size, &mut rng);
        let stem = format!("toy_{i:03}");
        let ip = imgs.join(format!("{stem}.png"));
        let mp = gts.join(format!("{stem}.png"));
        img.save(&ip).map_err(|source| Error::Image { path: ip, source })?;
        mask.save(&mp).map_err(|source| Error::Image { path: mp, source })?;
    }
    Ok(())
}

fn toy_pair<R: Rng>(size: u32, rng: &mut R) -> (image::RgbImage, image::GrayImage) {
    let s = size as f64;
    let bg: [f64; 3] = [rng.gen_range(0.2..0.5), rng.gen_range(0.3..0.6), rng.gen_range(0.2..0.5)];
    let fg: [f64; 3] = [bg[0] + 0.35, bg[1] - 0.2, bg[2] + 0.25];
    let (cx, cy) = (rng.gen_range(0.35..0.65) * s, rng.gen_range(0.35..0.65) * s);
    let (rx, ry) = (rng.gen_range(0.18..0.3) * s, rng.gen_range(0.18..0.3) * s);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (freq, phase) = (rng.gen_range(0.2..0.5), rng.gen_range(0.0..std::f64::consts::TAU));
    let mut img = image::RgbImage::new(size, size);
    let mut mask = image::GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (dx * theta.cos() + dy * theta.sin(), -dx * theta.sin() + dy * theta.cos());
            let inside = (u / rx).powi(2) + (v / ry).powi(2) <= 1.0;
            let texture = 0.08 * ((x as f64 * freq + phase).sin() * (y as f64 * freq * 0.7).cos());
            let noise: f64 = rng.gen_range(-0.04..0.04);
            let base = if inside { fg } else { bg };
            let px = base.map(|c| ((c + texture + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x, y, image::Rgb(px));
            mask.put_pixel(x, y, image::Luma([if inside { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

//! Dataset ingestion: directory scanning, sample decoding and resizing,
//! boundary ground truth and training augmentation.
//!
//! Layout on disk is `<root>/Imgs/*.{jpg,png}` with masks at `<root>/GT/*.png`
//! (8-bit grayscale, 0 background, 255 foreground), matched by file stem.

mod augment;
mod edge;
pub mod toy;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, resize_nearest, Tensor};

pub use augment::{augment, AugmentParams, SCALE_CHOICES};
pub use edge::extract_edge_gt;

pub(crate) const IMAGE_EXTS: &[&str] = &["jpg", "jpeg", "png"];

/// One training or evaluation example at a fixed square resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub mask: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub edge: Tensor,
    pub id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub pairs: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Line-delimited `image-path<TAB>mask-path`.
    pub fn to_tsv(&self) -> String {
        self.pairs
            .iter()
            .map(|p| format!("{}\t{}\n", p.image.display(), p.mask.display()))
            .collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Returns the sorted file stems of all files in `dir` with one of `exts`, with their paths.
pub(crate) fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if let (true, Some(stem)) = (ext_ok, path.file_stem().and_then(|s| s.to_str())) {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs `<root>/Imgs` with `<root>/GT` by stem. Images without a mask are
/// skipped with a warning.
pub fn scan_dataset(root: &Path, split: Split) -> Result<DatasetManifest> {
    let imgs = root.join("Imgs");
    let gts = root.join("GT");
    for d in [&imgs, &gts] {
        if !d.is_dir() {
            return Err(Error::config("data.root", format!("missing directory {}", d.display())));
        }
    }
    let masks = list_files(&gts, &["png"])?;
    let mut pairs = Vec::new();
    for (stem, image) in list_files(&imgs, IMAGE_EXTS)? {
        match masks.binary_search_by(|(s, _)| s.as_str().cmp(&stem)) {
            Ok(i) => {
                if pairs.last().is_some_and(|p: &ManifestEntry| p.stem == stem) {
                    log::warn!("duplicate image stem `{stem}`, keeping {}", pairs.last().unwrap().image.display());
                    continue;
                }
                pairs.push(ManifestEntry {
                    stem,
                    image,
                    mask: masks[i].1.clone(),
                })
            }
            Err(_) => log::warn!("no mask for {}, skipping", image.display()),
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoPairs(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        pairs,
        split,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Decodes an RGB image into a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Decodes a grayscale image into a `[1, 1, H, W]` tensor in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::from_vec(&[1, 1, h, w], data)
}

/// Writes a map with values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        s => return Err(Error::contract(format!("cannot write map of shape {s:?} as PNG"))),
    };
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads one pair, resizing the image bilinearly and the mask by nearest
/// neighbour to `target_size`², then derives the boundary map.
pub fn load_sample(entry: &ManifestEntry, target_size: usize) -> Result<Sample> {
    if target_size == 0 {
        return Err(Error::contract("target size must be positive"));
    }
    let image = resize_bilinear(&read_rgb(&entry.image)?, target_size, target_size);
    let mask = resize_nearest(&read_gray(&entry.mask)?, target_size, target_size)
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let image = image.reshape(&[3, target_size, target_size])?;
    let mask = mask.reshape(&[1, target_size, target_size])?;
    let edge = extract_edge_gt(&mask)?;
    Ok(Sample {
        image,
        mask,
        edge,
        id: entry.stem.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_png(path: &Path, w: u32, h: u32, value: u8) {
        image::GrayImage::from_pixel(w, h, image::Luma([value])).save(path).unwrap();
    }

    #[test]
    fn scan_counts_matched_pairs_and_skips_orphans() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("Imgs")).unwrap();
        fs::create_dir_all(dir.path().join("GT")).unwrap();
        for s in ["b", "a", "c", "orphan"] {
            touch_png(&dir.path().join("Imgs").join(format!("{s}.png")), 4, 4, 100);
        }
        for s in ["a", "b", "c"] {
            touch_png(&dir.path().join("GT").join(format!("{s}.png")), 4, 4, 255);
        }
        let m = scan_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(m.len(), 3);
        let stems: Vec<_> = m.pairs.iter().map(|p| p.stem.as_str()).collect();
        assert_eq!(stems, ["a", "b", "c"]);
        assert_eq!(m.to_tsv().lines().count(), 3);
        assert!(m.to_tsv().lines().all(|l| l.split('\t').count() == 2));
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_dataset(dir.path(), Split::Train), Err(Error::Config { .. })));
        fs::create_dir_all(dir.path().join("Imgs")).unwrap();
        fs::create_dir_all(dir.path().join("GT")).unwrap();
        let err = scan_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("no pairs found"));
    }

    #[test]
    fn load_resizes_and_derives_edges() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("x.jpg");
        image::RgbImage::from_pixel(640, 480, image::Rgb([10, 200, 30])).save(&img).unwrap();
        let mask = dir.path().join("x.png");
        touch_png(&mask, 640, 480, 0);
        let entry = ManifestEntry {
            stem: "x".into(),
            image: img,
            mask,
        };
        let s = load_sample(&entry, 352).unwrap();
        assert_eq!(s.image.shape(), &[3, 352, 352]);
        assert_eq!(s.mask.shape(), &[1, 352, 352]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.edge.data().iter().all(|&v| v == 0.0));
        assert_eq!(load_sample(&entry, 352).unwrap(), s);
    }

    #[test]
    fn undecodable_file_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.png");
        fs::write(&bad, b"not an image").unwrap();
        let entry = ManifestEntry {
            stem: "bad".into(),
            image: bad.clone(),
            mask: bad.clone(),
        };
        let err = load_sample(&entry, 32).unwrap_err();
        assert!(err.to_string().contains("bad.png"));
    }

    #[test]
    fn square_mask_edge_is_its_ring() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = image::GrayImage::new(8, 8);
        for y in 2..6 {
            for x in 2..6 {
                m.put_pixel(x, y, image::Luma([255]));
            }
        }
        let mask = dir.path().join("m.png");
        m.save(&mask).unwrap();
        let img = dir.path().join("i.png");
        image::RgbImage::new(8, 8).save(&img).unwrap();
        let s = load_sample(&ManifestEntry { stem: "m".into(), image: img, mask }, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let ring = (2..6).contains(&y) && (2..6).contains(&x) && (y == 2 || y == 5 || x == 2 || x == 5);
                assert_eq!(s.edge.data()[y * 8 + x] == 1.0, ring, "({y},{x})");
            }
        }
    }
}

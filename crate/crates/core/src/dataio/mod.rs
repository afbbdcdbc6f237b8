//! Samples, prompt pairs and the crop / prompt / masking protocol.
//!
//! On disk a sample is `<dir>/<id>.img.pgm` plus `<dir>/<id>.lbl.pgm`
//! (binary P5). Image bytes are divided by 255; label bytes are class ids,
//! with 255 read as unannotated. Unannotated pixels are written back as 0.

mod augment;
mod folds;
pub mod pgm;
mod synth;

pub use augment::{augment, transform};
pub use folds::{fold_manifest, parse_fold_manifest, split_folds, write_fold_manifest, FoldSplit, FOLDS};
pub use synth::{generate_synthetic, Family, SynthConfig};

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ClassMap, GrayImage, Rect, IGNORE};

const IMG_SUFFIX: &str = ".img.pgm";
const LBL_SUFFIX: &str = ".lbl.pgm";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: ClassMap,
    pub id: String,
}

impl Sample {
    pub fn new(image: GrayImage, label: ClassMap, id: impl Into<String>) -> Result<Self> {
        if image.height() != label.height() || image.width() != label.width() {
            return Err(Error::Data(format!(
                "image {}x{} and label {}x{} differ",
                image.height(),
                image.width(),
                label.height(),
                label.width()
            )));
        }
        Ok(Sample {
            image,
            label,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Annotated crop used as the attention reference.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub image: GrayImage,
    pub label: ClassMap,
    pub origin: (usize, usize),
    pub source_id: String,
}

impl PromptPair {
    pub fn size(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }

    pub fn rect(&self) -> Rect {
        Rect {
            row: self.origin.0,
            col: self.origin.1,
            height: self.image.height(),
            width: self.image.width(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{IMG_SUFFIX}"))
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{LBL_SUFFIX}"))
}

pub fn write_image(path: &Path, image: &GrayImage) -> Result<()> {
    let px: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    pgm::write(path, image.width(), image.height(), &px)
}

/// Unannotated pixels are written as 0.
pub fn write_label(path: &Path, label: &ClassMap) -> Result<()> {
    let px: Vec<u8> = label
        .labels()
        .iter()
        .map(|&l| if l == IGNORE { 0 } else { l })
        .collect();
    pgm::write(path, label.width(), label.height(), &px)
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    let p = pgm::read(path)?;
    let scale = p.maxval as f64;
    GrayImage::new(
        p.height,
        p.width,
        p.pixels.iter().map(|&b| b as f64 / scale).collect(),
    )
}

pub fn read_label(path: &Path, num_classes: usize) -> Result<ClassMap> {
    let p = pgm::read(path)?;
    if let Some(&bad) = p
        .pixels
        .iter()
        .find(|&&b| b != IGNORE && b as usize >= num_classes)
    {
        return Err(Error::format(
            path,
            format!("label value {bad} is not a class in [0, {num_classes}) or 255"),
        ));
    }
    ClassMap::new(p.height, p.width, p.pixels)
}

pub fn save_sample(sample: &Sample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_image(&image_path(dir, &sample.id), &sample.image)?;
    write_label(&label_path(dir, &sample.id), &sample.label)
}

pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    samples.iter().try_for_each(|s| save_sample(s, dir))
}

/// Loads every `<id>.img.pgm` / `<id>.lbl.pgm` pair in `dir`, sorted by id.
pub fn load_dataset(dir: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(IMG_SUFFIX) {
            ids.push(id.to_string());
        } else if let Some(id) = name.strip_suffix(LBL_SUFFIX) {
            labels.push(id.to_string());
        }
    }
    ids.sort();
    labels.sort();
    if let Some(orphan) = labels.iter().find(|l| ids.binary_search(l).is_err()) {
        return Err(Error::format(
            label_path(dir, orphan),
            "label file has no matching image",
        ));
    }
    ids.iter()
        .map(|id| {
            let lp = label_path(dir, id);
            if !lp.exists() {
                return Err(Error::format(image_path(dir, id), "image has no matching label file"));
            }
            let image = read_image(&image_path(dir, id))?;
            let label = read_label(&lp, num_classes)?;
            Sample::new(image, label, id.clone()).map_err(|e| Error::format(lp, e.to_string()))
        })
        .collect()
}

/// Non-overlapping `window x window` tiles in row-major order; remainders
/// are dropped.
pub fn crop_grid(sample: &Sample, window: usize) -> Result<Vec<Sample>> {
    if window == 0 || window > sample.height() || window > sample.width() {
        return Err(Error::Data(format!(
            "window {window} does not fit a {}x{} image",
            sample.height(),
            sample.width()
        )));
    }
    let (rows, cols) = (sample.height() / window, sample.width() / window);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r * window, c * window);
            out.push(Sample {
                image: sample.image.crop(y, x, window, window)?,
                label: sample.label.crop(y, x, window, window)?,
                id: format!("{}_r{r}c{c}", sample.id),
            });
        }
    }
    Ok(out)
}

/// Centred origin for a `size` square prompt.
pub fn default_prompt_origin(height: usize, width: usize, size: usize) -> (usize, usize) {
    (height.saturating_sub(size) / 2, width.saturating_sub(size) / 2)
}

/// Crops a `size x size` prompt pair at `origin` (centred when `None`).
pub fn extract_prompt(sample: &Sample, origin: Option<(usize, usize)>, size: usize) -> Result<PromptPair> {
    let (row, col) = origin.unwrap_or_else(|| default_prompt_origin(sample.height(), sample.width(), size));
    let label = sample.label.crop(row, col, size, size)?;
    if label.has_ignore() {
        return Err(Error::Data(format!(
            "prompt at ({row},{col}) of {} contains unannotated pixels",
            sample.id
        )));
    }
    Ok(PromptPair {
        image: sample.image.crop(row, col, size, size)?,
        label,
        origin: (row, col),
        source_id: sample.id.clone(),
    })
}

/// Keeps the labels inside `rect`; everything else becomes unannotated.
pub fn mask_partial(sample: &Sample, rect: Rect) -> Result<Sample> {
    rect.check_inside(sample.height(), sample.width())?;
    let mut label = sample.label.clone();
    for y in 0..label.height() {
        for x in 0..label.width() {
            if !rect.contains(y, x) {
                label.set(y, x, IGNORE);
            }
        }
    }
    Ok(Sample {
        image: sample.image.clone(),
        label,
        id: sample.id.clone(),
    })
}

/// Hex SHA-256 over ids, shapes, quantised pixels and labels.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        h.update([0u8]);
        h.update((s.height() as u64).to_le_bytes());
        h.update((s.width() as u64).to_le_bytes());
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        h.update(s.label.labels());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Samples whose ids appear in `ids`, in `ids` order.
pub fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<&'a Sample>> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Data(format!("unknown sample id {id}")))
        })
        .collect()
}

pub fn ids(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, class: u8) -> Sample {
        Sample::new(
            GrayImage::new(h, w, (0..h * w).map(|i| (i % 256) as f64 / 255.0).collect()).unwrap(),
            ClassMap::filled(h, w, class),
            "s",
        )
        .unwrap()
    }

    #[test]
    fn crop_counts() {
        assert_eq!(crop_grid(&sample(512, 512, 0), 256).unwrap().len(), 4);
        assert_eq!(crop_grid(&sample(300, 300, 0), 256).unwrap().len(), 1);
        assert!(crop_grid(&sample(100, 100, 0), 256).is_err());
    }

    #[test]
    fn prompt_top_left_and_default_origin() {
        let s = sample(64, 64, 1);
        let p = extract_prompt(&s, Some((0, 0)), 16).unwrap();
        assert_eq!(p.image, s.image.crop(0, 0, 16, 16).unwrap());
        assert_eq!(p.origin, (0, 0));
        assert_eq!(extract_prompt(&s, None, 16).unwrap().origin, (24, 24));
        assert!(extract_prompt(&s, Some((60, 60)), 16).is_err());
    }

    #[test]
    fn prompt_rejects_unannotated() {
        let s = mask_partial(&sample(16, 16, 1), Rect::square(0, 0, 4)).unwrap();
        assert!(extract_prompt(&s, Some((2, 2)), 4).is_err());
        assert!(extract_prompt(&s, Some((0, 0)), 4).is_ok());
    }

    #[test]
    fn masking_keeps_rectangle_only() {
        let s = sample(64, 64, 1);
        let m = mask_partial(&s, Rect::square(0, 0, 16)).unwrap();
        assert_eq!(m.label.annotated_count(), 256);
        assert_eq!(m.label.get(0, 0), 1);
        assert_eq!(m.label.get(20, 20), IGNORE);
        assert_eq!(m.image, s.image);
        assert_eq!(mask_partial(&m, Rect::square(0, 0, 16)).unwrap(), m);
        assert!(mask_partial(&s, Rect::square(60, 60, 16)).is_err());
    }

    #[test]
    fn masked_label_written_as_zero() {
        let dir = tempfile::tempdir().unwrap();
        let s = mask_partial(&sample(8, 8, 1), Rect::square(0, 0, 2)).unwrap();
        save_sample(&s, dir.path()).unwrap();
        let raw = pgm::read(&label_path(dir.path(), "s")).unwrap();
        assert_eq!(raw.pixels[0], 1);
        assert_eq!(raw.pixels[63], 0);
    }

    #[test]
    fn normalisation_endpoints_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        pgm::write(&image_path(dir.path(), "x"), 2, 1, &[0, 255]).unwrap();
        pgm::write(&label_path(dir.path(), "x"), 2, 1, &[1, 255]).unwrap();
        let d = load_dataset(dir.path(), 2).unwrap();
        assert_eq!(d[0].image.data(), &[0.0, 1.0]);
        assert_eq!(d[0].label.labels(), &[1, IGNORE]);

        pgm::write(&label_path(dir.path(), "x"), 2, 1, &[7, 0]).unwrap();
        let err = load_dataset(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("x.lbl.pgm"), "{err}");
    }

    #[test]
    fn missing_pair_named() {
        let dir = tempfile::tempdir().unwrap();
        pgm::write(&image_path(dir.path(), "lonely"), 1, 1, &[0]).unwrap();
        let err = load_dataset(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("lonely"), "{err}");
    }
}

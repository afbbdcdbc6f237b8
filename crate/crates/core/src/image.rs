//! Grayscale images and integer class maps.

use crate::error::{Error, Result};

/// Label value marking an unannotated pixel.
pub const IGNORE: u8 = 255;

/// Row-major grayscale image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        GrayImage {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        check_rect(self.height, self.width, row, col, h, w)?;
        let mut data = Vec::with_capacity(h * w);
        for y in row..row + h {
            data.extend_from_slice(&self.data[y * self.width + col..][..w]);
        }
        Ok(GrayImage {
            height: h,
            width: w,
            data,
        })
    }
}

/// Row-major class-index image; values are class ids or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "class_map",
                format!("{height}x{width} needs {} labels, got {}", height * width, labels.len()),
            ));
        }
        Ok(ClassMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        ClassMap {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
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

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn has_ignore(&self) -> bool {
        self.labels.contains(&IGNORE)
    }

    pub fn annotated_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Fails if any label is neither a class below `num_classes` nor IGNORE.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE && l as usize >= num_classes)
        {
            Some(i) => Err(Error::Data(format!(
                "label {} at pixel {i} outside [0, {num_classes})",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &ClassMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        check_rect(self.height, self.width, row, col, h, w)?;
        let mut labels = Vec::with_capacity(h * w);
        for y in row..row + h {
            labels.extend_from_slice(&self.labels[y * self.width + col..][..w]);
        }
        Ok(ClassMap {
            height: h,
            width: w,
            labels,
        })
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn square(row: usize, col: usize, size: usize) -> Self {
        Rect {
            row,
            col,
            height: size,
            width: size,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.row && y < self.row + self.height && x >= self.col && x < self.col + self.width
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        check_rect(height, width, self.row, self.col, self.height, self.width)
    }
}

fn check_rect(height: usize, width: usize, row: usize, col: usize, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || row + h > height || col + w > width {
        return Err(Error::Data(format!(
            "rectangle {h}x{w} at ({row},{col}) is not inside a {height}x{width} image"
        )));
    }
    Ok(())
}

//! Sample-level data types shared by the generator, the assembler and the
//! training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class labels in `{0, 1, -1}`; `-1` marks an unobserved class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelRecord {
    values: Vec<i8>,
}

pub const MISSING: i8 = -1;

impl LabelRecord {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !matches!(v, -1..=1)) {
            return Err(Error::Input(format!("label value {bad} outside {{0, 1, -1}}")));
        }
        Ok(Self { values })
    }

    pub fn missing(len: usize) -> Self {
        Self {
            values: vec![MISSING; len],
        }
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, class: usize) -> i8 {
        self.values[class]
    }

    pub fn set(&mut self, class: usize, value: i8) -> Result<()> {
        if !matches!(value, -1..=1) {
            return Err(Error::Input(format!("label value {value} outside {{0, 1, -1}}")));
        }
        self.values[class] = value;
        Ok(())
    }

    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != MISSING).count()
    }

    pub fn is_observed(&self, class: usize) -> bool {
        self.values[class] != MISSING
    }
}

/// Single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

pub const MIN_IMAGE_SIDE: usize = 8;

impl ImageSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Input(format!(
                "image {height}x{width} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Input("non-finite pixel".into()));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    /// Averages interleaved RGB pixels into one channel.
    pub fn from_rgb(id: impl Into<String>, height: usize, width: usize, rgb: &[f32]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                rgb.len()
            )));
        }
        let gray = rgb.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        Self::new(id, height, width, gray)
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut pixels = self.pixels.clone();
        for row in pixels.chunks_mut(self.width) {
            row.reverse();
        }
        Self {
            pixels,
            ..self.clone()
        }
    }
}

/// An image with its label vector over an ordered class list.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: ImageSample,
    pub labels: LabelRecord,
}

/// Images plus labels over a shared, ordered class vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub class_names: Vec<String>,
    pub samples: Vec<LabeledSample>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Keeps only the named classes, in the given order.
    pub fn select_classes(&self, names: &[String]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.class_index(n).ok_or_else(|| Error::Vocabulary(n.clone())))
            .collect::<Result<_>>()?;
        let samples = self
            .samples
            .iter()
            .map(|s| LabeledSample {
                image: s.image.clone(),
                labels: LabelRecord {
                    values: idx.iter().map(|&i| s.labels.get(i)).collect(),
                },
            })
            .collect();
        Ok(Self {
            class_names: names.to_vec(),
            samples,
        })
    }

    /// Label column for one class.
    pub fn column(&self, class: usize) -> Vec<i8> {
        self.samples.iter().map(|s| s.labels.get(class)).collect()
    }

    pub fn concat(mut self, other: LabeledDataset) -> Result<Self> {
        if self.class_names != other.class_names {
            return Err(Error::Vocabulary("datasets have different class lists".into()));
        }
        self.samples.extend(other.samples);
        Ok(self)
    }
}

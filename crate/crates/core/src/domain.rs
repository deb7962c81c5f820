//! Core value types: images, masks, confidence maps, phrases and samples.
//!
//! Everything here is an immutable value once built. Masks are boolean and
//! confidences are real; the only conversion between them is explicit
//! ([`MaskGrid::to_confidence`], or thresholding in the trainer).

use std::fmt;

use crate::error::{Error, Result};

/// Image channel count (RGB).
pub const CHANNELS: usize = 3;

/// Default phrase embedding length.
pub const DEFAULT_EMBED_DIM: usize = 16;

/// Binary per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl MaskGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        MaskGrid {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::spec(format!(
                "mask has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        Ok(MaskGrid {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        MaskGrid {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.values[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.values
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    /// Pixelwise OR. Panics if dimensions differ.
    pub fn union(&self, other: &MaskGrid) -> MaskGrid {
        assert_eq!(self.dims(), other.dims(), "mask union of mismatched dims");
        MaskGrid {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    /// 0.0 / 1.0 confidence view of the mask.
    pub fn to_confidence(&self) -> ConfidenceMap {
        ConfidenceMap {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// Per-pixel confidence in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ConfidenceMap {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::spec(format!(
                "confidence map has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::spec(format!("confidence {bad} outside [0, 1]")));
        }
        Ok(ConfidenceMap {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_values(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// H×W×C image with interleaved channels, values expected in `[0, 1]`.
///
/// The range is not enforced at construction; [`validate_sample`] reports it.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::spec(format!(
                "image has {} values, expected {height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; CHANNELS]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; CHANNELS] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Thing,
    Stuff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plurality {
    Singular,
    Plural,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Thing => "thing",
            Category::Stuff => "stuff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "thing" => Some(Category::Thing),
            "stuff" => Some(Category::Stuff),
            _ => None,
        }
    }
}

impl Plurality {
    pub fn as_str(self) -> &'static str {
        match self {
            Plurality::Singular => "singular",
            Plurality::Plural => "plural",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "singular" => Some(Plurality::Singular),
            "plural" => Some(Plurality::Plural),
            _ => None,
        }
    }
}

/// Evaluation tags carried by every phrase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PhraseTags {
    pub category: Category,
    pub plurality: Plurality,
}

/// A grounded noun phrase, reduced to a fixed-length embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Phrase {
    pub id: u32,
    pub embedding: Vec<f64>,
    pub category: Category,
    pub plurality: Plurality,
}

impl Phrase {
    pub fn tags(&self) -> PhraseTags {
        PhraseTags {
            category: self.category,
            plurality: self.plurality,
        }
    }
}

/// One image with its phrases and, when labeled, one mask per phrase.
///
/// Masks of different phrases may overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub phrases: Vec<Phrase>,
    pub truth: Option<Vec<MaskGrid>>,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        self.truth.is_some()
    }

    /// Copy of the sample with ground truth removed.
    pub fn unlabeled(&self) -> Sample {
        Sample {
            image: self.image.clone(),
            phrases: self.phrases.clone(),
            truth: None,
        }
    }

    pub fn embeddings(&self) -> Vec<&[f64]> {
        self.phrases.iter().map(|p| p.embedding.as_slice()).collect()
    }
}

/// Labeled and unlabeled partitions of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub ratio: f64,
}

/// Teacher-derived supervision for one phrase of an unlabeled sample.
///
/// `None` weights mean "unweighted" (every pixel / the mask counts fully).
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub mask: MaskGrid,
    pub pixel_weights: Option<Vec<f64>>,
    pub mask_weight: Option<f64>,
}

/// Invariant violated by a [`Sample`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ImageRange,
    TruthPhraseLengthMismatch { truth: usize, phrases: usize },
    MaskDimensions { index: usize },
    EmbeddingLength { index: usize, found: usize },
    NonFiniteEmbedding { index: usize },
}

impl Violation {
    /// Stable short name of the violated invariant.
    pub fn name(&self) -> &'static str {
        match self {
            Violation::ImageRange => "image range",
            Violation::TruthPhraseLengthMismatch { .. } => "truth/phrase length mismatch",
            Violation::MaskDimensions { .. } => "mask dimensions",
            Violation::EmbeddingLength { .. } => "embedding length",
            Violation::NonFiniteEmbedding { .. } => "embedding finite",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ImageRange => write!(f, "image range: value outside [0, 1]"),
            Violation::TruthPhraseLengthMismatch { truth, phrases } => write!(
                f,
                "truth/phrase length mismatch: {truth} masks for {phrases} phrases"
            ),
            Violation::MaskDimensions { index } => {
                write!(f, "mask dimensions: mask {index} differs from image")
            }
            Violation::EmbeddingLength { index, found } => {
                write!(f, "embedding length: phrase {index} has {found}")
            }
            Violation::NonFiniteEmbedding { index } => {
                write!(f, "embedding finite: phrase {index} has a non-finite entry")
            }
        }
    }
}

/// Outcome of [`validate_sample`]: ok iff no violations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.violations.iter().map(Violation::name).collect()
    }
}

/// Checks every sample invariant and reports all violations found.
pub fn validate_sample(sample: &Sample, embed_dim: usize) -> Validation {
    let mut violations = Vec::new();

    if sample
        .image
        .as_slice()
        .iter()
        .any(|v| !(0.0..=1.0).contains(v))
    {
        violations.push(Violation::ImageRange);
    }

    for (index, phrase) in sample.phrases.iter().enumerate() {
        if phrase.embedding.len() != embed_dim {
            violations.push(Violation::EmbeddingLength {
                index,
                found: phrase.embedding.len(),
            });
        }
        if phrase.embedding.iter().any(|v| !v.is_finite()) {
            violations.push(Violation::NonFiniteEmbedding { index });
        }
    }

    if let Some(truth) = &sample.truth {
        if truth.len() != sample.phrases.len() {
            violations.push(Violation::TruthPhraseLengthMismatch {
                truth: truth.len(),
                phrases: sample.phrases.len(),
            });
        }
        for (index, mask) in truth.iter().enumerate() {
            if mask.dims() != sample.image.dims() {
                violations.push(Violation::MaskDimensions { index });
            }
        }
    }

    Validation { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phrase(id: u32) -> Phrase {
        Phrase {
            id,
            embedding: vec![0.0; DEFAULT_EMBED_DIM],
            category: Category::Thing,
            plurality: Plurality::Singular,
        }
    }

    fn labeled_sample() -> Sample {
        let image = Image::filled(8, 8, [0.2, 0.4, 0.6]);
        let a = MaskGrid::from_fn(8, 8, |y, x| y < 4 && x < 4);
        let b = MaskGrid::from_fn(8, 8, |y, x| y < 6 && x < 6);
        Sample {
            image,
            phrases: vec![phrase(0), phrase(1)],
            truth: Some(vec![a, b]),
        }
    }

    #[test]
    fn well_formed_sample_is_ok() {
        assert!(validate_sample(&labeled_sample(), DEFAULT_EMBED_DIM).is_ok());
    }

    #[test]
    fn overlapping_masks_are_accepted() {
        let s = labeled_sample();
        let truth = s.truth.as_ref().unwrap();
        assert!(truth[0].get(0, 0) && truth[1].get(0, 0));
        assert!(validate_sample(&s, DEFAULT_EMBED_DIM).is_ok());
    }

    #[test]
    fn short_truth_list_is_reported() {
        let mut s = labeled_sample();
        s.truth.as_mut().unwrap().pop();
        let v = validate_sample(&s, DEFAULT_EMBED_DIM);
        assert_eq!(v.names(), vec!["truth/phrase length mismatch"]);
    }

    #[test]
    fn out_of_range_pixel_is_reported() {
        let mut s = labeled_sample();
        s.image.set(3, 3, 1, 1.5);
        let v = validate_sample(&s, DEFAULT_EMBED_DIM);
        assert_eq!(v.names(), vec!["image range"]);
    }

    #[test]
    fn all_violations_are_collected() {
        let mut s = labeled_sample();
        s.image.set(0, 0, 0, -0.1);
        s.phrases[1].embedding.pop();
        s.truth.as_mut().unwrap()[0] = MaskGrid::empty(4, 4);
        let names = validate_sample(&s, DEFAULT_EMBED_DIM).names();
        assert_eq!(names, vec!["image range", "embedding length", "mask dimensions"]);
    }

    #[test]
    fn empty_masks_are_valid() {
        let mut s = labeled_sample();
        s.truth.as_mut().unwrap()[0] = MaskGrid::empty(8, 8);
        assert!(validate_sample(&s, DEFAULT_EMBED_DIM).is_ok());
    }

    #[test]
    fn confidence_map_rejects_out_of_range() {
        assert!(ConfidenceMap::from_values(1, 2, vec![0.5, 1.2]).is_err());
        assert!(ConfidenceMap::from_values(1, 2, vec![0.5]).is_err());
        assert!(ConfidenceMap::from_values(1, 2, vec![0.0, 1.0]).is_ok());
    }
}

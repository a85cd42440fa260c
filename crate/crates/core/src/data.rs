//! In-memory dataset types shared by training, evaluation, and retrieval.
//!
//! A [`Sample`] couples an RGB image with its salient-object mask and,
//! optionally, a ground-truth label map used only for evaluation. The
//! [`Dataset`] constructor enforces the structural invariants once, so
//! downstream code can index freely.

use crate::error::{Error, Result};
use crate::maskcontrast::ObjectMask;
use crate::tensor::Tensor;

/// Label value that marks pixels excluded from every metric.
pub const IGNORE_LABEL: u8 = 255;

/// Dense per-pixel class annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "label map dimensions must be positive, got {width}x{height}"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "label map of {width}x{height} needs {} values, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(LabelMap { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Row-major label values.
    pub fn values(&self) -> &[u8] {
        &self.labels
    }

    /// Sorted distinct class ids, ignore label excluded.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..IGNORE_LABEL).filter(|&c| seen[c as usize]).collect()
    }
}

/// One dataset entry.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Stable identifier (the file stem on disk).
    pub id: String,
    /// RGB image, `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Salient-object mask, same geometry as the image.
    pub saliency: ObjectMask,
    /// Ground-truth classes, present only for evaluation data.
    pub labels: Option<LabelMap>,
}

/// A validated, ordered collection of samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    /// Validates ids, shapes, and cross-references.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("dataset holds no samples".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.clone()) {
                return Err(Error::Data(format!("duplicate sample id '{}'", s.id)));
            }
            let shape = s.image.shape();
            if shape.len() != 3 || shape[0] != 3 {
                return Err(Error::Shape(format!(
                    "sample '{}': image must be [3, H, W], got {shape:?}",
                    s.id
                )));
            }
            if !s.image.all_finite() {
                return Err(Error::Numeric(format!(
                    "sample '{}': image holds non-finite values",
                    s.id
                )));
            }
            let (h, w) = (shape[1], shape[2]);
            if (s.saliency.height(), s.saliency.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "sample '{}': mask {}x{} does not match image {h}x{w}",
                    s.id,
                    s.saliency.height(),
                    s.saliency.width()
                )));
            }
            if let Some(labels) = &s.labels {
                if (labels.height(), labels.width()) != (h, w) {
                    return Err(Error::Shape(format!(
                        "sample '{}': labels {}x{} do not match image {h}x{w}",
                        s.id,
                        labels.height(),
                        labels.width()
                    )));
                }
            }
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    /// True when every sample carries ground-truth labels.
    pub fn fully_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.labels.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, size: usize) -> Sample {
        Sample {
            id: id.into(),
            image: Tensor::full(&[3, size, size], 0.5),
            saliency: ObjectMask::from_fn(size, size, |y, x| y == x),
            labels: None,
        }
    }

    #[test]
    fn dataset_accepts_valid_samples_and_keeps_order() {
        let d = Dataset::new(vec![sample("b", 4), sample("a", 6)]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.get(0).id, "b");
        assert_eq!(d.get(1).id, "a");
        assert!(!d.fully_labeled());
    }

    #[test]
    fn dataset_rejects_structural_problems() {
        assert!(Dataset::new(vec![]).is_err());
        assert!(Dataset::new(vec![sample("x", 4), sample("x", 4)]).is_err());

        let mut bad_mask = sample("m", 4);
        bad_mask.saliency = ObjectMask::from_fn(3, 4, |_, _| true);
        assert!(Dataset::new(vec![bad_mask]).is_err());

        let mut bad_labels = sample("l", 4);
        bad_labels.labels = Some(LabelMap::new(5, 4, vec![0; 20]).unwrap());
        assert!(Dataset::new(vec![bad_labels]).is_err());

        let mut bad_image = sample("i", 4);
        bad_image.image = Tensor::full(&[1, 4, 4], 0.2);
        assert!(Dataset::new(vec![bad_image]).is_err());
    }

    #[test]
    fn label_map_reports_classes_without_ignore() {
        let mut values = vec![0u8; 12];
        values[3] = 2;
        values[7] = IGNORE_LABEL;
        values[9] = 5;
        let map = LabelMap::new(4, 3, values).unwrap();
        assert_eq!(map.classes_present(), vec![0, 2, 5]);
        assert_eq!(map.at(0, 3), 2);
        assert!(LabelMap::new(4, 3, vec![0; 11]).is_err());
    }
}

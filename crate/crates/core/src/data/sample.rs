use serde::{Deserialize, Serialize};

use crate::error::{Result, TltError};

/// Input layout of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Image,
    Tabular,
}

/// One observation.
///
/// Image inputs are stored row-major as `H x W x C` with pixel values in
/// `[0, 1]`; tabular inputs are a flat `D`-vector with shape `[D]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub shape: Vec<usize>,
    pub x: Vec<f64>,
    pub y: usize,
    pub t: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<u8>>,
}

impl Sample {
    pub fn mode(&self) -> DataMode {
        if self.shape.len() == 3 {
            DataMode::Image
        } else {
            DataMode::Tabular
        }
    }

    pub fn height(&self) -> usize {
        if self.shape.len() == 3 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn width(&self) -> usize {
        if self.shape.len() == 3 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Channel count for images, feature count for tabular rows.
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn num_positions(&self) -> usize {
        self.height() * self.width()
    }

    /// Checks the sample invariants against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if self.shape.is_empty() || self.shape.len() == 2 || self.shape.len() > 3 {
            return Err(TltError::Domain(format!(
                "sample {}: unsupported shape {:?}",
                self.id, self.shape
            )));
        }
        if expected != self.x.len() {
            return Err(TltError::Domain(format!(
                "sample {}: shape {:?} does not match {} values",
                self.id,
                self.shape,
                self.x.len()
            )));
        }
        if self.y >= num_classes {
            return Err(TltError::Domain(format!(
                "sample {}: label {} outside [0, {num_classes})",
                self.id, self.y
            )));
        }
        if self.t > 1 {
            return Err(TltError::Domain(format!(
                "sample {}: treatment {} is not binary",
                self.id, self.t
            )));
        }
        if self.mode() == DataMode::Image {
            if let Some(v) = self.x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(TltError::Domain(format!(
                    "sample {}: pixel value {v} outside [0, 1]",
                    self.id
                )));
            }
        } else if self.x.iter().any(|v| !v.is_finite()) {
            return Err(TltError::Domain(format!("sample {}: non-finite feature", self.id)));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != self.num_positions() {
                return Err(TltError::Domain(format!(
                    "sample {}: mask has {} cells, expected {}",
                    self.id,
                    mask.len(),
                    self.num_positions()
                )));
            }
            if mask.iter().any(|m| *m > 1) {
                return Err(TltError::Domain(format!("sample {}: mask is not binary", self.id)));
            }
        }
        Ok(())
    }

    /// Fraction of spatial positions covered by the object mask.
    pub fn mask_area(&self) -> Option<f64> {
        self.mask.as_ref().map(|m| {
            m.iter().map(|v| usize::from(*v)).sum::<usize>() as f64 / m.len() as f64
        })
    }

    /// Returns a copy with one extra input feature: a constant extra channel
    /// for images, an extra trailing column for tabular rows.
    pub fn with_appended_feature(&self, value: f64) -> Sample {
        let mut out = self.clone();
        match self.mode() {
            DataMode::Image => {
                let c = self.channels();
                let mut x = Vec::with_capacity(self.num_positions() * (c + 1));
                for px in self.x.chunks(c) {
                    x.extend_from_slice(px);
                    x.push(value);
                }
                out.x = x;
                out.shape[2] = c + 1;
            }
            DataMode::Tabular => {
                out.x.push(value);
                out.shape[0] += 1;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Sample {
        Sample {
            id: "a".into(),
            shape: vec![2, 2, 1],
            x: vec![0.0, 0.25, 0.5, 1.0],
            y: 1,
            t: 0,
            mask: Some(vec![0, 1, 1, 0]),
        }
    }

    #[test]
    fn validate_accepts_well_formed() {
        image().validate(2).unwrap();
        assert_eq!(image().mask_area(), Some(0.5));
    }

    #[test]
    fn validate_rejects_violations() {
        let mut s = image();
        s.y = 2;
        assert!(s.validate(2).is_err());
        let mut s = image();
        s.x[0] = 1.5;
        assert!(s.validate(2).is_err());
        let mut s = image();
        s.mask = Some(vec![0, 1, 2, 0]);
        assert!(s.validate(2).is_err());
        let mut s = image();
        s.mask = Some(vec![0, 1]);
        assert!(s.validate(2).is_err());
        let mut s = image();
        s.t = 3;
        assert!(s.validate(2).is_err());
    }

    #[test]
    fn appended_feature_adds_constant_channel() {
        let s = image().with_appended_feature(0.7);
        assert_eq!(s.shape, vec![2, 2, 2]);
        assert_eq!(s.x, vec![0.0, 0.7, 0.25, 0.7, 0.5, 0.7, 1.0, 0.7]);
        let tab = Sample { id: "b".into(), shape: vec![2], x: vec![3.0, -1.0], y: 0, t: 1, mask: None };
        let s = tab.with_appended_feature(0.1);
        assert_eq!(s.shape, vec![3]);
        assert_eq!(s.x, vec![3.0, -1.0, 0.1]);
    }
}

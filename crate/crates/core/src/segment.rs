//! Palette segmentation of rendered scenes and class area fractions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// L∞ distance under which a pixel takes a palette color's label.
pub const TOLERANCE: f32 = 0.12;

pub const BACKGROUND: &str = "background";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassColor {
    pub name: String,
    pub color: [f32; 3],
}

/// Object classes in label order; label `i + 1` is `classes[i]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Palette {
    pub classes: Vec<ClassColor>,
}

impl Palette {
    pub fn new(classes: Vec<ClassColor>) -> Self {
        Palette { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Zero-based class index.
    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Label table with background at 0.
    pub fn class_table(&self) -> Vec<String> {
        std::iter::once(BACKGROUND.to_string()).chain(self.names()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    class_table: Vec<String>,
}

impl SegMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>, class_table: Vec<String>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!("label count {} != {h}x{w}", labels.len())));
        }
        if class_table.is_empty() || labels.iter().any(|&l| l as usize >= class_table.len()) {
            return Err(Error::Argument("label outside class table".into()));
        }
        Ok(SegMask { h, w, labels, class_table })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }
    pub fn class_table(&self) -> &[String] {
        &self.class_table
    }

    /// Area fraction of each object class, in palette order.
    pub fn areas(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.class_table.len()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        let n = self.labels.len() as f64;
        counts[1..].iter().map(|&c| c as f64 / n).collect()
    }

    pub fn background_area(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 0).count() as f64 / self.labels.len() as f64
    }
}

pub fn segment(image: &Tensor, palette: &Palette) -> SegMask {
    assert!(palette.len() < 255, "palette too large for 8-bit labels");
    assert_eq!(image.channels(), 3, "segment expects an RGB image");
    let (h, w) = (image.height(), image.width());
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    let labels = (0..h * w)
        .map(|i| {
            let px = [r[i], g[i], b[i]];
            let mut best = (f32::INFINITY, 0u8);
            for (k, c) in palette.classes.iter().enumerate() {
                let d = (0..3).map(|j| (px[j] - c.color[j]).abs()).fold(0.0, f32::max);
                if d < best.0 {
                    best = (d, k as u8 + 1);
                }
            }
            if best.0 <= TOLERANCE {
                best.1
            } else {
                0
            }
        })
        .collect();
    SegMask { h, w, labels, class_table: palette.class_table() }
}

/// Fraction of pixels labeled `class`.
pub fn class_area(mask: &SegMask, class: &str) -> Result<f64> {
    let idx = mask
        .class_table
        .iter()
        .position(|c| c == class)
        .filter(|&i| i > 0)
        .ok_or_else(|| Error::UnknownClass(class.to_string()))?;
    Ok(mask.labels.iter().filter(|&&l| l as usize == idx).count() as f64 / mask.labels.len() as f64)
}

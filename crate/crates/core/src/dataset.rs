use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle, half-open: columns `x0..x1`, rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "bbox {:?} is empty or outside a {}x{} image",
                self, width, height
            )))
        }
    }
}

impl From<[usize; 4]> for BBox {
    fn from(v: [usize; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]`
    pub image: Tensor,
    pub label: usize,
    pub class_name: String,
    pub bboxes: Vec<BBox>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.rank() != 3 {
            return Err(Error::shape(
                &self.id,
                format!("sample image must be [C,H,W], got {:?}", self.image.shape()),
            ));
        }
        for b in &self.bboxes {
            b.validate(self.width(), self.height())?;
        }
        Ok(())
    }

    /// Union area of the boxes as a fraction of the image area.
    pub fn bbox_area_fraction(&self) -> f32 {
        bbox_union_fraction(&self.bboxes, self.height(), self.width())
    }
}

pub(crate) fn bbox_union_fraction(boxes: &[BBox], height: usize, width: usize) -> f32 {
    let covered = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .filter(|&(x, y)| boxes.iter().any(|b| b.contains(x, y)))
        .count();
    covered as f32 / (height * width) as f32
}

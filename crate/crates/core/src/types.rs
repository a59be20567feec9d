//! Domain types shared by every learner.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Class identifier. `0` is reserved for background everywhere.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: ClassId,
}

impl LabeledBox {
    pub fn new(bbox: BoundingBox, class_id: ClassId) -> Self {
        Self { bbox, class_id }
    }
}

/// Ground truth for one image. Boxes are revealed class by class over the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotation {
    pub image_id: ImageId,
    pub image_h: u32,
    pub image_w: u32,
    pub boxes: Vec<LabeledBox>,
}

impl ImageAnnotation {
    pub fn new(image_id: ImageId, image_h: u32, image_w: u32, boxes: Vec<LabeledBox>) -> Result<Self> {
        let a = Self { image_id, image_h, image_w, boxes };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::Domain(format!(
                "image {} has zero extent {}x{}",
                self.image_id, self.image_w, self.image_h
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.class_id.is_background() {
                return Err(Error::Domain(format!(
                    "image {} box {i} uses the background class id",
                    self.image_id
                )));
            }
            if !b.bbox.within(self.image_w as f64, self.image_h as f64) {
                return Err(Error::Domain(format!(
                    "image {} box {i} {:?} exceeds {}x{}",
                    self.image_id,
                    b.bbox.to_array(),
                    self.image_w,
                    self.image_h
                )));
            }
            if self.boxes[..i].contains(b) {
                return Err(Error::Domain(format!(
                    "image {} box {i} duplicates an earlier box",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    /// Copy of this annotation keeping only boxes whose class is in `classes`.
    pub fn restricted_to(&self, classes: &BTreeSet<ClassId>) -> ImageAnnotation {
        ImageAnnotation {
            image_id: self.image_id.clone(),
            image_h: self.image_h,
            image_w: self.image_w,
            boxes: self
                .boxes
                .iter()
                .filter(|b| classes.contains(&b.class_id))
                .copied()
                .collect(),
        }
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.boxes.iter().map(|b| b.class_id).collect()
    }

    pub fn unique_labels(&self) -> usize {
        self.classes().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: ClassId, score: f64) -> Result<Self> {
        if !(score.is_finite() && (0.0..=1.0).contains(&score)) {
            return Err(Error::Domain(format!("detection score {score} outside [0, 1]")));
        }
        if class_id.is_background() {
            return Err(Error::Domain("detections cannot carry the background class".into()));
        }
        Ok(Self { bbox, class_id, score })
    }
}

/// Order in which classes are learned: a base half trained offline, then one
/// class per increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSchedule {
    pub base_classes: Vec<ClassId>,
    pub incremental_classes: Vec<ClassId>,
    pub eval_every: usize,
}

impl ClassSchedule {
    pub fn new(base: Vec<ClassId>, incremental: Vec<ClassId>, eval_every: usize) -> Result<Self> {
        let s = Self { base_classes: base, incremental_classes: incremental, eval_every };
        s.validate()?;
        Ok(s)
    }

    /// Sorts `classes` and puts the first half (rounded down) in the base set.
    pub fn half_split(classes: &[ClassId], eval_every: usize) -> Result<Self> {
        let mut sorted = classes.to_vec();
        sorted.sort();
        let incremental = sorted.split_off(sorted.len() / 2);
        Self::new(sorted, incremental, eval_every)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.base_classes.is_empty() {
            return Err(Error::Config("schedule needs at least one base class".into()));
        }
        let mut seen = BTreeSet::new();
        for c in self.base_classes.iter().chain(&self.incremental_classes) {
            if c.is_background() {
                return Err(Error::Config("schedule contains the background class".into()));
            }
            if !seen.insert(*c) {
                return Err(Error::Config(format!("class {c} appears twice in the schedule")));
            }
        }
        Ok(())
    }

    pub fn all_classes(&self) -> Vec<ClassId> {
        self.base_classes.iter().chain(&self.incremental_classes).copied().collect()
    }
}

/// Backbone output for one image: a `grid_h x grid_w x channels` tensor stored
/// row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: ImageId,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        image_id: ImageId,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || channels == 0 {
            return Err(Error::Domain(format!(
                "feature map dims {grid_h}x{grid_w}x{channels} must be positive"
            )));
        }
        let expected = grid_h * grid_w * channels;
        if values.len() != expected {
            return Err(Error::Domain(format!(
                "feature map expects {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature map {image_id} value {i}")));
        }
        Ok(Self { image_id, grid_h, grid_w, channels, values })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn locations(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Channel vector at grid row `y`, column `x`.
    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.grid_w + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Channel vector at flattened location `i = y * grid_w + x`.
    pub fn location(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

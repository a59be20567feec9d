//! Seeded synthetic datasets and the on-disk dataset layout.
//!
//! Every grid cell inside a ground-truth box carries its class's signature
//! direction scaled by the signal strength plus Gaussian noise; all other
//! cells are noise. Boxes are grid-aligned and never overlap.
//!
//! Layout of a dataset directory:
//! ```text
//! dataset.json              class list (and the generating spec, if any)
//! split.json                {"train": [...], "test": [...]}
//! features/<id>.rfm         feature maps
//! annotations/<id>.json     ground truth
//! proposals/<id>.json       candidate boxes
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::io::{
    read_annotation, read_feature, read_json, read_proposals, write_annotation, write_feature, write_json_atomic,
    write_proposals, ProposalSet,
};
use crate::types::{ClassId, FeatureMap, ImageAnnotation, ImageId, LabeledBox};

const MAX_BOX_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: u32,
    pub images_per_class: usize,
    /// `[rows, cols]` of the feature grid.
    pub grid: [usize; 2],
    pub channels: usize,
    /// Codebooks the features will be quantized with; `channels` must be a
    /// multiple of it.
    #[serde(default = "default_codebooks")]
    pub num_codebooks: usize,
    pub class_signal_strength: f64,
    pub noise_std: f64,
    /// Inclusive range of ground-truth boxes per image.
    pub boxes_per_image: [usize; 2],
    /// Largest box side, in grid cells.
    #[serde(default = "default_max_box_cells")]
    pub max_box_cells: usize,
    /// Pixels per grid cell.
    #[serde(default = "default_cell_pixels")]
    pub cell_pixels: u32,
    #[serde(default = "default_proposals")]
    pub proposals_per_image: usize,
    /// Jittered copies of each ground-truth box among the proposals.
    #[serde(default = "default_jitter")]
    pub jittered_per_box: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub seed: u64,
}

fn default_codebooks() -> usize {
    8
}
fn default_max_box_cells() -> usize {
    3
}
fn default_cell_pixels() -> u32 {
    16
}
fn default_proposals() -> usize {
    2000
}
fn default_jitter() -> usize {
    8
}
fn default_test_fraction() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.images_per_class == 0 || self.grid[0] == 0 || self.grid[1] == 0 || self.channels == 0 {
            return bad("images_per_class, grid and channels must be positive");
        }
        if self.num_codebooks == 0 || self.channels % self.num_codebooks != 0 {
            return bad("channels must be a multiple of num_codebooks");
        }
        if self.boxes_per_image[0] == 0 || self.boxes_per_image[0] > self.boxes_per_image[1] {
            return bad("boxes_per_image must be a non-empty range starting at 1 or more");
        }
        if self.max_box_cells == 0 || self.cell_pixels == 0 {
            return bad("max_box_cells and cell_pixels must be positive");
        }
        if !(self.class_signal_strength.is_finite() && self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("signal strength and noise must be finite, noise non-negative");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.grid[1] as u32 * self.cell_pixels, self.grid[0] as u32 * self.cell_pixels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub features: FeatureMap,
    pub annotation: ImageAnnotation,
    pub proposals: ProposalSet,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<ImageId>,
    pub test: Vec<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub classes: Vec<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub images: BTreeMap<ImageId, ImageRecord>,
    pub split: Split,
}

impl Dataset {
    pub fn record(&self, id: &ImageId) -> Result<&ImageRecord> {
        self.images.get(id).ok_or_else(|| Error::Ingestion(vec![id.to_string()]))
    }

    /// Training images with at least one box of a class in `classes`, in
    /// split order.
    pub fn train_images_with(&self, classes: &BTreeSet<ClassId>) -> Vec<ImageId> {
        self.split
            .train
            .iter()
            .filter(|id| self.images[*id].annotation.boxes.iter().any(|b| classes.contains(&b.class_id)))
            .cloned()
            .collect()
    }

    /// Test images with at least one box of a class in `classes`.
    pub fn test_images_with(&self, classes: &BTreeSet<ClassId>) -> Vec<ImageId> {
        self.split
            .test
            .iter()
            .filter(|id| self.images[*id].annotation.boxes.iter().any(|b| classes.contains(&b.class_id)))
            .cloned()
            .collect()
    }

    pub fn channels(&self) -> Option<usize> {
        self.images.values().next().map(|r| r.features.channels())
    }
}

/// One unit-norm direction per class, drawn from the spec seed.
pub fn class_signatures(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5349_474e);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.channels).map(|_| normal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Grid-cell rectangle `[r0, r1) x [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CellRect {
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
}

impl CellRect {
    fn overlaps(&self, o: &CellRect) -> bool {
        self.r0 < o.r1 && o.r0 < self.r1 && self.c0 < o.c1 && o.c0 < self.c1
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }
}

fn draw_rect(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> CellRect {
    let [p, q] = spec.grid;
    let h = rng.random_range(1..=spec.max_box_cells.min(p));
    let w = rng.random_range(1..=spec.max_box_cells.min(q));
    let r0 = rng.random_range(0..=p - h);
    let c0 = rng.random_range(0..=q - w);
    CellRect { r0, c0, r1: r0 + h, c1: c0 + w }
}

fn jitter(b: &BoundingBox, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let (cx, cy) = b.center();
    let bw = b.width() * rng.random_range(0.8..1.25);
    let bh = b.height() * rng.random_range(0.8..1.25);
    let cx = cx + b.width() * rng.random_range(-0.15..0.15);
    let cy = cy + b.height() * rng.random_range(-0.15..0.15);
    let x1 = (cx - bw / 2.0).max(0.0);
    let y1 = (cy - bh / 2.0).max(0.0);
    let x2 = (cx + bw / 2.0).min(w);
    let y2 = (cy + bh / 2.0).min(h);
    BoundingBox::new(x1, y1, x2, y2).ok()
}

fn random_box(w: f64, h: f64, min_side: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    let bw = rng.random_range(min_side..=w);
    let bh = rng.random_range(min_side..=h);
    let x1 = rng.random_range(0.0..=w - bw);
    let y1 = rng.random_range(0.0..=h - bh);
    BoundingBox::new(x1, y1, x1 + bw, y1 + bh).expect("positive size")
}

/// Builds every image in memory. Image `i * images_per_class + j` has a box
/// of class `i + 1` first; any further boxes take uniformly random classes.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let signatures = class_signatures(spec);
    let (img_w, img_h) = spec.image_size();
    let [p, q] = spec.grid;
    let cell = spec.cell_pixels as f64;
    let n_images = spec.num_classes as usize * spec.images_per_class;
    let mut images = BTreeMap::new();
    let mut ids = Vec::with_capacity(n_images);
    for idx in 0..n_images {
        let primary = ClassId(idx as u32 / spec.images_per_class as u32 + 1);
        let id = ImageId::new(format!("img_{idx:05}"));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9).wrapping_add(idx as u64));
        let n_boxes = rng.random_range(spec.boxes_per_image[0]..=spec.boxes_per_image[1]);
        let mut rects: Vec<(CellRect, ClassId)> = Vec::with_capacity(n_boxes);
        for k in 0..n_boxes {
            let class = if k == 0 { primary } else { ClassId(rng.random_range(1..=spec.num_classes)) };
            let mut placed = false;
            for _ in 0..MAX_BOX_RETRIES {
                let r = draw_rect(spec, &mut rng);
                if rects.iter().all(|(o, _)| !o.overlaps(&r)) {
                    rects.push((r, class));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Config(format!(
                    "could not place non-overlapping boxes in image {id} after {MAX_BOX_RETRIES} tries"
                )));
            }
        }

        let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut values = Vec::with_capacity(p * q * spec.channels);
        for r in 0..p {
            for c in 0..q {
                let owner = rects.iter().find(|(rect, _)| rect.contains(r, c)).map(|(_, k)| *k);
                for ch in 0..spec.channels {
                    let signal = owner.map_or(0.0, |k| signatures[k.0 as usize - 1][ch] * spec.class_signal_strength);
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    values.push((signal + n) as f32);
                }
            }
        }
        let features = FeatureMap::new(id.clone(), p, q, spec.channels, values)?;
        let boxes: Vec<LabeledBox> = rects
            .iter()
            .map(|(r, k)| {
                let b = BoundingBox::new(r.c0 as f64 * cell, r.r0 as f64 * cell, r.c1 as f64 * cell, r.r1 as f64 * cell)?;
                Ok(LabeledBox::new(b, *k))
            })
            .collect::<Result<_>>()?;
        let annotation = ImageAnnotation::new(id.clone(), img_h, img_w, boxes)?;

        let (w, h) = (img_w as f64, img_h as f64);
        let mut proposals = Vec::with_capacity(spec.proposals_per_image);
        'outer: for b in &annotation.boxes {
            for _ in 0..spec.jittered_per_box {
                if proposals.len() >= spec.proposals_per_image {
                    break 'outer;
                }
                if let Some(j) = jitter(&b.bbox, w, h, &mut rng) {
                    proposals.push(j);
                }
            }
        }
        while proposals.len() < spec.proposals_per_image {
            proposals.push(random_box(w, h, cell / 2.0, &mut rng));
        }
        images.insert(
            id.clone(),
            ImageRecord { features, annotation, proposals: ProposalSet { image_id: id.clone(), boxes: proposals } },
        );
        ids.push(id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x53504c54);
    ids.shuffle(&mut rng);
    let n_test = (n_images as f64 * spec.test_fraction).round() as usize;
    let test: BTreeSet<ImageId> = ids[..n_test].iter().cloned().collect();
    let split = Split {
        train: images.keys().filter(|k| !test.contains(*k)).cloned().collect(),
        test: test.into_iter().collect(),
    };
    let info = DatasetInfo { classes: (1..=spec.num_classes).map(ClassId).collect(), synthetic: Some(spec.clone()) };
    Ok(Dataset { info, images, split })
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for sub in ["features", "annotations", "proposals"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for (id, rec) in &ds.images {
        write_feature(&dir.join("features").join(format!("{id}.rfm")), &rec.features)?;
        write_annotation(&dir.join("annotations").join(format!("{id}.json")), &rec.annotation)?;
        write_proposals(&dir.join("proposals").join(format!("{id}.json")), &rec.proposals)?;
    }
    write_json_atomic(&dir.join("split.json"), &ds.split)?;
    write_json_atomic(&dir.join("dataset.json"), &ds.info)
}

/// Reads every image named in `split.json`. Images with missing files are
/// collected and reported together.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let info: DatasetInfo = read_json(&dir.join("dataset.json"))?;
    let split: Split = read_json(&dir.join("split.json"))?;
    let mut images = BTreeMap::new();
    let mut missing = Vec::new();
    for id in split.train.iter().chain(&split.test) {
        let paths = [
            dir.join("features").join(format!("{id}.rfm")),
            dir.join("annotations").join(format!("{id}.json")),
            dir.join("proposals").join(format!("{id}.json")),
        ];
        if paths.iter().any(|p| !p.exists()) {
            missing.push(id.to_string());
            continue;
        }
        let features = read_feature(&paths[0])?;
        let annotation = read_annotation(&paths[1])?;
        let proposals = read_proposals(&paths[2])?;
        if features.image_id != *id || annotation.image_id != *id || proposals.image_id != *id {
            return Err(Error::Domain(format!("files for {id} carry a different image id")));
        }
        images.insert(id.clone(), ImageRecord { features, annotation, proposals });
    }
    if !missing.is_empty() {
        return Err(Error::Ingestion(missing));
    }
    Ok(Dataset { info, images, split })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            images_per_class: 5,
            grid: [5, 5],
            channels: 8,
            num_codebooks: 4,
            class_signal_strength: 2.0,
            noise_std: 0.1,
            boxes_per_image: [1, 2],
            max_box_cells: 3,
            cell_pixels: 16,
            proposals_per_image: 20,
            jittered_per_box: 4,
            test_fraction: 0.2,
            seed: 3,
        }
    }

    #[test]
    fn counts_and_split() {
        let ds = generate_dataset(&small_spec()).unwrap();
        assert_eq!(ds.images.len(), 15);
        assert_eq!(ds.split.test.len(), 3);
        assert_eq!(ds.split.train.len(), 12);
        for rec in ds.images.values() {
            assert_eq!(rec.proposals.boxes.len(), 20);
            assert!((1..=2).contains(&rec.annotation.boxes.len()));
            assert_eq!(rec.annotation.image_w, 80);
        }
    }

    #[test]
    fn noise_free_cells_equal_signature() {
        let spec = SyntheticSpec { noise_std: 0.0, ..small_spec() };
        let ds = generate_dataset(&spec).unwrap();
        let sig = class_signatures(&spec);
        for rec in ds.images.values() {
            let b = &rec.annotation.boxes[0];
            let (r, c) = ((b.bbox.y1() / 16.0) as usize, (b.bbox.x1() / 16.0) as usize);
            let cell = rec.features.cell(r, c);
            for (v, s) in cell.iter().zip(&sig[b.class_id.0 as usize - 1]) {
                assert!((*v as f64 - s * 2.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_dataset(&a, &generate_dataset(&small_spec()).unwrap()).unwrap();
        write_dataset(&b, &generate_dataset(&small_spec()).unwrap()).unwrap();
        for sub in ["features/img_00003.rfm", "annotations/img_00007.json", "proposals/img_00011.json", "split.json"] {
            assert_eq!(std::fs::read(a.join(sub)).unwrap(), std::fs::read(b.join(sub)).unwrap());
        }
        let back = load_dataset(&a).unwrap();
        assert_eq!(back, generate_dataset(&small_spec()).unwrap());
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &generate_dataset(&small_spec()).unwrap()).unwrap();
        std::fs::remove_file(dir.path().join("features/img_00002.rfm")).unwrap();
        std::fs::remove_file(dir.path().join("proposals/img_00004.json")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Ingestion(ids)) => assert_eq!(ids.len(), 2),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_dataset(&SyntheticSpec { num_classes: 1, ..small_spec() }).is_err());
        assert!(generate_dataset(&SyntheticSpec { channels: 6, ..small_spec() }).is_err());
        // ten boxes cannot fit on a 1x1 grid
        let crowded = SyntheticSpec { grid: [1, 1], boxes_per_image: [10, 10], ..small_spec() };
        assert!(matches!(generate_dataset(&crowded), Err(Error::Config(_))));
    }
}

//! The plastic detection head: ROI max-pooling over the feature grid, a
//! two-layer ReLU trunk, and per-class classifier and box-regressor outputs
//! trained with momentum SGD.
//!
//! Output column 0 is background; column `k >= 1` is the `k`-th class added.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::io::{put_tensor_f32, ByteReader};
use crate::targets::RoiTarget;
use crate::types::{ClassId, FeatureMap};

pub const HEAD_MAGIC: &[u8; 4] = b"RHD1";

/// Standard deviation of freshly added classifier weights.
pub const NEW_CLASS_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_bins")]
    pub pool_bins: [usize; 2],
}

fn default_hidden() -> usize {
    256
}
fn default_bins() -> [usize; 2] {
    [2, 2]
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: default_hidden(), pool_bins: default_bins() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: default_lr(), momentum: default_momentum(), weight_decay: default_wd() }
    }
}

/// Affine layer `y = W x + b` with `W` of shape `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { w: DMatrix::zeros(rows, cols), b: DVector::zeros(rows) }
    }

    pub fn from_rows(rows: usize, cols: usize, w: &[f64], b: &[f64]) -> Self {
        Self { w: DMatrix::from_row_slice(rows, cols, w), b: DVector::from_column_slice(b) }
    }

    fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        // drawn in row-major order so a row's values do not depend on `rows`
        let w: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self::from_rows(rows, cols, &w, &vec![0.0; rows])
    }

    pub fn rows(&self) -> usize {
        self.w.nrows()
    }

    pub fn cols(&self) -> usize {
        self.w.ncols()
    }

    /// Applies the layer to every column of `x`.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.w * x;
        for mut col in y.column_iter_mut() {
            col += &self.b;
        }
        y
    }

    /// Sets this layer to the gradient `dy x^T`, `sum_cols(dy)`.
    fn set_gradient(&mut self, dy: &DMatrix<f64>, x: &DMatrix<f64>) {
        self.w.gemm(1.0, dy, &x.transpose(), 0.0);
        self.b = dy.column_sum();
    }

    fn push_rows(&mut self, rows: &DMatrix<f64>) {
        let old = self.rows();
        let n = rows.nrows();
        let mut w = std::mem::replace(&mut self.w, DMatrix::zeros(0, 0)).insert_rows(old, n, 0.0);
        w.rows_mut(old, n).copy_from(rows);
        self.w = w;
        self.b = std::mem::replace(&mut self.b, DVector::zeros(0)).insert_rows(old, n, 0.0);
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

/// The four layers of the head. Parameters, gradients and momentum buffers
/// all share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub fc1: Dense,
    pub fc2: Dense,
    pub cls: Dense,
    pub reg: Dense,
}

impl HeadTensors {
    fn layers(&self) -> [&Dense; 4] {
        [&self.fc1, &self.fc2, &self.cls, &self.reg]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 4] {
        [&mut self.fc1, &mut self.fc2, &mut self.cls, &mut self.reg]
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Dense| Dense::zeros(l.rows(), l.cols());
        Self { fc1: z(&self.fc1), fc2: z(&self.fc2), cls: z(&self.cls), reg: z(&self.reg) }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.layers()
            .iter()
            .zip(other.layers())
            .all(|(a, b)| a.rows() == b.rows() && a.cols() == b.cols())
    }

    /// Every value, layer by layer, weights (column-major) before biases.
    pub fn values_mut(&mut self) -> Vec<&mut f64> {
        self.layers_mut().into_iter().flat_map(|l| l.values_mut()).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.layers().into_iter().flat_map(|l| l.values().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub pool_bins: [usize; 2],
    pub channels: usize,
    /// Foreground classes in output-column order (column `i + 1`).
    classes: Vec<ClassId>,
    pub tensors: HeadTensors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub velocity: HeadTensors,
}

impl SgdState {
    pub fn new(config: SgdConfig, params: &HeadParams) -> Self {
        Self { config, velocity: params.tensors.zeros_like() }
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `C + 1` class logits.
    pub scores: Vec<f64>,
    /// `4 (C + 1)` box deltas, four per column.
    pub deltas: Vec<f64>,
}

/// Per-layer values for a batch, one column per region.
struct Activations {
    z1: DMatrix<f64>,
    h1: DMatrix<f64>,
    z2: DMatrix<f64>,
    h2: DMatrix<f64>,
    scores: DMatrix<f64>,
    deltas: DMatrix<f64>,
}

/// Stacks equal-length vectors as the columns of a matrix.
pub fn stack_columns(columns: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let rows = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::Domain("pooled regions differ in length".into()));
    }
    Ok(DMatrix::from_iterator(rows, columns.len(), columns.iter().flatten().copied()))
}

/// Max-pools the grid cells under `bbox` into `bins[0] x bins[1]` cells.
///
/// The box is mapped from image pixels to grid coordinates, each bin covers
/// the grid rows/columns it overlaps, and every bin covers at least one
/// location. Output layout is `(bin_row, bin_col, channel)`.
pub fn roi_pool(
    fmap: &FeatureMap,
    bbox: &BoundingBox,
    image_w: f64,
    image_h: f64,
    bins: [usize; 2],
) -> Result<Vec<f64>> {
    if !(image_w > 0.0 && image_h > 0.0) || bins[0] == 0 || bins[1] == 0 {
        return Err(Error::Domain("roi_pool needs a positive image size and bins".into()));
    }
    let (p, q, d) = (fmap.grid_h(), fmap.grid_w(), fmap.channels());
    let sy = p as f64 / image_h;
    let sx = q as f64 / image_w;
    let spans = |lo: f64, hi: f64, n: usize, limit: usize| -> Vec<(usize, usize)> {
        const EPS: f64 = 1e-9;
        (0..n)
            .map(|i| {
                let a = lo + (hi - lo) * i as f64 / n as f64;
                let b = lo + (hi - lo) * (i + 1) as f64 / n as f64;
                let start = ((a + EPS).floor().max(0.0) as usize).min(limit - 1);
                let end = ((b - EPS).ceil().max(0.0) as usize).clamp(start + 1, limit);
                (start, end)
            })
            .collect()
    };
    let rows = spans(bbox.y1() * sy, bbox.y2() * sy, bins[0], p);
    let cols = spans(bbox.x1() * sx, bbox.x2() * sx, bins[1], q);
    let mut out = Vec::with_capacity(bins[0] * bins[1] * d);
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let base = out.len();
            out.extend(std::iter::repeat_n(f64::NEG_INFINITY, d));
            for y in r0..r1 {
                for x in c0..c1 {
                    for (o, &v) in out[base..].iter_mut().zip(fmap.cell(y, x)) {
                        *o = o.max(v as f64);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

impl HeadParams {
    /// He-initialized trunk, `N(0, 0.01^2)` classifier rows for background and
    /// every initial class, zero regressor.
    pub fn new(cfg: &HeadConfig, channels: usize, classes: &[ClassId], seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || channels == 0 || cfg.pool_bins.contains(&0) {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let mut params = Self {
            pool_bins: cfg.pool_bins,
            channels,
            classes: Vec::new(),
            tensors: HeadTensors {
                fc1: Dense::zeros(0, 0),
                fc2: Dense::zeros(0, 0),
                cls: Dense::zeros(0, 0),
                reg: Dense::zeros(0, 0),
            },
        };
        let input = params.input_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.tensors.fc1 = Dense::normal(cfg.hidden, input, (2.0 / input as f64).sqrt(), &mut rng);
        params.tensors.fc2 = Dense::normal(cfg.hidden, cfg.hidden, (2.0 / cfg.hidden as f64).sqrt(), &mut rng);
        params.tensors.cls = Dense::normal(1, cfg.hidden, NEW_CLASS_STD, &mut rng);
        params.tensors.reg = Dense::zeros(4, cfg.hidden);
        for (i, &c) in classes.iter().enumerate() {
            params.grow(c, seed.wrapping_add(1 + i as u64))?;
        }
        Ok(params)
    }

    pub fn input_len(&self) -> usize {
        self.pool_bins[0] * self.pool_bins[1] * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.tensors.fc2.rows()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn num_outputs(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn column_of(&self, class: ClassId) -> Option<usize> {
        if class.is_background() {
            return Some(0);
        }
        self.classes.iter().position(|&c| c == class).map(|i| i + 1)
    }

    fn grow(&mut self, class: ClassId, seed: u64) -> Result<()> {
        if class.is_background() || self.classes.contains(&class) {
            return Err(Error::Schedule(format!("class {class} already has output units")));
        }
        let h = self.hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, NEW_CLASS_STD).expect("positive std");
        let row = DMatrix::from_fn(1, h, |_, _| dist.sample(&mut rng));
        self.tensors.cls.push_rows(&row);
        self.tensors.reg.push_rows(&DMatrix::zeros(4, h));
        self.classes.push(class);
        Ok(())
    }

    fn activations(&self, x: &DMatrix<f64>) -> Result<Activations> {
        if x.nrows() != self.input_len() {
            return Err(Error::Domain(format!(
                "pooled input has {} values, head expects {}",
                x.nrows(),
                self.input_len()
            )));
        }
        let t = &self.tensors;
        let z1 = t.fc1.apply(x);
        let h1 = z1.map(|v| v.max(0.0));
        let z2 = t.fc2.apply(&h1);
        let h2 = z2.map(|v| v.max(0.0));
        let scores = t.cls.apply(&h2);
        let deltas = t.reg.apply(&h2);
        Ok(Activations { z1, h1, z2, h2, scores, deltas })
    }

    /// Logits `(C + 1) x n` and deltas `4 (C + 1) x n` for the regions in the
    /// columns of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = self.activations(x)?;
        Ok((a.scores, a.deltas))
    }

    pub fn forward(&self, pooled: &[f64]) -> Result<HeadOutput> {
        let (scores, deltas) = self.forward_batch(&DMatrix::from_column_slice(pooled.len(), 1, pooled))?;
        Ok(HeadOutput { scores: scores.as_slice().to_vec(), deltas: deltas.as_slice().to_vec() })
    }

    /// Mean cross-entropy over the batch plus mean smooth-L1 on the matched
    /// class's deltas over foreground targets, with exact gradients.
    pub fn loss_and_grads(&self, batch: &[(Vec<f64>, RoiTarget)]) -> Result<(f64, HeadTensors)> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty training batch".into()));
        }
        let x = DMatrix::from_iterator(
            self.input_len(),
            batch.len(),
            batch.iter().flat_map(|(p, _)| {
                debug_assert_eq!(p.len(), self.input_len());
                p.iter().copied()
            }),
        );
        if batch.iter().any(|(p, _)| p.len() != self.input_len()) {
            return Err(Error::Domain("pooled input length does not match the head".into()));
        }
        let targets: Vec<&RoiTarget> = batch.iter().map(|(_, t)| t).collect();
        self.loss_and_grads_matrix(&x, &targets)
    }

    /// As [`Self::loss_and_grads`] with the pooled regions already stacked as
    /// the columns of `x`.
    pub fn loss_and_grads_matrix(&self, x: &DMatrix<f64>, targets: &[&RoiTarget]) -> Result<(f64, HeadTensors)> {
        if targets.is_empty() || x.ncols() != targets.len() {
            return Err(Error::Precondition("training batch is empty or mismatched".into()));
        }
        let n = targets.len() as f64;
        let n_fg = targets.iter().filter(|t| t.is_foreground()).count();
        let a = self.activations(x)?;
        let mut d_scores = DMatrix::zeros(a.scores.nrows(), a.scores.ncols());
        let mut d_deltas = DMatrix::zeros(a.deltas.nrows(), a.deltas.ncols());
        let mut ce = 0.0;
        let mut reg_loss = 0.0;
        for (j, target) in targets.iter().enumerate() {
            let col = self.column_of(target.class_id).ok_or_else(|| {
                Error::Domain(format!("target class {} has no output units", target.class_id))
            })?;
            let probs = softmax(a.scores.column(j).as_slice());
            ce -= probs[col].max(f64::MIN_POSITIVE).ln();
            for (k, p) in probs.iter().enumerate() {
                d_scores[(k, j)] = (p - if k == col { 1.0 } else { 0.0 }) / n;
            }
            if target.is_foreground() {
                let want = target.deltas.ok_or_else(|| {
                    Error::Domain("foreground target without regression deltas".into())
                })?;
                for k in 0..4 {
                    let (l, g) = smooth_l1(a.deltas[(4 * col + k, j)] - want[k]);
                    reg_loss += l;
                    d_deltas[(4 * col + k, j)] = g / n_fg as f64;
                }
            }
        }

        let t = &self.tensors;
        let mut grads = t.zeros_like();
        grads.cls.set_gradient(&d_scores, &a.h2);
        grads.reg.set_gradient(&d_deltas, &a.h2);
        let mut d_h2 = t.cls.w.tr_mul(&d_scores);
        d_h2.gemm_tr(1.0, &t.reg.w, &d_deltas, 1.0);
        let d_z2 = d_h2.zip_map(&a.z2, |g, z| if z > 0.0 { g } else { 0.0 });
        grads.fc2.set_gradient(&d_z2, &a.h1);
        let d_h1 = t.fc2.w.tr_mul(&d_z2);
        let d_z1 = d_h1.zip_map(&a.z1, |g, z| if z > 0.0 { g } else { 0.0 });
        grads.fc1.set_gradient(&d_z1, x);
        let loss = ce / n + if n_fg > 0 { reg_loss / n_fg as f64 } else { 0.0 };
        Ok((loss, grads))
    }

    /// `v <- momentum v + g + weight_decay w`, then `w <- w - lr v`.
    /// Non-finite gradients are rejected before anything changes.
    pub fn sgd_step(&mut self, sgd: &mut SgdState, grads: &HeadTensors) -> Result<()> {
        if !self.tensors.same_shape(grads) || !self.tensors.same_shape(&sgd.velocity) {
            return Err(Error::Domain("gradient shapes do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let SgdConfig { learning_rate: lr, momentum, weight_decay: wd } = sgd.config;
        for ((p, v), g) in self
            .tensors
            .layers_mut()
            .into_iter()
            .zip(sgd.velocity.layers_mut())
            .zip(grads.layers())
        {
            for ((w, vw), gw) in p.values_mut().zip(v.values_mut()).zip(g.values()) {
                *vw = momentum * *vw + gw + wd * *w;
                *w -= lr * *vw;
            }
        }
        if !self.tensors.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(())
    }

    /// Appends output units for `class`. Existing parameters and momentum are
    /// left bit-identical; the new units start with zero momentum.
    pub fn add_class(&mut self, sgd: &mut SgdState, class: ClassId, seed: u64) -> Result<()> {
        self.grow(class, seed)?;
        let h = self.hidden();
        sgd.velocity.cls.push_rows(&DMatrix::zeros(1, h));
        sgd.velocity.reg.push_rows(&DMatrix::zeros(4, h));
        Ok(())
    }

    /// Class probabilities and per-column deltas for one pooled region.
    pub fn predict(&self, pooled: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.forward(pooled)?;
        Ok((softmax(&out.scores), out.deltas))
    }

    /// Binary checkpoint.
    ///
    /// ```text
    /// "RHD1" | class_count: u32 | class ids: u32 x count | bins: 2 x u32 | channels: u32
    ///        | tensors fc1.w fc1.b fc2.w fc2.b cls.w cls.b reg.w reg.b
    /// ```
    /// Each tensor is a length-prefixed name, `u32` rank, `u32` dims and
    /// little-endian `f32` data, weights row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&c.0.to_le_bytes());
        }
        for v in [self.pool_bins[0], self.pool_bins[1], self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (name, l) in ["fc1", "fc2", "cls", "reg"].iter().zip(self.tensors.layers()) {
            put_tensor_f32(&mut out, &format!("{name}.w"), &[l.rows(), l.cols()], l.w.transpose().as_slice());
            put_tensor_f32(&mut out, &format!("{name}.b"), &[l.rows()], l.b.as_slice());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(HEAD_MAGIC)?;
        let n = r.u32()? as usize;
        let classes: Vec<ClassId> = (0..n).map(|_| r.u32().map(ClassId)).collect::<Result<_>>()?;
        let pool_bins = [r.u32()? as usize, r.u32()? as usize];
        let channels = r.u32()? as usize;
        let mut layers = Vec::with_capacity(4);
        for name in ["fc1", "fc2", "cls", "reg"] {
            let (wd, w) = r.tensor_f32(&format!("{name}.w"))?;
            let (bd, b) = r.tensor_f32(&format!("{name}.b"))?;
            if wd.len() != 2 || bd.len() != 1 || bd[0] != wd[0] {
                return Err(r.error(format!("tensor {name} has inconsistent shape")));
            }
            layers.push(Dense::from_rows(wd[0], wd[1], &w, &b));
        }
        r.expect_end()?;
        let mut it = layers.into_iter();
        let tensors = HeadTensors {
            fc1: it.next().unwrap(),
            fc2: it.next().unwrap(),
            cls: it.next().unwrap(),
            reg: it.next().unwrap(),
        };
        let h = tensors.fc2.rows();
        let consistent = tensors.fc1.cols() == pool_bins[0] * pool_bins[1] * channels
            && tensors.fc2.cols() == tensors.fc1.rows()
            && tensors.cls.cols() == h
            && tensors.reg.cols() == h
            && tensors.cls.rows() == n + 1
            && tensors.reg.rows() == 4 * (n + 1);
        if !consistent {
            return Err(r.error("head tensors disagree with the class count or input size"));
        }
        Ok(Self { pool_bins, channels, classes, tensors })
    }

    /// Ids of every parameter group with its element count, for diagnostics.
    pub fn parameter_counts(&self) -> BTreeMap<&'static str, usize> {
        ["fc1", "fc2", "cls", "reg"]
            .into_iter()
            .zip(self.tensors.layers())
            .map(|(n, l)| (n, l.w.len() + l.b.len()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ImageId;
    use rand::Rng;

    fn map(p: usize, q: usize, d: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        let mut v = Vec::with_capacity(p * q * d);
        for y in 0..p {
            for x in 0..q {
                for c in 0..d {
                    v.push(f(y, x, c));
                }
            }
        }
        FeatureMap::new(ImageId::new("m"), p, q, d, v).unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn full_box_single_bin_is_channel_max() {
        let m = map(3, 4, 2, |y, x, c| (y * 10 + x) as f32 * if c == 0 { 1.0 } else { -1.0 });
        let out = roi_pool(&m, &bx(0.0, 0.0, 40.0, 30.0), 40.0, 30.0, [1, 1]).unwrap();
        assert_eq!(out, vec![23.0, 0.0]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let m = map(5, 5, 3, |_, _, _| 1.5);
        let out = roi_pool(&m, &bx(3.0, 7.0, 41.0, 19.0), 50.0, 50.0, [2, 2]).unwrap();
        assert!(out.iter().all(|&v| v == 1.5));
        assert_eq!(out.len(), 12);
    }

    #[test]
    fn two_by_two_grid_pools_to_identity_layout() {
        let m = map(2, 2, 1, |y, x, _| (1 + y * 2 + x) as f32);
        let out = roi_pool(&m, &bx(0.0, 0.0, 20.0, 20.0), 20.0, 20.0, [2, 2]).unwrap();
        // hand enumeration: bin (i, j) covers exactly grid cell (i, j)
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sub_cell_boxes_still_pool_one_location() {
        let m = map(2, 2, 1, |y, x, _| (1 + y * 2 + x) as f32);
        let out = roi_pool(&m, &bx(11.0, 1.0, 12.0, 2.0), 20.0, 20.0, [2, 2]).unwrap();
        assert_eq!(out, vec![2.0; 4]);
    }

    fn toy_params(classes: &[u32], hidden: usize, seed: u64) -> HeadParams {
        let cfg = HeadConfig { hidden, pool_bins: [1, 1] };
        let cls: Vec<ClassId> = classes.iter().map(|&c| ClassId(c)).collect();
        HeadParams::new(&cfg, 3, &cls, seed).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut p = toy_params(&[1, 2], 4, 0);
        p.tensors = p.tensors.zeros_like();
        let out = p.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(out.scores.iter().all(|&s| s == 0.0));
        let probs = softmax(&out.scores);
        assert!(probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn hand_set_forward_pass() {
        let mut p = toy_params(&[1], 2, 0);
        p.tensors.fc1 = Dense::from_rows(2, 3, &[1.0, 0.0, 0.0, 0.0, -1.0, 0.0], &[0.5, 0.0]);
        p.tensors.fc2 = Dense::from_rows(2, 2, &[1.0, 1.0, 2.0, 0.0], &[0.0, -1.0]);
        p.tensors.cls = Dense::from_rows(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.25]);
        p.tensors.reg = Dense::zeros(8, 2);
        // x = (2, 3, 4): z1 = (2.5, -3) -> h1 = (2.5, 0); z2 = (2.5, 4) -> h2 = (2.5, 4)
        let out = p.forward(&[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out.scores, vec![2.5, 4.25]);
        assert_eq!(out.deltas, vec![0.0; 8]);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let p = toy_params(&[1], 4, 0);
        assert!(matches!(p.forward(&[0.0; 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn class_growth_preserves_existing_outputs() {
        let mut p = toy_params(&(1..=10).collect::<Vec<_>>(), 8, 3);
        let mut sgd = SgdState::new(SgdConfig::default(), &p);
        let x = [0.3, -1.2, 2.0];
        let before = p.forward(&x).unwrap();
        assert_eq!(p.num_outputs(), 11);
        p.add_class(&mut sgd, ClassId(11), 99).unwrap();
        assert_eq!(p.num_outputs(), 12);
        assert_eq!(p.tensors.cls.rows(), 12);
        assert_eq!(p.tensors.reg.rows(), 48);
        let after = p.forward(&x).unwrap();
        assert_eq!(&after.scores[..11], &before.scores[..]);
        assert_eq!(&after.deltas[..44], &before.deltas[..]);
        assert_eq!(sgd.velocity.cls.rows(), 12);
        assert!(p.add_class(&mut sgd, ClassId(11), 1).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = toy_params(&[1], 2, 0);
        let mut sgd = SgdState::new(SgdConfig { learning_rate: 0.001, momentum: 0.0, weight_decay: 0.0 }, &p);
        let before = p.clone();
        p.sgd_step(&mut sgd, &p.tensors.zeros_like()).unwrap();
        assert_eq!(p, before);

        p.tensors.fc1.w[0] = 1.0;
        let mut g = p.tensors.zeros_like();
        g.fc1.w[0] = 1.0;
        p.sgd_step(&mut sgd, &g).unwrap();
        assert!((p.tensors.fc1.w[0] - 0.999).abs() < 1e-15);

        let mut sgd = SgdState::new(SgdConfig { learning_rate: 0.001, momentum: 0.9, weight_decay: 0.0 }, &p);
        p.sgd_step(&mut sgd, &g).unwrap();
        p.sgd_step(&mut sgd, &g).unwrap();
        assert!((sgd.velocity.fc1.w[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut p = toy_params(&[1], 2, 0);
        let mut sgd = SgdState::new(SgdConfig::default(), &p);
        let before = p.clone();
        let mut g = p.tensors.zeros_like();
        g.cls.b[0] = f64::NAN;
        assert!(matches!(p.sgd_step(&mut sgd, &g), Err(Error::NonFinite(_))));
        assert_eq!(p, before);
    }

    fn target(class: u32, deltas: Option<[f64; 4]>) -> RoiTarget {
        RoiTarget { bbox: bx(0.0, 0.0, 1.0, 1.0), class_id: ClassId(class), deltas, matched_gt: None }
    }

    #[test]
    fn background_batch_has_zero_regressor_gradient() {
        let p = toy_params(&[1, 2], 6, 1);
        let batch = vec![(vec![1.0, 0.5, -0.5], target(0, None)), (vec![0.1, 0.2, 0.3], target(0, None))];
        let (loss, g) = p.loss_and_grads(&batch).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(g.reg.values().all(|&v| v == 0.0));
    }

    #[test]
    fn confident_correct_prediction_has_small_loss() {
        let mut p = toy_params(&[1], 2, 0);
        p.tensors.cls.b = DVector::from_vec(vec![0.0, 40.0]);
        let (loss, _) = p.loss_and_grads(&[(vec![0.0; 3], target(1, Some([0.0; 4])))]).unwrap();
        assert!(loss.is_finite() && loss < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_keeps_shapes() {
        let p = toy_params(&[3, 5], 4, 2);
        let back = HeadParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back.classes(), p.classes());
        assert_eq!(back.tensors.reg.rows(), 12);
        for (a, b) in back.tensors.fc1.w.iter().zip(&p.tensors.fc1.w) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = p.to_bytes();
        assert!(HeadParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut p = toy_params(&[1, 2], 8, 4);
            let mut sgd = SgdState::new(SgdConfig::default(), &p);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..20 {
                let batch: Vec<_> = (0..4)
                    .map(|i| {
                        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                        (x, target(i % 3, if i % 3 == 0 { None } else { Some([0.1, 0.0, -0.1, 0.2]) }))
                    })
                    .collect();
                let (_, g) = p.loss_and_grads(&batch).unwrap();
                p.sgd_step(&mut sgd, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}

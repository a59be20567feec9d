//! Streaming linear discriminant analysis with per-class foreground and
//! background means, paired with a closed-form streaming linear regressor
//! for box deltas.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, BoundingBox};
use crate::io::{put_tensor_f64, ByteReader};
use crate::targets::{decode_deltas, RoiTarget};
use crate::types::{ClassId, Detection, ImageAnnotation};

pub const SLDA_MAGIC: &[u8; 4] = b"RSL1";

pub const SLDA_SHRINKAGE: f64 = 1e-2;
pub const REGRESS_SHRINKAGE: f64 = 1e-4;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SldaLabel {
    Class(ClassId),
    /// The background mean kept alongside `ClassId`'s foreground mean.
    Background(ClassId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanSlot {
    pub mean: DVector<f64>,
    pub count: u64,
}

impl MeanSlot {
    fn zeros(dim: usize) -> Self {
        Self { mean: DVector::zeros(dim), count: 0 }
    }
}

pub fn l2_normalize(x: &mut [f64]) -> Result<()> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Precondition("cannot L2-normalize a zero or non-finite vector".into()));
    }
    x.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

/// `m <- m + alpha * u v^T`.
fn rank_one_update(m: &mut DMatrix<f64>, alpha: f64, u: &[f64], v: &[f64]) {
    let rows = m.nrows();
    for (col, &vj) in m.as_mut_slice().chunks_exact_mut(rows).zip(v) {
        let s = alpha * vj;
        if s == 0.0 {
            continue;
        }
        for (x, &ui) in col.iter_mut().zip(u) {
            *x += s * ui;
        }
    }
}

fn shrunk_cholesky(cov: &DMatrix<f64>, eps: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let d = cov.nrows();
    let a = cov * (1.0 - eps) + DMatrix::<f64>::identity(d, d) * eps;
    nalgebra::Cholesky::new(a).ok_or_else(|| Error::NonFinite("shrunk covariance is not positive definite".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SldaModel {
    dim: usize,
    pub shrinkage: f64,
    pub cov_frozen: bool,
    classes: Vec<ClassId>,
    means: BTreeMap<SldaLabel, MeanSlot>,
    cov: DMatrix<f64>,
    cov_count: u64,
}

impl SldaModel {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            shrinkage: SLDA_SHRINKAGE,
            cov_frozen: false,
            classes: Vec::new(),
            means: BTreeMap::new(),
            cov: DMatrix::zeros(dim, dim),
            cov_count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Classes in the order their slots were added.
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cov_count(&self) -> u64 {
        self.cov_count
    }

    pub fn slot(&self, label: SldaLabel) -> Option<&MeanSlot> {
        self.means.get(&label)
    }

    /// Opens a foreground and a background mean slot for `class`.
    pub fn add_class(&mut self, class: ClassId) -> Result<()> {
        if class.is_background() || self.classes.contains(&class) {
            return Err(Error::Schedule(format!("class {class} already has mean slots")));
        }
        self.classes.push(class);
        self.means.insert(SldaLabel::Class(class), MeanSlot::zeros(self.dim));
        self.means.insert(SldaLabel::Background(class), MeanSlot::zeros(self.dim));
        Ok(())
    }

    /// Updates the running mean for `label` and, when allowed, the shared
    /// covariance as the pooled within-class scatter over all covariance
    /// updates so far.
    pub fn fit(&mut self, x: &[f64], label: SldaLabel, update_cov: bool) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Domain(format!("feature has {} dims, model expects {}", x.len(), self.dim)));
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Precondition(format!("feature norm {norm} is not 1")));
        }
        let slot = self
            .means
            .get_mut(&label)
            .ok_or_else(|| Error::Schedule(format!("no mean slot for {label:?}")))?;
        let c = slot.count as f64;
        let dx: Vec<f64> = x.iter().zip(slot.mean.iter()).map(|(a, m)| a - m).collect();
        if update_cov && !self.cov_frozen {
            self.cov_count += 1;
            let k = self.cov_count as f64;
            self.cov *= 1.0 - 1.0 / k;
            rank_one_update(&mut self.cov, c / (c + 1.0) / k, &dx, &dx);
        }
        slot.count += 1;
        let n = slot.count as f64;
        for (m, d) in slot.mean.iter_mut().zip(&dx) {
            *m += d / n;
        }
        Ok(())
    }

    /// Precomputes `Λ μ_k` and `-½ μ_k Λ μ_k` for every fitted mean.
    pub fn predictor(&self) -> Result<SldaPredictor> {
        let fitted: Vec<(SldaLabel, &MeanSlot)> =
            self.means.iter().filter(|(_, s)| s.count > 0).map(|(l, s)| (*l, s)).collect();
        let classes: Vec<ClassId> = self
            .classes
            .iter()
            .copied()
            .filter(|c| self.means[&SldaLabel::Class(*c)].count > 0)
            .collect();
        if classes.is_empty() {
            return Err(Error::ModelEmpty("no class mean has been fitted".into()));
        }
        let chol = shrunk_cholesky(&self.cov, self.shrinkage)?;
        let means = DMatrix::from_columns(&fitted.iter().map(|(_, s)| s.mean.clone()).collect::<Vec<_>>());
        let weights = chol.solve(&means);
        let biases = fitted
            .iter()
            .enumerate()
            .map(|(j, (_, s))| -0.5 * s.mean.dot(&weights.column(j)))
            .collect();
        Ok(SldaPredictor { labels: fitted.iter().map(|(l, _)| *l).collect(), classes, weights, biases })
    }

    pub fn to_bytes_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.shrinkage.to_le_bytes());
        out.push(self.cov_frozen as u8);
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&c.0.to_le_bytes());
            for label in [SldaLabel::Class(*c), SldaLabel::Background(*c)] {
                let s = &self.means[&label];
                out.extend_from_slice(&s.count.to_le_bytes());
                put_tensor_f64(out, "mean", &[self.dim], s.mean.as_slice());
            }
        }
        out.extend_from_slice(&self.cov_count.to_le_bytes());
        put_tensor_f64(out, "cov", &[self.dim, self.dim], self.cov.as_slice());
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let dim = r.u32()? as usize;
        let mut model = Self::new(dim)?;
        model.shrinkage = r.f64()?;
        model.cov_frozen = r.u8()? != 0;
        let n = r.u32()?;
        for _ in 0..n {
            let class = ClassId(r.u32()?);
            model.add_class(class).map_err(|e| r.error(e.to_string()))?;
            for label in [SldaLabel::Class(class), SldaLabel::Background(class)] {
                let count = r.u64()?;
                let (dims, data) = r.tensor_f64("mean")?;
                if dims != [dim] {
                    return Err(r.error("mean has the wrong dimension"));
                }
                model.means.insert(label, MeanSlot { mean: DVector::from_vec(data), count });
            }
        }
        model.cov_count = r.u64()?;
        let (dims, data) = r.tensor_f64("cov")?;
        if dims != [dim, dim] {
            return Err(r.error("covariance has the wrong shape"));
        }
        model.cov = DMatrix::from_vec(dim, dim, data);
        Ok(model)
    }
}

/// Immutable scoring snapshot of an [`SldaModel`].
#[derive(Debug, Clone)]
pub struct SldaPredictor {
    labels: Vec<SldaLabel>,
    classes: Vec<ClassId>,
    weights: DMatrix<f64>,
    biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SldaScores {
    /// Discriminant score of every fitted foreground class.
    pub classes: Vec<(ClassId, f64)>,
    /// Best score over the fitted background means, if any.
    pub background: Option<f64>,
}

impl SldaScores {
    /// Winning label; `None` means background.
    pub fn label(&self) -> Option<ClassId> {
        let (best_class, best) = self
            .classes
            .iter()
            .copied()
            .fold(None::<(ClassId, f64)>, |acc, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            })?;
        match self.background {
            Some(bg) if bg > best => None,
            _ => Some(best_class),
        }
    }

    /// Softmax over the foreground scores and the background score.
    pub fn probabilities(&self) -> (Vec<(ClassId, f64)>, f64) {
        let all: Vec<f64> = self.classes.iter().map(|c| c.1).chain(self.background).collect();
        let m = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = all.iter().map(|v| (v - m).exp()).sum();
        let fg = self.classes.iter().map(|&(c, s)| (c, (s - m).exp() / z)).collect();
        let bg = self.background.map_or(0.0, |s| (s - m).exp() / z);
        (fg, bg)
    }
}

impl SldaPredictor {
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn predict(&self, x: &[f64]) -> Result<SldaScores> {
        if x.len() != self.weights.nrows() {
            return Err(Error::Domain(format!(
                "feature has {} dims, model expects {}",
                x.len(),
                self.weights.nrows()
            )));
        }
        let mut classes = Vec::new();
        let mut background: Option<f64> = None;
        for (j, label) in self.labels.iter().enumerate() {
            let g = self.weights.column(j).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[j];
            match label {
                SldaLabel::Class(c) => classes.push((*c, g)),
                SldaLabel::Background(_) => background = Some(background.map_or(g, |b| b.max(g))),
            }
        }
        let order = |c: &ClassId| self.classes.iter().position(|k| k == c);
        classes.sort_by_key(|(c, _)| order(c));
        Ok(SldaScores { classes, background })
    }
}

/// Streaming estimate of the joint first and second moments of `(x, y)`,
/// solved in closed form for a linear map `x -> y`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRegressModel {
    pub shrinkage: f64,
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub sigma_x: DMatrix<f64>,
    pub sigma_xy: DMatrix<f64>,
    pub n: u64,
}

impl StreamRegressModel {
    pub fn new(dim: usize, outputs: usize) -> Result<Self> {
        if dim == 0 || outputs == 0 {
            return Err(Error::Config("regressor dimensions must be positive".into()));
        }
        Ok(Self {
            shrinkage: REGRESS_SHRINKAGE,
            mu_x: DVector::zeros(dim),
            mu_y: DVector::zeros(outputs),
            sigma_x: DMatrix::zeros(dim, dim),
            sigma_xy: DMatrix::zeros(dim, outputs),
            n: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu_x.len()
    }

    pub fn outputs(&self) -> usize {
        self.mu_y.len()
    }

    /// Extends the target space with zero-valued coordinates. Every earlier
    /// sample had zero in those coordinates, so the statistics stay exact.
    pub fn grow_outputs(&mut self, outputs: usize) {
        let old = self.outputs();
        if outputs <= old {
            return;
        }
        self.mu_y = self.mu_y.clone().resize_vertically(outputs, 0.0);
        self.sigma_xy = self.sigma_xy.clone().resize_horizontally(outputs, 0.0);
    }

    /// Count, then centered residuals against the old means, then the
    /// covariances, then the means.
    pub fn update(&mut self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.dim() || y.len() != self.outputs() {
            return Err(Error::Domain(format!(
                "regression sample is ({}, {}), model expects ({}, {})",
                x.len(),
                y.len(),
                self.dim(),
                self.outputs()
            )));
        }
        self.n += 1;
        let n = self.n as f64;
        let dx: Vec<f64> = x.iter().zip(self.mu_x.iter()).map(|(a, m)| a - m).collect();
        let dy: Vec<f64> = y.iter().zip(self.mu_y.iter()).map(|(a, m)| a - m).collect();
        let keep = 1.0 - 1.0 / n;
        let w = (n - 1.0) / (n * n);
        self.sigma_x *= keep;
        rank_one_update(&mut self.sigma_x, w, &dx, &dx);
        self.sigma_xy *= keep;
        rank_one_update(&mut self.sigma_xy, w, &dx, &dy);
        for (m, d) in self.mu_x.iter_mut().zip(&dx) {
            *m += d / n;
        }
        for (m, d) in self.mu_y.iter_mut().zip(&dy) {
            *m += d / n;
        }
        Ok(())
    }

    pub fn predictor(&self) -> Result<RegressPredictor> {
        if self.n == 0 {
            return Err(Error::ModelEmpty("regressor has seen no samples".into()));
        }
        let chol = shrunk_cholesky(&self.sigma_x, self.shrinkage)?;
        let a = chol.solve(&self.sigma_xy);
        let b = &self.mu_y - a.tr_mul(&self.mu_x);
        Ok(RegressPredictor { a, b })
    }

    fn write(&self, out: &mut Vec<u8>) {
        let (d, m) = (self.dim(), self.outputs());
        out.extend_from_slice(&self.shrinkage.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        put_tensor_f64(out, "mu_x", &[d], self.mu_x.as_slice());
        put_tensor_f64(out, "mu_y", &[m], self.mu_y.as_slice());
        put_tensor_f64(out, "sigma_x", &[d, d], self.sigma_x.as_slice());
        put_tensor_f64(out, "sigma_xy", &[d, m], self.sigma_xy.as_slice());
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let shrinkage = r.f64()?;
        let n = r.u64()?;
        let (dx, mu_x) = r.tensor_f64("mu_x")?;
        let (dy, mu_y) = r.tensor_f64("mu_y")?;
        let (ds, sigma_x) = r.tensor_f64("sigma_x")?;
        let (dxy, sigma_xy) = r.tensor_f64("sigma_xy")?;
        let (d, m) = (dx.first().copied().unwrap_or(0), dy.first().copied().unwrap_or(0));
        if dx.len() != 1 || dy.len() != 1 || ds != [d, d] || dxy != [d, m] {
            return Err(r.error("regressor tensors have inconsistent shapes"));
        }
        Ok(Self {
            shrinkage,
            n,
            mu_x: DVector::from_vec(mu_x),
            mu_y: DVector::from_vec(mu_y),
            sigma_x: DMatrix::from_vec(d, d, sigma_x),
            sigma_xy: DMatrix::from_vec(d, m, sigma_xy),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RegressPredictor {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl RegressPredictor {
    /// `x A + b`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.a.nrows() {
            return Err(Error::Domain(format!("feature has {} dims, regressor expects {}", x.len(), self.a.nrows())));
        }
        Ok(self
            .a
            .column_iter()
            .zip(self.b.iter())
            .map(|(col, b)| col.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect())
    }
}

/// One proposal's contribution to an image update.
#[derive(Debug, Clone)]
pub struct ProposalSample {
    pub features: Vec<f64>,
    pub target: RoiTarget,
    /// Class whose background mean absorbs this proposal if it is background.
    pub background_of: Option<ClassId>,
}

/// Class of the visible ground-truth box overlapping `proposal` the most,
/// earliest box on ties.
pub fn nearest_visible_class(
    proposal: &BoundingBox,
    ann: &ImageAnnotation,
    visible: &std::collections::BTreeSet<ClassId>,
) -> Option<ClassId> {
    ann.boxes
        .iter()
        .filter(|b| visible.contains(&b.class_id))
        .fold(None::<(ClassId, f64)>, |acc, b| {
            let v = iou(proposal, &b.bbox);
            match acc {
                Some(a) if a.1 >= v => Some(a),
                _ => Some((b.class_id, v)),
            }
        })
        .map(|(c, _)| c)
}

/// The classifier/regressor pair trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct SldaRegress {
    pub slda: SldaModel,
    pub regress: StreamRegressModel,
}

impl SldaRegress {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self { slda: SldaModel::new(dim)?, regress: StreamRegressModel::new(dim, 4)? })
    }

    /// Regression block of `class`: 0 for background, `i + 1` for the
    /// `i`-th class added.
    pub fn column_of(&self, class: ClassId) -> Option<usize> {
        if class.is_background() {
            return Some(0);
        }
        self.slda.classes.iter().position(|&c| c == class).map(|i| i + 1)
    }

    pub fn add_class(&mut self, class: ClassId) -> Result<()> {
        self.slda.add_class(class)?;
        self.regress.grow_outputs(4 * (self.slda.classes.len() + 1));
        Ok(())
    }

    /// One image of the incremental procedure. With the covariance frozen,
    /// every proposal updates the regressor and background proposals update
    /// their background mean; the covariance is then unfrozen and each
    /// ground-truth box updates its class mean and the covariance.
    /// Features are L2-normalized here.
    pub fn update_image(&mut self, proposals: &[ProposalSample], gts: &[(Vec<f64>, ClassId)]) -> Result<()> {
        self.slda.cov_frozen = true;
        let mut y = vec![0.0; self.regress.outputs()];
        for p in proposals {
            let mut x = p.features.clone();
            l2_normalize(&mut x)?;
            if !p.target.is_foreground() {
                if let Some(c) = p.background_of {
                    self.slda.fit(&x, SldaLabel::Background(c), false)?;
                }
            }
            y.iter_mut().for_each(|v| *v = 0.0);
            if let (Some(d), true) = (p.target.deltas, p.target.is_foreground()) {
                let col = self
                    .column_of(p.target.class_id)
                    .ok_or_else(|| Error::Schedule(format!("class {} has no slots", p.target.class_id)))?;
                y[4 * col..4 * col + 4].copy_from_slice(&d);
            }
            self.regress.update(&x, &y)?;
        }
        self.slda.cov_frozen = false;
        for (f, c) in gts {
            let mut x = f.clone();
            l2_normalize(&mut x)?;
            self.slda.fit(&x, SldaLabel::Class(*c), true)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<SldaSnapshot> {
        Ok(SldaSnapshot {
            slda: self.slda.predictor()?,
            regress: self.regress.predictor()?,
            columns: self.slda.classes.clone(),
        })
    }

    /// Binary checkpoint: `"RSL1"`, the classifier, then the regressor, all
    /// matrices as named `f64` tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = SLDA_MAGIC.to_vec();
        self.slda.to_bytes_into(&mut out);
        self.regress.write(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(SLDA_MAGIC)?;
        let slda = SldaModel::read(&mut r)?;
        let regress = StreamRegressModel::read(&mut r)?;
        r.expect_end()?;
        if regress.dim() != slda.dim || regress.outputs() != 4 * (slda.classes.len() + 1) {
            return Err(r.error("regressor shape disagrees with the classifier"));
        }
        Ok(Self { slda, regress })
    }
}

/// Immutable inference snapshot.
#[derive(Debug, Clone)]
pub struct SldaSnapshot {
    pub slda: SldaPredictor,
    pub regress: RegressPredictor,
    columns: Vec<ClassId>,
}

impl SldaSnapshot {
    /// Classifies each proposal, drops background winners, and moves the
    /// rest by the winning class's regressed deltas. Scores are the softmax
    /// of the discriminants.
    pub fn detect(
        &self,
        features: &[Vec<f64>],
        proposals: &[BoundingBox],
        image_w: f64,
        image_h: f64,
    ) -> Result<Vec<Detection>> {
        if features.len() != proposals.len() {
            return Err(Error::Domain("one feature vector is needed per proposal".into()));
        }
        let mut out = Vec::new();
        for (f, p) in features.iter().zip(proposals) {
            let mut x = f.clone();
            l2_normalize(&mut x)?;
            let scores = self.slda.predict(&x)?;
            let Some(class) = scores.label() else { continue };
            let (probs, _) = scores.probabilities();
            let score = probs.iter().find(|(c, _)| *c == class).map_or(0.0, |p| p.1);
            let col = self.columns.iter().position(|&c| c == class).map(|i| i + 1).unwrap_or(0);
            let r = self.regress.predict(&x)?;
            let d = [r[4 * col], r[4 * col + 1], r[4 * col + 2], r[4 * col + 3]];
            let Ok(moved) = decode_deltas(p, &d) else { continue };
            let Ok(clipped) = clip_box(&moved, image_w, image_h) else { continue };
            out.push(Detection::new(clipped, class, score.clamp(0.0, 1.0))?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn first_and_second_sample_means() {
        let mut m = SldaModel::new(3).unwrap();
        m.add_class(ClassId(1)).unwrap();
        let u = unit(3, 0);
        let v = unit(3, 1);
        m.fit(&u, SldaLabel::Class(ClassId(1)), true).unwrap();
        assert_eq!(m.slot(SldaLabel::Class(ClassId(1))).unwrap().mean.as_slice(), &u[..]);
        m.fit(&v, SldaLabel::Class(ClassId(1)), true).unwrap();
        assert_eq!(m.slot(SldaLabel::Class(ClassId(1))).unwrap().mean.as_slice(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn fit_rejects_unnormalized_and_unknown() {
        let mut m = SldaModel::new(2).unwrap();
        m.add_class(ClassId(1)).unwrap();
        assert!(matches!(m.fit(&[1.0, 1.0], SldaLabel::Class(ClassId(1)), true), Err(Error::Precondition(_))));
        assert!(matches!(m.fit(&[1.0, 0.0], SldaLabel::Class(ClassId(2)), true), Err(Error::Schedule(_))));
        assert!(matches!(m.predictor(), Err(Error::ModelEmpty(_))));
    }

    #[test]
    fn frozen_covariance_is_untouched() {
        let mut m = SldaModel::new(2).unwrap();
        m.add_class(ClassId(1)).unwrap();
        m.fit(&[1.0, 0.0], SldaLabel::Class(ClassId(1)), true).unwrap();
        m.fit(&[0.0, 1.0], SldaLabel::Class(ClassId(1)), true).unwrap();
        let before = m.covariance().clone();
        m.cov_frozen = true;
        for i in 0..50 {
            let a = i as f64 * 0.1;
            m.fit(&[a.cos(), a.sin()], SldaLabel::Class(ClassId(1)), true).unwrap();
        }
        assert_eq!(m.covariance(), &before);
    }

    #[test]
    fn exact_mean_wins_under_identity_covariance() {
        let mut m = SldaModel::new(3).unwrap();
        for c in 1..=3 {
            m.add_class(ClassId(c)).unwrap();
            m.fit(&unit(3, c as usize - 1), SldaLabel::Class(ClassId(c)), false).unwrap();
        }
        let p = m.predictor().unwrap();
        let s = p.predict(&unit(3, 1)).unwrap();
        assert_eq!(s.label(), Some(ClassId(2)));
        assert!(s.background.is_none());
    }

    #[test]
    fn closest_background_mean_wins() {
        let mut m = SldaModel::new(3).unwrap();
        m.add_class(ClassId(1)).unwrap();
        m.add_class(ClassId(2)).unwrap();
        m.fit(&unit(3, 0), SldaLabel::Class(ClassId(1)), false).unwrap();
        m.fit(&unit(3, 1), SldaLabel::Class(ClassId(2)), false).unwrap();
        m.fit(&unit(3, 2), SldaLabel::Background(ClassId(1)), false).unwrap();
        let s = m.predictor().unwrap().predict(&unit(3, 2)).unwrap();
        assert_eq!(s.label(), None);
        let bg = s.background.unwrap();
        assert!(s.classes.iter().all(|&(_, g)| bg > g));
    }

    #[test]
    fn regress_first_update_sets_means() {
        let mut r = StreamRegressModel::new(2, 1).unwrap();
        r.update(&[0.6, 0.8], &[2.0]).unwrap();
        assert_eq!(r.mu_x.as_slice(), &[0.6, 0.8]);
        assert_eq!(r.mu_y.as_slice(), &[2.0]);
        assert!(r.sigma_x.iter().all(|&v| v == 0.0));
        assert!(matches!(r.update(&[1.0], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(StreamRegressModel::new(2, 1).unwrap().predictor(), Err(Error::ModelEmpty(_))));
    }

    #[test]
    fn prediction_at_input_mean_is_output_mean() {
        let mut r = StreamRegressModel::new(3, 2).unwrap();
        let xs = [[0.3, -0.1, 0.9], [0.5, 0.2, -0.4], [-0.7, 0.1, 0.2], [0.0, 0.6, 0.1]];
        for (i, x) in xs.iter().enumerate() {
            r.update(x, &[i as f64, 1.0 - i as f64]).unwrap();
        }
        let p = r.predictor().unwrap();
        let out = p.predict(r.mu_x.as_slice()).unwrap();
        for (o, m) in out.iter().zip(r.mu_y.iter()) {
            assert!((o - m).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_reflects_later_updates() {
        let mut r = StreamRegressModel::new(2, 1).unwrap();
        r.update(&[1.0, 0.0], &[1.0]).unwrap();
        r.update(&[0.0, 1.0], &[0.0]).unwrap();
        let before = r.predictor().unwrap().predict(&[1.0, 1.0]).unwrap();
        r.update(&[1.0, 1.0], &[5.0]).unwrap();
        let after = r.predictor().unwrap().predict(&[1.0, 1.0]).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn output_growth_is_zero_extension() {
        let mut r = StreamRegressModel::new(2, 4).unwrap();
        r.update(&[1.0, 0.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        r.update(&[0.0, 1.0], &[0.0; 4]).unwrap();
        let mut grown = r.clone();
        grown.grow_outputs(8);
        assert_eq!(grown.outputs(), 8);
        assert_eq!(&grown.mu_y.as_slice()[..4], r.mu_y.as_slice());
        assert!(grown.mu_y.as_slice()[4..].iter().all(|&v| v == 0.0));
        assert_eq!(grown.sigma_xy.columns(0, 4), r.sigma_xy.columns(0, 4));
    }

    fn fitted_pair() -> SldaRegress {
        let mut m = SldaRegress::new(4).unwrap();
        m.add_class(ClassId(1)).unwrap();
        m.add_class(ClassId(2)).unwrap();
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let fg = |c: u32| RoiTarget { bbox: b, class_id: ClassId(c), deltas: Some([0.0; 4]), matched_gt: Some(0) };
        let bg = RoiTarget { bbox: b, class_id: ClassId::BACKGROUND, deltas: None, matched_gt: None };
        let props = vec![
            ProposalSample { features: unit(4, 0), target: fg(1), background_of: Some(ClassId(1)) },
            ProposalSample { features: unit(4, 1), target: fg(2), background_of: Some(ClassId(2)) },
            ProposalSample { features: unit(4, 3), target: bg, background_of: Some(ClassId(1)) },
        ];
        let gts = vec![(unit(4, 0), ClassId(1)), (unit(4, 1), ClassId(2))];
        m.update_image(&props, &gts).unwrap();
        m
    }

    #[test]
    fn detection_at_class_mean_with_zero_deltas_keeps_the_box() {
        let m = fitted_pair();
        let snap = m.snapshot().unwrap();
        let p = BoundingBox::new(2.0, 3.0, 8.0, 9.0).unwrap();
        let dets = snap.detect(&[unit(4, 0), unit(4, 3)], &[p, p], 20.0, 20.0).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, ClassId(1));
        for (a, b) in dets[0].bbox.to_array().iter().zip(p.to_array()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(dets[0].score > 0.3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = fitted_pair();
        let back = SldaRegress::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let bytes = m.to_bytes();
        assert!(SldaRegress::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}

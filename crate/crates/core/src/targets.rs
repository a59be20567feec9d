//! Training targets for proposals: foreground/background labels, per-image
//! mini-batch sampling and the center/size box-delta parameterization.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::io::ProposalSet;
use crate::types::{ClassId, ImageAnnotation};

/// Largest accepted log-scale delta; `exp` of anything bigger is treated as
/// a diverged prediction rather than a box.
pub const MAX_LOG_SCALE: f64 = 9.21; // ~ln(1e4)

pub type Deltas = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiTarget {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// `ClassId::BACKGROUND` for background proposals.
    pub class_id: ClassId,
    pub deltas: Option<Deltas>,
    pub matched_gt: Option<usize>,
}

impl RoiTarget {
    pub fn is_foreground(&self) -> bool {
        !self.class_id.is_background()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_pos_frac")]
    pub pos_frac: f64,
    #[serde(default = "default_iou_fg")]
    pub iou_fg: f64,
}

fn default_batch() -> usize {
    64
}
fn default_pos_frac() -> f64 {
    0.25
}
fn default_iou_fg() -> f64 {
    0.5
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { batch: default_batch(), pos_frac: default_pos_frac(), iou_fg: default_iou_fg() }
    }
}

pub fn encode_deltas(proposal: &BoundingBox, gt: &BoundingBox) -> Result<Deltas> {
    let (pw, ph) = (proposal.width(), proposal.height());
    if !(pw > 0.0 && ph > 0.0) {
        return Err(Error::Domain("proposal has zero size".into()));
    }
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    Ok([
        (gx - px) / pw,
        (gy - py) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ])
}

pub fn decode_deltas(proposal: &BoundingBox, d: &Deltas) -> Result<BoundingBox> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite deltas {d:?}")));
    }
    if d[2] > MAX_LOG_SCALE || d[3] > MAX_LOG_SCALE {
        return Err(Error::EmptyBox(format!("log-scale deltas {d:?} overflow")));
    }
    let (pw, ph) = (proposal.width(), proposal.height());
    let (px, py) = proposal.center();
    BoundingBox::from_center(px + d[0] * pw, py + d[1] * ph, pw * d[2].exp(), ph * d[3].exp())
}

/// Matches each proposal to its highest-IoU visible ground-truth box. IoU
/// strictly above `iou_fg` makes the proposal foreground.
pub fn label_proposals(
    proposals: &ProposalSet,
    gt: &ImageAnnotation,
    iou_fg: f64,
    visible: &BTreeSet<ClassId>,
) -> Result<Vec<RoiTarget>> {
    if proposals.image_id != gt.image_id {
        return Err(Error::Domain(format!(
            "proposals for {} labeled with annotation for {}",
            proposals.image_id, gt.image_id
        )));
    }
    let candidates: Vec<(usize, &BoundingBox, ClassId)> = gt
        .boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| visible.contains(&b.class_id))
        .map(|(i, b)| (i, &b.bbox, b.class_id))
        .collect();
    proposals
        .boxes
        .iter()
        .map(|p| {
            let best = candidates
                .iter()
                .map(|&(i, g, c)| (i, g, c, iou(p, g)))
                .fold(None::<(usize, &BoundingBox, ClassId, f64)>, |acc, cur| match acc {
                    Some(a) if a.3 >= cur.3 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((i, g, c, v)) if v > iou_fg => Ok(RoiTarget {
                    bbox: *p,
                    class_id: c,
                    deltas: Some(encode_deltas(p, g)?),
                    matched_gt: Some(i),
                }),
                _ => Ok(RoiTarget { bbox: *p, class_id: ClassId::BACKGROUND, deltas: None, matched_gt: None }),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub targets: Vec<RoiTarget>,
    pub positives: usize,
    /// Set when the requested batch size or positive quota could not be met.
    pub degenerate: bool,
}

/// Draws `min(batch, |targets|)` targets with `ceil(pos_frac * batch)`
/// positives when available. Missing positives are replaced by backgrounds
/// and missing backgrounds by further positives.
pub fn sample_minibatch(targets: &[RoiTarget], cfg: &TargetConfig, seed: u64) -> MiniBatch {
    let (pos, neg): (Vec<&RoiTarget>, Vec<&RoiTarget>) = targets.iter().partition(|t| t.is_foreground());
    let size = cfg.batch.min(targets.len());
    let quota = ((cfg.pos_frac * cfg.batch as f64).ceil() as usize).min(size);
    let n_neg = (size - quota.min(pos.len())).min(neg.len());
    let n_pos = size - n_neg;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    out.extend(index::sample(&mut rng, pos.len(), n_pos).into_iter().map(|i| *pos[i]));
    out.extend(index::sample(&mut rng, neg.len(), n_neg).into_iter().map(|i| *neg[i]));
    MiniBatch {
        targets: out,
        positives: n_pos,
        degenerate: size < cfg.batch || n_pos != quota,
    }
}

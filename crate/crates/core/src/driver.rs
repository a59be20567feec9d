//! The class-incremental protocol: offline base initialization on the base
//! classes, then one pass over each new class's images, with evaluation
//! checkpoints along the way. Drives the replay learner, plain fine-tuning
//! and the SLDA baseline under the same schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::buffer::{Capacity, ReplacementPolicy, ReplayBuffer};
use crate::datagen::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, nms, omega_map, write_curves, ApMode, EvalReport, ImageDetections, OfflineReference};
use crate::eval::{MAX_DETECTIONS, NMS_IOU};
use crate::geometry::clip_box;
use crate::head::{roi_pool, softmax, HeadConfig, HeadParams, SgdConfig, SgdState};
use crate::io::{write_atomic, write_json_atomic};
use crate::pq::{all_locations, subsample_locations, train_pq, PqConfig, PqModel};
use crate::slda::{nearest_visible_class, ProposalSample, SldaRegress};
use crate::targets::{decode_deltas, label_proposals, sample_minibatch, RoiTarget, TargetConfig};
use crate::types::{ClassId, ClassSchedule, Detection, FeatureMap, ImageAnnotation, ImageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Learner {
    /// Plastic head trained on the current image plus replayed quantized images.
    #[serde(rename = "RODEO")]
    QuantizedReplay,
    /// Plastic head trained on the current image only.
    #[serde(rename = "FINE_TUNE")]
    FineTune,
    #[serde(rename = "SLDA_REGRESS")]
    SldaRegress,
}

impl std::str::FromStr for Learner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase().replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown learner {s:?}")))
    }
}

/// Which features the replay learner trains and evaluates on. Replayed
/// images are always reconstructed from their codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Real,
    #[default]
    Reconstructed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub shuffle: u64,
    pub pq: u64,
    pub buffer: u64,
    pub head_init: u64,
    pub minibatch: u64,
}

impl Seeds {
    /// Distinct per-component seeds derived from one value.
    pub fn from_base(base: u64) -> Self {
        Self {
            shuffle: derive_seed(base, &[1]),
            pq: derive_seed(base, &[2]),
            buffer: derive_seed(base, &[3]),
            head_init: derive_seed(base, &[4]),
            minibatch: derive_seed(base, &[5]),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

/// splitmix64 over `base` and `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PqSettings {
    #[serde(default = "default_codebooks")]
    pub num_codebooks: usize,
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
    #[serde(default = "default_pq_iters")]
    pub iters: usize,
    /// Train on this many random locations per base image instead of all.
    #[serde(default)]
    pub locations_per_image: Option<usize>,
}

fn default_codebooks() -> usize {
    8
}
fn default_codebook_size() -> usize {
    256
}
fn default_pq_iters() -> usize {
    25
}

impl Default for PqSettings {
    fn default() -> Self {
        Self {
            num_codebooks: default_codebooks(),
            codebook_size: default_codebook_size(),
            iters: default_pq_iters(),
            locations_per_image: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSettings {
    #[serde(default = "default_capacity")]
    pub capacity: Capacity,
    #[serde(default = "default_policy")]
    pub policy: ReplacementPolicy,
}

fn default_capacity() -> Capacity {
    Capacity::Entries(17_668)
}
fn default_policy() -> ReplacementPolicy {
    ReplacementPolicy::Min
}

impl Default for BufferSettings {
    fn default() -> Self {
        Self { capacity: default_capacity(), policy: default_policy() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset directory; only read by the command-line runner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Defaults to the sorted dataset classes split in half.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ClassSchedule>,
    /// Checkpoint spacing used when `schedule` is absent.
    #[serde(default = "one")]
    pub eval_every: usize,
    pub learner: Learner,
    /// Images per update: the current one plus `replay_n - 1` replayed.
    #[serde(default = "default_replay_n")]
    pub replay_n: usize,
    #[serde(default)]
    pub buffer: BufferSettings,
    #[serde(default)]
    pub pq: PqSettings,
    #[serde(default)]
    pub features: FeatureSource,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Optimizer for offline training; `sgd` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_sgd: Option<SgdConfig>,
    #[serde(default = "default_base_epochs")]
    pub base_epochs: usize,
    #[serde(default = "default_base_batch")]
    pub base_batch_images: usize,
    #[serde(default)]
    pub targets: TargetConfig,
    #[serde(default)]
    pub ap_mode: ApMode,
    /// Train an all-class offline model to normalize the learning curve.
    #[serde(default = "yes")]
    pub offline_reference: bool,
    /// Write head/buffer/model checkpoints at every evaluation.
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub seeds: Seeds,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_replay_n() -> usize {
    4
}
fn default_base_epochs() -> usize {
    25
}
fn default_base_batch() -> usize {
    2
}

impl ExperimentConfig {
    pub fn new(learner: Learner) -> Self {
        serde_json::from_value(serde_json::json!({ "learner": learner })).expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.replay_n == 0 {
            return Err(Error::Config("replay_n must be at least 1".into()));
        }
        if self.base_batch_images == 0 || self.eval_every == 0 {
            return Err(Error::Config("base_batch_images and eval_every must be positive".into()));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }

    pub fn resolve_schedule(&self, ds: &Dataset) -> Result<ClassSchedule> {
        let schedule = match &self.schedule {
            Some(s) => s.clone(),
            None => ClassSchedule::half_split(&ds.info.classes, self.eval_every)?,
        };
        let known: BTreeSet<ClassId> = ds.info.classes.iter().copied().collect();
        if let Some(c) = schedule.all_classes().into_iter().find(|c| !known.contains(c)) {
            return Err(Error::Config(format!("schedule class {c} is not in the dataset")));
        }
        Ok(schedule)
    }

    fn base_sgd(&self) -> SgdConfig {
        self.base_sgd.unwrap_or(self.sgd)
    }
}

/// One stream update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Class whose increment this update belongs to.
    pub increment: ClassId,
    pub image_id: ImageId,
    pub visible_classes: Vec<ClassId>,
    pub loss: Option<f64>,
    pub replayed: Vec<ImageId>,
    pub replay_truncated: bool,
    pub buffer_entries: Option<usize>,
    pub buffer_bytes: Option<usize>,
    pub evicted: Vec<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Checkpoint(EvalReport),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamLog {
    pub records: Vec<LogRecord>,
}

impl StreamLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Checkpoint(_) => None,
        })
    }

    pub fn checkpoints(&self) -> impl Iterator<Item = &EvalReport> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Checkpoint(c) => Some(c),
            LogRecord::Step(_) => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            if !line.trim().is_empty() {
                records.push(
                    serde_json::from_str(line)
                        .map_err(|e| Error::Parse { offset, message: e.to_string() })?,
                );
            }
            offset += line.len() as u64;
        }
        Ok(Self { records })
    }
}

/// Timestep and seen classes of every evaluation: base first, then after
/// every `eval_every`-th increment.
pub fn checkpoint_plan(schedule: &ClassSchedule) -> Vec<(usize, Vec<ClassId>)> {
    let mut seen = schedule.base_classes.clone();
    let mut plan = vec![(0, seen.clone())];
    for (i, c) in schedule.incremental_classes.iter().enumerate() {
        seen.push(*c);
        if (i + 1) % schedule.eval_every == 0 {
            plan.push((i + 1, seen.clone()));
        }
    }
    plan
}

/// Pools `bbox` on `fmap` using the annotation's image size.
fn pool(fmap: &FeatureMap, ann: &ImageAnnotation, bbox: &crate::BoundingBox, bins: [usize; 2]) -> Result<Vec<f64>> {
    roi_pool(fmap, bbox, ann.image_w as f64, ann.image_h as f64, bins)
}

/// Labels the proposals against `ann` and draws a seeded mini-batch,
/// returning pooled regions with their targets.
fn image_batch(
    fmap: &FeatureMap,
    rec: &ImageRecord,
    ann: &ImageAnnotation,
    visible: &BTreeSet<ClassId>,
    cfg: &TargetConfig,
    bins: [usize; 2],
    seed: u64,
) -> Result<Vec<(Vec<f64>, RoiTarget)>> {
    let labeled = label_proposals(&rec.proposals, ann, cfg.iou_fg, visible)?;
    let batch = sample_minibatch(&labeled, cfg, seed);
    batch
        .targets
        .into_iter()
        .map(|t| Ok((pool(fmap, ann, &t.bbox, bins)?, t)))
        .collect()
}

/// Detections of the head on one image, before suppression.
pub fn head_detect(params: &HeadParams, fmap: &FeatureMap, rec: &ImageRecord) -> Result<Vec<Detection>> {
    let ann = &rec.annotation;
    let proposals = &rec.proposals.boxes;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let pooled: Vec<Vec<f64>> =
        proposals.iter().map(|p| pool(fmap, ann, p, params.pool_bins)).collect::<Result<_>>()?;
    let x = crate::head::stack_columns(&pooled)?;
    let (scores, deltas) = params.forward_batch(&x)?;
    let (w, h) = (ann.image_w as f64, ann.image_h as f64);
    let mut out = Vec::new();
    for (j, p) in proposals.iter().enumerate() {
        let probs = softmax(scores.column(j).as_slice());
        for (k, class) in params.classes().iter().enumerate() {
            let col = k + 1;
            let d = [deltas[(4 * col, j)], deltas[(4 * col + 1, j)], deltas[(4 * col + 2, j)], deltas[(4 * col + 3, j)]];
            let Ok(moved) = decode_deltas(p, &d) else { continue };
            let Ok(clipped) = clip_box(&moved, w, h) else { continue };
            out.push(Detection::new(clipped, *class, probs[col].clamp(0.0, 1.0))?);
        }
    }
    Ok(out)
}

fn quantize_roundtrip(pq: &PqModel, fmap: &FeatureMap) -> Result<FeatureMap> {
    pq.decode(&pq.encode(fmap)?)
}

/// Trains a fresh head offline on `images` with boxes of `classes` visible:
/// `epochs` seeded shuffles, `base_batch_images` images per step.
pub fn train_head_offline(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    classes: &[ClassId],
    images: &[ImageId],
    seed_tag: u64,
) -> Result<HeadParams> {
    let channels = ds.channels().ok_or_else(|| Error::Ingestion(vec!["<empty dataset>".into()]))?;
    let mut params = HeadParams::new(&cfg.head, channels, classes, derive_seed(cfg.seeds.head_init, &[seed_tag]))?;
    let mut sgd = SgdState::new(cfg.base_sgd(), &params);
    let visible: BTreeSet<ClassId> = classes.iter().copied().collect();
    let mut order = images.to_vec();
    for epoch in 0..cfg.base_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.shuffle, &[seed_tag, epoch as u64]));
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.base_batch_images).enumerate() {
            let mut batch = Vec::new();
            for (i, id) in chunk.iter().enumerate() {
                let rec = ds.record(id)?;
                let ann = rec.annotation.restricted_to(&visible);
                let seed = derive_seed(cfg.seeds.minibatch, &[seed_tag, epoch as u64, b as u64, i as u64]);
                batch.extend(image_batch(&rec.features, rec, &ann, &visible, &cfg.targets, params.pool_bins, seed)?);
            }
            if batch.is_empty() {
                continue;
            }
            let (_, grads) = params.loss_and_grads(&batch)?;
            params.sgd_step(&mut sgd, &grads)?;
        }
    }
    Ok(params)
}

pub fn train_base_head(cfg: &ExperimentConfig, ds: &Dataset, schedule: &ClassSchedule) -> Result<HeadParams> {
    let base: BTreeSet<ClassId> = schedule.base_classes.iter().copied().collect();
    train_head_offline(cfg, ds, &schedule.base_classes, &ds.train_images_with(&base), 0)
}

pub fn train_pq_on_base(cfg: &ExperimentConfig, ds: &Dataset, schedule: &ClassSchedule) -> Result<PqModel> {
    let base: BTreeSet<ClassId> = schedule.base_classes.iter().copied().collect();
    let mut samples = Vec::new();
    for (i, id) in ds.train_images_with(&base).iter().enumerate() {
        let f = &ds.record(id)?.features;
        match cfg.pq.locations_per_image {
            Some(k) => samples.extend(subsample_locations(f, k, derive_seed(cfg.seeds.pq, &[i as u64]))?),
            None => samples.extend(all_locations(f)),
        }
    }
    train_pq(
        &samples,
        &PqConfig {
            num_codebooks: cfg.pq.num_codebooks,
            codebook_size: cfg.pq.codebook_size,
            iters: cfg.pq.iters,
            seed: cfg.seeds.pq,
        },
    )
}

/// Evaluates `detect` over the test images holding a seen class, with
/// unseen-class boxes removed from the ground truth.
fn evaluate_with(
    ds: &Dataset,
    t: usize,
    seen: &[ClassId],
    mode: ApMode,
    mut detect: impl FnMut(&ImageRecord) -> Result<Vec<Detection>>,
) -> Result<EvalReport> {
    let seen_set: BTreeSet<ClassId> = seen.iter().copied().collect();
    let mut dets = Vec::new();
    let mut anns = Vec::new();
    for id in ds.test_images_with(&seen_set) {
        let rec = ds.record(&id)?;
        let raw = detect(rec)?;
        dets.push(ImageDetections { image_id: id, detections: nms(&raw, NMS_IOU, MAX_DETECTIONS) });
        anns.push(rec.annotation.restricted_to(&seen_set));
    }
    evaluate(t, &dets, &anns, &seen_set, mode)
}

/// Trains one head offline on every scheduled class and evaluates it at each
/// checkpoint over the classes seen by then.
pub fn offline_reference(cfg: &ExperimentConfig, ds: &Dataset, schedule: &ClassSchedule) -> Result<Vec<EvalReport>> {
    let all = schedule.all_classes();
    let all_set: BTreeSet<ClassId> = all.iter().copied().collect();
    let params = train_head_offline(cfg, ds, &all, &ds.train_images_with(&all_set), 1)?;
    checkpoint_plan(schedule)
        .into_iter()
        .map(|(t, seen)| evaluate_with(ds, t, &seen, cfg.ap_mode, |rec| head_detect(&params, &rec.features, rec)))
        .collect()
}

/// Expensive base-stage products that identical configurations can share.
#[derive(Debug, Clone, Default)]
pub struct BaseArtifacts {
    pub head: Option<HeadParams>,
    pub pq: Option<PqModel>,
}

#[derive(Debug, Clone)]
pub enum Model {
    Head { params: HeadParams, sgd: SgdState },
    Slda(SldaRegress),
}

/// A run in progress.
pub struct Experiment<'a> {
    cfg: ExperimentConfig,
    ds: &'a Dataset,
    schedule: ClassSchedule,
    seen: Vec<ClassId>,
    pq: Option<PqModel>,
    buffer: Option<ReplayBuffer>,
    model: Model,
    /// Reconstructed test features, filled on first evaluation.
    eval_cache: BTreeMap<ImageId, FeatureMap>,
    step: u64,
    log: StreamLog,
}

impl<'a> Experiment<'a> {
    pub fn base_initialize(cfg: &ExperimentConfig, ds: &'a Dataset) -> Result<Self> {
        Self::base_initialize_with(cfg, ds, BaseArtifacts::default())
    }

    /// Trains (or takes) the base model and the quantizer, then seeds the
    /// buffer with every base image, only base-class boxes visible.
    pub fn base_initialize_with(cfg: &ExperimentConfig, ds: &'a Dataset, shared: BaseArtifacts) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.resolve_schedule(ds)?;
        let base: BTreeSet<ClassId> = schedule.base_classes.iter().copied().collect();
        let base_images = ds.train_images_with(&base);
        if base_images.is_empty() {
            return Err(Error::Ingestion(vec!["no training image holds a base class".into()]));
        }
        let mut pq = None;
        let mut buffer = None;
        let model = match cfg.learner {
            Learner::QuantizedReplay | Learner::FineTune => {
                let params = match shared.head {
                    Some(h) => h,
                    None => train_base_head(cfg, ds, &schedule)?,
                };
                let sgd = SgdState::new(cfg.sgd, &params);
                Model::Head { params, sgd }
            }
            Learner::SldaRegress => {
                let channels = ds.channels().expect("non-empty");
                let dim = cfg.head.pool_bins[0] * cfg.head.pool_bins[1] * channels;
                let mut m = SldaRegress::new(dim)?;
                for c in &schedule.base_classes {
                    m.add_class(*c)?;
                }
                for id in &base_images {
                    let rec = ds.record(id)?;
                    slda_update(&mut m, &rec.features, rec, &rec.annotation.restricted_to(&base), &base, cfg)?;
                }
                Model::Slda(m)
            }
        };
        if cfg.learner == Learner::QuantizedReplay {
            let model = match shared.pq {
                Some(m) => m,
                None => train_pq_on_base(cfg, ds, &schedule)?,
            };
            let mut buf = ReplayBuffer::new(cfg.buffer.capacity, cfg.buffer.policy, cfg.seeds.buffer)?;
            for id in &base_images {
                let rec = ds.record(id)?;
                buf.upsert(model.encode(&rec.features)?, rec.annotation.restricted_to(&base))?;
            }
            pq = Some(model);
            buffer = Some(buf);
        }
        Ok(Self {
            cfg: cfg.clone(),
            ds,
            seen: schedule.base_classes.clone(),
            schedule,
            pq,
            buffer,
            model,
            eval_cache: BTreeMap::new(),
            step: 0,
            log: StreamLog::default(),
        })
    }

    pub fn schedule(&self) -> &ClassSchedule {
        &self.schedule
    }

    pub fn seen(&self) -> &[ClassId] {
        &self.seen
    }

    pub fn log(&self) -> &StreamLog {
        &self.log
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn pq(&self) -> Option<&PqModel> {
        self.pq.as_ref()
    }

    pub fn buffer(&self) -> Option<&ReplayBuffer> {
        self.buffer.as_ref()
    }

    /// One update on `image_id` as part of `increment`'s class.
    pub fn stream_step(&mut self, image_id: &ImageId, increment: ClassId) -> Result<StepRecord> {
        let ds = self.ds;
        let rec = ds.record(image_id)?;
        let current: BTreeSet<ClassId> = BTreeSet::from([increment]);
        let visible: BTreeSet<ClassId> = self.seen.iter().copied().collect();
        let new_boxes = rec.annotation.restricted_to(&current);
        let step = self.step;
        self.step += 1;
        let mut record = StepRecord {
            step,
            increment,
            image_id: image_id.clone(),
            visible_classes: self.seen.clone(),
            loss: None,
            replayed: Vec::new(),
            replay_truncated: false,
            buffer_entries: None,
            buffer_bytes: None,
            evicted: Vec::new(),
        };
        let bins = self.cfg.head.pool_bins;
        let tcfg = self.cfg.targets;
        let mb_seed = |i: u64| derive_seed(self.cfg.seeds.minibatch, &[1 << 32, step, i]);

        match self.cfg.learner {
            Learner::QuantizedReplay => {
                let pq = self.pq.as_ref().expect("replay learner has a quantizer");
                let buffer = self.buffer.as_mut().expect("replay learner has a buffer");
                let report = buffer.upsert(pq.encode(&rec.features)?, new_boxes)?;
                record.evicted = report.evicted;
                let current_ann = buffer.get(image_id).expect("just inserted").annotation.clone();
                let fmap = match self.cfg.features {
                    FeatureSource::Reconstructed => quantize_roundtrip(pq, &rec.features)?,
                    FeatureSource::Real => rec.features.clone(),
                };
                let mut batch = image_batch(&fmap, rec, &current_ann, &visible, &tcfg, bins, mb_seed(0))?;
                let sample_seed = derive_seed(self.cfg.seeds.buffer, &[step]);
                let replay = buffer.sample(self.cfg.replay_n - 1, sample_seed, Some(image_id));
                record.replay_truncated = replay.truncated;
                for (i, entry) in replay.entries.iter().enumerate() {
                    let r = ds.record(&entry.image_id)?;
                    let decoded = pq.decode(&entry.codes)?;
                    batch.extend(image_batch(&decoded, r, &entry.annotation, &visible, &tcfg, bins, mb_seed(i as u64 + 1))?);
                    record.replayed.push(entry.image_id.clone());
                }
                let stats = buffer.stats();
                record.buffer_entries = Some(stats.entry_count);
                record.buffer_bytes = Some(stats.byte_count);
                let Model::Head { params, sgd } = &mut self.model else { unreachable!() };
                if !batch.is_empty() {
                    let (loss, grads) = params.loss_and_grads(&batch)?;
                    params.sgd_step(sgd, &grads)?;
                    record.loss = Some(loss);
                }
            }
            Learner::FineTune => {
                let batch = image_batch(&rec.features, rec, &new_boxes, &visible, &tcfg, bins, mb_seed(0))?;
                let Model::Head { params, sgd } = &mut self.model else { unreachable!() };
                if !batch.is_empty() {
                    let (loss, grads) = params.loss_and_grads(&batch)?;
                    params.sgd_step(sgd, &grads)?;
                    record.loss = Some(loss);
                }
            }
            Learner::SldaRegress => {
                let Model::Slda(m) = &mut self.model else { unreachable!() };
                slda_update(m, &rec.features, rec, &new_boxes, &visible, &self.cfg)?;
            }
        }
        self.log.records.push(LogRecord::Step(record.clone()));
        Ok(record)
    }

    /// Adds output units (or mean slots) for `class`, then streams each of
    /// its training images once in a seeded order.
    pub fn run_increment(&mut self, class: ClassId) -> Result<()> {
        if self.seen.contains(&class) {
            return Err(Error::Schedule(format!("class {class} has already been learned")));
        }
        let add_seed = derive_seed(self.cfg.seeds.head_init, &[2, class.0 as u64]);
        match &mut self.model {
            Model::Head { params, sgd } => params.add_class(sgd, class, add_seed)?,
            Model::Slda(m) => m.add_class(class)?,
        }
        self.seen.push(class);
        let mut images = self.ds.train_images_with(&BTreeSet::from([class]));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seeds.shuffle, &[3, class.0 as u64]));
        images.shuffle(&mut rng);
        for id in &images {
            self.stream_step(id, class)?;
        }
        Ok(())
    }

    /// Scores the current model on the test images holding a seen class and
    /// appends the report to the log.
    pub fn evaluate_checkpoint(&mut self, t: usize) -> Result<EvalReport> {
        let seen = self.seen.clone();
        let reconstruct = self.cfg.learner == Learner::QuantizedReplay && self.cfg.features == FeatureSource::Reconstructed;
        if reconstruct {
            let pq = self.pq.as_ref().expect("replay learner has a quantizer");
            for id in &self.ds.split.test {
                if !self.eval_cache.contains_key(id) {
                    let f = quantize_roundtrip(pq, &self.ds.record(id)?.features)?;
                    self.eval_cache.insert(id.clone(), f);
                }
            }
        }
        let cache = &self.eval_cache;
        let fmap_of = |rec: &'_ ImageRecord| -> FeatureMap {
            if reconstruct {
                cache[&rec.annotation.image_id].clone()
            } else {
                rec.features.clone()
            }
        };
        let report = match &self.model {
            Model::Head { params, .. } => {
                evaluate_with(self.ds, t, &seen, self.cfg.ap_mode, |rec| head_detect(params, &fmap_of(rec), rec))?
            }
            Model::Slda(m) => {
                let snap = m.snapshot()?;
                let bins = self.cfg.head.pool_bins;
                evaluate_with(self.ds, t, &seen, self.cfg.ap_mode, |rec| {
                    let ann = &rec.annotation;
                    let pooled: Vec<Vec<f64>> =
                        rec.proposals.boxes.iter().map(|p| pool(&rec.features, ann, p, bins)).collect::<Result<_>>()?;
                    snap.detect(&pooled, &rec.proposals.boxes, ann.image_w as f64, ann.image_h as f64)
                })?
            }
        };
        self.log.records.push(LogRecord::Checkpoint(report.clone()));
        Ok(report)
    }

    /// Base checkpoint, every increment, and the scheduled checkpoints.
    /// `on_checkpoint` sees the experiment right after each evaluation.
    pub fn run_to_end(&mut self, mut on_checkpoint: impl FnMut(&Self, &EvalReport) -> Result<()>) -> Result<Vec<EvalReport>> {
        let mut reports = Vec::new();
        let r = self.evaluate_checkpoint(0)?;
        on_checkpoint(self, &r)?;
        reports.push(r);
        let incremental = self.schedule.incremental_classes.clone();
        for (i, c) in incremental.iter().enumerate() {
            self.run_increment(*c)?;
            if (i + 1) % self.schedule.eval_every == 0 {
                let r = self.evaluate_checkpoint(i + 1)?;
                on_checkpoint(self, &r)?;
                reports.push(r);
            }
        }
        Ok(reports)
    }

    /// Writes the model (and buffer) state for checkpoint `t` into `dir`.
    pub fn save_state(&self, dir: &Path, t: usize) -> Result<()> {
        match &self.model {
            Model::Head { params, .. } => write_atomic(&dir.join(format!("head_t{t:03}.bin")), &params.to_bytes())?,
            Model::Slda(m) => write_atomic(&dir.join(format!("slda_t{t:03}.bin")), &m.to_bytes())?,
        }
        if let (Some(pq), Some(buf)) = (&self.pq, &self.buffer) {
            let hash = pq_hash(pq);
            write_atomic(&dir.join(format!("buffer_t{t:03}.bin")), &buf.to_bytes(&hash))?;
        }
        Ok(())
    }
}

pub fn pq_hash(pq: &PqModel) -> [u8; 32] {
    Sha256::digest(pq.to_bytes()).into()
}

/// One image of the SLDA procedure: every proposal, with `ann`'s boxes
/// visible, then every box of `ann` as a ground-truth sample.
fn slda_update(
    m: &mut SldaRegress,
    fmap: &FeatureMap,
    rec: &ImageRecord,
    ann: &ImageAnnotation,
    visible: &BTreeSet<ClassId>,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let bins = cfg.head.pool_bins;
    let labeled = label_proposals(&rec.proposals, ann, cfg.targets.iou_fg, visible)?;
    let proposals: Vec<ProposalSample> = labeled
        .into_iter()
        .map(|t| {
            Ok(ProposalSample {
                features: pool(fmap, ann, &t.bbox, bins)?,
                background_of: nearest_visible_class(&t.bbox, ann, visible),
                target: t,
            })
        })
        .collect::<Result<_>>()?;
    let gts: Vec<(Vec<f64>, ClassId)> = ann
        .boxes
        .iter()
        .map(|b| Ok((pool(fmap, ann, &b.bbox, bins)?, b.class_id)))
        .collect::<Result<_>>()?;
    m.update_image(&proposals, &gts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub learner: Learner,
    pub checkpoints: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline: Option<Vec<EvalReport>>,
    /// Mean over checkpoints of mAP divided by the offline model's mAP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_map: Option<f64>,
    pub mean_map: f64,
    pub steps: u64,
}

pub fn omega_from_reports(run: &[EvalReport], offline: &[EvalReport]) -> Result<f64> {
    let alphas: Vec<f64> = run.iter().map(|r| r.map).collect();
    let denominators: Vec<f64> = offline.iter().map(|r| r.map).collect();
    omega_map(&alphas, &OfflineReference::PerStep(denominators))
}

/// Full run. With `out_dir`, writes `config.json`, `pq.bin`, per-checkpoint
/// model and buffer states, `stream_log.jsonl`, `curves.csv`,
/// `offline_curves.csv` and `report.json`.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset, out_dir: Option<&Path>) -> Result<(RunReport, StreamLog)> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_json_atomic(&dir.join("config.json"), cfg)?;
    }
    let mut exp = Experiment::base_initialize(cfg, ds)?;
    if let (Some(dir), Some(pq)) = (out_dir, exp.pq()) {
        write_atomic(&dir.join("pq.bin"), &pq.to_bytes())?;
    }
    let save = cfg.save_checkpoints;
    let checkpoints = exp.run_to_end(|e, r| match (out_dir, save) {
        (Some(dir), true) => e.save_state(dir, r.t),
        _ => Ok(()),
    })?;
    let offline = if cfg.offline_reference { Some(offline_reference(cfg, ds, exp.schedule())?) } else { None };
    let omega = match &offline {
        Some(o) => Some(omega_from_reports(&checkpoints, o)?),
        None => None,
    };
    let report = RunReport {
        learner: cfg.learner,
        mean_map: checkpoints.iter().map(|r| r.map).sum::<f64>() / checkpoints.len() as f64,
        offline,
        omega_map: omega,
        steps: exp.log().steps().count() as u64,
        checkpoints,
    };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("stream_log.jsonl"), exp.log().to_jsonl()?.as_bytes())?;
        write_curves(&dir.join("curves.csv"), &report.checkpoints)?;
        if let Some(o) = &report.offline {
            write_curves(&dir.join("offline_curves.csv"), o)?;
        }
        write_json_atomic(&dir.join("report.json"), &report)?;
    }
    Ok((report, exp.log().clone()))
}

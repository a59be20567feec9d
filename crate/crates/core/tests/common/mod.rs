//! Independent reference implementations used by the oracle and acceptance suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamdet_core::buffer::{Capacity, ReplacementPolicy};
use streamdet_core::datagen::SyntheticSpec;
use streamdet_core::driver::{ExperimentConfig, Learner};
use streamdet_core::{iou, BoundingBox, ClassId, Detection};

/// Frobenius-norm relative error of `a` against the reference `b`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn det_key(d: &Detection) -> (u32, [u64; 4], u64) {
    let b = d.bbox.to_array();
    (d.class_id.0, b.map(f64::to_bits), d.score.to_bits())
}

/// Exhaustive greedy suppression: repeatedly take the best remaining box
/// (highest score, then lexicographically smallest box) and discard every
/// remaining same-class box overlapping it by more than `thresh`.
pub fn brute_nms(dets: &[Detection], thresh: f64, max_out: usize) -> Vec<Detection> {
    let mut remaining: Vec<Detection> = dets.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (a, b) = (&remaining[i], &remaining[best]);
            let better = a.score > b.score || (a.score == b.score && a.bbox.lex_cmp(&b.bbox).is_lt());
            if better {
                best = i;
            }
        }
        let top = remaining.swap_remove(best);
        remaining.retain(|d| d.class_id != top.class_id || iou(&d.bbox, &top.bbox) <= thresh);
        kept.push(top);
    }
    kept.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then(a.bbox.lex_cmp(&b.bbox)).then(a.class_id.cmp(&b.class_id))
    });
    kept.truncate(max_out);
    kept
}

pub fn same_detections(a: &[Detection], b: &[Detection]) -> bool {
    let mut ka: Vec<_> = a.iter().map(det_key).collect();
    let mut kb: Vec<_> = b.iter().map(det_key).collect();
    ka.sort();
    kb.sort();
    ka == kb
}

/// Small boxes on a coarse integer grid so that overlaps and score ties are common.
pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, classes: u32) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x1 = rng.random_range(0..8) as f64;
            let y1 = rng.random_range(0..8) as f64;
            let w = rng.random_range(1..5) as f64;
            let h = rng.random_range(1..5) as f64;
            let b = BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap();
            let score = rng.random_range(0..6) as f64 / 5.0;
            Detection::new(b, ClassId(rng.random_range(1..=classes)), score).unwrap()
        })
        .collect()
}

/// Plain re-scanning model of the replay buffer: a list of entries with
/// their class sets and insertion order.
pub struct BufferOracle {
    pub capacity: usize,
    pub policy: ReplacementPolicy,
    pub entries: Vec<(String, BTreeSet<ClassId>, u64)>,
    next_seq: u64,
    rng: ChaCha8Rng,
}

impl BufferOracle {
    pub fn new(capacity: usize, policy: ReplacementPolicy, seed: u64) -> Self {
        Self { capacity, policy, entries: Vec::new(), next_seq: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for (_, classes, _) in &self.entries {
            for c in classes {
                *counts.entry(*c).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Variance of the class counts, times the squared number of classes,
    /// after hypothetically removing `victim`. Classes dropping to zero still
    /// count.
    fn imbalance_without(&self, before: &BTreeMap<ClassId, usize>, victim: usize) -> i128 {
        let mut after: Vec<i128> = Vec::with_capacity(before.len());
        for (c, n) in before {
            let removed = self.entries[victim].1.contains(c) as usize;
            after.push((n - removed) as i128);
        }
        let k = after.len() as i128;
        let sum: i128 = after.iter().sum();
        let sum_sq: i128 = after.iter().map(|v| v * v).sum();
        k * sum_sq - sum * sum
    }

    fn victim(&mut self, newest: &str) -> String {
        let mut candidates: Vec<usize> = (0..self.entries.len()).filter(|&i| self.entries[i].0 != newest).collect();
        candidates.sort_by_key(|&i| self.entries[i].2);
        let pick = match self.policy {
            ReplacementPolicy::Min => *candidates.iter().min_by_key(|&&i| (self.entries[i].1.len(), self.entries[i].2)).unwrap(),
            ReplacementPolicy::Max => *candidates
                .iter()
                .min_by_key(|&&i| (std::cmp::Reverse(self.entries[i].1.len()), self.entries[i].2))
                .unwrap(),
            ReplacementPolicy::Bal => {
                let before = self.class_counts();
                *candidates.iter().min_by_key(|&&i| (self.imbalance_without(&before, i), self.entries[i].2)).unwrap()
            }
            ReplacementPolicy::Random => candidates[self.rng.random_range(0..candidates.len())],
            ReplacementPolicy::NoReplace => unreachable!("never evicts"),
        };
        self.entries[pick].0.clone()
    }

    /// Returns the evicted ids.
    pub fn upsert(&mut self, id: &str, classes: &BTreeSet<ClassId>) -> Vec<String> {
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == id) {
            e.1.extend(classes);
            return Vec::new();
        }
        self.entries.push((id.to_string(), classes.clone(), self.next_seq));
        self.next_seq += 1;
        let mut evicted = Vec::new();
        while self.policy != ReplacementPolicy::NoReplace && self.entries.len() > self.capacity {
            let v = self.victim(id);
            self.entries.retain(|e| e.0 != v);
            evicted.push(v);
        }
        evicted
    }
}

/// Batch mean of the rows of `xs`.
pub fn batch_mean(xs: &[Vec<f64>]) -> DVector<f64> {
    let d = xs[0].len();
    let mut m = DVector::zeros(d);
    for x in xs {
        m += DVector::from_column_slice(x);
    }
    m / xs.len() as f64
}

/// `(1/n) sum (x - mx)(y - my)^T`.
pub fn batch_cross_cov(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> DMatrix<f64> {
    let (mx, my) = (batch_mean(xs), batch_mean(ys));
    let mut c = DMatrix::zeros(mx.len(), my.len());
    for (x, y) in xs.iter().zip(ys) {
        let dx = DVector::from_column_slice(x) - &mx;
        let dy = DVector::from_column_slice(y) - &my;
        c += dx * dy.transpose();
    }
    c / xs.len() as f64
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// The seeded end-to-end benchmark: 10 classes, 5 base, 200 images per
/// class, a 5x5 grid of 64 channels, 8 codebooks.
pub fn benchmark_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 10,
        images_per_class: 200,
        grid: [5, 5],
        channels: 64,
        num_codebooks: 8,
        class_signal_strength: 2.0,
        noise_std: 0.5,
        boxes_per_image: [1, 3],
        max_box_cells: 3,
        cell_pixels: 16,
        proposals_per_image: 100,
        jittered_per_box: 8,
        test_fraction: 0.2,
        seed: 7,
    }
}

/// Replay of `n = 4` images per update, sized for the benchmark.
pub fn benchmark_config(learner: Learner) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(learner);
    c.replay_n = 4;
    c.head.hidden = 64;
    c.base_epochs = 10;
    c.sgd.learning_rate = 0.01;
    c.pq.codebook_size = 64;
    c.pq.iters = 10;
    c.buffer.capacity = Capacity::Entries(200);
    c.offline_reference = false;
    c.save_checkpoints = false;
    c
}

/// A dataset small enough to run the whole protocol in well under a second.
pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        images_per_class: 8,
        grid: [4, 4],
        channels: 8,
        num_codebooks: 4,
        class_signal_strength: 3.0,
        noise_std: 0.2,
        boxes_per_image: [1, 2],
        max_box_cells: 2,
        cell_pixels: 16,
        proposals_per_image: 20,
        jittered_per_box: 4,
        test_fraction: 0.25,
        seed,
    }
}

pub fn tiny_config(learner: Learner) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(learner);
    c.head.hidden = 8;
    c.base_epochs = 2;
    c.pq.codebook_size = 8;
    c.pq.iters = 5;
    c.buffer.capacity = Capacity::Entries(8);
    c.offline_reference = false;
    c
}

//! Fixed-capacity replay memory of quantized feature maps and their annotations.
//!
//! Insertion happens before eviction, and the entry just inserted is never the
//! victim. Re-inserting an image that is already stored merges its new boxes
//! into the stored annotation and leaves the codes alone.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{put_string, ByteReader};
use crate::pq::QuantizedFeatureMap;
use crate::types::{ClassId, ImageAnnotation, ImageId};

pub const BUFFER_MAGIC: &[u8; 4] = b"RRB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplacementPolicy {
    /// Evict the entry with the fewest unique class labels.
    #[serde(rename = "MIN")]
    Min,
    /// Evict the entry with the most unique class labels.
    #[serde(rename = "MAX")]
    Max,
    /// Evict the entry whose removal leaves the flattest class histogram.
    #[serde(rename = "BAL")]
    Bal,
    #[serde(rename = "RANDOM")]
    Random,
    /// Never evict; capacity is ignored.
    #[serde(rename = "NO_REPLACE")]
    NoReplace,
}

impl ReplacementPolicy {
    fn code(self) -> u8 {
        match self {
            Self::Min => 0,
            Self::Max => 1,
            Self::Bal => 2,
            Self::Random => 3,
            Self::NoReplace => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Self::Min,
            1 => Self::Max,
            2 => Self::Bal,
            3 => Self::Random,
            4 => Self::NoReplace,
            _ => return None,
        })
    }
}

impl std::str::FromStr for ReplacementPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase().replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown replacement policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    /// Maximum number of stored images.
    Entries(usize),
    /// Maximum total code payload, `sum of p * q * s` over entries.
    Bytes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub image_id: ImageId,
    pub codes: QuantizedFeatureMap,
    pub annotation: ImageAnnotation,
    pub insert_seq: u64,
}

impl BufferEntry {
    pub fn unique_labels(&self) -> usize {
        self.annotation.unique_labels()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpsertReport {
    /// False when the image was already stored and only its annotation grew.
    pub inserted: bool,
    pub boxes_added: usize,
    pub evicted: Vec<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStats {
    pub entry_count: usize,
    pub byte_count: usize,
    pub class_counts: BTreeMap<ClassId, usize>,
}

#[derive(Debug)]
pub struct Sample<'a> {
    pub entries: Vec<&'a BufferEntry>,
    /// Set when fewer entries were available than requested.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: BTreeMap<ImageId, BufferEntry>,
    capacity: Capacity,
    policy: ReplacementPolicy,
    class_counts: BTreeMap<ClassId, usize>,
    byte_count: usize,
    next_seq: u64,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: Capacity, policy: ReplacementPolicy, rng_seed: u64) -> Result<Self> {
        match capacity {
            Capacity::Entries(0) | Capacity::Bytes(0) => {
                return Err(Error::Config("buffer capacity must be positive".into()))
            }
            _ => {}
        }
        Ok(Self {
            entries: BTreeMap::new(),
            capacity,
            policy,
            class_counts: BTreeMap::new(),
            byte_count: 0,
            next_seq: 0,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    pub fn policy(&self) -> ReplacementPolicy {
        self.policy
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &ImageId) -> Option<&BufferEntry> {
        self.entries.get(id)
    }

    /// Entries ordered by image id.
    pub fn iter(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.values()
    }

    pub fn class_counts(&self) -> &BTreeMap<ClassId, usize> {
        &self.class_counts
    }

    pub fn stats(&self) -> BufferStats {
        BufferStats {
            entry_count: self.entries.len(),
            byte_count: self.byte_count,
            class_counts: self.class_counts.clone(),
        }
    }

    fn over_capacity(&self) -> bool {
        match self.capacity {
            _ if self.policy == ReplacementPolicy::NoReplace => false,
            Capacity::Entries(n) => self.entries.len() > n,
            Capacity::Bytes(n) => self.byte_count > n,
        }
    }

    fn count_classes(&mut self, classes: &BTreeSet<ClassId>, add: bool) {
        for c in classes {
            if add {
                *self.class_counts.entry(*c).or_insert(0) += 1;
            } else if let Some(n) = self.class_counts.get_mut(c) {
                *n -= 1;
                if *n == 0 {
                    self.class_counts.remove(c);
                }
            }
        }
    }

    /// Inserts an image or merges new boxes into its stored annotation, then
    /// evicts per policy while the buffer is over capacity.
    pub fn upsert(&mut self, codes: QuantizedFeatureMap, new_boxes: ImageAnnotation) -> Result<UpsertReport> {
        if new_boxes.boxes.is_empty() {
            return Err(Error::Precondition(format!("no boxes to store for image {}", new_boxes.image_id)));
        }
        if codes.image_id != new_boxes.image_id {
            return Err(Error::Domain(format!(
                "codes for {} paired with annotation for {}",
                codes.image_id, new_boxes.image_id
            )));
        }
        let id = new_boxes.image_id.clone();

        if let Some(entry) = self.entries.get_mut(&id) {
            let before = entry.annotation.classes();
            let mut added = 0;
            for b in new_boxes.boxes {
                if !entry.annotation.boxes.contains(&b) {
                    entry.annotation.boxes.push(b);
                    added += 1;
                }
            }
            let gained: BTreeSet<ClassId> = entry.annotation.classes().difference(&before).copied().collect();
            self.count_classes(&gained, true);
            return Ok(UpsertReport { inserted: false, boxes_added: added, evicted: vec![] });
        }

        if let Capacity::Bytes(limit) = self.capacity {
            if self.policy != ReplacementPolicy::NoReplace && codes.byte_len() > limit {
                return Err(Error::Config(format!(
                    "entry of {} bytes exceeds buffer capacity of {limit} bytes",
                    codes.byte_len()
                )));
            }
        }

        let mut annotation = new_boxes;
        let mut dedup = Vec::with_capacity(annotation.boxes.len());
        for b in annotation.boxes.drain(..) {
            if !dedup.contains(&b) {
                dedup.push(b);
            }
        }
        annotation.boxes = dedup;
        let boxes_added = annotation.boxes.len();
        let classes = annotation.classes();
        self.count_classes(&classes, true);
        self.byte_count += codes.byte_len();
        let entry = BufferEntry { image_id: id.clone(), codes, annotation, insert_seq: self.next_seq };
        self.next_seq += 1;
        self.entries.insert(id.clone(), entry);

        let mut evicted = Vec::new();
        while self.over_capacity() {
            let victim = self.select_victim(self.policy, Some(&id))?;
            self.remove(&victim);
            evicted.push(victim);
        }
        Ok(UpsertReport { inserted: true, boxes_added, evicted })
    }

    pub fn remove(&mut self, id: &ImageId) -> Option<BufferEntry> {
        let entry = self.entries.remove(id)?;
        let classes = entry.annotation.classes();
        self.count_classes(&classes, false);
        self.byte_count -= entry.codes.byte_len();
        Some(entry)
    }

    fn candidates(&self, exclude: Option<&ImageId>) -> Vec<&BufferEntry> {
        let mut c: Vec<&BufferEntry> =
            self.entries.values().filter(|e| Some(&e.image_id) != exclude).collect();
        c.sort_by_key(|e| e.insert_seq);
        c
    }

    /// Chooses the entry to evict. Ties go to the oldest entry. `RANDOM`
    /// advances the buffer's own generator.
    pub fn select_victim(&mut self, policy: ReplacementPolicy, exclude: Option<&ImageId>) -> Result<ImageId> {
        if policy == ReplacementPolicy::NoReplace {
            return Err(Error::Policy("NO_REPLACE never selects a victim".into()));
        }
        let n_candidates = self.candidates(exclude).len();
        if n_candidates == 0 {
            return Err(Error::Domain("no eviction candidates in buffer".into()));
        }
        let pick = match policy {
            ReplacementPolicy::Random => Some(self.rng.random_range(0..n_candidates)),
            _ => None,
        };
        let candidates = self.candidates(exclude);
        let victim = match policy {
            ReplacementPolicy::Min => candidates.iter().min_by_key(|e| (e.unique_labels(), e.insert_seq)),
            ReplacementPolicy::Max => candidates
                .iter()
                .min_by_key(|e| (std::cmp::Reverse(e.unique_labels()), e.insert_seq)),
            ReplacementPolicy::Bal => {
                let hist = Histogram::of(&self.class_counts);
                candidates
                    .iter()
                    .min_by_key(|e| (hist.spread_without(&e.annotation.classes(), &self.class_counts), e.insert_seq))
            }
            ReplacementPolicy::Random => candidates.get(pick.expect("drawn above")),
            ReplacementPolicy::NoReplace => unreachable!(),
        };
        Ok(victim.expect("non-empty candidates").image_id.clone())
    }

    /// Draws `n` distinct entries uniformly without replacement, optionally
    /// skipping one image. Asking for more than are available returns all of
    /// them and sets `truncated`.
    pub fn sample(&self, n: usize, seed: u64, exclude: Option<&ImageId>) -> Sample<'_> {
        let candidates = self.candidates(exclude);
        if n >= candidates.len() {
            return Sample { truncated: n > candidates.len(), entries: candidates };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = index::sample(&mut rng, candidates.len(), n);
        Sample { entries: picks.into_iter().map(|i| candidates[i]).collect(), truncated: false }
    }

    /// Serializes the buffer. `pq_hash` identifies the quantizer the codes
    /// belong to.
    ///
    /// ```text
    /// "RRB1" | pq_hash: [u8; 32] | policy: u8 | mode: u8 | capacity: u64
    ///        | rng_seed: u64 | rng_word_pos: u128 | next_seq: u64 | n: u32
    ///        | n x (insert_seq: u64 | id | p: u32 | q: u32 | s: u32 | codes | json)
    /// ```
    /// Strings and the annotation JSON are `u32` length-prefixed.
    pub fn to_bytes(&self, pq_hash: &[u8; 32]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUFFER_MAGIC);
        out.extend_from_slice(pq_hash);
        out.push(self.policy.code());
        let (mode, cap) = match self.capacity {
            Capacity::Entries(n) => (0u8, n),
            Capacity::Bytes(n) => (1u8, n),
        };
        out.push(mode);
        out.extend_from_slice(&(cap as u64).to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&self.next_seq.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut ordered: Vec<&BufferEntry> = self.entries.values().collect();
        ordered.sort_by_key(|e| e.insert_seq);
        for e in ordered {
            out.extend_from_slice(&e.insert_seq.to_le_bytes());
            put_string(&mut out, e.image_id.as_str());
            for v in [e.codes.grid_h(), e.codes.grid_w(), e.codes.num_codebooks()] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            out.extend_from_slice(e.codes.codes());
            let json = serde_json::to_string(&e.annotation).expect("annotation serializes");
            put_string(&mut out, &json);
        }
        out
    }

    /// Restores a buffer, checking it was written against the expected quantizer.
    pub fn from_bytes(bytes: &[u8], expected_pq_hash: Option<&[u8; 32]>) -> Result<(Self, [u8; 32])> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(BUFFER_MAGIC)?;
        let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if let Some(want) = expected_pq_hash {
            if want != &hash {
                return Err(r.error("buffer was written for a different quantizer"));
            }
        }
        let policy = ReplacementPolicy::from_code(r.u8()?).ok_or_else(|| r.error("unknown policy code"))?;
        let capacity = match r.u8()? {
            0 => Capacity::Entries(r.u64()? as usize),
            1 => Capacity::Bytes(r.u64()? as usize),
            _ => return Err(r.error("unknown capacity mode")),
        };
        let rng_seed = r.u64()?;
        let word_pos = r.u128()?;
        let next_seq = r.u64()?;
        let n = r.u32()? as usize;
        let mut buf = ReplayBuffer::new(capacity, policy, rng_seed).map_err(|e| r.error(e.to_string()))?;
        buf.rng.set_word_pos(word_pos);
        for _ in 0..n {
            let seq = r.u64()?;
            let id = ImageId(r.string()?);
            let p = r.u32()? as usize;
            let q = r.u32()? as usize;
            let s = r.u32()? as usize;
            let len = p.checked_mul(q).and_then(|v| v.checked_mul(s)).ok_or_else(|| r.error("code size overflows"))?;
            let codes = r.take(len)?.to_vec();
            let codes = QuantizedFeatureMap::new(id.clone(), p, q, s, codes).map_err(|e| r.error(e.to_string()))?;
            let at = r.position();
            let json = r.string()?;
            let annotation: ImageAnnotation = serde_json::from_str(&json)
                .map_err(|e| Error::Parse { offset: at as u64, message: e.to_string() })?;
            if annotation.image_id != id || annotation.boxes.is_empty() {
                return Err(Error::Parse { offset: at as u64, message: format!("bad annotation for {id}") });
            }
            if seq >= next_seq || buf.entries.contains_key(&id) {
                return Err(r.error(format!("inconsistent entry {id}")));
            }
            let classes = annotation.classes();
            buf.count_classes(&classes, true);
            buf.byte_count += codes.byte_len();
            buf.entries.insert(id.clone(), BufferEntry { image_id: id, codes, annotation, insert_seq: seq });
        }
        r.expect_end()?;
        buf.next_seq = next_seq;
        Ok((buf, hash))
    }
}

/// Integer summary of class counts for the balance objective.
struct Histogram {
    k: i128,
    sum: i128,
    sum_sq: i128,
}

impl Histogram {
    fn of(counts: &BTreeMap<ClassId, usize>) -> Self {
        let k = counts.len() as i128;
        let sum = counts.values().map(|&n| n as i128).sum();
        let sum_sq = counts.values().map(|&n| (n as i128) * (n as i128)).sum();
        Self { k, sum, sum_sq }
    }

    /// `k^2 * variance` of the counts after decrementing each class in
    /// `removed`, over the currently present classes. Exact in integers.
    fn spread_without(&self, removed: &BTreeSet<ClassId>, counts: &BTreeMap<ClassId, usize>) -> i128 {
        let mut sum = self.sum;
        let mut sum_sq = self.sum_sq;
        for c in removed {
            let n = counts.get(c).copied().unwrap_or(0) as i128;
            sum -= 1;
            sum_sq -= 2 * n - 1;
        }
        self.k * sum_sq - sum * sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::types::LabeledBox;

    fn codes(id: &str) -> QuantizedFeatureMap {
        QuantizedFeatureMap::new(ImageId::new(id), 2, 2, 2, vec![0; 8]).unwrap()
    }

    fn ann(id: &str, classes: &[u32]) -> ImageAnnotation {
        let boxes = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let x = i as f64;
                LabeledBox::new(BoundingBox::new(x, 0.0, x + 1.0, 1.0).unwrap(), ClassId(c))
            })
            .collect();
        ImageAnnotation::new(ImageId::new(id), 10, 10, boxes).unwrap()
    }

    fn filled(policy: ReplacementPolicy) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(Capacity::Entries(3), policy, 1).unwrap();
        b.upsert(codes("A"), ann("A", &[1])).unwrap();
        b.upsert(codes("B"), ann("B", &[1, 2, 3])).unwrap();
        b.upsert(codes("C"), ann("C", &[2, 3])).unwrap();
        b
    }

    #[test]
    fn min_and_max_fixtures() {
        let mut b = filled(ReplacementPolicy::Min);
        let r = b.upsert(codes("D"), ann("D", &[4])).unwrap();
        assert_eq!(r.evicted, vec![ImageId::new("A")]);

        let mut b = filled(ReplacementPolicy::Max);
        let r = b.upsert(codes("D"), ann("D", &[4])).unwrap();
        assert_eq!(r.evicted, vec![ImageId::new("B")]);
    }

    #[test]
    fn ties_evict_the_oldest() {
        let mut b = ReplayBuffer::new(Capacity::Entries(10), ReplacementPolicy::Min, 0).unwrap();
        b.upsert(codes("B"), ann("B", &[1])).unwrap();
        b.upsert(codes("A"), ann("A", &[2])).unwrap();
        b.upsert(codes("C"), ann("C", &[1, 2, 3, 4, 5])).unwrap();
        assert_eq!(b.select_victim(ReplacementPolicy::Min, None).unwrap(), ImageId::new("B"));
    }

    #[test]
    fn merging_an_existing_image_grows_its_labels() {
        let mut b = filled(ReplacementPolicy::Min);
        let r = b.upsert(codes("A"), ann("A", &[1, 7])).unwrap();
        assert!(!r.inserted);
        assert_eq!(r.boxes_added, 1);
        assert!(r.evicted.is_empty());
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(&ImageId::new("A")).unwrap().unique_labels(), 2);
        assert_eq!(b.class_counts()[&ClassId(7)], 1);
    }

    #[test]
    fn balance_prefers_the_dominant_class() {
        let mut b = ReplayBuffer::new(Capacity::Entries(10), ReplacementPolicy::Bal, 0).unwrap();
        b.upsert(codes("A"), ann("A", &[1])).unwrap();
        b.upsert(codes("B"), ann("B", &[2])).unwrap();
        b.upsert(codes("C"), ann("C", &[3, 3])).unwrap();
        b.upsert(codes("D"), ann("D", &[3])).unwrap();
        b.upsert(codes("E"), ann("E", &[3, 1])).unwrap();
        // counts {1:2, 2:1, 3:3}; dropping C, D or E ties for the flattest result
        assert_eq!(b.select_victim(ReplacementPolicy::Bal, None).unwrap(), ImageId::new("C"));
    }

    #[test]
    fn single_entry_is_always_the_victim() {
        for p in [ReplacementPolicy::Min, ReplacementPolicy::Max, ReplacementPolicy::Bal, ReplacementPolicy::Random] {
            let mut b = ReplayBuffer::new(Capacity::Entries(5), p, 0).unwrap();
            b.upsert(codes("X"), ann("X", &[1])).unwrap();
            assert_eq!(b.select_victim(p, None).unwrap(), ImageId::new("X"));
        }
    }

    #[test]
    fn no_replace_grows_and_refuses_victims() {
        let mut b = ReplayBuffer::new(Capacity::Entries(1), ReplacementPolicy::NoReplace, 0).unwrap();
        for i in 0..5 {
            let id = format!("i{i}");
            assert!(b.upsert(codes(&id), ann(&id, &[1])).unwrap().evicted.is_empty());
        }
        assert_eq!(b.len(), 5);
        assert!(matches!(b.select_victim(ReplacementPolicy::NoReplace, None), Err(Error::Policy(_))));
    }

    #[test]
    fn zero_capacity_is_rejected() {
        assert!(matches!(
            ReplayBuffer::new(Capacity::Entries(0), ReplacementPolicy::Min, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn byte_capacity_counts_code_payloads() {
        let mut b = ReplayBuffer::new(Capacity::Bytes(20), ReplacementPolicy::Min, 0).unwrap();
        b.upsert(codes("A"), ann("A", &[1])).unwrap();
        b.upsert(codes("B"), ann("B", &[1, 2])).unwrap();
        assert_eq!(b.stats().byte_count, 16);
        let r = b.upsert(codes("C"), ann("C", &[3])).unwrap();
        assert_eq!(r.evicted, vec![ImageId::new("A")]);
        assert!(b.stats().byte_count <= 20);
    }

    #[test]
    fn stats_fixtures() {
        let b = ReplayBuffer::new(Capacity::Entries(17_668), ReplacementPolicy::Min, 0).unwrap();
        let s = b.stats();
        assert_eq!((s.entry_count, s.byte_count, s.class_counts.len()), (0, 0, 0));
        assert_eq!(b.capacity(), Capacity::Entries(17_668));

        let mut b = ReplayBuffer::new(Capacity::Entries(4), ReplacementPolicy::Min, 0).unwrap();
        let q = QuantizedFeatureMap::new(ImageId::new("big"), 25, 30, 64, vec![0; 48_000]).unwrap();
        b.upsert(q, ann("big", &[1])).unwrap();
        assert_eq!(b.stats().byte_count, 48_000);
    }

    #[test]
    fn sampling_is_seeded_and_distinct() {
        let mut b = ReplayBuffer::new(Capacity::Entries(100), ReplacementPolicy::Min, 0).unwrap();
        for i in 0..20 {
            let id = format!("i{i:02}");
            b.upsert(codes(&id), ann(&id, &[1])).unwrap();
        }
        let s1: Vec<_> = b.sample(4, 9, None).entries.iter().map(|e| e.image_id.clone()).collect();
        let s2: Vec<_> = b.sample(4, 9, None).entries.iter().map(|e| e.image_id.clone()).collect();
        assert_eq!(s1, s2);
        let set: BTreeSet<_> = s1.iter().collect();
        assert_eq!(set.len(), 4);

        let all = b.sample(20, 1, None);
        assert!(!all.truncated);
        assert_eq!(all.entries.len(), 20);
        let over = b.sample(25, 1, Some(&ImageId::new("i00")));
        assert!(over.truncated);
        assert_eq!(over.entries.len(), 19);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut b = filled(ReplacementPolicy::Random);
        b.upsert(codes("D"), ann("D", &[4])).unwrap();
        let hash = [7u8; 32];
        let bytes = b.to_bytes(&hash);
        let (mut back, h) = ReplayBuffer::from_bytes(&bytes, Some(&hash)).unwrap();
        assert_eq!(h, hash);
        assert_eq!(back.stats(), b.stats());
        assert_eq!(back.iter().collect::<Vec<_>>(), b.iter().collect::<Vec<_>>());
        // generator state survives, so the next random eviction agrees
        assert_eq!(
            back.select_victim(ReplacementPolicy::Random, None).unwrap(),
            b.select_victim(ReplacementPolicy::Random, None).unwrap()
        );
        assert!(ReplayBuffer::from_bytes(&bytes, Some(&[0u8; 32])).is_err());
        assert!(ReplayBuffer::from_bytes(&bytes[..bytes.len() - 2], None).is_err());
    }
}

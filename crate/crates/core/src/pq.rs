//! Product quantization of feature maps.
//!
//! Each `d`-channel cell is split into `s` contiguous sub-vectors of
//! `d / s` channels, and each sub-vector is replaced by the index of its
//! nearest centroid in that subspace's codebook. With at most 256 centroids
//! per codebook a cell compresses to `s` bytes.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest};
use crate::types::{FeatureMap, ImageId};

pub const PQ_MAGIC: &[u8; 4] = b"RPQ1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PqConfig {
    pub num_codebooks: usize,
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
    pub seed: u64,
}

fn default_codebook_size() -> usize {
    256
}

fn default_iters() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqModel {
    num_codebooks: usize,
    codebook_size: usize,
    subvector_dim: usize,
    /// `(subspace, centroid, dim)` order.
    centroids: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedFeatureMap {
    pub image_id: ImageId,
    grid_h: usize,
    grid_w: usize,
    num_codebooks: usize,
    codes: Vec<u8>,
}

impl QuantizedFeatureMap {
    pub fn new(
        image_id: ImageId,
        grid_h: usize,
        grid_w: usize,
        num_codebooks: usize,
        codes: Vec<u8>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || num_codebooks == 0 {
            return Err(Error::Domain("quantized map dims must be positive".into()));
        }
        if codes.len() != grid_h * grid_w * num_codebooks {
            return Err(Error::Corruption(format!(
                "expected {} code bytes, got {}",
                grid_h * grid_w * num_codebooks,
                codes.len()
            )));
        }
        Ok(Self { image_id, grid_h, grid_w, num_codebooks, codes })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }
    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Payload size in bytes, `p * q * s`.
    pub fn byte_len(&self) -> usize {
        self.codes.len()
    }
}

/// Draws `k` distinct grid locations uniformly and returns their channel vectors.
pub fn subsample_locations(fmap: &FeatureMap, k: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    let n = fmap.locations();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("cannot draw {k} of {n} locations")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, n, k)
        .into_iter()
        .map(|i| fmap.location(i).to_vec())
        .collect())
}

/// Every location of a map as a separate vector.
pub fn all_locations(fmap: &FeatureMap) -> Vec<Vec<f32>> {
    (0..fmap.locations()).map(|i| fmap.location(i).to_vec()).collect()
}

/// Fits one codebook per subspace. Subspaces are trained on scoped threads;
/// each uses a seed derived from `cfg.seed` and its index, so results do not
/// depend on scheduling.
pub fn train_pq(samples: &[Vec<f32>], cfg: &PqConfig) -> Result<PqModel> {
    Ok(train_pq_traced(samples, cfg)?.0)
}

/// Same as [`train_pq`], also returning each subspace's k-means objective trace.
pub fn train_pq_traced(samples: &[Vec<f32>], cfg: &PqConfig) -> Result<(PqModel, Vec<Vec<f64>>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("no samples to train the quantizer".into()))?;
    let d = first.len();
    let s = cfg.num_codebooks;
    if s == 0 || d == 0 || d % s != 0 {
        return Err(Error::Config(format!("{s} codebooks do not divide {d} channels")));
    }
    if cfg.codebook_size == 0 || cfg.codebook_size > 256 {
        return Err(Error::Config(format!(
            "codebook size {} must lie in 1..=256",
            cfg.codebook_size
        )));
    }
    if samples.len() < cfg.codebook_size {
        return Err(Error::Config(format!(
            "{} samples cannot fit {} centroids",
            samples.len(),
            cfg.codebook_size
        )));
    }
    if let Some(bad) = samples.iter().position(|v| v.len() != d) {
        return Err(Error::Config(format!("sample {bad} has {} channels, expected {d}", samples[bad].len())));
    }
    let sd = d / s;

    let results: Vec<Result<crate::kmeans::KMeans>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..s)
            .map(|sub| {
                scope.spawn(move || {
                    let data: Vec<f64> = samples
                        .iter()
                        .flat_map(|v| v[sub * sd..(sub + 1) * sd].iter().map(|&x| x as f64))
                        .collect();
                    let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(sub as u64);
                    kmeans(&data, sd, cfg.codebook_size, cfg.iters, seed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("k-means worker panicked")).collect()
    });

    let mut centroids = Vec::with_capacity(s * cfg.codebook_size * sd);
    let mut traces = Vec::with_capacity(s);
    for r in results {
        let km = r?;
        centroids.extend(km.centroids.iter().map(|&c| c as f32));
        traces.push(km.trace);
    }
    let model = PqModel::from_parts(s, cfg.codebook_size, sd, centroids)?;
    Ok((model, traces))
}

impl PqModel {
    pub fn from_parts(
        num_codebooks: usize,
        codebook_size: usize,
        subvector_dim: usize,
        centroids: Vec<f32>,
    ) -> Result<Self> {
        if num_codebooks == 0 || subvector_dim == 0 || codebook_size == 0 || codebook_size > 256 {
            return Err(Error::Config(format!(
                "invalid quantizer shape s={num_codebooks} k={codebook_size} dim={subvector_dim}"
            )));
        }
        if centroids.len() != num_codebooks * codebook_size * subvector_dim {
            return Err(Error::Corruption(format!(
                "expected {} centroid values, got {}",
                num_codebooks * codebook_size * subvector_dim,
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("quantizer centroid".into()));
        }
        Ok(Self { num_codebooks, codebook_size, subvector_dim, centroids })
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }
    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }
    pub fn subvector_dim(&self) -> usize {
        self.subvector_dim
    }
    pub fn channels(&self) -> usize {
        self.num_codebooks * self.subvector_dim
    }

    pub fn centroid(&self, subspace: usize, code: usize) -> &[f32] {
        let start = (subspace * self.codebook_size + code) * self.subvector_dim;
        &self.centroids[start..start + self.subvector_dim]
    }

    fn codebook(&self, subspace: usize) -> &[f32] {
        let len = self.codebook_size * self.subvector_dim;
        &self.centroids[subspace * len..(subspace + 1) * len]
    }

    /// Codes for a single `d`-channel vector.
    pub fn encode_vector(&self, v: &[f32], out: &mut Vec<u8>) {
        let sd = self.subvector_dim;
        let mut sub = vec![0.0f64; sd];
        for s in 0..self.num_codebooks {
            for (dst, &x) in sub.iter_mut().zip(&v[s * sd..(s + 1) * sd]) {
                *dst = x as f64;
            }
            let book: Vec<f64> = self.codebook(s).iter().map(|&c| c as f64).collect();
            out.push(nearest(&sub, &book, sd).0 as u8);
        }
    }

    pub fn encode(&self, fmap: &FeatureMap) -> Result<QuantizedFeatureMap> {
        if fmap.channels() != self.channels() {
            return Err(Error::Domain(format!(
                "feature map has {} channels, quantizer expects {}",
                fmap.channels(),
                self.channels()
            )));
        }
        let sd = self.subvector_dim;
        let books: Vec<Vec<f64>> = (0..self.num_codebooks)
            .map(|s| self.codebook(s).iter().map(|&c| c as f64).collect())
            .collect();
        let mut codes = Vec::with_capacity(fmap.locations() * self.num_codebooks);
        let mut sub = vec![0.0f64; sd];
        for i in 0..fmap.locations() {
            let cell = fmap.location(i);
            for (s, book) in books.iter().enumerate() {
                for (dst, &x) in sub.iter_mut().zip(&cell[s * sd..(s + 1) * sd]) {
                    *dst = x as f64;
                }
                codes.push(nearest(&sub, book, sd).0 as u8);
            }
        }
        QuantizedFeatureMap::new(
            fmap.image_id.clone(),
            fmap.grid_h(),
            fmap.grid_w(),
            self.num_codebooks,
            codes,
        )
    }

    pub fn decode(&self, q: &QuantizedFeatureMap) -> Result<FeatureMap> {
        if q.num_codebooks != self.num_codebooks {
            return Err(Error::Domain(format!(
                "codes use {} codebooks, quantizer has {}",
                q.num_codebooks, self.num_codebooks
            )));
        }
        let mut values = Vec::with_capacity(q.grid_h * q.grid_w * self.channels());
        for (i, cell) in q.codes.chunks_exact(self.num_codebooks).enumerate() {
            for (s, &code) in cell.iter().enumerate() {
                if code as usize >= self.codebook_size {
                    return Err(Error::Corruption(format!(
                        "code {code} at cell {i} subspace {s} exceeds codebook size {}",
                        self.codebook_size
                    )));
                }
                values.extend_from_slice(self.centroid(s, code as usize));
            }
        }
        FeatureMap::new(q.image_id.clone(), q.grid_h, q.grid_w, self.channels(), values)
    }

    /// Mean squared reconstruction error per channel over `samples`.
    pub fn reconstruction_mse(&self, samples: &[Vec<f32>]) -> f64 {
        let mut codes = Vec::with_capacity(self.num_codebooks);
        let mut total = 0.0;
        for v in samples {
            codes.clear();
            self.encode_vector(v, &mut codes);
            for (s, &c) in codes.iter().enumerate() {
                let cen = self.centroid(s, c as usize);
                let part = &v[s * self.subvector_dim..(s + 1) * self.subvector_dim];
                total += part
                    .iter()
                    .zip(cen)
                    .map(|(&a, &b)| {
                        let e = a as f64 - b as f64;
                        e * e
                    })
                    .sum::<f64>();
            }
        }
        total / (samples.len() * self.channels()).max(1) as f64
    }

    /// `RPQ1` followed by little-endian `u32` s, codebook size, sub-vector
    /// dim, then the centroids as little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.centroids.len() * 4);
        out.extend_from_slice(PQ_MAGIC);
        for v in [self.num_codebooks, self.codebook_size, self.subvector_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for c in &self.centroids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::io::ByteReader::new(bytes);
        r.expect_magic(PQ_MAGIC)?;
        let s = r.u32()? as usize;
        let k = r.u32()? as usize;
        let sd = r.u32()? as usize;
        let n = s
            .checked_mul(k)
            .and_then(|v| v.checked_mul(sd))
            .ok_or_else(|| r.error("centroid count overflows"))?;
        let centroids = r.f32_vec(n)?;
        r.expect_end()?;
        Self::from_parts(s, k, sd, centroids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn map_from(id: &str, h: usize, w: usize, d: usize, values: Vec<f32>) -> FeatureMap {
        FeatureMap::new(ImageId::new(id), h, w, d, values).unwrap()
    }

    fn tiny_model() -> PqModel {
        // 2 subspaces of dim 2, 3 centroids each
        let c = vec![
            0.0, 0.0, 1.0, 0.0, 0.0, 1.0, //
            5.0, 5.0, -5.0, 5.0, 5.0, -5.0,
        ];
        PqModel::from_parts(2, 3, 2, c).unwrap()
    }

    #[test]
    fn subvector_dims_for_reference_settings() {
        for (d, s, sd) in [(2048, 64, 32), (2048, 32, 64)] {
            let m = PqModel::from_parts(s, 1, d / s, vec![0.0; d]).unwrap();
            assert_eq!(m.subvector_dim(), sd);
        }
    }

    #[test]
    fn reference_compression_ratio() {
        let q = QuantizedFeatureMap::new(ImageId::new("x"), 25, 30, 64, vec![0; 25 * 30 * 64]).unwrap();
        assert_eq!(q.byte_len(), 48_000);
        assert_eq!(25 * 30 * 2048 * 4 / q.byte_len(), 128);
    }

    #[test]
    fn centroid_valued_map_is_a_fixed_point() {
        let m = tiny_model();
        let vals = vec![1.0, 0.0, -5.0, 5.0, 0.0, 1.0, 5.0, -5.0];
        let fm = map_from("a", 1, 2, 4, vals);
        let q = m.encode(&fm).unwrap();
        assert_eq!(q.codes(), &[1, 1, 2, 2]);
        assert_eq!(m.decode(&q).unwrap(), fm);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let m = PqModel::from_parts(1, 2, 1, vec![-1.0, 1.0]).unwrap();
        let q = m.encode(&map_from("t", 1, 1, 1, vec![0.0])).unwrap();
        assert_eq!(q.codes(), &[0]);
    }

    #[test]
    fn zero_codes_decode_to_first_centroids() {
        let m = tiny_model();
        let q = QuantizedFeatureMap::new(ImageId::new("z"), 1, 1, 2, vec![0, 0]).unwrap();
        assert_eq!(m.decode(&q).unwrap().values(), &[0.0, 0.0, 5.0, 5.0]);
    }

    #[test]
    fn out_of_range_code_is_corruption() {
        let m = tiny_model();
        let q = QuantizedFeatureMap::new(ImageId::new("z"), 1, 1, 2, vec![0, 3]).unwrap();
        assert!(matches!(m.decode(&q), Err(Error::Corruption(_))));
    }

    #[test]
    fn encode_rejects_channel_mismatch() {
        let m = tiny_model();
        let fm = map_from("a", 1, 1, 3, vec![0.0; 3]);
        assert!(matches!(m.encode(&fm), Err(Error::Domain(_))));
    }

    #[test]
    fn training_config_errors() {
        let samples = vec![vec![0.0f32; 6]; 4];
        let bad_split = PqConfig { num_codebooks: 4, codebook_size: 2, iters: 5, seed: 0 };
        assert!(matches!(train_pq(&samples, &bad_split), Err(Error::Config(_))));
        let too_big = PqConfig { num_codebooks: 2, codebook_size: 8, iters: 5, seed: 0 };
        assert!(matches!(train_pq(&samples, &too_big), Err(Error::Config(_))));
    }

    #[test]
    fn distinct_samples_are_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<Vec<f32>> = (0..16).map(|_| (0..8).map(|_| rng.random()).collect()).collect();
        let cfg = PqConfig { num_codebooks: 2, codebook_size: 16, iters: 10, seed: 3 };
        let m = train_pq(&samples, &cfg).unwrap();
        assert_eq!(m.reconstruction_mse(&samples), 0.0);
    }

    #[test]
    fn subsampling_draws_distinct_locations() {
        let d = 3;
        let vals: Vec<f32> = (0..25 * 30 * d).map(|i| i as f32).collect();
        let fm = map_from("s", 25, 30, d, vals);
        let picks = subsample_locations(&fm, 30, 1).unwrap();
        assert_eq!(picks.len(), 30);
        let mut firsts: Vec<i64> = picks.iter().map(|v| v[0] as i64).collect();
        firsts.sort();
        firsts.dedup();
        assert_eq!(firsts.len(), 30);
        assert_eq!(picks, subsample_locations(&fm, 30, 1).unwrap());

        let all = subsample_locations(&fm, 750, 2).unwrap();
        let mut got: Vec<i64> = all.iter().map(|v| v[0] as i64).collect();
        got.sort();
        let want: Vec<i64> = (0..750).map(|i| (i * d) as i64).collect();
        assert_eq!(got, want);

        let one = subsample_locations(&fm, 1, 9).unwrap();
        assert!(all_locations(&fm).contains(&one[0]));
        assert!(subsample_locations(&fm, 751, 0).is_err());
    }

    #[test]
    fn serialization_layout() {
        let m = tiny_model();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"RPQ1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 12 * 4);
        assert_eq!(PqModel::from_bytes(&bytes).unwrap(), m);
        assert!(PqModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

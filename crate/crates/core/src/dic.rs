//! Dynamic implicit conditioning: choose the noising step per image from the
//! mean L1 distance of its pooled features to the K nearest training features.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{self, Reader};
use crate::nets::FeatureExtractor;

/// Training feature vectors searched with an exact L1 scan.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    dim: usize,
    k: usize,
    /// 1-based extractor block the vectors come from.
    block: usize,
    vectors: Vec<f32>,
}

impl FeatureIndex {
    pub fn from_vectors(vectors: Vec<Vec<f32>>, k: usize, block: usize) -> Result<Self> {
        let dim = vectors
            .first()
            .map(|v| v.len())
            .ok_or_else(|| Error::EmptyDataset("feature index needs at least one vector".into()))?;
        if dim == 0 {
            return Err(Error::ShapeMismatch("zero-length feature vectors".into()));
        }
        if let Some(bad) = vectors.iter().position(|v| v.len() != dim) {
            return Err(Error::ShapeMismatch(format!(
                "vector {bad} has length {} but index dimension is {dim}",
                vectors[bad].len()
            )));
        }
        if k == 0 || k > vectors.len() {
            return Err(Error::NotEnoughNeighbors { k, available: vectors.len() });
        }
        Ok(Self { dim, k, block, vectors: vectors.concat() })
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }
}

/// Pools block `block` of the extractor for every image into the index.
pub fn build_feature_index(
    images: &[Image],
    extractor: &FeatureExtractor,
    block: usize,
    k: usize,
) -> Result<FeatureIndex> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no training images for the feature index".into()));
    }
    let vectors = extractor.pooled_features(images, block)?;
    FeatureIndex::from_vectors(vectors, k, block)
}

pub fn l1_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum()
}

/// Mean L1 distance to the K nearest index entries. With `exclude_self`, one
/// exact (zero-distance) match is dropped first.
pub fn mean_knn_distance(y0: &[f32], index: &FeatureIndex, exclude_self: bool) -> Result<f64> {
    if y0.len() != index.dim {
        return Err(Error::ShapeMismatch(format!(
            "query has {} dims, index has {}",
            y0.len(),
            index.dim
        )));
    }
    let mut dists: Vec<f64> = index.vectors().map(|v| l1_distance(y0, v)).collect();
    if exclude_self {
        if let Some(pos) = dists.iter().position(|&d| d == 0.0) {
            dists.swap_remove(pos);
        }
    }
    let k = index.k;
    if k > dists.len() {
        return Err(Error::NotEnoughNeighbors { k, available: dists.len() });
    }
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        dists.truncate(k);
    }
    dists.sort_unstable_by(f64::total_cmp);
    Ok(dists.iter().sum::<f64>() / k as f64)
}

/// Leave-one-out mean distances of every training vector.
pub fn training_mean_distances(index: &FeatureIndex) -> Result<Vec<f64>> {
    index.vectors().map(|v| mean_knn_distance(v, index, true)).collect()
}

/// Equidistant bins over the training mean distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    edges: Vec<f64>,
    t_max: usize,
    min_bin: usize,
}

pub fn build_bins(train_mean_distances: &[f64], num_bins: usize, t_max: usize, min_bin: usize) -> Result<BinTable> {
    if num_bins < 1 {
        return Err(Error::InvalidConfig("need at least one bin".into()));
    }
    if min_bin < 1 || min_bin > num_bins {
        return Err(Error::InvalidConfig(format!("min_bin {min_bin} outside [1, {num_bins}]")));
    }
    if t_max < 1 {
        return Err(Error::InvalidConfig("T_max must be >= 1".into()));
    }
    if train_mean_distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidConfig("non-finite training distance".into()));
    }
    let lo = train_mean_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = train_mean_distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if train_mean_distances.is_empty() {
        return Err(Error::EmptyDataset("no training distances for bin construction".into()));
    }
    if lo == hi {
        return Err(Error::DegenerateBins { value: lo });
    }
    let mut edges: Vec<f64> = (0..=num_bins)
        .map(|i| lo + (hi - lo) * i as f64 / num_bins as f64)
        .collect();
    edges[num_bins] = hi;
    BinTable::from_edges(edges, t_max, min_bin)
}

impl BinTable {
    pub fn from_edges(edges: Vec<f64>, t_max: usize, min_bin: usize) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("bin edges must be strictly increasing".into()));
        }
        let num_bins = edges.len() - 1;
        if min_bin < 1 || min_bin > num_bins {
            return Err(Error::InvalidConfig(format!("min_bin {min_bin} outside [1, {num_bins}]")));
        }
        Ok(Self { edges, t_max, min_bin })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn min_bin(&self) -> usize {
        self.min_bin
    }

    /// Bin of a value before the `min_bin` floor, by binary search over the
    /// edges. Bins are half-open `[e_i, e_{i+1})`, the last one closed;
    /// out-of-range values clamp to the first or last bin.
    pub fn raw_bin(&self, value: f64) -> usize {
        let at_or_below = self.edges.partition_point(|&e| e <= value);
        at_or_below.clamp(1, self.num_bins())
    }

    /// 1-based bin in `[min_bin, |B|]`.
    pub fn assign_bin(&self, value: f64) -> usize {
        self.raw_bin(value).max(self.min_bin)
    }
}

pub fn assign_bin(mean_distance: f64, table: &BinTable) -> usize {
    table.assign_bin(mean_distance)
}

/// Where the minimum-bin floor sits relative to the rounding of the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FloorOrder {
    /// Floor the bin, compute the step, round last.
    #[default]
    FloorThenRound,
    /// Round the step of the unfloored bin, then raise it to the rounded
    /// step of `min_bin`.
    RoundThenFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepRounding {
    pub multiple: usize,
    pub order: FloorOrder,
}

impl Default for StepRounding {
    fn default() -> Self {
        Self { multiple: 10, order: FloorOrder::FloorThenRound }
    }
}

fn round_to_multiple(v: usize, m: usize) -> usize {
    if m <= 1 {
        return v;
    }
    // half rounds up
    (v + m / 2) / m * m
}

/// `floor(b / |B| * T_max)`, rounded to the nearest multiple and clamped to
/// `[multiple, T_max]`.
pub fn dynamic_step(bin: usize, table: &BinTable, rounding: &StepRounding) -> usize {
    let b = bin.clamp(1, table.num_bins());
    let m = rounding.multiple.max(1);
    let step_of = |b: usize| {
        let raw = b * table.t_max / table.num_bins();
        round_to_multiple(raw, m).clamp(m.min(table.t_max), table.t_max)
    };
    match rounding.order {
        FloorOrder::FloorThenRound => step_of(b.max(table.min_bin)),
        FloorOrder::RoundThenFloor => step_of(b).max(step_of(table.min_bin)),
    }
}

/// Index, bins and rounding rule: everything needed to map an image to its step.
#[derive(Debug, Clone, PartialEq)]
pub struct DicModel {
    pub index: FeatureIndex,
    pub table: BinTable,
    pub rounding: StepRounding,
    /// Parameter fingerprint of the extractor the index was built with;
    /// empty when unknown.
    pub extractor: String,
}

/// Per-image outcome of the conditioning step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepChoice {
    pub mean_distance: f64,
    pub bin: usize,
    pub t_hat: usize,
}

const MAGIC: &[u8; 8] = b"DYNADIDX";
const VERSION: u32 = 1;

impl DicModel {
    /// Builds index and bins from nominal training images.
    pub fn fit(
        images: &[Image],
        extractor: &FeatureExtractor,
        block: usize,
        k: usize,
        num_bins: usize,
        t_max: usize,
        min_bin: usize,
        rounding: StepRounding,
    ) -> Result<Self> {
        let index = build_feature_index(images, extractor, block, k)?;
        let means = training_mean_distances(&index)?;
        let table = build_bins(&means, num_bins, t_max, min_bin)?;
        Ok(Self { index, table, rounding, extractor: extractor.fingerprint()? })
    }

    /// Fails when `extractor` is not the one the index was built with.
    pub fn check_extractor(&self, extractor: &FeatureExtractor) -> Result<()> {
        if self.extractor.is_empty() || self.extractor == extractor.fingerprint()? {
            return Ok(());
        }
        Err(Error::InvalidConfig(
            "feature index was built with a different feature extractor; rebuild the index".into(),
        ))
    }

    pub fn choose(&self, feature: &[f32]) -> Result<StepChoice> {
        let mean_distance = mean_knn_distance(feature, &self.index, false)?;
        let bin = self.table.assign_bin(mean_distance);
        Ok(StepChoice { mean_distance, bin, t_hat: dynamic_step(bin, &self.table, &self.rounding) })
    }

    /// Steps for a batch of images, extracting features from `extractor`.
    pub fn choose_for_images(&self, extractor: &FeatureExtractor, images: &[Image]) -> Result<Vec<StepChoice>> {
        if self.index.block() > extractor.num_blocks() {
            return Err(Error::InvalidConfig(format!(
                "index was built from block {} but the extractor has {} blocks",
                self.index.block(),
                extractor.num_blocks()
            )));
        }
        let feats = extractor.pooled_features(images, self.index.block())?;
        feats.iter().map(|f| self.choose(f)).collect()
    }

    /// Header (magic, version, dim, N, K, block, |B|, T_max, min_bin, rounding,
    /// edges as f64, extractor fingerprint as length-prefixed UTF-8) followed
    /// by the raw little-endian f32 vectors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.index.dim as u32,
            self.index.len() as u32,
            self.index.k as u32,
            self.index.block as u32,
            self.table.num_bins() as u32,
            self.table.t_max as u32,
            self.table.min_bin as u32,
            self.rounding.multiple as u32,
            match self.rounding.order {
                FloorOrder::FloorThenRound => 0,
                FloorOrder::RoundThenFloor => 1,
            },
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.table.edges {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.extend_from_slice(&(self.extractor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.extractor.as_bytes());
        io::push_f32s(&mut out, &self.index.vectors);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a feature index file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let mut h = [0usize; 9];
        for v in h.iter_mut() {
            *v = r.u32()? as usize;
        }
        let [dim, n, k, block, num_bins, t_max, min_bin, multiple, order] = h;
        let edges = (0..=num_bins).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let len = r.u32()? as usize;
        let extractor = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("extractor fingerprint is not UTF-8".into()))?;
        let flat = r.f32s(dim * n)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes in index file", r.remaining())));
        }
        let vectors = flat.chunks_exact(dim.max(1)).map(|c| c.to_vec()).collect();
        let index = FeatureIndex::from_vectors(vectors, k, block)?;
        let table = BinTable::from_edges(edges, t_max, min_bin)?;
        let order = match order {
            0 => FloorOrder::FloorThenRound,
            1 => FloorOrder::RoundThenFloor,
            o => return Err(Error::Format(format!("unknown floor order {o}"))),
        };
        Ok(Self { index, table, rounding: StepRounding { multiple, order }, extractor })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_table() -> BinTable {
        // |B| = 10, T_max = 80, min_bin = 2
        let edges = (0..=10).map(|i| i as f64).collect();
        BinTable::from_edges(edges, 80, 2).unwrap()
    }

    /// Brute-force neighbour oracle: full sort of all distances.
    fn knn_oracle(y0: &[f32], vectors: &[Vec<f32>], k: usize) -> f64 {
        let mut d: Vec<f64> = vectors
            .iter()
            .map(|v| v.iter().zip(y0).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum())
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d[..k].iter().sum::<f64>() / k as f64
    }

    #[test]
    fn knn_example() {
        let idx = FeatureIndex::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]], 2, 2).unwrap();
        assert_eq!(mean_knn_distance(&[0.0, 0.0], &idx, false).unwrap(), 1.5);
        let idx1 = FeatureIndex::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 2.0]], 1, 2).unwrap();
        assert_eq!(mean_knn_distance(&[0.0, 2.0], &idx1, false).unwrap(), 0.0);
        assert_eq!(mean_knn_distance(&[0.0, 2.0], &idx1, true).unwrap(), 3.0);
    }

    #[test]
    fn knn_errors() {
        let idx = FeatureIndex::from_vectors(vec![vec![1.0], vec![2.0]], 2, 1).unwrap();
        assert!(matches!(
            mean_knn_distance(&[1.0], &idx, true),
            Err(Error::NotEnoughNeighbors { k: 2, available: 1 })
        ));
        assert!(mean_knn_distance(&[1.0, 2.0], &idx, false).is_err());
        assert!(FeatureIndex::from_vectors(vec![vec![1.0]], 2, 1).is_err());
        assert!(FeatureIndex::from_vectors(vec![], 1, 1).is_err());
    }

    #[test]
    fn bins_examples() {
        let t = build_bins(&[1.0, 2.0, 3.0], 2, 80, 1).unwrap();
        assert_eq!(t.edges(), &[1.0, 2.0, 3.0]);
        let t = build_bins(&[0.0, 10.0], 10, 80, 2).unwrap();
        for w in t.edges().windows(2) {
            assert_eq!(w[1] - w[0], 1.0);
        }
        assert!(matches!(build_bins(&[2.0, 2.0, 2.0], 10, 80, 2), Err(Error::DegenerateBins { .. })));
        assert!(build_bins(&[0.0, 1.0], 10, 80, 11).is_err());
    }

    #[test]
    fn assign_bin_examples() {
        let t = BinTable::from_edges(vec![1.0, 2.0, 3.0], 80, 2).unwrap();
        assert_eq!(t.raw_bin(1.4), 1);
        assert_eq!(assign_bin(1.4, &t), 2);
        assert_eq!(assign_bin(99.0, &t), 2);
        let t = paper_table();
        assert_eq!(assign_bin(99.0, &t), 10);
        assert_eq!(assign_bin(-5.0, &t), 2);
        // interior edge goes to the upper bin
        assert_eq!(t.raw_bin(3.0), 4);
        // the last edge belongs to the last bin
        assert_eq!(t.raw_bin(10.0), 10);
    }

    #[test]
    fn dynamic_step_examples() {
        let t = paper_table();
        let r = StepRounding::default();
        assert_eq!(dynamic_step(2, &t, &r), 20);
        assert_eq!(dynamic_step(10, &t, &r), 80);
        assert_eq!(dynamic_step(5, &t, &r), 40);
        assert_eq!(dynamic_step(1, &t, &r), 20);
        let other = StepRounding { multiple: 10, order: FloorOrder::RoundThenFloor };
        assert_eq!(dynamic_step(1, &t, &other), 20);
        assert_eq!(dynamic_step(7, &t, &other), 60);
        let odd = BinTable::from_edges((0..=10).map(f64::from).collect(), 85, 2).unwrap();
        assert_eq!(dynamic_step(10, &odd, &r), 85);
    }

    #[test]
    fn persistence_roundtrip() {
        let idx = FeatureIndex::from_vectors(vec![vec![1.0, 0.5], vec![0.0, 2.0], vec![3.0, 0.25]], 2, 2).unwrap();
        let table = build_bins(&[0.1, 0.7, 0.3], 10, 80, 2).unwrap();
        let m = DicModel { index: idx, table, rounding: StepRounding::default(), extractor: "ab12".into() };
        let bytes = m.to_bytes();
        assert_eq!(DicModel::from_bytes(&bytes).unwrap(), m);
        assert!(DicModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.bin");
        m.save(&p).unwrap();
        assert_eq!(DicModel::load(&p).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn knn_matches_oracle(
            vectors in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3), 4..30),
            query in prop::collection::vec(-8.0f32..8.0, 3),
            k in 1usize..4,
        ) {
            let idx = FeatureIndex::from_vectors(vectors.clone(), k, 1).unwrap();
            let got = mean_knn_distance(&query, &idx, false).unwrap();
            let want = knn_oracle(&query, &vectors, k);
            prop_assert_eq!(got, want);
            // the mean of K nearest is at least the nearest distance
            prop_assert!(got >= knn_oracle(&query, &vectors, 1));
        }

        #[test]
        fn edges_evenly_spaced(values in prop::collection::vec(-100.0f64..100.0, 2..50), bins in 1usize..30) {
            prop_assume!(values.iter().any(|v| *v != values[0]));
            let t = build_bins(&values, bins, 80, 1).unwrap();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let spacing = (hi - lo) / bins as f64;
            for (i, e) in t.edges().iter().enumerate() {
                // brute-force linear space
                let want = lo + spacing * i as f64;
                prop_assert!((e - want).abs() <= 1e-9 * (hi - lo).max(1.0));
            }
            for w in t.edges().windows(2) {
                prop_assert!(((w[1] - w[0]) - spacing).abs() <= 1e-6 * spacing);
            }
        }

        #[test]
        fn step_monotone_and_bounded(a in -5.0f64..15.0, b in -5.0f64..15.0) {
            let t = paper_table();
            let r = StepRounding::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (bl, bh) = (t.assign_bin(lo), t.assign_bin(hi));
            prop_assert!(bl <= bh);
            let (sl, sh) = (dynamic_step(bl, &t, &r), dynamic_step(bh, &t, &r));
            prop_assert!(sl <= sh);
            prop_assert!(sl >= dynamic_step(t.min_bin(), &t, &r));
            prop_assert!(sh <= t.t_max());
        }
    }
}

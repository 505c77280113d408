//! Seeded fixtures shared by the benchmarks.

use dynad_core::{FeatureIndex, Map, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` random feature vectors of width `dim`, indexed for `k` neighbours.
pub fn random_index(n: usize, dim: usize, k: usize, seed: u64) -> (FeatureIndex, Vec<f32>) {
    let mut r = rng(seed);
    let vectors: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| r.random::<f32>()).collect()).collect();
    let query = (0..dim).map(|_| r.random::<f32>()).collect();
    (FeatureIndex::from_vectors(vectors, k, 2).expect("valid index"), query)
}

/// Score maps with a square defect per image and a map that mostly agrees.
pub fn maps_and_masks(count: usize, side: usize, seed: u64) -> (Vec<Map>, Vec<Mask>) {
    let mut r = rng(seed);
    let mut maps = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let (y0, x0) = (r.random_range(0..side / 2), r.random_range(0..side / 2));
        let mask = Mask::from_fn(side, side, |y, x| (y0..y0 + side / 4).contains(&y) && (x0..x0 + side / 4).contains(&x));
        let map = Map::from_fn(side, side, |y, x| {
            let base = if mask.get(y, x) { 0.6 } else { 0.0 };
            base + r.random::<f32>() * 0.5
        });
        maps.push(map);
        masks.push(mask);
    }
    (maps, masks)
}

//! Georeference neighborhoods and the similar-pair sampler.
//!
//! Two images are "similar" when their depth-weighted distance
//! `sqrt(dE^2 + dN^2 + lambda * dD^2)` is at most `r`. The index buckets
//! points on a uniform grid whose cells are `r` wide along easting/northing
//! and `r / sqrt(lambda)` deep, so a query touches at most 27 cells (9 when
//! `lambda == 0` and depth drops out).

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{GeoRef, GeorefImage, ImageId};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSamplerConfig {
    pub r: f64,
    pub lambda: f64,
    pub rng_seed: u64,
}

impl Default for PairSamplerConfig {
    fn default() -> Self {
        PairSamplerConfig {
            r: 1.0,
            lambda: 1.0,
            rng_seed: 0,
        }
    }
}

impl PairSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.r >= 0.0) {
            return Err(Error::Config(format!("r must be finite and >= 0, got {}", self.r)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

pub fn weighted_distance(a: &GeoRef, b: &GeoRef, lambda: f64) -> f64 {
    let de = b.easting - a.easting;
    let dn = b.northing - a.northing;
    let dd = b.depth - a.depth;
    (de * de + dn * dn + lambda * dd * dd).sqrt()
}

type CellKey = (i64, i64, i64);

#[derive(Debug, Clone)]
pub struct GeoIndex {
    ids: Vec<ImageId>,
    georefs: Vec<GeoRef>,
    position: HashMap<ImageId, usize>,
    cells: HashMap<CellKey, Vec<usize>>,
    r: f64,
    lambda: f64,
    cell_edge: f64,
}

impl GeoIndex {
    pub fn build(entries: &[(ImageId, GeoRef)], config: &PairSamplerConfig) -> Result<Self> {
        config.validate()?;
        if entries.is_empty() {
            return Err(Error::Data("cannot index an empty image list".into()));
        }
        // Slightly oversized cells keep `floor` rounding from splitting a
        // qualifying pair across non-adjacent cells.
        let cell_edge = config.r * (1.0 + 1e-9);
        let mut index = GeoIndex {
            ids: Vec::with_capacity(entries.len()),
            georefs: Vec::with_capacity(entries.len()),
            position: HashMap::with_capacity(entries.len()),
            cells: HashMap::new(),
            r: config.r,
            lambda: config.lambda,
            cell_edge,
        };
        for (i, (id, g)) in entries.iter().enumerate() {
            g.validate()?;
            if index.position.insert(*id, i).is_some() {
                return Err(Error::Data(format!("duplicate image id {id} in index")));
            }
            index.ids.push(*id);
            index.georefs.push(*g);
            if config.r > 0.0 {
                let key = index.cell_of(g);
                index.cells.entry(key).or_default().push(i);
            }
        }
        Ok(index)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn georef(&self, id: ImageId) -> Option<GeoRef> {
        self.position.get(&id).map(|&i| self.georefs[i])
    }

    fn cell_of(&self, g: &GeoRef) -> CellKey {
        let z = if self.lambda > 0.0 {
            (g.depth * self.lambda.sqrt() / self.cell_edge).floor() as i64
        } else {
            0
        };
        (
            (g.easting / self.cell_edge).floor() as i64,
            (g.northing / self.cell_edge).floor() as i64,
            z,
        )
    }

    /// Ids within weighted distance `r` of `id`, excluding `id` itself, in
    /// index order. Empty when `r == 0`.
    pub fn neighbors(&self, id: ImageId) -> Result<Vec<ImageId>> {
        let &pos = self
            .position
            .get(&id)
            .ok_or_else(|| Error::Data(format!("image id {id} not in index")))?;
        if self.r == 0.0 {
            return Ok(Vec::new());
        }
        let anchor = self.georefs[pos];
        let (cx, cy, cz) = self.cell_of(&anchor);
        let dz_range = if self.lambda > 0.0 { -1..=1 } else { 0..=0 };
        let mut found = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in dz_range.clone() {
                    let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    found.extend(bucket.iter().copied().filter(|&j| {
                        j != pos && weighted_distance(&anchor, &self.georefs[j], self.lambda) <= self.r
                    }));
                }
            }
        }
        found.sort_unstable();
        Ok(found.into_iter().map(|j| self.ids[j]).collect())
    }

    /// Draws the partner for `anchor`: uniform over its neighbors, or the
    /// anchor itself when it has none. The fallback consumes no randomness.
    pub fn sample_similar(&self, anchor: ImageId, rng: &mut Rng) -> Result<ImageId> {
        let candidates = self.neighbors(anchor)?;
        if candidates.is_empty() {
            return Ok(anchor);
        }
        Ok(candidates[rng.random_range(0..candidates.len())])
    }
}

pub fn build_index(images: &[GeorefImage], config: &PairSamplerConfig) -> Result<GeoIndex> {
    let entries: Vec<_> = images.iter().map(|im| (im.id, im.georef)).collect();
    GeoIndex::build(&entries, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn g(e: f64, n: f64, d: f64) -> GeoRef {
        GeoRef {
            easting: e,
            northing: n,
            depth: d,
        }
    }

    fn cfg(r: f64, lambda: f64) -> PairSamplerConfig {
        PairSamplerConfig {
            r,
            lambda,
            rng_seed: 0,
        }
    }

    fn brute_force(points: &[(ImageId, GeoRef)], id: ImageId, r: f64, lambda: f64) -> Vec<ImageId> {
        let a = points.iter().find(|p| p.0 == id).unwrap().1;
        if r == 0.0 {
            return vec![];
        }
        points
            .iter()
            .filter(|(j, b)| *j != id && weighted_distance(&a, b, lambda) <= r)
            .map(|p| p.0)
            .collect()
    }

    #[test]
    fn weighted_distance_examples() {
        assert!((weighted_distance(&g(0., 0., 0.), &g(0.6, 0., 0.8), 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(weighted_distance(&g(0., 0., 0.), &g(0., 0., 100.), 0.0), 0.0);
        assert!((weighted_distance(&g(0., 0., 0.), &g(0.6, 0., 0.4), 4.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_image_has_no_neighbors() {
        let idx = GeoIndex::build(&[(5, g(1., 1., 1.))], &cfg(1.0, 1.0)).unwrap();
        assert!(idx.neighbors(5).unwrap().is_empty());
    }

    #[test]
    fn empty_input_rejected() {
        assert!(GeoIndex::build(&[], &cfg(1.0, 1.0)).is_err());
    }

    #[test]
    fn collinear_middle_has_two_neighbors() {
        let pts = [(0, g(0., 0., 5.)), (1, g(0.5, 0., 5.)), (2, g(1.0, 0., 5.))];
        let idx = GeoIndex::build(&pts, &cfg(1.0, 1.0)).unwrap();
        assert_eq!(idx.neighbors(1).unwrap(), vec![0, 2]);
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = stream(3, &[]);
        let pts: Vec<(ImageId, GeoRef)> = (0..500)
            .map(|i| {
                (
                    i,
                    g(
                        rng.random_range(0.0..10.0),
                        rng.random_range(0.0..10.0),
                        rng.random_range(20.0..22.0),
                    ),
                )
            })
            .collect();
        let idx = GeoIndex::build(&pts, &cfg(1.0, 1.0)).unwrap();
        for (id, _) in &pts {
            assert_eq!(idx.neighbors(*id).unwrap(), brute_force(&pts, *id, 1.0, 1.0));
        }
    }

    #[test]
    fn fallback_to_anchor_when_isolated() {
        let pts = [(0, g(0., 0., 0.)), (1, g(10., 0., 0.))];
        let idx = GeoIndex::build(&pts, &cfg(1.0, 1.0)).unwrap();
        let mut rng = stream(1, &[]);
        assert_eq!(idx.sample_similar(0, &mut rng).unwrap(), 0);
        let idx0 = GeoIndex::build(&pts, &cfg(0.0, 1.0)).unwrap();
        assert_eq!(idx0.sample_similar(1, &mut rng).unwrap(), 1);
    }

    #[test]
    fn single_neighbor_always_chosen() {
        let pts = [(0, g(0., 0., 0.)), (1, g(0.5, 0., 0.)), (2, g(9., 0., 0.))];
        let idx = GeoIndex::build(&pts, &cfg(1.0, 1.0)).unwrap();
        let mut rng = stream(2, &[]);
        for _ in 0..100 {
            assert_eq!(idx.sample_similar(0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn unknown_anchor_is_error() {
        let idx = GeoIndex::build(&[(0, g(0., 0., 0.))], &cfg(1.0, 1.0)).unwrap();
        let mut rng = stream(2, &[]);
        assert!(idx.sample_similar(42, &mut rng).is_err());
    }

    #[test]
    fn four_neighbors_sampled_uniformly() {
        let pts = [
            (0, g(0., 0., 0.)),
            (1, g(0.5, 0., 0.)),
            (2, g(-0.5, 0., 0.)),
            (3, g(0., 0.5, 0.)),
            (4, g(0., -0.5, 0.)),
        ];
        let idx = GeoIndex::build(&pts, &cfg(0.6, 1.0)).unwrap();
        let mut rng = stream(11, &[]);
        let draws = 100_000usize;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[idx.sample_similar(0, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let p = 0.25;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let pts: Vec<_> = (0..20).map(|i| (i, g(i as f64 * 0.3, 0., 1.))).collect();
        let idx = GeoIndex::build(&pts, &cfg(1.0, 1.0)).unwrap();
        let draw = |seed| {
            let mut rng = stream(seed, &[]);
            (0..20).map(|i| idx.sample_similar(i, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    fn arb_points() -> impl Strategy<Value = Vec<(ImageId, GeoRef)>> {
        prop::collection::vec((0.0..6.0f64, 0.0..6.0f64, 0.0..3.0f64), 1..80).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (e, n, d))| (i as ImageId, g(e, n, d)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn index_equals_brute_force(pts in arb_points(), r in 0.0..2.5f64, lambda in 0.0..5.0f64) {
            let idx = GeoIndex::build(&pts, &cfg(r, lambda)).unwrap();
            for (id, _) in &pts {
                prop_assert_eq!(idx.neighbors(*id).unwrap(), brute_force(&pts, *id, r, lambda));
            }
        }

        #[test]
        fn neighbor_sets_grow_with_r(pts in arb_points(), r1 in 0.0..2.0f64, extra in 0.0..2.0f64, lambda in 0.0..4.0f64) {
            let small = GeoIndex::build(&pts, &cfg(r1, lambda)).unwrap();
            let large = GeoIndex::build(&pts, &cfg(r1 + extra, lambda)).unwrap();
            for (id, _) in &pts {
                let big = large.neighbors(*id).unwrap();
                prop_assert!(small.neighbors(*id).unwrap().iter().all(|n| big.contains(n)));
            }
        }

        #[test]
        fn neighbor_sets_shrink_with_lambda(pts in arb_points(), r in 0.1..2.0f64, l1 in 0.0..4.0f64, extra in 0.0..4.0f64) {
            let loose = GeoIndex::build(&pts, &cfg(r, l1)).unwrap();
            let tight = GeoIndex::build(&pts, &cfg(r, l1 + extra)).unwrap();
            for (id, _) in &pts {
                let wide = loose.neighbors(*id).unwrap();
                prop_assert!(tight.neighbors(*id).unwrap().iter().all(|n| wide.contains(n)));
            }
        }
    }
}

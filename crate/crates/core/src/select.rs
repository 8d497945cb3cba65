//! Choosing which images to send for annotation: balanced, random, and
//! hierarchical k-means over latent vectors.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageId;
use crate::error::{Error, Result};
use crate::rng::{self, tags, Rng};

pub const MAX_LLOYD_ITERATIONS: usize = 100;
/// Default candidate range for the elbow search.
pub const ELBOW_RANGE: (usize, usize) = (2, 20);
/// Independent k-means++ restarts used by the elbow search and H-kmeans; the
/// lowest-distortion run wins.
pub const RESTARTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Balanced,
    Random,
    Hkmeans,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Balanced => "balanced",
            Strategy::Random => "random",
            Strategy::Hkmeans => "hkmeans",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Strategy::Balanced),
            "random" => Ok(Strategy::Random),
            "hkmeans" => Ok(Strategy::Hkmeans),
            _ => Err(Error::Config(format!("unknown selection strategy '{s}'"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub M: usize,
    pub strategy: Strategy,
    /// Top-level cluster count for H-kmeans; `None` picks it by the elbow rule.
    pub m: Option<usize>,
    pub seed: u64,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.M == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        if let Some(m) = self.m {
            if m == 0 || (self.strategy == Strategy::Hkmeans && m > self.M) {
                return Err(Error::Config(format!("m = {m} must be in [1, M = {}]", self.M)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each input vector, in input order.
    pub assignment: Vec<usize>,
    pub distortion: f64,
    /// Distortion after each assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lower index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    let d = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("vectors have differing dimensions".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite value in vectors".into()));
    }
    Ok(d)
}

fn plus_plus(vectors: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut centroids = vec![vectors[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            // guard against rounding landing on a zero-weight point
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).expect("total > 0");
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = vectors[pick].clone();
        for (w, v) in d2.iter_mut().zip(vectors) {
            *w = w.min(sq_dist(v, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    let n = vectors.len();
    if k == 0 || n < k {
        return Err(Error::Data(format!("k-means needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let d = check_vectors(vectors)?;
    let mut rng = rng::stream(seed, &[tags::SELECT, k as u64]);
    let mut centroids = plus_plus(vectors, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for (i, v) in vectors.iter().enumerate() {
            let (c, dd) = nearest(v, &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            dist[i] = dd;
        }
        history.push(dist.iter().sum());
        if !changed || iterations >= MAX_LLOYD_ITERATIONS {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (v, &c) in vectors.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(v) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // empty clusters restart on the point farthest from its centroid
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .map(|i| (i, sq_dist(&vectors[i], &centroids[assignment[i]])))
                .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
            if far.1 > 0.0 {
                let donor = assignment[far.0];
                counts[donor] -= 1;
                counts[c] = 1;
                assignment[far.0] = c;
                centroids[c] = vectors[far.0].clone();
            }
        }
    }
    let distortion = *history.last().expect("at least one iteration");
    Ok(ClusterModel {
        centroids,
        assignment,
        distortion,
        history,
        iterations,
    })
}

/// Best of `restarts` independently seeded runs; ties keep the earlier run.
pub fn kmeans_restarts(vectors: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) {
        let m = kmeans(vectors, k, rng::derive_seed(seed, &[r as u64]))?;
        if best.as_ref().is_none_or(|b| m.distortion < b.distortion) {
            best = Some(m);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Knee of a decreasing curve: the point farthest below the chord joining
/// its endpoints. Ties (and flat curves) resolve to the first point.
pub fn knee(ks: &[usize], distortion: &[f64]) -> Result<usize> {
    if ks.len() < 3 || ks.len() != distortion.len() {
        return Err(Error::Config(format!("the elbow rule needs at least 3 k values, got {}", ks.len())));
    }
    let (k0, k1) = (ks[0] as f64, *ks.last().expect("non-empty") as f64);
    let (d0, d1) = (distortion[0], *distortion.last().expect("non-empty"));
    let scale = distortion.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mut best = (ks[0], 0.0);
    if scale == 0.0 {
        return Ok(best.0);
    }
    for (&k, &dk) in ks.iter().zip(distortion) {
        let chord = d0 + (d1 - d0) * (k as f64 - k0) / (k1 - k0);
        let gap = (chord - dk) / scale;
        if gap > best.1 + 1e-12 {
            best = (k, gap);
        }
    }
    Ok(best.0)
}

/// Cluster count at the knee of the distortion curve over `k_range`
/// (inclusive).
pub fn elbow_choose_m(vectors: &[Vec<f64>], k_range: (usize, usize), seed: u64) -> Result<usize> {
    let (lo, hi) = k_range;
    if lo < 2 || hi > vectors.len() || hi < lo + 2 {
        return Err(Error::Config(format!(
            "elbow range [{lo}, {hi}] must hold at least 3 values within [2, {}]",
            vectors.len()
        )));
    }
    let ks: Vec<usize> = (lo..=hi).collect();
    let distortion = ks
        .par_iter()
        .map(|&k| kmeans_restarts(vectors, k, seed, RESTARTS).map(|m| m.distortion))
        .collect::<Result<Vec<_>>>()?;
    knee(&ks, &distortion)
}

/// Per-cluster annotation quotas summing to `total`: an equal share, the
/// remainder one each to the largest clusters, and any cluster too small for
/// its share hands the deficit on to the largest clusters with spare points.
pub fn cluster_quotas(sizes: &[usize], total: usize) -> Result<Vec<usize>> {
    let m = sizes.len();
    if m == 0 || sizes.iter().sum::<usize>() < total {
        return Err(Error::Data(format!("cannot draw {total} ids from clusters {sizes:?}")));
    }
    let mut by_size: Vec<usize> = (0..m).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut quota = vec![total / m; m];
    for &c in by_size.iter().take(total % m) {
        quota[c] += 1;
    }
    let mut deficit = 0;
    for c in 0..m {
        if quota[c] > sizes[c] {
            deficit += quota[c] - sizes[c];
            quota[c] = sizes[c];
        }
    }
    while deficit > 0 {
        for &c in &by_size {
            if deficit > 0 && quota[c] < sizes[c] {
                quota[c] += 1;
                deficit -= 1;
            }
        }
    }
    Ok(quota)
}

/// Two-level k-means selection of `M` ids: `m` top-level clusters, each split
/// into as many sub-clusters as its quota, and the member nearest each
/// sub-centroid chosen.
#[allow(non_snake_case)]
pub fn select_hkmeans(latents: &[(ImageId, Vec<f64>)], M: usize, m: Option<usize>, seed: u64) -> Result<Vec<ImageId>> {
    let n = latents.len();
    if M == 0 || n < M {
        return Err(Error::Data(format!("cannot select {M} of {n} images")));
    }
    let vectors: Vec<Vec<f64>> = latents.iter().map(|(_, h)| h.clone()).collect();
    let m = match m {
        Some(m) => m,
        None => {
            let hi = ELBOW_RANGE.1.min(M).min(n);
            elbow_choose_m(&vectors, (ELBOW_RANGE.0, hi), seed)?
        }
    };
    if m == 0 || m > M {
        return Err(Error::Config(format!("m = {m} must be in [1, M = {M}]")));
    }
    let top = kmeans_restarts(&vectors, m, seed, RESTARTS)?;
    let mut members = vec![Vec::new(); m];
    for (i, &c) in top.assignment.iter().enumerate() {
        members[c].push(i);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = cluster_quotas(&sizes, M)?;

    let mut picks = Vec::with_capacity(M);
    for (c, idx) in members.iter().enumerate() {
        let q = quotas[c];
        if q == 0 {
            continue;
        }
        if q == idx.len() {
            let mut all: Vec<ImageId> = idx.iter().map(|&i| latents[i].0).collect();
            all.sort_unstable();
            picks.extend(all);
            continue;
        }
        let sub_vectors: Vec<Vec<f64>> = idx.iter().map(|&i| vectors[i].clone()).collect();
        let sub = kmeans_restarts(&sub_vectors, q, rng::derive_seed(seed, &[c as u64 + 1]), RESTARTS)?;
        let mut chosen = Vec::with_capacity(q);
        for (s, mu) in sub.centroids.iter().enumerate() {
            let best = idx
                .iter()
                .enumerate()
                .filter(|(j, _)| sub.assignment[*j] == s)
                .map(|(j, &i)| (sq_dist(&sub_vectors[j], mu), latents[i].0))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((_, id)) = best {
                chosen.push(id);
            }
        }
        // empty sub-clusters (duplicate points) are topped up by proximity to
        // the top-level centroid
        if chosen.len() < q {
            let mut rest: Vec<(f64, ImageId)> = idx
                .iter()
                .map(|&i| (sq_dist(&vectors[i], &top.centroids[c]), latents[i].0))
                .filter(|(_, id)| !chosen.contains(id))
                .collect();
            rest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            chosen.extend(rest.into_iter().take(q - chosen.len()).map(|(_, id)| id));
        }
        picks.extend(chosen);
    }
    debug_assert_eq!(picks.len(), M);
    Ok(picks)
}

/// `M` ids uniformly without replacement.
#[allow(non_snake_case)]
pub fn select_random(ids: &[ImageId], M: usize, seed: u64) -> Result<Vec<ImageId>> {
    if M == 0 || ids.len() < M {
        return Err(Error::Data(format!("cannot select {M} of {} ids", ids.len())));
    }
    let mut rng = rng::stream(seed, &[tags::SELECT]);
    Ok(index::sample(&mut rng, ids.len(), M).into_iter().map(|i| ids[i]).collect())
}

/// `M / C` uniform draws from each of the `C` classes.
#[allow(non_snake_case)]
pub fn select_balanced(labeled: &[(ImageId, usize)], classes: usize, M: usize, seed: u64) -> Result<Vec<ImageId>> {
    if classes == 0 || M == 0 || M % classes != 0 {
        return Err(Error::Config(format!("balanced selection needs M ({M}) divisible by C ({classes})")));
    }
    let per = M / classes;
    let mut picks = Vec::with_capacity(M);
    for c in 0..classes {
        let pool: Vec<ImageId> = labeled.iter().filter(|(_, l)| *l == c).map(|(id, _)| *id).collect();
        if pool.len() < per {
            return Err(Error::Data(format!(
                "class {c} has {} images, balanced selection needs {per}",
                pool.len()
            )));
        }
        let mut rng = rng::stream(seed, &[tags::SELECT, c as u64]);
        picks.extend(index::sample(&mut rng, pool.len(), per).into_iter().map(|i| pool[i]));
    }
    Ok(picks)
}

/// Dispatches on `config.strategy`. `labeled` is only consulted for the
/// balanced strategy, which needs ground truth.
pub fn select(
    config: &SelectionConfig,
    latents: &[(ImageId, Vec<f64>)],
    labeled: &[(ImageId, usize)],
    classes: usize,
) -> Result<Vec<ImageId>> {
    config.validate()?;
    match config.strategy {
        Strategy::Hkmeans => select_hkmeans(latents, config.M, config.m, config.seed),
        Strategy::Random => {
            let ids: Vec<ImageId> = latents.iter().map(|(id, _)| *id).collect();
            select_random(&ids, config.M, config.seed)
        }
        Strategy::Balanced => select_balanced(labeled, classes, config.M, config.seed),
    }
}

pub fn write_picks(path: &Path, picks: &[ImageId]) -> Result<()> {
    let mut s = String::from("rank,id\n");
    for (rank, id) in picks.iter().enumerate() {
        s.push_str(&format!("{},{id}\n", rank + 1));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_picks(path: &Path) -> Result<Vec<ImageId>> {
    let rows = read_two_columns(path, ["rank", "id"])?;
    rows.into_iter()
        .map(|(line, _, id)| {
            id.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad id '{id}'"),
            })
        })
        .collect()
}

/// Annotation answers as CSV `id,label` with class names as labels.
pub fn write_annotations(path: &Path, answers: &[(ImageId, String)]) -> Result<()> {
    let mut s = String::from("id,label\n");
    for (id, label) in answers {
        s.push_str(&format!("{id},{label}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<(ImageId, String)>> {
    read_two_columns(path, ["id", "label"])?
        .into_iter()
        .map(|(line, id, label)| {
            let id = id.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad id '{id}'"),
            })?;
            Ok((id, label))
        })
        .collect()
}

fn read_two_columns(path: &Path, header: [&str; 2]) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let first = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    if first != header.join(",") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header '{}'", header.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected 2 fields".into(),
        })?;
        out.push((i + 1, a.trim().to_string(), b.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(seed, &[99]);
        let mut out = Vec::new();
        for c in centers {
            for _ in 0..per {
                out.push(vec![c[0] + sigma * normal(&mut rng), c[1] + sigma * normal(&mut rng)]);
            }
        }
        out
    }

    fn normal(rng: &mut Rng) -> f64 {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn k_equals_n_gives_zero_distortion() {
        let v: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = kmeans(&v, 7, 3).unwrap();
        assert_eq!(m.distortion, 0.0);
    }

    #[test]
    fn n_below_k_is_an_error() {
        assert!(kmeans(&[vec![0.0]], 2, 0).is_err());
    }

    #[test]
    fn two_blobs_recovered() {
        let v = blobs(&[[0.0, 0.0], [10.0, 0.0]], 50, 1.0, 1);
        let m = kmeans(&v, 2, 5).unwrap();
        let first = m.assignment[0];
        assert!(m.assignment[..50].iter().all(|&c| c == first));
        assert!(m.assignment[50..].iter().all(|&c| c != first));
    }

    #[test]
    fn distortion_never_increases() {
        let v = blobs(&[[0.0, 0.0], [3.0, 1.0], [1.0, 4.0]], 40, 1.5, 2);
        for seed in 0..10 {
            let m = kmeans(&v, 5, seed).unwrap();
            assert!(m.history.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", m.history);
        }
    }

    #[test]
    fn elbow_rules() {
        assert_eq!(knee(&[2, 3, 4, 5], &[8.0, 6.0, 4.0, 2.0]).unwrap(), 2);
        assert_eq!(knee(&[2, 3, 4], &[0.0, 0.0, 0.0]).unwrap(), 2);
        assert!(knee(&[2, 3], &[1.0, 0.0]).is_err());
        let same = vec![vec![1.0, 1.0]; 30];
        assert_eq!(elbow_choose_m(&same, (2, 12), 0).unwrap(), 2);
        let v = blobs(&[[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]], 30, 1.0, 3);
        assert_eq!(elbow_choose_m(&v, (2, 12), 0).unwrap(), 4);
    }

    #[test]
    fn quotas() {
        assert_eq!(cluster_quotas(&[10, 10, 10], 7).unwrap(), vec![3, 2, 2]);
        assert_eq!(cluster_quotas(&[1, 10, 5], 9).unwrap(), vec![1, 4, 4]);
        assert!(cluster_quotas(&[1, 1], 3).is_err());
    }

    #[test]
    fn hkmeans_exhaustive_and_per_blob() {
        let lat: Vec<(ImageId, Vec<f64>)> = (0..5).map(|i| (i as u64 * 3, vec![i as f64])).collect();
        let mut all = select_hkmeans(&lat, 5, Some(5), 0).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 3, 6, 9, 12]);

        let v = blobs(&[[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]], 25, 1.0, 4);
        let lat: Vec<(ImageId, Vec<f64>)> = v.into_iter().enumerate().map(|(i, h)| (i as u64, h)).collect();
        let picks = select_hkmeans(&lat, 8, Some(4), 1).unwrap();
        for b in 0..4u64 {
            assert_eq!(picks.iter().filter(|&&id| id / 25 == b).count(), 2);
        }
    }

    #[test]
    fn random_and_balanced() {
        let ids: Vec<ImageId> = (0..20).collect();
        let mut all = select_random(&ids, 20, 9).unwrap();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert_eq!(select_random(&ids, 5, 9).unwrap(), select_random(&ids, 5, 9).unwrap());

        let labeled: Vec<(ImageId, usize)> = (0..60).map(|i| (i, (i % 6) as usize)).collect();
        let picks = select_balanced(&labeled, 6, 6, 1).unwrap();
        let mut classes: Vec<usize> = picks.iter().map(|id| (id % 6) as usize).collect();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2, 3, 4, 5]);
        let missing: Vec<(ImageId, usize)> = (0..10).map(|i| (i, 0)).collect();
        assert!(select_balanced(&missing, 2, 2, 0).is_err());
        assert!(select_balanced(&labeled, 6, 7, 0).is_err());
    }

    #[test]
    fn picks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("picks.csv");
        write_picks(&p, &[5, 2, 9]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "rank,id\n1,5\n2,2\n3,9\n");
        assert_eq!(read_picks(&p).unwrap(), vec![5, 2, 9]);
    }
}

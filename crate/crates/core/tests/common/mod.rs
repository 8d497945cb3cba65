//! Independent reference implementations shared by the integration tests.
//! Apart from `gradcheck`, which compares the analytic gradients against
//! finite differences, nothing here calls into the code under test except
//! for data types.
#![allow(dead_code)]

pub mod gradcheck;

use geoclr::dataset::GeorefImage;
use geoclr::nn::{BlockSpec, EncoderConfig, Tensor};
use geoclr::surveysim::{generate_survey, generate_world, Survey, Swath, TrajectoryConfig, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = r.random_range(f64::EPSILON..1.0);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| gaussian(r)).collect()).unwrap()
}

/// Plain double loop over cosine similarities; rows `2k` and `2k+1` form a
/// positive pair.
pub fn naive_ntxent(z: &[Vec<f64>], tau: f64) -> f64 {
    let n2 = z.len();
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sim = |a: usize, b: usize| {
        let d: f64 = z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum();
        d / (norm(&z[a]) * norm(&z[b]))
    };
    let l = |i: usize, j: usize| {
        let mut denom = 0.0;
        for k in 0..n2 {
            if k != i {
                denom += (sim(i, k) / tau).exp();
            }
        }
        -((sim(i, j) / tau).exp() / denom).ln()
    };
    let mut total = 0.0;
    for k in 0..n2 / 2 {
        total += l(2 * k, 2 * k + 1) + l(2 * k + 1, 2 * k);
    }
    total / n2 as f64
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a| + |n|, floor)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Macro-F1 via an explicit confusion matrix.
pub fn confusion_macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let mut sum = 0.0;
    for c in 0..classes {
        let tp = cm[c][c] as f64;
        let col: usize = (0..classes).map(|t| cm[t][c]).sum();
        let row: usize = cm[c].iter().sum();
        let fp = col as f64 - tp;
        let fneg = row as f64 - tp;
        if tp > 0.0 {
            sum += 2.0 * tp / (2.0 * tp + fp + fneg);
        }
    }
    sum / classes as f64
}

/// Isotropic Gaussian blobs; point `i` belongs to blob `i / per`.
pub fn blobs(centers: &[Vec<f64>], per: usize, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    centers
        .iter()
        .flat_map(|c| (0..per).map(|_| c.iter().map(|x| x + sigma * gaussian(&mut r)).collect::<Vec<_>>()).collect::<Vec<_>>())
        .collect()
}

/// Minimum within-cluster sum of squares over every 2-partition.
pub fn best_two_partition(v: &[Vec<f64>]) -> f64 {
    let n = v.len();
    assert!(n <= 16);
    let sse = |members: &[&Vec<f64>]| {
        if members.is_empty() {
            return 0.0;
        }
        let d = members[0].len();
        let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64).collect();
        members.iter().map(|m| m.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>()
    };
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << (n - 1)) {
        let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|&i| mask >> i & 1 == 1);
        let a: Vec<&Vec<f64>> = a.iter().map(|&i| &v[i]).collect();
        let b: Vec<&Vec<f64>> = b.iter().map(|&i| &v[i]).collect();
        best = best.min(sse(&a) + sse(&b));
    }
    best
}

/// Two dives over a 20 m square; a few hundred images, quick to train on.
pub fn small_survey(tile_size: usize, seed: u64) -> Survey {
    let world = generate_world(&WorldConfig {
        extent: (20.0, 20.0),
        seed,
        ..Default::default()
    })
    .unwrap();
    let traj = TrajectoryConfig {
        swaths: vec![
            Swath { dive: 0, min: (1.0, 1.0), max: (19.0, 9.0) },
            Swath { dive: 1, min: (1.0, 11.0), max: (19.0, 19.0) },
        ],
        ..Default::default()
    };
    generate_survey(&world, &traj, tile_size, seed).unwrap()
}

pub fn tiny_encoder(tile_size: usize) -> EncoderConfig {
    EncoderConfig {
        conv_blocks: [4, 8]
            .into_iter()
            .map(|c| BlockSpec { out_channels: c, stride: 2 })
            .collect(),
        latent_dim: 8,
        projection_dim: 4,
        use_residual: true,
        tile_size,
    }
}

pub fn brute_neighbors(images: &[GeorefImage], i: usize, r: f64, lambda: f64) -> Vec<u64> {
    let a = images[i].georef;
    let mut out: Vec<u64> = images
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .filter(|(_, b)| {
            let g = b.georef;
            ((a.easting - g.easting).powi(2) + (a.northing - g.northing).powi(2) + lambda * (a.depth - g.depth).powi(2)).sqrt()
                <= r
        })
        .map(|(_, b)| b.id)
        .collect();
    out.sort_unstable();
    out
}

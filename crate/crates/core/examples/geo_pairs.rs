//! Shows what the closeness radius and the depth weight do to the set of
//! similar images an anchor can be paired with.
mod shared;

use geoclr::geopair::{build_index, PairSamplerConfig};

fn main() {
    let survey = shared::default_survey();
    let images = &survey.images;
    let label: std::collections::HashMap<_, _> = images.iter().map(|im| (im.id, im.label)).collect();
    println!("{:>6} {:>6} {:>12} {:>12} {:>14}", "r", "lambda", "mean nbrs", "isolated", "same class");
    for &(r, lambda) in &[(0.0, 1.0), (0.5, 1.0), (1.0, 1.0), (2.0, 1.0), (5.0, 1.0), (1.0, 0.0), (1.0, 10.0)] {
        let index = build_index(images, &PairSamplerConfig { r, lambda, rng_seed: 0 }).expect("index");
        let (mut total, mut isolated, mut same, mut pairs) = (0usize, 0usize, 0usize, 0usize);
        for im in images {
            let nbrs = index.neighbors(im.id).expect("known id");
            if nbrs.is_empty() {
                isolated += 1;
            }
            total += nbrs.len();
            for id in nbrs {
                pairs += 1;
                same += usize::from(label[&id] == im.label);
            }
        }
        let frac = if pairs == 0 { f64::NAN } else { same as f64 / pairs as f64 };
        println!(
            "{r:>6} {lambda:>6} {:>12.2} {:>12} {:>14.3}",
            total as f64 / images.len() as f64,
            isolated,
            frac
        );
    }
}

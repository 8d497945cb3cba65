//! Generates the default synthetic survey and prints how well position
//! predicts habitat class. Pass a directory to also write the PNG tiles and
//! manifest there.
//!
//! cargo run --release --example simulate_survey -- /tmp/survey
mod shared;

use std::collections::BTreeMap;
use std::path::Path;

use geoclr::surveysim::neighbor_label_agreement;

fn main() {
    let survey = shared::default_survey();
    let names = survey.world.config.class_names();
    println!("{} images, tile side {}", survey.images.len(), survey.images[0].tile.side());

    let mut per_dive: BTreeMap<u32, usize> = BTreeMap::new();
    let mut counts = vec![0usize; names.len()];
    for im in &survey.images {
        *per_dive.entry(im.dive).or_default() += 1;
        counts[im.label.expect("simulated images are labelled")] += 1;
    }
    println!("images per dive: {per_dive:?}");

    let areas = survey.world.class_areas(400);
    println!("{:<8} {:>8} {:>8}", "class", "images", "area");
    for (c, name) in names.iter().enumerate() {
        println!("{name:<8} {:>8.3} {:>8.3}", counts[c] as f64 / survey.images.len() as f64, areas[c]);
    }

    // the premise of geographic pairing: nearby images tend to share a class
    for r in [0.5, 1.0, 2.0, 5.0, 10.0] {
        println!("label agreement within {r:>4} m: {:.3}", neighbor_label_agreement(&survey.images, r));
    }

    if let Some(dir) = std::env::args().nth(1) {
        survey.write(Path::new(&dir)).expect("write survey");
        println!("wrote {dir}/manifest.csv and {} tiles", survey.images.len());
    }
}

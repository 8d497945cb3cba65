mod common;

use common::{brute_neighbors, small_survey, tiny_encoder};
use geoclr::augment::AugmentConfig;
use geoclr::contrastive::{
    assemble_batch, epoch_schedule, pair_stream, train, write_loss_log, LossConfig, Mode, TrainConfig,
};
use geoclr::geopair::{build_index, PairSamplerConfig};
use geoclr::nn::init_encoder;
use geoclr::Error;

fn config(mode: Mode, r: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        encoder: tiny_encoder(16),
        loss: LossConfig {
            temperature: 0.5,
            batch_size: 16,
        },
        pairing: PairSamplerConfig {
            r,
            ..Default::default()
        },
        epochs,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn zero_radius_reduces_to_augmentation_pairs() {
    let ds = small_survey(16, 1).dataset().unwrap();
    let geo = train(&ds, &config(Mode::GeoClr, 0.0, 2)).unwrap();
    let sim = train(&ds, &config(Mode::SimClr, 1.0, 2)).unwrap();
    let losses = |o: &geoclr::contrastive::TrainOutcome| o.log.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&geo), losses(&sim));
    assert_eq!(geo.encoder.params, sim.encoder.params);
    assert_eq!(geo.pair_stats.fallback, geo.pair_stats.pairs);
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let ds = small_survey(16, 1).dataset().unwrap();
    let c = config(Mode::GeoClr, 1.0, 0);
    let out = train(&ds, &c).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.encoder.params, init_encoder(&c.encoder, c.seed).unwrap());
}

#[test]
fn same_seed_same_run() {
    let ds = small_survey(16, 2).dataset().unwrap();
    let a = train(&ds, &config(Mode::GeoClr, 1.0, 1)).unwrap();
    let b = train(&ds, &config(Mode::GeoClr, 1.0, 1)).unwrap();
    assert_eq!(a.encoder.params, b.encoder.params);
    assert_eq!(a.log[0].mean_loss.to_bits(), b.log[0].mean_loss.to_bits());
    let mut c2 = config(Mode::GeoClr, 1.0, 1);
    c2.seed = 5;
    assert_ne!(train(&ds, &c2).unwrap().log[0].mean_loss, a.log[0].mean_loss);
}

#[test]
fn loss_decreases_over_training() {
    let ds = small_survey(16, 3).dataset().unwrap();
    let mut c = config(Mode::GeoClr, 1.0, 8);
    c.optimizer.learning_rate = 3e-3;
    let out = train(&ds, &c).unwrap();
    let first = out.log[0].mean_loss;
    let last = out.log.last().unwrap().mean_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn every_geo_pair_is_within_radius() {
    let survey = small_survey(16, 4);
    let ds = survey.dataset().unwrap();
    let c = config(Mode::GeoClr, 1.2, 1);
    let index = build_index(ds.images(), &c.pairing).unwrap();
    let ids = ds.ids();
    let mut cross = 0;
    for epoch in 0..3 {
        for (step, anchors) in epoch_schedule(&ids, 16, c.seed, epoch).iter().enumerate() {
            let batch = assemble_batch(
                &ds,
                anchors,
                Some(&index),
                Mode::GeoClr,
                &AugmentConfig::identity(),
                &mut pair_stream(c.seed, epoch, step),
                0,
            )
            .unwrap();
            assert_eq!(batch.views.len(), 32);
            for (a, b) in batch.pairs() {
                let i = ds.position(a).unwrap();
                let near = brute_neighbors(ds.images(), i, 1.2, 1.0);
                if a == b {
                    assert!(near.is_empty(), "image {a} fell back despite neighbours");
                } else {
                    cross += 1;
                    assert!(near.binary_search(&b).is_ok());
                }
            }
        }
    }
    assert!(cross > 0);
}

#[test]
fn tail_batch_is_dropped() {
    let ids: Vec<u64> = (0..37).collect();
    let s = epoch_schedule(&ids, 16, 1, 0);
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|b| b.len() == 16));
}

#[test]
fn rejects_undersized_dataset_and_mismatched_tiles() {
    let ds = small_survey(16, 1).dataset().unwrap();
    let mut c = config(Mode::GeoClr, 1.0, 1);
    c.loss.batch_size = 10_000;
    assert!(matches!(train(&ds, &c), Err(Error::Data(_))));
    let mut c = config(Mode::GeoClr, 1.0, 1);
    c.encoder = tiny_encoder(32);
    assert!(matches!(train(&ds, &c), Err(Error::Shape(_))));
    let mut c = config(Mode::GeoClr, 1.0, 1);
    c.loss.temperature = 0.0;
    assert!(matches!(train(&ds, &c), Err(Error::Config(_))));
}

#[test]
fn loss_log_format() {
    let ds = small_survey(16, 1).dataset().unwrap();
    let out = train(&ds, &config(Mode::SimClr, 1.0, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loss.csv");
    write_loss_log(&p, &out.log).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,wall_seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,"));
}

#[test]
fn middle_of_three_collinear_images_pairs_with_a_neighbour() {
    use geoclr::dataset::{Dataset, GeoRef, GeorefImage, Tile};
    let images: Vec<GeorefImage> = (0..3)
        .map(|i| GeorefImage {
            id: i,
            georef: GeoRef::new(0.5 * i as f64, 0.0, 10.0).unwrap(),
            dive: 0,
            tile: Tile::filled(8, 0.5),
            label: None,
        })
        .collect();
    let ds = Dataset::new(images, vec![]).unwrap();
    let pairing = PairSamplerConfig {
        r: 1.0,
        lambda: 1.0,
        rng_seed: 0,
    };
    let index = build_index(ds.images(), &pairing).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    let mut rng = pair_stream(1, 0, 0);
    for _ in 0..50 {
        let b = assemble_batch(&ds, &[1, 1], Some(&index), Mode::GeoClr, &AugmentConfig::identity(), &mut rng, 0).unwrap();
        for (a, p) in b.pairs() {
            assert_eq!(a, 1);
            assert!(p == 0 || p == 2);
            seen.insert(p);
        }
    }
    assert_eq!(seen.len(), 2);
    let b = assemble_batch(&ds, &[0, 1, 2], Some(&index), Mode::SimClr, &AugmentConfig::identity(), &mut rng, 0).unwrap();
    assert!(b.pairs().all(|(a, p)| a == p));
}

#[test]
fn five_epochs_on_64_images_mostly_lower_loss() {
    use geoclr::dataset::Dataset;
    let survey = small_survey(16, 7);
    let images: Vec<_> = survey.images.iter().take(64).cloned().collect();
    let ds = Dataset::new(images, survey.world.config.class_names()).unwrap();
    let improved = (0..5)
        .filter(|&seed| {
            let mut c = config(Mode::GeoClr, 1.0, 5);
            c.seed = seed;
            c.optimizer.learning_rate = 1e-3;
            let log = train(&ds, &c).unwrap().log;
            log[4].mean_loss < log[0].mean_loss
        })
        .count();
    assert!(improved >= 3, "{improved}/5 seeds improved");
}

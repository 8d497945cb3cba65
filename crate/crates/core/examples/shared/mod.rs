//! Setup shared by the examples: the default synthetic survey and a compact
//! encoder that trains in a few seconds per epoch.
#![allow(dead_code)]

use geoclr::contrastive::{train_with_progress, Mode, TrainConfig};
use geoclr::dataset::Dataset;
use geoclr::nn::encoder::{BlockSpec, EncoderConfig};
use geoclr::nn::{load_checkpoint, save_checkpoint, TrainedEncoder};
use geoclr::surveysim::{generate_survey, generate_world, Survey, TrajectoryConfig, WorldConfig};

pub fn default_survey() -> Survey {
    let world = generate_world(&WorldConfig::default()).expect("default world");
    generate_survey(&world, &TrajectoryConfig::default(), 32, 7).expect("default survey")
}

pub fn compact_encoder() -> EncoderConfig {
    EncoderConfig {
        conv_blocks: [8, 16, 32]
            .into_iter()
            .map(|c| BlockSpec { out_channels: c, stride: 2 })
            .collect(),
        latent_dim: 32,
        projection_dim: 16,
        ..Default::default()
    }
}

/// Epoch count from the first command-line argument.
pub fn epochs_arg(default: usize) -> usize {
    std::env::args().nth(1).map_or(default, |s| s.parse().expect("epochs must be an integer"))
}

/// Trains (or reloads from the temp dir) a compact encoder.
pub fn pretrained(dataset: &Dataset, mode: Mode, r: f64, epochs: usize, seed: u64) -> TrainedEncoder {
    let path = std::env::temp_dir().join(format!("geoclr-example-{mode}-{r}-{epochs}-{seed}.bin"));
    if let Ok(enc) = load_checkpoint(&path) {
        println!("reusing {}", path.display());
        return enc;
    }
    let mut config = TrainConfig { mode, epochs, seed, encoder: compact_encoder(), ..Default::default() };
    config.pairing.r = r;
    let out = train_with_progress(dataset, &config, |e| {
        println!("  {mode} epoch {:>2}  loss {:.4}  {:.1}s", e.epoch, e.mean_loss, e.wall_seconds)
    })
    .expect("training");
    save_checkpoint(&out.encoder, &path).expect("cache checkpoint");
    out.encoder
}

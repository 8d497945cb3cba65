//! Contrastive pretraining with geographic pairs next to the SimCLR
//! baseline, on the compact encoder. First argument: epochs (default 3).
//!
//! cargo run --release --example train_geoclr -- 10
mod shared;

use geoclr::contrastive::{train_with_progress, write_loss_log, Mode, TrainConfig};
use geoclr::nn::save_checkpoint;

fn main() {
    let epochs = shared::epochs_arg(3);
    let dataset = shared::default_survey().dataset().expect("dataset");
    let out_dir = std::env::temp_dir();
    for mode in [Mode::GeoClr, Mode::SimClr] {
        let mut config = TrainConfig { mode, epochs, encoder: shared::compact_encoder(), ..Default::default() };
        config.pairing.r = 1.0;
        config.pairing.lambda = 1.0;
        let out = train_with_progress(&dataset, &config, |e| {
            println!("{mode} epoch {:>2}  loss {:.4}  {:.1}s", e.epoch, e.mean_loss, e.wall_seconds)
        })
        .expect("training");
        if mode == Mode::GeoClr {
            let s = &out.pair_stats;
            println!(
                "{} pairs, {} anchors without a neighbour, largest pair distance {:.3} m",
                s.pairs, s.fallback, s.max_distance
            );
        }
        let ck = out_dir.join(format!("train_geoclr_{mode}.bin"));
        save_checkpoint(&out.encoder, &ck).expect("save");
        write_loss_log(&out_dir.join(format!("train_geoclr_{mode}_loss.csv")), &out.log).expect("log");
        println!("saved {}", ck.display());
    }
}

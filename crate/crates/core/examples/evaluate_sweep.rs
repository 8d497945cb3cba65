//! A small sweep over the closeness radius, written as results and summary
//! CSVs in the temp dir.
mod shared;

use geoclr::contrastive::{Mode, TrainConfig};
use geoclr::evalx::{summary_path, sweep, validation_set, write_sweep, Method, ProbeConfig, SweepGrid};
use geoclr::select::Strategy;

fn main() {
    let epochs = shared::epochs_arg(3);
    let dataset = shared::default_survey().dataset().expect("dataset");
    let validation = validation_set(&dataset, 20, 1).expect("validation");
    let grid = SweepGrid {
        mode: vec![Mode::GeoClr],
        r: vec![0.0, 1.0, 5.0],
        lambda: vec![1.0],
        M: vec![40],
        classifier: vec![Method::Linear],
        strategy: vec![Strategy::Balanced],
    };
    let train = TrainConfig { epochs, encoder: shared::compact_encoder(), ..Default::default() };
    let rows = sweep(&dataset, &grid, &train, &ProbeConfig::default(), &validation, 5, 1).expect("sweep");
    for row in &rows {
        match &row.result {
            Ok(t) => println!("r={:<4} macro-F1 {:.3} ± {:.3}", row.label.r, t.mean, t.sd),
            Err(e) => println!("r={:<4} failed: {e}", row.label.r),
        }
    }
    let out = std::env::temp_dir().join("geoclr_sweep.csv");
    write_sweep(&out, &rows, &ProbeConfig::default().classifier.svm).expect("write");
    println!("wrote {} and {}", out.display(), summary_path(&out).display());
}

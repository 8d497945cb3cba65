//! Compares how random, H-kmeans and class-balanced selection spread a small
//! annotation budget over the habitat classes.
mod shared;

use geoclr::classify::embed;
use geoclr::contrastive::Mode;
use geoclr::select::{elbow_choose_m, select, SelectionConfig, Strategy};

fn main() {
    let epochs = shared::epochs_arg(5);
    let dataset = shared::default_survey().dataset().expect("dataset");
    let encoder = shared::pretrained(&dataset, Mode::GeoClr, 1.0, epochs, 1);
    let ids = dataset.ids();
    let h = embed(&encoder, &dataset, &ids).expect("embed");
    let latents: Vec<_> = ids.iter().copied().zip(h.iter().cloned()).collect();
    let labeled: Vec<_> = dataset.images().iter().map(|im| (im.id, im.label.unwrap())).collect();
    let names = dataset.class_names();

    println!("elbow picks m = {} top-level clusters", elbow_choose_m(&h, (2, 20), 1).expect("elbow"));
    println!("{:<9} {:>4}  {}", "strategy", "M", names.join(" "));
    for m_total in [12, 40] {
        for strategy in [Strategy::Random, Strategy::Hkmeans, Strategy::Balanced] {
            let mut counts = vec![0usize; names.len()];
            for seed in 1..=5 {
                let cfg = SelectionConfig { M: m_total, strategy, m: None, seed };
                for id in select(&cfg, &latents, &labeled, names.len()).expect("select") {
                    counts[dataset.get(id).unwrap().label.unwrap()] += 1;
                }
            }
            let avg: Vec<String> = counts.iter().map(|&c| format!("{:.1}", c as f64 / 5.0)).collect();
            println!("{:<9} {m_total:>4}  {}", strategy.to_string(), avg.join(" "));
        }
    }
}

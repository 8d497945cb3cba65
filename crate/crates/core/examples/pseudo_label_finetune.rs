//! Fine-tuning the encoder on a handful of annotations, directly and through
//! pseudo-labels produced by a classifier on the latents.
mod shared;

use geoclr::contrastive::Mode;
use geoclr::evalx::{evaluate_once, validation_set, EvalContext, Method, ProbeConfig};
use geoclr::select::Strategy;

fn main() {
    let epochs = shared::epochs_arg(5);
    let dataset = shared::default_survey().dataset().expect("dataset");
    let validation = validation_set(&dataset, 50, 1).expect("validation");
    let encoder = shared::pretrained(&dataset, Mode::GeoClr, 1.0, epochs, 1);
    let ctx = EvalContext::new(&encoder, &dataset, &validation).expect("context");
    for method in [Method::Linear, Method::Finetune, Method::PlLinear, Method::PlSvm] {
        let probe = ProbeConfig { method, strategy: Strategy::Hkmeans, M: 40, ..Default::default() };
        let t = std::time::Instant::now();
        let scores: Vec<f64> = (1..=3).map(|s| evaluate_once(&ctx, &probe, s).expect("trial")).collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let each: Vec<String> = scores.iter().map(|f| format!("{f:.3}")).collect();
        println!("{method:<9} macro-F1 {mean:.3}  [{}]  {:.0}s", each.join(" "), t.elapsed().as_secs_f64());
    }
}

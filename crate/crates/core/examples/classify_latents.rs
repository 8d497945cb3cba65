//! Linear and RBF-SVM classifiers on frozen latents, scored by macro-F1 on a
//! class-balanced validation set.
mod shared;

use geoclr::contrastive::Mode;
use geoclr::evalx::{evaluate_once, run_trials, validation_set, EvalContext, Method, ProbeConfig, TrialLabel};
use geoclr::select::Strategy;

fn main() {
    let epochs = shared::epochs_arg(5);
    let dataset = shared::default_survey().dataset().expect("dataset");
    let validation = validation_set(&dataset, 50, 1).expect("validation");
    for mode in [Mode::GeoClr, Mode::SimClr] {
        let encoder = shared::pretrained(&dataset, mode, 1.0, epochs, 1);
        let ctx = EvalContext::new(&encoder, &dataset, &validation).expect("context");
        for method in [Method::Linear, Method::Svm] {
            for m_total in [40, 400] {
                let probe = ProbeConfig { method, strategy: Strategy::Random, M: m_total, ..Default::default() };
                let label = TrialLabel { mode, classifier: method, strategy: probe.strategy, M: m_total, r: 1.0, lambda: 1.0 };
                let res = run_trials(label, 5, 1, |s| evaluate_once(&ctx, &probe, s)).expect("trials");
                println!("{mode:<7} {method:<7} M={m_total:<4} macro-F1 {:.3} ± {:.3}", res.mean, res.sd);
            }
        }
    }
}

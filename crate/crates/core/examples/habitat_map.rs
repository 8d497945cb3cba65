//! Classifies every image of the survey and writes the horizontal map, depth
//! profile and per-dive class proportions. First argument: output dir.
mod shared;

use std::path::PathBuf;

use geoclr::classify::{embed, fit_classifier, ClassifierKind, ClassifierSettings};
use geoclr::contrastive::Mode;
use geoclr::report::{class_proportions, habitat_map, proportion_l1, truth_predictions};
use geoclr::select::select_hkmeans;

fn main() {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("geoclr_map"), PathBuf::from);
    let survey = shared::default_survey();
    let dataset = survey.dataset().expect("dataset");
    let names = dataset.class_names().to_vec();
    let encoder = shared::pretrained(&dataset, Mode::GeoClr, 1.0, 5, 1);
    let ids = dataset.ids();
    let h = embed(&encoder, &dataset, &ids).expect("embed");
    let latents: Vec<_> = ids.iter().copied().zip(h.iter().cloned()).collect();

    for m_total in [40, 100, 400] {
        let picks = select_hkmeans(&latents, m_total, None, 1).expect("select");
        let hp: Vec<Vec<f64>> = picks.iter().map(|&id| h[dataset.position(id).unwrap()].clone()).collect();
        let yp: Vec<usize> = picks.iter().map(|&id| dataset.get(id).unwrap().label.unwrap()).collect();
        let clf = fit_classifier(ClassifierKind::Svm, &hp, &yp, names.len(), &ClassifierSettings::default(), 1)
            .expect("fit");
        let predictions: Vec<_> = ids.iter().copied().zip(clf.predict(&h).expect("predict").labels).collect();
        let est = class_proportions(&predictions, dataset.images(), names.len()).expect("proportions");
        let truth = class_proportions(&truth_predictions(dataset.images()), dataset.images(), names.len()).unwrap();
        let l1: Vec<String> = proportion_l1(&est, &truth).iter().map(|(d, e)| format!("dive {d}: {e:.3}")).collect();
        println!("M={m_total:<4} per-dive L1 error  {}", l1.join("  "));
        if m_total == 400 {
            habitat_map(&predictions, dataset.images(), &names, &dir).expect("map");
            println!("wrote map files to {}", dir.display());
        }
    }
}

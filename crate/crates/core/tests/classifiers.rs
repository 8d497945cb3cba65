mod common;

use common::{blobs, gaussian, rng, small_survey, tiny_encoder};
use geoclr::classify::{
    cross_entropy_with_grad, finetune, fit_logreg, fit_svm_rbf, logreg_gradient, predict_encoder, pseudo_label_pipeline,
    read_latents, rbf, write_latents, Classifier, ClassifierKind, ClassifierSettings, FinetuneConfig, SvmParams,
};
use geoclr::contrastive::{train, LossConfig, TrainConfig};
use geoclr::nn::Tensor;
use rand::Rng;

fn standardized(mut h: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let d = h[0].len();
    let n = h.len() as f64;
    for j in 0..d {
        let m = h.iter().map(|x| x[j]).sum::<f64>() / n;
        let s = (h.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n).sqrt();
        for x in &mut h {
            x[j] = (x[j] - m) / s;
        }
    }
    h
}

#[test]
fn logreg_reaches_a_stationary_point() {
    let centers = vec![vec![0.0, 0.0, 0.0], vec![2.0, 0.0, 1.0], vec![0.0, 2.0, -1.0]];
    let h = standardized(blobs(&centers, 30, 1.0, 2));
    let y: Vec<usize> = (0..90).map(|i| i / 30).collect();
    let m = fit_logreg(&h, &y, 3, 1e-2, 0).unwrap();
    let g = logreg_gradient(&m, &h, &y, 1e-2);
    let norm: f64 = g.weights.iter().flatten().chain(&g.biases).map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-5, "gradient norm {norm}");
}

#[test]
fn logreg_is_equivariant_to_feature_scaling() {
    let centers = vec![vec![0.0, 0.0], vec![3.0, 1.0]];
    let h = blobs(&centers, 20, 1.0, 3);
    let y: Vec<usize> = (0..40).map(|i| i / 20).collect();
    let scaled: Vec<Vec<f64>> = h.iter().map(|x| vec![1000.0 * x[0] + 5.0, 0.01 * x[1]]).collect();
    let a = Classifier::Linear(fit_logreg(&h, &y, 2, 1e-3, 0).unwrap()).predict(&h).unwrap();
    let b = Classifier::Linear(fit_logreg(&scaled, &y, 2, 1e-3, 0).unwrap()).predict(&scaled).unwrap();
    assert_eq!(a.labels, b.labels);
}

/// Independent check of the dual solution: box constraints, equality
/// constraint and the KKT conditions, with decision values recomputed from
/// the kernel.
#[test]
fn svm_solution_satisfies_kkt() {
    let mut r = rng(9);
    let n = 80;
    let h: Vec<Vec<f64>> = (0..n).map(|_| vec![gaussian(&mut r), gaussian(&mut r)]).collect();
    let y: Vec<usize> = h.iter().map(|x| usize::from(x[0] * x[0] + x[1] * x[1] > 1.2)).collect();
    let c = 2.0;
    let params = SvmParams {
        c,
        gamma: Some(0.7),
        tolerance: 1e-6,
        ..Default::default()
    };
    let model = fit_svm_rbf(&h, &y, 2, &params, 0).unwrap();
    let xs: Vec<Vec<f64>> = h.iter().map(|x| model.standardize(x)).collect();
    for (k, m) in model.machines.iter().enumerate() {
        let yk: Vec<f64> = y.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
        let mut alpha = vec![0.0; n];
        for (&i, &coef) in m.support_index.iter().zip(&m.coef) {
            alpha[i] = coef * yk[i];
            assert!(alpha[i] > 0.0 && alpha[i] <= c + 1e-12);
        }
        let eq: f64 = alpha.iter().zip(&yk).map(|(a, y)| a * y).sum();
        assert!(eq.abs() < 1e-9, "sum alpha y = {eq}");
        for i in 0..n {
            let f: f64 = (0..n).map(|j| alpha[j] * yk[j] * rbf(&xs[j], &xs[i], 0.7)).sum::<f64>() - m.rho;
            let margin = yk[i] * f;
            let tol = 1e-4;
            if alpha[i] == 0.0 {
                assert!(margin >= 1.0 - tol, "non-SV {i} margin {margin}");
            } else if alpha[i] < c - 1e-9 {
                assert!((margin - 1.0).abs() <= tol, "free SV {i} margin {margin}");
            } else {
                assert!(margin <= 1.0 + tol, "bound SV {i} margin {margin}");
            }
        }
    }
}

#[test]
fn svm_ignores_points_that_are_not_support_vectors() {
    // 1-D, so the refit's own standardization is a pure rescaling that a
    // matching gamma undoes exactly: the kernel matrix on the kept points is
    // unchanged and so must be the decision function
    let h = blobs(&[vec![0.0], vec![3.0], vec![6.0]], 25, 0.9, 5);
    let y: Vec<usize> = (0..75).map(|i| i / 25).collect();
    let gamma = 0.5;
    let params = |g: f64| SvmParams {
        c: 1.0,
        gamma: Some(g),
        tolerance: 1e-9,
        ..Default::default()
    };
    let full = fit_svm_rbf(&h, &y, 3, &params(gamma), 0).unwrap();
    let keep: Vec<usize> = (0..75)
        .filter(|i| full.machines.iter().any(|m| m.support_index.contains(i)))
        .collect();
    assert!(keep.len() < 75, "every point is a support vector");
    let sub: Vec<Vec<f64>> = keep.iter().map(|&i| h[i].clone()).collect();
    let sub_y: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
    let s = {
        let n = sub.len() as f64;
        let m = sub.iter().map(|x| x[0]).sum::<f64>() / n;
        (sub.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let reduced = fit_svm_rbf(&sub, &sub_y, 3, &params(gamma * (s / full.sd[0]).powi(2)), 0).unwrap();
    for i in 0..100 {
        let p = [-2.0 + 0.1 * i as f64];
        for (a, b) in full.scores(&p).iter().zip(reduced.scores(&p)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b} at {p:?}");
        }
    }
}

#[test]
fn cross_entropy_uniform_logits() {
    let (l, g) = cross_entropy_with_grad(&Tensor::zeros(&[2, 4]), &[0, 3]).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-15);
    assert!((g.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
}

#[test]
fn latents_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.csv");
    let mut r = rng(3);
    let lat: Vec<(u64, Vec<f64>)> = (0..5).map(|i| (i * 10, (0..3).map(|_| r.random::<f64>() - 0.5).collect())).collect();
    write_latents(&p, &lat).unwrap();
    assert_eq!(read_latents(&p).unwrap(), lat);
}

fn pretrained() -> (geoclr::dataset::Dataset, geoclr::nn::TrainedEncoder) {
    let ds = small_survey(16, 6).dataset().unwrap();
    let c = TrainConfig {
        encoder: tiny_encoder(16),
        loss: LossConfig {
            temperature: 0.5,
            batch_size: 16,
        },
        epochs: 1,
        ..Default::default()
    };
    let enc = train(&ds, &c).unwrap().encoder;
    (ds, enc)
}

#[test]
fn finetune_attaches_a_head_and_learns() {
    let (ds, enc) = pretrained();
    let labeled: Vec<(u64, usize)> = ds.images().iter().map(|im| (im.id, im.label.unwrap())).collect();
    let cfg = FinetuneConfig {
        epochs: 15,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let tuned = finetune(&enc, &ds, &labeled, ds.class_names(), &cfg).unwrap();
    assert!(tuned.has_head());
    let ids: Vec<u64> = labeled.iter().map(|(id, _)| *id).collect();
    let pred = predict_encoder(&tuned, &ds, &ids).unwrap();
    let truth: Vec<usize> = labeled.iter().map(|(_, l)| *l).collect();
    let acc = pred.labels.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / ids.len() as f64;
    assert!(acc > 0.5, "training accuracy {acc}");
    assert!(predict_encoder(&enc, &ds, &ids).is_err());
}

#[test]
fn pseudo_labels_cover_pool_and_keep_annotations() {
    let (ds, enc) = pretrained();
    let ids = ds.ids();
    let mut annotations = Vec::new();
    for c in 0..ds.num_classes() {
        let im = ds.images().iter().find(|im| im.label == Some(c)).unwrap();
        annotations.push((im.id, c));
    }
    let pool: Vec<u64> = ids.iter().copied().filter(|id| id % 3 != 0).collect();
    let (tuned, set) = pseudo_label_pipeline(
        &enc,
        &ds,
        &pool,
        &annotations,
        ClassifierKind::Linear,
        &ClassifierSettings::default(),
        &FinetuneConfig {
            epochs: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(tuned.has_head());
    for id in &pool {
        assert!(set.labels.contains_key(id));
    }
    for (id, c) in &annotations {
        assert_eq!(set.labels[id], *c);
    }
    assert!(set.labels.keys().all(|id| pool.contains(id) || annotations.iter().any(|(a, _)| a == id)));
}

#[test]
fn zero_epoch_finetune_is_the_fresh_head() {
    let (ds, enc) = pretrained();
    let labeled: Vec<(u64, usize)> = ds.images().iter().step_by(7).map(|im| (im.id, im.label.unwrap())).collect();
    let cfg = FinetuneConfig {
        epochs: 0,
        ..Default::default()
    };
    let tuned = finetune(&enc, &ds, &labeled, ds.class_names(), &cfg).unwrap();
    for (n, t) in enc.params.iter() {
        assert_eq!(tuned.params.get(n).unwrap(), t);
    }
    let head = geoclr::nn::init_head(
        enc.config.latent_dim,
        ds.num_classes(),
        geoclr::rng::derive_seed(cfg.seed, &[geoclr::rng::tags::FINETUNE]),
    );
    for (n, t) in head.iter() {
        assert_eq!(tuned.params.get(n).unwrap(), t);
    }
    let again = finetune(&enc, &ds, &labeled, ds.class_names(), &FinetuneConfig { epochs: 2, ..cfg }).unwrap();
    let twice = finetune(&enc, &ds, &labeled, ds.class_names(), &FinetuneConfig { epochs: 2, ..cfg }).unwrap();
    assert_eq!(again.params, twice.params);
}

#[test]
fn separable_toy_set_fits_in_fifty_epochs() {
    use geoclr::dataset::{Dataset, GeoRef, GeorefImage, Tile};
    // two flat colours: trivially separable from the pooled features
    let images: Vec<GeorefImage> = (0..24)
        .map(|i| GeorefImage {
            id: i,
            georef: GeoRef::new(i as f64, 0.0, 5.0).unwrap(),
            dive: 0,
            tile: Tile::filled(16, if i % 2 == 0 { 0.2 } else { 0.8 }),
            label: Some((i % 2) as usize),
        })
        .collect();
    let ds = Dataset::new(images, vec!["dark".into(), "light".into()]).unwrap();
    let labeled: Vec<(u64, usize)> = ds.images().iter().map(|im| (im.id, im.label.unwrap())).collect();
    let ids: Vec<u64> = labeled.iter().map(|(id, _)| *id).collect();
    let good = (0..5u64)
        .filter(|&seed| {
            let enc = geoclr::nn::TrainedEncoder {
                config: tiny_encoder(16),
                params: geoclr::nn::init_encoder(&tiny_encoder(16), seed).unwrap(),
                optimizer: None,
                provenance: serde_json::Value::Null,
                class_names: vec![],
            };
            let cfg = FinetuneConfig {
                epochs: 50,
                seed,
                ..Default::default()
            };
            let tuned = finetune(&enc, &ds, &labeled, ds.class_names(), &cfg).unwrap();
            let pred = predict_encoder(&tuned, &ds, &ids).unwrap().labels;
            let acc = pred.iter().zip(&labeled).filter(|(p, (_, l))| *p == l).count() as f64 / 24.0;
            acc >= 0.95
        })
        .count();
    assert!(good >= 3, "{good}/5 seeds reached 0.95");
}

#[test]
fn pseudo_labels_cover_the_whole_dataset() {
    let (ds, enc) = pretrained();
    let ids = ds.ids();
    let annotations: Vec<(u64, usize)> = ds.images().iter().step_by(5).map(|im| (im.id, im.label.unwrap())).collect();
    let settings = ClassifierSettings::default();
    let (_, set) = pseudo_label_pipeline(
        &enc,
        &ds,
        &ids,
        &annotations,
        ClassifierKind::Svm,
        &settings,
        &FinetuneConfig { epochs: 0, ..Default::default() },
    )
    .unwrap();
    assert_eq!(set.labels.len(), ds.len());
    assert_eq!(set.generator, ClassifierKind::Svm);
}

#[test]
fn batch_and_single_predictions_agree() {
    let centers = vec![vec![0.0, 0.0], vec![3.0, 3.0], vec![-3.0, 3.0]];
    let h = blobs(&centers, 10, 1.0, 4);
    let y: Vec<usize> = (0..30).map(|i| i / 10).collect();
    for kind in [ClassifierKind::Linear, ClassifierKind::Svm] {
        let c = geoclr::classify::fit_classifier(kind, &h, &y, 3, &ClassifierSettings::default(), 0).unwrap();
        let batch = c.predict(&h).unwrap();
        for (i, x) in h.iter().enumerate() {
            let one = c.predict(std::slice::from_ref(x)).unwrap();
            assert_eq!(one.labels[0], batch.labels[i]);
            assert_eq!(one.scores[0], batch.scores[i]);
        }
    }
}

#[test]
fn svm_with_an_unannotated_class_round_trips() {
    // class 2 of 3 has no training points
    let h = blobs(&[vec![0.0, 0.0], vec![4.0, 4.0]], 10, 0.5, 12);
    let y: Vec<usize> = (0..20).map(|i| i / 10).collect();
    let model = fit_svm_rbf(&h, &y, 3, &SvmParams::default(), 1).unwrap();
    let absent = &model.machines[2];
    assert!(absent.support.is_empty());
    assert_eq!(absent.rho, 1.0);
    let saved = geoclr::classify::ClassifierModel {
        classifier: Classifier::Svm(model),
        class_names: vec!["a".into(), "b".into(), "c".into()],
        provenance: serde_json::Value::Null,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("svm.bin");
    saved.to_container().write(&path).unwrap();
    let back = geoclr::classify::ClassifierModel::from_container(&geoclr::nn::Container::read(&path).unwrap(), &path).unwrap();
    // solver iteration counts are not persisted
    let (Classifier::Svm(a), Classifier::Svm(b)) = (&back.classifier, &saved.classifier) else { unreachable!() };
    assert!(a.machines.iter().zip(&b.machines).all(|(x, y)| x.rho == y.rho && x.coef == y.coef));
    let pred = back.classifier.predict(&h).unwrap();
    assert_eq!(pred, saved.classifier.predict(&h).unwrap());
    assert!(pred.labels.iter().all(|&l| l != 2));
}

//! Macro-F1 scoring, seeded repeated trials and parameter sweeps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    embed, fit_classifier, finetune, predict_encoder, pseudo_label_pipeline, ClassifierKind, ClassifierSettings,
    FinetuneConfig,
};
use crate::contrastive::{train, Mode, TrainConfig};
use crate::dataset::{Dataset, ImageId};
use crate::error::{Error, Result};
use crate::nn::checkpoint::TrainedEncoder;
use crate::rng::{self, tags};
use crate::select::{select, SelectionConfig, Strategy};

/// Unweighted mean of per-class F1 over all `classes`; a class with
/// `P + R = 0` scores 0.
pub fn macro_f1(predicted: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    per_class_f1(predicted, truth, classes).map(|(_, m)| m)
}

/// Per-class F1 and their unweighted mean.
pub fn per_class_f1(predicted: &[usize], truth: &[usize], classes: usize) -> Result<(Vec<f64>, f64)> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Data(format!(
            "macro-F1 needs equal non-empty label lists, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    if classes == 0 {
        return Err(Error::Data("macro-F1 over zero classes".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut true_count = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Data(format!("label out of range for {classes} classes: ({p}, {t})")));
        }
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let f1: Vec<f64> = (0..classes)
        .map(|c| {
            let precision = if pred_count[c] > 0 { tp[c] as f64 / pred_count[c] as f64 } else { 0.0 };
            let recall = if true_count[c] > 0 { tp[c] as f64 / true_count[c] as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .collect();
    let mean = f1.iter().sum::<f64>() / classes as f64;
    Ok((f1, mean))
}

/// Downstream method evaluated on top of a pretrained encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Linear,
    Svm,
    Finetune,
    PlLinear,
    PlSvm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Svm => "svm",
            Method::Finetune => "finetune",
            Method::PlLinear => "pl-linear",
            Method::PlSvm => "pl-svm",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Method::Linear),
            "svm" => Ok(Method::Svm),
            "finetune" => Ok(Method::Finetune),
            "pl-linear" => Ok(Method::PlLinear),
            "pl-svm" => Ok(Method::PlSvm),
            _ => Err(Error::Config(format!("unknown classifier '{s}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialLabel {
    pub mode: Mode,
    pub classifier: Method,
    pub strategy: Strategy,
    pub M: usize,
    pub r: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub label: TrialLabel,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `trial` for seeds `base_seed .. base_seed + repeats`.
pub fn run_trials(
    label: TrialLabel,
    repeats: usize,
    base_seed: u64,
    trial: impl Fn(u64) -> Result<f64>,
) -> Result<TrialResult> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..repeats as u64).map(|i| base_seed + i).collect();
    let mut scores = Vec::with_capacity(repeats);
    for &s in &seeds {
        let f1 = trial(s).map_err(|e| Error::Data(format!("trial with seed {s}: {e}")))?;
        if !(0.0..=1.0).contains(&f1) {
            return Err(Error::Numerical(format!("trial with seed {s} scored {f1}")));
        }
        scores.push(f1);
    }
    let (mean, sd) = mean_sd(&scores);
    Ok(TrialResult {
        label,
        seeds,
        scores,
        mean,
        sd,
    })
}

/// Class-balanced validation ids: `per_class` uniform draws from each class.
pub fn validation_set(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Vec<ImageId>> {
    let mut out = Vec::new();
    for c in 0..dataset.num_classes() {
        let pool: Vec<ImageId> = dataset
            .images()
            .iter()
            .filter(|im| im.label == Some(c))
            .map(|im| im.id)
            .collect();
        if pool.len() < per_class {
            return Err(Error::Data(format!(
                "class {} has {} labeled images, validation needs {per_class}",
                dataset.class_names()[c],
                pool.len()
            )));
        }
        let mut rng = rng::stream(seed, &[tags::VALIDATION, c as u64]);
        let mut picks: Vec<ImageId> = index::sample(&mut rng, pool.len(), per_class)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        picks.sort_unstable();
        out.extend(picks);
    }
    Ok(out)
}

fn truth_of(dataset: &Dataset, id: ImageId) -> Result<usize> {
    dataset
        .get(id)
        .and_then(|im| im.label)
        .ok_or_else(|| Error::Data(format!("image {id} has no ground-truth label")))
}

/// Everything about one pretrained encoder that stays fixed across trials.
pub struct EvalContext<'a> {
    pub encoder: &'a TrainedEncoder,
    pub dataset: &'a Dataset,
    pub validation: Vec<ImageId>,
    pub validation_truth: Vec<usize>,
    pub validation_latents: Vec<Vec<f64>>,
    /// Ids eligible for annotation and pseudo-labelling (validation excluded).
    pub pool: Vec<ImageId>,
    pub pool_latents: Vec<Vec<f64>>,
}

impl<'a> EvalContext<'a> {
    pub fn new(encoder: &'a TrainedEncoder, dataset: &'a Dataset, validation: &[ImageId]) -> Result<Self> {
        let held: BTreeSet<ImageId> = validation.iter().copied().collect();
        let pool: Vec<ImageId> = dataset.ids().into_iter().filter(|id| !held.contains(id)).collect();
        let validation_truth = validation
            .iter()
            .map(|&id| truth_of(dataset, id))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalContext {
            encoder,
            dataset,
            validation: validation.to_vec(),
            validation_truth,
            validation_latents: embed(encoder, dataset, validation)?,
            pool_latents: embed(encoder, dataset, &pool)?,
            pool,
        })
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub method: Method,
    pub strategy: Strategy,
    pub M: usize,
    /// Top-level clusters for H-kmeans; `None` uses the elbow rule.
    pub m: Option<usize>,
    pub classifier: ClassifierSettings,
    pub finetune: FinetuneConfig,
    /// Epochs for fine-tuning on pseudo-labelled data, which is much larger
    /// than the annotated set.
    pub pl_epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            method: Method::Linear,
            strategy: Strategy::Balanced,
            M: 40,
            m: None,
            classifier: ClassifierSettings::default(),
            finetune: FinetuneConfig::default(),
            pl_epochs: 10,
        }
    }
}

/// Annotation picks for one trial, drawn from the context pool.
pub fn select_annotations(ctx: &EvalContext, probe: &ProbeConfig, seed: u64) -> Result<Vec<(ImageId, usize)>> {
    let latents: Vec<(ImageId, Vec<f64>)> = ctx.pool.iter().copied().zip(ctx.pool_latents.iter().cloned()).collect();
    let labeled = ctx
        .pool
        .iter()
        .map(|&id| Ok((id, truth_of(ctx.dataset, id)?)))
        .collect::<Result<Vec<_>>>()?;
    let config = SelectionConfig {
        M: probe.M,
        strategy: probe.strategy,
        m: probe.m,
        seed,
    };
    let picks = select(&config, &latents, &labeled, ctx.dataset.num_classes())?;
    let held: BTreeSet<ImageId> = ctx.validation.iter().copied().collect();
    if let Some(id) = picks.iter().find(|id| held.contains(id)) {
        return Err(Error::Data(format!("validation image {id} was selected for annotation")));
    }
    picks.into_iter().map(|id| Ok((id, truth_of(ctx.dataset, id)?))).collect()
}

/// Macro-F1 on the validation set for one seeded trial.
pub fn evaluate_once(ctx: &EvalContext, probe: &ProbeConfig, seed: u64) -> Result<f64> {
    let classes = ctx.dataset.num_classes();
    let annotations = select_annotations(ctx, probe, seed)?;
    let predicted = match probe.method {
        Method::Linear | Method::Svm => {
            let kind = if probe.method == Method::Linear {
                ClassifierKind::Linear
            } else {
                ClassifierKind::Svm
            };
            let pos: std::collections::HashMap<ImageId, usize> =
                ctx.pool.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let h: Vec<Vec<f64>> = annotations.iter().map(|(id, _)| ctx.pool_latents[pos[id]].clone()).collect();
            let y: Vec<usize> = annotations.iter().map(|(_, l)| *l).collect();
            let clf = fit_classifier(kind, &h, &y, classes, &probe.classifier, seed)?;
            clf.predict(&ctx.validation_latents)?.labels
        }
        Method::Finetune => {
            let config = FinetuneConfig { seed, ..probe.finetune };
            let tuned = finetune(ctx.encoder, ctx.dataset, &annotations, ctx.dataset.class_names(), &config)?;
            predict_encoder(&tuned, ctx.dataset, &ctx.validation)?.labels
        }
        Method::PlLinear | Method::PlSvm => {
            let kind = if probe.method == Method::PlLinear {
                ClassifierKind::Linear
            } else {
                ClassifierKind::Svm
            };
            let config = FinetuneConfig {
                seed,
                epochs: probe.pl_epochs,
                ..probe.finetune
            };
            let (tuned, labels) =
                pseudo_label_pipeline(ctx.encoder, ctx.dataset, &ctx.pool, &annotations, kind, &probe.classifier, &config)?;
            if ctx.validation.iter().any(|id| labels.labels.contains_key(id)) {
                return Err(Error::Data("validation image entered the pseudo-label set".into()));
            }
            predict_encoder(&tuned, ctx.dataset, &ctx.validation)?.labels
        }
    };
    macro_f1(&predicted, &ctx.validation_truth, classes)
}

/// Axes of a sweep; every combination is one cell.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub mode: Vec<Mode>,
    pub r: Vec<f64>,
    pub lambda: Vec<f64>,
    pub M: Vec<usize>,
    pub classifier: Vec<Method>,
    pub strategy: Vec<Strategy>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("mode", self.mode.is_empty()),
            ("r", self.r.is_empty()),
            ("lambda", self.lambda.is_empty()),
            ("M", self.M.is_empty()),
            ("classifier", self.classifier.is_empty()),
            ("strategy", self.strategy.is_empty()),
        ];
        if let Some((axis, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("sweep axis '{axis}' is empty")));
        }
        Ok(())
    }

    /// Encoder cells `(mode, r, lambda)` in grid order.
    pub fn encoder_cells(&self) -> Vec<(Mode, f64, f64)> {
        let mut out = Vec::new();
        for &mode in &self.mode {
            for &r in &self.r {
                for &lambda in &self.lambda {
                    out.push((mode, r, lambda));
                }
            }
        }
        out
    }

    /// All cells in grid order.
    pub fn cells(&self) -> Vec<TrialLabel> {
        let mut out = Vec::new();
        for (mode, r, lambda) in self.encoder_cells() {
            for &classifier in &self.classifier {
                for &strategy in &self.strategy {
                    for &m in &self.M {
                        out.push(TrialLabel {
                            mode,
                            classifier,
                            strategy,
                            M: m,
                            r,
                            lambda,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: TrialLabel,
    pub result: std::result::Result<TrialResult, String>,
}

/// Trains one encoder per `(mode, r, lambda)` and evaluates every
/// classifier/strategy/M combination on it. Failed cells are kept as errors.
pub fn sweep(
    dataset: &Dataset,
    grid: &SweepGrid,
    train_template: &TrainConfig,
    probe_template: &ProbeConfig,
    validation: &[ImageId],
    repeats: usize,
    base_seed: u64,
) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    let per_encoder: Vec<Vec<SweepRow>> = grid
        .encoder_cells()
        .into_par_iter()
        .map(|(mode, r, lambda)| {
            let mut config = train_template.clone();
            config.mode = mode;
            config.pairing.r = r;
            config.pairing.lambda = lambda;
            let labels: Vec<TrialLabel> = grid
                .cells()
                .into_iter()
                .filter(|l| l.mode == mode && l.r == r && l.lambda == lambda)
                .collect();
            match train(dataset, &config).map(|out| out.encoder) {
                Err(e) => labels
                    .into_iter()
                    .map(|label| SweepRow {
                        label,
                        result: Err(format!("training failed: {e}")),
                    })
                    .collect(),
                Ok(encoder) => match EvalContext::new(&encoder, dataset, validation) {
                    Err(e) => labels
                        .into_iter()
                        .map(|label| SweepRow {
                            label,
                            result: Err(format!("embedding failed: {e}")),
                        })
                        .collect(),
                    Ok(ctx) => labels
                        .into_iter()
                        .map(|label| {
                            let probe = ProbeConfig {
                                method: label.classifier,
                                strategy: label.strategy,
                                M: label.M,
                                ..probe_template.clone()
                            };
                            let result = run_trials(label, repeats, base_seed, |s| evaluate_once(&ctx, &probe, s))
                                .map_err(|e| e.to_string());
                            SweepRow { label, result }
                        })
                        .collect(),
                },
            }
        })
        .collect();
    Ok(per_encoder.into_iter().flatten().collect())
}

pub const RESULTS_HEADER: &str = "mode,classifier,strategy,M,r,lambda,seed,f1";
pub const SUMMARY_HEADER: &str = "mode,classifier,strategy,M,r,lambda,repeats,mean,sd_population,svm_c,svm_gamma,error";

fn label_prefix(l: &TrialLabel) -> String {
    format!("{},{},{},{},{},{}", l.mode, l.classifier, l.strategy, l.M, l.r, l.lambda)
}

pub fn results_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for row in rows {
        if let Ok(t) = &row.result {
            for (seed, f1) in t.seeds.iter().zip(&t.scores) {
                let _ = writeln!(s, "{},{seed},{f1}", label_prefix(&row.label));
            }
        }
    }
    s
}

pub fn summary_csv(rows: &[SweepRow], svm: &crate::classify::SvmParams) -> String {
    let gamma = svm.gamma.map_or("scale".to_string(), |g| g.to_string());
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for row in rows {
        let prefix = label_prefix(&row.label);
        match &row.result {
            Ok(t) => {
                let _ = writeln!(s, "{prefix},{},{},{},{},{gamma},", t.scores.len(), t.mean, t.sd, svm.c);
            }
            Err(e) => {
                let msg = e.replace([',', '\n'], ";");
                let _ = writeln!(s, "{prefix},0,,,{},{gamma},{msg}", svm.c);
            }
        }
    }
    s
}

/// Writes `path` and `<stem>_summary.csv` beside it.
pub fn write_sweep(path: &Path, rows: &[SweepRow], svm: &crate::classify::SvmParams) -> Result<()> {
    std::fs::write(path, results_csv(rows)).map_err(|e| Error::io(path, e))?;
    let summary = summary_path(path);
    std::fs::write(&summary, summary_csv(rows, svm)).map_err(|e| Error::io(&summary, e))
}

pub fn summary_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    path.with_file_name(format!("{stem}_summary.csv"))
}

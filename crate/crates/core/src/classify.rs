//! Classifiers on latent vectors (multinomial logistic regression, RBF SVM)
//! and supervised fine-tuning of the encoder, optionally on pseudo-labels.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageId, Tile};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Container, TrainedEncoder};
use crate::nn::encoder::{batch_tensor, embed_tiles, forward, head_specs, init_head};
use crate::nn::optim::{OptimizerKind, OptimizerSettings, OptimizerState};
use crate::nn::tensor::Tensor;
use crate::rng::{self, tags};

pub const LOGREG_MAX_ITERATIONS: usize = 5000;
pub const LOGREG_GRAD_TOL: f64 = 1e-6;
pub const DEFAULT_L2: f64 = 1e-4;
pub const EMBED_CHUNK: usize = 256;

/// Argmax with ties to the smallest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_training(h: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<usize> {
    if h.len() != labels.len() {
        return Err(Error::Shape(format!("{} vectors but {} labels", h.len(), labels.len())));
    }
    if h.len() < 2 {
        return Err(Error::Data("a classifier needs at least 2 training points".into()));
    }
    let d = h[0].len();
    if d == 0 || h.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("training vectors have inconsistent dimensions".into()));
    }
    if h.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite training feature".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::Data("training labels contain a single class".into()));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `C x d`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }
}

/// Mean multinomial cross-entropy plus `l2 / 2 * ||W||^2` (biases are not
/// penalized).
pub fn logreg_objective(model: &LinearClassifier, h: &[Vec<f64>], labels: &[usize], l2: f64) -> f64 {
    let n = h.len() as f64;
    let mut loss = 0.0;
    for (x, &y) in h.iter().zip(labels) {
        let s = model.scores(x);
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - s[y];
    }
    let penalty: f64 = model.weights.iter().flatten().map(|w| w * w).sum();
    loss / n + 0.5 * l2 * penalty
}

/// Gradient of [`logreg_objective`] with respect to weights and biases.
pub fn logreg_gradient(model: &LinearClassifier, h: &[Vec<f64>], labels: &[usize], l2: f64) -> LinearClassifier {
    let c = model.classes();
    let d = model.dim();
    let n = h.len() as f64;
    let mut gw = vec![vec![0.0; d]; c];
    let mut gb = vec![0.0; c];
    for (x, &y) in h.iter().zip(labels) {
        let s = model.scores(x);
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..c {
            let r = e[k] / z - if k == y { 1.0 } else { 0.0 };
            gb[k] += r / n;
            for (g, xv) in gw[k].iter_mut().zip(x) {
                *g += r * xv / n;
            }
        }
    }
    for (g, w) in gw.iter_mut().flatten().zip(model.weights.iter().flatten()) {
        *g += l2 * w;
    }
    LinearClassifier { weights: gw, biases: gb }
}

fn norm_sq(m: &LinearClassifier) -> f64 {
    m.weights.iter().flatten().chain(&m.biases).map(|v| v * v).sum()
}

fn axpy(m: &LinearClassifier, t: f64, g: &LinearClassifier) -> LinearClassifier {
    LinearClassifier {
        weights: m
            .weights
            .iter()
            .zip(&g.weights)
            .map(|(w, gw)| w.iter().zip(gw).map(|(a, b)| a + t * b).collect())
            .collect(),
        biases: m.biases.iter().zip(&g.biases).map(|(a, b)| a + t * b).collect(),
    }
}

/// Per-column mean and standard deviation (1 for constant columns).
fn standardizer(h: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = h[0].len();
    let n = h.len() as f64;
    let mut mean = vec![0.0; d];
    for x in h {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for x in h {
        for ((s, v), m) in sd.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

/// Full-batch gradient descent with Armijo backtracking from zero weights.
/// Features are standardized internally; the returned model applies to raw
/// features. Zero initialization makes the fit independent of `seed`.
pub fn fit_logreg(h: &[Vec<f64>], labels: &[usize], classes: usize, l2: f64, _seed: u64) -> Result<LinearClassifier> {
    let d = check_training(h, labels, classes)?;
    let (mean, sd) = standardizer(h);
    let xs: Vec<Vec<f64>> = h
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let mut model = LinearClassifier {
        weights: vec![vec![0.0; d]; classes],
        biases: vec![0.0; classes],
    };
    let mut f = logreg_objective(&model, &xs, labels, l2);
    let mut step = 1.0;
    for _ in 0..LOGREG_MAX_ITERATIONS {
        let g = logreg_gradient(&model, &xs, labels, l2);
        let gg = norm_sq(&g);
        if gg.sqrt() < LOGREG_GRAD_TOL {
            break;
        }
        step *= 2.0;
        loop {
            let cand = axpy(&model, -step, &g);
            let fc = logreg_objective(&cand, &xs, labels, l2);
            if fc <= f - 0.5 * step * gg {
                model = cand;
                f = fc;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return Err(Error::Numerical("logistic regression line search stalled".into()));
            }
        }
    }
    // fold the standardization into the weights
    for (w, b) in model.weights.iter_mut().zip(&mut model.biases) {
        for ((wj, m), s) in w.iter_mut().zip(&mean).zip(&sd) {
            *wj /= s;
            *b -= *wj * m;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub c: f64,
    /// `None` selects `1 / (d * var(features))`.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    /// Kernel row cache budget in bytes, shared by all one-vs-rest problems.
    pub cache_bytes: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            gamma: None,
            tolerance: 1e-3,
            cache_bytes: 64 << 20,
        }
    }
}

/// Binary machine: `f(x) = sum coef_i K(sv_i, x) - rho` with
/// `coef_i = y_i alpha_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub support: Vec<Vec<f64>>,
    /// Training-set position of each support vector.
    pub support_index: Vec<usize>,
    pub coef: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    pub c: f64,
    /// Per-feature standardization applied before the kernel; support
    /// vectors are stored standardized.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// One machine per class (class vs rest).
    pub machines: Vec<BinarySvm>,
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp()
}

/// `1 / (d * var)` with the variance taken over all feature values.
pub fn scale_gamma(h: &[Vec<f64>]) -> f64 {
    let d = h[0].len();
    let vals: Vec<f64> = h.iter().flatten().copied().collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}

impl SvmModel {
    pub fn classes(&self) -> usize {
        self.machines.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let x = self.standardize(x);
        self.machines
            .iter()
            .map(|m| {
                m.support
                    .iter()
                    .zip(&m.coef)
                    .map(|(s, c)| c * rbf(s, &x, self.gamma))
                    .sum::<f64>()
                    - m.rho
            })
            .collect()
    }
}

/// Kernel rows computed on demand and kept in a bounded FIFO cache.
struct KernelRows<'a> {
    x: &'a [Vec<f64>],
    gamma: f64,
    capacity: usize,
    rows: HashMap<usize, Vec<f64>>,
    order: VecDeque<usize>,
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a [Vec<f64>], gamma: f64, budget: usize) -> Self {
        let capacity = (budget / (8 * x.len().max(1))).max(2);
        KernelRows {
            x,
            gamma,
            capacity,
            rows: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.capacity {
                let old = self.order.pop_front().expect("non-empty cache");
                self.rows.remove(&old);
            }
            let xi = &self.x[i];
            let r = self.x.iter().map(|xj| rbf(xi, xj, self.gamma)).collect();
            self.rows.insert(i, r);
            self.order.push_back(i);
        }
        &self.rows[&i]
    }
}

/// SMO with second-order working-set selection on
/// `min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0`.
fn smo(x: &[Vec<f64>], y: &[f64], gamma: f64, params: &SvmParams, cache: usize) -> Result<(Vec<f64>, f64, usize)> {
    let n = x.len();
    let c = params.c;
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut rows = KernelRows::new(x, gamma, cache);
    let max_iter = (100 * n).max(10_000_000);
    let up = |a: f64, yy: f64| (yy > 0.0 && a < c) || (yy < 0.0 && a > 0.0);
    let low = |a: f64, yy: f64| (yy > 0.0 && a > 0.0) || (yy < 0.0 && a < c);
    let mut iter = 0;
    while iter < max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let ki = rows.row(i).to_vec();
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let yg = y[t] * grad[t];
            gmax2 = gmax2.max(yg);
            let diff = gmax + yg;
            if diff > 0.0 {
                let quad = (2.0 - 2.0 * ki[t]).max(1e-12);
                let obj = -diff * diff / quad;
                if obj <= obj_min {
                    obj_min = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < params.tolerance || j == usize::MAX {
            break;
        }
        iter += 1;
        let kj = rows.row(j).to_vec();
        let quad = (ki[i] + kj[j] - 2.0 * ki[j]).max(1e-12);
        let (oi, oj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - oi, alpha[j] - oj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }
    if alpha.iter().chain(&grad).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("SMO produced non-finite values".into()));
    }
    let (mut ub, mut lb, mut sum, mut free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    // one-sided problems (a class absent from the annotations) leave one
    // bound infinite; the finite one is the tightest feasible offset
    let rho = if free > 0 {
        sum / free as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else if lb.is_finite() {
        lb
    } else {
        ub
    };
    Ok((alpha, rho, iter))
}

/// One-vs-rest RBF SVMs on standardized features, trained in parallel.
pub fn fit_svm_rbf(h: &[Vec<f64>], labels: &[usize], classes: usize, params: &SvmParams, _seed: u64) -> Result<SvmModel> {
    check_training(h, labels, classes)?;
    if !(params.c > 0.0 && params.tolerance > 0.0) {
        return Err(Error::Config("SVM needs C > 0 and tolerance > 0".into()));
    }
    let (mean, sd) = standardizer(h);
    let xs: Vec<Vec<f64>> = h
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let h = &xs[..];
    let gamma = params.gamma.unwrap_or_else(|| scale_gamma(h));
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("invalid RBF gamma {gamma}")));
    }
    let cache = params.cache_bytes / classes.max(1);
    let machines = (0..classes)
        .into_par_iter()
        .map(|k| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
            let (alpha, rho, iterations) = smo(h, &y, gamma, params, cache)?;
            let mut m = BinarySvm {
                support: Vec::new(),
                support_index: Vec::new(),
                coef: Vec::new(),
                rho,
                iterations,
            };
            for (t, &a) in alpha.iter().enumerate() {
                if a > 0.0 {
                    m.support.push(h[t].clone());
                    m.support_index.push(t);
                    m.coef.push(y[t] * a);
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SvmModel {
        gamma,
        c: params.c,
        mean,
        sd,
        machines,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Linear,
    Svm,
}

impl ClassifierKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassifierKind::Linear => "linear",
            ClassifierKind::Svm => "svm",
        }
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ClassifierKind::Linear),
            "svm" => Ok(ClassifierKind::Svm),
            _ => Err(Error::Config(format!("unknown classifier '{s}'"))),
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Linear(LinearClassifier),
    Svm(SvmModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSettings {
    pub l2: f64,
    pub svm: SvmParams,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            l2: DEFAULT_L2,
            svm: SvmParams::default(),
        }
    }
}

pub fn fit_classifier(
    kind: ClassifierKind,
    h: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    settings: &ClassifierSettings,
    seed: u64,
) -> Result<Classifier> {
    let seed = rng::derive_seed(seed, &[tags::CLASSIFY]);
    Ok(match kind {
        ClassifierKind::Linear => Classifier::Linear(fit_logreg(h, labels, classes, settings.l2, seed)?),
        ClassifierKind::Svm => Classifier::Svm(fit_svm_rbf(h, labels, classes, &settings.svm, seed)?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Linear(_) => ClassifierKind::Linear,
            Classifier::Svm(_) => ClassifierKind::Svm,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Classifier::Linear(m) => m.classes(),
            Classifier::Svm(m) => m.classes(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Classifier::Linear(m) => m.dim(),
            Classifier::Svm(m) => m.dim(),
        }
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Classifier::Linear(m) => m.scores(x),
            Classifier::Svm(m) => m.scores(x),
        }
    }

    pub fn predict(&self, h: &[Vec<f64>]) -> Result<Prediction> {
        let d = self.dim();
        if let Some(x) = h.iter().find(|x| x.len() != d) {
            return Err(Error::Shape(format!("classifier expects {d} features, got {}", x.len())));
        }
        let scores: Vec<Vec<f64>> = h.par_iter().map(|x| self.scores(x)).collect();
        let labels = scores.iter().map(|s| argmax(s)).collect();
        Ok(Prediction { labels, scores })
    }
}

pub const LINEAR_KIND: &str = "linear";
pub const SVM_KIND: &str = "svm";

/// A classical classifier plus the names of its classes, stored in the
/// checkpoint container.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub classifier: Classifier,
    pub class_names: Vec<String>,
    /// Resolved settings and inputs, kept for provenance.
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    kind: String,
    class_names: Vec<String>,
    gamma: Option<f64>,
    c: Option<f64>,
    rho: Option<Vec<f64>>,
    provenance: serde_json::Value,
}

fn rows_tensor(rows: &[Vec<f64>], d: usize) -> Tensor {
    Tensor::new(vec![rows.len(), d], rows.iter().flatten().copied().collect()).expect("rectangular rows")
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().get(1).copied().unwrap_or(0).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

impl ClassifierModel {
    pub fn to_container(&self) -> Container {
        let mut header = ClassifierHeader {
            kind: String::new(),
            class_names: self.class_names.clone(),
            gamma: None,
            c: None,
            rho: None,
            provenance: self.provenance.clone(),
        };
        let mut blocks = Vec::new();
        match &self.classifier {
            Classifier::Linear(m) => {
                header.kind = LINEAR_KIND.into();
                blocks.push(("linear/weights".into(), rows_tensor(&m.weights, m.dim())));
                blocks.push((
                    "linear/biases".into(),
                    Tensor::new(vec![m.classes()], m.biases.clone()).expect("flat"),
                ));
            }
            Classifier::Svm(m) => {
                header.kind = SVM_KIND.into();
                header.gamma = Some(m.gamma);
                header.c = Some(m.c);
                header.rho = Some(m.machines.iter().map(|b| b.rho).collect());
                let d = m.dim();
                blocks.push(("svm/mean".into(), Tensor::new(vec![d], m.mean.clone()).expect("flat")));
                blocks.push(("svm/sd".into(), Tensor::new(vec![d], m.sd.clone()).expect("flat")));
                for (k, b) in m.machines.iter().enumerate() {
                    blocks.push((format!("svm{k}/support"), rows_tensor(&b.support, d)));
                    blocks.push((
                        format!("svm{k}/coef"),
                        Tensor::new(vec![b.coef.len()], b.coef.clone()).expect("flat"),
                    ));
                    blocks.push((
                        format!("svm{k}/support_index"),
                        Tensor::new(
                            vec![b.support_index.len()],
                            b.support_index.iter().map(|&i| i as f64).collect(),
                        )
                        .expect("flat"),
                    ));
                }
            }
        }
        Container {
            config: serde_json::to_value(header).expect("header serializes"),
            blocks,
        }
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let header: ClassifierHeader = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::corrupt(path, format!("classifier header: {e}")))?;
        let block = |name: &str| {
            c.block(name)
                .ok_or_else(|| Error::corrupt(path, format!("missing block {name}")))
        };
        let classes = header.class_names.len();
        let classifier = match header.kind.as_str() {
            LINEAR_KIND => {
                let w = block("linear/weights")?;
                let b = block("linear/biases")?;
                if w.shape().len() != 2 || w.shape()[0] != classes || b.len() != classes {
                    return Err(Error::corrupt(path, "linear block shapes do not match the class list"));
                }
                Classifier::Linear(LinearClassifier {
                    weights: tensor_rows(w),
                    biases: b.data().to_vec(),
                })
            }
            SVM_KIND => {
                let rho = header.rho.ok_or_else(|| Error::corrupt(path, "svm header lacks rho"))?;
                if rho.len() != classes {
                    return Err(Error::corrupt(path, "svm rho count does not match the class list"));
                }
                let mut machines = Vec::with_capacity(classes);
                for (k, rho) in rho.into_iter().enumerate() {
                    let s = block(&format!("svm{k}/support"))?;
                    let coef = block(&format!("svm{k}/coef"))?;
                    let idx = block(&format!("svm{k}/support_index"))?;
                    let support = if s.is_empty() { Vec::new() } else { tensor_rows(s) };
                    if support.len() != coef.len() || idx.len() != coef.len() {
                        return Err(Error::corrupt(path, format!("svm{k} blocks disagree in length")));
                    }
                    machines.push(BinarySvm {
                        support,
                        support_index: idx.data().iter().map(|&v| v as usize).collect(),
                        coef: coef.data().to_vec(),
                        rho,
                        iterations: 0,
                    });
                }
                let mean = block("svm/mean")?.data().to_vec();
                let sd = block("svm/sd")?.data().to_vec();
                if sd.len() != mean.len() || machines.iter().flat_map(|m| &m.support).any(|s| s.len() != mean.len()) {
                    return Err(Error::corrupt(path, "svm blocks disagree in dimension"));
                }
                Classifier::Svm(SvmModel {
                    gamma: header.gamma.ok_or_else(|| Error::corrupt(path, "svm header lacks gamma"))?,
                    c: header.c.ok_or_else(|| Error::corrupt(path, "svm header lacks C"))?,
                    mean,
                    sd,
                    machines,
                })
            }
            other => return Err(Error::corrupt(path, format!("expected a classifier model, found '{other}'"))),
        };
        Ok(ClassifierModel {
            classifier,
            class_names: header.class_names,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_container(&Container::read(path)?, path)
    }
}

/// Latent `h` for the given ids.
pub fn embed(encoder: &TrainedEncoder, dataset: &Dataset, ids: &[ImageId]) -> Result<Vec<Vec<f64>>> {
    let tiles = ids
        .iter()
        .map(|id| {
            dataset
                .get(*id)
                .map(|im| &im.tile)
                .ok_or_else(|| Error::Data(format!("image {id} not in dataset")))
        })
        .collect::<Result<Vec<&Tile>>>()?;
    embed_tiles(&encoder.config, &encoder.params, &tiles, EMBED_CHUNK)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Upper bound; the effective batch is `min(batch_size, labeled count)`.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight each example by `n / (C * n_class)` so rare classes count as
    /// much as common ones.
    pub class_balanced: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            batch_size: 256,
            learning_rate: 3.0e-4,
            weight_decay: 0.0,
            class_balanced: true,
            seed: 1,
        }
    }
}

/// Softmax cross-entropy averaged over rows and its gradient w.r.t. logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    weighted_cross_entropy_with_grad(logits, labels, &vec![1.0; labels.len()])
}

/// `sum_i w_i CE_i / B` and its gradient w.r.t. logits.
pub fn weighted_cross_entropy_with_grad(logits: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || weights.len() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {s:?} vs {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    let (b, c) = (s[0], s[1]);
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let w = weights[i];
        loss += w * (m + z.ln() - row[y]);
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for k in 0..c {
            g[k] = w * ((row[k] - m).exp() / z - if k == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Appends a fresh `C`-way head on `h` and trains head and encoder end to end
/// on cross-entropy. An encoder that already has a head keeps it only when
/// its class list matches.
pub fn finetune(
    encoder: &TrainedEncoder,
    dataset: &Dataset,
    labeled: &[(ImageId, usize)],
    class_names: &[String],
    config: &FinetuneConfig,
) -> Result<TrainedEncoder> {
    let classes = class_names.len();
    if labeled.iter().any(|(_, l)| *l >= classes) {
        return Err(Error::Data("fine-tuning label out of range".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = labeled.iter().map(|(_, l)| *l).collect();
    if distinct.len() < 2 {
        return Err(Error::Data("fine-tuning labels cover fewer than 2 classes".into()));
    }
    let mut tiles = Vec::with_capacity(labeled.len());
    for (id, _) in labeled {
        tiles.push(&dataset.get(*id).ok_or_else(|| Error::Data(format!("image {id} not in dataset")))?.tile);
    }
    let mut params = encoder.params.clone();
    if !(encoder.has_head() && encoder.class_names == class_names) {
        params.remove("head.w");
        params.remove("head.b");
        let head = init_head(
            encoder.config.latent_dim,
            classes,
            rng::derive_seed(config.seed, &[tags::FINETUNE]),
        );
        for (n, t) in head.iter() {
            params.insert(n, t.clone());
        }
    }
    let mut specs = crate::nn::encoder::param_specs(&encoder.config);
    specs.extend(head_specs(encoder.config.latent_dim, classes));
    params.check_against(&specs)?;

    let mut opt = OptimizerState::new(OptimizerSettings {
        kind: OptimizerKind::adam(),
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
    });
    let mut class_weight = vec![1.0; classes];
    if config.class_balanced {
        let mut counts = vec![0usize; classes];
        for (_, l) in labeled {
            counts[*l] += 1;
        }
        let present = counts.iter().filter(|&&n| n > 0).count() as f64;
        for (w, &n) in class_weight.iter_mut().zip(&counts) {
            if n > 0 {
                *w = labeled.len() as f64 / (present * n as f64);
            }
        }
    }
    let batch = config.batch_size.min(labeled.len()).max(1);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, &[tags::FINETUNE, epoch as u64]));
        for (step, chunk) in order.chunks(batch).enumerate() {
            let views: Vec<&Tile> = chunk.iter().map(|&i| tiles[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| labeled[i].1).collect();
            let pass = forward(&encoder.config, &params, batch_tensor(&views)?, true)?;
            let logits_var = pass.logits.expect("head requested");
            let weights: Vec<f64> = labels.iter().map(|&l| class_weight[l]).collect();
            let (_, dl) = weighted_cross_entropy_with_grad(pass.tape.value(logits_var), &labels, &weights)?;
            let grads = pass.tape.backward(&[(logits_var, dl)])?;
            opt.step(&mut params, grads.params())
                .map_err(|e| Error::Numerical(format!("fine-tune epoch {} step {step}: {e}", epoch + 1)))?;
        }
    }
    let mut provenance = serde_json::Map::new();
    provenance.insert("pretrain".into(), encoder.provenance.clone());
    provenance.insert("finetune".into(), serde_json::to_value(config).expect("serializes"));
    provenance.insert("finetune_examples".into(), labeled.len().into());
    Ok(TrainedEncoder {
        config: encoder.config.clone(),
        params,
        optimizer: Some(opt),
        provenance: serde_json::Value::Object(provenance),
        class_names: class_names.to_vec(),
    })
}

/// Class predictions of a fine-tuned encoder's head.
pub fn predict_encoder(encoder: &TrainedEncoder, dataset: &Dataset, ids: &[ImageId]) -> Result<Prediction> {
    if !encoder.has_head() {
        return Err(Error::Config("encoder has no classification head".into()));
    }
    let mut labels = Vec::with_capacity(ids.len());
    let mut scores = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EMBED_CHUNK) {
        let mut tiles = Vec::with_capacity(chunk.len());
        for id in chunk {
            tiles.push(&dataset.get(*id).ok_or_else(|| Error::Data(format!("image {id} not in dataset")))?.tile);
        }
        let pass = forward(&encoder.config, &encoder.params, batch_tensor(&tiles)?, true)?;
        let logits = pass.logits().expect("head requested");
        for i in 0..chunk.len() {
            let row = logits.row(i).to_vec();
            labels.push(argmax(&row));
            scores.push(row);
        }
    }
    Ok(Prediction { labels, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub generator: ClassifierKind,
    pub labels: BTreeMap<ImageId, usize>,
}

/// Fits a classical classifier on the annotated latents, labels every id in
/// `pool` with it (true annotations take precedence), and fine-tunes on the
/// result.
pub fn pseudo_label_pipeline(
    encoder: &TrainedEncoder,
    dataset: &Dataset,
    pool: &[ImageId],
    annotations: &[(ImageId, usize)],
    generator: ClassifierKind,
    settings: &ClassifierSettings,
    finetune_config: &FinetuneConfig,
) -> Result<(TrainedEncoder, PseudoLabelSet)> {
    let classes = dataset.num_classes();
    if annotations.len() < classes {
        return Err(Error::Data(format!(
            "{} annotations cannot cover {classes} classes",
            annotations.len()
        )));
    }
    let ann_ids: Vec<ImageId> = annotations.iter().map(|(id, _)| *id).collect();
    let ann_h = embed(encoder, dataset, &ann_ids)?;
    let ann_y: Vec<usize> = annotations.iter().map(|(_, l)| *l).collect();
    let clf = fit_classifier(generator, &ann_h, &ann_y, classes, settings, finetune_config.seed)?;
    let pool_h = embed(encoder, dataset, pool)?;
    let pred = clf.predict(&pool_h)?;
    let mut labels: BTreeMap<ImageId, usize> = pool.iter().copied().zip(pred.labels).collect();
    for &(id, l) in annotations {
        labels.insert(id, l);
    }
    let set = PseudoLabelSet { generator, labels };
    let labeled: Vec<(ImageId, usize)> = set.labels.iter().map(|(&id, &l)| (id, l)).collect();
    let tuned = finetune(encoder, dataset, &labeled, dataset.class_names(), finetune_config)?;
    Ok((tuned, set))
}

/// Writes latent vectors as CSV `id,h0,h1,...`.
pub fn write_latents(path: &Path, latents: &[(ImageId, Vec<f64>)]) -> Result<()> {
    let d = latents.first().map_or(0, |(_, h)| h.len());
    let mut s = String::from("id");
    for j in 0..d {
        s.push_str(&format!(",h{j}"));
    }
    s.push('\n');
    for (id, h) in latents {
        s.push_str(&id.to_string());
        for v in h {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_latents(path: &Path) -> Result<Vec<(ImageId, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"id") || cols.len() < 2 {
        return Err(parse_err(1, "expected header 'id,h0,...'".into()));
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(i + 1, format!("expected {} fields, got {}", cols.len(), fields.len())));
        }
        let id: ImageId = fields[0].trim().parse().map_err(|_| parse_err(i + 1, format!("bad id '{}'", fields[0])))?;
        if !seen.insert(id) {
            return Err(parse_err(i + 1, format!("duplicate id {id}")));
        }
        let h = fields[1..]
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(i + 1, format!("bad value '{f}'"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((id, h));
    }
    Ok(out)
}

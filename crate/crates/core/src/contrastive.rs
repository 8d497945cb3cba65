//! NT-Xent loss, SimCLR/GeoCLR minibatch assembly and the contrastive
//! training loop.
//!
//! A minibatch of `N` anchors becomes `2N` views ordered pairwise
//! (`0,1`, `2,3`, ...). For each view `i` with partner `p(i)`:
//!
//! ```text
//! l(i) = -log( exp(cos(z_i, z_p) / tau) / sum_{k != i} exp(cos(z_i, z_k) / tau) )
//! L    = mean_i l(i)
//! ```

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, AugmentConfig};
use crate::dataset::{Dataset, ImageId, Tile};
use crate::error::{Error, Result};
use crate::geopair::{build_index, weighted_distance, GeoIndex, PairSamplerConfig};
use crate::nn::{
    batch_tensor, forward, init_encoder, EncoderConfig, OptimizerSettings, OptimizerState, Tensor,
    TrainedEncoder,
};
use crate::rng::{self, tags, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    SimClr,
    GeoClr,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SimClr => "simclr",
            Mode::GeoClr => "geoclr",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(Mode::SimClr),
            "geoclr" => Ok(Mode::GeoClr),
            other => Err(Error::Config(format!("unknown mode {other:?} (simclr|geoclr)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            batch_size: 32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2 so every pair has a negative, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

fn unit_rows(z: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if z.shape().len() != 2 {
        return Err(Error::Shape(format!("z must be 2-D, got {:?}", z.shape())));
    }
    let rows = z.dim(0);
    let mut units = Vec::with_capacity(rows);
    let mut norms = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = z.row(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numerical(format!("row {i} of z has norm {n}; cosine undefined")));
        }
        units.push(r.iter().map(|v| v / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `l(i, j)`: the denominator runs over every row except `i`, so it includes
/// the positive `j` itself.
pub fn pairwise_loss(z: &Tensor, i: usize, j: usize, temperature: f64) -> Result<f64> {
    let rows = z.dim(0);
    if i >= rows || j >= rows || i == j {
        return Err(Error::Shape(format!("invalid pair ({i}, {j}) for {rows} rows")));
    }
    let (u, _) = unit_rows(z)?;
    let sims = (0..rows).filter(|&k| k != i).map(|k| dot(&u[i], &u[k]) / temperature);
    Ok(log_sum_exp(sims) - dot(&u[i], &u[j]) / temperature)
}

/// Minibatch loss over pairwise-ordered rows and its gradient with respect to `z`.
pub fn batch_loss_with_grad(z: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    let rows = z.dim(0);
    if z.shape().len() != 2 || rows < 4 || rows % 2 != 0 {
        return Err(Error::Shape(format!("batch loss needs an even row count >= 4, got {:?}", z.shape())));
    }
    let (u, norms) = unit_rows(z)?;
    let dim = z.dim(1);
    let mut sim = vec![0.0; rows * rows];
    for i in 0..rows {
        for k in i..rows {
            let s = dot(&u[i], &u[k]) / temperature;
            sim[i * rows + k] = s;
            sim[k * rows + i] = s;
        }
    }
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    // g[i][k] = dL/dsim_ik
    let mut g = vec![0.0; rows * rows];
    for i in 0..rows {
        let partner = i ^ 1;
        let row = &sim[i * rows..(i + 1) * rows];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
        let mut denom = 0.0;
        for (k, &v) in row.iter().enumerate() {
            if k != i {
                denom += (v - max).exp();
            }
        }
        let lse = max + denom.ln();
        loss += lse - row[partner];
        for (k, &v) in row.iter().enumerate() {
            if k != i {
                let p = (v - max).exp() / denom;
                g[i * rows + k] = scale * (p - if k == partner { 1.0 } else { 0.0 });
            }
        }
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite contrastive loss {loss}")));
    }

    let mut dz = vec![0.0; rows * dim];
    for i in 0..rows {
        let mut du = vec![0.0; dim];
        for k in 0..rows {
            let w = (g[i * rows + k] + g[k * rows + i]) / temperature;
            if w != 0.0 {
                for (d, uk) in du.iter_mut().zip(&u[k]) {
                    *d += w * uk;
                }
            }
        }
        let proj = dot(&du, &u[i]);
        for ((o, d), ui) in dz[i * dim..(i + 1) * dim].iter_mut().zip(&du).zip(&u[i]) {
            *o = (d - ui * proj) / norms[i];
        }
    }
    Ok((loss, Tensor::new(z.shape().to_vec(), dz)?))
}

pub fn batch_loss(z: &Tensor, temperature: f64) -> Result<f64> {
    batch_loss_with_grad(z, temperature).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairOrigin {
    SameSource,
    GeoNeighbor,
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// `2N` views, pairs adjacent.
    pub views: Vec<Tile>,
    /// Source image of every view.
    pub sources: Vec<ImageId>,
    pub mode: Mode,
}

impl ContrastiveBatch {
    pub fn pairs(&self) -> impl Iterator<Item = (ImageId, ImageId)> + '_ {
        self.sources.chunks(2).map(|p| (p[0], p[1]))
    }

    pub fn origin(&self, pair: usize) -> PairOrigin {
        if self.sources[2 * pair] == self.sources[2 * pair + 1] {
            PairOrigin::SameSource
        } else {
            PairOrigin::GeoNeighbor
        }
    }
}

/// Builds `2N` augmented views for `anchors`. The partner of each anchor is
/// drawn from `pair_rng` (GeoCLR) or is the anchor itself (SimCLR); view `v`
/// is augmented with its own stream derived from `aug_seed` and `v`, so the
/// partner draw never shifts augmentation randomness.
pub fn assemble_batch(
    dataset: &Dataset,
    anchors: &[ImageId],
    index: Option<&GeoIndex>,
    mode: Mode,
    augment: &AugmentConfig,
    pair_rng: &mut Rng,
    aug_seed: u64,
) -> Result<ContrastiveBatch> {
    let mut sources = Vec::with_capacity(2 * anchors.len());
    for &a in anchors {
        let partner = match mode {
            Mode::SimClr => a,
            Mode::GeoClr => index
                .ok_or_else(|| Error::Config("geoclr batches need a georeference index".into()))?
                .sample_similar(a, pair_rng)?,
        };
        sources.push(a);
        sources.push(partner);
    }
    let views = sources
        .iter()
        .enumerate()
        .map(|(slot, id)| {
            let image = dataset
                .get(*id)
                .ok_or_else(|| Error::Data(format!("image {id} not in dataset")))?;
            let mut rng = rng::stream(aug_seed, &[slot as u64]);
            apply_augmentation(&image.tile, augment, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContrastiveBatch { views, sources, mode })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub pairing: PairSamplerConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerSettings,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::GeoClr,
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            pairing: PairSamplerConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: OptimizerSettings::default(),
            epochs: 30,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.pairing.validate()?;
        self.augment.validate()
    }
}

/// Anchor order for one epoch: a seeded shuffle cut into full batches of `N`
/// (a trailing partial batch is dropped).
pub fn epoch_schedule(ids: &[ImageId], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<ImageId>> {
    use rand::seq::SliceRandom;
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::stream(seed, &[tags::SHUFFLE, epoch as u64]));
    order.chunks_exact(batch_size).map(<[ImageId]>::to_vec).collect()
}

pub fn pair_stream(seed: u64, epoch: usize, step: usize) -> Rng {
    rng::stream(seed, &[tags::PAIR, epoch as u64, step as u64])
}

pub fn augment_seed(config: &TrainConfig, epoch: usize, step: usize) -> u64 {
    rng::derive_seed(
        config.seed,
        &[tags::AUGMENT, config.augment.rng_seed, epoch as u64, step as u64],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Counts of emitted pairs and the largest weighted distance among
/// cross-image pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub pairs: usize,
    pub fallback: usize,
    pub max_distance: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: TrainedEncoder,
    pub log: Vec<EpochLog>,
    pub pair_stats: PairStats,
}

/// Checks every cross-image pair of `batch` against the closeness threshold
/// and folds it into `stats`.
pub fn audit_pairs(batch: &ContrastiveBatch, index: &GeoIndex, stats: &mut PairStats) -> Result<()> {
    for (a, b) in batch.pairs() {
        stats.pairs += 1;
        if a == b {
            stats.fallback += 1;
            continue;
        }
        let ga = index.georef(a).ok_or_else(|| Error::Data(format!("image {a} not indexed")))?;
        let gb = index.georef(b).ok_or_else(|| Error::Data(format!("image {b} not indexed")))?;
        let d = weighted_distance(&ga, &gb, index.lambda());
        if d > index.r() {
            return Err(Error::Numerical(format!(
                "pair ({a}, {b}) at weighted distance {d} exceeds r = {}",
                index.r()
            )));
        }
        stats.max_distance = stats.max_distance.max(d);
    }
    Ok(())
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, config, |_| {})
}

pub fn train_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = config.loss.batch_size;
    if dataset.len() < n {
        return Err(Error::Data(format!(
            "dataset of {} images is smaller than batch size {n}",
            dataset.len()
        )));
    }
    if dataset.tile_size() != config.encoder.tile_size {
        return Err(Error::Shape(format!(
            "dataset tiles are {} px, encoder expects {}",
            dataset.tile_size(),
            config.encoder.tile_size
        )));
    }
    let index = build_index(dataset.images(), &config.pairing)?;
    let mut params = init_encoder(&config.encoder, config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer);
    let ids = dataset.ids();
    let mut log = Vec::with_capacity(config.epochs);
    let mut stats = PairStats::default();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let schedule = epoch_schedule(&ids, n, config.seed, epoch);
        for (step, anchors) in schedule.iter().enumerate() {
            let mut pair_rng = pair_stream(config.seed, epoch, step);
            let batch = assemble_batch(
                dataset,
                anchors,
                Some(&index),
                config.mode,
                &config.augment,
                &mut pair_rng,
                augment_seed(config, epoch, step),
            )?;
            audit_pairs(&batch, &index, &mut stats)?;
            let views: Vec<&Tile> = batch.views.iter().collect();
            let pass = forward(&config.encoder, &params, batch_tensor(&views)?, false)?;
            let (loss, dz) = batch_loss_with_grad(pass.z(), config.loss.temperature).map_err(|e| {
                Error::Numerical(format!("epoch {} step {step}: {e}", epoch + 1))
            })?;
            let grads = pass.tape.backward(&[(pass.z, dz)])?;
            opt.step(&mut params, grads.params())
                .map_err(|e| Error::Numerical(format!("epoch {} step {step}: {e}", epoch + 1)))?;
            total += loss;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: total / schedule.len().max(1) as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }

    let provenance = serde_json::to_value(config).expect("train config serializes");
    Ok(TrainOutcome {
        encoder: TrainedEncoder {
            config: config.encoder.clone(),
            params,
            optimizer: Some(opt),
            provenance,
            class_names: Vec::new(),
        },
        log,
        pair_stats: stats,
    })
}

pub fn write_loss_log(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,mean_loss,wall_seconds\n");
    for e in log {
        s.push_str(&format!("{},{},{:.3}\n", e.epoch, e.mean_loss, e.wall_seconds));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

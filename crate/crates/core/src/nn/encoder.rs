//! Base encoder `f` (residual conv blocks, global pooling, dense to the
//! latent `h`) and the two-layer projection head `g` producing `z`.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::dataset::Tile;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub conv_blocks: Vec<BlockSpec>,
    pub latent_dim: usize,
    pub projection_dim: usize,
    pub use_residual: bool,
    pub tile_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            conv_blocks: [16, 32, 64]
                .into_iter()
                .map(|c| BlockSpec {
                    out_channels: c,
                    stride: 2,
                })
                .collect(),
            latent_dim: 64,
            projection_dim: 32,
            use_residual: true,
            tile_size: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one conv block".into()));
        }
        if self.conv_blocks.iter().any(|b| b.out_channels == 0 || b.stride == 0) {
            return Err(Error::Config("conv blocks need positive channels and stride".into()));
        }
        if self.latent_dim == 0 || self.projection_dim == 0 {
            return Err(Error::Config("latent and projection dims must be positive".into()));
        }
        if self.projection_dim >= self.latent_dim {
            return Err(Error::Config(format!(
                "projection dim {} must be smaller than latent dim {}",
                self.projection_dim, self.latent_dim
            )));
        }
        let mut side = self.tile_size;
        for b in &self.conv_blocks {
            if side == 0 {
                break;
            }
            side = (side - 1) / b.stride + 1;
        }
        if self.tile_size == 0 || side == 0 {
            return Err(Error::Config(format!("tile size {} too small", self.tile_size)));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.conv_blocks.last().map_or(0, |b| b.out_channels)
    }
}

/// Shape and initialization rule of one named tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(3 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    out.push(spec(format!("{prefix}.w"), vec![cout, cin, k, k], Init::FanIn(cin * k * k)));
    out.push(spec(format!("{prefix}.b"), vec![cout], Init::Zeros));
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(spec(format!("{prefix}.gamma"), vec![c], Init::Ones));
    out.push(spec(format!("{prefix}.beta"), vec![c], Init::Zeros));
}

fn dense_specs(out: &mut Vec<ParamSpec>, prefix: &str, fin: usize, fout: usize) {
    out.push(spec(format!("{prefix}.w"), vec![fout, fin], Init::FanIn(fin)));
    out.push(spec(format!("{prefix}.b"), vec![fout], Init::Zeros));
}

pub fn param_specs(config: &EncoderConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut cin = Tile::CHANNELS;
    for (i, b) in config.conv_blocks.iter().enumerate() {
        let c = b.out_channels;
        conv_specs(&mut specs, &format!("block{i}.conv1"), cin, c, 3);
        norm_specs(&mut specs, &format!("block{i}.norm1"), c);
        conv_specs(&mut specs, &format!("block{i}.conv2"), c, c, 3);
        norm_specs(&mut specs, &format!("block{i}.norm2"), c);
        if config.use_residual {
            conv_specs(&mut specs, &format!("block{i}.skip"), cin, c, 1);
        }
        cin = c;
    }
    dense_specs(&mut specs, "latent", cin, config.latent_dim);
    dense_specs(&mut specs, "proj1", config.latent_dim, config.latent_dim);
    dense_specs(&mut specs, "proj2", config.latent_dim, config.projection_dim);
    specs
}

pub fn head_specs(latent_dim: usize, classes: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    dense_specs(&mut specs, "head", latent_dim, classes);
    specs
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters::default()
    }

    pub fn from_specs(specs: &[ParamSpec], rng: &mut Rng) -> Self {
        let mut p = Parameters::new();
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(fan_in) => {
                    let bound = (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            p.insert(&s.name, Tensor::new(s.shape.clone(), data).expect("spec shape"));
        }
        p
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Checks that every spec is present with the right shape and all values
    /// are finite.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("parameter {} is not finite", s.name)));
            }
        }
        Ok(())
    }
}

pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[rng::tags::INIT]);
    Ok(Parameters::from_specs(&param_specs(config), &mut rng))
}

pub fn init_head(latent_dim: usize, classes: usize, seed: u64) -> Parameters {
    let mut rng = rng::stream(seed, &[rng::tags::INIT, rng::tags::FINETUNE]);
    Parameters::from_specs(&head_specs(latent_dim, classes), &mut rng)
}

/// Packs tiles into a `[3, B, H, W]` tensor.
pub fn batch_tensor(tiles: &[&Tile]) -> Result<Tensor> {
    let side = tiles
        .first()
        .map(|t| t.side())
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let b = tiles.len();
    let plane = side * side;
    let mut data = vec![0.0; Tile::CHANNELS * b * plane];
    for (i, t) in tiles.iter().enumerate() {
        if t.side() != side {
            return Err(Error::Shape("tiles in a batch must share a size".into()));
        }
        for c in 0..Tile::CHANNELS {
            data[(c * b + i) * plane..(c * b + i + 1) * plane].copy_from_slice(t.plane(c));
        }
    }
    Tensor::new(vec![Tile::CHANNELS, b, side, side], data)
}

/// Result of a forward pass; keeps the tape for backpropagation.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub input: Var,
    pub h: Var,
    pub z: Var,
    /// Classification logits when a head was attached.
    pub logits: Option<Var>,
}

impl ForwardPass {
    pub fn h(&self) -> &Tensor {
        self.tape.value(self.h)
    }

    pub fn z(&self) -> &Tensor {
        self.tape.value(self.z)
    }

    pub fn logits(&self) -> Option<&Tensor> {
        self.logits.map(|v| self.tape.value(v))
    }
}

fn conv(tape: &mut Tape, p: &Parameters, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.w"), p.get(&format!("{prefix}.w"))?.clone());
    let b = tape.param(&format!("{prefix}.b"), p.get(&format!("{prefix}.b"))?.clone());
    tape.conv2d(x, w, b, stride, pad)
}

fn norm(tape: &mut Tape, p: &Parameters, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.gamma"), p.get(&format!("{prefix}.gamma"))?.clone());
    let b = tape.param(&format!("{prefix}.beta"), p.get(&format!("{prefix}.beta"))?.clone());
    tape.norm(x, g, b)
}

fn dense(tape: &mut Tape, p: &Parameters, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.w"), p.get(&format!("{prefix}.w"))?.clone());
    let b = tape.param(&format!("{prefix}.b"), p.get(&format!("{prefix}.b"))?.clone());
    tape.dense(x, w, b)
}

/// Runs `f` and `g` on a `[3, B, H, W]` batch; appends the `head` layer on `h`
/// when `with_head` is set.
pub fn forward(config: &EncoderConfig, params: &Parameters, batch: Tensor, with_head: bool) -> Result<ForwardPass> {
    let s = batch.shape();
    if s.len() != 4 || s[0] != Tile::CHANNELS || s[2] != config.tile_size || s[3] != config.tile_size {
        return Err(Error::Shape(format!(
            "batch {s:?} does not match encoder input [3, B, {0}, {0}]",
            config.tile_size
        )));
    }
    let mut tape = Tape::new();
    let input = tape.input(batch);
    let mut x = input;
    for (i, b) in config.conv_blocks.iter().enumerate() {
        let a = conv(&mut tape, params, &format!("block{i}.conv1"), x, b.stride, 1)?;
        let a = norm(&mut tape, params, &format!("block{i}.norm1"), a)?;
        let a = tape.relu(a);
        let c = conv(&mut tape, params, &format!("block{i}.conv2"), a, 1, 1)?;
        let c = norm(&mut tape, params, &format!("block{i}.norm2"), c)?;
        let sum = if config.use_residual {
            let skip = conv(&mut tape, params, &format!("block{i}.skip"), x, b.stride, 0)?;
            tape.add(c, skip)?
        } else {
            c
        };
        x = tape.relu(sum);
    }
    let pooled = tape.global_avg_pool(x)?;
    let h = dense(&mut tape, params, "latent", pooled)?;
    let p1 = dense(&mut tape, params, "proj1", h)?;
    let p1 = tape.relu(p1);
    let z = dense(&mut tape, params, "proj2", p1)?;
    let logits = if with_head {
        Some(dense(&mut tape, params, "head", h)?)
    } else {
        None
    };
    Ok(ForwardPass {
        tape,
        input,
        h,
        z,
        logits,
    })
}

/// Latent `h` for every tile, computed in chunks.
pub fn embed_tiles(config: &EncoderConfig, params: &Parameters, tiles: &[&Tile], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(tiles.len());
    for group in tiles.chunks(chunk.max(1)) {
        let pass = forward(config, params, batch_tensor(group)?, false)?;
        let h = pass.h();
        for i in 0..group.len() {
            out.push(h.row(i).to_vec());
        }
    }
    Ok(out)
}

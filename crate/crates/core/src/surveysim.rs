//! Synthetic seafloor worlds and lawnmower AUV surveys.
//!
//! Habitat classes form a Voronoi partition of the survey area whose cells are
//! much larger than one image footprint. Each class has its own texture
//! (base colour, value noise, oriented stripes, scattered spots), evaluated in
//! world coordinates so overlapping images see the same seafloor. Every frame
//! also gets its own illumination gain, colour cast and sensor noise, which
//! vary between neighbouring images but not between two crops of one image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    save_tile_png, write_manifest, Dataset, GeoRef, GeorefImage, ImageId, ManifestRecord, Tile,
};
use crate::error::{Error, Result};
use crate::rng::{self, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub name: String,
    pub base_color: [f64; 3],
    /// Amplitude of world-coherent value noise.
    pub noise_amplitude: f64,
    /// Lattice spacing of the value noise, meters.
    pub noise_scale: f64,
    pub stripe_amplitude: f64,
    /// Cycles per meter.
    pub stripe_frequency: f64,
    /// Radians from east.
    pub stripe_orientation: f64,
    /// Expected spots per square meter.
    pub spot_density: f64,
    pub spot_radius: f64,
    /// Added to the base colour inside a spot.
    pub spot_shift: [f64; 3],
    /// Depth offset applied where this class lies (class-correlated relief).
    pub depth_offset: f64,
    /// Relative share of patch seeds given to this class.
    #[serde(default = "one")]
    pub abundance: f64,
}

fn one() -> f64 {
    1.0
}

/// Per-frame appearance variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameNuisance {
    /// Multiplicative gain drawn from `1 ± gain`.
    pub gain: f64,
    /// Additive per-channel cast drawn from `± cast`.
    pub cast: f64,
    /// Per-pixel sensor noise amplitude (uniform).
    pub sensor_noise: f64,
}

impl FrameNuisance {
    pub const NONE: FrameNuisance = FrameNuisance {
        gain: 0.0,
        cast: 0.0,
        sensor_noise: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Easting x northing, meters.
    pub extent: (f64, f64),
    pub classes: Vec<ClassTexture>,
    /// Typical patch diameter, meters.
    pub patch_scale: f64,
    pub depth_base: f64,
    pub depth_relief: f64,
    /// Ground footprint edge of one image, meters.
    pub tile_footprint: f64,
    pub nuisance: FrameNuisance,
    pub seed: u64,
}

pub fn default_classes() -> Vec<ClassTexture> {
    let deg = std::f64::consts::PI / 180.0;
    vec![
        ClassTexture {
            name: "kelp".into(),
            base_color: [0.30, 0.36, 0.16],
            noise_amplitude: 0.10,
            noise_scale: 0.08,
            stripe_amplitude: 0.12,
            stripe_frequency: 3.0,
            stripe_orientation: 70.0 * deg,
            spot_density: 4.0,
            spot_radius: 0.06,
            spot_shift: [0.10, 0.12, 0.02],
            depth_offset: 0.0,
            abundance: 0.2,
        },
        ClassTexture {
            name: "reef".into(),
            base_color: [0.42, 0.36, 0.32],
            noise_amplitude: 0.16,
            noise_scale: 0.05,
            stripe_amplitude: 0.0,
            stripe_frequency: 1.0,
            stripe_orientation: 0.0,
            spot_density: 10.0,
            spot_radius: 0.05,
            spot_shift: [-0.12, -0.10, -0.08],
            depth_offset: 0.0,
            abundance: 0.1,
        },
        ClassTexture {
            name: "rubble".into(),
            base_color: [0.52, 0.50, 0.46],
            noise_amplitude: 0.08,
            noise_scale: 0.04,
            stripe_amplitude: 0.04,
            stripe_frequency: 5.0,
            stripe_orientation: 140.0 * deg,
            spot_density: 25.0,
            spot_radius: 0.035,
            spot_shift: [0.15, 0.14, 0.12],
            depth_offset: 0.0,
            abundance: 0.3,
        },
        ClassTexture {
            name: "sand".into(),
            base_color: [0.68, 0.62, 0.46],
            noise_amplitude: 0.05,
            noise_scale: 0.10,
            stripe_amplitude: 0.10,
            stripe_frequency: 6.0,
            stripe_orientation: 20.0 * deg,
            spot_density: 1.0,
            spot_radius: 0.04,
            spot_shift: [-0.08, -0.08, -0.06],
            depth_offset: 0.0,
            abundance: 0.4,
        },
    ]
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            extent: (60.0, 60.0),
            classes: default_classes(),
            patch_scale: 8.0,
            depth_base: 30.0,
            depth_relief: 4.0,
            tile_footprint: 1.0,
            nuisance: FrameNuisance {
                gain: 0.25,
                cast: 0.06,
                sensor_noise: 0.04,
            },
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("a world needs at least 2 classes".into()));
        }
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return Err(Error::Config(format!("invalid extent {:?}", self.extent)));
        }
        if !(self.tile_footprint > 0.0) {
            return Err(Error::Config("tile footprint must be positive".into()));
        }
        if self.classes.iter().any(|c| !(c.abundance > 0.0 && c.abundance.is_finite())) {
            return Err(Error::Config("class abundances must be positive".into()));
        }
        if !(self.patch_scale > self.tile_footprint) {
            return Err(Error::Config(format!(
                "patch scale {} must exceed the tile footprint {}",
                self.patch_scale, self.tile_footprint
            )));
        }
        if self.depth_relief < 0.0 || self.depth_base < 0.0 {
            return Err(Error::Config("depth base and relief must be non-negative".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// One low-frequency sinusoid of the depth surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthWave {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSeed {
    pub easting: f64,
    pub northing: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seeds: Vec<PatchSeed>,
    pub depth_waves: Vec<DepthWave>,
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[tags::WORLD]);
    let (ex, ey) = config.extent;
    let c = config.classes.len();
    let count = ((ex / config.patch_scale) * (ey / config.patch_scale)).round().max(c as f64) as usize;
    let mut classes = apportion_seeds(&config.classes.iter().map(|t| t.abundance).collect::<Vec<_>>(), count);
    classes.shuffle(&mut rng);
    let seeds = classes
        .into_iter()
        .map(|class| PatchSeed {
            easting: rng.random_range(0.0..ex),
            northing: rng.random_range(0.0..ey),
            class,
        })
        .collect();
    let depth_waves = (0..3)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let wavelength = rng.random_range(1.0..2.0) * ex.max(ey);
            let k = std::f64::consts::TAU / wavelength;
            DepthWave {
                kx: k * angle.cos(),
                ky: k * angle.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    Ok(World {
        config: config.clone(),
        seeds,
        depth_waves,
    })
}

/// Class of each of `count` seeds, handed out round-robin over the classes
/// still below their share `count * w_c / sum(w)`; equal weights give plain
/// round-robin.
pub fn apportion_seeds(weights: &[f64], count: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut given = vec![0usize; weights.len()];
    let mut out = Vec::with_capacity(count);
    let mut c = 0;
    while out.len() < count {
        // deficit relative to the share at the next seed
        let next = (out.len() + 1) as f64;
        let lagging = (0..weights.len()).any(|k| (given[k] as f64) < next * weights[k] / total - 1e-9);
        if !lagging || (given[c] as f64) < next * weights[c] / total - 1e-9 {
            out.push(c);
            given[c] += 1;
        }
        c = (c + 1) % weights.len();
    }
    out
}

fn sq(x: f64) -> f64 {
    x * x
}

impl World {
    pub fn from_seeds(config: WorldConfig, seeds: Vec<PatchSeed>, depth_waves: Vec<DepthWave>) -> Result<Self> {
        config.validate()?;
        if seeds.is_empty() || seeds.iter().any(|s| s.class >= config.classes.len()) {
            return Err(Error::Config("patch seeds must be non-empty with valid classes".into()));
        }
        Ok(World {
            config,
            seeds,
            depth_waves,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes.len()
    }

    fn nearest_seed(&self, e: f64, n: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, s) in self.seeds.iter().enumerate() {
            let d = sq(s.easting - e) + sq(s.northing - n);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn class_at(&self, e: f64, n: f64) -> usize {
        self.seeds[self.nearest_seed(e, n)].class
    }

    /// Signed distance to the nearest boundary with a different class,
    /// measured along the bisector normal; `None` when all seeds share a class.
    fn boundary(&self, e: f64, n: f64) -> (usize, Option<(usize, f64)>) {
        let own = self.nearest_seed(e, n);
        let a = &self.seeds[own];
        let da = sq(a.easting - e) + sq(a.northing - n);
        let mut other: Option<(usize, f64)> = None;
        for s in &self.seeds {
            if s.class == a.class {
                continue;
            }
            let sep = (sq(s.easting - a.easting) + sq(s.northing - a.northing)).sqrt();
            if sep == 0.0 {
                continue;
            }
            let db = sq(s.easting - e) + sq(s.northing - n);
            let dist = (db - da) / (2.0 * sep);
            if other.is_none_or(|(_, d)| dist < d) {
                other = Some((s.class, dist));
            }
        }
        (a.class, other)
    }

    pub fn depth_at(&self, e: f64, n: f64) -> f64 {
        let cfg = &self.config;
        let mut wave = 0.0;
        if cfg.depth_relief > 0.0 && !self.depth_waves.is_empty() {
            wave = self
                .depth_waves
                .iter()
                .map(|w| (w.kx * e + w.ky * n + w.phase).sin())
                .sum::<f64>()
                / self.depth_waves.len() as f64;
        }
        let offset = cfg.classes[self.class_at(e, n)].depth_offset;
        (cfg.depth_base + cfg.depth_relief * wave + offset).max(0.0)
    }

    fn texture(&self, class: usize, e: f64, n: f64) -> [f64; 3] {
        let t = &self.config.classes[class];
        let salt = self.config.seed ^ ((class as u64 + 1) << 40);
        let noise = t.noise_amplitude * value_noise(e / t.noise_scale, n / t.noise_scale, salt);
        let (s, c) = t.stripe_orientation.sin_cos();
        let stripe = t.stripe_amplitude * (std::f64::consts::TAU * t.stripe_frequency * (e * c + n * s)).sin();
        let spot = spot_coverage(e, n, t.spot_density, t.spot_radius, salt ^ 0x5bd1_e995);
        let mut px = [0.0; 3];
        for ch in 0..3 {
            px[ch] = t.base_color[ch] + noise + stripe + spot * t.spot_shift[ch];
        }
        px
    }

    /// Seafloor colour at a point, blended across class boundaries within
    /// `0.2 * patch_scale`.
    pub fn color_at(&self, e: f64, n: f64) -> [f64; 3] {
        let band = 0.2 * self.config.patch_scale;
        let (own, other) = self.boundary(e, n);
        let base = self.texture(own, e, n);
        match other {
            Some((cls, dist)) if dist < band => {
                let w = 0.5 + 0.5 * dist / band;
                let alt = self.texture(cls, e, n);
                [0, 1, 2].map(|ch| w * base[ch] + (1.0 - w) * alt[ch])
            }
            _ => base,
        }
    }

    /// Renders the image centred at `(e, n)`; `frame_seed` drives the
    /// per-frame nuisance. Values are quantized to 8 bits.
    pub fn render_tile(&self, e: f64, n: f64, side: usize, frame_seed: u64) -> Tile {
        let cfg = &self.config;
        let mut rng = rng::stream(frame_seed, &[tags::RENDER]);
        let nu = cfg.nuisance;
        let gain = if nu.gain > 0.0 {
            rng.random_range(1.0 - nu.gain..=1.0 + nu.gain)
        } else {
            1.0
        };
        let cast: [f64; 3] = if nu.cast > 0.0 {
            [0, 1, 2].map(|_| rng.random_range(-nu.cast..=nu.cast))
        } else {
            [0.0; 3]
        };
        let pixel = cfg.tile_footprint / side as f64;
        let mut tile = Tile::filled(side, 0.0);
        for y in 0..side {
            // row 0 is the northern edge
            let pn = n + cfg.tile_footprint / 2.0 - (y as f64 + 0.5) * pixel;
            for x in 0..side {
                let pe = e - cfg.tile_footprint / 2.0 + (x as f64 + 0.5) * pixel;
                let color = self.color_at(pe, pn);
                for ch in 0..3 {
                    let noise = if nu.sensor_noise > 0.0 {
                        rng.random_range(-nu.sensor_noise..=nu.sensor_noise)
                    } else {
                        0.0
                    };
                    let v = (gain * color[ch] + cast[ch] + noise).clamp(0.0, 1.0);
                    tile.set(ch, y, x, (v * 255.0).round() / 255.0);
                }
            }
        }
        tile
    }

    /// Fraction of the extent covered by each class, estimated on a regular
    /// sample grid of `resolution x resolution` points.
    pub fn class_areas(&self, resolution: usize) -> Vec<f64> {
        let (ex, ey) = self.config.extent;
        let mut counts = vec![0usize; self.num_classes()];
        for i in 0..resolution {
            for j in 0..resolution {
                let e = (i as f64 + 0.5) / resolution as f64 * ex;
                let n = (j as f64 + 0.5) / resolution as f64 * ey;
                counts[self.class_at(e, n)] += 1;
            }
        }
        let total = (resolution * resolution) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }
}

fn hash2(ix: i64, iy: i64, salt: u64) -> u64 {
    rng::derive_seed(salt, &[ix as u64, iy as u64])
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth lattice noise in [-1, 1].
fn value_noise(x: f64, y: f64, salt: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let v = |dx: i64, dy: i64| 2.0 * unit(hash2(ix + dx, iy + dy, salt)) - 1.0;
    let top = v(0, 0) + tx * (v(1, 0) - v(0, 0));
    let bottom = v(0, 1) + tx * (v(1, 1) - v(0, 1));
    top + ty * (bottom - top)
}

/// Soft coverage in [0, 1] of randomly placed round spots. Spots live on a
/// jittered lattice with one candidate per cell of area `1 / density`.
fn spot_coverage(e: f64, n: f64, density: f64, radius: f64, salt: u64) -> f64 {
    if density <= 0.0 || radius <= 0.0 {
        return 0.0;
    }
    let cell = 1.0 / density.sqrt();
    let (cx, cy) = ((e / cell).floor() as i64, (n / cell).floor() as i64);
    let mut cover: f64 = 0.0;
    for dx in -1..=1 {
        for dy in -1..=1 {
            let h = hash2(cx + dx, cy + dy, salt);
            let h2 = rng::derive_seed(h, &[1]);
            let px = (cx + dx) as f64 * cell + unit(h) * cell;
            let py = (cy + dy) as f64 * cell + unit(h2) * cell;
            let r = radius * (0.6 + 0.8 * unit(rng::derive_seed(h, &[2])));
            let d = ((e - px) * (e - px) + (n - py) * (n - py)).sqrt();
            let edge = (1.0 - (d - 0.8 * r) / (0.4 * r)).clamp(0.0, 1.0);
            cover = cover.max(edge);
        }
    }
    cover
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Swath {
    pub dive: u32,
    pub min: (f64, f64),
    pub max: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub line_spacing: f64,
    /// Along-track distance between consecutive images.
    pub interval: f64,
    /// One lawnmower pattern per swath; lines run east-west.
    pub swaths: Vec<Swath>,
}

impl Default for TrajectoryConfig {
    /// Four dives, one per quadrant of the default 60 m world, 10 lines of
    /// 50 images each: 2,000 images in total.
    fn default() -> Self {
        let swaths = (0..4u32)
            .map(|d| {
                let ox = if d % 2 == 0 { 0.0 } else { 30.0 };
                let oy = if d < 2 { 0.0 } else { 30.0 };
                Swath {
                    dive: d,
                    min: (ox + 2.75, oy + 1.5),
                    max: (ox + 27.25, oy + 28.5),
                }
            })
            .collect();
        TrajectoryConfig {
            line_spacing: 3.0,
            interval: 0.5,
            swaths,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self, extent: (f64, f64)) -> Result<()> {
        if !(self.interval > 0.0 && self.line_spacing > 0.0) {
            return Err(Error::Config("interval and line spacing must be positive".into()));
        }
        for s in &self.swaths {
            let inside = s.min.0 >= 0.0 && s.min.1 >= 0.0 && s.max.0 <= extent.0 && s.max.1 <= extent.1;
            if !inside || s.min.0 > s.max.0 || s.min.1 > s.max.1 {
                return Err(Error::Config(format!("swath {s:?} is not inside the extent {extent:?}")));
            }
        }
        Ok(())
    }
}

/// Number of images on a line of `length` meters at `interval` spacing,
/// endpoints included.
pub fn images_per_line(length: f64, interval: f64) -> usize {
    (length / interval + 1e-9).floor() as usize + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub dive: u32,
    pub easting: f64,
    pub northing: f64,
}

/// Boustrophedon image positions: per swath, lines from south to north,
/// alternating direction.
pub fn lawnmower(traj: &TrajectoryConfig) -> Vec<Waypoint> {
    let mut out = Vec::new();
    for s in &traj.swaths {
        let lines = images_per_line(s.max.1 - s.min.1, traj.line_spacing);
        let per_line = images_per_line(s.max.0 - s.min.0, traj.interval);
        for l in 0..lines {
            let n = s.min.1 + l as f64 * traj.line_spacing;
            for k in 0..per_line {
                let k = if l % 2 == 0 { k } else { per_line - 1 - k };
                out.push(Waypoint {
                    dive: s.dive,
                    easting: s.min.0 + k as f64 * traj.interval,
                    northing: n,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Survey {
    pub world: World,
    pub images: Vec<GeorefImage>,
}

impl Survey {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(self.images.clone(), self.world.config.class_names())
    }

    pub fn manifest_records(&self) -> Vec<ManifestRecord> {
        let names = self.world.config.class_names();
        self.images
            .iter()
            .map(|im| ManifestRecord {
                id: im.id,
                path: image_path(im.id),
                georef: im.georef,
                dive: im.dive,
                label: im.label.map(|l| names[l].clone()),
            })
            .collect()
    }

    /// Writes `manifest.csv`, `world.json` and `images/*.png` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        self.images
            .par_iter()
            .try_for_each(|im| save_tile_png(&im.tile, &dir.join(image_path(im.id))))?;
        write_manifest(dir.join("manifest.csv"), &self.manifest_records())?;
        let world = serde_json::to_string_pretty(&self.world).expect("world serializes");
        let p = dir.join("world.json");
        fs::write(&p, world + "\n").map_err(|e| Error::io(&p, e))
    }
}

pub fn image_path(id: ImageId) -> PathBuf {
    PathBuf::from(format!("images/{id:06}.png"))
}

pub fn generate_survey(world: &World, traj: &TrajectoryConfig, tile_size: usize, seed: u64) -> Result<Survey> {
    traj.validate(world.config.extent)?;
    if tile_size < 4 {
        return Err(Error::Config(format!("tile size {tile_size} below 4")));
    }
    let waypoints = lawnmower(traj);
    let images = waypoints
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let id = i as ImageId;
            let frame_seed = rng::derive_seed(seed, &[tags::RENDER, id]);
            Ok(GeorefImage {
                id,
                georef: GeoRef::new(w.easting, w.northing, world.depth_at(w.easting, w.northing))?,
                dive: w.dive,
                tile: world.render_tile(w.easting, w.northing, tile_size, frame_seed),
                label: Some(world.class_at(w.easting, w.northing)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Survey {
        world: world.clone(),
        images,
    })
}

/// Fraction of image pairs within `r` (horizontal) that share a label.
pub fn neighbor_label_agreement(images: &[GeorefImage], r: f64) -> f64 {
    let mut same = 0usize;
    let mut total = 0usize;
    for (i, a) in images.iter().enumerate() {
        for b in &images[i + 1..] {
            let d = sq(a.georef.easting - b.georef.easting) + sq(a.georef.northing - b.georef.northing);
            if d <= r * r {
                total += 1;
                if a.label == b.label {
                    same += 1;
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    }
}

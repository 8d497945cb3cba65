//! Georeferenced image collections: the manifest format, tile decoding and
//! the in-memory dataset every later stage reads from.
//!
//! Manifest layout (UTF-8 CSV):
//!
//! ```text
//! id,path,easting,northing,depth,dive,label
//! 0,img/000000.png,12.5,3.0,31.2,0,sand
//! 1,img/000001.png,13.0,3.0,31.3,0,
//! ```
//!
//! `path` is relative to the manifest's directory unless absolute. An empty
//! `label` means the image is unannotated.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ImageId = u64;

pub const MANIFEST_HEADER: [&str; 7] = ["id", "path", "easting", "northing", "depth", "dive", "label"];
pub const DEFAULT_TILE_SIZE: usize = 32;

/// Local metric position of an image: easting/northing in meters and depth in
/// meters, positive down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub easting: f64,
    pub northing: f64,
    pub depth: f64,
}

impl GeoRef {
    pub fn new(easting: f64, northing: f64, depth: f64) -> Result<Self> {
        let g = GeoRef {
            easting,
            northing,
            depth,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.easting.is_finite() && self.northing.is_finite() && self.depth.is_finite()) {
            return Err(Error::Data(format!("non-finite georeference {self:?}")));
        }
        if self.depth < 0.0 {
            return Err(Error::Data(format!("negative depth {}", self.depth)));
        }
        Ok(())
    }
}

/// Square RGB tile stored channel-planar (`data[c * side * side + y * side + x]`),
/// values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    side: usize,
    data: Vec<f64>,
}

impl Tile {
    pub const CHANNELS: usize = 3;

    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * side * side {
            return Err(Error::Shape(format!(
                "tile of side {side} needs {} values, got {}",
                Self::CHANNELS * side * side,
                data.len()
            )));
        }
        Ok(Tile { side, data })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Tile {
            side,
            data: vec![value; Self::CHANNELS * side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.side * self.side;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.side * self.side;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.side + y) * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.side + y) * self.side + x] = v;
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let n = (self.side * self.side) as f64;
        [0, 1, 2].map(|c| self.plane(c).iter().sum::<f64>() / n)
    }

    /// Quantizes to 8-bit interleaved RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.side * self.side;
        let mut out = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                let v = self.data[c * n + p].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeorefImage {
    pub id: ImageId,
    pub georef: GeoRef,
    pub dive: u32,
    pub tile: Tile,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: ImageId,
    pub path: PathBuf,
    pub georef: GeoRef,
    pub dive: u32,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
    pub tile_size: usize,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Replaces the class list with `classes`, failing if any record carries a
    /// label outside it.
    pub fn with_classes(mut self, classes: &[String]) -> Result<Self> {
        for r in &self.records {
            if let Some(l) = &r.label {
                if !classes.iter().any(|c| c == l) {
                    return Err(Error::Data(format!(
                        "image {} has label {l:?} not in class list {classes:?}",
                        r.id
                    )));
                }
            }
        }
        self.class_names = classes.to_vec();
        Ok(self)
    }

    pub fn with_tile_size(mut self, tile_size: usize) -> Self {
        self.tile_size = tile_size;
        self
    }

    pub fn resolve_path(&self, rec: &ManifestRecord) -> PathBuf {
        if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            self.base_dir.join(&rec.path)
        }
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.records
            .iter()
            .map(|r| r.label.as_deref().and_then(|l| self.class_index(l)))
            .collect()
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {name} from {raw:?}"),
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);

    let headers = reader.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().map(str::trim).ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}", MANIFEST_HEADER.join(",")),
        });
    }

    let mut records = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let id: ImageId = parse_field(path, line, "id", &row[0])?;
        let georef = GeoRef {
            easting: parse_field(path, line, "easting", &row[2])?,
            northing: parse_field(path, line, "northing", &row[3])?,
            depth: parse_field(path, line, "depth", &row[4])?,
        };
        georef.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let dive: u32 = parse_field(path, line, "dive", &row[5])?;
        let label = match row[6].trim() {
            "" => None,
            l => Some(l.to_string()),
        };
        if !seen.insert(id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate id {id}"),
            });
        }
        if let Some(l) = &label {
            if !class_names.contains(l) {
                class_names.push(l.clone());
            }
        }
        records.push(ManifestRecord {
            id,
            path: PathBuf::from(row[1].trim()),
            georef,
            dive,
            label,
        });
    }

    Ok(DatasetManifest {
        records,
        class_names,
        tile_size: DEFAULT_TILE_SIZE,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", MANIFEST_HEADER.join(",")).map_err(io)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.id,
            r.path.display(),
            r.georef.easting,
            r.georef.northing,
            r.georef.depth,
            r.dive,
            r.label.as_deref().unwrap_or("")
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Center-crops an interleaved 8-bit RGB buffer to `side` and scales to [0, 1].
pub fn center_crop_rgb8(rgb: &[u8], width: usize, height: usize, side: usize) -> Result<Tile> {
    if width < side || height < side {
        return Err(Error::Shape(format!(
            "image {width}x{height} smaller than tile size {side}"
        )));
    }
    let x0 = (width - side) / 2;
    let y0 = (height - side) / 2;
    let mut tile = Tile::filled(side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let p = ((y0 + y) * width + (x0 + x)) * 3;
            for c in 0..3 {
                tile.set(c, y, x, f64::from(rgb[p + c]) / 255.0);
            }
        }
    }
    Ok(tile)
}

pub fn load_tile(path: &Path, side: usize) -> Result<Tile> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    center_crop_rgb8(rgb.as_raw(), w as usize, h as usize, side).map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_tile_png(tile: &Tile, path: &Path) -> Result<()> {
    let side = tile.side() as u32;
    image::save_buffer(path, &tile.to_rgb8(), side, side, image::ColorType::Rgb8).map_err(|e| {
        Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })
}

pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<GeorefImage>> {
    let labels = manifest.labels();
    manifest
        .records
        .par_iter()
        .zip(labels.par_iter())
        .map(|(rec, &label)| {
            let tile = load_tile(&manifest.resolve_path(rec), manifest.tile_size)?;
            Ok(GeorefImage {
                id: rec.id,
                georef: rec.georef,
                dive: rec.dive,
                tile,
                label,
            })
        })
        .collect()
}

/// Immutable image collection with id lookup.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<GeorefImage>,
    class_names: Vec<String>,
    index: HashMap<ImageId, usize>,
}

impl Dataset {
    pub fn new(images: Vec<GeorefImage>, class_names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(images.len());
        let side = images.first().map(|im| im.tile.side());
        for (i, im) in images.iter().enumerate() {
            if index.insert(im.id, i).is_some() {
                return Err(Error::Data(format!("duplicate image id {}", im.id)));
            }
            if Some(im.tile.side()) != side {
                return Err(Error::Shape(format!("image {} has a different tile size", im.id)));
            }
            if let Some(l) = im.label {
                if l >= class_names.len() {
                    return Err(Error::Data(format!("image {} label {l} out of range", im.id)));
                }
            }
        }
        Ok(Dataset {
            images,
            class_names,
            index,
        })
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Dataset::new(load_images(manifest)?, manifest.class_names.clone())
    }

    pub fn images(&self) -> &[GeorefImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn tile_size(&self) -> usize {
        self.images.first().map_or(0, |im| im.tile.side())
    }

    pub fn position(&self, id: ImageId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: ImageId) -> Option<&GeorefImage> {
        self.position(id).map(|i| &self.images[i])
    }

    pub fn ids(&self) -> Vec<ImageId> {
        self.images.iter().map(|im| im.id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn class_names_follow_first_appearance() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "id,path,easting,northing,depth,dive,label\n\
             0,a.png,0,0,10,0,kelp\n1,b.png,1,0,10,0,sand\n2,c.png,2,0,10,0,kelp\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.class_names, vec!["kelp", "sand"]);
        assert_eq!(m.labels(), vec![Some(0), Some(1), Some(0)]);
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "id,path,easting,northing,depth,dive,label\n");
        let m = load_manifest(&p).unwrap();
        assert!(m.records.is_empty());
        assert!(m.class_names.is_empty());
    }

    #[test]
    fn bad_depth_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "id,path,easting,northing,depth,dive,label\n0,a.png,0,0,10,0,\n1,b.png,0,0,abc,0,\n",
        );
        match load_manifest(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("depth"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "id,path,easting,northing,depth,dive,label\n0,a.png,0,0,1,0,\n0,b.png,0,0,1,0,\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn unknown_label_against_fixed_classes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "id,path,easting,northing,depth,dive,label\n0,a.png,0,0,1,0,reef\n",
        );
        let m = load_manifest(&p).unwrap();
        assert!(m.with_classes(&["sand".to_string()]).is_err());
    }

    #[test]
    fn center_crop_takes_middle_window() {
        let (w, h) = (40usize, 40usize);
        let mut rgb = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                rgb[(y * w + x) * 3] = (x * 5) as u8;
                rgb[(y * w + x) * 3 + 1] = (y * 5) as u8;
            }
        }
        let t = center_crop_rgb8(&rgb, w, h, 32).unwrap();
        assert_eq!(t.side(), 32);
        assert_eq!(t.get(0, 0, 0), 20.0 / 255.0);
        assert_eq!(t.get(1, 0, 0), 20.0 / 255.0);
        assert_eq!(t.get(0, 31, 31), 175.0 / 255.0);
    }

    #[test]
    fn black_png_loads_as_zeros_and_small_png_fails() {
        let dir = tempfile::tempdir().unwrap();
        let big = dir.path().join("big.png");
        image::save_buffer(&big, &vec![0u8; 40 * 40 * 3], 40, 40, image::ColorType::Rgb8).unwrap();
        let t = load_tile(&big, 32).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let small = dir.path().join("small.png");
        image::save_buffer(&small, &vec![0u8; 16 * 16 * 3], 16, 16, image::ColorType::Rgb8).unwrap();
        assert!(matches!(load_tile(&small, 32), Err(Error::Shape(_))));
    }

    #[test]
    fn ppm_p6_is_decoded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n([255u8, 0, 51], 16).flatten());
        fs::write(&p, bytes).unwrap();
        let t = load_tile(&p, 4).unwrap();
        let mean = t.mean_rgb();
        for (got, want) in mean.iter().zip([1.0, 0.0, 51.0 / 255.0]) {
            assert!((got - want).abs() < 1e-12, "{mean:?}");
        }
    }

    #[test]
    fn garbage_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "x.png", "not an image");
        match load_tile(&p, 4) {
            Err(Error::Image { path, .. }) => assert_eq!(path, p),
            other => panic!("{other:?}"),
        }
    }
}

//! Per-dive class proportions, habitat maps (SVG + CSV) and class-vs-depth
//! histograms.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::dataset::{GeorefImage, ImageId};
use crate::error::{Error, Result};

/// Class colours by index; indices beyond the list wrap around.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn class_color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiveProportions {
    pub dive: u32,
    pub images: usize,
    pub fractions: Vec<f64>,
}

fn index_images(images: &[GeorefImage]) -> HashMap<ImageId, &GeorefImage> {
    images.iter().map(|im| (im.id, im)).collect()
}

/// Fraction of each class among the predicted images of every dive, in
/// ascending dive order.
pub fn class_proportions(
    predictions: &[(ImageId, usize)],
    images: &[GeorefImage],
    classes: usize,
) -> Result<Vec<DiveProportions>> {
    let by_id = index_images(images);
    let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &(id, label) in predictions {
        let im = by_id
            .get(&id)
            .ok_or_else(|| Error::Data(format!("prediction for image {id} has no dive")))?;
        if label >= classes {
            return Err(Error::Data(format!("predicted class {label} out of range for {classes} classes")));
        }
        counts.entry(im.dive).or_insert_with(|| vec![0; classes])[label] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(dive, c)| {
            let n: usize = c.iter().sum();
            DiveProportions {
                dive,
                images: n,
                fractions: c.iter().map(|&k| k as f64 / n as f64).collect(),
            }
        })
        .collect())
}

/// Ground-truth labels as predictions, for comparing proportions.
pub fn truth_predictions(images: &[GeorefImage]) -> Vec<(ImageId, usize)> {
    images.iter().filter_map(|im| im.label.map(|l| (im.id, l))).collect()
}

/// L1 distance between estimated and true class fractions, per dive present
/// in both tables.
pub fn proportion_l1(estimated: &[DiveProportions], truth: &[DiveProportions]) -> Vec<(u32, f64)> {
    estimated
        .iter()
        .filter_map(|e| {
            let t = truth.iter().find(|t| t.dive == e.dive)?;
            Some((e.dive, e.fractions.iter().zip(&t.fractions).map(|(a, b)| (a - b).abs()).sum()))
        })
        .collect()
}

pub fn proportions_csv(table: &[DiveProportions], class_names: &[String]) -> String {
    let mut s = String::from("dive,images");
    for n in class_names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for row in table {
        let _ = write!(s, "{},{}", row.dive, row.images);
        for f in &row.fractions {
            let _ = write!(s, ",{f:.6}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthHistogram {
    pub bin_width: f64,
    /// Index of the first bin: bin `k` covers `[k * width, (k + 1) * width)`.
    pub first_bin: i64,
    /// `counts[class][bin - first_bin]`.
    pub counts: Vec<Vec<usize>>,
}

impl DepthHistogram {
    pub fn bin_range(&self, i: usize) -> (f64, f64) {
        let k = self.first_bin + i as i64;
        (k as f64 * self.bin_width, (k + 1) as f64 * self.bin_width)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("class,depth_lo,depth_hi,count\n");
        for (c, row) in self.counts.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            for (i, n) in row.iter().enumerate() {
                let (lo, hi) = self.bin_range(i);
                let _ = writeln!(s, "{name},{lo},{hi},{n}");
            }
        }
        s
    }
}

/// Counts per (class, depth bin) with half-open bins aligned to multiples of
/// `bin_width`.
pub fn class_depth_histogram(
    predictions: &[(ImageId, usize)],
    images: &[GeorefImage],
    classes: usize,
    bin_width: f64,
) -> Result<DepthHistogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    let by_id = index_images(images);
    let mut entries = Vec::with_capacity(predictions.len());
    for &(id, label) in predictions {
        let im = by_id
            .get(&id)
            .ok_or_else(|| Error::Data(format!("prediction for unknown image {id}")))?;
        if label >= classes {
            return Err(Error::Data(format!("predicted class {label} out of range")));
        }
        entries.push(((im.georef.depth / bin_width).floor() as i64, label));
    }
    let first = entries.iter().map(|e| e.0).min().unwrap_or(0);
    let last = entries.iter().map(|e| e.0).max().unwrap_or(-1);
    let bins = (last - first + 1).max(0) as usize;
    let mut counts = vec![vec![0usize; bins]; classes];
    for (bin, label) in entries {
        counts[label][(bin - first) as usize] += 1;
    }
    Ok(DepthHistogram {
        bin_width,
        first_bin: first,
        counts,
    })
}

struct Row<'a> {
    image: &'a GeorefImage,
    predicted: usize,
}

fn joined<'a>(predictions: &[(ImageId, usize)], images: &'a [GeorefImage]) -> Result<Vec<Row<'a>>> {
    let by_id = index_images(images);
    let mut rows = predictions
        .iter()
        .map(|&(id, predicted)| {
            let image = by_id
                .get(&id)
                .ok_or_else(|| Error::Data(format!("prediction for unknown image {id}")))?;
            Ok(Row { image, predicted })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| r.image.id);
    Ok(rows)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn svg_open(s: &mut String, title: &str, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64)) {
    let _ = writeln!(
        s,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(s, "<title>{title}</title>");
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        "<path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{x_label} [{:.2}, {:.2}]</text>",
        WIDTH / 2.0,
        HEIGHT - 12.0,
        x.0,
        x.1
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{y_label} [{:.2}, {:.2}]</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        y.0,
        y.1
    );
}

fn legend(s: &mut String, class_names: &[String]) {
    for (c, name) in class_names.iter().enumerate() {
        let y = MARGIN + 14.0 * c as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>",
            WIDTH - MARGIN + 4.0,
            y,
            class_color(c),
            WIDTH - MARGIN + 16.0,
            y + 9.0,
            escape(name)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn scale(v: f64, (lo, hi): (f64, f64), (a, b): (f64, f64)) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// Scatter of image positions coloured by predicted class.
pub fn horizontal_svg(predictions: &[(ImageId, usize)], images: &[GeorefImage], class_names: &[String]) -> Result<String> {
    let rows = joined(predictions, images)?;
    let xr = span(rows.iter().map(|r| r.image.georef.easting));
    let yr = span(rows.iter().map(|r| r.image.georef.northing));
    let mut s = String::new();
    svg_open(&mut s, "Horizontal distribution", "easting (m)", "northing (m)", xr, yr);
    legend(&mut s, class_names);
    for r in &rows {
        let cx = scale(r.image.georef.easting, xr, (MARGIN, WIDTH - MARGIN));
        let cy = scale(r.image.georef.northing, yr, (HEIGHT - MARGIN, MARGIN));
        let _ = writeln!(
            s,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2\" fill=\"{}\"/>",
            class_color(r.predicted)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Depth against image index, drawn as one polyline per run of equal
/// predicted class.
pub fn depth_profile_svg(predictions: &[(ImageId, usize)], images: &[GeorefImage], class_names: &[String]) -> Result<String> {
    let rows = joined(predictions, images)?;
    let xr = span((0..rows.len()).map(|i| i as f64));
    let yr = span(rows.iter().map(|r| r.image.georef.depth));
    let mut s = String::new();
    svg_open(&mut s, "Depth profile", "image index", "depth (m)", xr, yr);
    legend(&mut s, class_names);
    let point = |i: usize| {
        let x = scale(i as f64, xr, (MARGIN, WIDTH - MARGIN));
        // depth increases downwards
        let y = scale(rows[i].image.georef.depth, yr, (MARGIN, HEIGHT - MARGIN));
        format!("{x:.2},{y:.2}")
    };
    let mut start = 0;
    while start < rows.len() {
        let class = rows[start].predicted;
        let mut end = start;
        while end + 1 < rows.len() && rows[end + 1].predicted == class {
            end += 1;
        }
        // include the next point so consecutive runs join up
        let last = (end + 1).min(rows.len() - 1);
        let pts: Vec<String> = (start..=last).map(point).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            pts.join(" "),
            class_color(class)
        );
        start = end + 1;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub const MAP_CSV_HEADER: &str = "id,easting,northing,depth,dive,predicted,truth";

pub fn map_csv(predictions: &[(ImageId, usize)], images: &[GeorefImage], class_names: &[String]) -> Result<String> {
    let rows = joined(predictions, images)?;
    let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let mut s = String::from(MAP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let g = r.image.georef;
        let truth = r.image.label.map(name).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{truth}",
            r.image.id,
            g.easting,
            g.northing,
            g.depth,
            r.image.dive,
            name(r.predicted)
        );
    }
    Ok(s)
}

/// Writes `horizontal.svg`, `depth_profile.svg` and `map.csv` into `dir`.
pub fn habitat_map(predictions: &[(ImageId, usize)], images: &[GeorefImage], class_names: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("horizontal.svg", horizontal_svg(predictions, images, class_names)?),
        ("depth_profile.svg", depth_profile_svg(predictions, images, class_names)?),
        ("map.csv", map_csv(predictions, images, class_names)?),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

//! Command-line front end. Every command writes a JSON record of its resolved
//! configuration next to its outputs.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classify::{
    fit_classifier, predict_encoder, pseudo_label_pipeline, read_latents, write_latents, ClassifierKind,
    ClassifierModel, ClassifierSettings, FinetuneConfig,
};
use crate::contrastive::{train_with_progress, write_loss_log, Mode, TrainConfig};
use crate::dataset::{load_manifest, Dataset, ImageId};
use crate::error::{Error, Result};
use crate::evalx::{per_class_f1, sweep, validation_set, write_sweep, ProbeConfig, SweepGrid};
use crate::nn::checkpoint::{Container, TrainedEncoder, ENCODER_KIND};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::report::{class_depth_histogram, class_proportions, habitat_map, proportions_csv, truth_predictions};
use crate::select::{read_annotations, select, write_annotations, write_picks, SelectionConfig, Strategy};
use crate::surveysim::{generate_survey, generate_world, TrajectoryConfig, WorldConfig};

#[derive(Debug, Parser)]
#[command(name = "geoclr", version, about = "Georeference-aware contrastive learning for seafloor imagery")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic survey: manifest, PNG tiles and world sidecar.
    Simulate(SimulateArgs),
    /// Contrastive pretraining of the encoder.
    Train(TrainArgs),
    /// Latent vectors h for every image of a manifest.
    Embed(EmbedArgs),
    /// Choose images for annotation.
    Select(SelectArgs),
    /// Fit a classifier on annotated latents, optionally fine-tuning on pseudo-labels.
    Classify(ClassifyArgs),
    /// Macro-F1 of a model on a labeled validation file.
    Evaluate(EvaluateArgs),
    /// Grid of pretraining and downstream settings, repeated over seeds.
    Sweep(SweepArgs),
    /// Habitat maps, per-dive class proportions and class-vs-depth counts.
    Map(MapArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML training configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[allow(non_snake_case)]
#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub strategy: Strategy,
    #[arg(long = "M")]
    pub M: usize,
    /// Top-level cluster count for hkmeans, or `auto` for the elbow rule.
    #[arg(long, default_value = "auto")]
    pub m: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Ground truth for balanced selection; also writes `<out>_labels.csv`
    /// with simulated annotator answers.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// CSV whose first column lists ids that must not be selected.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub latents: PathBuf,
    /// CSV `id,label`.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub classifier: ClassifierKind,
    /// Fine-tune the encoder on pseudo-labels for every id in `--latents`.
    #[arg(long)]
    pub pseudo_finetune: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fixes the class list; required with `--pseudo-finetune`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Ids kept out of the pseudo-label set (e.g. validation).
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Fine-tuning epochs for `--pseudo-finetune`.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub svm_c: Option<f64>,
    #[arg(long)]
    pub svm_gamma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV `id,label`.
    #[arg(long)]
    pub validation: PathBuf,
    /// Latents for linear/svm models.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Images for fine-tuned encoder models.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Overrides `manifest` in the grid file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Encoder used to compute latents for linear/svm models.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed latents for linear/svm models.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub bin_width: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// `simulate --config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub world: WorldConfig,
    pub trajectory: TrajectoryConfig,
    pub tile_size: usize,
    /// Drives per-frame rendering nuisance; the world has its own seed.
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            world: WorldConfig::default(),
            trajectory: TrajectoryConfig::default(),
            tile_size: crate::dataset::DEFAULT_TILE_SIZE,
            seed: 7,
        }
    }
}

/// `sweep --grid` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    /// Relative paths resolve against the grid file's directory.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_validation")]
    pub validation_per_class: usize,
    pub grid: SweepGrid,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_validation() -> usize {
    20
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // a malformed config is a usage error, like a bad flag
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
        Error::Config(format!("{}:{line}: {}", path.display(), e.message()))
    })
}

/// `dir/stem<suffix>` for an output file `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_record(path: &Path, command: &str, config: serde_json::Value) -> Result<()> {
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    let text = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn load_dataset(manifest: &Path, tile_size: usize) -> Result<Dataset> {
    let m = load_manifest(manifest)?.with_tile_size(tile_size);
    Dataset::from_manifest(&m)
}

/// Ids from the first column of a CSV with a header (`rank,id` files use the
/// second column).
fn read_id_column(path: &Path) -> Result<BTreeSet<ImageId>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let col = usize::from(header.trim().starts_with("rank,"));
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .nth(col)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: "expected an integer id".into(),
                })
        })
        .collect()
}

fn class_lookup(names: &[String]) -> HashMap<&str, usize> {
    names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
}

fn labeled_ids(path: &Path, names: &[String]) -> Result<Vec<(ImageId, usize)>> {
    let lookup = class_lookup(names);
    read_annotations(path)?
        .into_iter()
        .map(|(id, name)| {
            lookup
                .get(name.as_str())
                .map(|&c| (id, c))
                .ok_or_else(|| Error::Data(format!("{}: unknown class '{name}' for image {id}", path.display())))
        })
        .collect()
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => read_toml::<SimulateConfig>(p)?,
        None => SimulateConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let world = generate_world(&config.world)?;
    let survey = generate_survey(&world, &config.trajectory, config.tile_size, config.seed)?;
    survey.write(&args.out)?;
    write_record(
        &args.out.join("run.json"),
        "simulate",
        serde_json::to_value(&config).expect("serializes"),
    )?;
    eprintln!("wrote {} images to {}", survey.images.len(), args.out.display());
    Ok(())
}

fn resolve_train(args: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &args.config {
        Some(p) => read_toml::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.mode {
        c.mode = v;
    }
    if let Some(v) = args.r {
        c.pairing.r = v;
    }
    if let Some(v) = args.lambda {
        c.pairing.lambda = v;
    }
    if let Some(v) = args.tau {
        c.loss.temperature = v;
    }
    if let Some(v) = args.batch {
        c.loss.batch_size = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.tile_size {
        c.encoder.tile_size = v;
    }
    c.validate()?;
    Ok(c)
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let config = resolve_train(args)?;
    let dataset = load_dataset(&args.manifest, config.encoder.tile_size)?;
    let outcome = train_with_progress(&dataset, &config, |e| {
        eprintln!("epoch {:>3}  loss {:.6}  {:.1}s", e.epoch, e.mean_loss, e.wall_seconds)
    })?;
    ensure_parent(&args.out)?;
    save_checkpoint(&outcome.encoder, &args.out)?;
    write_loss_log(&sibling(&args.out, "_loss.csv"), &outcome.log)?;
    write_record(
        &sibling(&args.out, ".run.json"),
        "train",
        json!({
            "manifest": args.manifest,
            "train": config,
            "pairs": outcome.pair_stats,
        }),
    )
}

fn embed_cmd(args: &EmbedArgs) -> Result<()> {
    let encoder = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.manifest, encoder.config.tile_size)?;
    let ids = dataset.ids();
    let h = crate::classify::embed(&encoder, &dataset, &ids)?;
    ensure_parent(&args.out)?;
    write_latents(&args.out, &ids.into_iter().zip(h).collect::<Vec<_>>())?;
    write_record(
        &sibling(&args.out, ".run.json"),
        "embed",
        json!({"checkpoint": args.checkpoint, "manifest": args.manifest}),
    )
}

fn select_cmd(args: &SelectArgs) -> Result<()> {
    let m = match args.m.as_str() {
        "auto" => None,
        s => Some(s.parse::<usize>().map_err(|_| Error::Config(format!("--m must be 'auto' or an integer, got '{s}'")))?),
    };
    let exclude = match &args.exclude {
        Some(p) => read_id_column(p)?,
        None => BTreeSet::new(),
    };
    let latents: Vec<(ImageId, Vec<f64>)> = read_latents(&args.latents)?
        .into_iter()
        .filter(|(id, _)| !exclude.contains(id))
        .collect();
    let (labeled, classes, names) = match &args.manifest {
        Some(p) => {
            let manifest = load_manifest(p)?;
            let names = manifest.class_names.clone();
            let keep: BTreeSet<ImageId> = latents.iter().map(|(id, _)| *id).collect();
            let labeled: Vec<(ImageId, usize)> = manifest
                .records
                .iter()
                .zip(manifest.labels())
                .filter_map(|(r, l)| l.filter(|_| keep.contains(&r.id)).map(|l| (r.id, l)))
                .collect();
            (labeled, names.len(), Some((manifest, names)))
        }
        None => (Vec::new(), 0, None),
    };
    if args.strategy == Strategy::Balanced && names.is_none() {
        return Err(Error::Config("balanced selection needs --manifest for ground-truth labels".into()));
    }
    let config = SelectionConfig {
        M: args.M,
        strategy: args.strategy,
        m,
        seed: args.seed,
    };
    let picks = select(&config, &latents, &labeled, classes)?;
    ensure_parent(&args.out)?;
    write_picks(&args.out, &picks)?;
    if let Some((manifest, names)) = &names {
        let truth: HashMap<ImageId, usize> = labeled.iter().copied().collect();
        let answers = picks
            .iter()
            .map(|id| {
                truth
                    .get(id)
                    .map(|&c| (*id, names[c].clone()))
                    .ok_or_else(|| Error::Data(format!("image {id} has no label in {}", manifest.base_dir.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        write_annotations(&sibling(&args.out, "_labels.csv"), &answers)?;
    }
    write_record(
        &sibling(&args.out, ".run.json"),
        "select",
        json!({
            "latents": args.latents,
            "selection": config,
            "manifest": args.manifest,
            "exclude": args.exclude,
        }),
    )
}

fn classify_cmd(args: &ClassifyArgs) -> Result<()> {
    let annotations_raw = read_annotations(&args.annotations)?;
    let manifest = args.manifest.as_ref().map(|p| load_manifest(p)).transpose()?;
    let names: Vec<String> = match &manifest {
        Some(m) => m.class_names.clone(),
        None => annotations_raw
            .iter()
            .map(|(_, n)| n.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let annotations = labeled_ids(&args.annotations, &names)?;
    let mut settings = ClassifierSettings::default();
    if let Some(v) = args.l2 {
        settings.l2 = v;
    }
    if let Some(v) = args.svm_c {
        settings.svm.c = v;
    }
    if args.svm_gamma.is_some() {
        settings.svm.gamma = args.svm_gamma;
    }
    let latents = read_latents(&args.latents)?;
    let exclude = match &args.exclude {
        Some(p) => read_id_column(p)?,
        None => BTreeSet::new(),
    };
    if let Some((id, _)) = annotations.iter().find(|(id, _)| exclude.contains(id)) {
        return Err(Error::Data(format!("annotated image {id} is also excluded")));
    }
    ensure_parent(&args.out)?;
    let record;
    if args.pseudo_finetune {
        let (Some(ck), Some(manifest)) = (&args.checkpoint, &manifest) else {
            return Err(Error::Config("--pseudo-finetune needs --checkpoint and --manifest".into()));
        };
        let encoder = load_checkpoint(ck)?;
        let dataset = Dataset::from_manifest(&manifest.clone().with_tile_size(encoder.config.tile_size))?;
        let pool: Vec<ImageId> = latents.iter().map(|(id, _)| *id).filter(|id| !exclude.contains(id)).collect();
        let mut ft = FinetuneConfig {
            seed: args.seed,
            epochs: ProbeConfig::default().pl_epochs,
            ..Default::default()
        };
        if let Some(e) = args.epochs {
            ft.epochs = e;
        }
        let (tuned, labels) =
            pseudo_label_pipeline(&encoder, &dataset, &pool, &annotations, args.classifier, &settings, &ft)?;
        save_checkpoint(&tuned, &args.out)?;
        let answers: Vec<(ImageId, String)> = labels.labels.iter().map(|(&id, &c)| (id, names[c].clone())).collect();
        write_annotations(&sibling(&args.out, "_pseudo.csv"), &answers)?;
        record = json!({"classifier": args.classifier, "settings": settings, "finetune": ft, "checkpoint": ck});
    } else {
        let by_id: HashMap<ImageId, &Vec<f64>> = latents.iter().map(|(id, h)| (*id, h)).collect();
        let h = annotations
            .iter()
            .map(|(id, _)| {
                by_id
                    .get(id)
                    .map(|h| (*h).clone())
                    .ok_or_else(|| Error::Data(format!("annotated image {id} has no latent vector")))
            })
            .collect::<Result<Vec<_>>>()?;
        let y: Vec<usize> = annotations.iter().map(|(_, l)| *l).collect();
        let classifier = fit_classifier(args.classifier, &h, &y, names.len(), &settings, args.seed)?;
        record = json!({"classifier": args.classifier, "settings": settings});
        ClassifierModel {
            classifier,
            class_names: names.clone(),
            provenance: json!({"latents": args.latents, "annotations": args.annotations, "seed": args.seed}),
        }
        .save(&args.out)?;
    }
    write_record(
        &sibling(&args.out, ".run.json"),
        "classify",
        json!({
            "latents": args.latents,
            "annotations": args.annotations,
            "exclude": args.exclude,
            "seed": args.seed,
            "classes": names,
            "model": record,
        }),
    )
}

/// A saved model of either family.
pub enum Model {
    Classical(ClassifierModel),
    Encoder(TrainedEncoder),
}

impl Model {
    pub fn load(path: &Path) -> Result<Model> {
        let c = Container::read(path)?;
        if c.kind() == Some(ENCODER_KIND) {
            Ok(Model::Encoder(TrainedEncoder::from_container(&c, path)?))
        } else {
            Ok(Model::Classical(ClassifierModel::from_container(&c, path)?))
        }
    }

    pub fn class_names(&self) -> &[String] {
        match self {
            Model::Classical(m) => &m.class_names,
            Model::Encoder(e) => &e.class_names,
        }
    }

    /// Predicted class for each id, from precomputed latents, latents computed
    /// by `encoder`, or the model's own head.
    pub fn predict(
        &self,
        ids: &[ImageId],
        dataset: Option<&Dataset>,
        latents: Option<&[(ImageId, Vec<f64>)]>,
        encoder: Option<&TrainedEncoder>,
    ) -> Result<Vec<usize>> {
        match self {
            Model::Encoder(e) => {
                let ds = dataset.ok_or_else(|| Error::Config("a fine-tuned encoder model needs --manifest".into()))?;
                Ok(predict_encoder(e, ds, ids)?.labels)
            }
            Model::Classical(m) => {
                let h = if let Some(lat) = latents {
                    let by_id: HashMap<ImageId, &Vec<f64>> = lat.iter().map(|(id, h)| (*id, h)).collect();
                    ids.iter()
                        .map(|id| {
                            by_id
                                .get(id)
                                .map(|h| (*h).clone())
                                .ok_or_else(|| Error::Data(format!("image {id} has no latent vector")))
                        })
                        .collect::<Result<Vec<_>>>()?
                } else if let (Some(enc), Some(ds)) = (encoder, dataset) {
                    crate::classify::embed(enc, ds, ids)?
                } else {
                    return Err(Error::Config("a linear/svm model needs --latents or --checkpoint".into()));
                };
                Ok(m.classifier.predict(&h)?.labels)
            }
        }
    }
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let names = model.class_names().to_vec();
    let validation = labeled_ids(&args.validation, &names)?;
    let ids: Vec<ImageId> = validation.iter().map(|(id, _)| *id).collect();
    let truth: Vec<usize> = validation.iter().map(|(_, l)| *l).collect();
    let dataset = match (&model, &args.manifest) {
        (Model::Encoder(e), Some(p)) => Some(load_dataset(p, e.config.tile_size)?),
        _ => None,
    };
    let latents = args.latents.as_ref().map(|p| read_latents(p)).transpose()?;
    let predicted = model.predict(&ids, dataset.as_ref(), latents.as_deref(), None)?;
    let (per_class, macro_f1) = per_class_f1(&predicted, &truth, names.len())?;
    let mut s = String::from("class,f1,support\n");
    for (c, f1) in per_class.iter().enumerate() {
        let support = truth.iter().filter(|&&t| t == c).count();
        s.push_str(&format!("{},{f1},{support}\n", names[c]));
    }
    s.push_str(&format!("macro,{macro_f1},{}\n", truth.len()));
    ensure_parent(&args.out)?;
    fs::write(&args.out, s).map_err(|e| Error::io(&args.out, e))?;
    println!("macro-F1 {macro_f1:.4} on {} images", truth.len());
    write_record(
        &sibling(&args.out, ".run.json"),
        "evaluate",
        json!({"model": args.model, "validation": args.validation, "latents": args.latents, "manifest": args.manifest}),
    )
}

fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let file: SweepFile = read_toml(&args.grid)?;
    let manifest = match (&args.manifest, &file.manifest) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) if p.is_relative() => args.grid.parent().unwrap_or(Path::new(".")).join(p),
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(Error::Config("sweep needs a manifest (grid file or --manifest)".into())),
    };
    let dataset = load_dataset(&manifest, file.train.encoder.tile_size)?;
    let validation = validation_set(&dataset, file.validation_per_class, file.seed)?;
    let rows = sweep(&dataset, &file.grid, &file.train, &file.probe, &validation, args.repeats, file.seed)?;
    ensure_parent(&args.out)?;
    write_sweep(&args.out, &rows, &file.probe.classifier.svm)?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see the summary file", rows.len());
    }
    write_record(
        &sibling(&args.out, ".run.json"),
        "sweep",
        json!({"manifest": manifest, "repeats": args.repeats, "sweep": file}),
    )
}

fn map_cmd(args: &MapArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let encoder = args.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let tile = match (&model, &encoder) {
        (Model::Encoder(e), _) | (_, Some(e)) => e.config.tile_size,
        _ => crate::dataset::DEFAULT_TILE_SIZE,
    };
    let manifest = load_manifest(&args.manifest)?.with_tile_size(tile);
    let names = model.class_names().to_vec();
    // tiles are only needed when a network runs
    let needs_tiles = matches!(model, Model::Encoder(_)) || args.latents.is_none();
    let dataset = if needs_tiles { Some(Dataset::from_manifest(&manifest)?) } else { None };
    let images: Vec<crate::dataset::GeorefImage> = match &dataset {
        Some(d) => d.images().to_vec(),
        None => manifest_images(&manifest, &names)?,
    };
    let ids: Vec<ImageId> = images.iter().map(|im| im.id).collect();
    let latents = args.latents.as_ref().map(|p| read_latents(p)).transpose()?;
    let predicted = model.predict(&ids, dataset.as_ref(), latents.as_deref(), encoder.as_ref())?;
    let predictions: Vec<(ImageId, usize)> = ids.iter().copied().zip(predicted).collect();
    habitat_map(&predictions, &images, &names, &args.out)?;
    let write = |name: &str, body: String| {
        let p = args.out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("proportions.csv", proportions_csv(&class_proportions(&predictions, &images, names.len())?, &names))?;
    let truth = truth_predictions(&images);
    if truth.len() == images.len() {
        write(
            "proportions_truth.csv",
            proportions_csv(&class_proportions(&truth, &images, names.len())?, &names),
        )?;
    }
    write(
        "class_depth.csv",
        class_depth_histogram(&predictions, &images, names.len(), args.bin_width)?.to_csv(&names),
    )?;
    write_record(
        &args.out.join("run.json"),
        "map",
        json!({"model": args.model, "manifest": args.manifest, "checkpoint": args.checkpoint,
               "latents": args.latents, "bin_width": args.bin_width}),
    )
}

/// Images without pixels, for reports that only need georeferences.
fn manifest_images(manifest: &crate::dataset::DatasetManifest, names: &[String]) -> Result<Vec<crate::dataset::GeorefImage>> {
    let lookup = class_lookup(names);
    Ok(manifest
        .records
        .iter()
        .map(|r| crate::dataset::GeorefImage {
            id: r.id,
            georef: r.georef,
            dive: r.dive,
            tile: crate::dataset::Tile::filled(1, 0.0),
            label: r.label.as_deref().and_then(|l| lookup.get(l).copied()),
        })
        .collect())
}

pub fn run(cli: &Cli) -> Result<()> {
    let go = || match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Map(a) => map_cmd(a),
    };
    match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(go),
        None => go(),
    }
}

/// Process exit code for an error: 1 usage/config, 2 data, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

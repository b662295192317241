//! Subcommand implementations.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use casa_core::adversary::{pgd_attack, AttackDocument, PgdConfig, PgdInit, StainTarget};
use casa_core::calibration::{budget_from_stats, corpus_stats, quantile_level, ImageStainStats, StainBudget};
use casa_core::model::{DifferentiableModel, MlpClassifier, TrainConfig};
use casa_core::perturbation::{sample_random_perturbation, PerturbationDocument};
use casa_core::rng::{derive_seed, stream};
use casa_core::synth::{generate_dataset, SynthConfig};
use casa_core::trainer::{evaluate, train_casa, train_erm, train_random_aug, EpochLog, EvalReport, Split};
use casa_core::{macenko_decompose, MacenkoParams, RgbImage};
use clap::ValueEnum;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, label_from_parent, list_pngs, read_budget, save_png, write_json};
use crate::error::{CliError, CliResult};

/// Stream tag for random augmentation draws.
const RANDOM_AUGMENT_STREAM: u64 = 0xA06E;

pub fn decompose(image: &Path, out: Option<&Path>, concentrations: Option<&Path>) -> CliResult<()> {
    let img = RgbImage::load_png(image)?;
    let (w, h) = macenko_decompose(&img, &MacenkoParams::default())?;
    if let Some(path) = concentrations {
        data::ensure_parent(path)?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        writer.write_record(["pixel", "h", "e"])?;
        for j in 0..h.n_pixels() {
            let [a, b] = h.pixel(j);
            writer.write_record([j.to_string(), a.to_string(), b.to_string()])?;
        }
        writer.flush()?;
    }
    write_json(&w.to_document(), out)
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsRow {
    image_id: String,
    alpha_rad: f64,
    r_h: f64,
    r_e: f64,
}

pub struct CalibrateArgs<'a> {
    pub images: Option<&'a Path>,
    pub stats_in: Option<&'a Path>,
    pub delta: f64,
    pub beta: f64,
    pub out: &'a Path,
    pub stats_out: Option<&'a Path>,
}

pub fn calibrate(args: &CalibrateArgs<'_>) -> CliResult<()> {
    // Reject bad probabilities before touching any image.
    quantile_level(1, args.delta, args.beta)?;
    let stats = match (args.images, args.stats_in) {
        (Some(dir), None) => stats_from_images(dir)?,
        (None, Some(path)) => {
            let mut reader = csv::Reader::from_path(path)?;
            let mut rows = Vec::new();
            for row in reader.deserialize() {
                let row: StatsRow = row?;
                rows.push(ImageStainStats { image_id: row.image_id, alpha: row.alpha_rad, r: [row.r_h, row.r_e] });
            }
            rows
        }
        _ => return Err(CliError::Usage("give exactly one of --images and --stats-in".into())),
    };
    if let Some(path) = args.stats_out {
        data::ensure_parent(path)?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        for s in &stats {
            writer.serialize(StatsRow { image_id: s.image_id.clone(), alpha_rad: s.alpha, r_h: s.r[0], r_e: s.r[1] })?;
        }
        writer.flush()?;
    }
    let budget = budget_from_stats(&stats, args.delta, args.beta)?;
    info!("calibrated tau_w {:.4} rad, tau_h {:.4} from {} images", budget.tau_w, budget.tau_h, budget.n);
    write_json(&budget, Some(args.out))
}

fn stats_from_images(dir: &Path) -> CliResult<Vec<ImageStainStats>> {
    let entries = list_pngs(dir)?;
    let decomposed: Vec<_> = entries
        .par_iter()
        .map(|e| -> CliResult<_> {
            let image = RgbImage::load_png(&e.path)?;
            Ok(macenko_decompose(&image, &MacenkoParams::default()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut matrices = Vec::new();
    let mut maps = Vec::new();
    for (entry, result) in entries.iter().zip(decomposed) {
        match result {
            Ok((w, h)) => {
                ids.push(entry.id());
                matrices.push(w);
                maps.push(h);
            }
            Err(err) => warn!("skipping {}: {err}", entry.id()),
        }
    }
    if matrices.len() < 2 {
        return Err(CliError::Data(format!("need at least 2 decomposable images, found {}", matrices.len())));
    }
    Ok(corpus_stats(&matrices, &maps, Some(&ids))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugmentMode {
    Random,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Zero,
    Random,
}

impl From<InitArg> for PgdInit {
    fn from(arg: InitArg) -> Self {
        match arg {
            InitArg::Zero => PgdInit::Zero,
            InitArg::Random => PgdInit::Random,
        }
    }
}

pub struct AugmentArgs<'a> {
    pub mode: AugmentMode,
    pub input: &'a Path,
    pub out: &'a Path,
    pub budget: &'a Path,
    pub model: Option<&'a Path>,
    pub label: Option<usize>,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct AugmentRecord {
    image: String,
    label: Option<usize>,
    /// `None` when the image could not be decomposed and was copied as is.
    perturbation: Option<PerturbationDocument>,
    clean_loss: Option<f64>,
    loss: Option<f64>,
    error: Option<String>,
}

pub fn augment(args: &AugmentArgs<'_>) -> CliResult<()> {
    let model = match (args.mode, args.model) {
        (AugmentMode::Adversarial, None) => return Err(CliError::Usage("--mode adversarial requires --model".into())),
        (_, Some(path)) => Some(MlpClassifier::load(path)?),
        (AugmentMode::Random, None) => None,
    };
    let budget = read_budget(args.budget)?;
    let entries = list_pngs(args.input)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!("no PNG images under {}", args.input.display())));
    }
    let labels: Vec<Option<usize>> = entries.iter().map(|e| e.label_from_parent().or(args.label)).collect();
    if args.mode == AugmentMode::Adversarial {
        if let Some(e) = entries.iter().zip(&labels).find(|(_, l)| l.is_none()).map(|(e, _)| e) {
            return Err(CliError::Usage(format!("no label for {}: pass --label or use 0/1 directories", e.id())));
        }
    }
    if let Some(l) = args.label {
        if l > 1 {
            return Err(CliError::Usage(format!("label {l} is not 0 or 1")));
        }
    }

    let records = entries
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (entry, &label))| -> CliResult<AugmentRecord> {
            let image = RgbImage::load_png(&entry.path)?;
            let mut record =
                AugmentRecord { image: entry.id(), label, perturbation: None, clean_loss: None, loss: None, error: None };
            let (w_ref, h0) = match macenko_decompose(&image, &MacenkoParams::default()) {
                Ok(d) => d,
                Err(err) => {
                    warn!("{}: {err}; copied unperturbed", entry.id());
                    record.error = Some(err.to_string());
                    save_png(&image, &args.out.join(&entry.relative))?;
                    return Ok(record);
                }
            };
            let target = StainTarget { w_ref: &w_ref, h0: &h0, i0: 1.0, width: image.width(), height: image.height() };
            let (pert, out_image) = match args.mode {
                AugmentMode::Random => {
                    let pert = sample_random_perturbation(&w_ref, &budget, &mut stream(args.seed, &[RANDOM_AUGMENT_STREAM, i as u64]));
                    (pert, target.render(&pert)?)
                }
                AugmentMode::Adversarial => {
                    let model = model.as_ref().expect("checked above");
                    let label = label.expect("checked above");
                    let config = PgdConfig { k_steps: args.k, seed: derive_seed(args.seed, &[i as u64]), ..PgdConfig::default() };
                    let result = pgd_attack(model, &target, label, &budget, &config)?;
                    record.clean_loss = Some(result.loss_trajectory[0]);
                    (result.perturbation, result.adversarial_image)
                }
            };
            if let (Some(model), Some(label)) = (model.as_ref(), label) {
                record.loss = Some(model.loss(&out_image, label));
            }
            record.perturbation = Some(pert.to_document());
            save_png(&out_image, &args.out.join(&entry.relative))?;
            Ok(record)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    info!("augmented {} images ({failures} copied unperturbed)", records.len() - failures);
    write_json(&records, Some(&args.out.join("augment.json")))
}

pub struct AttackArgs<'a> {
    pub image: &'a Path,
    pub budget: &'a Path,
    pub model: &'a Path,
    pub label: Option<usize>,
    pub k: usize,
    pub init: InitArg,
    pub seed: u64,
    pub out_image: Option<&'a Path>,
    pub out_json: Option<&'a Path>,
}

pub fn attack(args: &AttackArgs<'_>) -> CliResult<()> {
    let label = args
        .label
        .or_else(|| label_from_parent(args.image))
        .ok_or_else(|| CliError::Usage("pass --label or keep the image in a 0/1 directory".into()))?;
    if label > 1 {
        return Err(CliError::Usage(format!("label {label} is not 0 or 1")));
    }
    let model = MlpClassifier::load(args.model)?;
    let budget = read_budget(args.budget)?;
    let image = RgbImage::load_png(args.image)?;
    let (w_ref, h0) = macenko_decompose(&image, &MacenkoParams::default())?;
    let target = StainTarget { w_ref: &w_ref, h0: &h0, i0: 1.0, width: image.width(), height: image.height() };
    let config = PgdConfig { k_steps: args.k, init: args.init.into(), seed: args.seed, ..PgdConfig::default() };
    let result = pgd_attack(&model, &target, label, &budget, &config)?;
    if let Some(path) = args.out_image {
        save_png(&result.adversarial_image, path)?;
    }
    let doc: AttackDocument = result.to_document();
    write_json(&doc, args.out_json)
}

pub fn generate(out: &Path, config: Option<&Path>, patches_per_class: Option<usize>, seed: u64) -> CliResult<()> {
    let mut config: SynthConfig = match config {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_reader(std::io::BufReader::new(file))?
        }
        None => SynthConfig::default(),
    };
    config.seed = seed;
    if let Some(n) = patches_per_class {
        config.patches_per_class = n;
    }
    let synth = generate_dataset(&config)?;
    data::write_synth(&synth, &config, out)?;
    info!("wrote {} patches to {}", synth.dataset.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Casa,
    Erm,
    Randaug,
}

pub struct TrainArgs<'a> {
    pub method: Method,
    pub budget: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub patches_per_class: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub k: usize,
    pub seed: u64,
    pub out_checkpoint: Option<&'a Path>,
    pub log: Option<&'a Path>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    method: Method,
    seed: u64,
    budget: StainBudget,
    epochs: Vec<EpochLog>,
    train: EvalReport,
    /// Absent when the data has no held-out center.
    heldout: Option<EvalReport>,
}

#[derive(Debug, Serialize)]
struct LogRow {
    epoch: usize,
    clean_loss: f64,
    adv_loss: f64,
    train_acc: f64,
}

pub fn train_demo(args: &TrainArgs<'_>) -> CliResult<()> {
    let loaded = data::load_or_generate(args.data, args.seed, args.patches_per_class)?;
    let budget = match args.budget {
        Some(path) => read_budget(path)?,
        None => loaded.budget,
    };
    let train = loaded.dataset.split(Split::Train);
    let heldout = loaded.dataset.split(Split::Test);
    if train.is_empty() {
        return Err(CliError::Data("dataset has no training patches".into()));
    }
    let config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let mut model = MlpClassifier::with_defaults(config.init_scale, args.seed);
    let images: Vec<&RgbImage> = train.patches().iter().map(|p| &p.image).collect();
    model.fit_input_normalization(&images)?;

    let (model, log) = match args.method {
        Method::Erm => train_erm(&train, model, &config)?,
        Method::Randaug => train_random_aug(&train, model, &budget, &config)?,
        Method::Casa => {
            let pgd = PgdConfig { k_steps: args.k, seed: args.seed, ..PgdConfig::default() };
            train_casa(&train, model, &budget, &pgd, &config)?
        }
    };
    for e in &log.epochs {
        info!("epoch {}: clean {:.4} adv {:.4} train acc {:.3}", e.epoch, e.clean_loss, e.adv_loss, e.train_acc);
    }
    if let Some(path) = args.out_checkpoint {
        data::ensure_parent(path)?;
        model.save(path)?;
    }
    if let Some(path) = args.log {
        data::ensure_parent(path)?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        for e in &log.epochs {
            writer.serialize(LogRow { epoch: e.epoch, clean_loss: e.clean_loss, adv_loss: e.adv_loss, train_acc: e.train_acc })?;
        }
        writer.flush()?;
    }
    let summary = TrainSummary {
        method: args.method,
        seed: args.seed,
        budget,
        epochs: log.epochs,
        train: evaluate(&model, &train)?,
        heldout: if heldout.is_empty() { None } else { Some(evaluate(&model, &heldout)?) },
    };
    write_json(&summary, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub patches_per_class: Option<usize>,
    pub split: SplitArg,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs<'_>) -> CliResult<()> {
    let model = MlpClassifier::load(args.checkpoint)?;
    let loaded = data::load_or_generate(args.data, args.seed, args.patches_per_class)?;
    let dataset = match args.split {
        SplitArg::Train => loaded.dataset.split(Split::Train),
        SplitArg::Val => loaded.dataset.split(Split::Val),
        SplitArg::Test => loaded.dataset.split(Split::Test),
        SplitArg::All => loaded.dataset,
    };
    if dataset.is_empty() {
        return Err(CliError::Data("selected split is empty".into()));
    }
    let report = evaluate(&model, &dataset)?;
    info!("acc_avg {:.4} acc_wg {:.4} over {} patches", report.acc_avg, report.acc_wg, dataset.len());
    write_json(&report, args.out.as_deref())
}

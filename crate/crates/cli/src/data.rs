//! Reading and writing images, budgets and datasets on disk.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use casa_core::calibration::StainBudget;
use casa_core::synth::{generate_dataset, Manifest, SynthConfig, SynthDataset};
use casa_core::trainer::{CenterInfo, Dataset, Patch};
use casa_core::RgbImage;
use serde::Serialize;
use walkdir::WalkDir;

use crate::error::{CliError, CliResult};

/// A PNG found under an input root, with its path relative to the root.
#[derive(Debug, Clone)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub relative: PathBuf,
}

impl ImageEntry {
    /// Relative path with `/` separators, used as a stable identifier.
    pub fn id(&self) -> String {
        self.relative.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    /// Class label taken from the parent directory name when it is `0` or `1`.
    pub fn label_from_parent(&self) -> Option<usize> {
        label_from_parent(&self.path)
    }
}

pub fn label_from_parent(path: &Path) -> Option<usize> {
    let name = path.parent()?.file_name()?.to_str()?;
    match name {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// A single PNG file, or every PNG below a directory in sorted path order.
pub fn list_pngs(root: &Path) -> CliResult<Vec<ImageEntry>> {
    if root.is_file() {
        let name = root.file_name().map(PathBuf::from).unwrap_or_default();
        return Ok(vec![ImageEntry { path: root.to_path_buf(), relative: name }]);
    }
    if !root.is_dir() {
        return Err(CliError::Io(format!("{} does not exist", root.display())));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry?;
        if entry.file_type().is_file() && is_png(entry.path()) {
            let relative = entry.path().strip_prefix(root).unwrap_or(entry.path()).to_path_buf();
            out.push(ImageEntry { path: entry.path().to_path_buf(), relative });
        }
    }
    Ok(out)
}

pub fn read_budget(path: &Path) -> CliResult<StainBudget> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let budget: StainBudget = serde_json::from_reader(BufReader::new(file))?;
    budget.validate()?;
    Ok(budget)
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Pretty JSON to `path`, or to standard output when `path` is `None`.
pub fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> CliResult<()> {
    match path {
        Some(path) => {
            ensure_parent(path)?;
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            serde_json::to_writer_pretty(&mut lock, value)?;
            writeln!(lock)?;
        }
    }
    Ok(())
}

pub fn save_png(image: &RgbImage, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    image.save_png(path)?;
    Ok(())
}

pub fn patch_path(root: &Path, center: u32, label: usize, index: usize) -> PathBuf {
    root.join(center.to_string()).join(label.to_string()).join(format!("{index}.png"))
}

/// Writes every patch of `synth` and its manifest below `root`.
pub fn write_synth(synth: &SynthDataset, config: &SynthConfig, root: &Path) -> CliResult<()> {
    let mut counters = std::collections::BTreeMap::new();
    for patch in synth.dataset.patches() {
        let n = counters.entry((patch.center, patch.label)).or_insert(0usize);
        save_png(&patch.image, &patch_path(root, patch.center, patch.label, *n))?;
        *n += 1;
    }
    write_json(&synth.manifest(config), Some(&root.join("manifest.json")))
}

fn index_of(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.parse().ok()
}

/// Loads a directory written by `generate`; patches keep the manifest's splits.
pub fn load_generated(root: &Path) -> CliResult<(Dataset, Manifest)> {
    let manifest_path = root.join("manifest.json");
    let file = File::open(&manifest_path).map_err(|e| CliError::Io(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(file))?;
    let mut patches = Vec::new();
    let mut centers = Vec::new();
    for center in &manifest.centers {
        centers.push(CenterInfo { id: center.center_id, split: center.split });
        for label in 0..2 {
            let dir = root.join(center.center_id.to_string()).join(label.to_string());
            let mut files: Vec<(usize, PathBuf)> = fs::read_dir(&dir)
                .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| is_png(p))
                .filter_map(|p| index_of(&p).map(|i| (i, p)))
                .collect();
            files.sort();
            for (_, path) in files {
                let image = RgbImage::load_png(&path)?;
                patches.push(Patch { image, label, center: center.center_id, truth: None });
            }
        }
    }
    Ok((Dataset::new(patches, centers)?, manifest))
}

/// A dataset read from `data`, or generated in memory from `seed`.
pub struct LoadedData {
    pub dataset: Dataset,
    /// Budget calibrated when the data was generated.
    pub budget: StainBudget,
}

pub fn load_or_generate(data: Option<&Path>, seed: u64, patches_per_class: Option<usize>) -> CliResult<LoadedData> {
    match data {
        Some(root) => {
            let (dataset, manifest) = load_generated(root)?;
            Ok(LoadedData { dataset, budget: manifest.budget })
        }
        None => {
            let mut config = SynthConfig { seed, ..SynthConfig::default() };
            if let Some(n) = patches_per_class {
                config.patches_per_class = n;
            }
            let synth = generate_dataset(&config)?;
            Ok(LoadedData { dataset: synth.dataset, budget: synth.budget })
        }
    }
}

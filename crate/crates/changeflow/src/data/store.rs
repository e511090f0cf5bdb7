//! On-disk dataset layout: `root/split/{a,b,flow,mask,valid,meta}/NNNNNN.*`
//! plus a `manifest.json` per split. Images are 8-bit PNG, flow is the
//! binary flow container, masks are {0, 255} grayscale PNG, and per-sample
//! metadata is a JSON sidecar.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{flo, png, toy, CorpusItem, SamplePair};
use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, DenseFlow, PerturbationParams, PerturbationRanges};
use crate::seeding;

pub const GENERATOR_VERSION: &str = "changeflow-data/1";

/// Per-sample JSON sidecar contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub transform: AffineTransform,
    pub params: PerturbationParams,
}

/// Split-relative file names of one sample.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SampleFiles {
    pub a: String,
    pub b: String,
    pub flow: String,
    pub mask: String,
    pub valid: String,
    pub meta: String,
}

impl SampleFiles {
    fn for_index(index: usize) -> Self {
        SampleFiles {
            a: format!("a/{index:06}.png"),
            b: format!("b/{index:06}.png"),
            flow: format!("flow/{index:06}.flo"),
            mask: format!("mask/{index:06}.png"),
            valid: format!("valid/{index:06}.png"),
            meta: format!("meta/{index:06}.json"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub params: PerturbationParams,
    pub files: SampleFiles,
}

/// Split-level index of everything generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub root: String,
    pub split: String,
    pub global_seed: u64,
    pub size: usize,
    pub ranges: PerturbationRanges,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(root: &Path, split: &str) -> PathBuf {
        root.join(split).join("manifest.json")
    }

    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let path = Self::path(root, split);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e.to_string()))?;
        Ok(manifest)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = Self::path(root, &self.split);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Verifies that every listed file exists and decodes to the split's
    /// declared dimensions.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for record in &self.records {
            let sample = read_sample(root, &self.split, record.index)?;
            sample.validate()?;
            if sample.height() != self.size || sample.width() != self.size {
                return Err(Error::validation(format!(
                    "sample {} is {}x{}, manifest says {}",
                    record.index,
                    sample.height(),
                    sample.width(),
                    self.size
                )));
            }
        }
        Ok(())
    }
}

fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Writes all six files of one sample and returns its manifest record.
pub fn write_sample(
    root: &Path,
    split: &str,
    index: usize,
    sample: &SamplePair,
) -> Result<SampleRecord> {
    sample.validate()?;
    let dir = split_dir(root, split);
    let files = SampleFiles::for_index(index);
    for sub in ["a", "b", "flow", "mask", "valid", "meta"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    png::write_rgb(&dir.join(&files.a), &sample.image_a)?;
    png::write_rgb(&dir.join(&files.b), &sample.image_b)?;
    flo::write_flo(&dir.join(&files.flow), &sample.flow_gt.u, &sample.flow_gt.v)?;
    png::write_mask(&dir.join(&files.mask), &sample.change_gt)?;
    png::write_mask(&dir.join(&files.valid), &sample.valid)?;
    let meta = SampleMeta {
        seed: sample.seed,
        transform: sample.transform,
        params: sample.params,
    };
    let meta_path = dir.join(&files.meta);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(SampleRecord {
        index,
        seed: sample.seed,
        params: meta.params,
        files,
    })
}

/// Reads one sample back; inverse of [`write_sample`] up to 8-bit image
/// quantization and f32 flow storage.
pub fn read_sample(root: &Path, split: &str, index: usize) -> Result<SamplePair> {
    let dir = split_dir(root, split);
    let files = SampleFiles::for_index(index);
    let image_a = png::read_rgb(&dir.join(&files.a))?;
    let image_b = png::read_rgb(&dir.join(&files.b))?;
    let (u, v) = flo::read_flo(&dir.join(&files.flow))?;
    let change_gt = png::read_mask(&dir.join(&files.mask))?;
    let valid = png::read_mask(&dir.join(&files.valid))?;
    let meta_path = dir.join(&files.meta);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta =
        serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e.to_string()))?;
    let flow_gt = DenseFlow::new(u, v, valid.clone())?;
    let sample = SamplePair {
        image_a,
        image_b,
        flow_gt,
        change_gt,
        valid,
        seed: meta.seed,
        transform: meta.transform,
        params: meta.params,
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads every sample of a split, in manifest order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<SamplePair>> {
    let manifest = DatasetManifest::load(root, split)?;
    manifest
        .records
        .iter()
        .map(|r| read_sample(root, split, r.index))
        .collect()
}

/// Generates one split from prepared corpus items: perturbs each item with
/// its own derived seed, writes all files, and saves the manifest.
pub fn generate_split(
    root: &Path,
    split: &str,
    global_seed: u64,
    size: usize,
    ranges: &PerturbationRanges,
    items: &[CorpusItem],
) -> Result<DatasetManifest> {
    ranges.validate()?;
    let mut records = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let pair_seed = seeding::derive_seed(global_seed, &format!("{split}/pair/{i}"));
        let sample = crate::data::generate_pair(
            &item.image_a,
            &item.image_b0,
            &item.change_mask,
            pair_seed,
            ranges,
        )?;
        records.push(write_sample(root, split, i, &sample)?);
    }
    let manifest = DatasetManifest {
        version: GENERATOR_VERSION.to_string(),
        root: root.display().to_string(),
        split: split.to_string(),
        global_seed,
        size,
        ranges: *ranges,
        records,
    };
    manifest.save(root)?;
    Ok(manifest)
}

/// Generates a toy split end to end: renders `n` scenes of side `size`, then
/// perturbs and writes them.
pub fn generate_toy_split(
    root: &Path,
    split: &str,
    n: usize,
    size: usize,
    global_seed: u64,
    ranges: &PerturbationRanges,
) -> Result<DatasetManifest> {
    let scene_seed = seeding::derive_seed(global_seed, &format!("{split}/scenes"));
    let items = toy::make_toy_corpus(n, size, scene_seed)?;
    generate_split(root, split, global_seed, size, ranges, &items)
}

/// Loads a directory corpus: `dir/a/*.png` (required), with optional
/// same-named partners under `dir/b0/` and change masks under `dir/mask/`.
/// Missing partners default to the reference image, missing masks to all
/// unchanged.
pub fn load_dir_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let a_dir = dir.join("a");
    let entries = fs::read_dir(&a_dir).map_err(|e| Error::io(&a_dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&a_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.insert(name);
        }
    }
    if names.is_empty() {
        return Err(Error::validation(format!(
            "no .png files under {}",
            a_dir.display()
        )));
    }
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let image_a = png::read_rgb(&a_dir.join(&name))?;
        let b0_path = dir.join("b0").join(&name);
        let image_b0 = if b0_path.exists() {
            png::read_rgb(&b0_path)?
        } else {
            image_a.clone()
        };
        let mask_path = dir.join("mask").join(&name);
        let change_mask = if mask_path.exists() {
            png::read_mask(&mask_path)?
        } else {
            ndarray::Array2::from_elem((image_a.dim().1, image_a.dim().2), false)
        };
        if image_b0.dim() != image_a.dim() || change_mask.dim() != (image_a.dim().1, image_a.dim().2)
        {
            return Err(Error::validation(format!(
                "corpus item {name} has inconsistent dimensions"
            )));
        }
        items.push(CorpusItem {
            image_a,
            image_b0,
            change_mask,
        });
    }
    Ok(items)
}

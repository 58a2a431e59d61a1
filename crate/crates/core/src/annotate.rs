//! Annotation and manifest emitters.
//!
//! Everything written here is deterministic: identical inputs give
//! byte-identical files. JSON goes through [`canonical_json`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compositor::{AnnotatedSample, Instance, SceneRecipe};
use crate::config::{canonical_hash, canonical_json, ToolConfig};
use crate::error::{Error, Result};
use crate::raster::{save_labels16, BoxAccumulator, Mask, PixelBox};

pub fn bbox_from_mask(mask: &Mask) -> Option<PixelBox> {
    let mut acc = BoxAccumulator::default();
    for (i, &v) in mask.data.iter().enumerate() {
        if v {
            acc.add(i as u32 % mask.width, i as u32 / mask.width);
        }
    }
    acc.finish()
}

/// Per-image annotation summary consumed by the emitters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_index: u64,
    pub image_file: String,
    pub mask_file: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<Instance>,
}

impl SampleRecord {
    pub fn from_sample(sample_index: u64, sample: &AnnotatedSample) -> Self {
        Self {
            sample_index,
            image_file: format!("images/{}", sample_file_name(sample_index, "png")),
            mask_file: format!("masks/{}", sample_file_name(sample_index, "png")),
            width: sample.image.width,
            height: sample.image.height,
            instances: sample.instances.clone(),
        }
    }
}

pub fn sample_file_name(sample_index: u64, ext: &str) -> String {
    format!("sample_{sample_index:08}.{ext}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`, pixel edges.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
    /// Extension: 16-bit instance mask holding this annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    /// Extension: value of this instance in `mask_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_value: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &canonical_json(self)?)
    }

    /// Keeps the listed images (in the given order) and their annotations.
    pub fn subset(&self, image_ids: &[u64]) -> CocoDataset {
        let keep: BTreeSet<u64> = image_ids.iter().copied().collect();
        let by_id: BTreeMap<u64, &CocoImage> = self.images.iter().map(|i| (i.id, i)).collect();
        CocoDataset {
            images: image_ids
                .iter()
                .filter_map(|id| by_id.get(id).map(|i| (*i).clone()))
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| keep.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn class_index(classes: &[String]) -> BTreeMap<&str, usize> {
    classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
}

fn lookup(index: &BTreeMap<&str, usize>, class: &str) -> Result<usize> {
    index
        .get(class)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("class `{class}` missing from the class list")))
}

/// Builds the COCO document. Instances with no visible pixels are left out.
pub fn build_coco(samples: &[SampleRecord], classes: &[String]) -> Result<CocoDataset> {
    let index = class_index(classes);
    let mut coco = CocoDataset {
        categories: classes
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory {
                id: i as u64 + 1,
                name: name.clone(),
            })
            .collect(),
        ..Default::default()
    };
    let mut ann_id = 0;
    for (img_i, s) in samples.iter().enumerate() {
        let image_id = img_i as u64 + 1;
        coco.images.push(CocoImage {
            id: image_id,
            file_name: s.image_file.clone(),
            width: s.width,
            height: s.height,
        });
        for (k, inst) in s.instances.iter().enumerate() {
            let Some(b) = inst.visible_box else { continue };
            ann_id += 1;
            coco.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: lookup(&index, &inst.class_label)? as u64 + 1,
                bbox: [
                    b.x_min as f64,
                    b.y_min as f64,
                    b.width() as f64,
                    b.height() as f64,
                ],
                area: inst.visible_pixels as f64,
                iscrowd: 0,
                mask_file: Some(s.mask_file.clone()),
                mask_value: Some(k as u16 + 1),
            });
        }
    }
    Ok(coco)
}

pub fn emit_coco(samples: &[SampleRecord], classes: &[String], path: &Path) -> Result<()> {
    build_coco(samples, classes)?.save(path)
}

/// YOLO label text for one image: `class cx cy w h`, normalized, visible box.
pub fn yolo_lines(sample: &SampleRecord, classes: &[String]) -> Result<String> {
    let index = class_index(classes);
    let (w, h) = (sample.width as f64, sample.height as f64);
    let mut out = String::new();
    for inst in &sample.instances {
        let Some(b) = inst.visible_box else { continue };
        let k = lookup(&index, &inst.class_label)?;
        let cx = (b.x_min as f64 + b.x_max as f64 + 1.0) / 2.0 / w;
        let cy = (b.y_min as f64 + b.y_max as f64 + 1.0) / 2.0 / h;
        writeln!(
            out,
            "{k} {cx:.6} {cy:.6} {:.6} {:.6}",
            b.width() as f64 / w,
            b.height() as f64 / h
        )
        .unwrap();
    }
    Ok(out)
}

pub fn emit_yolo(samples: &[SampleRecord], classes: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let path = dir.join(sample_file_name(s.sample_index, "txt"));
        write_text(&path, &yolo_lines(s, classes)?)?;
    }
    write_classes(classes, dir)
}

pub fn write_classes(classes: &[String], dir: &Path) -> Result<()> {
    let mut text = classes.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_text(&dir.join("classes.txt"), &text)
}

/// Writes the instance label map as a 16-bit PNG.
pub fn write_mask(sample: &AnnotatedSample, path: &Path) -> Result<()> {
    if sample.instances.len() > 65_534 {
        return Err(Error::Capacity(format!(
            "{} instances exceed the 16-bit mask range",
            sample.instances.len()
        )));
    }
    save_labels16(path, sample.image.width, sample.image.height, &sample.labels)
}

pub fn emit_masks(samples: &[(u64, &AnnotatedSample)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (index, s) in samples {
        write_mask(s, &dir.join(sample_file_name(*index, "png")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_index: u64,
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<SceneRecipe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_file: Option<String>,
    #[serde(default)]
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool_version: String,
    pub config: ToolConfig,
    pub config_hash: String,
    pub master_seed: u64,
    pub classes: Vec<String>,
    pub samples: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(config: ToolConfig, classes: Vec<String>, samples: Vec<ManifestRecord>) -> Result<Self> {
        Ok(Self {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_hash: canonical_hash(&config)?,
            master_seed: config.generation.master_seed,
            config,
            classes,
            samples,
        })
    }
}

pub fn emit_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    write_text(path, &canonical_json(manifest)?)
}

/// Loads a manifest, checking the config hash and sample-index uniqueness.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let hash = canonical_hash(&m.config)?;
    if hash != m.config_hash {
        return Err(Error::Integrity(format!(
            "config hash {hash} does not match recorded {}",
            m.config_hash
        )));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = m.samples.iter().find(|r| !seen.insert(r.sample_index)) {
        return Err(Error::Integrity(format!(
            "duplicate sample index {}",
            dup.sample_index
        )));
    }
    Ok(m)
}

//! Dataset generation driver: renders samples in parallel and writes images,
//! masks, COCO, YOLO and the reproducibility manifest.
//!
//! Output layout under the target directory:
//!
//! ```text
//! images/sample_00000000.png   composite, 8-bit RGB
//! masks/sample_00000000.png    16-bit instance labels (0 = background)
//! labels/sample_00000000.txt   YOLO boxes, plus labels/classes.txt
//! annotations.json             COCO
//! manifest.json                config, seeds and per-sample recipes
//! ```

use std::fs;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

use crate::annotate::{
    emit_coco, emit_manifest, emit_yolo, sample_file_name, write_mask, DatasetManifest,
    ManifestRecord, SampleRecord, SampleStatus,
};
use crate::assetlib::{load_library, AssetLibrary};
use crate::compositor::{load_backgrounds, render, sample_recipe, Background, SceneRecipe};
use crate::config::ToolConfig;
use crate::error::{Error, Result};

/// Minimum fraction of samples that must render for a run to count as successful.
pub const MIN_SUCCESS_RATE: f64 = 0.99;

/// Everything a render needs besides the recipe.
pub struct GenInputs {
    pub library: AssetLibrary,
    pub backgrounds: Vec<Background>,
    pub classes: Vec<String>,
}

impl GenInputs {
    pub fn load(config: &ToolConfig) -> Result<Self> {
        let assets = config
            .paths
            .assets
            .as_deref()
            .ok_or_else(|| Error::Config("paths.assets is required".into()))?;
        let backgrounds = config
            .paths
            .backgrounds
            .as_deref()
            .ok_or_else(|| Error::Config("paths.backgrounds is required".into()))?;
        let library = load_library(assets)?;
        let backgrounds = load_backgrounds(backgrounds)?;
        if backgrounds.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no background images in {}",
                config.paths.backgrounds.as_ref().unwrap().display()
            )));
        }
        let classes = if config.generation.classes.is_empty() {
            library.class_names().map(str::to_string).collect()
        } else {
            config.generation.classes.clone()
        };
        Ok(Self {
            library,
            backgrounds,
            classes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenSummary {
    pub requested: usize,
    pub succeeded: usize,
}

impl GenSummary {
    pub fn failed(&self) -> usize {
        self.requested - self.succeeded
    }

    pub fn acceptable(&self) -> bool {
        self.requested == 0 || self.succeeded as f64 >= MIN_SUCCESS_RATE * self.requested as f64
    }
}

/// What to do for one sample index.
#[derive(Debug, Clone)]
enum Job {
    Fresh(u64),
    Replay(SceneRecipe, u64),
    Keep(ManifestRecord),
}

/// Renders `count` fresh samples into `out` using `jobs` worker threads.
pub fn generate(
    config: &ToolConfig,
    inputs: &GenInputs,
    count: u64,
    out: &Path,
    jobs: usize,
) -> Result<GenSummary> {
    let plan = (0..count).map(Job::Fresh).collect();
    run(config, inputs, plan, out, jobs)
}

/// Re-renders every recorded recipe of `manifest` into `out`. Samples that
/// failed originally are carried over unchanged.
pub fn replay(manifest: &DatasetManifest, inputs: &GenInputs, out: &Path, jobs: usize) -> Result<GenSummary> {
    let plan = manifest
        .samples
        .iter()
        .map(|r| match &r.recipe {
            Some(recipe) => Job::Replay(recipe.clone(), r.sample_index),
            None => Job::Keep(r.clone()),
        })
        .collect();
    run(&manifest.config, inputs, plan, out, jobs)
}

fn run(config: &ToolConfig, inputs: &GenInputs, plan: Vec<Job>, out: &Path, jobs: usize) -> Result<GenSummary> {
    for sub in ["images", "masks"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let results: Vec<Result<(ManifestRecord, Option<SampleRecord>)>> =
        pool.install(|| plan.into_par_iter().map(|job| produce(config, inputs, job, out)).collect());

    let mut records = Vec::with_capacity(results.len());
    let mut samples = Vec::new();
    for r in results {
        let (record, sample) = r?;
        records.push(record);
        samples.extend(sample);
    }
    let summary = GenSummary {
        requested: records.len(),
        succeeded: samples.len(),
    };

    if config.emit.coco {
        emit_coco(&samples, &inputs.classes, &out.join("annotations.json"))?;
    }
    if config.emit.yolo {
        emit_yolo(&samples, &inputs.classes, &out.join("labels"))?;
    }
    let manifest = DatasetManifest::new(config.clone(), inputs.classes.clone(), records)?;
    emit_manifest(&manifest, &out.join("manifest.json"))?;
    info!(
        "{} of {} samples rendered into {}",
        summary.succeeded,
        summary.requested,
        out.display()
    );
    Ok(summary)
}

/// Renders and writes one sample. Per-sample generation errors become failed
/// manifest records; write errors abort the run.
fn produce(
    config: &ToolConfig,
    inputs: &GenInputs,
    job: Job,
    out: &Path,
) -> Result<(ManifestRecord, Option<SampleRecord>)> {
    let gen = &config.generation;
    let (index, recipe) = match job {
        Job::Keep(record) => return Ok((record, None)),
        Job::Replay(recipe, index) => (index, Ok(recipe)),
        Job::Fresh(index) => (
            index,
            sample_recipe(gen, &inputs.backgrounds, &inputs.library, index),
        ),
    };
    let failed = |error: Error, recipe: Option<SceneRecipe>| {
        warn!("sample {index} failed: {error}");
        ManifestRecord {
            sample_index: index,
            status: SampleStatus::Failed,
            error: Some(error.to_string()),
            recipe,
            output_file: None,
            instances: Vec::new(),
        }
    };
    let recipe = match recipe {
        Ok(r) => r,
        Err(e) => return Ok((failed(e, None), None)),
    };
    let sample = match render(&recipe, gen, &inputs.library, &inputs.backgrounds) {
        Ok(s) => s,
        Err(e) => return Ok((failed(e, Some(recipe)), None)),
    };

    let record = SampleRecord::from_sample(index, &sample);
    sample.image.save_png8(&out.join(&record.image_file))?;
    if config.emit.masks {
        write_mask(&sample, &out.join("masks").join(sample_file_name(index, "png")))?;
    }
    let manifest_record = ManifestRecord {
        sample_index: index,
        status: SampleStatus::Ok,
        error: None,
        recipe: Some(sample.recipe),
        output_file: Some(record.image_file.clone()),
        instances: sample.instances,
    };
    Ok((manifest_record, Some(record)))
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use synthforge::annotate::{load_manifest, CocoDataset};
use synthforge::assetlib::{
    export_heatmap, load_library, replace_asset, viewing_histogram, AssetSource, AssetView,
};
use synthforge::config::{canonical_json, ToolConfig};
use synthforge::error::exit;
use synthforge::keyer::{extract_asset, KeyerParams};
use synthforge::metrics::{evaluate_detection, BoxF, Detection, SegCounts};
use synthforge::mocap::{
    angular_speed_signal, frame_motion_signal, interpolate_pose, parse_pose_track, relative_pose,
    sync_offset, viewing_sample, Signal, Subject,
};
use synthforge::pipeline::{self, GenInputs};
use synthforge::raster::{list_images, Mask, Rgb};
use synthforge::sampler::{select_nshot_indices, split_indices, LabeledSet};
use synthforge::{Error, Result};

/// Green-screen keying, synthetic dataset generation and evaluation.
#[derive(Parser)]
#[command(name = "synthforge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Key green-screen frames into a foreground asset library.
    Key(KeyArgs),
    /// Estimate the time offset between a pose track and a frame sequence.
    Sync(SyncArgs),
    /// Write a viewing-direction heatmap for one class of a library.
    Stats(StatsArgs),
    /// Render a synthetic dataset with images, masks, COCO, YOLO and a manifest.
    Generate(GenerateArgs),
    /// Select an N-shot subset of a COCO dataset.
    Nshot(NshotArgs),
    /// Split a COCO dataset into train and validation parts.
    Split(SplitArgs),
    /// Score detection predictions (or segmentation masks with --seg).
    Eval(EvalArgs),
}

#[derive(Args)]
struct KeyArgs {
    /// Directory of green-screen frames (PNG or JPEG, processed in name order).
    #[arg(long)]
    frames: PathBuf,
    /// Asset library root to write into.
    #[arg(long)]
    out: PathBuf,
    /// Class label for every extracted asset.
    #[arg(long)]
    class: String,
    /// Object pose track CSV.
    #[arg(long, requires_all = ["camera", "offset"])]
    pose: Option<PathBuf>,
    /// Camera pose track CSV.
    #[arg(long, requires = "pose")]
    camera: Option<PathBuf>,
    /// Mocap time minus video time, in seconds (as printed by `sync`).
    #[arg(long, requires = "pose", allow_hyphen_values = true)]
    offset: Option<f64>,
    /// Frame rate of the sequence, used to timestamp frames for pose lookup.
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// JSON config file; only its `keyer` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SyncArgs {
    /// Pose track CSV of the moving rig (camera).
    #[arg(long)]
    pose: PathBuf,
    /// Directory of video frames.
    #[arg(long)]
    frames: PathBuf,
    /// Video frame rate.
    #[arg(long)]
    fps: f64,
    /// Largest offset magnitude to search, in seconds.
    #[arg(long, default_value_t = 10.0)]
    window: f64,
}

#[derive(Args)]
struct StatsArgs {
    /// Asset library root.
    #[arg(long)]
    lib: PathBuf,
    /// Class to summarize.
    #[arg(long)]
    class: String,
    /// Output heatmap PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON config file.
    #[arg(long, required_unless_present = "replay")]
    config: Option<PathBuf>,
    /// Number of samples to render.
    #[arg(long, required_unless_present = "replay")]
    count: Option<u64>,
    /// Output directory (default: `paths.output` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override `generation.master_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Re-render the recipes of an existing manifest instead of sampling new ones.
    #[arg(long, conflicts_with_all = ["config", "count", "seed"])]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct NshotArgs {
    /// Input COCO annotations.
    #[arg(long)]
    coco: PathBuf,
    /// Minimum instances per class.
    #[arg(long)]
    n: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output COCO annotations.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Input COCO annotations.
    #[arg(long)]
    coco: PathBuf,
    /// Train:validation ratio.
    #[arg(long, default_value = "5:1")]
    ratio: String,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `train.json` and `val.json` (default: next to the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions: JSON lines `{image, class, box, confidence}`, or a directory
    /// of YOLO text files with a trailing confidence column. With --seg, a mask
    /// PNG or a directory of them.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth: COCO annotations, or with --seg a mask PNG or directory.
    #[arg(long)]
    gt: PathBuf,
    /// IoU threshold for a true positive.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Confidence threshold for precision, recall and F1.
    #[arg(long, default_value_t = 0.5)]
    conf: f64,
    /// Score binary segmentation masks instead of boxes.
    #[arg(long)]
    seg: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SYNTHFORGE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Key(a) => cmd_key(a),
        Command::Sync(a) => cmd_sync(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Nshot(a) => cmd_nshot(a),
        Command::Split(a) => cmd_split(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let jobs = jobs.unwrap_or_else(default_jobs).max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn cmd_key(a: KeyArgs) -> Result<()> {
    let params = match &a.config {
        Some(p) => ToolConfig::load(p)?.keyer,
        None => KeyerParams::default(),
    };
    if !(a.fps > 0.0) {
        return Err(Error::Config(format!("--fps must be positive, got {}", a.fps)));
    }
    let tracks = match (&a.pose, &a.camera) {
        (Some(obj), Some(cam)) => Some((
            parse_pose_track(obj, Subject::Object)?,
            parse_pose_track(cam, Subject::Camera)?,
        )),
        _ => None,
    };
    let offset = a.offset.unwrap_or(0.0);
    let frames = list_images(&a.frames)?;
    let video = a
        .frames
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();

    let extract = |(i, path): (usize, &PathBuf)| -> Result<Option<synthforge::assetlib::ForegroundAsset>> {
        let frame = Rgb::load(path)?;
        let view = match &tracks {
            Some((obj, cam)) => {
                let t = i as f64 / a.fps + offset;
                let poses = interpolate_pose(cam, t).and_then(|c| Ok((c, interpolate_pose(obj, t)?)));
                match poses
                    .and_then(|(c, o)| relative_pose(&c, &o))
                    .and_then(|rel| viewing_sample(&rel, i as u64))
                {
                    Ok(vs) => Some(AssetView::from(&vs)),
                    Err(e) => {
                        warn!("frame {i}: no viewpoint ({e})");
                        None
                    }
                }
            }
            None => None,
        };
        let source = AssetSource {
            video: video.clone(),
            frame: i as u64,
        };
        match extract_asset(&frame, &params, &a.class, view, source) {
            Ok(asset) => Ok(Some(asset)),
            Err(Error::EmptyForeground) => {
                info!("{}: no foreground", path.display());
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let assets: Vec<_> = thread_pool(a.jobs)?.install(|| {
        frames
            .par_iter()
            .enumerate()
            .map(extract)
            .collect::<Result<Vec<_>>>()
    })?;

    let mut stored = 0usize;
    let mut with_view = 0usize;
    for asset in assets.into_iter().flatten() {
        replace_asset(&a.out, &asset)?;
        stored += 1;
        with_view += asset.view.is_some() as usize;
    }
    println!(
        "{}",
        serde_json::json!({"frames": frames.len(), "assets": stored, "with_view": with_view})
    );
    if stored == 0 {
        return Err(Error::EmptyForeground);
    }
    Ok(())
}

fn cmd_sync(a: SyncArgs) -> Result<()> {
    if !(a.fps > 0.0) || !(a.window > 0.0) {
        return Err(Error::Config("--fps and --window must be positive".into()));
    }
    let track = parse_pose_track(&a.pose, Subject::Camera)?;
    let mocap = angular_speed_signal(&track, track.rate)?;
    let frames = list_images(&a.frames)?;
    let video = Signal::from_frame_motion(frame_motion_signal(&frames)?, a.fps);
    let result = sync_offset(&mocap, &video, a.window)?;
    if let Some(w) = &result.warning {
        warn!("{w}");
    }
    print!("{}", canonical_json(&result)?);
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let lib = load_library(&a.lib)?;
    let hist = viewing_histogram(&lib, &a.class)?;
    export_heatmap(&hist, &a.out)?;
    let occupied = hist.counts.iter().filter(|&&c| c > 0).count();
    println!(
        "{}",
        serde_json::json!({
            "class": a.class,
            "views": hist.total(),
            "without_view": hist.excluded,
            "occupied_bins": occupied,
            "bins": hist.counts.len(),
        })
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let jobs = a.jobs.unwrap_or_else(default_jobs);
    let summary = if let Some(manifest_path) = &a.replay {
        let manifest = load_manifest(manifest_path)?;
        let out = a
            .out
            .clone()
            .or_else(|| manifest.config.paths.output.clone())
            .ok_or_else(|| Error::Config("--out is required".into()))?;
        let inputs = GenInputs::load(&manifest.config)?;
        pipeline::replay(&manifest, &inputs, &out, jobs)?
    } else {
        let mut cfg = ToolConfig::load(a.config.as_deref().expect("required by clap"))?;
        if let Some(seed) = a.seed {
            cfg.generation.master_seed = seed;
        }
        let out = a
            .out
            .clone()
            .or_else(|| cfg.paths.output.clone())
            .ok_or_else(|| Error::Config("--out or paths.output is required".into()))?;
        let inputs = GenInputs::load(&cfg)?;
        pipeline::generate(&cfg, &inputs, a.count.expect("required by clap"), &out, jobs)?
    };
    println!(
        "{}",
        serde_json::json!({"requested": summary.requested, "succeeded": summary.succeeded, "failed": summary.failed()})
    );
    if !summary.acceptable() {
        return Err(Error::GenerationFailure(format!(
            "{} of {} samples failed",
            summary.failed(),
            summary.requested
        )));
    }
    Ok(())
}

fn cmd_nshot(a: NshotArgs) -> Result<()> {
    let coco = CocoDataset::load(&a.coco)?;
    let set = LabeledSet::from_coco(&coco)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let picked = select_nshot_indices(&set, a.n, &mut rng)?;
    let ids: Vec<u64> = picked.iter().map(|&i| set.images[i].id).collect();
    coco.subset(&ids).save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({"images": ids.len(), "class_counts": set.select(&picked).class_counts()})
    );
    Ok(())
}

fn parse_ratio(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("ratio `{s}` is not of the form TRAIN:VAL"));
    let (t, v) = s.split_once(':').ok_or_else(bad)?;
    Ok((t.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let (rt, rv) = parse_ratio(&a.ratio)?;
    let coco = CocoDataset::load(&a.coco)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (train, val) = split_indices(coco.images.len(), rt, rv, &mut rng)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.coco.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| coco.images[i].id).collect::<Vec<_>>();
    coco.subset(&ids(&train)).save(&out.join("train.json"))?;
    coco.subset(&ids(&val)).save(&out.join("val.json"))?;
    println!("{}", serde_json::json!({"train": train.len(), "val": val.len()}));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.seg {
        return eval_segmentation(&a);
    }
    let coco = CocoDataset::load(&a.gt)?;
    let gts = LabeledSet::from_coco(&coco)?;
    let preds = if a.pred.is_dir() {
        read_yolo_predictions(&a.pred, &coco, &gts.classes)?
    } else {
        read_jsonl_predictions(&a.pred)?
    };
    let report = evaluate_detection(&preds, &gts, a.iou, a.conf);
    print!("{}", report.table());
    if let Some(p) = &a.json {
        write_file(p, &canonical_json(&report)?)?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_jsonl_predictions(path: &Path) -> Result<Vec<Detection>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !d.bbox.is_valid() {
            return Err(Error::InvalidInput(format!(
                "{}:{}: degenerate box",
                path.display(),
                n + 1
            )));
        }
        out.push(d);
    }
    Ok(out)
}

/// YOLO files `<image stem>.txt` with lines `class cx cy w h confidence`,
/// normalized to the image size recorded in the ground truth.
fn read_yolo_predictions(dir: &Path, coco: &CocoDataset, classes: &[String]) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for img in &coco.images {
        let stem = Path::new(&img.file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let path = dir.join(format!("{stem}.txt"));
        if !path.exists() {
            continue;
        }
        let (w, h) = (img.width as f64, img.height as f64);
        for (n, line) in read_to_string(&path)?.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("{}:{}: expected `class cx cy w h conf`", path.display(), n + 1));
            if fields.len() != 6 {
                return Err(bad());
            }
            let k: usize = fields[0].parse().map_err(|_| bad())?;
            let v: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let class = classes.get(k).ok_or_else(bad)?;
            let (cx, cy, bw, bh) = (v[0] * w, v[1] * h, v[2] * w, v[3] * h);
            out.push(Detection {
                image: img.file_name.clone(),
                class: class.clone(),
                bbox: BoxF::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0),
                confidence: v[4],
            });
        }
    }
    Ok(out)
}

fn eval_segmentation(a: &EvalArgs) -> Result<()> {
    let pairs: Vec<(PathBuf, PathBuf)> = if a.gt.is_dir() {
        list_images(&a.gt)?
            .into_iter()
            .map(|g| (a.pred.join(g.file_name().unwrap()), g))
            .collect()
    } else {
        vec![(a.pred.clone(), a.gt.clone())]
    };
    let mut total = SegCounts::default();
    for (p, g) in &pairs {
        total.add(&SegCounts::from_masks(&Mask::load(p)?, &Mask::load(g)?)?);
    }
    let report = total.report();
    print!("{}", report.table());
    if let Some(p) = &a.json {
        write_file(p, &canonical_json(&report)?)?;
    }
    Ok(())
}

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use synthforge::assetlib::{store_asset, AssetSource, AssetView, ForegroundAsset};
use synthforge::compositor::{CountRange, InplaneRotation};
use synthforge::config::ToolConfig;
use synthforge::raster::{Rgb, Rgba};

pub const CLASSES: [&str; 2] = ["drone", "quad"];

/// Soft-edged ellipse with a color gradient, straight alpha.
pub fn ellipse_asset(w: u32, h: u32, tint: [f32; 3]) -> Rgba {
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let dx = (x as f32 + 0.5 - cx) / cx;
            let dy = (y as f32 + 0.5 - cy) / cy;
            let r = (dx * dx + dy * dy).sqrt();
            let a = ((1.0 - r) * 12.0).clamp(0.0, 1.0);
            let shade = 0.6 + 0.4 * (x as f32 / w as f32);
            [tint[0] * shade, tint[1] * shade, tint[2] * shade, a]
        })
        .collect();
    Rgba::from_vec(w, h, data).unwrap().quantized16()
}

pub fn background(w: u32, h: u32, seed: u32) -> Rgb {
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let checker = ((x / 16 + y / 16 + seed) % 2) as f32 * 0.1;
            [
                0.2 + 0.5 * x as f32 / w as f32 + checker,
                0.3 + 0.4 * y as f32 / h as f32,
                0.5 - checker,
            ]
        })
        .collect();
    Rgb::from_vec(w, h, data).unwrap()
}

/// Writes an asset library (three assets per class, with views) and two
/// backgrounds under `root`, and returns a config pointing at them.
pub fn dataset_fixture(root: &Path, bg_w: u32, bg_h: u32) -> ToolConfig {
    let assets = root.join("assets");
    let bgs = root.join("backgrounds");
    fs::create_dir_all(&bgs).unwrap();
    for (i, class) in CLASSES.iter().enumerate() {
        for j in 0..3u32 {
            let tint = if i == 0 { [0.9, 0.3, 0.2] } else { [0.2, 0.4, 0.9] };
            let theta = j as f64 * 1.3 + i as f64;
            let asset = ForegroundAsset {
                id: format!("{class}_{j}"),
                class_label: class.to_string(),
                rgba: ellipse_asset(180 + 30 * j, 140 + 20 * j, tint),
                view: Some(AssetView {
                    v: [theta.cos(), theta.sin(), 0.0],
                    depth_m: 2.0 + j as f64,
                }),
                source: AssetSource {
                    video: format!("{class}_take"),
                    frame: j as u64,
                },
            };
            store_asset(&assets, &asset).unwrap();
        }
    }
    for s in 0..2 {
        background(bg_w, bg_h, s)
            .save_png8(&bgs.join(format!("bg_{s}.png")))
            .unwrap();
    }
    let mut cfg = ToolConfig::default();
    cfg.paths.assets = Some(assets);
    cfg.paths.backgrounds = Some(bgs);
    cfg.generation.objects_per_image = CountRange { min: 1, max: 4 };
    cfg.generation.inplane_rotation = InplaneRotation::Uniform;
    cfg.generation.master_seed = 20_240_501;
    cfg
}

pub fn write_config(cfg: &ToolConfig, path: &Path) {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_synthforge"))
}

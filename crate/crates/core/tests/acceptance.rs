//! Acceptance checks, one line per criterion. Exits non-zero if any check fails.
//!
//! Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use synthforge::annotate::{load_manifest, CocoDataset, SampleStatus};
use synthforge::assetlib::{
    sample_asset, AssetLibrary, AssetSource, AssetView, ForegroundAsset, SamplingStrategy,
    SphereGrid,
};
use synthforge::compositor::{
    poisson_blend, render, sample_recipe, Background, BlendMode, CountRange, InplaneRotation,
    PoissonParams,
};
use synthforge::geometry::Quat;
use synthforge::keyer::{compute_alpha, despill, extract_asset, KeyerParams};
use synthforge::metrics::{average_precision, box_iou, evaluate_detection, evaluate_segmentation, BoxF, Detection};
use synthforge::mocap::{
    angular_speed_signal, frame_motion_from_rasters, sync_offset, Pose, PoseTrack, Signal, Subject,
};
use synthforge::pipeline::{self, GenInputs};
use synthforge::raster::{load_labels16, Mask, Rgb, Rgba};
use synthforge::sampler::{select_nshot, split_indices, LabeledImage, LabeledInstance, LabeledSet};

// Pinned tolerances and budgets.
const KEYER_ALPHA_MAE: f64 = 0.02;
const KEYER_BUDGET: Duration = Duration::from_secs(10);
const BRIGHTNESS_REL_TOL: f64 = 0.02;
const POISSON_TOL: f64 = 1e-7;
const POISSON_STRIP_TOL: f64 = 1e-6;
const POISSON_BUDGET: Duration = Duration::from_secs(30);
const ANNOTATION_SAMPLES: u64 = 1_000;
const ANNOTATION_BUDGET: Duration = Duration::from_secs(120);
const SYNC_TRIALS: usize = 100;
const SYNC_REQUIRED: usize = 99;
const CHI2_QUANTILE: f64 = 0.999;
const VIEW_FREQ_TOL: f64 = 0.05;
const METRIC_TRIALS: usize = 1_000;
const MIN_THROUGHPUT: f64 = 50.0;
const SPEEDUP_WORKERS: usize = 4;
const SPEEDUP_SLACK: f64 = 0.30;

enum Verdict {
    Pass,
    Fail,
    /// The host cannot exercise the check.
    Unverified,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("keyer round trip", keyer_round_trip),
        ("inverse-square brightness", inverse_square),
        ("poisson blender", poisson_checks),
        ("annotation consistency", annotation_consistency),
        ("determinism", determinism),
        ("sync recovery", sync_recovery),
        ("viewpoint tooling", viewpoint_tooling),
        ("n-shot protocol", nshot_protocol),
        ("metrics oracle equivalence", metrics_oracle),
        ("throughput", throughput),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = match result.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Unverified => "UNVERIFIED",
        };
        println!(
            "criterion {:>2} {tag:<10} {name}: {} [{:.1}s]",
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

/// 50 opaque, non-green patches over pure green.
fn keyer_round_trip() -> Outcome {
    let start = Instant::now();
    let (w, h) = (256u32, 256u32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut frame = Rgb::new(w, h, [0.0, 1.0, 0.0]);
    let mut truth = vec![0f32; (w * h) as usize];
    for _ in 0..50 {
        let (pw, ph) = (rng.gen_range(4..40), rng.gen_range(4..40));
        let (x0, y0) = (rng.gen_range(0..w - pw), rng.gen_range(0..h - ph));
        // 8-bit levels; green at most the larger of red and blue
        let r = rng.gen_range(0..=255u32);
        let b = rng.gen_range(0..=255u32);
        let g = rng.gen_range(0..=r.max(b));
        let px = [r, g, b].map(|v| v as f32 / 255.0);
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                frame.set(x, y, px);
                truth[(y * w + x) as usize] = 1.0;
            }
        }
    }
    let params = KeyerParams {
        min_component_area: 1,
        ..KeyerParams::default()
    };
    let matte = compute_alpha(&frame, &params).unwrap();
    let mae = matte
        .values
        .iter()
        .zip(&truth)
        .map(|(a, t)| (a - t).abs() as f64)
        .sum::<f64>()
        / truth.len() as f64;
    let clean = despill(&frame, &matte).unwrap();
    let asset = extract_asset(&frame, &params, "patch", None, AssetSource::default()).unwrap();

    // the asset is cropped to the union of patches; locate its origin
    let x_min = (0..w).find(|&x| (0..h).any(|y| truth[(y * w + x) as usize] == 1.0)).unwrap();
    let y_min = (0..h).find(|&y| (0..w).any(|x| truth[(y * w + x) as usize] == 1.0)).unwrap();
    let mut rgb_mismatch = 0;
    for y in 0..h {
        for x in 0..w {
            if truth[(y * w + x) as usize] == 1.0 {
                let want = frame.get(x, y);
                let got = asset.rgba.get(x - x_min, y - y_min);
                if clean.get(x, y) != want || got[..3] != want || got[3] != 1.0 {
                    rgb_mismatch += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mae <= KEYER_ALPHA_MAE && rgb_mismatch == 0 && elapsed < KEYER_BUDGET,
        format!(
            "alpha MAE {mae:.5} (<= {KEYER_ALPHA_MAE}), {rgb_mismatch} RGB mismatches at alpha 1, {:.2}s (< {}s)",
            elapsed.as_secs_f64(),
            KEYER_BUDGET.as_secs()
        ),
    )
}

/// Mean luminance of the rendered object over pixels at least 3 px inside its mask.
fn interior_luminance(image: &Rgb, labels: &[u16]) -> f64 {
    let (w, h) = (image.width as i64, image.height as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && labels[(y * w + x) as usize] == 1;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if (-3..=3).all(|d| inside(x + d, y) && inside(x, y + d)) {
                let p = image.get(x as u32, y as u32);
                sum += (0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]) as f64;
                n += 1;
            }
        }
    }
    assert!(n > 0);
    sum / n as f64
}

fn inverse_square() -> Outcome {
    let s_ref = 0.30;
    let library = AssetLibrary::from_assets([ForegroundAsset {
        id: "gray".into(),
        class_label: "obj".into(),
        rgba: Rgba::new(200, 200, [0.5, 0.5, 0.5, 1.0]),
        view: None,
        source: AssetSource::default(),
    }]);
    let backgrounds = vec![Background {
        name: "black".into(),
        image: Rgb::new(160, 160, [0.0; 3]),
    }];
    let mut lum = Vec::new();
    for s in [0.30, 0.25, 0.20, 0.15] {
        let mut cfg = synthforge::compositor::GenConfig {
            scale_min: s,
            scale_max: s,
            s_ref: Some(s_ref),
            brightness_floor: 0.1,
            objects_per_image: CountRange { min: 1, max: 1 },
            inplane_rotation: InplaneRotation::Off,
            ..Default::default()
        };
        cfg.blend = BlendMode::Feather { sigma: 1.0 };
        let recipe = sample_recipe(&cfg, &backgrounds, &library, 0).unwrap();
        let sample = render(&recipe, &cfg, &library, &backgrounds).unwrap();
        lum.push((s, interior_luminance(&sample.image, &sample.labels)));
    }
    let base = lum[0].1;
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for &(s, l) in &lum {
        let want = (s / s_ref).powi(2);
        let got = l / base;
        worst = worst.max((got / want - 1.0).abs());
        detail.push(format!("s={s:.2}: {got:.4} vs {want:.4}"));
    }
    let monotone = lum.windows(2).all(|p| p[0].1 > p[1].1);
    outcome(
        worst <= BRIGHTNESS_REL_TOL && monotone,
        format!(
            "{}; worst rel err {worst:.4} (<= {BRIGHTNESS_REL_TOL}), monotone {monotone}",
            detail.join(", ")
        ),
    )
}

fn noise_bg(w: u32, h: u32, seed: u64) -> Rgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h)
        .map(|_| [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)])
        .collect();
    Rgb::from_vec(w, h, data).unwrap()
}

/// Thomas algorithm for `4 f_i - f_{i-1} - f_{i+1} = d_i`.
fn tridiagonal(d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let (mut c, mut e) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let denom = 4.0 + if i > 0 { c[i - 1] } else { 0.0 };
        c[i] = -1.0 / denom;
        e[i] = (d[i] + if i > 0 { e[i - 1] } else { 0.0 }) / denom;
    }
    let mut f = vec![0.0; n];
    for i in (0..n).rev() {
        f[i] = e[i] - c[i] * if i + 1 < n { f[i + 1] } else { 0.0 };
    }
    f
}

fn poisson_checks() -> Outcome {
    let start = Instant::now();
    let (w, h) = (256u32, 256u32);
    let bg0 = noise_bg(w, h, 3);

    // (a) foreground cut from the background itself
    let origin = (28i64, 28i64);
    let patch: Vec<[f32; 4]> = (0..200u32)
        .flat_map(|y| (0..200u32).map(move |x| (x, y)))
        .map(|(x, y)| {
            let p = bg0.get(x + 28, y + 28);
            [p[0], p[1], p[2], 1.0]
        })
        .collect();
    let fg = Rgba::from_vec(200, 200, patch).unwrap();
    let mut bg = bg0.clone();
    poisson_blend(&mut bg, &fg, origin, &PoissonParams::default(), 0.5).unwrap();
    let identical = bg == bg0;

    // (b) constant source (zero guidance) inside a transparent ring
    let params = PoissonParams {
        mixed_gradients: false,
        tol: POISSON_TOL,
        max_iter: 100_000,
    };
    let (fw, fh) = (202u32, 202u32);
    let data = (0..fh)
        .flat_map(|y| (0..fw).map(move |x| (x, y)))
        .map(|(x, y)| {
            let a = if x == 0 || y == 0 || x == fw - 1 || y == fh - 1 { 0.0 } else { 1.0 };
            [0.7, 0.2, 0.4, a]
        })
        .collect();
    let ring = Rgba::from_vec(fw, fh, data).unwrap();
    let origin = (27i64, 27i64);
    let mut bg = bg0.clone();
    let report = poisson_blend(&mut bg, &ring, origin, &params, 0.5).unwrap();
    let region = |x: i64, y: i64| (28..228).contains(&x) && (28..228).contains(&y);
    let mut lo = [f64::MAX; 3];
    let mut hi = [f64::MIN; 3];
    for y in 27..229i64 {
        for x in 27..229i64 {
            if !region(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| region(x + dx, y + dy)) {
                let p = bg0.get(x as u32, y as u32);
                for c in 0..3 {
                    lo[c] = lo[c].min(p[c] as f64);
                    hi[c] = hi[c].max(p[c] as f64);
                }
            }
        }
    }
    let mut max_principle = true;
    let mut max_lap: f64 = 0.0;
    for y in 28..228i64 {
        for x in 28..228i64 {
            let f = |x: i64, y: i64| bg.get(x as u32, y as u32).map(|v| v as f64);
            let p = f(x, y);
            for c in 0..3 {
                max_principle &= p[c] >= lo[c] - 1e-7 && p[c] <= hi[c] + 1e-7;
                let lap = f(x - 1, y)[c] + f(x + 1, y)[c] + f(x, y - 1)[c] + f(x, y + 1)[c] - 4.0 * p[c];
                max_lap = max_lap.max(lap.abs());
            }
        }
    }
    // pixels are stored as f32; allow its rounding on top of the solver tolerance
    let lap_ok = max_lap <= 10.0 * POISSON_TOL + 8.0 * f32::EPSILON as f64;

    // (c) 1 x N strip against a direct tridiagonal solve
    let n = 64u32;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let src: Vec<[f32; 3]> = (0..n + 2)
        .map(|_| [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)])
        .collect();
    let strip_data = (0..3u32)
        .flat_map(|y| (0..n + 2).map(move |x| (x, y)))
        .map(|(x, y)| {
            let a = if y == 1 && x >= 1 && x <= n { 1.0 } else { 0.0 };
            let s = src[x as usize];
            let t = y as f32 * 0.05;
            [s[0] + t, s[1] - t, s[2], a]
        })
        .collect::<Vec<_>>();
    let strip = Rgba::from_vec(n + 2, 3, strip_data.clone()).unwrap();
    let strip_bg = noise_bg(n + 10, 9, 5);
    let sorigin = (3i64, 3i64);
    let mut out = strip_bg.clone();
    let strip_params = PoissonParams {
        mixed_gradients: false,
        tol: 1e-12,
        max_iter: 100_000,
    };
    poisson_blend(&mut out, &strip, sorigin, &strip_params, 0.5).unwrap();
    let mut strip_err: f64 = 0.0;
    for c in 0..3 {
        let fgv = |x: u32, y: u32| strip_data[(y * (n + 2) + x) as usize][c] as f64;
        let bgv = |x: u32, y: u32| strip_bg.get(x + 3, y + 3)[c] as f64;
        let d: Vec<f64> = (1..=n)
            .map(|x| {
                let mut rhs = bgv(x, 0) + bgv(x, 2);
                for (nx, ny) in [(x - 1, 1), (x + 1, 1), (x, 0), (x, 2)] {
                    rhs += fgv(x, 1) - fgv(nx, ny);
                }
                if x == 1 {
                    rhs += bgv(0, 1);
                }
                if x == n {
                    rhs += bgv(n + 1, 1);
                }
                rhs
            })
            .collect();
        let exact = tridiagonal(&d);
        for (i, v) in exact.iter().enumerate() {
            let got = out.get(4 + i as u32, 4)[c] as f64;
            strip_err = strip_err.max((got - v.clamp(0.0, 1.0)).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        identical && max_principle && lap_ok && strip_err <= POISSON_STRIP_TOL && elapsed < POISSON_BUDGET,
        format!(
            "(a) bit-identical {identical}; (b) max principle {max_principle}, max |lap| {max_lap:.2e} after {} iters; (c) strip err {strip_err:.2e} (<= {POISSON_STRIP_TOL}); {:.2}s (< {}s)",
            report.iterations,
            elapsed.as_secs_f64(),
            POISSON_BUDGET.as_secs()
        ),
    )
}

fn tight_boxes(labels: &[u16], w: u32) -> BTreeMap<u16, ([u32; 4], u64)> {
    let mut out: BTreeMap<u16, ([u32; 4], u64)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = (i as u32 % w, i as u32 / w);
        let e = out.entry(l).or_insert(([x, y, x, y], 0));
        e.0 = [e.0[0].min(x), e.0[1].min(y), e.0[2].max(x), e.0[3].max(y)];
        e.1 += 1;
    }
    out
}

fn annotation_consistency() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::dataset_fixture(tmp.path(), 640, 480);
    let inputs = GenInputs::load(&cfg).unwrap();
    let out = tmp.path().join("out");
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let summary = pipeline::generate(&cfg, &inputs, ANNOTATION_SAMPLES, &out, jobs).unwrap();

    let manifest = load_manifest(&out.join("manifest.json")).unwrap();
    let coco = CocoDataset::load(&out.join("annotations.json")).unwrap();
    let mut by_file: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    let image_file: BTreeMap<u64, &str> = coco.images.iter().map(|i| (i.id, i.file_name.as_str())).collect();
    for a in &coco.annotations {
        by_file.entry(image_file[&a.image_id]).or_default().push(a);
    }
    let (mut checked, mut mismatches) = (0usize, 0usize);
    for rec in manifest.samples.iter().filter(|r| r.status == SampleStatus::Ok) {
        let mask_path = out.join("masks").join(format!("sample_{:08}.png", rec.sample_index));
        let (w, _, labels) = load_labels16(&mask_path).unwrap();
        let truth = tight_boxes(&labels, w);
        for (k, inst) in rec.instances.iter().enumerate() {
            let id = k as u16 + 1;
            let recomputed = truth.get(&id).map(|(b, _)| *b);
            let recorded = inst.visible_box.map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]);
            checked += 1;
            if recomputed != recorded || truth.get(&id).map_or(0, |t| t.1) != inst.visible_pixels {
                mismatches += 1;
            }
        }
        let file = rec.output_file.as_deref().unwrap();
        for a in by_file.get(file).map(Vec::as_slice).unwrap_or(&[]) {
            checked += 1;
            let Some((b, count)) = truth.get(&a.mask_value.unwrap()) else {
                mismatches += 1;
                continue;
            };
            let want = [b[0] as f64, b[1] as f64, (b[2] - b[0] + 1) as f64, (b[3] - b[1] + 1) as f64];
            if a.area != *count as f64 || a.bbox != want {
                mismatches += 1;
            }
        }
        // every labeled region is annotated
        let annotated = by_file.get(file).map_or(0, |v| v.len());
        if annotated != truth.len() {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        summary.succeeded as u64 == ANNOTATION_SAMPLES && mismatches == 0 && elapsed < ANNOTATION_BUDGET,
        format!(
            "{} samples rendered at 640x480, {checked} boxes/areas checked, {mismatches} mismatches, {:.1}s (< {}s)",
            summary.succeeded,
            elapsed.as_secs_f64(),
            ANNOTATION_BUDGET.as_secs()
        ),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(common::bin())
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::dataset_fixture(tmp.path(), 320, 240);
    cfg.generation.objects_per_image = CountRange { min: 2, max: 6 };
    let cfg_path = tmp.path().join("config.json");
    common::write_config(&cfg, &cfg_path);
    let dir = |n: &str| tmp.path().join(n);
    let cfg_s = cfg_path.to_str().unwrap();
    let ok1 = run_cli(&["generate", "--config", cfg_s, "--count", "100", "--jobs", "1", "--out", dir("j1").to_str().unwrap()]);
    let ok8 = run_cli(&["generate", "--config", cfg_s, "--count", "100", "--jobs", "8", "--out", dir("j8").to_str().unwrap()]);
    let manifest = dir("j1").join("manifest.json");
    let okr = run_cli(&["generate", "--replay", manifest.to_str().unwrap(), "--jobs", "3", "--out", dir("replay").to_str().unwrap()]);
    if !(ok1 && ok8 && okr) {
        return outcome(false, format!("cli runs succeeded: jobs1 {ok1}, jobs8 {ok8}, replay {okr}"));
    }
    let a = common::snapshot(&dir("j1"));
    let b = common::snapshot(&dir("j8"));
    let c = common::snapshot(&dir("replay"));
    let bytes: usize = a.iter().map(|(_, v)| v.len()).sum();
    outcome(
        a == b && a == c,
        format!(
            "{} files / {bytes} bytes; jobs 1 vs 8 identical {}; replay identical {}",
            a.len(),
            a == b,
            a == c
        ),
    )
}

/// Camera yaw with a smooth 90 degree turn centered at `t_turn` plus a slow wobble.
fn yaw(t: f64, t_turn: f64, wobble: f64) -> f64 {
    let sigma = 0.12;
    let turn = std::f64::consts::FRAC_PI_2 / (1.0 + (-(t - t_turn) / sigma).exp());
    turn + 0.05 * (wobble * t).sin()
}

fn sync_recovery() -> Outcome {
    let mocap_rate = 100.0;
    let fps = 30.0;
    let video_len = 20.0;
    let window = 6.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut hits = 0;
    let mut worst: f64 = 0.0;
    let mut period = 0.0;
    for _ in 0..SYNC_TRIALS {
        let delta: f64 = rng.gen_range(-5.0..5.0);
        let t_turn: f64 = rng.gen_range(6.0..14.0);
        let wobble: f64 = rng.gen_range(0.5..1.5);
        let samples: Vec<Pose> = (0..((video_len + 14.0) * mocap_rate) as usize)
            .map(|k| {
                let t = -7.0 + k as f64 / mocap_rate;
                Pose {
                    t,
                    p: [0.0, 0.0, 0.0],
                    q: Quat::from_axis_angle([0.0, 0.0, 1.0], yaw(t, t_turn, wobble)),
                }
            })
            .collect();
        let track = PoseTrack::new(Subject::Camera, samples).unwrap();
        let mocap = angular_speed_signal(&track, mocap_rate).unwrap();

        // video time tv sees the camera yaw at mocap time tv + delta
        let frames: Vec<Rgb> = (0..(video_len * fps) as usize)
            .map(|i| {
                let shift = 80.0 * yaw(i as f64 / fps + delta, t_turn, wobble);
                let data = (0..16u32)
                    .flat_map(|_| 0..64u32)
                    .map(|x| {
                        let v = 0.5 + 0.4 * (std::f64::consts::TAU * (x as f64 + shift) / 64.0).sin();
                        [v as f32; 3]
                    })
                    .collect();
                Rgb::from_vec(64, 16, data).unwrap()
            })
            .collect();
        let video = Signal::from_frame_motion(frame_motion_from_rasters(&frames).unwrap(), fps);
        let r = sync_offset(&mocap, &video, window).unwrap();
        period = 1.0 / r.common_rate_hz;
        let err = (r.offset_s - delta).abs();
        worst = worst.max(err);
        if err <= period + 1e-9 {
            hits += 1;
        }
    }
    outcome(
        hits >= SYNC_REQUIRED,
        format!("{hits}/{SYNC_TRIALS} trials within one resample period ({period:.3}s), worst error {worst:.4}s"),
    )
}

fn viewpoint_tooling() -> Outcome {
    let grid = SphereGrid::default();
    let expected_area = 4.0 * std::f64::consts::PI / grid.len() as f64;
    let mut area_err: f64 = 0.0;
    for ie in 0..grid.n_el {
        for ia in 0..grid.n_az {
            area_err = area_err.max((grid.bin_area(ia, ie) - expected_area).abs());
        }
    }
    let areas_ok = area_err <= 1e-12;

    // uniform directions from uniform z and azimuth (Archimedes)
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let mut counts = vec![0u64; grid.len()];
    for _ in 0..n {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        let (ia, ie) = grid.bin_of([r * phi.cos(), r * phi.sin(), z]);
        counts[grid.flat(ia, ie)] += 1;
    }
    let e = n as f64 / grid.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let limit = ChiSquared::new((grid.len() - 1) as f64).unwrap().inverse_cdf(CHI2_QUANTILE);
    let chi_ok = chi2 < limit;

    // one asset in one bin, nine in another
    let view = |v: [f64; 3]| Some(AssetView { v, depth_m: 1.0 });
    let assets = (0..10).map(|i| ForegroundAsset {
        id: format!("a{i}"),
        class_label: "c".into(),
        rgba: Rgba::new(1, 1, [1.0; 4]),
        view: if i == 0 { view([0.0, 0.0, 1.0]) } else { view([1.0, 0.0, 0.0]) },
        source: AssetSource::default(),
    });
    let lib = AssetLibrary::from_assets(assets);
    let draws = 10_000;
    let lone = (0..draws)
        .filter(|_| sample_asset(&lib, "c", SamplingStrategy::UniformViewpoint, &mut rng).unwrap().id == "a0")
        .count();
    let freq = lone as f64 / draws as f64;
    let freq_ok = (freq - 0.5).abs() <= VIEW_FREQ_TOL;
    outcome(
        areas_ok && chi_ok && freq_ok,
        format!(
            "max bin area error {area_err:.1e}; chi2 {chi2:.1} < {limit:.1} (q{CHI2_QUANTILE}, {} dof); sparse-bin frequency {freq:.4} (0.5 +/- {VIEW_FREQ_TOL})",
            grid.len() - 1
        ),
    )
}

fn random_labeled_set(rng: &mut ChaCha8Rng, images: usize, classes: &[&str]) -> LabeledSet {
    LabeledSet {
        classes: classes.iter().map(|c| c.to_string()).collect(),
        images: (0..images)
            .map(|i| LabeledImage {
                id: i as u64 + 1,
                file_name: format!("{i}.png"),
                instances: (0..rng.gen_range(0..4))
                    .map(|_| LabeledInstance {
                        // skewed class frequencies
                        class: classes[(rng.gen_range(0.0f64..1.0).powi(2) * classes.len() as f64) as usize].to_string(),
                        bbox: BoxF::new(0.0, 0.0, 1.0, 1.0),
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn nshot_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let classes = ["a", "b", "c", "d"];
    let mut failures = Vec::new();
    for n in [1usize, 5, 50, 200] {
        for _ in 0..5 {
            let set = random_labeled_set(&mut rng, 3000, &classes);
            let subset = select_nshot(&set, n, &mut rng).unwrap();
            let mut recount: BTreeMap<&str, usize> = BTreeMap::new();
            for img in &subset.images {
                for inst in &img.instances {
                    *recount.entry(inst.class.as_str()).or_default() += 1;
                }
            }
            if classes.iter().any(|c| recount.get(c).copied().unwrap_or(0) < n) {
                failures.push(format!("N={n}: {recount:?}"));
            }
        }
    }
    let (train, val) = split_indices(1200, 5, 1, &mut rng).unwrap();
    let split_ok = train.len() == 1000 && val.len() == 200;
    outcome(
        failures.is_empty() && split_ok,
        format!(
            "N in {{1,5,50,200}} x 5 random sets: {} under-filled; 1200 split 5:1 -> {}/{}",
            failures.len(),
            train.len(),
            val.len()
        ),
    )
}

/// Straightforward re-implementation: per class, rank predictions, greedily
/// match against ground truth of the same image, accumulate the envelope.
fn brute_force(preds: &[Detection], gts: &LabeledSet, iou_t: f64, conf_t: f64) -> BTreeMap<String, (Option<f64>, f64, f64, usize, usize)> {
    let iou = |a: &BoxF, b: &BoxF| {
        let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
        let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
        let u = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - iw * ih;
        if u > 0.0 { iw * ih / u } else if a == b { 1.0 } else { 0.0 }
    };
    let mut classes: Vec<String> = gts.classes.clone();
    for p in preds {
        if !classes.contains(&p.class) {
            classes.push(p.class.clone());
        }
    }
    let mut out = BTreeMap::new();
    for class in classes {
        let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == class).collect();
        // insertion sort keeps input order on ties
        for i in 1..order.len() {
            let mut j = i;
            while j > 0 && preds[order[j]].confidence > preds[order[j - 1]].confidence {
                order.swap(j, j - 1);
                j -= 1;
            }
        }
        let gt: Vec<(&str, &BoxF)> = gts
            .images
            .iter()
            .flat_map(|img| img.instances.iter().filter(|i| i.class == class).map(move |i| (img.file_name.as_str(), &i.bbox)))
            .collect();
        let mut used = vec![false; gt.len()];
        let mut hits = Vec::new();
        for &pi in &order {
            let p = &preds[pi];
            let mut best: Option<usize> = None;
            let mut best_iou = -1.0;
            for (g, (img, b)) in gt.iter().enumerate() {
                if used[g] || *img != p.image {
                    continue;
                }
                let v = iou(&p.bbox, b);
                if v >= iou_t && v > best_iou {
                    best_iou = v;
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                used[g] = true;
            }
            hits.push(best.is_some());
        }
        let n_gt = gt.len();
        let ap = (n_gt > 0).then(|| {
            let prec: Vec<f64> = (0..hits.len())
                .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
                .collect();
            (0..hits.len())
                .filter(|&k| hits[k])
                .map(|k| prec[k..].iter().cloned().fold(0.0, f64::max) / n_gt as f64)
                .sum::<f64>()
        });
        let kept: Vec<bool> = order.iter().zip(&hits).filter(|(&i, _)| preds[i].confidence >= conf_t).map(|(_, &h)| h).collect();
        let tp = kept.iter().filter(|&&h| h).count();
        let fp = kept.len() - tp;
        let p = if kept.is_empty() { 0.0 } else { tp as f64 / kept.len() as f64 };
        let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        out.insert(class, (ap, p, r, tp, fp));
    }
    out
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let classes = ["a", "b"];
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64);
        BoxF::new(x, y, x + rng.gen_range(1..6) as f64, y + rng.gen_range(1..6) as f64)
    };
    let mut disagreements = 0;
    for _ in 0..METRIC_TRIALS {
        let n_img = rng.gen_range(1..4);
        let gts = LabeledSet {
            classes: classes.iter().map(|c| c.to_string()).collect(),
            images: (0..n_img)
                .map(|i| LabeledImage {
                    id: i as u64,
                    file_name: format!("im{i}"),
                    instances: (0..rng.gen_range(0..=3))
                        .map(|_| LabeledInstance {
                            class: classes[rng.gen_range(0..2)].to_string(),
                            bbox: rand_box(&mut rng),
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut preds = Vec::new();
        for i in 0..n_img {
            let img = &gts.images[i];
            for _ in 0..rng.gen_range(0..=5) {
                // half the predictions are jittered copies of ground truth
                let bbox = match img.instances.get(rng.gen_range(0..6)) {
                    Some(g) => {
                        let j = rng.gen_range(-1..=1) as f64;
                        BoxF::new(g.bbox.x_min + j, g.bbox.y_min, g.bbox.x_max + j, g.bbox.y_max)
                    }
                    None => rand_box(&mut rng),
                };
                preds.push(Detection {
                    image: img.file_name.clone(),
                    class: classes[rng.gen_range(0..2)].to_string(),
                    bbox,
                    confidence: rng.gen_range(0..5) as f64 / 4.0,
                });
            }
        }
        let report = evaluate_detection(&preds, &gts, 0.5, 0.5);
        let oracle = brute_force(&preds, &gts, 0.5, 0.5);
        for c in &report.classes {
            let (ap, p, r, tp, fp) = oracle[&c.class];
            let ap_ok = match (ap, c.ap) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            if !ap_ok || (p - c.precision).abs() > 1e-12 || (r - c.recall).abs() > 1e-12 || tp != c.tp || fp != c.fp {
                disagreements += 1;
            }
        }
    }

    let ap_example = average_precision(&[true, false, true], 2).unwrap();
    let ap_ok = (ap_example - 0.8333333333333334).abs() < 1e-15;
    let iou_example = box_iou(&BoxF::new(0.0, 0.0, 10.0, 10.0), &BoxF::new(5.0, 0.0, 15.0, 10.0)).unwrap();
    let iou_ok = iou_example == 1.0 / 3.0;

    let mut seg_mismatch = 0;
    for _ in 0..200 {
        let density_p = rng.gen_range(0.0..1.0);
        let density_g = rng.gen_range(0.0..1.0);
        let pred: Vec<bool> = (0..256).map(|_| rng.gen_bool(density_p)).collect();
        let gt: Vec<bool> = (0..256).map(|_| rng.gen_bool(density_g)).collect();
        let count = |f: &dyn Fn(bool, bool) -> bool| pred.iter().zip(&gt).filter(|(&p, &g)| f(p, g)).count() as f64;
        let tp = count(&|p, g| p && g);
        let fp = count(&|p, g| p && !g);
        let fn_ = count(&|p, g| !p && g);
        let tn = count(&|p, g| !p && !g);
        let pct = |a: f64, b: f64| if b == 0.0 { 0.0 } else { 100.0 * a / b };
        let r = evaluate_segmentation(
            &Mask::from_vec(16, 16, pred.clone()).unwrap(),
            &Mask::from_vec(16, 16, gt.clone()).unwrap(),
        )
        .unwrap();
        if (r.iou - pct(tp, tp + fp + fn_)).abs() > 1e-12
            || (r.fn_rate - pct(fn_, tp + fn_)).abs() > 1e-12
            || (r.fp_rate - pct(fp, fp + tn)).abs() > 1e-12
        {
            seg_mismatch += 1;
        }
    }
    outcome(
        disagreements == 0 && ap_ok && iou_ok && seg_mismatch == 0,
        format!(
            "{METRIC_TRIALS} random detection sets: {disagreements} per-class disagreements; AP example {ap_example:.6}; IoU example {iou_example:.6}; {seg_mismatch} segmentation mismatches on 16x16 masks"
        ),
    )
}

fn render_many(inputs: &GenInputs, cfg: &synthforge::compositor::GenConfig, range: std::ops::Range<u64>) -> usize {
    range
        .into_par_iter()
        .filter(|&i| {
            sample_recipe(cfg, &inputs.backgrounds, &inputs.library, i)
                .and_then(|r| render(&r, cfg, &inputs.library, &inputs.backgrounds))
                .is_ok()
        })
        .count()
}

fn throughput() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::dataset_fixture(tmp.path(), 640, 480);
    cfg.generation.blend = BlendMode::Feather { sigma: 1.0 };
    let inputs = GenInputs::load(&cfg).unwrap();
    let gen = &cfg.generation;
    let n = 300u64;
    let pool = |k: usize| rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap();

    let single = pool(1);
    single.install(|| render_many(&inputs, gen, 0..20));
    let start = Instant::now();
    let done = single.install(|| render_many(&inputs, gen, 0..n));
    let t1 = start.elapsed().as_secs_f64();
    let rate = done as f64 / t1;
    let rate_ok = rate >= MIN_THROUGHPUT && done as u64 == n;

    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    if cores < SPEEDUP_WORKERS {
        return Outcome {
            verdict: if rate_ok { Verdict::Unverified } else { Verdict::Fail },
            detail: format!(
                "{rate:.1} composites/s single-threaded at 640x480 (>= {MIN_THROUGHPUT}); speedup not measurable on {cores} core(s), need {SPEEDUP_WORKERS}"
            ),
        };
    }
    let start = Instant::now();
    pool(SPEEDUP_WORKERS).install(|| render_many(&inputs, gen, 0..n));
    let speedup = t1 / start.elapsed().as_secs_f64();
    let floor = SPEEDUP_WORKERS as f64 * (1.0 - SPEEDUP_SLACK);
    outcome(
        rate_ok && speedup >= floor,
        format!(
            "{rate:.1} composites/s single-threaded (>= {MIN_THROUGHPUT}); {SPEEDUP_WORKERS}-worker speedup {speedup:.2} (>= {floor:.1})"
        ),
    )
}

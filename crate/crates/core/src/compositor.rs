//! Scene planning and rendering.
//!
//! A [`SceneRecipe`] is sampled from a [`GenConfig`] with a per-sample RNG
//! stream, so rendering sample `i` never depends on any other sample. Rendering
//! draws placements far to near (ascending scale) and keeps a label map in
//! which nearer objects overwrite farther ones; visible masks are read back
//! from it.

use std::f64::consts::TAU;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assetlib::{sample_asset, AssetLibrary, AssetView, SamplingStrategy};
use crate::error::{Error, Result};
use crate::raster::{list_images, BoxAccumulator, Mask, PixelBox, Rgb, Rgba};

/// Upper bound on placement attempts per object.
pub const MAX_PLACEMENT_TRIES: usize = 100;

/// Over-relaxation factor of the Poisson solver.
pub const SOR_OMEGA: f64 = 1.9;

/// Iterations between residual checks in the Poisson solver.
const RESIDUAL_CHECK_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InplaneRotation {
    Off,
    /// θ ~ Uniform[0, 2π).
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonParams {
    #[serde(default = "default_true")]
    pub mixed_gradients: bool,
    /// Relative residual at which iteration stops.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_true() -> bool {
    true
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_iter() -> usize {
    10_000
}

impl Default for PoissonParams {
    fn default() -> Self {
        Self {
            mixed_gradients: true,
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlendMode {
    /// Gaussian-feathered alpha compositing; `sigma` in pixels, 0 disables.
    Feather { sigma: f64 },
    Poisson(PoissonParams),
}

impl Default for BlendMode {
    fn default() -> Self {
        BlendMode::Feather { sigma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlacementPolicy {
    #[default]
    FullyInside,
    TruncationAllowed {
        #[serde(default = "default_min_visible")]
        min_visible_fraction: f64,
    },
}

fn default_min_visible() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrightnessMode {
    /// factor = clamp((s / s_ref)², f_min, 1)
    #[default]
    Scale,
    /// factor = clamp((d_ref / d)², f_min, 1), d_ref the nearest depth in the
    /// scene. Placements without a depth fall back to the scale rule.
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Scale at which the brightness factor is 1; `None` means `scale_max`.
    pub s_ref: Option<f64>,
    pub brightness_floor: f64,
    pub brightness_mode: BrightnessMode,
    pub objects_per_image: CountRange,
    pub inplane_rotation: InplaneRotation,
    pub blend: BlendMode,
    pub placement: PlacementPolicy,
    pub max_pairwise_overlap_iou: f64,
    pub master_seed: u64,
    /// Classes to draw from; empty means every class in the library.
    pub classes: Vec<String>,
    pub sampling: SamplingStrategy,
    /// Alpha level defining instance masks and the Poisson region.
    pub matte_threshold: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.1,
            scale_max: 0.3,
            s_ref: None,
            brightness_floor: 0.3,
            brightness_mode: BrightnessMode::Scale,
            objects_per_image: CountRange { min: 1, max: 3 },
            inplane_rotation: InplaneRotation::Uniform,
            blend: BlendMode::default(),
            placement: PlacementPolicy::FullyInside,
            max_pairwise_overlap_iou: 0.3,
            master_seed: 0,
            classes: Vec::new(),
            sampling: SamplingStrategy::Random,
            matte_threshold: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            ));
        }
        if !(self.brightness_floor > 0.0 && self.brightness_floor <= 1.0) {
            return bad(format!("brightness floor {} not in (0, 1]", self.brightness_floor));
        }
        if self.s_ref.is_some_and(|s| !(s > 0.0)) {
            return bad("s_ref must be positive".into());
        }
        let c = self.objects_per_image;
        if c.min < 1 || c.min > c.max {
            return bad(format!("objects_per_image {}..{} invalid", c.min, c.max));
        }
        if !(0.0..=1.0).contains(&self.max_pairwise_overlap_iou) {
            return bad("max_pairwise_overlap_iou must lie in [0, 1]".into());
        }
        if !(self.matte_threshold > 0.0 && self.matte_threshold < 1.0) {
            return bad("matte_threshold must lie in (0, 1)".into());
        }
        match self.blend {
            BlendMode::Feather { sigma } if !(sigma >= 0.0) => {
                return bad(format!("feather sigma {sigma} must be >= 0"))
            }
            BlendMode::Poisson(p) if !(p.tol > 0.0) || p.max_iter == 0 => {
                return bad("poisson tol must be > 0 and max_iter >= 1".into())
            }
            _ => {}
        }
        if let PlacementPolicy::TruncationAllowed {
            min_visible_fraction: f,
        } = self.placement
        {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("min_visible_fraction {f} not in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn reference_scale(&self) -> f64 {
        self.s_ref.unwrap_or(self.scale_max)
    }

    /// clamp((s / s_ref)², f_min, 1)
    pub fn scale_brightness(&self, s: f64) -> f64 {
        ((s / self.reference_scale()).powi(2)).clamp(self.brightness_floor, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub class_label: String,
    pub asset_id: String,
    /// Multiplier on the asset's pixel dimensions.
    pub scale: f64,
    /// Canvas center in background pixel coordinates.
    pub center: [f64; 2],
    /// In-plane rotation, radians.
    pub rotation: f64,
    pub brightness_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub background: String,
    /// Far to near, ascending scale.
    pub placements: Vec<Placement>,
    pub sample_seed: u64,
    /// Objects abandoned after exhausting placement attempts.
    #[serde(default)]
    pub dropped_objects: u32,
}

#[derive(Debug, Clone)]
pub struct Background {
    pub name: String,
    pub image: Rgb,
}

/// Loads every PNG/JPEG in `dir`, ordered by file name.
pub fn load_backgrounds(dir: &Path) -> Result<Vec<Background>> {
    let paths = list_images(dir)?;
    paths
        .into_iter()
        .map(|p| {
            Ok(Background {
                name: p.file_name().unwrap().to_string_lossy().into_owned(),
                image: Rgb::load(&p)?,
            })
        })
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the RNG stream for one sample.
pub fn derive_seed(master_seed: u64, sample_index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ sample_index)
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`, possibly off-canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Rect {
    pub fn area(&self) -> i64 {
        (self.x1 - self.x0).max(0) * (self.y1 - self.y0).max(0)
    }

    pub fn intersect(&self, o: &Rect) -> Rect {
        Rect {
            x0: self.x0.max(o.x0),
            y0: self.y0.max(o.y0),
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
        }
    }

    pub fn iou(&self, o: &Rect) -> f64 {
        let inter = self.intersect(o).area();
        let union = self.area() + o.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Top-left pixel of a `width × height` canvas centered at `center`.
pub fn placed_origin(center: [f64; 2], width: u32, height: u32) -> (i64, i64) {
    (
        (center[0] - width as f64 / 2.0 + 0.5).floor() as i64,
        (center[1] - height as f64 / 2.0 + 0.5).floor() as i64,
    )
}

pub fn placed_rect(center: [f64; 2], width: u32, height: u32) -> Rect {
    let (x0, y0) = placed_origin(center, width, height);
    Rect {
        x0,
        y0,
        x1: x0 + width as i64,
        y1: y0 + height as i64,
    }
}

/// Size of the raster [`transform_asset`] produces.
pub fn transformed_size(width: u32, height: u32, s: f64, theta: f64) -> Result<(u32, u32)> {
    let degenerate = || Error::DegenerateTransform {
        width,
        height,
        scale: s,
    };
    if !(s > 0.0) {
        return Err(degenerate());
    }
    let sw = (width as f64 * s).round();
    let sh = (height as f64 * s).round();
    if sw < 1.0 || sh < 1.0 {
        return Err(degenerate());
    }
    if theta == 0.0 {
        return Ok((sw as u32, sh as u32));
    }
    let (sin, cos) = theta.sin_cos();
    let w = (sw * cos.abs() + sh * sin.abs() - 1e-6).ceil().max(1.0);
    let h = (sw * sin.abs() + sh * cos.abs() - 1e-6).ceil().max(1.0);
    Ok((w as u32, h as u32))
}

pub fn sample_recipe(
    config: &GenConfig,
    backgrounds: &[Background],
    library: &AssetLibrary,
    sample_index: u64,
) -> Result<SceneRecipe> {
    if backgrounds.is_empty() {
        return Err(Error::InvalidInput("no backgrounds".into()));
    }
    let classes: Vec<&str> = if config.classes.is_empty() {
        library.class_names().collect()
    } else {
        config.classes.iter().map(String::as_str).collect()
    };
    if classes.is_empty() {
        return Err(Error::InvalidInput("no object classes".into()));
    }

    let sample_seed = derive_seed(config.master_seed, sample_index);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let bg = &backgrounds[rng.gen_range(0..backgrounds.len())];
    let (bw, bh) = (bg.image.width as f64, bg.image.height as f64);
    let bg_rect = Rect {
        x0: 0,
        y0: 0,
        x1: bg.image.width as i64,
        y1: bg.image.height as i64,
    };
    let range = config.objects_per_image;
    let count = rng.gen_range(range.min..=range.max);

    let mut placed: Vec<(Placement, Rect, Option<AssetView>)> = Vec::new();
    let mut dropped = 0;
    for _ in 0..count {
        let class = classes[rng.gen_range(0..classes.len())];
        let asset = sample_asset(library, class, config.sampling, &mut rng)?;
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let s = if config.scale_min == config.scale_max {
                config.scale_min
            } else {
                rng.gen_range(config.scale_min..=config.scale_max)
            };
            let theta = match config.inplane_rotation {
                InplaneRotation::Off => 0.0,
                InplaneRotation::Uniform => rng.gen_range(0.0..TAU),
            };
            let Ok((w, h)) = transformed_size(asset.rgba.width, asset.rgba.height, s, theta)
            else {
                continue;
            };
            let (w_f, h_f) = (w as f64, h as f64);
            let center = match config.placement {
                PlacementPolicy::FullyInside => {
                    if w_f > bw || h_f > bh {
                        continue;
                    }
                    [
                        rng.gen_range(w_f / 2.0..=bw - w_f / 2.0),
                        rng.gen_range(h_f / 2.0..=bh - h_f / 2.0),
                    ]
                }
                PlacementPolicy::TruncationAllowed { .. } => {
                    [rng.gen_range(0.0..=bw), rng.gen_range(0.0..=bh)]
                }
            };
            let rect = placed_rect(center, w, h);
            if let PlacementPolicy::TruncationAllowed {
                min_visible_fraction,
            } = config.placement
            {
                let visible = rect.intersect(&bg_rect).area() as f64 / rect.area() as f64;
                if visible < min_visible_fraction {
                    continue;
                }
            }
            if placed
                .iter()
                .any(|(_, r, _)| r.iou(&rect) > config.max_pairwise_overlap_iou)
            {
                continue;
            }
            accepted = Some((s, theta, center, rect));
            break;
        }
        match accepted {
            Some((scale, rotation, center, rect)) => placed.push((
                Placement {
                    class_label: class.to_string(),
                    asset_id: asset.id.clone(),
                    scale,
                    center,
                    rotation,
                    brightness_factor: 1.0,
                },
                rect,
                asset.view,
            )),
            None => {
                dropped += 1;
                warn!(
                    "sample {sample_index}: dropped a `{class}` object after {MAX_PLACEMENT_TRIES} placement attempts"
                );
            }
        }
    }
    if placed.is_empty() {
        return Err(Error::GenerationFailure(format!(
            "sample {sample_index}: no object could be placed"
        )));
    }

    let d_ref = placed
        .iter()
        .filter_map(|(_, _, v)| v.map(|v| v.depth_m))
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    for (p, _, view) in placed.iter_mut() {
        p.brightness_factor = match (config.brightness_mode, view) {
            (BrightnessMode::Depth, Some(v)) if v.depth_m > 0.0 => {
                (d_ref / v.depth_m).powi(2).clamp(config.brightness_floor, 1.0)
            }
            _ => config.scale_brightness(p.scale),
        };
    }
    let mut placements: Vec<Placement> = placed.into_iter().map(|(p, _, _)| p).collect();
    placements.sort_by(|a, b| a.scale.total_cmp(&b.scale));
    Ok(SceneRecipe {
        background: bg.name.clone(),
        placements,
        sample_seed,
        dropped_objects: dropped,
    })
}

#[inline]
fn premultiply(p: [f32; 4]) -> [f32; 4] {
    [p[0] * p[3], p[1] * p[3], p[2] * p[3], p[3]]
}

#[inline]
fn unpremultiply(p: [f32; 4]) -> [f32; 4] {
    if p[3] <= 0.0 {
        [0.0; 4]
    } else {
        let a = p[3].min(1.0);
        [
            (p[0] / a).clamp(0.0, 1.0),
            (p[1] / a).clamp(0.0, 1.0),
            (p[2] / a).clamp(0.0, 1.0),
            a,
        ]
    }
}

/// Per-output-sample source taps `(index, weight)` along one axis.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            if ratio > 1.0 {
                // box filter over the source footprint of output sample i
                let lo = i as f64 * ratio;
                let hi = lo + ratio;
                let mut taps = Vec::new();
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < src {
                    let w = (hi.min(j as f64 + 1.0) - lo.max(j as f64)) / ratio;
                    if w > 0.0 {
                        taps.push((j, w as f32));
                    }
                    j += 1;
                }
                taps
            } else {
                let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let j = x.floor() as usize;
                let u = x - j as f64;
                if u == 0.0 || j + 1 >= src {
                    vec![(j, 1.0)]
                } else {
                    vec![(j, (1.0 - u) as f32), (j + 1, u as f32)]
                }
            }
        })
        .collect()
}

/// Separable resize of a premultiplied raster: area averaging when shrinking,
/// linear interpolation when enlarging.
fn resize_premultiplied(src: &Rgba, width: u32, height: u32) -> Rgba {
    let (sw, sh) = (src.width as usize, src.height as usize);
    let (dw, dh) = (width as usize, height as usize);
    let xw = axis_weights(sw, dw);
    let yw = axis_weights(sh, dh);
    let mut tmp = vec![[0f32; 4]; dw * sh];
    for y in 0..sh {
        let row = &src.data[y * sw..(y + 1) * sw];
        for (x, taps) in xw.iter().enumerate() {
            let mut acc = [0f32; 4];
            for &(j, w) in taps {
                for c in 0..4 {
                    acc[c] += row[j][c] * w;
                }
            }
            tmp[y * dw + x] = acc;
        }
    }
    let mut data = vec![[0f32; 4]; dw * dh];
    for (y, taps) in yw.iter().enumerate() {
        for x in 0..dw {
            let mut acc = [0f32; 4];
            for &(j, w) in taps {
                for c in 0..4 {
                    acc[c] += tmp[j * dw + x][c] * w;
                }
            }
            data[y * dw + x] = acc;
        }
    }
    Rgba {
        width,
        height,
        data,
    }
}

/// Bilinear tap with transparent black outside the raster.
#[inline]
fn sample_bilinear(src: &Rgba, u: f64, v: f64) -> [f32; 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = (u - x0) as f32;
    let fy = (v - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = [0f32; 4];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        let y = y0 + dy;
        if y < 0 || y >= src.height as i64 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let x = x0 + dx;
            if x < 0 || x >= src.width as i64 {
                continue;
            }
            let p = src.data[y as usize * src.width as usize + x as usize];
            let w = wx * wy;
            for c in 0..4 {
                acc[c] += p[c] * w;
            }
        }
    }
    acc
}

/// Scales by `s`, then rotates by `theta` about the center onto a canvas large
/// enough for the rotated extent. Resampling happens on premultiplied values.
pub fn transform_asset(asset: &Rgba, s: f64, theta: f64) -> Result<Rgba> {
    let (scaled_w, scaled_h) = transformed_size(asset.width, asset.height, s, 0.0)?;
    if s == 1.0 && theta == 0.0 {
        return Ok(asset.clone());
    }
    let pm = Rgba {
        width: asset.width,
        height: asset.height,
        data: asset.data.iter().map(|&p| premultiply(p)).collect(),
    };
    let scaled = if (scaled_w, scaled_h) == (asset.width, asset.height) {
        pm
    } else {
        resize_premultiplied(&pm, scaled_w, scaled_h)
    };
    let out = if theta == 0.0 {
        scaled
    } else {
        let (w, h) = transformed_size(asset.width, asset.height, s, theta)?;
        let (sin, cos) = theta.sin_cos();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (scx, scy) = (scaled_w as f64 / 2.0, scaled_h as f64 / 2.0);
        let mut data = Vec::with_capacity(w as usize * h as usize);
        for y in 0..h {
            let dy = y as f64 + 0.5 - cy;
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                // inverse rotation back into the scaled raster
                let sx = cos * dx + sin * dy;
                let sy = -sin * dx + cos * dy;
                data.push(sample_bilinear(&scaled, sx + scx - 0.5, sy + scy - 0.5));
            }
        }
        Rgba {
            width: w,
            height: h,
            data,
        }
    };
    Ok(Rgba {
        width: out.width,
        height: out.height,
        data: out.data.into_iter().map(unpremultiply).collect(),
    })
}

pub fn brightness_adjust(raster: &Rgba, factor: f64) -> Result<Rgba> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "brightness factor {factor} not in (0, 1]"
        )));
    }
    if factor == 1.0 {
        return Ok(raster.clone());
    }
    let f = factor as f32;
    Ok(Rgba {
        width: raster.width,
        height: raster.height,
        data: raster
            .data
            .iter()
            .map(|p| {
                [
                    (p[0] * f).clamp(0.0, 1.0),
                    (p[1] * f).clamp(0.0, 1.0),
                    (p[2] * f).clamp(0.0, 1.0),
                    p[3],
                ]
            })
            .collect(),
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| (w / sum) as f32).collect()
}

/// Separable convolution of `channels`-wide interleaved data with zero padding.
fn convolve_separable(data: &[f32], width: usize, height: usize, channels: usize, k: &[f32]) -> Vec<f32> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            for (t, &w) in k.iter().enumerate() {
                let sx = x as i64 + t as i64 - r;
                if sx < 0 || sx >= width as i64 {
                    continue;
                }
                let src = (y * width + sx as usize) * channels;
                let dst = (y * width + x) * channels;
                for c in 0..channels {
                    tmp[dst + c] += data[src + c] * w;
                }
            }
        }
    }
    let mut out = vec![0f32; data.len()];
    for y in 0..height {
        for (t, &w) in k.iter().enumerate() {
            let sy = y as i64 + t as i64 - r;
            if sy < 0 || sy >= height as i64 {
                continue;
            }
            let src_row = sy as usize * width * channels;
            let dst_row = y * width * channels;
            for i in 0..width * channels {
                out[dst_row + i] += tmp[src_row + i] * w;
            }
        }
    }
    out
}

/// Feathered alpha compositing of `fg` with its top-left at `origin`.
///
/// Only alpha is blurred. Pixels that were fully transparent before blurring
/// take the alpha-weighted average color of their neighborhood. Returns
/// `false` (and leaves `bg` untouched) when the footprint misses the
/// background.
pub fn alpha_blend(bg: &mut Rgb, fg: &Rgba, origin: (i64, i64), sigma: f64) -> bool {
    let radius = if sigma > 0.0 { (3.0 * sigma).ceil() as i64 } else { 0 };
    let (pw, ph) = (
        fg.width as usize + 2 * radius as usize,
        fg.height as usize + 2 * radius as usize,
    );
    let (ox, oy) = (origin.0 - radius, origin.1 - radius);
    let footprint = Rect {
        x0: ox,
        y0: oy,
        x1: ox + pw as i64,
        y1: oy + ph as i64,
    };
    let canvas = Rect {
        x0: 0,
        y0: 0,
        x1: bg.width as i64,
        y1: bg.height as i64,
    };
    let clip = footprint.intersect(&canvas);
    if clip.area() == 0 {
        warn!("foreground at {origin:?} misses the background");
        return false;
    }

    // padded premultiplied RGBA
    let mut padded = vec![0f32; pw * ph * 4];
    for y in 0..fg.height as usize {
        for x in 0..fg.width as usize {
            let p = premultiply(fg.data[y * fg.width as usize + x]);
            let i = ((y + radius as usize) * pw + x + radius as usize) * 4;
            padded[i..i + 4].copy_from_slice(&p);
        }
    }
    let blurred = if radius > 0 {
        convolve_separable(&padded, pw, ph, 4, &gaussian_kernel(sigma))
    } else {
        padded.clone()
    };

    for y in clip.y0..clip.y1 {
        let py = (y - oy) as usize;
        for x in clip.x0..clip.x1 {
            let px = (x - ox) as usize;
            let i = (py * pw + px) * 4;
            let a = blurred[i + 3].min(1.0);
            if a <= 0.0 {
                continue;
            }
            let (fx, fy) = (px as i64 - radius, py as i64 - radius);
            let inside = fx >= 0 && fy >= 0 && fx < fg.width as i64 && fy < fg.height as i64;
            let color = match inside.then(|| fg.data[fy as usize * fg.width as usize + fx as usize]) {
                Some(p) if p[3] > 0.0 => [p[0], p[1], p[2]],
                _ => {
                    let ba = blurred[i + 3];
                    [blurred[i] / ba, blurred[i + 1] / ba, blurred[i + 2] / ba]
                }
            };
            let dst = bg.index(x as u32, y as u32);
            let b = bg.data[dst];
            bg.data[dst] = [
                a * color[0] + (1.0 - a) * b[0],
                a * color[1] + (1.0 - a) * b[1],
                a * color[2] + (1.0 - a) * b[2],
            ];
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonReport {
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
    /// `(iteration, relative residual)` at each residual check.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Discrete Poisson problem over a region of the background.
///
/// Unknowns are the region pixels. Each satisfies
/// `4 f_p − Σ_{q ∈ N(p) ∩ Ω} f_q = Σ_{q ∈ N(p) \ Ω} bg_q + Σ_q v_pq`.
#[derive(Debug, Clone)]
pub struct PoissonProblem {
    /// Background pixel index of every unknown, in sweep order.
    pub pixels: Vec<usize>,
    /// Region neighbors of every unknown (indices into `pixels`).
    neighbors: Vec<[u32; 4]>,
    /// Right-hand side per unknown and channel.
    rhs: Vec<[f64; 3]>,
}

const NO_NEIGHBOR: u32 = u32::MAX;

impl PoissonProblem {
    /// Builds the problem for `fg` with top-left at `origin`, region
    /// `{alpha ≥ tau}`.
    pub fn new(
        bg: &Rgb,
        fg: &Rgba,
        origin: (i64, i64),
        tau: f32,
        mixed_gradients: bool,
    ) -> Result<Self> {
        let (bw, bh) = (bg.width as i64, bg.height as i64);
        let (fw, fh) = (fg.width as i64, fg.height as i64);
        let mut local = vec![NO_NEIGHBOR; (fw * fh) as usize];
        let mut pixels = Vec::new();
        let mut coords = Vec::new();
        for y in 0..fh {
            for x in 0..fw {
                if fg.data[(y * fw + x) as usize][3] < tau {
                    continue;
                }
                let (gx, gy) = (origin.0 + x, origin.1 + y);
                if gx < 1 || gy < 1 || gx > bw - 2 || gy > bh - 2 {
                    return Err(Error::RegionOutOfBounds);
                }
                local[(y * fw + x) as usize] = pixels.len() as u32;
                pixels.push((gy * bw + gx) as usize);
                coords.push((x, y));
            }
        }
        if pixels.is_empty() {
            return Err(Error::InvalidInput("empty blend region".into()));
        }

        let mut neighbors = Vec::with_capacity(pixels.len());
        let mut rhs = Vec::with_capacity(pixels.len());
        for (k, &(x, y)) in coords.iter().enumerate() {
            let gp = pixels[k];
            let fp = fg.data[(y * fw + x) as usize];
            let bp = bg.data[gp];
            let mut nb = [NO_NEIGHBOR; 4];
            let mut b = [0f64; 3];
            for (slot, (dx, dy)) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].into_iter().enumerate() {
                let (nx, ny) = (x + dx, y + dy);
                let gq = (gp as i64 + dy * bw + dx) as usize;
                let bq = bg.data[gq];
                let in_fg = nx >= 0 && ny >= 0 && nx < fw && ny < fh;
                let fq = in_fg.then(|| fg.data[(ny * fw + nx) as usize]);
                let q_local = if in_fg { local[(ny * fw + nx) as usize] } else { NO_NEIGHBOR };
                for c in 0..3 {
                    let g_bg = bp[c] as f64 - bq[c] as f64;
                    // no source pixel across the raster edge: follow the destination
                    let g = match fq.map(|fq| fp[c] as f64 - fq[c] as f64) {
                        None => g_bg,
                        Some(g_fg) if mixed_gradients && g_bg.abs() > g_fg.abs() => g_bg,
                        Some(g_fg) => g_fg,
                    };
                    b[c] += g;
                    if q_local == NO_NEIGHBOR {
                        b[c] += bq[c] as f64;
                    }
                }
                nb[slot] = q_local;
            }
            neighbors.push(nb);
            rhs.push(b);
        }
        Ok(Self {
            pixels,
            neighbors,
            rhs,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn rhs_norm(&self) -> f64 {
        self.rhs
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `b − A f` per unknown and channel.
    pub fn residual(&self, f: &[[f64; 3]]) -> Vec<[f64; 3]> {
        (0..self.len())
            .map(|k| {
                let mut r = self.rhs[k];
                for c in 0..3 {
                    r[c] -= 4.0 * f[k][c];
                }
                for &q in &self.neighbors[k] {
                    if q != NO_NEIGHBOR {
                        for c in 0..3 {
                            r[c] += f[q as usize][c];
                        }
                    }
                }
                r
            })
            .collect()
    }

    fn relative_residual(&self, f: &[[f64; 3]], b_norm: f64) -> f64 {
        let r: f64 = self
            .residual(f)
            .iter()
            .flat_map(|r| r.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if b_norm > 0.0 {
            r / b_norm
        } else {
            r
        }
    }

    /// Successive over-relaxation from the initial guess `f` until the
    /// relative residual drops to `tol` or `max_iter` sweeps have run.
    pub fn solve(&self, f: &mut [[f64; 3]], tol: f64, max_iter: usize) -> PoissonReport {
        let b_norm = self.rhs_norm();
        let mut rel = self.relative_residual(f, b_norm);
        let mut checkpoints = vec![(0, rel)];
        let mut iterations = 0;
        while rel > tol && iterations < max_iter {
            for k in 0..self.len() {
                let mut sum = self.rhs[k];
                for &q in &self.neighbors[k] {
                    if q != NO_NEIGHBOR {
                        let fq = f[q as usize];
                        for c in 0..3 {
                            sum[c] += fq[c];
                        }
                    }
                }
                for c in 0..3 {
                    f[k][c] += SOR_OMEGA * (sum[c] / 4.0 - f[k][c]);
                }
            }
            iterations += 1;
            if iterations % RESIDUAL_CHECK_EVERY == 0 || iterations == max_iter {
                rel = self.relative_residual(f, b_norm);
                checkpoints.push((iterations, rel));
            }
        }
        PoissonReport {
            iterations,
            converged: rel <= tol,
            relative_residual: rel,
            checkpoints,
        }
    }
}

/// Seamless cloning of `fg` into `bg`. Pixels outside the region are left
/// untouched; when the initial guess (the background itself) already meets
/// the tolerance nothing is written.
pub fn poisson_blend(
    bg: &mut Rgb,
    fg: &Rgba,
    origin: (i64, i64),
    params: &PoissonParams,
    tau: f32,
) -> Result<PoissonReport> {
    let problem = PoissonProblem::new(bg, fg, origin, tau, params.mixed_gradients)?;
    let mut f: Vec<[f64; 3]> = problem
        .pixels
        .iter()
        .map(|&i| bg.data[i].map(|v| v as f64))
        .collect();
    let report = problem.solve(&mut f, params.tol, params.max_iter);
    if !report.converged {
        warn!(
            "poisson solve stopped at relative residual {:.3e} after {} iterations",
            report.relative_residual, report.iterations
        );
    }
    if report.iterations > 0 {
        for (k, &i) in problem.pixels.iter().enumerate() {
            bg.data[i] = f[k].map(|v| v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_label: String,
    pub asset_id: String,
    /// Tight box of the full footprint (alpha ≥ τ), clipped to the image.
    pub amodal_box: Option<PixelBox>,
    /// Tight box of the unoccluded footprint.
    pub visible_box: Option<PixelBox>,
    pub visible_pixels: u64,
    pub pose: Option<AssetView>,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub image: Rgb,
    /// Per-pixel instance id: 0 background, `k` the k-th drawn placement.
    pub labels: Vec<u16>,
    pub instances: Vec<Instance>,
    pub recipe: SceneRecipe,
}

impl AnnotatedSample {
    /// Visible mask of instance `k` (0-based draw order).
    pub fn visible_mask(&self, k: usize) -> Mask {
        let id = k as u16 + 1;
        Mask {
            width: self.image.width,
            height: self.image.height,
            data: self.labels.iter().map(|&l| l == id).collect(),
        }
    }
}

pub fn render(
    recipe: &SceneRecipe,
    config: &GenConfig,
    library: &AssetLibrary,
    backgrounds: &[Background],
) -> Result<AnnotatedSample> {
    let bg = backgrounds
        .iter()
        .find(|b| b.name == recipe.background)
        .ok_or_else(|| Error::NotFound(format!("background `{}`", recipe.background)))?;
    if recipe.placements.len() >= u16::MAX as usize {
        return Err(Error::Capacity(format!(
            "{} placements exceed the 16-bit label range",
            recipe.placements.len()
        )));
    }
    let mut image = bg.image.clone();
    let (w, h) = (image.width as i64, image.height as i64);
    let mut labels = vec![0u16; image.data.len()];
    let mut instances = Vec::with_capacity(recipe.placements.len());

    for (k, p) in recipe.placements.iter().enumerate() {
        let asset = library.find(&p.class_label, &p.asset_id).ok_or_else(|| {
            Error::NotFound(format!("asset `{}/{}`", p.class_label, p.asset_id))
        })?;
        let fg = transform_asset(&asset.rgba, p.scale, p.rotation)?;
        let fg = brightness_adjust(&fg, p.brightness_factor)?;
        let origin = placed_origin(p.center, fg.width, fg.height);
        match config.blend {
            BlendMode::Feather { sigma } => {
                alpha_blend(&mut image, &fg, origin, sigma);
            }
            BlendMode::Poisson(params) => {
                match poisson_blend(&mut image, &fg, origin, &params, config.matte_threshold) {
                    Ok(_) => {}
                    Err(Error::RegionOutOfBounds) => {
                        let sigma = match BlendMode::default() {
                            BlendMode::Feather { sigma } => sigma,
                            BlendMode::Poisson(_) => 0.0,
                        };
                        warn!("placement {k} touches the border; feathering instead of poisson");
                        alpha_blend(&mut image, &fg, origin, sigma);
                    }
                    Err(Error::InvalidInput(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }

        let id = k as u16 + 1;
        let mut amodal = BoxAccumulator::default();
        for fy in 0..fg.height as i64 {
            let y = origin.1 + fy;
            if y < 0 || y >= h {
                continue;
            }
            for fx in 0..fg.width as i64 {
                let x = origin.0 + fx;
                if x < 0 || x >= w {
                    continue;
                }
                if fg.data[(fy * fg.width as i64 + fx) as usize][3] >= config.matte_threshold {
                    labels[(y * w + x) as usize] = id;
                    amodal.add(x as u32, y as u32);
                }
            }
        }
        instances.push(Instance {
            class_label: p.class_label.clone(),
            asset_id: p.asset_id.clone(),
            amodal_box: amodal.finish(),
            visible_box: None,
            visible_pixels: 0,
            pose: asset.view,
            scale: p.scale,
        });
    }

    let mut visible = vec![BoxAccumulator::default(); instances.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            let k = l as usize - 1;
            visible[k].add((i as i64 % w) as u32, (i as i64 / w) as u32);
            instances[k].visible_pixels += 1;
        }
    }
    for (inst, acc) in instances.iter_mut().zip(visible) {
        inst.visible_box = acc.finish();
    }
    Ok(AnnotatedSample {
        image,
        labels,
        instances,
        recipe: recipe.clone(),
    })
}

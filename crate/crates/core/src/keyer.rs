//! Green-screen keying: color-difference alpha, despill and cutout extraction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::assetlib::{AssetSource, AssetView, ForegroundAsset};
use crate::error::{Error, Result};
use crate::raster::{BoxAccumulator, Rgb, Rgba};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyerParams {
    /// Green dominance at which alpha starts falling below 1.
    pub ramp_low: f32,
    /// Green dominance at which alpha reaches 0.
    pub ramp_high: f32,
    pub despill_enabled: bool,
    /// Foreground components smaller than this many pixels are discarded.
    pub min_component_area: usize,
    /// Alpha level that defines the binary foreground used for cropping.
    pub matte_threshold: f32,
}

impl Default for KeyerParams {
    fn default() -> Self {
        Self {
            ramp_low: 0.05,
            ramp_high: 0.25,
            despill_enabled: true,
            min_component_area: 64,
            matte_threshold: 0.5,
        }
    }
}

impl KeyerParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.ramp_low && self.ramp_low < self.ramp_high && self.ramp_high <= 1.0) {
            return Err(Error::Config(format!(
                "keyer ramp must satisfy 0 <= low < high <= 1, got [{}, {}]",
                self.ramp_low, self.ramp_high
            )));
        }
        if !(self.matte_threshold > 0.0 && self.matte_threshold < 1.0) {
            return Err(Error::Config(format!(
                "matte threshold must lie in (0, 1), got {}",
                self.matte_threshold
            )));
        }
        Ok(())
    }

    /// Alpha for a single pixel.
    #[inline]
    pub fn alpha_of(&self, px: [f32; 3]) -> f32 {
        let d = green_dominance(px);
        if d <= self.ramp_low {
            1.0
        } else if d >= self.ramp_high {
            0.0
        } else {
            1.0 - (d - self.ramp_low) / (self.ramp_high - self.ramp_low)
        }
    }
}

#[inline]
pub fn green_dominance(px: [f32; 3]) -> f32 {
    px[1] - px[0].max(px[2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatte {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl AlphaMatte {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }
}

pub fn compute_alpha(frame: &Rgb, params: &KeyerParams) -> Result<AlphaMatte> {
    if frame.is_empty() {
        return Err(Error::InvalidInput("empty frame".into()));
    }
    Ok(AlphaMatte {
        width: frame.width,
        height: frame.height,
        values: frame.data.iter().map(|&px| params.alpha_of(px)).collect(),
    })
}

/// Clamps green to `max(r, b)` wherever the matte is not fully opaque.
pub fn despill(frame: &Rgb, matte: &AlphaMatte) -> Result<Rgb> {
    if frame.width != matte.width || frame.height != matte.height {
        return Err(Error::InvalidInput(format!(
            "matte {}x{} does not match frame {}x{}",
            matte.width, matte.height, frame.width, frame.height
        )));
    }
    let data = frame
        .data
        .iter()
        .zip(&matte.values)
        .map(|(&[r, g, b], &a)| {
            if a < 1.0 {
                [r, g.min(r.max(b)), b]
            } else {
                [r, g, b]
            }
        })
        .collect();
    Ok(Rgb {
        width: frame.width,
        height: frame.height,
        data,
    })
}

/// Labels 8-connected components of `fg`. Returns per-pixel labels
/// (0 = background, components numbered from 1) and component sizes indexed by
/// label - 1.
pub fn label_components(width: u32, height: u32, fg: &[bool]) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (width as i64, height as i64);
    let mut labels = vec![0u32; fg.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i as i64) % w, (i as i64) / w);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if fg[j] && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keys a frame and crops the surviving foreground into a straight-alpha
/// cutout. Channels are rounded to 16-bit levels so the asset survives a PNG
/// round trip unchanged.
pub fn extract_asset(
    frame: &Rgb,
    params: &KeyerParams,
    label: &str,
    view: Option<AssetView>,
    source: AssetSource,
) -> Result<ForegroundAsset> {
    params.validate()?;
    let mut matte = compute_alpha(frame, params)?;
    let rgb = if params.despill_enabled {
        despill(frame, &matte)?
    } else {
        frame.clone()
    };

    let fg: Vec<bool> = matte
        .values
        .iter()
        .map(|&a| a >= params.matte_threshold)
        .collect();
    let (labels, sizes) = label_components(frame.width, frame.height, &fg);
    let keep: Vec<bool> = sizes
        .iter()
        .map(|&s| s >= params.min_component_area.max(1))
        .collect();

    let mut bbox = BoxAccumulator::default();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        if keep[l as usize - 1] {
            bbox.add(i as u32 % frame.width, i as u32 / frame.width);
        } else {
            matte.values[i] = 0.0;
        }
    }
    let bbox = bbox.finish().ok_or(Error::EmptyForeground)?;

    let mut data = Vec::with_capacity(bbox.area() as usize);
    for y in bbox.y_min..=bbox.y_max {
        for x in bbox.x_min..=bbox.x_max {
            let [r, g, b] = rgb.get(x, y);
            data.push([r, g, b, matte.get(x, y)]);
        }
    }
    let rgba = Rgba::from_vec(bbox.width(), bbox.height(), data)?.quantized16();
    Ok(ForegroundAsset {
        id: String::new(),
        class_label: label.to_string(),
        rgba,
        view,
        source,
    })
}

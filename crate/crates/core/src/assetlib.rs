//! On-disk asset library, viewpoint histograms and asset sampling.
//!
//! Layout: `<root>/<class>/<id>.png` (16-bit RGBA, straight alpha) with an
//! optional `<root>/<class>/<id>.json` sidecar.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mocap::ViewSample;
use crate::raster::Rgba;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssetView {
    /// Unit viewing direction, object frame.
    pub v: Vec3,
    pub depth_m: f64,
}

impl From<&ViewSample> for AssetView {
    fn from(s: &ViewSample) -> Self {
        Self {
            v: s.v,
            depth_m: s.depth,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetSource {
    pub video: String,
    pub frame: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundAsset {
    pub id: String,
    pub class_label: String,
    pub rgba: Rgba,
    pub view: Option<AssetView>,
    pub source: AssetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    id: String,
    class: String,
    view: Option<AssetView>,
    source: AssetSource,
}

fn valid_component(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\'])
}

/// Writes the asset and its sidecar, returning the id actually used. Colliding
/// ids get a numeric suffix. Channels are stored at 16-bit precision.
pub fn store_asset(library_root: &Path, asset: &ForegroundAsset) -> Result<String> {
    write_asset(library_root, asset, true)
}

/// Like [`store_asset`] but replaces an existing asset with the same id, so
/// repeated extraction runs leave identical libraries.
pub fn replace_asset(library_root: &Path, asset: &ForegroundAsset) -> Result<String> {
    write_asset(library_root, asset, false)
}

fn write_asset(library_root: &Path, asset: &ForegroundAsset, unique: bool) -> Result<String> {
    if asset.class_label.is_empty() {
        return Err(Error::InvalidInput("empty class label".into()));
    }
    if !valid_component(&asset.class_label) {
        return Err(Error::InvalidInput(format!(
            "class label `{}` is not a valid directory name",
            asset.class_label
        )));
    }
    let base = if asset.id.is_empty() {
        let video = if asset.source.video.is_empty() {
            "asset"
        } else {
            asset.source.video.as_str()
        };
        format!("{}_{:06}", video.replace(['/', '\\'], "_"), asset.source.frame)
    } else {
        asset.id.replace(['/', '\\'], "_")
    };
    let dir = library_root.join(&asset.class_label);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut id = base.clone();
    let mut n = 0;
    while unique && (dir.join(format!("{id}.png")).exists() || dir.join(format!("{id}.json")).exists()) {
        n += 1;
        id = format!("{base}-{n}");
    }

    asset.rgba.save_png16(&dir.join(format!("{id}.png")))?;
    let sidecar = Sidecar {
        id: id.clone(),
        class: asset.class_label.clone(),
        view: asset.view,
        source: asset.source.clone(),
    };
    let path = dir.join(format!("{id}.json"));
    let text = serde_json::to_string_pretty(&serde_json::to_value(&sidecar)?)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(id)
}

/// Equal-area sphere partition: `n_az` azimuth arcs times `n_el` slabs of
/// equal height in `z = sin(latitude)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereGrid {
    pub n_az: usize,
    pub n_el: usize,
}

impl Default for SphereGrid {
    fn default() -> Self {
        Self { n_az: 36, n_el: 18 }
    }
}

impl SphereGrid {
    pub fn len(&self) -> usize {
        self.n_az * self.n_el
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(azimuth index, elevation index)` for a direction.
    pub fn bin_of(&self, v: Vec3) -> (usize, usize) {
        let az = v[1].atan2(v[0]);
        let ia = (((az + PI) / (2.0 * PI)) * self.n_az as f64).floor() as usize;
        let z = v[2].clamp(-1.0, 1.0);
        let ie = (((z + 1.0) / 2.0) * self.n_el as f64).floor() as usize;
        (ia.min(self.n_az - 1), ie.min(self.n_el - 1))
    }

    /// Flat index, row-major by elevation.
    pub fn flat(&self, ia: usize, ie: usize) -> usize {
        ie * self.n_az + ia
    }

    /// Solid angle of a bin from its latitude bounds.
    pub fn bin_area(&self, _ia: usize, ie: usize) -> f64 {
        let dphi = 2.0 * PI / self.n_az as f64;
        let lat = |k: usize| (-1.0 + 2.0 * k as f64 / self.n_el as f64).clamp(-1.0, 1.0).asin();
        dphi * (lat(ie + 1).sin() - lat(ie).sin())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereHistogram {
    pub n_az: usize,
    pub n_el: usize,
    /// Row-major by elevation: `counts[ie * n_az + ia]`.
    pub counts: Vec<u64>,
    /// Assets without a pose, not binned.
    pub excluded: usize,
}

impl SphereHistogram {
    pub fn grid(&self) -> SphereGrid {
        SphereGrid {
            n_az: self.n_az,
            n_el: self.n_el,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_views<'a>(grid: SphereGrid, views: impl IntoIterator<Item = Option<&'a AssetView>>) -> Self {
        let mut counts = vec![0u64; grid.len()];
        let mut excluded = 0;
        for view in views {
            match view {
                Some(v) => {
                    let (ia, ie) = grid.bin_of(v.v);
                    counts[grid.flat(ia, ie)] += 1;
                }
                None => excluded += 1,
            }
        }
        Self {
            n_az: grid.n_az,
            n_el: grid.n_el,
            counts,
            excluded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    Random,
    /// Occupied viewpoint bin first, then an asset within it.
    UniformViewpoint,
}

#[derive(Debug, Clone)]
struct ClassIndex {
    assets: Vec<ForegroundAsset>,
    /// Occupied bins, ascending flat index, with member asset positions.
    bins: Vec<(usize, Vec<usize>)>,
}

/// Immutable in-memory index of assets by class.
#[derive(Debug, Clone)]
pub struct AssetLibrary {
    grid: SphereGrid,
    classes: BTreeMap<String, ClassIndex>,
    /// Entries skipped during load.
    pub skipped: usize,
}

impl AssetLibrary {
    pub fn from_assets(assets: impl IntoIterator<Item = ForegroundAsset>) -> Self {
        Self::with_grid(assets, SphereGrid::default())
    }

    pub fn with_grid(assets: impl IntoIterator<Item = ForegroundAsset>, grid: SphereGrid) -> Self {
        let mut by_class: BTreeMap<String, Vec<ForegroundAsset>> = BTreeMap::new();
        for a in assets {
            by_class.entry(a.class_label.clone()).or_default().push(a);
        }
        let classes = by_class
            .into_iter()
            .map(|(name, assets)| {
                let mut bins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, a) in assets.iter().enumerate() {
                    if let Some(view) = &a.view {
                        let (ia, ie) = grid.bin_of(view.v);
                        bins.entry(grid.flat(ia, ie)).or_default().push(i);
                    }
                }
                (
                    name,
                    ClassIndex {
                        assets,
                        bins: bins.into_iter().collect(),
                    },
                )
            })
            .collect();
        Self {
            grid,
            classes,
            skipped: 0,
        }
    }

    pub fn grid(&self) -> SphereGrid {
        self.grid
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn assets(&self, class_label: &str) -> Result<&[ForegroundAsset]> {
        self.classes
            .get(class_label)
            .map(|c| c.assets.as_slice())
            .ok_or_else(|| Error::NotFound(format!("class `{class_label}`")))
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(|c| c.assets.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn find(&self, class_label: &str, id: &str) -> Option<&ForegroundAsset> {
        self.classes
            .get(class_label)?
            .assets
            .iter()
            .find(|a| a.id == id)
    }
}

/// Indexes every `.png` under `<root>/<class>/`. Unreadable images and
/// malformed sidecars are skipped and counted in [`AssetLibrary::skipped`].
pub fn load_library(root: &Path) -> Result<AssetLibrary> {
    load_library_with_grid(root, SphereGrid::default())
}

pub fn load_library_with_grid(root: &Path, grid: SphereGrid) -> Result<AssetLibrary> {
    let mut class_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            class_dirs.push(entry.path());
        }
    }
    class_dirs.sort();

    let mut assets = Vec::new();
    let mut skipped = 0;
    for dir in class_dirs {
        let class = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut pngs: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        pngs.sort();
        for png in pngs {
            let stem = png.file_stem().unwrap().to_string_lossy().into_owned();
            let sidecar_path = png.with_extension("json");
            let sidecar = if sidecar_path.exists() {
                match fs::read_to_string(&sidecar_path)
                    .map_err(|e| e.to_string())
                    .and_then(|t| serde_json::from_str::<Sidecar>(&t).map_err(|e| e.to_string()))
                {
                    Ok(s) => Some(s),
                    Err(e) => {
                        warn!("skipping {}: {e}", sidecar_path.display());
                        skipped += 1;
                        continue;
                    }
                }
            } else {
                None
            };
            let rgba = match Rgba::load(&png) {
                Ok(r) => r,
                Err(e) => {
                    warn!("skipping {}: {e}", png.display());
                    skipped += 1;
                    continue;
                }
            };
            let (id, view, source) = match sidecar {
                Some(s) => (s.id, s.view, s.source),
                None => (stem, None, AssetSource::default()),
            };
            assets.push(ForegroundAsset {
                id,
                class_label: class.clone(),
                rgba,
                view,
                source,
            });
        }
    }
    if skipped > 0 {
        warn!("asset library {}: skipped {skipped} entries", root.display());
    }
    let mut lib = AssetLibrary::with_grid(assets, grid);
    lib.skipped = skipped;
    Ok(lib)
}

pub fn viewing_histogram(library: &AssetLibrary, class_label: &str) -> Result<SphereHistogram> {
    let assets = library.assets(class_label)?;
    Ok(SphereHistogram::from_views(
        library.grid,
        assets.iter().map(|a| a.view.as_ref()),
    ))
}

pub fn sample_asset<'a, R: Rng + ?Sized>(
    library: &'a AssetLibrary,
    class_label: &str,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Result<&'a ForegroundAsset> {
    let class = library
        .classes
        .get(class_label)
        .filter(|c| !c.assets.is_empty())
        .ok_or_else(|| Error::NotFound(format!("class `{class_label}` has no assets")))?;
    match strategy {
        SamplingStrategy::Random => Ok(&class.assets[rng.gen_range(0..class.assets.len())]),
        SamplingStrategy::UniformViewpoint => {
            if class.bins.is_empty() {
                return Err(Error::StrategyUnavailable(format!(
                    "class `{class_label}` has no posed assets"
                )));
            }
            let (_, members) = &class.bins[rng.gen_range(0..class.bins.len())];
            Ok(&class.assets[members[rng.gen_range(0..members.len())]])
        }
    }
}

/// Horizontal pixels per azimuth bin in the exported heatmap.
fn heatmap_width(n_az: usize) -> u32 {
    let cell = 360usize.div_ceil(n_az).max(1);
    (cell * n_az) as u32
}

/// Renders the histogram as an equirectangular grayscale image (longitude
/// left to right from -180°, latitude top to bottom from +90°), intensity
/// proportional to the bin count with round-half-up to 8 bits.
pub fn render_heatmap(hist: &SphereHistogram) -> GrayImage {
    let grid = hist.grid();
    let width = heatmap_width(hist.n_az);
    let height = (width / 2).max(1);
    let max = hist.counts.iter().copied().max().unwrap_or(0);
    GrayImage::from_fn(width, height, |x, y| {
        if max == 0 {
            return Luma([0]);
        }
        let lon = (x as f64 + 0.5) / width as f64 * 2.0 * PI - PI;
        let lat = PI / 2.0 - (y as f64 + 0.5) / height as f64 * PI;
        let v = [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()];
        let (ia, ie) = grid.bin_of(v);
        let c = hist.counts[grid.flat(ia, ie)];
        Luma([((255 * 2 * c + max) / (2 * max)) as u8])
    })
}

pub fn export_heatmap(hist: &SphereHistogram, path: &Path) -> Result<()> {
    render_heatmap(hist)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

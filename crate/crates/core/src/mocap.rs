//! Motion-capture tracks, video/mocap synchronization and viewing geometry.
//!
//! Time bases: a [`PoseTrack`] lives in mocap seconds, frame sequences in video
//! seconds (`frame_index / fps`). A [`SyncResult`] offset converts between them:
//! `t_mocap = t_video + offset`.

use std::io::Read;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Quat, Vec3};
use crate::raster::Rgb;

/// Quaternions further than this from unit norm are rejected.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Correlation peaks below this are flagged as low confidence.
pub const LOW_CONFIDENCE_PEAK: f64 = 0.2;

pub const POSE_CSV_HEADER: [&str; 8] = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"];

/// Rigid body pose: `p` is the body origin in world coordinates and `q`
/// rotates body-frame vectors into the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: f64,
    pub p: Vec3,
    pub q: Quat,
}

impl Pose {
    pub fn identity(t: f64) -> Self {
        Self {
            t,
            p: [0.0; 3],
            q: Quat::IDENTITY,
        }
    }

    pub fn inverse(&self) -> Self {
        let qi = self.q.conjugate();
        Self {
            t: self.t,
            p: geometry::scale(qi.rotate(self.p), -1.0),
            q: qi,
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            t: self.t,
            p: geometry::add(self.q.rotate(other.p), self.p),
            q: self.q.mul(&other.q),
        }
    }

    pub fn transform_point(&self, v: Vec3) -> Vec3 {
        geometry::add(self.q.rotate(v), self.p)
    }

    fn check_unit(&self, what: &str) -> Result<()> {
        let n = self.q.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "{what} quaternion has norm {n}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subject {
    Camera,
    Object,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub subject: Subject,
    pub samples: Vec<Pose>,
    /// Mean sample rate in Hz.
    pub rate: f64,
    /// Rows dropped while parsing.
    pub dropped: usize,
}

impl PoseTrack {
    pub fn new(subject: Subject, samples: Vec<Pose>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "pose track needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if samples.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidInput(
                "pose timestamps must be strictly increasing".into(),
            ));
        }
        let span = samples[samples.len() - 1].t - samples[0].t;
        Ok(Self {
            subject,
            rate: (samples.len() - 1) as f64 / span,
            samples,
            dropped: 0,
        })
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    pub fn span(&self) -> f64 {
        self.end() - self.start()
    }
}

/// Reads a pose CSV (`t,px,py,pz,qw,qx,qy,qz`, `#` comments allowed).
pub fn parse_pose_track(path: &Path, subject: Subject) -> Result<PoseTrack> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_pose_csv(&text, subject)
}

pub fn parse_pose_csv(text: &str, subject: Subject) -> Result<PoseTrack> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("pose csv header: {e}")))?;
    if header.iter().ne(POSE_CSV_HEADER) {
        return Err(Error::Format(format!(
            "expected header `{}`, found `{}`",
            POSE_CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut samples: Vec<Pose> = Vec::new();
    let mut dropped = 0;
    for record in reader.records() {
        let Ok(record) = record else {
            dropped += 1;
            continue;
        };
        let values: Vec<f64> = record
            .iter()
            .map(|f| f.parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        if values.len() != 8 || values.iter().any(|v| !v.is_finite()) {
            dropped += 1;
            continue;
        }
        let q = Quat::new(values[4], values[5], values[6], values[7]);
        let n = q.norm();
        let t = values[0];
        if n == 0.0 || samples.last().is_some_and(|last| t <= last.t) {
            dropped += 1;
            continue;
        }
        samples.push(Pose {
            t,
            p: [values[1], values[2], values[3]],
            q: q.normalized(),
        });
    }
    if dropped > 0 {
        warn!("pose track: dropped {dropped} invalid rows");
    }
    let mut track = PoseTrack::new(subject, samples)?;
    track.dropped = dropped;
    Ok(track)
}

/// Pose at time `t`: linear in position, shortest-arc slerp in rotation.
pub fn interpolate_pose(track: &PoseTrack, t: f64) -> Result<Pose> {
    let s = &track.samples;
    if !(t >= track.start() && t <= track.end()) {
        return Err(Error::OutOfRange {
            t,
            start: track.start(),
            end: track.end(),
        });
    }
    // first sample with timestamp > t
    let hi = s.partition_point(|p| p.t <= t);
    if hi > 0 && s[hi - 1].t == t {
        return Ok(s[hi - 1]);
    }
    let (a, b) = (&s[hi - 1], &s[hi]);
    let u = (t - a.t) / (b.t - a.t);
    Ok(Pose {
        t,
        p: geometry::lerp(a.p, b.p, u),
        q: a.q.slerp(&b.q, u),
    })
}

/// A uniformly sampled scalar signal. Sample `k` is stamped at
/// `start + k / rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub start: f64,
    pub rate: f64,
    pub values: Vec<f64>,
}

impl Signal {
    pub fn new(start: f64, rate: f64, values: Vec<f64>) -> Self {
        Self {
            start,
            rate,
            values,
        }
    }

    /// Wraps frame-difference values; value `k` spans frames `k` and `k + 1`
    /// and is stamped at the midpoint of that interval.
    pub fn from_frame_motion(values: Vec<f64>, fps: f64) -> Self {
        Self::new(0.5 / fps, fps, values)
    }

    pub fn end(&self) -> f64 {
        self.start + (self.values.len().saturating_sub(1)) as f64 / self.rate
    }

    /// Linear interpolation onto `rate`, covering this signal's own span.
    pub fn resample(&self, rate: f64) -> Signal {
        if rate == self.rate {
            return self.clone();
        }
        let n = ((self.end() - self.start) * rate + 1e-9).floor() as usize + 1;
        let last = self.values.len() - 1;
        let values = (0..n)
            .map(|k| {
                let x = k as f64 * self.rate / rate;
                let i = (x.floor() as usize).min(last);
                if i == last {
                    self.values[last]
                } else {
                    let u = x - i as f64;
                    self.values[i] * (1.0 - u) + self.values[i + 1] * u
                }
            })
            .collect();
        Signal::new(self.start, rate, values)
    }

    fn is_constant(&self) -> bool {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        !(hi - lo > 1e-12 * (1.0 + hi.abs().max(lo.abs())))
    }
}

/// Angular speed in rad/s, resampled uniformly at `sample_rate`. Sample `k`
/// measures the rotation between `t0 + k/rate` and `t0 + (k+1)/rate`, and is
/// stamped at the midpoint.
pub fn angular_speed_signal(track: &PoseTrack, sample_rate: f64) -> Result<Signal> {
    if !(sample_rate > 0.0) {
        return Err(Error::InvalidInput(format!("sample rate {sample_rate}")));
    }
    let n = (track.span() * sample_rate + 1e-9).floor() as usize;
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "track spans {:.3} s, need at least {:.3} s",
            track.span(),
            2.0 / sample_rate
        )));
    }
    let dt = 1.0 / sample_rate;
    let t0 = track.start();
    let at = |k: usize| interpolate_pose(track, (t0 + k as f64 * dt).min(track.end()));
    let mut prev = at(0)?.q;
    let mut values = Vec::with_capacity(n);
    for k in 1..=n {
        let q = at(k)?.q;
        values.push(prev.angle_to(&q) / dt);
        prev = q;
    }
    Ok(Signal::new(t0 + 0.5 * dt, sample_rate, values))
}

#[inline]
fn gray8(px: [f32; 3]) -> f64 {
    (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0 * 255.0
}

/// Mean absolute grayscale difference between consecutive frames, in 8-bit
/// intensity units.
pub fn frame_motion_from_rasters(frames: &[Rgb]) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    frames
        .windows(2)
        .map(|w| frame_difference(&w[0], &w[1]))
        .collect()
}

fn frame_difference(a: &Rgb, b: &Rgb) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidInput(format!(
            "frame size changed from {}x{} to {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&p, &q)| (gray8(q) - gray8(p)).abs())
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// Same as [`frame_motion_from_rasters`] but streams frames from disk.
pub fn frame_motion_signal(frames: &[PathBuf]) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    let mut prev = Rgb::load(&frames[0])?;
    let mut out = Vec::with_capacity(frames.len() - 1);
    for path in &frames[1..] {
        let next = Rgb::load(path)?;
        out.push(frame_difference(&prev, &next)?);
        prev = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    /// Mocap time minus video time, seconds.
    pub offset_s: f64,
    pub peak_correlation: f64,
    pub common_rate_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Finds the offset in `[-window, window]` seconds maximizing the normalized
/// cross-correlation of the two mean-removed signals at the higher of their
/// two rates.
pub fn sync_offset(mocap: &Signal, video: &Signal, search_window: f64) -> Result<SyncResult> {
    for (name, s) in [("mocap", mocap), ("video", video)] {
        if s.values.len() < 2 || !(s.rate > 0.0) {
            return Err(Error::InsufficientData(format!("{name} signal too short")));
        }
        if s.is_constant() {
            return Err(Error::DegenerateSignal(format!("{name} signal is constant")));
        }
    }
    let rate = mocap.rate.max(video.rate);
    let centered = |s: &Signal| {
        let mut r = s.resample(rate);
        let mean = r.values.iter().sum::<f64>() / r.values.len() as f64;
        r.values.iter_mut().for_each(|v| *v -= mean);
        r
    };
    let m = centered(mocap);
    let v = centered(video);
    let energy = |s: &Signal| s.values.iter().map(|x| x * x).sum::<f64>();
    let denom = (energy(&m) * energy(&v)).sqrt();
    if denom == 0.0 {
        return Err(Error::DegenerateSignal("zero-energy signal".into()));
    }

    // offset(lag) = base + lag / rate, where m[i + lag] pairs with v[i]
    let base = m.start - v.start;
    let lag_lo = ((-search_window - base) * rate - 1e-9).ceil() as i64;
    let lag_hi = ((search_window - base) * rate + 1e-9).floor() as i64;
    if lag_lo > lag_hi {
        return Err(Error::InvalidInput(format!(
            "search window ±{search_window} s excludes every lag"
        )));
    }
    let (nm, nv) = (m.values.len() as i64, v.values.len() as i64);
    let mut best = (f64::NEG_INFINITY, 0i64);
    for lag in lag_lo..=lag_hi {
        let i_lo = 0.max(-lag);
        let i_hi = nv.min(nm - lag);
        let mut acc = 0.0;
        for i in i_lo..i_hi {
            acc += m.values[(i + lag) as usize] * v.values[i as usize];
        }
        let c = acc / denom;
        if c > best.0 {
            best = (c, lag);
        }
    }
    let (peak, lag) = best;
    let warning = (peak < LOW_CONFIDENCE_PEAK).then(|| {
        let msg = format!("low-confidence synchronization: peak correlation {peak:.3}");
        warn!("{msg}");
        msg
    });
    Ok(SyncResult {
        offset_s: base + lag as f64 / rate,
        peak_correlation: peak.min(1.0),
        common_rate_hz: rate,
        warning,
    })
}

/// Transform mapping object-frame coordinates to camera-frame coordinates.
pub fn relative_pose(camera: &Pose, object: &Pose) -> Result<Pose> {
    camera.check_unit("camera")?;
    object.check_unit("object")?;
    let mut rel = camera.inverse().compose(object);
    rel.t = camera.t;
    Ok(rel)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSample {
    pub frame_index: u64,
    /// Unit direction from the object origin toward the camera, object frame.
    pub v: Vec3,
    /// Camera-to-object distance in meters.
    pub depth: f64,
    pub rel: Pose,
}

pub fn viewing_sample(rel: &Pose, frame_index: u64) -> Result<ViewSample> {
    let depth = geometry::norm(rel.p);
    if !(depth > 0.0) {
        return Err(Error::DegenerateGeometry(
            "camera and object origins coincide".into(),
        ));
    }
    let c = geometry::scale(rel.q.conjugate().rotate(rel.p), -1.0);
    Ok(ViewSample {
        frame_index,
        v: geometry::scale(c, 1.0 / geometry::norm(c)),
        depth,
        rel: *rel,
    })
}

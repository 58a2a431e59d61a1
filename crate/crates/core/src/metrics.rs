//! Detection (AP / precision / recall / F1 / mAP) and segmentation
//! (IoU / FN rate / FP rate) scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::sampler::LabeledSet;

/// Axis-aligned box with exclusive maxima: area is `(x_max - x_min) * (y_max - y_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxF {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BoxF {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxF> for [f64; 4] {
    fn from(b: BoxF) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoxF {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max >= self.x_min
            && self.y_max >= self.y_min
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

pub fn box_iou(a: &BoxF, b: &BoxF) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::InvalidInput(format!("degenerate box {bx:?}")));
        }
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BoxF,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// True positive flag per prediction, aligned with the input order.
    pub is_tp: Vec<bool>,
    /// Ground-truth instances per class.
    pub n_gt: BTreeMap<String, usize>,
    pub unmatched_gt: usize,
}

/// Indices of `preds` sorted by descending confidence, stable on ties.
fn ranked(preds: &[Detection], members: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = members.collect();
    idx.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    idx
}

/// Greedy per-image, per-class matching: predictions in descending confidence
/// each claim the unmatched ground truth of highest IoU (≥ `iou_thresh`,
/// lowest index on ties).
pub fn match_detections(preds: &[Detection], gts: &LabeledSet, iou_thresh: f64) -> MatchOutcome {
    let mut n_gt: BTreeMap<String, usize> = BTreeMap::new();
    for img in &gts.images {
        for inst in &img.instances {
            *n_gt.entry(inst.class.clone()).or_default() += 1;
        }
    }
    let images: BTreeMap<&str, usize> = gts
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.file_name.as_str(), i))
        .collect();

    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        groups
            .entry((p.image.as_str(), p.class.as_str()))
            .or_default()
            .push(i);
    }

    let mut is_tp = vec![false; preds.len()];
    let mut matched_total = 0;
    for ((image, class), members) in groups {
        let Some(&img_i) = images.get(image) else {
            continue;
        };
        let candidates: Vec<_> = gts.images[img_i]
            .instances
            .iter()
            .filter(|inst| inst.class == class)
            .collect();
        let mut taken = vec![false; candidates.len()];
        for pi in ranked(preds, members.into_iter()) {
            let mut best: Option<(usize, f64)> = None;
            for (g, inst) in candidates.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let Ok(iou) = box_iou(&preds[pi].bbox, &inst.bbox) else {
                    continue;
                };
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                is_tp[pi] = true;
                matched_total += 1;
            }
        }
    }
    let total_gt: usize = n_gt.values().sum();
    MatchOutcome {
        is_tp,
        n_gt,
        unmatched_gt: total_gt - matched_total,
    }
}

/// All-point AP: area under the precision envelope of a ranked TP/FP list.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::UndefinedMetric("AP with no ground truth".into()));
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked_tp.len());
    for (k, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // envelope: precision at rank k becomes the best precision at any later rank
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with ground truth.
    pub map: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn evaluate_detection(
    preds: &[Detection],
    gts: &LabeledSet,
    iou_thresh: f64,
    confidence_thresh: f64,
) -> EvalReport {
    let outcome = match_detections(preds, gts, iou_thresh);
    let mut class_names: Vec<String> = gts.classes.clone();
    for p in preds {
        if !class_names.contains(&p.class) {
            class_names.push(p.class.clone());
        }
    }
    for c in outcome.n_gt.keys() {
        if !class_names.contains(c) {
            class_names.push(c.clone());
        }
    }

    let mut classes = Vec::with_capacity(class_names.len());
    for class in class_names {
        let n_gt = outcome.n_gt.get(&class).copied().unwrap_or(0);
        let order = ranked(
            preds,
            preds
                .iter()
                .enumerate()
                .filter(|(_, p)| p.class == class)
                .map(|(i, _)| i),
        );
        let ranked_tp: Vec<bool> = order.iter().map(|&i| outcome.is_tp[i]).collect();
        let ap = if n_gt == 0 {
            warn!("class `{class}` has no ground truth; AP undefined and excluded from mAP");
            None
        } else {
            Some(average_precision(&ranked_tp, n_gt).expect("n_gt > 0"))
        };
        let (mut tp, mut fp) = (0, 0);
        for &i in &order {
            if preds[i].confidence >= confidence_thresh {
                if outcome.is_tp[i] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, n_gt);
        classes.push(ClassReport {
            class,
            ap,
            precision,
            recall,
            f1: f1_score(precision, recall),
            tp,
            fp,
            fn_count: n_gt - tp,
            n_gt,
        });
    }
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    EvalReport {
        iou_threshold: iou_thresh,
        confidence_threshold: confidence_thresh,
        map: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        tp: classes.iter().map(|c| c.tp).sum(),
        fp: classes.iter().map(|c| c.fp).sum(),
        fn_count: classes.iter().map(|c| c.fn_count).sum(),
        classes,
    }
}

impl EvalReport {
    pub fn table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.class.len())
            .chain([5])
            .max()
            .unwrap();
        let mut out = String::new();
        writeln!(
            out,
            "{:<width$}  {:>6}  {:>9}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}",
            "class", "AP", "precision", "recall", "F1", "TP", "FP", "FN"
        )
        .unwrap();
        for c in &self.classes {
            let ap = c.ap.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                out,
                "{:<width$}  {:>6}  {:>9.4}  {:>6.4}  {:>6.4}  {:>6}  {:>6}  {:>6}",
                c.class, ap, c.precision, c.recall, c.f1, c.tp, c.fp, c.fn_count
            )
            .unwrap();
        }
        let map = self.map.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        writeln!(out, "{:<width$}  {:>6}", "mAP", map).unwrap();
        out
    }
}

/// Pixel confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_count: u64,
    pub tn: u64,
}

impl SegCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(Error::InvalidInput(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        let mut c = SegCounts::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_count += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &SegCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_count += o.fn_count;
        self.tn += o.tn;
    }

    pub fn report(&self) -> SegReport {
        let pct = |num: u64, den: u64| {
            if den == 0 {
                (0.0, true)
            } else {
                (100.0 * num as f64 / den as f64, false)
            }
        };
        let (iou, iou_undefined) = pct(self.tp, self.tp + self.fp + self.fn_count);
        let (fn_rate, fn_undefined) = pct(self.fn_count, self.tp + self.fn_count);
        let (fp_rate, fp_undefined) = pct(self.fp, self.fp + self.tn);
        SegReport {
            iou,
            fn_rate,
            fp_rate,
            iou_undefined,
            fn_rate_undefined: fn_undefined,
            fp_rate_undefined: fp_undefined,
            counts: *self,
        }
    }
}

/// Percentages; `*_undefined` flags mark zero denominators (value reported as 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub iou: f64,
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub iou_undefined: bool,
    pub fn_rate_undefined: bool,
    pub fp_rate_undefined: bool,
    pub counts: SegCounts,
}

impl SegReport {
    pub fn table(&self) -> String {
        format!(
            "{:<8}  {:>8}\n{:<8}  {:>8.2}\n{:<8}  {:>8.2}\n{:<8}  {:>8.2}\n",
            "metric", "percent", "IoU", self.iou, "FN rate", self.fn_rate, "FP rate", self.fp_rate
        )
    }
}

pub fn evaluate_segmentation(pred: &Mask, gt: &Mask) -> Result<SegReport> {
    Ok(SegCounts::from_masks(pred, gt)?.report())
}

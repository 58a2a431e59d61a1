//! Train/validation splits and N-shot subsets over labeled image sets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::annotate::CocoDataset;
use crate::error::{Error, Result};
use crate::metrics::BoxF;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub class: String,
    pub bbox: BoxF,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub file_name: String,
    pub instances: Vec<LabeledInstance>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    /// Class vocabulary.
    pub classes: Vec<String>,
    pub images: Vec<LabeledImage>,
}

impl LabeledSet {
    /// Reads images and boxes from a COCO document; categories ordered by id
    /// form the vocabulary.
    pub fn from_coco(coco: &CocoDataset) -> Result<Self> {
        let mut cats: Vec<_> = coco.categories.iter().collect();
        cats.sort_by_key(|c| c.id);
        let names: BTreeMap<u64, &str> = cats.iter().map(|c| (c.id, c.name.as_str())).collect();
        let mut by_image: BTreeMap<u64, Vec<LabeledInstance>> = BTreeMap::new();
        for a in &coco.annotations {
            let class = names.get(&a.category_id).ok_or_else(|| {
                Error::Format(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                ))
            })?;
            let [x, y, w, h] = a.bbox;
            by_image.entry(a.image_id).or_default().push(LabeledInstance {
                class: class.to_string(),
                bbox: BoxF::new(x, y, x + w, y + h),
            });
        }
        Ok(Self {
            classes: cats.iter().map(|c| c.name.clone()).collect(),
            images: coco
                .images
                .iter()
                .map(|img| LabeledImage {
                    id: img.id,
                    file_name: img.file_name.clone(),
                    instances: by_image.remove(&img.id).unwrap_or_default(),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            classes: self.classes.clone(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Instance count per vocabulary class.
    pub fn class_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> =
            self.classes.iter().map(|c| (c.as_str(), 0)).collect();
        for img in &self.images {
            for inst in &img.instances {
                if let Some(c) = counts.get_mut(inst.class.as_str()) {
                    *c += 1;
                }
            }
        }
        counts
    }
}

/// Random partition into train and validation index lists, each sorted.
/// Validation gets `floor(n · ratio_val / (ratio_train + ratio_val))` images.
pub fn split_indices<R: Rng + ?Sized>(
    n: usize,
    ratio_train: u32,
    ratio_val: u32,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if ratio_train == 0 || ratio_val == 0 {
        return Err(Error::InvalidInput("split ratios must be positive".into()));
    }
    let parts = (ratio_train + ratio_val) as usize;
    if n < parts {
        return Err(Error::InsufficientData(format!(
            "{n} images cannot be split {ratio_train}:{ratio_val}"
        )));
    }
    let n_val = n * ratio_val as usize / parts;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

pub fn split<R: Rng + ?Sized>(
    set: &LabeledSet,
    ratio_train: u32,
    ratio_val: u32,
    rng: &mut R,
) -> Result<(LabeledSet, LabeledSet)> {
    let (train, val) = split_indices(set.len(), ratio_train, ratio_val, rng)?;
    Ok((set.select(&train), set.select(&val)))
}

/// Greedy N-shot selection. Images are visited in a shuffled order; an image
/// is taken when it holds an instance of some class still below `n`, and
/// selection stops once every class has at least `n`. Returns image indices
/// in the order they were taken.
pub fn select_nshot_indices<R: Rng + ?Sized>(
    set: &LabeledSet,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let totals = set.class_counts();
    if let Some((class, &available)) = totals.iter().find(|(_, &c)| c < n) {
        return Err(Error::Infeasible {
            class: class.to_string(),
            available,
            required: n,
        });
    }
    let slot: BTreeMap<&str, usize> = set
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut counts = vec![0usize; set.classes.len()];
    let mut deficient = counts.len();

    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    let mut chosen = Vec::new();
    for i in order {
        if deficient == 0 {
            break;
        }
        let img = &set.images[i];
        let helps = img
            .instances
            .iter()
            .any(|inst| slot.get(inst.class.as_str()).is_some_and(|&k| counts[k] < n));
        if !helps {
            continue;
        }
        for inst in &img.instances {
            if let Some(&k) = slot.get(inst.class.as_str()) {
                counts[k] += 1;
                if counts[k] == n {
                    deficient -= 1;
                }
            }
        }
        chosen.push(i);
    }
    Ok(chosen)
}

pub fn select_nshot<R: Rng + ?Sized>(set: &LabeledSet, n: usize, rng: &mut R) -> Result<LabeledSet> {
    Ok(set.select(&select_nshot_indices(set, n, rng)?))
}

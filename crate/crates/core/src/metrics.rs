//! Glass IoU, mean IoU and boundary IoU.
//!
//! Class 0 is background and class 1 is glass. Any IoU whose union is empty
//! (the class appears in neither prediction nor ground truth) is 1.0.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Width of the boundary band used by [`biou`].
pub const DEFAULT_BOUNDARY_WIDTH: usize = 5;

/// Pixel counts per class, index 0 = background, 1 = glass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: [u64; 2],
    pub fp: [u64; 2],
    #[serde(rename = "fn")]
    pub fn_: [u64; 2],
    pub pixel_total: u64,
}

impl ConfusionCounts {
    /// IoU of one class, 1.0 when the class is absent everywhere.
    pub fn class_iou(&self, class: usize) -> f64 {
        let denom = self.tp[class] + self.fp[class] + self.fn_[class];
        if denom == 0 {
            1.0
        } else {
            self.tp[class] as f64 / denom as f64
        }
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        for c in 0..2 {
            self.tp[c] += rhs.tp[c];
            self.fp[c] += rhs.fp[c];
            self.fn_[c] += rhs.fn_[c];
        }
        self.pixel_total += rhs.pixel_total;
    }
}

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dims() != gt.dims() {
        let (a, b) = (pred.dims(), gt.dims());
        return Err(Error::shape("confusion", &[a.0, a.1], &[b.0, b.1]));
    }
    Ok(())
}

fn count_where(pred: &Mask, gt: &Mask, include: impl Fn(usize) -> bool) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if !include(i) {
            continue;
        }
        c.pixel_total += 1;
        let (p, g) = (p as usize, g as usize);
        if p == g {
            c.tp[p] += 1;
        } else {
            c.fp[p] += 1;
            c.fn_[g] += 1;
        }
    }
    c
}

/// Per-class TP/FP/FN over all pixels.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    Ok(count_where(pred, gt, |_| true))
}

pub fn iou_glass(counts: &ConfusionCounts) -> f64 {
    counts.class_iou(1)
}

/// Mean of the background and glass IoUs.
pub fn miou(counts: &ConfusionCounts) -> f64 {
    (counts.class_iou(0) + counts.class_iou(1)) / 2.0
}

/// Pixels within Chebyshev distance `width` of a pixel of the other class.
///
/// Only pixels inside the image are considered, so the band of a mask equals
/// the band of its complement and a constant mask has an empty band.
pub fn boundary_band(mask: &Mask, width: usize) -> Mask {
    mask.dilate(width).and(&mask.complement().dilate(width))
}

/// Glass confusion restricted to the union of both masks' boundary bands.
pub fn boundary_confusion(pred: &Mask, gt: &Mask, width: usize) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let band = boundary_band(pred, width).or(&boundary_band(gt, width));
    Ok(count_where(pred, gt, |i| band.data()[i] == 1))
}

/// Boundary IoU of the glass class with a band of `width` pixels.
pub fn biou(pred: &Mask, gt: &Mask, width: usize) -> Result<f64> {
    Ok(boundary_confusion(pred, gt, width)?.class_iou(1))
}

/// Metrics of a single image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub miou: f64,
    pub biou: f64,
    pub counts: ConfusionCounts,
    pub boundary_counts: ConfusionCounts,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &Mask, gt: &Mask, width: usize) -> Result<Self> {
        let counts = confusion(pred, gt)?;
        let boundary_counts = boundary_confusion(pred, gt, width)?;
        Ok(ImageMetrics {
            id: id.into(),
            iou: iou_glass(&counts),
            miou: miou(&counts),
            biou: boundary_counts.class_iou(1),
            counts,
            boundary_counts,
        })
    }
}

/// Dataset-level metrics computed from summed counts, plus the per-image
/// breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub miou: f64,
    pub biou: f64,
    pub counts: ConfusionCounts,
    pub boundary_counts: ConfusionCounts,
    pub image_count: usize,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Report over the images whose ids are in `ids`.
    pub fn subset(&self, ids: &[String]) -> Result<MetricsReport> {
        let chosen = self
            .per_image
            .iter()
            .filter(|m| ids.contains(&m.id))
            .cloned()
            .collect();
        aggregate(chosen)
    }
}

/// Sums counts over images and applies the metric formulas to the sums.
pub fn aggregate(images: Vec<ImageMetrics>) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::invalid("aggregate", "no images to aggregate"));
    }
    let counts = images.iter().fold(ConfusionCounts::default(), |acc, m| acc + m.counts);
    let boundary_counts = images
        .iter()
        .fold(ConfusionCounts::default(), |acc, m| acc + m.boundary_counts);
    Ok(MetricsReport {
        iou: iou_glass(&counts),
        miou: miou(&counts),
        biou: boundary_counts.class_iou(1),
        counts,
        boundary_counts,
        image_count: images.len(),
        per_image: images,
    })
}

//! Visual-linguistic alignment score.
//!
//! For each question the attended region is the union of its top-`K`
//! matched patch boxes. A question is a hit when the IoU of that region with
//! the ground-truth box reaches `theta`. The score is the hit fraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{patch_to_box, union_box_region_iou, BBox, GridSpec};
use crate::matching::{attended_patches, KSemantics, MatchResult};

/// How an IoU is compared against `theta`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `iou >= theta`
    #[default]
    Inclusive,
    /// `iou > theta`
    Strict,
}

impl ThresholdMode {
    pub fn hit(&self, iou: f64, theta: f64) -> bool {
        match self {
            ThresholdMode::Inclusive => iou >= theta,
            ThresholdMode::Strict => iou > theta,
        }
    }
}

/// One question: its attended patch boxes in rank order and the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct VlasInput {
    pub qa_id: String,
    pub attended: Vec<BBox>,
    pub gt: BBox,
}

impl VlasInput {
    /// Attended boxes from match results, ranked under `semantics`.
    pub fn from_matches(
        qa_id: impl Into<String>,
        matches: &[MatchResult],
        k: usize,
        semantics: KSemantics,
        grid: &GridSpec,
        gt: BBox,
    ) -> Result<Self> {
        let attended = attended_patches(matches, k, semantics)?
            .into_iter()
            .map(|p| patch_to_box(grid, p))
            .collect::<Result<_>>()?;
        Ok(VlasInput {
            qa_id: qa_id.into(),
            attended,
            gt,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub qa_id: String,
    pub attended_patches: Vec<BBox>,
    pub gt_box: BBox,
    pub iou: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlasReport {
    pub theta: f64,
    pub k: usize,
    pub n_qa: usize,
    pub hits: usize,
    pub score: f64,
    pub k_semantics: KSemantics,
    pub threshold: ThresholdMode,
    /// Questions with no attended patches; each counts as a miss.
    pub flagged: Vec<String>,
    pub records: Vec<AlignmentRecord>,
}

fn check(inputs: &[VlasInput], theta: f64, k: usize) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Argument("VLAS needs at least one example".into()));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Argument(format!(
            "theta must lie in (0, 1), got {theta}"
        )));
    }
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    Ok(())
}

/// One record per input, in input order, with the attended list cut to `k`.
pub fn per_example_iou_dump(
    inputs: &[VlasInput],
    theta: f64,
    k: usize,
    mode: ThresholdMode,
) -> Result<Vec<AlignmentRecord>> {
    check(inputs, theta, k)?;
    inputs
        .iter()
        .map(|x| {
            let attended: Vec<BBox> = x.attended.iter().take(k).copied().collect();
            let iou = if attended.is_empty() {
                0.0
            } else {
                union_box_region_iou(&attended, &x.gt)?
            };
            Ok(AlignmentRecord {
                qa_id: x.qa_id.clone(),
                hit: !attended.is_empty() && mode.hit(iou, theta),
                attended_patches: attended,
                gt_box: x.gt,
                iou,
            })
        })
        .collect()
}

/// Aggregates records that were produced with the given `theta`.
pub fn report_from_records(
    records: Vec<AlignmentRecord>,
    theta: f64,
    k: usize,
    mode: ThresholdMode,
    semantics: KSemantics,
) -> Result<VlasReport> {
    if records.is_empty() {
        return Err(Error::Argument("VLAS needs at least one example".into()));
    }
    let n_qa = records.len();
    let hits = records.iter().filter(|r| r.hit).count();
    let flagged = records
        .iter()
        .filter(|r| r.attended_patches.is_empty())
        .map(|r| r.qa_id.clone())
        .collect();
    Ok(VlasReport {
        theta,
        k,
        n_qa,
        hits,
        score: hits as f64 / n_qa as f64,
        k_semantics: semantics,
        threshold: mode,
        flagged,
        records,
    })
}

pub fn vlas(
    inputs: &[VlasInput],
    theta: f64,
    k: usize,
    mode: ThresholdMode,
    semantics: KSemantics,
) -> Result<VlasReport> {
    let records = per_example_iou_dump(inputs, theta, k, mode)?;
    report_from_records(records, theta, k, mode, semantics)
}

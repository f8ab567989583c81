//! CLEAR MOT evaluation (MOTA, FP, FN, IDS, MT, ML), IDF1, and counting
//! MAE/SSIM diagnostics.
//!
//! Per-frame matching follows the CLEAR protocol: correspondences from the
//! running gt-to-hypothesis map are carried over while they stay above the
//! IoU threshold, and the remaining objects are matched by Hungarian
//! assignment on `1 - IoU` (pairs below the threshold infeasible). An ID
//! switch is a matched GT object whose hypothesis id differs from its last
//! match anywhere earlier in the sequence.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::density::DensityGrid;
use crate::losses::{self, CountLossParams, LossError};
use crate::math;
use crate::model::{iou, BBox};
use crate::track::{hungarian, CostMatrix};

/// MT/ML span-coverage thresholds of the CLEAR convention.
pub const MOSTLY_TRACKED_RATIO: f64 = 0.8;
pub const MOSTLY_LOST_RATIO: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// The same (frame, id) appears twice in one stream.
    DuplicateRecord { frame: u64, id: u64, stream: &'static str },
    /// Ground truth must be non-empty.
    EmptyGroundTruth,
    /// Paired per-frame lists must have equal lengths.
    LengthMismatch { left: usize, right: usize },
    Loss(LossError),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::DuplicateRecord { frame, id, stream } => {
                write!(f, "duplicate (frame {frame}, id {id}) in {stream}")
            }
            MetricsError::EmptyGroundTruth => write!(f, "ground truth is empty"),
            MetricsError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            MetricsError::Loss(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for MetricsError {}

impl From<LossError> for MetricsError {
    fn from(e: LossError) -> Self {
        MetricsError::Loss(e)
    }
}

/// One annotated or hypothesized object in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectRecord {
    pub frame: u64,
    pub id: u64,
    pub bbox: BBox,
}

/// CLEAR MOT tallies for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearMotSummary {
    pub mota: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub mostly_tracked: usize,
    pub mostly_lost: usize,
    pub mt_ratio: f64,
    pub ml_ratio: f64,
    pub gt_total: usize,
    pub gt_trajectories: usize,
}

/// Full per-sequence evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEval {
    pub mota: f64,
    pub idf1: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub mostly_tracked: usize,
    pub mostly_lost: usize,
    pub mt_ratio: f64,
    pub ml_ratio: f64,
    pub gt_total: usize,
    pub gt_trajectories: usize,
    pub counting_mae: Option<f64>,
    pub counting_ssim: Option<f64>,
}

type FrameMap = BTreeMap<u64, Vec<(u64, BBox)>>;

fn group_by_frame(records: &[ObjectRecord], stream: &'static str) -> Result<FrameMap, MetricsError> {
    let mut frames: FrameMap = BTreeMap::new();
    for r in records {
        let entry = frames.entry(r.frame).or_default();
        if entry.iter().any(|&(id, _)| id == r.id) {
            return Err(MetricsError::DuplicateRecord { frame: r.frame, id: r.id, stream });
        }
        entry.push((r.id, r.bbox));
    }
    for entry in frames.values_mut() {
        entry.sort_by_key(|&(id, _)| id);
    }
    Ok(frames)
}

/// CLEAR MOT metrics at the given IoU matching threshold.
pub fn clear_mot(
    gt: &[ObjectRecord],
    hyp: &[ObjectRecord],
    iou_match: f64,
) -> Result<ClearMotSummary, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let gt_frames = group_by_frame(gt, "ground truth")?;
    let hyp_frames = group_by_frame(hyp, "hypotheses")?;

    let mut corr: BTreeMap<u64, u64> = BTreeMap::new(); // gt id -> last matched hyp id
    let mut fp = 0usize;
    let mut fn_count = 0usize;
    let mut ids = 0usize;
    let mut present: BTreeMap<u64, usize> = BTreeMap::new();
    let mut matched_frames: BTreeMap<u64, usize> = BTreeMap::new();

    let mut all_frames: Vec<u64> = gt_frames.keys().chain(hyp_frames.keys()).cloned().collect();
    all_frames.sort_unstable();
    all_frames.dedup();

    let empty: Vec<(u64, BBox)> = Vec::new();
    for &frame in &all_frames {
        let gs = gt_frames.get(&frame).unwrap_or(&empty);
        let hs = hyp_frames.get(&frame).unwrap_or(&empty);
        for &(gid, _) in gs {
            *present.entry(gid).or_default() += 1;
        }

        let mut g_done = alloc::vec![false; gs.len()];
        let mut h_done = alloc::vec![false; hs.len()];
        let mut matches: Vec<(usize, usize)> = Vec::new();

        // Carry over correspondences that still hold.
        for (gi, &(gid, gbox)) in gs.iter().enumerate() {
            if let Some(&hid) = corr.get(&gid) {
                if let Some(hi) = hs.iter().position(|&(h, _)| h == hid) {
                    if !h_done[hi] && iou(&gbox, &hs[hi].1) >= iou_match {
                        g_done[gi] = true;
                        h_done[hi] = true;
                        matches.push((gi, hi));
                    }
                }
            }
        }

        // Hungarian on the remainder.
        let g_rest: Vec<usize> = (0..gs.len()).filter(|&i| !g_done[i]).collect();
        let h_rest: Vec<usize> = (0..hs.len()).filter(|&i| !h_done[i]).collect();
        let mut cost = CostMatrix::new(g_rest.len(), h_rest.len());
        for (r, &gi) in g_rest.iter().enumerate() {
            for (c, &hi) in h_rest.iter().enumerate() {
                let overlap = iou(&gs[gi].1, &hs[hi].1);
                if overlap >= iou_match {
                    cost.set(r, c, 1.0 - overlap);
                }
            }
        }
        for &(r, c) in &hungarian(&cost).pairs {
            matches.push((g_rest[r], h_rest[c]));
        }

        for &(gi, hi) in &matches {
            let gid = gs[gi].0;
            let hid = hs[hi].0;
            if let Some(&prev) = corr.get(&gid) {
                if prev != hid {
                    ids += 1;
                }
            }
            corr.insert(gid, hid);
            *matched_frames.entry(gid).or_default() += 1;
        }
        fp += hs.len() - matches.len();
        fn_count += gs.len() - matches.len();
    }

    let gt_total: usize = present.values().sum();
    let gt_trajectories = present.len();
    let mut mostly_tracked = 0usize;
    let mut mostly_lost = 0usize;
    for (gid, &span) in &present {
        let covered = matched_frames.get(gid).copied().unwrap_or(0) as f64 / span as f64;
        if covered >= MOSTLY_TRACKED_RATIO {
            mostly_tracked += 1;
        }
        if covered <= MOSTLY_LOST_RATIO {
            mostly_lost += 1;
        }
    }
    let mota = 1.0 - (fp + fn_count + ids) as f64 / gt_total as f64;
    Ok(ClearMotSummary {
        mota,
        false_positives: fp,
        false_negatives: fn_count,
        id_switches: ids,
        mostly_tracked,
        mostly_lost,
        mt_ratio: mostly_tracked as f64 / gt_trajectories as f64,
        ml_ratio: mostly_lost as f64 / gt_trajectories as f64,
        gt_total,
        gt_trajectories,
    })
}

/// IDF1: global one-to-one matching between GT and hypothesis identities
/// maximizing identity-consistent detections, then
/// `2 IDTP / (2 IDTP + IDFP + IDFN)`.
pub fn idf1(
    gt: &[ObjectRecord],
    hyp: &[ObjectRecord],
    iou_match: f64,
) -> Result<f64, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let gt_frames = group_by_frame(gt, "ground truth")?;
    let hyp_frames = group_by_frame(hyp, "hypotheses")?;
    if hyp.is_empty() {
        return Ok(0.0);
    }

    let mut gt_ids: Vec<u64> = gt.iter().map(|r| r.id).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    let mut hyp_ids: Vec<u64> = hyp.iter().map(|r| r.id).collect();
    hyp_ids.sort_unstable();
    hyp_ids.dedup();
    let g_index: BTreeMap<u64, usize> =
        gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let h_index: BTreeMap<u64, usize> =
        hyp_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    // Frames where a given (gt id, hyp id) pair overlaps at the threshold.
    let mut overlap = alloc::vec![0usize; gt_ids.len() * hyp_ids.len()];
    for (frame, gs) in &gt_frames {
        if let Some(hs) = hyp_frames.get(frame) {
            for &(gid, gbox) in gs {
                for &(hid, hbox) in hs {
                    if iou(&gbox, &hbox) >= iou_match {
                        overlap[g_index[&gid] * hyp_ids.len() + h_index[&hid]] += 1;
                    }
                }
            }
        }
    }

    // Maximize total overlap via min-cost assignment on negated counts.
    let mut cost = CostMatrix::new(gt_ids.len(), hyp_ids.len());
    for g in 0..gt_ids.len() {
        for h in 0..hyp_ids.len() {
            cost.set(g, h, -(overlap[g * hyp_ids.len() + h] as f64));
        }
    }
    let assignment = hungarian(&cost);
    let idtp: usize = assignment
        .pairs
        .iter()
        .map(|&(g, h)| overlap[g * hyp_ids.len() + h])
        .sum();
    // IDFN = gt_total - IDTP and IDFP = hyp_total - IDTP, so the F1
    // denominator collapses to the two stream sizes.
    Ok(2.0 * idtp as f64 / (gt.len() + hyp.len()) as f64)
}

/// Counting diagnostics over aligned frame lists: mean absolute count
/// error of the predicted density sums, and mean frame-wise SSIM against
/// the GT density maps.
pub fn counting_eval(
    pred_density: &[DensityGrid],
    gt_count: &[usize],
    gt_density: &[DensityGrid],
) -> Result<(f64, f64), MetricsError> {
    if pred_density.len() != gt_count.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred_density.len(),
            right: gt_count.len(),
        });
    }
    if pred_density.len() != gt_density.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred_density.len(),
            right: gt_density.len(),
        });
    }
    if pred_density.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let params = CountLossParams::default();
    let mut mae = 0.0;
    let mut ssim_sum = 0.0;
    for ((pred, &count), gt) in pred_density.iter().zip(gt_count).zip(gt_density) {
        mae += math::abs(pred.total() - count as f64);
        ssim_sum += losses::ssim(pred, gt, &params)?;
    }
    let n = pred_density.len() as f64;
    Ok((mae / n, ssim_sum / n))
}

/// CLEAR MOT + IDF1 (+ optional counting diagnostics) in one row.
pub fn evaluate_sequence(
    gt: &[ObjectRecord],
    hyp: &[ObjectRecord],
    iou_match: f64,
    counting: Option<(&[DensityGrid], &[usize], &[DensityGrid])>,
) -> Result<SequenceEval, MetricsError> {
    let clear = clear_mot(gt, hyp, iou_match)?;
    let idf1_value = idf1(gt, hyp, iou_match)?;
    let (counting_mae, counting_ssim) = match counting {
        Some((pred, counts, gt_density)) => {
            let (mae, ssim) = counting_eval(pred, counts, gt_density)?;
            (Some(mae), Some(ssim))
        }
        None => (None, None),
    };
    Ok(SequenceEval {
        mota: clear.mota,
        idf1: idf1_value,
        false_positives: clear.false_positives,
        false_negatives: clear.false_negatives,
        id_switches: clear.id_switches,
        mostly_tracked: clear.mostly_tracked,
        mostly_lost: clear.mostly_lost,
        mt_ratio: clear.mt_ratio,
        ml_ratio: clear.ml_ratio,
        gt_total: clear.gt_total,
        gt_trajectories: clear.gt_trajectories,
        counting_mae,
        counting_ssim,
    })
}

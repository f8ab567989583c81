//! Inference-time detection refinement driven by count consistency.
//!
//! Given per-frame detections and a crowd density map, a greedy discrete
//! search over the detection configuration (the indicator set) recovers
//! missed detections where the density map carries unexplained mass and
//! rejects false detections whose removal lowers the window-count
//! disagreement. Every accepted move is required not to increase the
//! window-count loss, so refinement is monotone in that objective.
//!
//! All scans are row-major and ties break toward the first candidate, so
//! refinement is a deterministic function of its inputs.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::density::{
    self, AdaptiveSigmaConfig, DensityError, DensityGrid, KernelSpec,
};
use crate::math;
use crate::model::{center_to_grid, BBox, Detection, GridGeometry, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub enum RefineError {
    /// Config fails validation.
    BadConfig(&'static str),
    Density(DensityError),
    Model(ModelError),
}

impl fmt::Display for RefineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefineError::BadConfig(what) => write!(f, "bad refine config: {what}"),
            RefineError::Density(e) => write!(f, "{e}"),
            RefineError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for RefineError {}

impl From<DensityError> for RefineError {
    fn from(e: DensityError) -> Self {
        RefineError::Density(e)
    }
}

impl From<ModelError> for RefineError {
    fn from(e: ModelError) -> Self {
        RefineError::Model(e)
    }
}

/// Side of the small signed patch used to localize a recovered center
/// inside the selected count window.
const SNAP_WINDOW: usize = 5;

/// A recovered box overlapping an existing detection at or above this IoU
/// is suppressed, as any detector's non-maximum suppression would.
fn recovery_nms_env() -> f64 {
    extern crate std;
    std::env::var("NMS").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5)
}

/// Refinement parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Odd window side (cells) for the count comparisons.
    pub window: usize,
    /// Minimum window-integrated residual mass to recover a detection.
    pub add_mass_threshold: f64,
    /// Required window-count loss decrease for a removal (>= 0).
    pub remove_gain_threshold: f64,
    /// Cap on recoveries per frame.
    pub max_added_per_frame: usize,
    /// Minimum Euclidean separation (cells) of a recovered center from
    /// every other detection center, existing or recovered.
    pub min_peak_separation: usize,
    /// Box size (w, h) in pixels for recovered detections when no
    /// neighbouring detection provides a better estimate.
    pub default_box: (f64, f64),
    /// Confidence assigned to recovered detections.
    pub recovered_confidence: f64,
    /// Detections at or above this confidence are never removed.
    pub exempt_confidence: f64,
    /// Kernel-width settings for blurring detection configurations.
    pub sigma: AdaptiveSigmaConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            window: 19,
            add_mass_threshold: 0.5,
            remove_gain_threshold: 0.0,
            max_added_per_frame: 50,
            min_peak_separation: 2,
            default_box: (20.0, 50.0),
            recovered_confidence: 0.6,
            exempt_confidence: 0.6,
            sigma: AdaptiveSigmaConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(RefineError::BadConfig("window must be odd"));
        }
        if !(self.add_mass_threshold > 0.0 && self.add_mass_threshold <= 1.0) {
            return Err(RefineError::BadConfig("add_mass_threshold must be in (0, 1]"));
        }
        if !(self.remove_gain_threshold >= 0.0) {
            return Err(RefineError::BadConfig("remove_gain_threshold must be >= 0"));
        }
        if !(self.default_box.0 > 0.0 && self.default_box.1 > 0.0) {
            return Err(RefineError::BadConfig("default_box must be positive"));
        }
        if !(self.recovered_confidence > 0.0 && self.recovered_confidence < 1.0) {
            return Err(RefineError::BadConfig("recovered_confidence must be in (0, 1)"));
        }
        Ok(())
    }
}

/// What a refinement pass did to one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub added: Vec<Detection>,
    pub removed: Vec<Detection>,
    /// Window-count loss between detections and density before refinement.
    pub initial_count_gap: f64,
    /// Same loss after refinement; never exceeds the initial gap.
    pub final_count_gap: f64,
}

/// Grid cells of the detection centers, with multiplicity preserved.
fn det_cells(dets: &[Detection], geom: &GridGeometry) -> Result<Vec<(usize, usize)>, RefineError> {
    dets.iter()
        .map(|d| Ok(center_to_grid(d.bbox.center(), geom)?.0))
        .collect()
}

/// Detection configuration as a count grid (cells may hold more than one
/// detection; the count keeps per-detection accounting exact).
fn count_grid(cells: &[(usize, usize)], geom: &GridGeometry) -> Vec<f64> {
    let mut u = vec![0.0; geom.cells()];
    for &(x, y) in cells {
        u[y * geom.grid_w() + x] += 1.0;
    }
    u
}

/// Blur of a detection configuration: adaptive sigmas over the centers,
/// one unit-mass kernel each. Duplicate cells contribute one kernel per
/// detection.
fn blur_cells(
    cells: &[(usize, usize)],
    cfg: &AdaptiveSigmaConfig,
    geom: &GridGeometry,
) -> Result<DensityGrid, RefineError> {
    if cells.is_empty() {
        return Ok(DensityGrid::zeros(*geom));
    }
    let sigmas = density::adaptive_sigmas(cells, cfg)?;
    Ok(density::density_from_centers(cells, &sigmas, geom)?)
}

/// Mean squared window-count difference between the density map and a
/// detection count grid (the refinement objective).
fn count_gap(dhat: &DensityGrid, u: &[f64], window: usize) -> Result<f64, RefineError> {
    let geom = dhat.geom();
    let counts_d = density::window_counts(dhat, window)?;
    let counts_u = window_counts_raw(u, geom, window)?;
    let k = geom.cells() as f64;
    Ok(counts_d
        .values()
        .iter()
        .zip(&counts_u)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / k)
}

fn window_counts_raw(
    values: &[f64],
    geom: &GridGeometry,
    window: usize,
) -> Result<Vec<f64>, RefineError> {
    let grid = DensityGrid::from_values(*geom, values.to_vec())?;
    Ok(density::window_counts(&grid, window)?.values().to_vec())
}

/// Signed residual `dhat - blur(detections)`: positive mass is density the
/// detections do not explain, negative mass is over-detection.
pub fn residual_density(
    dets: &[Detection],
    dhat: &DensityGrid,
    cfg_sigma: &AdaptiveSigmaConfig,
) -> Result<DensityGrid, RefineError> {
    let cells = det_cells(dets, dhat.geom())?;
    let blurred = blur_cells(&cells, cfg_sigma, dhat.geom())?;
    let values = dhat
        .values()
        .iter()
        .zip(blurred.values())
        .map(|(&d, &b)| d - b)
        .collect();
    Ok(DensityGrid::from_values(*dhat.geom(), values)?)
}

/// Kernel width for one center against a set of existing centers.
fn sigma_against(
    cell: (usize, usize),
    others: &[(usize, usize)],
    cfg: &AdaptiveSigmaConfig,
) -> f64 {
    if others.is_empty() {
        return cfg.lone_sigma();
    }
    let mut dists: Vec<f64> = others
        .iter()
        .map(|&(ox, oy)| math::hypot(cell.0 as f64 - ox as f64, cell.1 as f64 - oy as f64))
        .collect();
    dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let take = usize::min(cfg.k, dists.len());
    let mean = dists[..take].iter().sum::<f64>() / take as f64;
    f64::clamp(cfg.gamma * mean, cfg.sigma_floor, cfg.sigma_cap)
}

/// True when `cell` keeps the minimum squared separation from every
/// center in `centers`.
fn separated_from(centers: &[(usize, usize)], cell: (usize, usize), min_sep2: f64) -> bool {
    centers.iter().all(|&(ax, ay)| {
        let dx = cell.0 as f64 - ax as f64;
        let dy = cell.1 as f64 - ay as f64;
        dx * dx + dy * dy >= min_sep2
    })
}

/// Mass of a normalized kernel inside its central `patch x patch` cells.
fn kernel_patch_mass(kernel: &KernelSpec, patch: usize) -> f64 {
    let w = kernel.weights();
    let r = kernel.truncation_radius as isize;
    let side = (2 * r + 1) as usize;
    let half = (patch / 2) as isize;
    let mut mass = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            if dx.abs() <= r && dy.abs() <= r {
                mass += w[(dy + r) as usize * side + (dx + r) as usize];
            }
        }
    }
    mass
}

fn existing_sep2_env() -> f64 {
    // experiment hook, replaced by a constant after calibration
    extern crate std;
    std::env::var("EXIST_SEP")
        .ok()
        .and_then(|v| v.parse::<f64>().ok())
        .map(|r| r * r)
        .unwrap_or(1.0)
}

/// Greedy recovery of missed detections from unexplained density mass.
///
/// Repeatedly takes the cell with the largest window-integrated positive
/// residual (row-major tie-break) and snaps to the strongest net residual
/// patch inside that window; a candidate is accepted when the window mass
/// reaches `add_mass_threshold`, the center keeps `min_peak_separation`
/// from every current detection center, and adding a detection there does
/// not increase the window-count loss. A unit kernel is subtracted from
/// the residual after each acceptance.
pub fn recover_missed(
    dets: &[Detection],
    dhat: &DensityGrid,
    cfg: &RefineConfig,
) -> Result<Vec<Detection>, RefineError> {
    cfg.validate()?;
    let geom = *dhat.geom();
    let gw = geom.grid_w();
    let mut cells = det_cells(dets, &geom)?;
    let mut residual = residual_density(dets, dhat, &cfg.sigma)?;
    let mut u = count_grid(&cells, &geom);
    let counts_d = density::window_counts(dhat, cfg.window)?;
    let area = window_counts_raw(&vec![1.0; geom.cells()], &geom, cfg.window)?;

    let n_existing = cells.len();
    let existing_sep2 = existing_sep2_env();
    let mut added: Vec<Detection> = Vec::new();
    let mut masked = vec![false; geom.cells()];
    let mut attempts = 0usize;
    let max_attempts = usize::max(4 * cfg.max_added_per_frame, 64);

    while added.len() < cfg.max_added_per_frame && attempts < max_attempts {
        attempts += 1;
        // Window-integrated positive residual.
        let pos: Vec<f64> = residual.values().iter().map(|&v| f64::max(v, 0.0)).collect();
        let mass = window_counts_raw(&pos, &geom, cfg.window)?;

        // Zero padding makes the window sum exactly flat wherever the
        // window fully covers a blob, so mass ties are broken by the
        // residual peak itself, then row-major.
        let min_sep2 = (cfg.min_peak_separation * cfg.min_peak_separation) as f64;
        let mut best: Option<(usize, f64, f64)> = None;
        for (idx, &m) in mass.iter().enumerate() {
            if masked[idx] {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bm, bv)) => m > bm || (m == bm && pos[idx] > bv),
            };
            if better {
                best = Some((idx, m, pos[idx]));
            }
        }
        let Some((idx, m, _)) = best else { break };
        if m < cfg.add_mass_threshold {
            break;
        }
        // Snap to the strongest net residual patch inside the selected
        // window: the window sum localizes the unexplained mass, a small
        // signed patch sum localizes the object center within it (a missed
        // object carries ~1 net mass in a few cells, while kernel-width
        // mismatch over an explained object nets out to ~0).
        let snap = window_counts_raw(residual.values(), &geom, SNAP_WINDOW)?;
        let cell = {
            let (wx, wy) = (idx % gw, idx / gw);
            let half = (cfg.window / 2) as isize;
            let mut peak = (idx, f64::NEG_INFINITY);
            for dy in -half..=half {
                for dx in -half..=half {
                    let x = wx as isize + dx;
                    let y = wy as isize + dy;
                    if x < 0 || y < 0 || x >= gw as isize || y >= geom.grid_h() as isize {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    if !separated_from(&cells[..n_existing], (x, y), existing_sep2)
                        || !separated_from(&cells[n_existing..], (x, y), min_sep2)
                    {
                        continue;
                    }
                    let i = y * gw + x;
                    if snap[i] > peak.1 {
                        peak = (i, snap[i]);
                    }
                }
            }
            if peak.1 == f64::NEG_INFINITY {
                masked[idx] = true;
                continue;
            }
            (peak.0 % gw, peak.0 / gw)
        };
        let cell_idx = cell.1 * gw + cell.0;

        // Adding one detection at `cell` changes the window-count loss by
        // (1/K) * sum over windows containing the cell of (-2 diff + 1);
        // candidates that would increase it are masked out.
        let counts_u = window_counts_raw(&u, &geom, cfg.window)?;
        let diff: Vec<f64> = counts_d
            .values()
            .iter()
            .zip(&counts_u)
            .map(|(&a, &b)| a - b)
            .collect();
        let b_map = window_counts_raw(&diff, &geom, cfg.window)?;
        if -2.0 * b_map[cell_idx] + area[cell_idx] > 0.0 {
            masked[idx] = true;
            continue;
        }

        // Local evidence guard: the signed snap patch must hold at least
        // the threshold fraction of the mass a unit kernel of the local
        // width would place there. An already-explained object leaves only
        // a kernel-width-mismatch spike, well below that.
        let sigma = sigma_against(cell, &cells, &cfg.sigma);
        let kernel = KernelSpec::truncated(sigma, true)?;
        let required = cfg.add_mass_threshold * kernel_patch_mass(&kernel, SNAP_WINDOW);
        if snap[cell_idx] < required {
            masked[idx] = true;
            continue;
        }

        // Box size: mean of detections within 2 * window cells, else default.
        let radius = (2 * cfg.window) as f64;
        let mut size_sum = (0.0, 0.0);
        let mut size_n = 0usize;
        for (det, &(cx, cy)) in dets.iter().chain(added.iter()).zip(cells.iter()) {
            let dist = math::hypot(cell.0 as f64 - cx as f64, cell.1 as f64 - cy as f64);
            if dist <= radius {
                size_sum.0 += det.bbox.w;
                size_sum.1 += det.bbox.h;
                size_n += 1;
            }
        }
        let (bw, bh) = if size_n > 0 {
            (size_sum.0 / size_n as f64, size_sum.1 / size_n as f64)
        } else {
            cfg.default_box
        };
        // Sub-cell center: positive-residual centroid over the snap patch.
        let (px, py) = {
            let half = (SNAP_WINDOW / 2) as isize;
            let (mut wx, mut wy, mut wt) = (0.0, 0.0, 0.0);
            for dy in -half..=half {
                for dx in -half..=half {
                    let x = cell.0 as isize + dx;
                    let y = cell.1 as isize + dy;
                    if x < 0 || y < 0 || x >= gw as isize || y >= geom.grid_h() as isize {
                        continue;
                    }
                    let w = f64::max(residual.get(x as usize, y as usize), 0.0);
                    wx += w * x as f64;
                    wy += w * y as f64;
                    wt += w;
                }
            }
            if wt > 0.0 {
                let r = geom.r() as f64;
                (((wx / wt) + 0.5) * r, ((wy / wt) + 0.5) * r)
            } else {
                geom.cell_center(cell)
            }
        };
        let px = px.clamp(0.0, geom.in_w() as f64 - 1e-6);
        let py = py.clamp(0.0, geom.in_h() as f64 - 1e-6);
        let bbox = BBox::from_center(px, py, bw, bh)?;
        if dets
            .iter()
            .map(|d| &d.bbox)
            .chain(added.iter().map(|d| &d.bbox))
            .any(|b| crate::model::iou(b, &bbox) >= recovery_nms_env())
        {
            masked[idx] = true;
            continue;
        }
        let det = Detection::new(bbox, cfg.recovered_confidence, 0)?;

        // Subtract the unit kernel this recovery explains.
        subtract_kernel(&mut residual, cell, &kernel);
        u[cell.1 * gw + cell.0] += 1.0;
        cells.push(cell);
        added.push(det);
    }
    Ok(added)
}

fn subtract_kernel(map: &mut DensityGrid, cell: (usize, usize), kernel: &KernelSpec) {
    let w = kernel.weights();
    let r = kernel.truncation_radius as isize;
    let side = (2 * r + 1) as usize;
    let (gw, gh) = (map.geom().grid_w() as isize, map.geom().grid_h() as isize);
    let (cx, cy) = (cell.0 as isize, cell.1 as isize);
    for dy in -r..=r {
        let y = cy + dy;
        if y < 0 || y >= gh {
            continue;
        }
        for dx in -r..=r {
            let x = cx + dx;
            if x < 0 || x >= gw {
                continue;
            }
            let wi = (dy + r) as usize * side + (dx + r) as usize;
            map.add(x as usize, y as usize, -w[wi]);
        }
    }
}

/// Greedy rejection of false detections.
///
/// Repeatedly removes the detection whose removal most decreases the
/// window-count loss, while the decrease clears `remove_gain_threshold`.
/// Detections at or above `exempt_confidence` are never removed.
pub fn reject_false(
    dets: &[Detection],
    dhat: &DensityGrid,
    cfg: &RefineConfig,
) -> Result<Vec<Detection>, RefineError> {
    let removed = reject_false_indices(dets, dhat, cfg)?;
    Ok(removed.iter().map(|&i| dets[i].clone()).collect())
}

fn reject_false_indices(
    dets: &[Detection],
    dhat: &DensityGrid,
    cfg: &RefineConfig,
) -> Result<Vec<usize>, RefineError> {
    cfg.validate()?;
    let geom = *dhat.geom();
    let gw = geom.grid_w();
    let cells = det_cells(dets, &geom)?;
    let mut u = count_grid(&cells, &geom);
    let counts_d = density::window_counts(dhat, cfg.window)?;
    let area = window_counts_raw(&vec![1.0; geom.cells()], &geom, cfg.window)?;
    let k = geom.cells() as f64;

    let mut removed = vec![false; dets.len()];
    let mut out = Vec::new();
    loop {
        let counts_u = window_counts_raw(&u, &geom, cfg.window)?;
        let diff: Vec<f64> = counts_d
            .values()
            .iter()
            .zip(&counts_u)
            .map(|(&a, &b)| a - b)
            .collect();
        let b_map = window_counts_raw(&diff, &geom, cfg.window)?;

        // Removing detection i adds +1 to the count difference in every
        // window containing its cell: delta = (1/K) (2 B + A).
        let mut best: Option<(usize, f64)> = None;
        for (i, det) in dets.iter().enumerate() {
            if removed[i] || det.confidence >= cfg.exempt_confidence {
                continue;
            }
            let idx = cells[i].1 * gw + cells[i].0;
            let delta = (2.0 * b_map[idx] + area[idx]) / k;
            if delta < -cfg.remove_gain_threshold
                && best.map(|(_, bd)| delta < bd).unwrap_or(true)
            {
                best = Some((i, delta));
            }
        }
        let Some((i, _)) = best else { break };
        removed[i] = true;
        u[cells[i].1 * gw + cells[i].0] -= 1.0;
        out.push(i);
    }
    out.sort_unstable();
    Ok(out)
}

/// Full refinement of one frame: rejection, then recovery. The report
/// carries the window-count gap before and after; the greedy acceptance
/// rules guarantee the gap never increases, and that is asserted here.
pub fn refine_frame(
    dets: &[Detection],
    dhat: &DensityGrid,
    cfg: &RefineConfig,
) -> Result<(Vec<Detection>, RefineReport), RefineError> {
    cfg.validate()?;
    let geom = *dhat.geom();
    let cells = det_cells(dets, &geom)?;
    let initial_count_gap = count_gap(dhat, &count_grid(&cells, &geom), cfg.window)?;

    let removed_idx = reject_false_indices(dets, dhat, cfg)?;
    let removed: Vec<Detection> = removed_idx.iter().map(|&i| dets[i].clone()).collect();
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len() - removed_idx.len());
    let mut r = 0usize;
    for (i, det) in dets.iter().enumerate() {
        if r < removed_idx.len() && removed_idx[r] == i {
            r += 1;
        } else {
            kept.push(det.clone());
        }
    }

    let added = recover_missed(&kept, dhat, cfg)?;
    kept.extend(added.iter().cloned());

    let final_cells = det_cells(&kept, &geom)?;
    let final_count_gap = count_gap(dhat, &count_grid(&final_cells, &geom), cfg.window)?;
    assert!(
        final_count_gap <= initial_count_gap + 1e-9,
        "refinement must not increase the window-count loss: \
         {final_count_gap} > {initial_count_gap}"
    );

    let report = RefineReport {
        added,
        removed,
        initial_count_gap,
        final_count_gap,
    };
    Ok((kept, report))
}

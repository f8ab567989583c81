//! Gaussian heatmap and crowd density map construction, plus the
//! sliding-window count machinery built on integral images.
//!
//! A density map is a non-negative scalar field on the downsampled feature
//! grid whose sum over a region is the expected object count in that
//! region: each object contributes one unit-mass Gaussian kernel. The
//! center heatmap used by detection supervision is the unnormalized
//! variant (peak value 1 at each annotated cell, combined by max).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::model::{center_to_grid, BBox, GridGeometry, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub enum DensityError {
    /// Operation requires at least one center.
    EmptyCenters,
    /// A grid cell index lies outside the grid.
    CellOutOfGrid { x: usize, y: usize, grid_w: usize, grid_h: usize },
    /// A box is not fully inside the input image.
    BoxOutsideImage,
    /// Paired lists have different lengths.
    LengthMismatch { left: usize, right: usize },
    /// Raw values do not match the grid size.
    BadValuesLength { expected: usize, got: usize },
    /// Sliding windows must have odd side length.
    EvenWindow { window: usize },
    /// Kernel standard deviation must be positive and finite.
    BadSigma { sigma: f64 },
    /// Truncation radius below ceil(3 sigma).
    BadTruncation { radius: usize, required: usize },
    /// Two grids were expected to share a geometry.
    GeometryMismatch,
    /// Invalid adaptive-sigma configuration.
    BadConfig(&'static str),
    Model(ModelError),
}

impl fmt::Display for DensityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityError::EmptyCenters => write!(f, "at least one center required"),
            DensityError::CellOutOfGrid { x, y, grid_w, grid_h } => {
                write!(f, "cell ({x}, {y}) outside {grid_w}x{grid_h} grid")
            }
            DensityError::BoxOutsideImage => write!(f, "box not fully inside the image"),
            DensityError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            DensityError::BadValuesLength { expected, got } => {
                write!(f, "expected {expected} grid values, got {got}")
            }
            DensityError::EvenWindow { window } => {
                write!(f, "window side must be odd, got {window}")
            }
            DensityError::BadSigma { sigma } => write!(f, "sigma must be positive, got {sigma}"),
            DensityError::BadTruncation { radius, required } => {
                write!(f, "truncation radius {radius} below required {required}")
            }
            DensityError::GeometryMismatch => write!(f, "grid geometries differ"),
            DensityError::BadConfig(what) => write!(f, "bad config: {what}"),
            DensityError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for DensityError {}

impl From<ModelError> for DensityError {
    fn from(e: ModelError) -> Self {
        DensityError::Model(e)
    }
}

/// Scalar field on the feature grid, row-major. Density construction ops
/// keep every entry non-negative; the refinement residual reuses the type
/// for a signed field.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    geom: GridGeometry,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn zeros(geom: GridGeometry) -> Self {
        DensityGrid {
            geom,
            values: vec![0.0; geom.cells()],
        }
    }

    pub fn from_values(geom: GridGeometry, values: Vec<f64>) -> Result<Self, DensityError> {
        if values.len() != geom.cells() {
            return Err(DensityError::BadValuesLength {
                expected: geom.cells(),
                got: values.len(),
            });
        }
        Ok(DensityGrid { geom, values })
    }

    #[inline]
    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    fn idx(&self, x: usize, y: usize) -> usize {
        y * self.geom.grid_w() + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let i = self.idx(x, y);
        self.values[i] = v;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, v: f64) {
        let i = self.idx(x, y);
        self.values[i] += v;
    }

    /// Sum of all entries (the total expected count for a density map).
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Binary grid of candidate object-center cells.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorGrid {
    geom: GridGeometry,
    bits: Vec<u8>,
}

impl IndicatorGrid {
    pub fn zeros(geom: GridGeometry) -> Self {
        IndicatorGrid {
            geom,
            bits: vec![0; geom.cells()],
        }
    }

    /// Builds an indicator with the given cells set. Duplicate cells
    /// collapse onto the same bit.
    pub fn from_cells(geom: GridGeometry, cells: &[(usize, usize)]) -> Result<Self, DensityError> {
        let mut u = IndicatorGrid::zeros(geom);
        for &(x, y) in cells {
            u.check_cell(x, y)?;
            u.bits[y * geom.grid_w() + x] = 1;
        }
        Ok(u)
    }

    fn check_cell(&self, x: usize, y: usize) -> Result<(), DensityError> {
        if x >= self.geom.grid_w() || y >= self.geom.grid_h() {
            return Err(DensityError::CellOutOfGrid {
                x,
                y,
                grid_w: self.geom.grid_w(),
                grid_h: self.geom.grid_h(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) -> Result<(), DensityError> {
        self.check_cell(x, y)?;
        self.bits[y * self.geom.grid_w() + x] = on as u8;
        Ok(())
    }

    #[inline]
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.geom.grid_w() + x] != 0
    }

    /// Set cells in row-major order.
    pub fn ones(&self) -> Vec<(usize, usize)> {
        let w = self.geom.grid_w();
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| (i % w, i / w))
            .collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// The indicator as a 0/1 scalar field (the vectorization `u`).
    pub fn to_values(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Truncated 2D Gaussian stencil.
///
/// `normalized = true` gives a discrete unit-mass kernel (density maps);
/// `normalized = false` leaves the peak at exactly 1 (center heatmaps).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub sigma: f64,
    pub truncation_radius: usize,
    pub normalized: bool,
}

impl KernelSpec {
    /// Kernel truncated at the conventional 3 sigma.
    pub fn truncated(sigma: f64, normalized: bool) -> Result<Self, DensityError> {
        let radius = required_radius(sigma)?;
        Ok(KernelSpec {
            sigma,
            truncation_radius: radius,
            normalized,
        })
    }

    pub fn new(sigma: f64, truncation_radius: usize, normalized: bool) -> Result<Self, DensityError> {
        let required = required_radius(sigma)?;
        if truncation_radius < required {
            return Err(DensityError::BadTruncation {
                radius: truncation_radius,
                required,
            });
        }
        Ok(KernelSpec {
            sigma,
            truncation_radius,
            normalized,
        })
    }

    /// The (2r+1)^2 stencil in row-major order. When normalized, the
    /// returned weights sum to exactly 1 up to rounding.
    pub fn weights(&self) -> Vec<f64> {
        let r = self.truncation_radius as isize;
        let side = (2 * r + 1) as usize;
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut w = Vec::with_capacity(side * side);
        for dy in -r..=r {
            for dx in -r..=r {
                w.push(math::exp(-((dx * dx + dy * dy) as f64) * inv));
            }
        }
        if self.normalized {
            let total: f64 = w.iter().sum();
            for v in w.iter_mut() {
                *v /= total;
            }
        }
        w
    }
}

fn required_radius(sigma: f64) -> Result<usize, DensityError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DensityError::BadSigma { sigma });
    }
    Ok(math::ceil(3.0 * sigma) as usize)
}

/// Parameters for scale-adaptive kernel widths: `sigma_j = gamma * mean
/// distance to the k nearest neighbours`, clamped to `[floor, cap]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveSigmaConfig {
    pub k: usize,
    pub gamma: f64,
    pub sigma_floor: f64,
    pub sigma_cap: f64,
}

impl AdaptiveSigmaConfig {
    pub fn new(k: usize, gamma: f64, sigma_floor: f64, sigma_cap: f64) -> Result<Self, DensityError> {
        if k == 0 {
            return Err(DensityError::BadConfig("k must be >= 1"));
        }
        if !(sigma_floor > 0.0 && sigma_floor <= sigma_cap) {
            return Err(DensityError::BadConfig("need 0 < sigma_floor <= sigma_cap"));
        }
        if !(gamma > 0.0) {
            return Err(DensityError::BadConfig("gamma must be > 0"));
        }
        Ok(AdaptiveSigmaConfig { k, gamma, sigma_floor, sigma_cap })
    }

    /// Kernel width for an isolated object, where no neighbour distance
    /// exists.
    pub fn lone_sigma(&self) -> f64 {
        self.sigma_cap / 2.0
    }
}

impl Default for AdaptiveSigmaConfig {
    fn default() -> Self {
        AdaptiveSigmaConfig {
            k: 3,
            gamma: 0.3,
            sigma_floor: 1.0,
            sigma_cap: 15.0,
        }
    }
}

/// Heatmap kernel width from the object's on-grid size, floored at one cell.
fn heatmap_sigma(bbox: &BBox, geom: &GridGeometry) -> f64 {
    let r = geom.r() as f64;
    let scale = (bbox.w / r + bbox.h / r) / 2.0;
    f64::max(1.0, 0.1 * scale)
}

/// GT center heatmap for one class: an unnormalized Gaussian (peak exactly
/// 1 at each annotated center cell) per box, combined by elementwise max.
pub fn heatmap_from_boxes(boxes: &[BBox], geom: &GridGeometry) -> Result<DensityGrid, DensityError> {
    let mut map = DensityGrid::zeros(*geom);
    for bbox in boxes {
        if bbox.x < 0.0
            || bbox.y < 0.0
            || bbox.right() > geom.in_w() as f64
            || bbox.bottom() > geom.in_h() as f64
        {
            return Err(DensityError::BoxOutsideImage);
        }
        let (cell, _) = center_to_grid(bbox.center(), geom)?;
        let sigma = heatmap_sigma(bbox, geom);
        let kernel = KernelSpec::truncated(sigma, false)?;
        stamp_max(&mut map, cell, &kernel);
    }
    Ok(map)
}

/// Adaptive kernel widths per center. With fewer than `k` neighbours the
/// mean runs over all available; a single center falls back to
/// [`AdaptiveSigmaConfig::lone_sigma`].
pub fn adaptive_sigmas(
    centers: &[(usize, usize)],
    cfg: &AdaptiveSigmaConfig,
) -> Result<Vec<f64>, DensityError> {
    if centers.is_empty() {
        return Err(DensityError::EmptyCenters);
    }
    if centers.len() == 1 {
        return Ok(vec![cfg.lone_sigma()]);
    }
    let mut sigmas = Vec::with_capacity(centers.len());
    let mut dists: Vec<f64> = Vec::with_capacity(centers.len() - 1);
    for (j, &(cx, cy)) in centers.iter().enumerate() {
        dists.clear();
        for (i, &(ox, oy)) in centers.iter().enumerate() {
            if i == j {
                continue;
            }
            let dx = cx as f64 - ox as f64;
            let dy = cy as f64 - oy as f64;
            dists.push(math::hypot(dx, dy));
        }
        dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let take = usize::min(cfg.k, dists.len());
        let mean = dists[..take].iter().sum::<f64>() / take as f64;
        sigmas.push(f64::clamp(cfg.gamma * mean, cfg.sigma_floor, cfg.sigma_cap));
    }
    Ok(sigmas)
}

/// Sum of per-center Gaussian kernels, each discretely normalized to unit
/// mass before placement. Mass falling outside the grid is truncated, so
/// border objects contribute less than 1.
pub fn density_from_centers(
    centers: &[(usize, usize)],
    sigmas: &[f64],
    geom: &GridGeometry,
) -> Result<DensityGrid, DensityError> {
    if centers.len() != sigmas.len() {
        return Err(DensityError::LengthMismatch {
            left: centers.len(),
            right: sigmas.len(),
        });
    }
    let mut map = DensityGrid::zeros(*geom);
    for (&cell, &sigma) in centers.iter().zip(sigmas) {
        if cell.0 >= geom.grid_w() || cell.1 >= geom.grid_h() {
            return Err(DensityError::CellOutOfGrid {
                x: cell.0,
                y: cell.1,
                grid_w: geom.grid_w(),
                grid_h: geom.grid_h(),
            });
        }
        let kernel = KernelSpec::truncated(sigma, true)?;
        stamp_add(&mut map, cell, &kernel);
    }
    Ok(map)
}

/// Blurs the set bits of an indicator with adaptive-sigma kernels; the
/// density-map view of a detection configuration (`U (x) G_sigma`).
pub fn indicator_blur(
    u: &IndicatorGrid,
    cfg: &AdaptiveSigmaConfig,
) -> Result<DensityGrid, DensityError> {
    let cells = u.ones();
    if cells.is_empty() {
        return Ok(DensityGrid::zeros(*u.geom()));
    }
    let sigmas = adaptive_sigmas(&cells, cfg)?;
    density_from_centers(&cells, &sigmas, u.geom())
}

fn stamp_add(map: &mut DensityGrid, cell: (usize, usize), kernel: &KernelSpec) {
    let w = kernel.weights();
    let r = kernel.truncation_radius as isize;
    let side = (2 * r + 1) as usize;
    let (gw, gh) = (map.geom.grid_w() as isize, map.geom.grid_h() as isize);
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
            map.add(x as usize, y as usize, w[wi]);
        }
    }
}

fn stamp_max(map: &mut DensityGrid, cell: (usize, usize), kernel: &KernelSpec) {
    let w = kernel.weights();
    let r = kernel.truncation_radius as isize;
    let side = (2 * r + 1) as usize;
    let (gw, gh) = (map.geom.grid_w() as isize, map.geom.grid_h() as isize);
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
            let cur = map.get(x as usize, y as usize);
            if w[wi] > cur {
                map.set(x as usize, y as usize, w[wi]);
            }
        }
    }
}

/// Summed-area table over a grid; rectangle sums in O(1).
#[derive(Debug, Clone)]
pub struct IntegralImage {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl IntegralImage {
    pub fn new(values: &[f64], w: usize, h: usize) -> Self {
        debug_assert_eq!(values.len(), w * h);
        let stride = w + 1;
        let mut data = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                data[(y + 1) * stride + (x + 1)] = data[y * stride + (x + 1)] + row;
            }
        }
        IntegralImage { w, h, data }
    }

    /// Sum over the inclusive cell rectangle [x0, x1] x [y0, y1], clamped
    /// to the grid.
    pub fn rect_sum(&self, x0: isize, y0: isize, x1: isize, y1: isize) -> f64 {
        let x0 = x0.clamp(0, self.w as isize) as usize;
        let y0 = y0.clamp(0, self.h as isize) as usize;
        let x1 = (x1 + 1).clamp(0, self.w as isize) as usize;
        let y1 = (y1 + 1).clamp(0, self.h as isize) as usize;
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let s = self.w + 1;
        self.data[y1 * s + x1] - self.data[y0 * s + x1] - self.data[y1 * s + x0]
            + self.data[y0 * s + x0]
    }
}

/// Per-cell window counts over raw values: entry `c` is the sum of the
/// grid over the odd `window x window` region centered at `c`, with
/// out-of-bounds area contributing zero. One window per cell, so the
/// number of windows K equals grid_w * grid_h.
pub(crate) fn window_counts_values(
    values: &[f64],
    grid_w: usize,
    grid_h: usize,
    window: usize,
) -> Result<Vec<f64>, DensityError> {
    if window == 0 || window % 2 == 0 {
        return Err(DensityError::EvenWindow { window });
    }
    if window == 1 {
        return Ok(values.to_vec());
    }
    let integral = IntegralImage::new(values, grid_w, grid_h);
    let half = (window / 2) as isize;
    let mut out = Vec::with_capacity(values.len());
    for y in 0..grid_h as isize {
        for x in 0..grid_w as isize {
            out.push(integral.rect_sum(x - half, y - half, x + half, y + half));
        }
    }
    Ok(out)
}

/// Window counts of a density grid (Eq. of the count readout `n_k`).
pub fn window_counts(grid: &DensityGrid, window: usize) -> Result<DensityGrid, DensityError> {
    let geom = grid.geom;
    let values = window_counts_values(&grid.values, geom.grid_w(), geom.grid_h(), window)?;
    Ok(DensityGrid { geom, values })
}

/// Window counts of an indicator grid.
pub fn window_counts_indicator(
    u: &IndicatorGrid,
    window: usize,
) -> Result<DensityGrid, DensityError> {
    let geom = *u.geom();
    let values = window_counts_values(&u.to_values(), geom.grid_w(), geom.grid_h(), window)?;
    Ok(DensityGrid { geom, values })
}

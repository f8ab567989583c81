//! Core domain types and coordinate/geometry primitives shared by all
//! modules: boxes, detections, reID embeddings and the downsampled feature
//! grid that density maps and heatmaps live on.

use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// Dimension of reID appearance embeddings.
pub const EMBEDDING_DIM: usize = 128;

/// Tolerance on the L2 norm of a unit embedding.
pub const EMBEDDING_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Box width or height is not strictly positive.
    InvalidBox { w: f64, h: f64 },
    /// Embedding has the wrong dimension.
    BadEmbeddingDim { got: usize },
    /// Embedding norm is outside `1 ± EMBEDDING_NORM_TOL`.
    NonUnitEmbedding { norm: f64 },
    /// Value expected in [0,1].
    OutOfUnitRange { what: &'static str, value: f64 },
    /// Image size not divisible by the downsampling factor.
    NonDivisible { in_w: usize, in_h: usize, r: usize },
    /// Downsampling factor must be a positive integer.
    ZeroDownsample,
    /// Point lies outside the input image.
    PointOutOfBounds { x: f64, y: f64, in_w: usize, in_h: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidBox { w, h } => {
                write!(f, "box size must be positive, got w={w}, h={h}")
            }
            ModelError::BadEmbeddingDim { got } => {
                write!(f, "embedding must have dimension {EMBEDDING_DIM}, got {got}")
            }
            ModelError::NonUnitEmbedding { norm } => {
                write!(f, "embedding must be unit norm, got |e| = {norm}")
            }
            ModelError::OutOfUnitRange { what, value } => {
                write!(f, "{what} must lie in [0,1], got {value}")
            }
            ModelError::NonDivisible { in_w, in_h, r } => {
                write!(f, "image size {in_w}x{in_h} is not divisible by R={r}")
            }
            ModelError::ZeroDownsample => write!(f, "downsampling factor must be >= 1"),
            ModelError::PointOutOfBounds { x, y, in_w, in_h } => {
                write!(f, "point ({x}, {y}) outside image {in_w}x{in_h}")
            }
        }
    }
}

impl core::error::Error for ModelError {}

/// Axis-aligned bounding box, top-left + size, in input-image pixels.
///
/// This is the MOTChallenge on-disk convention; the object center used by
/// the grid machinery is derived via [`BBox::center`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        if !(w > 0.0) || !(h > 0.0) {
            return Err(ModelError::InvalidBox { w, h });
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    #[inline]
    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two boxes; 0 when disjoint, 1 iff identical.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = f64::min(a.right(), b.right()) - f64::max(a.x, b.x);
    let iy = f64::min(a.bottom(), b.bottom()) - f64::max(a.y, b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

/// Unit-norm appearance embedding of dimension [`EMBEDDING_DIM`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector that is already unit norm (within [`EMBEDDING_NORM_TOL`]).
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != EMBEDDING_DIM {
            return Err(ModelError::BadEmbeddingDim { got: values.len() });
        }
        let norm = l2_norm(&values);
        if math::abs(norm - 1.0) > EMBEDDING_NORM_TOL {
            return Err(ModelError::NonUnitEmbedding { norm });
        }
        Ok(Embedding(values))
    }

    /// Normalizes an arbitrary vector to unit length. Rejects near-zero input.
    pub fn from_unnormalized(mut values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != EMBEDDING_DIM {
            return Err(ModelError::BadEmbeddingDim { got: values.len() });
        }
        let norm = l2_norm(&values);
        if norm < 1e-12 {
            return Err(ModelError::NonUnitEmbedding { norm });
        }
        for v in values.iter_mut() {
            *v /= norm;
        }
        Ok(Embedding(values))
    }

    /// Unit vector along the given axis.
    pub fn axis(i: usize) -> Self {
        let mut v = alloc::vec![0.0; EMBEDDING_DIM];
        v[i % EMBEDDING_DIM] = 1.0;
        Embedding(v)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    math::sqrt(values.iter().map(|v| v * v).sum())
}

/// `1 - <e1, e2>` for unit vectors; lies in [0, 2], equals 0 iff the
/// directions coincide.
pub fn cosine_distance(e1: &Embedding, e2: &Embedding) -> f64 {
    1.0 - e1.dot(e2)
}

/// One detected object: box, confidence, class tag and optional reID
/// embedding. Coordinates are input-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class_id: usize,
    pub embedding: Option<Embedding>,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64, class_id: usize) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ModelError::OutOfUnitRange {
                what: "confidence",
                value: confidence,
            });
        }
        Ok(Detection {
            bbox,
            confidence,
            class_id,
            embedding: None,
        })
    }

    pub fn with_embedding(mut self, embedding: Embedding) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

/// Geometry linking input-image pixels to the R-downsampled feature grid.
///
/// Rejects image sizes not divisible by `r`; inputs are expected to be
/// resized to a multiple of the stride upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    in_w: usize,
    in_h: usize,
    r: usize,
    grid_w: usize,
    grid_h: usize,
}

impl GridGeometry {
    pub const DEFAULT_R: usize = 4;

    pub fn new(in_w: usize, in_h: usize, r: usize) -> Result<Self, ModelError> {
        if r == 0 {
            return Err(ModelError::ZeroDownsample);
        }
        if in_w == 0 || in_h == 0 || in_w % r != 0 || in_h % r != 0 {
            return Err(ModelError::NonDivisible { in_w, in_h, r });
        }
        Ok(GridGeometry {
            in_w,
            in_h,
            r,
            grid_w: in_w / r,
            grid_h: in_h / r,
        })
    }

    #[inline]
    pub fn in_w(&self) -> usize {
        self.in_w
    }

    #[inline]
    pub fn in_h(&self) -> usize {
        self.in_h
    }

    #[inline]
    pub fn r(&self) -> usize {
        self.r
    }

    #[inline]
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    #[inline]
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    /// Number of grid cells, `grid_w * grid_h`.
    #[inline]
    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Pixel coordinates of the center of a grid cell.
    #[inline]
    pub fn cell_center(&self, cell: (usize, usize)) -> (f64, f64) {
        let r = self.r as f64;
        (
            (cell.0 as f64 + 0.5) * r,
            (cell.1 as f64 + 0.5) * r,
        )
    }
}

/// Per-image supervision targets: center heatmaps (one per class), scale
/// and offset values at the annotated cells, the GT density map and
/// indicator, and one-hot identity labels.
///
/// Exactly `annotations.len()` grid cells carry object annotations; every
/// offset component lies in [0, 1).
#[derive(Debug, Clone)]
pub struct TrainingTensors {
    pub geom: GridGeometry,
    /// One heatmap per class, values in [0, 1].
    pub heatmaps: Vec<crate::density::DensityGrid>,
    /// Annotated cells with their per-object targets, one entry per object.
    pub annotations: Vec<ObjectTarget>,
    pub density: crate::density::DensityGrid,
    pub indicator: crate::density::IndicatorGrid,
    /// Number of distinct identities L (one-hot label width).
    pub num_identities: usize,
}

/// Targets attached to one annotated object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectTarget {
    pub cell: (usize, usize),
    /// Box size (w, h) in input pixels.
    pub scale: (f64, f64),
    /// Sub-cell offset, components in [0, 1).
    pub offset: (f64, f64),
    pub class_id: usize,
    /// Identity label index in [0, num_identities).
    pub identity: usize,
}

impl TrainingTensors {
    /// Assembles heat map, size/offset targets, density map, indicator and
    /// identity labels from GT boxes.
    pub fn build(
        boxes: &[BBox],
        class_ids: &[usize],
        identities: &[usize],
        num_classes: usize,
        num_identities: usize,
        geom: &GridGeometry,
        sigma_cfg: &crate::density::AdaptiveSigmaConfig,
    ) -> Result<Self, crate::density::DensityError> {
        use crate::density::{self, DensityError};
        if boxes.len() != class_ids.len() || boxes.len() != identities.len() {
            return Err(DensityError::LengthMismatch {
                left: boxes.len(),
                right: class_ids.len().min(identities.len()),
            });
        }
        let mut per_class: Vec<Vec<BBox>> = alloc::vec![Vec::new(); num_classes.max(1)];
        let mut annotations = Vec::with_capacity(boxes.len());
        let mut cells = Vec::with_capacity(boxes.len());
        for ((bbox, &class_id), &identity) in boxes.iter().zip(class_ids).zip(identities) {
            if class_id >= num_classes.max(1) || identity >= num_identities {
                return Err(DensityError::BadConfig("class or identity label out of range"));
            }
            let (cell, offset) = center_to_grid(bbox.center(), geom)?;
            per_class[class_id].push(*bbox);
            cells.push(cell);
            annotations.push(ObjectTarget {
                cell,
                scale: (bbox.w, bbox.h),
                offset,
                class_id,
                identity,
            });
        }
        let heatmaps = per_class
            .iter()
            .map(|class_boxes| density::heatmap_from_boxes(class_boxes, geom))
            .collect::<Result<Vec<_>, _>>()?;
        let indicator = crate::density::IndicatorGrid::from_cells(*geom, &cells)?;
        let density = if cells.is_empty() {
            crate::density::DensityGrid::zeros(*geom)
        } else {
            let sigmas = density::adaptive_sigmas(&cells, sigma_cfg)?;
            density::density_from_centers(&cells, &sigmas, geom)?
        };
        Ok(TrainingTensors {
            geom: *geom,
            heatmaps,
            annotations,
            density,
            indicator,
            num_identities,
        })
    }
}

/// Maps a pixel point to its grid cell and fractional offset.
///
/// `cell = floor(p / R)` componentwise; the offset is `p/R - cell`, each
/// component in [0, 1), so `(cell + offset) * R` reconstructs `p` exactly
/// when `R` is a power of two.
pub fn center_to_grid(
    p: (f64, f64),
    geom: &GridGeometry,
) -> Result<((usize, usize), (f64, f64)), ModelError> {
    let (x, y) = p;
    if !(x >= 0.0 && x < geom.in_w as f64 && y >= 0.0 && y < geom.in_h as f64) {
        return Err(ModelError::PointOutOfBounds {
            x,
            y,
            in_w: geom.in_w,
            in_h: geom.in_h,
        });
    }
    let r = geom.r as f64;
    let gx = x / r;
    let gy = y / r;
    let cx = math::floor(gx);
    let cy = math::floor(gy);
    Ok(((cx as usize, cy as usize), (gx - cx, gy - cy)))
}

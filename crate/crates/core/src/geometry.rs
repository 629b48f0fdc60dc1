//! Patch-grid arithmetic and pixel boxes.
//!
//! Boxes are half-open integer rectangles: pixel `(x, y)` lies inside iff
//! `x_min <= x < x_max` and `y_min <= y < y_max`. Patches are indexed
//! row-major over the grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image and patch dimensions shared by every feature map of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridSpec {
    image_height: u32,
    image_width: u32,
    patch_size: u32,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    image_height: u32,
    image_width: u32,
    patch_size: u32,
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        GridSpec::new(raw.image_height, raw.image_width, raw.patch_size)
    }
}

impl From<GridSpec> for RawGrid {
    fn from(g: GridSpec) -> Self {
        RawGrid {
            image_height: g.image_height,
            image_width: g.image_width,
            patch_size: g.patch_size,
        }
    }
}

impl GridSpec {
    pub fn new(image_height: u32, image_width: u32, patch_size: u32) -> Result<Self> {
        if patch_size == 0 || image_height == 0 || image_width == 0 {
            return Err(Error::Argument(format!(
                "grid dimensions must be positive, got {image_height}x{image_width}x{patch_size}"
            )));
        }
        if !image_height.is_multiple_of(patch_size) || !image_width.is_multiple_of(patch_size) {
            return Err(Error::Argument(format!(
                "image {image_height}x{image_width} is not a multiple of patch size {patch_size}"
            )));
        }
        Ok(GridSpec {
            image_height,
            image_width,
            patch_size,
        })
    }

    /// Builds a grid from patch counts rather than pixel sizes.
    pub fn from_patches(rows: u32, cols: u32, patch_size: u32) -> Result<Self> {
        let h = rows
            .checked_mul(patch_size)
            .ok_or_else(|| Error::Argument("grid height overflows u32".into()))?;
        let w = cols
            .checked_mul(patch_size)
            .ok_or_else(|| Error::Argument("grid width overflows u32".into()))?;
        GridSpec::new(h, w, patch_size)
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        (self.image_height / self.patch_size) as usize
    }

    pub fn cols(&self) -> usize {
        (self.image_width / self.patch_size) as usize
    }

    /// Total patch count `rows * cols`.
    pub fn num_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn patch(&self, index: usize) -> Result<PatchIndex> {
        if index < self.num_patches() {
            Ok(PatchIndex(index))
        } else {
            Err(Error::Range {
                index,
                limit: self.num_patches(),
            })
        }
    }

    /// `(row, col)` of a patch.
    pub fn position(&self, p: PatchIndex) -> (usize, usize) {
        (p.0 / self.cols(), p.0 % self.cols())
    }

    pub fn full_image(&self) -> BBox {
        BBox {
            x_min: 0,
            y_min: 0,
            x_max: self.image_width,
            y_max: self.image_height,
        }
    }

    pub fn contains(&self, b: &BBox) -> bool {
        b.x_max <= self.image_width && b.y_max <= self.image_height
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}",
            self.image_height, self.image_width, self.patch_size
        )
    }
}

/// Parses `HxWxP`, e.g. `224x224x16`.
impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(Error::Argument(format!("grid must be HxWxP, got {s:?}")));
        }
        let mut nums = [0u32; 3];
        for (slot, part) in nums.iter_mut().zip(&parts) {
            *slot = part.trim().parse().map_err(|_| {
                Error::Argument(format!("grid component {part:?} is not an integer"))
            })?;
        }
        GridSpec::new(nums[0], nums[1], nums[2])
    }
}

/// Row-major patch position on a [`GridSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchIndex(pub usize);

impl PatchIndex {
    pub fn get(self) -> usize {
        self.0
    }
}

/// Axis-aligned half-open pixel rectangle; never empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BBox::new(r.x_min, r.y_min, r.x_max, r.y_max)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Argument(format!(
                "empty box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }

    pub fn y_min(&self) -> u32 {
        self.y_min
    }

    pub fn x_max(&self) -> u32 {
        self.x_max
    }

    pub fn y_max(&self) -> u32 {
        self.y_max
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        BBox::new(x_min, y_min, x_max, y_max).ok()
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        self.x_min <= x && x < self.x_max && self.y_min <= y && y < self.y_max
    }
}

pub fn patch_to_box(grid: &GridSpec, p: PatchIndex) -> Result<BBox> {
    if p.0 >= grid.num_patches() {
        return Err(Error::Range {
            index: p.0,
            limit: grid.num_patches(),
        });
    }
    let (row, col) = grid.position(p);
    let s = grid.patch_size;
    let x = col as u32 * s;
    let y = row as u32 * s;
    BBox::new(x, y, x + s, y + s)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// IoU between the set union of `patches` and `gt`.
///
/// The union is measured as a region, not a bounding hull: the plane is cut
/// along every box edge and each resulting cell is counted once.
pub fn union_box_region_iou(patches: &[BBox], gt: &BBox) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::Argument(
            "union IoU needs at least one patch box".into(),
        ));
    }
    let mut xs: Vec<u32> = Vec::with_capacity(2 * patches.len() + 2);
    let mut ys: Vec<u32> = Vec::with_capacity(2 * patches.len() + 2);
    for b in patches.iter().chain(std::iter::once(gt)) {
        xs.extend([b.x_min, b.x_max]);
        ys.extend([b.y_min, b.y_max]);
    }
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();

    let mut region = 0u64;
    let mut overlap = 0u64;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (x, y) = (xw[0], yw[0]);
            if patches.iter().any(|b| b.contains_pixel(x, y)) {
                let cell = u64::from(xw[1] - xw[0]) * u64::from(yw[1] - yw[0]);
                region += cell;
                if gt.contains_pixel(x, y) {
                    overlap += cell;
                }
            }
        }
    }
    let union = region + gt.area() - overlap;
    Ok(overlap as f64 / union as f64)
}

/// Per-pixel rasterised union IoU. Slow; kept as a reference for
/// cross-checking [`union_box_region_iou`].
pub fn pixel_count_iou(patches: &[BBox], gt: &BBox) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::Argument(
            "union IoU needs at least one patch box".into(),
        ));
    }
    let extent = patches.iter().fold(*gt, |acc, b| acc.hull(b));
    let (mut inter, mut union) = (0u64, 0u64);
    for y in extent.y_min..extent.y_max {
        for x in extent.x_min..extent.x_max {
            let in_m = patches.iter().any(|b| b.contains_pixel(x, y));
            let in_g = gt.contains_pixel(x, y);
            if in_m && in_g {
                inter += 1;
            }
            if in_m || in_g {
                union += 1;
            }
        }
    }
    Ok(inter as f64 / union as f64)
}

/// Chebyshev-distance adjacency: `max(|drow|, |dcol|) <= r`.
pub fn within_radius(grid: &GridSpec, a: PatchIndex, b: PatchIndex, r: usize) -> bool {
    let (ra, ca) = grid.position(a);
    let (rb, cb) = grid.position(b);
    ra.abs_diff(rb).max(ca.abs_diff(cb)) <= r
}

//! Stability-diagram data model, interchange I/O, patch extraction and
//! ground-truth labeling.
//!
//! Coordinates: pixel `(i, j)` holds the current measured at voltage
//! `origin_v + (i, j) · pixel_size_v`, with `i` along G1 and `j` along G2.
//! Row 0 of the grid is the lowest G2 voltage. A pixel is treated as the unit
//! square centred on its sample point when computing detection squares.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Aabb, Point};

pub const DEFAULT_PATCH_SIZE: usize = 18;
pub const DEFAULT_PATCH_OVERLAP: usize = 10;

#[derive(Debug, Error)]
pub enum DiagramError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("grid size mismatch: expected {expected} values, found {found}")]
    GridSizeMismatch { expected: usize, found: usize },
    #[error("non-finite value at ({i},{j})")]
    NonFinite { i: usize, j: usize },
    #[error("non-finite patch value at index {0}")]
    NonFinitePatchValue(usize),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("vertex `{field}` = ({g1}, {g2}) lies outside the diagram")]
    VertexOutOfBounds { field: String, g1: f64, g2: f64 },
    #[error("anisotropic pixel size ({0} V × {1} V) is not supported")]
    Anisotropic(f64, f64),
    #[error("diagram {width}×{height} is smaller than a {patch}-pixel patch")]
    TooSmall {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("point ({0}, {1}) is outside the diagram")]
    OutOfBounds(f64, f64),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> DiagramError {
    DiagramError::InvalidField {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Charge-regime label of an annotated area.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChargeLabel {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = "4+")]
    FourPlus,
    #[serde(rename = "unknown")]
    Unknown,
}

impl ChargeLabel {
    pub fn from_electrons(n: usize) -> Self {
        match n {
            0 => Self::Zero,
            1 => Self::One,
            2 => Self::Two,
            3 => Self::Three,
            _ => Self::FourPlus,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "0",
            Self::One => "1",
            Self::Two => "2",
            Self::Three => "3",
            Self::FourPlus => "4+",
            Self::Unknown => "unknown",
        }
    }
}

/// Binary patch class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "line")]
    Line,
    #[serde(rename = "no-line")]
    NoLine,
}

impl Category {
    pub fn flipped(self) -> Self {
        match self {
            Self::Line => Self::NoLine,
            Self::NoLine => Self::Line,
        }
    }

    pub fn as_target(self) -> f64 {
        match self {
            Self::Line => 1.0,
            Self::NoLine => 0.0,
        }
    }
}

/// Annotated transition line, vertices in volts.
#[derive(Clone, Debug, PartialEq)]
pub struct LineLabel {
    pub index: u32,
    pub polyline: Vec<Point>,
}

/// Annotated charge-regime polygon, vertices in volts.
#[derive(Clone, Debug, PartialEq)]
pub struct ChargeRegion {
    pub label: ChargeLabel,
    pub polygon: Vec<Point>,
}

/// Pixel rectangle `[x, x + side) × [y, y + side)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, side: usize) -> Self {
        Self { x, y, side }
    }

    /// Centre in pixel coordinates.
    pub fn center_px(&self) -> Point {
        let half = (self.side as f64 - 1.0) / 2.0;
        Point::new(self.x as f64 + half, self.y as f64 + half)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityDiagram {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixel_size_v: f64,
    pub origin_v: Point,
    /// Row-major, row 0 = lowest G2.
    pub grid: Vec<f32>,
    pub lines: Vec<LineLabel>,
    pub regions: Vec<ChargeRegion>,
}

impl StabilityDiagram {
    /// Builds a diagram and checks every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        pixel_size_v: f64,
        origin_v: Point,
        grid: Vec<f32>,
        lines: Vec<LineLabel>,
        regions: Vec<ChargeRegion>,
    ) -> Result<Self, DiagramError> {
        let d = Self {
            id: id.into(),
            width,
            height,
            pixel_size_v,
            origin_v,
            grid,
            lines,
            regions,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DiagramError> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("width/height", "must be positive"));
        }
        if !(self.pixel_size_v.is_finite() && self.pixel_size_v > 0.0) {
            return Err(invalid("pixel_size_v", "must be a positive finite number"));
        }
        if !(self.origin_v.x.is_finite() && self.origin_v.y.is_finite()) {
            return Err(invalid("origin_v", "must be finite"));
        }
        let expected = self.width * self.height;
        if self.grid.len() != expected {
            return Err(DiagramError::GridSizeMismatch {
                expected,
                found: self.grid.len(),
            });
        }
        if let Some(k) = self.grid.iter().position(|v| !v.is_finite()) {
            return Err(DiagramError::NonFinite {
                i: k % self.width,
                j: k / self.width,
            });
        }
        let bounds = self.bounds_tolerant();
        for (li, line) in self.lines.iter().enumerate() {
            if line.index < 1 {
                return Err(invalid(format!("lines[{li}].index"), "must be ≥ 1"));
            }
            if line.polyline.len() < 2 {
                return Err(invalid(
                    format!("lines[{li}].polyline"),
                    "needs at least 2 vertices",
                ));
            }
            for (vi, p) in line.polyline.iter().enumerate() {
                if !bounds.contains(*p) {
                    return Err(DiagramError::VertexOutOfBounds {
                        field: format!("lines[{li}].polyline[{vi}]"),
                        g1: p.x,
                        g2: p.y,
                    });
                }
            }
        }
        for (ri, region) in self.regions.iter().enumerate() {
            if region.polygon.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
                return Err(invalid(format!("regions[{ri}].polygon"), "non-finite vertex"));
            }
            if !geometry::is_simple(&region.polygon) {
                return Err(invalid(
                    format!("regions[{ri}].polygon"),
                    "polygon must be simple with at least 3 vertices",
                ));
            }
        }
        Ok(())
    }

    /// Voltage box spanned by the pixel sample points.
    pub fn bounds_v(&self) -> Aabb {
        Aabb::new(
            self.origin_v,
            self.voltage_at(Point::new(
                (self.width - 1) as f64,
                (self.height - 1) as f64,
            )),
        )
    }

    fn bounds_tolerant(&self) -> Aabb {
        let b = self.bounds_v();
        let eps = self.pixel_size_v * 1e-6;
        Aabb::new(
            Point::new(b.min.x - eps, b.min.y - eps),
            Point::new(b.max.x + eps, b.max.y + eps),
        )
    }

    /// Pixel-space box spanned by the sample points.
    pub fn bounds_px(&self) -> Aabb {
        Aabb::new(
            Point::new(0.0, 0.0),
            Point::new((self.width - 1) as f64, (self.height - 1) as f64),
        )
    }

    pub fn value(&self, i: usize, j: usize) -> f32 {
        self.grid[j * self.width + i]
    }

    pub fn voltage_at(&self, px: Point) -> Point {
        Point::new(
            self.origin_v.x + px.x * self.pixel_size_v,
            self.origin_v.y + px.y * self.pixel_size_v,
        )
    }

    pub fn pixel_at(&self, v: Point) -> Point {
        Point::new(
            (v.x - self.origin_v.x) / self.pixel_size_v,
            (v.y - self.origin_v.y) / self.pixel_size_v,
        )
    }

    pub fn contains_rect(&self, rect: Rect) -> bool {
        rect.side > 0 && rect.x + rect.side <= self.width && rect.y + rect.side <= self.height
    }

    /// Raw (un-normalized) patch values, row-major, row 0 = lowest G2.
    pub fn patch_raw(&self, rect: Rect) -> Vec<f64> {
        debug_assert!(self.contains_rect(rect));
        let mut out = Vec::with_capacity(rect.side * rect.side);
        for j in rect.y..rect.y + rect.side {
            let row = &self.grid[j * self.width + rect.x..j * self.width + rect.x + rect.side];
            out.extend(row.iter().map(|&v| v as f64));
        }
        out
    }

    /// Normalized patch values ready for a detector.
    pub fn patch_normalized(&self, rect: Rect) -> Vec<f64> {
        let mut raw = self.patch_raw(rect);
        normalize_in_place(&mut raw);
        raw
    }

    /// Closed detection square of `rect` in volts: the rectangle's pixel
    /// footprint inset by `offset_px` on all sides. Collapses to the centre
    /// when the inset exceeds half the side.
    pub fn detection_square_v(&self, rect: Rect, offset_px: usize) -> Aabb {
        let inset = (offset_px as f64).min(rect.side as f64 / 2.0);
        let lo = Point::new(rect.x as f64 - 0.5 + inset, rect.y as f64 - 0.5 + inset);
        let hi = Point::new(
            (rect.x + rect.side) as f64 - 0.5 - inset,
            (rect.y + rect.side) as f64 - 0.5 - inset,
        );
        Aabb::new(self.voltage_at(lo), self.voltage_at(hi))
    }
}

/// Per-dataset constants used for patch labeling and exploration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub pixel_size_v: f64,
    pub detection_offset_px: usize,
    pub prior_line_distance_v: f64,
    /// 0° = horizontal, 90° = vertical.
    pub prior_slope_deg: f64,
    pub use_last_line_validation: bool,
    pub patch_size_px: usize,
    pub patch_overlap_px: usize,
}

impl DatasetProfile {
    pub const NAMES: [&'static str; 3] = ["si-sg", "gaas", "si-og"];

    pub fn named(name: &str) -> Option<Self> {
        let (pixel, offset, distance, slope, last_line) = match name {
            "si-sg" => (0.001, 6, 0.030, 75.0, false),
            "gaas" => (0.0025, 7, 0.016, 45.0, true),
            "si-og" => (0.002, 6, 0.030, -10.0, true),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            pixel_size_v: pixel,
            detection_offset_px: offset,
            prior_line_distance_v: distance,
            prior_slope_deg: slope,
            use_last_line_validation: last_line,
            patch_size_px: DEFAULT_PATCH_SIZE,
            patch_overlap_px: DEFAULT_PATCH_OVERLAP,
        })
    }

    pub fn validate(&self) -> Result<(), DiagramError> {
        if self.patch_size_px == 0 {
            return Err(invalid("patch_size_px", "must be positive"));
        }
        if self.patch_overlap_px >= self.patch_size_px {
            return Err(invalid("patch_overlap_px", "must be smaller than the patch size"));
        }
        if !(self.pixel_size_v > 0.0 && self.prior_line_distance_v > 0.0) {
            return Err(invalid("pixel_size_v/prior_line_distance_v", "must be positive"));
        }
        Ok(())
    }

    pub fn stride_px(&self) -> usize {
        self.patch_size_px - self.patch_overlap_px
    }
}

/// One normalized detector input with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSample {
    pub values: Vec<f64>,
    pub rect: Rect,
    pub category: Category,
    pub diagram_id: String,
}

/// Min-max normalization to `[0, 1]`; a constant patch maps to all zeros.
pub fn normalize_patch(raw: &[f64]) -> Result<Vec<f64>, DiagramError> {
    if let Some(k) = raw.iter().position(|v| !v.is_finite()) {
        return Err(DiagramError::NonFinitePatchValue(k));
    }
    let mut out = raw.to_vec();
    normalize_in_place(&mut out);
    Ok(out)
}

fn normalize_in_place(values: &mut [f64]) {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    if span > 0.0 {
        values.iter_mut().for_each(|v| *v = ((*v - min) / span).clamp(0.0, 1.0));
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `line` iff some labeled polyline segment touches the closed detection
/// square of `rect` (computed in voltage space).
pub fn assign_category(d: &StabilityDiagram, rect: Rect, detection_offset_px: usize) -> Category {
    let square = d.detection_square_v(rect, detection_offset_px);
    let hit = d.lines.iter().any(|line| {
        line.polyline
            .windows(2)
            .any(|seg| square.intersects_segment(seg[0], seg[1]))
    });
    if hit {
        Category::Line
    } else {
        Category::NoLine
    }
}

/// Number of in-bounds window positions along one axis.
pub fn windows_along(extent: usize, patch: usize, stride: usize) -> usize {
    if extent < patch || stride == 0 {
        0
    } else {
        (extent - patch) / stride + 1
    }
}

/// Sliding-window patches, flush at the origin, row by row.
pub fn extract_patches(
    d: &StabilityDiagram,
    profile: &DatasetProfile,
) -> Result<Vec<PatchSample>, DiagramError> {
    profile.validate()?;
    let p = profile.patch_size_px;
    if d.width < p || d.height < p {
        return Err(DiagramError::TooSmall {
            width: d.width,
            height: d.height,
            patch: p,
        });
    }
    let stride = profile.stride_px();
    let nx = windows_along(d.width, p, stride);
    let ny = windows_along(d.height, p, stride);
    let mut out = Vec::with_capacity(nx * ny);
    for wy in 0..ny {
        for wx in 0..nx {
            let rect = Rect::new(wx * stride, wy * stride, p);
            out.push(PatchSample {
                values: d.patch_normalized(rect),
                rect,
                category: assign_category(d, rect, profile.detection_offset_px),
                diagram_id: d.id.clone(),
            });
        }
    }
    Ok(out)
}

/// Charge regime at a voltage point. Boundary points resolve to the region
/// with the smaller label; uncovered points are `Unknown`.
pub fn region_at(d: &StabilityDiagram, point: Point) -> Result<ChargeLabel, DiagramError> {
    if !d.bounds_tolerant().contains(point) {
        return Err(DiagramError::OutOfBounds(point.x, point.y));
    }
    let mut labeled: Vec<&ChargeRegion> = d
        .regions
        .iter()
        .filter(|r| r.label != ChargeLabel::Unknown)
        .collect();
    labeled.sort_by_key(|r| r.label);
    Ok(labeled
        .into_iter()
        .find(|r| geometry::contains_closed(&r.polygon, point))
        .map_or(ChargeLabel::Unknown, |r| r.label))
}

// ---------------------------------------------------------------------------
// Interchange format

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PixelSize {
    Scalar(f64),
    PerAxis([f64; 2]),
}

#[derive(Serialize, Deserialize)]
struct LineRecord {
    index: u32,
    polyline: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    label: ChargeLabel,
    polygon: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    id: String,
    width: usize,
    height: usize,
    pixel_size_v: PixelSize,
    origin_v: [f64; 2],
    grid_file: String,
    lines: Vec<LineRecord>,
    regions: Vec<RegionRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DiagramError + '_ {
    move |source| DiagramError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_point(v: [f64; 2]) -> Point {
    Point::new(v[0], v[1])
}

/// Reads and validates a diagram manifest plus its binary grid.
pub fn load_diagram(path: impl AsRef<Path>) -> Result<StabilityDiagram, DiagramError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| DiagramError::Manifest {
        path: path.to_path_buf(),
        source,
    })?;
    let pixel_size_v = match m.pixel_size_v {
        PixelSize::Scalar(p) => p,
        PixelSize::PerAxis([a, b]) if a == b => a,
        PixelSize::PerAxis([a, b]) => return Err(DiagramError::Anisotropic(a, b)),
    };
    let grid_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&m.grid_file);
    let bytes = fs::read(&grid_path).map_err(io_err(&grid_path))?;
    let expected = m.width * m.height;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(DiagramError::GridSizeMismatch {
            expected,
            found: bytes.len() / 4,
        });
    }
    let grid = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    StabilityDiagram::new(
        m.id,
        m.width,
        m.height,
        pixel_size_v,
        to_point(m.origin_v),
        grid,
        m.lines
            .into_iter()
            .map(|l| LineLabel {
                index: l.index,
                polyline: l.polyline.into_iter().map(to_point).collect(),
            })
            .collect(),
        m.regions
            .into_iter()
            .map(|r| ChargeRegion {
                label: r.label,
                polygon: r.polygon.into_iter().map(to_point).collect(),
            })
            .collect(),
    )
}

/// Grid file name stored next to a manifest.
pub fn grid_file_name(manifest: &Path) -> String {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "diagram".to_string());
    format!("{stem}.grid.f32")
}

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes the manifest at `path` and the grid next to it.
pub fn save_diagram(d: &StabilityDiagram, path: impl AsRef<Path>) -> Result<(), DiagramError> {
    let path = path.as_ref();
    let grid_file = grid_file_name(path);
    let grid_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&grid_file);
    let manifest = Manifest {
        id: d.id.clone(),
        width: d.width,
        height: d.height,
        pixel_size_v: PixelSize::Scalar(d.pixel_size_v),
        origin_v: [d.origin_v.x, d.origin_v.y],
        grid_file,
        lines: d
            .lines
            .iter()
            .map(|l| LineRecord {
                index: l.index,
                polyline: l.polyline.iter().map(|p| [p.x, p.y]).collect(),
            })
            .collect(),
        regions: d
            .regions
            .iter()
            .map(|r| RegionRecord {
                label: r.label,
                polygon: r.polygon.iter().map(|p| [p.x, p.y]).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let grid: Vec<u8> = d.grid.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&grid_path, &grid).map_err(io_err(&grid_path))?;
    write_atomic(path, &json).map_err(io_err(path))?;
    Ok(())
}

/// Loads every `*.json` manifest in a directory, sorted by file name.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<StabilityDiagram>, DiagramError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(load_diagram).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(width: usize, height: usize) -> StabilityDiagram {
        StabilityDiagram::new(
            "blank",
            width,
            height,
            0.001,
            Point::new(0.0, 0.0),
            vec![0.0; width * height],
            vec![],
            vec![],
        )
        .unwrap()
    }

    fn with_line(a: Point, b: Point) -> StabilityDiagram {
        let mut d = blank(40, 40);
        d.lines.push(LineLabel {
            index: 1,
            polyline: vec![a, b],
        });
        d
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_patch(&[1.0, 3.0, 5.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_patch(&[7.0, 7.0, 7.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(normalize_patch(&[0.0, 0.25, 1.0]).unwrap(), vec![0.0, 0.25, 1.0]);
        assert_ne!(normalize_patch(&[0.2, 0.5, 0.9]).unwrap(), vec![0.2, 0.5, 0.9]);
        assert!(matches!(
            normalize_patch(&[1.0, f64::NAN]),
            Err(DiagramError::NonFinitePatchValue(1))
        ));
    }

    #[test]
    fn patch_counts() {
        let p = DatasetProfile::named("si-sg").unwrap();
        assert_eq!(extract_patches(&blank(100, 100), &p).unwrap().len(), 121);
        let one = extract_patches(&blank(18, 18), &p).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].rect, Rect::new(0, 0, 18));
        assert!(matches!(
            extract_patches(&blank(17, 100), &p),
            Err(DiagramError::TooSmall { .. })
        ));
    }

    #[test]
    fn category_through_center_and_margin() {
        let rect = Rect::new(10, 10, 18);
        // vertical line through the patch centre x = 18.5 px
        let d = with_line(Point::new(0.0185, 0.0), Point::new(0.0185, 0.039));
        assert_eq!(assign_category(&d, rect, 6), Category::Line);
        // line at x = 12 px: inside the patch but in the 6-pixel margin
        let d = with_line(Point::new(0.012, 0.0), Point::new(0.012, 0.039));
        assert_eq!(assign_category(&d, rect, 6), Category::NoLine);
        assert_eq!(assign_category(&d, rect, 0), Category::Line);
        assert_eq!(assign_category(&blank(40, 40), rect, 6), Category::NoLine);
    }

    #[test]
    fn detection_square_edges_are_closed() {
        let rect = Rect::new(10, 10, 18);
        // detection square spans x ∈ [15.5, 21.5] px
        let edge = 15.5 * 0.001;
        let d = with_line(Point::new(edge, 0.0), Point::new(edge, 0.039));
        assert_eq!(assign_category(&d, rect, 6), Category::Line);
        let d = with_line(Point::new(0.01549, 0.0), Point::new(0.01549, 0.039));
        assert_eq!(assign_category(&d, rect, 6), Category::NoLine);
    }

    #[test]
    fn region_lookup() {
        let mut d = blank(40, 40);
        let sq = |x0: f64, x1: f64, label| ChargeRegion {
            label,
            polygon: vec![
                Point::new(x0, 0.0),
                Point::new(x1, 0.0),
                Point::new(x1, 0.039),
                Point::new(x0, 0.039),
            ],
        };
        d.regions.push(sq(0.010, 0.020, ChargeLabel::One));
        d.regions.push(sq(0.0, 0.010, ChargeLabel::Zero));
        d.regions.push(sq(0.025, 0.039, ChargeLabel::FourPlus));
        assert_eq!(region_at(&d, Point::new(0.015, 0.02)).unwrap(), ChargeLabel::One);
        assert_eq!(region_at(&d, Point::new(0.022, 0.02)).unwrap(), ChargeLabel::Unknown);
        assert_eq!(region_at(&d, Point::new(0.03, 0.02)).unwrap(), ChargeLabel::FourPlus);
        // shared edge goes to the smaller label
        assert_eq!(region_at(&d, Point::new(0.010, 0.02)).unwrap(), ChargeLabel::Zero);
        assert!(region_at(&d, Point::new(0.05, 0.02)).is_err());
    }

    #[test]
    fn invariants_enforced() {
        let err = StabilityDiagram::new("x", 3, 3, 0.001, Point::new(0.0, 0.0), vec![0.0; 8], vec![], vec![]);
        assert!(matches!(err, Err(DiagramError::GridSizeMismatch { expected: 9, found: 8 })));
        let mut grid = vec![0.0; 9];
        grid[5] = f32::NAN;
        let err = StabilityDiagram::new("x", 3, 3, 0.001, Point::new(0.0, 0.0), grid, vec![], vec![]);
        assert_eq!(err.unwrap_err().to_string(), "non-finite value at (2,1)");
        let err = StabilityDiagram::new("x", 3, 3, 0.0, Point::new(0.0, 0.0), vec![0.0; 9], vec![], vec![]);
        assert!(err.is_err());
        let line = LineLabel {
            index: 1,
            polyline: vec![Point::new(0.0, 0.0), Point::new(0.5, 0.0)],
        };
        let err = StabilityDiagram::new("x", 3, 3, 0.001, Point::new(0.0, 0.0), vec![0.0; 9], vec![line], vec![]);
        assert!(matches!(err, Err(DiagramError::VertexOutOfBounds { .. })));
    }
}

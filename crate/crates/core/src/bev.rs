//! Point cloud to birds-eye-view RGB-map encoding.
//!
//! A frame is cropped to a box in front of the sensor and rasterized onto a
//! square-cell grid. Each cell carries three channels:
//!
//! * `r`: normalized point density, `min(1, ln(N + 1) / 64)` by default
//! * `g`: maximum point height, rescaled from the z-range to `[0, 1]`
//! * `b`: maximum intensity
//!
//! Row 0 sits at the near edge (`x = x_min`), column 0 at `y = y_min`. Points
//! on the far boundary clamp into the last row/column.

use std::io::{self, Read, Write};

/// Lidar return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub const fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        Self {
            points: iter.into_iter().collect(),
        }
    }
}

/// How the density channel is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensityNorm {
    /// `min(1, ln(N + 1) / 64)`.
    #[default]
    Printed,
    /// `min(1, ln(N + 1) / ln(64))`, saturating at 63 points.
    Log64,
}

/// Region of interest and raster resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Rows, along x.
    pub n_rows: usize,
    /// Columns, along y.
    pub n_cols: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (0.0, 40.0),
            y_range: (-40.0, 40.0),
            z_range: (-2.0, 1.25),
            n_rows: 512,
            n_cols: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("grid ranges must be increasing and finite")]
    BadRange,
    #[error("grid must have at least one row and one column")]
    Empty,
    #[error("grid cells are not square: {row_size} m along x vs {col_size} m along y")]
    NonSquare { row_size: f64, col_size: f64 },
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a < b;
        if !(ok(self.x_range) && ok(self.y_range) && ok(self.z_range)) {
            return Err(GridError::BadRange);
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(GridError::Empty);
        }
        let row_size = (self.x_range.1 - self.x_range.0) / self.n_rows as f64;
        let col_size = (self.y_range.1 - self.y_range.0) / self.n_cols as f64;
        if (row_size - col_size).abs() > 1e-12 * row_size.max(col_size) {
            return Err(GridError::NonSquare { row_size, col_size });
        }
        Ok(())
    }

    /// Edge length of one cell in meters.
    pub fn cell_size(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / self.n_cols as f64
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.x_range.0
            && x <= self.x_range.1
            && y >= self.y_range.0
            && y <= self.y_range.1
            && z >= self.z_range.0
            && z <= self.z_range.1
    }

    /// Whether `(x, y)` lies in the closed ground-plane footprint.
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_range.0 && x <= self.x_range.1 && y >= self.y_range.0 && y <= self.y_range.1
    }
}

/// Points inside the closed x, y and z ranges of `spec`.
pub fn filter_roi(cloud: &PointCloud, spec: &GridSpec) -> PointCloud {
    cloud
        .points
        .iter()
        .filter(|p| spec.contains(p.x as f64, p.y as f64, p.z as f64))
        .copied()
        .collect()
}

/// `(row, col)` of the cell holding `(x, y)`. The point must lie in the ROI.
pub fn cell_index(x: f64, y: f64, spec: &GridSpec) -> (usize, usize) {
    debug_assert!(spec.contains_xy(x, y), "({x}, {y}) outside the grid");
    let g = spec.cell_size();
    let row = ((x - spec.x_range.0) / g).floor().max(0.0) as usize;
    let col = ((y - spec.y_range.0) / g).floor().max(0.0) as usize;
    (row.min(spec.n_rows - 1), col.min(spec.n_cols - 1))
}

/// Three-channel BEV raster, channel-planar `[r, g, b]`, each plane row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbMap {
    spec: GridSpec,
    data: Vec<f32>,
}

impl RgbMap {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            data: vec![0.0; 3 * spec.n_rows * spec.n_cols],
            spec,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.spec.n_rows
    }

    pub fn cols(&self) -> usize {
        self.spec.n_cols
    }

    /// Channel 0 = density (r), 1 = height (g), 2 = intensity (b).
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.rows() * self.cols();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.rows() + row) * self.cols() + col]
    }

    /// `[r, g, b]` of one cell.
    pub fn cell(&self, row: usize, col: usize) -> [f32; 3] {
        [0, 1, 2].map(|c| self.get(c, row, col))
    }

    pub fn as_planar(&self) -> &[f32] {
        &self.data
    }

    /// Interleaves channels into `rows x cols x 3` order.
    pub fn to_interleaved(&self) -> Vec<f32> {
        let plane = self.rows() * self.cols();
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            out.extend_from_slice(&[self.data[i], self.data[plane + i], self.data[2 * plane + i]]);
        }
        out
    }

    /// Writes the flat little-endian f32 dump (planar, row-major, no header).
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads a dump produced by [`RgbMap::write_to`] for the given grid.
    pub fn read_from<R: Read>(mut r: R, spec: GridSpec) -> io::Result<Self> {
        let n = 3 * spec.n_rows * spec.n_cols;
        let mut bytes = Vec::with_capacity(n * 4);
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!(
                    "expected {} bytes for a {}x{} map, got {}",
                    n * 4,
                    spec.n_rows,
                    spec.n_cols,
                    bytes.len()
                ),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { spec, data })
    }
}

#[derive(Clone, Copy)]
struct CellAcc {
    count: u32,
    max_z: f32,
    max_i: f32,
}

/// Encodes with the default density normalization.
pub fn encode(cloud: &PointCloud, spec: &GridSpec) -> RgbMap {
    encode_with(cloud, spec, DensityNorm::default())
}

pub fn encode_with(cloud: &PointCloud, spec: &GridSpec, norm: DensityNorm) -> RgbMap {
    let (rows, cols) = (spec.n_rows, spec.n_cols);
    let mut acc = vec![
        CellAcc {
            count: 0,
            max_z: f32::NEG_INFINITY,
            max_i: f32::NEG_INFINITY,
        };
        rows * cols
    ];
    for p in &cloud.points {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        if !spec.contains(x, y, z) {
            continue;
        }
        let (r, c) = cell_index(x, y, spec);
        let a = &mut acc[r * cols + c];
        a.count += 1;
        a.max_z = a.max_z.max(p.z);
        a.max_i = a.max_i.max(p.intensity);
    }

    let (z_lo, z_hi) = spec.z_range;
    let density_div = match norm {
        DensityNorm::Printed => 64.0,
        DensityNorm::Log64 => 64f64.ln(),
    };
    let mut map = RgbMap::zeros(*spec);
    let plane = rows * cols;
    for (i, a) in acc.iter().enumerate() {
        if a.count == 0 {
            continue;
        }
        let density = (((a.count + 1) as f64).ln() / density_div).min(1.0);
        let height = ((a.max_z as f64 - z_lo) / (z_hi - z_lo)).clamp(0.0, 1.0);
        map.data[i] = density as f32;
        map.data[plane + i] = height as f32;
        map.data[2 * plane + i] = a.max_i.clamp(0.0, 1.0);
    }
    map
}

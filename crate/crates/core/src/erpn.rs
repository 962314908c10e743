//! Decoding of the detection head into oriented boxes.
//!
//! Each output cell carries one 15-value block per anchor:
//! `t_x, t_y, t_w, t_l, t_im, t_re, t_o` followed by eight class logits.
//! Grid columns run along the sensor y axis and grid rows along x, so a
//! decoded center `(b_x, b_y)` in cell units maps to
//! `x = x_min + b_y * cell`, `y = y_min + b_x * cell`. The yaw
//! `atan2(t_im, t_re)` is read directly in the sensor frame.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::bev::{GridError, GridSpec};
use crate::class::{ObjectClass, NUM_CLASSES};
use crate::geometry::OrientedBox;
use crate::network::{Shape, Tensor3};

pub const BOX_FEATURES: usize = 7 + NUM_CLASSES;
pub const NUM_ANCHORS: usize = 5;
/// Encoder pixels per output cell.
pub const STRIDE: usize = 32;

pub const T_X: usize = 0;
pub const T_Y: usize = 1;
pub const T_W: usize = 2;
pub const T_L: usize = 3;
pub const T_IM: usize = 4;
pub const T_RE: usize = 5;
pub const T_O: usize = 6;
pub const T_CLASS: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum ErpnError {
    #[error("head tensor has shape {got}, expected {expected}")]
    Shape { expected: Shape, got: Shape },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("grid of {rows}x{cols} cells is not divisible by the stride {STRIDE}")]
    Stride { rows: usize, cols: usize },
    #[error("anchor {0} has a non-positive size")]
    BadAnchor(usize),
    #[error("no statistics for class {0}")]
    MissingClass(ObjectClass),
    #[error("statistics line {line}: {reason}")]
    StatsParse { line: usize, reason: String },
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - m).exp());
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Box prior in output-cell units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPrior {
    pub p_w: f64,
    pub p_l: f64,
    pub phi0: f64,
}

/// Vehicle up/down, cyclist up/down, pedestrian left; sizes from the
/// built-in class statistics.
pub fn default_anchors() -> Vec<AnchorPrior> {
    anchors_from_stats(&ClassStats::builtin(), &GridSpec::default())
        .expect("built-in statistics cover every anchor class")
}

pub fn anchors_from_stats(stats: &ClassStats, grid: &GridSpec) -> Result<Vec<AnchorPrior>, ErpnError> {
    let cell = grid.cell_size() * STRIDE as f64;
    let size = |c: ObjectClass| stats.get(c).map(|s| (s.width / cell, s.length / cell));
    let (vw, vl) = size(ObjectClass::Car)?;
    let (cw, cl) = size(ObjectClass::Cyclist)?;
    let (pw, pl) = size(ObjectClass::Pedestrian)?;
    let a = |p_w, p_l, phi0| AnchorPrior { p_w, p_l, phi0 };
    Ok(vec![
        a(vw, vl, FRAC_PI_2),
        a(vw, vl, -FRAC_PI_2),
        a(cw, cl, FRAC_PI_2),
        a(cw, cl, -FRAC_PI_2),
        a(pw, pl, PI),
    ])
}

/// The 15 regressors of one box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawBoxPrediction {
    pub t_x: f64,
    pub t_y: f64,
    pub t_w: f64,
    pub t_l: f64,
    pub t_im: f64,
    pub t_re: f64,
    pub t_o: f64,
    pub class_logits: [f64; NUM_CLASSES],
}

impl RawBoxPrediction {
    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), BOX_FEATURES);
        let mut class_logits = [0.0; NUM_CLASSES];
        class_logits.copy_from_slice(&v[T_CLASS..]);
        Self {
            t_x: v[T_X],
            t_y: v[T_Y],
            t_w: v[T_W],
            t_l: v[T_L],
            t_im: v[T_IM],
            t_re: v[T_RE],
            t_o: v[T_O],
            class_logits,
        }
    }

    pub fn to_array(&self) -> [f64; BOX_FEATURES] {
        let mut out = [0.0; BOX_FEATURES];
        out[..T_CLASS].copy_from_slice(&[self.t_x, self.t_y, self.t_w, self.t_l, self.t_im, self.t_re, self.t_o]);
        out[T_CLASS..].copy_from_slice(&self.class_logits);
        out
    }
}

/// Head output as `f64`, `rows x cols x (anchors * 15)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub rows: usize,
    pub cols: usize,
    pub anchors: usize,
    pub data: Vec<f64>,
}

impl RawPrediction {
    pub fn zeros(rows: usize, cols: usize, anchors: usize) -> Self {
        Self {
            rows,
            cols,
            anchors,
            data: vec![0.0; rows * cols * anchors * BOX_FEATURES],
        }
    }

    /// Regressors at which every box decodes to its own anchor prior with
    /// probability one half.
    pub fn neutral(rows: usize, cols: usize, anchors: &[AnchorPrior]) -> Self {
        let mut p = Self::zeros(rows, cols, anchors.len());
        for r in 0..rows {
            for c in 0..cols {
                for (a, prior) in anchors.iter().enumerate() {
                    let v = p.box_mut(r, c, a);
                    v[T_IM] = prior.phi0.sin();
                    v[T_RE] = prior.phi0.cos();
                }
            }
        }
        p
    }

    pub fn from_tensor(t: &Tensor3) -> Result<Self, ErpnError> {
        if t.channels == 0 || !t.channels.is_multiple_of(BOX_FEATURES) {
            return Err(ErpnError::Shape {
                expected: Shape::new(t.height, t.width, NUM_ANCHORS * BOX_FEATURES),
                got: t.shape(),
            });
        }
        Ok(Self {
            rows: t.height,
            cols: t.width,
            anchors: t.channels / BOX_FEATURES,
            data: t.data.iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3 {
            height: self.rows,
            width: self.cols,
            channels: self.features(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn features(&self) -> usize {
        self.anchors * BOX_FEATURES
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.rows, self.cols, self.features())
    }

    /// Offset of the first feature of box `(row, col, anchor)`.
    #[inline]
    pub fn offset(&self, row: usize, col: usize, anchor: usize) -> usize {
        ((row * self.cols + col) * self.anchors + anchor) * BOX_FEATURES
    }

    pub fn box_slice(&self, row: usize, col: usize, anchor: usize) -> &[f64] {
        let o = self.offset(row, col, anchor);
        &self.data[o..o + BOX_FEATURES]
    }

    pub fn box_mut(&mut self, row: usize, col: usize, anchor: usize) -> &mut [f64] {
        let o = self.offset(row, col, anchor);
        &mut self.data[o..o + BOX_FEATURES]
    }

    pub fn get_box(&self, row: usize, col: usize, anchor: usize) -> RawBoxPrediction {
        RawBoxPrediction::from_slice(self.box_slice(row, col, anchor))
    }

    pub fn set_box(&mut self, row: usize, col: usize, anchor: usize, b: &RawBoxPrediction) {
        self.box_mut(row, col, anchor).copy_from_slice(&b.to_array());
    }
}

/// A decoded candidate box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub p0: f64,
    pub class_probs: [f64; NUM_CLASSES],
    pub class: ObjectClass,
    /// `p0` times the largest class probability.
    pub score: f64,
}

/// A box in output-cell units: center `(b_x, b_y)` = (column, row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBox {
    pub b_x: f64,
    pub b_y: f64,
    pub b_w: f64,
    pub b_l: f64,
    pub b_phi: f64,
}

/// Decoding geometry: the encoder grid, the anchors and the output stride.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpnHead {
    pub grid: GridSpec,
    pub anchors: Vec<AnchorPrior>,
}

impl Default for ErpnHead {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            anchors: default_anchors(),
        }
    }
}

impl ErpnHead {
    pub fn new(grid: GridSpec, anchors: Vec<AnchorPrior>) -> Result<Self, ErpnError> {
        grid.validate()?;
        if !grid.n_rows.is_multiple_of(STRIDE) || !grid.n_cols.is_multiple_of(STRIDE) {
            return Err(ErpnError::Stride {
                rows: grid.n_rows,
                cols: grid.n_cols,
            });
        }
        if let Some(i) = anchors
            .iter()
            .position(|a| !(a.p_w > 0.0 && a.p_l > 0.0 && a.phi0.is_finite()))
        {
            return Err(ErpnError::BadAnchor(i));
        }
        Ok(Self { grid, anchors })
    }

    pub fn rows(&self) -> usize {
        self.grid.n_rows / STRIDE
    }

    pub fn cols(&self) -> usize {
        self.grid.n_cols / STRIDE
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.rows(), self.cols(), self.anchors.len() * BOX_FEATURES)
    }

    /// Output cell edge in meters.
    pub fn cell_meters(&self) -> f64 {
        self.grid.cell_size() * STRIDE as f64
    }

    pub fn check(&self, p: &RawPrediction) -> Result<(), ErpnError> {
        if p.shape() != self.output_shape() {
            return Err(ErpnError::Shape {
                expected: self.output_shape(),
                got: p.shape(),
            });
        }
        Ok(())
    }

    /// Output cell `(row, col)` holding the ground-plane point, if inside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.grid.contains_xy(x, y) {
            return None;
        }
        let cell = self.cell_meters();
        let row = ((x - self.grid.x_range.0) / cell).floor() as usize;
        let col = ((y - self.grid.y_range.0) / cell).floor() as usize;
        Some((row.min(self.rows() - 1), col.min(self.cols() - 1)))
    }

    pub fn grid_box(&self, raw: &RawBoxPrediction, c_x: usize, c_y: usize, anchor: &AnchorPrior) -> GridBox {
        GridBox {
            b_x: sigmoid(raw.t_x) + c_x as f64,
            b_y: sigmoid(raw.t_y) + c_y as f64,
            b_w: anchor.p_w * raw.t_w.exp(),
            b_l: anchor.p_l * raw.t_l.exp(),
            b_phi: raw.t_im.atan2(raw.t_re),
        }
    }

    pub fn to_meters(&self, g: &GridBox) -> OrientedBox {
        let cell = self.cell_meters();
        OrientedBox::new(
            self.grid.x_range.0 + g.b_y * cell,
            self.grid.y_range.0 + g.b_x * cell,
            g.b_w * cell,
            g.b_l * cell,
            g.b_phi,
        )
    }

    pub fn decode_box(&self, raw: &RawBoxPrediction, c_x: usize, c_y: usize, anchor: &AnchorPrior) -> OrientedBox {
        self.to_meters(&self.grid_box(raw, c_x, c_y, anchor))
    }

    /// `c_x` is the cell column, `c_y` the cell row.
    pub fn decode_cell(&self, raw: &RawBoxPrediction, c_x: usize, c_y: usize, anchor: &AnchorPrior) -> Detection {
        let bbox = self.decode_box(raw, c_x, c_y, anchor);
        let p0 = sigmoid(raw.t_o);
        let class_probs = softmax(&raw.class_logits);
        let (best, pmax) =
            class_probs.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc },
            );
        Detection {
            bbox,
            p0,
            class_probs,
            class: ObjectClass::from_index(best).expect("class index in range"),
            score: p0 * pmax,
        }
    }

    /// Every candidate, cell-major then anchor.
    pub fn candidates(&self, p: &RawPrediction) -> Result<Vec<Detection>, ErpnError> {
        self.check(p)?;
        let mut out = Vec::with_capacity(p.rows * p.cols * p.anchors);
        for r in 0..p.rows {
            for c in 0..p.cols {
                for (a, prior) in self.anchors.iter().enumerate() {
                    out.push(self.decode_cell(&p.get_box(r, c, a), c, r, prior));
                }
            }
        }
        Ok(out)
    }

    /// Candidates with `score >= conf_threshold`, in candidate order.
    pub fn decode_all(&self, p: &RawPrediction, conf_threshold: f64) -> Result<Vec<Detection>, ErpnError> {
        let mut all = self.candidates(p)?;
        all.retain(|d| d.score >= conf_threshold);
        Ok(all)
    }

    /// Regressors that decode exactly to `b` from the cell holding its
    /// center. Returns the cell as `(row, col)`.
    pub fn encode_target(&self, b: &OrientedBox, anchor: &AnchorPrior) -> Option<((usize, usize), [f64; 6])> {
        let (row, col) = self.cell_of(b.cx, b.cy)?;
        let cell = self.cell_meters();
        let fx = (b.cy - self.grid.y_range.0) / cell - col as f64;
        let fy = (b.cx - self.grid.x_range.0) / cell - row as f64;
        let clamp = |f: f64| f.clamp(1e-12, 1.0 - 1e-12);
        let t = [
            logit(clamp(fx)),
            logit(clamp(fy)),
            (b.w / cell / anchor.p_w).ln(),
            (b.l / cell / anchor.p_l).ln(),
            b.phi.sin(),
            b.phi.cos(),
        ];
        Some(((row, col), t))
    }
}

/// Decodes a head tensor with the given grid and anchors.
pub fn decode_all(
    t: &Tensor3,
    grid: &GridSpec,
    anchors: &[AnchorPrior],
    conf_threshold: f64,
) -> Result<Vec<Detection>, ErpnError> {
    let head = ErpnHead::new(*grid, anchors.to_vec())?;
    head.decode_all(&RawPrediction::from_tensor(t)?, conf_threshold)
}

/// Mean box size and center height of one class, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStat {
    pub height: f64,
    pub width: f64,
    pub length: f64,
    pub z_center: f64,
}

/// Per-class statistics table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassStats {
    entries: [Option<ClassStat>; NUM_CLASSES],
}

const BUILTIN_STATS: &str = include_str!("../data/class_stats.txt");

impl ClassStats {
    /// The checked-in table of KITTI training-set means.
    pub fn builtin() -> Self {
        BUILTIN_STATS.parse().expect("built-in statistics parse")
    }

    pub fn get(&self, class: ObjectClass) -> Result<ClassStat, ErpnError> {
        self.entries[class.index()].ok_or(ErpnError::MissingClass(class))
    }

    pub fn set(&mut self, class: ObjectClass, stat: ClassStat) {
        self.entries[class.index()] = Some(stat);
    }

    /// Means over `(class, stat)` samples; classes without samples stay empty.
    pub fn from_samples<I: IntoIterator<Item = (ObjectClass, ClassStat)>>(samples: I) -> Self {
        let mut sums = [[0.0f64; 4]; NUM_CLASSES];
        let mut counts = [0usize; NUM_CLASSES];
        for (c, s) in samples {
            let i = c.index();
            for (acc, v) in sums[i].iter_mut().zip([s.height, s.width, s.length, s.z_center]) {
                *acc += v;
            }
            counts[i] += 1;
        }
        let mut out = Self::default();
        for c in ObjectClass::ALL {
            let n = counts[c.index()];
            if n > 0 {
                let [h, w, l, z] = sums[c.index()].map(|s| s / n as f64);
                out.set(
                    c,
                    ClassStat {
                        height: h,
                        width: w,
                        length: l,
                        z_center: z,
                    },
                );
            }
        }
        out
    }
}

impl fmt::Display for ClassStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# class          height  width   length   z_center")?;
        for c in ObjectClass::ALL {
            if let Some(s) = self.entries[c.index()] {
                writeln!(
                    f,
                    "{:<16} {:>6.4} {:>6.4} {:>8.4} {:>8.4}",
                    c.name(),
                    s.height,
                    s.width,
                    s.length,
                    s.z_center
                )?;
            }
        }
        Ok(())
    }
}

impl FromStr for ClassStats {
    type Err = ErpnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Self::default();
        for (i, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| ErpnError::StatsParse { line: i + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, got {}", fields.len())));
            }
            let class: ObjectClass = fields[0].parse().map_err(|e| err(format!("{e}")))?;
            let mut v = [0.0; 4];
            for (slot, tok) in v.iter_mut().zip(&fields[1..]) {
                *slot = tok.parse().map_err(|_| err(format!("bad number `{tok}`")))?;
            }
            if v[..3].iter().any(|&d: &f64| d.is_nan() || d <= 0.0) {
                return Err(err("dimensions must be positive".into()));
            }
            out.set(
                class,
                ClassStat {
                    height: v[0],
                    width: v[1],
                    length: v[2],
                    z_center: v[3],
                },
            );
        }
        Ok(out)
    }
}

/// A BEV detection with the vertical extent of its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection3d {
    pub det: Detection,
    pub z_center: f64,
    pub height: f64,
}

pub fn to_3d(d: &Detection, stats: &ClassStats) -> Result<Detection3d, ErpnError> {
    let s = stats.get(d.class)?;
    Ok(Detection3d {
        det: d.clone(),
        z_center: s.z_center,
        height: s.height,
    })
}

//! KITTI object-benchmark files: Velodyne scans, `label_2` text, `calib`
//! text and the result format, plus the camera/Velodyne frame conversions.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::bev::{Point, PointCloud};
use crate::class::ObjectClass;
use crate::erpn::Detection3d;
use crate::geometry::{normalize_angle, OrientedBox};
use crate::loss::GroundTruthBox;

#[derive(Debug, thiserror::Error)]
pub enum KittiError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("velodyne scan of {len} bytes is not a whole number of 16-byte points")]
    Velodyne { len: usize },
    #[error("label line {line}: {reason}")]
    Label { line: usize, reason: String },
    #[error("calibration: {0}")]
    Calib(String),
    #[error("calibration transform is singular")]
    Singular,
    #[error("DontCare regions have no 3D box")]
    DontCare,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> KittiError + '_ {
    move |source| KittiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn parse_velodyne(bytes: &[u8]) -> Result<PointCloud, KittiError> {
    if !bytes.len().is_multiple_of(16) {
        return Err(KittiError::Velodyne { len: bytes.len() });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    Ok(bytes
        .chunks_exact(16)
        .map(|c| Point::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]), f(&c[12..16])))
        .collect())
}

pub fn read_velodyne(path: &Path) -> Result<PointCloud, KittiError> {
    parse_velodyne(&fs::read(path).map_err(io_err(path))?)
}

pub fn velodyne_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_velodyne(path: &Path, cloud: &PointCloud) -> Result<(), KittiError> {
    fs::write(path, velodyne_bytes(cloud)).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelClass {
    Object(ObjectClass),
    DontCare,
}

impl LabelClass {
    pub fn name(self) -> &'static str {
        match self {
            LabelClass::Object(c) => c.name(),
            LabelClass::DontCare => "DontCare",
        }
    }
}

/// One line of a KITTI label or result file.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub class: LabelClass,
    /// In `[0, 1]`, or -1 when unknown.
    pub truncation: f64,
    /// 0..=3, or -1 when unknown.
    pub occlusion: i32,
    pub alpha: f64,
    /// `left, top, right, bottom` in pixels.
    pub bbox: [f64; 4],
    /// `height, width, length` in meters.
    pub dims: [f64; 3],
    /// Bottom center in rectified camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiLabel {
    pub fn is_dont_care(&self) -> bool {
        self.class == LabelClass::DontCare
    }

    pub fn object_class(&self) -> Option<ObjectClass> {
        match self.class {
            LabelClass::Object(c) => Some(c),
            LabelClass::DontCare => None,
        }
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {:.2} {} {:.6}",
            self.class.name(),
            self.truncation,
            self.occlusion,
            self.alpha
        );
        for v in self.bbox.iter().chain(&self.dims).chain(&self.location) {
            write!(s, " {v:.6}").unwrap();
        }
        write!(s, " {:.6}", self.rotation_y).unwrap();
        if let Some(score) = self.score {
            write!(s, " {score:.6}").unwrap();
        }
        s
    }
}

fn parse_label_line(line: &str) -> Result<KittiLabel, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 15 && f.len() != 16 {
        return Err(format!("expected 15 or 16 fields, got {}", f.len()));
    }
    let class = match f[0] {
        "DontCare" => LabelClass::DontCare,
        name => LabelClass::Object(name.parse().map_err(|e| format!("{e}"))?),
    };
    let num = |i: usize| -> Result<f64, String> {
        f[i].parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("field {} `{}` is not a finite number", i + 1, f[i]))
    };
    let truncation = num(1)?;
    if !((0.0..=1.0).contains(&truncation) || truncation == -1.0) {
        return Err(format!("truncation {truncation} outside [0, 1]"));
    }
    let occlusion: i32 = f[2]
        .parse()
        .map_err(|_| format!("occlusion `{}` is not an integer", f[2]))?;
    if !(-1..=3).contains(&occlusion) {
        return Err(format!("occlusion {occlusion} outside -1..=3"));
    }
    let alpha = num(3)?;
    let bbox = [num(4)?, num(5)?, num(6)?, num(7)?];
    if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
        return Err(format!("degenerate 2D box {bbox:?}"));
    }
    let dims = [num(8)?, num(9)?, num(10)?];
    if class != LabelClass::DontCare && dims.iter().any(|&d| d <= 0.0) {
        return Err(format!("non-positive dimensions {dims:?}"));
    }
    let location = [num(11)?, num(12)?, num(13)?];
    let rotation_y = num(14)?;
    let score = if f.len() == 16 { Some(num(15)?) } else { None };
    Ok(KittiLabel {
        class,
        truncation,
        occlusion,
        alpha,
        bbox,
        dims,
        location,
        rotation_y,
        score,
    })
}

/// Parses label text; blank lines are skipped, line numbers are 1-based.
pub fn parse_labels_str(text: &str) -> Result<Vec<KittiLabel>, KittiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l).map_err(|reason| KittiError::Label { line: i + 1, reason }))
        .collect()
}

pub fn parse_labels(path: &Path) -> Result<Vec<KittiLabel>, KittiError> {
    parse_labels_str(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// Image size in pixels; the half-open bounds are `[0, width) x [0, height)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl Default for ImageSize {
    fn default() -> Self {
        Self {
            width: 1242.0,
            height: 375.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub p2: Matrix3x4<f64>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

fn is_orthonormal(r: &Matrix3<f64>) -> bool {
    (r.transpose() * r - Matrix3::identity()).amax() <= 1e-3
}

impl Calibration {
    pub fn new(p2: Matrix3x4<f64>, r0_rect: Matrix3<f64>, tr_velo_to_cam: Matrix3x4<f64>) -> Result<Self, KittiError> {
        let finite = p2
            .iter()
            .chain(r0_rect.iter())
            .chain(tr_velo_to_cam.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(KittiError::Calib("non-finite entry".into()));
        }
        if !is_orthonormal(&r0_rect) {
            return Err(KittiError::Calib("R0_rect is not a rotation".into()));
        }
        if !is_orthonormal(&tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned()) {
            return Err(KittiError::Calib(
                "Tr_velo_to_cam rotation part is not orthonormal".into(),
            ));
        }
        Ok(Self {
            p2,
            r0_rect,
            tr_velo_to_cam,
        })
    }

    /// Velodyne axes mapped onto camera axes with no offset, focal 721.5 px
    /// and principal point at the center of a 1242x375 image.
    pub fn canonical() -> Self {
        #[rustfmt::skip]
        let tr = Matrix3x4::new(
            0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, -1.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
        );
        #[rustfmt::skip]
        let p2 = Matrix3x4::new(
            721.5377, 0.0, 621.0, 0.0,
            0.0, 721.5377, 187.5, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        Self::new(p2, Matrix3::identity(), tr).expect("canonical calibration is valid")
    }

    /// Rectified-camera-from-Velodyne transform, `R0_rect * Tr_velo_to_cam`.
    pub fn velo_to_rect(&self) -> Matrix4<f64> {
        let mut r0 = Matrix4::identity();
        r0.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r0_rect);
        let mut tr = Matrix4::identity();
        tr.fixed_view_mut::<3, 4>(0, 0).copy_from(&self.tr_velo_to_cam);
        r0 * tr
    }

    pub fn rect_to_velo(&self) -> Result<Matrix4<f64>, KittiError> {
        let t = self.velo_to_rect();
        let inv = t.try_inverse().ok_or(KittiError::Singular)?;
        if !inv.iter().all(|v| v.is_finite()) || t.fixed_view::<3, 3>(0, 0).determinant().abs() < 1e-9 {
            return Err(KittiError::Singular);
        }
        Ok(inv)
    }

    pub fn velo_point_to_rect(&self, p: Vector3<f64>) -> Vector3<f64> {
        (self.velo_to_rect() * p.push(1.0)).xyz()
    }

    pub fn rect_point_to_velo(&self, p: Vector3<f64>) -> Result<Vector3<f64>, KittiError> {
        Ok((self.rect_to_velo()? * p.push(1.0)).xyz())
    }

    /// Pixel coordinates of a rectified-camera point with positive depth.
    pub fn project_rect(&self, p: Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let q = self.p2 * Vector4::new(p.x, p.y, p.z, 1.0);
        (q.z > 0.0).then(|| (q.x / q.z, q.y / q.z))
    }
}

fn parse_row<const N: usize>(key: &str, vals: &[f64]) -> Result<[f64; N], KittiError> {
    vals.try_into()
        .map_err(|_| KittiError::Calib(format!("{key} needs {N} values, got {}", vals.len())))
}

pub fn parse_calibration_str(text: &str) -> Result<Calibration, KittiError> {
    let (mut p2, mut r0, mut tr) = (None, None, None);
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        if !matches!(key, "P2" | "R0_rect" | "Tr_velo_to_cam") {
            continue;
        }
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| KittiError::Calib(format!("{key}: bad number `{t}`")))
            })
            .collect::<Result<_, _>>()?;
        match key {
            "P2" => p2 = Some(Matrix3x4::from_row_slice(&parse_row::<12>(key, &vals)?)),
            "R0_rect" => r0 = Some(Matrix3::from_row_slice(&parse_row::<9>(key, &vals)?)),
            _ => tr = Some(Matrix3x4::from_row_slice(&parse_row::<12>(key, &vals)?)),
        }
    }
    let missing = |k: &str| KittiError::Calib(format!("missing key {k}"));
    Calibration::new(
        p2.ok_or_else(|| missing("P2"))?,
        r0.ok_or_else(|| missing("R0_rect"))?,
        tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
    )
}

pub fn read_calibration(path: &Path) -> Result<Calibration, KittiError> {
    parse_calibration_str(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn format_calibration(c: &Calibration) -> String {
    let row = |m: &[f64]| m.iter().map(|v| format!("{v:.12e}")).collect::<Vec<_>>().join(" ");
    let flat34 = |m: &Matrix3x4<f64>| (0..3).flat_map(|r| (0..4).map(move |k| m[(r, k)])).collect::<Vec<_>>();
    let flat33 = |m: &Matrix3<f64>| (0..3).flat_map(|r| (0..3).map(move |k| m[(r, k)])).collect::<Vec<_>>();
    format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        row(&flat34(&c.p2)),
        row(&flat33(&c.r0_rect)),
        row(&flat34(&c.tr_velo_to_cam))
    )
}

/// Ground-truth box in the Velodyne frame with its vertical extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3d {
    pub bev: GroundTruthBox,
    pub z_center: f64,
    pub height: f64,
}

/// Camera `rotation_y` to BEV yaw: `-ry - π/2`, wrapped.
pub fn ry_to_yaw(ry: f64) -> f64 {
    normalize_angle(-ry - FRAC_PI_2)
}

pub fn yaw_to_ry(yaw: f64) -> f64 {
    normalize_angle(-yaw - FRAC_PI_2)
}

pub fn label_to_velo(label: &KittiLabel, calib: &Calibration) -> Result<Box3d, KittiError> {
    let class = label.object_class().ok_or(KittiError::DontCare)?;
    let [h, w, l] = label.dims;
    let [x, y, z] = label.location;
    let c = calib.rect_point_to_velo(Vector3::new(x, y - h / 2.0, z))?;
    Ok(Box3d {
        bev: GroundTruthBox::new(OrientedBox::new(c.x, c.y, w, l, ry_to_yaw(label.rotation_y)), class),
        z_center: c.z,
        height: h,
    })
}

pub fn label_to_bev(label: &KittiLabel, calib: &Calibration) -> Result<GroundTruthBox, KittiError> {
    label_to_velo(label, calib).map(|b| b.bev)
}

/// Corners of the 3D box in rectified camera coordinates.
fn corners_rect(b: &Box3d, calib: &Calibration) -> Vec<Vector3<f64>> {
    let ob = b.bev.bbox;
    crate::geometry::corners(&ob)
        .vertices()
        .iter()
        .flat_map(|&[x, y]| {
            [-0.5, 0.5].map(|s| calib.velo_point_to_rect(Vector3::new(x, y, b.z_center + s * b.height)))
        })
        .collect()
}

/// Image-space box of the projected corners, clamped to the image.
fn projected_bbox(b: &Box3d, calib: &Calibration, image: ImageSize) -> [f64; 4] {
    let pts: Vec<(f64, f64)> = corners_rect(b, calib)
        .into_iter()
        .filter_map(|p| calib.project_rect(p))
        .collect();
    let (w, h) = (image.width - 1.0, image.height - 1.0);
    let mut bb = if pts.is_empty() {
        [0.0, 0.0, 1.0, 1.0]
    } else {
        let (mut l, mut t, mut r, mut btm) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (u, v) in pts {
            (l, t, r, btm) = (l.min(u), t.min(v), r.max(u), btm.max(v));
        }
        [l.clamp(0.0, w), t.clamp(0.0, h), r.clamp(0.0, w), btm.clamp(0.0, h)]
    };
    // keep the box non-degenerate so the line parses back
    if bb[2] - bb[0] < 1e-3 {
        bb[0] = (bb[2] - 1.0).max(0.0);
        bb[2] = bb[0] + 1.0;
    }
    if bb[3] - bb[1] < 1e-3 {
        bb[1] = (bb[3] - 1.0).max(0.0);
        bb[3] = bb[1] + 1.0;
    }
    bb
}

/// Inverse of [`label_to_velo`]; truncation and occlusion are unknown (-1).
pub fn box_to_label(
    b: &Box3d,
    calib: &Calibration,
    score: Option<f64>,
    image: ImageSize,
) -> Result<KittiLabel, KittiError> {
    let ob = b.bev.bbox;
    let c = calib.velo_point_to_rect(Vector3::new(ob.cx, ob.cy, b.z_center));
    let location = [c.x, c.y + b.height / 2.0, c.z];
    let rotation_y = yaw_to_ry(ob.phi);
    Ok(KittiLabel {
        class: LabelClass::Object(b.bev.class),
        truncation: -1.0,
        occlusion: -1,
        alpha: normalize_angle(rotation_y - c.x.atan2(c.z)),
        bbox: projected_bbox(b, calib, image),
        dims: [b.height, ob.w, ob.l],
        location,
        rotation_y,
        score,
    })
}

/// Whether the box center projects inside the image with positive depth.
pub fn in_image_plane(b: &Box3d, calib: &Calibration, image: ImageSize) -> bool {
    let ob = b.bev.bbox;
    let c = calib.velo_point_to_rect(Vector3::new(ob.cx, ob.cy, b.z_center));
    match calib.project_rect(c) {
        Some((u, v)) => (0.0..image.width).contains(&u) && (0.0..image.height).contains(&v),
        None => false,
    }
}

pub fn detection_to_box(d: &Detection3d) -> Box3d {
    Box3d {
        bev: GroundTruthBox::new(d.det.bbox, d.det.class),
        z_center: d.z_center,
        height: d.height,
    }
}

pub fn format_detections(dets: &[Detection3d], calib: &Calibration, image: ImageSize) -> Result<String, KittiError> {
    let mut out = String::new();
    for d in dets {
        let label = box_to_label(&detection_to_box(d), calib, Some(d.det.score), image)?;
        out.push_str(&label.to_line());
        out.push('\n');
    }
    Ok(out)
}

pub fn write_detections(
    path: &Path,
    dets: &[Detection3d],
    calib: &Calibration,
    image: ImageSize,
) -> Result<(), KittiError> {
    fs::write(path, format_detections(dets, calib, image)?).map_err(io_err(path))
}

/// Standard object-benchmark layout: `velodyne/`, `label_2/`, `calib/`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn velodyne_path(&self, id: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{id}.bin"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn calib_path(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    /// Sorted stems of the files with `ext` in `root/sub`.
    pub fn ids_in(&self, sub: &str, ext: &str) -> Result<Vec<String>, KittiError> {
        let dir = self.root.join(sub);
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = entry.map_err(io_err(&dir))?.path();
            if p.extension().is_some_and(|e| e == ext) {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn frame_ids(&self) -> Result<Vec<String>, KittiError> {
        self.ids_in("velodyne", "bin")
    }
}

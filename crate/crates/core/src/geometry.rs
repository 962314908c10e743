//! Oriented-rectangle geometry in the birds-eye-view plane.
//!
//! Boxes are rectangles with a yaw angle measured counter-clockwise from the
//! +x axis. The box length runs along the heading, the width across it.
//! Intersections are computed by clipping one box outline against the other
//! (Sutherland–Hodgman); both inputs are convex quadrilaterals so the result
//! has at most eight vertices.
//!
//! The clipping code is generic over [`Scalar`] so the same routine serves the
//! plain `f64` IoU and the forward-mode derivative used by the loss.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::erpn::Detection;

/// Vertices closer than this are merged.
pub const VERTEX_MERGE_EPS: f64 = 1e-9;
/// Intersections with a smaller area are reported as empty.
pub const MIN_INTERSECTION_AREA: f64 = 1e-12;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid can land on exactly -π after the shift for inputs like 3π
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Signed smallest difference `a - b`, wrapped into `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

/// Yawed rectangle in the BEV plane, meters and radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    /// Extent across the heading.
    pub w: f64,
    /// Extent along the heading.
    pub l: f64,
    /// Yaw in `(-π, π]`.
    pub phi: f64,
}

impl OrientedBox {
    /// Builds a box and wraps `phi` into `(-π, π]`.
    ///
    /// Panics if either extent is not strictly positive and finite.
    pub fn new(cx: f64, cy: f64, w: f64, l: f64, phi: f64) -> Self {
        assert!(
            w > 0.0 && l > 0.0 && w.is_finite() && l.is_finite(),
            "box extents must be positive, got w={w} l={l}"
        );
        Self {
            cx,
            cy,
            w,
            l,
            phi: normalize_angle(phi),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Unit heading vector.
    pub fn heading(&self) -> (f64, f64) {
        (self.phi.cos(), self.phi.sin())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (c, s) = self.heading();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= 0.5 * self.l && across.abs() <= 0.5 * self.w
    }

    /// Half of the diagonal: radius of the circumscribed circle.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }

    fn key(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.l, self.phi]
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Wraps an already counter-clockwise convex vertex list.
    pub fn from_ccw(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn centroid(&self) -> Option<[f64; 2]> {
        if self.vertices.is_empty() {
            return None;
        }
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), v| (sx + v[0], sy + v[1]));
        Some([sx / n, sy / n])
    }
}

/// The four corners of `b`, counter-clockwise, starting at front-right.
pub fn corners(b: &OrientedBox) -> ConvexPolygon {
    let pts = box_corners(b.cx, b.cy, b.w, b.l, b.phi);
    ConvexPolygon { vertices: pts.to_vec() }
}

/// Intersection of two convex counter-clockwise polygons.
pub fn clip(subject: &ConvexPolygon, clipper: &ConvexPolygon) -> ConvexPolygon {
    ConvexPolygon {
        vertices: clip_convex(&subject.vertices, &clipper.vertices),
    }
}

/// Shoelace area; zero for fewer than three vertices.
pub fn area(p: &ConvexPolygon) -> f64 {
    polygon_area(&p.vertices)
}

/// Intersection over union of two oriented boxes.
///
/// Exactly symmetric: the pair is put in a canonical order before clipping.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let center_dist = (a.cx - b.cx).hypot(a.cy - b.cy);
    if center_dist > a.circumradius() + b.circumradius() {
        return 0.0;
    }
    let (a, b) = canonical_pair(a, b);
    iou_impl::<f64>([a.cx, a.cy, a.w, a.l, a.phi], [b.cx, b.cy, b.w, b.l, b.phi])
}

/// Rotated IoU together with its partial derivatives with respect to
/// `(cx, cy, w, l, phi)` of the first box. The second box is held fixed.
pub fn rotated_iou_grad(a: &OrientedBox, b: &OrientedBox) -> (f64, [f64; 5]) {
    let center_dist = (a.cx - b.cx).hypot(a.cy - b.cy);
    if center_dist > a.circumradius() + b.circumradius() {
        return (0.0, [0.0; 5]);
    }
    let mut pa = [Dual::constant(0.0); 5];
    for (i, (slot, v)) in pa.iter_mut().zip(a.key()).enumerate() {
        *slot = Dual::variable(v, i);
    }
    let pb = b.key().map(Dual::constant);
    let iou = if canonical_order(a, b) == Ordering::Greater {
        iou_impl(pb, pa)
    } else {
        iou_impl(pa, pb)
    };
    (iou.re, iou.grad)
}

/// Greedy class-aware non-maximum suppression.
///
/// Detections are visited by descending score; a detection is suppressed when
/// an already kept detection of the same class overlaps it with IoU at or
/// above `iou_threshold`. Output is sorted by score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));

    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i].clone());
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && dets[j].class == dets[i].class
                && rotated_iou(&dets[i].bbox, &dets[j].bbox) >= iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

fn canonical_order(a: &OrientedBox, b: &OrientedBox) -> Ordering {
    a.key()
        .iter()
        .zip(b.key().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

fn canonical_pair<'a>(a: &'a OrientedBox, b: &'a OrientedBox) -> (&'a OrientedBox, &'a OrientedBox) {
    if canonical_order(a, b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

/// Arithmetic needed by the clipping routines.
pub(crate) trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn re(self) -> f64;
    fn sin_cos(self) -> (Self, Self);
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn sin_cos(self) -> (Self, Self) {
        f64::sin_cos(self)
    }
}

/// Forward-mode dual number with five tangent directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub re: f64,
    pub grad: [f64; 5],
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Self { re, grad: [0.0; 5] }
    }

    pub fn variable(re: f64, index: usize) -> Self {
        let mut grad = [0.0; 5];
        grad[index] = 1.0;
        Self { re, grad }
    }

    fn map_grad(self, scale: f64) -> [f64; 5] {
        self.grad.map(|g| g * scale)
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut grad = self.grad;
        for (g, h) in grad.iter_mut().zip(o.grad) {
            *g += h;
        }
        Self {
            re: self.re + o.re,
            grad,
        }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            re: -self.re,
            grad: self.map_grad(-1.0),
        }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut grad = [0.0; 5];
        for (k, g) in grad.iter_mut().enumerate() {
            *g = self.grad[k] * o.re + self.re * o.grad[k];
        }
        Self {
            re: self.re * o.re,
            grad,
        }
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.re;
        let mut grad = [0.0; 5];
        for (k, g) in grad.iter_mut().enumerate() {
            *g = (self.grad[k] * o.re - self.re * o.grad[k]) * inv * inv;
        }
        Self {
            re: self.re * inv,
            grad,
        }
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.re.sin_cos();
        (
            Dual {
                re: s,
                grad: self.map_grad(c),
            },
            Dual {
                re: c,
                grad: self.map_grad(-s),
            },
        )
    }
}

type Pt<T> = [T; 2];

fn box_corners<T: Scalar>(cx: T, cy: T, w: T, l: T, phi: T) -> [Pt<T>; 4] {
    let (s, c) = phi.sin_cos();
    let half = T::from_f64(0.5);
    let hl = l * half;
    let hw = w * half;
    // local (along, across) offsets, counter-clockwise
    let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
    local.map(|(a, b)| [cx + a * c - b * s, cy + a * s + b * c])
}

fn cross<T: Scalar>(o: Pt<T>, a: Pt<T>, b: Pt<T>) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub(crate) fn clip_convex<T: Scalar>(subject: &[Pt<T>], clipper: &[Pt<T>]) -> Vec<Pt<T>> {
    if subject.len() < 3 || clipper.len() < 3 {
        return Vec::new();
    }
    let mut output: Vec<Pt<T>> = subject.to_vec();
    for i in 0..clipper.len() {
        if output.is_empty() {
            break;
        }
        let edge_start = clipper[i];
        let edge_end = clipper[(i + 1) % clipper.len()];
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let side_cur = cross(edge_start, edge_end, cur);
            let side_prev = cross(edge_start, edge_end, prev);
            let cur_in = side_cur.re() >= 0.0;
            let prev_in = side_prev.re() >= 0.0;
            if cur_in != prev_in {
                let t = side_prev / (side_prev - side_cur);
                output.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    let merged = merge_close_vertices(output);
    if merged.len() < 3 || polygon_area(&merged).re() < MIN_INTERSECTION_AREA {
        return Vec::new();
    }
    merged
}

fn merge_close_vertices<T: Scalar>(pts: Vec<Pt<T>>) -> Vec<Pt<T>> {
    let close = |a: &Pt<T>, b: &Pt<T>| {
        (a[0].re() - b[0].re()).abs() < VERTEX_MERGE_EPS && (a[1].re() - b[1].re()).abs() < VERTEX_MERGE_EPS
    };
    let mut out: Vec<Pt<T>> = Vec::with_capacity(pts.len());
    for p in pts {
        if out.last().is_none_or(|q| !close(q, &p)) {
            out.push(p);
        }
    }
    while out.len() > 1 && close(&out[0], &out[out.len() - 1]) {
        out.pop();
    }
    out
}

fn polygon_area<T: Scalar>(pts: &[Pt<T>]) -> T {
    if pts.len() < 3 {
        return T::from_f64(0.0);
    }
    let mut twice = T::from_f64(0.0);
    for i in 0..pts.len() {
        let p = pts[i];
        let q = pts[(i + 1) % pts.len()];
        twice = twice + (p[0] * q[1] - q[0] * p[1]);
    }
    let a = twice * T::from_f64(0.5);
    if a.re() < 0.0 {
        -a
    } else {
        a
    }
}

fn iou_impl<T: Scalar>(a: [T; 5], b: [T; 5]) -> T {
    let pa = box_corners(a[0], a[1], a[2], a[3], a[4]);
    let pb = box_corners(b[0], b[1], b[2], b[3], b[4]);
    let inter_poly = clip_convex(&pa, &pb);
    if inter_poly.is_empty() {
        return T::from_f64(0.0);
    }
    let inter = polygon_area(&inter_poly);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union.re() <= 0.0 {
        return T::from_f64(0.0);
    }
    let iou = inter / union;
    if iou.re() > 1.0 {
        T::from_f64(1.0)
    } else {
        iou
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::ObjectClass;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;
    use std::f64::consts::FRAC_PI_4;

    fn unit_square() -> OrientedBox {
        OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0)
    }

    fn sorted(mut v: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        v.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        v
    }

    fn assert_pts_close(a: &[[f64; 2]], b: &[[f64; 2]], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(b) {
            assert!((p[0] - q[0]).abs() < tol && (p[1] - q[1]).abs() < tol, "{p:?} vs {q:?}");
        }
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(2.5 * PI) - 0.5 * PI).abs() < 1e-12);
        assert!((normalize_angle(-0.5 * PI) + 0.5 * PI).abs() < 1e-15);
    }

    #[test]
    fn square_corners() {
        let c = corners(&OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0));
        let want = vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
        assert_pts_close(&sorted(c.vertices().to_vec()), &want, 1e-15);
    }

    #[test]
    fn quarter_turn_square_has_same_vertex_set() {
        let a = corners(&OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0));
        let b = corners(&OrientedBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_2));
        assert_pts_close(&sorted(a.vertices().to_vec()), &sorted(b.vertices().to_vec()), 1e-12);
    }

    #[test]
    fn rotated_rectangle_corners_match_hand_rotation() {
        // rotate each local (±l/2, ±w/2) = (±2, ±1) by π/4 then shift by (1, 1)
        let (s, c) = FRAC_PI_4.sin_cos();
        let rot = |x: f64, y: f64| [1.0 + x * c - y * s, 1.0 + x * s + y * c];
        let want = vec![rot(2.0, -1.0), rot(2.0, 1.0), rot(-2.0, 1.0), rot(-2.0, -1.0)];
        let got = corners(&OrientedBox::new(1.0, 1.0, 2.0, 4.0, FRAC_PI_4));
        assert_pts_close(got.vertices(), &want, 1e-12);
        let centroid = got.centroid().unwrap();
        assert!((centroid[0] - 1.0).abs() < 1e-9 && (centroid[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corners_are_counter_clockwise() {
        let c = corners(&OrientedBox::new(3.0, -2.0, 1.5, 4.0, 2.3));
        let v = c.vertices();
        for i in 0..4 {
            assert!(cross(v[i], v[(i + 1) % 4], v[(i + 2) % 4]) > 0.0);
        }
    }

    #[test]
    fn self_intersection_is_identity() {
        let p = corners(&OrientedBox::new(0.3, 0.7, 1.3, 2.1, 0.4));
        let q = clip(&p, &p);
        assert!((area(&q) - area(&p)).abs() < 1e-12);
    }

    #[test]
    fn disjoint_squares_clip_to_empty() {
        let a = corners(&unit_square());
        let b = corners(&OrientedBox::new(10.0, 10.0, 1.0, 1.0, 0.0));
        assert!(clip(&a, &b).is_empty());
    }

    #[test]
    fn touching_squares_are_empty() {
        let a = corners(&unit_square());
        let b = corners(&OrientedBox::new(1.0, 0.0, 1.0, 1.0, 0.0));
        assert!(clip(&a, &b).is_empty());
        assert_eq!(
            rotated_iou(&unit_square(), &OrientedBox::new(1.0, 0.0, 1.0, 1.0, 0.0)),
            0.0
        );
    }

    #[test]
    fn square_and_diamond_make_octagon() {
        let a = corners(&unit_square());
        let b = corners(&OrientedBox::new(0.0, 0.0, 1.0, 1.0, FRAC_PI_4));
        let oct = clip(&a, &b);
        assert_eq!(oct.len(), 8);
        // regular octagon with inradius 1/2
        let want = 2.0 * (2f64.sqrt() - 1.0);
        assert!((area(&oct) - want).abs() < 1e-12);
    }

    #[test]
    fn area_edge_cases() {
        assert_eq!(area(&ConvexPolygon::empty()), 0.0);
        assert_eq!(area(&ConvexPolygon::from_ccw(vec![[0.0, 0.0], [1.0, 0.0]])), 0.0);
        assert!((area(&corners(&unit_square())) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn iou_basics() {
        let a = OrientedBox::new(2.0, 3.0, 1.7, 4.2, 1.1);
        assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-9);
        let far = OrientedBox::new(20.0, 3.0, 1.7, 4.2, 1.1);
        assert_eq!(rotated_iou(&a, &far), 0.0);
        let diamond = OrientedBox::new(0.0, 0.0, 1.0, 1.0, FRAC_PI_4);
        let iou = rotated_iou(&unit_square(), &diamond);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        assert!((iou - inter / (2.0 - inter)).abs() < 1e-12);
        assert!((iou - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn iou_of_nested_boxes() {
        let outer = OrientedBox::new(0.0, 0.0, 2.0, 4.0, 0.3);
        let inner = OrientedBox::new(0.0, 0.0, 1.0, 2.0, 0.3);
        assert!((rotated_iou(&outer, &inner) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn iou_grad_matches_central_differences() {
        let a = OrientedBox::new(0.3, -0.2, 1.6, 3.9, 0.5);
        let b = OrientedBox::new(0.0, 0.0, 1.7, 4.1, 0.2);
        let (v, g) = rotated_iou_grad(&a, &b);
        assert!((v - rotated_iou(&a, &b)).abs() < 1e-12);
        let h = 1e-6;
        for k in 0..5 {
            let mut p = a.key();
            p[k] += h;
            let plus = OrientedBox {
                cx: p[0],
                cy: p[1],
                w: p[2],
                l: p[3],
                phi: p[4],
            };
            p[k] -= 2.0 * h;
            let minus = OrientedBox {
                cx: p[0],
                cy: p[1],
                w: p[2],
                l: p[3],
                phi: p[4],
            };
            let fd = (rotated_iou(&plus, &b) - rotated_iou(&minus, &b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "component {k}: fd {fd} vs {}", g[k]);
        }
    }

    fn det(cx: f64, cy: f64, score: f64, class: ObjectClass) -> Detection {
        let mut class_probs = [0.0; 8];
        class_probs[class.index()] = 1.0;
        Detection {
            bbox: OrientedBox::new(cx, cy, 1.6, 3.9, 0.0),
            p0: score,
            class_probs,
            class,
            score,
        }
    }

    #[test]
    fn nms_single_and_duplicate() {
        let one = vec![det(5.0, 0.0, 0.7, ObjectClass::Car)];
        assert_eq!(nms(&one, 0.5), one);
        let two = vec![
            det(5.0, 0.0, 0.8, ObjectClass::Car),
            det(5.0, 0.0, 0.9, ObjectClass::Car),
        ];
        let kept = nms(&two, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_is_class_aware() {
        let dets = vec![
            det(5.0, 0.0, 0.9, ObjectClass::Car),
            det(5.0, 0.0, 0.8, ObjectClass::Van),
        ];
        assert_eq!(nms(&dets, 0.5).len(), 2);
    }

    fn arb_box() -> impl Strategy<Value = OrientedBox> {
        (-5.0..5.0f64, -5.0..5.0f64, 0.5..6.0f64, 0.5..6.0f64, -10.0..10.0f64)
            .prop_map(|(x, y, w, l, p)| OrientedBox::new(x, y, w, l, p))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = rotated_iou(&a, &b);
            prop_assert_eq!(ab, rotated_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn intersection_area_bounded(a in arb_box(), b in arb_box()) {
            let inter = area(&clip(&corners(&a), &corners(&b)));
            prop_assert!(inter >= 0.0);
            prop_assert!(inter <= a.area().min(b.area()) + 1e-9);
            let out = clip(&corners(&a), &corners(&b));
            prop_assert!(out.is_empty() || (3..=8).contains(&out.len()));
        }

        #[test]
        fn iou_rigid_motion_invariant(a in arb_box(), b in arb_box(),
                                      tx in -50.0..50.0f64, ty in -50.0..50.0f64, rot in -PI..PI) {
            let (s, c) = rot.sin_cos();
            let move_box = |o: &OrientedBox| OrientedBox::new(
                o.cx * c - o.cy * s + tx, o.cx * s + o.cy * c + ty, o.w, o.l, o.phi + rot);
            let before = rotated_iou(&a, &b);
            let after = rotated_iou(&move_box(&a), &move_box(&b));
            prop_assert!((before - after).abs() < 1e-6);
        }

        #[test]
        fn full_turn_gives_same_corners(a in arb_box()) {
            let p = box_corners(a.cx, a.cy, a.w, a.l, a.phi);
            let q = box_corners(a.cx, a.cy, a.w, a.l, a.phi + 2.0 * PI);
            for (u, v) in p.iter().zip(&q) {
                prop_assert!((u[0] - v[0]).abs() < 1e-9 && (u[1] - v[1]).abs() < 1e-9);
            }
        }

        #[test]
        fn centroid_is_center(a in arb_box()) {
            let c = corners(&a).centroid().unwrap();
            prop_assert!((c[0] - a.cx).abs() < 1e-9 && (c[1] - a.cy).abs() < 1e-9);
        }
    }
}

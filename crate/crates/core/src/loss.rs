//! Multi-part detection loss, its analytic gradient with respect to the raw
//! head outputs, and a small SGD trainer that fits a raw prediction tensor to
//! a synthetic scene.
//!
//! Per ground truth, the responsible predictor is the anchor in the cell
//! holding the box center whose current decoded box overlaps it most. The
//! objectness target is that overlap, and the gradient flows through it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::class::{ObjectClass, NUM_CLASSES};
use crate::erpn::{sigmoid, softmax, ErpnError, ErpnHead, RawPrediction, T_CLASS, T_IM, T_L, T_O, T_RE, T_W, T_X, T_Y};
use crate::geometry::{rotated_iou_grad, OrientedBox};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("ground truth {index} is centered at ({x:.3}, {y:.3}), outside the grid")]
    OutsideGrid { index: usize, x: f64, y: f64 },
    #[error(transparent)]
    Head(#[from] ErpnError),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: OrientedBox,
    pub class: ObjectClass,
}

impl GroundTruthBox {
    pub fn new(bbox: OrientedBox, class: ObjectClass) -> Self {
        Self { bbox, class }
    }

    /// `(sin φ, cos φ)`.
    pub fn euler_target(&self) -> (f64, f64) {
        self.bbox.phi.sin_cos()
    }
}

/// Constant warmup, then piecewise-constant decay.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    /// `(step, factor)`: from `step` on the rate is multiplied by `factor`.
    pub decay: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * self.warmup_factor;
        }
        self.decay
            .iter()
            .filter(|(s, _)| step >= *s)
            .fold(self.base, |lr, (_, f)| lr * f)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.1,
            warmup_steps: 100,
            warmup_factor: 0.1,
            decay: vec![(1200, 0.1), (1700, 0.1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// Loss parts, each already multiplied by its weight, and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub coord: f64,
    pub size: f64,
    pub euler: f64,
    pub obj: f64,
    pub noobj: f64,
    pub class: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,coord,size,euler,obj,noobj,class,total";

    fn finish(mut self) -> Self {
        self.total = self.coord + self.size + self.euler + self.obj + self.noobj + self.class;
        self
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.coord, self.size, self.euler, self.obj, self.noobj, self.class, self.total
        )
    }
}

/// One responsibility: ground truth `gt` is predicted by `(row, col, anchor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub gt: usize,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    pub bbox: OrientedBox,
    pub class: ObjectClass,
    /// Center offsets inside the cell, along columns then rows.
    pub offset: (f64, f64),
    /// Log-space size targets `(t̂_w, t̂_l)`.
    pub log_size: (f64, f64),
    /// `(t̂_im, t̂_re)`.
    pub euler: (f64, f64),
}

/// Picks the responsible predictor for every ground truth.
pub fn assign(head: &ErpnHead, pred: &RawPrediction, gts: &[GroundTruthBox]) -> Result<Vec<Target>, LossError> {
    head.check(pred)?;
    let cell = head.cell_meters();
    gts.iter()
        .enumerate()
        .map(|(i, gt)| {
            let b = gt.bbox;
            let (row, col) = head.cell_of(b.cx, b.cy).ok_or(LossError::OutsideGrid {
                index: i,
                x: b.cx,
                y: b.cy,
            })?;
            let mut best = (0, f64::NEG_INFINITY);
            for (a, prior) in head.anchors.iter().enumerate() {
                let decoded = head.decode_box(&pred.get_box(row, col, a), col, row, prior);
                let iou = crate::geometry::rotated_iou(&decoded, &b);
                if iou > best.1 {
                    best = (a, iou);
                }
            }
            let anchor = best.0;
            let prior = head.anchors[anchor];
            Ok(Target {
                gt: i,
                row,
                col,
                anchor,
                bbox: b,
                class: gt.class,
                offset: (
                    (b.cy - head.grid.y_range.0) / cell - col as f64,
                    (b.cx - head.grid.x_range.0) / cell - row as f64,
                ),
                log_size: ((b.w / cell / prior.p_w).ln(), (b.l / cell / prior.p_l).ln()),
                euler: gt.euler_target(),
            })
        })
        .collect()
}

fn responsible_mask(pred: &RawPrediction, targets: &[Target]) -> Vec<bool> {
    let mut mask = vec![false; pred.rows * pred.cols * pred.anchors];
    for t in targets {
        mask[(t.row * pred.cols + t.col) * pred.anchors + t.anchor] = true;
    }
    mask
}

/// `λ_coord Σ [(t_im − t̂_im)² + (t_re − t̂_re)²]` over responsible boxes.
pub fn euler_loss(pred: &RawPrediction, targets: &[Target], lambda_coord: f64) -> f64 {
    targets
        .iter()
        .map(|t| {
            let v = pred.box_slice(t.row, t.col, t.anchor);
            (v[T_IM] - t.euler.0).powi(2) + (v[T_RE] - t.euler.1).powi(2)
        })
        .sum::<f64>()
        * lambda_coord
}

fn class_loss(logits: &[f64], class: ObjectClass) -> f64 {
    let mut z = [0.0; NUM_CLASSES];
    z.copy_from_slice(logits);
    softmax(&z)
        .iter()
        .enumerate()
        .map(|(k, p)| (p - f64::from(u8::from(k == class.index()))).powi(2))
        .sum()
}

/// Every part except the Euler term.
pub fn yolo_loss(head: &ErpnHead, pred: &RawPrediction, targets: &[Target], hp: &HyperParams) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    for t in targets {
        let v = pred.box_slice(t.row, t.col, t.anchor);
        out.coord += (sigmoid(v[T_X]) - t.offset.0).powi(2) + (sigmoid(v[T_Y]) - t.offset.1).powi(2);
        out.size += (v[T_W] - t.log_size.0).powi(2) + (v[T_L] - t.log_size.1).powi(2);
        let decoded = head.decode_box(
            &pred.get_box(t.row, t.col, t.anchor),
            t.col,
            t.row,
            &head.anchors[t.anchor],
        );
        let iou = crate::geometry::rotated_iou(&decoded, &t.bbox);
        out.obj += (sigmoid(v[T_O]) - iou).powi(2);
        out.class += class_loss(&v[T_CLASS..], t.class);
    }
    out.coord *= hp.lambda_coord;
    out.size *= hp.lambda_coord;
    let mask = responsible_mask(pred, targets);
    out.noobj = hp.lambda_noobj
        * mask
            .iter()
            .enumerate()
            .filter(|(_, m)| !**m)
            .map(|(i, _)| sigmoid(pred.data[i * crate::erpn::BOX_FEATURES + T_O]).powi(2))
            .sum::<f64>();
    out.finish()
}

pub fn total_loss(
    head: &ErpnHead,
    pred: &RawPrediction,
    gts: &[GroundTruthBox],
    hp: &HyperParams,
) -> Result<LossBreakdown, LossError> {
    let targets = assign(head, pred, gts)?;
    Ok(breakdown(head, pred, &targets, hp))
}

/// The six loss parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Coord,
    Size,
    Euler,
    Obj,
    NoObj,
    Class,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Coord,
        Term::Size,
        Term::Euler,
        Term::Obj,
        Term::NoObj,
        Term::Class,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Coord => "coord",
            Term::Size => "size",
            Term::Euler => "euler",
            Term::Obj => "obj",
            Term::NoObj => "noobj",
            Term::Class => "class",
        }
    }
}

impl LossBreakdown {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Coord => self.coord,
            Term::Size => self.size,
            Term::Euler => self.euler,
            Term::Obj => self.obj,
            Term::NoObj => self.noobj,
            Term::Class => self.class,
        }
    }
}

/// Loss and its gradient with respect to every raw output.
pub fn loss_gradient(
    head: &ErpnHead,
    pred: &RawPrediction,
    gts: &[GroundTruthBox],
    hp: &HyperParams,
) -> Result<(LossBreakdown, RawPrediction), LossError> {
    let targets = assign(head, pred, gts)?;
    let mut grad = RawPrediction::zeros(pred.rows, pred.cols, pred.anchors);
    accumulate_gradient(head, pred, &targets, hp, |_, i, v| grad.data[i] += v);
    Ok((breakdown(head, pred, &targets, hp), grad))
}

/// As [`loss_gradient`], with one gradient tensor per part, in [`Term::ALL`]
/// order.
pub fn loss_gradient_terms(
    head: &ErpnHead,
    pred: &RawPrediction,
    gts: &[GroundTruthBox],
    hp: &HyperParams,
) -> Result<(LossBreakdown, Vec<RawPrediction>), LossError> {
    let targets = assign(head, pred, gts)?;
    let mut grads = vec![RawPrediction::zeros(pred.rows, pred.cols, pred.anchors); Term::ALL.len()];
    accumulate_gradient(head, pred, &targets, hp, |term, i, v| grads[term as usize].data[i] += v);
    Ok((breakdown(head, pred, &targets, hp), grads))
}

fn breakdown(head: &ErpnHead, pred: &RawPrediction, targets: &[Target], hp: &HyperParams) -> LossBreakdown {
    let mut l = yolo_loss(head, pred, targets, hp);
    l.euler = euler_loss(pred, targets, hp.lambda_coord);
    l.finish()
}

fn accumulate_gradient<F>(head: &ErpnHead, pred: &RawPrediction, targets: &[Target], hp: &HyperParams, mut add: F)
where
    F: FnMut(Term, usize, f64),
{
    let lc = hp.lambda_coord;
    let cell = head.cell_meters();

    let mask = responsible_mask(pred, targets);
    for (i, responsible) in mask.iter().enumerate() {
        if !responsible {
            let o = i * crate::erpn::BOX_FEATURES + T_O;
            let s = sigmoid(pred.data[o]);
            add(Term::NoObj, o, hp.lambda_noobj * 2.0 * s * s * (1.0 - s));
        }
    }

    for t in targets {
        let base = pred.offset(t.row, t.col, t.anchor);
        let v = pred.box_slice(t.row, t.col, t.anchor);
        let mut put = |term, k: usize, g: f64| add(term, base + k, g);
        let (sx, sy) = (sigmoid(v[T_X]), sigmoid(v[T_Y]));
        let (dsx, dsy) = (sx * (1.0 - sx), sy * (1.0 - sy));
        put(Term::Coord, T_X, lc * 2.0 * (sx - t.offset.0) * dsx);
        put(Term::Coord, T_Y, lc * 2.0 * (sy - t.offset.1) * dsy);
        put(Term::Size, T_W, lc * 2.0 * (v[T_W] - t.log_size.0));
        put(Term::Size, T_L, lc * 2.0 * (v[T_L] - t.log_size.1));
        put(Term::Euler, T_IM, lc * 2.0 * (v[T_IM] - t.euler.0));
        put(Term::Euler, T_RE, lc * 2.0 * (v[T_RE] - t.euler.1));

        // objectness, through the overlap target
        let prior = head.anchors[t.anchor];
        let raw = crate::erpn::RawBoxPrediction::from_slice(v);
        let decoded = head.decode_box(&raw, t.col, t.row, &prior);
        let (iou, d) = rotated_iou_grad(&decoded, &t.bbox);
        let so = sigmoid(v[T_O]);
        let resid = 2.0 * (so - iou);
        put(Term::Obj, T_O, resid * so * (1.0 - so));
        let r2 = v[T_IM] * v[T_IM] + v[T_RE] * v[T_RE];
        let (dphi_im, dphi_re) = if r2 > 0.0 {
            (v[T_RE] / r2, -v[T_IM] / r2)
        } else {
            (0.0, 0.0)
        };
        put(Term::Obj, T_Y, -resid * d[0] * cell * dsy);
        put(Term::Obj, T_X, -resid * d[1] * cell * dsx);
        put(Term::Obj, T_W, -resid * d[2] * decoded.w);
        put(Term::Obj, T_L, -resid * d[3] * decoded.l);
        put(Term::Obj, T_IM, -resid * d[4] * dphi_im);
        put(Term::Obj, T_RE, -resid * d[4] * dphi_re);

        let mut z = [0.0; NUM_CLASSES];
        z.copy_from_slice(&v[T_CLASS..]);
        let p = softmax(&z);
        let e: Vec<f64> = (0..NUM_CLASSES)
            .map(|k| p[k] - f64::from(u8::from(k == t.class.index())))
            .collect();
        let dot: f64 = (0..NUM_CLASSES).map(|k| e[k] * p[k]).sum();
        for k in 0..NUM_CLASSES {
            put(Term::Class, T_CLASS + k, 2.0 * p[k] * (e[k] - dot));
        }
    }
}

/// Momentum SGD state over a raw prediction tensor.
///
/// Weight decay is applied only to entries that receive a gradient in the
/// current step, so entries outside the loss stay fixed.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize) -> Self {
        Self {
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, hp: &HyperParams) {
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            let g = if g != 0.0 { g + hp.weight_decay * *p } else { 0.0 };
            *v = hp.momentum * *v - lr * g;
            *p += *v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyFit {
    pub pred: RawPrediction,
    pub curve: Vec<LossBreakdown>,
}

/// Fits a raw prediction tensor to `scene` with momentum SGD. The initial
/// tensor is the neutral one plus uniform noise of amplitude 0.01 drawn from
/// `seed`.
pub fn fit_toy(
    head: &ErpnHead,
    scene: &[GroundTruthBox],
    hp: &HyperParams,
    steps: usize,
    seed: u64,
) -> Result<ToyFit, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred = RawPrediction::neutral(head.rows(), head.cols(), &head.anchors);
    for v in &mut pred.data {
        *v += rng.random_range(-0.01..0.01);
    }
    fit_from(head, pred, scene, hp, steps)
}

/// As [`fit_toy`] from a given starting tensor.
pub fn fit_from(
    head: &ErpnHead,
    mut pred: RawPrediction,
    scene: &[GroundTruthBox],
    hp: &HyperParams,
    steps: usize,
) -> Result<ToyFit, LossError> {
    let mut opt = Sgd::new(pred.data.len());
    let mut curve = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grad) = loss_gradient(head, &pred, scene, hp)?;
        if !loss.total.is_finite() {
            return Err(LossError::Diverged { step });
        }
        curve.push(loss);
        opt.step(&mut pred.data, &grad.data, hp.lr.at(step), hp);
        if pred.data.iter().any(|v| !v.is_finite()) {
            return Err(LossError::Diverged { step });
        }
    }
    let last = total_loss(head, &pred, scene, hp)?;
    if !last.total.is_finite() {
        return Err(LossError::Diverged { step: steps });
    }
    curve.push(last);
    Ok(ToyFit { pred, curve })
}
